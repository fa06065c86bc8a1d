//! VAE encoder, decoder and the hybrid patch discriminator.
//!
//! Every convolution pads the time axis on the left only, so latent frame j
//! depends on pixel frames <= j * r_t exactly, and pixel frame k of the
//! decode depends on latent frames <= ceil(k / r_t).

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{Binder, Conv3d, P};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

use super::CodecConfig;

fn log2(x: usize) -> usize {
    x.trailing_zeros() as usize
}

/// Stage body: a strided main conv followed by a residual refinement conv.
#[derive(Debug, Clone)]
struct Stage<E: Scalar> {
    main: Conv3d<E>,
    refine: Conv3d<E>,
}

impl<E: Scalar> Stage<E> {
    fn init(
        name: &str,
        cin: usize,
        cout: usize,
        stride: (usize, usize, usize),
        rng: &mut Rng,
    ) -> Self {
        Stage {
            main: Conv3d::init(&format!("{name}.main"), (3, 3, 3), cin, cout, stride, rng),
            refine: Conv3d::init(&format!("{name}.ref"), (3, 3, 3), cout, cout, (1, 1, 1), rng),
        }
    }

    fn forward(&self, bind: &Binder<E>, x: &Var<E>) -> Result<Var<E>> {
        let h = self.main.forward(bind, x)?.silu();
        h.add(&self.refine.forward(bind, &h)?)
    }

    fn flops(&self, input_shape: &[usize]) -> Result<u64> {
        let mut shape = input_shape.to_vec();
        let total = self.main.flops(&shape)?;
        let (ot, oh, ow) = self.main.spec.out_shape(&shape, self.main.w.value.shape())?;
        shape = vec![ot, oh, ow, self.main.w.value.shape()[4]];
        Ok(total + self.refine.flops(&shape)?)
    }

    fn params(&self) -> Vec<&P<E>> {
        let mut out = self.main.params();
        out.extend(self.refine.params());
        out
    }

    fn params_mut(&mut self) -> Vec<&mut P<E>> {
        let mut out = self.main.params_mut();
        out.extend(self.refine.params_mut());
        out
    }
}

#[derive(Debug, Clone)]
pub struct Encoder<E: Scalar> {
    pub stem: Conv3d<E>,
    downs: Vec<Stage<E>>,
    mid: Stage<E>,
    pub head: Conv3d<E>,
}

impl<E: Scalar> Encoder<E> {
    pub fn init(prefix: &str, cfg: &CodecConfig, rng: &mut Rng) -> Self {
        let widths = &cfg.enc_widths;
        let w_at = |i: usize| widths[i.min(widths.len() - 1)];
        let stem = Conv3d::init(&format!("{prefix}.stem"), (3, 3, 3), 3, w_at(0), (1, 1, 1), rng);
        let mut downs = Vec::new();
        let mut cur = w_at(0);
        let mut stage = 1usize;
        for _ in 0..log2(cfg.r_h) {
            let next = w_at(stage);
            downs.push(Stage::init(
                &format!("{prefix}.down{}", downs.len()),
                cur,
                next,
                (1, 2, 2),
                rng,
            ));
            cur = next;
            stage += 1;
        }
        for _ in 0..log2(cfg.r_t) {
            let next = w_at(stage);
            downs.push(Stage::init(
                &format!("{prefix}.down{}", downs.len()),
                cur,
                next,
                (2, 1, 1),
                rng,
            ));
            cur = next;
            stage += 1;
        }
        let mid = Stage::init(&format!("{prefix}.mid"), cur, cur, (1, 1, 1), rng);
        let mut head = Conv3d::init(
            &format!("{prefix}.head"),
            (1, 1, 1),
            cur,
            2 * cfg.latent_channels,
            (1, 1, 1),
            rng,
        );
        // start the posterior tight: bias the logvar half low so early
        // reconstructions are not washed out by sampling noise
        {
            let c = cfg.latent_channels;
            let bias = head.b.value.data_mut();
            for v in &mut bias[c..2 * c] {
                *v = E::from_f64(-6.0);
            }
        }
        Encoder {
            stem,
            downs,
            mid,
            head,
        }
    }

    /// Returns (mean, logvar), each (T+1, h, w, C).
    pub fn forward(&self, bind: &Binder<E>, x: &Var<E>, cfg: &CodecConfig) -> Result<(Var<E>, Var<E>)> {
        cfg.validate_video_shape(x.shape())?;
        let mut h = self.stem.forward(bind, x)?.silu();
        for stage in &self.downs {
            h = stage.forward(bind, &h)?;
        }
        h = self.mid.forward(bind, &h)?;
        let out = self.head.forward(bind, &h)?;
        let c = cfg.latent_channels;
        let mean = out.slice(3, 0, c)?;
        let logvar = out.slice(3, c, c)?;
        Ok((mean, logvar))
    }

    pub fn params(&self) -> Vec<&P<E>> {
        let mut out = self.stem.params();
        for d in &self.downs {
            out.extend(d.params());
        }
        out.extend(self.mid.params());
        out.extend(self.head.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut P<E>> {
        let mut out = self.stem.params_mut();
        for d in &mut self.downs {
            out.extend(d.params_mut());
        }
        out.extend(self.mid.params_mut());
        out.extend(self.head.params_mut());
        out
    }
}

#[derive(Debug, Clone)]
enum UpStage {
    Time,
    Space,
}

#[derive(Debug, Clone)]
pub struct Decoder<E: Scalar> {
    pub head: Conv3d<E>,
    mid: Stage<E>,
    ups: Vec<(UpStage, Stage<E>)>,
    pub final_conv: Conv3d<E>,
    pub widths: Vec<usize>,
}

impl<E: Scalar> Decoder<E> {
    pub fn init(prefix: &str, cfg: &CodecConfig, rng: &mut Rng) -> Self {
        Self::init_with_widths(prefix, cfg, &cfg.dec_widths, rng)
    }

    pub fn init_with_widths(
        prefix: &str,
        cfg: &CodecConfig,
        widths: &[usize],
        rng: &mut Rng,
    ) -> Self {
        let w_at = |i: usize| widths[i.min(widths.len() - 1)];
        let head = Conv3d::init(
            &format!("{prefix}.head"),
            (1, 1, 1),
            cfg.latent_channels,
            w_at(0),
            (1, 1, 1),
            rng,
        );
        let mid = Stage::init(&format!("{prefix}.mid"), w_at(0), w_at(0), (1, 1, 1), rng);
        let mut ups = Vec::new();
        let mut cur = w_at(0);
        let mut stage = 1usize;
        for _ in 0..log2(cfg.r_t) {
            let next = w_at(stage);
            ups.push((
                UpStage::Time,
                Stage::init(&format!("{prefix}.up{}", ups.len()), cur, next, (1, 1, 1), rng),
            ));
            cur = next;
            stage += 1;
        }
        for _ in 0..log2(cfg.r_h) {
            let next = w_at(stage);
            ups.push((
                UpStage::Space,
                Stage::init(&format!("{prefix}.up{}", ups.len()), cur, next, (1, 1, 1), rng),
            ));
            cur = next;
            stage += 1;
        }
        let final_conv = Conv3d::init(
            &format!("{prefix}.final"),
            (3, 3, 3),
            cur,
            3,
            (1, 1, 1),
            rng,
        );
        Decoder {
            head,
            mid,
            ups,
            final_conv,
            widths: widths.to_vec(),
        }
    }

    pub fn forward(&self, bind: &Binder<E>, z: &Var<E>) -> Result<Var<E>> {
        let mut h = self.head.forward(bind, z)?.silu();
        h = self.mid.forward(bind, &h)?;
        for (kind, stage) in &self.ups {
            h = match kind {
                UpStage::Time => h.upsample_time_causal(2)?,
                UpStage::Space => h.upsample_linear_hw(2, 2)?,
            };
            h = stage.forward(bind, &h)?;
        }
        self.final_conv.forward(bind, &h)
    }

    /// Analytic multiply-add count for decoding a latent of the given shape.
    pub fn flops(&self, latent_shape: &[usize]) -> Result<u64> {
        let mut shape = latent_shape.to_vec();
        let mut total = self.head.flops(&shape)?;
        shape[3] = self.head.w.value.shape()[4];
        total += self.mid.flops(&shape)?;
        for (kind, stage) in &self.ups {
            match kind {
                UpStage::Time => shape[0] = 1 + (shape[0] - 1) * 2,
                UpStage::Space => {
                    shape[1] *= 2;
                    shape[2] *= 2;
                }
            }
            total += stage.flops(&shape)?;
            shape[3] = stage.main.w.value.shape()[4];
        }
        total += self.final_conv.flops(&shape)?;
        Ok(total)
    }

    pub fn params(&self) -> Vec<&P<E>> {
        let mut out = self.head.params();
        out.extend(self.mid.params());
        for (_, s) in &self.ups {
            out.extend(s.params());
        }
        out.extend(self.final_conv.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut P<E>> {
        let mut out = self.head.params_mut();
        out.extend(self.mid.params_mut());
        for (_, s) in &mut self.ups {
            out.extend(s.params_mut());
        }
        out.extend(self.final_conv.params_mut());
        out
    }
}

#[derive(Debug, Clone)]
pub struct Vae<E: Scalar> {
    pub cfg: CodecConfig,
    pub encoder: Encoder<E>,
    pub decoder: Decoder<E>,
}

impl<E: Scalar> Vae<E> {
    pub fn init(cfg: &CodecConfig, rng: &mut Rng) -> Self {
        Vae {
            cfg: cfg.clone(),
            encoder: Encoder::init("vae.enc", cfg, rng),
            decoder: Decoder::init("vae.dec", cfg, rng),
        }
    }

    pub fn encode(&self, bind: &Binder<E>, x: &Var<E>) -> Result<(Var<E>, Var<E>)> {
        self.encoder.forward(bind, x, &self.cfg)
    }

    pub fn decode(&self, bind: &Binder<E>, z: &Var<E>) -> Result<Var<E>> {
        self.decoder.forward(bind, z)
    }

    /// Posterior mean latent, no gradient graph. This is what downstream
    /// training consumes (latents are packed once, off the training path).
    pub fn encode_mean(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        let bind = Binder::frozen();
        let (mean, _) = self.encode(&bind, &Var::constant(x.clone()))?;
        Ok(mean.value().clone())
    }

    pub fn decode_tensor(&self, z: &Tensor<E>) -> Result<Tensor<E>> {
        let bind = Binder::frozen();
        Ok(self.decode(&bind, &Var::constant(z.clone()))?.value().clone())
    }

    /// Reparameterized posterior sample with fresh seeded noise.
    pub fn sample_latent(mean: &Var<E>, logvar: &Var<E>, rng: &mut Rng) -> Result<Var<E>> {
        let noise = Var::constant(Tensor::randn(mean.shape(), 1.0, rng));
        let std = logvar.scale(E::from_f64(0.5)).exp();
        mean.add(&std.mul(&noise)?)
    }

    pub fn params(&self) -> Vec<&P<E>> {
        let mut out = self.encoder.params();
        out.extend(self.decoder.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut P<E>> {
        let mut out = self.encoder.params_mut();
        out.extend(self.decoder.params_mut());
        out
    }
}

/// Patch discriminator: per-frame spatial downsampling stages plus one causal
/// temporal stage, emitting a logit map over space and time.
#[derive(Debug, Clone)]
pub struct Discriminator<E: Scalar> {
    stages: Vec<Conv3d<E>>,
    temporal: Conv3d<E>,
    head: Conv3d<E>,
}

impl<E: Scalar> Discriminator<E> {
    pub fn init(prefix: &str, spatial_stages: usize, width: usize, rng: &mut Rng) -> Self {
        let mut stages = Vec::new();
        let mut cur = 3usize;
        for i in 0..spatial_stages {
            let next = width << i.min(2);
            stages.push(Conv3d::init(
                &format!("{prefix}.s{i}"),
                (1, 4, 4),
                cur,
                next,
                (1, 2, 2),
                rng,
            ));
            cur = next;
        }
        let temporal = Conv3d::init(&format!("{prefix}.t"), (3, 1, 1), cur, cur, (1, 1, 1), rng);
        let head = Conv3d::init(&format!("{prefix}.head"), (1, 1, 1), cur, 1, (1, 1, 1), rng);
        Discriminator {
            stages,
            temporal,
            head,
        }
    }

    /// Logit map (T, H/2^stages, W/2^stages, 1).
    pub fn forward(&self, bind: &Binder<E>, x: &Var<E>) -> Result<Var<E>> {
        if x.shape().len() != 4 || x.shape()[3] != 3 {
            return Err(Error::invalid(format!(
                "discriminator expects (T,H,W,3), got {:?}",
                x.shape()
            )));
        }
        let mut h = x.clone();
        for conv in &self.stages {
            h = conv.forward(bind, &h)?.silu();
        }
        h = self.temporal.forward(bind, &h)?.silu();
        self.head.forward(bind, &h)
    }

    pub fn params(&self) -> Vec<&P<E>> {
        let mut out: Vec<&P<E>> = Vec::new();
        for s in &self.stages {
            out.extend(s.params());
        }
        out.extend(self.temporal.params());
        out.extend(self.head.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut P<E>> {
        let mut out: Vec<&mut P<E>> = Vec::new();
        for s in &mut self.stages {
            out.extend(s.params_mut());
        }
        out.extend(self.temporal.params_mut());
        out.extend(self.head.params_mut());
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Binder;

    fn desk_vae() -> Vae<f32> {
        let mut rng = Rng::seed_from(30);
        Vae::init(&CodecConfig::desk(), &mut rng)
    }

    #[test]
    fn encode_decode_shapes() {
        let vae = desk_vae();
        let mut rng = Rng::seed_from(31);
        let x = Tensor::<f32>::rand_uniform(&[5, 32, 32, 3], 0.0, 1.0, &mut rng);
        let z = vae.encode_mean(&x).unwrap();
        assert_eq!(z.shape(), &[3, 8, 8, 8]);
        let y = vae.decode_tensor(&z).unwrap();
        assert_eq!(y.shape(), x.shape());
    }

    #[test]
    fn image_case_single_frame() {
        let vae = desk_vae();
        let mut rng = Rng::seed_from(32);
        let x = Tensor::<f32>::rand_uniform(&[1, 32, 32, 3], 0.0, 1.0, &mut rng);
        let z = vae.encode_mean(&x).unwrap();
        assert_eq!(z.shape(), &[1, 8, 8, 8]);
        let y = vae.decode_tensor(&z).unwrap();
        assert_eq!(y.shape(), x.shape());
    }

    #[test]
    fn production_ratio_shape_preset() {
        let cfg = CodecConfig::production_shape_preset();
        let mut rng = Rng::seed_from(33);
        let vae = Vae::<f32>::init(&cfg, &mut rng);
        let x = Tensor::<f32>::rand_uniform(&[9, 32, 32, 3], 0.0, 1.0, &mut rng);
        let z = vae.encode_mean(&x).unwrap();
        assert_eq!(z.shape(), &[3, 2, 2, 48]);
        let y = vae.decode_tensor(&z).unwrap();
        assert_eq!(y.shape(), x.shape());
    }

    #[test]
    fn encoder_is_causal_bit_for_bit() {
        let vae = desk_vae();
        let mut rng = Rng::seed_from(34);
        let x = Tensor::<f32>::rand_uniform(&[5, 16, 16, 3], 0.0, 1.0, &mut rng);
        let z_full = vae.encode_mean(&x).unwrap();
        // zero pixel frame 4 (latent frame 2 covers pixels 3..=4);
        // latent frames 0..=1 depend only on pixels 0..=2
        let mut x2 = x.clone();
        let frame = 16 * 16 * 3;
        for v in &mut x2.data_mut()[4 * frame..5 * frame] {
            *v = 0.0;
        }
        let z_cut = vae.encode_mean(&x2).unwrap();
        let lat_frame = 4 * 4 * 8;
        assert_eq!(
            &z_full.data()[..2 * lat_frame],
            &z_cut.data()[..2 * lat_frame],
            "latent prefix changed under future-frame perturbation"
        );
    }

    #[test]
    fn decoder_is_causal_bit_for_bit() {
        let vae = desk_vae();
        let mut rng = Rng::seed_from(35);
        let z = Tensor::<f32>::randn(&[3, 4, 4, 8], 1.0, &mut rng);
        let y_full = vae.decode_tensor(&z).unwrap();
        // perturb latent frame 2; pixel frames 0..=1 must be unchanged
        let mut z2 = z.clone();
        let lat_frame = 4 * 4 * 8;
        for v in &mut z2.data_mut()[2 * lat_frame..3 * lat_frame] {
            *v += 1.0;
        }
        let y_cut = vae.decode_tensor(&z2).unwrap();
        let frame = 16 * 16 * 3;
        assert_eq!(
            &y_full.data()[..2 * frame],
            &y_cut.data()[..2 * frame],
            "pixel prefix changed under future-latent perturbation"
        );
    }

    #[test]
    fn discriminator_logit_map_shape() {
        let mut rng = Rng::seed_from(36);
        let disc = Discriminator::<f32>::init("d", 3, 16, &mut rng);
        let x = Tensor::<f32>::rand_uniform(&[5, 32, 32, 3], 0.0, 1.0, &mut rng);
        let bind = Binder::frozen();
        let y = disc.forward(&bind, &Var::constant(x)).unwrap();
        assert_eq!(y.shape(), &[5, 4, 4, 1]);
    }
}
