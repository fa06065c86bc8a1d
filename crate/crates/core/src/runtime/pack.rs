//! Model/optimizer packing into the checkpoint container and back.

use crate::codec::{CodecConfig, Vae};
use crate::dit::{DiTConfig, DiTModel};
use crate::error::{Error, Result};
use crate::nn::Adam;
use crate::rng::Rng;
use crate::tensor::Tensor;

use super::checkpoint::Checkpoint;

fn pack_params(ckpt: &mut Checkpoint, params: Vec<&crate::nn::P<f32>>) -> Result<()> {
    for p in params {
        ckpt.insert_tensor(&p.name, &p.value)?;
    }
    Ok(())
}

fn pack_opt(ckpt: &mut Checkpoint, opt: &Adam) -> Result<()> {
    for (name, values) in opt.export_state() {
        let n = values.len();
        ckpt.insert_tensor(&name, &Tensor::<f64>::from_vec(&[n], values)?)?;
    }
    ckpt.extra.insert("opt.step".into(), opt.step.to_string());
    ckpt.extra.insert("opt.lr".into(), opt.lr.to_string());
    Ok(())
}

fn unpack_opt(ckpt: &Checkpoint, opt: &mut Adam) -> Result<()> {
    let mut entries = Vec::new();
    for name in ckpt.names() {
        if name.starts_with("opt.") {
            let t: Tensor<f64> = ckpt.tensor(name)?;
            entries.push((name.to_string(), t.to_vec()));
        }
    }
    let step: u64 = ckpt
        .extra
        .get("opt.step")
        .and_then(|s| s.parse().ok())
        .unwrap_or(0);
    opt.import_state(&entries, step);
    if let Some(lr) = ckpt.extra.get("opt.lr").and_then(|s| s.parse().ok()) {
        opt.lr = lr;
    }
    Ok(())
}

fn fill_params(ckpt: &Checkpoint, params: Vec<&mut crate::nn::P<f32>>) -> Result<()> {
    for p in params {
        let t: Tensor<f32> = ckpt.tensor(&p.name)?;
        if t.shape() != p.value.shape() {
            return Err(Error::Checkpoint(format!(
                "parameter {} has shape {:?} in the checkpoint, model expects {:?}",
                p.name,
                t.shape(),
                p.value.shape()
            )));
        }
        p.value = t;
    }
    Ok(())
}

pub fn pack_vae(
    vae: &Vae<f32>,
    opt: Option<&Adam>,
    phase: &str,
    step: u64,
    config_hash: &str,
) -> Result<Checkpoint> {
    let mut ckpt = Checkpoint::new(phase, step, config_hash);
    ckpt.extra
        .insert("codec_config".into(), serde_json::to_string(&vae.cfg)?);
    pack_params(&mut ckpt, vae.params())?;
    if let Some(opt) = opt {
        pack_opt(&mut ckpt, opt)?;
    }
    Ok(ckpt)
}

pub fn unpack_vae(ckpt: &Checkpoint) -> Result<(Vae<f32>, Adam)> {
    let cfg: CodecConfig = serde_json::from_str(
        ckpt.extra
            .get("codec_config")
            .ok_or_else(|| Error::Checkpoint("missing codec_config".into()))?,
    )?;
    let mut vae = Vae::init(&cfg, &mut Rng::seed_from(0));
    fill_params(ckpt, vae.params_mut())?;
    let mut opt = Adam::new(1e-3);
    unpack_opt(ckpt, &mut opt)?;
    Ok((vae, opt))
}

pub fn pack_dit(
    model: &DiTModel<f32>,
    opt: Option<&Adam>,
    phase: &str,
    step: u64,
    config_hash: &str,
) -> Result<Checkpoint> {
    let mut ckpt = Checkpoint::new(phase, step, config_hash);
    ckpt.extra
        .insert("dit_config".into(), serde_json::to_string(&model.cfg)?);
    pack_params(&mut ckpt, model.params())?;
    if let Some(opt) = opt {
        pack_opt(&mut ckpt, opt)?;
    }
    Ok(ckpt)
}

pub fn unpack_dit(ckpt: &Checkpoint) -> Result<(DiTModel<f32>, Adam)> {
    let cfg: DiTConfig = serde_json::from_str(
        ckpt.extra
            .get("dit_config")
            .ok_or_else(|| Error::Checkpoint("missing dit_config".into()))?,
    )?;
    let mut model = DiTModel::init(&cfg, &mut Rng::seed_from(0))?;
    fill_params(ckpt, model.params_mut())?;
    let mut opt = Adam::new(1e-4);
    unpack_opt(ckpt, &mut opt)?;
    Ok((model, opt))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dit::DiTConfig;

    #[test]
    fn vae_roundtrip_preserves_every_parameter() {
        let mut rng = Rng::seed_from(420);
        let vae = Vae::<f32>::init(&CodecConfig::desk(), &mut rng);
        let mut opt = Adam::new(2e-3);
        // give the optimizer some state
        let grads: std::collections::BTreeMap<String, Tensor<f32>> = vae
            .params()
            .iter()
            .map(|p| (p.name.clone(), Tensor::full(p.value.shape(), 0.01)))
            .collect();
        let mut vae2 = vae.clone();
        opt.apply(vae2.params_mut(), &grads).unwrap();
        let ckpt = pack_vae(&vae2, Some(&opt), "vae", 1, "h").unwrap();
        let bytes = ckpt.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        let (vae3, opt3) = unpack_vae(&back).unwrap();
        for (a, b) in vae2.params().iter().zip(vae3.params()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value.data(), b.value.data());
        }
        assert_eq!(opt3.step, 1);
        // continuing one more step from restored state matches
        let mut va = vae2.clone();
        let mut vb = vae3.clone();
        let mut oa = opt;
        let mut ob = opt3;
        oa.apply(va.params_mut(), &grads).unwrap();
        ob.apply(vb.params_mut(), &grads).unwrap();
        for (a, b) in va.params().iter().zip(vb.params()) {
            assert_eq!(a.value.data(), b.value.data(), "{} diverged", a.name);
        }
    }

    #[test]
    fn dit_roundtrip() {
        let cfg = DiTConfig {
            d_model: 24,
            n_heads: 2,
            n_spatial_layers: 1,
            n_temporal_layers: 1,
            window_h: 2,
            window_w: 2,
            rope_base: 100.0,
            in_channels: 17,
            out_channels: 8,
            vocab_size: 40,
            mlp_ratio: 2,
            max_text_tokens: 16,
        };
        let mut rng = Rng::seed_from(421);
        let model = DiTModel::<f32>::init(&cfg, &mut rng).unwrap();
        let ckpt = pack_dit(&model, None, "pretrain", 0, "h").unwrap();
        let (back, _) = unpack_dit(&ckpt).unwrap();
        for (a, b) in model.params().iter().zip(back.params()) {
            assert_eq!(a.value.data(), b.value.data());
        }
        assert_eq!(back.cfg.d_model, 24);
    }
}
