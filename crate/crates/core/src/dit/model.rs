//! The full transformer: token embedding (no patchification — one token per
//! latent cell), sinusoidal timestep conditioning, alternating
//! spatial/temporal blocks, and the zero-initialized velocity head.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{Binder, Linear, P};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

use super::blocks::{spatial_block, temporal_block, AttnProbe, BlockWeights};
use super::positions::{SegmentData, TokenSequence};
use super::DiTConfig;

const LN_EPS: f64 = 1e-6;
const T_FREQ_DIM: usize = 128;

#[derive(Debug, Clone)]
pub struct DiTModel<E: Scalar> {
    pub cfg: DiTConfig,
    pub text_embed: P<E>,
    pub token_in: Linear<E>,
    pub t_mlp1: Linear<E>,
    pub t_mlp2: Linear<E>,
    pub blocks: Vec<BlockWeights<E>>,
    pub final_mod: Linear<E>,
    pub head: Linear<E>,
}

impl<E: Scalar> DiTModel<E> {
    pub fn init(cfg: &DiTConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let mut blocks = Vec::new();
        for i in 0..cfg.n_spatial_layers {
            blocks.push(BlockWeights::init_spatial(&format!("dit.s{i}"), cfg, rng));
            blocks.push(BlockWeights::init_temporal(&format!("dit.t{i}"), cfg, rng));
        }
        Ok(DiTModel {
            cfg: cfg.clone(),
            text_embed: P::new(
                "dit.text_embed",
                Tensor::randn(&[cfg.vocab_size, d], 0.02, rng),
            ),
            token_in: Linear::init("dit.token_in", cfg.in_channels, d, 0.02, rng),
            t_mlp1: Linear::init("dit.t_mlp1", T_FREQ_DIM, d, 0.02, rng),
            t_mlp2: Linear::init("dit.t_mlp2", d, d, 0.02, rng),
            blocks,
            final_mod: Linear::init_zero("dit.final_mod", d, 2 * d),
            head: Linear::init_zero("dit.head", d, cfg.out_channels),
        })
    }

    pub fn params(&self) -> Vec<&P<E>> {
        let mut out = vec![&self.text_embed];
        out.extend(self.token_in.params());
        out.extend(self.t_mlp1.params());
        out.extend(self.t_mlp2.params());
        for b in &self.blocks {
            out.extend(b.params());
        }
        out.extend(self.final_mod.params());
        out.extend(self.head.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut P<E>> {
        let mut out = vec![&mut self.text_embed];
        out.extend(self.token_in.params_mut());
        out.extend(self.t_mlp1.params_mut());
        out.extend(self.t_mlp2.params_mut());
        for b in &mut self.blocks {
            out.extend(b.params_mut());
        }
        out.extend(self.final_mod.params_mut());
        out.extend(self.head.params_mut());
        out
    }

    /// Timestep embedding: sinusoidal features through a two-layer MLP.
    fn timestep_embedding(&self, bind: &Binder<E>, t: f64) -> Result<Var<E>> {
        let half = T_FREQ_DIM / 2;
        let mut feats = vec![E::ZERO; T_FREQ_DIM];
        for i in 0..half {
            let freq = (10_000f64).powf(-(i as f64) / half as f64);
            let angle = t * 1000.0 * freq;
            feats[i] = E::from_f64(angle.sin());
            feats[half + i] = E::from_f64(angle.cos());
        }
        let x = Var::constant(Tensor::from_vec(&[1, T_FREQ_DIM], feats)?);
        let h = self.t_mlp1.forward(bind, &x)?.silu();
        self.t_mlp2.forward(bind, &h)
    }
}

/// Full forward pass: conditioned latent grid + token sequence + timestep to
/// a velocity prediction of shape (frames, h, w, out_channels).
///
/// `cond` must carry `cfg.in_channels` per cell; visual segments of `seq`
/// partition its frames in order.
pub fn dit_forward<E: Scalar>(
    model: &DiTModel<E>,
    bind: &Binder<E>,
    cond: &Var<E>,
    seq: &TokenSequence,
    t: f64,
    probe: Option<&AttnProbe<E>>,
) -> Result<Var<E>> {
    let cfg = &model.cfg;
    let shape = cond.shape().to_vec();
    if shape.len() != 4 || shape[3] != cfg.in_channels {
        return Err(Error::invalid(format!(
            "conditioned input carries {} channels, model expects {}",
            shape.get(3).copied().unwrap_or(0),
            cfg.in_channels
        )));
    }
    let (frames, h, w) = (shape[0], shape[1], shape[2]);
    let vis_frames: usize = seq
        .segments
        .iter()
        .filter_map(|s| match s.data {
            SegmentData::Visual { frames, .. } => Some(frames),
            _ => None,
        })
        .sum();
    if vis_frames != frames {
        return Err(Error::invalid(format!(
            "sequence holds {vis_frames} visual frames but conditioned input has {frames}"
        )));
    }

    let flat = cond.reshape(&[frames * h * w, cfg.in_channels])?;
    let tokens = model.token_in.forward(bind, &flat)?;
    let embed = bind.bind(&model.text_embed);

    // build per-segment state
    let mut state = Vec::with_capacity(seq.segments.len());
    let mut frame_cursor = 0usize;
    for seg in &seq.segments {
        match &seg.data {
            SegmentData::Text { ids } => {
                for &id in ids {
                    if id >= cfg.vocab_size {
                        return Err(Error::invalid(format!(
                            "text token id {id} outside vocab {}",
                            cfg.vocab_size
                        )));
                    }
                }
                state.push(embed.index_select_rows(ids)?);
            }
            SegmentData::Visual {
                frames: sf,
                h: sh,
                w: sw,
            } => {
                if *sh != h || *sw != w {
                    return Err(Error::invalid(format!(
                        "visual segment grid {sh}x{sw} differs from input grid {h}x{w}"
                    )));
                }
                state.push(tokens.slice(0, frame_cursor * h * w, sf * h * w)?);
                frame_cursor += sf;
            }
        }
    }

    let t_emb = model.timestep_embedding(bind, t)?;
    for (i, block) in model.blocks.iter().enumerate() {
        state = if i % 2 == 0 {
            spatial_block(bind, block, seq, &state, &t_emb, cfg, probe)?
        } else {
            temporal_block(bind, block, seq, &state, &t_emb, cfg, probe)?
        };
    }

    // final modulated norm + linear head over visual tokens, in frame order
    let vis_states: Vec<Var<E>> = seq
        .segments
        .iter()
        .zip(&state)
        .filter(|(seg, _)| matches!(seg.data, SegmentData::Visual { .. }))
        .map(|(_, s)| s.clone())
        .collect();
    let visual = Var::concat(&vis_states, 0)?;
    let mod_out = model.final_mod.forward(bind, &t_emb)?;
    let scale = mod_out.slice(1, 0, cfg.d_model)?;
    let shift = mod_out.slice(1, cfg.d_model, cfg.d_model)?;
    let n = visual.shape()[0];
    let normed = visual
        .layer_norm(LN_EPS)
        .mul(&scale.add_scalar(E::ONE).broadcast_rows(n)?)?
        .add(&shift.broadcast_rows(n)?)?;
    let out = model.head.forward(bind, &normed)?;
    out.reshape(&[frames, h, w, cfg.out_channels])
}
