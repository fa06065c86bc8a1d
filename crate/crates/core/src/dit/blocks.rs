//! Spatial and temporal transformer blocks.
//!
//! Spatial blocks: joint attention per shot. Visual tokens attend to their
//! own frame's visual tokens plus the shot's text; text tokens attend to the
//! shot's text and all of the shot's visual tokens. Separate QKV / MLP /
//! adaptive-norm weights per modality; Q and K are RMS-normalized (learned
//! per-head scale) and rotary-encoded before logits.
//!
//! Temporal blocks: visual-only attention within each spatial window across
//! all frames and shots; text segments pass through untouched.

use std::cell::RefCell;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{Binder, Linear, P};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

use super::positions::{Modality, SegmentData, TokenSequence};
use super::rope::rope_tables;
use super::DiTConfig;

const LN_EPS: f64 = 1e-6;
const QK_EPS: f64 = 1e-8;

/// Attention-weight capture for topology checks: one record per
/// (group, head) holding the global row ids and the realized weight matrix.
pub struct AttnProbe<E: Scalar> {
    pub records: RefCell<Vec<(Vec<usize>, Tensor<E>)>>,
}

impl<E: Scalar> AttnProbe<E> {
    pub fn new() -> Self {
        AttnProbe {
            records: RefCell::new(Vec::new()),
        }
    }
}

impl<E: Scalar> Default for AttnProbe<E> {
    fn default() -> Self {
        Self::new()
    }
}

/// One modality's weights within a block.
#[derive(Debug, Clone)]
pub struct StreamWeights<E: Scalar> {
    pub q: Linear<E>,
    pub k: Linear<E>,
    pub v: Linear<E>,
    pub o: Linear<E>,
    pub q_scale: P<E>,
    pub k_scale: P<E>,
    pub fc1: Linear<E>,
    pub fc2: Linear<E>,
    pub ada: Linear<E>,
}

impl<E: Scalar> StreamWeights<E> {
    pub fn init(name: &str, cfg: &DiTConfig, rng: &mut Rng) -> Self {
        let d = cfg.d_model;
        let hidden = d * cfg.mlp_ratio;
        StreamWeights {
            q: Linear::init(&format!("{name}.q"), d, d, 0.02, rng),
            k: Linear::init(&format!("{name}.k"), d, d, 0.02, rng),
            v: Linear::init(&format!("{name}.v"), d, d, 0.02, rng),
            o: Linear::init(&format!("{name}.o"), d, d, 0.02, rng),
            q_scale: P::new(format!("{name}.q_scale"), Tensor::full(&[cfg.n_heads], E::ONE)),
            k_scale: P::new(format!("{name}.k_scale"), Tensor::full(&[cfg.n_heads], E::ONE)),
            fc1: Linear::init(&format!("{name}.fc1"), d, hidden, 0.02, rng),
            fc2: Linear::init(&format!("{name}.fc2"), hidden, d, 0.02, rng),
            // adaptive-norm projection starts at zero: gates are zero and
            // every block is the identity at init
            ada: Linear::init_zero(&format!("{name}.ada"), d, 6 * d),
        }
    }

    pub fn params(&self) -> Vec<&P<E>> {
        let mut out = Vec::new();
        for l in [&self.q, &self.k, &self.v, &self.o, &self.fc1, &self.fc2, &self.ada] {
            out.extend(l.params());
        }
        out.push(&self.q_scale);
        out.push(&self.k_scale);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut P<E>> {
        let mut out = Vec::new();
        for l in [
            &mut self.q,
            &mut self.k,
            &mut self.v,
            &mut self.o,
            &mut self.fc1,
            &mut self.fc2,
            &mut self.ada,
        ] {
            out.extend(l.params_mut());
        }
        out.push(&mut self.q_scale);
        out.push(&mut self.k_scale);
        out
    }
}

/// Block weights: visual stream always, text stream in spatial blocks only.
#[derive(Debug, Clone)]
pub struct BlockWeights<E: Scalar> {
    pub visual: StreamWeights<E>,
    pub text: Option<StreamWeights<E>>,
}

impl<E: Scalar> BlockWeights<E> {
    pub fn init_spatial(name: &str, cfg: &DiTConfig, rng: &mut Rng) -> Self {
        BlockWeights {
            visual: StreamWeights::init(&format!("{name}.vis"), cfg, rng),
            text: Some(StreamWeights::init(&format!("{name}.txt"), cfg, rng)),
        }
    }

    pub fn init_temporal(name: &str, cfg: &DiTConfig, rng: &mut Rng) -> Self {
        BlockWeights {
            visual: StreamWeights::init(&format!("{name}.vis"), cfg, rng),
            text: None,
        }
    }

    pub fn params(&self) -> Vec<&P<E>> {
        let mut out = self.visual.params();
        if let Some(t) = &self.text {
            out.extend(t.params());
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut P<E>> {
        let mut out = self.visual.params_mut();
        if let Some(t) = &mut self.text {
            out.extend(t.params_mut());
        }
        out
    }
}

/// Six (1, d) modulation rows from the timestep embedding.
struct Modulation<E: Scalar> {
    scale_attn: Var<E>,
    shift_attn: Var<E>,
    gate_attn: Var<E>,
    scale_mlp: Var<E>,
    shift_mlp: Var<E>,
    gate_mlp: Var<E>,
}

fn modulation<E: Scalar>(
    bind: &Binder<E>,
    stream: &StreamWeights<E>,
    t_emb: &Var<E>,
    d: usize,
) -> Result<Modulation<E>> {
    let out = stream.ada.forward(bind, t_emb)?;
    Ok(Modulation {
        scale_attn: out.slice(1, 0, d)?,
        shift_attn: out.slice(1, d, d)?,
        gate_attn: out.slice(1, 2 * d, d)?,
        scale_mlp: out.slice(1, 3 * d, d)?,
        shift_mlp: out.slice(1, 4 * d, d)?,
        gate_mlp: out.slice(1, 5 * d, d)?,
    })
}

fn modulate<E: Scalar>(x: &Var<E>, scale: &Var<E>, shift: &Var<E>) -> Result<Var<E>> {
    let n = x.shape()[0];
    let one_plus = scale.add_scalar(E::ONE).broadcast_rows(n)?;
    x.layer_norm(LN_EPS)
        .mul(&one_plus)?
        .add(&shift.broadcast_rows(n)?)
}

fn gated_add<E: Scalar>(x: &Var<E>, branch: &Var<E>, gate: &Var<E>) -> Result<Var<E>> {
    let n = x.shape()[0];
    x.add(&branch.mul(&gate.broadcast_rows(n)?)?)
}

fn mlp<E: Scalar>(
    bind: &Binder<E>,
    stream: &StreamWeights<E>,
    x: &Var<E>,
    m: &Modulation<E>,
) -> Result<Var<E>> {
    let xm = modulate(x, &m.scale_mlp, &m.shift_mlp)?;
    let h = stream.fc1.forward(bind, &xm)?.gelu();
    let out = stream.fc2.forward(bind, &h)?;
    gated_add(x, &out, &m.gate_mlp)
}

/// RMS-normalize each head's rows and apply the learned per-head scale plus
/// rotary positions. `x` is (n, d_model).
fn norm_rope_heads<E: Scalar>(
    bind: &Binder<E>,
    x: &Var<E>,
    scale: &P<E>,
    positions: &[[usize; 3]],
    cfg: &DiTConfig,
) -> Result<Vec<Var<E>>> {
    let hd = cfg.head_dim();
    let (cos, sin) = rope_tables::<E>(positions, hd, cfg.rope_base)?;
    let scales = bind.bind(scale);
    let mut heads = Vec::with_capacity(cfg.n_heads);
    for h in 0..cfg.n_heads {
        let xh = x.slice(1, h * hd, hd)?;
        let normed = xh.rms_norm(QK_EPS);
        let scaled = normed.scale_by(&scales.slice(0, h, 1)?.reshape(&[1, 1])?)?;
        heads.push(scaled.rope_rotate(&cos, &sin)?);
    }
    Ok(heads)
}

fn value_heads<E: Scalar>(x: &Var<E>, cfg: &DiTConfig) -> Result<Vec<Var<E>>> {
    let hd = cfg.head_dim();
    (0..cfg.n_heads).map(|h| x.slice(1, h * hd, hd)).collect()
}

/// Masked multi-head attention over one token group. `mask[i][j]` = allowed.
/// Returns the (n, d_model) attention output (before the output projection).
#[allow(clippy::too_many_arguments)]
fn attention<E: Scalar>(
    q_heads: &[Var<E>],
    k_heads: &[Var<E>],
    v_heads: &[Var<E>],
    mask: Option<&Tensor<E>>,
    cfg: &DiTConfig,
    probe: Option<&AttnProbe<E>>,
    global_rows: &[usize],
) -> Result<Var<E>> {
    let hd = cfg.head_dim();
    let inv_sqrt = E::from_f64(1.0 / (hd as f64).sqrt());
    let mut outs = Vec::with_capacity(q_heads.len());
    for h in 0..q_heads.len() {
        let mut logits = q_heads[h]
            .matmul(&k_heads[h].transpose2d()?)?
            .scale(inv_sqrt);
        if let Some(m) = mask {
            logits = logits.add(&Var::constant(m.clone()))?;
        }
        let probs = logits.softmax_last();
        if let Some(p) = probe {
            p.records
                .borrow_mut()
                .push((global_rows.to_vec(), probs.value().clone()));
        }
        outs.push(probs.matmul(&v_heads[h])?);
    }
    Var::concat(&outs, 1)
}

/// Forbidden logit: exp underflows to exactly zero, so masked-out pairs get
/// exactly zero attention mass.
fn forbidden<E: Scalar>() -> E {
    E::from_f64(-1e30)
}

/// Joint text-visual attention per shot plus per-modality MLP.
/// `state` holds one (n, d) Var per segment, parallel to `seq.segments`.
pub fn spatial_block<E: Scalar>(
    bind: &Binder<E>,
    w: &BlockWeights<E>,
    seq: &TokenSequence,
    state: &[Var<E>],
    t_emb: &Var<E>,
    cfg: &DiTConfig,
    probe: Option<&AttnProbe<E>>,
) -> Result<Vec<Var<E>>> {
    let d = cfg.d_model;
    let text_w = w
        .text
        .as_ref()
        .ok_or_else(|| Error::invalid("spatial block needs a text stream"))?;
    let m_vis = modulation(bind, &w.visual, t_emb, d)?;
    let m_txt = modulation(bind, text_w, t_emb, d)?;
    let offsets = seq.segment_offsets();
    let mut new_state: Vec<Option<Var<E>>> = vec![None; state.len()];

    for shot in 0..seq.shot_count() {
        let seg_ids: Vec<usize> = seq
            .segments
            .iter()
            .enumerate()
            .filter(|(_, s)| s.shot_id == shot)
            .map(|(i, _)| i)
            .collect();
        if seg_ids.is_empty() {
            continue;
        }
        // per-modality projections on modulated inputs, then joint rows:
        // text first, visual after
        let mut q_parts = Vec::new();
        let mut k_parts = Vec::new();
        let mut v_parts = Vec::new();
        let mut row_meta: Vec<(usize, Option<usize>)> = Vec::new(); // (seg, frame p_t for visual)
        let mut global_rows = Vec::new();
        let mut positions = Vec::new();
        let ordered: Vec<usize> = seg_ids
            .iter()
            .copied()
            .filter(|&i| seq.segments[i].modality() == Modality::Text)
            .chain(
                seg_ids
                    .iter()
                    .copied()
                    .filter(|&i| seq.segments[i].modality() == Modality::Visual),
            )
            .collect();
        for &i in &ordered {
            let seg = &seq.segments[i];
            let stream = match seg.modality() {
                Modality::Text => text_w,
                Modality::Visual => &w.visual,
            };
            let mod_params = match seg.modality() {
                Modality::Text => &m_txt,
                Modality::Visual => &m_vis,
            };
            let xm = modulate(&state[i], &mod_params.scale_attn, &mod_params.shift_attn)?;
            q_parts.push(stream.q.forward(bind, &xm)?);
            k_parts.push(stream.k.forward(bind, &xm)?);
            v_parts.push(stream.v.forward(bind, &xm)?);
            for (r, p) in seg.positions.iter().enumerate() {
                let frame = match seg.modality() {
                    Modality::Text => None,
                    Modality::Visual => Some(p[0]),
                };
                row_meta.push((i, frame));
                global_rows.push(offsets[i] + r);
                positions.push(*p);
            }
        }
        let q = Var::concat(&q_parts, 0)?;
        let k = Var::concat(&k_parts, 0)?;
        let v = Var::concat(&v_parts, 0)?;
        let n = q.shape()[0];

        // mask: text rows attend everywhere in the shot; visual rows attend
        // text plus same-frame visual
        let mut mask = vec![E::ZERO; n * n];
        for (i, (_, fi)) in row_meta.iter().enumerate() {
            if let Some(frame_i) = fi {
                for (j, (_, fj)) in row_meta.iter().enumerate() {
                    if let Some(frame_j) = fj {
                        if frame_i != frame_j {
                            mask[i * n + j] = forbidden::<E>();
                        }
                    }
                }
            }
        }
        let mask = Tensor::from_vec(&[n, n], mask)?;

        // mixed-stream Q/K norm uses the visual head scales for visual rows
        // and text scales for text rows; split, norm, re-join
        let mut q_heads = Vec::new();
        let mut k_heads = Vec::new();
        let mut v_heads = Vec::new();
        {
            let n_text: usize = ordered
                .iter()
                .filter(|&&i| seq.segments[i].modality() == Modality::Text)
                .map(|&i| seq.segments[i].len())
                .sum();
            let split_norm = |x: &Var<E>, scale_t: &P<E>, scale_v: &P<E>| -> Result<Vec<Var<E>>> {
                let pos_t = &positions[..n_text];
                let pos_v = &positions[n_text..];
                let mut heads = Vec::with_capacity(cfg.n_heads);
                if n_text > 0 && n_text < n {
                    let xt = x.slice(0, 0, n_text)?;
                    let xv = x.slice(0, n_text, n - n_text)?;
                    let ht = norm_rope_heads(bind, &xt, scale_t, pos_t, cfg)?;
                    let hv = norm_rope_heads(bind, &xv, scale_v, pos_v, cfg)?;
                    for (a, b) in ht.into_iter().zip(hv) {
                        heads.push(Var::concat(&[a, b], 0)?);
                    }
                } else if n_text == n {
                    heads = norm_rope_heads(bind, x, scale_t, pos_t, cfg)?;
                } else {
                    heads = norm_rope_heads(bind, x, scale_v, pos_v, cfg)?;
                }
                Ok(heads)
            };
            q_heads.extend(split_norm(&q, &text_w.q_scale, &w.visual.q_scale)?);
            k_heads.extend(split_norm(&k, &text_w.k_scale, &w.visual.k_scale)?);
            v_heads.extend(value_heads(&v, cfg)?);
        }

        let attn = attention(&q_heads, &k_heads, &v_heads, Some(&mask), cfg, probe, &global_rows)?;

        // split rows back to segments, apply per-modality output projection
        // and gated residual
        let mut row = 0usize;
        for &i in &ordered {
            let seg = &seq.segments[i];
            let part = attn.slice(0, row, seg.len())?;
            row += seg.len();
            let (stream, mod_params) = match seg.modality() {
                Modality::Text => (text_w, &m_txt),
                Modality::Visual => (&w.visual, &m_vis),
            };
            let projected = stream.o.forward(bind, &part)?;
            let with_attn = gated_add(&state[i], &projected, &mod_params.gate_attn)?;
            let after_mlp = mlp(bind, stream, &with_attn, mod_params)?;
            new_state[i] = Some(after_mlp);
        }
    }
    Ok(new_state
        .into_iter()
        .zip(state)
        .map(|(n, old)| n.unwrap_or_else(|| old.clone()))
        .collect())
}

/// Visual-only attention within spatial windows across all frames and shots;
/// text segments pass through bit-identical.
pub fn temporal_block<E: Scalar>(
    bind: &Binder<E>,
    w: &BlockWeights<E>,
    seq: &TokenSequence,
    state: &[Var<E>],
    t_emb: &Var<E>,
    cfg: &DiTConfig,
    probe: Option<&AttnProbe<E>>,
) -> Result<Vec<Var<E>>> {
    let d = cfg.d_model;
    let m_vis = modulation(bind, &w.visual, t_emb, d)?;
    let offsets = seq.segment_offsets();

    // gather all visual segments
    let mut vis_segs = Vec::new();
    for (i, seg) in seq.segments.iter().enumerate() {
        if let SegmentData::Visual { h, w: gw, .. } = seg.data {
            if h % cfg.window_h != 0 || gw % cfg.window_w != 0 {
                return Err(Error::invalid(format!(
                    "visual grid {h}x{gw} not divisible by window {}x{}",
                    cfg.window_h, cfg.window_w
                )));
            }
            vis_segs.push(i);
        }
    }
    if vis_segs.is_empty() {
        return Ok(state.to_vec());
    }

    let xm_parts: Vec<Var<E>> = vis_segs
        .iter()
        .map(|&i| modulate(&state[i], &m_vis.scale_attn, &m_vis.shift_attn))
        .collect::<Result<_>>()?;
    let xm = Var::concat(&xm_parts, 0)?;
    let q = w.visual.q.forward(bind, &xm)?;
    let k = w.visual.k.forward(bind, &xm)?;
    let v = w.visual.v.forward(bind, &xm)?;

    // window id per concatenated visual row
    let mut positions = Vec::new();
    let mut global_rows = Vec::new();
    for &i in &vis_segs {
        let seg = &seq.segments[i];
        for (r, p) in seg.positions.iter().enumerate() {
            positions.push(*p);
            global_rows.push(offsets[i] + r);
        }
    }
    let n_vis = positions.len();
    let mut groups: std::collections::BTreeMap<(usize, usize), Vec<usize>> =
        std::collections::BTreeMap::new();
    for (row, p) in positions.iter().enumerate() {
        groups
            .entry((p[1] / cfg.window_h, p[2] / cfg.window_w))
            .or_default()
            .push(row);
    }

    let mut group_outs = Vec::new();
    let mut order = Vec::with_capacity(n_vis);
    for (_, rows) in groups.iter() {
        let qg = q.index_select_rows(rows)?;
        let kg = k.index_select_rows(rows)?;
        let vg = v.index_select_rows(rows)?;
        let pos_g: Vec<[usize; 3]> = rows.iter().map(|&r| positions[r]).collect();
        let rows_g: Vec<usize> = rows.iter().map(|&r| global_rows[r]).collect();
        let q_heads = norm_rope_heads(bind, &qg, &w.visual.q_scale, &pos_g, cfg)?;
        let k_heads = norm_rope_heads(bind, &kg, &w.visual.k_scale, &pos_g, cfg)?;
        let v_heads = value_heads(&vg, cfg)?;
        group_outs.push(attention(
            &q_heads, &k_heads, &v_heads, None, cfg, probe, &rows_g,
        )?);
        order.extend(rows.iter().copied());
    }
    let stacked = Var::concat(&group_outs, 0)?;
    let mut inverse = vec![0usize; n_vis];
    for (meta_pos, &orig_row) in order.iter().enumerate() {
        inverse[orig_row] = meta_pos;
    }
    let restored = stacked.index_select_rows(&inverse)?;
    let projected = w.visual.o.forward(bind, &restored)?;

    // scatter back into segments with gated residual + MLP
    let mut new_state = state.to_vec();
    let mut row = 0usize;
    for &i in &vis_segs {
        let seg_len = seq.segments[i].len();
        let part = projected.slice(0, row, seg_len)?;
        row += seg_len;
        let with_attn = gated_add(&state[i], &part, &m_vis.gate_attn)?;
        new_state[i] = mlp(bind, &w.visual, &with_attn, &m_vis)?;
    }
    Ok(new_state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dit::positions::{build_positions, ShotLayout};

    fn tiny_cfg() -> DiTConfig {
        DiTConfig {
            d_model: 24,
            n_heads: 2,
            n_spatial_layers: 1,
            n_temporal_layers: 1,
            window_h: 1,
            window_w: 1,
            rope_base: 100.0,
            in_channels: 17,
            out_channels: 8,
            vocab_size: 40,
            mlp_ratio: 4,
            max_text_tokens: 16,
        }
    }

    fn seq_and_state(cfg: &DiTConfig, seed: u64) -> (TokenSequence, Vec<Var<f64>>) {
        let seq = build_positions(&[ShotLayout {
            caption_ids: vec![1, 2, 3],
            frames: 2,
            h: 2,
            w: 2,
        }])
        .unwrap();
        let mut rng = Rng::seed_from(seed);
        let state = seq
            .segments
            .iter()
            .map(|s| Var::constant(Tensor::randn(&[s.len(), cfg.d_model], 1.0, &mut rng)))
            .collect();
        (seq, state)
    }

    #[test]
    fn zero_gate_makes_blocks_identity() {
        let cfg = tiny_cfg();
        let mut rng = Rng::seed_from(60);
        let sw = BlockWeights::<f64>::init_spatial("s0", &cfg, &mut rng);
        let tw = BlockWeights::<f64>::init_temporal("t0", &cfg, &mut rng);
        let (seq, state) = seq_and_state(&cfg, 61);
        let t_emb = Var::constant(Tensor::randn(&[1, cfg.d_model], 1.0, &mut rng));
        let bind = Binder::frozen();
        let after_s = spatial_block(&bind, &sw, &seq, &state, &t_emb, &cfg, None).unwrap();
        let after_t = temporal_block(&bind, &tw, &seq, &after_s, &t_emb, &cfg, None).unwrap();
        for (a, b) in state.iter().zip(&after_t) {
            assert_eq!(a.value().data(), b.value().data());
        }
    }

    #[test]
    fn text_passes_through_temporal_block_bit_identical() {
        let cfg = tiny_cfg();
        let mut rng = Rng::seed_from(62);
        let mut tw = BlockWeights::<f64>::init_temporal("t0", &cfg, &mut rng);
        // non-trivial gates so visual DOES change
        for p in tw.params_mut() {
            if p.name.contains(".ada.") {
                p.value = Tensor::randn(p.value.shape(), 0.5, &mut rng);
            }
        }
        let (seq, state) = seq_and_state(&cfg, 63);
        let t_emb = Var::constant(Tensor::randn(&[1, cfg.d_model], 1.0, &mut rng));
        let bind = Binder::frozen();
        let after = temporal_block(&bind, &tw, &seq, &state, &t_emb, &cfg, None).unwrap();
        // segment 0 is text: bit-identical
        assert_eq!(after[0].value().data(), state[0].value().data());
        // segment 1 is visual: changed
        assert_ne!(after[1].value().data(), state[1].value().data());
    }

    #[test]
    fn spatial_mask_blocks_cross_frame_mass() {
        let cfg = tiny_cfg();
        let mut rng = Rng::seed_from(64);
        let mut sw = BlockWeights::<f64>::init_spatial("s0", &cfg, &mut rng);
        for p in sw.params_mut() {
            if p.name.contains(".ada.") {
                p.value = Tensor::randn(p.value.shape(), 0.5, &mut rng);
            }
        }
        let (seq, state) = seq_and_state(&cfg, 65);
        let t_emb = Var::constant(Tensor::randn(&[1, cfg.d_model], 1.0, &mut rng));
        let bind = Binder::frozen();
        let probe = AttnProbe::new();
        spatial_block(&bind, &sw, &seq, &state, &t_emb, &cfg, Some(&probe)).unwrap();
        let records = probe.records.borrow();
        assert!(!records.is_empty());
        // rows: 3 text (global 0..3), then 8 visual (frames: rows 3..7 are
        // frame p_t=3, rows 7..11 are p_t=4)
        for (rows, weights) in records.iter() {
            let n = rows.len();
            assert_eq!(n, 11);
            for i in 0..n {
                let mut sum = 0.0;
                for j in 0..n {
                    let wij = weights.data()[i * n + j];
                    sum += wij;
                    let vis_i = rows[i] >= 3;
                    let vis_j = rows[j] >= 3;
                    if vis_i && vis_j {
                        let frame_i = (rows[i] - 3) / 4;
                        let frame_j = (rows[j] - 3) / 4;
                        if frame_i != frame_j {
                            assert_eq!(wij, 0.0, "cross-frame mass at ({i},{j})");
                        }
                    }
                }
                assert!((sum - 1.0).abs() < 1e-9, "row {i} mass {sum}");
            }
        }
    }

    #[test]
    fn temporal_groups_are_windows_across_frames() {
        let cfg = tiny_cfg(); // 1x1 windows
        let mut rng = Rng::seed_from(66);
        let mut tw = BlockWeights::<f64>::init_temporal("t0", &cfg, &mut rng);
        for p in tw.params_mut() {
            if p.name.contains(".ada.") {
                p.value = Tensor::randn(p.value.shape(), 0.5, &mut rng);
            }
        }
        let (seq, state) = seq_and_state(&cfg, 67);
        let t_emb = Var::constant(Tensor::randn(&[1, cfg.d_model], 1.0, &mut rng));
        let bind = Binder::frozen();
        let probe = AttnProbe::new();
        temporal_block(&bind, &tw, &seq, &state, &t_emb, &cfg, Some(&probe)).unwrap();
        let records = probe.records.borrow();
        // 4 windows x 2 heads, each group has 2 tokens (one per frame)
        assert_eq!(records.len(), 8);
        for (rows, weights) in records.iter() {
            assert_eq!(rows.len(), 2);
            assert_eq!(weights.shape(), &[2, 2]);
            // same (p_h, p_w) across both frames
            let p0 = seq.segments[1].positions[rows[0] - 3];
            let p1 = seq.segments[1].positions[rows[1] - 3];
            assert_eq!((p0[1], p0[2]), (p1[1], p1[2]));
            assert_ne!(p0[0], p1[0]);
        }
    }

    #[test]
    fn indivisible_window_rejected() {
        let mut cfg = tiny_cfg();
        cfg.window_h = 3;
        let mut rng = Rng::seed_from(68);
        let tw = BlockWeights::<f64>::init_temporal("t0", &cfg, &mut rng);
        let (seq, state) = seq_and_state(&cfg, 69);
        let t_emb = Var::constant(Tensor::zeros(&[1, cfg.d_model]));
        let bind = Binder::frozen();
        assert!(temporal_block(&bind, &tw, &seq, &state, &t_emb, &cfg, None).is_err());
    }
}
