//! Curation passes over the corpus: shot boundary detection, quality and
//! static-content filtering, semantic deduplication, and distribution
//! rebalancing.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::manifest::ClipRecord;

/// Mean absolute difference between consecutive frames; entry i is the
/// dissimilarity between frames i-1 and i.
pub fn frame_diffs(video: &Tensor<f32>) -> Vec<f64> {
    let t = video.shape()[0];
    let frame = video.numel() / t;
    let mut out = Vec::with_capacity(t.saturating_sub(1));
    for f in 1..t {
        let a = &video.data()[(f - 1) * frame..f * frame];
        let b = &video.data()[f * frame..(f + 1) * frame];
        let d: f64 = a
            .iter()
            .zip(b)
            .map(|(x, y)| (*x as f64 - *y as f64).abs())
            .sum();
        out.push(d / frame as f64);
    }
    out
}

pub fn mean_frame_diff(video: &Tensor<f32>) -> f64 {
    let ds = frame_diffs(video);
    if ds.is_empty() {
        0.0
    } else {
        ds.iter().sum::<f64>() / ds.len() as f64
    }
}

/// Shot boundaries: frame indices where a new shot starts.
///
/// A cut is declared where the inter-frame dissimilarity exceeds
/// `threshold` times the rolling median of recent dissimilarities (and an
/// absolute floor, so constant clips yield no cuts). Segments longer than
/// `max_len` frames are force-split at the max-length mark.
pub fn detect_shots(video: &Tensor<f32>, threshold: f64, max_len: usize) -> Vec<usize> {
    let diffs = frame_diffs(video);
    let t = video.shape()[0];
    let abs_floor = 1e-3;
    let mut cuts = Vec::new();
    let window = 8usize;
    // the first dissimilarity has no history to compare against; it seeds
    // the baseline instead
    for (i, &d) in diffs.iter().enumerate().skip(1) {
        let lo = i.saturating_sub(window);
        let mut recent: Vec<f64> = diffs[lo..i].to_vec();
        recent.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let baseline = recent[recent.len() / 2];
        if d > abs_floor && d > threshold * baseline {
            cuts.push(i + 1); // new shot starts at frame i+1
        }
    }
    // force-split overlong segments
    let mut out = Vec::new();
    let mut seg_start = 0usize;
    let mut cut_iter = cuts.iter().peekable();
    let mut pos = seg_start;
    loop {
        let next_cut = cut_iter.peek().map(|&&c| c).unwrap_or(t);
        while next_cut - pos > max_len {
            pos += max_len;
            out.push(pos);
        }
        if next_cut >= t {
            break;
        }
        out.push(next_cut);
        pos = next_cut;
        seg_start = next_cut;
        let _ = seg_start;
        cut_iter.next();
    }
    out
}

/// Keep records whose quality clears `min_quality` and whose clip is not
/// predominantly static (mean frame difference above `static_floor`).
/// `clips` is parallel to `records`.
pub fn quality_filter(
    records: &[ClipRecord],
    clips: &[Tensor<f32>],
    min_quality: f64,
    static_floor: f64,
) -> Vec<ClipRecord> {
    records
        .iter()
        .zip(clips)
        .filter(|(r, clip)| r.quality >= min_quality && mean_frame_diff(clip) >= static_floor)
        .map(|(r, _)| r.clone())
        .collect()
}

/// Unit-normalized mean-frame thumbnail, the stand-in embedding used for
/// semantic dedup: average over frames, average-pool to 4x4, flatten.
pub fn toy_embedding(video: &Tensor<f32>) -> Vec<f32> {
    let (t, h, w) = (video.shape()[0], video.shape()[1], video.shape()[2]);
    let (gh, gw) = (4usize, 4usize);
    let mut acc = vec![0.0f64; gh * gw * 3];
    for f in 0..t {
        for y in 0..h {
            for x in 0..w {
                let o = ((f * h + y) * w + x) * 3;
                let cell = ((y * gh / h) * gw + (x * gw / w)) * 3;
                for c in 0..3 {
                    acc[cell + c] += video.data()[o + c] as f64;
                }
            }
        }
    }
    let norm: f64 = acc.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    acc.iter().map(|v| (v / norm) as f32).collect()
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        dot += *x as f64 * *y as f64;
        na += (*x as f64).powi(2);
        nb += (*y as f64).powi(2);
    }
    dot / (na.sqrt() * nb.sqrt()).max(1e-12)
}

/// Semantic dedup: cluster records whose embeddings reach `sim_threshold`
/// cosine similarity (transitively) and keep the highest-quality member of
/// each cluster, ties broken by lowest id. Output preserves input order.
pub fn dedup(records: &[ClipRecord], sim_threshold: f64) -> Vec<ClipRecord> {
    let n = records.len();
    // incremental union-find over pairwise similarity
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut Vec<usize>, i: usize) -> usize {
        if parent[i] != i {
            let root = find(parent, parent[i]);
            parent[i] = root;
        }
        parent[i]
    }
    for i in 0..n {
        for j in 0..i {
            if cosine(&records[i].embedding, &records[j].embedding) >= sim_threshold {
                let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                if ri != rj {
                    parent[ri] = rj;
                }
            }
        }
    }
    // pick the best member per cluster
    let mut best: BTreeMap<usize, usize> = BTreeMap::new();
    for i in 0..n {
        let root = find(&mut parent, i);
        let cand = *best.get(&root).unwrap_or(&i);
        let better = records[i].quality > records[cand].quality
            || (records[i].quality == records[cand].quality && records[i].id < records[cand].id);
        if i == cand || better {
            best.insert(root, i);
        }
    }
    let keep: std::collections::BTreeSet<usize> = best.values().copied().collect();
    records
        .iter()
        .enumerate()
        .filter(|(i, _)| keep.contains(i))
        .map(|(_, r)| r.clone())
        .collect()
}

/// Inverse-frequency sampling weights over one attribute: per-record weight
/// proportional to 1 / count(category), normalized to sum 1, so expected
/// draws are uniform across categories.
pub fn rebalance(records: &[ClipRecord], attribute: &str) -> Result<Vec<f64>> {
    if records.is_empty() {
        return Err(Error::invalid("rebalance over empty record set"));
    }
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for r in records {
        let v = r
            .attribute(attribute)
            .ok_or_else(|| Error::invalid(format!("unknown attribute {attribute}")))?;
        *counts.entry(v).or_insert(0) += 1;
    }
    let raw: Vec<f64> = records
        .iter()
        .map(|r| 1.0 / counts[r.attribute(attribute).unwrap()] as f64)
        .collect();
    let total: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|w| w / total).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::manifest::Attributes;
    use crate::datagen::render::synth_clip;
    use crate::datagen::scene::*;
    use crate::rng::Rng;

    fn moving(frames: usize, seed: u64) -> Tensor<f32> {
        let spec = SceneSpec::single(ShotSpec {
            shapes: vec![(
                ShapeSpec {
                    kind: ShapeKind::Circle,
                    color: PALETTE[0].1,
                    size: 3.0,
                    start: (4.5, 8.0),
                },
                Motion {
                    kind: MotionKind::Translate,
                    velocity: (0.2, 0.0),
                },
            )],
            camera: Camera::Static,
            background: BACKGROUNDS[0].1,
            frames,
        });
        synth_clip(&spec, 16, seed).unwrap()
    }

    fn record(id: u64, quality: f64, embedding: Vec<f32>, action: &str) -> ClipRecord {
        ClipRecord {
            id,
            video_path: String::new(),
            caption_long: "x".into(),
            caption_short: "y".into(),
            attributes: Attributes {
                subject: "circle".into(),
                action: action.into(),
                style: "red".into(),
                camera: "static".into(),
            },
            quality,
            shot_boundaries: vec![],
            embedding,
        }
    }

    #[test]
    fn planted_cut_found_exactly() {
        let a = moving(10, 1);
        let b = {
            let mut clip = moving(10, 2);
            // different background makes a hard cut
            for v in clip.data_mut().iter_mut() {
                *v = 1.0 - *v;
            }
            clip
        };
        let joined = Tensor::concat(&[&a, &b], 0).unwrap();
        let cuts = detect_shots(&joined, 4.0, 100);
        assert_eq!(cuts, vec![10]);
    }

    #[test]
    fn constant_video_has_no_cuts() {
        let clip = Tensor::<f32>::full(&[8, 4, 4, 3], 0.5);
        assert!(detect_shots(&clip, 3.0, 100).is_empty());
    }

    #[test]
    fn force_split_at_max_len() {
        let clip = moving(30, 3);
        let cuts = detect_shots(&clip, 1e9, 12);
        assert_eq!(cuts, vec![12, 24]);
    }

    #[test]
    fn static_clips_filtered() {
        let still = Tensor::<f32>::full(&[5, 16, 16, 3], 0.3);
        let live = moving(5, 4);
        let records = vec![
            record(0, 1.0, vec![1.0], "right"),
            record(1, 1.0, vec![1.0], "right"),
        ];
        let kept = quality_filter(&records, &[still, live], 0.5, 1e-4);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].id, 1);
    }

    #[test]
    fn dedup_keeps_highest_quality() {
        let records = vec![
            record(0, 0.7, vec![1.0, 0.0], "a"),
            record(1, 0.9, vec![0.999, 0.01], "a"),
            record(2, 0.5, vec![0.0, 1.0], "b"),
        ];
        let kept = dedup(&records, 0.95);
        let ids: Vec<u64> = kept.iter().map(|r| r.id).collect();
        assert_eq!(ids, vec![1, 2]);
    }

    /// Brute-force oracle: connected components by BFS over the full
    /// similarity graph, then max-quality per component.
    fn dedup_bruteforce(records: &[ClipRecord], thr: f64) -> Vec<u64> {
        let n = records.len();
        let mut seen = vec![false; n];
        let mut keep = Vec::new();
        for s in 0..n {
            if seen[s] {
                continue;
            }
            let mut comp = vec![s];
            seen[s] = true;
            let mut queue = vec![s];
            while let Some(i) = queue.pop() {
                for j in 0..n {
                    if !seen[j] && cosine(&records[i].embedding, &records[j].embedding) >= thr {
                        seen[j] = true;
                        comp.push(j);
                        queue.push(j);
                    }
                }
            }
            let best = comp
                .into_iter()
                .min_by(|&a, &b| {
                    records[b]
                        .quality
                        .partial_cmp(&records[a].quality)
                        .unwrap()
                        .then(records[a].id.cmp(&records[b].id))
                })
                .unwrap();
            keep.push(records[best].id);
        }
        keep.sort();
        keep
    }

    #[test]
    fn dedup_matches_bruteforce_on_random_corpus() {
        let mut rng = Rng::seed_from(99);
        for trial in 0..10 {
            let n = 24 + (trial % 5) * 8;
            let mut records = Vec::new();
            for id in 0..n {
                // clustered embeddings: a few archetypes plus noise
                let arch = rng.below(6);
                let mut e = vec![0.0f32; 8];
                e[arch] = 1.0;
                for v in e.iter_mut() {
                    *v += rng.range(-0.05, 0.05) as f32;
                }
                records.push(record(id as u64, rng.uniform(), e, "a"));
            }
            let kept: Vec<u64> = dedup(&records, 0.9).iter().map(|r| r.id).collect();
            let mut kept_sorted = kept.clone();
            kept_sorted.sort();
            assert_eq!(kept_sorted, dedup_bruteforce(&records, 0.9), "trial {trial}");
        }
    }

    #[test]
    fn rebalance_is_inverse_frequency() {
        let mut records = Vec::new();
        for i in 0..100 {
            records.push(record(i, 1.0, vec![1.0], "common"));
        }
        for i in 100..110 {
            records.push(record(i, 1.0, vec![1.0], "rare"));
        }
        let w = rebalance(&records, "action").unwrap();
        let sum: f64 = w.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        // expected draws uniform across the two categories
        let mass_common: f64 = w[..100].iter().sum();
        let mass_rare: f64 = w[100..].iter().sum();
        assert!((mass_common - 0.5).abs() < 1e-12);
        assert!((mass_rare - 0.5).abs() < 1e-12);
        // per-record weight ratio matches inverse counts
        assert!((w[100] / w[0] - 10.0).abs() < 1e-9);
    }

    #[test]
    fn rebalance_empty_errors() {
        assert!(rebalance(&[], "action").is_err());
    }
}
