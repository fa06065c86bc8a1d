//! Interleaved multimodal token layout and 3-axis positions.
//!
//! Sequences are ordered [text_1, visual_1, text_2, visual_2, ...] per shot.
//! A global monotone counter assigns text scalar indices and the temporal
//! origin of each shot's frames, so positions strictly increase in the
//! temporal axis along the whole sequence.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Text,
    Visual,
}

#[derive(Debug, Clone)]
pub enum SegmentData {
    Text { ids: Vec<usize> },
    Visual { frames: usize, h: usize, w: usize },
}

#[derive(Debug, Clone)]
pub struct Segment {
    pub shot_id: usize,
    /// (p_t, p_h, p_w) per token; text tokens replicate a scalar index on
    /// all three axes.
    pub positions: Vec<[usize; 3]>,
    pub data: SegmentData,
}

impl Segment {
    pub fn modality(&self) -> Modality {
        match self.data {
            SegmentData::Text { .. } => Modality::Text,
            SegmentData::Visual { .. } => Modality::Visual,
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct TokenSequence {
    pub segments: Vec<Segment>,
}

/// Per-shot layout for position building: caption token ids plus the shot's
/// latent grid.
#[derive(Debug, Clone)]
pub struct ShotLayout {
    pub caption_ids: Vec<usize>,
    pub frames: usize,
    pub h: usize,
    pub w: usize,
}

pub fn build_positions(shots: &[ShotLayout]) -> Result<TokenSequence> {
    if shots.is_empty() {
        return Err(Error::invalid("no shots"));
    }
    let mut segments = Vec::new();
    let mut counter = 0usize;
    for (shot_id, shot) in shots.iter().enumerate() {
        if shot.frames == 0 || shot.h == 0 || shot.w == 0 {
            return Err(Error::invalid(format!(
                "shot {shot_id} has a zero-sized visual grid"
            )));
        }
        if !shot.caption_ids.is_empty() {
            let positions = shot
                .caption_ids
                .iter()
                .enumerate()
                .map(|(i, _)| {
                    let p = counter + i;
                    [p, p, p]
                })
                .collect();
            segments.push(Segment {
                shot_id,
                positions,
                data: SegmentData::Text {
                    ids: shot.caption_ids.clone(),
                },
            });
            counter += shot.caption_ids.len();
        }
        let mut positions = Vec::with_capacity(shot.frames * shot.h * shot.w);
        for f in 0..shot.frames {
            for y in 0..shot.h {
                for x in 0..shot.w {
                    positions.push([counter + f, y, x]);
                }
            }
        }
        segments.push(Segment {
            shot_id,
            positions,
            data: SegmentData::Visual {
                frames: shot.frames,
                h: shot.h,
                w: shot.w,
            },
        });
        counter += shot.frames;
    }
    Ok(TokenSequence { segments })
}

impl TokenSequence {
    pub fn total_len(&self) -> usize {
        self.segments.iter().map(|s| s.len()).sum()
    }

    /// Global row offset of each segment in the flat sequence.
    pub fn segment_offsets(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.segments.len());
        let mut acc = 0;
        for s in &self.segments {
            out.push(acc);
            acc += s.len();
        }
        out
    }

    pub fn shot_count(&self) -> usize {
        self.segments
            .iter()
            .map(|s| s.shot_id + 1)
            .max()
            .unwrap_or(0)
    }
}
