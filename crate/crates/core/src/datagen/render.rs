//! Rasterizer for scene specs: anti-aliased shapes over flat backgrounds,
//! hard cuts between shots.

use crate::error::Result;
use crate::rng::Rng;
use crate::tensor::Tensor;

use super::scene::{Camera, SceneSpec, ShapeKind, ShapeSpec};

/// Render a scene into a pixel clip of shape (frames, size, size, 3),
/// values in [0, 1]. Deterministic under (spec, seed); the seed only drives
/// a sub-pixel jitter of shape positions so corpus clips are not aligned to
/// the pixel grid.
pub fn synth_clip(spec: &SceneSpec, size: usize, seed: u64) -> Result<Tensor<f32>> {
    spec.validate(size)?;
    let mut rng = Rng::derive(seed, &["render"]);
    let total: usize = spec.total_frames();
    let mut data = vec![0f32; total * size * size * 3];
    let mut frame_idx = 0usize;
    for shot in &spec.shots {
        // one jitter per shot so motion within the shot stays exact
        let jx = rng.range(-0.3, 0.3);
        let jy = rng.range(-0.3, 0.3);
        for f in 0..shot.frames {
            let (cam_dx, cam_dy) = match shot.camera {
                Camera::Static => (0.0, 0.0),
                Camera::Pan { dx, dy } => (dx * f as f64, dy * f as f64),
            };
            let base = frame_idx * size * size * 3;
            for y in 0..size {
                for x in 0..size {
                    let mut px = [
                        shot.background[0],
                        shot.background[1],
                        shot.background[2],
                    ];
                    for (shape, motion) in &shot.shapes {
                        let (mut cx, mut cy) = SceneSpec::shape_position(shape, motion, f, size);
                        cx += jx - cam_dx;
                        cy += jy - cam_dy;
                        let cov = coverage(shape, cx, cy, x as f64 + 0.5, y as f64 + 0.5);
                        if cov > 0.0 {
                            for c in 0..3 {
                                px[c] = px[c] * (1.0 - cov) + shape.color[c] * cov;
                            }
                        }
                    }
                    let o = base + (y * size + x) * 3;
                    for c in 0..3 {
                        data[o + c] = px[c].clamp(0.0, 1.0) as f32;
                    }
                }
            }
            frame_idx += 1;
        }
    }
    Tensor::from_vec(&[total, size, size, 3], data)
}

/// Pixel coverage from the signed distance to the shape boundary: a 1-pixel
/// smooth edge.
fn coverage(shape: &ShapeSpec, cx: f64, cy: f64, px: f64, py: f64) -> f64 {
    let dx = px - cx;
    let dy = py - cy;
    let d = match shape.kind {
        ShapeKind::Circle => (dx * dx + dy * dy).sqrt() - shape.size,
        ShapeKind::Square => dx.abs().max(dy.abs()) - shape.size,
        ShapeKind::Triangle => {
            // upward-pointing triangle as intersection of three half-planes
            let r = shape.size;
            let e_bottom = dy - r * 0.6;
            let c30 = 0.866_025_403_784_438_6; // cos 30
            let e_left = -dx * c30 - dy * 0.5 - r * 0.5;
            let e_right = dx * c30 - dy * 0.5 - r * 0.5;
            e_bottom.max(e_left).max(e_right)
        }
    };
    (0.5 - d).clamp(0.0, 1.0)
}

/// Intensity-weighted centroid of the foreground (pixels away from `bg`),
/// per frame. Used as the motion oracle by tests and classifiers.
pub fn centroids(video: &Tensor<f32>, bg: &[f64; 3]) -> Vec<(f64, f64)> {
    let (t, h, w) = (video.shape()[0], video.shape()[1], video.shape()[2]);
    let mut out = Vec::with_capacity(t);
    for f in 0..t {
        let (mut sx, mut sy, mut sw) = (0.0f64, 0.0f64, 0.0f64);
        for y in 0..h {
            for x in 0..w {
                let o = ((f * h + y) * w + x) * 3;
                let dist: f64 = (0..3)
                    .map(|c| (video.data()[o + c] as f64 - bg[c]).abs())
                    .sum();
                if dist > 0.3 {
                    sx += dist * x as f64;
                    sy += dist * y as f64;
                    sw += dist;
                }
            }
        }
        if sw > 0.0 {
            out.push((sx / sw, sy / sw));
        } else {
            out.push((w as f64 / 2.0, h as f64 / 2.0));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::scene::*;

    fn moving_circle(vx: f64, vy: f64, frames: usize) -> SceneSpec {
        SceneSpec::single(ShotSpec {
            shapes: vec![(
                ShapeSpec {
                    kind: ShapeKind::Circle,
                    color: PALETTE[0].1,
                    size: 3.5,
                    start: (6.0, 8.0),
                },
                Motion {
                    kind: MotionKind::Translate,
                    velocity: (vx, vy),
                },
            )],
            camera: Camera::Static,
            background: BACKGROUNDS[0].1,
            frames,
        })
    }

    #[test]
    fn static_spec_frames_identical() {
        let spec = moving_circle(0.0, 0.0, 4);
        let clip = synth_clip(&spec, 16, 5).unwrap();
        let frame = 16 * 16 * 3;
        for f in 1..4 {
            assert_eq!(
                &clip.data()[..frame],
                &clip.data()[f * frame..(f + 1) * frame]
            );
        }
    }

    #[test]
    fn translate_moves_centroid_one_px_per_frame() {
        let spec = moving_circle(1.0, 0.0, 5);
        let clip = synth_clip(&spec, 16, 7).unwrap();
        let cs = centroids(&clip, &BACKGROUNDS[0].1);
        for f in 1..5 {
            let dx = cs[f].0 - cs[f - 1].0;
            let dy = cs[f].1 - cs[f - 1].1;
            assert!((dx - 1.0).abs() < 0.1, "frame {f}: dx {dx}");
            assert!(dy.abs() < 0.1, "frame {f}: dy {dy}");
        }
    }

    #[test]
    fn deterministic_under_spec_and_seed() {
        let spec = moving_circle(0.5, -0.5, 5);
        let a = synth_clip(&spec, 16, 42).unwrap();
        let b = synth_clip(&spec, 16, 42).unwrap();
        assert_eq!(a.data(), b.data());
        let c = synth_clip(&spec, 16, 43).unwrap();
        assert_ne!(a.data(), c.data());
    }

    #[test]
    fn multishot_concatenates_with_hard_cut() {
        let mut spec = moving_circle(1.0, 0.0, 3);
        let mut second = moving_circle(-1.0, 0.0, 4).shots.remove(0);
        second.background = BACKGROUNDS[1].1;
        second.shapes[0].0.start = (10.0, 8.0);
        spec.shots.push(second);
        let clip = synth_clip(&spec, 16, 1).unwrap();
        assert_eq!(clip.shape()[0], 7);
        // background changes abruptly at the cut
        let frame = 16 * 16 * 3;
        let corner_before = clip.data()[2 * frame];
        let corner_after = clip.data()[3 * frame];
        assert!((corner_after - corner_before).abs() > 0.1);
    }
}
