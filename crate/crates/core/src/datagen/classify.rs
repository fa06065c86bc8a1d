//! Programmatic classifiers for generated clips: dominant foreground color
//! and motion direction. These are the evaluation oracles for prompt
//! following; they share the palette with the caption generator.

use crate::tensor::Tensor;

use super::render::centroids;
use super::scene::PALETTE;

/// Dominant foreground color name, judged against the palette. Foreground is
/// any pixel far enough from the background color.
pub fn classify_color(video: &Tensor<f32>, bg: &[f64; 3]) -> &'static str {
    let (t, h, w) = (video.shape()[0], video.shape()[1], video.shape()[2]);
    let mut acc = [0.0f64; 3];
    let mut count = 0.0f64;
    for f in 0..t {
        for y in 0..h {
            for x in 0..w {
                let o = ((f * h + y) * w + x) * 3;
                let px = [
                    video.data()[o] as f64,
                    video.data()[o + 1] as f64,
                    video.data()[o + 2] as f64,
                ];
                let dist: f64 = (0..3).map(|c| (px[c] - bg[c]).abs()).sum();
                if dist > 0.45 {
                    for c in 0..3 {
                        acc[c] += px[c];
                    }
                    count += 1.0;
                }
            }
        }
    }
    if count == 0.0 {
        return "none";
    }
    let mean = [acc[0] / count, acc[1] / count, acc[2] / count];
    let mut best = PALETTE[0].0;
    let mut best_d = f64::MAX;
    for (name, c) in PALETTE.iter() {
        let d: f64 = (0..3).map(|i| (c[i] - mean[i]).powi(2)).sum();
        if d < best_d {
            best_d = d;
            best = name;
        }
    }
    best
}

/// Motion direction from start-to-end centroid displacement:
/// right/left/up/down, or "still" below the displacement floor.
pub fn classify_motion(video: &Tensor<f32>, bg: &[f64; 3]) -> &'static str {
    let cs = centroids(video, bg);
    if cs.len() < 2 {
        return "still";
    }
    let dx = cs[cs.len() - 1].0 - cs[0].0;
    let dy = cs[cs.len() - 1].1 - cs[0].1;
    let floor = 0.75;
    if dx.abs() < floor && dy.abs() < floor {
        "still"
    } else if dx.abs() >= dy.abs() {
        if dx > 0.0 {
            "right"
        } else {
            "left"
        }
    } else if dy > 0.0 {
        "down"
    } else {
        "up"
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::render::synth_clip;
    use crate::datagen::scene::*;

    fn scene(color: [f64; 3], vx: f64, vy: f64) -> SceneSpec {
        SceneSpec::single(ShotSpec {
            shapes: vec![(
                ShapeSpec {
                    kind: ShapeKind::Circle,
                    color,
                    size: 3.5,
                    start: (8.0, 8.0),
                },
                Motion {
                    kind: MotionKind::Translate,
                    velocity: (vx, vy),
                },
            )],
            camera: Camera::Static,
            background: BACKGROUNDS[0].1,
            frames: 5,
        })
    }

    #[test]
    fn classifies_rendered_ground_truth() {
        let cases = [
            (PALETTE[0].1, 1.0, 0.0, "red", "right"),
            (PALETTE[2].1, -1.0, 0.0, "blue", "left"),
            (PALETTE[3].1, 0.0, 1.0, "yellow", "down"),
            (PALETTE[1].1, 0.0, -1.0, "green", "up"),
            (PALETTE[4].1, 0.0, 0.0, "cyan", "still"),
        ];
        for (color, vx, vy, want_color, want_motion) in cases {
            let clip = synth_clip(&scene(color, vx, vy), 16, 3).unwrap();
            assert_eq!(classify_color(&clip, &BACKGROUNDS[0].1), want_color);
            assert_eq!(classify_motion(&clip, &BACKGROUNDS[0].1), want_motion);
        }
    }
}
