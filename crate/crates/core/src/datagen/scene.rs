//! Scene specifications for the synthetic corpus.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

impl ShapeKind {
    pub fn word(&self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionKind {
    Translate,
    Bounce,
    Orbit,
}

/// Motion of one shape. `velocity` is (vx, vy) in pixels per frame for
/// translate/bounce; for orbit, velocity.0 is the angular speed in radians
/// per frame and velocity.1 the orbit radius in pixels.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Motion {
    pub kind: MotionKind,
    pub velocity: (f64, f64),
}

impl Motion {
    pub fn still() -> Self {
        Motion {
            kind: MotionKind::Translate,
            velocity: (0.0, 0.0),
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub kind: ShapeKind,
    pub color: [f64; 3],
    pub size: f64,
    pub start: (f64, f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Camera {
    Static,
    Pan { dx: f64, dy: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ShotSpec {
    pub shapes: Vec<(ShapeSpec, Motion)>,
    pub camera: Camera,
    pub background: [f64; 3],
    pub frames: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneSpec {
    pub shots: Vec<ShotSpec>,
}

impl SceneSpec {
    pub fn single(shot: ShotSpec) -> Self {
        SceneSpec { shots: vec![shot] }
    }

    pub fn total_frames(&self) -> usize {
        self.shots.iter().map(|s| s.frames).sum()
    }

    /// Position of a shape at frame `f` within a shot, before camera motion.
    pub fn shape_position(shape: &ShapeSpec, motion: &Motion, f: usize, size_px: usize) -> (f64, f64) {
        let (x0, y0) = shape.start;
        match motion.kind {
            MotionKind::Translate => (
                x0 + motion.velocity.0 * f as f64,
                y0 + motion.velocity.1 * f as f64,
            ),
            MotionKind::Bounce => {
                let lim = size_px as f64;
                (
                    bounce_coord(x0, motion.velocity.0 * f as f64, shape.size, lim),
                    bounce_coord(y0, motion.velocity.1 * f as f64, shape.size, lim),
                )
            }
            MotionKind::Orbit => {
                let (omega, radius) = motion.velocity;
                let theta = omega * f as f64;
                (x0 + radius * theta.cos(), y0 + radius * theta.sin())
            }
        }
    }

    /// Validate that every non-bouncing shape stays inside the frame for the
    /// whole shot, camera motion included.
    pub fn validate(&self, size_px: usize) -> Result<()> {
        if self.shots.is_empty() {
            return Err(Error::invalid("scene has no shots"));
        }
        for (si, shot) in self.shots.iter().enumerate() {
            if shot.frames == 0 {
                return Err(Error::invalid(format!("shot {si} has zero frames")));
            }
            if shot.shapes.is_empty() {
                return Err(Error::invalid(format!("shot {si} has no shapes")));
            }
            for (shape, motion) in &shot.shapes {
                if motion.kind == MotionKind::Bounce {
                    continue;
                }
                for f in 0..shot.frames {
                    let (mut x, mut y) = Self::shape_position(shape, motion, f, size_px);
                    if let Camera::Pan { dx, dy } = shot.camera {
                        x -= dx * f as f64;
                        y -= dy * f as f64;
                    }
                    let margin = 0.0;
                    let lim = size_px as f64;
                    if x - shape.size < -margin
                        || x + shape.size > lim + margin
                        || y - shape.size < -margin
                        || y + shape.size > lim + margin
                    {
                        return Err(Error::invalid(format!(
                            "shape leaves frame at shot {si} frame {f}: center ({x:.1},{y:.1}), size {:.1}",
                            shape.size
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

fn bounce_coord(start: f64, travel: f64, size: f64, lim: f64) -> f64 {
    // reflect inside [size, lim - size]
    let lo = size;
    let hi = lim - size;
    if hi <= lo {
        return (lo + hi) / 2.0;
    }
    let span = hi - lo;
    let mut pos = (start - lo + travel) % (2.0 * span);
    if pos < 0.0 {
        pos += 2.0 * span;
    }
    if pos > span {
        pos = 2.0 * span - pos;
    }
    lo + pos
}

/// Named palette used by specs, captions and the programmatic classifier.
pub const PALETTE: [(&str, [f64; 3]); 6] = [
    ("red", [0.9, 0.1, 0.1]),
    ("green", [0.1, 0.8, 0.15]),
    ("blue", [0.15, 0.25, 0.95]),
    ("yellow", [0.95, 0.9, 0.1]),
    ("cyan", [0.1, 0.85, 0.9]),
    ("magenta", [0.9, 0.15, 0.85]),
];

pub const BACKGROUNDS: [(&str, [f64; 3]); 2] = [
    ("black", [0.02, 0.02, 0.02]),
    ("gray", [0.25, 0.25, 0.25]),
];

pub fn color_name(rgb: &[f64; 3]) -> &'static str {
    let mut best = PALETTE[0].0;
    let mut best_d = f64::MAX;
    for (name, c) in PALETTE.iter() {
        let d: f64 = (0..3).map(|i| (c[i] - rgb[i]).powi(2)).sum();
        if d < best_d {
            best_d = d;
            best = name;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shot(vx: f64, frames: usize) -> ShotSpec {
        ShotSpec {
            shapes: vec![(
                ShapeSpec {
                    kind: ShapeKind::Circle,
                    color: PALETTE[0].1,
                    size: 3.0,
                    start: (8.0, 8.0),
                },
                Motion {
                    kind: MotionKind::Translate,
                    velocity: (vx, 0.0),
                },
            )],
            camera: Camera::Static,
            background: BACKGROUNDS[0].1,
            frames,
        }
    }

    #[test]
    fn validation_rejects_escaping_shape() {
        let ok = SceneSpec::single(shot(1.0, 5));
        assert!(ok.validate(16).is_ok());
        let bad = SceneSpec::single(shot(3.0, 5));
        assert!(bad.validate(16).is_err());
    }

    #[test]
    fn validation_rejects_zero_length_shot() {
        let bad = SceneSpec::single(shot(0.0, 0));
        assert!(bad.validate(16).is_err());
    }

    #[test]
    fn bounce_stays_inside() {
        for f in 0..50 {
            let p = SceneSpec::shape_position(
                &ShapeSpec {
                    kind: ShapeKind::Square,
                    color: PALETTE[1].1,
                    size: 3.0,
                    start: (8.0, 8.0),
                },
                &Motion {
                    kind: MotionKind::Bounce,
                    velocity: (2.3, 1.7),
                },
                f,
                16,
            );
            assert!(p.0 >= 3.0 - 1e-9 && p.0 <= 13.0 + 1e-9, "frame {f}: {p:?}");
            assert!(p.1 >= 3.0 - 1e-9 && p.1 <= 13.0 + 1e-9, "frame {f}: {p:?}");
        }
    }
}
