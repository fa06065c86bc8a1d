//! Template caption generator.
//!
//! Long captions carry a static clause (appearance, background) followed by a
//! dynamic clause (motion, camera). Short captions keep only the dynamic
//! clause, with the subject referred to generically so no appearance word
//! leaks in.

use super::scene::{color_name, Camera, MotionKind, SceneSpec, ShotSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaptionStyle {
    Long,
    Short,
}

/// Word the classifier and captions use for a motion.
pub fn motion_word(motion: &super::scene::Motion) -> &'static str {
    match motion.kind {
        MotionKind::Bounce => "bounces",
        MotionKind::Orbit => "orbits",
        MotionKind::Translate => {
            let (vx, vy) = motion.velocity;
            if vx == 0.0 && vy == 0.0 {
                "still"
            } else if vx.abs() >= vy.abs() {
                if vx > 0.0 {
                    "right"
                } else {
                    "left"
                }
            } else if vy > 0.0 {
                "down"
            } else {
                "up"
            }
        }
    }
}

fn speed_word(motion: &super::scene::Motion) -> Option<&'static str> {
    let (vx, vy) = motion.velocity;
    let speed = (vx * vx + vy * vy).sqrt();
    match motion.kind {
        MotionKind::Translate if speed == 0.0 => None,
        MotionKind::Orbit => None,
        _ => {
            if speed >= 1.4 {
                Some("quickly")
            } else if speed <= 0.7 {
                Some("slowly")
            } else {
                None
            }
        }
    }
}

fn static_clause(shot: &ShotSpec) -> String {
    let bg = match color_bg(shot.background) {
        Some(n) => n,
        None => "plain",
    };
    let mut parts = Vec::new();
    for (shape, _) in &shot.shapes {
        parts.push(format!("a {} {}", color_name(&shape.color), shape.kind.word()));
    }
    format!("{} on a {} background", parts.join(" and "), bg)
}

fn color_bg(bg: [f64; 3]) -> Option<&'static str> {
    for (name, c) in super::scene::BACKGROUNDS.iter() {
        let d: f64 = (0..3).map(|i| (c[i] - bg[i]).abs()).sum();
        if d < 0.05 {
            return Some(name);
        }
    }
    None
}

fn dynamic_clause(shot: &ShotSpec, subject: &str) -> String {
    let (_, motion) = &shot.shapes[0];
    let mut s = match motion_word(motion) {
        "still" => format!("{subject} stays still"),
        "bounces" => format!("{subject} bounces around"),
        "orbits" => format!("{subject} orbits around"),
        dir => format!("{subject} moves {dir}"),
    };
    if let Some(adv) = speed_word(motion) {
        s.push(' ');
        s.push_str(adv);
    }
    match shot.camera {
        Camera::Static => s.push_str(", the camera is static"),
        Camera::Pan { dx, dy } => {
            let dir = if dx.abs() >= dy.abs() {
                if dx > 0.0 {
                    "right"
                } else {
                    "left"
                }
            } else if dy > 0.0 {
                "down"
            } else {
                "up"
            };
            s.push_str(&format!(", the camera pans {dir}"));
        }
    }
    s
}

/// Generate the caption for a scene in the requested style. Multi-shot scenes
/// produce one ordered clause per shot joined by "then".
pub fn gen_caption(spec: &SceneSpec, style: CaptionStyle) -> String {
    let mut clauses = Vec::new();
    for shot in &spec.shots {
        let clause = match style {
            CaptionStyle::Long => {
                format!("{}, {}", static_clause(shot), dynamic_clause(shot, "it"))
            }
            CaptionStyle::Short => dynamic_clause(shot, "the shape"),
        };
        clauses.push(clause);
    }
    clauses.join(" then ")
}

/// Fixed word list shared by the caption generator and the text tokenizer.
/// Index 0 is the unknown token.
pub fn vocab() -> &'static [&'static str] {
    &[
        "<unk>", "a", "and", "around", "background", "black", "blue", "bounces", "camera",
        "circle", "cyan", "down", "gray", "green", "is", "it", "left", "magenta", "moves", "on",
        "orbits", "pans", "plain", "quickly", "red", "right", "shape", "slowly", "square",
        "static", "stays", "still", "the", "then", "triangle", "up", "yellow",
    ]
}

/// Lowercase word tokenizer over the fixed vocabulary; punctuation splits and
/// unknown words map to token 0.
pub fn tokenize(text: &str) -> Vec<usize> {
    let words = vocab();
    text.split(|c: char| !c.is_ascii_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| {
            let lw = w.to_ascii_lowercase();
            words.iter().position(|v| **v == lw).unwrap_or(0)
        })
        .collect()
}
