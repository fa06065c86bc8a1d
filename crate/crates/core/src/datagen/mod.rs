//! Procedural video corpus: scene specs, the renderer, caption generation,
//! curation (shot detection, quality filtering, dedup, rebalancing), and
//! clip/manifest I/O.

pub mod caption;
pub mod classify;
pub mod corpus;
pub mod curate;
pub mod io;
pub mod manifest;
pub mod render;
pub mod scene;

pub use caption::{gen_caption, tokenize, vocab, CaptionStyle};
pub use corpus::{build_corpus, Corpus, CorpusConfig};
pub use curate::{dedup, detect_shots, quality_filter, rebalance, toy_embedding};
pub use manifest::{Attributes, ClipRecord, DatasetManifest};
pub use render::synth_clip;
pub use scene::{Camera, Motion, MotionKind, SceneSpec, ShapeKind, ShapeSpec, ShotSpec};
