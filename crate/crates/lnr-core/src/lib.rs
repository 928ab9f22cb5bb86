//! Layered neural video decomposition and retiming.
//!
//! Decomposes a video with known person UV maps and rough segmentation into
//! a set of RGBA layers plus an opaque background, by fitting a small
//! encoder-decoder renderer and learnable neural textures to the clip.
//! Learned layers can then be recombined with per-layer time edits (remove,
//! freeze, warp, duplicate) to retime people independently.

pub mod camera;
pub mod compose;
pub mod dataio;
pub mod error;
pub mod eval;
pub mod fd;
pub mod losses;
pub mod nn;
pub mod renderer;
pub mod retime;
pub mod synth;
pub mod texture;
pub mod trainer;

pub use error::{CoreError, Result};
