//! Face-swap detection for a closed identity set.
//!
//! A face identification model trained on real images of the protected
//! identities gets confused by swapped faces, whose identity mixes the swap's
//! source and target. The maximum of the model's softmax output therefore
//! separates real from fake. This crate bundles the detector, the synthetic
//! ground-truth generator, grey-box evasion attacks, the attention-based
//! finetuning defense, and the evaluation protocols around them.

pub mod attack;
pub mod checkpoint;
pub mod detector;
pub mod eval;
pub mod face;
pub mod identity;
pub mod manifest;
pub mod model;
pub mod store;
pub mod synth;

pub use face::FaceImage;
pub use identity::IdentitySet;
pub use manifest::{DatasetManifest, SampleRecord, Split};
pub use store::{DirStore, ImageStore, MemStore};
