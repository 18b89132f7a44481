//! Parameters, layers and the optimizer.

mod layers;
mod optim;
mod params;
mod profile;

pub use layers::{Conv2d, ConvT2d, ResBlock};
pub use optim::{clip_global_norm, Adam, AdamState};
pub use params::{Bound, ParamId, ParamStore};
pub use profile::{LayerKind, LayerStat, Profile};
