//! Dense feed-forward ε-predictor with hand-written reverse-mode gradients
//! and an Adam optimizer.

mod adam;
mod checkpoint;
mod network;
mod params;

pub use adam::{OptimState, StepOutcome};
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use network::{Activation, Architecture, Denoiser, DenoiserInput, FrozenDenoiser, Real};
pub use params::{ParamVector, TensorSpec};
