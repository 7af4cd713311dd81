//! Complex-valued transformer autoencoder over truncated Fourier crystal
//! representations, and a radial-Laplace diffusion model on its latent ladder.

pub mod diffusion;
pub mod error;
pub mod nn;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;
pub mod vae;

pub use error::{ModelError, Result};
pub use params::{ParamGrads, ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{ComplexTensor, C64};
