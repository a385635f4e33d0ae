//! Minimal dense-tensor reverse-mode differentiation engine and the small
//! U-net corrector trained on top of it.

mod adam;
pub(crate) mod conv;
mod gradcheck;
mod tape;
mod tensor;
mod unet;

pub use adam::{AdamConfig, AdamState};
pub use gradcheck::gradient_check;
pub use tape::{BatchProjector, Grads, NodeId, Tape};
pub use tensor::{ParamSet, Parameter, Real};
pub use unet::{SmallUNet, UNetConfig, UNetOutput};
