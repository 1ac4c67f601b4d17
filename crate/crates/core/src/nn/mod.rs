//! Minimal CPU layers with explicit backward passes.
//!
//! Every layer works on a single `(C, H, W)` sample. Forward calls return a
//! cache that the matching backward call consumes; gradients are written into
//! a [`Grads`] map keyed by parameter path, so a parameter that is never on a
//! backward path never gets a buffer.

mod conv;
mod ops;
mod params;

pub use conv::{Conv2d, ConvCache};
pub use ops::{concat_channels, relu, relu_backward, sigmoid, split_channels, Bilinear};
pub use params::{Grads, ParamStore};

pub(crate) use conv::kaiming_normal;
pub(crate) use params::zeros;
