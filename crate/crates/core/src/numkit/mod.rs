//! Dense double-precision primitives with exact reverse-mode gradients.

mod gradcheck;
mod layers;
pub mod ops;
mod registry;
mod rng;
mod tensor;

pub use gradcheck::{grad_check, relative_error, GradCheckError, GradCheckReport, ParamCheck, REL_ERR_FLOOR};
pub use layers::{mlp_forward, xavier_bound, xavier_uniform, Activation, LayerNorm, Linear, Mlp, MlpCache, MlpLayer};
pub use ops::{gelu, gelu_grad, layer_norm, linear, sigmoid, softplus, LayerNormCache, LN_EPS};
pub use registry::{ParamId, ParamRegistry, RegistryError};
pub use rng::Rng;
pub use tensor::{ShapeError, Tensor};

pub(crate) use tensor::ensure_len;
