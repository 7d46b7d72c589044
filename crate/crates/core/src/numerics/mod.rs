//! Complex tensors, linear operators and spectral-norm estimation.

mod operator;
mod spectral;
mod tensor;

pub use operator::{
    build_operator, DesignView, LinearOperator, OperatorKind, OperatorSpec, ADJOINT_TOLERANCE,
};
pub use spectral::{estimate_sigma_max, power_iteration, SpectralEstimate};
pub use tensor::{relative_distance, Tensor};

pub use num_complex::Complex64;
