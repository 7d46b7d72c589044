//! Invertible layers with forward maps, inverses and analytic vector-Jacobian products.

mod gradient;
mod prox;
mod residual;

pub use gradient::{FidelityTerm, ForwardModel, GradientLayer, CERTIFICATE_ITERS, CERTIFICATE_SEED};
pub use prox::{QuadraticProxLayer, SmoothProxLayer};
pub use residual::{constrain_lipschitz, ConvBank, LipschitzReport, ResidualLayer};

use crate::error::Result;
use crate::fixed_point::{check_contraction, FixedPointConfig};
use crate::numerics::Tensor;

/// Work done by layer operations, in units of one layer map evaluation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OpMeter {
    pub operator_applications: u64,
    pub fixed_point_inner_iterations: u64,
}

impl OpMeter {
    pub fn absorb(&mut self, other: OpMeter) {
        self.operator_applications += other.operator_applications;
        self.fixed_point_inner_iterations += other.fixed_point_inner_iterations;
    }
}

/// Output of a layer VJP.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerVjp {
    pub input_grad: Tensor,
    /// Aligned with [`Layer::parameter_names`].
    pub param_grads: Vec<f64>,
    /// Cotangents for the measurements of a gradient layer, one per fidelity term.
    pub measurement_grads: Vec<Tensor>,
}

#[derive(Debug, Clone)]
pub enum Layer {
    Gradient(GradientLayer),
    QuadraticProx(QuadraticProxLayer),
    SmoothProx(SmoothProxLayer),
    Residual(ResidualLayer),
}

/// Invertibility verdict for one layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerCertificate {
    /// `None` for layers whose inverse is explicit.
    pub bound: Option<f64>,
    pub accepted: bool,
}

impl LayerCertificate {
    pub fn margin(&self) -> Option<f64> {
        self.bound.map(|b| 1.0 - b)
    }
}

impl Layer {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Layer::Gradient(_) => "gradient",
            Layer::QuadraticProx(_) => "quadratic-prox",
            Layer::SmoothProx(_) => "smooth-prox",
            Layer::Residual(_) => "residual",
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            Layer::Gradient(l) => l.shape(),
            Layer::QuadraticProx(l) => l.shape(),
            Layer::SmoothProx(l) => l.shape(),
            Layer::Residual(l) => l.shape(),
        }
    }

    pub fn forward(&self, x: &Tensor, meter: &mut OpMeter) -> Result<Tensor> {
        match self {
            Layer::Gradient(l) => l.forward(x, meter),
            Layer::QuadraticProx(l) => l.forward(x, meter),
            Layer::SmoothProx(l) => l.forward(x, meter),
            Layer::Residual(l) => l.forward(x, meter),
        }
    }

    /// `cfg` drives the fixed-point kinds; prox inverses are explicit.
    pub fn inverse(&self, x_next: &Tensor, cfg: &FixedPointConfig, meter: &mut OpMeter) -> Result<Tensor> {
        match self {
            Layer::Gradient(l) => l.inverse(x_next, cfg, meter),
            Layer::QuadraticProx(l) => l.inverse(x_next, meter),
            Layer::SmoothProx(l) => l.inverse(x_next, meter),
            Layer::Residual(l) => l.inverse(x_next, cfg, meter),
        }
    }

    pub fn vjp(&self, x_in: &Tensor, q_out: &Tensor, meter: &mut OpMeter) -> Result<LayerVjp> {
        match self {
            Layer::Gradient(l) => l.vjp(x_in, q_out, meter),
            Layer::QuadraticProx(l) => l.vjp(x_in, q_out, meter),
            Layer::SmoothProx(l) => l.vjp(x_in, q_out, meter),
            Layer::Residual(l) => l.vjp(x_in, q_out, meter),
        }
    }

    pub fn certificate(&self) -> LayerCertificate {
        match self {
            Layer::Gradient(l) => {
                let v = check_contraction(l.lipschitz_bound());
                LayerCertificate {
                    bound: Some(v.bound),
                    accepted: v.accepted,
                }
            }
            Layer::Residual(l) => LayerCertificate {
                bound: Some(l.lipschitz_bound()),
                accepted: l.is_certified(),
            },
            Layer::QuadraticProx(_) | Layer::SmoothProx(_) => LayerCertificate {
                bound: None,
                accepted: true,
            },
        }
    }

    pub fn parameter_names(&self) -> Vec<String> {
        match self {
            Layer::Gradient(l) => l.parameter_names(),
            Layer::QuadraticProx(_) | Layer::SmoothProx(_) => vec!["strength".into()],
            Layer::Residual(l) => l.parameter_names(),
        }
    }

    pub fn parameters(&self) -> Vec<f64> {
        match self {
            Layer::Gradient(l) => l.parameters(),
            Layer::QuadraticProx(l) => vec![l.strength()],
            Layer::SmoothProx(l) => vec![l.strength()],
            Layer::Residual(l) => l.parameters(),
        }
    }

    pub fn with_parameters(&self, values: &[f64]) -> Result<Layer> {
        Ok(match self {
            Layer::Gradient(l) => Layer::Gradient(l.with_parameters(values)?),
            Layer::QuadraticProx(l) => Layer::QuadraticProx(l.with_parameters(values)?),
            Layer::SmoothProx(l) => Layer::SmoothProx(l.with_parameters(values)?),
            Layer::Residual(l) => Layer::Residual(l.with_parameters(values)?),
        })
    }

    pub fn as_gradient(&self) -> Option<&GradientLayer> {
        match self {
            Layer::Gradient(l) => Some(l),
            _ => None,
        }
    }
}

impl From<GradientLayer> for Layer {
    fn from(l: GradientLayer) -> Self {
        Layer::Gradient(l)
    }
}

impl From<QuadraticProxLayer> for Layer {
    fn from(l: QuadraticProxLayer) -> Self {
        Layer::QuadraticProx(l)
    }
}

impl From<SmoothProxLayer> for Layer {
    fn from(l: SmoothProxLayer) -> Self {
        Layer::SmoothProx(l)
    }
}

impl From<ResidualLayer> for Layer {
    fn from(l: ResidualLayer) -> Self {
        Layer::Residual(l)
    }
}

pub fn layer_forward(layer: &Layer, x: &Tensor) -> Result<Tensor> {
    layer.forward(x, &mut OpMeter::default())
}

pub fn layer_inverse(layer: &Layer, x_next: &Tensor, cfg: &FixedPointConfig) -> Result<Tensor> {
    layer.inverse(x_next, cfg, &mut OpMeter::default())
}

pub fn layer_vjp(layer: &Layer, x_in: &Tensor, q_out: &Tensor) -> Result<LayerVjp> {
    layer.vjp(x_in, q_out, &mut OpMeter::default())
}
