//! Deep residual network adaptive control.
//!
//! A controller for `ẋ = f(x) + u` whose feedforward term is a residual
//! network `Φ^θ̂(x)` with every layer's weights adapted online from the
//! tracking error. The crate provides the network and its analytic weight
//! Jacobian, the control and adaptation laws, the benchmark plant, a
//! fixed-step closed-loop simulator, and the Monte Carlo driver that
//! compares residual, fully-connected and shallow networks.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod control;
pub mod error;
pub mod jacobian;
pub mod linalg;
pub mod monte_carlo;
pub mod output;
pub mod plant;
pub mod resnet;
pub mod rng;
pub mod sim;

pub use config::ExperimentConfig;
pub use control::{AdaptationLaw, Gains};
pub use error::{Error, Result};
pub use jacobian::{JacobianFactors, JacobianMatrix, KronOrder, LayerCheck, WeightJacobian};
pub use monte_carlo::{Architecture, BatchResult, Comparison, PlantSelection, RunRecord};
pub use plant::{PlantInstance, PlantModel, ReferenceSpec};
pub use resnet::{Activation, BlockSpec, ForwardCache, ResNetSpec, WeightLayout, WeightVector};
pub use rng::SimRng;
pub use sim::{CostWeights, Integrator, Metrics, SimConfig, TrajectoryLog};
