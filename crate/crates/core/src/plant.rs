//! Benchmark plant `ẋ = f(x) + u` and reference trajectory.
//!
//! The drift is `f(x) = A y(x)` with
//! `y(x) = [x; tanh x; sin x; sech x; x⊙x; x⊙x⊙x]` and `A ∈ R^{n×6n}`.
//! The reference is `x_{d,i}(t) = 0.5 + sin(ω_i t)`.
//!
//! [`PlantModel::Realizable`] replaces the drift with a network at known
//! weights `θ*`, so the approximation error is exactly zero. It is a test
//! fixture for checking the convergence and Lyapunov properties.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::resnet::{init_weights, resnet_forward, ResNetSpec, WeightVector};
use crate::rng::SimRng;

pub const A_RANGE: (f64, f64) = (0.0, 0.1);
pub const X0_RANGE: (f64, f64) = (0.0, 2.0);
pub const OMEGA_RANGE: (f64, f64) = (0.0, 20.0);

/// `y(x)`, length `6n`.
pub fn feature_map(x: &[f64]) -> Vec<f64> {
    let mut y = Vec::with_capacity(6 * x.len());
    y.extend_from_slice(x);
    y.extend(x.iter().map(|v| v.tanh()));
    y.extend(x.iter().map(|v| v.sin()));
    y.extend(x.iter().map(|v| 1.0 / v.cosh()));
    y.extend(x.iter().map(|v| v * v));
    y.extend(x.iter().map(|v| v * v * v));
    y
}

#[derive(Debug, Clone, PartialEq)]
pub enum PlantModel {
    /// `f(x) = A y(x)`.
    Polynomial { a: DMatrix<f64> },
    /// `f(x) = Φ^{θ*}(x)`.
    Realizable {
        spec: ResNetSpec,
        theta_star: WeightVector,
    },
}

impl PlantModel {
    pub fn n(&self) -> usize {
        match self {
            PlantModel::Polynomial { a } => a.nrows(),
            PlantModel::Realizable { spec, .. } => spec.n(),
        }
    }

    pub fn drift(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.n() {
            return Err(Error::Dimension {
                context: "plant state",
                expected: self.n(),
                actual: x.len(),
            });
        }
        match self {
            PlantModel::Polynomial { a } => {
                let y = DVector::from_vec(feature_map(x));
                Ok((a * y).as_slice().to_vec())
            }
            PlantModel::Realizable { spec, theta_star } => {
                Ok(resnet_forward(spec, theta_star, x)?.0)
            }
        }
    }

    pub fn theta_star(&self) -> Option<&WeightVector> {
        match self {
            PlantModel::Realizable { theta_star, .. } => Some(theta_star),
            PlantModel::Polynomial { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceSpec {
    pub omega: Vec<f64>,
}

impl ReferenceSpec {
    /// `(x_d(t), ẋ_d(t))`.
    pub fn at(&self, t: f64) -> (Vec<f64>, Vec<f64>) {
        self.omega
            .iter()
            .map(|&w| {
                let (s, c) = (w * t).sin_cos();
                (0.5 + s, w * c)
            })
            .unzip()
    }
}

/// Free-function form of [`ReferenceSpec::at`].
pub fn reference(refspec: &ReferenceSpec, t: f64) -> (Vec<f64>, Vec<f64>) {
    refspec.at(t)
}

/// A sampled benchmark instance: plant, initial state and reference.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantInstance {
    pub model: PlantModel,
    pub x0: Vec<f64>,
    pub reference: ReferenceSpec,
}

/// Draws `A ~ U[0,0.1)^{n×6n}` (row by row), then `x0 ~ U[0,2)^n`, then
/// `ω ~ U[0,20)^n`.
pub fn sample_plant(rng: &mut SimRng, n: usize) -> PlantInstance {
    assert!(n >= 1, "sample_plant: n must be positive");
    let a_rows = rng.uniform_vec(n * 6 * n, A_RANGE.0, A_RANGE.1);
    let a = DMatrix::from_row_slice(n, 6 * n, &a_rows);
    let (x0, reference) = sample_initial_and_reference(rng, n);
    PlantInstance {
        model: PlantModel::Polynomial { a },
        x0,
        reference,
    }
}

/// Realizable instance: `θ* ~ U[-bound, bound)` on `spec`, then `x0` and
/// `ω` as in [`sample_plant`].
pub fn sample_realizable_plant(
    rng: &mut SimRng,
    spec: &ResNetSpec,
    bound: f64,
) -> Result<PlantInstance> {
    let theta_star = init_weights(spec, rng, -bound, bound)?;
    let (x0, reference) = sample_initial_and_reference(rng, spec.n());
    Ok(PlantInstance {
        model: PlantModel::Realizable {
            spec: spec.clone(),
            theta_star,
        },
        x0,
        reference,
    })
}

fn sample_initial_and_reference(rng: &mut SimRng, n: usize) -> (Vec<f64>, ReferenceSpec) {
    let x0 = rng.uniform_vec(n, X0_RANGE.0, X0_RANGE.1);
    let omega = rng.uniform_vec(n, OMEGA_RANGE.0, OMEGA_RANGE.1);
    (x0, ReferenceSpec { omega })
}

impl PlantInstance {
    pub fn n(&self) -> usize {
        self.x0.len()
    }

    /// CSV text: the `n` rows of `A`, then `x0`, then `ω`. Values use the
    /// shortest representation that parses back to the same bits.
    pub fn to_csv(&self) -> Result<String> {
        let PlantModel::Polynomial { a } = &self.model else {
            return Err(Error::InvalidConfig(
                "only f(x) = A y(x) plants can be written as CSV".into(),
            ));
        };
        let mut out = String::new();
        let row = |out: &mut String, vals: &mut dyn Iterator<Item = f64>| {
            let parts: Vec<String> = vals.map(|v| format!("{v:?}")).collect();
            let _ = writeln!(out, "{}", parts.join(","));
        };
        for r in 0..a.nrows() {
            row(&mut out, &mut a.row(r).iter().copied());
        }
        row(&mut out, &mut self.x0.iter().copied());
        row(&mut out, &mut self.reference.omega.iter().copied());
        Ok(out)
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let rows: Vec<Vec<f64>> = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .enumerate()
            .map(|(i, l)| {
                l.split(',')
                    .map(|v| {
                        v.trim().parse::<f64>().map_err(|e| {
                            Error::InvalidConfig(format!("plant CSV line {}: {e}", i + 1))
                        })
                    })
                    .collect()
            })
            .collect::<Result<_>>()?;
        if rows.len() < 3 {
            return Err(Error::InvalidConfig(
                "plant CSV needs n rows of A plus x0 and omega".into(),
            ));
        }
        let n = rows.len() - 2;
        for (i, r) in rows.iter().enumerate() {
            let expected = if i < n { 6 * n } else { n };
            if r.len() != expected {
                return Err(Error::InvalidConfig(format!(
                    "plant CSV line {}: expected {expected} values, found {}",
                    i + 1,
                    r.len()
                )));
            }
        }
        let flat: Vec<f64> = rows[..n].iter().flatten().copied().collect();
        Ok(Self {
            model: PlantModel::Polynomial {
                a: DMatrix::from_row_slice(n, 6 * n, &flat),
            },
            x0: rows[n].clone(),
            reference: ReferenceSpec {
                omega: rows[n + 1].clone(),
            },
        })
    }
}
