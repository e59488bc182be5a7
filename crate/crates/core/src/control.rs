//! Tracking error, the sliding-mode control input and the two weight
//! adaptation laws.
//!
//! ```text
//! e     = x - x_d
//! u     = ẋ_d - Φ^θ̂(x) - σ_e e - σ_s sgn(e)
//! θ̂̇    = Γ Φ'^T e                              (sliding)
//! θ̂̇    = -σ_θ ‖e‖ θ̂ + Γ Φ'^T e                (e-modification)
//! V_L   = ½ e^T e + ½ θ̃^T Γ^{-1} θ̃
//! ```
//!
//! `Γ` is `γ I`. The gain condition `σ_s > ε̄ + Δ̄` that guarantees
//! asymptotic tracking involves bounds that are not available at run time;
//! it is tuning guidance only and is not checked here.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jacobian::WeightJacobian;

/// Which adaptation law drives `θ̂`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AdaptationLaw {
    #[default]
    Sliding,
    Emod,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gains {
    /// Feedback gain `σ_e`.
    pub sigma_e: f64,
    /// Sliding-mode gain `σ_s`.
    pub sigma_s: f64,
    /// e-modification leakage `σ_θ`.
    pub sigma_theta: f64,
    /// Adaptation gain, `Γ = γ I`.
    pub gamma: f64,
}

impl Default for Gains {
    fn default() -> Self {
        Self {
            sigma_e: 2.0,
            sigma_s: 2.0,
            sigma_theta: 0.0,
            gamma: 1.0,
        }
    }
}

impl Gains {
    pub fn validate(&self) -> Result<()> {
        let ok = self.sigma_e > 0.0
            && self.sigma_s >= 0.0
            && self.sigma_theta >= 0.0
            && self.gamma >= 0.0
            && [self.sigma_e, self.sigma_s, self.sigma_theta, self.gamma]
                .iter()
                .all(|g| g.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!(
                "gains must satisfy sigma_e > 0 and sigma_s, sigma_theta, gamma >= 0 (got {self:?})"
            )))
        }
    }
}

pub fn tracking_error(x: &[f64], x_d: &[f64]) -> Vec<f64> {
    assert_eq!(x.len(), x_d.len(), "tracking_error: length mismatch");
    x.iter().zip(x_d).map(|(a, b)| a - b).collect()
}

/// Componentwise sign with `sgn(0) = 0`.
pub fn sgn(v: &[f64]) -> Vec<f64> {
    v.iter().map(|&x| scalar_sgn(x)).collect()
}

#[inline]
fn scalar_sgn(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Robust term selector: the discontinuous `sgn(e)` or the saturated
/// `clamp(e / δ, -1, 1)` when a boundary layer `δ` is configured.
#[inline]
pub fn switching_term(e: f64, boundary_layer: Option<f64>) -> f64 {
    match boundary_layer {
        Some(delta) => (e / delta).clamp(-1.0, 1.0),
        None => scalar_sgn(e),
    }
}

/// `u = ẋ_d - Φ̂ - σ_e e - σ_s sgn(e)`.
pub fn control_input(
    e: &[f64],
    xd_dot: &[f64],
    phi_hat: &[f64],
    gains: &Gains,
) -> Result<Vec<f64>> {
    control_input_smoothed(e, xd_dot, phi_hat, gains, None)
}

/// [`control_input`] with an optional boundary layer replacing `sgn`.
pub fn control_input_smoothed(
    e: &[f64],
    xd_dot: &[f64],
    phi_hat: &[f64],
    gains: &Gains,
    boundary_layer: Option<f64>,
) -> Result<Vec<f64>> {
    let n = e.len();
    for (len, what) in [
        (xd_dot.len(), "reference derivative"),
        (phi_hat.len(), "network output"),
    ] {
        if len != n {
            return Err(Error::Dimension {
                context: what,
                expected: n,
                actual: len,
            });
        }
    }
    if e.iter()
        .chain(xd_dot)
        .chain(phi_hat)
        .any(|v| !v.is_finite())
    {
        return Err(Error::NonFiniteInput("control_input"));
    }
    Ok((0..n)
        .map(|i| {
            xd_dot[i]
                - phi_hat[i]
                - gains.sigma_e * e[i]
                - gains.sigma_s * switching_term(e[i], boundary_layer)
        })
        .collect())
}

/// `θ̂̇ = γ Φ'^T e`.
pub fn adaptation_rate_sliding<J: WeightJacobian + ?Sized>(
    e: &[f64],
    jac: &J,
    gains: &Gains,
) -> Vec<f64> {
    let mut out = jac.transpose_mul(e);
    out.iter_mut().for_each(|v| *v *= gains.gamma);
    out
}

/// `θ̂̇ = -σ_θ ‖e‖ θ̂ + γ Φ'^T e`.
pub fn adaptation_rate_emod<J: WeightJacobian + ?Sized>(
    e: &[f64],
    theta_hat: &[f64],
    jac: &J,
    gains: &Gains,
) -> Vec<f64> {
    assert_eq!(theta_hat.len(), jac.weight_count());
    let leak = gains.sigma_theta * norm(e);
    let mut out = jac.transpose_mul(e);
    for (o, t) in out.iter_mut().zip(theta_hat) {
        *o = gains.gamma * *o - leak * t;
    }
    out
}

/// `V_L = ½ e^T e + ½ θ̃^T θ̃ / γ`.
pub fn lyapunov_value(e: &[f64], theta_tilde: &[f64], gains: &Gains) -> f64 {
    0.5 * dot(e, e) + 0.5 * dot(theta_tilde, theta_tilde) / gains.gamma
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::jacobian::JacobianMatrix;
    use crate::resnet::{Activation, ResNetSpec};
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;
    use proptest::prelude::*;

    /// 1 × 2 Jacobian `[a b]` on a layout with two weights.
    fn row_jacobian(a: f64, b: f64) -> JacobianMatrix {
        let layout = ResNetSpec::uniform(1, 1, 1, 1, Activation::Tanh, true)
            .unwrap()
            .layout();
        JacobianMatrix::from_parts(DMatrix::from_row_slice(1, 2, &[a, b]), layout).unwrap()
    }

    #[test]
    fn tracking_error_cases() {
        assert_eq!(tracking_error(&[1.0, 2.0], &[1.0, 2.0]), vec![0.0, 0.0]);
        // x_d(0) = 0.5 + sin(0)
        assert_eq!(tracking_error(&[1.5, 1.5], &[0.5, 0.5]), vec![1.0, 1.0]);
    }

    #[test]
    fn sgn_examples() {
        assert_eq!(sgn(&[-2.0, 0.0, 3.0]), vec![-1.0, 0.0, 1.0]);
    }

    #[test]
    fn control_input_examples() {
        let g = Gains::default();
        assert_eq!(
            control_input(&[0.0], &[1.3], &[0.0], &g).unwrap(),
            vec![1.3]
        );
        let u = control_input(&[0.5], &[1.0], &[0.25], &g).unwrap();
        assert_relative_eq!(u[0], -2.25);
        let u = control_input(&[-0.3, 0.2], &[1.0, -1.0], &[0.1, 0.4], &g).unwrap();
        assert_relative_eq!(u[0], 1.0 - 0.1 + 0.6 + 2.0);
        assert_relative_eq!(u[1], -1.0 - 0.4 - 0.4 - 2.0);
        assert!(control_input(&[f64::NAN], &[1.0], &[0.0], &g).is_err());
        assert!(control_input(&[0.0, 1.0], &[1.0], &[0.0], &g).is_err());
    }

    #[test]
    fn boundary_layer_saturates() {
        let g = Gains::default();
        let u =
            control_input_smoothed(&[0.05, 1.0], &[0.0, 0.0], &[0.0, 0.0], &g, Some(0.1)).unwrap();
        assert_relative_eq!(u[0], -2.0 * 0.05 - 2.0 * 0.5);
        assert_relative_eq!(u[1], -2.0 - 2.0);
    }

    #[test]
    fn sliding_rate_by_hand() {
        let g = Gains {
            gamma: 2.0,
            ..Gains::default()
        };
        let (a, b, c) = (0.3, -1.5, 0.7);
        let jac = row_jacobian(a, b);
        assert_eq!(
            adaptation_rate_sliding(&[c], &jac, &g),
            vec![2.0 * a * c, 2.0 * b * c]
        );
        assert_eq!(adaptation_rate_sliding(&[0.0], &jac, &g), vec![0.0, 0.0]);
        // Γ = I
        let unit = adaptation_rate_sliding(&[c], &jac, &Gains::default());
        assert_eq!(unit, jac.transpose_mul(&[c]));
    }

    #[test]
    fn emod_rate_cases() {
        let g = Gains {
            sigma_theta: 1.0,
            sigma_e: 20.0,
            sigma_s: 0.0,
            gamma: 1.0,
        };
        let zero = row_jacobian(0.0, 0.0);
        assert_eq!(
            adaptation_rate_emod(&[1.0], &[2.0, 0.0], &zero, &g),
            vec![-2.0, 0.0]
        );
        let jac = row_jacobian(0.5, -1.0);
        assert_eq!(
            adaptation_rate_emod(&[0.0], &[2.0, -1.0], &jac, &g),
            vec![0.0, 0.0]
        );
        let r = adaptation_rate_emod(&[-2.0], &[0.1, 0.2], &jac, &g);
        assert_relative_eq!(r[0], -0.2 - 1.0);
        assert_relative_eq!(r[1], -0.4 + 2.0);
    }

    #[test]
    fn lyapunov_cases() {
        let g = Gains::default();
        assert_eq!(lyapunov_value(&[0.0], &[0.0], &g), 0.0);
        assert_eq!(lyapunov_value(&[1.0], &[1.0], &g), 1.0);
        let g2 = Gains { gamma: 4.0, ..g };
        assert_eq!(lyapunov_value(&[0.0], &[2.0], &g2), 0.5);
    }

    #[test]
    fn gains_validation() {
        assert!(Gains::default().validate().is_ok());
        assert!(Gains {
            sigma_e: 0.0,
            ..Gains::default()
        }
        .validate()
        .is_err());
        assert!(Gains {
            sigma_s: -1.0,
            ..Gains::default()
        }
        .validate()
        .is_err());
    }

    fn vecs(n: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-10.0f64..10.0, n)
    }

    proptest! {
        #[test]
        fn sgn_is_odd_and_gives_l1(e in vecs(6)) {
            let neg: Vec<f64> = e.iter().map(|v| -v).collect();
            let s = sgn(&e);
            prop_assert_eq!(sgn(&neg), s.iter().map(|v| -v).collect::<Vec<_>>());
            let l1: f64 = e.iter().map(|v| v.abs()).sum();
            prop_assert!((dot(&e, &s) - l1).abs() <= 1e-12 * l1.max(1.0));
        }

        #[test]
        fn tracking_error_antisymmetric(a in vecs(5), b in vecs(5)) {
            let ab = tracking_error(&a, &b);
            let ba = tracking_error(&b, &a);
            for (x, y) in ab.iter().zip(&ba) {
                prop_assert_eq!(*x, -*y);
            }
        }

        #[test]
        fn lyapunov_quadratic(e in vecs(3), t in vecs(4), gamma in 0.1f64..5.0) {
            let g = Gains { gamma, ..Gains::default() };
            let e2: Vec<f64> = e.iter().map(|v| 2.0 * v).collect();
            let t2: Vec<f64> = t.iter().map(|v| 2.0 * v).collect();
            let v = lyapunov_value(&e, &t, &g);
            prop_assert!((lyapunov_value(&e2, &t2, &g) - 4.0 * v).abs() <= 1e-12 * v.max(1.0));
        }

        #[test]
        fn sliding_rate_is_linear(
            j in prop::collection::vec(-2.0f64..2.0, 36),
            e in vecs(3),
            s in -3.0f64..3.0,
        ) {
            let g = Gains::default();
            let layout = ResNetSpec::uniform(3, 1, 1, 2, Activation::Tanh, true).unwrap().layout();
            let jac = |scale: f64| {
                JacobianMatrix::from_parts(DMatrix::from_column_slice(3, 12, &j) * scale, layout.clone()).unwrap()
            };
            let es: Vec<f64> = e.iter().map(|v| s * v).collect();
            let base = adaptation_rate_sliding(&e, &jac(1.0), &g);
            let scaled_e = adaptation_rate_sliding(&es, &jac(1.0), &g);
            let scaled_j = adaptation_rate_sliding(&e, &jac(s), &g);
            for i in 0..12 {
                prop_assert!((scaled_e[i] - s * base[i]).abs() < 1e-10);
                prop_assert!((scaled_j[i] - s * base[i]).abs() < 1e-10);
            }
        }
    }
}
