//! Fixed-step integration of the coupled state and weight dynamics
//!
//! ```text
//! ẋ  = f(x) + u(x, θ̂, t)
//! θ̂̇ = adaptation law evaluated with the same Φ' that produced Φ̂
//! ```
//!
//! and the offline metrics computed from a [`TrajectoryLog`].

use serde::{Deserialize, Serialize};

use crate::control::{self, AdaptationLaw, Gains};
use crate::error::{Error, Result};
use crate::jacobian::JacobianFactors;
use crate::plant::PlantInstance;
use crate::resnet::{init_weights, resnet_forward, ResNetSpec, WeightVector};
use crate::rng::SimRng;

/// A state norm above this is treated as divergence.
pub const DIVERGENCE_LIMIT: f64 = 1e8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Integrator {
    #[default]
    Euler,
    Rk4,
}

/// Everything needed to run one episode except the plant and the weight
/// seed.
#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub dt: f64,
    pub horizon: f64,
    pub integrator: Integrator,
    pub spec: ResNetSpec,
    pub gains: Gains,
    pub law: AdaptationLaw,
    /// Replace `sgn(e)` by `clamp(e/δ)`. Off by default.
    pub boundary_layer: Option<f64>,
    /// Log every `decimation`-th step.
    pub decimation: usize,
    pub init_low: f64,
    pub init_high: f64,
    /// Seconds between full `θ̂` snapshots.
    pub snapshot_interval: f64,
}

impl SimConfig {
    /// Benchmark defaults: 20 residual blocks of one 10-wide tanh hidden
    /// layer, `σ_e = σ_s = 2`, `Γ = I`, Euler at 1 ms over 10 s.
    pub fn benchmark_default() -> Self {
        Self {
            dt: 1e-3,
            horizon: 10.0,
            integrator: Integrator::Euler,
            spec: ResNetSpec::uniform(10, 20, 1, 10, crate::resnet::Activation::Tanh, true)
                .expect("default architecture is valid"),
            gains: Gains::default(),
            law: AdaptationLaw::Sliding,
            boundary_layer: None,
            decimation: 1,
            init_low: -0.05,
            init_high: 0.05,
            snapshot_interval: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "dt must be positive, got {}",
                self.dt
            )));
        }
        if !(self.horizon >= self.dt) || !self.horizon.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "horizon ({}) must be at least dt ({})",
                self.horizon, self.dt
            )));
        }
        if self.decimation == 0 {
            return Err(Error::InvalidConfig("decimation must be at least 1".into()));
        }
        if let Some(d) = self.boundary_layer {
            if !(d > 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "boundary layer must be positive, got {d}"
                )));
            }
        }
        if !(self.init_low < self.init_high) {
            return Err(Error::InvalidConfig(
                "init_low must be below init_high".into(),
            ));
        }
        if !(self.snapshot_interval > 0.0) {
            return Err(Error::InvalidConfig(
                "snapshot interval must be positive".into(),
            ));
        }
        self.gains.validate()
    }

    /// Number of integration steps, `round(horizon / dt)`.
    pub fn num_steps(&self) -> usize {
        (self.horizon / self.dt).round() as usize
    }
}

/// Closed-loop quantities at one evaluation point.
#[derive(Debug, Clone)]
struct Evaluation {
    xd: Vec<f64>,
    e: Vec<f64>,
    u: Vec<f64>,
    f: Vec<f64>,
    phi_hat: Vec<f64>,
    x_dot: Vec<f64>,
    theta_dot: Vec<f64>,
}

fn evaluate(
    cfg: &SimConfig,
    plant: &PlantInstance,
    t: f64,
    x: &[f64],
    theta: &WeightVector,
) -> Result<Evaluation> {
    let (xd, xd_dot) = plant.reference.at(t);
    let e = control::tracking_error(x, &xd);
    let (phi_hat, cache) = resnet_forward(&cfg.spec, theta, x).map_err(|err| match err {
        Error::Overflow { .. } | Error::NonFiniteInput(_) => Error::Divergence {
            t,
            state_norm: control::norm(x),
        },
        other => other,
    })?;
    let u = control::control_input_smoothed(&e, &xd_dot, &phi_hat, &cfg.gains, cfg.boundary_layer)?;
    let f = plant.model.drift(x)?;
    let x_dot: Vec<f64> = f.iter().zip(&u).map(|(a, b)| a + b).collect();
    let theta_dot = if cfg.gains.gamma == 0.0 && cfg.law == AdaptationLaw::Sliding {
        vec![0.0; theta.len()]
    } else {
        let jac = JacobianFactors::new(&cfg.spec, theta, &cache)?;
        match cfg.law {
            AdaptationLaw::Sliding => control::adaptation_rate_sliding(&e, &jac, &cfg.gains),
            AdaptationLaw::Emod => {
                control::adaptation_rate_emod(&e, theta.as_slice(), &jac, &cfg.gains)
            }
        }
    };
    Ok(Evaluation {
        xd,
        e,
        u,
        f,
        phi_hat,
        x_dot,
        theta_dot,
    })
}

fn axpy(base: &[f64], scale: f64, dir: &[f64]) -> Vec<f64> {
    base.iter().zip(dir).map(|(b, d)| b + scale * d).collect()
}

fn advance(
    cfg: &SimConfig,
    plant: &PlantInstance,
    x: &[f64],
    theta: &WeightVector,
    t: f64,
) -> Result<(Vec<f64>, WeightVector, Evaluation)> {
    let dt = cfg.dt;
    let k1 = evaluate(cfg, plant, t, x, theta)?;
    let (x_next, theta_next) = match cfg.integrator {
        Integrator::Euler => (
            axpy(x, dt, &k1.x_dot),
            theta.with_values(axpy(theta.as_slice(), dt, &k1.theta_dot))?,
        ),
        Integrator::Rk4 => {
            let stage = |scale: f64, k: &Evaluation, tt: f64| -> Result<Evaluation> {
                let xs = axpy(x, scale, &k.x_dot);
                let ts = theta.with_values(axpy(theta.as_slice(), scale, &k.theta_dot))?;
                evaluate(cfg, plant, tt, &xs, &ts)
            };
            let k2 = stage(0.5 * dt, &k1, t + 0.5 * dt)?;
            let k3 = stage(0.5 * dt, &k2, t + 0.5 * dt)?;
            let k4 = stage(dt, &k3, t + dt)?;
            let combine = |base: &[f64], a: &[f64], b: &[f64], c: &[f64], d: &[f64]| -> Vec<f64> {
                (0..base.len())
                    .map(|i| base[i] + dt / 6.0 * (a[i] + 2.0 * b[i] + 2.0 * c[i] + d[i]))
                    .collect()
            };
            let xn = combine(x, &k1.x_dot, &k2.x_dot, &k3.x_dot, &k4.x_dot);
            let tn = combine(
                theta.as_slice(),
                &k1.theta_dot,
                &k2.theta_dot,
                &k3.theta_dot,
                &k4.theta_dot,
            );
            (xn, theta.with_values(tn)?)
        }
    };
    let state_norm = control::norm(&x_next);
    let finite = state_norm.is_finite() && theta_next.as_slice().iter().all(|v| v.is_finite());
    if !finite || state_norm > DIVERGENCE_LIMIT {
        return Err(Error::Divergence {
            t: t + dt,
            state_norm,
        });
    }
    Ok((x_next, theta_next, k1))
}

/// One fixed-step advance of `(x, θ̂)` from time `t`.
pub fn step(
    cfg: &SimConfig,
    plant: &PlantInstance,
    x: &[f64],
    theta: &WeightVector,
    t: f64,
) -> Result<(Vec<f64>, WeightVector)> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Divergence {
            t,
            state_norm: control::norm(x),
        });
    }
    let (x, theta, _) = advance(cfg, plant, x, theta, t)?;
    Ok((x, theta))
}

/// Logged time series. Row `k` holds the state at `t_k` and the input
/// applied over the following step.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrajectoryLog {
    pub dt: f64,
    pub horizon: f64,
    pub decimation: usize,
    pub t: Vec<f64>,
    pub x: Vec<Vec<f64>>,
    pub xd: Vec<Vec<f64>>,
    pub e: Vec<Vec<f64>>,
    pub u: Vec<Vec<f64>>,
    /// True drift `f(x)`.
    pub f: Vec<Vec<f64>>,
    /// Network estimate `Φ^θ̂(x)`.
    pub phi_hat: Vec<Vec<f64>>,
    /// `V_L` at each logged row; only for realizable plants.
    pub lyapunov: Option<Vec<f64>>,
    /// `(t, θ̂)` every snapshot interval, starting at `t = 0`.
    pub snapshots: Vec<(f64, Vec<f64>)>,
    pub final_theta: Vec<f64>,
}

impl TrajectoryLog {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    /// `‖f(x) - Φ^θ̂(x)‖` per row.
    pub fn approximation_error_norms(&self) -> Vec<f64> {
        self.f
            .iter()
            .zip(&self.phi_hat)
            .map(|(f, p)| {
                f.iter()
                    .zip(p)
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect()
    }

    pub fn error_norms(&self) -> Vec<f64> {
        self.e.iter().map(|e| control::norm(e)).collect()
    }

    pub fn input_norms(&self) -> Vec<f64> {
        self.u.iter().map(|u| control::norm(u)).collect()
    }
}

/// Integrates one episode from `plant.x0` with weights drawn from
/// `weight_seed`.
pub fn run_episode(
    cfg: &SimConfig,
    plant: &PlantInstance,
    weight_seed: u64,
) -> Result<TrajectoryLog> {
    cfg.validate()?;
    let mut rng = SimRng::seed_from_u64(weight_seed);
    let theta0 = init_weights(&cfg.spec, &mut rng, cfg.init_low, cfg.init_high)?;
    run_episode_from(cfg, plant, theta0)
}

/// [`run_episode`] from explicit initial weights.
pub fn run_episode_from(
    cfg: &SimConfig,
    plant: &PlantInstance,
    theta0: WeightVector,
) -> Result<TrajectoryLog> {
    cfg.validate()?;
    if plant.n() != cfg.spec.n() {
        return Err(Error::Dimension {
            context: "plant dimension",
            expected: cfg.spec.n(),
            actual: plant.n(),
        });
    }
    let theta_star = plant.model.theta_star();
    if let Some(ts) = theta_star {
        if ts.len() != theta0.len() {
            return Err(Error::Dimension {
                context: "realizable plant weights",
                expected: theta0.len(),
                actual: ts.len(),
            });
        }
    }
    let steps = cfg.num_steps();
    let snapshot_every = ((cfg.snapshot_interval / cfg.dt).round() as usize).max(1);
    let rows = steps.div_ceil(cfg.decimation);
    let mut log = TrajectoryLog {
        dt: cfg.dt,
        horizon: cfg.horizon,
        decimation: cfg.decimation,
        lyapunov: theta_star.map(|_| Vec::with_capacity(rows)),
        ..TrajectoryLog::default()
    };
    let mut x = plant.x0.clone();
    let mut theta = theta0;
    for k in 0..steps {
        let t = k as f64 * cfg.dt;
        if k % snapshot_every == 0 {
            log.snapshots.push((t, theta.as_slice().to_vec()));
        }
        let (x_next, theta_next, eval) = advance(cfg, plant, &x, &theta, t)?;
        if k % cfg.decimation == 0 {
            if let (Some(ts), Some(v)) = (theta_star, log.lyapunov.as_mut()) {
                let tilde: Vec<f64> = ts
                    .as_slice()
                    .iter()
                    .zip(theta.as_slice())
                    .map(|(a, b)| a - b)
                    .collect();
                v.push(control::lyapunov_value(&eval.e, &tilde, &cfg.gains));
            }
            log.t.push(t);
            log.x.push(x.clone());
            log.xd.push(eval.xd);
            log.e.push(eval.e);
            log.u.push(eval.u);
            log.f.push(eval.f);
            log.phi_hat.push(eval.phi_hat);
        }
        x = x_next;
        theta = theta_next;
    }
    if steps.is_multiple_of(snapshot_every) {
        log.snapshots
            .push((steps as f64 * cfg.dt, theta.as_slice().to_vec()));
    }
    log.final_theta = theta.into_values();
    Ok(log)
}

/// Cost weights `Q = q I`, `R = r I`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostWeights {
    pub q: f64,
    pub r: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        Self { q: 1.0, r: 0.01 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub e_rms: f64,
    pub f_rms: f64,
    pub u_rms: f64,
    /// `∫ e^T Q e + u^T R u dt` over the horizon.
    pub cost: f64,
    /// `max ‖e‖` over the last 20% of the horizon.
    pub ultimate_bound: f64,
}

fn rms(norms: impl Iterator<Item = f64>) -> f64 {
    let (sum, count) = norms.fold((0.0, 0usize), |(s, c), v| (s + v * v, c + 1));
    if count == 0 {
        0.0
    } else {
        (sum / count as f64).sqrt()
    }
}

/// RMS norms, cost and ultimate bound of a log.
///
/// The cost is trapezoidal over the logged grid. The last row's integrand
/// is held from its time stamp to the horizon, since row `k` carries the
/// input applied over `[t_k, t_k + Δ)`.
pub fn metrics(log: &TrajectoryLog, weights: CostWeights) -> Metrics {
    if log.is_empty() {
        return Metrics {
            e_rms: 0.0,
            f_rms: 0.0,
            u_rms: 0.0,
            cost: 0.0,
            ultimate_bound: 0.0,
        };
    }
    let e_norms = log.error_norms();
    let u_norms = log.input_norms();
    let integrand: Vec<f64> = e_norms
        .iter()
        .zip(&u_norms)
        .map(|(e, u)| weights.q * e * e + weights.r * u * u)
        .collect();
    let mut cost = 0.0;
    for k in 1..log.len() {
        cost += 0.5 * (integrand[k] + integrand[k - 1]) * (log.t[k] - log.t[k - 1]);
    }
    let last = log.len() - 1;
    cost += integrand[last] * (log.horizon - log.t[last]).max(0.0);

    let window_start = 0.8 * log.horizon;
    let ultimate_bound = log
        .t
        .iter()
        .zip(&e_norms)
        .filter(|(t, _)| **t >= window_start - 1e-12)
        .map(|(_, e)| *e)
        .fold(0.0, f64::max);

    Metrics {
        e_rms: rms(e_norms.iter().copied()),
        f_rms: rms(log.approximation_error_norms().into_iter()),
        u_rms: rms(u_norms.iter().copied()),
        cost,
        ultimate_bound,
    }
}
