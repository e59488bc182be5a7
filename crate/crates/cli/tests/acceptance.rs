//! Acceptance suite: eight criteria, one PASS/FAIL line each.
//!
//! Runs for a few minutes on one core, so it is not part of the default
//! `cargo test`. Run it with
//! `cargo test --release -p resnet-ac-cli --test acceptance`.
//! The process exits non-zero if any criterion fails.

use std::fs;
use std::process::{Command, ExitCode};
use std::time::Instant;

use nalgebra::DMatrix;

use resnet_ac_core::jacobian::{
    finite_diff_jacobian, max_relative_error, median_gradient_profiles, resnet_jacobian,
    RELATIVE_ERROR_FLOOR,
};
use resnet_ac_core::linalg::{kron, vec};
use resnet_ac_core::monte_carlo::compare_architectures;
use resnet_ac_core::resnet::{init_weights, resnet_forward};
use resnet_ac_core::sim::{metrics, run_episode_from};
use resnet_ac_core::{
    Activation, AdaptationLaw, Architecture, BlockSpec, CostWeights, ExperimentConfig, ResNetSpec,
    SimRng,
};

const BIN: &str = env!("CARGO_BIN_EXE_resnet-ac");

/// Plant and weight seeds used by every closed-loop criterion, fixed before
/// any results were seen.
const PLANT_SEED: u64 = 1;
const WEIGHT_SEED: u64 = 0;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn random_spec(rng: &mut SimRng) -> ResNetSpec {
    let pick = |rng: &mut SimRng, hi: usize| 1 + (rng.unit() * hi as f64) as usize;
    let n = pick(rng, 5);
    let m = pick(rng, 3);
    let blocks = (0..m)
        .map(|_| {
            let k = pick(rng, 2);
            let mut widths = vec![n];
            widths.extend((0..k).map(|_| pick(rng, 5)));
            widths.push(n);
            BlockSpec::new(widths, vec![Activation::Tanh; k]).unwrap()
        })
        .collect();
    ResNetSpec::new(n, blocks, rng.unit() < 0.5).unwrap()
}

fn jacobian_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = SimRng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let spec = random_spec(&mut rng);
        let theta = init_weights(&spec, &mut rng, -0.5, 0.5).unwrap();
        let x = rng.uniform_vec(spec.n(), -1.0, 1.0);
        let (_, cache) = resnet_forward(&spec, &theta, &x).unwrap();
        let analytic = resnet_jacobian(&spec, &theta, &cache).unwrap();
        let fd = finite_diff_jacobian(&spec, &theta, &x, 1e-6).unwrap();
        worst = worst.max(max_relative_error(
            analytic.matrix(),
            fd.matrix(),
            RELATIVE_ERROR_FLOOR,
        ));
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst < 1e-5 && secs < 10.0,
        format!("max relative error {worst:.2e} (< 1e-5), {secs:.2} s (< 10 s)"),
    )
}

fn vanishing_gradient() -> Outcome {
    let start = Instant::now();
    let spec = ResNetSpec::uniform(10, 20, 1, 10, Activation::Tanh, true).unwrap();
    let g = median_gradient_profiles(&spec, 100, 7, -0.05, 0.05).unwrap();
    let min_ratio = (0..10)
        .map(|p| g.resnet[p] / g.fully_connected[p])
        .fold(f64::INFINITY, f64::min);
    let secs = start.elapsed().as_secs_f64();
    outcome(
        min_ratio >= 10.0 && secs < 30.0,
        format!(
            "smallest median ratio over blocks 1-10 {min_ratio:.2e} (>= 10), {secs:.2} s (< 30 s)"
        ),
    )
}

fn rel_below(a: f64, b: f64) -> f64 {
    1.0 - a / b
}

fn table_comparison() -> (Outcome, Outcome) {
    let config = ExperimentConfig {
        plant_seed: PLANT_SEED,
        weight_seed_base: WEIGHT_SEED,
        runs: 100,
        ..Default::default()
    };
    let sim = config.sim_config().unwrap();
    let plants = config.plant_selection().unwrap();
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    let start = Instant::now();
    let cmp = compare_architectures(&sim, &plants, config.runs, config.weight_seed_base, threads);
    let secs = start.elapsed().as_secs_f64();
    println!(
        "{cmp}({secs:.1} s, {} runs per architecture, plant seed {PLANT_SEED})",
        config.runs
    );
    for row in &cmp.rows {
        let diverged = match &row.result {
            Ok(b) => b.diverged_count(),
            Err(_) => config.runs,
        };
        println!(
            "  {}: {diverged} of {} runs diverged",
            row.architecture, config.runs
        );
    }

    if let Some(b) = cmp.row(Architecture::Resnet) {
        println!(
            "  resnet best-J run e_rms {:.4}, batch median e_rms {:.4}",
            b.best_metrics().e_rms,
            b.median(|m| m.e_rms)
        );
    }

    let resnet = cmp.row(Architecture::Resnet).map(|b| b.best_metrics());
    let fc = cmp
        .row(Architecture::FullyConnected)
        .map(|b| b.best_metrics());
    let c3 = match (resnet, fc) {
        (Some(r), Some(f)) => {
            let de = rel_below(r.e_rms, f.e_rms);
            let df = rel_below(r.f_rms, f.f_rms);
            let du = (r.u_rms - f.u_rms).abs() / f.u_rms;
            outcome(
                de >= 0.4 && df >= 0.4 && du <= 0.15,
                format!(
                    "e_rms {:.1}% below (>= 40%), f_rms {:.1}% below (>= 40%), u_rms differs {:.1}% (<= 15%)",
                    100.0 * de,
                    100.0 * df,
                    100.0 * du
                ),
            )
        }
        (None, _) => outcome(false, "every ResNet run diverged".into()),
        (Some(_), None) => outcome(
            false,
            "every fully-connected run diverged, so its e_rms, f_rms and u_rms are undefined"
                .into(),
        ),
    };

    let shallow10 = cmp
        .row(Architecture::Shallow10)
        .map(|b| b.best_metrics().e_rms);
    let shallow100 = cmp
        .row(Architecture::Shallow100)
        .map(|b| b.best_metrics().e_rms);
    // a fully-connected row whose runs all diverged has unbounded error
    let upper = fc.map_or(f64::INFINITY, |m| m.e_rms);
    let c4 = match (resnet, shallow10, shallow100) {
        (Some(r), Some(s10), Some(s100)) => {
            let ok = |s: f64| s > r.e_rms && s < upper && s >= 1.2 * r.e_rms;
            outcome(
                ok(s10) && ok(s100) && s100 < s10,
                format!(
                    "resnet {:.4}, shallow_10 {s10:.4} (+{:.0}%), shallow_100 {s100:.4} (+{:.0}%), fully_connected {}",
                    r.e_rms,
                    100.0 * (s10 / r.e_rms - 1.0),
                    100.0 * (s100 / r.e_rms - 1.0),
                    fc.map_or("diverged".to_string(), |m| format!("{:.4}", m.e_rms))
                ),
            )
        }
        _ => outcome(
            false,
            "a ResNet or shallow row diverged in every run".into(),
        ),
    };
    (c3, c4)
}

fn realizable_tracking() -> Outcome {
    let config = ExperimentConfig {
        plant_seed: PLANT_SEED,
        realizable: true,
        sigma_s: 2.0,
        ..Default::default()
    };
    let sim = config.sim_config().unwrap();
    let plant = config.plant().unwrap();
    let theta0 = init_weights(
        &sim.spec,
        &mut SimRng::seed_from_u64(WEIGHT_SEED),
        sim.init_low,
        sim.init_high,
    )
    .unwrap();
    let log = match run_episode_from(&sim, &plant, theta0) {
        Ok(log) => log,
        Err(e) => return outcome(false, format!("run failed: {e}")),
    };
    let norms = log.error_norms();
    let tail: Vec<f64> = log
        .t
        .iter()
        .zip(&norms)
        .filter(|(t, _)| **t >= sim.horizon - 1.0 - 1e-9)
        .map(|(_, e)| *e)
        .collect();
    let mean = tail.iter().sum::<f64>() / tail.len() as f64;
    let v = log.lyapunov.as_ref().expect("realizable log carries V_L");
    let max_rise = v
        .windows(2)
        .map(|w| w[1] - w[0])
        .fold(f64::NEG_INFINITY, f64::max);
    let tol = 10.0 * sim.dt;
    outcome(
        mean < 1e-2 && max_rise <= tol,
        format!(
            "mean |e| over last 1 s {mean:.2e} (< 1e-2), largest V_L step increase {max_rise:.2e} (<= {tol:.0e}), V_L {:.3} -> {:.3}",
            v[0],
            v[v.len() - 1]
        ),
    )
}

fn emod_bound() -> Outcome {
    let config = ExperimentConfig {
        plant_seed: PLANT_SEED,
        law: AdaptationLaw::Emod,
        sigma_theta: 1.0,
        sigma_e: 20.0,
        sigma_s: 0.0,
        ..Default::default()
    };
    let sim = config.sim_config().unwrap();
    let plant = config.plant().unwrap();
    let theta0 = init_weights(
        &sim.spec,
        &mut SimRng::seed_from_u64(WEIGHT_SEED),
        sim.init_low,
        sim.init_high,
    )
    .unwrap();
    let initial = theta0.norm();
    let log = match run_episode_from(&sim, &plant, theta0) {
        Ok(log) => log,
        Err(e) => return outcome(false, format!("run failed: {e}")),
    };
    let m = metrics(&log, CostWeights::default());
    let norm = |w: &[f64]| w.iter().map(|v| v * v).sum::<f64>().sqrt();
    let largest = log
        .snapshots
        .iter()
        .map(|(_, w)| norm(w))
        .chain([norm(&log.final_theta)])
        .fold(0.0, f64::max);
    let finite = [m.e_rms, m.f_rms, m.u_rms, m.cost]
        .iter()
        .all(|v| v.is_finite());
    outcome(
        m.ultimate_bound <= 0.3 && finite && largest <= 10.0 * initial,
        format!(
            "ultimate bound {:.4} (<= 0.3), e_rms {:.4}, f_rms {:.4}, u_rms {:.4}, largest weight norm {largest:.3} vs initial {initial:.3}",
            m.ultimate_bound, m.e_rms, m.f_rms, m.u_rms
        ),
    )
}

fn determinism() -> Outcome {
    let dir = std::env::temp_dir().join(format!("resnet-ac-acceptance-{}", std::process::id()));
    let run = |name: &str, threads: &str| -> Vec<u8> {
        let out = dir.join(name);
        let status = Command::new(BIN)
            .args([
                "montecarlo",
                "--runs",
                "8",
                "--horizon",
                "0.5",
                "--threads",
                threads,
                "--out",
            ])
            .arg(&out)
            .args([
                "--plant-seed",
                &PLANT_SEED.to_string(),
                "--seed",
                &WEIGHT_SEED.to_string(),
            ])
            .env_remove("RESNET_AC_THREADS")
            .output()
            .expect("binary runs");
        assert!(
            status.status.success(),
            "{}",
            String::from_utf8_lossy(&status.stderr)
        );
        fs::read(out.join("batch.csv")).unwrap()
    };
    let serial = [run("s1", "1"), run("s2", "1")];
    let parallel = [run("p1", "8"), run("p2", "8")];
    let _ = fs::remove_dir_all(&dir);
    let same = serial[0] == serial[1] && parallel[0] == parallel[1] && serial[0] == parallel[0];
    outcome(
        same,
        format!(
            "two serial and two 8-worker executions {} ({} bytes)",
            if same { "byte-identical" } else { "differ" },
            serial[0].len()
        ),
    )
}

fn vec_identity() -> Outcome {
    let mut rng = SimRng::seed_from_u64(99);
    let mut worst: f64 = 0.0;
    let mut ok = true;
    let dim = |rng: &mut SimRng| 1 + (rng.unit() * 4.0) as usize;
    for _ in 0..1000 {
        let (p, q, r, s) = (dim(&mut rng), dim(&mut rng), dim(&mut rng), dim(&mut rng));
        let a = DMatrix::from_column_slice(p, q, &rng.uniform_vec(p * q, -1.0, 1.0));
        let b = DMatrix::from_column_slice(q, r, &rng.uniform_vec(q * r, -1.0, 1.0));
        let c = DMatrix::from_column_slice(r, s, &rng.uniform_vec(r * s, -1.0, 1.0));
        let lhs = vec(&(&a * &b * &c));
        let rhs = &kron(&c.transpose(), &a) * nalgebra::DVector::from_vec(vec(&b));
        // forward error bound for a sum of at most 16 products of three factors
        let bound =
            &kron(&c.transpose().abs(), &a.abs()) * nalgebra::DVector::from_vec(vec(&b.abs()));
        for i in 0..lhs.len() {
            let err = (lhs[i] - rhs[i]).abs();
            worst = worst.max(err);
            ok &= err <= 32.0 * f64::EPSILON * bound[i];
        }
    }
    outcome(
        ok,
        format!("1000 triples, largest deviation {worst:.2e} (within 32 eps |C^T|x|A| vec|B|)"),
    )
}

fn main() -> ExitCode {
    let mut all = true;
    let mut report = |k: usize, name: &str, o: Outcome| {
        all &= o.pass;
        println!(
            "criterion {k} {}: {name}: {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
    };
    report(1, "jacobian oracle equivalence", jacobian_oracle());
    report(2, "shortcut gradients", vanishing_gradient());
    let (c3, c4) = table_comparison();
    report(3, "resnet vs fully-connected", c3);
    report(4, "shallow ordering", c4);
    report(5, "realizable asymptotic tracking", realizable_tracking());
    report(6, "e-modification ultimate bound", emod_bound());
    report(7, "batch determinism", determinism());
    report(8, "vec identity", vec_identity());
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
