//! `resnet-ac`: simulate, run Monte Carlo batches, check gradients, plot.
//!
//! Exit codes: 0 ok, 1 runtime failure, 2 usage or configuration error,
//! 3 divergence.

mod manifest;
mod plot;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use resnet_ac_core::jacobian::{gradient_check, median_gradient_profiles, RELATIVE_ERROR_FLOOR};
use resnet_ac_core::monte_carlo::{compare_architectures, run_batch, Comparison, BATCH_CSV_HEADER};
use resnet_ac_core::output::{
    write_gradient_profile_csv, write_snapshot_csv, write_trajectory_csv,
};
use resnet_ac_core::resnet::init_weights;
use resnet_ac_core::sim::{metrics, run_episode};
use resnet_ac_core::{
    Activation, Architecture, CostWeights, Error, ExperimentConfig, KronOrder, ResNetSpec,
    SimConfig, SimRng,
};

use manifest::RunManifest;
use plot::{Figure, Series};

const THREADS_ENV: &str = "RESNET_AC_THREADS";

#[derive(Parser)]
#[command(
    name = "resnet-ac",
    version,
    about = "Deep residual network adaptive control simulations"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one closed-loop episode.
    Simulate(SimulateArgs),
    /// Run a batch of weight seeds and keep the lowest-cost run.
    Montecarlo(MonteCarloArgs),
    /// Four-architecture comparison (same as `montecarlo --compare`).
    Compare(MonteCarloArgs),
    /// Compare the analytic weight Jacobian with finite differences.
    Gradcheck(GradcheckArgs),
    /// Draw SVG figures from trajectory and weight CSVs.
    Plot(PlotArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON configuration file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set sigma_e=20`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Initial-weight seed (first seed of a batch).
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    plant_seed: Option<u64>,
    /// Horizon in seconds.
    #[arg(long)]
    horizon: Option<f64>,
    #[arg(long)]
    dt: Option<f64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

impl ConfigArgs {
    fn resolve(&self) -> anyhow::Result<ExperimentConfig> {
        let base = match &self.config {
            Some(path) => {
                if !path.is_file() {
                    return Err(Error::InvalidConfig(format!(
                        "config file {} not found",
                        path.display()
                    ))
                    .into());
                }
                ExperimentConfig::load(path)?
            }
            None => ExperimentConfig::default(),
        };
        let mut overrides = self.set.clone();
        if let Some(s) = self.seed {
            overrides.push(format!("weight_seed_base={s}"));
        }
        if let Some(s) = self.plant_seed {
            overrides.push(format!("plant_seed={s}"));
        }
        if let Some(h) = self.horizon {
            overrides.push(format!("horizon_s={h:?}"));
        }
        if let Some(dt) = self.dt {
            overrides.push(format!("dt={dt:?}"));
        }
        Ok(base.with_overrides(&overrides)?)
    }
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args)]
struct MonteCarloArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Number of weight seeds; overrides `runs` in the config.
    #[arg(long)]
    runs: Option<usize>,
    /// Worker threads. Capped by RESNET_AC_THREADS.
    #[arg(long)]
    threads: Option<usize>,
    /// Run all four architectures.
    #[arg(long)]
    compare: bool,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 3)]
    n: usize,
    #[arg(long, default_value_t = 3)]
    blocks: usize,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 4)]
    width: usize,
    #[arg(long, default_value_t = false)]
    no_shortcut: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Weights are drawn from U[-bound, bound).
    #[arg(long, default_value_t = 0.5)]
    bound: f64,
    /// Finite-difference step.
    #[arg(long, default_value_t = 1e-6)]
    h: f64,
    #[arg(long, default_value_t = 1e-5)]
    tol: f64,
    /// Refuse networks with more weights than this.
    #[arg(long, default_value_t = 2000)]
    max_weights: usize,
    /// Use the swapped Kronecker ordering; the check is expected to fail.
    #[arg(long)]
    corrupt_analytic: bool,
    /// Write the blockwise gradient-norm profile of the benchmark network
    /// (with and without shortcuts) instead of checking.
    #[arg(long)]
    profile: bool,
    /// Random draws for `--profile`.
    #[arg(long, default_value_t = 100)]
    draws: usize,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct PlotArgs {
    /// Trajectory CSV; repeat for one series per file.
    #[arg(long)]
    trajectory: Vec<PathBuf>,
    /// Series labels, in the order of `--trajectory`. Defaults to file stems.
    #[arg(long)]
    label: Vec<String>,
    /// Weight-snapshot CSV.
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Divergence { .. } | Error::AllDiverged { .. }) => 3,
        Some(Error::InvalidConfig(_) | Error::InvalidSpec(_) | Error::Dimension { .. }) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Montecarlo(a) => montecarlo(a, "montecarlo"),
        Command::Compare(a) => montecarlo(MonteCarloArgs { compare: true, ..a }, "compare"),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Plot(a) => plot(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn write_config_echo(
    out: &Path,
    config: &ExperimentConfig,
    m: &mut RunManifest,
) -> anyhow::Result<()> {
    let path = out.join("resolved_config.json");
    fs::write(&path, config.to_json() + "\n")?;
    m.add_output(&path);
    Ok(())
}

fn simulate(args: SimulateArgs) -> anyhow::Result<u8> {
    let start = Instant::now();
    let config = args.cfg.resolve()?;
    let sim = config.sim_config()?;
    let plant = config.plant()?;
    let out = &args.cfg.out;
    fs::create_dir_all(out)?;

    let log = run_episode(&sim, &plant, config.weight_seed_base)?;
    let m = metrics(&log, CostWeights::default());
    let mut manifest = RunManifest::new("simulate", &config, vec![config.weight_seed_base]);

    let traj = out.join("trajectory.csv");
    let mut w = create(&traj)?;
    write_trajectory_csv(&log, &mut w)?;
    w.flush()?;
    manifest.add_output(&traj);

    let indices: Vec<usize> = config
        .snapshot_indices
        .iter()
        .copied()
        .filter(|&i| i < log.final_theta.len())
        .collect();
    let snaps = out.join("weights.csv");
    let mut w = create(&snaps)?;
    write_snapshot_csv(&log, &indices, &mut w)?;
    w.flush()?;
    manifest.add_output(&snaps);

    write_config_echo(out, &config, &mut manifest)?;
    println!(
        "e_rms {:.6}  f_rms {:.6}  u_rms {:.6}  J {:.6}  ultimate_bound {:.6}",
        m.e_rms, m.f_rms, m.u_rms, m.cost, m.ultimate_bound
    );
    manifest.finish(out, start)?;
    Ok(0)
}

fn thread_count(requested: Option<usize>) -> anyhow::Result<usize> {
    let available = std::thread::available_parallelism().map_or(1, |n| n.get());
    let mut threads = requested.unwrap_or(available);
    if let Ok(cap) = std::env::var(THREADS_ENV) {
        let cap: usize = cap.trim().parse().map_err(|_| {
            Error::InvalidConfig(format!(
                "{THREADS_ENV} must be a positive integer, got `{cap}`"
            ))
        })?;
        if cap == 0 {
            bail!(Error::InvalidConfig(format!(
                "{THREADS_ENV} must be positive"
            )));
        }
        threads = threads.min(cap);
    }
    Ok(threads.max(1))
}

fn montecarlo(args: MonteCarloArgs, name: &str) -> anyhow::Result<u8> {
    let start = Instant::now();
    let mut config = args.cfg.resolve()?;
    if let Some(r) = args.runs {
        config.runs = r;
    }
    let sim = config.sim_config()?;
    let plants = config.plant_selection()?;
    let threads = thread_count(args.threads)?;
    let out = &args.cfg.out;
    fs::create_dir_all(out)?;
    let seeds: Vec<u64> = (0..config.runs as u64)
        .map(|i| config.weight_seed_base.wrapping_add(i))
        .collect();
    let mut manifest = RunManifest::new(name, &config, seeds);
    manifest.threads = Some(threads);

    let batch_path = out.join("batch.csv");
    let summary_path = out.join("summary.csv");
    let mut code = 0;
    if args.compare {
        let cmp =
            compare_architectures(&sim, &plants, config.runs, config.weight_seed_base, threads);
        let mut w = create(&batch_path)?;
        cmp.write_batch_csv(&mut w)?;
        w.flush()?;
        let mut w = create(&summary_path)?;
        cmp.write_summary_csv(&mut w)?;
        w.flush()?;
        print!("{cmp}");
        for row in &cmp.rows {
            if let Err(e) = &row.result {
                eprintln!("warning: {} row failed: {e}", row.architecture);
                if matches!(e, Error::Divergence { .. } | Error::AllDiverged { .. }) {
                    code = 3;
                }
            }
        }
        write_best_trajectories(&cmp, &sim, &config, out, &mut manifest)?;
    } else {
        let mut batch = run_batch(&sim, &plants, config.runs, config.weight_seed_base, threads)?;
        batch.architecture = Some(if sim.spec.shortcut() {
            Architecture::Resnet
        } else {
            Architecture::FullyConnected
        });
        let mut w = create(&batch_path)?;
        writeln!(w, "{BATCH_CSV_HEADER}")?;
        batch.write_csv_rows(&mut w)?;
        w.flush()?;
        let best = batch.best_record();
        let m = batch.best_metrics();
        let mut w = create(&summary_path)?;
        writeln!(w, "{}", Comparison::SUMMARY_CSV_HEADER)?;
        writeln!(
            w,
            "{},{},{:?},{:?},{:?},{:?},{},{}",
            batch.architecture.map_or("custom", Architecture::label),
            best.seed,
            m.cost,
            m.e_rms,
            m.f_rms,
            m.u_rms,
            batch.diverged_count(),
            batch.records.len()
        )?;
        w.flush()?;
        println!(
            "best seed {}  e_rms {:.6}  f_rms {:.6}  u_rms {:.6}  J {:.6}  ({} of {} runs diverged)",
            best.seed,
            m.e_rms,
            m.f_rms,
            m.u_rms,
            m.cost,
            batch.diverged_count(),
            batch.records.len()
        );
    }
    manifest.add_output(&batch_path);
    manifest.add_output(&summary_path);
    write_config_echo(out, &config, &mut manifest)?;
    manifest.finish(out, start)?;
    Ok(code)
}

/// Re-runs each row's best seed to save its trajectory for plotting.
fn write_best_trajectories(
    cmp: &Comparison,
    sim: &SimConfig,
    config: &ExperimentConfig,
    out: &Path,
    manifest: &mut RunManifest,
) -> anyhow::Result<()> {
    if config.per_run_plant {
        return Ok(());
    }
    let plant = config.plant()?;
    for row in &cmp.rows {
        let Ok(batch) = &row.result else { continue };
        let cfg = SimConfig {
            spec: row.architecture.spec(&sim.spec)?,
            ..sim.clone()
        };
        let log = run_episode(&cfg, &plant, batch.best_record().seed)?;
        let path = out.join(format!("trajectory_{}.csv", row.architecture));
        let mut w = create(&path)?;
        write_trajectory_csv(&log, &mut w)?;
        w.flush()?;
        manifest.add_output(&path);
    }
    Ok(())
}

fn gradcheck(args: GradcheckArgs) -> anyhow::Result<u8> {
    if args.profile {
        return gradient_profile(&args);
    }
    let spec = ResNetSpec::uniform(
        args.n,
        args.blocks,
        args.layers,
        args.width,
        Activation::Tanh,
        !args.no_shortcut,
    )?;
    let weights = spec.total_weight_count();
    if weights > args.max_weights {
        bail!(Error::InvalidConfig(format!(
            "network has {weights} weights; the finite-difference check is limited to {}. \
             Reduce --blocks, --layers or --width, or raise --max-weights",
            args.max_weights
        )));
    }
    let mut rng = SimRng::seed_from_u64(args.seed);
    let theta = init_weights(&spec, &mut rng, -args.bound, args.bound)?;
    let x = rng.uniform_vec(args.n, -1.0, 1.0);
    let order = if args.corrupt_analytic {
        KronOrder::VectorFirst
    } else {
        KronOrder::IdentityFirst
    };
    let rows = gradient_check(&spec, &theta, &x, args.h, order)?;
    println!("{:>5} {:>5} {:>14}", "block", "layer", "max_rel_error");
    let mut worst: f64 = 0.0;
    for r in &rows {
        println!(
            "{:>5} {:>5} {:>14.3e}",
            r.block, r.layer, r.max_relative_error
        );
        worst = worst.max(r.max_relative_error);
    }
    let pass = worst < args.tol;
    println!(
        "{} max relative error {worst:.3e} (tolerance {:.1e}, floor {RELATIVE_ERROR_FLOOR:.0e}, {weights} weights)",
        if pass { "PASS" } else { "FAIL" },
        args.tol
    );
    Ok(if pass { 0 } else { 1 })
}

fn gradient_profile(args: &GradcheckArgs) -> anyhow::Result<u8> {
    let start = Instant::now();
    let config = ExperimentConfig::default();
    let spec = config.spec()?;
    let g = median_gradient_profiles(
        &spec,
        args.draws,
        args.seed,
        config.init_low,
        config.init_high,
    )?;
    fs::create_dir_all(&args.out)?;
    let path = args.out.join("gradient_profile.csv");
    let mut w = create(&path)?;
    write_gradient_profile_csv(&g.resnet, &g.fully_connected, &mut w)?;
    w.flush()?;
    println!("{:>5} {:>14} {:>14}", "block", "resnet", "fully_conn");
    for (p, (a, b)) in g.resnet.iter().zip(&g.fully_connected).enumerate() {
        println!("{:>5} {a:>14.4e} {b:>14.4e}", p + 1);
    }
    let mut manifest = RunManifest::new("gradcheck --profile", &config, vec![args.seed]);
    manifest.add_output(&path);
    manifest.finish(&args.out, start)?;
    Ok(0)
}

struct TrajectoryColumns {
    t: Vec<f64>,
    e_norm: Vec<f64>,
    f_err_norm: Vec<f64>,
}

fn read_numeric_csv(path: &Path) -> anyhow::Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut rdr =
        csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let headers: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = rec
            .iter()
            .map(|v| v.trim().parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .with_context(|| format!("{}: line {}", path.display(), i + 2))?;
        rows.push(row);
    }
    Ok((headers, rows))
}

fn read_trajectory(path: &Path) -> anyhow::Result<TrajectoryColumns> {
    let (headers, rows) = read_numeric_csv(path)?;
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .with_context(|| format!("{}: missing column {name}", path.display()))
    };
    let (ti, ei, fi) = (col("t")?, col("e_norm")?, col("f_err_norm")?);
    Ok(TrajectoryColumns {
        t: rows.iter().map(|r| r[ti]).collect(),
        e_norm: rows.iter().map(|r| r[ei]).collect(),
        f_err_norm: rows.iter().map(|r| r[fi]).collect(),
    })
}

fn plot(args: PlotArgs) -> anyhow::Result<u8> {
    fs::create_dir_all(&args.out)?;
    let mut written = Vec::new();
    let mut e_series = Vec::new();
    let mut f_series = Vec::new();
    for (i, path) in args.trajectory.iter().enumerate() {
        let label = args.label.get(i).cloned().unwrap_or_else(|| {
            path.file_stem().map_or("series".into(), |s| {
                s.to_string_lossy()
                    .trim_start_matches("trajectory_")
                    .to_string()
            })
        });
        let cols = read_trajectory(path)?;
        e_series.push(Series {
            label: label.clone(),
            points: cols.t.iter().copied().zip(cols.e_norm).collect(),
        });
        f_series.push(Series {
            label,
            points: cols.t.iter().copied().zip(cols.f_err_norm).collect(),
        });
    }
    let mut figures = vec![
        (
            "tracking_error.svg",
            Figure {
                title: "Tracking error norm".into(),
                x_label: "t [s]".into(),
                y_label: "‖e‖".into(),
                series: e_series,
            },
        ),
        (
            "approximation_error.svg",
            Figure {
                title: "Function approximation error norm".into(),
                x_label: "t [s]".into(),
                y_label: "‖f − Φ̂‖".into(),
                series: f_series,
            },
        ),
    ];
    if let Some(path) = &args.weights {
        let (headers, rows) = read_numeric_csv(path)?;
        let series = (1..headers.len())
            .map(|c| Series {
                label: headers[c].clone(),
                points: rows.iter().map(|r| (r[0], r[c])).collect(),
            })
            .collect();
        figures.push((
            "weights.svg",
            Figure {
                title: "Selected weight estimates".into(),
                x_label: "t [s]".into(),
                y_label: "θ̂_i".into(),
                series,
            },
        ));
    }
    for (name, fig) in figures {
        if fig.series.is_empty() {
            continue;
        }
        match fig.to_svg() {
            Some(svg) => {
                let path = args.out.join(name);
                fs::write(&path, svg)?;
                written.push(path);
            }
            None => eprintln!("warning: {name}: no data to plot"),
        }
    }
    if written.is_empty() {
        eprintln!("warning: nothing to plot");
    }
    for p in written {
        println!("{}", p.display());
    }
    Ok(0)
}
