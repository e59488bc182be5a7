//! Monte Carlo batches over weight seeds and the four-way architecture
//! comparison.
//!
//! Every run of a batch shares the plant; run `i` draws its initial weights
//! from seed `base_seed + i`. The best run is the one with the smallest cost
//! among runs that did not diverge. Runs are independent, so a batch may be
//! spread over any number of worker threads without changing the result.

use std::fmt;
use std::io::{self, Write};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::plant::{sample_plant, PlantInstance};
use crate::resnet::{ResNetSpec, WeightVector};
use crate::rng::SimRng;
use crate::sim::{metrics, run_episode, CostWeights, Metrics, SimConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Resnet,
    FullyConnected,
    Shallow10,
    Shallow100,
}

impl Architecture {
    pub const ALL: [Architecture; 4] = [
        Architecture::Resnet,
        Architecture::FullyConnected,
        Architecture::Shallow10,
        Architecture::Shallow100,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Architecture::Resnet => "resnet",
            Architecture::FullyConnected => "fully_connected",
            Architecture::Shallow10 => "shallow_10",
            Architecture::Shallow100 => "shallow_100",
        }
    }

    /// Network for this row, derived from the residual base architecture.
    pub fn spec(self, base: &ResNetSpec) -> Result<ResNetSpec> {
        let act = base.block(0).activation(1);
        match self {
            Architecture::Resnet => Ok(base.with_shortcut(true)),
            Architecture::FullyConnected => Ok(base.with_shortcut(false)),
            Architecture::Shallow10 => ResNetSpec::shallow(base.n(), 10, act),
            Architecture::Shallow100 => ResNetSpec::shallow(base.n(), 100, act),
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Which plant each run of a batch uses.
#[derive(Debug, Clone, PartialEq)]
pub enum PlantSelection {
    /// One instance for every run.
    Fixed(PlantInstance),
    /// Run `i` samples its own plant from seed `plant_seed + i`.
    PerRun { plant_seed: u64, n: usize },
}

impl PlantSelection {
    fn for_run(&self, i: u64) -> PlantInstance {
        match self {
            PlantSelection::Fixed(p) => p.clone(),
            PlantSelection::PerRun { plant_seed, n } => {
                sample_plant(&mut SimRng::seed_from_u64(plant_seed.wrapping_add(i)), *n)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    /// `None` when the run diverged.
    pub metrics: Option<Metrics>,
    pub diverged: bool,
}

impl RunRecord {
    pub fn cost(&self) -> Option<f64> {
        self.metrics.map(|m| m.cost)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchResult {
    pub architecture: Option<Architecture>,
    pub records: Vec<RunRecord>,
    /// Index into `records` of the smallest-cost run.
    pub best: usize,
}

impl BatchResult {
    pub fn best_record(&self) -> &RunRecord {
        &self.records[self.best]
    }

    pub fn best_metrics(&self) -> Metrics {
        self.best_record().metrics.expect("best run has metrics")
    }

    pub fn diverged_count(&self) -> usize {
        self.records.iter().filter(|r| r.diverged).count()
    }

    /// Median of a metric over the non-diverged runs.
    pub fn median(&self, pick: impl Fn(&Metrics) -> f64) -> f64 {
        let mut v: Vec<f64> = self
            .records
            .iter()
            .filter_map(|r| r.metrics.as_ref().map(&pick))
            .collect();
        v.sort_by(f64::total_cmp);
        match v.len() {
            0 => f64::NAN,
            len if len % 2 == 1 => v[len / 2],
            len => 0.5 * (v[len / 2 - 1] + v[len / 2]),
        }
    }

    /// Rows `architecture,seed,J,e_rms,f_rms,u_rms,diverged`, no header.
    pub fn write_csv_rows<W: Write>(&self, mut w: W) -> io::Result<()> {
        let label = self.architecture.map_or("custom", Architecture::label);
        for r in &self.records {
            match &r.metrics {
                Some(m) => writeln!(
                    w,
                    "{label},{},{:?},{:?},{:?},{:?},{}",
                    r.seed, m.cost, m.e_rms, m.f_rms, m.u_rms, r.diverged
                )?,
                None => writeln!(w, "{label},{},NaN,NaN,NaN,NaN,{}", r.seed, r.diverged)?,
            }
        }
        Ok(())
    }
}

pub const BATCH_CSV_HEADER: &str = "architecture,seed,J,e_rms,f_rms,u_rms,diverged";

fn run_one(
    cfg: &SimConfig,
    plants: &PlantSelection,
    base_seed: u64,
    i: u64,
    weights: CostWeights,
) -> Result<RunRecord> {
    let seed = base_seed.wrapping_add(i);
    let plant = plants.for_run(i);
    match run_episode(cfg, &plant, seed) {
        Ok(log) => Ok(RunRecord {
            seed,
            metrics: Some(metrics(&log, weights)),
            diverged: false,
        }),
        Err(Error::Divergence { .. }) => Ok(RunRecord {
            seed,
            metrics: None,
            diverged: true,
        }),
        Err(e) => Err(e),
    }
}

/// Runs seeds `base_seed .. base_seed + num_runs` and picks the
/// smallest-cost run. `threads == 0` uses rayon's default pool size.
pub fn run_batch(
    cfg: &SimConfig,
    plants: &PlantSelection,
    num_runs: usize,
    base_seed: u64,
    threads: usize,
) -> Result<BatchResult> {
    if num_runs == 0 {
        return Err(Error::InvalidConfig(
            "a batch needs at least one run".into(),
        ));
    }
    cfg.validate()?;
    let weights = CostWeights::default();
    let records: Vec<RunRecord> = if threads == 1 {
        (0..num_runs as u64)
            .map(|i| run_one(cfg, plants, base_seed, i, weights))
            .collect::<Result<_>>()?
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
        pool.install(|| {
            (0..num_runs as u64)
                .into_par_iter()
                .map(|i| run_one(cfg, plants, base_seed, i, weights))
                .collect::<Result<_>>()
        })?
    };
    let best = records
        .iter()
        .enumerate()
        .filter_map(|(i, r)| r.cost().map(|c| (i, c)))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(i, _)| i)
        .ok_or(Error::AllDiverged { runs: num_runs })?;
    Ok(BatchResult {
        architecture: None,
        records,
        best,
    })
}

#[derive(Debug)]
pub struct ComparisonRow {
    pub architecture: Architecture,
    pub result: Result<BatchResult>,
}

#[derive(Debug)]
pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
}

impl Comparison {
    pub fn row(&self, arch: Architecture) -> Option<&BatchResult> {
        self.rows
            .iter()
            .find(|r| r.architecture == arch)
            .and_then(|r| r.result.as_ref().ok())
    }

    pub const SUMMARY_CSV_HEADER: &'static str =
        "architecture,best_seed,J,e_rms,f_rms,u_rms,diverged_runs,runs";

    pub fn write_summary_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "{}", Self::SUMMARY_CSV_HEADER)?;
        for row in &self.rows {
            match &row.result {
                Ok(b) => {
                    let m = b.best_metrics();
                    writeln!(
                        w,
                        "{},{},{:?},{:?},{:?},{:?},{},{}",
                        row.architecture,
                        b.best_record().seed,
                        m.cost,
                        m.e_rms,
                        m.f_rms,
                        m.u_rms,
                        b.diverged_count(),
                        b.records.len()
                    )?;
                }
                Err(_) => writeln!(w, "{},,NaN,NaN,NaN,NaN,,", row.architecture)?,
            }
        }
        Ok(())
    }

    pub fn write_batch_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "{BATCH_CSV_HEADER}")?;
        for row in &self.rows {
            if let Ok(b) = &row.result {
                b.write_csv_rows(&mut w)?;
            }
        }
        Ok(())
    }
}

impl fmt::Display for Comparison {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<16} {:>10} {:>10} {:>10} {:>12} {:>9}",
            "architecture", "|e_rms|", "|f_rms|", "|u_rms|", "J", "best_seed"
        )?;
        for row in &self.rows {
            match &row.result {
                Ok(b) => {
                    let m = b.best_metrics();
                    writeln!(
                        f,
                        "{:<16} {:>10.4} {:>10.4} {:>10.4} {:>12.4} {:>9}",
                        row.architecture.label(),
                        m.e_rms,
                        m.f_rms,
                        m.u_rms,
                        m.cost,
                        b.best_record().seed
                    )?;
                }
                Err(e) => writeln!(f, "{:<16} failed: {e}", row.architecture.label())?,
            }
        }
        Ok(())
    }
}

/// Best-of-batch comparison of the four architectures on the same plants
/// and the same weight-seed sequence. A failing row does not stop the
/// others.
pub fn compare_architectures(
    base: &SimConfig,
    plants: &PlantSelection,
    num_runs: usize,
    base_seed: u64,
    threads: usize,
) -> Comparison {
    let rows = Architecture::ALL
        .iter()
        .map(|&arch| {
            let result = arch.spec(&base.spec).and_then(|spec| {
                let cfg = SimConfig {
                    spec,
                    ..base.clone()
                };
                run_batch(&cfg, plants, num_runs, base_seed, threads).map(|mut b| {
                    b.architecture = Some(arch);
                    b
                })
            });
            ComparisonRow {
                architecture: arch,
                result,
            }
        })
        .collect();
    Comparison { rows }
}

/// `V_1^T act(V_0^T x)` with `tanh`.
pub fn shallow_forward(v0: &DMatrix<f64>, v1: &DMatrix<f64>, x: &[f64]) -> Result<Vec<f64>> {
    if v0.nrows() != x.len() || v1.nrows() != v0.ncols() {
        return Err(Error::Dimension {
            context: "shallow network",
            expected: v0.nrows(),
            actual: x.len(),
        });
    }
    let hidden = v0.tr_mul(&DVector::from_column_slice(x)).map(f64::tanh);
    Ok(v1.tr_mul(&hidden).as_slice().to_vec())
}

/// Packs `(V_0, V_1)` into the weight vector of a shallow spec.
pub fn shallow_weights(
    spec: &ResNetSpec,
    v0: &DMatrix<f64>,
    v1: &DMatrix<f64>,
) -> Result<WeightVector> {
    let mut theta = WeightVector::zeros(spec);
    theta.set_matrix(0, 0, v0)?;
    theta.set_matrix(0, 1, v1)?;
    Ok(theta)
}
