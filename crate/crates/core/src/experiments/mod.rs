//! Desk-scale drivers for the two numerical examples and their outputs.
//!
//! `results.csv` columns, in order:
//! `experiment,M,S,K,J,rule,max_qoi_err,mean_qoi_err,cond,offline_solves,online_sec,storage_bytes,seed_train,seed_sample,seed_test,flag`.
//! Empty cells mean "not applicable" (for example `K` on full-DLS rows) or a
//! flagged fit. `results.json` holds the same rows with `null` for empty cells.

pub mod config;
pub mod container;

use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dls::{build_design, draw_samples, evaluate_dls, fit_dls, DlsSurrogate, SampleSet};
use crate::mesh_fem::{assemble_affine, build_mesh, FemSystem};
use crate::polyspace::{estimate_weights, index_set_for_cardinality, WeightEstimate};
use crate::random_field::{build_fourier_field, AffineField};
use crate::rb_dls::{evaluate_rb_dls, fit_rb_dls, RbDlsSurrogate};
use crate::reduced_basis::{greedy_build, ReducedBasis, ResidualData};
use crate::{Error, Result};

use config::{ExperimentConfig, WeightSource};
use container::{Provenance, StoredSurrogate, Surrogate};

pub const CSV_HEADER: &str = "experiment,M,S,K,J,rule,max_qoi_err,mean_qoi_err,cond,offline_solves,online_sec,storage_bytes,seed_train,seed_sample,seed_test,flag";

/// Spatial mean `m^T u` of a finite element function on the unit square.
pub fn qoi(system: &FemSystem, u: &DVector<f64>) -> f64 {
    system.mean_weights().dot(u)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub experiment: String,
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "S")]
    pub s: usize,
    #[serde(rename = "K")]
    pub k: Option<usize>,
    #[serde(rename = "J")]
    pub j: usize,
    pub rule: String,
    pub max_qoi_err: Option<f64>,
    pub mean_qoi_err: Option<f64>,
    pub cond: Option<f64>,
    pub offline_solves: usize,
    pub online_sec: Option<f64>,
    pub storage_bytes: Option<usize>,
    pub seed_train: Option<u64>,
    pub seed_sample: u64,
    pub seed_test: u64,
    pub flag: String,
}

impl ResultRow {
    pub fn is_flagged(&self) -> bool {
        !self.flag.is_empty()
    }
}

/// Rows that carry a valid fit; flagged rows never enter summaries.
pub fn unflagged(rows: &[ResultRow]) -> impl Iterator<Item = &ResultRow> {
    rows.iter().filter(|r| !r.is_flagged())
}

pub fn write_csv(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv(path: &Path) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Writes `results.csv` and `results.json` into `dir`.
pub fn write_results(dir: &Path, rows: &[ResultRow]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_csv(&dir.join("results.csv"), rows)?;
    std::fs::write(dir.join("results.json"), serde_json::to_string_pretty(rows)?)?;
    Ok(())
}

/// Runs `f` on a pool with `workers` threads (0 = all cores).
pub fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    pool.install(f)
}

/// Mesh, field, assembled system and anisotropy weights for one configuration.
pub struct Setup {
    pub config: ExperimentConfig,
    pub field: AffineField,
    pub system: FemSystem,
    pub weights: Vec<f64>,
    pub weight_estimate: Option<WeightEstimate>,
}

impl Setup {
    pub fn new(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let mesh = build_mesh(config.n_per_side)?;
        let field = build_fourier_field(&config.field, &mesh.quadrature_points())?;
        let system = assemble_affine(mesh, &field, &|_| 1.0)?;
        let (weights, weight_estimate) = match config.weights.source {
            WeightSource::Fixed => (config.weights.fixed.clone(), None),
            WeightSource::Regressed => {
                let est = estimate_weights(
                    &system,
                    &field,
                    config.weights.regression_degree,
                    config.weights.coercivity_fraction,
                )?;
                (est.weights.clone(), Some(est))
            }
        };
        Ok(Self {
            config: config.clone(),
            field,
            system,
            weights,
            weight_estimate,
        })
    }

    pub fn n_params(&self) -> usize {
        self.system.n_params()
    }

    /// FEM solves spent on the weight regression.
    pub fn regression_solves(&self) -> usize {
        self.weight_estimate.as_ref().map_or(0, |e| e.fem_solves)
    }

    pub fn provenance(&self, seed_train: Option<u64>, seed_sample: Option<u64>) -> Provenance {
        Provenance {
            field: self.config.field,
            n_per_side: self.config.n_per_side,
            seed_train,
            seed_sample,
        }
    }

    pub fn test_set(&self) -> Result<SampleSet> {
        draw_samples(self.config.s_test, self.n_params(), self.config.seeds.test)
    }

    /// FEM solutions at every row of `samples`, computed in parallel.
    pub fn snapshots(&self, samples: &SampleSet) -> Result<Vec<DVector<f64>>> {
        (0..samples.len())
            .into_par_iter()
            .map(|i| self.system.solve_fem(&samples.point(i)))
            .collect()
    }

    /// Reference QoI values `Q(u_h(y))` on the test set.
    pub fn test_qoi(&self, test: &SampleSet) -> Result<Vec<f64>> {
        (0..test.len())
            .into_par_iter()
            .map(|i| Ok(qoi(&self.system, &self.system.solve_fem(&test.point(i))?)))
            .collect()
    }

    pub fn build_reduced_basis(&self) -> Result<(ReducedBasis, ResidualData)> {
        let train = draw_samples(self.config.rb.s_train, self.n_params(), self.config.seeds.train)?;
        greedy_build(&self.system, &train, self.config.rb.eps_tol, self.config.rb.k_max)
    }
}

/// First `s` snapshots stacked as rows.
pub fn data_matrix(snapshots: &[DVector<f64>], s: usize) -> DMatrix<f64> {
    let j = snapshots.first().map_or(0, |u| u.len());
    DMatrix::from_fn(s, j, |i, c| snapshots[i][c])
}

struct OnlineStats {
    max_err: f64,
    mean_err: f64,
    seconds: f64,
}

/// Evaluates `eval` on every test point sequentially, timing the whole pass.
fn online_pass(
    system: &FemSystem,
    test: &SampleSet,
    reference: &[f64],
    eval: impl Fn(&[f64]) -> Result<DVector<f64>>,
) -> Result<OnlineStats> {
    let points: Vec<Vec<f64>> = (0..test.len()).map(|i| test.point(i)).collect();
    let t0 = Instant::now();
    let mut values = Vec::with_capacity(points.len());
    for y in &points {
        values.push(eval(y)?);
    }
    let seconds = t0.elapsed().as_secs_f64();
    let errs: Vec<f64> = values.iter().zip(reference).map(|(u, q)| (qoi(system, u) - q).abs()).collect();
    Ok(OnlineStats {
        max_err: errs.iter().copied().fold(0.0, f64::max),
        mean_err: errs.iter().sum::<f64>() / errs.len().max(1) as f64,
        seconds,
    })
}

fn fit_flag(e: &Error) -> Option<&'static str> {
    match e {
        Error::RankDeficient { .. } => Some("rank_deficient"),
        Error::TooFewSamples { .. } => Some("too_few_samples"),
        _ => None,
    }
}

/// Serialized size of a surrogate in the container format.
pub fn storage_bytes(provenance: &Provenance, surrogate: Surrogate) -> Result<usize> {
    Ok(StoredSurrogate {
        provenance: provenance.clone(),
        surrogate,
    }
    .to_bytes()?
    .len())
}

/// Full DLS for every `(M, rule)` pair, with QoI errors against direct FEM on the test set.
pub fn run_example1(config: &ExperimentConfig) -> Result<Vec<ResultRow>> {
    with_workers(config.workers, || {
        let setup = Setup::new(config)?;
        let n = setup.n_params();
        let j = setup.system.n_dofs();
        let seeds = config.seeds;
        let test = setup.test_set()?;
        let reference = setup.test_qoi(&test)?;

        let mut plans = Vec::new();
        for &target in &config.dls.m_sweep {
            let set = index_set_for_cardinality(&setup.weights, target)?;
            for &rule in &config.dls.rules {
                plans.push((set.clone(), rule));
            }
        }
        // sample sets are prefixes of one stream, so one batch of solves serves every pair
        let s_max = plans.iter().map(|(set, rule)| rule.samples(set.cardinality())).max().unwrap_or(0);
        let master = draw_samples(s_max, n, seeds.sample)?;
        let snapshots = setup.snapshots(&master)?;
        let provenance = setup.provenance(None, Some(seeds.sample));

        let mut rows = Vec::with_capacity(plans.len());
        for (set, rule) in plans {
            let m = set.cardinality();
            let s = rule.samples(m);
            let samples = draw_samples(s, n, seeds.sample)?;
            let mut row = ResultRow {
                experiment: "example1".into(),
                m,
                s,
                k: None,
                j,
                rule: rule.to_string(),
                max_qoi_err: None,
                mean_qoi_err: None,
                cond: None,
                offline_solves: s + setup.regression_solves(),
                online_sec: None,
                storage_bytes: None,
                seed_train: None,
                seed_sample: seeds.sample,
                seed_test: seeds.test,
                flag: String::new(),
            };
            let fit = build_design(&samples, &set).and_then(|d| fit_dls(&d, &data_matrix(&snapshots, s)));
            match fit {
                Ok(fit) => {
                    let stats = online_pass(&setup.system, &test, &reference, |y| evaluate_dls(&fit, y))?;
                    row.max_qoi_err = Some(stats.max_err);
                    row.mean_qoi_err = Some(stats.mean_err);
                    row.online_sec = Some(stats.seconds);
                    row.cond = Some(fit.condition_estimate);
                    row.storage_bytes = Some(storage_bytes(&provenance, Surrogate::FullDls(fit))?);
                }
                Err(e) => match fit_flag(&e) {
                    Some(flag) => row.flag = flag.into(),
                    None => return Err(e),
                },
            }
            rows.push(row);
        }
        Ok(rows)
    })
}

/// Outputs of [`run_example2`] beyond the result rows.
pub struct Example2Output {
    pub rows: Vec<ResultRow>,
    pub reduced_basis: Arc<ReducedBasis>,
    pub greedy_seconds: f64,
}

/// Full DLS versus RB-DLS over the `M` sweep with one shared reduced basis.
pub fn run_example2(config: &ExperimentConfig) -> Result<Example2Output> {
    with_workers(config.workers, || {
        let setup = Setup::new(config)?;
        let n = setup.n_params();
        let j = setup.system.n_dofs();
        let seeds = config.seeds;
        let rule = config.dls.example2_rule;
        let test = setup.test_set()?;
        let reference = setup.test_qoi(&test)?;

        let t0 = Instant::now();
        let (rb, _) = setup.build_reduced_basis()?;
        let greedy_seconds = t0.elapsed().as_secs_f64();
        let rb = Arc::new(rb);

        let sets = config
            .dls
            .m_sweep
            .iter()
            .map(|&m| index_set_for_cardinality(&setup.weights, m))
            .collect::<Result<Vec<_>>>()?;
        let s_max = sets.iter().map(|set| rule.samples(set.cardinality())).max().unwrap_or(0);
        let snapshots = setup.snapshots(&draw_samples(s_max, n, seeds.sample)?)?;
        let provenance = setup.provenance(Some(seeds.train), Some(seeds.sample));

        let mut rows = Vec::new();
        for set in sets {
            let m = set.cardinality();
            let s = rule.samples(m);
            let samples = draw_samples(s, n, seeds.sample)?;
            let base = ResultRow {
                experiment: String::new(),
                m,
                s,
                k: None,
                j,
                rule: rule.to_string(),
                max_qoi_err: None,
                mean_qoi_err: None,
                cond: None,
                offline_solves: 0,
                online_sec: None,
                storage_bytes: None,
                seed_train: Some(seeds.train),
                seed_sample: seeds.sample,
                seed_test: seeds.test,
                flag: String::new(),
            };

            let mut full_row = ResultRow {
                experiment: "example2_dls".into(),
                offline_solves: s + setup.regression_solves(),
                ..base.clone()
            };
            match build_design(&samples, &set).and_then(|d| fit_dls(&d, &data_matrix(&snapshots, s))) {
                Ok(fit) => {
                    let stats = online_pass(&setup.system, &test, &reference, |y| evaluate_dls(&fit, y))?;
                    fill(&mut full_row, &stats, &fit);
                    full_row.storage_bytes = Some(storage_bytes(&provenance, Surrogate::FullDls(fit))?);
                }
                Err(e) => full_row.flag = fit_flag(&e).ok_or(e)?.into(),
            }

            let mut rb_row = ResultRow {
                experiment: "example2_rbdls".into(),
                k: Some(rb.k()),
                offline_solves: rb.offline_fem_solves + setup.regression_solves(),
                ..base
            };
            match fit_rb_dls(rb.clone(), &samples, &set) {
                Ok(fit) => {
                    let stats = online_pass(&setup.system, &test, &reference, |y| evaluate_rb_dls(&fit, y))?;
                    fill(&mut rb_row, &stats, &fit.coeffs);
                    rb_row.storage_bytes = Some(rb_dls_storage_bytes(&provenance, &fit)?);
                }
                Err(e) => rb_row.flag = fit_flag(&e).ok_or(e)?.into(),
            }
            rows.push(full_row);
            rows.push(rb_row);
        }
        Ok(Example2Output {
            rows,
            reduced_basis: rb,
            greedy_seconds,
        })
    })
}

fn fill(row: &mut ResultRow, stats: &OnlineStats, fit: &DlsSurrogate) {
    row.max_qoi_err = Some(stats.max_err);
    row.mean_qoi_err = Some(stats.mean_err);
    row.online_sec = Some(stats.seconds);
    row.cond = Some(fit.condition_estimate);
}

/// Container size of an RB-DLS surrogate with its wall-clock fields zeroed,
/// so that the byte count depends only on the model.
pub fn rb_dls_storage_bytes(provenance: &Provenance, fit: &RbDlsSurrogate) -> Result<usize> {
    let mut fit = fit.clone();
    fit.metadata.assemble_seconds = 0.0;
    fit.metadata.fit_seconds = 0.0;
    storage_bytes(provenance, Surrogate::RbDls(fit))
}
