//! Command line driver for the desk-scale experiments.
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use rbdls::dls::{build_design, draw_samples, evaluate_dls, fit_dls};
use rbdls::experiments::config::{ExperimentConfig, SamplingRule, Seeds};
use rbdls::experiments::container::{load_surrogate, save_surrogate, StoredSurrogate, Surrogate};
use rbdls::experiments::{data_matrix, qoi, run_example1, run_example2, with_workers, write_results, Setup};
use rbdls::mesh_fem::{assemble_affine, build_mesh};
use rbdls::polyspace::index_set_for_cardinality;
use rbdls::random_field::build_fourier_field;
use rbdls::rb_dls::{evaluate_rb_dls, fit_rb_dls};
use rbdls::reduced_basis::{rb_reconstruct, rb_solve, ReducedBasis};

#[derive(Parser)]
#[command(name = "rbdls", version, about = "Reduced basis / least-squares surrogates for a parametric diffusion problem")]
struct Cli {
    /// TOML configuration file; flags override its fields
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base seed: train = SEED, sample = SEED + 1, test = SEED + 2
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Cells per side of the mesh
    #[arg(long, global = true)]
    mesh: Option<usize>,
    /// Output directory
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (0 = all cores)
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Sampling rule: M, 3M, M2 or an explicit sample count
    #[arg(long, global = true)]
    rule: Option<SamplingRule>,
    /// Greedy tolerance on the training-set estimator
    #[arg(long = "eps-tol", global = true)]
    eps_tol: Option<f64>,
    /// Maximum reduced basis size
    #[arg(long, global = true)]
    kmax: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate anisotropy weights by one-dimensional coefficient regression
    Weights,
    /// Run the weak greedy and store the reduced basis
    BuildRb,
    /// Fit a full least-squares surrogate on FEM snapshots
    FitDls {
        /// Target polynomial space size
        #[arg(long)]
        m: usize,
    },
    /// Fit the RB-DLS surrogate
    FitRbdls {
        #[arg(long)]
        m: usize,
        /// Reuse a stored reduced basis instead of running the greedy
        #[arg(long)]
        rb: Option<PathBuf>,
    },
    /// DLS error versus M for each sampling rule
    Example1,
    /// Full DLS versus RB-DLS costs and errors
    Example2,
    /// Evaluate a stored surrogate at one parameter point
    Eval {
        #[arg(long)]
        surrogate: PathBuf,
        /// Comma-separated parameter values in [-1, 1]
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        y: Vec<f64>,
    },
    /// Print the effective configuration as TOML
    PrintConfig,
}

fn effective_config(cli: &Cli) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path).with_context(|| format!("reading {}", path.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seeds = Seeds::from_base(seed);
    }
    if let Some(n) = cli.mesh {
        cfg.n_per_side = n;
    }
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    if let Some(rule) = cli.rule {
        cfg.dls.rules = vec![rule];
        cfg.dls.example2_rule = rule;
    }
    if let Some(eps) = cli.eps_tol {
        cfg.rb.eps_tol = eps;
    }
    if let Some(k) = cli.kmax {
        cfg.rb.k_max = k;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn echo_seeds(cfg: &ExperimentConfig) {
    let s = cfg.seeds;
    eprintln!("seeds: train={} sample={} test={}", s.train, s.sample, s.test);
}

fn out_path(cfg: &ExperimentConfig, name: &str) -> anyhow::Result<PathBuf> {
    std::fs::create_dir_all(&cfg.output_dir)?;
    Ok(cfg.output_dir.join(name))
}

fn single_rule(cfg: &ExperimentConfig) -> SamplingRule {
    cfg.dls.rules.first().copied().unwrap_or(SamplingRule::ThreeM)
}

fn load_rb(path: &Path) -> anyhow::Result<ReducedBasis> {
    match load_surrogate(path)?.surrogate {
        Surrogate::ReducedBasis(rb) => Ok(rb),
        Surrogate::RbDls(s) => Ok((*s.rb).clone()),
        Surrogate::FullDls(_) => bail!("{} holds a full DLS surrogate, not a reduced basis", path.display()),
    }
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    let cfg = effective_config(&cli)?;
    if let Command::PrintConfig = cli.command {
        print!("{}", cfg.to_toml()?);
        return Ok(());
    }
    echo_seeds(&cfg);
    with_workers(cfg.workers, || Ok(run(&cli.command, &cfg)))??;
    Ok(())
}

fn run(command: &Command, cfg: &ExperimentConfig) -> anyhow::Result<()> {
    match command {
        Command::PrintConfig => unreachable!("handled before the pool starts"),
        Command::Weights => {
            let setup = Setup::new(cfg)?;
            let report = serde_json::json!({
                "weights": setup.weights,
                "estimate": setup.weight_estimate,
                "seeds": cfg.seeds,
            });
            let path = out_path(cfg, "weights.json")?;
            std::fs::write(&path, serde_json::to_string_pretty(&report)?)?;
            println!("weights: {:?}", setup.weights);
            println!("wrote {}", path.display());
        }
        Command::BuildRb => {
            let setup = Setup::new(cfg)?;
            let (rb, _) = setup.build_reduced_basis()?;
            println!("K = {}, FEM solves = {}", rb.k(), rb.offline_fem_solves);
            println!("max estimator by K: {:?}", rb.estimator_history);
            let path = out_path(cfg, "reduced_basis.rbdl")?;
            let stored = StoredSurrogate {
                provenance: setup.provenance(Some(cfg.seeds.train), None),
                surrogate: Surrogate::ReducedBasis(rb),
            };
            save_surrogate(&path, &stored)?;
            println!("wrote {}", path.display());
        }
        Command::FitDls { m } => {
            let setup = Setup::new(cfg)?;
            let set = index_set_for_cardinality(&setup.weights, *m)?;
            let s = single_rule(cfg).samples(set.cardinality());
            let samples = draw_samples(s, setup.n_params(), cfg.seeds.sample)?;
            let data = setup.snapshots(&samples)?;
            let fit = fit_dls(&build_design(&samples, &set)?, &data_matrix(&data, s))?;
            println!("M = {}, S = {}, cond = {:.4e}", set.cardinality(), s, fit.condition_estimate);
            let path = out_path(cfg, &format!("dls_M{}.rbdl", set.cardinality()))?;
            let stored = StoredSurrogate {
                provenance: setup.provenance(None, Some(cfg.seeds.sample)),
                surrogate: Surrogate::FullDls(fit),
            };
            save_surrogate(&path, &stored)?;
            println!("wrote {}", path.display());
        }
        Command::FitRbdls { m, rb } => {
            let setup = Setup::new(cfg)?;
            let rb = match rb {
                Some(path) => load_rb(path)?,
                None => setup.build_reduced_basis()?.0,
            };
            let set = index_set_for_cardinality(&setup.weights, *m)?;
            let s = single_rule(cfg).samples(set.cardinality());
            let samples = draw_samples(s, setup.n_params(), cfg.seeds.sample)?;
            let fit = fit_rb_dls(Arc::new(rb), &samples, &set)?;
            println!(
                "M = {}, S = {}, K = {}, cond = {:.4e}",
                fit.metadata.m, fit.metadata.n_samples, fit.metadata.k, fit.coeffs.condition_estimate
            );
            let path = out_path(cfg, &format!("rbdls_M{}.rbdl", set.cardinality()))?;
            let stored = StoredSurrogate {
                provenance: setup.provenance(Some(cfg.seeds.train), Some(cfg.seeds.sample)),
                surrogate: Surrogate::RbDls(fit),
            };
            save_surrogate(&path, &stored)?;
            println!("wrote {}", path.display());
        }
        Command::Example1 => {
            let rows = run_example1(cfg)?;
            write_results(&cfg.output_dir, &rows)?;
            println!("wrote {} rows to {}", rows.len(), cfg.output_dir.join("results.csv").display());
        }
        Command::Example2 => {
            let out = run_example2(cfg)?;
            write_results(&cfg.output_dir, &out.rows)?;
            let stored = StoredSurrogate {
                provenance: rbdls::experiments::container::Provenance {
                    field: cfg.field,
                    n_per_side: cfg.n_per_side,
                    seed_train: Some(cfg.seeds.train),
                    seed_sample: None,
                },
                surrogate: Surrogate::ReducedBasis((*out.reduced_basis).clone()),
            };
            save_surrogate(&out_path(cfg, "reduced_basis.rbdl")?, &stored)?;
            println!(
                "K = {} after {:.2} s of greedy; wrote {} rows to {}",
                out.reduced_basis.k(),
                out.greedy_seconds,
                out.rows.len(),
                cfg.output_dir.join("results.csv").display()
            );
        }
        Command::Eval { surrogate, y } => {
            let stored = load_surrogate(surrogate)?;
            let p = &stored.provenance;
            let mesh = build_mesh(p.n_per_side)?;
            let field = build_fourier_field(&p.field, &mesh.quadrature_points())?;
            let system = assemble_affine(mesh, &field, &|_| 1.0)?;
            let u = match &stored.surrogate {
                Surrogate::FullDls(s) => evaluate_dls(s, y)?,
                Surrogate::RbDls(s) => evaluate_rb_dls(s, y)?,
                Surrogate::ReducedBasis(rb) => rb_reconstruct(rb, &rb_solve(rb, y)?)?,
            };
            if u.len() != system.n_dofs() {
                bail!("surrogate has {} values but the mesh has {} dofs", u.len(), system.n_dofs());
            }
            let report = serde_json::json!({
                "y": y,
                "qoi": qoi(&system, &u),
                "max_value": u.max(),
                "n_dofs": u.len(),
                "seed_train": p.seed_train,
                "seed_sample": p.seed_sample,
            });
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
    }
    Ok(())
}
