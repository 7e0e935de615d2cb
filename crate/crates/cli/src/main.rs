//! `unprune`: command-line driver for the un-pruning lab.
//!
//! Exit codes: 0 on success, 2 when a grid run finished with failed cells,
//! 1 on configuration or I/O errors.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use unprune_core::experiment::{
    emit_csv, emit_json, mask_scores, read_json, run_experiment, write_file, ExperimentConfig, RunOptions,
};
use unprune_core::metrics::kl_masked_weights;
use unprune_core::mia::{ratio_grid, ratio_sweep, sweep_csv, Attacker, MiaConfig, RowSet};
use unprune_core::model::init_model;
use unprune_core::oracle::{prune, retrain_reprune, OracleCache, PruneMode};
use unprune_core::plot::{emit_scatter, mia_sweep_svg};
use unprune_core::prune::sparsity_of;
use unprune_core::rng::{streams, SeededRng};
use unprune_core::snapshot::{read_snapshot, write_snapshot};
use unprune_core::train::{accuracy, evaluate, train_sgd};
use unprune_core::unlearn::UnlearnMethod;
use unprune_core::{Error, Model};

#[derive(Parser)]
#[command(name = "unprune", version, about = "Remove deleted-data influence from pruned networks")]
struct Cli {
    /// Output directory; overrides the config's `output_dir`.
    #[arg(long, global = true, env = "UNPRUNE_OUT_DIR")]
    out: Option<PathBuf>,
    /// Comma-separated seed list overriding the config's `seeds`.
    #[arg(long, global = true, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Worker threads for grid runs (0 = one per core).
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Unstructured,
    Structured,
}

impl From<ModeArg> for PruneMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Unstructured => PruneMode::Unstructured,
            ModeArg::Structured => PruneMode::Structured,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum AttackerArg {
    Threshold,
    Logistic,
}

#[derive(Subcommand)]
enum Command {
    /// Train a dense model on the full training set of one seed.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Prune a snapshot to a target sparsity.
    Prune {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        sparsity: f64,
        #[arg(long, value_enum, default_value = "unstructured")]
        mode: ModeArg,
        /// Output snapshot; defaults to `<out>/models/<stem>_s<sparsity>.snap`.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Build (or load from cache) the retrain + reprune oracle for one seed.
    Oracle {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        sparsity: Option<f64>,
    },
    /// Un-prune a pruned snapshot with one unlearning method.
    Unprune {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// One of the config's `[[unlearn]]` methods.
        #[arg(long)]
        method: String,
    },
    /// Report TA, UA and sparsity of a snapshot, and its overlap with a reference.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// Membership-inference score as a function of the member/non-member ratio.
    MiaSweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 0.8)]
        lo: f64,
        #[arg(long, default_value_t = 1.2)]
        hi: f64,
        #[arg(long, default_value_t = 0.05)]
        step: f64,
        #[arg(long, value_enum, default_value = "threshold")]
        attacker: AttackerArg,
    },
    /// Run the full grid and write results.csv, results.json and scatter plots.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Scatter plot of two metrics from a results.json.
    Plot {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "iom")]
        x: String,
        #[arg(long, default_value = "ua")]
        y: String,
        /// Output SVG; defaults to `<out>/scatter_<x>_<y>.svg`.
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

struct Ctx<'a> {
    cli: &'a Cli,
}

impl Ctx<'_> {
    fn config(&self, path: &Path) -> Result<ExperimentConfig, Error> {
        let mut cfg = ExperimentConfig::from_toml_file(path)?;
        if let Some(seeds) = &self.cli.seeds {
            cfg.seeds = seeds.clone();
            cfg.validate()?;
        }
        Ok(cfg)
    }

    fn out_dir(&self, cfg: Option<&ExperimentConfig>) -> PathBuf {
        self.cli
            .out
            .clone()
            .or_else(|| cfg.map(|c| c.output_dir.clone()))
            .unwrap_or_else(|| PathBuf::from("out"))
    }

    /// Single-seed commands use the first configured seed.
    fn seed(&self, cfg: &ExperimentConfig) -> u64 {
        cfg.seeds[0]
    }
}

fn save(model: &Model, path: &Path) -> Result<(), Error> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    write_snapshot(model, path)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<ExitCode, Error> {
    let ctx = Ctx { cli };
    match &cli.command {
        Command::Train { config } => {
            let cfg = ctx.config(config)?;
            let seed = ctx.seed(&cfg);
            let data = cfg.seed_data(seed)?;
            let root = SeededRng::new(seed);
            let mut model = init_model(&cfg.specs(), &mut root.fork(streams::INIT))?;
            let log = train_sgd(&mut model, &data.train, &data.train.all_indices(), &cfg.train, &mut root.fork(streams::TRAIN))?;
            let out = ctx.out_dir(Some(&cfg));
            save(&model, &out.join(format!("models/dense_seed{seed}.snap")))?;
            write_file(&out.join(format!("logs/train_seed{seed}.csv")), log.to_csv().as_bytes())?;
            println!("test accuracy {:.4}", accuracy(&model, &data.test)?);
        }
        Command::Prune { model, sparsity, mode, output } => {
            let mut m: Model = read_snapshot(model)?;
            prune(&mut m, *sparsity, (*mode).into())?;
            let stem = model.file_stem().and_then(|s| s.to_str()).unwrap_or("model");
            let path = output
                .clone()
                .unwrap_or_else(|| ctx.out_dir(None).join(format!("models/{stem}_s{sparsity:.2}.snap")));
            save(&m, &path)?;
            println!("sparsity {:.6}", sparsity_of(&m).sparsity);
        }
        Command::Oracle { config, sparsity } => {
            let cfg = ctx.config(config)?;
            let seed = ctx.seed(&cfg);
            let s = sparsity.unwrap_or(cfg.sparsities[0]);
            let data = cfg.seed_data(seed)?;
            let out = ctx.out_dir(Some(&cfg));
            let ocfg = cfg.oracle_config(s);
            let built = if cfg.oracle.cache {
                OracleCache::new(out.join("oracles")).get_or_build(&data.train, &data.split, &ocfg, seed)?
            } else {
                retrain_reprune(&data.train, &data.split, &ocfg, seed)?
            };
            save(&built.model, &out.join(format!("models/oracle_seed{seed}_s{s:.2}.snap")))?;
            println!("wall_time_s {:.3} cached {}", built.wall_time_s, built.cached);
        }
        Command::Unprune { config, model, method } => {
            let cfg = ctx.config(config)?;
            let seed = ctx.seed(&cfg);
            let method: UnlearnMethod = method.parse()?;
            let unlearn = cfg
                .unlearn_for(method)
                .ok_or_else(|| Error::Config(format!("method '{method}' is not configured in [[unlearn]]")))?
                .clone();
            let original: Model = read_snapshot(model)?;
            let s = match cfg.prune_mode {
                PruneMode::Unstructured => sparsity_of(&original).sparsity,
                PruneMode::Structured => {
                    let alive = unprune_core::prune::neuron_mask(&original);
                    alive.iter().filter(|&&a| !a).count() as f64 / alive.len() as f64
                }
            };
            let data = cfg.seed_data(seed)?;
            let (u, trace) = cfg.unprune(&original, &data, s, &unlearn, seed)?;
            let out = ctx.out_dir(Some(&cfg));
            save(&u, &out.join(format!("models/unpruned_seed{seed}_{method}.snap")))?;
            let trace_path = out.join(format!("traces/seed{seed}_{method}.csv"));
            write_file(&trace_path, trace.to_csv().as_bytes())?;
            println!("wrote {}", trace_path.display());
        }
        Command::Evaluate { config, model, reference } => {
            let cfg = ctx.config(config)?;
            let seed = ctx.seed(&cfg);
            let data = cfg.seed_data(seed)?;
            let m: Model = read_snapshot(model)?;
            println!("sparsity {:.6}", sparsity_of(&m).sparsity);
            println!("ta {:.6}", accuracy(&m, &data.test)?);
            println!("ua {:.6}", evaluate(&m, &data.train, &data.split.forget_indices)?.1);
            if let Some(r) = reference {
                let r: Model = read_snapshot(r)?;
                let s = mask_scores(&m, &r, cfg.prune_mode)?;
                println!("iom {:.6}", s.iom);
                println!("uom {:.6}", s.uom);
                println!("iou {}", s.iou.map(|v| format!("{v:.6}")).unwrap_or_else(|| "empty".into()));
                println!("kl {:.6}", kl_masked_weights(&m, &r, cfg.kl_estimator)?.total);
            }
        }
        Command::MiaSweep { config, model, lo, hi, step, attacker } => {
            let cfg = ctx.config(config)?;
            let seed = ctx.seed(&cfg);
            let data = cfg.seed_data(seed)?;
            let m: Model = read_snapshot(model)?;
            let attacker = match attacker {
                AttackerArg::Threshold => Attacker::Threshold,
                AttackerArg::Logistic => Attacker::Logistic,
            };
            let test_rows = data.test.all_indices();
            let reports = ratio_sweep(
                &m,
                RowSet::new(&data.train, &data.split.forget_indices),
                RowSet::new(&data.test, &test_rows),
                &ratio_grid(*lo, *hi, *step)?,
                &MiaConfig { attacker },
                &SeededRng::new(seed).fork(streams::MIA),
            )?;
            let out = ctx.out_dir(Some(&cfg));
            write_file(&out.join("mia_sweep.csv"), sweep_csv(&reports).as_bytes())?;
            write_file(&out.join("mia_sweep.svg"), mia_sweep_svg(&reports).as_bytes())?;
            print!("{}", sweep_csv(&reports));
        }
        Command::Run { config } => {
            let cfg = ctx.config(config)?;
            let out = ctx.out_dir(Some(&cfg));
            let report = run_experiment(&cfg, &RunOptions { output_dir: out.clone(), jobs: cli.jobs })?;
            emit_csv(&report, &out.join("results.csv"))?;
            emit_json(&report, &out.join("results.json"))?;
            emit_scatter(&report, "iom", "ua", &out.join("scatter_iom_ua.svg"))?;
            emit_scatter(&report, "iou", "ua", &out.join("scatter_iou_ua.svg"))?;
            println!("wrote {} rows to {}", report.rows.len(), out.join("results.csv").display());
            if report.has_errors() {
                for r in report.rows.iter().filter(|r| r.error.is_some()) {
                    eprintln!("cell failed: seed {} {} s={}: {}", r.seed, r.method, r.sparsity, r.error.as_deref().unwrap_or(""));
                }
                return Ok(ExitCode::from(2));
            }
        }
        Command::Plot { input, x, y, output } => {
            let report = read_json(input)?;
            let path = output.clone().unwrap_or_else(|| ctx.out_dir(None).join(format!("scatter_{x}_{y}.svg")));
            emit_scatter(&report, x, y, &path)?;
            println!("wrote {}", path.display());
        }
    }
    Ok(ExitCode::SUCCESS)
}
