use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use sdplab::config::{ExperimentConfig, Regime};
use sdplab::consistency::{build_graph, format_model_sets, model_sets_with_tutor};
use sdplab::error::{ConfigError, PipelineError};
use sdplab::model::checkpoint::Checkpoint;
use sdplab::model::gradcheck::run_gradcheck;
use sdplab::pipeline::{self, OutputLock};

/// Overrides the default output directory when `--out` is not given.
const OUT_ENV: &str = "SDPLAB_OUT";
const DEFAULT_OUT: &str = "sdplab-out";
const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "sdplab", version, about = "Student data paradox desk-scale lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (TOML). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.epochs=3`. Repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Args)]
struct ReplicateArg {
    /// Replicate index; the run seed is `global.seed + replicate`.
    #[arg(long, default_value_t = 0)]
    replicate: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Write the pretraining, student and held-out corpora plus the probe set.
    GenCorpus {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        rep: ReplicateArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one regime and write its checkpoint and loss curve.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        rep: ReplicateArg,
        /// baseline (pretraining), tutor, student or student-hal.
        #[arg(long)]
        mode: String,
        /// Starting checkpoint; required for fine-tuning modes.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Checkpoint path; the loss curve goes next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate baseline/tutor/student/student-hal checkpoints from one directory.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        rep: ReplicateArg,
        #[arg(long)]
        checkpoints: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// List the maximal consistent rule sets.
    Models {
        #[command(flatten)]
        common: Common,
    },
    /// Run every replicate end to end and write the summary report.
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare analytic gradients with finite differences on random small models.
    Gradcheck {
        #[arg(long, default_value_t = 3)]
        cases: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn load(common: &Common) -> Result<ExperimentConfig, ConfigError> {
    match &common.config {
        Some(p) => ExperimentConfig::load(p, &common.sets),
        None => ExperimentConfig::from_toml_with_overrides("", &common.sets),
    }
}

fn out_dir(out: Option<PathBuf>) -> PathBuf {
    out.or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from)).unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
}

fn progress(msg: &str) {
    eprintln!("{msg}");
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenCorpus { common, rep, out } => {
            let cfg = load(&common)?;
            let dir = out_dir(out);
            let _lock = OutputLock::acquire(&dir)?;
            let data = pipeline::prepare(&cfg, cfg.replicate_seed(rep.replicate))?;
            pipeline::write_corpora(&dir, &cfg, &data)?;
            println!(
                "wrote {} pretraining, {} student, {} held-out dialogues and {} probes to {}",
                data.clean.len(),
                data.student.len(),
                data.heldout.len(),
                data.probes.len(),
                dir.display()
            );
        }
        Command::Train { common, rep, mode, init, out } => {
            let cfg = load(&common)?;
            let regime = pipeline::regime_from_name(&mode)
                .ok_or_else(|| ConfigError::invalid("--mode", format!("unknown mode {mode:?}")))?;
            let parent = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
            let _lock = OutputLock::acquire(parent)?;
            let data = pipeline::prepare(&cfg, cfg.replicate_seed(rep.replicate))?;
            let trained = match (regime, init) {
                (Regime::Pretrain, None) => pipeline::train_pretrain(&cfg, &data)?,
                (Regime::Pretrain, Some(_)) => {
                    return Err(ConfigError::invalid("--init", "baseline trains from scratch").into())
                }
                (Regime::Fine(m), Some(path)) => {
                    let ck = Checkpoint::load(&path).with_context(|| format!("loading {}", path.display()))?;
                    pipeline::train_fine(&cfg, &data, m, &ck)?
                }
                (Regime::Fine(_), None) => {
                    return Err(ConfigError::invalid("--init", "fine-tuning needs a starting checkpoint").into())
                }
            };
            std::fs::write(&out, trained.checkpoint.to_bytes()).with_context(|| format!("writing {}", out.display()))?;
            let curve = out.with_extension("loss.csv");
            std::fs::write(&curve, &trained.loss_csv).with_context(|| format!("writing {}", curve.display()))?;
            println!(
                "{}: {} steps, final loss {:.6}, wrote {}",
                trained.checkpoint.meta.regime,
                trained.checkpoint.meta.steps,
                trained.checkpoint.meta.final_loss,
                out.display()
            );
        }
        Command::Eval { common, rep, checkpoints, out } => {
            let cfg = load(&common)?;
            let seed = cfg.replicate_seed(rep.replicate);
            let cks = Regime::ALL
                .map(|r| checkpoints.join(format!("{}.sdpx", pipeline::regime_name(r))))
                .into_iter()
                .map(|p| Checkpoint::load(&p).with_context(|| format!("loading {}", p.display())))
                .collect::<Result<Vec<_>>>()?;
            let dir = out_dir(out);
            let _lock = OutputLock::acquire(&dir)?;
            let data = pipeline::prepare(&cfg, seed)?;
            let report = pipeline::evaluate(&cfg, &data, [&cks[0], &cks[1], &cks[2], &cks[3]])?;
            let stamp = pipeline::stamp(&cfg, seed);
            pipeline::write_report(&dir, "report", &report, &stamp)?;
            print!("{}", report.to_table(&stamp));
        }
        Command::Models { common } => {
            let cfg = load(&common)?;
            let rules = cfg.consistency.rule_list()?;
            let g = build_graph(&rules, &cfg.consistency.relation())?;
            let (sets, tutor) = model_sets_with_tutor(&g, &cfg.consistency.correct_ids()?);
            print!("{}", pipeline::stamp(&cfg, cfg.global.seed).header());
            print!("{}", format_model_sets(&g, &sets));
            if let Err(e) = tutor {
                eprintln!("warning: {e}");
            }
        }
        Command::Report { common, out } => {
            let cfg = load(&common)?;
            let dir = out_dir(out);
            let _lock = OutputLock::acquire(&dir)?;
            let res = pipeline::run_experiment(&cfg, &dir, &mut |m| progress(m))?;
            print!("{}", res.mean.to_table(&pipeline::stamp(&cfg, cfg.global.seed)));
        }
        Command::Gradcheck { cases, seed } => {
            if cases == 0 {
                return Err(ConfigError::invalid("--cases", "must be at least 1").into());
            }
            let report = run_gradcheck(cases, seed)?;
            for (i, c) in report.cases.iter().enumerate() {
                println!(
                    "case {i}: d_model={} n_heads={} n_layers={} vocab={} params={} max_rel_err={:.3e}",
                    c.config.d_model, c.config.n_heads, c.config.n_layers, c.config.vocab_size, c.n_params,
                    c.max_relative_error
                );
            }
            println!("max relative error = {:.3e}", report.max_relative_error);
            if report.max_relative_error > GRADCHECK_TOLERANCE {
                bail!("gradient check failed: {:.3e} > {GRADCHECK_TOLERANCE:e}", report.max_relative_error);
            }
        }
    }
    Ok(())
}

fn is_validation(e: &anyhow::Error) -> bool {
    e.chain().any(|c| c.is::<ConfigError>())
        || matches!(e.downcast_ref::<PipelineError>(), Some(PipelineError::Config(_)))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if is_validation(&e) { 1 } else { 2 })
        }
    }
}
