use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use gengap_core::io::{self, FormatError};
use gengap_core::run::{self, RunConfig, RunError};
use gengap_core::zoo::{self, BuildOptions, Zoo, ZooConfig, ZooError};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

/// Build model zoos, compute complexity measures over them and score how
/// well each measure ranks models by generalization gap.
#[derive(Parser)]
#[command(name = "gengap", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a hyperparameter grid of models into a zoo directory.
    ZooBuild {
        /// Zoo config (JSON); defaults are used when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Target zoo directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        parallel: Option<usize>,
        /// Replace an existing zoo.
        #[arg(long)]
        force: bool,
    },
    /// Evaluate measures on every model of a zoo.
    Measure(RunArgs),
    /// Score measure results against the zoo's gaps.
    Score(RunArgs),
    /// Render the score table.
    Report(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    zoo: Option<PathBuf>,
    /// Run config (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (default: the zoo directory).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated measure ids to keep.
    #[arg(long, value_delimiter = ',')]
    measures: Option<Vec<String>>,
    #[arg(long)]
    seed: Option<u64>,
    /// Sample budget fraction in (0, 1].
    #[arg(long)]
    budget: Option<f64>,
    #[arg(long)]
    parallel: Option<usize>,
}

struct Resolved {
    cfg: RunConfig,
    zoo: Zoo,
    out: PathBuf,
}

impl RunArgs {
    fn resolve(self) -> Result<Resolved> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(ids) = &self.measures {
            cfg.select_measures(ids)?;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(b) = self.budget {
            cfg.budget.fraction = b;
        }
        if let Some(p) = self.parallel {
            cfg.parallel = p;
        }
        cfg.validate()?;
        let zoo_dir = self
            .zoo
            .or_else(|| cfg.zoo.clone())
            .ok_or_else(|| RunError::Config("zoo: no zoo directory given (--zoo or \"zoo\" in the config)".into()))?;
        let zoo = Zoo::open(&zoo_dir).with_context(|| format!("opening zoo {}", zoo_dir.display()))?;
        let out = self.out.or_else(|| cfg.out.clone()).unwrap_or(zoo_dir);
        std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
        Ok(Resolved { cfg, zoo, out })
    }
}

fn zoo_build(
    config: Option<&Path>,
    out: &Path,
    seed: Option<u64>,
    parallel: Option<usize>,
    force: bool,
) -> Result<ExitCode> {
    let mut cfg: ZooConfig = match config {
        Some(p) => io::read_json(p)?,
        None => ZooConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let total = cfg.grid.len();
    let opts = BuildOptions {
        parallel: parallel.unwrap_or(1),
        force,
    };
    let manifest = zoo::build_zoo(&cfg, out, opts, &|r| {
        eprintln!(
            "{} train {:.3} test {:.3} gap {:+.3} epochs {}{}",
            r.id,
            r.train_accuracy,
            r.test_accuracy,
            r.gap,
            r.epochs,
            r.flag.as_deref().map(|f| format!(" [{f}]")).unwrap_or_default()
        );
    })?;
    let flagged = manifest.records.iter().filter(|r| !r.usable()).count();
    println!(
        "{}: {} of {total} models, {flagged} flagged",
        out.display(),
        manifest.records.len()
    );
    Ok(ExitCode::SUCCESS)
}

fn measure(args: RunArgs) -> Result<ExitCode> {
    let r = args.resolve()?;
    let path = r.out.join(&r.cfg.outputs.results);
    let summary = run::run_measures(&r.zoo, &r.cfg, &path, &|rec| match (&rec.value, &rec.error) {
        (Some(v), _) => eprintln!("{} {} = {}", rec.model, rec.measure, v.value),
        (_, Some(e)) => eprintln!("{} {} failed: {e}", rec.model, rec.measure),
        _ => {}
    })?;
    println!(
        "{}: {} computed, {} reused, {} failed",
        path.display(),
        summary.computed,
        summary.reused,
        summary.failed
    );
    Ok(if summary.failed > 0 {
        ExitCode::from(1)
    } else {
        ExitCode::SUCCESS
    })
}

fn score(args: RunArgs, print: bool) -> Result<ExitCode> {
    let r = args.resolve()?;
    let o = &r.cfg.outputs;
    let scores = run::write_scores_and_report(
        &r.zoo,
        &r.out.join(&o.results),
        &r.out.join(&o.scores),
        &r.out.join(&o.report),
        &r.cfg.cmi,
        r.cfg.include_flagged,
    )?;
    if print {
        print!("{}", run::render_report(&scores));
    } else {
        println!("{}", r.out.join(&o.scores).display());
    }
    Ok(ExitCode::SUCCESS)
}

fn is_config_error(e: &anyhow::Error) -> bool {
    e.chain().any(|c| {
        matches!(
            c.downcast_ref::<ZooError>(),
            Some(ZooError::Config(_) | ZooError::Exists(_) | ZooError::NotAZoo(_))
        ) || matches!(c.downcast_ref::<RunError>(), Some(RunError::Config(_)))
            || matches!(c.downcast_ref::<FormatError>(), Some(FormatError::Json { .. }))
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::ZooBuild {
            config,
            out,
            seed,
            parallel,
            force,
        } => zoo_build(config.as_deref(), &out, seed, parallel, force),
        Command::Measure(a) => measure(a),
        Command::Score(a) => score(a, false),
        Command::Report(a) => score(a, true),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            if is_config_error(&e) {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
