use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dualkd::harness::{
    ablation_csv, apply_overrides, emit_report, evaluate_checkpoint, parse_flat, prepare,
    read_report, run_ablation, run_fewshot, train_entry, ExperimentConfig, MetricsReport,
    ReportFormat, ALL_FORMATS,
};
use dualkd::synthdata::{generate, write_dataset, DatasetSpec};
use dualkd::{with_precision, Error, Result, Scalar};

#[derive(Parser)]
#[command(
    name = "dualkd",
    version,
    about = "Dual-student distillation anomaly detection"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat `section.key = value` config file; defaults apply without one.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set train.iterations=100`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory (defaults to the config's `output_dir`).
    #[arg(long, short)]
    out: Option<PathBuf>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let base = match &self.config {
            Some(p) => ExperimentConfig::from_file(p)?,
            None => ExperimentConfig::default(),
        };
        base.with_overrides(&self.overrides)
    }

    fn out_dir(&self, cfg: &ExperimentConfig) -> PathBuf {
        self.out.clone().unwrap_or_else(|| cfg.output_dir.clone())
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Json,
    Csv,
    Histogram,
}

impl From<FormatArg> for ReportFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Json => ReportFormat::Json,
            FormatArg::Csv => ReportFormat::Csv,
            FormatArg::Histogram => ReportFormat::Histogram,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset and write it as PNGs plus manifest.csv.
    Synth {
        /// Dataset spec as flat `key = value` text (DatasetSpec fields).
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Train every roster entry, writing checkpoints and loss logs.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Continue from this checkpoint directory (single-entry rosters, or
        /// with --entry).
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Train only the roster entry with this name.
        #[arg(long)]
        entry: Option<String>,
    },
    /// Evaluate a checkpoint on the roster and write reports.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        entry: Option<String>,
    },
    /// Run the six partial-model rows and write ablation.csv.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Sweep `few_shot.shots` and write fewshot.csv.
    Fewshot {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Render a metrics.json into CSV and histogram files.
    Report {
        #[arg(long, short)]
        input: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
        #[arg(long, value_enum, value_delimiter = ',')]
        format: Vec<FormatArg>,
    },
}

fn synth(spec: Option<&Path>, overrides: &[String], out: &Path) -> Result<()> {
    let base = match spec {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            parse_flat::<DatasetSpec>(&text)?
        }
        None => DatasetSpec::default(),
    };
    let spec = apply_overrides(&base, overrides)?;
    spec.validate()?;
    let ds = generate(&spec)?;
    for w in &ds.warnings {
        log::warn!("{w}");
    }
    let rows = write_dataset(&ds, out)?;
    println!("wrote {} images to {}", rows.len(), out.display());
    Ok(())
}

fn train<T: Scalar>(
    cfg: &ExperimentConfig,
    out: &Path,
    resume: Option<&Path>,
    entry: Option<&str>,
) -> Result<()> {
    let (ds, roster) = prepare(cfg)?;
    let selected: Vec<_> = roster
        .iter()
        .filter(|e| entry.is_none_or(|n| e.name == n))
        .collect();
    if selected.is_empty() {
        return Err(Error::Config(format!(
            "no roster entry named {:?}",
            entry.unwrap_or("")
        )));
    }
    if resume.is_some() && selected.len() > 1 {
        return Err(Error::Config(
            "--resume needs a single roster entry; pass --entry".into(),
        ));
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let flat = out.join("config.toml");
    std::fs::write(&flat, cfg.to_flat_string()?).map_err(|e| Error::io(&flat, e))?;
    for e in selected {
        let o = train_entry::<T>(cfg, &ds, e, Some(out), resume)?;
        let last = o.log.last().map_or(f64::NAN, |r| r.loss);
        let ckpt = o
            .checkpoints
            .last()
            .map(|p| p.display().to_string())
            .unwrap_or_default();
        println!(
            "{}: {} iterations, final loss {last:.6}, checkpoint {ckpt}",
            e.name, o.state.iteration
        );
    }
    Ok(())
}

fn print_summary(r: &MetricsReport) {
    for e in &r.entries {
        let pix = e
            .pixel
            .map_or(String::new(), |p| format!(" pixel AUROC {:.4}", p.auroc));
        println!(
            "{}: image AUROC {:.4} AP {:.4} F1max {:.4}{pix}",
            e.name, e.image.auroc, e.image.ap, e.image.f1_max
        );
    }
    println!("mean: image AUROC {:.4}", r.mean.image.auroc);
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth {
            spec,
            overrides,
            out,
        } => synth(spec.as_deref(), &overrides, &out),
        Command::Train { cfg, resume, entry } => {
            let c = cfg.load()?;
            let out = cfg.out_dir(&c);
            with_precision!(c, train(&c, &out, resume.as_deref(), entry.as_deref()))
        }
        Command::Eval {
            cfg,
            checkpoint,
            entry,
        } => {
            let c = cfg.load()?;
            let report =
                with_precision!(c, evaluate_checkpoint(&c, &checkpoint, entry.as_deref()))?;
            let out = cfg.out_dir(&c).join("eval");
            emit_report(&report, &out, &ALL_FORMATS)?;
            print_summary(&report);
            Ok(())
        }
        Command::Ablate { cfg } => {
            let c = cfg.load()?;
            let out = cfg.out_dir(&c);
            let rows = with_precision!(c, run_ablation(&c, Some(&out)))?;
            print!("{}", ablation_csv(&rows));
            Ok(())
        }
        Command::Fewshot { cfg } => {
            let c = cfg.load()?;
            let out = cfg.out_dir(&c);
            let rows = with_precision!(c, run_fewshot(&c, Some(&out)))?;
            for r in rows {
                println!("shots {}: mean image AUROC {:.4}", r.shots, r.mean_auroc);
            }
            Ok(())
        }
        Command::Report { input, out, format } => {
            let report = read_report(&input)?;
            let formats: Vec<ReportFormat> = if format.is_empty() {
                ALL_FORMATS.to_vec()
            } else {
                format.into_iter().map(Into::into).collect()
            };
            let files = emit_report(&report, &out, &formats)?;
            println!("wrote {} files to {}", files.len(), out.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
