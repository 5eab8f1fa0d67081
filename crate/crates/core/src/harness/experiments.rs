//! End-to-end runs: train and evaluate every roster entry, the partial-model
//! sweep and the few-shot sweep.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::synthdata::{
    few_shot_subsample, generate, make_splits, DatasetKind, LabeledDataset, RosterEntry,
};
use crate::vitnet::DualStudentModel;

use super::config::{ExperimentConfig, LossFlags};
use super::eval::{evaluate, EntryReport, EvalSettings, MetricsReport};
use super::report::{emit_report, ReportFormat, ALL_FORMATS};
use super::train::{load_checkpoint, TrainOutcome, TrainState, Trainer};

/// Dataset plus roster for a config, few-shot subsampling applied.
pub fn prepare(config: &ExperimentConfig) -> Result<(LabeledDataset, Vec<RosterEntry>)> {
    let dataset = generate(&config.data)?;
    let normal_ids = if !config.split.normal_ids.is_empty() {
        config.split.normal_ids.clone()
    } else if config.data.kind == DatasetKind::Folder {
        dataset.train_classes().into_iter().collect()
    } else {
        config.data.normal_ids()
    };
    let mut roster = make_splits(&dataset, config.split.mode, &normal_ids)?;
    if let Some(shots) = config.split.shots {
        for e in &mut roster {
            e.train = few_shot_subsample(&dataset, &e.train, shots, config.few_shot.seed)?;
        }
    }
    Ok((dataset, roster))
}

pub fn eval_settings(config: &ExperimentConfig) -> EvalSettings {
    EvalSettings {
        use_encoder: config.loss.use_l_se,
        use_decoder: config.loss.use_l_sd,
        score_variant: config.score_variant(),
        fusion: config.fusion(),
        pixel: config.eval.pixel_metrics,
        smooth_maps: config.eval.smooth_maps,
    }
}

fn entry_dir(out: &Path, entry: &RosterEntry) -> PathBuf {
    out.join(
        entry
            .name
            .replace(|c: char| !c.is_ascii_alphanumeric() && c != '_', "_"),
    )
}

/// Trains one entry. With `out`, checkpoints and the loss log go to
/// `<out>/<entry>/checkpoints`; with `resume`, training continues from that
/// checkpoint.
pub fn train_entry<T: Scalar>(
    config: &ExperimentConfig,
    dataset: &LabeledDataset,
    entry: &RosterEntry,
    out: Option<&Path>,
    resume: Option<&Path>,
) -> Result<TrainOutcome<T>> {
    let state = match resume {
        Some(dir) => load_checkpoint::<T>(dir, config)?,
        None => TrainState::<T>::fresh(config)?,
    };
    let mut trainer = Trainer::new(config, &state.model, dataset, &entry.train)?;
    if let Some(out) = out {
        trainer = trainer.with_checkpoints(entry_dir(out, entry).join("checkpoints"));
    }
    trainer.run(state)
}

/// Trains and evaluates every roster entry.
pub fn run_experiment<T: Scalar>(
    config: &ExperimentConfig,
    out: Option<&Path>,
) -> Result<MetricsReport> {
    let start = Instant::now();
    let (dataset, roster) = prepare(config)?;
    let settings = eval_settings(config);
    let mut entries = Vec::with_capacity(roster.len());
    for entry in &roster {
        log::info!("training {} on {} samples", entry.name, entry.train.len());
        let outcome = train_entry::<T>(config, &dataset, entry, out, None)?;
        entries.push(evaluate(&outcome.state.model, &dataset, entry, &settings)?);
    }
    let report = MetricsReport::new(
        config.hash()?,
        settings,
        entries,
        start.elapsed().as_secs_f64(),
    )?;
    if let Some(out) = out {
        emit_report(&report, &out.join("report"), &ALL_FORMATS)?;
    }
    Ok(report)
}

/// Evaluates a saved checkpoint on every roster entry (or one named entry).
pub fn evaluate_checkpoint<T: Scalar>(
    config: &ExperimentConfig,
    checkpoint: &Path,
    entry_name: Option<&str>,
) -> Result<MetricsReport> {
    let start = Instant::now();
    let (dataset, roster) = prepare(config)?;
    let state = load_checkpoint::<T>(checkpoint, config)?;
    let settings = eval_settings(config);
    let selected: Vec<&RosterEntry> = match entry_name {
        Some(n) => roster.iter().filter(|e| e.name == n).collect(),
        None => roster.iter().collect(),
    };
    if selected.is_empty() {
        return Err(Error::Config(format!(
            "no roster entry named {:?}",
            entry_name.unwrap_or("")
        )));
    }
    let entries: Vec<EntryReport> = selected
        .iter()
        .map(|e| evaluate(&state.model, &dataset, e, &settings))
        .collect::<Result<_>>()?;
    MetricsReport::new(
        config.hash()?,
        settings,
        entries,
        start.elapsed().as_secs_f64(),
    )
}

/// The six partial-model rows in table order.
pub const ABLATION_ROWS: [LossFlags; 6] = [
    LossFlags {
        use_l_se: true,
        use_l_sd: false,
        use_cls_m: false,
        use_noisy_or: false,
    },
    LossFlags {
        use_l_se: false,
        use_l_sd: true,
        use_cls_m: false,
        use_noisy_or: false,
    },
    LossFlags {
        use_l_se: true,
        use_l_sd: false,
        use_cls_m: true,
        use_noisy_or: false,
    },
    LossFlags {
        use_l_se: true,
        use_l_sd: true,
        use_cls_m: false,
        use_noisy_or: true,
    },
    LossFlags {
        use_l_se: true,
        use_l_sd: true,
        use_cls_m: true,
        use_noisy_or: false,
    },
    LossFlags {
        use_l_se: true,
        use_l_sd: true,
        use_cls_m: true,
        use_noisy_or: true,
    },
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub flags: LossFlags,
    pub report: MetricsReport,
}

/// Training depends on the class-token flag only through scoring, so rows
/// that differ only there share one trained model.
fn training_key(f: &LossFlags) -> (bool, bool, bool) {
    (
        f.use_l_se,
        f.use_l_sd,
        f.use_noisy_or && f.use_l_se && f.use_l_sd,
    )
}

/// Runs every partial-model row on the config's dataset and roster.
pub fn run_ablation<T: Scalar>(
    config: &ExperimentConfig,
    out: Option<&Path>,
) -> Result<Vec<AblationRow>> {
    let (dataset, roster) = prepare(config)?;
    let mut trained: Vec<((bool, bool, bool), Vec<DualStudentModel<T>>)> = Vec::new();
    let mut rows = Vec::with_capacity(ABLATION_ROWS.len());
    for (r, flags) in ABLATION_ROWS.iter().enumerate() {
        let start = Instant::now();
        let mut cfg = config.clone();
        cfg.loss = *flags;
        cfg.eval.score_variant = None;
        cfg.eval.fusion = None;
        let key = training_key(flags);
        if !trained.iter().any(|(k, _)| *k == key) {
            let models = roster
                .iter()
                .map(|e| {
                    log::info!("ablation row {}: training {}", r + 1, e.name);
                    train_entry::<T>(&cfg, &dataset, e, None, None).map(|o| o.state.model)
                })
                .collect::<Result<Vec<_>>>()?;
            trained.push((key, models));
        }
        let models = &trained
            .iter()
            .find(|(k, _)| *k == key)
            .expect("trained above")
            .1;
        let settings = eval_settings(&cfg);
        let entries = roster
            .iter()
            .zip(models)
            .map(|(e, m)| evaluate(m, &dataset, e, &settings))
            .collect::<Result<Vec<_>>>()?;
        let report = MetricsReport::new(
            cfg.hash()?,
            settings,
            entries,
            start.elapsed().as_secs_f64(),
        )?;
        if let Some(out) = out {
            emit_report(
                &report,
                &out.join(format!("row_{}", r + 1)),
                &[ReportFormat::Json, ReportFormat::Csv],
            )?;
        }
        rows.push(AblationRow {
            flags: *flags,
            report,
        });
    }
    if let Some(out) = out {
        write_text(&out.join("ablation.csv"), &ablation_csv(&rows))?;
    }
    Ok(rows)
}

fn mark(b: bool) -> &'static str {
    if b {
        "x"
    } else {
        ""
    }
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s =
        String::from("row,l_se,l_sd,cls_m,noisy_or,image_auroc,image_ap,image_f1max,pixel_auroc\n");
    for (i, r) in rows.iter().enumerate() {
        let f = &r.flags;
        let m = &r.report.mean;
        let pixel = m.pixel.map_or(String::new(), |p| format!("{:.6}", p.auroc));
        writeln!(
            s,
            "{},{},{},{},{},{:.6},{:.6},{:.6},{pixel}",
            i + 1,
            mark(f.use_l_se),
            mark(f.use_l_sd),
            mark(f.use_cls_m),
            mark(f.use_noisy_or),
            m.image.auroc,
            m.image.ap,
            m.image.f1_max
        )
        .expect("string write");
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FewShotRow {
    pub shots: usize,
    pub mean_auroc: f64,
    pub report: MetricsReport,
}

/// Trains and evaluates once per shot count, subsampling each entry's
/// training set with `few_shot.seed`.
pub fn run_fewshot<T: Scalar>(
    config: &ExperimentConfig,
    out: Option<&Path>,
) -> Result<Vec<FewShotRow>> {
    if config.few_shot.shots.is_empty() {
        return Err(Error::Config("few_shot.shots is empty".into()));
    }
    let mut rows = Vec::new();
    for &shots in &config.few_shot.shots {
        let mut cfg = config.clone();
        cfg.split.shots = Some(shots);
        let report = run_experiment::<T>(&cfg, None)?;
        if let Some(out) = out {
            emit_report(
                &report,
                &out.join(format!("shots_{shots}")),
                &[ReportFormat::Json, ReportFormat::Csv],
            )?;
        }
        rows.push(FewShotRow {
            shots,
            mean_auroc: report.mean.image.auroc,
            report,
        });
    }
    if let Some(out) = out {
        let mut s = String::from("shots,mean_auroc\n");
        for r in &rows {
            writeln!(s, "{},{:.6}", r.shots, r.mean_auroc).expect("string write");
        }
        write_text(&out.join("fewshot.csv"), &s)?;
    }
    Ok(rows)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Runs `f` at the precision the config asks for.
#[macro_export]
macro_rules! with_precision {
    ($config:expr, $f:ident ( $($arg:expr),* $(,)? )) => {
        match $config.train.precision {
            $crate::harness::Precision::F64 => $f::<f64>($($arg),*),
            $crate::harness::Precision::F32 => $f::<f32>($($arg),*),
        }
    };
}
