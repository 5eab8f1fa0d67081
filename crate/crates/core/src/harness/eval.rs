//! Evaluation of a trained model on a roster entry.

use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, Tensor};
use crate::distill::{
    anomaly_map, branch_losses, fused_score, Fusion, Label, MapOptions, ScoreVariant,
};
use crate::error::{Error, Result};
use crate::metrics::{detection_metrics, pixel_metrics, DetectionMetrics, ScoreSet};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::synthdata::{LabeledDataset, RosterEntry};
use crate::vitnet::DualStudentModel;

use super::config::LossFlags;

/// Scores of one test sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub index: usize,
    pub class_id: usize,
    /// Training-convention label: 1 normal, 0 anomalous.
    pub label: u8,
    pub l_se: f64,
    pub l_prime: f64,
    pub l_doubleprime: f64,
    pub l_sd: f64,
    /// Encoder-branch score under the chosen variant (absent if disabled).
    pub encoder_score: Option<f64>,
    pub decoder_score: Option<f64>,
    pub fused: f64,
}

/// Which branches and scoring rule an evaluation uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub use_encoder: bool,
    pub use_decoder: bool,
    pub score_variant: ScoreVariant,
    pub fusion: Fusion,
    pub pixel: bool,
    pub smooth_maps: bool,
}

impl EvalSettings {
    pub fn from_flags(flags: &LossFlags) -> Self {
        EvalSettings {
            use_encoder: flags.use_l_se,
            use_decoder: flags.use_l_sd,
            score_variant: flags.score_variant(),
            fusion: flags.fusion(),
            pixel: true,
            smooth_maps: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntryReport {
    pub name: String,
    /// Metrics of the fused score.
    pub image: DetectionMetrics,
    /// Metrics of each branch score alone.
    pub encoder: Option<DetectionMetrics>,
    pub decoder: Option<DetectionMetrics>,
    /// Pixel metrics over samples that have masks plus all normal samples.
    pub pixel: Option<DetectionMetrics>,
    pub records: Vec<ScoreRecord>,
}

/// Arithmetic means over entries; a metric is present only if every entry
/// has it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanRow {
    pub image: DetectionMetrics,
    pub encoder: Option<DetectionMetrics>,
    pub decoder: Option<DetectionMetrics>,
    pub pixel: Option<DetectionMetrics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub config_hash: String,
    pub settings: EvalSettings,
    pub entries: Vec<EntryReport>,
    pub mean: MeanRow,
    pub wall_clock_seconds: f64,
}

fn mean_metrics(items: &[Option<DetectionMetrics>]) -> Option<DetectionMetrics> {
    let all: Option<Vec<DetectionMetrics>> = items.iter().copied().collect();
    let all = all?;
    let n = all.len() as f64;
    if all.is_empty() {
        return None;
    }
    Some(DetectionMetrics {
        auroc: all.iter().map(|m| m.auroc).sum::<f64>() / n,
        ap: all.iter().map(|m| m.ap).sum::<f64>() / n,
        f1_max: all.iter().map(|m| m.f1_max).sum::<f64>() / n,
    })
}

impl MetricsReport {
    pub fn new(
        config_hash: String,
        settings: EvalSettings,
        entries: Vec<EntryReport>,
        wall: f64,
    ) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Data("report without entries".into()));
        }
        let pick = |f: fn(&EntryReport) -> Option<DetectionMetrics>| {
            entries.iter().map(f).collect::<Vec<_>>()
        };
        let mean = MeanRow {
            image: mean_metrics(&pick(|e| Some(e.image))).expect("nonempty"),
            encoder: mean_metrics(&pick(|e| e.encoder)),
            decoder: mean_metrics(&pick(|e| e.decoder)),
            pixel: mean_metrics(&pick(|e| e.pixel)),
        };
        Ok(MetricsReport {
            config_hash,
            settings,
            entries,
            mean,
            wall_clock_seconds: wall,
        })
    }
}

/// Eval-mode pass over `entry.test`: dropout off, one graph per sample.
pub fn evaluate<T: Scalar>(
    model: &DualStudentModel<T>,
    dataset: &LabeledDataset,
    entry: &RosterEntry,
    settings: &EvalSettings,
) -> Result<EntryReport> {
    if entry.test.is_empty() {
        return Err(Error::Data(format!(
            "roster entry {} has an empty test set",
            entry.name
        )));
    }
    if !settings.use_encoder && !settings.use_decoder {
        return Err(Error::Config("evaluation needs at least one branch".into()));
    }
    // Eval mode never draws from the generator.
    let mut rng = Rng::new(0, 0);
    let want_maps = settings.pixel && settings.use_decoder;
    let mut records = Vec::with_capacity(entry.test.len());
    let mut maps = Vec::new();
    let mut masks = Vec::new();
    for &(i, label) in &entry.test {
        let s = dataset
            .samples
            .get(i)
            .ok_or_else(|| Error::Data(format!("sample index {i} out of range")))?;
        let image: Tensor<T> = s.image.cast();
        let g = Graph::new();
        let bound = model.bind_students(&g);
        let tp = model.forward_teacher(&g, &image)?;
        let ep = if settings.use_encoder {
            Some(model.forward_encoder_student(&g, &bound, &image)?)
        } else {
            None
        };
        let dp = if settings.use_decoder {
            let z = model.bottleneck(&bound, &tp, false, &mut rng)?;
            Some(model.forward_decoder_student(&bound, z)?)
        } else {
            None
        };
        let bl = branch_losses(&tp, ep.as_ref(), dp.as_ref())?;
        let encoder_score = settings
            .use_encoder
            .then(|| bl.encoder_score(settings.score_variant));
        let decoder_score = settings.use_decoder.then_some(bl.l_sd);
        let fused = fused_score(encoder_score, decoder_score, settings.fusion)?;
        if !fused.is_finite() {
            return Err(Error::Numeric(format!("non-finite score for sample {i}")));
        }
        if let (true, Some(dp)) = (want_maps, dp.as_ref()) {
            let keep = label == Label::Normal || s.mask.is_some();
            if keep {
                let m = anomaly_map(
                    &tp,
                    dp,
                    dataset.image_size,
                    MapOptions {
                        smooth: settings.smooth_maps,
                    },
                )?;
                maps.push(m.cast::<f64>());
                masks.push(
                    s.mask
                        .clone()
                        .unwrap_or_else(|| Tensor::zeros([dataset.image_size, dataset.image_size])),
                );
            }
        }
        records.push(ScoreRecord {
            index: i,
            class_id: s.class_id,
            label: label.y(),
            l_se: bl.l_se,
            l_prime: bl.l_prime,
            l_doubleprime: bl.l_doubleprime,
            l_sd: bl.l_sd,
            encoder_score,
            decoder_score,
            fused,
        });
    }
    let truth: Vec<bool> = entry.test.iter().map(|t| t.1.is_anomalous()).collect();
    let metrics_of = |f: &dyn Fn(&ScoreRecord) -> Option<f64>| -> Result<Option<DetectionMetrics>> {
        let scores: Option<Vec<f64>> = records.iter().map(f).collect();
        match scores {
            Some(s) => Ok(Some(detection_metrics(&ScoreSet::new(s, truth.clone())?)?)),
            None => Ok(None),
        }
    };
    let image = metrics_of(&|r| Some(r.fused))?.expect("fused score always present");
    let encoder = metrics_of(&|r| r.encoder_score)?;
    let decoder = metrics_of(&|r| r.decoder_score)?;
    let has_defect_pixels = masks.iter().any(|m| m.data().iter().any(|&v| v > 0.5));
    let pixel = if has_defect_pixels {
        Some(pixel_metrics(&maps, &masks)?)
    } else {
        None
    };
    Ok(EntryReport {
        name: entry.name.clone(),
        image,
        encoder,
        decoder,
        pixel,
        records,
    })
}
