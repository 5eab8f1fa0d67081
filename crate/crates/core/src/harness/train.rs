//! Joint training of both students against the frozen teacher.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::diffcore::{load_tensors, save_tensors, Graph, NamedTensor, Tensor, Var};
use crate::distill::{bce_term, decoder_loss, encoder_loss, noisy_or_graph, Label};
use crate::error::{Error, Result};
use crate::rng::{streams, Rng, RngState};
use crate::scalar::Scalar;
use crate::synthdata::LabeledDataset;
use crate::vitnet::{DualStudentModel, PyramidValues};

use super::config::{ExperimentConfig, LossFlags};
use super::optim::{OptimState, StableAdamW, StepOutcome};

/// Running loss statistics kept in every checkpoint.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossStats {
    pub count: u64,
    pub sum: f64,
    pub last: f64,
    pub skipped_steps: u64,
}

impl LossStats {
    pub fn mean(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.sum / self.count as f64
        }
    }
}

/// Everything needed to continue training bit-identically.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<T> {
    pub iteration: usize,
    pub model: DualStudentModel<T>,
    pub optim: OptimState<T>,
    pub rng: Rng,
    pub stats: LossStats,
}

/// One loss-log line: batch means at the given iteration (before its update).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub loss: f64,
    pub l_se: f64,
    pub l_sd: f64,
}

/// Builds the model described by `config`, loading teacher weights if set.
pub fn build_model<T: Scalar>(config: &ExperimentConfig) -> Result<DualStudentModel<T>> {
    let mut model = DualStudentModel::new(
        config.teacher.clone(),
        config.encoder.clone(),
        config.decoder.clone(),
        config.bottleneck.clone(),
        config.train.seed,
    )?;
    if let Some(path) = &config.train.teacher_weights {
        let entries = load_tensors::<T>(path)?;
        model
            .teacher
            .params_mut()
            .load_named("teacher.", &entries)?;
    }
    Ok(model)
}

impl<T: Scalar> TrainState<T> {
    pub fn fresh(config: &ExperimentConfig) -> Result<Self> {
        let model = build_model::<T>(config)?;
        let shapes: Vec<Vec<usize>> = trainable_tensors(&model)
            .map(|t| t.shape().to_vec())
            .collect();
        Ok(TrainState {
            iteration: 0,
            model,
            optim: OptimState::new(&shapes),
            rng: Rng::new(config.train.seed, streams::TRAIN),
            stats: LossStats::default(),
        })
    }
}

/// Encoder, bottleneck and decoder tensors in optimizer order.
fn trainable_tensors<T: Scalar>(model: &DualStudentModel<T>) -> impl Iterator<Item = &Tensor<T>> {
    model
        .encoder
        .params()
        .tensors()
        .iter()
        .chain(model.bottleneck.params().tensors())
        .chain(model.decoder.params().tensors())
}

/// Per-sample teacher outputs; the teacher is frozen so they never change.
pub struct TeacherCache<T> {
    pub indices: Vec<usize>,
    pub images: Vec<Tensor<T>>,
    pub pyramids: Vec<PyramidValues<T>>,
}

impl<T: Scalar> TeacherCache<T> {
    pub fn build(
        model: &DualStudentModel<T>,
        dataset: &LabeledDataset,
        indices: &[usize],
    ) -> Result<Self> {
        let mut images = Vec::with_capacity(indices.len());
        let mut pyramids = Vec::with_capacity(indices.len());
        for &i in indices {
            let s = dataset
                .samples
                .get(i)
                .ok_or_else(|| Error::Data(format!("sample index {i} out of range")))?;
            let image: Tensor<T> = s.image.cast();
            let g = Graph::new();
            pyramids.push(model.forward_teacher(&g, &image)?.detach());
            images.push(image);
        }
        Ok(TeacherCache {
            indices: indices.to_vec(),
            images,
            pyramids,
        })
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Per-sample objective on one graph. Returns the objective and the branch
/// losses that went into it.
pub fn sample_objective<'g, T: Scalar>(
    g: &'g Graph<T>,
    model: &DualStudentModel<T>,
    bound: &crate::vitnet::BoundStudents<'g, T>,
    teacher: &PyramidValues<T>,
    image: &Tensor<T>,
    flags: &LossFlags,
    rng: &mut Rng,
) -> Result<(Var<'g, T>, Option<Var<'g, T>>, Option<Var<'g, T>>)> {
    let tp = teacher.attach(g);
    let l_sd = if flags.use_l_sd {
        let z = model.bottleneck(bound, &tp, true, rng)?;
        let dp = model.forward_decoder_student(bound, z)?;
        Some(decoder_loss(&tp, &dp)?)
    } else {
        None
    };
    let l_se = if flags.use_l_se {
        let ep = model.forward_encoder_student(g, bound, image)?;
        Some(encoder_loss(&tp, &ep)?)
    } else {
        None
    };
    let branches: Vec<Var<'g, T>> = l_se.iter().chain(l_sd.iter()).copied().collect();
    let objective = if flags.use_noisy_or {
        bce_term(noisy_or_graph(&branches)?, Label::Normal)?
    } else {
        let mut acc = branches[0];
        for b in &branches[1..] {
            acc = acc.add(*b)?;
        }
        acc
    };
    Ok((objective, l_se, l_sd))
}

/// Runs training from `state` up to `config.train.iterations`.
pub struct Trainer<'a, T> {
    pub config: &'a ExperimentConfig,
    pub cache: TeacherCache<T>,
    pub checkpoint_dir: Option<PathBuf>,
}

/// Result of a training run.
pub struct TrainOutcome<T> {
    pub state: TrainState<T>,
    pub log: Vec<LossRecord>,
    pub checkpoints: Vec<PathBuf>,
}

impl<'a, T: Scalar> Trainer<'a, T> {
    pub fn new(
        config: &'a ExperimentConfig,
        model: &DualStudentModel<T>,
        dataset: &LabeledDataset,
        train: &[usize],
    ) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::Data("training set is empty".into()));
        }
        if let Some(&i) = train.iter().find(|&&i| {
            dataset
                .samples
                .get(i)
                .is_some_and(|s| s.label != Label::Normal)
        }) {
            return Err(Error::Data(format!("training sample {i} is not normal")));
        }
        Ok(Trainer {
            config,
            cache: TeacherCache::build(model, dataset, train)?,
            checkpoint_dir: None,
        })
    }

    pub fn with_checkpoints(mut self, dir: impl Into<PathBuf>) -> Self {
        self.checkpoint_dir = Some(dir.into());
        self
    }

    fn lrs(&self, model: &DualStudentModel<T>) -> Vec<f64> {
        let c = &self.config;
        let enc = if c.loss.use_l_se {
            c.optim.lr_encoder
        } else {
            0.0
        };
        let dec = if c.loss.use_l_sd {
            c.optim.lr_decoder
        } else {
            0.0
        };
        let mut out = vec![enc; model.encoder.params().len()];
        out.extend(vec![
            dec;
            model.bottleneck.params().len()
                + model.decoder.params().len()
        ]);
        out
    }

    /// One optimizer iteration: a batch of per-sample graphs, gradients
    /// summed in batch order, then one update.
    pub fn step(&self, state: &mut TrainState<T>) -> Result<LossRecord> {
        let c = &self.config;
        let b = c.train.batch_size;
        let batch: Vec<usize> = (0..b).map(|_| state.rng.below(self.cache.len())).collect();
        let inv_b = T::one() / T::from_usize(b).unwrap();
        let mut grads: Vec<Tensor<T>> = trainable_tensors(&state.model)
            .map(|t| Tensor::zeros(t.shape().to_vec()))
            .collect();
        let (mut loss, mut l_se, mut l_sd) = (0.0, 0.0, 0.0);
        for &k in &batch {
            let g = Graph::new();
            let bound = state.model.bind_students(&g);
            let (obj, se, sd) = sample_objective(
                &g,
                &state.model,
                &bound,
                &self.cache.pyramids[k],
                &self.cache.images[k],
                &c.loss,
                &mut state.rng,
            )?;
            let value = obj.item().to_f64_lossless();
            if !value.is_finite() {
                return Err(Error::Numeric(format!(
                    "loss is {value} at iteration {} (sample {})",
                    state.iteration, self.cache.indices[k]
                )));
            }
            loss += value;
            l_se += se.map_or(0.0, |v| v.item().to_f64_lossless());
            l_sd += sd.map_or(0.0, |v| v.item().to_f64_lossless());
            let gr = g.backward(obj.scale(inv_b))?;
            let leaves = bound
                .encoder
                .iter()
                .chain(&bound.bottleneck)
                .chain(&bound.decoder);
            for (acc, v) in grads.iter_mut().zip(leaves) {
                if let Some(gv) = gr.get(*v) {
                    for (a, x) in acc.data_mut().iter_mut().zip(gv.data()) {
                        *a += *x;
                    }
                }
            }
        }
        let bf = b as f64;
        let record = LossRecord {
            iteration: state.iteration,
            loss: loss / bf,
            l_se: l_se / bf,
            l_sd: l_sd / bf,
        };

        let lrs = self.lrs(&state.model);
        let opt = StableAdamW::new(c.optim.clone());
        let model = &mut state.model;
        let mut params: Vec<&mut Tensor<T>> = model
            .encoder
            .params_mut()
            .tensors_mut()
            .iter_mut()
            .chain(model.bottleneck.params_mut().tensors_mut().iter_mut())
            .chain(model.decoder.params_mut().tensors_mut().iter_mut())
            .collect();
        if opt.step(&mut state.optim, &mut params, &grads, &lrs)? == StepOutcome::Skipped {
            state.stats.skipped_steps += 1;
        }
        state.iteration += 1;
        state.stats.count += 1;
        state.stats.sum += record.loss;
        state.stats.last = record.loss;
        Ok(record)
    }

    /// Trains until `config.train.iterations`, writing checkpoints at
    /// iteration 0 (fresh runs), every `checkpoint_every` iterations and at
    /// the end.
    pub fn run(&self, mut state: TrainState<T>) -> Result<TrainOutcome<T>> {
        let teacher_before = state.model.teacher_checksum();
        let target = self.config.train.iterations;
        let every = self.config.train.checkpoint_every;
        let mut log = Vec::new();
        let mut checkpoints = Vec::new();
        let save = |state: &TrainState<T>, checkpoints: &mut Vec<PathBuf>| -> Result<()> {
            if let Some(dir) = &self.checkpoint_dir {
                let p = dir.join(format!("iter_{:06}", state.iteration));
                save_checkpoint(&p, state, self.config)?;
                checkpoints.push(p);
            }
            Ok(())
        };
        if state.iteration == 0 {
            save(&state, &mut checkpoints)?;
        }
        while state.iteration < target {
            let rec = self.step(&mut state)?;
            log::debug!(
                "iter {} loss {:.6} l_se {:.6} l_sd {:.6}",
                rec.iteration,
                rec.loss,
                rec.l_se,
                rec.l_sd
            );
            log.push(rec);
            if state.iteration.is_multiple_of(every) || state.iteration == target {
                save(&state, &mut checkpoints)?;
            }
        }
        if state.model.teacher_checksum() != teacher_before {
            return Err(Error::Numeric(
                "teacher parameters changed during training".into(),
            ));
        }
        if let Some(dir) = &self.checkpoint_dir {
            append_loss_log(&dir.join("loss_log.csv"), &log)?;
        }
        Ok(TrainOutcome {
            state,
            log,
            checkpoints,
        })
    }
}

/// Appends records to a CSV loss log, writing the header for a new file.
pub fn append_loss_log(path: &Path, log: &[LossRecord]) -> Result<()> {
    let mut text = String::new();
    if !path.exists() {
        text.push_str("iteration,loss,l_se,l_sd\n");
    }
    for r in log {
        writeln!(
            text,
            "{},{:e},{:e},{:e}",
            r.iteration, r.loss, r.l_se, r.l_sd
        )
        .expect("string write");
    }
    use std::io::Write;
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CheckpointMeta {
    iteration: usize,
    optim_step: u64,
    rng: RngState,
    stats: LossStats,
    teacher_checksum: String,
    config_hash: String,
    dtype: String,
}

/// Writes `params.{hdr,bin}`, `optim.{hdr,bin}` and `state.toml` into `dir`.
pub fn save_checkpoint<T: Scalar>(
    dir: &Path,
    state: &TrainState<T>,
    config: &ExperimentConfig,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut params: Vec<NamedTensor<T>> = Vec::new();
    for (prefix, store) in state.model.stores() {
        params.extend(store.to_named(prefix));
    }
    save_tensors(&dir.join("params"), &params)?;
    let mut moments = Vec::new();
    for (name, buf) in [
        ("m", &state.optim.m),
        ("v", &state.optim.v),
        ("v_max", &state.optim.v_max),
    ] {
        for (i, t) in buf.iter().enumerate() {
            moments.push((format!("{name}.{i:04}"), t.clone()));
        }
    }
    save_tensors(&dir.join("optim"), &moments)?;
    let meta = CheckpointMeta {
        iteration: state.iteration,
        optim_step: state.optim.step,
        rng: state.rng.state(),
        stats: state.stats,
        teacher_checksum: state.model.teacher_checksum(),
        config_hash: config.hash()?,
        dtype: T::DTYPE.to_string(),
    };
    let text = toml::to_string(&meta).map_err(|e| Error::Serde(e.to_string()))?;
    let p = dir.join("state.toml");
    fs::write(&p, text).map_err(|e| Error::io(&p, e))
}

/// Restores a checkpoint written by [`save_checkpoint`] for `config`.
pub fn load_checkpoint<T: Scalar>(dir: &Path, config: &ExperimentConfig) -> Result<TrainState<T>> {
    let p = dir.join("state.toml");
    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    let meta: CheckpointMeta =
        toml::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", p.display())))?;
    let mut state = TrainState::<T>::fresh(config)?;
    let params = load_tensors::<T>(&dir.join("params"))?;
    for (prefix, store) in state.model.stores_mut() {
        store.load_named(prefix, &params)?;
    }
    if state.model.teacher_checksum() != meta.teacher_checksum {
        return Err(Error::Data(format!(
            "{}: teacher checksum mismatch",
            dir.display()
        )));
    }
    let moments = load_tensors::<T>(&dir.join("optim"))?;
    let n = state.optim.m.len();
    for (name, buf) in [
        ("m", &mut state.optim.m),
        ("v", &mut state.optim.v),
        ("v_max", &mut state.optim.v_max),
    ] {
        for (i, slot) in buf.iter_mut().enumerate().take(n) {
            let key = format!("{name}.{i:04}");
            let (_, t) = moments
                .iter()
                .find(|(k, _)| *k == key)
                .ok_or_else(|| Error::Data(format!("checkpoint lacks optimizer slot {key}")))?;
            if t.shape() != slot.shape() {
                return Err(Error::Data(format!(
                    "optimizer slot {key} has shape {:?}",
                    t.shape()
                )));
            }
            *slot = t.clone();
        }
    }
    state.optim.step = meta.optim_step;
    state.iteration = meta.iteration;
    state.rng = Rng::from_state(meta.rng);
    state.stats = meta.stats;
    Ok(state)
}
