use std::fs;
use std::path::Path;

use super::*;
use crate::diffcore::Tensor;
use crate::distill::Fusion;
use crate::rng::Rng;

fn tiny() -> ExperimentConfig {
    ExperimentConfig::tiny()
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((
                    p.strip_prefix(dir).unwrap().display().to_string(),
                    fs::read(&p).unwrap(),
                ));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn config_round_trips_through_flat_text() {
    let mut cfg = tiny();
    cfg.optim.lr_encoder = 3e-4;
    cfg.split.normal_ids = vec![1];
    cfg.eval.fusion = Some(Fusion::PlainSum);
    let text = cfg.to_flat_string().unwrap();
    assert!(text.lines().all(|l| !l.starts_with('[')));
    let back: ExperimentConfig = parse_flat(&text).unwrap();
    assert_eq!(back, cfg);
    assert_eq!(back.hash().unwrap(), cfg.hash().unwrap());
}

#[test]
fn config_rejects_unknown_and_malformed_keys() {
    assert!(matches!(
        parse_flat::<ExperimentConfig>("optim.lr_encoderr = 1.0"),
        Err(crate::Error::Config(_))
    ));
    assert!(parse_flat::<ExperimentConfig>("bogus = 1").is_err());
    assert!(parse_flat::<ExperimentConfig>("optim = 1").is_err());
    assert!(parse_flat::<ExperimentConfig>("train.iterations = \"many\"").is_err());
    let cfg: ExperimentConfig = parse_flat("train.iterations = 7\n").unwrap();
    assert_eq!(cfg.train.iterations, 7);
    assert_eq!(cfg.optim, OptimConfig::default());
}

#[test]
fn overrides_apply_last_and_validate() {
    let cfg = tiny()
        .with_overrides(&["train.iterations=9".into(), "data.kind=semantic".into()])
        .unwrap();
    assert_eq!(cfg.train.iterations, 9);
    assert_eq!(cfg.data.kind, crate::synthdata::DatasetKind::Semantic);
    assert_ne!(cfg.hash().unwrap(), tiny().hash().unwrap());
    assert!(tiny()
        .with_overrides(&["train.batch_size=0".into()])
        .is_err());
    assert!(tiny().with_overrides(&["nokey".into()]).is_err());
    assert!(tiny()
        .with_overrides(&["loss.use_l_se=false".into(), "loss.use_l_sd=false".into()])
        .is_err());
}

fn opt(amsgrad: bool, clamp: bool, wd: f64) -> StableAdamW {
    StableAdamW::new(OptimConfig {
        amsgrad,
        update_clamp: clamp,
        weight_decay: wd,
        ..OptimConfig::default()
    })
}

#[test]
fn zero_gradient_leaves_parameters_unchanged() {
    let mut p = Tensor::<f64>::new([3], vec![0.5, -1.0, 2.0]).unwrap();
    let before = p.clone();
    let mut st = OptimState::new(&[vec![3]]);
    let o = opt(true, true, 0.0);
    for _ in 0..3 {
        o.step(&mut st, &mut [&mut p], &[Tensor::zeros([3])], &[1e-2])
            .unwrap();
    }
    assert_eq!(p, before);
    assert_eq!(st.step, 3);
}

#[test]
fn zero_gradient_with_decay_shrinks_geometrically() {
    let (lr, wd) = (0.1, 0.01);
    let mut p = Tensor::<f64>::new([2], vec![1.0, -3.0]).unwrap();
    let mut st = OptimState::new(&[vec![2]]);
    opt(true, true, wd)
        .step(&mut st, &mut [&mut p], &[Tensor::zeros([2])], &[lr])
        .unwrap();
    let k = 1.0 - lr * wd;
    assert_eq!(p.data(), &[k, -3.0 * k]);
}

/// Element-wise reference recurrence written out longhand.
fn reference_steps(p0: &[f64], grads: &[Vec<f64>], lr0: f64, c: &OptimConfig) -> Vec<f64> {
    let n = p0.len();
    let (mut p, mut m, mut v, mut vmax) = (p0.to_vec(), vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    for (t, g) in grads.iter().enumerate() {
        let t = (t + 1) as i32;
        for i in 0..n {
            m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
            v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
            vmax[i] = f64::max(vmax[i], v[i]);
        }
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let second = if c.amsgrad { &vmax } else { &v };
        let mut lr = lr0;
        if c.update_clamp {
            let mut s = 0.0;
            for i in 0..n {
                s += g[i] * g[i] / f64::max(second[i] / bc2, c.eps * c.eps);
            }
            lr /= f64::max(1.0, (s / n as f64).sqrt());
        }
        for i in 0..n {
            let vh = second[i] / bc2;
            p[i] = p[i] * (1.0 - lr * c.weight_decay) - lr * (m[i] / bc1) / (vh.sqrt() + c.eps);
        }
    }
    p
}

#[test]
fn three_steps_match_reference_recurrence() {
    let mut rng = Rng::new(5, 0);
    for (amsgrad, clamp) in [(true, true), (false, false), (true, false), (false, true)] {
        let o = opt(amsgrad, clamp, 0.05);
        let p0: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
        // Shrinking gradients make v decrease, which exercises the max.
        let grads: Vec<Vec<f64>> = (0..3)
            .map(|t| (0..4).map(|_| rng.normal() * 0.3f64.powi(t)).collect())
            .collect();
        let mut p = Tensor::new([4], p0.clone()).unwrap();
        let mut st = OptimState::new(&[vec![4]]);
        for g in &grads {
            o.step(
                &mut st,
                &mut [&mut p],
                &[Tensor::new([4], g.clone()).unwrap()],
                &[0.01],
            )
            .unwrap();
        }
        let want = reference_steps(&p0, &grads, 0.01, &o.config);
        for (a, b) in p.data().iter().zip(&want) {
            assert!(
                (a - b).abs() <= 1e-15 * b.abs().max(1.0),
                "amsgrad {amsgrad} clamp {clamp}: {a} vs {b}"
            );
        }
    }
}

#[test]
fn clamp_divides_a_spike_by_its_rms_ratio() {
    let run = |clamp: bool| {
        let mut p = Tensor::<f64>::new([2], vec![0.0, 0.0]).unwrap();
        let mut st = OptimState::new(&[vec![2]]);
        let o = opt(false, clamp, 0.0);
        o.step(
            &mut st,
            &mut [&mut p],
            &[Tensor::new([2], vec![1.0, -1.0]).unwrap()],
            &[0.1],
        )
        .unwrap();
        // At step 1, g^2 / v_hat is exactly 1: no clamping.
        assert!((p.data()[0] + 0.1).abs() < 1e-9);
        let before = p.data()[0];
        o.step(
            &mut st,
            &mut [&mut p],
            &[Tensor::new([2], vec![100.0, -100.0]).unwrap()],
            &[0.1],
        )
        .unwrap();
        p.data()[0] - before
    };
    let (free, clamped) = (run(false), run(true));
    let v_hat = (0.999 * 0.001 + 0.001 * 1e4) / (1.0 - 0.999f64.powi(2));
    let rms = (1e4 / v_hat).sqrt();
    assert!(rms > 1.0);
    assert!((free / clamped - rms).abs() < 1e-9);
}

#[test]
fn non_finite_gradient_skips_the_step() {
    let mut p = Tensor::<f64>::new([2], vec![1.0, 2.0]).unwrap();
    let mut st = OptimState::new(&[vec![2]]);
    let out = opt(true, true, 0.1)
        .step(
            &mut st,
            &mut [&mut p],
            &[Tensor::new([2], vec![f64::NAN, 0.0]).unwrap()],
            &[0.1],
        )
        .unwrap();
    assert_eq!(out, StepOutcome::Skipped);
    assert_eq!(p.data(), &[1.0, 2.0]);
    assert_eq!(st.step, 0);
    let bad = opt(true, true, 0.1).step(&mut st, &mut [&mut p], &[Tensor::zeros([3])], &[0.1]);
    assert!(bad.is_err());
}

#[test]
fn zero_iterations_write_only_the_initial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny();
    cfg.train.iterations = 0;
    let (ds, roster) = prepare(&cfg).unwrap();
    let out = train_entry::<f64>(&cfg, &ds, &roster[0], Some(dir.path()), None).unwrap();
    assert_eq!(out.checkpoints.len(), 1);
    assert!(out.checkpoints[0].ends_with("iter_000000"));
    assert!(out.log.is_empty());
    assert_eq!(out.state, TrainState::<f64>::fresh(&cfg).unwrap());
}

#[test]
fn checkpoints_follow_the_schedule() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny();
    cfg.train.iterations = 5;
    cfg.train.checkpoint_every = 2;
    let (ds, roster) = prepare(&cfg).unwrap();
    let out = train_entry::<f64>(&cfg, &ds, &roster[0], Some(dir.path()), None).unwrap();
    let names: Vec<String> = out
        .checkpoints
        .iter()
        .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
        .collect();
    assert_eq!(
        names,
        ["iter_000000", "iter_000002", "iter_000004", "iter_000005"]
    );
    let log =
        fs::read_to_string(out.checkpoints[0].parent().unwrap().join("loss_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 1 + 5);
}

#[test]
fn identical_runs_are_byte_identical() {
    let cfg = tiny();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ra = run_experiment::<f64>(&cfg, Some(a.path())).unwrap();
    let rb = run_experiment::<f64>(&cfg, Some(b.path())).unwrap();
    assert_eq!(ra.entries, rb.entries);
    let strip = |mut files: Vec<(String, Vec<u8>)>| {
        // The JSON report embeds wall-clock time; compare it with that field zeroed.
        for (name, bytes) in &mut files {
            if name.ends_with("metrics.json") {
                let mut r: MetricsReport = serde_json::from_slice(bytes).unwrap();
                r.wall_clock_seconds = 0.0;
                *bytes = report_json(&r).unwrap().into_bytes();
            }
        }
        files
    };
    let (fa, fb) = (strip(dir_bytes(a.path())), strip(dir_bytes(b.path())));
    assert!(fa.len() > 5);
    assert_eq!(fa, fb);
}

#[test]
fn resume_matches_uninterrupted_training() {
    let mut cfg = tiny();
    cfg.train.iterations = 4;
    let (ds, roster) = prepare(&cfg).unwrap();
    let straight = tempfile::tempdir().unwrap();
    let full = train_entry::<f64>(&cfg, &ds, &roster[0], Some(straight.path()), None).unwrap();

    let split = tempfile::tempdir().unwrap();
    let mut first = cfg.clone();
    first.train.iterations = 2;
    let half = train_entry::<f64>(&first, &ds, &roster[0], Some(split.path()), None).unwrap();
    let resumed_from = half.checkpoints.last().unwrap().clone();
    let restored = load_checkpoint::<f64>(&resumed_from, &cfg).unwrap();
    assert_eq!(restored, half.state);

    let resumed = train_entry::<f64>(
        &cfg,
        &ds,
        &roster[0],
        Some(split.path()),
        Some(&resumed_from),
    )
    .unwrap();
    assert_eq!(resumed.state, full.state);
    let last = |o: &TrainOutcome<f64>| dir_bytes(o.checkpoints.last().unwrap());
    assert_eq!(last(&resumed), last(&full));
}

#[test]
fn teacher_is_frozen_by_training() {
    let mut cfg = tiny();
    cfg.train.iterations = 3;
    let before = TrainState::<f64>::fresh(&cfg)
        .unwrap()
        .model
        .teacher_checksum();
    let (ds, roster) = prepare(&cfg).unwrap();
    let out = train_entry::<f64>(&cfg, &ds, &roster[0], None, None).unwrap();
    assert_eq!(out.state.model.teacher_checksum(), before);
    assert_ne!(
        out.state.model.encoder.params(),
        TrainState::<f64>::fresh(&cfg)
            .unwrap()
            .model
            .encoder
            .params()
    );
}

#[test]
fn disabled_branch_parameters_stay_put() {
    let mut cfg = tiny();
    cfg.train.iterations = 2;
    cfg.loss = ABLATION_ROWS[0];
    let fresh = TrainState::<f64>::fresh(&cfg).unwrap().model;
    let (ds, roster) = prepare(&cfg).unwrap();
    let m = train_entry::<f64>(&cfg, &ds, &roster[0], None, None)
        .unwrap()
        .state
        .model;
    assert_eq!(m.decoder.params(), fresh.decoder.params());
    assert_eq!(m.bottleneck.params(), fresh.bottleneck.params());
    assert_ne!(m.encoder.params(), fresh.encoder.params());
}

#[test]
fn plain_sum_score_is_the_exact_sum() {
    let mut cfg = tiny();
    cfg.loss = ABLATION_ROWS[4];
    let report = run_experiment::<f64>(&cfg, None).unwrap();
    assert_eq!(report.settings.fusion, Fusion::PlainSum);
    for r in &report.entries[0].records {
        assert_eq!(r.fused, r.l_prime + r.l_sd);
        assert_eq!(r.encoder_score, Some(r.l_prime));
    }
}

#[test]
fn mean_row_averages_entries() {
    let mut cfg = tiny();
    cfg.split.mode = crate::synthdata::SplitMode::SingleClass;
    cfg.train.iterations = 1;
    let report = run_experiment::<f64>(&cfg, None).unwrap();
    assert_eq!(report.entries.len(), 2);
    let n = report.entries.len() as f64;
    let mean = |f: fn(&EntryReport) -> f64| report.entries.iter().map(f).sum::<f64>() / n;
    assert!((report.mean.image.auroc - mean(|e| e.image.auroc)).abs() < 1e-12);
    assert!((report.mean.image.ap - mean(|e| e.image.ap)).abs() < 1e-12);
    assert!((report.mean.image.f1_max - mean(|e| e.image.f1_max)).abs() < 1e-12);
    assert!((report.mean.pixel.unwrap().auroc - mean(|e| e.pixel.unwrap().auroc)).abs() < 1e-12);
}

#[test]
fn report_files_round_trip_and_count() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny();
    cfg.train.iterations = 1;
    let report = run_experiment::<f64>(&cfg, None).unwrap();
    let files = emit_report(&report, dir.path(), &ALL_FORMATS).unwrap();
    assert!(files.iter().all(|f| f.exists()));
    assert_eq!(
        read_report(&dir.path().join("metrics.json")).unwrap(),
        report
    );
    let e = &report.entries[0];
    let csv = fs::read_to_string(dir.path().join(format!("scores_{}.csv", e.name))).unwrap();
    assert_eq!(csv.lines().count(), 1 + e.records.len());
    assert!(csv.starts_with(
        "index,class_id,label,l_se,l_prime,l_doubleprime,l_sd,encoder_score,decoder_score,fused"
    ));
    for which in ["encoder", "decoder", "fused"] {
        let h =
            fs::read_to_string(dir.path().join(format!("hist_{}_{which}.csv", e.name))).unwrap();
        let rows: Vec<&str> = h.lines().skip(1).collect();
        assert_eq!(rows.len(), HISTOGRAM_BINS);
        let total: usize = rows
            .iter()
            .map(|l| {
                l.split(',')
                    .skip(2)
                    .map(|c| c.parse::<usize>().unwrap())
                    .sum::<usize>()
            })
            .sum();
        assert_eq!(total, e.records.len());
    }
}

#[test]
fn histogram_counts_and_edges() {
    let h = Histogram::new(&[(0.0, false), (1.0, true), (0.5, false), (0.99, true)], 4).unwrap();
    assert_eq!(h.normal, [1, 0, 1, 0]);
    assert_eq!(h.anomalous, [0, 0, 0, 2]);
    assert_eq!(h.edges(1), (0.25, 0.5));
    assert_eq!(h.total(), 4);
    let flat = Histogram::new(&[(2.0, false), (2.0, true)], 3).unwrap();
    assert_eq!((flat.normal[0], flat.anomalous[0]), (1, 1));
    assert!(Histogram::new(&[], 3).is_err());
}

#[test]
fn ablation_rows_follow_the_table() {
    let flags: Vec<(bool, bool, bool, bool)> = ABLATION_ROWS
        .iter()
        .map(|f| (f.use_l_se, f.use_l_sd, f.use_cls_m, f.use_noisy_or))
        .collect();
    assert_eq!(
        flags,
        [
            (true, false, false, false),
            (false, true, false, false),
            (true, false, true, false),
            (true, true, false, true),
            (true, true, true, false),
            (true, true, true, true),
        ]
    );
}
