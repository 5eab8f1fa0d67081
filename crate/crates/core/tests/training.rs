//! Training-level behaviour on the synthetic datasets. These runs use `f32`
//! and a shortened schedule to stay within a few minutes on one core.

use dualkd::harness::{
    evaluate_checkpoint, prepare, run_ablation, train_entry, ExperimentConfig, Precision,
};
use dualkd::synthdata::DatasetSpec;

const RUN_ITERATIONS: usize = 500;

fn toy(data: DatasetSpec) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.data = data;
    cfg.train.precision = Precision::F32;
    cfg
}

#[test]
fn decoder_loss_falls_on_structural_data() {
    let mut cfg = toy(DatasetSpec::structural());
    cfg.train.iterations = RUN_ITERATIONS + 1;
    let (ds, roster) = prepare(&cfg).unwrap();
    let out = train_entry::<f32>(&cfg, &ds, &roster[0], None, None).unwrap();
    let (first, at) = (&out.log[0], &out.log[RUN_ITERATIONS]);
    assert_eq!(at.iteration, RUN_ITERATIONS);
    assert!(
        at.l_sd < first.l_sd,
        "L_SD {} at iteration {RUN_ITERATIONS} vs {} at 0",
        at.l_sd,
        first.l_sd
    );
}

#[test]
fn evaluating_a_checkpoint_twice_gives_identical_reports() {
    let cfg = ExperimentConfig::tiny();
    let dir = tempfile::tempdir().unwrap();
    let (ds, roster) = prepare(&cfg).unwrap();
    let out = train_entry::<f64>(&cfg, &ds, &roster[0], Some(dir.path()), None).unwrap();
    let ckpt = out.checkpoints.last().unwrap();
    let mut a = evaluate_checkpoint::<f64>(&cfg, ckpt, None).unwrap();
    let mut b = evaluate_checkpoint::<f64>(&cfg, ckpt, None).unwrap();
    a.wall_clock_seconds = 0.0;
    b.wall_clock_seconds = 0.0;
    assert_eq!(a, b);
}

#[test]
fn full_row_keeps_up_with_single_branches_on_mixed_data() {
    let mut cfg = toy(DatasetSpec::mixed());
    cfg.train.iterations = RUN_ITERATIONS;
    let rows = run_ablation::<f32>(&cfg, None).unwrap();
    let auroc = |r: usize| rows[r].report.mean.image.auroc;
    let full = auroc(5);
    for r in 0..3 {
        assert!(
            full >= auroc(r) - 0.02,
            "full row {full:.4} vs single-branch row {} at {:.4}",
            r + 1,
            auroc(r)
        );
    }
}
