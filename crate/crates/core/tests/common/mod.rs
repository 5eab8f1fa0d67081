//! Oracles shared by the integration suites.

#![allow(dead_code)]

use std::time::{Duration, Instant};

use dualkd::diffcore::{Graph, ReduceKind, Tensor, Var};
use dualkd::harness::{sample_objective, ExperimentConfig, LossFlags};
use dualkd::metrics::{ap_term, f1, ScoreSet};
use dualkd::vitnet::{DualStudentModel, PyramidValues};
use dualkd::{Result, Rng};

pub const FD_STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
pub const ABS_FLOOR: f64 = 1e-7;

pub fn random(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.normal())
}

/// Agreement of an analytic and a central-difference derivative.
pub fn close(analytic: f64, numeric: f64) -> bool {
    let diff = (analytic - numeric).abs();
    diff <= ABS_FLOOR || diff / analytic.abs().max(numeric.abs()) <= REL_TOL
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff <= ABS_FLOOR {
        0.0
    } else {
        diff / analytic.abs().max(numeric.abs())
    }
}

type Build = Box<dyn for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Result<Var<'g, f64>>>;

/// One operation applied to random inputs.
pub struct OpCase {
    pub name: String,
    pub inputs: Vec<Tensor<f64>>,
    pub build: Build,
}

#[derive(Debug, Default)]
pub struct SuiteReport {
    pub cases: usize,
    pub coordinates: usize,
    pub worst: f64,
    pub failures: Vec<String>,
    pub elapsed: Duration,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Contracts the op output with fixed random weights so every output
/// element contributes to the scalar under test.
fn scalar_of<'g>(
    g: &'g Graph<f64>,
    out: Var<'g, f64>,
    weights: &Tensor<f64>,
) -> Result<Var<'g, f64>> {
    out.mul(g.constant(weights.clone())).map(|v| v.sum_all())
}

fn eval_case(case: &OpCase, inputs: &[Tensor<f64>], weights: &Tensor<f64>) -> f64 {
    let g = Graph::new();
    let leaves: Vec<_> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = (case.build)(&g, &leaves).expect("op on valid inputs");
    scalar_of(&g, out, weights).expect("weights match").item()
}

/// Checks every input coordinate of `case`; returns the worst relative
/// error and one message per mismatch.
pub fn check_case(case: &OpCase, rng: &mut Rng) -> (usize, f64, Vec<String>) {
    let g = Graph::new();
    let leaves: Vec<_> = case.inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = (case.build)(&g, &leaves).expect("op on valid inputs");
    let weights = random(rng, &out.shape());
    let root = scalar_of(&g, out, &weights).expect("weights match");
    let grads = g.backward(root).expect("backward");
    let (mut n, mut worst, mut bad) = (0, 0.0f64, Vec::new());
    for (k, leaf) in leaves.iter().enumerate() {
        let analytic = grads.get_or_zeros(*leaf);
        for i in 0..case.inputs[k].numel() {
            let mut plus = case.inputs.clone();
            plus[k].data_mut()[i] += FD_STEP;
            let mut minus = case.inputs.clone();
            minus[k].data_mut()[i] -= FD_STEP;
            let numeric = (eval_case(case, &plus, &weights) - eval_case(case, &minus, &weights))
                / (2.0 * FD_STEP);
            let a = analytic.data()[i];
            n += 1;
            worst = worst.max(rel_err(a, numeric));
            if !close(a, numeric) {
                bad.push(format!(
                    "{}: input {k} coord {i}: analytic {a:e} numeric {numeric:e}",
                    case.name
                ));
            }
        }
    }
    (n, worst, bad)
}

fn case(name: impl Into<String>, inputs: Vec<Tensor<f64>>, build: Build) -> OpCase {
    OpCase {
        name: name.into(),
        inputs,
        build,
    }
}

/// Values kept at least `gap` away from each of `kinks`.
fn away_from(rng: &mut Rng, shape: &[usize], kinks: &[f64], gap: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| loop {
        let v = rng.normal();
        if kinks.iter().all(|k| (v - k).abs() > gap) {
            return v;
        }
    })
}

/// One randomized case per differentiable operation.
pub fn op_cases(rng: &mut Rng) -> Vec<OpCase> {
    let r = 1 + rng.below(3);
    let c = 2 + rng.below(3);
    let m = [r, c];
    let mut out = vec![
        case(
            "add",
            vec![random(rng, &m), random(rng, &m)],
            Box::new(|_, v| v[0].add(v[1])),
        ),
        case(
            "add_broadcast",
            vec![random(rng, &m), random(rng, &[c])],
            Box::new(|_, v| v[0].add(v[1])),
        ),
        case(
            "sub",
            vec![random(rng, &m), random(rng, &m)],
            Box::new(|_, v| v[0].sub(v[1])),
        ),
        case(
            "mul",
            vec![random(rng, &m), random(rng, &m)],
            Box::new(|_, v| v[0].mul(v[1])),
        ),
        case(
            "mul_broadcast",
            vec![random(rng, &m), random(rng, &[c])],
            Box::new(|_, v| v[0].mul(v[1])),
        ),
        case(
            "square",
            vec![random(rng, &m)],
            Box::new(|_, v| Ok(v[0].square())),
        ),
        case(
            "scale",
            vec![random(rng, &m)],
            Box::new(|_, v| Ok(v[0].scale(-1.7))),
        ),
        case(
            "neg",
            vec![random(rng, &m)],
            Box::new(|_, v| Ok(v[0].neg())),
        ),
        case(
            "add_scalar",
            vec![random(rng, &m)],
            Box::new(|_, v| Ok(v[0].add_scalar(0.3))),
        ),
        case(
            "sigmoid",
            vec![random(rng, &m)],
            Box::new(|_, v| Ok(v[0].sigmoid())),
        ),
        case(
            "log",
            vec![Tensor::from_fn(m.to_vec(), |_| {
                0.2 + rng.uniform_in(0.0, 2.0)
            })],
            Box::new(|_, v| v[0].log()),
        ),
        case(
            "gelu",
            vec![random(rng, &m)],
            Box::new(|_, v| Ok(v[0].gelu())),
        ),
        case(
            "clamp",
            vec![away_from(rng, &m, &[-0.5, 0.5], 1e-3)],
            Box::new(|_, v| Ok(v[0].clamp(-0.5, 0.5))),
        ),
        case(
            "sum_all",
            vec![random(rng, &m)],
            Box::new(|_, v| Ok(v[0].sum_all())),
        ),
        case(
            "mean_all",
            vec![random(rng, &m)],
            Box::new(|_, v| Ok(v[0].mean_all())),
        ),
        case(
            "transpose",
            vec![random(rng, &m)],
            Box::new(|_, v| v[0].transpose()),
        ),
        case(
            "reshape",
            vec![random(rng, &m)],
            Box::new(move |_, v| v[0].reshape(&[r * c])),
        ),
        case(
            "row",
            vec![random(rng, &m)],
            Box::new(move |_, v| v[0].row(r - 1)),
        ),
        case(
            "slice_rows",
            vec![random(rng, &[r + 1, c])],
            Box::new(move |_, v| v[0].slice_rows(1, r + 1)),
        ),
        case(
            "concat_rows",
            vec![random(rng, &m), random(rng, &[2, c])],
            Box::new(|_, v| Var::concat_rows(&[v[0], v[1]])),
        ),
        case(
            "cosine_similarity",
            vec![random(rng, &m), random(rng, &m)],
            Box::new(|_, v| v[0].cosine_similarity(v[1], 1e-8)),
        ),
    ];
    let k = 2 + rng.below(3);
    out.push(case(
        "matmul",
        vec![random(rng, &[r, k]), random(rng, &[k, c])],
        Box::new(|_, v| v[0].matmul(v[1])),
    ));
    out.push(case(
        "linear",
        vec![
            random(rng, &[r, k]),
            random(rng, &[k, c]),
            random(rng, &[c]),
        ],
        Box::new(|_, v| v[0].linear(v[1], v[2])),
    ));
    out.push(case(
        "layer_norm",
        vec![random(rng, &m), random(rng, &[c]), random(rng, &[c])],
        Box::new(|_, v| v[0].layer_norm(v[1], v[2], 1e-5)),
    ));
    let cube = [2, 1 + rng.below(2), 3];
    let axes: Vec<usize> = match rng.below(3) {
        0 => vec![0],
        1 => vec![1, 2],
        _ => vec![0, 2],
    };
    let kind = if rng.below(2) == 0 {
        ReduceKind::Sum
    } else {
        ReduceKind::Mean
    };
    out.push(case(
        format!("reduce_{kind:?}_{axes:?}"),
        vec![random(rng, &cube)],
        Box::new(move |_, v| v[0].reduce(kind, &axes)),
    ));
    let seed = rng.below(1000) as u64;
    out.push(case(
        "dropout",
        vec![random(rng, &m)],
        Box::new(move |_, v| v[0].dropout(0.3, true, &mut Rng::new(seed, 0))),
    ));
    let heads = 1 + rng.below(2);
    let n = 2 + rng.below(2);
    out.push(case(
        format!("attention_h{heads}"),
        vec![random(rng, &[n, 3 * 2 * heads])],
        Box::new(move |_, v| v[0].attention(heads)),
    ));
    out
}

/// Finite-difference check of the full per-sample training objective on
/// random student coordinates.
pub fn check_end_to_end(rng: &mut Rng, coords: usize) -> (usize, f64, Vec<String>) {
    let cfg = ExperimentConfig::tiny();
    let mut model: DualStudentModel<f64> = dualkd::harness::build_model(&cfg).expect("tiny model");
    let image = Tensor::from_fn([3, 8, 8], |_| rng.uniform_in(0.0, 1.0));
    let teacher = teacher_values(&model, &image);
    let dropout_seed = rng.below(1 << 20) as u64;
    let objective = |model: &DualStudentModel<f64>| -> (f64, Vec<Tensor<f64>>) {
        let g = Graph::new();
        let bound = model.bind_students(&g);
        let mut drop_rng = Rng::new(dropout_seed, 0);
        let (obj, _, _) = sample_objective(
            &g,
            model,
            &bound,
            &teacher,
            &image,
            &LossFlags::default(),
            &mut drop_rng,
        )
        .unwrap();
        let grads = g.backward(obj).unwrap();
        let all = bound
            .encoder
            .iter()
            .chain(&bound.bottleneck)
            .chain(&bound.decoder);
        (obj.item(), all.map(|v| grads.get_or_zeros(*v)).collect())
    };
    let (_, analytic) = objective(&model);
    let (mut worst, mut bad) = (0.0f64, Vec::new());
    for _ in 0..coords {
        let t = rng.below(analytic.len());
        let i = rng.below(analytic[t].numel());
        let bump =
            |model: &mut DualStudentModel<f64>, d: f64| student_tensor(model, t).data_mut()[i] += d;
        bump(&mut model, FD_STEP);
        let up = objective(&model).0;
        bump(&mut model, -2.0 * FD_STEP);
        let down = objective(&model).0;
        bump(&mut model, FD_STEP);
        let numeric = (up - down) / (2.0 * FD_STEP);
        let a = analytic[t].data()[i];
        worst = worst.max(rel_err(a, numeric));
        if !close(a, numeric) {
            bad.push(format!(
                "end-to-end: tensor {t} coord {i}: analytic {a:e} numeric {numeric:e}"
            ));
        }
    }
    (coords, worst, bad)
}

/// Student tensor `t` in encoder, bottleneck, decoder order.
pub fn student_tensor(model: &mut DualStudentModel<f64>, t: usize) -> &mut Tensor<f64> {
    let ne = model.encoder.params().len();
    let nb = model.bottleneck.params().len();
    if t < ne {
        &mut model.encoder.params_mut().tensors_mut()[t]
    } else if t < ne + nb {
        &mut model.bottleneck.params_mut().tensors_mut()[t - ne]
    } else {
        &mut model.decoder.params_mut().tensors_mut()[t - ne - nb]
    }
}

pub fn teacher_values(model: &DualStudentModel<f64>, image: &Tensor<f64>) -> PyramidValues<f64> {
    let g = Graph::new();
    model
        .forward_teacher(&g, image)
        .expect("teacher forward")
        .detach()
}

/// Runs `rounds` rounds of every op case plus `e2e` end-to-end cases.
pub fn gradient_suite(seed: u64, rounds: usize, e2e: usize) -> SuiteReport {
    let start = Instant::now();
    let mut rng = Rng::new(seed, 0);
    let mut rep = SuiteReport::default();
    for _ in 0..rounds {
        for c in op_cases(&mut rng) {
            let (n, worst, bad) = check_case(&c, &mut rng);
            rep.cases += 1;
            rep.coordinates += n;
            rep.worst = rep.worst.max(worst);
            rep.failures.extend(bad);
        }
    }
    for _ in 0..e2e {
        let (n, worst, bad) = check_end_to_end(&mut rng, 8);
        rep.cases += 1;
        rep.coordinates += n;
        rep.worst = rep.worst.max(worst);
        rep.failures.extend(bad);
    }
    rep.elapsed = start.elapsed();
    rep
}

/// Random pyramid values: `depth` patch maps `c x h x h` and, when
/// `tokens`, `depth` class tokens of length `c`.
pub fn random_pyramid(
    rng: &mut Rng,
    depth: usize,
    c: usize,
    h: usize,
    tokens: bool,
) -> PyramidValues<f64> {
    PyramidValues {
        patch_features: (0..depth).map(|_| random(rng, &[c, h, h])).collect(),
        class_tokens: if tokens {
            (0..depth).map(|_| random(rng, &[c])).collect()
        } else {
            Vec::new()
        },
        has_final_token: tokens,
    }
}

fn layer_mean(maps: &[Tensor<f64>], first: usize, last: usize) -> Vec<f64> {
    let n = maps[0].numel();
    let mut out = vec![0.0; n];
    for m in &maps[first - 1..last] {
        for (o, v) in out.iter_mut().zip(m.data()) {
            *o += v;
        }
    }
    out.iter().map(|v| v / (last - first + 1) as f64).collect()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Two-group cosine loss: teacher layers 3-6 and 7-10 against decoder
/// layers 1-4 and 5-8.
pub fn oracle_decoder_loss(t: &PyramidValues<f64>, d: &PyramidValues<f64>) -> f64 {
    let g1 = 1.0
        - cosine(
            &layer_mean(&t.patch_features, 3, 6),
            &layer_mean(&d.patch_features, 1, 4),
        );
    let g2 = 1.0
        - cosine(
            &layer_mean(&t.patch_features, 7, 10),
            &layer_mean(&d.patch_features, 5, 8),
        );
    (g1 + g2) / 2.0
}

fn sq(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum()
}

pub fn oracle_encoder_loss(t: &PyramidValues<f64>, e: &PyramidValues<f64>) -> f64 {
    let m = t.class_tokens.len();
    (0..m)
        .map(|j| sq(&t.class_tokens[j], &e.class_tokens[j]))
        .sum::<f64>()
        / m as f64
}

pub fn oracle_last(t: &PyramidValues<f64>, e: &PyramidValues<f64>) -> f64 {
    sq(
        t.class_tokens.last().unwrap(),
        e.class_tokens.last().unwrap(),
    )
}

pub fn oracle_prefix(t: &PyramidValues<f64>, e: &PyramidValues<f64>) -> f64 {
    let m = t.class_tokens.len();
    (0..m - 1)
        .map(|j| sq(&t.class_tokens[j], &e.class_tokens[j]))
        .sum::<f64>()
        / (m - 1) as f64
}

/// Pairwise AUROC with ties worth one half, in exact integer arithmetic.
pub fn brute_auroc(s: &ScoreSet) -> f64 {
    let (mut twice, mut p, mut n) = (0u128, 0u128, 0u128);
    for i in 0..s.len() {
        if !s.anomalous[i] {
            n += 1;
            continue;
        }
        p += 1;
        for j in 0..s.len() {
            if !s.anomalous[j] {
                twice += match s.scores[i].partial_cmp(&s.scores[j]).unwrap() {
                    std::cmp::Ordering::Greater => 2,
                    std::cmp::Ordering::Equal => 1,
                    std::cmp::Ordering::Less => 0,
                };
            }
        }
    }
    twice as f64 / (2 * p * n) as f64
}

fn thresholds(s: &ScoreSet) -> Vec<f64> {
    let mut t = s.scores.clone();
    t.sort_by(|a, b| b.total_cmp(a));
    t.dedup();
    t
}

fn counts_at(s: &ScoreSet, t: f64) -> (usize, usize) {
    let tp = (0..s.len())
        .filter(|&i| s.anomalous[i] && s.scores[i] >= t)
        .count();
    let fp = (0..s.len())
        .filter(|&i| !s.anomalous[i] && s.scores[i] >= t)
        .count();
    (tp, fp)
}

/// Step-wise AP over every distinct threshold, counted from scratch.
pub fn brute_ap(s: &ScoreSet) -> f64 {
    let pos = s.positives();
    let (mut prev, mut ap) = (0, 0.0);
    for t in thresholds(s) {
        let (tp, fp) = counts_at(s, t);
        ap += ap_term(tp - prev, pos, tp, fp);
        prev = tp;
    }
    ap
}

pub fn brute_f1(s: &ScoreSet) -> f64 {
    let pos = s.positives();
    thresholds(s)
        .into_iter()
        .map(|t| {
            let (tp, fp) = counts_at(s, t);
            f1(tp, fp, pos - tp)
        })
        .fold(0.0, f64::max)
}

/// Random scores on a small grid (so ties are common) with both labels.
pub fn random_score_set(rng: &mut Rng) -> ScoreSet {
    loop {
        let n = 2 + rng.below(49);
        let levels = 1 + rng.below(12);
        let scores = (0..n)
            .map(|_| rng.below(levels) as f64 / levels as f64)
            .collect();
        let anomalous: Vec<bool> = (0..n).map(|_| rng.below(2) == 1).collect();
        if anomalous.iter().any(|&a| a) && anomalous.iter().any(|&a| !a) {
            return ScoreSet::new(scores, anomalous).unwrap();
        }
    }
}
