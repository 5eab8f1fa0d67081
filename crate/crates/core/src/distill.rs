//! Branch losses, Noisy-OR fusion and anomaly scoring.
//!
//! Sign conventions: a sample label `y = 1` means *normal*. `P` is the
//! probability that a sample is normal; the anomaly score is `AC = 1 - P`.
//! Branch normality probabilities are `P_b = 1 / (1 + exp(L_b))`, so a zero
//! loss maps to 0.5 and the fused `P` never exceeds 0.75.

use serde::{Deserialize, Serialize};

use crate::diffcore::kernels::sigmoid;
use crate::diffcore::{Tensor, Var, COSINE_EPS};
use crate::error::{shape_err, Error, Result};
use crate::scalar::{lit, Scalar};
use crate::vitnet::{group_features, FeaturePyramid, Role, NUM_GROUPS};

/// Probabilities are clamped into `[PROB_CLAMP, 1 - PROB_CLAMP]` inside
/// log terms only.
pub const PROB_CLAMP: f64 = 1e-7;

/// Image-level label in the training convention (normal is the positive
/// outcome of the Noisy-OR model).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    Anomalous,
    Normal,
}

impl Label {
    /// `y` of the cross-entropy objective: 1 for normal, 0 for anomalous.
    pub fn y(self) -> u8 {
        match self {
            Label::Normal => 1,
            Label::Anomalous => 0,
        }
    }

    pub fn from_y(y: u8) -> Result<Self> {
        match y {
            1 => Ok(Label::Normal),
            0 => Ok(Label::Anomalous),
            _ => Err(Error::Data(format!("label must be 0 or 1, got {y}"))),
        }
    }

    /// The one place where labels flip to the metric convention
    /// (anomalies are the positive class).
    pub fn is_anomalous(self) -> bool {
        self == Label::Anomalous
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    NoisyOr,
    PlainSum,
}

/// Which encoder-branch loss enters the inference score.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreVariant {
    /// Final class token only.
    LastToken,
    /// Mean over the first `m - 1` class tokens.
    MeanPrefix,
    /// Mean over all `m` class tokens (the training loss).
    AllLayers,
}

/// Per-sample branch losses.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BranchLosses {
    pub l_se: f64,
    pub l_sd: f64,
    pub l_prime: f64,
    pub l_doubleprime: f64,
}

impl BranchLosses {
    pub fn encoder_score(&self, variant: ScoreVariant) -> f64 {
        match variant {
            ScoreVariant::LastToken => self.l_prime,
            ScoreVariant::MeanPrefix => self.l_doubleprime,
            ScoreVariant::AllLayers => self.l_se,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FusionResult<T> {
    /// Probability the sample is normal.
    pub p: T,
    /// Anomaly score `1 - p`, computed directly as `sigma(L_SE) sigma(L_SD)`.
    pub ac: T,
    pub p_se: T,
    pub p_sd: T,
}

/// Squared Euclidean distance between two token vectors.
fn sq_dist<'g, T: Scalar>(a: Var<'g, T>, b: Var<'g, T>) -> Result<Var<'g, T>> {
    if a.shape() != b.shape() {
        return shape_err(format!("token shapes {:?} vs {:?}", a.shape(), b.shape()));
    }
    Ok(a.sub(b)?.square().sum_all())
}

fn mean_vars<'g, T: Scalar>(terms: &[Var<'g, T>]) -> Result<Var<'g, T>> {
    let (first, rest) = terms
        .split_first()
        .ok_or_else(|| Error::Shape("mean of nothing".into()))?;
    let mut acc = *first;
    for t in rest {
        acc = acc.add(*t)?;
    }
    Ok(acc.scale(T::one() / T::from_usize(terms.len()).unwrap()))
}

/// Decoder-branch loss: the mean over the two layer groups of
/// `1 - cos(vec(F_T^i), vec(F_SD^i))`, with vec the channel-major
/// flattening of a `C' x H' x W'` map.
pub fn decoder_loss<'g, T: Scalar>(
    teacher: &FeaturePyramid<'g, T>,
    decoder: &FeaturePyramid<'g, T>,
) -> Result<Var<'g, T>> {
    let mut terms = Vec::with_capacity(NUM_GROUPS);
    for i in 1..=NUM_GROUPS {
        let ft = group_features(teacher, Role::Teacher, i)?;
        let fd = group_features(decoder, Role::Decoder, i)?;
        if ft.shape() != fd.shape() {
            return shape_err(format!("group {i}: {:?} vs {:?}", ft.shape(), fd.shape()));
        }
        terms.push(
            ft.cosine_similarity(fd, lit(COSINE_EPS))?
                .neg()
                .add_scalar(T::one()),
        );
    }
    mean_vars(&terms)
}

fn check_tokens<T: Scalar>(
    teacher: &FeaturePyramid<'_, T>,
    encoder: &FeaturePyramid<'_, T>,
) -> Result<usize> {
    let m = teacher.class_tokens.len();
    if m == 0 || m != encoder.class_tokens.len() {
        return shape_err(format!(
            "class token counts differ or are empty: {m} vs {}",
            encoder.class_tokens.len()
        ));
    }
    Ok(m)
}

/// Encoder-branch loss: mean over all `m` class tokens of the squared
/// distance (summed over channels).
pub fn encoder_loss<'g, T: Scalar>(
    teacher: &FeaturePyramid<'g, T>,
    encoder: &FeaturePyramid<'g, T>,
) -> Result<Var<'g, T>> {
    let m = check_tokens(teacher, encoder)?;
    let terms = (0..m)
        .map(|j| sq_dist(teacher.class_tokens[j], encoder.class_tokens[j]))
        .collect::<Result<Vec<_>>>()?;
    mean_vars(&terms)
}

/// `L'`: squared distance of the final class tokens.
pub fn encoder_score_last<'g, T: Scalar>(
    teacher: &FeaturePyramid<'g, T>,
    encoder: &FeaturePyramid<'g, T>,
) -> Result<Var<'g, T>> {
    match (teacher.final_class_token, encoder.final_class_token) {
        (Some(t), Some(e)) => sq_dist(t, e),
        _ => Err(Error::Shape("final class token missing".into())),
    }
}

/// `L''`: mean squared token distance over the first `m - 1` layers.
pub fn encoder_score_mean_prefix<'g, T: Scalar>(
    teacher: &FeaturePyramid<'g, T>,
    encoder: &FeaturePyramid<'g, T>,
) -> Result<Var<'g, T>> {
    let m = check_tokens(teacher, encoder)?;
    if m < 2 {
        return shape_err("mean-prefix score needs at least two class tokens");
    }
    let terms = (0..m - 1)
        .map(|j| sq_dist(teacher.class_tokens[j], encoder.class_tokens[j]))
        .collect::<Result<Vec<_>>>()?;
    mean_vars(&terms)
}

/// All four branch losses of one sample, as plain numbers.
pub fn branch_losses<T: Scalar>(
    teacher: &FeaturePyramid<'_, T>,
    encoder: Option<&FeaturePyramid<'_, T>>,
    decoder: Option<&FeaturePyramid<'_, T>>,
) -> Result<BranchLosses> {
    let f = |v: Var<'_, T>| v.item().to_f64_lossless();
    let mut out = BranchLosses {
        l_se: 0.0,
        l_sd: 0.0,
        l_prime: 0.0,
        l_doubleprime: 0.0,
    };
    if let Some(e) = encoder {
        out.l_se = f(encoder_loss(teacher, e)?);
        out.l_prime = f(encoder_score_last(teacher, e)?);
        out.l_doubleprime = f(encoder_score_mean_prefix(teacher, e)?);
    }
    if let Some(d) = decoder {
        out.l_sd = f(decoder_loss(teacher, d)?);
    }
    Ok(out)
}

/// Noisy-OR fusion of two branch losses into the normality probability.
pub fn noisy_or_probability<T: Scalar>(l_se: T, l_sd: T) -> FusionResult<T> {
    let (s_se, s_sd) = (sigmoid(l_se), sigmoid(l_sd));
    let ac = s_se * s_sd;
    FusionResult {
        p: T::one() - ac,
        ac,
        p_se: sigmoid(-l_se),
        p_sd: sigmoid(-l_sd),
    }
}

/// Noisy-OR normality probability over any number of branch losses, on the
/// graph: `P = 1 - prod_b sigma(L_b)`.
pub fn noisy_or_graph<'g, T: Scalar>(losses: &[Var<'g, T>]) -> Result<Var<'g, T>> {
    let (first, rest) = losses
        .split_first()
        .ok_or_else(|| Error::Shape("no branch losses".into()))?;
    let mut prod = first.sigmoid();
    for l in rest {
        prod = prod.mul(l.sigmoid())?;
    }
    Ok(prod.neg().add_scalar(T::one()))
}

/// One sample's cross-entropy term `-[y log P + (1 - y) log(1 - P)]`.
pub fn bce_term<'g, T: Scalar>(p: Var<'g, T>, label: Label) -> Result<Var<'g, T>> {
    let lo: T = lit(PROB_CLAMP);
    let hi = T::one() - lo;
    let p = p.clamp(lo, hi);
    match label {
        Label::Normal => Ok(p.log()?.neg()),
        Label::Anomalous => Ok(p.neg().add_scalar(T::one()).log()?.neg()),
    }
}

/// Batch objective: mean of the per-sample cross-entropy terms of the
/// Noisy-OR probability.
pub fn total_loss<T: Scalar>(batch: &[(T, T, Label)]) -> Result<T> {
    if batch.is_empty() {
        return Err(Error::Data("total_loss of an empty batch".into()));
    }
    let lo: T = lit(PROB_CLAMP);
    let hi = T::one() - lo;
    let sum: T = batch
        .iter()
        .map(|&(l_se, l_sd, y)| {
            let p = noisy_or_probability(l_se, l_sd).p.max(lo).min(hi);
            match y {
                Label::Normal => -p.ln(),
                Label::Anomalous => -(T::one() - p).ln(),
            }
        })
        .sum();
    Ok(sum / T::from_usize(batch.len()).unwrap())
}

/// `(1 - P_SD) / P`: the factor scaling encoder gradients of a normal
/// sample's `-log P` relative to `-dP_SE/dtheta`. The decoder-side factor is
/// obtained by swapping the roles.
pub fn gate_coefficient<T: Scalar>(p_sd: T, p: T) -> Result<T> {
    if !(p > T::zero()) {
        return Err(Error::Domain(format!(
            "gate coefficient needs P > 0, got {p}"
        )));
    }
    Ok((T::one() - p_sd) / p)
}

/// Inference score from the encoder score `L'` (or a variant) and `L_SD`.
pub fn anomaly_score<T: Scalar>(l_prime: T, l_sd: T, fusion: Fusion) -> T {
    match fusion {
        Fusion::NoisyOr => sigmoid(l_prime) * sigmoid(l_sd),
        Fusion::PlainSum => l_prime + l_sd,
    }
}

/// Score from whichever branches are enabled. With one branch, Noisy-OR
/// reduces to that branch's sigmoid and the plain sum to its loss.
pub fn fused_score(enc: Option<f64>, dec: Option<f64>, fusion: Fusion) -> Result<f64> {
    match (enc, dec, fusion) {
        (Some(e), Some(d), f) => Ok(anomaly_score(e, d, f)),
        (Some(x), None, Fusion::NoisyOr) | (None, Some(x), Fusion::NoisyOr) => Ok(sigmoid(x)),
        (Some(x), None, Fusion::PlainSum) | (None, Some(x), Fusion::PlainSum) => Ok(x),
        (None, None, _) => Err(Error::Config("no branch enabled".into())),
    }
}

/// Options for [`anomaly_map`].
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MapOptions {
    /// 3x3 box smoothing after upsampling (edges replicated).
    pub smooth: bool,
}

/// Per-location discrepancy `sum_i [1 - cos(F_T^i(:, h, w), F_SD^i(:, h, w))]`,
/// bilinearly upsampled (half-pixel centers) to `target_size x target_size`.
pub fn anomaly_map<T: Scalar>(
    teacher: &FeaturePyramid<'_, T>,
    decoder: &FeaturePyramid<'_, T>,
    target_size: usize,
    options: MapOptions,
) -> Result<Tensor<T>> {
    let coarse = patch_discrepancy(teacher, decoder)?;
    let mut map = bilinear_resize(&coarse, target_size)?;
    if options.smooth {
        map = box_smooth3(&map)?;
    }
    Ok(map)
}

/// The `H' x W'` discrepancy map before upsampling.
pub fn patch_discrepancy<T: Scalar>(
    teacher: &FeaturePyramid<'_, T>,
    decoder: &FeaturePyramid<'_, T>,
) -> Result<Tensor<T>> {
    let eps: T = lit(COSINE_EPS);
    let mut out: Option<Vec<T>> = None;
    let mut hw = (0, 0);
    for i in 1..=NUM_GROUPS {
        let ft = group_features(teacher, Role::Teacher, i)?.value();
        let fd = group_features(decoder, Role::Decoder, i)?.value();
        if ft.shape() != fd.shape() || ft.ndim() != 3 {
            return shape_err(format!("group {i}: {:?} vs {:?}", ft.shape(), fd.shape()));
        }
        let (c, h, w) = (ft.shape()[0], ft.shape()[1], ft.shape()[2]);
        hw = (h, w);
        let acc = out.get_or_insert_with(|| vec![T::zero(); h * w]);
        for loc in 0..h * w {
            let (mut dot, mut na, mut nb) = (T::zero(), T::zero(), T::zero());
            for ch in 0..c {
                let (a, b) = (ft.data()[ch * h * w + loc], fd.data()[ch * h * w + loc]);
                dot += a * b;
                na += a * a;
                nb += b * b;
            }
            acc[loc] += T::one() - dot / (na.sqrt().max(eps) * nb.sqrt().max(eps));
        }
    }
    Tensor::new([hw.0, hw.1], out.expect("at least one group"))
}

/// Bilinear resize of a 2-D map with half-pixel centers
/// (`align_corners = false`), sampling coordinates clamped to the border.
pub fn bilinear_resize<T: Scalar>(src: &Tensor<T>, size: usize) -> Result<Tensor<T>> {
    let [h, w] = src.dims2()?;
    if size == 0 {
        return shape_err("target size must be positive");
    }
    let coord = |dst: usize, n_in: usize| -> (usize, usize, f64) {
        let s = ((dst as f64 + 0.5) * n_in as f64 / size as f64 - 0.5).max(0.0);
        let i0 = (s.floor() as usize).min(n_in - 1);
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, s - i0 as f64)
    };
    let d = src.data();
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        let (y0, y1, fy) = coord(y, h);
        for x in 0..size {
            let (x0, x1, fx) = coord(x, w);
            let v = |r: usize, c: usize| d[r * w + c].to_f64_lossless();
            let top = v(y0, x0) * (1.0 - fx) + v(y0, x1) * fx;
            let bot = v(y1, x0) * (1.0 - fx) + v(y1, x1) * fx;
            out.push(T::from_f64_lossy(top * (1.0 - fy) + bot * fy));
        }
    }
    Tensor::new([size, size], out)
}

fn box_smooth3<T: Scalar>(src: &Tensor<T>) -> Result<Tensor<T>> {
    let [h, w] = src.dims2()?;
    let d = src.data();
    let ninth: T = lit(1.0 / 9.0);
    Ok(Tensor::from_fn([h, w], |k| {
        let (y, x) = ((k / w) as isize, (k % w) as isize);
        let mut s = T::zero();
        for dy in -1..=1 {
            for dx in -1..=1 {
                let yy = (y + dy).clamp(0, h as isize - 1) as usize;
                let xx = (x + dx).clamp(0, w as isize - 1) as usize;
                s += d[yy * w + xx];
            }
        }
        s * ninth
    }))
}

/// Per-location population variance, across samples, of the channel-mean
/// feature value. Input maps are `C' x H' x W'`.
pub fn feature_variance_map<T: Scalar>(features: &[Tensor<T>]) -> Result<Tensor<T>> {
    if features.len() < 2 {
        return Err(Error::Data(
            "variance map needs at least two samples".into(),
        ));
    }
    let shape = features[0].shape().to_vec();
    if shape.len() != 3 || features.iter().any(|f| f.shape() != shape) {
        return shape_err("variance map inputs must share one C x H x W shape");
    }
    let (c, hw) = (shape[0], shape[1] * shape[2]);
    let means: Vec<Vec<f64>> = features
        .iter()
        .map(|f| {
            (0..hw)
                .map(|loc| {
                    (0..c)
                        .map(|ch| f.data()[ch * hw + loc].to_f64_lossless())
                        .sum::<f64>()
                        / c as f64
                })
                .collect()
        })
        .collect();
    let n = means.len() as f64;
    Ok(Tensor::from_fn([shape[1], shape[2]], |loc| {
        let mu = means.iter().map(|m| m[loc]).sum::<f64>() / n;
        T::from_f64_lossy(means.iter().map(|m| (m[loc] - mu).powi(2)).sum::<f64>() / n)
    }))
}
