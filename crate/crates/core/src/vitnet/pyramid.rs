use crate::diffcore::{Graph, Tensor, Var};
use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;

/// Per-block outputs of one forward pass.
///
/// `patch_features[j]` is the `C' x H' x W'` patch map after block `j + 1`;
/// `class_tokens[j]` the class-token row after block `j + 1`, except the last
/// entry, which has also passed the final normalization and equals
/// `final_class_token`.
#[derive(Clone)]
pub struct FeaturePyramid<'g, T> {
    pub patch_features: Vec<Var<'g, T>>,
    pub class_tokens: Vec<Var<'g, T>>,
    pub final_class_token: Option<Var<'g, T>>,
}

/// Detached copy of a pyramid's values.
#[derive(Clone, Debug, PartialEq)]
pub struct PyramidValues<T> {
    pub patch_features: Vec<Tensor<T>>,
    pub class_tokens: Vec<Tensor<T>>,
    pub has_final_token: bool,
}

/// Which network a pyramid came from; selects the layer grouping.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Teacher,
    Decoder,
}

/// First and last teacher layer (1-based) read by the grouped comparison.
pub const TEACHER_MID_LAYERS: (usize, usize) = (3, 10);
/// Number of groups compared between teacher and decoder.
pub const NUM_GROUPS: usize = 2;
const GROUP_WIDTH: usize = 4;

impl<'g, T: Scalar> FeaturePyramid<'g, T> {
    pub fn depth(&self) -> usize {
        self.patch_features.len()
    }

    pub fn detach(&self) -> PyramidValues<T> {
        PyramidValues {
            patch_features: self
                .patch_features
                .iter()
                .map(|v| (*v.value()).clone())
                .collect(),
            class_tokens: self
                .class_tokens
                .iter()
                .map(|v| (*v.value()).clone())
                .collect(),
            has_final_token: self.final_class_token.is_some(),
        }
    }
}

impl<T: Scalar> PyramidValues<T> {
    /// Re-enters the values on `g` as constants.
    pub fn attach<'g>(&self, g: &'g Graph<T>) -> FeaturePyramid<'g, T> {
        self.attach_as(g, false)
    }

    /// Re-enters the values on `g`, optionally as trainable leaves.
    pub fn attach_as<'g>(&self, g: &'g Graph<T>, trainable: bool) -> FeaturePyramid<'g, T> {
        let patch_features: Vec<_> = self
            .patch_features
            .iter()
            .map(|t| g.leaf(t.clone(), trainable))
            .collect();
        let class_tokens: Vec<_> = self
            .class_tokens
            .iter()
            .map(|t| g.leaf(t.clone(), trainable))
            .collect();
        let final_class_token = if self.has_final_token {
            class_tokens.last().copied()
        } else {
            None
        };
        FeaturePyramid {
            patch_features,
            class_tokens,
            final_class_token,
        }
    }
}

fn mean_of<'g, T: Scalar>(maps: &[Var<'g, T>]) -> Result<Var<'g, T>> {
    let (first, rest) = maps
        .split_first()
        .ok_or_else(|| Error::Shape("mean of no maps".into()))?;
    let mut acc = *first;
    for m in rest {
        if m.shape() != first.shape() {
            return shape_err(format!("map shapes {:?} vs {:?}", m.shape(), first.shape()));
        }
        acc = acc.add(*m)?;
    }
    Ok(acc.scale(T::one() / T::from_usize(maps.len()).unwrap()))
}

/// 1-based inclusive layer range averaged into group `i` (1-based).
///
/// Teacher group `i` spans layers `4i-1 ..= 4i+2` ({3..6}, {7..10});
/// decoder group `i` spans `4i-3 ..= 4i` ({1..4}, {5..8}).
pub fn group_range(role: Role, i: usize) -> Result<(usize, usize)> {
    if !(1..=NUM_GROUPS).contains(&i) {
        return Err(Error::Shape(format!(
            "group index {i} outside 1..={NUM_GROUPS}"
        )));
    }
    let start = match role {
        Role::Teacher => GROUP_WIDTH * i - 1,
        Role::Decoder => GROUP_WIDTH * i - 3,
    };
    Ok((start, start + GROUP_WIDTH - 1))
}

/// Mean of the patch maps in group `i` of the pyramid.
pub fn group_features<'g, T: Scalar>(
    p: &FeaturePyramid<'g, T>,
    role: Role,
    i: usize,
) -> Result<Var<'g, T>> {
    let (lo, hi) = group_range(role, i)?;
    if hi > p.depth() {
        return shape_err(format!(
            "group {i} needs layer {hi}, pyramid depth is {}",
            p.depth()
        ));
    }
    mean_of(&p.patch_features[lo - 1..hi])
}

/// Mean of teacher layers 3 through 10: the decoder-side input.
pub fn fuse_teacher_mid<'g, T: Scalar>(p: &FeaturePyramid<'g, T>) -> Result<Var<'g, T>> {
    let (lo, hi) = TEACHER_MID_LAYERS;
    if p.depth() < hi {
        return shape_err(format!("teacher depth {} < {hi}", p.depth()));
    }
    mean_of(&p.patch_features[lo - 1..hi])
}
