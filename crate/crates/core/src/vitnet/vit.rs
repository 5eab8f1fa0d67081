use super::config::ViTConfig;
use super::params::{lecun_normal, normal, ParamStore, RESIDUAL_STD};
use super::pyramid::FeaturePyramid;
use crate::diffcore::{Graph, Tensor, Var, LAYER_NORM_EPS};
use crate::error::{shape_err, Result};
use crate::rng::Rng;
use crate::scalar::{lit, Scalar};

/// How a network receives its input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InputKind {
    /// `C x H x W` image, split into patches and linearly embedded.
    Image,
    /// `C' x H' x W'` feature map consumed token-wise (decoder student).
    Tokens,
}

#[derive(Clone, Debug, PartialEq)]
struct BlockLayout {
    ln1_g: usize,
    ln1_b: usize,
    qkv_w: usize,
    qkv_b: usize,
    proj_w: usize,
    proj_b: usize,
    ln2_g: usize,
    ln2_b: usize,
    fc1_w: usize,
    fc1_b: usize,
    fc2_w: usize,
    fc2_b: usize,
}

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    patch: Option<(usize, usize)>,
    cls: Option<usize>,
    pos: Option<usize>,
    blocks: Vec<BlockLayout>,
    norm: Option<(usize, usize)>,
}

/// Pre-norm vision transformer emitting per-block features.
///
/// Parameter names follow `patch_embed.{weight,bias}`, `cls_token`,
/// `pos_embed`, `blocks.<j>.<sublayer>.{weight,bias}` and
/// `norm.{weight,bias}`, with `j` counted from 0.
#[derive(Clone, Debug, PartialEq)]
pub struct VisionTransformer<T> {
    config: ViTConfig,
    input: InputKind,
    params: ParamStore<T>,
    layout: Layout,
}

impl<T: Scalar> VisionTransformer<T> {
    /// Image-input network (teacher or encoder student). Initialization is
    /// drawn from `Rng::new(config.seed, stream)`.
    pub fn new_encoder(config: ViTConfig, stream: u64) -> Result<Self> {
        Self::build(config, InputKind::Image, stream)
    }

    /// Token-input network without class token (decoder student).
    pub fn new_decoder(config: ViTConfig, stream: u64) -> Result<Self> {
        Self::build(config, InputKind::Tokens, stream)
    }

    fn build(config: ViTConfig, input: InputKind, stream: u64) -> Result<Self> {
        config.validate()?;
        if input == InputKind::Image && !config.has_class_token {
            return Err(crate::Error::Config(
                "image-input networks need a class token".into(),
            ));
        }
        if input == InputKind::Tokens && config.has_class_token {
            return Err(crate::Error::Config(
                "token-input networks carry no class token".into(),
            ));
        }
        let mut rng = Rng::new(config.seed, stream);
        let mut p = ParamStore::new();
        let d = config.embed_dim;
        let hidden = d * config.mlp_ratio;
        let tokens = config.num_patches() + usize::from(config.has_class_token);
        let (patch, cls, pos) = match input {
            InputKind::Image => {
                let w = p.push(
                    "patch_embed.weight",
                    normal(&mut rng, &[config.patch_dim(), d], RESIDUAL_STD),
                );
                let b = p.push("patch_embed.bias", Tensor::zeros([d]));
                let cls = p.push("cls_token", normal(&mut rng, &[1, d], RESIDUAL_STD));
                let pos = p.push("pos_embed", normal(&mut rng, &[tokens, d], RESIDUAL_STD));
                (Some((w, b)), Some(cls), Some(pos))
            }
            InputKind::Tokens => (None, None, None),
        };
        let mut blocks = Vec::with_capacity(config.depth);
        for j in 0..config.depth {
            let name = |s: &str| format!("blocks.{j}.{s}");
            let ln1_g = p.push(name("norm1.weight"), Tensor::ones([d]));
            let ln1_b = p.push(name("norm1.bias"), Tensor::zeros([d]));
            let qkv_w = p.push(name("attn.qkv.weight"), lecun_normal(&mut rng, d, 3 * d));
            let qkv_b = p.push(name("attn.qkv.bias"), Tensor::zeros([3 * d]));
            let proj_w = p.push(
                name("attn.proj.weight"),
                normal(&mut rng, &[d, d], RESIDUAL_STD),
            );
            let proj_b = p.push(name("attn.proj.bias"), Tensor::zeros([d]));
            let ln2_g = p.push(name("norm2.weight"), Tensor::ones([d]));
            let ln2_b = p.push(name("norm2.bias"), Tensor::zeros([d]));
            let fc1_w = p.push(name("mlp.fc1.weight"), lecun_normal(&mut rng, d, hidden));
            let fc1_b = p.push(name("mlp.fc1.bias"), Tensor::zeros([hidden]));
            let fc2_w = p.push(
                name("mlp.fc2.weight"),
                normal(&mut rng, &[hidden, d], RESIDUAL_STD),
            );
            let fc2_b = p.push(name("mlp.fc2.bias"), Tensor::zeros([d]));
            blocks.push(BlockLayout {
                ln1_g,
                ln1_b,
                qkv_w,
                qkv_b,
                proj_w,
                proj_b,
                ln2_g,
                ln2_b,
                fc1_w,
                fc1_b,
                fc2_w,
                fc2_b,
            });
        }
        let norm = match input {
            InputKind::Image => Some((
                p.push("norm.weight", Tensor::ones([d])),
                p.push("norm.bias", Tensor::zeros([d])),
            )),
            InputKind::Tokens => None,
        };
        Ok(VisionTransformer {
            config,
            input,
            params: p,
            layout: Layout {
                patch,
                cls,
                pos,
                blocks,
                norm,
            },
        })
    }

    pub fn config(&self) -> &ViTConfig {
        &self.config
    }

    pub fn input_kind(&self) -> InputKind {
        self.input
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Splits a `C x H x W` image into `[num_patches x patch_dim]` rows.
    /// Patches are ordered row-major over the grid; each row lists channel,
    /// then patch row, then patch column.
    pub fn patchify(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let c = &self.config;
        let want = [c.in_channels, c.image_size, c.image_size];
        if image.shape() != want {
            return shape_err(format!(
                "image shape {:?}, expected {want:?}",
                image.shape()
            ));
        }
        let (ps, g, s) = (c.patch_size, c.grid(), c.image_size);
        let mut out = Vec::with_capacity(image.numel());
        for gy in 0..g {
            for gx in 0..g {
                for ch in 0..c.in_channels {
                    for py in 0..ps {
                        let row = ch * s * s + (gy * ps + py) * s + gx * ps;
                        out.extend_from_slice(&image.data()[row..row + ps]);
                    }
                }
            }
        }
        Tensor::new([c.num_patches(), c.patch_dim()], out)
    }

    /// Full forward pass of an image-input network.
    pub fn forward_image<'g>(
        &self,
        g: &'g Graph<T>,
        bound: &[Var<'g, T>],
        image: &Tensor<T>,
    ) -> Result<FeaturePyramid<'g, T>> {
        if self.input != InputKind::Image {
            return shape_err("forward_image on a token-input network");
        }
        let (pw, pb) = self.layout.patch.expect("image network");
        let patches = g.constant(self.patchify(image)?);
        let emb = patches.linear(bound[pw], bound[pb])?;
        let cls = bound[self.layout.cls.expect("class token")];
        let x = Var::concat_rows(&[cls, emb])?.add(bound[self.layout.pos.expect("pos")])?;
        self.run_blocks(bound, x)
    }

    /// Forward pass of a token-input network on a `C' x H' x W'` map.
    pub fn forward_tokens<'g>(
        &self,
        bound: &[Var<'g, T>],
        features: Var<'g, T>,
    ) -> Result<FeaturePyramid<'g, T>> {
        if self.input != InputKind::Tokens {
            return shape_err("forward_tokens on an image-input network");
        }
        let c = &self.config;
        let want = vec![c.embed_dim, c.grid(), c.grid()];
        if features.shape() != want {
            return shape_err(format!(
                "decoder input {:?}, expected {want:?}",
                features.shape()
            ));
        }
        let x = features
            .reshape(&[c.embed_dim, c.num_patches()])?
            .transpose()?;
        self.run_blocks(bound, x)
    }

    fn run_blocks<'g>(
        &self,
        bound: &[Var<'g, T>],
        mut x: Var<'g, T>,
    ) -> Result<FeaturePyramid<'g, T>> {
        let c = &self.config;
        let eps = lit::<T>(LAYER_NORM_EPS);
        let offset = usize::from(c.has_class_token);
        let n = c.num_patches();
        let mut patch_features = Vec::with_capacity(c.depth);
        let mut class_tokens = Vec::new();
        for (j, b) in self.layout.blocks.iter().enumerate() {
            let h = x.layer_norm(bound[b.ln1_g], bound[b.ln1_b], eps)?;
            let a = h
                .linear(bound[b.qkv_w], bound[b.qkv_b])?
                .attention(c.num_heads)?
                .linear(bound[b.proj_w], bound[b.proj_b])?;
            x = x.add(a)?;
            let h = x.layer_norm(bound[b.ln2_g], bound[b.ln2_b], eps)?;
            let m = h
                .linear(bound[b.fc1_w], bound[b.fc1_b])?
                .gelu()
                .linear(bound[b.fc2_w], bound[b.fc2_b])?;
            x = x.add(m)?;

            let tokens = if offset == 0 {
                x
            } else {
                x.slice_rows(offset, offset + n)?
            };
            patch_features.push(
                tokens
                    .transpose()?
                    .reshape(&[c.embed_dim, c.grid(), c.grid()])?,
            );
            if c.has_class_token {
                let cls = x.row(0)?;
                if j + 1 == c.depth {
                    let (ng, nb) = self.layout.norm.expect("final norm");
                    class_tokens.push(cls.layer_norm(bound[ng], bound[nb], eps)?);
                } else {
                    class_tokens.push(cls);
                }
            }
        }
        let final_class_token = class_tokens.last().copied();
        Ok(FeaturePyramid {
            patch_features,
            class_tokens,
            final_class_token,
        })
    }
}
