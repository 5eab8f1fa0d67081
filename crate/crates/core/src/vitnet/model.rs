use super::bottleneck::Bottleneck;
use super::config::{BottleneckConfig, ViTConfig};
use super::pyramid::{FeaturePyramid, TEACHER_MID_LAYERS};
use super::vit::VisionTransformer;
use super::{fuse_teacher_mid, group_range, ParamStore, Role, NUM_GROUPS};
use crate::diffcore::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::{streams, Rng};
use crate::scalar::Scalar;

/// Teacher, both students and the bottleneck, with their parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct DualStudentModel<T> {
    pub teacher: VisionTransformer<T>,
    pub encoder: VisionTransformer<T>,
    pub bottleneck: Bottleneck<T>,
    pub decoder: VisionTransformer<T>,
}

/// Student parameters placed on one graph as trainable leaves.
pub struct BoundStudents<'g, T> {
    pub encoder: Vec<Var<'g, T>>,
    pub bottleneck: Vec<Var<'g, T>>,
    pub decoder: Vec<Var<'g, T>>,
}

impl<T: Scalar> DualStudentModel<T> {
    pub fn new(
        teacher: ViTConfig,
        encoder: ViTConfig,
        decoder: ViTConfig,
        bottleneck: BottleneckConfig,
        bottleneck_seed: u64,
    ) -> Result<Self> {
        check_compatible(&teacher, &encoder, &decoder)?;
        let dim = teacher.embed_dim;
        Ok(DualStudentModel {
            teacher: VisionTransformer::new_encoder(teacher, streams::TEACHER_INIT)?,
            encoder: VisionTransformer::new_encoder(encoder, streams::ENCODER_INIT)?,
            bottleneck: Bottleneck::new(
                bottleneck,
                dim,
                bottleneck_seed,
                streams::BOTTLENECK_INIT,
            )?,
            decoder: VisionTransformer::new_decoder(decoder, streams::DECODER_INIT)?,
        })
    }

    pub fn bind_students<'g>(&self, g: &'g Graph<T>) -> BoundStudents<'g, T> {
        BoundStudents {
            encoder: self.encoder.params().bind(g, true),
            bottleneck: self.bottleneck.params().bind(g, true),
            decoder: self.decoder.params().bind(g, true),
        }
    }

    /// Teacher pass. Parameters enter the graph as constants, so no
    /// gradient can ever reach them.
    pub fn forward_teacher<'g>(
        &self,
        g: &'g Graph<T>,
        image: &Tensor<T>,
    ) -> Result<FeaturePyramid<'g, T>> {
        let bound = self.teacher.params().bind(g, false);
        self.teacher.forward_image(g, &bound, image)
    }

    pub fn forward_encoder_student<'g>(
        &self,
        g: &'g Graph<T>,
        bound: &BoundStudents<'g, T>,
        image: &Tensor<T>,
    ) -> Result<FeaturePyramid<'g, T>> {
        self.encoder.forward_image(g, &bound.encoder, image)
    }

    /// Bottleneck applied to the fused mid-level teacher map.
    pub fn bottleneck<'g>(
        &self,
        bound: &BoundStudents<'g, T>,
        teacher: &FeaturePyramid<'g, T>,
        training: bool,
        rng: &mut Rng,
    ) -> Result<Var<'g, T>> {
        let fused = fuse_teacher_mid(teacher)?;
        self.bottleneck
            .forward(&bound.bottleneck, fused, training, rng)
    }

    pub fn forward_decoder_student<'g>(
        &self,
        bound: &BoundStudents<'g, T>,
        bottleneck_out: Var<'g, T>,
    ) -> Result<FeaturePyramid<'g, T>> {
        self.decoder.forward_tokens(&bound.decoder, bottleneck_out)
    }

    pub fn teacher_checksum(&self) -> String {
        self.teacher.params().checksum()
    }

    /// Named stores in a fixed order: teacher, encoder, bottleneck, decoder.
    pub fn stores(&self) -> [(&'static str, &ParamStore<T>); 4] {
        [
            ("teacher.", self.teacher.params()),
            ("encoder.", self.encoder.params()),
            ("bottleneck.", self.bottleneck.params()),
            ("decoder.", self.decoder.params()),
        ]
    }

    pub fn stores_mut(&mut self) -> [(&'static str, &mut ParamStore<T>); 4] {
        [
            ("teacher.", self.teacher.params_mut()),
            ("encoder.", self.encoder.params_mut()),
            ("bottleneck.", self.bottleneck.params_mut()),
            ("decoder.", self.decoder.params_mut()),
        ]
    }
}

/// Cross-network constraints: a shared feature geometry and enough layers
/// for the grouped teacher/decoder comparison.
pub fn check_compatible(
    teacher: &ViTConfig,
    encoder: &ViTConfig,
    decoder: &ViTConfig,
) -> Result<()> {
    for c in [teacher, encoder, decoder] {
        c.validate()?;
    }
    let geometry = |c: &ViTConfig| (c.image_size, c.patch_size, c.in_channels, c.embed_dim);
    if geometry(teacher) != geometry(encoder) || geometry(teacher) != geometry(decoder) {
        return Err(Error::Config(
            "teacher and students must share image/patch size, channels and embed_dim".into(),
        ));
    }
    if teacher.depth != encoder.depth {
        return Err(Error::Config(
            "encoder student depth must equal teacher depth".into(),
        ));
    }
    let teacher_need = group_range(Role::Teacher, NUM_GROUPS)?
        .1
        .max(TEACHER_MID_LAYERS.1);
    if teacher.depth < teacher_need {
        return Err(Error::Config(format!(
            "teacher depth must be >= {teacher_need}"
        )));
    }
    let decoder_need = group_range(Role::Decoder, NUM_GROUPS)?.1;
    if decoder.depth < decoder_need {
        return Err(Error::Config(format!(
            "decoder depth must be >= {decoder_need}"
        )));
    }
    if !teacher.has_class_token || !encoder.has_class_token || decoder.has_class_token {
        return Err(Error::Config(
            "teacher and encoder carry class tokens; the decoder does not".into(),
        ));
    }
    Ok(())
}
