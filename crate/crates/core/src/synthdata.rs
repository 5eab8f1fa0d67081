//! Procedural datasets, the folder loader, split rosters and few-shot
//! subsampling.
//!
//! Labels use the training convention: `Label::Normal` is `y = 1`.
//! Generated pixel values are multiples of 1/255, so a PNG dump is exact.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::distill::Label;
use crate::error::{Error, Result};
use crate::rng::{streams, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    /// Per-class textures; anomalies are local defects with masks.
    Structural,
    /// Per-class global prototypes; anomalies are images of other classes.
    Semantic,
    /// Structural textures with both defect anomalies on normal classes and
    /// whole images of the remaining classes.
    Mixed,
    /// Images on disk in the `<category>/{train,test,ground_truth}` layout.
    Folder,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `C x H x W`, values in `[0, 1]`.
    pub image: Tensor<f64>,
    pub label: Label,
    /// `H x W`, 1.0 on defect pixels.
    pub mask: Option<Tensor<f64>>,
    pub class_id: usize,
    pub split: Split,
}

/// Defect geometry and strength for structural anomalies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DefectParams {
    /// Side length range in pixels, inclusive.
    pub min_size: usize,
    pub max_size: usize,
    /// Absolute intensity change range; the sign is drawn per defect.
    pub min_delta: f64,
    pub max_delta: f64,
    pub style: DefectStyle,
}

/// How a defect perturbs the pixels under its footprint.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefectStyle {
    /// Uniform intensity shift by `delta`.
    Intensity,
    /// Pixel checkerboard of amplitude `delta`; leaves the local mean intact.
    Texture,
}

impl Default for DefectParams {
    fn default() -> Self {
        DefectParams {
            min_size: 6,
            max_size: 10,
            min_delta: 0.5,
            max_delta: 0.8,
            style: DefectStyle::Intensity,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub num_classes: usize,
    /// Empty means every class is normal.
    pub normal_class_ids: Vec<usize>,
    pub train_per_class: usize,
    pub test_normal_per_class: usize,
    pub test_anomalous_per_class: usize,
    pub image_size: usize,
    pub channels: usize,
    /// Pixel noise amplitude (uniform half-width for textures, standard
    /// deviation for prototypes).
    pub noise: f64,
    /// Per-sample phase shift half-width in radians.
    pub phase_jitter: f64,
    /// Cells per side of a per-sample random mosaic of the two texture
    /// gratings; 0 overlays both everywhere.
    pub mosaic: usize,
    pub defect: DefectParams,
    pub seed: u64,
    /// Dataset root for `kind = folder`.
    pub root: Option<PathBuf>,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            kind: DatasetKind::Structural,
            num_classes: 4,
            normal_class_ids: Vec::new(),
            train_per_class: 200,
            test_normal_per_class: 50,
            test_anomalous_per_class: 50,
            image_size: 32,
            channels: 3,
            noise: 0.03,
            phase_jitter: 0.3,
            mosaic: 8,
            defect: DefectParams::default(),
            seed: 0,
            root: None,
        }
    }
}

impl DatasetSpec {
    pub fn structural() -> Self {
        Self::default()
    }

    pub fn semantic() -> Self {
        DatasetSpec {
            kind: DatasetKind::Semantic,
            normal_class_ids: vec![0, 2],
            ..Self::default()
        }
    }

    pub fn mixed() -> Self {
        DatasetSpec {
            kind: DatasetKind::Mixed,
            normal_class_ids: vec![0, 2],
            ..Self::default()
        }
    }

    /// Normal class ids with the empty-means-all rule applied.
    pub fn normal_ids(&self) -> Vec<usize> {
        if self.normal_class_ids.is_empty() {
            (0..self.num_classes).collect()
        } else {
            self.normal_class_ids.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.kind == DatasetKind::Folder {
            return match self.root {
                Some(_) => Ok(()),
                None => bad("folder datasets need a root".into()),
            };
        }
        if self.num_classes == 0 {
            return bad("num_classes must be positive".into());
        }
        if let Some(&c) = self
            .normal_class_ids
            .iter()
            .find(|&&c| c >= self.num_classes)
        {
            return bad(format!(
                "normal class {c} out of range 0..{}",
                self.num_classes
            ));
        }
        if self.train_per_class == 0 {
            return bad("train_per_class must be at least 1".into());
        }
        if self.image_size == 0 || self.channels == 0 {
            return bad("image geometry must be nonzero".into());
        }
        if self.mosaic > self.image_size {
            return bad(format!(
                "mosaic of {} cells per side exceeds a {} pixel image",
                self.mosaic, self.image_size
            ));
        }
        if !(self.noise >= 0.0) || !(self.phase_jitter >= 0.0) {
            return bad("noise and phase_jitter must be nonnegative".into());
        }
        let d = &self.defect;
        if self.kind != DatasetKind::Semantic {
            if d.min_size == 0 {
                return Err(Error::Data("defect area must be positive".into()));
            }
            if d.min_size > d.max_size || d.max_size > self.image_size {
                return Err(Error::Data(format!(
                    "defect size range {}..={} does not fit a {} pixel image",
                    d.min_size, d.max_size, self.image_size
                )));
            }
            if !(d.min_delta > 0.0 && d.min_delta <= d.max_delta) {
                return bad("defect delta range must be positive and ordered".into());
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub kind: DatasetKind,
    pub num_classes: usize,
    pub channels: usize,
    pub image_size: usize,
    pub samples: Vec<Sample>,
    /// Class names for folder datasets; empty otherwise.
    pub class_names: Vec<String>,
    pub warnings: Vec<String>,
}

impl LabeledDataset {
    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.samples.len())
            .filter(|&i| self.samples[i].split == split)
            .collect()
    }

    /// Classes with at least one training sample.
    pub fn train_classes(&self) -> BTreeSet<usize> {
        self.samples
            .iter()
            .filter(|s| s.split == Split::Train)
            .map(|s| s.class_id)
            .collect()
    }
}

/// Builds the dataset described by `spec`.
pub fn generate(spec: &DatasetSpec) -> Result<LabeledDataset> {
    match spec.kind {
        DatasetKind::Structural | DatasetKind::Mixed => gen_structural(spec),
        DatasetKind::Semantic => gen_semantic(spec),
        DatasetKind::Folder => {
            let root = spec
                .root
                .as_ref()
                .ok_or_else(|| Error::Config("folder datasets need a root".into()))?;
            load_folder(root, Some(spec.image_size))
        }
    }
}

// Sample streams: one block of 2^24 per class; slot 0 holds class parameters.
const TEST_NORMAL_SLOT: u64 = 1 << 22;
const TEST_ANOMALY_SLOT: u64 = 2 << 22;
const TEST_OTHER_SLOT: u64 = 3 << 22;

fn stream(class: usize, slot: u64) -> u64 {
    streams::DATA_BASE + ((class as u64) << 24) + slot
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

#[derive(Clone, Debug)]
struct Grating {
    /// Integer wave vector in cycles per image.
    k: (f64, f64),
    amp: f64,
    phase: f64,
    /// Image quadrant (0..4, row-major) the grating is confined to.
    quadrant: Option<usize>,
    /// Mosaic tile kind the grating is confined to.
    tile: Option<bool>,
}

#[derive(Clone, Debug)]
struct ClassPattern {
    base: Vec<f64>,
    channel_phase: Vec<f64>,
    gratings: Vec<Grating>,
    /// Mosaic cells per side; each sample assigns a tile kind per cell.
    mosaic: usize,
}

impl ClassPattern {
    fn render(
        &self,
        size: usize,
        shift: &[f64],
        tiles: &[bool],
        noise: &mut dyn FnMut() -> f64,
    ) -> Tensor<f64> {
        let c = self.base.len();
        let mut out = Vec::with_capacity(c * size * size);
        for ch in 0..c {
            for y in 0..size {
                for x in 0..size {
                    let (u, v) = (x as f64 / size as f64, y as f64 / size as f64);
                    let mut val = self.base[ch];
                    let quadrant = 2 * usize::from(2 * y >= size) + usize::from(2 * x >= size);
                    for (g, s) in self.gratings.iter().zip(shift) {
                        if g.quadrant.is_some_and(|q| q != quadrant) {
                            continue;
                        }
                        if let Some(t) = g.tile {
                            let cell =
                                (y * self.mosaic / size) * self.mosaic + x * self.mosaic / size;
                            if tiles[cell] != t {
                                continue;
                            }
                        }
                        let arg = 2.0 * PI * (g.k.0 * u + g.k.1 * v)
                            + g.phase
                            + s
                            + self.channel_phase[ch];
                        val += g.amp * arg.sin();
                    }
                    out.push(quantize(val + noise()));
                }
            }
        }
        Tensor::new([c, size, size], out).expect("shape")
    }
}

fn texture_pattern(spec: &DatasetSpec, class: usize) -> ClassPattern {
    let mut rng = Rng::new(spec.seed, stream(class, 0));
    let wave = |rng: &mut Rng| loop {
        let a = rng.below(9) as f64 - 4.0;
        let b = rng.below(9) as f64 - 4.0;
        if a != 0.0 || b != 0.0 {
            return (a, b);
        }
    };
    let gratings = vec![
        Grating {
            k: wave(&mut rng),
            amp: 0.22,
            phase: rng.uniform_in(0.0, 2.0 * PI),
            quadrant: None,
            tile: (spec.mosaic > 0).then_some(false),
        },
        Grating {
            k: wave(&mut rng),
            amp: if spec.mosaic > 0 { 0.22 } else { 0.12 },
            phase: rng.uniform_in(0.0, 2.0 * PI),
            quadrant: None,
            tile: (spec.mosaic > 0).then_some(true),
        },
    ];
    ClassPattern {
        base: (0..spec.channels)
            .map(|_| rng.uniform_in(0.35, 0.65))
            .collect(),
        channel_phase: (0..spec.channels)
            .map(|_| rng.uniform_in(0.0, 0.5))
            .collect(),
        gratings,
        mosaic: spec.mosaic,
    }
}

/// Quadrant layouts (row-major) of the two orientations; `true` marks the
/// second one. Classes 0 and 2 are complementary checkerboards, 1 and 3 are
/// uniform, so with normal classes {0, 2} every quadrant has seen both
/// orientations and classes 1 and 3 differ only as a whole.
const LAYOUTS: [[bool; 4]; 8] = [
    [false, true, true, false],
    [false, false, false, false],
    [true, false, false, true],
    [true, true, true, true],
    [false, false, true, true],
    [false, true, false, true],
    [true, true, false, false],
    [true, false, true, false],
];

/// One grating per quadrant in one of two perpendicular orientations, placed
/// by the class layout. Every further block of eight classes rotates the
/// orientation pair.
fn prototype_pattern(spec: &DatasetSpec, class: usize) -> ClassPattern {
    let freq = 4.0;
    let family = class / LAYOUTS.len();
    let layout = LAYOUTS[class % LAYOUTS.len()];
    // Phases depend on quadrant and orientation only, never on the class.
    let mut rng = Rng::new(spec.seed, stream(family, 0));
    let phases: Vec<[f64; 2]> = (0..4)
        .map(|_| [rng.uniform_in(0.0, 2.0 * PI), rng.uniform_in(0.0, 2.0 * PI)])
        .collect();
    let base_theta = PI / 8.0 * family as f64;
    let gratings = (0..4)
        .map(|q| {
            let second = usize::from(layout[q]);
            let theta = base_theta + PI / 2.0 * second as f64;
            Grating {
                k: (freq * theta.cos(), freq * theta.sin()),
                amp: 0.3,
                phase: phases[q][second],
                quadrant: Some(q),
                tile: None,
            }
        })
        .collect();
    ClassPattern {
        base: (0..spec.channels).map(|_| 0.5).collect(),
        channel_phase: vec![0.0; spec.channels],
        gratings,
        mosaic: 0,
    }
}

fn render_sample(
    spec: &DatasetSpec,
    pat: &ClassPattern,
    rng: &mut Rng,
    gaussian: bool,
) -> Tensor<f64> {
    let shift: Vec<f64> = pat
        .gratings
        .iter()
        .map(|_| rng.uniform_in(-spec.phase_jitter, spec.phase_jitter))
        .collect();
    let tiles: Vec<bool> = (0..pat.mosaic * pat.mosaic)
        .map(|_| rng.below(2) == 1)
        .collect();
    let noise = spec.noise;
    let mut draw = || {
        if gaussian {
            noise * rng.normal()
        } else {
            rng.uniform_in(-noise, noise)
        }
    };
    pat.render(spec.image_size, &shift, &tiles, &mut draw)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DefectShape {
    Rectangle,
    Ellipse,
}

/// A defect footprint: top-left corner, extent and shape.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Defect {
    pub shape: DefectShape,
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
    pub delta: f64,
    pub style: DefectStyle,
}

impl Defect {
    pub fn contains(&self, px: usize, py: usize) -> bool {
        if px < self.x || py < self.y || px >= self.x + self.w || py >= self.y + self.h {
            return false;
        }
        match self.shape {
            DefectShape::Rectangle => true,
            DefectShape::Ellipse => {
                let (rx, ry) = (self.w as f64 / 2.0, self.h as f64 / 2.0);
                let dx = (px as f64 + 0.5 - self.x as f64 - rx) / rx;
                let dy = (py as f64 + 0.5 - self.y as f64 - ry) / ry;
                dx * dx + dy * dy <= 1.0
            }
        }
    }

    pub fn mask(&self, size: usize) -> Tensor<f64> {
        Tensor::from_fn([size, size], |k| {
            if self.contains(k % size, k / size) {
                1.0
            } else {
                0.0
            }
        })
    }

    /// Perturbs every channel inside the footprint according to `style`.
    pub fn apply(&self, image: &mut Tensor<f64>) {
        let [_, s, _] = <[usize; 3]>::try_from(image.shape()).expect("CHW image");
        let data = image.data_mut();
        for (k, v) in data.iter_mut().enumerate() {
            let (y, x) = ((k / s) % s, k % s);
            if self.contains(x, y) {
                let d = match self.style {
                    DefectStyle::Intensity => self.delta,
                    DefectStyle::Texture if (x + y) % 2 == 0 => self.delta,
                    DefectStyle::Texture => -self.delta,
                };
                *v = quantize(*v + d);
            }
        }
    }
}

fn draw_defect(d: &DefectParams, size: usize, rng: &mut Rng) -> Defect {
    let span = d.max_size - d.min_size + 1;
    let w = d.min_size + rng.below(span);
    let h = d.min_size + rng.below(span);
    let shape = if rng.below(2) == 0 {
        DefectShape::Rectangle
    } else {
        DefectShape::Ellipse
    };
    let x = rng.below(size - w + 1);
    let y = rng.below(size - h + 1);
    let mag = rng.uniform_in(d.min_delta, d.max_delta);
    let delta = if rng.below(2) == 0 { mag } else { -mag };
    Defect {
        shape,
        x,
        y,
        w,
        h,
        delta,
        style: d.style,
    }
}

/// Textured classes with localized defects. For `kind = mixed`, classes
/// outside the normal set also contribute whole-image anomalies.
pub fn gen_structural(spec: &DatasetSpec) -> Result<LabeledDataset> {
    if !matches!(spec.kind, DatasetKind::Structural | DatasetKind::Mixed) {
        return Err(Error::Config(format!(
            "gen_structural called with kind {:?}",
            spec.kind
        )));
    }
    spec.validate()?;
    let normal: BTreeSet<usize> = spec.normal_ids().into_iter().collect();
    let mut samples = Vec::new();
    for class in 0..spec.num_classes {
        let pat = texture_pattern(spec, class);
        let clean = |slot: u64, i: usize| {
            let mut rng = Rng::new(spec.seed, stream(class, slot + i as u64 + 1));
            (render_sample(spec, &pat, &mut rng, false), rng)
        };
        if normal.contains(&class) {
            for i in 0..spec.train_per_class {
                let image = clean(0, i).0;
                samples.push(Sample {
                    image,
                    label: Label::Normal,
                    mask: None,
                    class_id: class,
                    split: Split::Train,
                });
            }
            for i in 0..spec.test_normal_per_class {
                let image = clean(TEST_NORMAL_SLOT, i).0;
                samples.push(Sample {
                    image,
                    label: Label::Normal,
                    mask: None,
                    class_id: class,
                    split: Split::Test,
                });
            }
            for i in 0..spec.test_anomalous_per_class {
                let (mut image, mut rng) = clean(TEST_ANOMALY_SLOT, i);
                let defect = draw_defect(&spec.defect, spec.image_size, &mut rng);
                defect.apply(&mut image);
                samples.push(Sample {
                    image,
                    label: Label::Anomalous,
                    mask: Some(defect.mask(spec.image_size)),
                    class_id: class,
                    split: Split::Test,
                });
            }
        } else if spec.kind == DatasetKind::Mixed {
            for i in 0..spec.test_anomalous_per_class {
                let image = clean(TEST_OTHER_SLOT, i).0;
                samples.push(Sample {
                    image,
                    label: Label::Anomalous,
                    mask: None,
                    class_id: class,
                    split: Split::Test,
                });
            }
        }
    }
    Ok(LabeledDataset {
        kind: spec.kind,
        num_classes: spec.num_classes,
        channels: spec.channels,
        image_size: spec.image_size,
        samples,
        class_names: Vec::new(),
        warnings: Vec::new(),
    })
}

/// Oriented-grating prototypes; anomalies are whole images of classes
/// outside the normal set.
pub fn gen_semantic(spec: &DatasetSpec) -> Result<LabeledDataset> {
    if spec.kind != DatasetKind::Semantic {
        return Err(Error::Config(format!(
            "gen_semantic called with kind {:?}",
            spec.kind
        )));
    }
    spec.validate()?;
    if spec.num_classes < 2 {
        return Err(Error::Data(
            "semantic datasets need at least 2 classes".into(),
        ));
    }
    let normal: BTreeSet<usize> = spec.normal_ids().into_iter().collect();
    let mut warnings = Vec::new();
    if normal.len() == spec.num_classes {
        let w = "every class is normal: the test set has no anomalies".to_string();
        log::warn!("{w}");
        warnings.push(w);
    }
    let mut samples = Vec::new();
    for class in 0..spec.num_classes {
        let pat = prototype_pattern(spec, class);
        let draw = |slot: u64, i: usize| {
            let mut rng = Rng::new(spec.seed, stream(class, slot + i as u64 + 1));
            render_sample(spec, &pat, &mut rng, true)
        };
        if normal.contains(&class) {
            for i in 0..spec.train_per_class {
                let image = draw(0, i);
                samples.push(Sample {
                    image,
                    label: Label::Normal,
                    mask: None,
                    class_id: class,
                    split: Split::Train,
                });
            }
            for i in 0..spec.test_normal_per_class {
                let image = draw(TEST_NORMAL_SLOT, i);
                samples.push(Sample {
                    image,
                    label: Label::Normal,
                    mask: None,
                    class_id: class,
                    split: Split::Test,
                });
            }
        } else {
            for i in 0..spec.test_anomalous_per_class {
                let image = draw(TEST_OTHER_SLOT, i);
                samples.push(Sample {
                    image,
                    label: Label::Anomalous,
                    mask: None,
                    class_id: class,
                    split: Split::Test,
                });
            }
        }
    }
    Ok(LabeledDataset {
        kind: DatasetKind::Semantic,
        num_classes: spec.num_classes,
        channels: spec.channels,
        image_size: spec.image_size,
        samples,
        class_names: Vec::new(),
        warnings,
    })
}

const IMAGE_EXTS: [&str; 5] = ["png", "jpg", "jpeg", "bmp", "tif"];

fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = p
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase());
        if p.is_file() && ext.is_some_and(|e| IMAGE_EXTS.contains(&e.as_str())) {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

fn subdirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        if p.is_dir() {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

fn file_name(p: &Path) -> String {
    p.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn stem(p: &Path) -> String {
    p.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Reads an image as a `C x S x S` tensor, optionally resized to `size`.
pub fn read_image(path: &Path, channels: usize, size: Option<usize>) -> Result<Tensor<f64>> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.into(),
        source: e,
    })?;
    let img = match size {
        Some(s) if (img.width(), img.height()) != (s as u32, s as u32) => {
            img.resize_exact(s as u32, s as u32, image::imageops::FilterType::Triangle)
        }
        _ => img,
    };
    let (w, h) = (img.width() as usize, img.height() as usize);
    if w != h {
        return Err(Error::Data(format!(
            "{} is {w}x{h}; images must be square",
            path.display()
        )));
    }
    let data: Vec<f64> = match channels {
        1 => img
            .to_luma8()
            .pixels()
            .map(|p| p.0[0] as f64 / 255.0)
            .collect(),
        3 => {
            let rgb = img.to_rgb8();
            let mut planar = vec![0.0; 3 * w * h];
            for (k, p) in rgb.pixels().enumerate() {
                for ch in 0..3 {
                    planar[ch * w * h + k] = p.0[ch] as f64 / 255.0;
                }
            }
            planar
        }
        c => return Err(Error::Config(format!("unsupported channel count {c}"))),
    };
    Tensor::new([channels, h, w], data)
}

fn read_mask(path: &Path, size: Option<usize>) -> Result<Tensor<f64>> {
    let m = read_image(path, 1, size)?;
    let s = m.shape()[1];
    Ok(m.map(|v| if v > 0.5 { 1.0 } else { 0.0 })
        .reshape([s, s])
        .expect("mask shape"))
}

/// Loads `<category>/train/good`, `<category>/test/<type>` and
/// `<category>/ground_truth/<type>/<stem>_mask*`. `root` may be a single
/// category or a directory of categories. Images are read as RGB.
pub fn load_folder(root: &Path, size: Option<usize>) -> Result<LabeledDataset> {
    if !root.is_dir() {
        return Err(Error::Data(format!(
            "dataset root {} is not a directory",
            root.display()
        )));
    }
    let categories = if root.join("train").is_dir() {
        vec![root.to_path_buf()]
    } else {
        subdirs(root)?
    };
    let categories: Vec<PathBuf> = categories
        .into_iter()
        .filter(|c| c.join("train").is_dir())
        .collect();
    if categories.is_empty() {
        return Err(Error::Data(format!(
            "no <category>/train directories under {}",
            root.display()
        )));
    }
    let mut samples = Vec::new();
    let mut warnings = Vec::new();
    let mut image_size = None;
    let mut class_names = Vec::new();
    for (class, cat) in categories.iter().enumerate() {
        class_names.push(file_name(cat));
        let mut push = |image: Tensor<f64>, label, mask, split| -> Result<()> {
            let s = image.shape()[1];
            match image_size {
                None => image_size = Some(s),
                Some(prev) if prev != s => {
                    return Err(Error::Data(format!(
                        "mixed image sizes {prev} and {s}; set an image size"
                    )))
                }
                _ => {}
            }
            samples.push(Sample {
                image,
                label,
                mask,
                class_id: class,
                split,
            });
            Ok(())
        };
        for p in list_images(&cat.join("train").join("good"))? {
            push(read_image(&p, 3, size)?, Label::Normal, None, Split::Train)?;
        }
        let test = cat.join("test");
        if !test.is_dir() {
            continue;
        }
        for defect_dir in subdirs(&test)? {
            let kind = file_name(&defect_dir);
            let good = kind == "good";
            let gt = cat.join("ground_truth").join(&kind);
            let masks = if !good && gt.is_dir() {
                list_images(&gt)?
            } else {
                Vec::new()
            };
            for p in list_images(&defect_dir)? {
                let image = read_image(&p, 3, size)?;
                if good {
                    push(image, Label::Normal, None, Split::Test)?;
                    continue;
                }
                let st = stem(&p);
                let mask_path = masks.iter().find(|m| {
                    let ms = stem(m);
                    ms.strip_prefix(st.as_str())
                        .is_some_and(|rest| rest.starts_with("_mask"))
                });
                let mask = match mask_path {
                    Some(m) => Some(read_mask(m, size)?),
                    None => {
                        let w = format!("no mask for {}", p.display());
                        log::warn!("{w}");
                        warnings.push(w);
                        None
                    }
                };
                if let Some(m) = &mask {
                    if m.shape()[0] != image.shape()[1] {
                        return Err(Error::Data(format!(
                            "mask size differs from image {}",
                            p.display()
                        )));
                    }
                }
                push(image, Label::Anomalous, mask, Split::Test)?;
            }
        }
    }
    Ok(LabeledDataset {
        kind: DatasetKind::Folder,
        num_classes: categories.len(),
        channels: 3,
        image_size: image_size.unwrap_or(size.unwrap_or(0)),
        samples,
        class_names,
        warnings,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    SingleClass,
    MultiClass,
}

/// One experiment: sample indices to train on and labelled test indices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RosterEntry {
    pub name: String,
    pub train: Vec<usize>,
    pub test: Vec<(usize, Label)>,
}

impl RosterEntry {
    pub fn num_anomalous(&self) -> usize {
        self.test.iter().filter(|t| t.1.is_anomalous()).count()
    }
}

/// Builds the experiment roster.
///
/// `multi_class`: one entry trained on the normals of every class in
/// `normal_ids`; test samples are normal iff their class is in `normal_ids`
/// and they carry no defect. `single_class`: one entry per class in
/// `normal_ids`, tested on its own samples plus the test samples of classes
/// without training data (whole-image anomalies).
pub fn make_splits(
    dataset: &LabeledDataset,
    mode: SplitMode,
    normal_ids: &[usize],
) -> Result<Vec<RosterEntry>> {
    if normal_ids.is_empty() {
        return Err(Error::Config("normal_ids must not be empty".into()));
    }
    let trainable = dataset.train_classes();
    for &c in normal_ids {
        if c >= dataset.num_classes {
            return Err(Error::Config(format!("unknown class id {c}")));
        }
        if !trainable.contains(&c) {
            return Err(Error::Data(format!("class {c} has no training samples")));
        }
    }
    let normal: BTreeSet<usize> = normal_ids.iter().copied().collect();
    let test = dataset.indices(Split::Test);
    let train = dataset.indices(Split::Train);
    let entries = match mode {
        SplitMode::MultiClass => {
            let tr = train
                .iter()
                .copied()
                .filter(|&i| normal.contains(&dataset.samples[i].class_id))
                .collect();
            let te = test
                .iter()
                .map(|&i| {
                    let s = &dataset.samples[i];
                    let ok = normal.contains(&s.class_id) && s.label == Label::Normal;
                    (i, if ok { Label::Normal } else { Label::Anomalous })
                })
                .collect();
            let name = normal
                .iter()
                .map(|c| c.to_string())
                .collect::<Vec<_>>()
                .join("");
            vec![RosterEntry {
                name: format!("normal_{name}"),
                train: tr,
                test: te,
            }]
        }
        SplitMode::SingleClass => normal
            .iter()
            .map(|&c| {
                let tr = train
                    .iter()
                    .copied()
                    .filter(|&i| dataset.samples[i].class_id == c)
                    .collect();
                let te = test
                    .iter()
                    .filter_map(|&i| {
                        let s = &dataset.samples[i];
                        if s.class_id == c {
                            Some((i, s.label))
                        } else if !trainable.contains(&s.class_id) {
                            Some((i, Label::Anomalous))
                        } else {
                            None
                        }
                    })
                    .collect();
                let name = dataset
                    .class_names
                    .get(c)
                    .cloned()
                    .unwrap_or_else(|| format!("class_{c}"));
                RosterEntry {
                    name,
                    train: tr,
                    test: te,
                }
            })
            .collect(),
    };
    for e in &entries {
        let a = e.num_anomalous();
        if a == 0 || a == e.test.len() {
            return Err(Error::Data(format!(
                "roster entry {} needs both normal and anomalous test samples",
                e.name
            )));
        }
    }
    Ok(entries)
}

/// Keeps `shots` training samples per class, chosen by a seeded shuffle.
/// The output preserves input order.
pub fn few_shot_subsample(
    dataset: &LabeledDataset,
    train: &[usize],
    shots: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    if shots == 0 {
        return Err(Error::Config("shots must be positive".into()));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &i in train {
        let s = dataset
            .samples
            .get(i)
            .ok_or_else(|| Error::Data(format!("sample index {i} out of range")))?;
        if s.label != Label::Normal {
            return Err(Error::Data(format!("training sample {i} is not normal")));
        }
        by_class.entry(s.class_id).or_default().push(i);
    }
    let mut keep = BTreeSet::new();
    for (class, mut idx) in by_class {
        if shots > idx.len() {
            return Err(Error::Data(format!(
                "{shots} shots requested but class {class} has {}",
                idx.len()
            )));
        }
        let mut rng = Rng::new(seed, streams::FEW_SHOT + class as u64);
        rng.shuffle(&mut idx);
        keep.extend(idx.into_iter().take(shots));
    }
    Ok(train.iter().copied().filter(|i| keep.contains(i)).collect())
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a `C x S x S` tensor (`C` in {1, 3}) or an `S x S` map as PNG.
pub fn write_png(path: &Path, t: &Tensor<f64>) -> Result<()> {
    let err = |e| Error::Image {
        path: path.into(),
        source: e,
    };
    match t.shape() {
        [s, w] => image::GrayImage::from_fn(*w as u32, *s as u32, |x, y| {
            image::Luma([to_u8(t.data()[y as usize * w + x as usize])])
        })
        .save(path)
        .map_err(err),
        [1, s, w] => write_png(path, &t.reshape([*s, *w])?),
        [3, s, w] => {
            let plane = s * w;
            image::RgbImage::from_fn(*w as u32, *s as u32, |x, y| {
                let k = y as usize * w + x as usize;
                image::Rgb([
                    to_u8(t.data()[k]),
                    to_u8(t.data()[plane + k]),
                    to_u8(t.data()[2 * plane + k]),
                ])
            })
            .save(path)
            .map_err(err)
        }
        other => Err(Error::Shape(format!("cannot write shape {other:?} as PNG"))),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub path: String,
    pub label: u8,
    pub class_id: usize,
    pub split: Split,
    pub mask_path: String,
}

/// Dumps images and masks as PNG plus `manifest.csv` (paths relative to
/// `dir`).
pub fn write_dataset(dataset: &LabeledDataset, dir: &Path) -> Result<Vec<ManifestRow>> {
    for sub in ["images", "masks"] {
        fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
    }
    let mut rows = Vec::with_capacity(dataset.samples.len());
    for (i, s) in dataset.samples.iter().enumerate() {
        let path = format!("images/{}_{i:05}.png", s.split.as_str());
        write_png(&dir.join(&path), &s.image)?;
        let mask_path = match &s.mask {
            Some(m) => {
                let p = format!("masks/{}_{i:05}.png", s.split.as_str());
                write_png(&dir.join(&p), m)?;
                p
            }
            None => String::new(),
        };
        rows.push(ManifestRow {
            path,
            label: s.label.y(),
            class_id: s.class_id,
            split: s.split,
            mask_path,
        });
    }
    let mpath = dir.join("manifest.csv");
    let mut w = csv::Writer::from_path(&mpath).map_err(|e| Error::Serde(e.to_string()))?;
    for r in &rows {
        w.serialize(r).map_err(|e| Error::Serde(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(&mpath, e))?;
    Ok(rows)
}

/// Reads a dump written by [`write_dataset`].
pub fn read_dataset(dir: &Path, kind: DatasetKind) -> Result<LabeledDataset> {
    let mpath = dir.join("manifest.csv");
    let mut r = csv::Reader::from_path(&mpath)
        .map_err(|e| Error::Data(format!("{}: {e}", mpath.display())))?;
    let mut samples = Vec::new();
    let mut channels = 0;
    for row in r.deserialize::<ManifestRow>() {
        let row = row.map_err(|e| Error::Data(format!("{}: {e}", mpath.display())))?;
        let p = dir.join(&row.path);
        let img = image::open(&p).map_err(|e| Error::Image {
            path: p.clone(),
            source: e,
        })?;
        let c = if img.color().channel_count() >= 3 {
            3
        } else {
            1
        };
        channels = c;
        let image = read_image(&p, c, None)?;
        let mask = if row.mask_path.is_empty() {
            None
        } else {
            Some(read_mask(&dir.join(&row.mask_path), None)?)
        };
        samples.push(Sample {
            image,
            label: Label::from_y(row.label)?,
            mask,
            class_id: row.class_id,
            split: row.split,
        });
    }
    let image_size = samples.first().map_or(0, |s| s.image.shape()[1]);
    let num_classes = samples.iter().map(|s| s.class_id + 1).max().unwrap_or(0);
    Ok(LabeledDataset {
        kind,
        num_classes,
        channels,
        image_size,
        samples,
        class_names: Vec::new(),
        warnings: Vec::new(),
    })
}

#[cfg(test)]
mod tests;
