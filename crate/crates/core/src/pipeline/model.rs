use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::esm::{self, EsmConfig, GateReduce};
use crate::ism::{self, ConsistencyVectors};
use crate::sam::{self, MaskSet, Modality, SamConfig, SimilarityMaps};
use crate::semantics::SemanticEmbeddings;
use crate::synth::{Sample, DOWNSAMPLE};
use crate::tensor::ops;
use crate::tensor::{Bound, ParamStore, Scalar, Tensor, Var};

/// Channels of the first backbone conv in each modality.
pub const BACKBONE_HIDDEN: usize = 16;
/// Per-layer padding of the two 3×3 stride-2 convs. Alternating the padded
/// side puts feature pixel `j` over image pixel `4j + 1`, which keeps it
/// within a pixel of where align-corners upsampling places it.
const HALVING_PADS: [ops::Padding; 2] = [[0, 1, 0, 1], [1, 0, 1, 0]];

/// Which alignment modules are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Variant {
    /// Backbone, fusion and head only.
    Baseline,
    Sam,
    SamIsm,
    /// SAM, ESM and ISM.
    Full,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Baseline,
        Variant::Sam,
        Variant::SamIsm,
        Variant::Full,
    ];

    pub fn has_sam(self) -> bool {
        self != Variant::Baseline
    }

    pub fn has_ism(self) -> bool {
        matches!(self, Variant::SamIsm | Variant::Full)
    }

    pub fn has_esm(self) -> bool {
        self == Variant::Full
    }

    /// Row label in ablation tables.
    pub fn label(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Sam => "+SAM",
            Variant::SamIsm => "+ISM",
            Variant::Full => "+ESM",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Baseline => "baseline",
            Variant::Sam => "sam",
            Variant::SamIsm => "sam_ism",
            Variant::Full => "full",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Variant::Baseline),
            "sam" => Ok(Variant::Sam),
            "sam_ism" => Ok(Variant::SamIsm),
            "full" => Ok(Variant::Full),
            _ => Err(Error::Config(format!(
                "unknown variant {s:?} (expected baseline, sam, sam_ism or full)"
            ))),
        }
    }
}

/// Training stage. Stage one bypasses ESM.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    One,
    Two,
}

impl Stage {
    pub fn number(self) -> u8 {
        match self {
            Stage::One => 1,
            Stage::Two => 2,
        }
    }

    pub fn from_number(n: u8) -> Result<Self> {
        match n {
            1 => Ok(Stage::One),
            2 => Ok(Stage::Two),
            _ => Err(Error::Usage(format!("stage must be 1 or 2, got {n}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub det: f64,
    pub sa: f64,
    pub sc: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            det: 1.0,
            sa: 1.0,
            sc: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub variant: Variant,
    pub n_categories: usize,
    pub visual_dim: usize,
    pub text_dim: usize,
    pub shared_dim: usize,
    pub gate: GateReduce,
}

impl ModelConfig {
    pub fn sam(&self) -> SamConfig {
        SamConfig {
            visual_dim: self.visual_dim,
            text_dim: self.text_dim,
            shared_dim: self.shared_dim,
        }
    }

    pub fn esm(&self) -> EsmConfig {
        EsmConfig {
            channels: self.shared_dim,
            gate: self.gate,
        }
    }

    pub fn classes(&self) -> usize {
        self.n_categories + 1
    }

    /// Fresh parameters. Each tensor is seeded by `(seed, name)`, so modules
    /// shared between variants start identical.
    pub fn init_params<T: Scalar>(&self, seed: u64) -> ParamStore<T> {
        let mut store = ParamStore::new();
        // relu layers use He-uniform weights; biases and the linear head
        // use ±1/√fan_in
        let conv = |store: &mut ParamStore<T>,
                    name: &str,
                    out: usize,
                    inp: usize,
                    k: usize,
                    relu: bool| {
            let fan_in = (inp * k * k) as f64;
            let w_bound = if relu {
                (6.0 / fan_in).sqrt()
            } else {
                1.0 / fan_in.sqrt()
            };
            store.init_uniform(&format!("{name}.w"), &[out, inp, k, k], w_bound, seed);
            store.init_uniform(&format!("{name}.b"), &[out], 1.0 / fan_in.sqrt(), seed);
        };
        for (m, channels) in [(Modality::Rgb, 3), (Modality::Ir, 1)] {
            let tag = m.as_str();
            conv(
                &mut store,
                &format!("backbone.{tag}.conv1"),
                BACKBONE_HIDDEN,
                channels,
                3,
                true,
            );
            conv(
                &mut store,
                &format!("backbone.{tag}.conv2"),
                self.visual_dim,
                BACKBONE_HIDDEN,
                3,
                true,
            );
        }
        let sam = self.sam();
        sam.init_visual(&mut store, seed);
        if self.variant.has_sam() {
            sam.init_text(&mut store, seed);
        }
        if self.variant.has_esm() {
            self.esm().init(&mut store);
        }
        conv(
            &mut store,
            "fusion",
            self.shared_dim,
            2 * self.shared_dim,
            1,
            true,
        );
        conv(
            &mut store,
            "head",
            self.classes(),
            self.shared_dim,
            1,
            false,
        );
        store
    }
}

/// A sample's tensors at the working precision.
#[derive(Clone, Debug)]
pub struct SampleInputs<T> {
    pub rgb: Tensor<T>,
    pub ir: Tensor<T>,
    pub masks_rgb: MaskSet<T>,
    pub masks_ir: MaskSet<T>,
    /// IR-frame per-pixel class labels, 0 = background.
    pub labels: Vec<usize>,
}

impl<T: Scalar> SampleInputs<T> {
    pub fn new(sample: &Sample) -> Result<Self> {
        Ok(Self {
            rgb: sample.rgb.cast(),
            ir: sample.ir.cast(),
            masks_rgb: MaskSet::new(sample.masks_rgb.tensor().cast())?,
            masks_ir: MaskSet::new(sample.masks_ir.tensor().cast())?,
            labels: sample.masks_ir.labels(),
        })
    }

    pub fn image_size(&self) -> usize {
        self.ir.shape()[1]
    }
}

#[derive(Clone, Debug)]
pub struct ForwardOutput<'t, T> {
    pub l_det: Var<'t, T>,
    pub l_sa: Option<Var<'t, T>>,
    pub l_sc: Option<Var<'t, T>>,
    /// Weighted sum of the present components.
    pub total: Var<'t, T>,
    /// Class logits at image resolution, `[n + 1, H, W]`.
    pub logits: Var<'t, T>,
    pub maps_rgb: Option<SimilarityMaps<'t, T>>,
    pub maps_ir: Option<SimilarityMaps<'t, T>>,
    pub offsets: Option<Var<'t, T>>,
    pub consistency: Option<ConsistencyVectors<'t, T>>,
}

/// Fixed pixel normalization applied before both backbones.
pub const PIXEL_MEAN: f64 = 0.5;
pub const PIXEL_STD: f64 = 0.25;

fn normalize<T: Scalar>(image: &Tensor<T>) -> Tensor<T> {
    let (m, s) = (T::of(PIXEL_MEAN), T::of(1.0 / PIXEL_STD));
    image.map(|v| (v - m) * s)
}

fn backbone<'t, T: Scalar>(
    params: &Bound<'t, T>,
    tag: &str,
    image: Var<'t, T>,
) -> Result<Var<'t, T>> {
    let mut x = image;
    for (layer, pad) in ["conv1", "conv2"].into_iter().zip(HALVING_PADS) {
        let w = params.get(&format!("backbone.{tag}.{layer}.w"));
        let b = params.get(&format!("backbone.{tag}.{layer}.b"));
        x = ops::relu(ops::conv2d_padded(x, w, Some(b), 2, pad)?);
    }
    Ok(x)
}

/// Backbone → projections → (SAM) → (ESM) → (ISM) → fusion → head, with
/// all active losses.
pub fn forward<'t, T: Scalar>(
    cfg: &ModelConfig,
    params: &Bound<'t, T>,
    embeddings: &Tensor<T>,
    input: &SampleInputs<T>,
    stage: Stage,
    weights: LossWeights,
) -> Result<ForwardOutput<'t, T>> {
    let size = input.image_size();
    if size % DOWNSAMPLE != 0 || input.rgb.shape()[1..] != input.ir.shape()[1..] {
        return Err(Error::Config(format!(
            "image size {size} is incompatible with the ×{DOWNSAMPLE} backbone"
        )));
    }
    if input.masks_ir.categories() != cfg.n_categories {
        return Err(Error::Validation(format!(
            "sample has {} categories, model expects {}",
            input.masks_ir.categories(),
            cfg.n_categories
        )));
    }
    let tape = params.tape();
    let sam_cfg = cfg.sam();
    let f_rgb = backbone(
        params,
        Modality::Rgb.as_str(),
        tape.constant(normalize(&input.rgb)),
    )?;
    let f_ir = backbone(
        params,
        Modality::Ir.as_str(),
        tape.constant(normalize(&input.ir)),
    )?;
    let rgb_bar = sam_cfg.project_visual(params, Modality::Rgb, f_rgb)?;
    let ir_bar = sam_cfg.project_visual(params, Modality::Ir, f_ir)?;

    let (mut maps_rgb, mut maps_ir, mut l_sa) = (None, None, None);
    if cfg.variant.has_sam() {
        let text = sam_cfg.project_text(params, tape.constant(embeddings.clone()))?;
        let mr = sam::similarity_maps(rgb_bar, text, size, size)?;
        let mi = sam::similarity_maps(ir_bar, text, size, size)?;
        l_sa = Some(sam::sa_loss(&mr, &mi, &input.masks_rgb, &input.masks_ir)?);
        maps_rgb = Some(mr);
        maps_ir = Some(mi);
    }

    let mut rgb_stream = rgb_bar;
    let mut offsets = None;
    if let (true, Stage::Two, Some(mr), Some(mi)) =
        (cfg.variant.has_esm(), stage, &maps_rgb, &maps_ir)
    {
        let out = esm::esm_forward(
            &cfg.esm(),
            params,
            rgb_bar,
            ir_bar,
            mr.scores,
            mi.scores,
            false,
        )?;
        rgb_stream = out.aligned_rgb;
        offsets = out.offsets;
    }

    let (mut l_sc, mut consistency) = (None, None);
    if cfg.variant.has_ism() {
        let out = ism::ism_forward(ir_bar, rgb_stream)?;
        rgb_stream = out.aggregated_rgb;
        l_sc = Some(out.loss);
        consistency = Some(out.consistency);
    }

    let fused = ops::concat(&[rgb_stream, ir_bar], 0)?;
    let fused = ops::relu(ops::conv2d(
        fused,
        params.get("fusion.w"),
        Some(params.get("fusion.b")),
        1,
        0,
    )?);
    let coarse = ops::conv2d(
        fused,
        params.get("head.w"),
        Some(params.get("head.b")),
        1,
        0,
    )?;
    let logits = ops::upsample_bilinear(coarse, size, size)?;
    let l_det = ops::cross_entropy(logits, &input.labels)?;

    let mut total = ops::scale(l_det, T::of(weights.det));
    if let Some(l) = l_sa {
        total = ops::add(total, ops::scale(l, T::of(weights.sa)))?;
    }
    if let Some(l) = l_sc {
        total = ops::add(total, ops::scale(l, T::of(weights.sc)))?;
    }
    Ok(ForwardOutput {
        l_det,
        l_sa,
        l_sc,
        total,
        logits,
        maps_rgb,
        maps_ir,
        offsets,
        consistency,
    })
}

/// Parameters, configuration and the category embeddings they were trained
/// against.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore<f32>,
    pub embeddings: SemanticEmbeddings<f32>,
}

impl Model {
    pub fn new(
        config: ModelConfig,
        embeddings: SemanticEmbeddings<f32>,
        seed: u64,
    ) -> Result<Self> {
        if embeddings.len() != config.n_categories || embeddings.dim() != config.text_dim {
            return Err(Error::Validation(format!(
                "embeddings are {}×{}, model expects {}×{}",
                embeddings.len(),
                embeddings.dim(),
                config.n_categories,
                config.text_dim
            )));
        }
        Ok(Self {
            params: config.init_params(seed),
            config,
            embeddings,
        })
    }
}

/// Parameters updated in `stage`: everything but ESM in stage one.
pub fn trainable_in(stage: Stage) -> impl Fn(&str) -> bool {
    move |name: &str| stage == Stage::Two || !name.starts_with("esm.")
}
