//! Semantic alignment: visual and text features are projected into a shared
//! space, compared per category, and the resulting similarity maps are
//! supervised with per-modality object masks.

use crate::error::{Error, Result};
use crate::tensor::ops;
use crate::tensor::{Bound, ParamStore, Scalar, Tensor, Var};

pub const DEFAULT_SHARED_DIM: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    Rgb,
    Ir,
}

impl Modality {
    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Rgb => "rgb",
            Modality::Ir => "ir",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SamConfig {
    pub visual_dim: usize,
    pub text_dim: usize,
    pub shared_dim: usize,
}

/// Names of the three independent projections `P_rgb`, `P_ir` and `P_text`.
pub struct ProjectionSet;

impl ProjectionSet {
    pub fn weight(m: Modality) -> &'static str {
        match m {
            Modality::Rgb => "sam.proj_rgb.w",
            Modality::Ir => "sam.proj_ir.w",
        }
    }

    pub fn bias(m: Modality) -> &'static str {
        match m {
            Modality::Rgb => "sam.proj_rgb.b",
            Modality::Ir => "sam.proj_ir.b",
        }
    }

    pub const TEXT_WEIGHT: &'static str = "sam.proj_text.w";
    pub const TEXT_BIAS: &'static str = "sam.proj_text.b";
}

impl SamConfig {
    /// Visual projections for both modalities; weights and biases uniform in
    /// `±1/√D_in`.
    pub fn init_visual<T: Scalar>(&self, store: &mut ParamStore<T>, seed: u64) {
        let bound = 1.0 / (self.visual_dim as f64).sqrt();
        for m in [Modality::Rgb, Modality::Ir] {
            store.init_uniform(
                ProjectionSet::weight(m),
                &[self.visual_dim, self.shared_dim],
                bound,
                seed,
            );
            store.init_uniform(ProjectionSet::bias(m), &[self.shared_dim], bound, seed);
        }
    }

    pub fn init_text<T: Scalar>(&self, store: &mut ParamStore<T>, seed: u64) {
        let bound = 1.0 / (self.text_dim as f64).sqrt();
        store.init_uniform(
            ProjectionSet::TEXT_WEIGHT,
            &[self.text_dim, self.shared_dim],
            bound,
            seed,
        );
        store.init_uniform(ProjectionSet::TEXT_BIAS, &[self.shared_dim], bound, seed);
    }

    /// Identity weights and zero biases; needs square projections.
    pub fn init_identity<T: Scalar>(&self, store: &mut ParamStore<T>) -> Result<()> {
        if self.visual_dim != self.shared_dim || self.text_dim != self.shared_dim {
            return Err(Error::Config(
                "identity projections need visual_dim == text_dim == shared_dim".into(),
            ));
        }
        let d = self.shared_dim;
        let eye = Tensor::from_fn(
            [d, d],
            |i| if i / d == i % d { T::one() } else { T::zero() },
        );
        for m in [Modality::Rgb, Modality::Ir] {
            store.insert(ProjectionSet::weight(m), eye.clone());
            store.init_zeros(ProjectionSet::bias(m), &[d]);
        }
        store.insert(ProjectionSet::TEXT_WEIGHT, eye);
        store.init_zeros(ProjectionSet::TEXT_BIAS, &[d]);
        Ok(())
    }

    /// Applies the modality's affine projection at every position of
    /// `features[D_vis, h, w]`, giving `[D_shared, h, w]`.
    pub fn project_visual<'t, T: Scalar>(
        &self,
        params: &Bound<'t, T>,
        modality: Modality,
        features: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let s = features.shape();
        if s.len() != 3 || s[0] != self.visual_dim {
            return Err(Error::shape("project_visual", &s, &[self.visual_dim]));
        }
        let (h, w) = (s[1], s[2]);
        let flat = ops::reshape(features, &[self.visual_dim, h * w])?;
        let wt = ops::transpose(params.get(ProjectionSet::weight(modality)))?;
        let out = ops::matmul(wt, flat)?;
        let out = ops::add_channel_bias(out, params.get(ProjectionSet::bias(modality)))?;
        ops::reshape(out, &[self.shared_dim, h, w])
    }

    /// Projects the `[n, D_text]` semantic matrix to `[n, D_shared]`.
    pub fn project_text<'t, T: Scalar>(
        &self,
        params: &Bound<'t, T>,
        embeddings: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let s = embeddings.shape();
        if s.len() != 2 || s[1] != self.text_dim {
            return Err(Error::shape("project_text", &s, &[self.text_dim]));
        }
        ops::linear(
            embeddings,
            params.get(ProjectionSet::TEXT_WEIGHT),
            params.get(ProjectionSet::TEXT_BIAS),
        )
    }
}

/// Per-category similarity logits `⟨semantic_i, visual(y, x)⟩` as `[n, h, w]`.
pub fn similarity_logits<'t, T: Scalar>(
    visual: Var<'t, T>,
    semantic: Var<'t, T>,
) -> Result<Var<'t, T>> {
    let (sv, ss) = (visual.shape(), semantic.shape());
    if sv.len() != 3 || ss.len() != 2 || sv[0] != ss[1] {
        return Err(Error::shape("similarity", &sv, &ss));
    }
    let (d, h, w) = (sv[0], sv[1], sv[2]);
    let flat = ops::reshape(visual, &[d, h * w])?;
    let logits = ops::matmul(semantic, flat)?;
    ops::reshape(logits, &[ss[0], h, w])
}

/// Sigmoid of [`similarity_logits`]: per-category scores in (0, 1).
pub fn similarity<'t, T: Scalar>(visual: Var<'t, T>, semantic: Var<'t, T>) -> Result<Var<'t, T>> {
    Ok(ops::sigmoid(similarity_logits(visual, semantic)?))
}

/// Feature-resolution scores and their image-resolution response maps.
#[derive(Clone, Copy, Debug)]
pub struct SimilarityMaps<'t, T> {
    /// `[n, h, w]`
    pub scores: Var<'t, T>,
    /// `[n, H, W]`, bilinear (align-corners) upsampling of `scores`.
    pub response: Var<'t, T>,
}

pub fn similarity_maps<'t, T: Scalar>(
    visual: Var<'t, T>,
    semantic: Var<'t, T>,
    height: usize,
    width: usize,
) -> Result<SimilarityMaps<'t, T>> {
    let scores = similarity(visual, semantic)?;
    let response = ops::upsample_bilinear(scores, height, width)?;
    Ok(SimilarityMaps { scores, response })
}

/// Binary per-category masks `[n, H, W]`, channel order = category order.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSet<T>(Tensor<T>);

impl<T: Scalar> MaskSet<T> {
    pub fn new(masks: Tensor<T>) -> Result<Self> {
        if masks.ndim() != 3 {
            return Err(Error::shape("mask set", masks.shape(), &[3]));
        }
        if masks
            .data()
            .iter()
            .any(|&v| v != T::zero() && v != T::one())
        {
            return Err(Error::Validation("masks must be binary".into()));
        }
        Ok(Self(masks))
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.0
    }

    pub fn categories(&self) -> usize {
        self.0.shape()[0]
    }

    /// Per-pixel class label: 0 for background, `c + 1` for category `c`.
    /// Later categories win where masks overlap.
    pub fn labels(&self) -> Vec<usize> {
        let s = self.0.shape();
        let plane = s[1] * s[2];
        let mut labels = vec![0; plane];
        for (c, chunk) in self.0.data().chunks(plane).enumerate() {
            for (l, &v) in labels.iter_mut().zip(chunk) {
                if v == T::one() {
                    *l = c + 1;
                }
            }
        }
        labels
    }
}

/// `BCE(m_rgb, S_rgb) + BCE(m_ir, S_ir)` over upsampled response maps.
pub fn sa_loss<'t, T: Scalar>(
    rgb: &SimilarityMaps<'t, T>,
    ir: &SimilarityMaps<'t, T>,
    rgb_masks: &MaskSet<T>,
    ir_masks: &MaskSet<T>,
) -> Result<Var<'t, T>> {
    let l_rgb = ops::bce_loss(rgb.response, rgb_masks.tensor())?;
    let l_ir = ops::bce_loss(ir.response, ir_masks.tensor())?;
    ops::add(l_rgb, l_ir)
}
