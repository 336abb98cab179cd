//! Explicit spatial alignment: similarity-gated features from both
//! modalities drive a 3×3 offset regressor, and a deformable convolution
//! resamples the RGB stream onto the IR frame.

use crate::error::{Error, Result};
use crate::tensor::ops::{self, lerp2, lerp2_coord_grad, lerp2_scatter, BilinearAxis};
use crate::tensor::{Bound, ParamStore, Scalar, Tensor, Var};

pub const KERNEL: usize = 3;
pub const TAPS: usize = KERNEL * KERNEL;
/// `(Δy, Δx)` per kernel tap.
pub const OFFSET_CHANNELS: usize = 2 * TAPS;

pub const OFFSET_WEIGHT: &str = "esm.offset.w";
pub const OFFSET_BIAS: &str = "esm.offset.b";
pub const DEFORM_WEIGHT: &str = "esm.deform.w";

/// Collapses per-category scores into one objectness gate per pixel.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum GateReduce {
    #[default]
    Max,
    Mean,
}

impl std::str::FromStr for GateReduce {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(GateReduce::Max),
            "mean" => Ok(GateReduce::Mean),
            _ => Err(Error::Config(format!("unknown gate reduction {s:?}"))),
        }
    }
}

impl std::fmt::Display for GateReduce {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            GateReduce::Max => "max",
            GateReduce::Mean => "mean",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EsmConfig {
    pub channels: usize,
    pub gate: GateReduce,
}

impl EsmConfig {
    /// Offset regressor starts at zero (identity deformation); the deformable
    /// kernel starts as a per-channel 3×3 mean filter.
    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>) {
        let c = self.channels;
        store.init_zeros(OFFSET_WEIGHT, &[OFFSET_CHANNELS, 2 * c, KERNEL, KERNEL]);
        store.init_zeros(OFFSET_BIAS, &[OFFSET_CHANNELS]);
        let tap = T::of(1.0 / TAPS as f64);
        let kernel = Tensor::from_fn([c, c, KERNEL, KERNEL], |i| {
            let (o, rest) = (i / (c * TAPS), i % (c * TAPS));
            if rest / TAPS == o {
                tap
            } else {
                T::zero()
            }
        });
        store.insert(DEFORM_WEIGHT, kernel);
    }
}

/// `out(c, y, x) = features(c, y, x) · gate(y, x)` where the gate reduces the
/// category axis of `scores[n, h, w]`.
pub fn enhance<'t, T: Scalar>(
    features: Var<'t, T>,
    scores: Var<'t, T>,
    reduce: GateReduce,
) -> Result<Var<'t, T>> {
    let (fs, ss) = (features.shape(), scores.shape());
    if fs.len() != 3 || ss.len() != 3 || fs[1..] != ss[1..] {
        return Err(Error::shape("enhance", &fs, &ss));
    }
    let gate = match reduce {
        GateReduce::Max => ops::max_axis(scores, 0)?,
        GateReduce::Mean => ops::mean_axis(scores, 0)?,
    };
    ops::scale_by_map(features, gate)
}

/// `Conv3×3(concat(rgb, ir))` → `[18, h, w]` sampling offsets of RGB
/// relative to IR, in feature pixels.
pub fn estimate_offsets<'t, T: Scalar>(
    params: &Bound<'t, T>,
    rgb: Var<'t, T>,
    ir: Var<'t, T>,
) -> Result<Var<'t, T>> {
    let (rs, is) = (rgb.shape(), ir.shape());
    if rs != is {
        return Err(Error::shape("estimate_offsets", &rs, &is));
    }
    let joint = ops::concat(&[rgb, ir], 0)?;
    ops::conv2d(
        joint,
        params.get(OFFSET_WEIGHT),
        Some(params.get(OFFSET_BIAS)),
        1,
        1,
    )
}

/// Lookup geometry for one (tap, output position) pair, shared by every
/// input channel. Coordinates live in the frame padded by one zero pixel.
#[derive(Clone, Copy)]
struct TapSample<T> {
    ay: BilinearAxis<T>,
    ax: BilinearAxis<T>,
}

/// Deformable 3×3 convolution, stride 1, zero padding 1.
///
/// Tap `k` at output `p` reads `input` at `p + d_k + φ_k(p)`, where `d_k` is
/// the nominal displacement and `φ_k = offsets[2k..2k+2]` is `(Δy, Δx)`.
/// Reads are bilinear on the zero-padded input with coordinates clamped to
/// the padded frame, so any read outside the map yields zero and zero
/// offsets reproduce [`ops::conv2d`] exactly.
pub fn deform_conv<'t, T: Scalar>(
    input: Var<'t, T>,
    kernel: Var<'t, T>,
    offsets: Var<'t, T>,
) -> Result<Var<'t, T>> {
    let (si, sk, so) = (input.shape(), kernel.shape(), offsets.shape());
    if si.len() != 3 || sk.len() != 4 || sk[1] != si[0] || sk[2] != KERNEL || sk[3] != KERNEL {
        return Err(Error::shape("deform_conv kernel", &si, &sk));
    }
    if so != [OFFSET_CHANNELS, si[1], si[2]] {
        return Err(Error::shape("deform_conv offsets", &so, &si));
    }
    let (c_in, h, w, c_out) = (si[0], si[1], si[2], sk[0]);
    let (hp, wp) = (h + 2, w + 2);
    let plane = h * w;

    let iv = input.value();
    let mut padded = vec![T::zero(); c_in * hp * wp];
    for c in 0..c_in {
        for y in 0..h {
            let src = &iv.data()[(c * h + y) * w..(c * h + y + 1) * w];
            let dst = (c * hp + y + 1) * wp + 1;
            padded[dst..dst + w].copy_from_slice(src);
        }
    }

    let ov = offsets.value();
    let od = ov.data();
    let mut taps = Vec::with_capacity(TAPS * plane);
    for k in 0..TAPS {
        let (ky, kx) = (k / KERNEL, k % KERNEL);
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                // nominal tap (y + ky - 1) shifted by +1 into the padded frame
                let sy = T::of((y + ky) as f64) + od[(2 * k) * plane + p];
                let sx = T::of((x + kx) as f64) + od[(2 * k + 1) * plane + p];
                taps.push(TapSample {
                    ay: BilinearAxis::new(sy, hp),
                    ax: BilinearAxis::new(sx, wp),
                });
            }
        }
    }

    let rows = c_in * TAPS;
    let mut cols = vec![T::zero(); rows * plane];
    for c in 0..c_in {
        let pl = &padded[c * hp * wp..(c + 1) * hp * wp];
        for k in 0..TAPS {
            let dst = &mut cols[(c * TAPS + k) * plane..(c * TAPS + k + 1) * plane];
            for (v, t) in dst.iter_mut().zip(&taps[k * plane..(k + 1) * plane]) {
                *v = lerp2(pl, wp, &t.ay, &t.ax);
            }
        }
    }

    let kv = kernel.value();
    let out = ops::kernels::gemm(kv.data(), &cols, c_out, rows, plane);
    let out = Tensor::new([c_out, h, w], out)?;

    Ok(input
        .tape()
        .record(out, &[input, kernel, offsets], move |g| {
            let gcols = ops::kernels::gemm_tn(kv.data(), g.data(), c_out, rows, plane);
            let gk = ops::kernels::gemm_nt(g.data(), &cols, c_out, plane, rows);

            let mut gpad = vec![T::zero(); c_in * hp * wp];
            let mut goff = vec![T::zero(); OFFSET_CHANNELS * plane];
            for c in 0..c_in {
                let pl = &padded[c * hp * wp..(c + 1) * hp * wp];
                let gpl = &mut gpad[c * hp * wp..(c + 1) * hp * wp];
                for k in 0..TAPS {
                    let gc = &gcols[(c * TAPS + k) * plane..(c * TAPS + k + 1) * plane];
                    for (p, (&gv, t)) in
                        gc.iter().zip(&taps[k * plane..(k + 1) * plane]).enumerate()
                    {
                        if gv == T::zero() {
                            continue;
                        }
                        lerp2_scatter(gpl, wp, &t.ay, &t.ax, gv);
                        let (dy, dx) = lerp2_coord_grad(pl, wp, &t.ay, &t.ax);
                        goff[(2 * k) * plane + p] = goff[(2 * k) * plane + p] + gv * dy;
                        goff[(2 * k + 1) * plane + p] = goff[(2 * k + 1) * plane + p] + gv * dx;
                    }
                }
            }
            let mut gin = vec![T::zero(); c_in * plane];
            for c in 0..c_in {
                for y in 0..h {
                    let src = (c * hp + y + 1) * wp + 1;
                    gin[(c * h + y) * w..(c * h + y + 1) * w].copy_from_slice(&gpad[src..src + w]);
                }
            }
            vec![
                Some(Tensor::new([c_in, h, w], gin).expect("shape")),
                Some(Tensor::new([c_out, c_in, KERNEL, KERNEL], gk).expect("shape")),
                Some(Tensor::new([OFFSET_CHANNELS, h, w], goff).expect("shape")),
            ]
        }))
}

/// Per-pixel `(Δy, Δx)` averaged over the nine taps: two `[h, w]` tensors.
pub fn mean_offsets<T: Scalar>(offsets: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    let s = offsets.shape();
    let (h, w) = (s[1], s[2]);
    let plane = h * w;
    let mut dy = vec![0.0f64; plane];
    let mut dx = vec![0.0f64; plane];
    for k in 0..TAPS {
        for p in 0..plane {
            dy[p] += offsets.data()[(2 * k) * plane + p].as_f64() / TAPS as f64;
            dx[p] += offsets.data()[(2 * k + 1) * plane + p].as_f64() / TAPS as f64;
        }
    }
    (
        Tensor::from_f64([h, w], &dy).expect("shape"),
        Tensor::from_f64([h, w], &dx).expect("shape"),
    )
}

#[derive(Clone, Copy, Debug)]
pub struct EsmOutput<'t, T> {
    /// RGB features resampled onto the IR frame.
    pub aligned_rgb: Var<'t, T>,
    /// `None` when bypassed.
    pub offsets: Option<Var<'t, T>>,
}

/// Gate → offsets → deformable conv on the RGB stream. IR is the reference
/// frame and passes through untouched. With `bypass`, the RGB stream is
/// returned as is and no ESM parameter is touched.
#[allow(clippy::too_many_arguments)]
pub fn esm_forward<'t, T: Scalar>(
    cfg: &EsmConfig,
    params: &Bound<'t, T>,
    rgb_aligned: Var<'t, T>,
    ir_aligned: Var<'t, T>,
    rgb_scores: Var<'t, T>,
    ir_scores: Var<'t, T>,
    bypass: bool,
) -> Result<EsmOutput<'t, T>> {
    if bypass {
        return Ok(EsmOutput {
            aligned_rgb: rgb_aligned,
            offsets: None,
        });
    }
    let rgb_gated = enhance(rgb_aligned, rgb_scores, cfg.gate)?;
    let ir_gated = enhance(ir_aligned, ir_scores, cfg.gate)?;
    let offsets = estimate_offsets(params, rgb_gated, ir_gated)?;
    let aligned_rgb = deform_conv(rgb_aligned, params.get(DEFORM_WEIGHT), offsets)?;
    Ok(EsmOutput {
        aligned_rgb,
        offsets: Some(offsets),
    })
}
