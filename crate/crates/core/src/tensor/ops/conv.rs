use super::kernels::{gemm, gemm_nt, gemm_tn};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor, Var};

/// Zero padding per side: `[top, bottom, left, right]`.
pub type Padding = [usize; 4];

/// Output extent of a strided window sweep, or a configuration error when the
/// padded extent does not tile exactly.
pub fn conv_output_extent(padded: usize, kernel: usize, stride: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::Config("stride must be positive".into()));
    }
    if padded < kernel {
        return Err(Error::Config(format!(
            "kernel {kernel} larger than padded extent {padded}"
        )));
    }
    let span = padded - kernel;
    if span % stride != 0 {
        return Err(Error::Config(format!(
            "non-integral output extent: ({padded} - {kernel}) / {stride}"
        )));
    }
    Ok(span / stride + 1)
}

/// 2-D cross-correlation of `input[C_in, H, W]` with `kernel[C_out, C_in, K, K]`,
/// symmetric zero padding.
pub fn conv2d<'t, T: Scalar>(
    input: Var<'t, T>,
    kernel: Var<'t, T>,
    bias: Option<Var<'t, T>>,
    stride: usize,
    pad: usize,
) -> Result<Var<'t, T>> {
    conv2d_padded(input, kernel, bias, stride, [pad; 4])
}

struct Geometry {
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: Padding,
    h_out: usize,
    w_out: usize,
}

impl Geometry {
    fn cols(&self) -> usize {
        self.h_out * self.w_out
    }

    fn rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    /// Input coordinate hit by tap `(ky, kx)` at output `(oy, ox)`, if in range.
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + ky) as isize - self.pad[0] as isize;
        let x = (ox * self.stride + kx) as isize - self.pad[2] as isize;
        (y >= 0 && x >= 0 && (y as usize) < self.h && (x as usize) < self.w)
            .then_some((y as usize, x as usize))
    }
}

fn im2col<T: Scalar>(input: &[T], g: &Geometry) -> Vec<T> {
    let mut cols = vec![T::zero(); g.rows() * g.cols()];
    for c in 0..g.c_in {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * g.cols()..(row + 1) * g.cols()];
                for oy in 0..g.h_out {
                    for ox in 0..g.w_out {
                        if let Some((y, x)) = g.source(oy, ox, ky, kx) {
                            dst[oy * g.w_out + ox] = input[(c * g.h + y) * g.w + x];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(cols: &[T], g: &Geometry) -> Vec<T> {
    let mut out = vec![T::zero(); g.c_in * g.h * g.w];
    for c in 0..g.c_in {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * g.cols()..(row + 1) * g.cols()];
                for oy in 0..g.h_out {
                    for ox in 0..g.w_out {
                        if let Some((y, x)) = g.source(oy, ox, ky, kx) {
                            let o = (c * g.h + y) * g.w + x;
                            out[o] = out[o] + src[oy * g.w_out + ox];
                        }
                    }
                }
            }
        }
    }
    out
}

/// [`conv2d`] with independent per-side padding, e.g. `[0, 1, 0, 1]` for a
/// stride-2 3×3 window that halves an even extent.
pub fn conv2d_padded<'t, T: Scalar>(
    input: Var<'t, T>,
    kernel: Var<'t, T>,
    bias: Option<Var<'t, T>>,
    stride: usize,
    pad: Padding,
) -> Result<Var<'t, T>> {
    let (si, sk) = (input.shape(), kernel.shape());
    if si.len() != 3 || sk.len() != 4 || sk[1] != si[0] || sk[2] != sk[3] {
        return Err(Error::shape("conv2d", &si, &sk));
    }
    let k = sk[2];
    if k % 2 == 0 {
        return Err(Error::Config(format!(
            "conv2d kernel extent {k} must be odd"
        )));
    }
    let c_out = sk[0];
    if let Some(b) = &bias {
        if b.shape() != [c_out] {
            return Err(Error::shape("conv2d bias", &b.shape(), &[c_out]));
        }
    }
    let g = Geometry {
        c_in: si[0],
        h: si[1],
        w: si[2],
        k,
        stride,
        pad,
        h_out: conv_output_extent(si[1] + pad[0] + pad[1], k, stride)?,
        w_out: conv_output_extent(si[2] + pad[2] + pad[3], k, stride)?,
    };

    let cols = im2col(input.value().data(), &g);
    let kv = kernel.value();
    let mut out = gemm(kv.data(), &cols, c_out, g.rows(), g.cols());
    if let Some(b) = &bias {
        let bv = b.value();
        for (row, &bias) in out.chunks_mut(g.cols()).zip(bv.data()) {
            row.iter_mut().for_each(|v| *v = *v + bias);
        }
    }
    let out = Tensor::new([c_out, g.h_out, g.w_out], out)?;

    let mut parents = vec![input, kernel];
    parents.extend(bias);
    let has_bias = bias.is_some();
    let kshape = sk.clone();
    Ok(input.tape().record(out, &parents, move |grad| {
        let gd = grad.data();
        let gcols = gemm_tn(kv.data(), gd, c_out, g.rows(), g.cols());
        let gin = col2im(&gcols, &g);
        let gk = gemm_nt(gd, &cols, c_out, g.cols(), g.rows());
        let mut grads = vec![
            Some(Tensor::new([g.c_in, g.h, g.w], gin).expect("shape")),
            Some(Tensor::new(kshape.clone(), gk).expect("shape")),
        ];
        if has_bias {
            let gb = gd
                .chunks(g.cols())
                .map(|r| r.iter().fold(T::zero(), |a, &v| a + v))
                .collect();
            grads.push(Some(Tensor::new([c_out], gb).expect("shape")));
        }
        grads
    }))
}
