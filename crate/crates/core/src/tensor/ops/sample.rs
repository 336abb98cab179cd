use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor, Var};

/// One axis of a bilinear lookup after clamping the coordinate into
/// `[0, size - 1]` (replicate-edge).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BilinearAxis<T> {
    pub lo: usize,
    pub hi: usize,
    /// Weight of `hi`; `lo` gets `1 - frac`.
    pub frac: T,
    /// False when the coordinate was clamped, i.e. its derivative is zero.
    pub live: bool,
}

impl<T: Scalar> BilinearAxis<T> {
    pub fn new(coord: T, size: usize) -> Self {
        if size <= 1 {
            return Self {
                lo: 0,
                hi: 0,
                frac: T::zero(),
                live: false,
            };
        }
        let top = T::of((size - 1) as f64);
        let live = coord >= T::zero() && coord <= top;
        let c = coord.max(T::zero()).min(top);
        // at the upper edge use the last full cell with frac = 1
        let lo = c.floor().to_usize().unwrap_or(0).min(size - 2);
        Self {
            lo,
            hi: lo + 1,
            frac: c - T::of(lo as f64),
            live,
        }
    }
}

/// Bilinear lookup in one `h×w` plane.
#[inline]
pub(crate) fn lerp2<T: Scalar>(
    plane: &[T],
    w: usize,
    ay: &BilinearAxis<T>,
    ax: &BilinearAxis<T>,
) -> T {
    let (one, fy, fx) = (T::one(), ay.frac, ax.frac);
    let v00 = plane[ay.lo * w + ax.lo];
    let v01 = plane[ay.lo * w + ax.hi];
    let v10 = plane[ay.hi * w + ax.lo];
    let v11 = plane[ay.hi * w + ax.hi];
    (one - fy) * ((one - fx) * v00 + fx * v01) + fy * ((one - fx) * v10 + fx * v11)
}

/// Partial derivatives of [`lerp2`] with respect to `(y, x)`.
#[inline]
pub(crate) fn lerp2_coord_grad<T: Scalar>(
    plane: &[T],
    w: usize,
    ay: &BilinearAxis<T>,
    ax: &BilinearAxis<T>,
) -> (T, T) {
    let (one, fy, fx) = (T::one(), ay.frac, ax.frac);
    let v00 = plane[ay.lo * w + ax.lo];
    let v01 = plane[ay.lo * w + ax.hi];
    let v10 = plane[ay.hi * w + ax.lo];
    let v11 = plane[ay.hi * w + ax.hi];
    let dy = if ay.live {
        (one - fx) * (v10 - v00) + fx * (v11 - v01)
    } else {
        T::zero()
    };
    let dx = if ax.live {
        (one - fy) * (v01 - v00) + fy * (v11 - v10)
    } else {
        T::zero()
    };
    (dy, dx)
}

/// Scatters `g` into the four corners of a bilinear lookup.
#[inline]
pub(crate) fn lerp2_scatter<T: Scalar>(
    plane: &mut [T],
    w: usize,
    ay: &BilinearAxis<T>,
    ax: &BilinearAxis<T>,
    g: T,
) {
    let (one, fy, fx) = (T::one(), ay.frac, ax.frac);
    plane[ay.lo * w + ax.lo] = plane[ay.lo * w + ax.lo] + g * (one - fy) * (one - fx);
    plane[ay.lo * w + ax.hi] = plane[ay.lo * w + ax.hi] + g * (one - fy) * fx;
    plane[ay.hi * w + ax.lo] = plane[ay.hi * w + ax.lo] + g * fy * (one - fx);
    plane[ay.hi * w + ax.hi] = plane[ay.hi * w + ax.hi] + g * fy * fx;
}

/// Samples every channel of `input[C, H, W]` at the fractional position
/// `coords = [y, x]`. Differentiable in both the values and the position.
pub fn bilinear_sample<'t, T: Scalar>(input: Var<'t, T>, coords: Var<'t, T>) -> Result<Var<'t, T>> {
    let (si, sc) = (input.shape(), coords.shape());
    if si.len() != 3 || sc != [2] {
        return Err(Error::shape("bilinear_sample", &si, &sc));
    }
    let (c, h, w) = (si[0], si[1], si[2]);
    let iv = input.value();
    let pos = coords.value();
    let ay = BilinearAxis::new(pos.data()[0], h);
    let ax = BilinearAxis::new(pos.data()[1], w);
    let out: Vec<T> = iv
        .data()
        .chunks(h * w)
        .map(|p| lerp2(p, w, &ay, &ax))
        .collect();
    Ok(input
        .tape()
        .record(Tensor::new([c], out)?, &[input, coords], move |g| {
            let mut gin = vec![T::zero(); c * h * w];
            let (mut gy, mut gx) = (T::zero(), T::zero());
            for (ch, (plane, gplane)) in iv
                .data()
                .chunks(h * w)
                .zip(gin.chunks_mut(h * w))
                .enumerate()
            {
                let gc = g.data()[ch];
                lerp2_scatter(gplane, w, &ay, &ax, gc);
                let (dy, dx) = lerp2_coord_grad(plane, w, &ay, &ax);
                gy = gy + gc * dy;
                gx = gx + gc * dx;
            }
            vec![
                Some(Tensor::new([c, h, w], gin).expect("shape")),
                Some(Tensor::new([2], vec![gy, gx]).expect("shape")),
            ]
        }))
}

fn align_corners_axis<T: Scalar>(src: usize, dst: usize) -> Vec<BilinearAxis<T>> {
    (0..dst)
        .map(|d| {
            let coord = if dst > 1 {
                T::of(d as f64 * (src - 1) as f64 / (dst - 1) as f64)
            } else {
                T::zero()
            };
            BilinearAxis::new(coord, src)
        })
        .collect()
}

/// Resizes `input[C, h, w]` to `[C, H, W]` with the align-corners convention
/// (`src = dst · (h - 1) / (H - 1)`).
pub fn upsample_bilinear<'t, T: Scalar>(
    input: Var<'t, T>,
    height: usize,
    width: usize,
) -> Result<Var<'t, T>> {
    let si = input.shape();
    if si.len() != 3 {
        return Err(Error::shape("upsample_bilinear", &si, &[height, width]));
    }
    let (c, h, w) = (si[0], si[1], si[2]);
    if height < h || width < w {
        return Err(Error::Config(format!(
            "upsample target {height}x{width} smaller than source {h}x{w}"
        )));
    }
    let rows = align_corners_axis::<T>(h, height);
    let cols = align_corners_axis::<T>(w, width);
    let iv = input.value();
    let mut out = Vec::with_capacity(c * height * width);
    for plane in iv.data().chunks(h * w) {
        for ay in &rows {
            for ax in &cols {
                out.push(lerp2(plane, w, ay, ax));
            }
        }
    }
    let out = Tensor::new([c, height, width], out)?;
    Ok(input.tape().record(out, &[input], move |g| {
        let mut gin = vec![T::zero(); c * h * w];
        for (gplane, gout) in gin.chunks_mut(h * w).zip(g.data().chunks(height * width)) {
            for (yy, ay) in rows.iter().enumerate() {
                for (xx, ax) in cols.iter().enumerate() {
                    lerp2_scatter(gplane, w, ay, ax, gout[yy * width + xx]);
                }
            }
        }
        vec![Some(Tensor::new([c, h, w], gin).expect("shape"))]
    }))
}
