use crate::error::{Error, Result};
use crate::tensor::{split_axis, Scalar, Tensor, Var};

/// Max-shifted softmax over one strided lane, skipping masked-out slots.
/// Masked slots get exactly zero.
fn softmax_lane<T: Scalar>(
    src: &[T],
    dst: &mut [T],
    n: usize,
    stride: usize,
    base: usize,
    valid: impl Fn(usize) -> bool,
) {
    let idx = |k: usize| base + k * stride;
    let max = (0..n)
        .filter(|&k| valid(k))
        .map(|k| src[idx(k)].as_f64())
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        (0..n).for_each(|k| dst[idx(k)] = T::zero());
        return;
    }
    let mut exps = vec![0.0f64; n];
    let mut total = 0.0;
    for (k, e) in exps.iter_mut().enumerate() {
        if valid(k) {
            *e = (src[idx(k)].as_f64() - max).exp();
            total += *e;
        }
    }
    for (k, e) in exps.iter().enumerate() {
        dst[idx(k)] = T::of(e / total);
    }
}

/// Vector-Jacobian product of softmax over one lane: `s ⊙ (g - ⟨g, s⟩)`.
fn softmax_lane_vjp<T: Scalar>(
    s: &[T],
    g: &[T],
    out: &mut [T],
    n: usize,
    stride: usize,
    base: usize,
) {
    let idx = |k: usize| base + k * stride;
    let inner: f64 = (0..n)
        .map(|k| g[idx(k)].as_f64() * s[idx(k)].as_f64())
        .sum();
    for k in 0..n {
        let i = idx(k);
        out[i] = T::of(s[i].as_f64() * (g[i].as_f64() - inner));
    }
}

pub fn softmax<'t, T: Scalar>(x: Var<'t, T>, axis: usize) -> Result<Var<'t, T>> {
    let shape = x.shape();
    if axis >= shape.len() {
        return Err(Error::shape("softmax", &shape, &[axis]));
    }
    let (outer, n, inner) = split_axis(&shape, axis);
    let xv = x.value();
    let mut out = vec![T::zero(); xv.numel()];
    for o in 0..outer {
        for i in 0..inner {
            softmax_lane(xv.data(), &mut out, n, inner, o * n * inner + i, |_| true);
        }
    }
    let out = Tensor::new(shape.clone(), out)?;
    let saved = out.clone();
    Ok(x.tape().record(out, &[x], move |g| {
        let mut gin = vec![T::zero(); saved.numel()];
        for o in 0..outer {
            for i in 0..inner {
                softmax_lane_vjp(
                    saved.data(),
                    g.data(),
                    &mut gin,
                    n,
                    inner,
                    o * n * inner + i,
                );
            }
        }
        vec![Some(Tensor::new(shape.clone(), gin).expect("shape"))]
    }))
}

/// Row-wise softmax of `x[R, N]` where `valid[r * N + k] == false` slots are
/// treated as `-inf` logits and receive exactly zero weight.
pub fn masked_softmax_rows<'t, T: Scalar>(x: Var<'t, T>, valid: &[bool]) -> Result<Var<'t, T>> {
    let shape = x.shape();
    if shape.len() != 2 || valid.len() != shape[0] * shape[1] {
        return Err(Error::shape("masked_softmax_rows", &shape, &[valid.len()]));
    }
    let (rows, n) = (shape[0], shape[1]);
    let xv = x.value();
    let mut out = vec![T::zero(); rows * n];
    for r in 0..rows {
        softmax_lane(xv.data(), &mut out, n, 1, r * n, |k| valid[r * n + k]);
    }
    let out = Tensor::new(shape.clone(), out)?;
    let saved = out.clone();
    Ok(x.tape().record(out, &[x], move |g| {
        let mut gin = vec![T::zero(); rows * n];
        for r in 0..rows {
            softmax_lane_vjp(saved.data(), g.data(), &mut gin, n, 1, r * n);
        }
        vec![Some(Tensor::new(shape.clone(), gin).expect("shape"))]
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    #[test]
    fn uniform_logits_give_uniform_weights() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros([3]));
        let s = softmax(x, 0).unwrap().value();
        for &v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn shift_invariance() {
        let tape = Tape::<f64>::new();
        let base = [0.3, 1.3, 2.3];
        let a = softmax(tape.constant(Tensor::new([3], base.to_vec()).unwrap()), 0).unwrap();
        let shifted: Vec<f64> = base.iter().map(|v| v + 700.0).collect();
        let b = softmax(tape.constant(Tensor::new([3], shifted).unwrap()), 0).unwrap();
        assert!(a.value().max_abs_diff(&b.value()) < 1e-12);
    }

    #[test]
    fn rows_sum_to_one_along_inner_axis() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_fn([2, 4, 3], |i| (i as f64 * 0.7).sin() * 5.0));
        let s = softmax(x, 1).unwrap().value();
        for o in 0..2 {
            for i in 0..3 {
                let total: f64 = (0..4).map(|k| s.get(&[o, k, i])).sum();
                assert!((total - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn masked_slots_are_exactly_zero() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new([2, 3], vec![1.0, 2.0, 3.0, 0.0, 0.0, 0.0]).unwrap());
        let valid = [true, false, true, false, true, true];
        let s = masked_softmax_rows(x, &valid).unwrap().value();
        assert_eq!(s.get(&[0, 1]), 0.0);
        assert_eq!(s.get(&[1, 0]), 0.0);
        assert!((s.get(&[1, 1]) - 0.5).abs() < 1e-15);
        assert!((s.get(&[0, 0]) + s.get(&[0, 2]) - 1.0).abs() < 1e-15);
    }
}
