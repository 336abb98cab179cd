use crate::error::{Error, Result};
use crate::tensor::{split_axis, Scalar, Tensor, Var};

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::shape(op, shape, &[axis]));
    }
    Ok(())
}

fn without_axis(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    s.remove(axis);
    s
}

/// Sum of all elements as a scalar. Accumulates in `f64`.
pub fn sum<'t, T: Scalar>(a: Var<'t, T>) -> Var<'t, T> {
    let value = a.value();
    let total = T::of(value.sum_f64());
    let shape = value.shape().to_vec();
    a.tape().record(Tensor::scalar(total), &[a], move |g| {
        vec![Some(Tensor::full(shape.clone(), g.item()))]
    })
}

pub fn mean<'t, T: Scalar>(a: Var<'t, T>) -> Var<'t, T> {
    let n = a.value().numel().max(1);
    super::scale(sum(a), T::of(1.0 / n as f64))
}

pub fn sum_axis<'t, T: Scalar>(a: Var<'t, T>, axis: usize) -> Result<Var<'t, T>> {
    let shape = a.shape();
    check_axis("sum_axis", &shape, axis)?;
    let (outer, n, inner) = split_axis(&shape, axis);
    let v = a.value();
    let mut out = vec![0.0f64; outer * inner];
    for o in 0..outer {
        for k in 0..n {
            let base = (o * n + k) * inner;
            for i in 0..inner {
                out[o * inner + i] += v.data()[base + i].as_f64();
            }
        }
    }
    let out = Tensor::new(
        without_axis(&shape, axis),
        out.into_iter().map(T::of).collect(),
    )?;
    Ok(a.tape().record(out, &[a], move |g| {
        let mut gin = vec![T::zero(); outer * n * inner];
        for o in 0..outer {
            for k in 0..n {
                let base = (o * n + k) * inner;
                gin[base..base + inner].copy_from_slice(&g.data()[o * inner..(o + 1) * inner]);
            }
        }
        vec![Some(Tensor::new(shape.clone(), gin).expect("shape"))]
    }))
}

pub fn mean_axis<'t, T: Scalar>(a: Var<'t, T>, axis: usize) -> Result<Var<'t, T>> {
    let n = a.shape().get(axis).copied().unwrap_or(1).max(1);
    Ok(super::scale(sum_axis(a, axis)?, T::of(1.0 / n as f64)))
}

/// Index of the maximum along `axis` for each remaining position; ties go to
/// the lowest index. Not differentiable.
pub fn argmax_axis<T: Scalar>(a: &Tensor<T>, axis: usize) -> Result<Vec<usize>> {
    check_axis("argmax_axis", a.shape(), axis)?;
    let (outer, n, inner) = split_axis(a.shape(), axis);
    let mut out = Vec::with_capacity(outer * inner);
    for o in 0..outer {
        for i in 0..inner {
            let mut best = 0;
            let mut best_v = a.data()[o * n * inner + i];
            for k in 1..n {
                let v = a.data()[(o * n + k) * inner + i];
                if v > best_v {
                    best = k;
                    best_v = v;
                }
            }
            out.push(best);
        }
    }
    Ok(out)
}

/// Maximum along `axis`. The gradient is routed to the winning index.
pub fn max_axis<'t, T: Scalar>(a: Var<'t, T>, axis: usize) -> Result<Var<'t, T>> {
    let shape = a.shape();
    let v = a.value();
    let winners = argmax_axis(&v, axis)?;
    let (outer, n, inner) = split_axis(&shape, axis);
    let src: Vec<usize> = winners
        .iter()
        .enumerate()
        .map(|(pos, &k)| {
            let (o, i) = (pos / inner, pos % inner);
            (o * n + k) * inner + i
        })
        .collect();
    let out = Tensor::new(
        without_axis(&shape, axis),
        src.iter().map(|&s| v.data()[s]).collect(),
    )?;
    Ok(a.tape().record(out, &[a], move |g| {
        let mut gin = vec![T::zero(); outer * n * inner];
        for (&s, &gv) in src.iter().zip(g.data()) {
            gin[s] = gin[s] + gv;
        }
        vec![Some(Tensor::new(shape.clone(), gin).expect("shape"))]
    }))
}
