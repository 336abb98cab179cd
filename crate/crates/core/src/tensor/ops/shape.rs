use crate::error::{Error, Result};
use crate::tensor::{split_axis, Scalar, Tensor, Var};

pub fn reshape<'t, T: Scalar>(a: Var<'t, T>, shape: &[usize]) -> Result<Var<'t, T>> {
    let old = a.shape();
    let out = a.value().reshape(shape.to_vec())?;
    Ok(a.tape().record(out, &[a], move |g| {
        vec![Some(g.reshape(old.clone()).expect("same numel"))]
    }))
}

/// Joins tensors along `axis`; all other extents must agree.
pub fn concat<'t, T: Scalar>(parts: &[Var<'t, T>], axis: usize) -> Result<Var<'t, T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Config("concat of zero tensors".into()))?;
    let base = first.shape();
    if axis >= base.len() {
        return Err(Error::shape("concat", &base, &[axis]));
    }
    let mut extents = Vec::with_capacity(parts.len());
    for p in parts {
        let s = p.shape();
        let compatible = s.len() == base.len()
            && s.iter()
                .zip(&base)
                .enumerate()
                .all(|(i, (a, b))| i == axis || a == b);
        if !compatible {
            return Err(Error::shape("concat", &base, &s));
        }
        extents.push(s[axis]);
    }
    let (outer, _, inner) = split_axis(&base, axis);
    let total: usize = extents.iter().sum();
    let mut out = Vec::with_capacity(outer * total * inner);
    let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
    for o in 0..outer {
        for (v, &e) in values.iter().zip(&extents) {
            out.extend_from_slice(&v.data()[o * e * inner..(o + 1) * e * inner]);
        }
    }
    let mut shape = base.clone();
    shape[axis] = total;
    let out = Tensor::new(shape, out)?;
    let tape = first.tape();
    Ok(tape.record(out, parts, move |g| {
        let mut grads: Vec<Vec<T>> = extents
            .iter()
            .map(|&e| Vec::with_capacity(outer * e * inner))
            .collect();
        let mut cursor = 0;
        for _ in 0..outer {
            for (gp, &e) in grads.iter_mut().zip(&extents) {
                gp.extend_from_slice(&g.data()[cursor..cursor + e * inner]);
                cursor += e * inner;
            }
        }
        grads
            .into_iter()
            .zip(&extents)
            .map(|(data, &e)| {
                let mut s = base.clone();
                s[axis] = e;
                Some(Tensor::new(s, data).expect("shape"))
            })
            .collect()
    }))
}

/// Picks elements by flat row-major index into a 1-D result.
pub fn gather<'t, T: Scalar>(a: Var<'t, T>, indices: &[usize]) -> Result<Var<'t, T>> {
    let shape = a.shape();
    let numel: usize = shape.iter().product();
    if let Some(&bad) = indices.iter().find(|&&i| i >= numel) {
        return Err(Error::shape("gather", &shape, &[bad]));
    }
    let av = a.value();
    let out: Vec<T> = indices.iter().map(|&i| av.data()[i]).collect();
    let indices = indices.to_vec();
    Ok(a.tape()
        .record(Tensor::new([indices.len()], out)?, &[a], move |g| {
            let mut gin = vec![T::zero(); numel];
            for (&i, &gv) in indices.iter().zip(g.data()) {
                gin[i] = gin[i] + gv;
            }
            vec![Some(Tensor::new(shape.clone(), gin).expect("shape"))]
        }))
}
