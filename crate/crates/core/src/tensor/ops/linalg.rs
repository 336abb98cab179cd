use super::kernels::{gemm, gemm_nt, gemm_tn, transpose2};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor, Var};

pub fn matmul<'t, T: Scalar>(a: Var<'t, T>, b: Var<'t, T>) -> Result<Var<'t, T>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
        return Err(Error::shape("matmul", &sa, &sb));
    }
    let (m, k, n) = (sa[0], sa[1], sb[1]);
    let (av, bv) = (a.value(), b.value());
    let out = Tensor::new([m, n], gemm(av.data(), bv.data(), m, k, n))?;
    Ok(a.tape().record(out, &[a, b], move |g| {
        // dA = G·Bᵀ, dB = Aᵀ·G
        let ga = gemm_nt(g.data(), bv.data(), m, n, k);
        let gb = gemm_tn(av.data(), g.data(), m, k, n);
        vec![
            Some(Tensor::new([m, k], ga).expect("shape")),
            Some(Tensor::new([k, n], gb).expect("shape")),
        ]
    }))
}

/// Swaps the two axes of a matrix.
pub fn transpose<'t, T: Scalar>(a: Var<'t, T>) -> Result<Var<'t, T>> {
    let s = a.shape();
    if s.len() != 2 {
        return Err(Error::shape("transpose", &s, &[2]));
    }
    let (r, c) = (s[0], s[1]);
    let out = Tensor::new([c, r], transpose2(a.value().data(), r, c))?;
    Ok(a.tape().record(out, &[a], move |g| {
        vec![Some(
            Tensor::new([r, c], transpose2(g.data(), c, r)).expect("shape"),
        )]
    }))
}

/// Affine map over rows: `x[N, D_in] · w[D_in, D_out] + b[D_out]`.
pub fn linear<'t, T: Scalar>(x: Var<'t, T>, w: Var<'t, T>, b: Var<'t, T>) -> Result<Var<'t, T>> {
    let (sx, sw, sb) = (x.shape(), w.shape(), b.shape());
    if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[0] {
        return Err(Error::shape("linear", &sx, &sw));
    }
    if sb != [sw[1]] {
        return Err(Error::shape("linear bias", &sb, &[sw[1]]));
    }
    let (n, d_in, d_out) = (sx[0], sx[1], sw[1]);
    let (xv, wv) = (x.value(), w.value());
    let mut out = gemm(xv.data(), wv.data(), n, d_in, d_out);
    let bv = b.value();
    for row in out.chunks_mut(d_out) {
        for (o, &bias) in row.iter_mut().zip(bv.data()) {
            *o = *o + bias;
        }
    }
    let out = Tensor::new([n, d_out], out)?;
    Ok(x.tape().record(out, &[x, w, b], move |g| {
        let gx = gemm_nt(g.data(), wv.data(), n, d_out, d_in);
        let gw = gemm_tn(xv.data(), g.data(), n, d_in, d_out);
        let mut gb = vec![T::zero(); d_out];
        for row in g.data().chunks(d_out) {
            for (acc, &v) in gb.iter_mut().zip(row) {
                *acc = *acc + v;
            }
        }
        vec![
            Some(Tensor::new([n, d_in], gx).expect("shape")),
            Some(Tensor::new([d_in, d_out], gw).expect("shape")),
            Some(Tensor::new([d_out], gb).expect("shape")),
        ]
    }))
}
