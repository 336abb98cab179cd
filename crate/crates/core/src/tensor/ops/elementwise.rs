use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor, Var};

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

fn same_shape<T: Scalar>(op: &'static str, a: &Var<'_, T>, b: &Var<'_, T>) -> Result<()> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa != sb {
        return Err(Error::shape(op, &sa, &sb));
    }
    Ok(())
}

pub fn add<'t, T: Scalar>(a: Var<'t, T>, b: Var<'t, T>) -> Result<Var<'t, T>> {
    same_shape("add", &a, &b)?;
    let out = zip_map(&a.value(), &b.value(), |x, y| x + y);
    Ok(a.tape()
        .record(out, &[a, b], |g| vec![Some(g.clone()), Some(g.clone())]))
}

pub fn sub<'t, T: Scalar>(a: Var<'t, T>, b: Var<'t, T>) -> Result<Var<'t, T>> {
    same_shape("sub", &a, &b)?;
    let out = zip_map(&a.value(), &b.value(), |x, y| x - y);
    Ok(a.tape()
        .record(out, &[a, b], |g| vec![Some(g.clone()), Some(g.map(|v| -v))]))
}

pub fn mul<'t, T: Scalar>(a: Var<'t, T>, b: Var<'t, T>) -> Result<Var<'t, T>> {
    same_shape("mul", &a, &b)?;
    let (av, bv) = (a.value(), b.value());
    let out = zip_map(&av, &bv, |x, y| x * y);
    Ok(a.tape().record(out, &[a, b], move |g| {
        vec![
            Some(zip_map(g, &bv, |gv, y| gv * y)),
            Some(zip_map(g, &av, |gv, x| gv * x)),
        ]
    }))
}

/// Multiplies every element by a constant.
pub fn scale<'t, T: Scalar>(a: Var<'t, T>, c: T) -> Var<'t, T> {
    let out = a.value().map(|v| v * c);
    a.tape()
        .record(out, &[a], move |g| vec![Some(g.map(|v| v * c))])
}

pub fn sigmoid<'t, T: Scalar>(a: Var<'t, T>) -> Var<'t, T> {
    let out = a.value().map(|v| T::one() / (T::one() + (-v).exp()));
    let saved = out.clone();
    a.tape().record(out, &[a], move |g| {
        vec![Some(zip_map(g, &saved, |gv, s| gv * s * (T::one() - s)))]
    })
}

pub fn relu<'t, T: Scalar>(a: Var<'t, T>) -> Var<'t, T> {
    let input = a.value();
    let out = input.map(|v| if v > T::zero() { v } else { T::zero() });
    a.tape().record(out, &[a], move |g| {
        vec![Some(zip_map(g, &input, |gv, x| {
            if x > T::zero() {
                gv
            } else {
                T::zero()
            }
        }))]
    })
}

/// `x[c, ...] + bias[c]`: adds a per-channel constant along the leading axis.
pub fn add_channel_bias<'t, T: Scalar>(x: Var<'t, T>, bias: Var<'t, T>) -> Result<Var<'t, T>> {
    let (xs, bs) = (x.shape(), bias.shape());
    if xs.is_empty() || bs.len() != 1 || bs[0] != xs[0] {
        return Err(Error::shape("add_channel_bias", &xs, &bs));
    }
    let channels = xs[0];
    let plane: usize = xs[1..].iter().product();
    let mut out = (*x.value()).clone();
    let b = bias.value();
    for (c, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
        let bc = b.data()[c];
        chunk.iter_mut().for_each(|v| *v = *v + bc);
    }
    Ok(x.tape().record(out, &[x, bias], move |g| {
        let gb: Vec<T> = g
            .data()
            .chunks(plane)
            .map(|ch| ch.iter().fold(T::zero(), |a, &v| a + v))
            .collect();
        vec![
            Some(g.clone()),
            Some(Tensor::new([channels], gb).expect("bias shape")),
        ]
    }))
}

/// `out[c, y, x] = features[c, y, x] · map[y, x]`
pub fn scale_by_map<'t, T: Scalar>(features: Var<'t, T>, map: Var<'t, T>) -> Result<Var<'t, T>> {
    let (fs, ms) = (features.shape(), map.shape());
    if fs.len() != 3 || ms.len() != 2 || fs[1..] != ms[..] {
        return Err(Error::shape("scale_by_map", &fs, &ms));
    }
    let plane = ms[0] * ms[1];
    let (fv, mv) = (features.value(), map.value());
    let mut out = (*fv).clone();
    for chunk in out.data_mut().chunks_mut(plane) {
        for (v, &m) in chunk.iter_mut().zip(mv.data()) {
            *v = *v * m;
        }
    }
    Ok(features.tape().record(out, &[features, map], move |g| {
        let mut gf = g.clone();
        let mut gm = vec![T::zero(); plane];
        for (c, chunk) in gf.data_mut().chunks_mut(plane).enumerate() {
            let fchunk = &fv.data()[c * plane..(c + 1) * plane];
            for i in 0..plane {
                gm[i] = gm[i] + chunk[i] * fchunk[i];
                chunk[i] = chunk[i] * mv.data()[i];
            }
        }
        vec![
            Some(gf),
            Some(Tensor::new(mv.shape().to_vec(), gm).expect("map shape")),
        ]
    }))
}
