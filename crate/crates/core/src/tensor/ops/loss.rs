use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor, Var};

/// Probability clamp for binary cross-entropy.
pub const BCE_EPS: f64 = 1e-7;
/// Floor applied inside the logarithms of the KL divergence.
pub const KL_EPS: f64 = 1e-12;
const NORMALIZATION_TOL: f64 = 1e-6;

/// Mean binary cross-entropy of `pred` against a binary `target`, with `pred`
/// clamped to `[BCE_EPS, 1 - BCE_EPS]`. Evaluated in `f64`.
pub fn bce_loss<'t, T: Scalar>(pred: Var<'t, T>, target: &Tensor<T>) -> Result<Var<'t, T>> {
    let ps = pred.shape();
    if ps != target.shape() {
        return Err(Error::shape("bce_loss", &ps, target.shape()));
    }
    let pv = pred.value();
    let n = pv.numel().max(1) as f64;
    let t: Vec<f64> = target.to_f64_vec();
    let loss: f64 = pv
        .data()
        .iter()
        .zip(&t)
        .map(|(&p, &t)| {
            let p = p.as_f64().clamp(BCE_EPS, 1.0 - BCE_EPS);
            -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
        })
        .sum::<f64>()
        / n;
    Ok(pred
        .tape()
        .record(Tensor::scalar(T::of(loss)), &[pred], move |g| {
            let scale = g.item().as_f64() / n;
            let grad = pv
                .data()
                .iter()
                .zip(&t)
                .map(|(&p, &t)| {
                    let p = p.as_f64();
                    if !(BCE_EPS..=1.0 - BCE_EPS).contains(&p) {
                        return T::zero();
                    }
                    T::of(scale * ((1.0 - t) / (1.0 - p) - t / p))
                })
                .collect();
            vec![Some(Tensor::new(ps.clone(), grad).expect("shape"))]
        }))
}

fn check_distribution<T: Scalar>(name: &str, v: &Tensor<T>) -> Result<()> {
    let total = v.sum_f64();
    if (total - 1.0).abs() > NORMALIZATION_TOL {
        return Err(Error::Validation(format!(
            "{name} must sum to 1, sums to {total}"
        )));
    }
    if let Some(bad) = v.data().iter().find(|x| x.as_f64() < 0.0 || !x.is_finite()) {
        return Err(Error::Validation(format!("{name} has invalid entry {bad}")));
    }
    Ok(())
}

/// `Σ p · ln(p / q)` for two distributions of equal length.
pub fn kl_div<'t, T: Scalar>(p: Var<'t, T>, q: Var<'t, T>) -> Result<Var<'t, T>> {
    let (sp, sq) = (p.shape(), q.shape());
    if sp != sq {
        return Err(Error::shape("kl_div", &sp, &sq));
    }
    let (pv, qv) = (p.value(), q.value());
    check_distribution("p", &pv)?;
    check_distribution("q", &qv)?;
    let pf = pv.to_f64_vec();
    let qf = qv.to_f64_vec();
    let value: f64 = pf
        .iter()
        .zip(&qf)
        .map(|(&a, &b)| a * (a.max(KL_EPS).ln() - b.max(KL_EPS).ln()))
        .sum();
    Ok(p.tape()
        .record(Tensor::scalar(T::of(value)), &[p, q], move |g| {
            let gv = g.item().as_f64();
            let mut gp = Vec::with_capacity(pf.len());
            let mut gq = Vec::with_capacity(pf.len());
            for (&a, &b) in pf.iter().zip(&qf) {
                let own = if a > KL_EPS { 1.0 } else { 0.0 };
                gp.push(T::of(gv * (a.max(KL_EPS).ln() - b.max(KL_EPS).ln() + own)));
                let dq = if b > KL_EPS { -a / b } else { 0.0 };
                gq.push(T::of(gv * dq));
            }
            vec![
                Some(Tensor::new(sp.clone(), gp).expect("shape")),
                Some(Tensor::new(sp.clone(), gq).expect("shape")),
            ]
        }))
}

/// Mean per-pixel cross-entropy of `logits[C, H, W]` against class indices
/// `labels[H * W]`.
pub fn cross_entropy<'t, T: Scalar>(logits: Var<'t, T>, labels: &[usize]) -> Result<Var<'t, T>> {
    let shape = logits.shape();
    if shape.len() != 3 || labels.len() != shape[1] * shape[2] {
        return Err(Error::shape("cross_entropy", &shape, &[labels.len()]));
    }
    let (classes, plane) = (shape[0], shape[1] * shape[2]);
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Validation(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    let lv = logits.value();
    let mut probs = vec![0.0f64; classes * plane];
    let mut loss = 0.0;
    for px in 0..plane {
        let max = (0..classes)
            .map(|c| lv.data()[c * plane + px].as_f64())
            .fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = (0..classes)
            .map(|c| (lv.data()[c * plane + px].as_f64() - max).exp())
            .sum();
        for c in 0..classes {
            probs[c * plane + px] = (lv.data()[c * plane + px].as_f64() - max).exp() / total;
        }
        let z = lv.data()[labels[px] * plane + px].as_f64() - max;
        loss -= z - total.ln();
    }
    let n = plane.max(1) as f64;
    let labels = labels.to_vec();
    Ok(logits
        .tape()
        .record(Tensor::scalar(T::of(loss / n)), &[logits], move |g| {
            let scale = g.item().as_f64() / n;
            let mut grad: Vec<T> = probs.iter().map(|&p| T::of(p * scale)).collect();
            for (px, &l) in labels.iter().enumerate() {
                let i = l * plane + px;
                grad[i] = T::of((probs[i] - 1.0) * scale);
            }
            vec![Some(Tensor::new(shape.clone(), grad).expect("shape"))]
        }))
}
