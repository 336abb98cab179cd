//! Implicit spatial alignment: each IR position attends over the 3×3 RGB
//! neighbourhood around it and aggregates it, and a mutual-consistency KL
//! term compares the IR→RGB best-match weights against the RGB→IR weights
//! that point back.

use crate::error::{Error, Result};
use crate::tensor::ops;
use crate::tensor::{Scalar, Tensor, Var};

pub const WINDOW: usize = 3;
pub const SLOTS: usize = WINDOW * WINDOW;
pub const CENTER_SLOT: usize = SLOTS / 2;

/// Window offset `(dy, dx)` of slot `k` (row-major, top-left first).
pub fn slot_offset(k: usize) -> (isize, isize) {
    ((k / WINDOW) as isize - 1, (k % WINDOW) as isize - 1)
}

/// Slot with the negated window offset.
pub fn mirror_slot(k: usize) -> usize {
    SLOTS - 1 - k
}

/// Flat position reached from `pos` through slot `k`, if inside `h×w`.
pub fn neighbor(pos: usize, k: usize, h: usize, w: usize) -> Option<usize> {
    let (dy, dx) = slot_offset(k);
    let y = (pos / w) as isize + dy;
    let x = (pos % w) as isize + dx;
    (y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w).then(|| y as usize * w + x as usize)
}

/// 3×3 neighbourhoods of a `[D, h, w]` field, zero outside the map.
#[derive(Clone, Copy, Debug)]
pub struct WindowedKeys<'t, T> {
    /// `[h·w, 9, D]`
    pub keys: Var<'t, T>,
    pub height: usize,
    pub width: usize,
}

impl<T> WindowedKeys<'_, T> {
    /// `[h·w · 9]` validity flags, row-major by query then slot.
    pub fn valid_mask(&self) -> Vec<bool> {
        valid_mask(self.height, self.width)
    }
}

fn valid_mask(h: usize, w: usize) -> Vec<bool> {
    (0..h * w)
        .flat_map(|q| (0..SLOTS).map(move |k| neighbor(q, k, h, w).is_some()))
        .collect()
}

pub fn window_sample<'t, T: Scalar>(features: Var<'t, T>) -> Result<WindowedKeys<'t, T>> {
    let s = features.shape();
    if s.len() != 3 {
        return Err(Error::shape("window_sample", &s, &[3]));
    }
    let (d, h, w) = (s[0], s[1], s[2]);
    let plane = h * w;
    let fv = features.value();
    let mut keys = vec![T::zero(); plane * SLOTS * d];
    for q in 0..plane {
        for k in 0..SLOTS {
            if let Some(n) = neighbor(q, k, h, w) {
                let row = &mut keys[(q * SLOTS + k) * d..(q * SLOTS + k + 1) * d];
                for (c, v) in row.iter_mut().enumerate() {
                    *v = fv.data()[c * plane + n];
                }
            }
        }
    }
    let keys = features.tape().record(
        Tensor::new([plane, SLOTS, d], keys)?,
        &[features],
        move |g| {
            let mut gin = vec![T::zero(); d * plane];
            for q in 0..plane {
                for k in 0..SLOTS {
                    if let Some(n) = neighbor(q, k, h, w) {
                        let row = &g.data()[(q * SLOTS + k) * d..(q * SLOTS + k + 1) * d];
                        for (c, &gv) in row.iter().enumerate() {
                            gin[c * plane + n] = gin[c * plane + n] + gv;
                        }
                    }
                }
            }
            vec![Some(Tensor::new([d, h, w], gin).expect("shape"))]
        },
    );
    Ok(WindowedKeys {
        keys,
        height: h,
        width: w,
    })
}

/// `out[r, s] = ⟨queries[r, :], keys[r, s, :]⟩`
fn batched_dot<'t, T: Scalar>(queries: Var<'t, T>, keys: Var<'t, T>) -> Result<Var<'t, T>> {
    let (sq, sk) = (queries.shape(), keys.shape());
    if sq.len() != 2 || sk.len() != 3 || sq[0] != sk[0] || sq[1] != sk[2] {
        return Err(Error::shape("batched_dot", &sq, &sk));
    }
    let (rows, slots, d) = (sk[0], sk[1], sk[2]);
    let (qv, kv) = (queries.value(), keys.value());
    let mut out = vec![T::zero(); rows * slots];
    for r in 0..rows {
        let q = &qv.data()[r * d..(r + 1) * d];
        for s in 0..slots {
            let k = &kv.data()[(r * slots + s) * d..(r * slots + s + 1) * d];
            out[r * slots + s] = ops::kernels::dot(q, k);
        }
    }
    Ok(queries.tape().record(
        Tensor::new([rows, slots], out)?,
        &[queries, keys],
        move |g| {
            let mut gq = vec![T::zero(); rows * d];
            let mut gk = vec![T::zero(); rows * slots * d];
            for r in 0..rows {
                for s in 0..slots {
                    let gv = g.data()[r * slots + s];
                    let base = (r * slots + s) * d;
                    for c in 0..d {
                        gq[r * d + c] = gq[r * d + c] + gv * kv.data()[base + c];
                        gk[base + c] = gv * qv.data()[r * d + c];
                    }
                }
            }
            vec![
                Some(Tensor::new([rows, d], gq).expect("shape")),
                Some(Tensor::new([rows, slots, d], gk).expect("shape")),
            ]
        },
    ))
}

/// `out[r, :] = Σ_s weights[r, s] · values[r, s, :]`
fn batched_weighted_sum<'t, T: Scalar>(
    weights: Var<'t, T>,
    values: Var<'t, T>,
) -> Result<Var<'t, T>> {
    let (sw, sv) = (weights.shape(), values.shape());
    if sw.len() != 2 || sv.len() != 3 || sw[..] != sv[..2] {
        return Err(Error::shape("batched_weighted_sum", &sw, &sv));
    }
    let (rows, slots, d) = (sv[0], sv[1], sv[2]);
    let (wv, vv) = (weights.value(), values.value());
    let mut out = vec![T::zero(); rows * d];
    for r in 0..rows {
        let dst = &mut out[r * d..(r + 1) * d];
        for s in 0..slots {
            let a = wv.data()[r * slots + s];
            let src = &vv.data()[(r * slots + s) * d..(r * slots + s + 1) * d];
            for (o, &v) in dst.iter_mut().zip(src) {
                *o = *o + a * v;
            }
        }
    }
    Ok(weights
        .tape()
        .record(Tensor::new([rows, d], out)?, &[weights, values], move |g| {
            let mut gw = vec![T::zero(); rows * slots];
            let mut gv = vec![T::zero(); rows * slots * d];
            for r in 0..rows {
                let gr = &g.data()[r * d..(r + 1) * d];
                for s in 0..slots {
                    let base = (r * slots + s) * d;
                    gw[r * slots + s] = ops::kernels::dot(gr, &vv.data()[base..base + d]);
                    let a = wv.data()[r * slots + s];
                    for c in 0..d {
                        gv[base + c] = a * gr[c];
                    }
                }
            }
            vec![
                Some(Tensor::new([rows, slots], gw).expect("shape")),
                Some(Tensor::new([rows, slots, d], gv).expect("shape")),
            ]
        }))
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionWeights<'t, T> {
    /// Scaled logits `[h·w, 9]`.
    pub logits: Var<'t, T>,
    /// Masked softmax of `logits`, `[h·w, 9]`; invalid slots are exactly 0.
    pub weights: Var<'t, T>,
    pub height: usize,
    pub width: usize,
}

/// Each query position attends over the 3×3 window of `kv_field` around it:
/// `softmax(⟨q, k⟩ / √D)` with out-of-map slots masked, then aggregates the
/// same window as values. Returns the aggregated `[D, h, w]` field.
pub fn cross_attend<'t, T: Scalar>(
    query_field: Var<'t, T>,
    kv_field: Var<'t, T>,
) -> Result<(Var<'t, T>, AttentionWeights<'t, T>)> {
    let (sq, skv) = (query_field.shape(), kv_field.shape());
    if sq.len() != 3 || sq != skv {
        return Err(Error::shape("cross_attend", &sq, &skv));
    }
    let (d, h, w) = (sq[0], sq[1], sq[2]);
    let queries = ops::transpose(ops::reshape(query_field, &[d, h * w])?)?;
    let window = window_sample(kv_field)?;
    let raw = batched_dot(queries, window.keys)?;
    let logits = ops::scale(raw, T::of(1.0 / (d as f64).sqrt()));
    let weights = ops::masked_softmax_rows(logits, &window.valid_mask())?;
    let aggregated = batched_weighted_sum(weights, window.keys)?;
    let aggregated = ops::reshape(ops::transpose(aggregated)?, &[d, h, w])?;
    Ok((
        aggregated,
        AttentionWeights {
            logits,
            weights,
            height: h,
            width: w,
        },
    ))
}

#[derive(Clone, Debug)]
pub struct ConsistencyVectors<'t, T> {
    /// Best IR→RGB weight per IR position, `[h·w]`.
    pub v_ir_to_rgb: Var<'t, T>,
    /// RGB→IR weight from the matched RGB position back to the IR position.
    pub v_rgb_to_ir: Var<'t, T>,
    /// Winning slot per IR position, in `[0, 9)`.
    pub best_index: Vec<usize>,
}

/// For IR position `i`: `k* = argmax` of its IR→RGB weights over valid slots
/// (ties → lowest slot), `j` = the RGB position under `k*`,
/// `v_ir_to_rgb(i) = w_ir_rgb(i, k*)` and
/// `v_rgb_to_ir(i) = w_rgb_ir(j, mirror(k*))`. The selection is not
/// differentiated; the gathered values are.
pub fn extract_consistency<'t, T: Scalar>(
    attn_ir_rgb: &AttentionWeights<'t, T>,
    attn_rgb_ir: &AttentionWeights<'t, T>,
) -> Result<ConsistencyVectors<'t, T>> {
    let (h, w) = (attn_ir_rgb.height, attn_ir_rgb.width);
    if (attn_rgb_ir.height, attn_rgb_ir.width) != (h, w) {
        return Err(Error::shape(
            "extract_consistency",
            &[h, w],
            &[attn_rgb_ir.height, attn_rgb_ir.width],
        ));
    }
    let weights = attn_ir_rgb.weights.value();
    let plane = h * w;
    let mut best_index = Vec::with_capacity(plane);
    let mut forward_idx = Vec::with_capacity(plane);
    let mut backward_idx = Vec::with_capacity(plane);
    for i in 0..plane {
        let row = &weights.data()[i * SLOTS..(i + 1) * SLOTS];
        let mut best = CENTER_SLOT;
        for k in 0..SLOTS {
            if neighbor(i, k, h, w).is_some()
                && (row[k] > row[best] || (row[k] == row[best] && k < best))
            {
                best = k;
            }
        }
        let j = neighbor(i, best, h, w).expect("winning slot is in the map");
        best_index.push(best);
        forward_idx.push(i * SLOTS + best);
        backward_idx.push(j * SLOTS + mirror_slot(best));
    }
    Ok(ConsistencyVectors {
        v_ir_to_rgb: ops::gather(attn_ir_rgb.weights, &forward_idx)?,
        v_rgb_to_ir: ops::gather(attn_rgb_ir.weights, &backward_idx)?,
        best_index,
    })
}

/// `KL(softmax(V_ir→rgb) ‖ softmax(V_rgb→ir))`, softmax over positions.
pub fn sc_loss<'t, T: Scalar>(vectors: &ConsistencyVectors<'t, T>) -> Result<Var<'t, T>> {
    if vectors.best_index.is_empty() {
        return Err(Error::Validation("empty consistency vectors".into()));
    }
    let p = ops::softmax(vectors.v_ir_to_rgb, 0)?;
    let q = ops::softmax(vectors.v_rgb_to_ir, 0)?;
    ops::kl_div(p, q)
}

#[derive(Clone, Debug)]
pub struct IsmOutput<'t, T> {
    /// RGB field aggregated per IR query, `[D, h, w]`.
    pub aggregated_rgb: Var<'t, T>,
    pub attn_ir_rgb: AttentionWeights<'t, T>,
    pub attn_rgb_ir: AttentionWeights<'t, T>,
    pub consistency: ConsistencyVectors<'t, T>,
    pub loss: Var<'t, T>,
}

/// IR queries over RGB windows, the swapped direction, and the consistency
/// loss between them.
pub fn ism_forward<'t, T: Scalar>(ir: Var<'t, T>, rgb: Var<'t, T>) -> Result<IsmOutput<'t, T>> {
    let (aggregated_rgb, attn_ir_rgb) = cross_attend(ir, rgb)?;
    let (_, attn_rgb_ir) = cross_attend(rgb, ir)?;
    let consistency = extract_consistency(&attn_ir_rgb, &attn_rgb_ir)?;
    let loss = sc_loss(&consistency)?;
    Ok(IsmOutput {
        aggregated_rgb,
        attn_ir_rgb,
        attn_rgb_ir,
        consistency,
        loss,
    })
}
