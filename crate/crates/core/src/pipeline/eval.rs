use serde::Serialize;

use crate::error::{Error, Result};
use crate::esm::mean_offsets;
use crate::synth::{Sample, DOWNSAMPLE};
use crate::tensor::ops::argmax_axis;
use crate::tensor::{Tape, Tensor};

use super::model::{forward, LossWeights, Model, SampleInputs, Stage};
use super::parallel_map;
use super::train::LossValues;

/// Response maps above this count as predicted object pixels.
pub const RESPONSE_THRESHOLD: f32 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Metrics {
    pub variant: String,
    pub stage: u8,
    pub samples: usize,
    /// Head argmax vs IR-frame masks, intersection and union summed over
    /// samples. A category absent from both prediction and truth scores 0.
    pub per_category_iou: Vec<f64>,
    pub mean_iou: f64,
    /// IR similarity response thresholded at 0.5 vs IR masks; SAM only.
    pub ir_response_iou: Option<Vec<f64>>,
    pub ir_response_mean_iou: Option<f64>,
    /// Mean absolute error of the tap-mean offset per axis over object
    /// feature pixels, in feature pixels; ESM in stage two only.
    pub offset_mae: Option<f64>,
    pub mean_offset_dy: Option<f64>,
    pub mean_offset_dx: Option<f64>,
    pub l_det: f64,
    pub l_sa: Option<f64>,
    pub l_sc: Option<f64>,
    pub total: f64,
}

impl Metrics {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialize")
    }
}

#[derive(Default)]
struct SampleStats {
    det_inter: Vec<u64>,
    det_union: Vec<u64>,
    resp: Option<(Vec<u64>, Vec<u64>)>,
    /// (sum |err|, sum dy, sum dx, object feature pixels)
    offsets: Option<(f64, f64, f64, u64)>,
    losses: LossValues,
}

fn iou(inter: &[u64], union: &[u64]) -> Vec<f64> {
    inter
        .iter()
        .zip(union)
        .map(|(&i, &u)| if u == 0 { 0.0 } else { i as f64 / u as f64 })
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Feature pixels whose `DOWNSAMPLE²` image block is at least half covered
/// by one object, with that object's shift in feature pixels.
pub fn object_feature_pixels(sample: &Sample) -> Vec<(usize, (f64, f64))> {
    let size = sample.image_size();
    let fs = size / DOWNSAMPLE;
    let plane = size * size;
    let masks = sample.masks_ir.tensor().data();
    let mut out = Vec::new();
    for fy in 0..fs {
        for fx in 0..fs {
            let (y0, x0) = (fy * DOWNSAMPLE, fx * DOWNSAMPLE);
            for o in &sample.objects {
                let [by0, bx0, by1, bx1] = o.bbox;
                let mut covered = 0;
                for y in y0.max(by0)..(y0 + DOWNSAMPLE).min(by1) {
                    for x in x0.max(bx0)..(x0 + DOWNSAMPLE).min(bx1) {
                        if masks[o.category * plane + y * size + x] == 1.0 {
                            covered += 1;
                        }
                    }
                }
                if 2 * covered >= DOWNSAMPLE * DOWNSAMPLE {
                    let d = DOWNSAMPLE as f64;
                    out.push((fy * fs + fx, (o.shift.0 as f64 / d, o.shift.1 as f64 / d)));
                    break;
                }
            }
        }
    }
    out
}

fn sample_stats(
    model: &Model,
    sample: &Sample,
    stage: Stage,
    weights: LossWeights,
) -> Result<SampleStats> {
    let n = model.config.n_categories;
    if sample.n_categories() != n {
        return Err(Error::Validation(format!(
            "dataset has {} categories, checkpoint has {n}",
            sample.n_categories()
        )));
    }
    let input = SampleInputs::<f32>::new(sample)?;
    let tape = Tape::new();
    let bound = model.params.bind(&tape, |_| false);
    let out = forward(
        &model.config,
        &bound,
        model.embeddings.matrix(),
        &input,
        stage,
        weights,
    )?;
    let mut stats = SampleStats {
        losses: LossValues::new(
            out.l_det.item().into(),
            out.l_sa.map(|v| v.item().into()),
            out.l_sc.map(|v| v.item().into()),
            weights,
        ),
        det_inter: vec![0; n],
        det_union: vec![0; n],
        ..SampleStats::default()
    };

    let pred = argmax_axis(&out.logits.value(), 0)?;
    for (p, &t) in pred.iter().zip(&input.labels) {
        for c in 1..=n {
            let (a, b) = (*p == c, t == c);
            stats.det_inter[c - 1] += (a && b) as u64;
            stats.det_union[c - 1] += (a || b) as u64;
        }
    }

    if let Some(maps) = &out.maps_ir {
        let resp = maps.response.value();
        let mut inter = vec![0; n];
        let mut union = vec![0; n];
        let plane = resp.numel() / n;
        let truth = input.masks_ir.tensor().data();
        for c in 0..n {
            for p in c * plane..(c + 1) * plane {
                let (a, b) = (resp.data()[p] > RESPONSE_THRESHOLD, truth[p] == 1.0);
                inter[c] += (a && b) as u64;
                union[c] += (a || b) as u64;
            }
        }
        stats.resp = Some((inter, union));
    }

    if let Some(offsets) = out.offsets {
        let (dy, dx) = mean_offsets(&offsets.value());
        let (mut err, mut sy, mut sx, mut count) = (0.0, 0.0, 0.0, 0);
        for (p, (ty, tx)) in object_feature_pixels(sample) {
            let (py, px) = (f64::from(dy.data()[p]), f64::from(dx.data()[p]));
            err += ((py - ty).abs() + (px - tx).abs()) / 2.0;
            sy += py;
            sx += px;
            count += 1;
        }
        stats.offsets = Some((err, sy, sx, count));
    }
    Ok(stats)
}

/// Metrics of `model` on `samples`, running the forward pass of `stage`.
/// Per-sample statistics are reduced in sample order, so the result does
/// not depend on `threads`.
pub fn evaluate(
    model: &Model,
    samples: &[Sample],
    stage: Stage,
    weights: LossWeights,
    threads: usize,
) -> Result<Metrics> {
    if samples.is_empty() {
        return Err(Error::Validation(
            "cannot evaluate on an empty dataset".into(),
        ));
    }
    let stats = parallel_map(samples, threads, |s| sample_stats(model, s, stage, weights))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let n = model.config.n_categories;
    let mut det_inter = vec![0; n];
    let mut det_union = vec![0; n];
    let mut resp: Option<(Vec<u64>, Vec<u64>)> = None;
    let mut offsets: Option<(f64, f64, f64, u64)> = None;
    for s in &stats {
        for c in 0..n {
            det_inter[c] += s.det_inter[c];
            det_union[c] += s.det_union[c];
        }
        if let Some((i, u)) = &s.resp {
            let acc = resp.get_or_insert_with(|| (vec![0; n], vec![0; n]));
            for c in 0..n {
                acc.0[c] += i[c];
                acc.1[c] += u[c];
            }
        }
        if let Some((e, y, x, k)) = s.offsets {
            let acc = offsets.get_or_insert((0.0, 0.0, 0.0, 0));
            acc.0 += e;
            acc.1 += y;
            acc.2 += x;
            acc.3 += k;
        }
    }
    let per_category_iou = iou(&det_inter, &det_union);
    let ir_response_iou = resp.map(|(i, u)| iou(&i, &u));
    let offset_avg = |f: fn(&(f64, f64, f64, u64)) -> f64| {
        offsets.filter(|o| o.3 > 0).map(|o| f(&o) / o.3 as f64)
    };
    let losses: Vec<LossValues> = stats.iter().map(|s| s.losses).collect();
    let losses = LossValues::mean(&losses, weights);
    Ok(Metrics {
        variant: model.config.variant.to_string(),
        stage: stage.number(),
        samples: samples.len(),
        mean_iou: mean(&per_category_iou),
        per_category_iou,
        ir_response_mean_iou: ir_response_iou.as_deref().map(mean),
        ir_response_iou,
        offset_mae: offset_avg(|o| o.0),
        mean_offset_dy: offset_avg(|o| o.1),
        mean_offset_dx: offset_avg(|o| o.2),
        l_det: losses.l_det,
        l_sa: losses.l_sa,
        l_sc: losses.l_sc,
        total: losses.total,
    })
}

/// Per-sample maps for inspection.
pub struct Inspection {
    /// IR similarity responses `[n, H, W]`; SAM only.
    pub ir_response: Option<Tensor<f32>>,
    pub rgb_response: Option<Tensor<f32>>,
    /// Tap-mean `(Δy, Δx)`, each `[h, w]`; ESM in stage two only.
    pub offsets: Option<(Tensor<f32>, Tensor<f32>)>,
    /// ISM winning slots `[h·w]` and the two consistency vectors.
    pub best_index: Option<Tensor<f32>>,
    pub v_ir_to_rgb: Option<Tensor<f32>>,
    pub v_rgb_to_ir: Option<Tensor<f32>>,
}

pub fn inspect(model: &Model, sample: &Sample, stage: Stage) -> Result<Inspection> {
    let input = SampleInputs::<f32>::new(sample)?;
    let tape = Tape::new();
    let bound = model.params.bind(&tape, |_| false);
    let out = forward(
        &model.config,
        &bound,
        model.embeddings.matrix(),
        &input,
        stage,
        LossWeights::default(),
    )?;
    let value = |v: crate::tensor::Var<'_, f32>| (*v.value()).clone();
    Ok(Inspection {
        ir_response: out.maps_ir.map(|m| value(m.response)),
        rgb_response: out.maps_rgb.map(|m| value(m.response)),
        offsets: out.offsets.map(|o| mean_offsets(&o.value())),
        best_index: out.consistency.as_ref().map(|c| {
            let idx: Vec<f32> = c.best_index.iter().map(|&k| k as f32).collect();
            Tensor::new([idx.len()], idx).expect("shape")
        }),
        v_ir_to_rgb: out.consistency.as_ref().map(|c| value(c.v_ir_to_rgb)),
        v_rgb_to_ir: out.consistency.as_ref().map(|c| value(c.v_rgb_to_ir)),
    })
}
