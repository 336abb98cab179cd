use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::synth::Sample;
use crate::tensor::optim::{Sgd, SgdConfig};
use crate::tensor::params::name_seed;
use crate::tensor::{Tape, Tensor};

use super::config::RunConfig;
use super::model::{forward, trainable_in, LossWeights, Model, SampleInputs, Stage};
use super::parallel_map;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainOptions {
    pub stage: Stage,
    pub epochs: usize,
    pub batch_size: usize,
    pub sgd: SgdConfig,
    pub seed: u64,
    pub weights: LossWeights,
    /// Worker threads for per-sample passes; results do not depend on it.
    pub threads: usize,
}

impl TrainOptions {
    pub fn from_run(run: &RunConfig, stage: Stage, threads: usize) -> Self {
        let lr = match stage {
            Stage::One => run.lr_stage1,
            Stage::Two => run.lr_stage2,
        };
        Self {
            stage,
            epochs: run.epochs,
            batch_size: run.batch_size,
            sgd: SgdConfig {
                lr,
                momentum: run.momentum,
                weight_decay: run.weight_decay,
            },
            seed: run.seed,
            weights: LossWeights {
                det: run.w_det,
                sa: run.w_sa,
                sc: run.w_sc,
            },
            threads,
        }
    }
}

/// Loss components of one pass or one batch mean; absent modules are `None`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossValues {
    pub l_det: f64,
    pub l_sa: Option<f64>,
    pub l_sc: Option<f64>,
    /// `w_det·l_det + w_sa·l_sa + w_sc·l_sc` over the present components.
    pub total: f64,
}

impl LossValues {
    pub fn new(l_det: f64, l_sa: Option<f64>, l_sc: Option<f64>, w: LossWeights) -> Self {
        let total = w.det * l_det + l_sa.map_or(0.0, |v| w.sa * v) + l_sc.map_or(0.0, |v| w.sc * v);
        Self {
            l_det,
            l_sa,
            l_sc,
            total,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite()
            && self.l_det.is_finite()
            && self.l_sa.is_none_or(f64::is_finite)
            && self.l_sc.is_none_or(f64::is_finite)
    }

    /// Component-wise mean in slice order.
    pub fn mean(values: &[LossValues], w: LossWeights) -> Self {
        let n = values.len().max(1) as f64;
        let avg = |f: &dyn Fn(&LossValues) -> Option<f64>| -> Option<f64> {
            let mut acc = 0.0;
            for v in values {
                acc += f(v)?;
            }
            Some(acc / n)
        };
        Self::new(
            avg(&|v| Some(v.l_det)).unwrap_or(0.0),
            avg(&|v| v.l_sa),
            avg(&|v| v.l_sc),
            w,
        )
    }
}

/// One line of the JSON-lines loss log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepLog {
    pub epoch: usize,
    pub step: usize,
    #[serde(flatten)]
    pub losses: LossValues,
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub steps: Vec<StepLog>,
    /// Batch-mean losses averaged per epoch.
    pub epoch_means: Vec<LossValues>,
}

/// Forward and backward for one sample; returns parameter gradients.
pub fn sample_pass(
    model: &Model,
    input: &SampleInputs<f32>,
    stage: Stage,
    weights: LossWeights,
) -> Result<(BTreeMap<String, Tensor<f32>>, LossValues)> {
    let tape = Tape::new();
    let bound = model.params.bind(&tape, trainable_in(stage));
    let out = forward(
        &model.config,
        &bound,
        model.embeddings.matrix(),
        input,
        stage,
        weights,
    )?;
    let losses = LossValues::new(
        out.l_det.item().into(),
        out.l_sa.map(|v| v.item().into()),
        out.l_sc.map(|v| v.item().into()),
        weights,
    );
    if !losses.is_finite() {
        return Ok((BTreeMap::new(), losses));
    }
    tape.backward(out.total)?;
    Ok((bound.grads(), losses))
}

/// Runs `opts.epochs` epochs of minibatch SGD over `samples`, writing one
/// JSON line per step to `log`. The batch gradient is the mean of
/// per-sample gradients, summed in batch order.
pub fn train_stage(
    model: &mut Model,
    samples: &[Sample],
    opts: &TrainOptions,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainReport> {
    if opts.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let inputs = samples
        .iter()
        .map(SampleInputs::new)
        .collect::<Result<Vec<_>>>()?;
    let mut sgd = Sgd::new(opts.sgd);
    let mut report = TrainReport::default();
    let mut step = 0;
    for epoch in 1..=opts.epochs {
        let mut order: Vec<usize> = (0..inputs.len()).collect();
        let stream = format!("stage{}/epoch{epoch}", opts.stage.number());
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(name_seed(
            opts.seed, &stream,
        )));
        let mut epoch_losses = Vec::new();
        for batch in order.chunks(opts.batch_size) {
            step += 1;
            let frozen: &Model = model;
            let results = parallel_map(batch, opts.threads, |&i| {
                sample_pass(frozen, &inputs[i], opts.stage, opts.weights)
            })
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
            let losses: Vec<LossValues> = results.iter().map(|r| r.1).collect();
            let mean = LossValues::mean(&losses, opts.weights);
            if !mean.is_finite() {
                return Err(Error::NonFinite { epoch, step });
            }
            let mut grads: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
            for (g, _) in results {
                for (name, t) in g {
                    match grads.get_mut(&name) {
                        Some(acc) => acc.add_assign(&t),
                        None => {
                            grads.insert(name, t);
                        }
                    }
                }
            }
            let inv = 1.0 / batch.len() as f32;
            for t in grads.values_mut() {
                t.data_mut().iter_mut().for_each(|v| *v *= inv);
            }
            sgd.step(&mut model.params, &grads);
            if model.params.iter().any(|(_, t)| !t.is_finite()) {
                return Err(Error::NonFinite { epoch, step });
            }
            let entry = StepLog {
                epoch,
                step,
                losses: mean,
            };
            if let Some(w) = log.as_deref_mut() {
                let line = serde_json::to_string(&entry).expect("serializable log entry");
                writeln!(w, "{line}").map_err(|e| Error::io("loss log", e))?;
            }
            epoch_losses.push(mean);
            report.steps.push(entry);
        }
        report
            .epoch_means
            .push(LossValues::mean(&epoch_losses, opts.weights));
    }
    Ok(report)
}
