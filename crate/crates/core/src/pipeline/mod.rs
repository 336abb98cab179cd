//! Backbone → SAM → ESM → ISM → fusion → head, the two-stage schedule,
//! evaluation and the module ablation.

pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod model;
pub mod train;

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::semantics::{load_embeddings, make_test_embeddings, SemanticEmbeddings};
use crate::synth::Sample;

pub use checkpoint::{Checkpoint, TrainingState};
pub use config::RunConfig;
pub use eval::{evaluate, inspect, Inspection, Metrics};
pub use model::{forward, LossWeights, Model, ModelConfig, Stage, Variant};
pub use train::{train_stage, LossValues, StepLog, TrainOptions, TrainReport};

/// Maps `f` over `items` on up to `threads` scoped threads, keeping item
/// order in the output.
pub fn parallel_map<I, O, F>(items: &[I], threads: usize, f: F) -> Vec<O>
where
    I: Sync,
    O: Send,
    F: Fn(&I) -> O + Sync,
{
    let threads = threads.clamp(1, items.len().max(1));
    if threads == 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    std::thread::scope(|scope| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| scope.spawn(|| part.iter().map(&f).collect::<Vec<O>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker thread panicked"))
            .collect()
    })
}

/// Embeddings named by `run.embeddings`, or seeded orthonormal test
/// embeddings when that is empty.
pub fn embeddings_for(run: &RunConfig) -> Result<SemanticEmbeddings<f32>> {
    let e = if run.embeddings.is_empty() {
        make_test_embeddings(run.n_categories, run.text_dim, run.seed)?
    } else {
        load_embeddings(Path::new(&run.embeddings))?
    };
    if e.len() != run.n_categories || e.dim() != run.text_dim {
        return Err(Error::Validation(format!(
            "embeddings are {}×{}, configuration expects {}×{}",
            e.len(),
            e.dim(),
            run.n_categories,
            run.text_dim
        )));
    }
    Ok(e)
}

pub fn model_config(run: &RunConfig) -> ModelConfig {
    ModelConfig {
        variant: run.variant,
        n_categories: run.n_categories,
        visual_dim: run.visual_dim,
        text_dim: run.text_dim,
        shared_dim: run.shared_dim,
        gate: run.gate,
    }
}

/// First `max_samples` of `samples` (all when 0).
pub fn limit(samples: &[Sample], max_samples: usize) -> &[Sample] {
    if max_samples == 0 {
        samples
    } else {
        &samples[..max_samples.min(samples.len())]
    }
}

/// Trains one stage from `init` (a fresh model when `None`, which stage two
/// rejects) and returns the resulting checkpoint.
pub fn run_stage(
    run: &RunConfig,
    stage: Stage,
    init: Option<Checkpoint>,
    samples: &[Sample],
    threads: usize,
    log: Option<&mut dyn Write>,
) -> Result<(Checkpoint, TrainReport)> {
    let mut model = match (stage, init) {
        (Stage::One, None) => Model::new(model_config(run), embeddings_for(run)?, run.seed)?,
        (Stage::Two, None) => {
            return Err(Error::Usage(
                "stage 2 needs a stage-1 checkpoint to start from".into(),
            ))
        }
        (_, Some(ckpt)) => {
            if stage == Stage::Two && ckpt.state.stage != Stage::One {
                return Err(Error::Usage(format!(
                    "stage 2 must start from a stage-1 checkpoint, got stage {}",
                    ckpt.state.stage.number()
                )));
            }
            ckpt.model
        }
    };
    if let Some(n) = samples.first().map(Sample::n_categories) {
        if n != model.config.n_categories {
            return Err(Error::Validation(format!(
                "dataset has {n} categories, model has {}",
                model.config.n_categories
            )));
        }
    }
    let opts = TrainOptions::from_run(run, stage, threads);
    let report = train_stage(&mut model, limit(samples, run.max_samples), &opts, log)?;
    let state = TrainingState {
        stage,
        epoch: opts.epochs,
        seed: run.seed,
        sgd: opts.sgd,
        batch_size: opts.batch_size,
        weights: opts.weights,
    };
    Ok((Checkpoint { model, state }, report))
}

/// Both stages back to back.
pub fn run_two_stage(
    run: &RunConfig,
    samples: &[Sample],
    threads: usize,
) -> Result<(Checkpoint, TrainReport, TrainReport)> {
    let (first, r1) = run_stage(run, Stage::One, None, samples, threads, None)?;
    let (second, r2) = run_stage(run, Stage::Two, Some(first), samples, threads, None)?;
    Ok((second, r1, r2))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    pub metrics: Metrics,
}

/// Trains baseline, +SAM, +SAM+ISM and the full model under the same seed
/// and two-stage budget, and evaluates each on `eval`.
pub fn ablate(
    run: &RunConfig,
    train: &[Sample],
    eval: &[Sample],
    threads: usize,
) -> Result<Vec<AblationRow>> {
    Variant::ALL
        .iter()
        .map(|&variant| {
            let cfg = RunConfig {
                variant,
                ..run.clone()
            };
            let (ckpt, _, _) = run_two_stage(&cfg, train, threads)?;
            let metrics = evaluate(&ckpt.model, eval, Stage::Two, ckpt.state.weights, threads)?;
            Ok(AblationRow { variant, metrics })
        })
        .collect()
}

/// Fixed-width table, one row per variant in ablation order.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
    let mut out = format!(
        "{:<10} {:>8} {:>8} {:>8} {:>8} {:>10}\n",
        "variant", "mean_iou", "l_det", "l_sa", "l_sc", "offset_mae"
    );
    for r in rows {
        let m = &r.metrics;
        out.push_str(&format!(
            "{:<10} {:>8.4} {:>8.4} {:>8} {:>8} {:>10}\n",
            r.variant.label(),
            m.mean_iou,
            m.l_det,
            opt(m.l_sa),
            opt(m.l_sc),
            opt(m.offset_mae)
        ));
    }
    out
}
