//! Central finite-difference verification of tape gradients at `f64`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::Result;

#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    pub step: f64,
    pub rtol: f64,
    pub atol: f64,
    /// Upper bound on probed coordinates per input; `None` probes all.
    pub max_coords: Option<usize>,
    /// Seeds the coordinate subset when `max_coords` applies.
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            step: 1e-5,
            rtol: 1e-4,
            atol: 1e-7,
            max_coords: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mismatch {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    /// Largest relative error among coordinates outside the absolute floor.
    pub max_rel_error: f64,
    pub failures: Vec<Mismatch>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.checked > 0
    }
}

fn probe_indices(numel: usize, cfg: &GradCheck, input: usize) -> Vec<usize> {
    match cfg.max_coords {
        Some(k) if k < numel => {
            let mut rng =
                ChaCha8Rng::seed_from_u64(cfg.seed ^ (input as u64).wrapping_mul(0x9E37_79B9));
            let mut idx = rand::seq::index::sample(&mut rng, numel, k).into_vec();
            idx.sort_unstable();
            idx
        }
        _ => (0..numel).collect(),
    }
}

/// Compares the tape gradient of the scalar `f(inputs)` against central
/// differences, for every input tensor.
pub fn check<F>(cfg: &GradCheck, inputs: &[Tensor<f64>], f: F) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let analytic: Vec<Tensor<f64>> = {
        let tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let root = f(&tape, &vars)?;
        tape.backward(root)?;
        vars.iter()
            .map(|v| v.grad().unwrap_or_else(|| Tensor::zeros(v.shape())))
            .collect()
    };

    let eval = |probe: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<_> = probe.iter().map(|t| tape.constant(t.clone())).collect();
        Ok(f(&tape, &vars)?.item())
    };

    let mut report = GradCheckReport::default();
    let mut probe = inputs.to_vec();
    for (which, input) in inputs.iter().enumerate() {
        for index in probe_indices(input.numel(), cfg, which) {
            let orig = input.data()[index];
            probe[which].data_mut()[index] = orig + cfg.step;
            let plus = eval(&probe)?;
            probe[which].data_mut()[index] = orig - cfg.step;
            let minus = eval(&probe)?;
            probe[which].data_mut()[index] = orig;

            let numeric = (plus - minus) / (2.0 * cfg.step);
            let a = analytic[which].data()[index];
            let diff = (a - numeric).abs();
            report.checked += 1;
            if diff <= cfg.atol {
                continue;
            }
            let rel = diff / a.abs().max(numeric.abs());
            report.max_rel_error = report.max_rel_error.max(rel);
            if rel > cfg.rtol {
                report.failures.push(Mismatch {
                    input: which,
                    index,
                    analytic: a,
                    numeric,
                });
            }
        }
    }
    Ok(report)
}
