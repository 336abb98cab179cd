//! Central finite-difference checks of every differentiable operation and
//! of the composed losses, 20 seeded instances each at `f64`.

use lpanet::esm::{self, deform_conv, enhance, EsmConfig, GateReduce};
use lpanet::ism::{cross_attend, extract_consistency, ism_forward, sc_loss, window_sample};
use lpanet::pipeline::model::{forward, trainable_in, ForwardOutput, SampleInputs};
use lpanet::pipeline::{LossWeights, ModelConfig, Stage, Variant};
use lpanet::sam::{self, MaskSet, SamConfig};
use lpanet::synth::{generate_scene, SceneConfig};
use lpanet::tensor::gradcheck::{check, GradCheck};
use lpanet::tensor::ops;
use lpanet::tensor::ParamStore;
use lpanet::{Result, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const INSTANCES: u64 = 20;

fn rng(seed: u64, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x1000_0000_01b3) ^ salt)
}

fn uniform(r: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| r.random_range(lo..hi))
}

/// Values bounded away from zero, for kinks at the origin.
fn off_zero(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let v: f64 = r.random_range(0.05..1.0);
        if r.random_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

/// Fractional values whose distance to the nearest integer exceeds 0.1.
fn off_integer(r: &mut ChaCha8Rng, shape: &[usize], lo: i32, hi: i32) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        f64::from(r.random_range(lo..hi)) + r.random_range(0.1..0.9)
    })
}

/// Scalarizes `out` with fixed random weights so every output element
/// contributes a distinct amount.
fn contract<'t>(tape: &'t Tape<f64>, out: Var<'t, f64>, seed: u64) -> Result<Var<'t, f64>> {
    let w = uniform(&mut rng(seed, 0xC0), &out.shape(), -1.0, 1.0);
    Ok(ops::sum(ops::mul(out, tape.constant(w))?))
}

fn run<F>(name: &str, inputs: impl Fn(u64) -> Vec<Tensor<f64>>, f: F)
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>], u64) -> Result<Var<'t, f64>>,
{
    for seed in 0..INSTANCES {
        let report = check(&GradCheck::default(), &inputs(seed), |tape, v| {
            f(tape, v, seed)
        })
        .unwrap();
        assert!(
            report.passed(),
            "{name}, seed {seed}: {} of {} coordinates off, first {:?}",
            report.failures.len(),
            report.checked,
            report.failures.first()
        );
    }
}

pub fn elementwise() {
    run(
        "add/sub/mul/scale",
        |s| {
            let mut r = rng(s, 1);
            vec![
                uniform(&mut r, &[2, 3, 4], -2.0, 2.0),
                uniform(&mut r, &[2, 3, 4], -2.0, 2.0),
            ]
        },
        |t, v, s| {
            let a = ops::add(v[0], v[1])?;
            let b = ops::sub(v[0], ops::scale(v[1], 0.7))?;
            contract(t, ops::mul(a, b)?, s)
        },
    );
    run(
        "sigmoid",
        |s| vec![uniform(&mut rng(s, 2), &[3, 5], -4.0, 4.0)],
        |t, v, s| contract(t, ops::sigmoid(v[0]), s),
    );
    run(
        "relu",
        |s| vec![off_zero(&mut rng(s, 3), &[4, 4])],
        |t, v, s| contract(t, ops::relu(v[0]), s),
    );
    run(
        "add_channel_bias",
        |s| {
            let mut r = rng(s, 4);
            vec![
                uniform(&mut r, &[3, 2, 2], -1.0, 1.0),
                uniform(&mut r, &[3], -1.0, 1.0),
            ]
        },
        |t, v, s| contract(t, ops::add_channel_bias(v[0], v[1])?, s),
    );
    run(
        "scale_by_map",
        |s| {
            let mut r = rng(s, 5);
            vec![
                uniform(&mut r, &[3, 4, 5], -1.0, 1.0),
                uniform(&mut r, &[4, 5], -1.0, 1.0),
            ]
        },
        |t, v, s| contract(t, ops::scale_by_map(v[0], v[1])?, s),
    );
}

pub fn linear_algebra() {
    run(
        "matmul/transpose",
        |s| {
            let mut r = rng(s, 10);
            vec![
                uniform(&mut r, &[3, 4], -1.0, 1.0),
                uniform(&mut r, &[5, 4], -1.0, 1.0),
            ]
        },
        |t, v, s| contract(t, ops::matmul(v[0], ops::transpose(v[1])?)?, s),
    );
    run(
        "linear",
        |s| {
            let mut r = rng(s, 11);
            vec![
                uniform(&mut r, &[6, 3], -1.0, 1.0),
                uniform(&mut r, &[3, 4], -1.0, 1.0),
                uniform(&mut r, &[4], -1.0, 1.0),
            ]
        },
        |t, v, s| contract(t, ops::linear(v[0], v[1], v[2])?, s),
    );
}

pub fn reductions_and_shapes() {
    run(
        "sum/mean",
        |s| vec![uniform(&mut rng(s, 20), &[3, 4], -1.0, 1.0)],
        |_, v, _| {
            ops::add(
                ops::scale(ops::sum(v[0]), 0.3),
                ops::mean(ops::mul(v[0], v[0])?),
            )
        },
    );
    for axis in 0..3 {
        run(
            "sum_axis/mean_axis",
            |s| vec![uniform(&mut rng(s, 21), &[2, 3, 4], -1.0, 1.0)],
            |t, v, s| {
                let a = ops::sum_axis(v[0], axis)?;
                let b = ops::mean_axis(v[0], axis)?;
                contract(t, ops::mul(a, b)?, s)
            },
        );
        run(
            "max_axis",
            |s| {
                // a random permutation keeps every maximum unique
                let mut r = rng(s, 22);
                let mut vals: Vec<f64> = (0..24).map(|i| i as f64 * 0.1).collect();
                for i in (1..vals.len()).rev() {
                    vals.swap(i, r.random_range(0..=i));
                }
                vec![Tensor::new([2, 3, 4], vals).unwrap()]
            },
            |t, v, s| contract(t, ops::max_axis(v[0], axis)?, s),
        );
    }
    run(
        "reshape/concat",
        |s| {
            let mut r = rng(s, 23);
            vec![
                uniform(&mut r, &[2, 3, 2], -1.0, 1.0),
                uniform(&mut r, &[2, 3, 3], -1.0, 1.0),
            ]
        },
        |t, v, s| {
            let c = ops::concat(&[v[0], v[1]], 2)?;
            let c = ops::concat(
                &[
                    ops::reshape(c, &[3, 2, 5])?,
                    ops::reshape(v[1], &[3, 2, 3])?,
                ],
                2,
            )?;
            contract(t, c, s)
        },
    );
    run(
        "gather",
        |s| vec![uniform(&mut rng(s, 24), &[3, 4], -1.0, 1.0)],
        |t, v, s| {
            let mut r = rng(s, 25);
            let idx: Vec<usize> = (0..15).map(|_| r.random_range(0..12)).collect();
            contract(t, ops::gather(v[0], &idx)?, s)
        },
    );
}

pub fn softmax_family() {
    for axis in 0..2 {
        run(
            "softmax",
            |s| vec![uniform(&mut rng(s, 30), &[4, 5], -2.0, 2.0)],
            |t, v, s| contract(t, ops::softmax(v[0], axis)?, s),
        );
    }
    run(
        "masked_softmax_rows",
        |s| vec![uniform(&mut rng(s, 31), &[4, 6], -2.0, 2.0)],
        |t, v, s| {
            let mut r = rng(s, 32);
            let valid: Vec<bool> = (0..24).map(|i| i % 6 == 0 || r.random_bool(0.7)).collect();
            contract(t, ops::masked_softmax_rows(v[0], &valid)?, s)
        },
    );
}

pub fn losses() {
    run(
        "bce_loss",
        |s| vec![uniform(&mut rng(s, 40), &[2, 3, 3], 0.05, 0.95)],
        |_, v, s| {
            let mut r = rng(s, 41);
            let target = Tensor::from_fn([2, 3, 3], |_| if r.random_bool(0.4) { 1.0 } else { 0.0 });
            ops::bce_loss(v[0], &target)
        },
    );
    run(
        "kl_div",
        |s| {
            let mut r = rng(s, 42);
            vec![
                uniform(&mut r, &[7], -2.0, 2.0),
                uniform(&mut r, &[7], -2.0, 2.0),
            ]
        },
        |_, v, _| ops::kl_div(ops::softmax(v[0], 0)?, ops::softmax(v[1], 0)?),
    );
    run(
        "cross_entropy",
        |s| vec![uniform(&mut rng(s, 43), &[4, 3, 5], -2.0, 2.0)],
        |_, v, s| {
            let mut r = rng(s, 44);
            let labels: Vec<usize> = (0..15).map(|_| r.random_range(0..4)).collect();
            ops::cross_entropy(v[0], &labels)
        },
    );
}

pub fn convolution_and_sampling() {
    for (stride, pad) in [(1, 0), (1, 1), (2, 1)] {
        run(
            "conv2d",
            |s| {
                let mut r = rng(s, 50);
                vec![
                    uniform(&mut r, &[2, 5, 5], -1.0, 1.0),
                    uniform(&mut r, &[3, 2, 3, 3], -1.0, 1.0),
                    uniform(&mut r, &[3], -1.0, 1.0),
                ]
            },
            |t, v, s| contract(t, ops::conv2d(v[0], v[1], Some(v[2]), stride, pad)?, s),
        );
    }
    for pad in [[0, 1, 0, 1], [1, 0, 1, 0]] {
        run(
            "conv2d_padded",
            |s| {
                let mut r = rng(s, 51);
                vec![
                    uniform(&mut r, &[2, 6, 6], -1.0, 1.0),
                    uniform(&mut r, &[2, 2, 3, 3], -1.0, 1.0),
                ]
            },
            |t, v, s| contract(t, ops::conv2d_padded(v[0], v[1], None, 2, pad)?, s),
        );
    }
    run(
        "bilinear_sample",
        |s| {
            let mut r = rng(s, 52);
            vec![
                uniform(&mut r, &[3, 4, 5], -1.0, 1.0),
                off_integer(&mut r, &[2], 0, 3),
            ]
        },
        |t, v, s| contract(t, ops::bilinear_sample(v[0], v[1])?, s),
    );
    run(
        "upsample_bilinear",
        |s| vec![uniform(&mut rng(s, 53), &[2, 3, 4], -1.0, 1.0)],
        |t, v, s| contract(t, ops::upsample_bilinear(v[0], 7, 9)?, s),
    );
}

pub fn deformable_convolution() {
    run(
        "deform_conv",
        |s| {
            let mut r = rng(s, 60);
            vec![
                uniform(&mut r, &[2, 5, 5], -1.0, 1.0),
                uniform(&mut r, &[3, 2, 3, 3], -1.0, 1.0),
                off_integer(&mut r, &[18, 5, 5], -2, 2),
            ]
        },
        |t, v, s| contract(t, deform_conv(v[0], v[1], v[2])?, s),
    );
    for reduce in [GateReduce::Max, GateReduce::Mean] {
        run(
            "enhance",
            |s| {
                let mut r = rng(s, 61);
                vec![
                    uniform(&mut r, &[4, 3, 3], -1.0, 1.0),
                    uniform(&mut r, &[3, 3, 3], 0.05, 0.95),
                ]
            },
            |t, v, s| contract(t, enhance(v[0], v[1], reduce)?, s),
        );
    }
    run(
        "estimate_offsets",
        |s| {
            let mut r = rng(s, 62);
            vec![
                uniform(&mut r, &[3, 4, 4], -1.0, 1.0),
                uniform(&mut r, &[3, 4, 4], -1.0, 1.0),
            ]
        },
        |t, v, s| {
            let params = random_params(
                |store| {
                    EsmConfig {
                        channels: 3,
                        gate: GateReduce::Max,
                    }
                    .init(store)
                },
                s,
            );
            let bound = params.bind(t, |_| false);
            contract(t, esm::estimate_offsets(&bound, v[0], v[1])?, s)
        },
    );
}

/// Parameters initialized by `init`, then overwritten with seeded noise so
/// zero-initialized tensors carry signal.
fn random_params(init: impl Fn(&mut ParamStore<f64>), seed: u64) -> ParamStore<f64> {
    let mut store = ParamStore::new();
    init(&mut store);
    let mut r = rng(seed, 0xABCD);
    let names: Vec<String> = store.names().cloned().collect();
    for name in names {
        let t = store.get_mut(&name).unwrap();
        t.data_mut()
            .iter_mut()
            .for_each(|v| *v = r.random_range(-0.5..0.5));
    }
    store
}

pub fn attention() {
    run(
        "window_sample",
        |s| vec![uniform(&mut rng(s, 70), &[3, 4, 3], -1.0, 1.0)],
        |t, v, s| contract(t, window_sample(v[0])?.keys, s),
    );
    run(
        "cross_attend",
        |s| {
            let mut r = rng(s, 71);
            vec![
                uniform(&mut r, &[4, 3, 4], -1.0, 1.0),
                uniform(&mut r, &[4, 3, 4], -1.0, 1.0),
            ]
        },
        |t, v, s| {
            let (agg, attn) = cross_attend(v[0], v[1])?;
            ops::add(contract(t, agg, s)?, contract(t, attn.weights, s + 1000)?)
        },
    );
}

pub fn semantic_alignment_loss() {
    let cfg = SamConfig {
        visual_dim: 3,
        text_dim: 5,
        shared_dim: 4,
    };
    run(
        "sa_loss",
        |s| {
            let mut r = rng(s, 80);
            vec![
                uniform(&mut r, &[3, 3, 3], -1.0, 1.0),
                uniform(&mut r, &[3, 3, 3], -1.0, 1.0),
                uniform(&mut r, &[2, 5], -1.0, 1.0),
            ]
        },
        |t, v, s| {
            let params = random_params(
                |store| {
                    cfg.init_visual(store, 0);
                    cfg.init_text(store, 0);
                },
                s,
            );
            let bound = params.bind(t, |_| false);
            let rgb = cfg.project_visual(&bound, sam::Modality::Rgb, v[0])?;
            let ir = cfg.project_visual(&bound, sam::Modality::Ir, v[1])?;
            let text = cfg.project_text(&bound, v[2])?;
            let mr = sam::similarity_maps(rgb, text, 6, 6)?;
            let mi = sam::similarity_maps(ir, text, 6, 6)?;
            let mut r = rng(s, 81);
            let mut mask = || {
                MaskSet::new(Tensor::from_fn([2, 6, 6], |_| {
                    if r.random_bool(0.3) {
                        1.0
                    } else {
                        0.0
                    }
                }))
                .unwrap()
            };
            let (m_rgb, m_ir) = (mask(), mask());
            sam::sa_loss(&mr, &mi, &m_rgb, &m_ir)
        },
    );
}

pub fn consistency_loss_with_frozen_indices() {
    run(
        "sc_loss",
        |s| {
            let mut r = rng(s, 90);
            vec![
                uniform(&mut r, &[4, 3, 4], -1.0, 1.0),
                uniform(&mut r, &[4, 3, 4], -1.0, 1.0),
            ]
        },
        |_, v, _| {
            let (_, a) = cross_attend(v[0], v[1])?;
            let (_, b) = cross_attend(v[1], v[0])?;
            sc_loss(&extract_consistency(&a, &b)?)
        },
    );
    run(
        "ism_forward",
        |s| {
            let mut r = rng(s, 91);
            vec![
                uniform(&mut r, &[4, 4, 3], -1.0, 1.0),
                uniform(&mut r, &[4, 4, 3], -1.0, 1.0),
            ]
        },
        |t, v, s| {
            let out = ism_forward(v[0], v[1])?;
            ops::add(out.loss, contract(t, out.aggregated_rgb, s)?)
        },
    );
}

/// Full model at `f64`: tape gradients of a loss against central
/// differences on a sample of coordinates of every trainable parameter.
fn check_model(
    variant: Variant,
    stage: Stage,
    which: for<'t> fn(&ForwardOutput<'t, f64>) -> Var<'t, f64>,
) {
    let scene = SceneConfig {
        image_size: 16,
        n_categories: 2,
        objects: (1, 2),
        object_size: (4, 7),
        global_shift: (0, 1),
        jitter: 1,
        ..SceneConfig::default()
    };
    let cfg = ModelConfig {
        variant,
        n_categories: 2,
        visual_dim: 3,
        text_dim: 5,
        shared_dim: 4,
        gate: GateReduce::Max,
    };
    let gc = GradCheck::default();
    for seed in 0..INSTANCES {
        let sample = generate_scene(&scene, seed).unwrap();
        let input = SampleInputs::<f64>::new(&sample).unwrap();
        let emb = uniform(&mut rng(seed, 100), &[2, 5], -1.0, 1.0);
        let mut params: ParamStore<f64> = cfg.init_params(seed);
        if stage == Stage::Two {
            // move ESM away from its identity start so offsets are fractional
            let mut r = rng(seed, 101);
            for name in params.names().cloned().collect::<Vec<_>>() {
                if name.starts_with("esm.") {
                    let t = params.get_mut(&name).unwrap();
                    t.data_mut()
                        .iter_mut()
                        .for_each(|v| *v += r.random_range(-0.05..0.05));
                }
            }
        }
        let weights = LossWeights {
            det: 1.0,
            sa: 0.7,
            sc: 1.3,
        };
        let loss_at = |p: &ParamStore<f64>| -> f64 {
            let tape = Tape::new();
            let bound = p.bind(&tape, |_| false);
            let out = forward(&cfg, &bound, &emb, &input, stage, weights).unwrap();
            which(&out).item()
        };
        let tape = Tape::new();
        let bound = params.bind(&tape, trainable_in(stage));
        let out = forward(&cfg, &bound, &emb, &input, stage, weights).unwrap();
        tape.backward(which(&out)).unwrap();
        let grads = bound.grads();

        let mut r = rng(seed, 102);
        let mut probe = params.clone();
        for (name, g) in &grads {
            for _ in 0..3 {
                let i = r.random_range(0..g.numel());
                let orig = params.get(name).unwrap().data()[i];
                probe.get_mut(name).unwrap().data_mut()[i] = orig + gc.step;
                let plus = loss_at(&probe);
                probe.get_mut(name).unwrap().data_mut()[i] = orig - gc.step;
                let minus = loss_at(&probe);
                probe.get_mut(name).unwrap().data_mut()[i] = orig;
                let numeric = (plus - minus) / (2.0 * gc.step);
                let analytic = g.data()[i];
                let diff = (analytic - numeric).abs();
                let rel = diff / analytic.abs().max(numeric.abs());
                assert!(
                    diff <= gc.atol || rel <= gc.rtol,
                    "{variant} {stage:?} seed {seed} {name}[{i}]: analytic {analytic}, numeric {numeric}"
                );
            }
        }
    }
}

pub fn detection_loss() {
    check_model(Variant::Baseline, Stage::One, |o| o.l_det);
}

pub fn total_loss_stage_one() {
    check_model(Variant::Full, Stage::One, |o| o.total);
}

pub fn total_loss_stage_two() {
    check_model(Variant::Full, Stage::Two, |o| o.total);
}

pub const CASES: &[(&str, fn())] = &[
    ("elementwise", elementwise),
    ("linear_algebra", linear_algebra),
    ("reductions_and_shapes", reductions_and_shapes),
    ("softmax_family", softmax_family),
    ("losses", losses),
    ("convolution_and_sampling", convolution_and_sampling),
    ("deformable_convolution", deformable_convolution),
    ("attention", attention),
    ("semantic_alignment_loss", semantic_alignment_loss),
    (
        "consistency_loss_with_frozen_indices",
        consistency_loss_with_frozen_indices,
    ),
    ("detection_loss", detection_loss),
    ("total_loss_stage_one", total_loss_stage_one),
    ("total_loss_stage_two", total_loss_stage_two),
];
