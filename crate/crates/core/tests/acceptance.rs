//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any FAIL.
//!
//! Run with `cargo test --test acceptance`; set `ACCEPTANCE_ONLY=3,5` to run a subset.

use std::f64::consts::FRAC_PI_2;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use spikeflow::dataset::SyntheticSuite;
use spikeflow::events::{Event, FlowMap, HistogramSequence, Polarity, PolarityMode, SensorDims};
use spikeflow::gradcheck;
use spikeflow::layers::{Downsample, FireMode, IfActivation, ParamStore, SeparableConv, SkipMode};
use spikeflow::model::{Encoding, Model, ModelConfig};
use spikeflow::objectives::{aae, aee, loss_ang, loss_mod, loss_relative, LossWeights, AAE_MIN_NORM, EPSILON};
use spikeflow::storage;
use spikeflow::training::{Sample, TrainConfig, Trainer};
use spikeflow::{Padding, Tape, Tensor};

const PARAMETER_TARGET: f64 = 1.22e6;
const PARAMETER_TOLERANCE: f64 = 0.10;
const FROZEN_PARAMETER_COUNT: usize = 1_199_346;
const GRADCHECK_TOLERANCE: f64 = 1e-4;
const SEPARABLE_TOLERANCE: f64 = 1e-12;
const SEPARABLE_SHAPES: usize = 120;
const ANGLE_TOLERANCE: f64 = 1e-6;
const AAE_TOLERANCE_DEG: f64 = 1e-4;
/// Validation AEE must fall below this fraction of the zero-flow baseline.
const LEARNING_FRACTION: f64 = 0.2;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

type Criterion = (usize, &'static str, fn() -> Outcome);

fn main() {
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let criteria: [Criterion; 10] = [
        (1, "parameter-count anchor", criterion_1),
        (2, "temporal collapse", criterion_2),
        (3, "gradient correctness", criterion_3),
        (4, "surrogate consistency", criterion_4),
        (5, "separable-conv oracle", criterion_5),
        (6, "loss identities", criterion_6),
        (7, "zero-activity contract", criterion_7),
        (8, "synthetic end-to-end learning", criterion_8),
        (9, "ablation directions", criterion_9),
        (10, "determinism and round-trips", criterion_10),
    ];
    let mut failed = Vec::new();
    for (n, name, f) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {n:>2} PASS {name} ({secs:.1}s): {detail}"),
            Err(detail) => {
                println!("criterion {n:>2} FAIL {name} ({secs:.1}s): {detail}");
                failed.push(n);
            }
        }
    }
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}

fn criterion_1() -> Outcome {
    let count = |c: ModelConfig| Model::<f32>::build(c, 0).map(|m| m.count_parameters()).map_err(|e| e.to_string());
    let default = count(ModelConfig::default())?;
    let deviation = default as f64 / PARAMETER_TARGET - 1.0;
    ensure(deviation.abs() <= PARAMETER_TOLERANCE, || format!("{default} is {:.1}% off", 100.0 * deviation))?;
    ensure(default == FROZEN_PARAMETER_COUNT, || format!("{default} != frozen {FROZEN_PARAMETER_COUNT}"))?;
    let variant = |res: usize, skip: SkipMode| ModelConfig {
        num_residuals: res,
        skip_mode: skip,
        ..ModelConfig::default()
    };
    let sum1 = count(variant(1, SkipMode::Sum))?;
    let cat2 = count(variant(2, SkipMode::Concat))?;
    let sum2 = count(variant(2, SkipMode::Sum))?;
    ensure((sum2 as f64 - 1.7e6).abs() < (sum2 as f64 - 1.2e6).abs(), || {
        format!("2-residual sum variant {sum2} is not nearer 1.7M")
    })?;
    ensure(sum1 < default && sum2 < cat2, || "sum skips not cheaper than concat".into())?;
    Ok(format!(
        "default {default} ({:+.2}% vs 1.22M); 1res+sum {sum1}, 2res+cat {cat2}, 2res+sum {sum2}",
        100.0 * deviation
    ))
}

fn criterion_2() -> Outcome {
    let config = ModelConfig::default();
    let extents = config.temporal_extents();
    ensure(extents == [17, 13, 9, 5, 1], || format!("extents {extents:?}"))?;
    // the same arithmetic, observed on tensors of a narrow network
    let narrow = ModelConfig {
        stem_channels: 2,
        sensor_dims: SensorDims::new(16, 16),
        ..config
    };
    let model = Model::<f64>::build(narrow.clone(), 1).map_err(|e| e.to_string())?;
    let mut tape = Tape::new();
    let params = model.bind(&mut tape, false);
    let x = tape.constant(Tensor::zeros(narrow.input_shape()));
    let trace = model.forward(&mut tape, &params, x).map_err(|e| e.to_string())?;
    let observed: Vec<usize> = trace
        .encoder_outputs
        .iter()
        .map(|&v| tape.shape(v).unwrap()[1])
        .collect();
    ensure(observed == [17, 13, 9, 5, 1], || format!("tensor extents {observed:?}"))?;
    let bottleneck = tape.shape(trace.bottleneck).unwrap().to_vec();
    ensure(bottleneck == [32, 1, 1], || format!("bottleneck {bottleneck:?}"))?;
    Ok(format!("21 frames -> {observed:?}"))
}

fn criterion_3() -> Outcome {
    let reports = gradcheck::op_suite(7).map_err(|e| e.to_string())?;
    let required = [
        "conv2d",
        "depthwise3d",
        "pointwise",
        "maxpool2d",
        "upsample_nn",
        "if_soft",
        "loss_mod",
        "loss_ang",
        "loss_relative",
    ];
    for name in required {
        ensure(reports.iter().any(|r| r.name == name), || format!("no check for {name}"))?;
    }
    let toy = gradcheck::toy_config();
    ensure(
        toy.num_encoders == 2 && toy.sensor_dims == SensorDims::new(8, 8) && toy.fire_mode == FireMode::Soft,
        || format!("toy network is {toy:?}"),
    )?;
    let network = gradcheck::toy_network(7, 6).map_err(|e| e.to_string())?;
    let mut worst = (String::new(), 0.0f64);
    for r in reports.iter().chain(std::iter::once(&network)) {
        ensure(r.checked > 0, || format!("{} probed nothing", r.name))?;
        ensure(r.passed(GRADCHECK_TOLERANCE), || {
            format!("{} max rel error {:.3e}", r.name, r.max_rel_error)
        })?;
        if r.max_rel_error >= worst.1 {
            worst = (r.name.clone(), r.max_rel_error);
        }
    }
    Ok(format!(
        "{} op checks + toy network ({} coords, {:.2e}); worst {} {:.2e}",
        reports.len(),
        network.checked,
        network.max_rel_error,
        worst.0,
        worst.1
    ))
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(lo..hi))
}

/// Gradients w.r.t. input and layer weights of `Σ g ⊙ fire(conv(x))`.
fn layer_grads(
    conv: &SeparableConv,
    store: &ParamStore<f64>,
    act: IfActivation,
    x: &Tensor<f64>,
    g: &Tensor<f64>,
) -> (Vec<f64>, Vec<Vec<f64>>) {
    let mut tape = Tape::new();
    let params = store.bind(&mut tape, true);
    let xv = tape.leaf(x.clone(), true);
    let v = conv.potential(&mut tape, &params, xv).unwrap();
    let s = act.fire(&mut tape, v).unwrap();
    let gv = tape.constant(g.clone());
    let prod = tape.mul(s, gv).unwrap();
    let root = tape.sum(prod).unwrap();
    tape.backward(root).unwrap();
    let grad = |var| tape.grad(var).unwrap().map(<[f64]>::to_vec).unwrap_or_default();
    (grad(xv), params.vars().iter().map(|&p| grad(p)).collect())
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let layers = 40;
    for trial in 0..layers {
        let cin = rng.gen_range(1..4);
        let cout = rng.gen_range(1..5);
        let k = [1, 3, 5][rng.gen_range(0..3)];
        let temporal = rng.gen_bool(0.5);
        let (kernel, xshape) = if temporal {
            let kt = rng.gen_range(1..4);
            let t = kt + rng.gen_range(0..3);
            (vec![kt, k, k], vec![cin, t, rng.gen_range(2..7), rng.gen_range(2..7)])
        } else {
            (vec![k, k], vec![cin, rng.gen_range(2..7), rng.gen_range(2..7)])
        };
        let mut store = ParamStore::default();
        let conv = SeparableConv::init(&mut store, "l", cin, cout, &kernel, rng.gen_bool(0.5), 1, 3.0, &mut rng);
        let x = random_tensor(&mut rng, &xshape, -2.0, 2.0);
        let mut tape = Tape::new();
        let params = store.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let v = conv.potential(&mut tape, &params, xv).unwrap();
        let g = random_tensor(&mut rng, tape.shape(v).unwrap(), -1.0, 1.0);
        let spike = IfActivation {
            threshold: rng.gen_range(-0.5..1.5),
            surrogate_alpha: rng.gen_range(0.5..8.0),
            mode: FireMode::Spike,
        };
        let soft = IfActivation {
            mode: FireMode::Soft,
            ..spike
        };
        let a = layer_grads(&conv, &store, spike, &x, &g);
        let b = layer_grads(&conv, &store, soft, &x, &g);
        ensure(a == b, || format!("layer {trial}: spike and soft gradients differ"))?;
    }

    let mut boundaries = 0;
    for seed in 0..6u64 {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let config = ModelConfig {
            stem_channels: r.gen_range(2..5),
            num_encoders: 2,
            spatial_kernel: 3,
            temporal_kernel: 3,
            num_frames: 7,
            num_residuals: r.gen_range(1..3),
            skip_mode: if r.gen_bool(0.5) { SkipMode::Sum } else { SkipMode::Concat },
            bottleneck_skip: if r.gen_bool(0.5) { SkipMode::Sum } else { SkipMode::Concat },
            downsample: if r.gen_bool(0.5) { Downsample::Strided } else { Downsample::Maxpool },
            sensor_dims: SensorDims::new(8, 8),
            init_gain: 3.0,
            threshold: r.gen_range(0.2..1.5),
            ..ModelConfig::default()
        };
        let model = Model::<f64>::build(config.clone(), seed).unwrap();
        let mut tape = Tape::new();
        let params = model.bind(&mut tape, false);
        let x = tape.constant(Tensor::from_fn(config.input_shape(), |_| f64::from(r.gen_range(0u8..4))));
        let trace = model.forward(&mut tape, &params, x).unwrap();
        for v in trace.spike_outputs() {
            let t = tape.value(v).unwrap();
            ensure(t.data().iter().all(|&s| s == 0.0 || s == 1.0), || {
                format!("model {seed}: non-binary spike tensor of shape {:?}", t.shape())
            })?;
            boundaries += 1;
        }
    }
    Ok(format!("{layers} random layers identical; {boundaries} block outputs binary"))
}

/// Nested-loop dense convolution: valid in time, zero-padded `same` in space.
#[allow(clippy::too_many_arguments)]
fn dense_oracle(
    x: &[f64],
    (c, t, h, w): (usize, usize, usize, usize),
    kernel: &[f64],
    (cout, kt, kh, kw): (usize, usize, usize, usize),
    stride: usize,
) -> Vec<f64> {
    let to = t - kt + 1;
    let (ho, wo) = (h.div_ceil(stride), w.div_ceil(stride));
    let (ph, pw) = (kh / 2, kw / 2);
    let mut out = vec![0.0; cout * to * ho * wo];
    for o in 0..cout {
        for ot in 0..to {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for ci in 0..c {
                        for dt in 0..kt {
                            for dy in 0..kh {
                                for dx in 0..kw {
                                    let y = (oy * stride + dy) as isize - ph as isize;
                                    let xx = (ox * stride + dx) as isize - pw as isize;
                                    if y < 0 || xx < 0 || y >= h as isize || xx >= w as isize {
                                        continue;
                                    }
                                    let xi = ((ci * t + ot + dt) * h + y as usize) * w + xx as usize;
                                    let ki = (((o * c + ci) * kt + dt) * kh + dy) * kw + dx;
                                    acc += x[xi] * kernel[ki];
                                }
                            }
                        }
                    }
                    out[((o * to + ot) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    out
}

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let mut worst = 0.0f64;
    let mut dense_2d = 0;
    for i in 0..SEPARABLE_SHAPES {
        let c = rng.gen_range(1..5);
        let cout = rng.gen_range(1..5);
        let temporal = i % 3 != 0;
        let kt = if temporal { rng.gen_range(1..4) } else { 1 };
        let t = kt + if temporal { rng.gen_range(0..3) } else { 0 };
        let kh = [1, 3, 5, 7][rng.gen_range(0..4)];
        let kw = [1, 3, 5, 7][rng.gen_range(0..4)];
        let stride = if rng.gen_bool(0.3) { 2 } else { 1 };
        let h = rng.gen_range(1..6) * stride;
        let w = rng.gen_range(1..6) * stride;
        let x = random_tensor(&mut rng, &[c, t, h, w], -1.0, 1.0);
        let dw = random_tensor(&mut rng, &[c, kt, kh, kw], -1.0, 1.0);
        let pw = random_tensor(&mut rng, &[cout, c], -1.0, 1.0);
        // rank-1 dense kernel W[o, c, ...] = P[o, c] · D[c, ...]
        let per = kt * kh * kw;
        let dense: Vec<f64> = (0..cout * c * per)
            .map(|i| pw.data()[i / per] * dw.data()[(i / per % c) * per + i % per])
            .collect();
        let oracle = dense_oracle(x.data(), (c, t, h, w), &dense, (cout, kt, kh, kw), stride);

        let mut tape = Tape::new();
        let (xv, dv, pv);
        if temporal {
            xv = tape.constant(x.clone());
            dv = tape.constant(dw.clone());
        } else {
            xv = tape.constant(x.clone().reshape([c, h, w]).unwrap());
            dv = tape.constant(dw.clone().reshape([c, kh, kw]).unwrap());
        }
        pv = tape.constant(pw.clone());
        let d = tape.depthwise(xv, dv, stride).map_err(|e| e.to_string())?;
        let y = tape.pointwise(d, pv, None).map_err(|e| e.to_string())?;
        let got = tape.value(y).unwrap().data();
        ensure(got.len() == oracle.len(), || format!("shape {i}: length {} vs {}", got.len(), oracle.len()))?;
        let err = got.iter().zip(&oracle).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        worst = worst.max(err);
        ensure(err < SEPARABLE_TOLERANCE, || format!("shape {i}: max abs error {err:.3e}"))?;

        // planar case: also agrees with the engine's own dense conv2d
        if !temporal && stride == 1 {
            let k = tape.constant(Tensor::new([cout, c, kh, kw], dense).unwrap());
            let z = tape.conv2d(xv, k, None, Padding::Same, 1).map_err(|e| e.to_string())?;
            let diff = tape.value(z).unwrap().max_abs_diff(tape.value(y).unwrap()).unwrap();
            ensure(diff < SEPARABLE_TOLERANCE, || format!("shape {i}: conv2d differs by {diff:.3e}"))?;
            dense_2d += 1;
        }
    }
    Ok(format!(
        "{SEPARABLE_SHAPES} shapes, max abs error {worst:.2e}; {dense_2d} also against conv2d"
    ))
}

fn scalar(tape: &Tape<f64>, v: spikeflow::Var) -> f64 {
    tape.value(v).unwrap().data()[0]
}

fn criterion_6() -> Outcome {
    let dims = SensorDims::new(3, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(66);
    let gt = FlowMap::new(
        dims,
        (0..15).map(|_| rng.gen_range(-5.0..5.0)).collect(),
        (0..15).map(|_| rng.gen_range(-5.0..5.0)).collect(),
        vec![true; 15],
    )
    .unwrap();
    let mut tape = Tape::<f64>::new();
    let p = tape.constant(gt.to_tensor());
    let lm = loss_mod(&mut tape, p, &gt).unwrap();
    let la = loss_ang(&mut tape, p, &gt, EPSILON).unwrap();
    ensure(scalar(&tape, lm) == 0.0, || format!("L_mod(gt, gt) = {}", scalar(&tape, lm)))?;
    let floor = (1.0 - EPSILON).acos();
    ensure((scalar(&tape, la) - floor).abs() < 1e-12, || {
        format!("L_ang(gt, gt) = {} vs acos(1-eps) = {floor}", scalar(&tape, la))
    })?;

    let one = SensorDims::new(1, 1);
    let ex = FlowMap::uniform(one, 1.0, 0.0);
    let ey = Tensor::new([2, 1, 1], vec![0.0, 1.0]).unwrap();
    let mut tape = Tape::<f64>::new();
    let p = tape.constant(ey.clone());
    let la = loss_ang(&mut tape, p, &ex, EPSILON).unwrap();
    let orth = scalar(&tape, la);
    ensure((orth - FRAC_PI_2).abs() < ANGLE_TOLERANCE, || format!("orthogonal L_ang = {orth}"))?;
    let deg = aae(&ey, &ex, AAE_MIN_NORM).unwrap().unwrap();
    ensure((deg - 90.0).abs() < AAE_TOLERANCE_DEG, || format!("orthogonal AAE = {deg}"))?;

    let zero = FlowMap::zeros(one);
    let mut tape = Tape::<f64>::new();
    let p = tape.constant(Tensor::new([2, 1, 1], vec![1.0, 0.0]).unwrap());
    let lr = loss_relative(&mut tape, p, &zero, EPSILON).unwrap();
    let rel = scalar(&tape, lr);
    ensure((rel - 1e7).abs() < 1e-6 * 1e7, || format!("relative loss on zero gt = {rel}"))?;

    let err = aee(&Tensor::new([2, 1, 1], vec![3.0, 4.0]).unwrap(), &zero).unwrap();
    ensure(err == 5.0, || format!("AEE of (3,4) vs 0 = {err}"))?;
    Ok(format!(
        "L_ang floor {floor:.4e}, orthogonal {orth:.8} rad / {deg:.6} deg, relative blow-up {rel:.3e}"
    ))
}

fn criterion_7() -> Outcome {
    let variants = [
        ModelConfig::default(),
        ModelConfig {
            skip_mode: SkipMode::Sum,
            num_residuals: 2,
            downsample: Downsample::Strided,
            init_gain: 3.0,
            ..ModelConfig::default()
        },
        ModelConfig {
            bottleneck_skip: SkipMode::Concat,
            layer_bias: true,
            encoding: Encoding::TwoD,
            ..ModelConfig::default()
        },
    ];
    for (i, config) in variants.into_iter().enumerate() {
        let model = Model::<f32>::build(config.clone(), i as u64).unwrap();
        let pred = model.predict(&Tensor::zeros(config.input_shape())).unwrap();
        ensure(pred.shape() == [2, 64, 64], || format!("prediction shape {:?}", pred.shape()))?;
        let nonzero = pred.data().iter().filter(|&&x| x != 0.0).count();
        ensure(nonzero == 0, || format!("variant {i}: {nonzero} non-zero flow values"))?;
    }
    Ok("3 zero-bias variants predict exactly zero flow".into())
}

/// Model used for the learning criteria.
fn learning_model() -> ModelConfig {
    ModelConfig {
        stem_channels: 8,
        init_gain: 3.0,
        surrogate_alpha: 1.0,
        ..ModelConfig::default()
    }
}

fn learning_suites(train_windows: usize, val_windows: usize) -> (Vec<Sample>, Vec<Sample>) {
    let train = SyntheticSuite {
        windows: train_windows,
        seed: 1,
        ..SyntheticSuite::default()
    };
    let val = SyntheticSuite {
        windows: val_windows,
        seed: 2,
        name: "validation".into(),
        ..SyntheticSuite::default()
    };
    (train.samples().unwrap(), val.samples().unwrap())
}

fn criterion_8() -> Outcome {
    let (train, val) = learning_suites(200, 40);
    let baseline = val
        .iter()
        .map(|s| aee(&Tensor::<f32>::zeros([2, 64, 64]), &s.target).unwrap())
        .sum::<f64>()
        / val.len() as f64;
    let model = Model::<f32>::build(learning_model(), 0).unwrap();
    let config = TrainConfig {
        epochs: 30,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(model, config.clone()).unwrap();
    let mut history = Vec::new();
    for _ in 0..config.epochs {
        let report = trainer.train_epoch(&train).map_err(|e| e.to_string())?;
        let v = trainer.evaluate(&val).map_err(|e| e.to_string())?;
        println!("    {report} val_aee={:.6}", v.aee);
        history.push(v.aee);
    }
    let last = *history.last().unwrap();
    let best = history.iter().copied().fold(f64::INFINITY, f64::min);
    let limit = LEARNING_FRACTION * baseline;
    ensure(last < limit, || {
        format!("final validation AEE {last:.3} (best {best:.3}) not below {limit:.3} = 20% of zero-flow baseline {baseline:.3}")
    })?;
    Ok(format!("validation AEE {last:.3} < {limit:.3} (baseline {baseline:.3})"))
}

fn criterion_9() -> Outcome {
    let (train, val) = learning_suites(60, 20);
    let run = |config: ModelConfig, weights: LossWeights, seed: u64| -> f64 {
        let model = Model::<f32>::build(config, seed).unwrap();
        let tc = TrainConfig {
            seed,
            loss: weights,
            ..TrainConfig::default()
        };
        let mut trainer = Trainer::new(model, tc).unwrap();
        for _ in 0..5 {
            trainer.train_epoch(&train).unwrap();
        }
        trainer.evaluate(&val).unwrap().aee
    };
    let seeds = [0u64, 1, 2];
    let mean = |f: &dyn Fn(u64) -> f64| seeds.iter().map(|&s| f(s)).sum::<f64>() / seeds.len() as f64;
    let combined = LossWeights::default();
    let modulus_only = LossWeights {
        angular: 0.0,
        ..combined
    };
    let strided = ModelConfig {
        downsample: Downsample::Strided,
        ..learning_model()
    };
    let with_combined = mean(&|s| run(learning_model(), combined, s));
    let with_modulus = mean(&|s| run(learning_model(), modulus_only, s));
    let with_strided = mean(&|s| run(strided.clone(), combined, s));
    let mut notes = vec![format!(
        "combined {with_combined:.3} vs L_mod-only {with_modulus:.3}; maxpool {with_combined:.3} vs strided {with_strided:.3}"
    )];
    if with_combined > with_modulus {
        notes.push("WARNING: combined loss did not beat L_mod-only".into());
    }
    if with_combined > with_strided {
        notes.push("WARNING: maxpool did not beat strided convolution".into());
    }
    Ok(notes.join("; "))
}

fn criterion_10() -> Outcome {
    let config = ModelConfig {
        stem_channels: 2,
        num_encoders: 2,
        spatial_kernel: 3,
        temporal_kernel: 3,
        num_frames: 7,
        sensor_dims: SensorDims::new(16, 16),
        ..ModelConfig::default()
    };
    let suite = SyntheticSuite {
        dims: config.sensor_dims,
        num_frames: 7,
        windows: 4,
        ..SyntheticSuite::default()
    };
    let data = suite.samples().unwrap();
    let train = || {
        let model = Model::<f32>::build(config.clone(), 9).unwrap();
        let mut t = Trainer::new(model, TrainConfig::default()).unwrap();
        for _ in 0..2 {
            t.train_epoch(&data).unwrap();
        }
        t.checkpoint()
    };
    let a = train();
    ensure(a == train(), || "same seed gave different weights".into())?;

    let bytes = storage::encode_checkpoint(&a).map_err(|e| e.to_string())?;
    let back = storage::decode_checkpoint(&bytes).map_err(|e| e.to_string())?;
    ensure(back == a, || "checkpoint did not round-trip".into())?;
    let resumed = Trainer::<f32>::from_checkpoint(&back).map_err(|e| e.to_string())?.checkpoint();
    ensure(resumed == a, || "restored trainer differs from the saved one".into())?;

    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let dims = SensorDims::new(9, 13);
    let mut t = 0;
    let events: Vec<Event> = (0..500)
        .map(|_| {
            t += rng.gen_range(0..50);
            let p = if rng.gen_bool(0.5) { Polarity::Positive } else { Polarity::Negative };
            Event::new(rng.gen_range(0..13), rng.gen_range(0..9), t, p)
        })
        .collect();
    let ev = storage::decode_events(&storage::encode_events(dims, &events).unwrap()).unwrap();
    ensure(ev == (dims, events), || "event file did not round-trip".into())?;
    let n = dims.pixels();
    let flow = FlowMap::new(
        dims,
        (0..n).map(|_| rng.gen::<f32>() * 100.0 - 50.0).collect(),
        (0..n).map(|_| f32::from_bits(rng.gen_range(0..0x7f00_0000))).collect(),
        (0..n).map(|_| rng.gen_bool(0.7)).collect(),
    )
    .unwrap();
    let fb = storage::encode_flow(&flow).unwrap();
    ensure(storage::encode_flow(&storage::decode_flow(&fb).unwrap()).unwrap() == fb, || {
        "flow file did not round-trip".into()
    })?;
    let hist = HistogramSequence::from_counts(
        PolarityMode::Separate,
        3,
        dims,
        123,
        9000,
        (0..2 * 3 * n).map(|_| rng.gen()).collect(),
    )
    .unwrap();
    ensure(
        storage::decode_histograms(&storage::encode_histograms(&hist).unwrap()).unwrap() == hist,
        || "histogram file did not round-trip".into(),
    )?;
    Ok(format!("bit-identical training, {}-byte checkpoint and all formats round-trip", bytes.len()))
}
