use proptest::prelude::*;
use spikeflow::events::{encode_histograms, Event, FlowMap, Polarity, PolarityMode, SensorDims};
use spikeflow::layers::{Downsample, SkipMode};
use spikeflow::model::{Encoding, Model, ModelConfig};
use spikeflow::objectives::{loss_ang, loss_mod, EPSILON};
use spikeflow::{Padding, Tape, Tensor};

fn events(dims: SensorDims, max_t: u64) -> impl Strategy<Value = Vec<Event>> {
    let (w, h) = (dims.width as u16, dims.height as u16);
    prop::collection::vec((0..w, 0..h, 0..max_t, any::<bool>()), 0..200).prop_map(|mut raw| {
        raw.sort_by_key(|r| r.2);
        raw.into_iter()
            .map(|(x, y, t, pos)| Event::new(x, y, t, if pos { Polarity::Positive } else { Polarity::Negative }))
            .collect()
    })
}

fn tensor(shape: Vec<usize>) -> impl Strategy<Value = Tensor<f64>> {
    let n: usize = shape.iter().product();
    prop::collection::vec(-1.0f64..1.0, n).prop_map(move |d| Tensor::new(shape.clone(), d).unwrap())
}

fn small_config() -> impl Strategy<Value = ModelConfig> {
    (
        1usize..=3,
        1usize..=2,
        prop_oneof![Just(1usize), Just(3)],
        2usize..=3,
        1usize..=2,
        any::<bool>(),
        any::<bool>(),
        any::<bool>(),
        any::<bool>(),
        1usize..=2,
    )
        .prop_map(|(stem, n, k, kt, side, sum_skip, cat_bottleneck, strided, two_d, res)| ModelConfig {
            stem_channels: stem,
            num_encoders: n,
            spatial_kernel: k,
            temporal_kernel: kt,
            num_frames: (n + 1) * (kt - 1) + 1,
            num_residuals: res,
            skip_mode: if sum_skip { SkipMode::Sum } else { SkipMode::Concat },
            bottleneck_skip: if cat_bottleneck { SkipMode::Concat } else { SkipMode::Sum },
            downsample: if strided { Downsample::Strided } else { Downsample::Maxpool },
            encoding: if two_d { Encoding::TwoD } else { Encoding::ThreeD },
            sensor_dims: SensorDims::new(side << n, (side + 1) << n),
            init_gain: 3.0,
            ..ModelConfig::default()
        })
}

fn counts_input(config: &ModelConfig, seed: u64) -> Tensor<f64> {
    Tensor::from_fn(config.input_shape(), |i| ((i as u64 * 2654435761 + seed) % 7 / 3) as f64)
}

fn grads(tape: &Tape<f64>, vars: &[spikeflow::Var]) -> Vec<Vec<f64>> {
    vars.iter().map(|&v| tape.grad(v).unwrap().unwrap().to_vec()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn histogram_mass_equals_in_window_events(ev in events(SensorDims::new(5, 7), 400), t0 in 0u64..100) {
        let dims = SensorDims::new(5, 7);
        let h = encode_histograms(&ev, t0, 30, 6, dims, PolarityMode::Separate).unwrap();
        let inside = ev.iter().filter(|e| e.t >= t0 && e.t < t0 + 180).count() as u64;
        prop_assert_eq!(h.total(), inside);
    }

    #[test]
    fn combined_mode_is_channel_sum(ev in events(SensorDims::new(4, 6), 300)) {
        let dims = SensorDims::new(4, 6);
        let sep = encode_histograms(&ev, 0, 50, 5, dims, PolarityMode::Separate).unwrap();
        let comb = encode_histograms(&ev, 0, 50, 5, dims, PolarityMode::Combined).unwrap();
        for k in 0..5 {
            for y in 0..4 {
                for x in 0..6 {
                    prop_assert_eq!(comb.get(0, k, y, x), sep.get(0, k, y, x) + sep.get(1, k, y, x));
                }
            }
        }
    }

    #[test]
    fn flip_commutes_with_encoding(ev in events(SensorDims::new(3, 8), 300)) {
        let dims = SensorDims::new(3, 8);
        let flipped: Vec<Event> = ev.iter().map(|e| e.flip_x(dims.width)).collect();
        let a = encode_histograms(&flipped, 0, 40, 7, dims, PolarityMode::Separate).unwrap();
        let b = encode_histograms(&ev, 0, 40, 7, dims, PolarityMode::Separate).unwrap().flip_x();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn separable_equals_rank_one_dense(
        (c, cout, h, w, k) in (1usize..=4, 1usize..=3, 1usize..=9, 1usize..=9, prop_oneof![Just(1usize), Just(3), Just(5), Just(7)]),
        seed in any::<u64>(),
    ) {
        let mut state = seed;
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        };
        let x = Tensor::from_fn([c, h, w], |_| next());
        let dw = Tensor::from_fn([c, k, k], |_| next());
        let pw = Tensor::from_fn([cout, c], |_| next());
        let dense = Tensor::from_fn([cout, c, k, k], |i| {
            let (o, rest) = (i / (c * k * k), i % (c * k * k));
            pw.data()[o * c + rest / (k * k)] * dw.data()[rest]
        });
        let mut tape = Tape::<f64>::new();
        let xv = tape.constant(x);
        let (dv, pv, wv) = (tape.constant(dw), tape.constant(pw), tape.constant(dense));
        let d = tape.depthwise(xv, dv, 1).unwrap();
        let sep = tape.pointwise(d, pv, None).unwrap();
        let full = tape.conv2d(xv, wv, None, Padding::Same, 1).unwrap();
        let diff = tape.value(sep).unwrap().max_abs_diff(tape.value(full).unwrap()).unwrap();
        prop_assert!(diff < 1e-12, "{diff}");
    }

    #[test]
    fn backward_is_linear_in_the_loss(
        x in tensor(vec![2, 5, 5]),
        w in tensor(vec![3, 2, 3, 3]),
        m in tensor(vec![3, 5, 5]),
        a in -3.0f64..3.0,
        b in -3.0f64..3.0,
    ) {
        let run = |ca: f64, cb: f64| {
            let mut tape = Tape::<f64>::new();
            let xv = tape.param(x.clone());
            let wv = tape.param(w.clone());
            let mv = tape.constant(m.clone());
            let y = tape.conv2d(xv, wv, None, Padding::Same, 1).unwrap();
            let ym = tape.mul(y, mv).unwrap();
            let f = tape.sum(ym).unwrap();
            let yy = tape.mul(y, y).unwrap();
            let g = tape.sum(yy).unwrap();
            let fa = tape.scale(f, ca).unwrap();
            let gb = tape.scale(g, cb).unwrap();
            let total = tape.add(fa, gb).unwrap();
            tape.backward(total).unwrap();
            grads(&tape, &[xv, wv])
        };
        let (f, g, both) = (run(1.0, 0.0), run(0.0, 1.0), run(a, b));
        for t in 0..2 {
            for i in 0..both[t].len() {
                let expect = a * f[t][i] + b * g[t][i];
                prop_assert!((both[t][i] - expect).abs() <= 1e-10 * (1.0 + expect.abs()));
            }
        }
    }

    #[test]
    fn loss_bounds(
        pred in prop::collection::vec(-5.0f64..5.0, 2),
        gt in prop::collection::vec(-5.0f64..5.0, 2),
    ) {
        let dims = SensorDims::new(1, 1);
        let flow = FlowMap::new(dims, vec![gt[0] as f32], vec![gt[1] as f32], vec![true]).unwrap();
        let mut tape = Tape::<f64>::new();
        let p = tape.constant(Tensor::new([2, 1, 1], pred.clone()).unwrap());
        let mv = loss_mod(&mut tape, p, &flow).unwrap();
        let av = loss_ang(&mut tape, p, &flow, EPSILON).unwrap();
        let (m, a) = (tape.value(mv).unwrap().data()[0], tape.value(av).unwrap().data()[0]);
        let same = pred[0] == gt[0] as f32 as f64 && pred[1] == gt[1] as f32 as f64;
        prop_assert!(m >= 0.0 && ((m == 0.0) == same));
        prop_assert!(a >= (1.0 - EPSILON).acos() - 1e-12 && a <= std::f64::consts::PI);
        let exact = tape.constant(Tensor::new([2, 1, 1], vec![gt[0] as f32 as f64, gt[1] as f32 as f64]).unwrap());
        let zero = loss_mod(&mut tape, exact, &flow).unwrap();
        prop_assert_eq!(tape.value(zero).unwrap().data()[0], 0.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn tape_replay_is_bit_identical(x in tensor(vec![2, 3, 6, 6]), w in tensor(vec![2, 2, 3, 3])) {
        let run = || {
            let mut tape = Tape::<f64>::new();
            let xv = tape.param(x.clone());
            let wv = tape.param(w.clone());
            let y = tape.depthwise(xv, wv, 2).unwrap();
            let z = tape.maxpool2d(y, 1).unwrap();
            let s = tape.mul(z, z).unwrap();
            let l = tape.sum(s).unwrap();
            tape.backward(l).unwrap();
            (tape.value(l).unwrap().clone(), grads(&tape, &[xv, wv]))
        };
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn spiking_forward_is_stateless_binary_and_full_resolution(config in small_config(), seed in 0u64..1000) {
        let model = Model::<f64>::build(config.clone(), seed).unwrap();
        let input = counts_input(&config, seed);
        let first = model.predict(&input).unwrap();
        let mut tape = Tape::new();
        let params = model.bind(&mut tape, false);
        let x = tape.constant(input.clone());
        let trace = model.forward(&mut tape, &params, x).unwrap();
        prop_assert_eq!(tape.value(trace.prediction()).unwrap(), &first);
        prop_assert_eq!(model.predict(&input).unwrap(), first.clone());

        let spikes = trace
            .encoder_outputs
            .iter()
            .chain(&trace.residual_outputs)
            .chain(&trace.decoder_outputs)
            .chain(std::iter::once(&trace.bottleneck));
        for &v in spikes {
            prop_assert!(tape.value(v).unwrap().data().iter().all(|&s| s == 0.0 || s == 1.0));
        }
        let [_, _, h, w] = config.input_shape();
        prop_assert_eq!(first.shape(), &[2, h, w]);
        if config.encoding == Encoding::ThreeD {
            let last = *trace.encoder_outputs.last().unwrap();
            prop_assert_eq!(tape.value(last).unwrap().shape()[1], 1);
        }
        let mut previous: Option<Tensor<f64>> = None;
        for (s, hd) in trace.snapshots.iter().zip(&trace.heads) {
            let s = tape.value(*s).unwrap();
            let hd = tape.value(*hd).unwrap();
            let expect = match &previous {
                Some(p) => Tensor::new(p.shape().to_vec(), p.data().iter().zip(hd.data()).map(|(a, b)| a + b).collect()).unwrap(),
                None => hd.clone(),
            };
            prop_assert_eq!(s, &expect);
            previous = Some(s.clone());
        }
    }
}
