//! Flow losses recorded on a tape, and evaluation metrics.
//!
//! All reductions run in `f64` and average over valid pixels only.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::events::FlowMap;
use crate::tensor::{Scalar, Tensor};

pub const EPSILON: f64 = 1e-7;

/// Pixels whose predicted or true flow is shorter than this are left out of AAE.
pub const AAE_MIN_NORM: f64 = 1e-5;

/// Weights of the combined modulus + angular loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub modulus: f64,
    pub angular: f64,
    /// Weight of the relative endpoint-error term; 0 leaves it out.
    pub relative: f64,
    pub epsilon: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            modulus: 1.0,
            angular: 1.0,
            relative: 0.0,
            epsilon: EPSILON,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.modulus, self.angular, self.relative];
        if !w.iter().all(|x| x.is_finite() && *x >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "loss weights must be finite and non-negative, got modulus={} angular={} relative={}",
                self.modulus, self.angular, self.relative
            )));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 0.5) {
            return Err(Error::InvalidArgument(format!("epsilon {} out of (0, 0.5)", self.epsilon)));
        }
        Ok(())
    }
}

/// Valid-pixel view of a `(2, H, W)` prediction against a ground-truth map.
struct Pairs<'a> {
    pred: Vec<f64>,
    gt: &'a FlowMap,
    plane: usize,
    count: usize,
}

impl<'a> Pairs<'a> {
    fn new<T: Scalar>(op: &'static str, pred: &Tensor<T>, gt: &'a FlowMap) -> Result<Self> {
        let d = gt.dims();
        if pred.shape() != [2, d.height, d.width] {
            return Err(Error::Tensor(crate::TensorError::ShapeMismatch {
                op,
                left: pred.shape().to_vec(),
                right: vec![2, d.height, d.width],
            }));
        }
        let count = gt.valid_count();
        if count == 0 {
            return Err(Error::EmptyMask(op));
        }
        Ok(Self {
            pred: pred.data().iter().map(|v| v.as_f64()).collect(),
            gt,
            plane: d.pixels(),
            count,
        })
    }

    /// `(index, pred, gt)` over valid pixels.
    fn valid(&self) -> impl Iterator<Item = (usize, [f64; 2], [f64; 2])> + '_ {
        (0..self.plane).filter(|&i| self.gt.valid[i]).map(move |i| {
            (
                i,
                [self.pred[i], self.pred[self.plane + i]],
                [f64::from(self.gt.u[i]), f64::from(self.gt.v[i])],
            )
        })
    }
}

/// Records a scalar loss whose gradient w.r.t. `pred` is `grad` scaled by upstream.
fn record<T: Scalar>(tape: &mut Tape<T>, op: &'static str, pred: Var, value: f64, grad: Vec<f64>) -> Result<Var> {
    if !value.is_finite() {
        return Err(Error::Tensor(crate::TensorError::NonFinite { op, index: 0 }));
    }
    let grad: Vec<T> = grad.into_iter().map(T::from_f64_lossy).collect();
    Ok(tape.custom(
        op,
        &[pred],
        Tensor::scalar(T::from_f64_lossy(value)),
        Box::new(move |up: &[T]| vec![Some(grad.iter().map(|&g| g * up[0]).collect())]),
    )?)
}

fn norm(a: [f64; 2]) -> f64 {
    a[0].hypot(a[1])
}

/// Mean endpoint error. The gradient at zero error is taken as 0.
pub fn loss_mod<T: Scalar>(tape: &mut Tape<T>, pred: Var, gt: &FlowMap) -> Result<Var> {
    let pairs = Pairs::new("loss_mod", tape.value(pred)?, gt)?;
    let n = pairs.count as f64;
    let mut grad = vec![0.0; 2 * pairs.plane];
    let mut total = 0.0;
    for (i, p, g) in pairs.valid() {
        let e = [p[0] - g[0], p[1] - g[1]];
        let r = norm(e);
        total += r;
        if r > 0.0 {
            grad[i] = e[0] / (r * n);
            grad[pairs.plane + i] = e[1] / (r * n);
        }
    }
    record(tape, "loss_mod", pred, total / n, grad)
}

/// Clamped cosine between `g` and `p` and its gradient w.r.t. `p`
/// (zero when the clamp is active).
fn clamped_cos(p: [f64; 2], g: [f64; 2], eps: f64) -> (f64, Option<[f64; 2]>) {
    let (np, ng) = (norm(p), norm(g));
    let dot = g[0] * p[0] + g[1] * p[1];
    let den = ng * np + eps;
    let c = (dot + eps) / den;
    let (lo, hi) = (-1.0 + eps, 1.0 - eps);
    if c <= lo {
        return (lo, None);
    }
    if c >= hi {
        return (hi, None);
    }
    if np == 0.0 {
        return (c, Some([g[0] / den, g[1] / den]));
    }
    let d = |k: usize| (g[k] * den - (dot + eps) * ng * p[k] / np) / (den * den);
    (c, Some([d(0), d(1)]))
}

/// Mean angle (radians) between prediction and ground truth.
pub fn loss_ang<T: Scalar>(tape: &mut Tape<T>, pred: Var, gt: &FlowMap, epsilon: f64) -> Result<Var> {
    let pairs = Pairs::new("loss_ang", tape.value(pred)?, gt)?;
    let n = pairs.count as f64;
    let mut grad = vec![0.0; 2 * pairs.plane];
    let mut total = 0.0;
    for (i, p, g) in pairs.valid() {
        let (c, dc) = clamped_cos(p, g, epsilon);
        total += c.acos();
        if let Some(dc) = dc {
            let k = -1.0 / ((1.0 - c * c).sqrt() * n);
            grad[i] = k * dc[0];
            grad[pairs.plane + i] = k * dc[1];
        }
    }
    record(tape, "loss_ang", pred, total / n, grad)
}

/// Mean endpoint error relative to the true flow magnitude.
pub fn loss_relative<T: Scalar>(tape: &mut Tape<T>, pred: Var, gt: &FlowMap, epsilon: f64) -> Result<Var> {
    let pairs = Pairs::new("loss_relative", tape.value(pred)?, gt)?;
    let n = pairs.count as f64;
    let mut grad = vec![0.0; 2 * pairs.plane];
    let mut total = 0.0;
    for (i, p, g) in pairs.valid() {
        let e = [p[0] - g[0], p[1] - g[1]];
        let r = norm(e);
        let scale = norm(g) + epsilon;
        total += r / scale;
        if r > 0.0 {
            grad[i] = e[0] / (r * scale * n);
            grad[pairs.plane + i] = e[1] / (r * scale * n);
        }
    }
    record(tape, "loss_relative", pred, total / n, grad)
}

/// Components of one combined-loss evaluation.
#[derive(Clone, Copy, Debug)]
pub struct CombinedLoss {
    pub total: Var,
    pub modulus: f64,
    pub angular: f64,
}

/// `λ_mod · L_mod + λ_ang · L_ang`. A term with zero weight is skipped.
pub fn loss_combined<T: Scalar>(
    tape: &mut Tape<T>,
    pred: Var,
    gt: &FlowMap,
    weights: &LossWeights,
) -> Result<CombinedLoss> {
    weights.validate()?;
    let m = loss_mod(tape, pred, gt)?;
    let a = loss_ang(tape, pred, gt, weights.epsilon)?;
    let (modulus, angular) = (tape.value(m)?.data()[0].as_f64(), tape.value(a)?.data()[0].as_f64());
    let mut terms = vec![(m, weights.modulus), (a, weights.angular)];
    if weights.relative > 0.0 {
        terms.push((loss_relative(tape, pred, gt, weights.epsilon)?, weights.relative));
    }
    let active: Vec<(Var, f64)> = terms.iter().copied().filter(|t| t.1 > 0.0).collect();
    let mut total = None;
    for (v, w) in if active.is_empty() { vec![terms[0]] } else { active } {
        let scaled = tape.scale(v, T::from_f64_lossy(w))?;
        total = Some(match total {
            Some(acc) => tape.add(acc, scaled)?,
            None => scaled,
        });
    }
    let total = total.expect("at least one term");
    Ok(CombinedLoss {
        total,
        modulus,
        angular,
    })
}

/// Combined loss summed over every snapshot of a forward pass.
#[derive(Clone, Debug)]
pub struct TraceLoss {
    pub total: Var,
    /// One entry per snapshot, coarsest first.
    pub per_snapshot: Vec<CombinedLoss>,
}

pub fn trace_loss<T: Scalar>(
    tape: &mut Tape<T>,
    snapshots: &[Var],
    gt: &FlowMap,
    weights: &LossWeights,
) -> Result<TraceLoss> {
    let mut per_snapshot = Vec::with_capacity(snapshots.len());
    let mut total: Option<Var> = None;
    for &s in snapshots {
        let l = loss_combined(tape, s, gt, weights)?;
        total = Some(match total {
            None => l.total,
            Some(t) => tape.add(t, l.total)?,
        });
        per_snapshot.push(l);
    }
    let total = total.ok_or_else(|| Error::InvalidArgument("no snapshots to score".into()))?;
    Ok(TraceLoss { total, per_snapshot })
}

/// Average endpoint error over valid pixels, in pixels per ground-truth interval.
pub fn aee<T: Scalar>(pred: &Tensor<T>, gt: &FlowMap) -> Result<f64> {
    let pairs = Pairs::new("aee", pred, gt)?;
    let sum: f64 = pairs.valid().map(|(_, p, g)| norm([p[0] - g[0], p[1] - g[1]])).sum();
    Ok(sum / pairs.count as f64)
}

/// Average angular error in degrees over valid pixels where both vectors are
/// at least `min_norm` long. `None` when every valid pixel is degenerate.
pub fn aae<T: Scalar>(pred: &Tensor<T>, gt: &FlowMap, min_norm: f64) -> Result<Option<f64>> {
    let pairs = Pairs::new("aae", pred, gt)?;
    let (mut sum, mut used) = (0.0, 0usize);
    for (_, p, g) in pairs.valid() {
        let (np, ng) = (norm(p), norm(g));
        if np < min_norm || ng < min_norm {
            continue;
        }
        let c = ((p[0] * g[0] + p[1] * g[1]) / (np * ng)).clamp(-1.0, 1.0);
        sum += c.acos().to_degrees();
        used += 1;
    }
    Ok((used > 0).then(|| sum / used as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::events::SensorDims;
    use proptest::prelude::*;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn gt1(u: f32, v: f32) -> FlowMap {
        FlowMap::uniform(SensorDims::new(1, 1), u, v)
    }

    fn eval(pred: [f64; 2], gt: &FlowMap, f: impl Fn(&mut Tape<f64>, Var, &FlowMap) -> Result<Var>) -> f64 {
        let mut tape = Tape::new();
        let p = tape.param(Tensor::new([2, 1, 1], pred.to_vec()).unwrap());
        let l = f(&mut tape, p, gt).unwrap();
        tape.value(l).unwrap().data()[0]
    }

    fn ang(t: &mut Tape<f64>, p: Var, g: &FlowMap) -> Result<Var> {
        loss_ang(t, p, g, EPSILON)
    }

    fn rel(t: &mut Tape<f64>, p: Var, g: &FlowMap) -> Result<Var> {
        loss_relative(t, p, g, EPSILON)
    }

    #[test]
    fn modulus_examples() {
        assert_eq!(eval([3.0, 4.0], &gt1(0.0, 0.0), loss_mod), 5.0);
        assert_eq!(eval([1.0, 2.0], &gt1(1.0, 2.0), loss_mod), 0.0);
        let gt = FlowMap::zeros(SensorDims::new(1, 2));
        let mut tape = Tape::new();
        let p = tape.param(Tensor::new([2, 1, 2], vec![3.0, 0.0, 4.0, 0.0]).unwrap());
        let l = loss_mod(&mut tape, p, &gt).unwrap();
        assert_eq!(tape.value(l).unwrap().data()[0], 2.5);
    }

    #[test]
    fn modulus_subgradient_zero_at_exact_match() {
        let gt = gt1(1.0, -2.0);
        let mut tape = Tape::new();
        let p = tape.param(Tensor::new([2, 1, 1], vec![1.0, -2.0]).unwrap());
        let l = loss_mod(&mut tape, p, &gt).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(p).unwrap().unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn angular_examples() {
        let floor = (1.0f64 - EPSILON).acos();
        assert!((floor - 4.472e-4).abs() < 1e-6);
        assert_eq!(eval([1.0, 0.0], &gt1(1.0, 0.0), ang), floor);
        assert!((eval([0.0, 1.0], &gt1(1.0, 0.0), ang) - FRAC_PI_2).abs() < 1e-6);
        // (-1 + eps) / (1 + eps) stays inside the clamp interval
        let anti = ((-1.0 + EPSILON) / (1.0 + EPSILON)).acos();
        assert_eq!(eval([-1.0, 0.0], &gt1(1.0, 0.0), ang), anti);
        assert!((anti - (PI - 6.325e-4)).abs() < 1e-6);
    }

    #[test]
    fn relative_examples() {
        assert!((eval([2.0, 0.0], &gt1(1.0, 0.0), rel) - 1.0).abs() < 1e-6);
        assert!((eval([1.0, 0.0], &gt1(0.0, 0.0), rel) - 1e7).abs() < 1e-3);
        assert_eq!(eval([0.5, 0.5], &gt1(0.5, 0.5), rel), 0.0);
    }

    #[test]
    fn combined_examples() {
        let floor = (1.0f64 - EPSILON).acos();
        let run = |pred: [f64; 2], w: LossWeights| {
            let mut tape = Tape::new();
            let p = tape.param(Tensor::new([2, 1, 1], pred.to_vec()).unwrap());
            let l = loss_combined(&mut tape, p, &gt1(1.0, 0.0), &w).unwrap();
            tape.value(l.total).unwrap().data()[0]
        };
        assert!((run([1.0, 0.0], LossWeights::default()) - floor).abs() < 1e-12);
        let no_ang = LossWeights {
            angular: 0.0,
            ..LossWeights::default()
        };
        assert_eq!(run([4.0, 4.0], no_ang), 5.0);
        let no_mod = LossWeights {
            modulus: 0.0,
            ..LossWeights::default()
        };
        assert!((run([0.0, 1.0], no_mod) - FRAC_PI_2).abs() < 1e-6);
        let relative_only = LossWeights {
            modulus: 0.0,
            angular: 0.0,
            relative: 1.0,
            ..LossWeights::default()
        };
        assert!((run([4.0, 4.0], relative_only) - 5.0 / (1.0 + EPSILON)).abs() < 1e-12);
        let neg = LossWeights {
            angular: -1.0,
            ..LossWeights::default()
        };
        let mut tape = Tape::<f64>::new();
        let p = tape.param(Tensor::zeros([2, 1, 1]));
        assert!(loss_combined(&mut tape, p, &gt1(1.0, 0.0), &neg).is_err());
    }

    #[test]
    fn metric_examples() {
        let zero = Tensor::<f64>::new([2, 1, 1], vec![3.0, 4.0]).unwrap();
        assert_eq!(aee(&zero, &gt1(0.0, 0.0)).unwrap(), 5.0);
        assert_eq!(aae(&zero, &gt1(0.0, 0.0), AAE_MIN_NORM).unwrap(), None);
        let up = Tensor::<f64>::new([2, 1, 1], vec![0.0, 1.0]).unwrap();
        assert!((aae(&up, &gt1(1.0, 0.0), AAE_MIN_NORM).unwrap().unwrap() - 90.0).abs() < 1e-12);
        let same = Tensor::<f64>::new([2, 1, 1], vec![1.0, 0.0]).unwrap();
        assert_eq!(aee(&same, &gt1(1.0, 0.0)).unwrap(), 0.0);
        assert_eq!(aae(&same, &gt1(1.0, 0.0), AAE_MIN_NORM).unwrap(), Some(0.0));
    }

    #[test]
    fn empty_mask_is_an_error() {
        let mut gt = gt1(1.0, 0.0);
        gt.valid[0] = false;
        let pred = Tensor::<f64>::zeros([2, 1, 1]);
        assert!(matches!(aee(&pred, &gt), Err(Error::EmptyMask(_))));
        let mut tape = Tape::new();
        let p = tape.param(pred);
        assert!(matches!(loss_mod(&mut tape, p, &gt), Err(Error::EmptyMask(_))));
    }

    #[test]
    fn trace_loss_sums_snapshots() {
        let gt = gt1(1.0, 1.0);
        let mut tape = Tape::new();
        let a = tape.param(Tensor::new([2, 1, 1], vec![0.0, 0.0]).unwrap());
        let b = tape.param(Tensor::new([2, 1, 1], vec![2.0, 1.0]).unwrap());
        let tl = trace_loss(&mut tape, &[a, b], &gt, &LossWeights::default()).unwrap();
        let total = tape.value(tl.total).unwrap().data()[0];
        let sum: f64 = tl.per_snapshot.iter().map(|l| l.modulus + l.angular).sum();
        assert!((total - sum).abs() < 1e-12);
    }

    fn map_strategy(h: usize, w: usize) -> impl Strategy<Value = (FlowMap, Vec<f64>)> {
        let n = h * w;
        (
            prop::collection::vec(-5.0f32..5.0, 2 * n),
            prop::collection::vec(any::<bool>(), n),
            prop::collection::vec(-5.0f64..5.0, 2 * n),
        )
            .prop_map(move |(g, mut valid, p)| {
                valid[0] = true;
                let gt = FlowMap::new(SensorDims::new(h, w), g[..n].to_vec(), g[n..].to_vec(), valid).unwrap();
                (gt, p)
            })
    }

    fn aee_oracle(pred: &[f64], gt: &FlowMap) -> f64 {
        let n = gt.u.len();
        let mut s = 0.0;
        let mut c = 0.0;
        for i in 0..n {
            if gt.valid[i] {
                let du = pred[i] - gt.u[i] as f64;
                let dv = pred[n + i] - gt.v[i] as f64;
                s += (du * du + dv * dv).sqrt();
                c += 1.0;
            }
        }
        s / c
    }

    proptest! {
        #[test]
        fn aee_matches_oracle_and_loss((gt, p) in map_strategy(3, 4)) {
            let pred = Tensor::new([2, 3, 4], p.clone()).unwrap();
            let metric = aee(&pred, &gt).unwrap();
            let mut tape = Tape::new();
            let v = tape.constant(pred);
            let l = loss_mod(&mut tape, v, &gt).unwrap();
            let lv = tape.value(l).unwrap().data()[0];
            prop_assert!((metric - aee_oracle(&p, &gt)).abs() < 1e-12);
            prop_assert!((metric - lv).abs() < 1e-12);
            prop_assert!(lv >= 0.0);
        }

        #[test]
        fn invalid_pixels_do_not_matter((gt, p) in map_strategy(3, 3), junk in -50.0f64..50.0) {
            let mut q = p.clone();
            for i in 0..9 {
                if !gt.valid[i] {
                    q[i] = junk;
                    q[9 + i] = -junk;
                }
            }
            let a = Tensor::new([2, 3, 3], p).unwrap();
            let b = Tensor::new([2, 3, 3], q).unwrap();
            prop_assert_eq!(aee(&a, &gt).unwrap(), aee(&b, &gt).unwrap());
            prop_assert_eq!(aae(&a, &gt, AAE_MIN_NORM).unwrap(), aae(&b, &gt, AAE_MIN_NORM).unwrap());
            let score = |t: Tensor<f64>| {
                let mut tape = Tape::new();
                let v = tape.constant(t);
                let l = loss_combined(&mut tape, v, &gt, &LossWeights::default()).unwrap();
                let r = loss_relative(&mut tape, v, &gt, EPSILON).unwrap();
                (tape.value(l.total).unwrap().data()[0], tape.value(r).unwrap().data()[0])
            };
            prop_assert_eq!(score(a), score(b));
        }

        #[test]
        fn angular_loss_ignores_positive_scale(
            g in prop::collection::vec(0.5f64..3.0, 8),
            s in prop::collection::vec(prop::bool::ANY, 8),
            p in prop::collection::vec(0.5f64..3.0, 8),
            c in prop::sample::select(vec![0.5, 2.0, 10.0]),
        ) {
            let sign = |b: bool| if b { 1.0 } else { -1.0 };
            let gu: Vec<f32> = (0..4).map(|i| (g[i] * sign(s[i])) as f32).collect();
            let gv: Vec<f32> = (0..4).map(|i| (g[4 + i] * sign(s[4 + i])) as f32).collect();
            let gt = FlowMap::new(SensorDims::new(2, 2), gu, gv, vec![true; 4]).unwrap();
            let pv: Vec<f64> = p.iter().enumerate().map(|(i, x)| x * sign(s[(i + 3) % 8])).collect();
            let run = |k: f64| {
                let mut tape = Tape::new();
                let v = tape.constant(Tensor::new([2, 2, 2], pv.iter().map(|x| x * k).collect()).unwrap());
                let l = loss_ang(&mut tape, v, &gt, EPSILON).unwrap();
                tape.value(l).unwrap().data()[0]
            };
            let base = run(1.0);
            prop_assert!((base - run(c)).abs() < 1e-5);
            prop_assert!(base >= (1.0 - EPSILON).acos() - 1e-15 && base <= PI);
        }
    }
}
