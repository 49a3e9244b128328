//! Supervised surrogate-gradient training, evaluation and resumable state.

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::events::{FlowMap, HistogramSequence};
use crate::model::{Model, ModelConfig};
use crate::objectives::{self, LossWeights, AAE_MIN_NORM};
use crate::tensor::{Scalar, Tensor};
use crate::TensorError;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// Bias-corrected first and second moment estimates.
    #[default]
    AdaptiveMoments,
    SgdMomentum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub base_lr: f64,
    /// Multiplicative learning-rate decay applied after every epoch.
    pub lr_gamma: f64,
    pub optimizer: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub flip_probability: f64,
    pub seed: u64,
    pub eval_every: usize,
    pub loss: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            base_lr: 1e-3,
            lr_gamma: 0.95,
            optimizer: OptimizerKind::AdaptiveMoments,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            momentum: 0.9,
            batch_size: 1,
            flip_probability: 0.5,
            seed: 0,
            eval_every: 1,
            loss: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr_gamma > 0.0 && self.lr_gamma <= 1.0) {
            return bad(format!("lr_gamma must be in (0, 1], got {}", self.lr_gamma));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad(format!("base_lr must be positive, got {}", self.base_lr));
        }
        if !(0.0..=1.0).contains(&self.flip_probability) {
            return bad(format!("flip_probability must be in [0, 1], got {}", self.flip_probability));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(0.0..1.0).contains(&self.momentum)
        {
            return bad("beta1, beta2 and momentum must lie in [0, 1)".into());
        }
        if self.adam_epsilon.is_nan() || self.adam_epsilon <= 0.0 {
            return bad("adam_epsilon must be positive".into());
        }
        self.loss.validate()
    }

    /// Non-fatal departures from the reference setup.
    pub fn warnings(&self) -> Vec<String> {
        let mut w = Vec::new();
        if self.batch_size != 1 {
            w.push(format!(
                "batch_size={} overrides the reference batch size of 1",
                self.batch_size
            ));
        }
        w
    }

    /// `base_lr · gamma^epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.base_lr * self.lr_gamma.powi(epoch as i32)
    }
}

/// One input window with ground truth aligned to its final frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub input: HistogramSequence,
    pub target: FlowMap,
    /// Name of the recording the window came from.
    pub sequence: String,
}

impl Sample {
    /// Mirrors along x; the horizontal flow component changes sign.
    pub fn flipped(&self) -> Self {
        Self {
            input: self.input.flip_x(),
            target: self.target.flip_x(),
            sequence: self.sequence.clone(),
        }
    }
}

/// Flips with probability `p`, drawing exactly one number from `rng`.
pub fn augment_flip(sample: &Sample, rng: &mut impl Rng, p: f64) -> Sample {
    if rng.gen::<f64>() < p {
        sample.flipped()
    } else {
        sample.clone()
    }
}

/// Optimizer slots, one buffer per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub step: u64,
    pub first: Vec<Vec<T>>,
    /// Empty for momentum SGD.
    pub second: Vec<Vec<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(kind: OptimizerKind, sizes: &[usize]) -> Self {
        let zeros = || sizes.iter().map(|&n| vec![T::zero(); n]).collect::<Vec<_>>();
        Self {
            step: 0,
            first: zeros(),
            second: match kind {
                OptimizerKind::AdaptiveMoments => zeros(),
                OptimizerKind::SgdMomentum => Vec::new(),
            },
        }
    }

    fn apply(&mut self, cfg: &TrainConfig, lr: f64, params: &mut [Tensor<T>], grads: &[Vec<T>]) {
        self.step += 1;
        match cfg.optimizer {
            OptimizerKind::AdaptiveMoments => {
                let (b1, b2) = (cfg.beta1, cfg.beta2);
                let c1 = 1.0 - b1.powi(self.step as i32);
                let c2 = 1.0 - b2.powi(self.step as i32);
                for (k, p) in params.iter_mut().enumerate() {
                    let (m, v) = (&mut self.first[k], &mut self.second[k]);
                    for (i, w) in p.data_mut().iter_mut().enumerate() {
                        let g = grads[k][i].as_f64();
                        let mi = b1 * m[i].as_f64() + (1.0 - b1) * g;
                        let vi = b2 * v[i].as_f64() + (1.0 - b2) * g * g;
                        m[i] = T::from_f64_lossy(mi);
                        v[i] = T::from_f64_lossy(vi);
                        let upd = lr * (mi / c1) / ((vi / c2).sqrt() + cfg.adam_epsilon);
                        *w = T::from_f64_lossy(w.as_f64() - upd);
                    }
                }
            }
            OptimizerKind::SgdMomentum => {
                for (k, p) in params.iter_mut().enumerate() {
                    let buf = &mut self.first[k];
                    for (i, w) in p.data_mut().iter_mut().enumerate() {
                        let b = cfg.momentum * buf[i].as_f64() + grads[k][i].as_f64();
                        buf[i] = T::from_f64_lossy(b);
                        *w = T::from_f64_lossy(w.as_f64() - lr * b);
                    }
                }
            }
        }
    }
}

/// Serializable position of a ChaCha stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// Everything needed to resume training bit-exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    /// `(name, shape, values)` in registration order.
    pub params: Vec<(String, Vec<usize>, Vec<f32>)>,
    pub optimizer_step: u64,
    pub first_moments: Vec<Vec<f32>>,
    pub second_moments: Vec<Vec<f32>>,
    pub rng: RngState,
    /// Number of completed epochs.
    pub epoch: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochReport {
    pub epoch: usize,
    /// Means over trained samples of the final-snapshot loss terms.
    pub loss_mod: f64,
    pub loss_ang: f64,
    /// Mean of the summed per-snapshot training loss.
    pub loss_total: f64,
    pub aee: f64,
    pub lr: f64,
    pub samples: usize,
    pub skipped: usize,
}

impl fmt::Display for EpochReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "epoch={} loss_mod={:.6} loss_ang={:.6} aee={:.6} lr={:.8}",
            self.epoch, self.loss_mod, self.loss_ang, self.aee, self.lr
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceReport {
    pub name: String,
    pub aee: f64,
    pub aae: Option<f64>,
    pub samples: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// Mean over samples of per-sample AEE.
    pub aee: f64,
    /// Mean over samples with at least one non-degenerate pixel.
    pub aae: Option<f64>,
    pub samples: usize,
    pub skipped: usize,
    pub per_sequence: Vec<SequenceReport>,
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let aae = |a: Option<f64>| a.map_or_else(|| "n/a".to_string(), |v| format!("{v:.6}"));
        writeln!(
            f,
            "aee={:.6} aae={} samples={} skipped={}",
            self.aee,
            aae(self.aae),
            self.samples,
            self.skipped
        )?;
        for s in &self.per_sequence {
            writeln!(f, "sequence={} aee={:.6} aae={} samples={}", s.name, s.aee, aae(s.aae), s.samples)?;
        }
        Ok(())
    }
}

/// Result of one forward/backward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub total: f64,
    /// `(L_mod, L_ang)` per snapshot, coarsest first.
    pub per_snapshot: Vec<(f64, f64)>,
    pub aee: f64,
}

/// Loss, per-parameter gradients and the report of one sample.
pub fn compute_gradients<T: Scalar>(
    model: &Model<T>,
    sample: &Sample,
    weights: &LossWeights,
) -> Result<(StepReport, Vec<Vec<T>>)> {
    let mut tape = Tape::new();
    let params = model.bind(&mut tape, true);
    let x = tape.constant(sample.input.to_tensor());
    let trace = model.forward(&mut tape, &params, x)?;
    let loss = objectives::trace_loss(&mut tape, &trace.snapshots, &sample.target, weights)?;
    let total = tape.value(loss.total)?.data()[0].as_f64();
    let aee = objectives::aee(tape.value(trace.prediction())?, &sample.target)?;
    tape.backward(loss.total)?;
    let grads = params
        .vars()
        .iter()
        .zip(model.params().iter())
        .map(|(&v, (_, t))| {
            tape.grad(v)
                .map(|g| g.map_or_else(|| vec![T::zero(); t.len()], <[T]>::to_vec))
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let report = StepReport {
        total,
        per_snapshot: loss.per_snapshot.iter().map(|l| (l.modulus, l.angular)).collect(),
        aee,
    };
    Ok((report, grads))
}

/// Final-snapshot metrics of `model` on `data`; no augmentation, no gradients.
pub fn evaluate<T: Scalar>(model: &Model<T>, data: &[Sample]) -> Result<EvalReport> {
    let mut seqs: BTreeMap<&str, (f64, f64, usize, usize)> = BTreeMap::new();
    let (mut aee_sum, mut aae_sum, mut aae_n, mut n, mut skipped) = (0.0, 0.0, 0usize, 0usize, 0usize);
    for s in data {
        if s.target.valid_count() == 0 {
            skipped += 1;
            continue;
        }
        let pred = model.predict(&s.input.to_tensor())?;
        let e = objectives::aee(&pred, &s.target)?;
        let a = objectives::aae(&pred, &s.target, AAE_MIN_NORM)?;
        let entry = seqs.entry(&s.sequence).or_default();
        entry.0 += e;
        entry.2 += 1;
        aee_sum += e;
        n += 1;
        if let Some(a) = a {
            entry.1 += a;
            entry.3 += 1;
            aae_sum += a;
            aae_n += 1;
        }
    }
    let mean = |s: f64, k: usize| (k > 0).then(|| s / k as f64);
    Ok(EvalReport {
        aee: mean(aee_sum, n).unwrap_or(0.0),
        aae: mean(aae_sum, aae_n),
        samples: n,
        skipped,
        per_sequence: seqs
            .into_iter()
            .map(|(name, (e, a, k, ka))| SequenceReport {
                name: name.to_string(),
                aee: e / k as f64,
                aae: mean(a, ka),
                samples: k,
            })
            .collect(),
    })
}

/// Owns the model, optimizer state, RNG and schedule position.
#[derive(Clone, Debug)]
pub struct Trainer<T> {
    model: Model<T>,
    config: TrainConfig,
    optimizer: OptimizerState<T>,
    rng: ChaCha8Rng,
    epoch: usize,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: Model<T>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let sizes: Vec<usize> = model.params().iter().map(|(_, t)| t.len()).collect();
        Ok(Self {
            optimizer: OptimizerState::new(config.optimizer, &sizes),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            model,
            config,
            epoch: 0,
        })
    }

    pub fn model(&self) -> &Model<T> {
        &self.model
    }

    pub fn into_model(self) -> Model<T> {
        self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Completed epochs.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn lr(&self) -> f64 {
        self.config.lr_at(self.epoch)
    }

    pub fn optimizer(&self) -> &OptimizerState<T> {
        &self.optimizer
    }

    /// One pass over `data` in shuffled order with flip augmentation.
    pub fn train_epoch(&mut self, data: &[Sample]) -> Result<EpochReport> {
        if data.is_empty() {
            return Err(Error::InvalidArgument("training set is empty".into()));
        }
        let lr = self.lr();
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.rng);
        let sizes: Vec<usize> = self.model.params().iter().map(|(_, t)| t.len()).collect();
        let mut acc: Vec<Vec<T>> = sizes.iter().map(|&n| vec![T::zero(); n]).collect();
        let mut pending = 0usize;
        let (mut lm, mut la, mut lt, mut aee, mut n, mut skipped) = (0.0, 0.0, 0.0, 0.0, 0usize, 0usize);
        for &idx in &order {
            let sample = augment_flip(&data[idx], &mut self.rng, self.config.flip_probability);
            if sample.target.valid_count() == 0 {
                skipped += 1;
                continue;
            }
            let (report, grads) = match compute_gradients(&self.model, &sample, &self.config.loss) {
                Ok(r) => r,
                Err(Error::Tensor(TensorError::NonFinite { .. })) => {
                    return Err(Error::NonFiniteLoss {
                        sample: idx,
                        value: f64::NAN,
                    })
                }
                Err(e) => return Err(e),
            };
            if !report.total.is_finite() {
                return Err(Error::NonFiniteLoss {
                    sample: idx,
                    value: report.total,
                });
            }
            let (m, a) = *report.per_snapshot.last().expect("at least one snapshot");
            lm += m;
            la += a;
            lt += report.total;
            aee += report.aee;
            n += 1;
            for (a, g) in acc.iter_mut().zip(&grads) {
                for (x, &y) in a.iter_mut().zip(g) {
                    *x = *x + y;
                }
            }
            pending += 1;
            if pending == self.config.batch_size {
                self.flush(&mut acc, pending, lr);
                pending = 0;
            }
        }
        if pending > 0 {
            self.flush(&mut acc, pending, lr);
        }
        let report = EpochReport {
            epoch: self.epoch,
            loss_mod: lm / n.max(1) as f64,
            loss_ang: la / n.max(1) as f64,
            loss_total: lt / n.max(1) as f64,
            aee: aee / n.max(1) as f64,
            lr,
            samples: n,
            skipped,
        };
        self.epoch += 1;
        Ok(report)
    }

    fn flush(&mut self, acc: &mut [Vec<T>], count: usize, lr: f64) {
        if count > 1 {
            let inv = T::from_f64_lossy(1.0 / count as f64);
            acc.iter_mut().flatten().for_each(|x| *x = *x * inv);
        }
        self.optimizer
            .apply(&self.config, lr, self.model.params_mut().tensors_mut(), acc);
        acc.iter_mut().flatten().for_each(|x| *x = T::zero());
    }

    pub fn evaluate(&self, data: &[Sample]) -> Result<EvalReport> {
        evaluate(&self.model, data)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let to32 = |v: &[T]| v.iter().map(|x| x.as_f64() as f32).collect::<Vec<f32>>();
        Checkpoint {
            model_config: self.model.config().clone(),
            train_config: self.config.clone(),
            params: self
                .model
                .params()
                .iter()
                .map(|(n, t)| (n.to_string(), t.shape().to_vec(), to32(t.data())))
                .collect(),
            optimizer_step: self.optimizer.step,
            first_moments: self.optimizer.first.iter().map(|v| to32(v)).collect(),
            second_moments: self.optimizer.second.iter().map(|v| to32(v)).collect(),
            rng: RngState::capture(&self.rng),
            epoch: self.epoch as u64,
        }
    }

    /// Rebuilds a trainer; fails when the stored tensors do not fit the stored config.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let model = model_from_checkpoint(ck)?;
        let mut trainer = Self::new(model, ck.train_config.clone())?;
        let sizes: Vec<usize> = trainer.model.params().iter().map(|(_, t)| t.len()).collect();
        let load = |bufs: &[Vec<f32>], what: &str| -> Result<Vec<Vec<T>>> {
            if bufs.len() != sizes.len() || bufs.iter().zip(&sizes).any(|(b, &n)| b.len() != n) {
                return Err(Error::Format(format!("{what} do not match the model parameters")));
            }
            Ok(bufs
                .iter()
                .map(|b| b.iter().map(|&x| T::from_f64_lossy(f64::from(x))).collect())
                .collect())
        };
        trainer.optimizer.first = load(&ck.first_moments, "first moments")?;
        trainer.optimizer.second = match ck.train_config.optimizer {
            OptimizerKind::AdaptiveMoments => load(&ck.second_moments, "second moments")?,
            OptimizerKind::SgdMomentum if ck.second_moments.is_empty() => Vec::new(),
            OptimizerKind::SgdMomentum => {
                return Err(Error::Format("momentum SGD checkpoint carries second moments".into()))
            }
        };
        trainer.optimizer.step = ck.optimizer_step;
        trainer.rng = ck.rng.restore();
        trainer.epoch = ck.epoch as usize;
        Ok(trainer)
    }
}

/// Model with the checkpoint's weights; names and shapes must match exactly.
pub fn model_from_checkpoint<T: Scalar>(ck: &Checkpoint) -> Result<Model<T>> {
    let mut model = Model::<T>::build(ck.model_config.clone(), 0)?;
    let ids: Vec<_> = model.params().ids().collect();
    if ids.len() != ck.params.len() {
        return Err(Error::Format(format!(
            "checkpoint has {} parameter tensors, config expects {}",
            ck.params.len(),
            ids.len()
        )));
    }
    for (id, (name, shape, values)) in ids.into_iter().zip(&ck.params) {
        if model.params().name(id) != name {
            return Err(Error::Format(format!(
                "checkpoint parameter {name} where {} was expected",
                model.params().name(id)
            )));
        }
        let t = Tensor::new(shape.clone(), values.iter().map(|&x| T::from_f64_lossy(f64::from(x))).collect())?;
        model.params_mut().set(id, t)?;
    }
    Ok(model)
}

/// Fails unless the checkpoint was written for exactly `config`.
pub fn ensure_config_matches(ck: &Checkpoint, config: &ModelConfig) -> Result<()> {
    if &ck.model_config != config {
        return Err(Error::Config(
            "checkpoint model configuration differs from the requested one".into(),
        ));
    }
    Ok(())
}

/// Names of parameter tensors whose gradient is identically zero.
pub fn dead_parameters<T: Scalar>(model: &Model<T>, sample: &Sample, weights: &LossWeights) -> Result<Vec<String>> {
    let (_, grads) = compute_gradients(model, sample, weights)?;
    Ok(model
        .params()
        .iter()
        .zip(&grads)
        .filter(|(_, g)| g.iter().all(|x| *x == T::zero()))
        .map(|((n, _), _)| n.to_string())
        .collect())
}
