//! Joint training of encoder, projector and connectivity model.

use alloc::boxed::Box;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

use crate::bridge::marginal_weights;
use crate::checkpoint::Checkpoint;
use crate::cluster::{self, ClusterError, ClusterModel};
use crate::data::{SplitView, Stage};
use crate::eval::{EvalError, Inference};
use crate::metrics::{MetricSet, UserResult};
use crate::model::{Binder, ConnectivityInputConfig, ForwardMode, ModelConfig, ModelError, ParamStore, SdifRec};
use crate::rng::{self, StreamRng};
use crate::sampler::SamplerConfig;
use crate::schedule::{ScheduleError, ScheduleKind, ScheduleParams};
use crate::tensor::{Tape, Tensor, TensorError, Var};
use crate::Scalar;

const TRAIN_LANE: u64 = 0x7a;
const SHUFFLE_LANE: u64 = 0x5f;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("no training pairs: every training prefix has fewer than two items")]
    NoData,
    #[error("non-finite loss at step {step} (users {users:?}, times {times:?})")]
    NonFinite { step: u64, users: Vec<usize>, times: Vec<Scalar> },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: Scalar,
    pub beta2: Scalar,
    pub eps: Scalar,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: Scalar,
    pub batch_size: usize,
    pub epochs: usize,
    pub cond_drop_p: Scalar,
    pub schedule: ScheduleParams,
    pub input: ConnectivityInputConfig,
    pub seed: u64,
    pub con_mode: bool,
    pub k_clusters: usize,
    pub dim: usize,
    pub blocks: usize,
    pub max_len: usize,
    pub dropout: Scalar,
    /// Epochs without a better validation score before stopping.
    pub patience: usize,
    /// Sampler used for validation between epochs.
    pub sampler: SamplerConfig,
    pub adam: AdamConfig,
    pub cluster_iterations: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            batch_size: 256,
            epochs: 200,
            cond_drop_p: 0.1,
            schedule: ScheduleParams::default(),
            input: ConnectivityInputConfig::default(),
            seed: 0,
            con_mode: false,
            k_clusters: 10,
            dim: 128,
            blocks: 4,
            max_len: 50,
            dropout: 0.2,
            patience: 20,
            sampler: SamplerConfig::default(),
            adam: AdamConfig::default(),
            cluster_iterations: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if !(0.0..=1.0).contains(&self.cond_drop_p) {
            return bad("cond_drop_p must lie in [0, 1]");
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return bad("learning rate must be finite and non-negative");
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive");
        }
        if self.con_mode && self.k_clusters == 0 {
            return bad("con mode needs at least one cluster");
        }
        if self.sampler.steps == 0 {
            return bad("validation sampler needs at least one step");
        }
        self.schedule.validate()?;
        Ok(())
    }

    pub fn model_config(&self, num_items: usize) -> ModelConfig {
        ModelConfig {
            num_items,
            dim: self.dim,
            blocks: self.blocks,
            max_len: self.max_len,
            dropout: self.dropout,
            num_clusters: if self.con_mode { self.k_clusters } else { 0 },
            input: self.input,
        }
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<Scalar>>,
    v: Vec<Vec<Scalar>>,
}

impl Adam {
    pub fn new(params: &ParamStore, config: AdamConfig) -> Self {
        let zeros = || params.ids().map(|id| vec![0.0; params.get(id).len()]).collect();
        Self { config, step: 0, m: zeros(), v: zeros() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Parameters without a gradient are left untouched.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Option<Tensor>], lr: Scalar) {
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - libm::pow(beta1, self.step as Scalar);
        let c2 = 1.0 - libm::pow(beta2, self.step as Scalar);
        for (id, g) in params.ids().collect::<Vec<_>>().into_iter().zip(grads) {
            let Some(g) = g else { continue };
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            let p = params.get_mut(id).data_mut();
            for (((p, m), v), g) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.data()) {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                *p -= lr * (*m / c1) / (libm::sqrt(*v / c2) + eps);
            }
        }
    }
}

/// A chronological item run; every prefix predicts the following item.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainSequence {
    pub user: usize,
    pub items: Vec<usize>,
}

/// One sequence per user with at least two training items, keeping the most
/// recent `max_len + 1`.
pub fn training_sequences(split: &SplitView, max_len: usize) -> Vec<TrainSequence> {
    split
        .users
        .iter()
        .enumerate()
        .filter(|(_, u)| u.train.len() >= 2)
        .map(|(i, u)| {
            let start = u.train.len().saturating_sub(max_len + 1);
            TrainSequence { user: i, items: u.train[start..].to_vec() }
        })
        .collect()
}

/// `true` drops the condition for this example.
pub fn condition_coin<R: Rng + ?Sized>(rng: &mut R, p: Scalar) -> bool {
    rng.random::<Scalar>() < p
}

/// Mean cross-entropy of `x̂₀·Eᵀ` against `targets`.
pub fn ce_loss(x0_hat: &Tensor, targets: &[usize], item_embeddings: &Tensor) -> Result<Scalar, TensorError> {
    let mut tape = Tape::new();
    let x = tape.constant(x0_hat.clone());
    let e = tape.constant(item_embeddings.clone());
    let et = tape.transpose(e)?;
    let logits = tape.matmul(x, et)?;
    let loss = tape.cross_entropy(logits, targets)?;
    Ok(tape.value(loss).data()[0])
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub loss: Scalar,
    pub examples: usize,
    pub positions: usize,
    pub conditional: usize,
}

/// Builds the mini-batch loss on `tape`: encode each prefix, draw a bridge
/// time and point per position, predict `x₀` and score it against every item.
pub fn training_loss(
    model: &SdifRec,
    tape: &mut Tape,
    binder: &mut Binder<'_>,
    batch: &[&TrainSequence],
    conditions: Option<&[Vec<Scalar>]>,
    config: &TrainConfig,
    step: u64,
) -> Result<(Var, StepReport, Vec<Scalar>), TrainError> {
    if batch.is_empty() {
        return Err(TrainError::NoData);
    }
    let mut rng: StreamRng = rng::stream(config.seed, TRAIN_LANE, step);
    let mut states = Vec::with_capacity(batch.len());
    let mut targets = Vec::new();
    let mut conditional = 0;
    for (e, seq) in batch.iter().enumerate() {
        let n = seq.items.len();
        let cond = match (config.con_mode, conditions) {
            (true, Some(c)) if !condition_coin(&mut rng, config.cond_drop_p) => Some(c[seq.user].as_slice()),
            (true, None) => return Err(TrainError::Config("con mode needs user conditions".into())),
            _ => None,
        };
        conditional += cond.is_some() as usize;
        let mode = ForwardMode { train: true, seed: config.seed, step, example: e as u64 };
        states.push(model.encode_on_tape(tape, binder, &seq.items[..n - 1], cond, mode)?);
        targets.extend_from_slice(&seq.items[1..]);
    }
    let x1 = tape.concat_rows(&states)?;
    let table = binder.var(tape, model.item_embeddings_id());
    let x0 = tape.gather_rows(table, &targets)?;

    let rows = targets.len();
    let d = model.dim();
    let mut times = Vec::with_capacity(rows);
    let mut w0 = Vec::with_capacity(rows);
    let mut w1 = Vec::with_capacity(rows);
    let mut noise = Vec::with_capacity(rows * d);
    for _ in 0..rows {
        let t: Scalar = rng.random();
        let w = marginal_weights(&config.schedule.coeffs(t)?).map_err(|e| TrainError::Config(format!("{e}")))?;
        let std = w.std();
        noise.extend(rng::normal_vec(&mut rng, d).into_iter().map(|v| std * v));
        times.push(t);
        w0.push(w.w0);
        w1.push(w.w1);
    }
    let a = tape.scale_rows(x0, w0)?;
    let b = tape.scale_rows(x1, w1)?;
    let mean = tape.add(a, b)?;
    let noise = tape.constant(Tensor::matrix(rows, d, noise)?);
    let x_t = tape.add(mean, noise)?;
    let scale = model.sample_input_scale(&mut rng, rows);
    let pred = model.predict_on_tape(tape, binder, x_t, &times, x1, &scale)?;
    let et = tape.transpose(table)?;
    let logits = tape.matmul(pred, et)?;
    let loss = tape.cross_entropy(logits, &targets)?;
    let value = tape.value(loss).data()[0];
    let report = StepReport { loss: value, examples: batch.len(), positions: rows, conditional };
    Ok((loss, report, times))
}

/// Forward and backward pass for one mini-batch without updating anything.
pub fn compute_gradients(
    model: &SdifRec,
    batch: &[&TrainSequence],
    conditions: Option<&[Vec<Scalar>]>,
    config: &TrainConfig,
    step: u64,
) -> Result<(StepReport, Vec<Option<Tensor>>), TrainError> {
    let mut tape = Tape::new();
    let mut binder = Binder::new(model.params(), true);
    let (loss, report, times) = training_loss(model, &mut tape, &mut binder, batch, conditions, config, step)?;
    if !report.loss.is_finite() {
        return Err(TrainError::NonFinite { step, users: batch.iter().map(|s| s.user).collect(), times });
    }
    let mut grads = tape.backward(loss)?;
    Ok((report, binder.gradients(&mut grads)))
}

/// One optimizer update on a mini-batch.
pub fn train_step(
    model: &mut SdifRec,
    optimizer: &mut Adam,
    batch: &[&TrainSequence],
    conditions: Option<&[Vec<Scalar>]>,
    config: &TrainConfig,
    step: u64,
) -> Result<StepReport, TrainError> {
    let (report, grads) = compute_gradients(model, batch, conditions, config, step)?;
    optimizer.step(model.params_mut(), &grads, config.learning_rate);
    Ok(report)
}

/// Strategy for scoring users between epochs.
pub trait Evaluate {
    fn evaluate(
        &self,
        inference: &Inference<'_>,
        split: &SplitView,
        stage: Stage,
        conditions: Option<&[Vec<Scalar>]>,
    ) -> Result<Vec<UserResult>, EvalError>;
}

/// Users one after another.
pub struct Sequential;

impl Evaluate for Sequential {
    fn evaluate(
        &self,
        inference: &Inference<'_>,
        split: &SplitView,
        stage: Stage,
        conditions: Option<&[Vec<Scalar>]>,
    ) -> Result<Vec<UserResult>, EvalError> {
        inference.evaluate(split, stage, conditions)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: Scalar,
    pub steps: u64,
    pub valid: MetricSet,
    pub improved: bool,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    /// Parameters from the best validation epoch.
    pub model: SdifRec,
    pub cluster: Option<ClusterModel>,
    pub history: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_valid: MetricSet,
    pub stopped_early: bool,
}

impl FitResult {
    pub fn conditions(&self) -> Option<Vec<Vec<Scalar>>> {
        self.cluster.as_ref().map(|c| (0..c.assignments.len()).map(|u| c.condition(u)).collect())
    }

    pub fn checkpoint(&self, config: &TrainConfig) -> Checkpoint {
        let mut ck = Checkpoint::new(self.model.clone());
        ck.set_meta("schedule", config.schedule.kind.name());
        ck.set_meta("beta0", format!("{:?}", config.schedule.beta0));
        ck.set_meta("beta1", format!("{:?}", config.schedule.beta1));
        ck.set_meta("seed", config.seed);
        ck.set_meta("best_epoch", self.best_epoch);
        if let Some(c) = &self.cluster {
            ck.extras.push(("cluster.centers".into(), c.centers.clone()));
            let a = c.assignments.iter().map(|&i| i as Scalar).collect();
            ck.extras.push(("cluster.assignments".into(), Tensor::vector(a)));
        }
        ck
    }
}

/// Schedule and per-user conditions stored by [`FitResult::checkpoint`].
pub fn checkpoint_schedule(ck: &Checkpoint) -> Option<ScheduleParams> {
    let kind = ScheduleKind::parse(ck.meta("schedule")?)?;
    let beta0 = ck.meta("beta0")?.parse().ok()?;
    let beta1 = ck.meta("beta1")?.parse().ok()?;
    ScheduleParams::new(kind, beta0, beta1).ok()
}

pub fn checkpoint_conditions(ck: &Checkpoint) -> Option<Vec<Vec<Scalar>>> {
    let k = ck.model.config().num_clusters;
    let a = ck.extra("cluster.assignments")?;
    Some(a.data().iter().map(|&i| cluster::one_hot(i as usize, k)).collect())
}

/// Epoch-level progress hook.
pub type EpochHook<'a> = Box<dyn FnMut(&EpochLog) + 'a>;

/// Trains from scratch, selecting the epoch with the best validation HR@10
/// (NDCG@10 breaks ties). `user_vectors` is required in con mode.
pub fn fit(
    split: &SplitView,
    config: &TrainConfig,
    user_vectors: Option<&Tensor>,
    evaluator: &dyn Evaluate,
    mut on_epoch: Option<EpochHook<'_>>,
) -> Result<FitResult, TrainError> {
    config.validate()?;
    let sequences = training_sequences(split, config.max_len);
    if sequences.is_empty() {
        return Err(TrainError::NoData);
    }
    let mut model = SdifRec::new(config.model_config(split.num_items), config.seed)?;
    let mut cluster = match (config.con_mode, user_vectors) {
        (false, _) => None,
        (true, None) => return Err(TrainError::Config("con mode needs user vectors".into())),
        (true, Some(u)) => {
            if u.rows() != split.users.len() {
                return Err(TrainError::Config(format!("{} user vectors for {} users", u.rows(), split.users.len())));
            }
            Some(cluster::fit_centers(u, config.k_clusters, config.cluster_iterations, config.seed)?)
        }
    };
    let mut optimizer = Adam::new(model.params(), config.adam);
    let mut history = Vec::new();
    let mut best: Option<(SdifRec, Option<ClusterModel>, usize, MetricSet)> = None;
    let mut order: Vec<usize> = (0..sequences.len()).collect();
    let mut stopped_early = false;
    for epoch in 0..config.epochs {
        if epoch > 0 {
            if let (Some(c), Some(u)) = (&cluster, user_vectors) {
                cluster = Some(cluster::refit(u, &c.centers, config.cluster_iterations)?);
            }
        }
        let conditions = cluster.as_ref().map(|c| (0..split.users.len()).map(|u| c.condition(u)).collect::<Vec<_>>());
        let mut shuffle = rng::stream(config.seed, SHUFFLE_LANE, epoch as u64);
        order.shuffle(&mut shuffle);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&TrainSequence> = chunk.iter().map(|&i| &sequences[i]).collect();
            let step = optimizer.steps();
            let r = train_step(&mut model, &mut optimizer, &batch, conditions.as_deref(), config, step)?;
            total += r.loss;
            batches += 1;
        }
        let inference = Inference::new(&model, config.schedule, config.sampler);
        let results = evaluator.evaluate(&inference, split, Stage::Valid, conditions.as_deref())?;
        let valid = MetricSet::from_ranks(results.iter().map(|r| r.rank)).ok_or(TrainError::NoData)?;
        let improved = match &best {
            None => true,
            Some((_, _, _, b)) => valid.hr10 > b.hr10 || (valid.hr10 == b.hr10 && valid.ndcg10 > b.ndcg10),
        };
        if improved {
            best = Some((model.clone(), cluster.clone(), epoch, valid));
        }
        let log = EpochLog { epoch, mean_loss: total / batches as Scalar, steps: optimizer.steps(), valid, improved };
        if let Some(hook) = on_epoch.as_mut() {
            hook(&log);
        }
        history.push(log);
        let best_epoch = best.as_ref().map_or(0, |b| b.2);
        if epoch - best_epoch >= config.patience {
            stopped_early = epoch + 1 < config.epochs;
            break;
        }
    }
    let (model, cluster, best_epoch, best_valid) = best.ok_or(TrainError::Config("zero epochs".into()))?;
    Ok(FitResult { model, cluster, history, best_epoch, best_valid, stopped_early })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Dataset;
    use crate::model::ParamGroup;

    fn small_config() -> TrainConfig {
        TrainConfig { dim: 8, blocks: 1, max_len: 8, batch_size: 4, ..TrainConfig::default() }
    }

    fn toy() -> SplitView {
        Dataset::parse("a 0 1 2 3 4\nb 2 3 4 0 1\nc 4 0 1 2 3\nd 1 2 3 4 0\n").unwrap().dataset.split()
    }

    #[test]
    fn ce_hand_cases() {
        let one = Tensor::matrix(1, 2, vec![0.3, -2.0]).unwrap();
        let table1 = Tensor::matrix(1, 2, vec![1.0, 4.0]).unwrap();
        assert!(ce_loss(&one, &[0], &table1).unwrap().abs() < 1e-15);
        let orth = Tensor::matrix(1, 2, vec![0.0, 1.0]).unwrap();
        let table2 = Tensor::matrix(2, 2, vec![1.0, 0.0, 3.0, 0.0]).unwrap();
        assert!((ce_loss(&orth, &[1], &table2).unwrap() - core::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let split = toy();
        let cfg = TrainConfig { learning_rate: 0.0, ..small_config() };
        let mut model = SdifRec::new(cfg.model_config(5), 1).unwrap();
        let before = model.params().clone();
        let mut opt = Adam::new(model.params(), cfg.adam);
        let seqs = training_sequences(&split, cfg.max_len);
        let batch: Vec<&TrainSequence> = seqs.iter().collect();
        train_step(&mut model, &mut opt, &batch, None, &cfg, 0).unwrap();
        for id in before.ids() {
            assert_eq!(before.get(id), model.params().get(id));
        }
    }

    #[test]
    fn every_group_receives_gradient() {
        let split = toy();
        let cfg = TrainConfig { con_mode: true, k_clusters: 2, cond_drop_p: 0.0, ..small_config() };
        let mut model = SdifRec::new(cfg.model_config(5), 2).unwrap();
        // move FiLM off its identity point so its weights see a signal
        let id = model.params().find("film.beta.weight").unwrap();
        model.params_mut().get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.1);
        let conds: Vec<Vec<Scalar>> = (0..4).map(|u| cluster::one_hot(u % 2, 2)).collect();
        let seqs = training_sequences(&split, cfg.max_len);
        let batch: Vec<&TrainSequence> = seqs.iter().collect();
        let (report, grads) = compute_gradients(&model, &batch, Some(&conds), &cfg, 0).unwrap();
        assert_eq!(report.conditional, 4);
        for group in [ParamGroup::Embeddings, ParamGroup::Encoder, ParamGroup::Projector, ParamGroup::Connectivity] {
            let hit = model
                .params()
                .ids()
                .filter(|&i| model.params().group(i) == group)
                .any(|i| grads[i.index()].as_ref().is_some_and(|g| g.data().iter().any(|&v| v != 0.0)));
            assert!(hit, "{group:?} has no gradient");
        }
    }

    #[test]
    fn degenerate_coins() {
        let split = toy();
        let conds: Vec<Vec<Scalar>> = (0..4).map(|u| cluster::one_hot(u % 2, 2)).collect();
        let seqs = training_sequences(&split, 8);
        let batch: Vec<&TrainSequence> = seqs.iter().collect();
        for (p, expect) in [(1.0, 0), (0.0, 4)] {
            let cfg = TrainConfig { con_mode: true, k_clusters: 2, cond_drop_p: p, ..small_config() };
            let model = SdifRec::new(cfg.model_config(5), 2).unwrap();
            for step in 0..5 {
                let (r, _) = compute_gradients(&model, &batch, Some(&conds), &cfg, step).unwrap();
                assert_eq!(r.conditional, expect);
            }
        }
    }

    #[test]
    fn drop_rate_matches_p() {
        let mut rng = rng::seeded(17);
        let n = 20_000;
        let p = 0.1;
        let drops = (0..n).filter(|_| condition_coin(&mut rng, p)).count() as Scalar;
        let se = libm::sqrt(p * (1.0 - p) / n as Scalar);
        assert!((drops / n as Scalar - p).abs() < 3.0 * se);
    }

    #[test]
    fn fit_rejects_empty_training_data() {
        let split = Dataset::parse("a 0 1 2\nb 1 2 0\n").unwrap().dataset.split();
        let r = fit(&split, &small_config(), None, &Sequential, None);
        assert!(matches!(r, Err(TrainError::NoData)));
    }
}
