//! Learned components: item table, causal transformer encoder with optional
//! FiLM conditioning, and the connectivity MLP that predicts `x₀`.

use alloc::format;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use thiserror::Error;

use crate::rng::{self, StreamRng};
use crate::tensor::{dot, DropoutKey, Gradients, Tape, Tensor, TensorError, Var};
use crate::Scalar;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("empty interaction history")]
    EmptySequence,
    #[error("item {0} is not in the vocabulary")]
    UnknownItem(usize),
    #[error("condition must be one-hot over {0} clusters")]
    NotOneHot(usize),
    #[error("model was built without a condition projector")]
    NoProjector,
    #[error("non-finite input to the connectivity model")]
    NonFinite,
    #[error("invalid model configuration: {0}")]
    Config(String),
}

/// Scaling applied to `x_t` before it enters the connectivity model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConnectivityInputConfig {
    /// Mean of the elementwise scale `α ~ N(μ, σ²)`; also the eval-time scale.
    pub mu: Scalar,
    pub sigma: Scalar,
    /// Time amplification applied before the sinusoidal embedding.
    pub lambda: Scalar,
}

impl Default for ConnectivityInputConfig {
    fn default() -> Self {
        Self { mu: 0.1, sigma: 0.01, lambda: 100.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub num_items: usize,
    pub dim: usize,
    pub blocks: usize,
    pub max_len: usize,
    pub dropout: Scalar,
    /// Number of user clusters; zero builds no condition projector.
    pub num_clusters: usize,
    pub input: ConnectivityInputConfig,
}

impl ModelConfig {
    pub fn new(num_items: usize) -> Self {
        Self {
            num_items,
            dim: 128,
            blocks: 4,
            max_len: 50,
            dropout: 0.2,
            num_clusters: 0,
            input: ConnectivityInputConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Config(m.into()));
        if self.num_items == 0 {
            return bad("vocabulary is empty");
        }
        if self.dim == 0 || !self.dim.is_multiple_of(2) {
            return bad("dimension must be positive and even");
        }
        if self.max_len == 0 {
            return bad("max_len must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if !(self.input.sigma >= 0.0) || !self.input.mu.is_finite() || !(self.input.lambda > 0.0) {
            return bad("connectivity input parameters out of range");
        }
        Ok(())
    }
}

/// Handle to a named parameter tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which part of the model a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Embeddings,
    Encoder,
    Projector,
    Connectivity,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    groups: Vec<ParamGroup>,
    values: Vec<Arc<Tensor>>,
}

impl ParamStore {
    fn add(&mut self, name: String, group: ParamGroup, value: Tensor) -> ParamId {
        self.names.push(name);
        self.groups.push(group);
        self.values.push(Arc::new(value));
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        Arc::make_mut(&mut self.values[id.0])
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn group(&self, id: ParamId) -> ParamGroup {
        self.groups[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn total_values(&self) -> usize {
        self.values.iter().map(|t| t.len()).sum()
    }
}

/// Binds parameters to a tape on first use.
pub struct Binder<'p> {
    store: &'p ParamStore,
    vars: Vec<Option<Var>>,
    trainable: bool,
}

impl<'p> Binder<'p> {
    /// Parameters become leaves (gradients tracked) when `trainable`.
    pub fn new(store: &'p ParamStore, trainable: bool) -> Self {
        Self { store, vars: vec![None; store.len()], trainable }
    }

    /// Uses `vars[i]` for parameter `i` instead of binding new nodes.
    pub fn with_vars(store: &'p ParamStore, vars: &[Var]) -> Self {
        Self { store, vars: vars.iter().copied().map(Some).collect(), trainable: true }
    }

    pub fn var(&mut self, tape: &mut Tape, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let value = Arc::clone(&self.store.values[id.0]);
        let v = if self.trainable { tape.leaf_shared(value) } else { tape.constant_shared(value) };
        self.vars[id.0] = Some(v);
        v
    }

    /// Per-parameter gradients; `None` for parameters that were not used.
    pub fn gradients(&self, grads: &mut Gradients) -> Vec<Option<Tensor>> {
        self.vars.iter().map(|v| v.and_then(|v| grads.take(v))).collect()
    }
}

#[derive(Debug, Clone)]
struct Linear {
    weight: ParamId,
    bias: ParamId,
}

impl Linear {
    fn new(
        store: &mut ParamStore,
        rng: &mut StreamRng,
        name: &str,
        group: ParamGroup,
        fan_in: usize,
        fan_out: usize,
    ) -> Self {
        let std = libm::sqrt(2.0 / (fan_in + fan_out) as Scalar);
        let w = xavier(rng, fan_in, fan_out, std);
        Self {
            weight: store.add(format!("{name}.weight"), group, w),
            bias: store.add(format!("{name}.bias"), group, Tensor::zeros(&[fan_out])),
        }
    }

    fn forward(&self, tape: &mut Tape, b: &mut Binder<'_>, x: Var) -> Result<Var, TensorError> {
        let w = b.var(tape, self.weight);
        let bias = b.var(tape, self.bias);
        let y = tape.matmul(x, w)?;
        tape.add_row(y, bias)
    }
}

fn xavier(rng: &mut StreamRng, rows: usize, cols: usize, std: Scalar) -> Tensor {
    let data = rng::normal_vec(rng, rows * cols).into_iter().map(|v| v * std).collect();
    Tensor::new(vec![rows, cols], data).expect("positive dims")
}

#[derive(Debug, Clone)]
struct Norm {
    gain: ParamId,
    bias: ParamId,
}

const LN_EPS: Scalar = 1e-6;

impl Norm {
    fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), ParamGroup::Encoder, Tensor::full(&[dim], 1.0)),
            bias: store.add(format!("{name}.bias"), ParamGroup::Encoder, Tensor::zeros(&[dim])),
        }
    }

    fn forward(&self, tape: &mut Tape, b: &mut Binder<'_>, x: Var) -> Result<Var, TensorError> {
        let n = tape.layer_norm(x, 1, LN_EPS)?;
        let g = b.var(tape, self.gain);
        let bias = b.var(tape, self.bias);
        let y = tape.mul_row(n, g)?;
        tape.add_row(y, bias)
    }
}

#[derive(Debug, Clone)]
struct Block {
    ln_attn: Norm,
    query: Linear,
    key: Linear,
    value: Linear,
    out: Linear,
    ln_ff: Norm,
    ff_in: Linear,
    ff_out: Linear,
}

/// Train/eval switch plus the dropout stream coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ForwardMode {
    pub train: bool,
    pub seed: u64,
    pub step: u64,
    /// Distinguishes sequences within one step.
    pub example: u64,
}

impl ForwardMode {
    pub const EVAL: ForwardMode = ForwardMode { train: false, seed: 0, step: 0, example: 0 };

    fn key(&self, site: u64) -> DropoutKey {
        DropoutKey { seed: self.seed, layer: (self.example << 16) | site, step: self.step }
    }
}

/// How `x_t` is scaled before entering the connectivity model.
#[derive(Debug, Clone)]
pub enum InputScale {
    /// Elementwise scales, one row per example.
    PerElement(Tensor),
    /// A single scalar for everything.
    Uniform(Scalar),
}

/// The full recommender.
#[derive(Debug, Clone)]
pub struct SdifRec {
    config: ModelConfig,
    params: ParamStore,
    item_embeddings: ParamId,
    positions: ParamId,
    blocks: Vec<Block>,
    final_norm: Norm,
    film: Option<(Linear, Linear)>,
    mlp: [Linear; 3],
}

impl SdifRec {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = rng::stream(seed, 0x1417, 0);
        let mut p = ParamStore::default();
        let d = config.dim;
        let item = rng::normal_vec(&mut rng, config.num_items * d).into_iter().map(|v| 0.02 * v).collect();
        let item_embeddings =
            p.add("item_embeddings".into(), ParamGroup::Embeddings, Tensor::new(vec![config.num_items, d], item)?);
        let pos = rng::normal_vec(&mut rng, config.max_len * d).into_iter().map(|v| 0.02 * v).collect();
        let positions = p.add("positions".into(), ParamGroup::Encoder, Tensor::new(vec![config.max_len, d], pos)?);
        let enc = ParamGroup::Encoder;
        let blocks = (0..config.blocks)
            .map(|i| Block {
                ln_attn: Norm::new(&mut p, &format!("block{i}.ln_attn"), d),
                query: Linear::new(&mut p, &mut rng, &format!("block{i}.query"), enc, d, d),
                key: Linear::new(&mut p, &mut rng, &format!("block{i}.key"), enc, d, d),
                value: Linear::new(&mut p, &mut rng, &format!("block{i}.value"), enc, d, d),
                out: Linear::new(&mut p, &mut rng, &format!("block{i}.out"), enc, d, d),
                ln_ff: Norm::new(&mut p, &format!("block{i}.ln_ff"), d),
                ff_in: Linear::new(&mut p, &mut rng, &format!("block{i}.ff_in"), enc, d, d),
                ff_out: Linear::new(&mut p, &mut rng, &format!("block{i}.ff_out"), enc, d, d),
            })
            .collect();
        let final_norm = Norm::new(&mut p, "final_norm", d);
        let film = (config.num_clusters > 0).then(|| {
            let k = config.num_clusters;
            let proj = ParamGroup::Projector;
            // Zero weights with unit scale bias: β = 1, γ = 0 for every condition.
            let beta = Linear {
                weight: p.add("film.beta.weight".into(), proj, Tensor::zeros(&[k, d])),
                bias: p.add("film.beta.bias".into(), proj, Tensor::full(&[d], 1.0)),
            };
            let gamma = Linear {
                weight: p.add("film.gamma.weight".into(), proj, Tensor::zeros(&[k, d])),
                bias: p.add("film.gamma.bias".into(), proj, Tensor::zeros(&[d])),
            };
            (beta, gamma)
        });
        let conn = ParamGroup::Connectivity;
        let mlp = [
            Linear::new(&mut p, &mut rng, "mlp.0", conn, 3 * d, 2 * d),
            Linear::new(&mut p, &mut rng, "mlp.1", conn, 2 * d, 2 * d),
            Linear::new(&mut p, &mut rng, "mlp.2", conn, 2 * d, d),
        ];
        Ok(Self { config, params: p, item_embeddings, positions, blocks, final_norm, film, mlp })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn num_items(&self) -> usize {
        self.config.num_items
    }

    pub fn has_projector(&self) -> bool {
        self.film.is_some()
    }

    pub fn item_embeddings_id(&self) -> ParamId {
        self.item_embeddings
    }

    pub fn item_embeddings(&self) -> &Tensor {
        self.params.get(self.item_embeddings)
    }

    /// Keeps the most recent `max_len` items.
    pub fn truncate<'a>(&self, ids: &'a [usize]) -> &'a [usize] {
        &ids[ids.len().saturating_sub(self.config.max_len)..]
    }

    fn check_ids(&self, ids: &[usize]) -> Result<(), ModelError> {
        if ids.is_empty() {
            return Err(ModelError::EmptySequence);
        }
        match ids.iter().find(|&&i| i >= self.config.num_items) {
            Some(&bad) => Err(ModelError::UnknownItem(bad)),
            None => Ok(()),
        }
    }

    fn check_condition(&self, c: &[Scalar]) -> Result<(), ModelError> {
        let k = self.config.num_clusters;
        if self.film.is_none() {
            return Err(ModelError::NoProjector);
        }
        let ones = c.iter().filter(|&&v| v == 1.0).count();
        let zeros = c.iter().filter(|&&v| v == 0.0).count();
        if c.len() != k || ones != 1 || ones + zeros != k {
            return Err(ModelError::NotOneHot(k));
        }
        Ok(())
    }

    /// Encoder states at every position of `ids` (already truncated), `[L×d]`.
    ///
    /// With `condition = Some(c)` item embeddings are modulated as `β ⊙ e + γ`
    /// with `(β, γ)` projected from the one-hot `c`; `None` bypasses FiLM.
    pub fn encode_on_tape(
        &self,
        tape: &mut Tape,
        b: &mut Binder<'_>,
        ids: &[usize],
        condition: Option<&[Scalar]>,
        mode: ForwardMode,
    ) -> Result<Var, ModelError> {
        self.check_ids(ids)?;
        if ids.len() > self.config.max_len {
            return Err(ModelError::Config(format!(
                "sequence of {} exceeds max_len {}",
                ids.len(),
                self.config.max_len
            )));
        }
        let len = ids.len();
        let d = self.config.dim;
        let table = b.var(tape, self.item_embeddings);
        let mut x = tape.gather_rows(table, ids)?;
        if let Some(c) = condition {
            self.check_condition(c)?;
            let (beta, gamma) = self.film.as_ref().ok_or(ModelError::NoProjector)?;
            let cv = tape.constant(Tensor::matrix(1, c.len(), c.to_vec())?);
            let scale = beta.forward(tape, b, cv)?;
            let shift = gamma.forward(tape, b, cv)?;
            x = tape.mul_row(x, scale)?;
            x = tape.add_row(x, shift)?;
        }
        let pos_table = b.var(tape, self.positions);
        let positions: Vec<usize> = (0..len).collect();
        let pos = tape.gather_rows(pos_table, &positions)?;
        x = tape.add(x, pos)?;
        x = tape.dropout(x, self.config.dropout, mode.key(0), mode.train)?;

        let mut mask = vec![0.0; len * len];
        for i in 0..len {
            for j in i + 1..len {
                mask[i * len + j] = Scalar::NEG_INFINITY;
            }
        }
        let mask = tape.constant(Tensor::matrix(len, len, mask)?);
        let inv_sqrt_d = 1.0 / libm::sqrt(d as Scalar);

        for (i, blk) in self.blocks.iter().enumerate() {
            let site = 1 + 3 * i as u64;
            let h = blk.ln_attn.forward(tape, b, x)?;
            let q = blk.query.forward(tape, b, h)?;
            let k = blk.key.forward(tape, b, h)?;
            let v = blk.value.forward(tape, b, h)?;
            let kt = tape.transpose(k)?;
            let scores = tape.matmul(q, kt)?;
            let scores = tape.mul_scalar(scores, inv_sqrt_d);
            let scores = tape.add(scores, mask)?;
            let attn = tape.softmax(scores, 1)?;
            let attn = tape.dropout(attn, self.config.dropout, mode.key(site), mode.train)?;
            let ctx = tape.matmul(attn, v)?;
            let o = blk.out.forward(tape, b, ctx)?;
            let o = tape.dropout(o, self.config.dropout, mode.key(site + 1), mode.train)?;
            x = tape.add(x, o)?;

            let h = blk.ln_ff.forward(tape, b, x)?;
            let f = blk.ff_in.forward(tape, b, h)?;
            let f = tape.relu(f);
            let f = blk.ff_out.forward(tape, b, f)?;
            let f = tape.dropout(f, self.config.dropout, mode.key(site + 2), mode.train)?;
            x = tape.add(x, f)?;
        }
        Ok(self.final_norm.forward(tape, b, x)?)
    }

    fn encode_last(&self, ids: &[usize], condition: Option<&[Scalar]>) -> Result<Vec<Scalar>, ModelError> {
        let ids = self.truncate(ids);
        let mut tape = Tape::new();
        let mut b = Binder::new(&self.params, false);
        let states = self.encode_on_tape(&mut tape, &mut b, ids, condition, ForwardMode::EVAL)?;
        Ok(tape.value(states).row(ids.len() - 1).to_vec())
    }

    /// User state `h_u`: the encoder output at the last position (eval mode).
    pub fn encode(&self, ids: &[usize]) -> Result<Vec<Scalar>, ModelError> {
        self.encode_last(ids, None)
    }

    /// Conditional user state; `None` is the null condition.
    pub fn encode_conditional(&self, ids: &[usize], condition: Option<&[Scalar]>) -> Result<Vec<Scalar>, ModelError> {
        self.encode_last(ids, condition)
    }

    /// Shares every weight with [`Self::encode_conditional`], FiLM bypassed.
    pub fn encode_unconditional(&self, ids: &[usize]) -> Result<Vec<Scalar>, ModelError> {
        self.encode_last(ids, None)
    }

    /// Sinusoidal features of `λ·t`: `[sin(λt·ω_i)…, cos(λt·ω_i)…]`.
    pub fn time_embed(&self, t: Scalar) -> Vec<Scalar> {
        time_embedding(self.config.input.lambda * t, self.config.dim)
    }

    /// Connectivity model on the tape: `MLP([α ⊙ x_t, temb(λt), x₁])`.
    pub fn predict_on_tape(
        &self,
        tape: &mut Tape,
        b: &mut Binder<'_>,
        x_t: Var,
        times: &[Scalar],
        x1: Var,
        scale: &InputScale,
    ) -> Result<Var, ModelError> {
        let d = self.config.dim;
        let mut temb = Vec::with_capacity(times.len() * d);
        for &t in times {
            temb.extend(self.time_embed(t));
        }
        let temb = tape.constant(Tensor::matrix(times.len(), d, temb)?);
        let scaled = match scale {
            InputScale::PerElement(a) => {
                let a = tape.constant(a.clone());
                tape.mul(x_t, a)?
            }
            InputScale::Uniform(s) => tape.mul_scalar(x_t, *s),
        };
        let input = tape.concat_cols(&[scaled, temb, x1])?;
        let h = self.mlp[0].forward(tape, b, input)?;
        let h = tape.gelu(h);
        let h = self.mlp[1].forward(tape, b, h)?;
        let h = tape.gelu(h);
        Ok(self.mlp[2].forward(tape, b, h)?)
    }

    /// Eval-mode prediction of `x₀` with the deterministic scale `α = μ`.
    pub fn predict_x0(&self, x_t: &[Scalar], t: Scalar, x1: &[Scalar]) -> Result<Vec<Scalar>, ModelError> {
        let d = self.config.dim;
        if x_t.len() != d || x1.len() != d {
            return Err(TensorError::Dimension(format!("expected vectors of length {d}")).into());
        }
        if x_t.iter().chain(x1).any(|v| !v.is_finite()) || !t.is_finite() {
            return Err(ModelError::NonFinite);
        }
        let mut tape = Tape::new();
        let mut b = Binder::new(&self.params, false);
        let xv = tape.constant(Tensor::matrix(1, d, x_t.to_vec())?);
        let yv = tape.constant(Tensor::matrix(1, d, x1.to_vec())?);
        let out = self.predict_on_tape(&mut tape, &mut b, xv, &[t], yv, &InputScale::Uniform(self.config.input.mu))?;
        Ok(tape.value(out).data().to_vec())
    }

    /// Draws a training-time scale matrix `α ~ N(μ, σ²)`, one row per example.
    pub fn sample_input_scale<R: Rng + ?Sized>(&self, rng: &mut R, rows: usize) -> InputScale {
        let ConnectivityInputConfig { mu, sigma, .. } = self.config.input;
        let d = self.config.dim;
        let data = (0..rows * d).map(|_| mu + sigma * rng::normal(rng)).collect();
        InputScale::PerElement(Tensor::new(vec![rows, d], data).expect("positive dims"))
    }

    /// Inner-product score of every item against `x̂₀`.
    pub fn score_candidates(&self, x0_hat: &[Scalar]) -> Vec<Scalar> {
        score_candidates(x0_hat, self.item_embeddings())
    }

    pub(crate) fn replace_params(&mut self, params: ParamStore) -> Result<(), ModelError> {
        if params.len() != self.params.len() {
            return Err(ModelError::Config("parameter count mismatch".into()));
        }
        for id in self.params.ids() {
            if params.name(id) != self.params.name(id) || params.get(id).shape() != self.params.get(id).shape() {
                return Err(ModelError::Config(format!("parameter {} does not match", self.params.name(id))));
            }
        }
        self.params = params;
        Ok(())
    }

    /// Overwrites one parameter by name, keeping its shape.
    pub fn set_param(&mut self, name: &str, value: Tensor) -> Result<(), ModelError> {
        let id = self.params.find(name).ok_or_else(|| ModelError::Config(format!("no parameter {name}")))?;
        if self.params.get(id).shape() != value.shape() {
            return Err(ModelError::Config(format!("shape mismatch for {name}")));
        }
        *self.params.get_mut(id) = value;
        Ok(())
    }
}

/// `[sin(x·ω_0), …, sin(x·ω_{h−1}), cos(x·ω_0), …]` with `ω_i = 10000^{−i/h}`, `h = dim/2`.
pub fn time_embedding(x: Scalar, dim: usize) -> Vec<Scalar> {
    let half = dim / 2;
    let freq = |i: usize| libm::exp(-libm::log(10_000.0) * i as Scalar / half as Scalar);
    let mut out = Vec::with_capacity(dim);
    out.extend((0..half).map(|i| libm::sin(x * freq(i))));
    out.extend((0..half).map(|i| libm::cos(x * freq(i))));
    out
}

/// `score_i = x̂₀ · e_i` for every row of `table`.
pub fn score_candidates(x0_hat: &[Scalar], table: &Tensor) -> Vec<Scalar> {
    (0..table.rows()).map(|i| dot(x0_hat, table.row(i))).collect()
}

/// Item ids sorted by descending score, ties by ascending id.
pub fn rank_items(scores: &[Scalar]) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..scores.len()).collect();
    ids.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    ids
}

/// One-based rank of `target` under the ordering of [`rank_items`].
pub fn rank_of(scores: &[Scalar], target: usize) -> usize {
    let s = scores[target];
    1 + scores.iter().enumerate().filter(|&(j, &v)| v.total_cmp(&s).is_gt() || (v == s && j < target)).count()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(num_clusters: usize) -> SdifRec {
        let cfg = ModelConfig {
            num_items: 7,
            dim: 8,
            blocks: 2,
            max_len: 6,
            dropout: 0.2,
            num_clusters,
            input: ConnectivityInputConfig::default(),
        };
        SdifRec::new(cfg, 3).unwrap()
    }

    #[test]
    fn encode_shapes_and_determinism() {
        let m = tiny(0);
        for len in 1..=6 {
            let ids: Vec<usize> = (0..len).map(|i| i % 7).collect();
            let h = m.encode(&ids).unwrap();
            assert_eq!(h.len(), 8);
            assert_eq!(h, m.encode(&ids).unwrap());
        }
        assert_eq!(m.encode(&[]), Err(ModelError::EmptySequence));
        assert_eq!(m.encode(&[9]), Err(ModelError::UnknownItem(9)));
    }

    #[test]
    fn long_histories_are_left_truncated() {
        let m = tiny(0);
        let long = [0, 1, 2, 3, 4, 5, 6, 1, 2];
        assert_eq!(m.encode(&long).unwrap(), m.encode(&long[3..]).unwrap());
    }

    #[test]
    fn order_matters() {
        let m = tiny(0);
        assert_ne!(m.encode(&[1, 2, 3, 4, 5]).unwrap(), m.encode(&[2, 1, 3, 4, 5]).unwrap());
    }

    #[test]
    fn causal_states_ignore_later_items() {
        let m = tiny(0);
        let run = |ids: &[usize]| {
            let mut tape = Tape::new();
            let mut b = Binder::new(m.params(), false);
            let s = m.encode_on_tape(&mut tape, &mut b, ids, None, ForwardMode::EVAL).unwrap();
            tape.value(s).clone()
        };
        let a = run(&[1, 2, 3, 4]);
        let b = run(&[1, 2, 6, 0]);
        assert_eq!(a.row(0), b.row(0));
        assert_eq!(a.row(1), b.row(1));
        assert_ne!(a.row(2), b.row(2));
    }

    #[test]
    fn film_starts_as_identity() {
        let m = tiny(3);
        let ids = [4, 1, 5];
        let base = m.encode(&ids).unwrap();
        assert_eq!(m.encode_conditional(&ids, Some(&[0.0, 1.0, 0.0])).unwrap(), base);
        assert_eq!(m.encode_conditional(&ids, None).unwrap(), base);
        assert_eq!(m.encode_unconditional(&ids).unwrap(), base);
        assert_eq!(m.encode_conditional(&ids, Some(&[0.5, 0.5, 0.0])), Err(ModelError::NotOneHot(3)));
        assert_eq!(m.encode_conditional(&ids, Some(&[1.0, 0.0])), Err(ModelError::NotOneHot(3)));
        assert_eq!(tiny(0).encode_conditional(&ids, Some(&[1.0])), Err(ModelError::NoProjector));
    }

    #[test]
    fn predictor_shape_and_determinism() {
        let m = tiny(0);
        let x = vec![0.1; 8];
        let y = vec![-0.3; 8];
        let a = m.predict_x0(&x, 0.4, &y).unwrap();
        assert_eq!(a.len(), 8);
        assert_eq!(a, m.predict_x0(&x, 0.4, &y).unwrap());
        assert_eq!(m.predict_x0(&[Scalar::NAN; 8], 0.4, &y), Err(ModelError::NonFinite));
    }

    #[test]
    fn time_embedding_at_zero_and_injective_on_grid() {
        let e = time_embedding(0.0, 8);
        assert_eq!(&e[..4], &[0.0; 4]);
        assert_eq!(&e[4..], &[1.0; 4]);
        let m = SdifRec::new(ModelConfig { dim: 128, blocks: 1, ..ModelConfig::new(3) }, 0).unwrap();
        for steps in [1usize, 2, 12, 32, 64] {
            let embs: Vec<Vec<Scalar>> =
                (0..=steps).map(|i| m.time_embed(1.0 - i as Scalar / steps as Scalar)).collect();
            for i in 0..embs.len() {
                for j in 0..i {
                    let dist: Scalar = embs[i].iter().zip(&embs[j]).map(|(a, b)| (a - b).powi(2)).sum();
                    assert!(dist > 1e-6, "steps {steps}: {i} and {j} collide");
                }
            }
        }
    }

    #[test]
    fn scoring_and_ranking() {
        let table = Tensor::matrix(3, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let s = score_candidates(&[0.0, 1.0, 0.0], &table);
        assert_eq!(rank_items(&s)[0], 1);
        assert_eq!(rank_of(&s, 1), 1);
        // ties break toward the lower id
        assert_eq!(rank_items(&[0.5, 0.5, 0.1]), vec![0, 1, 2]);
        assert_eq!(rank_of(&[0.5, 0.5, 0.1], 1), 2);
        let reordered = Tensor::matrix(3, 3, vec![0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        assert_eq!(score_candidates(&[0.0, 1.0, 0.0], &reordered)[1], s[1]);
    }
}
