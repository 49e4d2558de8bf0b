//! Local momentum-contrast pretraining of a party's supernet.
//!
//! The query encoder is the party's supernet (weights and architecture
//! logits) followed by a small projection head; the key encoder is a
//! momentum-averaged copy of all of it. Negatives come from a FIFO queue of
//! past keys. Nothing here touches the federation: pretraining costs zero
//! communication rounds.

use std::collections::{BTreeMap, VecDeque};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, GraphError, ParamSet, Tensor, Var};
use crate::nas_optim::Sgd;
use crate::search_space::{ArchParams, Mixing, Supernet, ALPHA};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentPolicy {
    /// Standard deviation of additive Gaussian jitter.
    pub jitter: f64,
    /// Probability of zeroing each coordinate.
    pub mask: f64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            jitter: 0.5,
            mask: 0.2,
        }
    }
}

fn augment_once<R: Rng + ?Sized>(x: &Tensor, policy: &AugmentPolicy, rng: &mut R) -> Tensor {
    let mut out = x.clone();
    for v in out.data_mut() {
        if policy.jitter > 0.0 {
            let z: f64 = rng.sample(StandardNormal);
            *v += policy.jitter * z;
        }
        if policy.mask > 0.0 && rng.random::<f64>() < policy.mask {
            *v = 0.0;
        }
    }
    out
}

/// Two independent stochastic views of `x`.
pub fn augment<R: Rng + ?Sized>(x: &Tensor, policy: &AugmentPolicy, rng: &mut R) -> (Tensor, Tensor) {
    let a = augment_once(x, policy, rng);
    let b = augment_once(x, policy, rng);
    (a, b)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// InfoNCE for one query: the negative log-probability of the positive key
/// in a softmax over `[q·k₊, q·k₁, …]` divided by `tau`.
pub fn info_nce(q: &[f64], k_plus: &[f64], queue: &[Vec<f64>], tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature {tau}")));
    }
    if dot(q, q) == 0.0 || dot(k_plus, k_plus) == 0.0 {
        return Err(GraphError::ZeroNorm.into());
    }
    let pos = dot(q, k_plus) / tau;
    let logits: Vec<f64> = std::iter::once(pos)
        .chain(queue.iter().map(|k| dot(q, k) / tau))
        .collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    Ok(lse - pos)
}

/// Mean InfoNCE over a batch recorded on `g`. `q` and `k` are `[B, D]`
/// row-normalized; `queue_t` is the `[D, Q]` matrix of negatives (or `None`
/// for an empty queue).
pub fn info_nce_graph(
    g: &mut Graph,
    q: Var,
    k: Var,
    queue_t: Option<Var>,
    tau: f64,
) -> Result<Var, GraphError> {
    let pos = g.row_dot(q, k)?;
    let logits = match queue_t {
        Some(qt) => {
            let neg = g.matmul(q, qt)?;
            g.concat_cols(&[pos, neg])?
        }
        None => pos,
    };
    let scaled = g.scale(logits, 1.0 / tau)?;
    let rows = g.value(q).rows();
    g.cross_entropy(scaled, &vec![0; rows])
}

/// `θk ← m θk + (1 − m) θq` for every tensor.
pub fn momentum_update(key: &mut ParamSet, query: &ParamSet, m: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::Config(format!("momentum {m}")));
    }
    if key.len() != query.len() {
        return Err(Error::Config("key and query encoders differ".into()));
    }
    for (name, k) in key.iter_mut() {
        let q = query
            .get(name)
            .ok_or_else(|| Error::Config(format!("query encoder lacks {name}")))?;
        if q.shape() != k.shape() {
            return Err(GraphError::ShapeMismatch {
                op: "momentum_update",
                lhs: k.shape().to_vec(),
                rhs: q.shape().to_vec(),
            }
            .into());
        }
        if m == 1.0 {
            continue;
        }
        if m == 0.0 {
            k.data_mut().copy_from_slice(q.data());
            continue;
        }
        for (kv, qv) in k.data_mut().iter_mut().zip(q.data()) {
            *kv = m * *kv + (1.0 - m) * qv;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MocoConfig {
    pub queue: usize,
    pub momentum: f64,
    pub temperature: f64,
    pub proj_hidden: usize,
    pub proj_out: usize,
    pub lr: f64,
    pub sgd_momentum: f64,
    pub batch: usize,
    pub augment: AugmentPolicy,
}

impl Default for MocoConfig {
    fn default() -> Self {
        Self {
            queue: 1024,
            momentum: 0.999,
            temperature: 0.2,
            proj_hidden: 64,
            proj_out: 32,
            lr: 0.01,
            sgd_momentum: 0.9,
            batch: 32,
            augment: AugmentPolicy::default(),
        }
    }
}

impl MocoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.queue == 0 || self.batch == 0 || self.proj_hidden == 0 || self.proj_out == 0 {
            return bad("queue, batch and projection widths must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return bad(format!("momentum {}", self.momentum));
        }
        if !(self.temperature > 0.0) {
            return bad(format!("temperature {}", self.temperature));
        }
        if !(0.0..=1.0).contains(&self.augment.mask) || !(self.augment.jitter >= 0.0) {
            return bad("augmentation policy out of range".into());
        }
        Sgd::new(self.lr, self.sgd_momentum)?;
        Ok(())
    }
}

const PROJ: [&str; 4] = ["proj.w1", "proj.b1", "proj.w2", "proj.b2"];

/// Contrastive state of one party.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MocoState {
    cfg: MocoConfig,
    head: ParamSet,
    key: ParamSet,
    queue: VecDeque<Vec<f64>>,
    pending: Vec<Vec<f64>>,
}

fn uniform_matrix<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Tensor {
    let s = 1.0 / (rows as f64).sqrt();
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-s..=s)).collect())
}

fn uniform_vector<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, n: usize) -> Tensor {
    let s = 1.0 / (fan_in as f64).sqrt();
    Tensor::vector((0..n).map(|_| rng.random_range(-s..=s)).collect())
}

impl MocoState {
    /// Fresh projection head, key encoder copied from the query encoder and
    /// an empty queue.
    pub fn new<R: Rng + ?Sized>(
        cfg: MocoConfig,
        net: &Supernet,
        alpha: &ArchParams,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = net.out_dim();
        let mut head = ParamSet::new();
        head.insert(PROJ[0], uniform_matrix(rng, d, cfg.proj_hidden));
        head.insert(PROJ[1], uniform_vector(rng, d, cfg.proj_hidden));
        head.insert(PROJ[2], uniform_matrix(rng, cfg.proj_hidden, cfg.proj_out));
        head.insert(PROJ[3], uniform_vector(rng, cfg.proj_hidden, cfg.proj_out));
        let queue = VecDeque::with_capacity(cfg.queue);
        let mut state = Self {
            cfg,
            head,
            key: ParamSet::new(),
            queue,
            pending: Vec::new(),
        };
        state.key = state.query_params(net, alpha);
        Ok(state)
    }

    pub fn config(&self) -> &MocoConfig {
        &self.cfg
    }

    pub fn head(&self) -> &ParamSet {
        &self.head
    }

    pub fn head_mut(&mut self) -> &mut ParamSet {
        &mut self.head
    }

    pub fn key_params(&self) -> &ParamSet {
        &self.key
    }

    pub fn queue(&self) -> &VecDeque<Vec<f64>> {
        &self.queue
    }

    /// All query-encoder tensors: supernet weights, logits and head.
    pub fn query_params(&self, net: &Supernet, alpha: &ArchParams) -> ParamSet {
        net.weights()
            .iter()
            .chain(self.head.iter())
            .map(|(k, v)| (k.clone(), v.clone()))
            .chain(std::iter::once((ALPHA.to_string(), alpha.tensor().clone())))
            .collect()
    }

    fn project(&self, g: &mut Graph, n: Var, head: &BTreeMap<String, Var>) -> Result<Var, GraphError> {
        let h = g.matmul(n, head[PROJ[0]])?;
        let h = g.add_bias(h, head[PROJ[1]])?;
        let h = g.relu(h)?;
        let z = g.matmul(h, head[PROJ[2]])?;
        let z = g.add_bias(z, head[PROJ[3]])?;
        g.normalize_rows(z)
    }

    fn queue_matrix(&self) -> Option<Tensor> {
        if self.queue.is_empty() {
            return None;
        }
        let d = self.cfg.proj_out;
        let q = self.queue.len();
        let mut data = vec![0.0; d * q];
        for (j, key) in self.queue.iter().enumerate() {
            for (i, v) in key.iter().enumerate() {
                data[i * q + j] = *v;
            }
        }
        Some(Tensor::matrix(d, q, data))
    }

    /// Key-encoder embedding of `x`; records nothing that could receive
    /// gradients.
    fn keys(&self, net: &Supernet, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let a = g.constant(self.key.get(ALPHA).expect("key alpha").clone());
        let n = net.forward_with(&mut g, xv, &self.key, Mixing::Soft(a))?;
        let head: BTreeMap<String, Var> = PROJ
            .iter()
            .map(|&p| (p.to_string(), g.constant(self.key.get(p).expect("key head").clone())))
            .collect();
        let k = self.project(&mut g, n, &head)?;
        Ok(g.value(k).clone())
    }

    /// Fills the queue with key embeddings of augmented local samples drawn
    /// from `rows` (at most the queue capacity), so that the first steps
    /// already contrast against real negatives.
    pub fn prime_queue<R: Rng + ?Sized>(
        &mut self,
        net: &Supernet,
        shard: &Tensor,
        rows: &[usize],
        rng: &mut R,
    ) -> Result<()> {
        let mut order = rows.to_vec();
        order.shuffle(rng);
        order.truncate(self.cfg.queue - self.queue.len());
        for chunk in order.chunks(self.cfg.batch.max(1)) {
            let x = augment_once(&shard.select_rows(chunk), &self.cfg.augment, rng);
            let k = self.keys(net, &x)?;
            for i in 0..k.rows() {
                self.queue.push_back(k.row(i).to_vec());
            }
        }
        Ok(())
    }

    /// Contrastive loss on one batch and its gradients with respect to the
    /// supernet weights, `alpha` and the projection head. The batch keys are
    /// held until [`MocoState::finish_step`].
    pub fn loss_and_grads<R: Rng + ?Sized>(
        &mut self,
        net: &Supernet,
        alpha: &ArchParams,
        x: &Tensor,
        rng: &mut R,
    ) -> Result<(f64, BTreeMap<String, Tensor>)> {
        let (v1, v2) = augment(x, &self.cfg.augment, rng);
        let k = self.keys(net, &v2)?;

        let mut g = Graph::new();
        let xv = g.constant(v1);
        let n = net.forward_soft(&mut g, xv, alpha)?;
        let head = g.params_from(&self.head);
        let q = self.project(&mut g, n, &head)?;
        let kv = g.constant(k.clone());
        let qt = self.queue_matrix().map(|t| g.constant(t));
        let loss = info_nce_graph(&mut g, q, kv, qt, self.cfg.temperature)?;
        let value = g.value(loss).item();
        let grads = g.backward(loss)?.into_params();

        self.pending = (0..k.rows()).map(|i| k.row(i).to_vec()).collect();
        Ok((value, grads))
    }

    /// Momentum update of the key encoder, then enqueues the last batch's
    /// keys, evicting the oldest beyond capacity.
    pub fn finish_step(&mut self, net: &Supernet, alpha: &ArchParams) -> Result<()> {
        let query = self.query_params(net, alpha);
        momentum_update(&mut self.key, &query, self.cfg.momentum)?;
        for key in self.pending.drain(..) {
            if self.queue.len() == self.cfg.queue {
                self.queue.pop_front();
            }
            self.queue.push_back(key);
        }
        Ok(())
    }
}

/// Contrastive pretraining over the rows `rows` of `shard`. Every batch
/// takes one SGD step on the supernet weights, `alpha` and the projection
/// head. Returns the per-batch loss history.
#[allow(clippy::too_many_arguments)]
pub fn pretrain_party<R: Rng + ?Sized>(
    net: &mut Supernet,
    alpha: &mut ArchParams,
    state: &mut MocoState,
    opt: &mut Sgd,
    shard: &Tensor,
    rows: &[usize],
    epochs: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if epochs == 0 {
        return Ok(Vec::new());
    }
    if rows.is_empty() {
        return Err(Error::Config("pretraining needs a non-empty shard".into()));
    }
    if state.queue.is_empty() {
        state.prime_queue(net, shard, rows, rng)?;
    }
    let mut history = Vec::new();
    for _ in 0..epochs {
        for batch in crate::data::batches(rows, state.cfg.batch, rng) {
            let x = shard.select_rows(&batch);
            let (loss, grads) = state.loss_and_grads(net, alpha, &x, rng)?;
            opt.step_all(net.weights_mut(), &grads)?;
            opt.step(ALPHA, alpha.tensor_mut(), &grads[ALPHA])?;
            opt.step_all(state.head_mut(), &grads)?;
            state.finish_step(net, alpha)?;
            history.push(loss);
        }
    }
    Ok(history)
}
