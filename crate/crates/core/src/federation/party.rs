use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, GraphError, ParamSet, Tensor, Var};
use crate::dp::{clip_and_noise, noise_rng, Direction};
use crate::nas_optim::{GroupOptimizer, OptimConfig, Sgd, UpdateRule};
use crate::search_space::{build_supernet, ArchParams, DiscreteArch, Supernet, SupernetSpec, ALPHA};
use crate::ssl_pretrain::{pretrain_party, MocoConfig, MocoState};
use crate::{Error, Result};

use super::wire::Phase;

/// Widths of the label party's hidden layers.
pub const HEAD_HIDDEN: [usize; 2] = [512, 128];

/// Dense tanh network on the concatenated party embeddings, producing class
/// logits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadNet {
    params: ParamSet,
    layers: usize,
}

impl HeadNet {
    pub fn new<R: Rng + ?Sized>(inputs: usize, hidden: &[usize], classes: usize, rng: &mut R) -> Self {
        let mut params = ParamSet::new();
        let mut fan_in = inputs;
        let widths: Vec<usize> = hidden.iter().copied().chain(std::iter::once(classes)).collect();
        for (i, &w) in widths.iter().enumerate() {
            let s = 1.0 / (fan_in as f64).sqrt();
            let wm = (0..fan_in * w).map(|_| rng.random_range(-s..=s)).collect();
            let b = (0..w).map(|_| rng.random_range(-s..=s)).collect();
            params.insert(format!("head.w{i}"), Tensor::matrix(fan_in, w, wm));
            params.insert(format!("head.b{i}"), Tensor::vector(b));
            fan_in = w;
        }
        Self {
            params,
            layers: widths.len(),
        }
    }

    pub fn inputs(&self) -> usize {
        self.params.get("head.w0").expect("first layer").rows()
    }

    pub fn classes(&self) -> usize {
        self.params
            .get(&format!("head.b{}", self.layers - 1))
            .expect("last layer")
            .numel()
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn forward(&self, g: &mut Graph, z: Var) -> Result<Var, GraphError> {
        let mut h = z;
        for i in 0..self.layers {
            let wn = format!("head.w{i}");
            let bn = format!("head.b{i}");
            let w = g.param(&wn, self.params.get(&wn).expect("head weight"));
            let b = g.param(&bn, self.params.get(&bn).expect("head bias"));
            h = g.matmul(h, w)?;
            h = g.add_bias(h, b)?;
            if i + 1 < self.layers {
                h = g.tanh(h)?;
            }
        }
        Ok(h)
    }
}

/// Gradients one party obtained in an exchange.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PartyGrads {
    /// From the training micro-batch: weights, `alpha`, and for the label
    /// party the head.
    pub train: BTreeMap<String, Tensor>,
    /// From the validation micro-batch.
    pub val: BTreeMap<String, Tensor>,
    /// Unweighted contrastive loss and its gradients, when the combined
    /// objective is active.
    pub info: Option<(f64, BTreeMap<String, Tensor>)>,
}

pub(crate) struct Pending {
    pub phase: Phase,
    pub round: u32,
    pub train: Option<(Graph, Var)>,
    pub val: Option<(Graph, Var)>,
    pub info: Option<(f64, BTreeMap<String, Tensor>)>,
}

/// One participant: its supernet, architecture logits, optimizer state and
/// random streams. Party ids run from 1 to K; party K holds the labels.
pub struct Party {
    id: u16,
    pub net: Supernet,
    pub alpha: ArchParams,
    /// Once set, forward passes use the discrete architecture and the logits
    /// stay frozen.
    pub arch: Option<DiscreteArch>,
    pub opt: GroupOptimizer,
    pub moco: Option<MocoState>,
    rng: ChaCha8Rng,
    noise: ChaCha8Rng,
    pub(crate) pending: Option<Pending>,
}

/// Stream of party `id`'s local randomness derived from `seed`.
pub fn party_rng(seed: u64, id: u16) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((1 << 48) + id as u64);
    rng
}

impl Party {
    /// Fresh supernet drawn from the party's own stream.
    pub fn new(id: u16, spec: &SupernetSpec, optim: &OptimConfig, seed: u64) -> Result<Self> {
        let mut rng = party_rng(seed, id);
        let (net, alpha) = build_supernet(spec, &mut rng)?;
        Ok(Self {
            id,
            net,
            alpha,
            arch: None,
            opt: GroupOptimizer::new(optim)?,
            moco: None,
            rng,
            noise: noise_rng(seed, id, Direction::Forward),
            pending: None,
        })
    }

    pub fn id(&self) -> u16 {
        self.id
    }

    /// Local randomness (augmentation, contrastive pretraining).
    pub fn rng_mut(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    /// Local contrastive pretraining of the supernet weights and logits on
    /// `rows` of the party's own shard. Returns the per-batch losses.
    pub fn pretrain(&mut self, cfg: &MocoConfig, shard: &Tensor, rows: &[usize], epochs: usize) -> Result<Vec<f64>> {
        let mut state = MocoState::new(cfg.clone(), &self.net, &self.alpha, &mut self.rng)?;
        let mut opt = Sgd::new(cfg.lr, cfg.sgd_momentum)?;
        pretrain_party(
            &mut self.net,
            &mut self.alpha,
            &mut state,
            &mut opt,
            shard,
            rows,
            epochs,
            &mut self.rng,
        )
    }

    /// Attaches a fresh contrastive state with a queue primed from `rows`,
    /// for the combined objective.
    pub fn enable_contrastive(&mut self, cfg: &MocoConfig, shard: &Tensor, rows: &[usize]) -> Result<()> {
        let mut state = MocoState::new(cfg.clone(), &self.net, &self.alpha, &mut self.rng)?;
        state.prime_queue(&self.net, shard, rows, &mut self.rng)?;
        self.moco = Some(state);
        Ok(())
    }

    /// Records the party's embedding of `x` on `g`.
    pub fn embed(&self, g: &mut Graph, x: Tensor) -> Result<Var> {
        let xv = g.constant(x);
        Ok(match &self.arch {
            None => self.net.forward_soft(g, xv, &self.alpha)?,
            Some(a) => self.net.hard_forward(g, xv, a)?,
        })
    }

    fn side(&self, shard: &Tensor, rows: Option<&[usize]>) -> Result<Option<(Graph, Var)>> {
        rows.map(|r| {
            let mut g = Graph::new();
            let n = self.embed(&mut g, shard.select_rows(r))?;
            Ok((g, n))
        })
        .transpose()
    }

    /// Contrastive loss on the training rows when the combined objective is
    /// active.
    pub(crate) fn info_term(
        &mut self,
        shard: &Tensor,
        train: Option<&[usize]>,
        gamma: f64,
    ) -> Result<Option<(f64, BTreeMap<String, Tensor>)>> {
        let (Some(rows), Some(moco), None) = (train, self.moco.as_mut(), self.arch.as_ref()) else {
            return Ok(None);
        };
        if gamma == 0.0 {
            return Ok(None);
        }
        let x = shard.select_rows(rows);
        Ok(Some(moco.loss_and_grads(&self.net, &self.alpha, &x, &mut self.rng)?))
    }

    /// Passive-party forward step: embeds both micro-batches, keeps the
    /// graphs for the backward step and returns the (possibly perturbed)
    /// activations to send, training rows first.
    pub(crate) fn forward(
        &mut self,
        shard: &Tensor,
        train: Option<&[usize]>,
        val: Option<&[usize]>,
        phase: Phase,
        round: u32,
        mechanism: Option<(f64, f64)>,
        gamma: f64,
    ) -> Result<Tensor> {
        let t = self.side(shard, train)?;
        let v = self.side(shard, val)?;
        let parts: Vec<Tensor> = [&t, &v]
            .into_iter()
            .flatten()
            .map(|(g, n)| g.value(*n).clone())
            .collect();
        let act = Tensor::vstack(&parts)?;
        self.pending = if phase == Phase::Eval {
            None
        } else {
            let info = self.info_term(shard, train, gamma)?;
            Some(Pending {
                phase,
                round,
                train: t,
                val: v,
                info,
            })
        };
        match mechanism {
            Some((clip, sigma)) => perturb_rows(&act, clip, sigma, &mut self.noise),
            None => Ok(act),
        }
    }

    /// Passive-party backward step: chains the received activation
    /// gradient through the kept graphs.
    pub(crate) fn backward(&mut self, grad: &Tensor, phase: Phase, round: u32) -> Result<PartyGrads> {
        let p = self
            .pending
            .take()
            .ok_or_else(|| Error::Protocol(format!("party {}: gradient without a forward pass", self.id)))?;
        if p.phase != phase || p.round != round {
            return Err(Error::Protocol(format!(
                "party {}: gradient for {phase:?}/{round} after forward {:?}/{}",
                self.id, p.phase, p.round
            )));
        }
        let rows = |s: &Option<(Graph, Var)>| s.as_ref().map_or(0, |(g, n)| g.value(*n).rows());
        let (nt, nv) = (rows(&p.train), rows(&p.val));
        if grad.shape() != [nt + nv, super::wire::ACT_DIM] {
            return Err(Error::Protocol(format!(
                "party {}: gradient shape {:?} for {} rows",
                self.id,
                grad.shape(),
                nt + nv
            )));
        }
        let seeded = |s: Option<(Graph, Var)>, start: usize, end: usize| -> Result<BTreeMap<String, Tensor>> {
            match s {
                Some((g, n)) => Ok(g.backward_seeded(n, &grad.slice_rows(start, end))?.into_params()),
                None => Ok(BTreeMap::new()),
            }
        };
        Ok(PartyGrads {
            train: seeded(p.train, 0, nt)?,
            val: seeded(p.val, nt, nt + nv)?,
            info: p.info,
        })
    }

    /// Applies `rule` to the party's weights and logits; with the combined
    /// objective the contrastive gradients are added with weight `gamma`
    /// and the key encoder advances.
    pub(crate) fn apply(&mut self, rule: UpdateRule, grads: &PartyGrads, gamma: f64) -> Result<()> {
        let mut train = grads.train.clone();
        if let Some((_, info)) = &grads.info {
            for (name, g) in info {
                let scaled = g.scaled(gamma);
                match train.get_mut(name) {
                    Some(t) => t.add_assign(&scaled),
                    None => {
                        train.insert(name.clone(), scaled);
                    }
                }
            }
        }
        let alpha_train = train.remove(ALPHA);
        let alpha = self.arch.is_none().then_some(self.alpha.tensor_mut());
        self.opt.apply(
            rule,
            self.net.weights_mut(),
            alpha,
            Some(&train),
            alpha_train.as_ref(),
            grads.val.get(ALPHA),
        )?;
        if grads.info.is_some() {
            if let Some(moco) = self.moco.as_mut() {
                self.opt.w.step_all(moco.head_mut(), &train)?;
                moco.finish_step(&self.net, &self.alpha)?;
            }
        }
        Ok(())
    }
}

/// Row-wise clip and Gaussian noise: each sample's vector is one mechanism
/// input.
pub(crate) fn perturb_rows(t: &Tensor, clip: f64, sigma: f64, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let mut rows = Vec::with_capacity(t.rows());
    for i in 0..t.rows() {
        let r = clip_and_noise(&Tensor::vector(t.row(i).to_vec()), clip, sigma, rng)?;
        rows.push(r.into_data());
    }
    Ok(Tensor::matrix(t.rows(), t.cols(), rows.concat()))
}
