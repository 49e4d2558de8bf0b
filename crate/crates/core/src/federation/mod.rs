//! Split training across parties.
//!
//! Every party embeds its own feature block with its supernet. Passive
//! parties (ids `1..K`) send their 64-wide embeddings to the label party
//! `K`, which concatenates them with its own embedding in party order and
//! runs the head. The label party returns the gradient of the loss with
//! respect to each received embedding, and every passive party finishes the
//! chain rule locally. One forward plus backward exchange across all
//! passive parties is one communication round; a forward-only evaluation
//! pass is charged one evaluation round per batch.

mod party;
pub mod transport;
pub mod wire;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Graph, Tensor};
use crate::data::VerticalDataset;
use crate::dp::{ledger_report, noise_rng, Direction, DpConfig, PrivacyLedger, PrivacyRecord};
use crate::exec::Exec;
use crate::nas_optim::{ExchangeReport, OptimConfig, SearchProblem, Sgd, UpdateRule};
use crate::{Error, Result};

pub use party::{party_rng, HeadNet, Party, PartyGrads, HEAD_HIDDEN};
pub use transport::{Transport, TransportError, TransportMode};
pub use wire::{decode_message, encode_message, Header, Message, MsgType, Phase, Precision, WireError, ACT_DIM, HEADER_LEN};

use party::perturb_rows;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FederationConfig {
    pub precision: Precision,
    pub transport: TransportMode,
    pub dp: DpConfig,
    /// Weight of the contrastive term in the combined objective; zero
    /// disables it.
    pub gamma: f64,
    /// Rows per evaluation batch.
    pub eval_batch: usize,
    pub exec: Exec,
}

impl Default for FederationConfig {
    fn default() -> Self {
        Self {
            precision: Precision::F32,
            transport: TransportMode::InProcess,
            dp: DpConfig::default(),
            gamma: 0.0,
            eval_batch: 256,
            exec: Exec::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RoundCounter {
    pub rounds: u64,
    pub eval_rounds: u64,
    pub bytes_sent: BTreeMap<u16, u64>,
}

impl RoundCounter {
    pub fn total_bytes(&self) -> u64 {
        self.bytes_sent.values().sum()
    }
}

/// One received message.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub round: u32,
    pub sender: u16,
    #[serde(rename = "type")]
    pub msg_type: MsgType,
    pub phase: Phase,
    pub bytes: usize,
    pub l2norm: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Transcript(Vec<TranscriptEntry>);

impl Transcript {
    pub fn entries(&self) -> &[TranscriptEntry] {
        &self.0
    }

    /// One JSON object per line.
    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for e in &self.0 {
            s.push_str(&serde_json::to_string(e).expect("transcript entry serializes"));
            s.push('\n');
        }
        s
    }

    pub fn sha256(&self) -> String {
        hex::encode(Sha256::digest(self.to_jsonl().as_bytes()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub loss: f64,
    pub accuracy: f64,
    pub rows: usize,
}

struct LabelState {
    head: HeadNet,
    head_opt: Sgd,
    grad_noise: BTreeMap<u16, ChaCha8Rng>,
}

struct LabelOut {
    train_loss: Option<f64>,
    val_loss: Option<f64>,
    correct: usize,
    grads: PartyGrads,
    to_passive: Vec<Tensor>,
}

pub struct Federation {
    cfg: FederationConfig,
    data: VerticalDataset,
    parties: Vec<Party>,
    label: LabelState,
    transport: Transport,
    counter: RoundCounter,
    transcript: Transcript,
    ledger: PrivacyLedger,
    steps: u64,
}

fn phase_of(rule: UpdateRule) -> Phase {
    match rule {
        UpdateRule::Alpha => Phase::AlphaUpdate,
        UpdateRule::Weights => Phase::WUpdate,
        UpdateRule::Joint { .. } => Phase::Joint,
    }
}

fn targets(labels: &[Option<u32>], rows: &[usize]) -> Result<Vec<usize>> {
    rows.iter()
        .map(|&i| {
            labels[i]
                .map(|y| y as usize)
                .ok_or_else(|| Error::Protocol(format!("sample {i} has no label")))
        })
        .collect()
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

impl Federation {
    /// Connects `parties` (ids `1..=K` in order; the last one holds the
    /// labels) over the configured transport.
    pub fn new(
        data: VerticalDataset,
        parties: Vec<Party>,
        head: HeadNet,
        cfg: FederationConfig,
        seed: u64,
    ) -> Result<Self> {
        cfg.dp.validate()?;
        if !(cfg.gamma >= 0.0 && cfg.gamma.is_finite()) {
            return Err(Error::Config(format!("gamma {}", cfg.gamma)));
        }
        if cfg.eval_batch == 0 {
            return Err(Error::Config("eval_batch must be positive".into()));
        }
        let k = parties.len();
        if k == 0 || k != data.parties() {
            return Err(Error::Config(format!("{k} parties for {} shards", data.parties())));
        }
        let mut width = 0;
        for (i, p) in parties.iter().enumerate() {
            if p.id() as usize != i + 1 {
                return Err(Error::Config(format!("party {} at position {}", p.id(), i + 1)));
            }
            if p.net.in_dim() != data.shard(i).cols() {
                return Err(Error::Config(format!(
                    "party {} supernet takes {} features, shard has {}",
                    p.id(),
                    p.net.in_dim(),
                    data.shard(i).cols()
                )));
            }
            if i + 1 < k && p.net.out_dim() != ACT_DIM {
                return Err(Error::Config(format!("passive embeddings must be {ACT_DIM} wide")));
            }
            width += p.net.out_dim();
        }
        if head.inputs() != width || head.classes() != data.classes() {
            return Err(Error::Config(format!(
                "head maps {} -> {}, parties give {width} features and {} classes",
                head.inputs(),
                head.classes(),
                data.classes()
            )));
        }
        let label_id = k as u16;
        let passive: Vec<u16> = (1..label_id).collect();
        let transport = Transport::connect(cfg.transport, label_id, &passive)?;
        let mut ledger = PrivacyLedger::new();
        let mut grad_noise = BTreeMap::new();
        for &j in &passive {
            grad_noise.insert(j, noise_rng(seed, j, Direction::Backward));
            if cfg.dp.enabled {
                ledger.register(j, Direction::Forward);
                ledger.register(j, Direction::Backward);
            }
        }
        let lr_w = parties[k - 1].opt.w.lr();
        let momentum_w = parties[k - 1].opt.w.momentum();
        Ok(Self {
            data,
            parties,
            label: LabelState {
                head,
                head_opt: Sgd::new(lr_w, momentum_w)?,
                grad_noise,
            },
            transport,
            counter: RoundCounter::default(),
            transcript: Transcript::default(),
            ledger,
            steps: 0,
            cfg,
        })
    }

    /// Builds fresh parties and head from one seed.
    pub fn fresh(
        data: VerticalDataset,
        spec: &crate::search_space::SupernetSpec,
        head_hidden: &[usize],
        optim: &OptimConfig,
        cfg: FederationConfig,
        seed: u64,
    ) -> Result<Self> {
        let k = data.parties();
        let mut parties = Vec::with_capacity(k);
        for i in 0..k {
            let s = crate::search_space::SupernetSpec {
                in_dim: data.shard(i).cols(),
                out_dim: ACT_DIM,
                ..spec.clone()
            };
            parties.push(Party::new(i as u16 + 1, &s, optim, seed)?);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1 << 48);
        let head = HeadNet::new(k * ACT_DIM, head_hidden, data.classes(), &mut rng);
        Self::new(data, parties, head, cfg, seed)
    }

    pub fn config(&self) -> &FederationConfig {
        &self.cfg
    }

    /// Changes the contrastive weight (e.g. to switch it off after search).
    pub fn set_gamma(&mut self, gamma: f64) {
        self.cfg.gamma = gamma;
    }

    pub fn data(&self) -> &VerticalDataset {
        &self.data
    }

    pub fn parties(&self) -> &[Party] {
        &self.parties
    }

    pub fn parties_mut(&mut self) -> &mut [Party] {
        &mut self.parties
    }

    pub fn head(&self) -> &HeadNet {
        &self.label.head
    }

    pub fn head_mut(&mut self) -> &mut HeadNet {
        &mut self.label.head
    }

    /// Resets the head optimizer's momentum buffers.
    pub fn reset_head_optimizer(&mut self) -> Result<()> {
        self.label.head_opt = Sgd::new(self.label.head_opt.lr(), self.label.head_opt.momentum())?;
        Ok(())
    }

    pub fn counter(&self) -> &RoundCounter {
        &self.counter
    }

    pub fn transcript(&self) -> &Transcript {
        &self.transcript
    }

    pub fn ledger(&self) -> &PrivacyLedger {
        &self.ledger
    }

    pub fn privacy_report(&self) -> Result<Vec<PrivacyRecord>> {
        Ok(ledger_report(&self.ledger, self.cfg.dp.delta1, self.cfg.dp.delta_prime)?)
    }

    fn mechanism(&self, phase: Phase, clip: f64, sigma: f64) -> Option<(f64, f64)> {
        let dp = &self.cfg.dp;
        (dp.enabled && (phase != Phase::Eval || dp.in_evaluation)).then_some((clip, sigma))
    }

    fn send(&mut self, from: u16, to: u16, header: Header, payload: &Tensor) -> Result<Tensor> {
        let bytes = encode_message(&Message::new(header, payload))?;
        *self.counter.bytes_sent.entry(from).or_default() += bytes.len() as u64;
        let got = self.transport.deliver(from, to, &bytes)?;
        let m = decode_message(&got)?;
        if m.header != header {
            return Err(Error::Protocol(format!("header changed in transit: {:?}", m.header)));
        }
        self.transcript.0.push(TranscriptEntry {
            round: m.header.round,
            sender: m.header.sender,
            msg_type: m.header.msg_type,
            phase: m.header.phase,
            bytes: got.len(),
            l2norm: m.payload.l2_norm(),
        });
        Ok(m.payload)
    }

    /// Passive forward step and FWD_ACT delivery; returns the embeddings as
    /// received by the label party, in party order.
    fn forward_exchange(
        &mut self,
        train: Option<&[usize]>,
        val: Option<&[usize]>,
        phase: Phase,
        round: u32,
    ) -> Result<Vec<Tensor>> {
        let k = self.parties.len();
        let mech = self.mechanism(phase, self.cfg.dp.c1, self.cfg.dp.sigma1);
        let gamma = self.cfg.gamma;
        let data = &self.data;
        let (passive, _) = self.parties.split_at_mut(k - 1);
        let acts = self.cfg.exec.map_mut(passive, |p| {
            let shard = data.shard(p.id() as usize - 1);
            p.forward(shard, train, val, phase, round, mech, gamma)
        });
        let mut received = Vec::with_capacity(k - 1);
        for (i, act) in acts.into_iter().enumerate() {
            let j = i as u16 + 1;
            if let Some((clip, sigma)) = mech {
                self.ledger.record(j, Direction::Forward, sigma, clip, self.steps);
            }
            let header = Header {
                precision: self.cfg.precision,
                msg_type: MsgType::FwdAct,
                phase,
                sender: j,
                round,
            };
            received.push(self.send(j, k as u16, header, &act?)?);
        }
        Ok(received)
    }

    /// Label-party computation on one micro-batch occupying rows
    /// `offset..offset + rows.len()` of every received embedding.
    fn label_side(
        &self,
        acts: &[Tensor],
        rows: &[usize],
        offset: usize,
        backward: bool,
    ) -> Result<(f64, usize, PartyGrads, Vec<Tensor>)> {
        let k = self.parties.len();
        let me = &self.parties[k - 1];
        let mut g = Graph::new();
        let mut inputs = Vec::with_capacity(k);
        for a in acts {
            inputs.push(g.input(a.slice_rows(offset, offset + rows.len()), backward));
        }
        let own = me.embed(&mut g, self.data.shard(k - 1).select_rows(rows))?;
        let mut cols = inputs.clone();
        cols.push(own);
        let z = if cols.len() == 1 { own } else { g.concat_cols(&cols)? };
        let logits = self.label.head.forward(&mut g, z)?;
        let y = targets(self.data.labels(), rows)?;
        let loss = g.cross_entropy(logits, &y)?;
        let lt = g.value(logits);
        let correct = (0..rows.len()).filter(|&i| argmax(lt.row(i)) == y[i]).count();
        let value = g.value(loss).item();
        if !backward {
            return Ok((value, correct, PartyGrads::default(), Vec::new()));
        }
        let mut grads = g.backward(loss)?;
        let to_passive = inputs
            .iter()
            .map(|&v| grads.take_input(v).expect("watched input"))
            .collect();
        let grads = PartyGrads {
            train: grads.into_params(),
            ..PartyGrads::default()
        };
        Ok((value, correct, grads, to_passive))
    }

    fn label_step(
        &mut self,
        acts: &[Tensor],
        train: Option<&[usize]>,
        val: Option<&[usize]>,
        phase: Phase,
    ) -> Result<LabelOut> {
        let backward = phase != Phase::Eval;
        let mut out = LabelOut {
            train_loss: None,
            val_loss: None,
            correct: 0,
            grads: PartyGrads::default(),
            to_passive: vec![Tensor::zeros(vec![0, ACT_DIM]); acts.len()],
        };
        let mut offset = 0;
        let mut parts: Vec<Vec<Tensor>> = vec![Vec::new(); acts.len()];
        if let Some(rows) = train {
            let (l, c, g, to) = self.label_side(acts, rows, offset, backward)?;
            out.train_loss = Some(l);
            out.correct += c;
            out.grads.train = g.train;
            for (p, t) in parts.iter_mut().zip(to) {
                p.push(t);
            }
            offset += rows.len();
        }
        if let Some(rows) = val {
            let (l, c, g, to) = self.label_side(acts, rows, offset, backward)?;
            out.val_loss = Some(l);
            out.correct += c;
            out.grads.val = g.train;
            for (p, t) in parts.iter_mut().zip(to) {
                p.push(t);
            }
        }
        if backward {
            out.to_passive = parts.iter().map(|p| Tensor::vstack(p)).collect::<Result<_, _>>()?;
            let k = self.parties.len();
            let gamma = self.cfg.gamma;
            let shard = self.data.shard(k - 1);
            out.grads.info = self.parties[k - 1].info_term(shard, train, gamma)?;
        }
        Ok(out)
    }

    /// Runs one full exchange and returns every party's gradients without
    /// applying them.
    fn run(
        &mut self,
        train: Option<&[usize]>,
        val: Option<&[usize]>,
        phase: Phase,
    ) -> Result<(ExchangeReport, Vec<PartyGrads>)> {
        if train.is_none() && val.is_none() {
            return Err(Error::Protocol("exchange without samples".into()));
        }
        let k = self.parties.len();
        let round = self.counter.rounds as u32;
        let acts = self.forward_exchange(train, val, phase, round)?;
        let out = self.label_step(&acts, train, val, phase)?;

        let mech = self.mechanism(phase, self.cfg.dp.c2, self.cfg.dp.sigma2);
        let mut received = Vec::with_capacity(k - 1);
        for (i, grad) in out.to_passive.iter().enumerate() {
            let j = i as u16 + 1;
            let grad = match mech {
                Some((clip, sigma)) => {
                    self.ledger.record(j, Direction::Backward, sigma, clip, self.steps);
                    let rng = self.label.grad_noise.get_mut(&j).expect("noise stream");
                    perturb_rows(grad, clip, sigma, rng)?
                }
                None => grad.clone(),
            };
            let header = Header {
                precision: self.cfg.precision,
                msg_type: MsgType::BwdGrad,
                phase,
                sender: k as u16,
                round,
            };
            received.push(self.send(k as u16, j, header, &grad)?);
        }
        let (passive, _) = self.parties.split_at_mut(k - 1);
        let mut grads: Vec<PartyGrads> = self
            .cfg
            .exec
            .map_mut(passive, |p| p.backward(&received[p.id() as usize - 1], phase, round))
            .into_iter()
            .collect::<Result<_>>()?;
        grads.push(out.grads);

        let mut report = ExchangeReport {
            train_loss: out.train_loss,
            val_loss: out.val_loss,
        };
        if let Some(t) = report.train_loss.as_mut() {
            let info: f64 = grads.iter().filter_map(|g| g.info.as_ref().map(|i| i.0)).sum();
            if grads.iter().any(|g| g.info.is_some()) {
                *t += self.cfg.gamma * info;
            }
        }
        if k > 1 {
            self.counter.rounds += 1;
        }
        self.steps += 1;
        Ok((report, grads))
    }

    /// Gradients of the training loss on `rows` for every party, without
    /// any update. Costs one round.
    pub fn gradients(&mut self, rows: &[usize]) -> Result<Vec<PartyGrads>> {
        Ok(self.run(Some(rows), None, Phase::WUpdate)?.1)
    }

    /// Forward-only pass over `rows` in batches; one evaluation round per
    /// batch.
    pub fn evaluate(&mut self, rows: &[usize]) -> Result<EvalReport> {
        if rows.is_empty() {
            return Err(Error::Config("evaluation needs samples".into()));
        }
        let k = self.parties.len();
        let (mut loss, mut correct) = (0.0, 0);
        for chunk in rows.chunks(self.cfg.eval_batch) {
            let round = self.counter.eval_rounds as u32;
            let acts = self.forward_exchange(Some(chunk), None, Phase::Eval, round)?;
            let out = self.label_step(&acts, Some(chunk), None, Phase::Eval)?;
            loss += out.train_loss.expect("evaluated") * chunk.len() as f64;
            correct += out.correct;
            if k > 1 {
                self.counter.eval_rounds += 1;
            }
        }
        Ok(EvalReport {
            loss: loss / rows.len() as f64,
            accuracy: correct as f64 / rows.len() as f64,
            rows: rows.len(),
        })
    }
}

impl SearchProblem for Federation {
    type Error = Error;

    fn exchange(
        &mut self,
        train: Option<&[usize]>,
        val: Option<&[usize]>,
        rule: UpdateRule,
    ) -> Result<ExchangeReport> {
        let (report, grads) = self.run(train, val, phase_of(rule))?;
        let gamma = self.cfg.gamma;
        let k = self.parties.len();
        let label_grads = &grads[k - 1];
        if matches!(rule, UpdateRule::Weights | UpdateRule::Joint { .. }) {
            self.label
                .head_opt
                .step_all(self.label.head.params_mut(), &label_grads.train)?;
        }
        for (p, g) in self.parties.iter_mut().zip(&grads) {
            p.apply(rule, g, gamma)?;
        }
        for p in &self.parties {
            if !p.net.weights().is_finite() || !p.alpha.tensor().is_finite() {
                return Err(crate::nas_optim::OptimError::NonFinite(format!("party {} parameters", p.id())).into());
            }
        }
        Ok(report)
    }

    fn rounds(&self) -> u64 {
        self.counter.rounds
    }
}
