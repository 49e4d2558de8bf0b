//! Experiment pipelines: optional local pretraining, architecture search,
//! discretization, retraining of the discrete networks and testing.

pub mod checkpoint;
mod report;
mod sweep;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::ParamSet;
use crate::data::{batches, generate_blobs, read_dataset, set_overlap, split, BlobSpec, Splits, VerticalDataset};
use crate::dp::{DpConfig, PrivacyRecord};
use crate::exec::Exec;
use crate::federation::{
    EvalReport, Federation, FederationConfig, HeadNet, Party, Precision, TransportMode, ACT_DIM, HEAD_HIDDEN,
};
use crate::nas_optim::{search_step, GroupOptimizer, OptimConfig, OptimError, SearchProblem, StepMode, UpdateRule};
use crate::search_space::{discretize, DiscreteArch, OpSet, SupernetSpec, ALPHA};
use crate::ssl_pretrain::MocoConfig;
use crate::{Error, Result};

pub use report::{emit_report, write_timing, METRICS_HEADER};
pub use sweep::{sweep, SweepAxis, SweepPoint, SweepSummary};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    /// Label party alone, with local pretraining; never communicates.
    SsnasLocal,
    /// Federated search, first-order bilevel updates.
    Vfnas1,
    /// Federated search, mixed-level updates.
    Vfnas2,
    SsVfnas1,
    SsVfnas2,
    /// Mixed-level exchanges on the classification loss plus a weighted
    /// contrastive term.
    VfnasE2e,
}

impl Algorithm {
    pub const ALL: [Algorithm; 6] = [
        Algorithm::SsnasLocal,
        Algorithm::Vfnas1,
        Algorithm::Vfnas2,
        Algorithm::SsVfnas1,
        Algorithm::SsVfnas2,
        Algorithm::VfnasE2e,
    ];

    pub fn step_mode(self) -> StepMode {
        match self {
            Algorithm::Vfnas1 | Algorithm::SsVfnas1 => StepMode::Bilevel,
            _ => StepMode::Mixlevel,
        }
    }

    pub fn pretrains(self) -> bool {
        matches!(self, Algorithm::SsnasLocal | Algorithm::SsVfnas1 | Algorithm::SsVfnas2)
    }

    pub fn is_local(self) -> bool {
        self == Algorithm::SsnasLocal
    }

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::SsnasLocal => "ssnas_local",
            Algorithm::Vfnas1 => "vfnas1",
            Algorithm::Vfnas2 => "vfnas2",
            Algorithm::SsVfnas1 => "ss_vfnas1",
            Algorithm::SsVfnas2 => "ss_vfnas2",
            Algorithm::VfnasE2e => "vfnas_e2e",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Epochs {
    pub pretrain: usize,
    pub search: usize,
    /// Retraining epochs of the discrete networks; three times the search
    /// epochs when absent.
    pub evaluate: Option<usize>,
}

impl Default for Epochs {
    fn default() -> Self {
        Self {
            pretrain: 5,
            search: 10,
            evaluate: None,
        }
    }
}

impl Epochs {
    pub fn retrain(&self) -> usize {
        self.evaluate.unwrap_or(3 * self.search)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SupernetConfig {
    pub nodes: usize,
    pub hidden: usize,
    pub opset: OpSet,
}

impl Default for SupernetConfig {
    fn default() -> Self {
        Self {
            nodes: 3,
            hidden: 32,
            opset: OpSet::default(),
        }
    }
}

fn default_parties() -> usize {
    2
}
fn default_overlap() -> f64 {
    1.0
}
fn default_split() -> [f64; 3] {
    [0.4, 0.4, 0.2]
}
fn default_batch() -> usize {
    32
}
fn default_head() -> Vec<usize> {
    HEAD_HIDDEN.to_vec()
}
fn default_gamma() -> f64 {
    0.1
}
fn default_eval_every() -> usize {
    5
}

/// Everything that determines a run. Only `algorithm` and `seed` are
/// required in JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub algorithm: Algorithm,
    #[serde(default = "default_parties")]
    pub parties: usize,
    /// Synthetic population; `parties` overrides its party count.
    #[serde(default)]
    pub data: BlobSpec,
    /// Pre-sharded dataset directory used instead of the synthetic one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_dir: Option<PathBuf>,
    /// Start the search from these party checkpoints.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    #[serde(default = "default_overlap")]
    pub overlap: f64,
    #[serde(default = "default_split")]
    pub split: [f64; 3],
    #[serde(default)]
    pub epochs: Epochs,
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default)]
    pub supernet: SupernetConfig,
    #[serde(default = "default_head")]
    pub head_hidden: Vec<usize>,
    #[serde(default)]
    pub optim: OptimConfig,
    #[serde(default)]
    pub moco: MocoConfig,
    #[serde(default)]
    pub dp: DpConfig,
    /// Contrastive weight of the combined objective (`vfnas_e2e` only).
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    /// Search iterations between validation evaluations.
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    /// End the search once the validation accuracy has converged.
    #[serde(default)]
    pub stop_at_convergence: bool,
    #[serde(default)]
    pub precision: Precision,
    #[serde(default)]
    pub transport: TransportMode,
    #[serde(default)]
    pub exec: Exec,
    pub seed: u64,
}

impl ExperimentConfig {
    pub fn new(algorithm: Algorithm, seed: u64) -> Self {
        Self {
            algorithm,
            parties: default_parties(),
            data: BlobSpec::default(),
            data_dir: None,
            checkpoint: None,
            overlap: default_overlap(),
            split: default_split(),
            epochs: Epochs::default(),
            batch: default_batch(),
            supernet: SupernetConfig::default(),
            head_hidden: default_head(),
            optim: OptimConfig::default(),
            moco: MocoConfig::default(),
            dp: DpConfig::default(),
            gamma: default_gamma(),
            eval_every: default_eval_every(),
            stop_at_convergence: false,
            precision: Precision::default(),
            transport: TransportMode::default(),
            exec: Exec::default(),
            seed,
        }
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(json).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.parties == 0 || self.parties > u16::MAX as usize {
            return bad(format!("parties = {}", self.parties));
        }
        if self.batch == 0 || self.eval_every == 0 || self.epochs.search == 0 {
            return bad("batch, eval_every and search epochs must be positive".into());
        }
        if !(self.overlap > 0.0 && self.overlap <= 1.0) {
            return bad(format!("overlap = {}", self.overlap));
        }
        if self.data_dir.is_some() && self.overlap != 1.0 {
            return bad("overlap of a loaded dataset is fixed by its labels".into());
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return bad(format!("gamma = {}", self.gamma));
        }
        if self.supernet.nodes < 2 || self.supernet.hidden == 0 {
            return bad("supernet needs two nodes and a positive width".into());
        }
        self.optim.validate()?;
        self.dp.validate()?;
        self.moco.validate()?;
        BlobSpec {
            parties: self.parties,
            ..self.data.clone()
        }
        .validate()?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub iteration: u64,
    pub epoch: usize,
    pub loss: f64,
    pub val_acc: Option<f64>,
    pub rounds: u64,
    pub bytes: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Convergence {
    /// Index into the sequence of validation evaluations.
    pub eval_index: usize,
    pub iteration: u64,
    pub rounds: u64,
    pub val_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainSummary {
    pub party: u16,
    pub batches: usize,
    pub first_loss: f64,
    pub last_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub algorithm: Algorithm,
    pub parties: usize,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub pretrain: Vec<PretrainSummary>,
    pub pretrain_rounds: u64,
    pub metrics: Vec<IterationMetrics>,
    pub search_iterations: u64,
    pub search_rounds: u64,
    pub eval_rounds: u64,
    pub convergence: Option<Convergence>,
    pub architectures: Vec<serde_json::Value>,
    pub retrain_rounds: Option<u64>,
    pub test_accuracy: Option<f64>,
    pub test_loss: Option<f64>,
    pub privacy: Vec<PrivacyRecord>,
    pub bytes_sent: BTreeMap<u16, u64>,
    pub transcript_sha256: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunOutcome {
    pub report: RunReport,
    pub wall_clock_secs: f64,
}

/// `Some(i)` once more than five evaluations after the best-so-far entry
/// `i` fail to improve on it.
pub fn detect_convergence(history: &[f64]) -> Option<usize> {
    let mut best = 0;
    for i in 1..history.len() {
        if history[i] > history[best] {
            best = i;
        } else if i - best > 5 {
            return Some(best);
        }
    }
    None
}

/// Dataset and splits of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct Prepared {
    pub data: VerticalDataset,
    pub splits: Splits,
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    cfg.validate()?;
    let (mut data, splits) = match &cfg.data_dir {
        Some(dir) => {
            let (ds, splits) = read_dataset(dir)?;
            (ds.first_parties(cfg.parties)?, splits)
        }
        None => {
            let spec = BlobSpec {
                parties: cfg.parties,
                ..cfg.data.clone()
            };
            let mut ds = generate_blobs(&spec, cfg.seed)?;
            if cfg.overlap < 1.0 {
                ds = set_overlap(&ds, cfg.overlap, cfg.seed)?;
            }
            (ds, None)
        }
    };
    let splits = match splits {
        Some(s) => s,
        None => split(&data, cfg.split, cfg.seed)?,
    };
    if cfg.algorithm.is_local() {
        data = data.only_party(data.parties() - 1)?;
    }
    Ok(Prepared { data, splits })
}

/// Rows a party may use for local pretraining: everything except the test
/// split, including unlabeled surplus rows.
pub fn local_rows(prep: &Prepared) -> Vec<usize> {
    let test: std::collections::HashSet<usize> = prep.splits.test.iter().copied().collect();
    (0..prep.data.samples()).filter(|i| !test.contains(i)).collect()
}

fn stream(seed: u64, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((1 << 50) + purpose);
    rng
}

/// Freshly initialized parties for the prepared dataset.
pub fn build_parties(cfg: &ExperimentConfig, prep: &Prepared) -> Result<Vec<Party>> {
    (0..prep.data.parties())
        .map(|i| {
            let spec = SupernetSpec {
                nodes: cfg.supernet.nodes,
                hidden: cfg.supernet.hidden,
                in_dim: prep.data.shard(i).cols(),
                out_dim: ACT_DIM,
                opset: cfg.supernet.opset.clone(),
            };
            Party::new(i as u16 + 1, &spec, &cfg.optim, cfg.seed)
        })
        .collect()
}

/// Supernet weights and logits of every party, as stored in checkpoints.
pub fn party_params(parties: &[Party]) -> Vec<ParamSet> {
    parties
        .iter()
        .map(|p| {
            let mut s = p.net.weights().clone();
            s.insert(ALPHA, p.alpha.tensor().clone());
            s
        })
        .collect()
}

fn load_params(parties: &mut [Party], saved: Vec<ParamSet>) -> Result<()> {
    if saved.len() != parties.len() {
        return Err(Error::Config(format!(
            "checkpoint has {} parties, run has {}",
            saved.len(),
            parties.len()
        )));
    }
    for (p, mut s) in parties.iter_mut().zip(saved) {
        let alpha = s
            .get(ALPHA)
            .cloned()
            .ok_or_else(|| Error::Config("checkpoint lacks alpha".into()))?;
        if alpha.shape() != p.alpha.tensor().shape() {
            return Err(Error::Config("checkpoint alpha shape differs".into()));
        }
        *p.alpha.tensor_mut() = alpha;
        let weights: ParamSet = p
            .net
            .weights()
            .iter()
            .map(|(name, t)| match s.get_mut(name) {
                Some(v) if v.shape() == t.shape() => Ok((name.clone(), v.clone())),
                _ => Err(Error::Config(format!("checkpoint lacks {name}"))),
            })
            .collect::<Result<_>>()?;
        p.net.set_weights(weights);
    }
    Ok(())
}

/// Runs local pretraining on every party when the algorithm calls for it.
pub fn pretrain_parties(cfg: &ExperimentConfig, prep: &Prepared, parties: &mut [Party]) -> Result<Vec<PretrainSummary>> {
    if !cfg.algorithm.pretrains() || cfg.epochs.pretrain == 0 {
        return Ok(Vec::new());
    }
    let rows = local_rows(prep);
    let results = cfg.exec.map_mut(parties, |p| {
        let shard = prep.data.shard(p.id() as usize - 1);
        let losses = p.pretrain(&cfg.moco, shard, &rows, cfg.epochs.pretrain)?;
        let window = 10.min(losses.len()).max(1);
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len().max(1) as f64;
        Ok(PretrainSummary {
            party: p.id(),
            batches: losses.len(),
            first_loss: mean(&losses[..window.min(losses.len())]),
            last_loss: mean(&losses[losses.len().saturating_sub(window)..]),
        })
    });
    results.into_iter().collect()
}

struct Stage {
    prep: Prepared,
    parties: Vec<Party>,
    initial: Vec<ParamSet>,
    pretrain: Vec<PretrainSummary>,
}

fn stage(cfg: &ExperimentConfig) -> Result<Stage> {
    let prep = prepare(cfg)?;
    let mut parties = build_parties(cfg, &prep)?;
    let pretrain = match &cfg.checkpoint {
        Some(dir) => {
            let (_, saved) = checkpoint::load_checkpoint(dir)?;
            load_params(&mut parties, saved)?;
            Vec::new()
        }
        None => pretrain_parties(cfg, &prep, &mut parties)?,
    };
    let initial = parties.iter().map(|p| p.net.weights().clone()).collect();
    Ok(Stage {
        prep,
        parties,
        initial,
        pretrain,
    })
}

fn head(cfg: &ExperimentConfig, prep: &Prepared, purpose: u64) -> HeadNet {
    let k = prep.data.parties();
    HeadNet::new(k * ACT_DIM, &cfg.head_hidden, prep.data.classes(), &mut stream(cfg.seed, purpose))
}

fn federation(cfg: &ExperimentConfig, st: &mut Stage) -> Result<Federation> {
    let e2e = cfg.algorithm == Algorithm::VfnasE2e && cfg.gamma > 0.0;
    if e2e {
        let rows = local_rows(&st.prep);
        for p in st.parties.iter_mut() {
            let shard = st.prep.data.shard(p.id() as usize - 1);
            p.enable_contrastive(&cfg.moco, shard, &rows)?;
        }
    }
    let fcfg = FederationConfig {
        precision: cfg.precision,
        transport: cfg.transport,
        dp: cfg.dp.clone(),
        gamma: if e2e { cfg.gamma } else { 0.0 },
        eval_batch: 256,
        exec: cfg.exec,
    };
    let parties = std::mem::take(&mut st.parties);
    Federation::new(st.prep.data.clone(), parties, head(cfg, &st.prep, 0), fcfg, cfg.seed)
}

struct SearchLog {
    metrics: Vec<IterationMetrics>,
    convergence: Option<Convergence>,
}

fn numerical(what: &str) -> Error {
    OptimError::NonFinite(what.to_string()).into()
}

fn search(cfg: &ExperimentConfig, fed: &mut Federation, splits: &Splits) -> Result<SearchLog> {
    if splits.train.is_empty() || splits.val.is_empty() {
        return Err(Error::Config("search needs non-empty train and validation splits".into()));
    }
    let mut rng = stream(cfg.seed, 1);
    let mode = cfg.algorithm.step_mode();
    let mut log = SearchLog {
        metrics: Vec::new(),
        convergence: None,
    };
    let mut evals: Vec<(f64, u64, u64)> = Vec::new();
    let mut iteration = 0u64;
    for epoch in 0..cfg.epochs.search {
        let tb = batches(&splits.train, cfg.batch, &mut rng);
        let vb = batches(&splits.val, cfg.batch, &mut rng);
        for (i, t) in tb.iter().enumerate() {
            let r = search_step(fed, mode, t, &vb[i % vb.len()], cfg.optim.lambda)?;
            if !r.train_loss.is_finite() || !r.val_loss.is_finite() {
                return Err(numerical("search loss"));
            }
            iteration += 1;
            let val_acc = if iteration % cfg.eval_every as u64 == 0 {
                Some(fed.evaluate(&splits.val)?.accuracy)
            } else {
                None
            };
            log.metrics.push(IterationMetrics {
                iteration,
                epoch,
                loss: r.train_loss,
                val_acc,
                rounds: fed.rounds(),
                bytes: fed.counter().total_bytes(),
            });
            if let Some(acc) = val_acc {
                evals.push((acc, iteration, fed.rounds()));
                if log.convergence.is_none() {
                    let history: Vec<f64> = evals.iter().map(|e| e.0).collect();
                    if let Some(i) = detect_convergence(&history) {
                        log.convergence = Some(Convergence {
                            eval_index: i,
                            iteration: evals[i].1,
                            rounds: evals[i].2,
                            val_acc: evals[i].0,
                        });
                        if cfg.stop_at_convergence {
                            return Ok(log);
                        }
                    }
                }
            }
        }
    }
    Ok(log)
}

fn discretize_all(fed: &Federation) -> Result<Vec<DiscreteArch>> {
    fed.parties()
        .iter()
        .map(|p| Ok(discretize(&p.alpha, &p.net)?))
        .collect()
}

/// Resets every party to its pre-search weights with the discrete
/// architecture, trains the discrete networks and a fresh head on
/// train ∪ validation, then evaluates on the test split.
fn retrain_and_test(
    cfg: &ExperimentConfig,
    fed: &mut Federation,
    initial: &[ParamSet],
    archs: Vec<DiscreteArch>,
    prep: &Prepared,
) -> Result<(u64, EvalReport)> {
    for ((p, w), arch) in fed.parties_mut().iter_mut().zip(initial).zip(archs) {
        p.net.set_weights(w.clone());
        p.arch = Some(arch);
        p.opt = GroupOptimizer::new(&cfg.optim)?;
        p.moco = None;
    }
    *fed.head_mut() = head(cfg, prep, 2);
    fed.reset_head_optimizer()?;
    fed.set_gamma(0.0);
    let mut rows = prep.splits.train.clone();
    rows.extend_from_slice(&prep.splits.val);
    rows.sort_unstable();
    let before = fed.rounds();
    let mut rng = stream(cfg.seed, 3);
    for _ in 0..cfg.epochs.retrain() {
        for b in batches(&rows, cfg.batch, &mut rng) {
            let r = fed.exchange(Some(&b), None, UpdateRule::Weights)?;
            if !r.train_loss.is_some_and(f64::is_finite) {
                return Err(numerical("retraining loss"));
            }
        }
    }
    let rounds = fed.rounds() - before;
    if prep.splits.test.is_empty() {
        return Err(Error::Config("empty test split".into()));
    }
    Ok((rounds, fed.evaluate(&prep.splits.test)?))
}

fn report(cfg: &ExperimentConfig, st: &Stage, fed: &Federation, log: SearchLog, archs: &[DiscreteArch]) -> Result<RunReport> {
    let architectures = archs
        .iter()
        .map(|a| serde_json::from_str(&a.to_json()).expect("architecture json"))
        .collect();
    let search_rounds = log.metrics.last().map_or(0, |m| m.rounds);
    Ok(RunReport {
        algorithm: cfg.algorithm,
        parties: st.prep.data.parties(),
        seed: cfg.seed,
        config: cfg.clone(),
        pretrain: st.pretrain.clone(),
        pretrain_rounds: 0,
        search_iterations: log.metrics.len() as u64,
        search_rounds,
        eval_rounds: fed.counter().eval_rounds,
        convergence: log.convergence,
        metrics: log.metrics,
        architectures,
        retrain_rounds: None,
        test_accuracy: None,
        test_loss: None,
        privacy: fed.privacy_report()?,
        bytes_sent: fed.counter().bytes_sent.clone(),
        transcript_sha256: fed.transcript().sha256(),
    })
}

/// Pretraining (if any), search and discretization. Test fields of the
/// report stay empty.
pub fn run_search(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    let start = Instant::now();
    let mut st = stage(cfg)?;
    let mut fed = federation(cfg, &mut st)?;
    if fed.rounds() != 0 {
        return Err(Error::Protocol("rounds spent before search".into()));
    }
    let log = search(cfg, &mut fed, &st.prep.splits)?;
    let archs = discretize_all(&fed)?;
    let report = report(cfg, &st, &fed, log, &archs)?;
    Ok(RunOutcome {
        report,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    })
}

/// The full pipeline.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    let start = Instant::now();
    let mut st = stage(cfg)?;
    let mut fed = federation(cfg, &mut st)?;
    let log = search(cfg, &mut fed, &st.prep.splits)?;
    let archs = discretize_all(&fed)?;
    let mut report = report(cfg, &st, &fed, log, &archs)?;
    let (retrain_rounds, test) = retrain_and_test(cfg, &mut fed, &st.initial, archs, &st.prep)?;
    report.retrain_rounds = Some(retrain_rounds);
    report.test_accuracy = Some(test.accuracy);
    report.test_loss = Some(test.loss);
    report.privacy = fed.privacy_report()?;
    report.bytes_sent = fed.counter().bytes_sent.clone();
    report.eval_rounds = fed.counter().eval_rounds;
    report.transcript_sha256 = fed.transcript().sha256();
    Ok(RunOutcome {
        report,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub algorithm: Algorithm,
    pub parties: usize,
    pub seed: u64,
    pub retrain_rounds: u64,
    pub test_accuracy: f64,
    pub test_loss: f64,
    pub privacy: Vec<PrivacyRecord>,
}

/// Retrains and tests given discrete architectures (one JSON document per
/// party), starting from the same pre-search weights a search with `cfg`
/// would use.
pub fn run_evaluation(cfg: &ExperimentConfig, archs: &[String]) -> Result<EvaluationReport> {
    let mut st = stage(cfg)?;
    if archs.len() != st.parties.len() {
        return Err(Error::Config(format!(
            "{} architectures for {} parties",
            archs.len(),
            st.parties.len()
        )));
    }
    let parsed = st
        .parties
        .iter()
        .zip(archs)
        .map(|(p, a)| Ok(DiscreteArch::from_json(a, &p.net)?))
        .collect::<Result<Vec<_>>>()?;
    let mut fed = federation(cfg, &mut st)?;
    let (retrain_rounds, test) = retrain_and_test(cfg, &mut fed, &st.initial, parsed, &st.prep)?;
    Ok(EvaluationReport {
        algorithm: cfg.algorithm,
        parties: st.prep.data.parties(),
        seed: cfg.seed,
        retrain_rounds,
        test_accuracy: test.accuracy,
        test_loss: test.loss,
        privacy: fed.privacy_report()?,
    })
}

/// Local pretraining only; returns every party's weights and logits.
pub fn run_pretrain(cfg: &ExperimentConfig) -> Result<(Vec<ParamSet>, Vec<PretrainSummary>)> {
    let prep = prepare(cfg)?;
    let mut parties = build_parties(cfg, &prep)?;
    let mut forced = cfg.clone();
    if !forced.algorithm.pretrains() {
        forced.algorithm = if forced.algorithm.is_local() {
            Algorithm::SsnasLocal
        } else {
            Algorithm::SsVfnas2
        };
    }
    let summary = pretrain_parties(&forced, &prep, &mut parties)?;
    Ok((party_params(&parties), summary))
}
