//! Shared fixtures: small federations and an independent single-graph
//! model of the composite network used as an oracle.
#![allow(dead_code)]

use std::collections::BTreeMap;

use vfnas::autodiff::{Graph, ParamSet, Tensor, Var};
use vfnas::data::{generate_blobs, split, BlobSpec, Splits, VerticalDataset};
use vfnas::dp::DpConfig;
use vfnas::federation::{Federation, FederationConfig, Precision, TransportMode, ACT_DIM};
use vfnas::nas_optim::OptimConfig;
use vfnas::search_space::SupernetSpec;

pub const HEAD: [usize; 2] = [16, 8];

pub fn small_data(parties: usize, seed: u64) -> (VerticalDataset, Splits) {
    let spec = BlobSpec {
        parties,
        samples: 120,
        dim: 4,
        classes: 3,
        ..BlobSpec::default()
    };
    let ds = generate_blobs(&spec, seed).unwrap();
    let splits = split(&ds, [0.5, 0.25, 0.25], seed).unwrap();
    (ds, splits)
}

pub fn optim() -> OptimConfig {
    OptimConfig {
        lr_w: 0.05,
        momentum_w: 0.9,
        lr_alpha: 0.05,
        momentum_alpha: 0.5,
        lambda: 0.7,
    }
}

pub struct Setup {
    pub parties: usize,
    pub nodes: usize,
    pub precision: Precision,
    pub transport: TransportMode,
    pub dp: DpConfig,
    pub seed: u64,
}

impl Default for Setup {
    fn default() -> Self {
        Self {
            parties: 2,
            nodes: 2,
            precision: Precision::F64,
            transport: TransportMode::InProcess,
            dp: DpConfig::default(),
            seed: 5,
        }
    }
}

impl Setup {
    pub fn build(&self) -> (Federation, Splits) {
        let (ds, splits) = small_data(self.parties, self.seed);
        let spec = SupernetSpec {
            nodes: self.nodes,
            hidden: 6,
            in_dim: 0,
            out_dim: ACT_DIM,
            opset: Default::default(),
        };
        let cfg = FederationConfig {
            precision: self.precision,
            transport: self.transport,
            dp: self.dp.clone(),
            eval_batch: 64,
            ..FederationConfig::default()
        };
        let fed = Federation::fresh(ds, &spec, &HEAD, &optim(), cfg, self.seed).unwrap();
        (fed, splits)
    }
}

fn prefixed(k: usize, name: &str) -> String {
    format!("p{k}.{name}")
}

/// The split network written as one graph over all parameters, for
/// two-node supernets (a single mixed edge per party).
pub struct Oracle {
    pub params: ParamSet,
    parties: usize,
    head_layers: usize,
    cfg: OptimConfig,
    bufs: BTreeMap<String, Vec<f64>>,
}

impl Oracle {
    pub fn from_federation(fed: &Federation) -> Self {
        let mut params = ParamSet::new();
        for (i, p) in fed.parties().iter().enumerate() {
            assert_eq!(p.net.nodes(), 2, "oracle covers single-edge supernets");
            for (name, t) in p.net.weights().iter() {
                params.insert(prefixed(i + 1, name), t.clone());
            }
            params.insert(prefixed(i + 1, "alpha"), p.alpha.tensor().clone());
        }
        for (name, t) in fed.head().params().iter() {
            params.insert(name.clone(), t.clone());
        }
        Self {
            params,
            parties: fed.parties().len(),
            head_layers: fed.head().params().len() / 2,
            cfg: optim(),
            bufs: BTreeMap::new(),
        }
    }

    /// Composite loss on `rows`.
    pub fn loss(&self, g: &mut Graph, vars: &BTreeMap<String, Var>, data: &VerticalDataset, rows: &[usize]) -> Var {
        let mut embeds = Vec::new();
        for k in 1..=self.parties {
            let x = g.constant(data.shard(k - 1).select_rows(rows));
            let a = vars[&prefixed(k, "alpha")];
            let row = g.row(a, 0).unwrap();
            let mix = g.softmax(row).unwrap();
            let zero = g.constant(Tensor::zeros(vec![rows.len(), ACT_DIM]));
            let skip = g.resize_cols(x, ACT_DIM).unwrap();
            let mut outs = vec![zero, skip];
            for op in ["linear_relu", "linear_tanh"] {
                let w = vars[&prefixed(k, &format!("net.e0.{op}.w"))];
                let b = vars[&prefixed(k, &format!("net.e0.{op}.b"))];
                let z = g.matmul(x, w).unwrap();
                let z = g.add_bias(z, b).unwrap();
                outs.push(if op == "linear_relu" { g.relu(z).unwrap() } else { g.tanh(z).unwrap() });
            }
            embeds.push(g.weighted_sum(mix, &outs).unwrap());
        }
        let mut h = g.concat_cols(&embeds).unwrap();
        for i in 0..self.head_layers {
            h = g.matmul(h, vars[&format!("head.w{i}")]).unwrap();
            h = g.add_bias(h, vars[&format!("head.b{i}")]).unwrap();
            if i + 1 < self.head_layers {
                h = g.tanh(h).unwrap();
            }
        }
        let y: Vec<usize> = rows.iter().map(|&i| data.labels()[i].unwrap() as usize).collect();
        g.cross_entropy(h, &y).unwrap()
    }

    pub fn grads(&self, data: &VerticalDataset, rows: &[usize]) -> (f64, BTreeMap<String, Tensor>) {
        let mut g = Graph::new();
        let vars = g.params_from(&self.params);
        let loss = self.loss(&mut g, &vars, data, rows);
        (g.value(loss).item(), g.backward(loss).unwrap().into_params())
    }

    fn sgd(&mut self, name: &str, grad: &Tensor, lr: f64, mu: f64) {
        let p = self.params.get_mut(name).unwrap();
        if mu == 0.0 {
            for (p, g) in p.data_mut().iter_mut().zip(grad.data()) {
                *p -= lr * g;
            }
            return;
        }
        let buf = self.bufs.entry(name.to_string()).or_insert_with(|| vec![0.0; grad.numel()]);
        for ((p, b), g) in p.data_mut().iter_mut().zip(buf.iter_mut()).zip(grad.data()) {
            *b = mu * *b + g;
            *p -= lr * *b;
        }
    }

    /// Fused step: weights on the training loss, logits on
    /// `train + lambda * val`.
    pub fn mixlevel_step(&mut self, data: &VerticalDataset, train: &[usize], val: &[usize]) -> f64 {
        let (lt, gt) = self.grads(data, train);
        let (_, gv) = self.grads(data, val);
        let names: Vec<String> = self.params.iter().map(|(n, _)| n.clone()).collect();
        let c = self.cfg.clone();
        for name in names {
            if name.ends_with(".alpha") {
                let mut g = gt[&name].clone();
                for (a, b) in g.data_mut().iter_mut().zip(gv[&name].data()) {
                    *a += c.lambda * b;
                }
                self.sgd(&name, &g, c.lr_alpha, c.momentum_alpha);
            } else {
                self.sgd(&name, &gt[&name], c.lr_w, c.momentum_w);
            }
        }
        lt
    }

    /// Largest absolute difference between the oracle's parameters and the
    /// federation's.
    pub fn max_diff(&self, fed: &Federation) -> f64 {
        let mut worst: f64 = 0.0;
        let mut cmp = |name: &str, t: &Tensor| {
            let o = self.params.get(name).unwrap_or_else(|| panic!("oracle lacks {name}"));
            for (a, b) in o.data().iter().zip(t.data()) {
                worst = worst.max((a - b).abs());
            }
        };
        for (i, p) in fed.parties().iter().enumerate() {
            for (name, t) in p.net.weights().iter() {
                cmp(&prefixed(i + 1, name), t);
            }
            cmp(&prefixed(i + 1, "alpha"), p.alpha.tensor());
        }
        for (name, t) in fed.head().params().iter() {
            cmp(name, t);
        }
        worst
    }
}

/// Relative discrepancy `|a - b| / max(1, |a|, |b|)`.
pub fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1f64.max(a.abs()).max(b.abs())
}
