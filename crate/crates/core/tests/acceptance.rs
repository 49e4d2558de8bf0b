//! End-to-end acceptance checks. Every criterion prints one
//! `criterion N ... PASS|FAIL` line to stdout (uncaptured) before asserting.

mod common;

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{rel, Oracle, Setup};
use vfnas::autodiff::{grad_check, Graph, ParamSet, Tensor};
use vfnas::data::{generate_blobs, BlobSpec};
use vfnas::dp::{clip_and_noise, compose, sigma_for, DpConfig};
use vfnas::federation::{
    decode_message, encode_message, Header, Message, MsgType, Phase, Precision, TransportMode, ACT_DIM, HEADER_LEN,
};
use vfnas::nas_optim::{bilevel_step, mixlevel_step, Sgd};
use vfnas::runner::{
    emit_report, run_experiment, run_search, sweep, Algorithm, ExperimentConfig, RunReport, SweepAxis,
};
use vfnas::search_space::{build_supernet, Mixing, SearchSpaceError, SupernetSpec, ALPHA};
use vfnas::ssl_pretrain::{info_nce_graph, momentum_update, pretrain_party, MocoConfig, MocoState};

fn verdict(n: u32, name: &str, pass: bool, detail: &str) {
    let line = format!(
        "criterion {n} {name}: {} ({detail})\n",
        if pass { "PASS" } else { "FAIL" }
    );
    let mut out = std::io::stdout().lock();
    out.write_all(line.as_bytes()).unwrap();
    out.flush().unwrap();
    assert!(pass, "criterion {n} {name} failed: {detail}");
}

const SEEDS: [u64; 3] = [1, 2, 3];

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

// (ε, T, δ′, ε′) evaluated with 50-digit arithmetic.
const COMPOSE_GRID: [(f64, u64, f64, f64); 60] = [
    (0.01, 1, 1e-3, 0.037269723559340065045),
    (0.01, 1, 1e-5, 0.048085760792722492651),
    (0.01, 1, 1e-9, 0.064479482459522097765),
    (0.01, 10, 1e-3, 0.11854441673225678666),
    (0.01, 10, 1e-5, 0.15274772964693144084),
    (0.01, 10, 1e-9, 0.20458922944087015969),
    (0.01, 100, 1e-3, 0.38174238596915190224),
    (0.01, 100, 1e-5, 0.4899027583029761783),
    (0.01, 100, 1e-9, 0.65383997497097222943),
    (0.01, 1000, 1e-3, 1.2758956710800803845),
    (0.01, 1000, 1e-5, 1.6179288002268269263),
    (0.01, 1000, 1e-9, 2.1363437981662141148),
    (0.1, 1, 1e-3, 0.38220931069254860718),
    (0.1, 1, 1e-5, 0.49036968302637288324),
    (0.1, 1, 1e-9, 0.65430689969436893437),
    (0.1, 10, 1e-3, 1.2805649183140474339),
    (0.1, 10, 1e-5, 1.6225980474607939757),
    (0.1, 10, 1e-9, 2.1410130454001811642),
    (0.1, 100, 1e-3, 4.7686313696063146951),
    (0.1, 100, 1e-5, 5.8502350929445574557),
    (0.1, 100, 1e-9, 7.489607259624517967),
    (0.1, 1000, 1e-3, 22.271031809948760572),
    (0.1, 1000, 1e-5, 25.69136310141622599),
    (0.1, 1000, 1e-9, 30.875513080810097875),
    (0.5, 1, 1e-3, 2.1828217297749832969),
    (0.5, 1, 1e-5, 2.7236235914441046772),
    (0.5, 1, 1e-9, 3.5433096747840849329),
    (0.5, 10, 1e-3, 9.1205763546926397796),
    (0.5, 10, 1e-5, 10.830742000426372489),
    (0.5, 10, 1e-9, 13.422816990123308431),
    (0.5, 100, 1e-3, 51.020674479255599577),
    (0.5, 100, 1e-5, 56.42869309594681338),
    (0.5, 100, 1e-9, 64.625553929346615937),
    (0.5, 1000, 1e-3, 383.13033536198406388),
    (0.5, 1000, 1e-5, 400.23199181932139097),
    (0.5, 1000, 1e-9, 426.15274171629075039),
    (1.0, 1, 1e-3, 5.4352040173088836823),
    (1.0, 1, 1e-5, 6.5168077406471264429),
    (1.0, 1, 1e-9, 8.1561799073270869543),
    (1.0, 10, 1e-3, 28.936758286974450444),
    (1.0, 10, 1e-5, 32.357089578441915862),
    (1.0, 10, 1e-9, 37.541239557835787747),
    (1.0, 100, 1e-3, 208.99740473440290801),
    (1.0, 100, 1e-5, 219.81344196778533561),
    (1.0, 100, 1e-9, 236.20716363458494073),
    (1.0, 1000, 1e-3, 1835.8212284828852163),
    (1.0, 1000, 1e-5, 1870.0245413975598704),
    (1.0, 1000, 1e-9, 1921.8660411914985893),
    (2.0, 1, 1e-3, 20.211956575560977348),
    (2.0, 1, 1e-5, 22.37516402223746287),
    (2.0, 1, 1e-9, 25.653908355597383892),
    (2.0, 10, 1e-3, 151.28900198338100073),
    (2.0, 10, 1e-5, 158.12966456631593156),
    (2.0, 10, 1e-9, 168.49796452510367533),
    (2.0, 100, 1e-3, 1352.1496635631268144),
    (2.0, 100, 1e-5, 1373.7817380298916696),
    (2.0, 100, 1e-9, 1406.5691813634908798),
    (2.0, 1000, 1e-3, 13013.190997908980416),
    (2.0, 1000, 1e-5, 13081.597623738329725),
    (2.0, 1000, 1e-9, 13185.280623326207162),
];

#[test]
fn criterion_1_dp_closed_forms() {
    let sigma = sigma_for(1.0, 1e-5).unwrap();
    let (eps, delta) = compose(0.1, 1e-7, 100, 1e-5).unwrap();
    let mut worst: f64 = 0.0;
    for &(e, t, dp, expected) in COMPOSE_GRID.iter() {
        let (got, _) = compose(e, 1e-7, t, dp).unwrap();
        worst = worst.max((got - expected).abs() / expected);
    }
    let pass = (sigma - 4.84481).abs() <= 1e-4
        && rel(sigma, 4.8448052626053894213) < 1e-14
        && (eps - 5.8502).abs() <= 1e-3
        && rel(eps, 5.8502350929445574557) < 1e-13
        && delta == 2e-5
        && worst < 1e-12;
    verdict(
        1,
        "dp closed forms",
        pass,
        &format!("sigma={sigma:.10} eps'={eps:.10} delta={delta:e} grid max rel err={worst:.2e}"),
    );
}

fn graph_err(e: SearchSpaceError) -> vfnas::GraphError {
    match e {
        SearchSpaceError::Graph(g) => g,
        other => panic!("{other}"),
    }
}

#[test]
fn criterion_2_gradient_integrity() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let spec = SupernetSpec {
        nodes: 4,
        hidden: 5,
        in_dim: 3,
        out_dim: 6,
        opset: Default::default(),
    };
    let (net, _) = build_supernet(&spec, &mut rng).unwrap();
    let mut point = net.weights().clone();
    let [edges, ops] = net.alpha_shape();
    let a = (0..edges * ops).map(|_| rng.random_range(-0.5..0.5)).collect();
    point.insert(ALPHA, Tensor::matrix(edges, ops, a));
    let x = Tensor::matrix(4, 3, (0..12).map(|_| rng.random_range(-1.0..1.0)).collect());

    let run = |g: &mut Graph, v: &std::collections::BTreeMap<String, vfnas::autodiff::Var>| {
        let mut w = ParamSet::new();
        for (k, _) in net.weights().iter() {
            w.insert(k.clone(), g.value(v[k]).clone());
        }
        let mut n = net.clone();
        n.set_weights(w);
        let xv = g.constant(x.clone());
        n.forward(g, xv, Mixing::Soft(v[ALPHA])).map_err(graph_err)
    };
    let supernet_err = grad_check(
        |g, v| {
            let y = run(g, v)?;
            let t = g.tanh(y)?;
            g.sum(t)
        },
        &point,
        1e-5,
    )
    .unwrap();

    let keys = Tensor::matrix(4, 6, (0..24).map(|_| rng.random_range(-1.0..1.0)).collect());
    let queue = Tensor::matrix(6, 5, (0..30).map(|_| rng.random_range(-0.4..0.4)).collect());
    let info_err = grad_check(
        |g, v| {
            let y = run(g, v)?;
            let q = g.normalize_rows(y)?;
            let kc = g.constant(keys.clone());
            let k = g.normalize_rows(kc)?;
            let qt = g.constant(queue.clone());
            info_nce_graph(g, q, k, Some(qt), 0.2)
        },
        &point,
        1e-5,
    )
    .unwrap();

    let (mut fed, splits) = Setup {
        nodes: 3,
        ..Setup::default()
    }
    .build();
    let rows = splits.train[..12].to_vec();
    let grads = fed.gradients(&rows).unwrap();
    let eps = 1e-6;
    let mut split_err: f64 = 0.0;
    for party in 0..2 {
        let names: Vec<String> = fed.parties()[party].net.weights().iter().map(|(n, _)| n.clone()).collect();
        for name in &names {
            let analytic = grads[party].train[name].clone();
            for i in (0..analytic.numel()).step_by(11) {
                let mut probe = |d: f64| {
                    let w = fed.parties_mut()[party].net.weights_mut().get_mut(name).unwrap();
                    w.data_mut()[i] += d;
                    let l = fed.evaluate(&rows).unwrap().loss;
                    let w = fed.parties_mut()[party].net.weights_mut().get_mut(name).unwrap();
                    w.data_mut()[i] -= d;
                    l
                };
                let numeric = (probe(eps) - probe(-eps)) / (2.0 * eps);
                split_err = split_err.max(rel(analytic.data()[i], numeric));
            }
        }
        let analytic = grads[party].train[ALPHA].clone();
        for i in 0..analytic.numel() {
            let mut probe = |d: f64| {
                fed.parties_mut()[party].alpha.tensor_mut().data_mut()[i] += d;
                let l = fed.evaluate(&rows).unwrap().loss;
                fed.parties_mut()[party].alpha.tensor_mut().data_mut()[i] -= d;
                l
            };
            let numeric = (probe(eps) - probe(-eps)) / (2.0 * eps);
            split_err = split_err.max(rel(analytic.data()[i], numeric));
        }
    }
    let head: Vec<String> = fed.head().params().iter().map(|(n, _)| n.clone()).collect();
    for name in &head {
        let analytic = grads[1].train[name].clone();
        for i in (0..analytic.numel()).step_by(5) {
            let mut probe = |d: f64| {
                fed.head_mut().params_mut().get_mut(name).unwrap().data_mut()[i] += d;
                let l = fed.evaluate(&rows).unwrap().loss;
                fed.head_mut().params_mut().get_mut(name).unwrap().data_mut()[i] -= d;
                l
            };
            let numeric = (probe(eps) - probe(-eps)) / (2.0 * eps);
            split_err = split_err.max(rel(analytic.data()[i], numeric));
        }
    }
    let pass = supernet_err < 1e-4 && info_err < 1e-4 && split_err < 1e-4;
    verdict(
        2,
        "gradient integrity",
        pass,
        &format!("supernet {supernet_err:.2e}, infonce {info_err:.2e}, split protocol {split_err:.2e}"),
    );
}

#[test]
fn criterion_3_split_equals_monolithic() {
    let (mut fed, splits) = Setup::default().build();
    let mut oracle = Oracle::from_federation(&fed);
    let mut worst: f64 = 0.0;
    let mut loss_err: f64 = 0.0;
    for step in 0..50 {
        let start = (step * 8) % 48;
        let t = &splits.train[start..start + 8];
        let v = &splits.val[(step * 4) % 24..(step * 4) % 24 + 6];
        let expected = oracle.mixlevel_step(fed.data(), t, v);
        let got = mixlevel_step(&mut fed, t, v, common::optim().lambda).unwrap();
        loss_err = loss_err.max((expected - got.train_loss).abs());
        worst = worst.max(oracle.max_diff(&fed));
    }
    let pass = worst < 1e-8 && loss_err < 1e-8;
    verdict(
        3,
        "split equals monolithic",
        pass,
        &format!("50 steps, max parameter diff {worst:.2e}, max loss diff {loss_err:.2e}"),
    );
}

/// A small pipeline configuration for checks that do not depend on model
/// quality.
fn tiny(algorithm: Algorithm, seed: u64) -> ExperimentConfig {
    let mut c = ExperimentConfig::new(algorithm, seed);
    c.data = BlobSpec {
        samples: 240,
        dim: 4,
        classes: 3,
        ..BlobSpec::default()
    };
    c.epochs.pretrain = 1;
    c.epochs.search = 3;
    c.epochs.evaluate = Some(1);
    c.batch = 16;
    c.supernet.nodes = 3;
    c.supernet.hidden = 8;
    c.head_hidden = vec![16];
    c.moco.queue = 64;
    c.moco.batch = 16;
    c.eval_every = 2;
    c
}

#[test]
fn criterion_4_round_accounting() {
    let bi = run_search(&tiny(Algorithm::Vfnas1, 7)).unwrap().report;
    let mix = run_search(&tiny(Algorithm::Vfnas2, 7)).unwrap().report;
    let ss_bi = run_search(&tiny(Algorithm::SsVfnas1, 7)).unwrap().report;
    let ss_mix = run_search(&tiny(Algorithm::SsVfnas2, 7)).unwrap().report;
    let ratio = bi.search_rounds as f64 / mix.search_rounds as f64;
    let pass = bi.search_iterations == mix.search_iterations
        && mix.search_iterations > 0
        && bi.search_rounds == 2 * mix.search_rounds
        && ss_bi.search_rounds == 2 * ss_mix.search_rounds
        && !ss_mix.pretrain.is_empty()
        && ss_mix.pretrain_rounds == 0
        && ss_bi.pretrain_rounds == 0
        && ss_mix.search_rounds == ss_mix.search_iterations
        && ss_mix.search_rounds == mix.search_rounds;
    verdict(
        4,
        "round accounting",
        pass,
        &format!(
            "{} iterations: bilevel {} rounds, mixlevel {} (ratio {ratio}); pretraining rounds {}",
            mix.search_iterations, bi.search_rounds, mix.search_rounds, ss_mix.pretrain_rounds
        ),
    );
}

/// Default synthetic task (2000 samples, two parties of 16 features, eight
/// classes) with the default search budget.
fn standard(algorithm: Algorithm, seed: u64) -> ExperimentConfig {
    ExperimentConfig::new(algorithm, seed)
}

fn rounds_to_convergence(r: &RunReport) -> u64 {
    r.convergence.map_or(u64::MAX, |c| c.rounds)
}

fn iterations_to_convergence(r: &RunReport) -> f64 {
    r.convergence.map_or(r.search_iterations as f64 + 1.0, |c| c.iteration as f64)
}

#[test]
fn criterion_5_communication_efficiency() {
    let search = |a: Algorithm, s: u64| {
        let mut c = standard(a, s);
        c.stop_at_convergence = true;
        run_search(&c).unwrap().report
    };
    let mut ss2_wins = 0;
    let mut ss1_wins = 0;
    let mut e2e_iters = Vec::new();
    let mut v2_iters = Vec::new();
    let mut detail = Vec::new();
    for s in SEEDS {
        let v2 = search(Algorithm::Vfnas2, s);
        let ss2 = search(Algorithm::SsVfnas2, s);
        let v1 = search(Algorithm::Vfnas1, s);
        let ss1 = search(Algorithm::SsVfnas1, s);
        let e2e = search(Algorithm::VfnasE2e, s);
        ss2_wins += (rounds_to_convergence(&ss2) <= rounds_to_convergence(&v2)) as u32;
        ss1_wins += (rounds_to_convergence(&ss1) <= rounds_to_convergence(&v1)) as u32;
        e2e_iters.push(iterations_to_convergence(&e2e));
        v2_iters.push(iterations_to_convergence(&v2));
        detail.push(format!(
            "seed {s}: rounds v2 {} ss2 {} v1 {} ss1 {}, iterations e2e {} v2 {}",
            rounds_to_convergence(&v2),
            rounds_to_convergence(&ss2),
            rounds_to_convergence(&v1),
            rounds_to_convergence(&ss1),
            iterations_to_convergence(&e2e),
            iterations_to_convergence(&v2)
        ));
    }
    let pass = ss2_wins >= 2 && ss1_wins >= 2 && mean(&e2e_iters) >= mean(&v2_iters);
    verdict(5, "communication efficiency", pass, &detail.join("; "));
}

fn accuracy(reports: &[RunReport]) -> f64 {
    mean(&reports.iter().map(|r| r.test_accuracy.unwrap()).collect::<Vec<_>>())
}

#[test]
fn criterion_6_collaboration_benefit() {
    let template = standard(Algorithm::Vfnas2, SEEDS[0]);
    let ks = [1.0, 2.0, 4.0];
    let summary = sweep(&template, SweepAxis::Parties, &ks, &SEEDS, vfnas::exec::Exec::default()).unwrap();
    let acc: Vec<f64> = summary.points.iter().map(|p| p.accuracy_mean).collect();
    let monotone = acc.windows(2).all(|w| w[1] >= w[0] - 0.01);
    let gain = acc[2] - acc[0];
    let pass = monotone && gain >= 0.05;
    verdict(
        6,
        "collaboration benefit",
        pass,
        &format!("mean test accuracy K=1 {:.4}, K=2 {:.4}, K=4 {:.4}", acc[0], acc[1], acc[2]),
    );
}

#[test]
fn criterion_7_privacy_utility() {
    let template = standard(Algorithm::SsVfnas2, SEEDS[0]);
    let sigmas = SweepAxis::DpSigma.default_values();
    let summary = sweep(&template, SweepAxis::DpSigma, &sigmas, &SEEDS, vfnas::exec::Exec::default()).unwrap();
    let acc: Vec<f64> = summary.points.iter().map(|p| p.accuracy_mean).collect();
    let local: Vec<RunReport> = SEEDS
        .iter()
        .map(|&s| run_experiment(&standard(Algorithm::SsnasLocal, s)).unwrap().report)
        .collect();
    let baseline = accuracy(&local);
    let monotone = acc.windows(2).all(|w| w[1] <= w[0] + 0.02);
    let close = (acc[3] - baseline).abs() <= 0.03;
    verdict(
        7,
        "privacy utility trend",
        monotone && close,
        &format!(
            "mean test accuracy sigma 0 {:.4}, 1 {:.4}, 3 {:.4}, 10 {:.4}; local baseline {baseline:.4}",
            acc[0], acc[1], acc[2], acc[3]
        ),
    );
}

#[test]
fn criterion_8_limited_overlap() {
    let overlaps = [0.1, 1.0];
    let run = |a: Algorithm| {
        sweep(&standard(a, SEEDS[0]), SweepAxis::Overlap, &overlaps, &SEEDS, vfnas::exec::Exec::default()).unwrap()
    };
    let ss = run(Algorithm::SsVfnas2);
    let plain = run(Algorithm::Vfnas2);
    let margin = |i: usize| ss.points[i].accuracy_mean - plain.points[i].accuracy_mean;
    let (low, full) = (margin(0), margin(1));
    verdict(
        8,
        "limited overlap benefit",
        low > full,
        &format!(
            "overlap 0.1: ss {:.4} vs plain {:.4} (margin {low:.4}); overlap 1.0: ss {:.4} vs plain {:.4} (margin {full:.4})",
            ss.points[0].accuracy_mean, plain.points[0].accuracy_mean, ss.points[1].accuracy_mean, plain.points[1].accuracy_mean
        ),
    );
}

fn random_message(rng: &mut ChaCha8Rng) -> Message {
    let precision = if rng.random_bool(0.5) { Precision::F32 } else { Precision::F64 };
    let msg_type = [MsgType::FwdAct, MsgType::BwdGrad, MsgType::Ctrl][rng.random_range(0..3)];
    let phase = [Phase::WUpdate, Phase::AlphaUpdate, Phase::Eval, Phase::Joint][rng.random_range(0..4)];
    let shape = match msg_type {
        MsgType::FwdAct => vec![rng.random_range(0..6), ACT_DIM],
        _ => (0..rng.random_range(0..4)).map(|_| rng.random_range(0..5)).collect(),
    };
    let n: usize = shape.iter().product();
    let scale = 10f64.powi(rng.random_range(-30..30));
    let data = (0..n).map(|_| rng.random_range(-1.0..1.0) * scale).collect();
    let header = Header {
        precision,
        msg_type,
        phase,
        sender: rng.random(),
        round: rng.random(),
    };
    Message::new(header, &Tensor::new(shape, data).unwrap())
}

fn tiny_reports_bytes(seed: u64) -> Vec<Vec<u8>> {
    let report = run_experiment(&tiny(Algorithm::SsVfnas1, seed)).unwrap().report;
    let dir = tempfile::tempdir().unwrap();
    emit_report(&[report], dir.path()).unwrap();
    ["run.json", "metrics.csv", "arch_party1.json", "arch_party2.json", "privacy.json"]
        .iter()
        .map(|f| std::fs::read(dir.path().join(f)).unwrap())
        .collect()
}

fn transcript(transport: TransportMode) -> String {
    let (mut fed, splits) = Setup {
        parties: 3,
        nodes: 3,
        transport,
        precision: Precision::F32,
        dp: DpConfig::with_sigma(1.0),
        ..Setup::default()
    }
    .build();
    for i in 0..3 {
        let t = &splits.train[i * 8..i * 8 + 8];
        bilevel_step(&mut fed, t, &splits.val[..8]).unwrap();
        mixlevel_step(&mut fed, t, &splits.val[8..16], 1.0).unwrap();
    }
    fed.evaluate(&splits.test).unwrap();
    fed.transcript().to_jsonl()
}

#[test]
fn criterion_9_protocol_and_mechanism() {
    let mut checks: Vec<(&str, bool)> = Vec::new();

    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let corpus: Vec<Message> = (0..1500).map(|_| random_message(&mut rng)).collect();
    let codec = corpus.iter().all(|m| {
        let bytes = encode_message(m).unwrap();
        bytes.len() == m.encoded_len() && decode_message(&bytes).unwrap() == *m
    });
    checks.push(("codec roundtrip of 1500 messages", codec));

    let (mut fed, splits) = Setup {
        parties: 3,
        ..Setup::default()
    }
    .build();
    bilevel_step(&mut fed, &splits.train[..8], &splits.val[..8]).unwrap();
    mixlevel_step(&mut fed, &splits.train[8..16], &splits.val[..8], 1.0).unwrap();
    fed.evaluate(&splits.test).unwrap();
    let label_party = 3;
    let raw_width = fed.data().shard(0).cols();
    let audit = !fed.transcript().entries().is_empty()
        && fed.transcript().entries().iter().all(|e| {
            let payload = e.bytes - HEADER_LEN - 1 - 2 * 4;
            let ok_type = match e.msg_type {
                MsgType::FwdAct => e.sender != label_party,
                MsgType::BwdGrad => e.sender == label_party && e.phase != Phase::Eval,
                MsgType::Ctrl => false,
            };
            ok_type && payload % (ACT_DIM * 8) == 0 && raw_width != ACT_DIM
        });
    checks.push(("transcript carries only embeddings and their gradients", audit));

    let mut norm_ok = true;
    for _ in 0..500 {
        let n = rng.random_range(1..20);
        let scale = 10f64.powi(rng.random_range(-3..4));
        let v = Tensor::vector((0..n).map(|_| rng.random_range(-1.0..1.0) * scale).collect());
        let c = rng.random_range(0.1..5.0);
        let out = clip_and_noise(&v, c, 0.0, &mut rng).unwrap();
        norm_ok &= out.l2_norm() <= c * (1.0 + 1e-12);
    }
    checks.push(("clipped norm never exceeds the bound", norm_ok));

    let zero = Tensor::zeros(vec![200_000]);
    let noisy = clip_and_noise(&zero, 2.0, 1.5, &mut rng).unwrap();
    let m = mean(noisy.data());
    let std = (noisy.data().iter().map(|x| (x - m).powi(2)).sum::<f64>() / (noisy.numel() - 1) as f64).sqrt();
    // Standard error of the sample std is about 3/sqrt(2n) here.
    checks.push(("noise std matches sigma * C", (std - 3.0).abs() < 0.03 && m.abs() < 0.03));

    let mut q = ParamSet::new();
    q.insert("a", Tensor::vector((0..8).map(|_| rng.random_range(-1.0..1.0)).collect()));
    let mut k = ParamSet::new();
    k.insert("a", Tensor::vector((0..8).map(|_| rng.random_range(-1.0..1.0)).collect()));
    let mut frozen = k.clone();
    momentum_update(&mut frozen, &q, 1.0).unwrap();
    let mut same = q.clone();
    momentum_update(&mut same, &q, 0.7).unwrap();
    let mut copy = k.clone();
    momentum_update(&mut copy, &q, 0.0).unwrap();
    checks.push((
        "momentum update fixed points",
        frozen.bitwise_eq(&k) && same.bitwise_eq(&q) && copy.bitwise_eq(&q),
    ));

    let ds = generate_blobs(
        &BlobSpec {
            parties: 1,
            samples: 200,
            dim: 6,
            ..BlobSpec::default()
        },
        4,
    )
    .unwrap();
    let spec = SupernetSpec {
        nodes: 3,
        hidden: 8,
        in_dim: 6,
        out_dim: ACT_DIM,
        opset: Default::default(),
    };
    let (mut net, mut alpha) = build_supernet(&spec, &mut rng).unwrap();
    let cfg = MocoConfig {
        queue: 48,
        batch: 20,
        ..MocoConfig::default()
    };
    let mut state = MocoState::new(cfg, &net, &alpha, &mut rng).unwrap();
    let mut opt = Sgd::new(0.01, 0.9).unwrap();
    let rows: Vec<usize> = (0..200).collect();
    let mut queue_ok = true;
    for _ in 0..3 {
        pretrain_party(&mut net, &mut alpha, &mut state, &mut opt, ds.shard(0), &rows, 1, &mut rng).unwrap();
        queue_ok &= state.queue().len() == 48
            && state
                .queue()
                .iter()
                .all(|k| (k.iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs() < 1e-9);
    }
    checks.push(("queue holds exactly its capacity of unit keys", queue_ok));

    checks.push(("equal seeds give byte-identical reports", tiny_reports_bytes(5) == tiny_reports_bytes(5)));

    let in_process = transcript(TransportMode::InProcess);
    let socket = transcript(TransportMode::Socket);
    checks.push(("socket and in-process transcripts agree", !in_process.is_empty() && in_process == socket));

    let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    let detail = if failed.is_empty() {
        format!("{} checks", checks.len())
    } else {
        format!("failed: {}", failed.join(", "))
    };
    verdict(9, "protocol and mechanism properties", failed.is_empty(), &detail);
}
