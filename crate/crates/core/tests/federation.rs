mod common;

use common::{rel, Oracle, Setup};
use vfnas::dp::DpConfig;
use vfnas::federation::{MsgType, Phase, Precision, TransportMode, ACT_DIM, HEADER_LEN};
use vfnas::nas_optim::{bilevel_step, mixlevel_step, SearchProblem, UpdateRule};

#[test]
fn split_gradients_match_single_graph() {
    let (mut fed, splits) = Setup::default().build();
    let rows = &splits.train[..16];
    let oracle = Oracle::from_federation(&fed);
    let (_, expected) = oracle.grads(fed.data(), rows);
    let got = fed.gradients(rows).unwrap();
    let mut worst: f64 = 0.0;
    for (i, g) in got.iter().enumerate() {
        for (name, t) in &g.train {
            let key = if name.starts_with("head.") {
                name.clone()
            } else {
                format!("p{}.{name}", i + 1)
            };
            for (a, b) in t.data().iter().zip(expected[&key].data()) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    assert!(worst < 1e-10, "{worst}");
    assert_eq!(fed.rounds(), 1);
}

#[test]
fn split_training_tracks_single_graph() {
    let (mut fed, splits) = Setup::default().build();
    let mut oracle = Oracle::from_federation(&fed);
    for step in 0..10 {
        let t = &splits.train[(step * 8) % 48..(step * 8) % 48 + 8];
        let v = &splits.val[..8];
        let lt = oracle.mixlevel_step(fed.data(), t, v);
        let r = mixlevel_step(&mut fed, t, v, common::optim().lambda).unwrap();
        assert!(rel(lt, r.train_loss) < 1e-12);
    }
    let d = oracle.max_diff(&fed);
    assert!(d < 1e-10, "{d}");
}

#[test]
fn protocol_gradient_matches_finite_differences() {
    let (mut fed, splits) = Setup {
        nodes: 3,
        ..Setup::default()
    }
    .build();
    let rows = splits.train[..12].to_vec();
    let grads = fed.gradients(&rows).unwrap();
    let eps = 1e-6;
    let mut worst: f64 = 0.0;
    let names: Vec<String> = fed.parties()[0].net.weights().iter().map(|(n, _)| n.clone()).collect();
    for name in names.iter().take(4) {
        let analytic = grads[0].train[name].clone();
        for i in (0..analytic.numel()).step_by(7) {
            let mut probe = |delta: f64| {
                let p = &mut fed.parties_mut()[0];
                p.net.weights_mut().get_mut(name).unwrap().data_mut()[i] += delta;
                let l = fed.evaluate(&rows).unwrap().loss;
                fed.parties_mut()[0].net.weights_mut().get_mut(name).unwrap().data_mut()[i] -= delta;
                l
            };
            let numeric = (probe(eps) - probe(-eps)) / (2.0 * eps);
            worst = worst.max(rel(analytic.data()[i], numeric));
        }
    }
    let a = grads[0].train["alpha"].clone();
    for i in 0..a.numel() {
        let mut probe = |delta: f64| {
            fed.parties_mut()[0].alpha.tensor_mut().data_mut()[i] += delta;
            let l = fed.evaluate(&rows).unwrap().loss;
            fed.parties_mut()[0].alpha.tensor_mut().data_mut()[i] -= delta;
            l
        };
        let numeric = (probe(eps) - probe(-eps)) / (2.0 * eps);
        worst = worst.max(rel(a.data()[i], numeric));
    }
    assert!(worst < 1e-6, "{worst}");
}

#[test]
fn bilevel_costs_two_rounds_mixlevel_one() {
    let (mut a, splits) = Setup::default().build();
    let (mut b, _) = Setup::default().build();
    let (t, v) = (&splits.train[..8], &splits.val[..8]);
    for _ in 0..7 {
        assert_eq!(bilevel_step(&mut a, t, v).unwrap().rounds, 2);
        assert_eq!(mixlevel_step(&mut b, t, v, 1.0).unwrap().rounds, 1);
    }
    assert_eq!(a.rounds(), 14);
    assert_eq!(b.rounds(), 7);
    a.evaluate(&splits.test).unwrap();
    assert_eq!(a.rounds(), 14);
    assert_eq!(a.counter().eval_rounds, 1);
}

#[test]
fn single_party_sends_nothing() {
    let (mut fed, splits) = Setup {
        parties: 1,
        ..Setup::default()
    }
    .build();
    let before = fed.parties()[0].net.weights().clone();
    mixlevel_step(&mut fed, &splits.train[..8], &splits.val[..8], 1.0).unwrap();
    fed.evaluate(&splits.test).unwrap();
    assert_eq!(fed.rounds(), 0);
    assert_eq!(fed.counter().eval_rounds, 0);
    assert!(fed.transcript().entries().is_empty());
    assert_eq!(fed.counter().total_bytes(), 0);
    assert_ne!(fed.parties()[0].net.weights(), &before);
}

#[test]
fn zero_learning_rate_counts_round_but_keeps_parameters() {
    let (mut fed, splits) = Setup::default().build();
    for p in fed.parties_mut() {
        p.opt.w = vfnas::nas_optim::Sgd::new(0.0, 0.0).unwrap();
        p.opt.alpha = vfnas::nas_optim::Sgd::new(0.0, 0.0).unwrap();
    }
    let nets: Vec<_> = fed.parties().iter().map(|p| p.net.weights().clone()).collect();
    let alphas: Vec<_> = fed.parties().iter().map(|p| p.alpha.clone()).collect();
    let rule = UpdateRule::Joint { lambda: 1.0 };
    fed.exchange(Some(&splits.train[..8]), Some(&splits.val[..8]), rule).unwrap();
    assert_eq!(fed.rounds(), 1);
    for (i, p) in fed.parties().iter().enumerate() {
        assert_eq!(p.net.weights(), &nets[i]);
        assert_eq!(&p.alpha, &alphas[i]);
    }
}

#[test]
fn neutral_mechanism_changes_nothing() {
    let (mut off, splits) = Setup::default().build();
    let neutral = DpConfig {
        enabled: true,
        c1: 1e12,
        c2: 1e12,
        in_evaluation: true,
        ..DpConfig::default()
    };
    let (mut on, _) = Setup {
        dp: neutral,
        ..Setup::default()
    }
    .build();
    let a = off.evaluate(&splits.test).unwrap();
    let b = on.evaluate(&splits.test).unwrap();
    assert_eq!(a.loss.to_bits(), b.loss.to_bits());
    mixlevel_step(&mut off, &splits.train[..8], &splits.val[..8], 1.0).unwrap();
    mixlevel_step(&mut on, &splits.train[..8], &splits.val[..8], 1.0).unwrap();
    assert!(off.parties()[0].net.weights().bitwise_eq(on.parties()[0].net.weights()));
    let report = on.privacy_report().unwrap();
    assert!(report.iter().all(|r| r.epsilon_prime.is_none()));
}

#[test]
fn noise_is_recorded_and_perturbs_training() {
    let (mut fed, splits) = Setup {
        dp: DpConfig::with_sigma(1.0),
        ..Setup::default()
    }
    .build();
    let (mut clean, _) = Setup::default().build();
    for _ in 0..3 {
        bilevel_step(&mut fed, &splits.train[..8], &splits.val[..8]).unwrap();
        bilevel_step(&mut clean, &splits.train[..8], &splits.val[..8]).unwrap();
    }
    assert_ne!(fed.parties()[0].net.weights(), clean.parties()[0].net.weights());
    let report = fed.privacy_report().unwrap();
    assert_eq!(report.len(), 2);
    for r in &report {
        assert_eq!(r.t, 6);
        assert!(r.epsilon_prime.unwrap() > 0.0);
    }
}

#[test]
fn byte_accounting() {
    let (mut fed, splits) = Setup {
        parties: 3,
        precision: Precision::F32,
        ..Setup::default()
    }
    .build();
    let b = 10;
    fed.evaluate(&splits.test[..b]).unwrap();
    let per_msg = (HEADER_LEN + 1 + 8 + b * ACT_DIM * 4) as u64;
    assert_eq!(fed.counter().bytes_sent[&1], per_msg);
    assert_eq!(fed.counter().bytes_sent[&2], per_msg);
    assert_eq!(fed.counter().total_bytes(), 2 * per_msg);
    fed.exchange(Some(&splits.train[..b]), None, UpdateRule::Weights).unwrap();
    assert_eq!(fed.counter().bytes_sent[&3], 2 * per_msg);
}

fn transcript_of(parties: usize, transport: TransportMode) -> (String, String) {
    let (mut fed, splits) = Setup {
        parties,
        precision: Precision::F32,
        transport,
        nodes: 3,
        dp: DpConfig::with_sigma(0.5),
        ..Setup::default()
    }
    .build();
    for i in 0..2 {
        let t = &splits.train[i * 8..i * 8 + 8];
        bilevel_step(&mut fed, t, &splits.val[..8]).unwrap();
        mixlevel_step(&mut fed, t, &splits.val[8..16], 1.0).unwrap();
    }
    fed.evaluate(&splits.test).unwrap();
    (fed.transcript().to_jsonl(), fed.transcript().sha256())
}

#[test]
fn transcripts_are_reproducible_and_transport_independent() {
    let (a, ha) = transcript_of(3, TransportMode::InProcess);
    let (b, hb) = transcript_of(3, TransportMode::InProcess);
    assert_eq!(ha, hb);
    assert_eq!(a, b);
    let (c, _) = transcript_of(3, TransportMode::Socket);
    assert_eq!(a, c);
}

#[test]
fn transcript_carries_only_embeddings_and_gradients() {
    let (mut fed, splits) = Setup::default().build();
    bilevel_step(&mut fed, &splits.train[..8], &splits.val[..8]).unwrap();
    mixlevel_step(&mut fed, &splits.train[..8], &splits.val[..8], 1.0).unwrap();
    fed.evaluate(&splits.val).unwrap();
    let entries = fed.transcript().entries();
    assert!(!entries.is_empty());
    for e in entries {
        match e.msg_type {
            MsgType::FwdAct => assert_eq!(e.sender, 1),
            MsgType::BwdGrad => {
                assert_eq!(e.sender, 2);
                assert_ne!(e.phase, Phase::Eval);
            }
            MsgType::Ctrl => panic!("control frame in transcript"),
        }
        let payload = (e.bytes - HEADER_LEN - 1 - 8) / 8;
        assert_eq!(payload % ACT_DIM, 0);
    }
    let phases: Vec<Phase> = entries.iter().map(|e| e.phase).collect();
    assert_eq!(
        &phases[..6],
        &[
            Phase::AlphaUpdate,
            Phase::AlphaUpdate,
            Phase::WUpdate,
            Phase::WUpdate,
            Phase::Joint,
            Phase::Joint
        ]
    );
}

#[test]
fn bad_configurations_are_rejected() {
    let (ds, _) = common::small_data(2, 1);
    let spec = vfnas::search_space::SupernetSpec {
        nodes: 2,
        hidden: 4,
        in_dim: 4,
        out_dim: ACT_DIM,
        opset: Default::default(),
    };
    let mut cfg = vfnas::federation::FederationConfig::default();
    cfg.dp.c1 = 0.0;
    let err = vfnas::federation::Federation::fresh(ds.clone(), &spec, &[8], &common::optim(), cfg, 1)
        .err()
        .unwrap();
    assert!(err.is_config());
    let cfg = vfnas::federation::FederationConfig {
        gamma: -1.0,
        ..Default::default()
    };
    let err = vfnas::federation::Federation::fresh(ds, &spec, &[8], &common::optim(), cfg, 1)
        .err()
        .unwrap();
    assert!(err.is_config());
}
