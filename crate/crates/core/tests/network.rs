//! Whole-network checks: parameter count and end-to-end gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use symreg::augment::Pair;
use symreg::losses::{total_loss, LossWeights, PairTargets, Similarity};
use symreg::network::{init_parameters, NetConfig, Network, Parameters};
use symreg::synth::{gen_pair, SynthSpec};
use symreg::tensor::{Tape, Tensor};

#[test]
fn desk_parameter_count_matches_hand_count() {
    // enc.0: 2 + (27*1*8 + 8) + (8*8*8 + 8)
    // enc.1: 16 + (27*8*16 + 16) + (8*16*16 + 16)
    // enc.2: 32 + (27*16*16 + 16) + (8*16*16 + 16)
    // dec.1: (27*16*16 + 16) + 32;  dec.0: (27*16*8 + 8) + 16
    // heads: 2 * (27*8*3 + 3) + (27*16*3 + 3)
    let expected = 746 + 5552 + 9024 + 6960 + 3480 + 2601;
    let p = init_parameters(&NetConfig::desk(&[8, 16, 16]), 0).unwrap();
    assert_eq!(p.count(), expected);
}

fn loss_value(
    net: &NetConfig,
    params: &Parameters<f64>,
    targets: &PairTargets<f64>,
    pair: &Pair,
    w: &LossWeights,
) -> f64 {
    let tape = Tape::new();
    let bound = params.bind(&tape, false);
    let out = Network::new(net)
        .unwrap()
        .symmetric_forward(
            &bound,
            tape.constant(pair.moving.data.cast()),
            tape.constant(pair.fixed.data.cast()),
        )
        .unwrap();
    total_loss(
        &tape,
        targets,
        &out.forward,
        &out.backward,
        w,
        Similarity::Ncc,
    )
    .unwrap()
    .0
    .item()
}

#[test]
fn end_to_end_gradients_match_finite_differences() {
    let net = NetConfig::desk(&[4, 8]);
    let mut params = init_parameters(&net, 2).unwrap().cast::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let heads: Vec<String> = params
        .names()
        .filter(|n| n.starts_with("head."))
        .cloned()
        .collect();
    for name in heads {
        for v in params.get_mut(&name).unwrap().data_mut() {
            *v = rng.random_range(-0.05..0.05);
        }
    }
    let case = gen_pair(&SynthSpec {
        shape: [8, 8, 8],
        seed: 3,
        ..SynthSpec::default()
    })
    .unwrap();
    let pair = Pair::new(
        case.moving,
        case.fixed,
        Some(case.moving_seg),
        Some(case.fixed_seg),
    )
    .unwrap();
    let targets = PairTargets::<f64>::from_pair(&pair, net.ds_levels).unwrap();
    let w = LossWeights {
        gamma: 0.1,
        ds_weights: vec![1.0, 0.5, 0.25],
        ..LossWeights::default()
    };

    let tape = Tape::new();
    let bound = params.bind(&tape, true);
    let out = Network::new(&net)
        .unwrap()
        .symmetric_forward(
            &bound,
            tape.constant(pair.moving.data.cast()),
            tape.constant(pair.fixed.data.cast()),
        )
        .unwrap();
    let (loss, _) = total_loss(
        &tape,
        &targets,
        &out.forward,
        &out.backward,
        &w,
        Similarity::Ncc,
    )
    .unwrap();
    let grads = tape.backward(loss).unwrap();
    let analytic: Vec<(String, Tensor<f64>)> = bound
        .iter()
        .map(|(n, v)| (n.clone(), grads.get(*v).unwrap().clone()))
        .collect();

    let h = 1e-6;
    let mut worst = 0.0f64;
    for (name, g) in &analytic {
        for k in 0..3 {
            let i = (k * 7919 + name.len()) % g.numel();
            let mut up = params.clone();
            up.get_mut(name).unwrap().data_mut()[i] += h;
            let mut dn = params.clone();
            dn.get_mut(name).unwrap().data_mut()[i] -= h;
            let fd = (loss_value(&net, &up, &targets, &pair, &w)
                - loss_value(&net, &dn, &targets, &pair, &w))
                / (2.0 * h);
            let err = (g.data()[i] - fd).abs() / (1.0 + fd.abs());
            assert!(
                err < 1e-5,
                "{name}[{i}]: analytic {} vs numeric {fd}",
                g.data()[i]
            );
            worst = worst.max(err);
        }
    }
    assert!(worst.is_finite());
}
