mod common;

use proptest::prelude::*;

use promoe::experts::{expert_forward, make_segmented_pool};
use promoe::moe::{promoe_forward, tc_moe_forward, ProMoeLayerConfig, ProMoeParams, TcMoeConfig, TcMoeParams};
use promoe::params::{bind, grads, named};
use promoe::rng::{normal_tensor, stream, Purpose};
use promoe::router::{
    activate, kmeans_assign, kmeans_update, partition_by_condition, prototype_scores, topk_gate, KMeansState,
    PartitionSource, Prototypes, ScoreActivation, TokenPartition,
};
use promoe::{Tape, Tensor};

fn scores(x: &Tensor<f64>, p: &Tensor<f64>, alpha: f64) -> Tensor<f64> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let pv = tape.constant(p.clone());
    let z = prototype_scores(&mut tape, xv, &Prototypes { p: pv, alpha }).unwrap();
    tape.value(z).clone()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cosine_scores_ignore_positive_rescaling(seed in 0u64..10_000, c in 0.01f64..100.0, n in 1usize..12, e in 1usize..7) {
        let mut r = stream(seed, Purpose::Test, 0);
        let x = normal_tensor::<f64, _>(&mut r, &[n, 5], 1.0);
        let p = normal_tensor::<f64, _>(&mut r, &[e, 5], 1.0);
        let base = scores(&x, &p, 1.3);
        prop_assert!(base.max_abs_diff(&scores(&x.map(|v| v * c), &p, 1.3)) < 1e-6);
        prop_assert!(base.max_abs_diff(&scores(&x, &p.map(|v| v * c), 1.3)) < 1e-6);
        for i in 0..n {
            let want: Vec<f64> = common::rows(&p).iter().map(|pj| 1.3 * common::cosine(x.row(i), pj)).collect();
            for (a, b) in base.row(i).iter().zip(&want) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn topk_is_sorted_selection_with_k_nonzeros(seed in 0u64..10_000, n in 1usize..10, e in 1usize..8, k in 1usize..4) {
        let k = k.min(e);
        let s = normal_tensor::<f64, _>(&mut stream(seed, Purpose::Test, 1), &[n, e], 1.0);
        let mut tape = Tape::new();
        let sv = tape.constant(s.clone());
        let (g, res) = topk_gate(&mut tape, sv, k).unwrap();
        let gates = tape.value(g).clone();
        for i in 0..n {
            let want = common::topk(s.row(i), k);
            prop_assert_eq!(res.experts_of(i), &want[..]);
            for (j, &ex) in want.iter().enumerate() {
                prop_assert_eq!(gates.data()[i * k + j], s.at2(i, ex));
            }
        }
        let mask = res.selection_mask();
        prop_assert_eq!(mask.iter().filter(|&&m| m).count(), n * k);
    }

    #[test]
    fn argmax_survives_positive_scaling(seed in 0u64..10_000, c in 0.05f64..20.0) {
        let z = normal_tensor::<f64, _>(&mut stream(seed, Purpose::Test, 2), &[6, 5], 1.0);
        for kind in [ScoreActivation::Identity, ScoreActivation::Sigmoid] {
            let pick = |z: &Tensor<f64>| {
                let mut tape = Tape::new();
                let zv = tape.constant(z.clone());
                let s = activate(&mut tape, zv, kind).unwrap();
                topk_gate(&mut tape, s, 2).unwrap().1.indices
            };
            prop_assert_eq!(pick(&z), pick(&z.map(|v| v * c)));
        }
    }

    #[test]
    fn partition_is_complementary_and_sample_level(labels in proptest::collection::vec(0usize..5, 1..10), len in 1usize..6) {
        let part = partition_by_condition(&labels, 4, len);
        prop_assert_eq!(part.n_tokens(), labels.len() * len);
        for t in 0..part.n_tokens() {
            prop_assert!(part.mask_cond[t] ^ part.mask_uncond[t]);
            prop_assert_eq!(part.mask_uncond[t], labels[t / len] == 4);
        }
        let mut all = part.cond_indices();
        all.extend(part.uncond_indices());
        all.sort_unstable();
        prop_assert_eq!(all, (0..part.n_tokens()).collect::<Vec<_>>());
    }

    #[test]
    fn kmeans_matches_brute_force(seed in 0u64..10_000) {
        let mut r = stream(seed, Purpose::Test, 3);
        let x = normal_tensor::<f64, _>(&mut r, &[100, 3], 1.0);
        let state = KMeansState::init(&mut r, &x, 5).unwrap();
        let a = kmeans_assign(&x, &state).unwrap();
        let cents = common::rows(&state.centroids);
        let mut groups = vec![Vec::new(); 5];
        for i in 0..100 {
            let d: Vec<f64> = cents.iter().map(|c| -c.iter().zip(x.row(i)).map(|(p, q)| (p - q) * (p - q)).sum::<f64>()).collect();
            let want = common::topk(&d, 1)[0];
            prop_assert_eq!(a.indices[i], want);
            groups[want].push(i);
        }
        let next = kmeans_update(&x, &a.indices, &state).unwrap();
        for (c, g) in groups.iter().enumerate() {
            let want = if g.is_empty() { cents[c].clone() } else { common::mean_rows(&common::rows(&x), g) };
            for (p, q) in next.centroids.row(c).iter().zip(&want) {
                prop_assert!((p - q).abs() < 1e-6);
            }
        }
    }
}

fn mixed_layer() -> (ProMoeLayerConfig, ProMoeParams<Tensor<f64>>, TokenPartition, Tensor<f64>) {
    let cfg = ProMoeLayerConfig {
        n_experts: 5,
        ..Default::default()
    };
    let params = ProMoeParams::init(&mut stream(4, Purpose::Init, 0), 8, &cfg).unwrap();
    let part = TokenPartition::from_sample_mask(&[true, false, true, true], 3);
    let x = normal_tensor(&mut stream(4, Purpose::Test, 0), &[12, 8], 1.0);
    (cfg, params, part, x)
}

#[test]
fn shared_experts_are_additive() {
    let (cfg, params, part, x) = mixed_layer();
    let run = |params: &ProMoeParams<Tensor<f64>>, cfg: &ProMoeLayerConfig| {
        let mut tape = Tape::new();
        let p = bind(params, &mut tape);
        let xv = tape.constant(x.clone());
        let out = promoe_forward(&mut tape, xv, &part, PartitionSource::Labels, &p, cfg, false).unwrap();
        tape.value(out.output).clone()
    };
    let full = run(&params, &cfg);
    let mut branch_only = params.clone();
    let shared = branch_only.pool.shared.remove(0);
    let no_shared = run(&branch_only, &ProMoeLayerConfig { n_shared: 0, ..cfg });
    for t in 0..12 {
        let s = common::ffn(&shared, x.row(t));
        for ((f, b), sv) in full.row(t).iter().zip(no_shared.row(t)).zip(&s) {
            assert!((f - sv - b).abs() < 1e-12);
        }
    }
}

#[test]
fn gradients_reach_exactly_the_used_experts() {
    let (cfg, params, part, x) = mixed_layer();
    let mut tape = Tape::new();
    let p = bind(&params, &mut tape);
    let xv = tape.constant(x);
    let out = promoe_forward(&mut tape, xv, &part, PartitionSource::Labels, &p, &cfg, true).unwrap();
    let sq = tape.mul(out.output, out.output).unwrap();
    let mse = tape.mean(sq);
    let loss = tape.add(mse, out.aux_loss).unwrap();
    tape.backward(loss).unwrap();
    let used: Vec<usize> = out.routing.gating.indices.clone();
    let g = grads(&p, &tape);
    for ((name, _), gr) in named(&params).iter().zip(&g) {
        let nonzero = gr.data().iter().any(|&v| v != 0.0);
        let expect = match name.split('.').collect::<Vec<_>>()[..] {
            ["pool", "standard", e, ..] => used.contains(&e.parse().unwrap()),
            _ => true,
        };
        assert_eq!(nonzero, expect, "{name}");
    }
}

#[test]
fn promoe_is_deterministic() {
    let (cfg, params, part, x) = mixed_layer();
    let run = || {
        let mut tape = Tape::new();
        let p = bind(&params, &mut tape);
        let xv = tape.constant(x.clone());
        let out = promoe_forward(&mut tape, xv, &part, PartitionSource::Labels, &p, &cfg, true).unwrap();
        (tape.value(out.output).clone(), tape.value(out.aux_loss).clone())
    };
    assert_eq!(run(), run());
}

#[test]
fn token_choice_matches_loop_oracle() {
    let cfg = TcMoeConfig {
        n_experts: 4,
        top_k: 2,
        n_shared: 1,
        load_balance_weight: 0.0,
    };
    let mut r = stream(5, Purpose::Init, 0);
    let params = TcMoeParams::<Tensor<f64>>::init(&mut r, 6, &cfg).unwrap();
    let x = normal_tensor(&mut stream(5, Purpose::Test, 0), &[10, 6], 1.0);
    let mut tape = Tape::new();
    let p = bind(&params, &mut tape);
    let xv = tape.constant(x.clone());
    let out = tc_moe_forward(&mut tape, xv, &p, &cfg, false).unwrap();
    let got = tape.value(out.output).clone();
    for t in 0..10 {
        let xt = x.row(t);
        let logits: Vec<f64> = (0..4).map(|e| (0..6).map(|i| xt[i] * params.router.at2(i, e)).sum()).collect();
        let probs = common::activate(&logits, ScoreActivation::Softmax);
        let mut y = common::ffn(&params.pool.shared[0], xt);
        for e in common::topk(&probs, 2) {
            common::add_into(&mut y, &common::ffn(&params.pool.standard[e], xt), probs[e]);
        }
        for (a, b) in got.row(t).iter().zip(&y) {
            assert!((a - b).abs() < 1e-10);
        }
    }
}

#[test]
fn segmented_pool_expert_matches_loop() {
    let pool = make_segmented_pool::<f64, _>(&mut stream(6, Purpose::Init, 0), 4, 2, 1, 1, 2).unwrap();
    let x = normal_tensor(&mut stream(6, Purpose::Test, 0), &[3, 4], 1.0);
    let mut tape = Tape::new();
    let e = bind(&pool.standard[1], &mut tape);
    let xv = tape.constant(x.clone());
    let y = expert_forward(&mut tape, &e, xv).unwrap();
    for t in 0..3 {
        for (a, b) in tape.value(y).row(t).iter().zip(common::ffn(&pool.standard[1], x.row(t))) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
