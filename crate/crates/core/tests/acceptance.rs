//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line; the
//! test fails if any criterion does.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use attenmix::data::{Batch, TrainingExample};
use attenmix::eval::{collect_ranks, hr_mrr, ModelScorer, RandomScorer};
use attenmix::model::{
    attention_heads, batch_loss, embed_normalize, forward, forward_batch, generate_queries, init_params,
    readout, session_embedding, table_node, gather_keys, GraphContext, HyperParams, IdentityEncoder,
    ModelVars, Variant,
};
use attenmix::numerics::{finite_diff_check, lp_pool, Tape, Tensor, FD_REL_FLOOR};
use attenmix::sparsity::{kl_regularizer, probe_run, ProbeConfig, VariationalWeight};
use attenmix::synthetic::{cyclic_pattern, planted_pairs, uninformative, PlantedConfig};
use attenmix::training::{
    fit, train_step, Checkpoint, OptimizerState, TrainConfig,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{oracle, random_instance, VARIANTS};

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let hyper = HyperParams { dim: 8, levels: 3, heads: 2, ..HyperParams::default() };
    let mut worst = 0.0_f64;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let params = init_params(20, &hyper, seed).unwrap();
        let example = TrainingExample {
            prefix: (0..5).map(|_| rng.gen_range(1..=20)).collect(),
            target: rng.gen_range(1..=20),
            timestamp: 0,
        };
        let batch = Batch::from_examples(&[&example]);
        let err = finite_diff_check(
            params.set(),
            |tape, vars| {
                let mv = ModelVars::from_vars(&params, vars);
                batch_loss(tape, &mut GraphContext::plain(), &mv, &batch, &hyper, &IdentityEncoder)
            },
            1e-4,
        )
        .unwrap();
        worst = worst.max(err);
    }
    let secs = start.elapsed().as_secs_f64();
    check(worst < 1e-4 && secs < 60.0, format!("max relative error {worst:.2e} (floor {FD_REL_FLOOR:e}), {secs:.1} s"))
}

fn oracle_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0_f64;
    for i in 0..100 {
        let (num_items, hyper, prefix) = random_instance(&mut rng, VARIANTS[i % VARIANTS.len()]);
        let params = init_params(num_items, &hyper, i as u64).unwrap();
        let got = forward(&prefix, &params, &hyper).unwrap();
        let want = oracle::forward(&params, &hyper, &prefix);
        for (a, b) in got.probs.iter().zip(&want) {
            worst = worst.max((a - b).abs());
        }
    }
    check(worst < 1e-10, format!("max deviation {worst:.2e} over 100 instances"))
}

fn deep_sets_invariance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0_f64;
    let mut li_witness = 0.0_f64;
    for i in 0..100u64 {
        let levels = rng.gen_range(2..=3);
        let n = rng.gen_range(levels..=6);
        let mut prefix: Vec<u32> = (1..=10).collect();
        prefix.shuffle(&mut rng);
        prefix.truncate(n);
        let mut permuted = prefix.clone();
        permuted[n - levels..].shuffle(&mut rng);
        for variant in [Variant::Full, Variant::LI] {
            let hyper = HyperParams { dim: 6, levels, heads: 2, variant, ..HyperParams::default() };
            let params = init_params(10, &hyper, i).unwrap();
            let q = |p: &[u32]| {
                let keys = embed_normalize(p, &params, &IdentityEncoder).unwrap();
                let q = generate_queries(&keys, &params, &hyper).unwrap();
                q.row_slice(levels - 1).to_vec()
            };
            let dev = q(&prefix).iter().zip(q(&permuted)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            match variant {
                Variant::LI => li_witness = li_witness.max(dev),
                _ => worst = worst.max(dev),
            }
        }
    }
    check(
        worst < 1e-9 && li_witness > 1e-6,
        format!("full max change {worst:.2e}; concatenation variant max change {li_witness:.2e}"),
    )
}

fn normalization_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut norm_err, mut prob_err, mut col_err, mut masked_max, mut batch_dev) = (0.0_f64, 0.0_f64, 0.0_f64, 0.0_f64, 0.0_f64);
    for i in 0..1000u64 {
        let variant = VARIANTS[i as usize % VARIANTS.len()];
        let (num_items, hyper, _) = random_instance(&mut rng, variant);
        let params = init_params(num_items, &hyper, i).unwrap();
        let rows = rng.gen_range(1..=4);
        let examples: Vec<TrainingExample> = (0..rows)
            .map(|_| TrainingExample {
                prefix: (0..rng.gen_range(1..=5)).map(|_| rng.gen_range(1..=num_items as u32)).collect(),
                target: 1,
                timestamp: 0,
            })
            .collect();
        let refs: Vec<&TrainingExample> = examples.iter().collect();
        let batch = Batch::from_examples(&refs);
        let dists = forward_batch(&batch, &params, &hyper).unwrap();
        for (r, d) in dists.iter().enumerate() {
            prob_err = prob_err.max((d.probs.iter().sum::<f64>() - 1.0).abs());
            let single = forward(&examples[r].prefix, &params, &hyper).unwrap();
            batch_dev = batch_dev.max(single.probs.iter().zip(&d.probs).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
        }
        let mut tape = Tape::new();
        let vars = ModelVars::bind(&mut tape, &params);
        let table = table_node(&mut tape, &vars, &IdentityEncoder).unwrap();
        for r in 0..batch.len() {
            let keys = gather_keys(&mut tape, table, batch.row(r), batch.lengths[r]).unwrap();
            let mask = batch.row_mask(r);
            let ro = readout(&mut tape, &mut GraphContext::plain(), &vars, keys, mask, batch.lengths[r], &hyper).unwrap();
            let s = tape.value(ro.session).data();
            norm_err = norm_err.max((s.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs());
            for &a in &ro.attention {
                let a = tape.value(a);
                for m in 0..a.rows() {
                    col_err = col_err.max((a.row_slice(m).iter().sum::<f64>() - 1.0).abs());
                    for (j, &keep) in mask.iter().enumerate() {
                        if !keep {
                            masked_max = masked_max.max(a.get(m, j).abs());
                        }
                    }
                }
            }
        }
    }
    check(
        norm_err <= 1e-12 && prob_err <= 1e-9 && col_err <= 1e-9 && masked_max == 0.0 && batch_dev == 0.0,
        format!(
            "|s|-1 {norm_err:.1e}, sum p - 1 {prob_err:.1e}, attention sums {col_err:.1e}, masked {masked_max:e}, batch vs single {batch_dev:e}"
        ),
    )
}

fn lp_pooling_limits() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut sum_exact = true;
    for _ in 0..1000 {
        let v: Vec<f64> = (0..rng.gen_range(1..=6)).map(|_| rng.gen::<f64>()).collect();
        let pooled = lp_pool(&Tensor::vector(v.clone()).unwrap(), 1.0).unwrap();
        sum_exact &= pooled == v.iter().fold(0.0, |a, &x| a + x);
    }
    let mut p64_err = 0.0_f64;
    let mut lp_err = 0.0_f64;
    for i in 0..200u64 {
        let (num_items, mut hyper, prefix) = random_instance(&mut rng, Variant::Full);
        hyper.levels = rng.gen_range(2..=3);
        let params = init_params(num_items, &hyper, i).unwrap();
        let keys = embed_normalize(&prefix, &params, &IdentityEncoder).unwrap();
        let q = generate_queries(&keys, &params, &hyper).unwrap();
        let alpha = attention_heads(&q, &keys, &vec![true; prefix.len()], &params, &hyper).unwrap();
        for h in 0..alpha.heads {
            for j in 0..alpha.items {
                let col: Vec<f64> = (0..alpha.levels).map(|m| alpha.get(j, m, h)).collect();
                let max = col.iter().cloned().fold(0.0, f64::max);
                let pooled = lp_pool(&Tensor::vector(col).unwrap(), 64.0).unwrap();
                p64_err = p64_err.max(pooled - max);
            }
        }
        let lp = HyperParams { variant: Variant::LP, ..hyper.clone() };
        let limit = HyperParams { p: 1e6, ..hyper.clone() };
        let a = forward(&prefix, &params, &lp).unwrap();
        let b = forward(&prefix, &params, &limit).unwrap();
        lp_err = lp_err.max(a.probs.iter().zip(&b.probs).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max));
    }
    check(
        sum_exact && p64_err <= 1e-3 && lp_err <= 1e-3,
        format!("p=1 sum exact: {sum_exact}; p=64 vs max {p64_err:.2e}; max-pool variant vs p=1e6 {lp_err:.2e}"),
    )
}

fn metric_oracles() -> Outcome {
    let (hr, mrr) = hr_mrr(&[1, 21, 4], 20).unwrap();
    let hand = hr == 2.0 / 3.0 && mrr == (1.0 + 0.25) / 3.0;
    let num_items = 100;
    let examples: Vec<TrainingExample> = (0..10_000)
        .map(|i| TrainingExample { prefix: vec![1], target: (i % num_items) as u32 + 1, timestamp: 0 })
        .collect();
    let ranks = collect_ranks(&mut RandomScorer::new(num_items, 6), &examples, 500).unwrap();
    let mut within = true;
    let mut detail = format!("hand values ok: {hand}");
    for k in [5, 10, 20] {
        let (hr, _) = hr_mrr(&ranks, k).unwrap();
        let p = k as f64 / num_items as f64;
        let z = (hr - p) / (p * (1.0 - p) / examples.len() as f64).sqrt();
        within &= z.abs() <= 3.0;
        detail.push_str(&format!("; HR@{k} {hr:.4} (z {z:+.2})"));
    }
    check(hand && within, detail)
}

fn overfit_sanity() -> Outcome {
    let start = Instant::now();
    let ds = cyclic_pattern(50, 10, 5);
    let hyper = HyperParams { dim: 32, ..HyperParams::default() };
    let config = TrainConfig { lr: 1e-3, batch_size: 16, ..TrainConfig::default() };
    let mut params = init_params(ds.num_items(), &hyper, 7).unwrap();
    let mut state = OptimizerState::new(params.set(), config.adam());
    let mut losses = Vec::new();
    let mut reached = None;
    for epoch in 1..=200 {
        let mut total = 0.0;
        for batch in attenmix::data::batch_iter(&ds.train, config.batch_size, Some(epoch as u64)) {
            total += train_step(&mut params, &mut state, &batch, &hyper).unwrap() * batch.len() as f64;
        }
        losses.push(total / ds.train.len() as f64);
        let ranks = collect_ranks(&mut ModelScorer { params: &params, hyper: &hyper }, &ds.test, 100).unwrap();
        if reached.is_none() && hr_mrr(&ranks, 1).unwrap().0 >= 0.95 {
            reached = Some(epoch);
        }
        if reached.is_some() && epoch >= 5 {
            break;
        }
    }
    let first: Vec<f64> = losses.iter().take(5).cloned().collect();
    let decreasing = first.len() == 5 && first.windows(2).all(|w| w[1] < w[0]);
    let secs = start.elapsed().as_secs_f64();
    check(
        reached.is_some() && decreasing && secs < 120.0,
        format!("HR@1 >= 0.95 at epoch {reached:?}; first losses {first:.3?}; {secs:.1} s"),
    )
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

/// Median wall time of the readout for each configuration, trials interleaved.
fn readout_times(configs: &[(usize, usize)], trials: usize) -> Vec<f64> {
    let num_items = 300;
    let setups: Vec<_> = configs
        .iter()
        .map(|&(n, heads)| {
            let hyper = HyperParams { dim: 64, levels: 3, heads, ..HyperParams::default() };
            let params = init_params(num_items, &hyper, 8).unwrap();
            let prefix: Vec<u32> = (0..n).map(|i| (i % num_items) as u32 + 1).collect();
            (hyper, params, prefix)
        })
        .collect();
    let mut times = vec![Vec::with_capacity(trials); configs.len()];
    for trial in 0..trials + 5 {
        for (c, (hyper, params, prefix)) in setups.iter().enumerate() {
            let t0 = Instant::now();
            std::hint::black_box(session_embedding(prefix, params, hyper).unwrap());
            if trial >= 5 {
                times[c].push(t0.elapsed().as_secs_f64());
            }
        }
    }
    times.into_iter().map(median).collect()
}

fn complexity_scaling() -> Outcome {
    let t = readout_times(&[(40, 2), (80, 2), (40, 4)], 60);
    let (rn, rh) = (t[1] / t[0], t[2] / t[0]);
    let ok = |r: f64| (1.6..=2.6).contains(&r);
    check(ok(rn) && ok(rh), format!("2n ratio {rn:.2}, 2H ratio {rh:.2} (median of 60 trials)"))
}

/// Simpson's rule for `KL(N(theta, s2) || N(0, 1))` on +-12 standard deviations.
fn kl_quadrature(theta: f64, s2: f64) -> f64 {
    let s = s2.sqrt();
    let (a, b, n) = (theta - 12.0 * s, theta + 12.0 * s, 20_000);
    let h = (b - a) / n as f64;
    let f = |w: f64| {
        let lq = -0.5 * ((w - theta) / s).powi(2) - s.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln();
        let lp = -0.5 * w * w - 0.5 * (2.0 * std::f64::consts::PI).ln();
        lq.exp() * (lq - lp)
    };
    let mut total = f(a) + f(b);
    for k in 1..n {
        total += f(a + k as f64 * h) * if k % 2 == 1 { 4.0 } else { 2.0 };
    }
    total * h / 3.0
}

fn sparsity_probe() -> Outcome {
    let mut kl_err = 0.0_f64;
    for &(theta, s2) in &[(0.0, 1.0), (0.5, 0.1), (-1.3, 2.0), (2.0, 1e-3), (0.01, 1e-4), (-0.2, 4.0)] {
        let vw = VariationalWeight {
            theta: Tensor::scalar(theta),
            logvar: Tensor::scalar(f64::ln(s2)),
        };
        kl_err = kl_err.max((kl_regularizer(&vw) - kl_quadrature(theta, s2)).abs());
    }
    let ds = uninformative(30, 600, 5, 9);
    let hyper = HyperParams { dim: 16, levels: 2, heads: 2, ..HyperParams::default() };
    let run = |lambda: f64| {
        let cfg = ProbeConfig { lambda, epochs: 10, batch_size: 50, seed: 9, ..ProbeConfig::default() };
        probe_run(&ds, &hyper, &cfg).unwrap().series("merge")
    };
    let control = run(0.0);
    let pressured = run(10.0);
    let (c0, c1) = (control[0], *control.last().unwrap());
    let (p0, p1) = (pressured[0], *pressured.last().unwrap());
    check(
        kl_err <= 1e-6 && (c1 - c0).abs() <= 0.05 && p1 < p0,
        format!("KL vs quadrature {kl_err:.1e}; lambda 0: {c0:.3} -> {c1:.3}; lambda 10: {p0:.3} -> {p1:.3}"),
    )
}

fn checkpoint_round_trip() -> Outcome {
    let hyper = HyperParams { dim: 8, levels: 3, heads: 2, ..HyperParams::default() };
    let ds = cyclic_pattern(10, 6, 4);
    let params = init_params(ds.num_items(), &hyper, 10).unwrap();
    let ckpt = Checkpoint::new(hyper.clone(), ds.vocabulary.clone(), params);
    let back = Checkpoint::from_bytes(&ckpt.to_bytes().unwrap()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut identical = 0;
    for _ in 0..10 {
        let prefix: Vec<u32> = (0..rng.gen_range(1..=6)).map(|_| rng.gen_range(1..=ds.num_items() as u32)).collect();
        let a = forward(&prefix, &ckpt.params, &hyper).unwrap();
        let b = forward(&prefix, &back.params, back.hyper()).unwrap();
        identical += (a.probs.iter().zip(&b.probs).all(|(x, y)| x.to_bits() == y.to_bits())) as usize;
    }
    check(identical == 10, format!("{identical}/10 prefixes bitwise identical"))
}

const ABLATION_CORPUS: PlantedConfig = PlantedConfig {
    content_items: 40,
    target_items: 150,
    pairs: 600,
    max_distractors: 4,
    train_examples: 6000,
    test_examples: 600,
    reverse_test: false,
};

fn ablation_direction() -> Outcome {
    let mut means = Vec::new();
    for variant in VARIANTS {
        let mut total = 0.0;
        for seed in 0..5u64 {
            let ds = planted_pairs(&ABLATION_CORPUS, seed);
            let hyper = HyperParams { dim: 32, levels: 3, heads: 2, variant, ..HyperParams::default() };
            let config = TrainConfig { lr: 1e-2, batch_size: 32, max_epochs: 20, patience: 4, seed, ..TrainConfig::default() };
            let best = fit(&ds, &hyper, &config, &mut |_| {}).unwrap().best;
            let ranks = collect_ranks(&mut ModelScorer { params: &best.params, hyper: &hyper }, &ds.test, 100).unwrap();
            total += hr_mrr(&ranks, 20).unwrap().0;
        }
        means.push((variant, total / 5.0));
    }
    let full = means[0].1;
    let detail = means.iter().map(|(v, m)| format!("{v} {m:.4}")).collect::<Vec<_>>().join(", ");
    check(means.iter().all(|&(_, m)| full >= m), format!("mean HR@20 over 5 seeds: {detail}"))
}

#[test]
fn acceptance() {
    let criteria: [(u32, &str, fn() -> Outcome); 11] = [
        (1, "gradient correctness", gradient_correctness),
        (2, "oracle equivalence", oracle_equivalence),
        (3, "deep-sets invariance", deep_sets_invariance),
        (4, "normalization and probability invariants", normalization_invariants),
        (5, "Lp-pooling limits", lp_pooling_limits),
        (6, "metric oracles", metric_oracles),
        (7, "overfit sanity", overfit_sanity),
        (8, "complexity scaling", complexity_scaling),
        (9, "sparsity probe", sparsity_probe),
        (10, "checkpoint round trip", checkpoint_round_trip),
        (12, "ablation direction", ablation_direction),
    ];
    let mut failed = Vec::new();
    for (id, name, f) in criteria {
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        match outcome {
            Ok(d) => println!("criterion {id:>2} PASS  {name}: {d}"),
            Err(d) => {
                println!("criterion {id:>2} FAIL  {name}: {d}");
                failed.push(id);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
