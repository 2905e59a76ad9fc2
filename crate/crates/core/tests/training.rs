use attenmix::data::{Batch, TrainingExample};
use attenmix::model::{batch_loss, init_params, GraphContext, HyperParams, IdentityEncoder, ModelError, ModelVars};
use attenmix::numerics::{eval_loss, grad};
use attenmix::synthetic::cyclic_pattern;
use attenmix::training::{fit, train_step, OptimizerState, TrainConfig, TrainError};

fn example(prefix: &[u32], target: u32) -> TrainingExample {
    TrainingExample { prefix: prefix.to_vec(), target, timestamp: 0 }
}

fn hyper() -> HyperParams {
    HyperParams { dim: 6, levels: 3, heads: 2, ..HyperParams::default() }
}

#[test]
fn padding_row_receives_no_gradient() {
    let h = hyper();
    let params = init_params(9, &h, 1).unwrap();
    let rows = [example(&[1, 2, 3, 4, 5], 6), example(&[7], 8), example(&[2, 9], 1)];
    let refs: Vec<&TrainingExample> = rows.iter().collect();
    let batch = Batch::from_examples(&refs);
    let rec = grad(params.set(), |tape, vars| -> Result<_, ModelError> {
        let mv = ModelVars::from_vars(&params, vars);
        batch_loss(tape, &mut GraphContext::plain(), &mv, &batch, &h, &IdentityEncoder)
    })
    .unwrap();
    let g = rec.get("embedding").unwrap();
    assert!(g.row_slice(0).iter().all(|&v| v == 0.0));
    assert!(g.row_slice(1).iter().any(|&v| v != 0.0));
}

#[test]
fn small_step_decreases_batch_loss() {
    let h = hyper();
    let ds = cyclic_pattern(8, 6, 5);
    let refs: Vec<&TrainingExample> = ds.train.iter().take(16).collect();
    let batch = Batch::from_examples(&refs);
    let mut params = init_params(ds.num_items(), &h, 2).unwrap();
    let loss_of = |p: &attenmix::model::ModelParams| {
        eval_loss(p.set(), &|tape: &mut attenmix::numerics::Tape<'_>, vars: &[attenmix::numerics::Var]| -> Result<_, ModelError> {
            let mv = ModelVars::from_vars(p, vars);
            batch_loss(tape, &mut GraphContext::plain(), &mv, &batch, &h, &IdentityEncoder)
        })
        .unwrap()
    };
    let before = loss_of(&params);
    let config = TrainConfig { lr: 1e-4, ..TrainConfig::default() };
    let mut state = OptimizerState::new(params.set(), config.adam());
    let reported = train_step(&mut params, &mut state, &batch, &h).unwrap();
    assert_eq!(reported, before);
    assert!(loss_of(&params) < before);
}

#[test]
fn fit_is_deterministic_and_keeps_the_best_epoch() {
    let h = hyper();
    let ds = cyclic_pattern(20, 8, 5);
    let config = TrainConfig { lr: 5e-3, batch_size: 16, max_epochs: 6, patience: 2, seed: 11, ..TrainConfig::default() };
    let a = fit(&ds, &h, &config, &mut |_| {}).unwrap();
    let b = fit(&ds, &h, &config, &mut |_| {}).unwrap();
    assert_eq!(a.best.to_bytes().unwrap(), b.best.to_bytes().unwrap());
    let losses = |o: &attenmix::training::FitOutcome| o.log.iter().map(|r| (r.loss, r.mrr20)).collect::<Vec<_>>();
    assert_eq!(losses(&a), losses(&b));

    let best = a.log.iter().map(|r| r.mrr20).fold(f64::NEG_INFINITY, f64::max);
    let first_best = a.log.iter().find(|r| r.mrr20 == best).unwrap();
    assert_eq!(a.best.meta.epoch, first_best.epoch);
    assert_eq!(a.best.meta.validation_mrr, best);
    assert_eq!(a.best.meta.seed, 11);

    let other = fit(&ds, &h, &TrainConfig { seed: 12, ..config }, &mut |_| {}).unwrap();
    assert_ne!(other.best.params, a.best.params);
}

#[test]
fn early_stopping_respects_patience() {
    let h = hyper();
    let ds = cyclic_pattern(20, 8, 5);
    // a learning rate this small cannot move validation MRR for long
    let config = TrainConfig { lr: 1e-9, batch_size: 64, max_epochs: 30, patience: 2, ..TrainConfig::default() };
    let mut seen = Vec::new();
    let out = fit(&ds, &h, &config, &mut |r| seen.push(r.epoch)).unwrap();
    assert!(out.log.len() < 30);
    assert_eq!(seen, out.log.iter().map(|r| r.epoch).collect::<Vec<_>>());
    let best = out.best.meta.epoch;
    assert_eq!(out.log.len(), best + 2);
}

#[test]
fn configuration_and_data_errors() {
    let h = hyper();
    let ds = cyclic_pattern(4, 4, 3);
    let bad = TrainConfig { batch_size: 0, ..TrainConfig::default() };
    assert!(matches!(fit(&ds, &h, &bad, &mut |_| {}), Err(TrainError::InvalidConfig(_))));
    let mut empty = ds.clone();
    empty.validation.clear();
    assert!(matches!(fit(&empty, &h, &TrainConfig::default(), &mut |_| {}), Err(TrainError::EmptySplit("validation"))));
    let bad_hyper = HyperParams { heads: 0, ..h };
    assert!(matches!(fit(&ds, &bad_hyper, &TrainConfig::default(), &mut |_| {}), Err(TrainError::Model(_))));
}
