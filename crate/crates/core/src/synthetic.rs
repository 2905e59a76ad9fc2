//! Generated corpora with known structure, for sanity runs and ablations.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{augment, ItemIndex, Session, SessionDataset, TrainingExample, Vocabulary};

fn vocabulary(n: usize) -> Vocabulary {
    Vocabulary::from_ordered((1..=n).map(|i| i.to_string()).collect(), vec![1; n])
}

/// `sessions` sessions walking the cycle `1 -> 2 -> ... -> cycle -> 1`, each
/// `length` long and starting at a different offset. Every split holds the
/// same examples, so fitting it is pure memorization.
pub fn cyclic_pattern(sessions: usize, cycle: usize, length: usize) -> SessionDataset {
    let list: Vec<Session> = (0..sessions)
        .map(|s| Session {
            id: format!("c{s}"),
            items: (0..length).map(|k| ((s + k) % cycle + 1) as ItemIndex).collect(),
            last_timestamp: s as i64,
        })
        .collect();
    let examples = augment(&list);
    SessionDataset {
        vocabulary: vocabulary(cycle),
        train: examples.clone(),
        validation: examples.clone(),
        test: examples,
    }
}

/// Shape of [`planted_pairs`].
#[derive(Clone, Debug, PartialEq)]
pub struct PlantedConfig {
    /// Items that appear in prefixes.
    pub content_items: usize,
    /// Items that only appear as targets.
    pub target_items: usize,
    /// Planted unordered pairs; each has its own target. At most
    /// `content_items * (content_items - 1) / 2`.
    pub pairs: usize,
    /// Random content items placed before the pair.
    pub max_distractors: usize,
    pub train_examples: usize,
    pub test_examples: usize,
    /// Give each pair one fixed order in training and the opposite order in
    /// test, instead of a fresh random order per example.
    pub reverse_test: bool,
}

impl Default for PlantedConfig {
    fn default() -> Self {
        Self {
            content_items: 40,
            target_items: 40,
            pairs: 120,
            max_distractors: 4,
            train_examples: 3000,
            test_examples: 600,
            reverse_test: false,
        }
    }
}

/// Prefixes end with the two members of a planted pair, preceded by random
/// distractors; the target is the pair's own item. Only
/// the last two items carry signal and their order carries none, so a reader
/// must combine both without caring about their order or about earlier
/// items.
pub fn planted_pairs(cfg: &PlantedConfig, seed: u64) -> SessionDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = cfg.content_items as ItemIndex;
    assert!(
        cfg.pairs <= cfg.content_items * cfg.content_items.saturating_sub(1) / 2 && cfg.target_items > 0,
        "cannot plant {} distinct pairs over {} content items",
        cfg.pairs,
        cfg.content_items
    );
    let mut pairs: Vec<((ItemIndex, ItemIndex), ItemIndex)> = Vec::with_capacity(cfg.pairs);
    while pairs.len() < cfg.pairs {
        let a = rng.gen_range(1..=c);
        let b = rng.gen_range(1..=c);
        let key = (a.min(b), a.max(b));
        if a != b && !pairs.iter().any(|&((p, q), _)| (p.min(q), p.max(q)) == key) {
            let t = c + rng.gen_range(1..=cfg.target_items as ItemIndex);
            pairs.push(((a, b), t));
        }
    }
    let mut sample = |n: usize, t0: i64, reversed: bool| -> Vec<TrainingExample> {
        (0..n)
            .map(|i| {
                let &((a, b), target) = pairs.choose(&mut rng).expect("pairs");
                let k = rng.gen_range(0..=cfg.max_distractors);
                let mut prefix: Vec<ItemIndex> = (0..k).map(|_| rng.gen_range(1..=c)).collect();
                let forward = if cfg.reverse_test { !reversed } else { rng.gen::<bool>() };
                if forward {
                    prefix.extend([a, b]);
                } else {
                    prefix.extend([b, a]);
                }
                TrainingExample { prefix, target, timestamp: t0 + i as i64 }
            })
            .collect()
    };
    let train = sample(cfg.train_examples, 0, false);
    let test = sample(cfg.test_examples, cfg.train_examples as i64, true);
    SessionDataset::with_validation(
        vocabulary(cfg.content_items + cfg.target_items),
        train,
        test,
        0.2,
    )
}

/// Targets drawn independently of the prefix: nothing in the input predicts
/// the next item beyond its marginal frequency.
pub fn uninformative(num_items: usize, examples: usize, max_len: usize, seed: u64) -> SessionDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = num_items as ItemIndex;
    let make = |rng: &mut ChaCha8Rng, i: usize| {
        let len = rng.gen_range(1..=max_len);
        TrainingExample {
            prefix: (0..len).map(|_| rng.gen_range(1..=n)).collect(),
            target: rng.gen_range(1..=n),
            timestamp: i as i64,
        }
    };
    let train: Vec<TrainingExample> = (0..examples).map(|i| make(&mut rng, i)).collect();
    let test: Vec<TrainingExample> = (0..examples / 5).map(|i| make(&mut rng, examples + i)).collect();
    SessionDataset::with_validation(vocabulary(num_items), train, test, 0.2)
}
