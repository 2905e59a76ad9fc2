use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ItemIndex, TrainingExample, PADDING};

/// Right-padded minibatch. Row `r` holds `lengths[r]` valid items followed by
/// padding (index 0); `mask` marks the valid entries.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub width: usize,
    pub items: Vec<ItemIndex>,
    pub mask: Vec<bool>,
    pub lengths: Vec<usize>,
    pub targets: Vec<ItemIndex>,
}

impl Batch {
    pub fn from_examples(examples: &[&TrainingExample]) -> Self {
        let width = examples.iter().map(|e| e.prefix.len()).max().unwrap_or(0);
        let mut items = Vec::with_capacity(examples.len() * width);
        let mut mask = Vec::with_capacity(examples.len() * width);
        for e in examples {
            for k in 0..width {
                let valid = k < e.prefix.len();
                items.push(if valid { e.prefix[k] } else { PADDING });
                mask.push(valid);
            }
        }
        Batch {
            width,
            items,
            mask,
            lengths: examples.iter().map(|e| e.prefix.len()).collect(),
            targets: examples.iter().map(|e| e.target).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn row(&self, r: usize) -> &[ItemIndex] {
        &self.items[r * self.width..(r + 1) * self.width]
    }

    pub fn row_mask(&self, r: usize) -> &[bool] {
        &self.mask[r * self.width..(r + 1) * self.width]
    }
}

/// Iterator over padded batches in a (optionally shuffled) fixed order.
pub struct Batches<'a> {
    examples: &'a [TrainingExample],
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl<'a> Iterator for Batches<'a> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let chosen: Vec<&TrainingExample> =
            self.order[self.pos..end].iter().map(|&i| &self.examples[i]).collect();
        self.pos = end;
        Some(Batch::from_examples(&chosen))
    }
}

/// Splits `examples` into batches of `batch_size`; `shuffle_seed` permutes the
/// order reproducibly.
pub fn batch_iter(
    examples: &[TrainingExample],
    batch_size: usize,
    shuffle_seed: Option<u64>,
) -> Batches<'_> {
    assert!(batch_size >= 1, "batch_size must be >= 1");
    let mut order: Vec<usize> = (0..examples.len()).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    Batches { examples, order, batch_size, pos: 0 }
}
