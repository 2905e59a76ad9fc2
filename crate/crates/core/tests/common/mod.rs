#![allow(dead_code)]

pub mod oracle;

use attenmix::model::{HyperParams, Variant};
use rand::Rng;

pub const VARIANTS: [Variant; 5] = [Variant::Full, Variant::M, Variant::IP, Variant::LI, Variant::LP];

/// Small random instance: `(num_items, hyper, prefix)`.
pub fn random_instance<R: Rng>(rng: &mut R, variant: Variant) -> (usize, HyperParams, Vec<u32>) {
    let num_items = rng.gen_range(3..=10);
    let hyper = HyperParams {
        dim: rng.gen_range(2..=8),
        levels: rng.gen_range(1..=3),
        heads: rng.gen_range(1..=2),
        variant,
        ..HyperParams::default()
    };
    let n = rng.gen_range(1..=5);
    let prefix = (0..n).map(|_| rng.gen_range(1..=num_items as u32)).collect();
    (num_items, hyper, prefix)
}
