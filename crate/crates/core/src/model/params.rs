use rand::distributions::{Distribution as _, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{HyperParams, ModelError};
use crate::numerics::{ParamSet, Tensor};

/// Learnable state. Stored as an ordered [`ParamSet`] with names
/// `embedding`, `query.{l}`, `head_q.{h}`, `head_k.{h}`, `merge`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    num_items: usize,
    set: ParamSet,
}

pub(crate) fn query_name(l: usize) -> String {
    format!("query.{l}")
}

pub(crate) fn head_q_name(h: usize) -> String {
    format!("head_q.{h}")
}

pub(crate) fn head_k_name(h: usize) -> String {
    format!("head_k.{h}")
}

/// Expected `(name, shape)` list for a vocabulary size and hyperparameters.
pub(crate) fn layout(num_items: usize, hyper: &HyperParams) -> Vec<(String, Vec<usize>)> {
    let d = hyper.dim;
    let mut out = vec![("embedding".to_string(), vec![num_items + 1, d])];
    for l in 1..=hyper.query_count() {
        out.push((query_name(l), vec![d, hyper.query_input_dim(l)]));
    }
    for h in 1..=hyper.heads {
        out.push((head_q_name(h), vec![d, d]));
    }
    for h in 1..=hyper.heads {
        out.push((head_k_name(h), vec![d, d]));
    }
    out.push(("merge".to_string(), vec![d, hyper.heads * d + d]));
    out
}

impl ModelParams {
    /// Wraps a parameter set after checking it matches the expected layout.
    pub fn from_set(num_items: usize, hyper: &HyperParams, set: ParamSet) -> Result<Self, ModelError> {
        let expected = layout(num_items, hyper);
        if expected.len() != set.len() {
            return Err(ModelError::Layout(format!(
                "expected {} arrays, found {}",
                expected.len(),
                set.len()
            )));
        }
        for ((name, shape), (got_name, t)) in expected.iter().zip(set.iter()) {
            if name != got_name || shape.as_slice() != t.shape() {
                return Err(ModelError::Layout(format!(
                    "expected {name} {shape:?}, found {got_name} {:?}",
                    t.shape()
                )));
            }
        }
        Ok(Self { num_items, set })
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn set(&self) -> &ParamSet {
        &self.set
    }

    pub fn set_mut(&mut self) -> &mut ParamSet {
        &mut self.set
    }

    pub fn into_set(self) -> ParamSet {
        self.set
    }

    pub fn embedding(&self) -> &Tensor {
        self.set.get("embedding").expect("layout checked")
    }

    /// Level-`l` query weight (1-based).
    pub fn query(&self, l: usize) -> &Tensor {
        self.set.get(&query_name(l)).expect("layout checked")
    }

    pub fn head_query(&self, h: usize) -> &Tensor {
        self.set.get(&head_q_name(h)).expect("layout checked")
    }

    pub fn head_key(&self, h: usize) -> &Tensor {
        self.set.get(&head_k_name(h)).expect("layout checked")
    }

    pub fn merge(&self) -> &Tensor {
        self.set.get("merge").expect("layout checked")
    }
}

/// Uniform `[-1/sqrt(d), 1/sqrt(d)]` initialization, deterministic per seed.
/// The padding row is initialized like any other row; masking keeps it out of
/// every prediction.
pub fn init_params(num_items: usize, hyper: &HyperParams, seed: u64) -> Result<ModelParams, ModelError> {
    hyper.validate()?;
    if num_items == 0 {
        return Err(ModelError::InvalidHyper("vocabulary is empty".into()));
    }
    let bound = 1.0 / (hyper.dim as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut set = ParamSet::new();
    for (name, shape) in layout(num_items, hyper) {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| dist.sample(&mut rng)).collect();
        set.insert(name, Tensor::new(&shape, data)?);
    }
    ModelParams::from_set(num_items, hyper, set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Variant;

    fn hyper(variant: Variant) -> HyperParams {
        HyperParams { dim: 4, levels: 3, heads: 2, variant, ..HyperParams::default() }
    }

    #[test]
    fn shapes_per_variant() {
        let p = init_params(5, &hyper(Variant::Full), 1).unwrap();
        assert_eq!(p.embedding().shape(), &[6, 4]);
        assert_eq!(p.query(3).shape(), &[4, 4]);
        assert_eq!(p.merge().shape(), &[4, 12]);
        let p = init_params(5, &hyper(Variant::LI), 1).unwrap();
        assert_eq!(p.query(3).shape(), &[4, 12]);
        let p = init_params(5, &hyper(Variant::M), 1).unwrap();
        assert!(p.set().get("query.2").is_none());
    }

    #[test]
    fn deterministic_and_bounded() {
        let a = init_params(10, &hyper(Variant::Full), 9).unwrap();
        let b = init_params(10, &hyper(Variant::Full), 9).unwrap();
        let c = init_params(10, &hyper(Variant::Full), 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        for (_, t) in a.set().iter() {
            assert!(t.data().iter().all(|v| v.abs() <= 0.5));
        }
    }

    #[test]
    fn layout_mismatch_rejected() {
        let a = init_params(10, &hyper(Variant::Full), 9).unwrap();
        assert!(ModelParams::from_set(11, &hyper(Variant::Full), a.set().clone()).is_err());
        assert!(ModelParams::from_set(10, &hyper(Variant::LI), a.into_set()).is_err());
    }
}
