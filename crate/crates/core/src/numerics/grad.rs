use std::collections::BTreeMap;

use super::{NumericsError, Tape, Tensor, Var};

/// Ordered collection of named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a parameter. Names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        assert!(self.get(&name).is_none(), "duplicate parameter {name}");
        self.entries.push((name, value));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|(n, _)| n == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar entries.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Puts every parameter on the tape as a borrowed leaf, in order.
    pub fn bind<'a>(&'a self, tape: &mut Tape<'a>) -> Vec<Var> {
        self.entries.iter().map(|(_, t)| tape.leaf_ref(t)).collect()
    }
}

/// Gradient of a scalar loss with respect to each named parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientRecord {
    pub loss: f64,
    pub grads: BTreeMap<String, Tensor>,
}

impl GradientRecord {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.grads.get(name)
    }
}

/// Reverse-mode gradient of `loss_fn` with respect to every parameter in `params`.
///
/// `loss_fn` receives the parameter leaves in `params` order and must return a
/// 1x1 node.
pub fn grad<E, F>(params: &ParamSet, loss_fn: F) -> Result<GradientRecord, E>
where
    E: From<NumericsError>,
    F: for<'t> Fn(&mut Tape<'t>, &[Var]) -> Result<Var, E>,
{
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let loss = loss_fn(&mut tape, &vars)?;
    let loss_value = tape.value(loss).data()[0];
    if !loss_value.is_finite() {
        return Err(NumericsError::NonFinite { context: format!("loss {loss_value}") }.into());
    }
    let mut back = tape.backward(loss)?;
    let mut grads = BTreeMap::new();
    for ((name, value), &var) in params.iter().zip(&vars) {
        let g = back.take_or_zeros(var, value.shape());
        if !g.is_finite() {
            return Err(NumericsError::NonFiniteGradient { param: name.to_string() }.into());
        }
        grads.insert(name.to_string(), g);
    }
    Ok(GradientRecord { loss: loss_value, grads })
}

/// Evaluates `loss_fn` forward only.
pub fn eval_loss<E, F>(params: &ParamSet, loss_fn: &F) -> Result<f64, E>
where
    E: From<NumericsError>,
    F: for<'t> Fn(&mut Tape<'t>, &[Var]) -> Result<Var, E>,
{
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let loss = loss_fn(&mut tape, &vars)?;
    Ok(tape.value(loss).data()[0])
}

/// Gradient entries smaller than this are compared in absolute terms: central
/// differences at step `1e-4` carry rounding error near `1e-16 * |loss| / 1e-4`.
pub const FD_REL_FLOOR: f64 = 1e-6;

/// Largest relative discrepancy between the reverse-mode gradient and central
/// finite differences, with denominator `max(|a|, |b|, FD_REL_FLOOR)`.
pub fn finite_diff_check<E, F>(params: &ParamSet, loss_fn: F, step: f64) -> Result<f64, E>
where
    E: From<NumericsError>,
    F: for<'t> Fn(&mut Tape<'t>, &[Var]) -> Result<Var, E>,
{
    if !(1e-6..=1e-3).contains(&step) {
        return Err(NumericsError::InvalidStep(step).into());
    }
    let analytic = grad(params, &loss_fn)?;
    let mut probe = params.clone();
    let mut worst = 0.0_f64;
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in &names {
        let n = params.get(name).map_or(0, Tensor::len);
        let a = analytic.grads[name].data().to_vec();
        for k in 0..n {
            let orig = params.get(name).unwrap().data()[k];
            probe.get_mut(name).unwrap().data_mut()[k] = orig + step;
            let up = eval_loss(&probe, &loss_fn)?;
            probe.get_mut(name).unwrap().data_mut()[k] = orig - step;
            let down = eval_loss(&probe, &loss_fn)?;
            probe.get_mut(name).unwrap().data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * step);
            let denom = a[k].abs().max(numeric.abs()).max(FD_REL_FLOOR);
            worst = worst.max((a[k] - numeric).abs() / denom);
        }
    }
    Ok(worst)
}
