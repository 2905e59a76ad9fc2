//! Tape builders for each readout stage. The eager API in `ops` and the
//! training loss both go through these, so there is one implementation of
//! the math.

use std::collections::HashMap;

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, StandardNormal};

use super::params::{head_k_name, head_q_name, query_name};
use super::{HyperParams, ModelError, ModelParams, Variant};
use crate::data::{Batch, ItemIndex};
use crate::numerics::{NumericsError, Tape, Tensor, Var, WeightLayout};

/// Per-item map applied to raw embeddings before normalization.
pub trait ItemEncoder: Sync {
    fn encode(&self, tape: &mut Tape<'_>, embeddings: Var) -> Result<Var, NumericsError>;
}

/// Default encoder: embeddings pass through unchanged.
#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityEncoder;

impl ItemEncoder for IdentityEncoder {
    fn encode(&self, _tape: &mut Tape<'_>, embeddings: Var) -> Result<Var, NumericsError> {
        Ok(embeddings)
    }
}

/// Tape handles for every model parameter.
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub embedding: Var,
    pub query: Vec<Var>,
    pub head_q: Vec<Var>,
    pub head_k: Vec<Var>,
    pub merge: Var,
}

impl ModelVars {
    /// Binds every parameter as a borrowed leaf.
    pub fn bind<'a>(tape: &mut Tape<'a>, params: &'a ModelParams) -> Self {
        let vars = params.set().bind(tape);
        Self::from_vars(params, &vars)
    }

    /// Maps leaves (in parameter-set order) to roles.
    pub fn from_vars(params: &ModelParams, vars: &[Var]) -> Self {
        let set = params.set();
        let at = |name: &str| vars[set.position(name).expect("layout checked")];
        let queries = set.names().filter(|n| n.starts_with("query.")).count();
        let heads = set.names().filter(|n| n.starts_with("head_q.")).count();
        Self {
            embedding: at("embedding"),
            query: (1..=queries).map(|l| at(&query_name(l))).collect(),
            head_q: (1..=heads).map(|h| at(&head_q_name(h))).collect(),
            head_k: (1..=heads).map(|h| at(&head_k_name(h))).collect(),
            merge: at("merge"),
        }
    }
}

/// Optional Gaussian-weight treatment of named linear maps.
#[derive(Default)]
pub struct GraphContext {
    /// Parameter name to its log-variance leaf.
    pub variational: HashMap<String, Var>,
    /// Noise source; without one, variational weights act as their means.
    pub rng: Option<ChaCha8Rng>,
}

impl GraphContext {
    pub fn plain() -> Self {
        Self::default()
    }
}

/// `x W^T` (OutIn) or `x W` (InOut), sampled with local reparameterization when
/// `name` is variational in `ctx`.
pub fn linear(
    tape: &mut Tape<'_>,
    ctx: &mut GraphContext,
    name: &str,
    weight: Var,
    x: Var,
    layout: WeightLayout,
) -> Result<Var, NumericsError> {
    if let (Some(&logvar), Some(rng)) = (ctx.variational.get(name), ctx.rng.as_mut()) {
        let rows = tape.value(x).rows();
        let w = tape.value(weight);
        let out = match layout {
            WeightLayout::OutIn => w.rows(),
            WeightLayout::InOut => w.cols(),
        };
        let noise: Vec<f64> = (0..rows * out).map(|_| StandardNormal.sample(rng)).collect();
        let noise = Tensor::matrix(rows, out, noise)?;
        return tape.variational_linear(x, weight, logvar, layout, noise);
    }
    match layout {
        WeightLayout::OutIn => tape.matmul_nt(x, weight),
        WeightLayout::InOut => tape.matmul(x, weight),
    }
}

/// Row-normalized (encoded) embedding table, `(|V|+1) x d`.
pub fn table_node(
    tape: &mut Tape<'_>,
    vars: &ModelVars,
    encoder: &dyn ItemEncoder,
) -> Result<Var, NumericsError> {
    let encoded = encoder.encode(tape, vars.embedding)?;
    tape.normalize_rows(encoded)
}

/// Queries for the `len` valid rows of `keys` (last valid item at `len - 1`).
/// Returns an `l_eff x d` node.
pub fn queries_node(
    tape: &mut Tape<'_>,
    ctx: &mut GraphContext,
    vars: &ModelVars,
    keys: Var,
    len: usize,
    hyper: &HyperParams,
) -> Result<Var, NumericsError> {
    let levels = hyper.effective_levels(len);
    let d = hyper.dim;
    let mut qs = Vec::with_capacity(levels);
    let whole: Vec<usize> = (0..len).collect();
    let mut session_sum = None;
    for l in 1..=levels {
        let window: Vec<usize> = (len - l..len).collect();
        let summary = match hyper.variant {
            Variant::Full | Variant::LP | Variant::M => tape.sum_rows(keys, &window)?,
            Variant::IP => match session_sum {
                Some(s) => s,
                None => {
                    let s = tape.sum_rows(keys, &whole)?;
                    session_sum = Some(s);
                    s
                }
            },
            Variant::LI => {
                let rows = tape.gather_rows(keys, &window)?;
                tape.reshape(rows, &[1, l * d])?
            }
        };
        let name = query_name(l);
        qs.push(linear(tape, ctx, &name, vars.query[l - 1], summary, WeightLayout::OutIn)?);
    }
    tape.concat_rows(&qs)
}

/// Per-head attention maps, each `l_eff x width`, softmax over the key axis
/// with masked keys at exactly zero.
pub fn attention_nodes(
    tape: &mut Tape<'_>,
    ctx: &mut GraphContext,
    vars: &ModelVars,
    queries: Var,
    keys: Var,
    mask: &[bool],
    hyper: &HyperParams,
) -> Result<Vec<Var>, NumericsError> {
    let inv_sqrt_d = 1.0 / (hyper.dim as f64).sqrt();
    let mut heads = Vec::with_capacity(hyper.heads);
    for h in 0..hyper.heads {
        let qp = linear(tape, ctx, &head_q_name(h + 1), vars.head_q[h], queries, WeightLayout::InOut)?;
        let kp = linear(tape, ctx, &head_k_name(h + 1), vars.head_k[h], keys, WeightLayout::InOut)?;
        let logits = tape.matmul_nt(qp, kp)?;
        heads.push(tape.softmax_rows(logits, inv_sqrt_d, Some(mask))?);
    }
    Ok(heads)
}

/// Pools each head's map across levels and mixes the keys. Returns the
/// pooled weights per head (1 x width), the raw head vectors (1 x d) and the
/// normalized session vector (1 x H*d).
pub fn mix_nodes(
    tape: &mut Tape<'_>,
    heads: &[Var],
    keys: Var,
    hyper: &HyperParams,
) -> Result<(Vec<Var>, Vec<Var>, Var), NumericsError> {
    let mut pooled = Vec::with_capacity(heads.len());
    let mut parts = Vec::with_capacity(heads.len());
    for &a in heads {
        let w = match hyper.variant {
            Variant::LP => tape.max_pool_columns(a),
            _ => tape.lp_pool_columns(a, hyper.p)?,
        };
        parts.push(tape.matmul(w, keys)?);
        pooled.push(w);
    }
    let joined = if parts.len() == 1 { parts[0] } else { tape.concat_cols(&parts)? };
    let session = tape.normalize_rows(joined)?;
    Ok((pooled, parts, session))
}

/// Unscaled item scores `(W_m (s || h_n)) . h_j` for every table row (1 x (|V|+1)).
pub fn score_node(
    tape: &mut Tape<'_>,
    ctx: &mut GraphContext,
    vars: &ModelVars,
    session: Var,
    last: Var,
    table: Var,
) -> Result<Var, NumericsError> {
    let z = tape.concat_cols(&[session, last])?;
    let u = linear(tape, ctx, "merge", vars.merge, z, WeightLayout::OutIn)?;
    tape.matmul_nt(u, table)
}

/// Nodes of one readout pass.
#[derive(Clone, Debug)]
pub struct Readout {
    pub keys: Var,
    pub queries: Var,
    pub attention: Vec<Var>,
    pub pooled: Vec<Var>,
    pub head_vectors: Vec<Var>,
    pub session: Var,
    pub last: Var,
}

/// Gathers the key rows of a (possibly right-padded) index row from the
/// normalized table, after checking the first `len` entries are real items.
pub fn gather_keys(
    tape: &mut Tape<'_>,
    table: Var,
    row: &[ItemIndex],
    len: usize,
) -> Result<Var, ModelError> {
    let num_items = tape.value(table).rows() - 1;
    if len == 0 {
        return Err(ModelError::EmptyPrefix);
    }
    if len > row.len() {
        return Err(ModelError::Layout(format!("length {len} exceeds row width {}", row.len())));
    }
    for (k, &i) in row.iter().enumerate() {
        if (k < len && i == 0) || i as usize > num_items {
            return Err(ModelError::InvalidItem { index: i, num_items });
        }
    }
    let idx: Vec<usize> = row.iter().map(|&i| i as usize).collect();
    Ok(tape.gather_rows(table, &idx)?)
}

/// Keys for an unpadded prefix, encoding and normalizing only the rows it
/// touches. Row-for-row identical to gathering from [`table_node`].
pub fn prefix_keys(
    tape: &mut Tape<'_>,
    vars: &ModelVars,
    encoder: &dyn ItemEncoder,
    prefix: &[ItemIndex],
) -> Result<Var, ModelError> {
    let num_items = tape.value(vars.embedding).rows() - 1;
    if prefix.is_empty() {
        return Err(ModelError::EmptyPrefix);
    }
    if let Some(&i) = prefix.iter().find(|&&i| i == 0 || i as usize > num_items) {
        return Err(ModelError::InvalidItem { index: i, num_items });
    }
    let idx: Vec<usize> = prefix.iter().map(|&i| i as usize).collect();
    let raw = tape.gather_rows(vars.embedding, &idx)?;
    let encoded = encoder.encode(tape, raw)?;
    Ok(tape.normalize_rows(encoded)?)
}

/// Readout over key rows of which the first `len` are valid; `mask` marks
/// them.
pub fn readout(
    tape: &mut Tape<'_>,
    ctx: &mut GraphContext,
    vars: &ModelVars,
    keys: Var,
    mask: &[bool],
    len: usize,
    hyper: &HyperParams,
) -> Result<Readout, ModelError> {
    if len == 0 {
        return Err(ModelError::EmptyPrefix);
    }
    let queries = queries_node(tape, ctx, vars, keys, len, hyper)?;
    let attention = attention_nodes(tape, ctx, vars, queries, keys, mask, hyper)?;
    let (pooled, head_vectors, session) = mix_nodes(tape, &attention, keys, hyper)?;
    let last = tape.gather_rows(keys, &[len - 1])?;
    Ok(Readout { keys, queries, attention, pooled, head_vectors, session, last })
}

/// Mean cross-entropy over a padded batch.
pub fn batch_loss(
    tape: &mut Tape<'_>,
    ctx: &mut GraphContext,
    vars: &ModelVars,
    batch: &Batch,
    hyper: &HyperParams,
    encoder: &dyn ItemEncoder,
) -> Result<Var, ModelError> {
    if batch.is_empty() {
        return Err(ModelError::EmptyPrefix);
    }
    let table = table_node(tape, vars, encoder)?;
    let num_items = tape.value(table).rows() - 1;
    let candidates = candidate_mask(num_items);
    let mut total: Option<Var> = None;
    for r in 0..batch.len() {
        let target = batch.targets[r];
        if target == 0 || target as usize > num_items {
            return Err(ModelError::InvalidItem { index: target, num_items });
        }
        let keys = gather_keys(tape, table, batch.row(r), batch.lengths[r])?;
        let ro = readout(tape, ctx, vars, keys, batch.row_mask(r), batch.lengths[r], hyper)?;
        let logits = score_node(tape, ctx, vars, ro.session, ro.last, table)?;
        let loss = tape.softmax_cross_entropy(logits, target as usize, hyper.sigma, Some(&candidates))?;
        total = Some(match total {
            None => loss,
            Some(t) => tape.add(t, loss)?,
        });
    }
    let total = total.expect("nonempty batch");
    Ok(tape.scale(total, 1.0 / batch.len() as f64))
}

/// Scoring mask over table rows: everything but padding.
pub fn candidate_mask(num_items: usize) -> Vec<bool> {
    let mut m = vec![true; num_items + 1];
    m[0] = false;
    m
}
