//! Eager versions of each stage. Each call builds a throwaway tape over the
//! same graph builders that training differentiates.

use super::graph::{
    attention_nodes, candidate_mask, gather_keys, mix_nodes, prefix_keys, queries_node, readout,
    score_node, table_node, GraphContext, IdentityEncoder, ItemEncoder, ModelVars,
};
use super::params::layout;
use super::{AttentionTensor, Distribution, HyperParams, ModelError, ModelParams, SessionEmbedding};
use crate::data::{Batch, ItemIndex};
use crate::numerics::{Tape, Tensor};

fn check_params(params: &ModelParams, hyper: &HyperParams) -> Result<(), ModelError> {
    hyper.validate()?;
    let expected = layout(params.num_items(), hyper);
    let matches = expected.len() == params.set().len()
        && expected.iter().zip(params.set().iter()).all(|((n, s), (m, t))| n == m && s.as_slice() == t.shape());
    if !matches {
        return Err(ModelError::Layout(format!("parameters do not fit {hyper:?}")));
    }
    Ok(())
}

/// Unit-norm keys `n x d` for a prefix.
pub fn embed_normalize(
    prefix: &[ItemIndex],
    params: &ModelParams,
    encoder: &dyn ItemEncoder,
) -> Result<Tensor, ModelError> {
    let mut tape = Tape::new();
    let vars = ModelVars::bind(&mut tape, params);
    let keys = prefix_keys(&mut tape, &vars, encoder, prefix)?;
    Ok(tape.value(keys).clone())
}

/// Multi-level queries `l_eff x d` from valid keys (last item in the last row).
pub fn generate_queries(
    keys: &Tensor,
    params: &ModelParams,
    hyper: &HyperParams,
) -> Result<Tensor, ModelError> {
    check_params(params, hyper)?;
    let mut tape = Tape::new();
    let vars = ModelVars::bind(&mut tape, params);
    let k = tape.leaf_ref(keys);
    let q = queries_node(&mut tape, &mut GraphContext::plain(), &vars, k, keys.rows(), hyper)?;
    Ok(tape.value(q).clone())
}

/// Per-head attention of every query over the keys, laid out level-major.
pub fn attention_heads(
    queries: &Tensor,
    keys: &Tensor,
    mask: &[bool],
    params: &ModelParams,
    hyper: &HyperParams,
) -> Result<AttentionTensor, ModelError> {
    check_params(params, hyper)?;
    let mut tape = Tape::new();
    let vars = ModelVars::bind(&mut tape, params);
    let q = tape.leaf_ref(queries);
    let k = tape.leaf_ref(keys);
    let heads = attention_nodes(&mut tape, &mut GraphContext::plain(), &vars, q, k, mask, hyper)?;
    let (items, levels) = (keys.rows(), queries.rows());
    let mut data = vec![0.0; items * levels * hyper.heads];
    for (h, &a) in heads.iter().enumerate() {
        let a = tape.value(a);
        for m in 0..levels {
            for j in 0..items {
                data[j * levels * hyper.heads + m * hyper.heads + h] = a.get(m, j);
            }
        }
    }
    Ok(AttentionTensor { items, levels, heads: hyper.heads, data })
}

/// Pools `alpha` across levels, mixes the keys and normalizes. The local
/// preference is the last key row.
pub fn mix_and_embed(
    alpha: &AttentionTensor,
    keys: &Tensor,
    hyper: &HyperParams,
) -> Result<SessionEmbedding, ModelError> {
    hyper.validate()?;
    if alpha.items != keys.rows() || alpha.heads != hyper.heads || alpha.levels == 0 {
        return Err(ModelError::Layout(format!(
            "attention {}x{}x{} against {} keys and {} heads",
            alpha.items,
            alpha.levels,
            alpha.heads,
            keys.rows(),
            hyper.heads
        )));
    }
    let mut tape = Tape::new();
    let k = tape.leaf_ref(keys);
    let mut heads = Vec::with_capacity(alpha.heads);
    for h in 0..alpha.heads {
        let mut m = Vec::with_capacity(alpha.levels * alpha.items);
        for level in 0..alpha.levels {
            m.extend((0..alpha.items).map(|j| alpha.get(j, level, h)));
        }
        heads.push(tape.leaf(Tensor::matrix(alpha.levels, alpha.items, m)?));
    }
    let (_, parts, session) = mix_nodes(&mut tape, &heads, k, hyper)?;
    Ok(SessionEmbedding {
        session: tape.value(session).data().to_vec(),
        heads: parts.iter().map(|&p| tape.value(p).data().to_vec()).collect(),
        local: keys.row_slice(keys.rows() - 1).to_vec(),
    })
}

/// Next-item distribution `softmax(sigma * z)` over real items.
pub fn score(
    embedding: &SessionEmbedding,
    params: &ModelParams,
    hyper: &HyperParams,
    encoder: &dyn ItemEncoder,
) -> Result<Distribution, ModelError> {
    check_params(params, hyper)?;
    let mut tape = Tape::new();
    let vars = ModelVars::bind(&mut tape, params);
    let table = table_node(&mut tape, &vars, encoder)?;
    let s = tape.leaf(Tensor::row(embedding.session.clone())?);
    let last = tape.leaf(Tensor::row(embedding.local.clone())?);
    let z = score_node(&mut tape, &mut GraphContext::plain(), &vars, s, last, table)?;
    distribution(&tape, z, params.num_items(), hyper)
}

fn distribution(
    tape: &Tape<'_>,
    logits: crate::numerics::Var,
    num_items: usize,
    hyper: &HyperParams,
) -> Result<Distribution, ModelError> {
    let mut probs = tape.probabilities(logits, hyper.sigma, Some(&candidate_mask(num_items)))?;
    probs.remove(0);
    Ok(Distribution { probs })
}

/// Session embedding of a prefix without scoring (only the prefix rows are
/// normalized).
pub fn session_embedding(
    prefix: &[ItemIndex],
    params: &ModelParams,
    hyper: &HyperParams,
) -> Result<SessionEmbedding, ModelError> {
    check_params(params, hyper)?;
    let mut tape = Tape::new();
    let vars = ModelVars::bind(&mut tape, params);
    let keys = prefix_keys(&mut tape, &vars, &IdentityEncoder, prefix)?;
    let mask = vec![true; prefix.len()];
    let ro = readout(&mut tape, &mut GraphContext::plain(), &vars, keys, &mask, prefix.len(), hyper)?;
    Ok(SessionEmbedding {
        session: tape.value(ro.session).data().to_vec(),
        heads: ro.head_vectors.iter().map(|&p| tape.value(p).data().to_vec()).collect(),
        local: tape.value(ro.last).data().to_vec(),
    })
}

/// End-to-end prediction for one prefix with the identity encoder.
pub fn forward(
    prefix: &[ItemIndex],
    params: &ModelParams,
    hyper: &HyperParams,
) -> Result<Distribution, ModelError> {
    forward_with(prefix, params, hyper, &IdentityEncoder)
}

pub fn forward_with(
    prefix: &[ItemIndex],
    params: &ModelParams,
    hyper: &HyperParams,
    encoder: &dyn ItemEncoder,
) -> Result<Distribution, ModelError> {
    let mut out = run_rows(params, hyper, encoder, &[(prefix, &vec![true; prefix.len()], prefix.len())])?;
    Ok(out.pop().expect("one row"))
}

/// Predictions for every row of a padded batch. Row `r` equals
/// `forward(batch prefix r)` exactly.
pub fn forward_batch(
    batch: &Batch,
    params: &ModelParams,
    hyper: &HyperParams,
) -> Result<Vec<Distribution>, ModelError> {
    let rows: Vec<(&[ItemIndex], &[bool], usize)> =
        (0..batch.len()).map(|r| (batch.row(r), batch.row_mask(r), batch.lengths[r])).collect();
    run_rows(params, hyper, &IdentityEncoder, &rows)
}

fn run_rows<M: AsRef<[bool]>>(
    params: &ModelParams,
    hyper: &HyperParams,
    encoder: &dyn ItemEncoder,
    rows: &[(&[ItemIndex], M, usize)],
) -> Result<Vec<Distribution>, ModelError> {
    check_params(params, hyper)?;
    let mut tape = Tape::new();
    let vars = ModelVars::bind(&mut tape, params);
    let table = table_node(&mut tape, &vars, encoder)?;
    let mut ctx = GraphContext::plain();
    let mut out = Vec::with_capacity(rows.len());
    for (row, mask, len) in rows {
        let mark = tape.len();
        let keys = gather_keys(&mut tape, table, row, *len)?;
        let ro = readout(&mut tape, &mut ctx, &vars, keys, mask.as_ref(), *len, hyper)?;
        let z = score_node(&mut tape, &mut ctx, &vars, ro.session, ro.last, table)?;
        out.push(distribution(&tape, z, params.num_items(), hyper)?);
        tape.truncate(mark);
    }
    Ok(out)
}
