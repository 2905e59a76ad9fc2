//! Scalar kernels shared by the eager API and the tape.

use super::{NumericsError, Tensor};

/// Norms below this are treated as an initialization bug, not a valid state.
pub const NORM_FLOOR: f64 = 1e-12;

/// Euclidean norm with a fixed left-to-right accumulation.
pub fn norm2(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |acc, &x| acc + x * x).sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |acc, (&x, &y)| acc + x * y)
}

pub(crate) fn normalize_slice(v: &[f64], out: &mut [f64]) -> Result<f64, NumericsError> {
    let n = norm2(v);
    if !(n >= NORM_FLOOR) {
        return Err(NumericsError::DegenerateNorm { norm: n });
    }
    for (o, &x) in out.iter_mut().zip(v) {
        *o = x / n;
    }
    Ok(n)
}

/// Returns `v / ||v||_2`.
pub fn l2_normalize(v: &Tensor) -> Result<Tensor, NumericsError> {
    if v.rank() != 1 {
        return Err(NumericsError::InvalidShape(v.shape().to_vec()));
    }
    let mut out = vec![0.0; v.len()];
    normalize_slice(v.data(), &mut out)?;
    Ok(Tensor::from_parts(v.shape().to_vec(), out))
}

/// Scaled softmax over a slice. Entries equal to `-inf` are masked and map to
/// exactly zero; at least one entry must be finite.
pub fn softmax_slice(x: &[f64], scale: f64, out: &mut [f64]) -> Result<(), NumericsError> {
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(NumericsError::NonFinite {
            context: format!("softmax scale {scale}"),
        });
    }
    let mut max = f64::NEG_INFINITY;
    for &v in x {
        if v.is_nan() || v == f64::INFINITY {
            return Err(NumericsError::NonFinite {
                context: format!("softmax input {v}"),
            });
        }
        if v > max {
            max = v;
        }
    }
    if max == f64::NEG_INFINITY {
        return Err(NumericsError::NonFinite {
            context: "softmax over fully masked input".into(),
        });
    }
    let mut total = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = if v == f64::NEG_INFINITY {
            0.0
        } else {
            (scale * (v - max)).exp()
        };
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
    Ok(())
}

/// `softmax(scale * x)` of a rank-1 tensor.
pub fn softmax(x: &Tensor, scale: f64) -> Result<Tensor, NumericsError> {
    let mut out = vec![0.0; x.len()];
    softmax_slice(x.data(), scale, &mut out)?;
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

/// Softmax with an explicit validity mask; masked entries receive exactly zero.
pub fn masked_softmax(x: &[f64], mask: &[bool], scale: f64) -> Result<Vec<f64>, NumericsError> {
    let masked: Vec<f64> = x
        .iter()
        .zip(mask)
        .map(|(&v, &keep)| if keep { v } else { f64::NEG_INFINITY })
        .collect();
    let mut out = vec![0.0; x.len()];
    softmax_slice(&masked, scale, &mut out)?;
    Ok(out)
}

/// Unchecked Lp pooling. A single value is returned unchanged so that
/// single-level pooling is an exact identity.
pub(crate) fn lp_pool_slice(values: &[f64], p: f64) -> f64 {
    if values.len() == 1 {
        return values[0];
    }
    if p == 1.0 {
        return values.iter().fold(0.0, |acc, &v| acc + v);
    }
    // factor out the max so large exponents do not underflow
    let max = values.iter().fold(0.0_f64, |m, &v| m.max(v));
    if max == 0.0 {
        return 0.0;
    }
    let total = values.iter().fold(0.0, |acc, &v| acc + (v / max).powf(p));
    max * total.powf(1.0 / p)
}

/// Partial derivative of the pooled value with respect to one input.
pub(crate) fn lp_pool_partial(value: f64, pooled: f64, p: f64, count: usize) -> f64 {
    if count == 1 || p == 1.0 {
        return 1.0;
    }
    if pooled == 0.0 {
        return 0.0;
    }
    (value / pooled).powf(p - 1.0)
}

/// `(sum v_i^p)^(1/p)` over nonnegative values.
pub fn lp_pool(values: &Tensor, p: f64) -> Result<f64, NumericsError> {
    if !(p >= 1.0) {
        return Err(NumericsError::InvalidP(p));
    }
    if let Some(&bad) = values.data().iter().find(|&&v| v < 0.0) {
        return Err(NumericsError::NegativePoolInput(bad));
    }
    Ok(lp_pool_slice(values.data(), p))
}
