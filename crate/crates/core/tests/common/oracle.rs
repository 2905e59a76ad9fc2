//! Scalar-loop reference implementation of the readout and scoring, written
//! with plain nested vectors and explicit index loops only.

use attenmix::model::{HyperParams, ModelParams, Variant};
use attenmix::numerics::Tensor;

pub type Mat = Vec<Vec<f64>>;

pub fn to_mat(t: &Tensor) -> Mat {
    let mut out = Vec::new();
    for r in 0..t.rows() {
        let mut row = Vec::new();
        for c in 0..t.cols() {
            row.push(t.get(r, c));
        }
        out.push(row);
    }
    out
}

pub fn unit(v: &[f64]) -> Vec<f64> {
    let mut ss = 0.0;
    for x in v {
        ss += x * x;
    }
    let n = ss.sqrt();
    let mut out = Vec::new();
    for x in v {
        out.push(x / n);
    }
    out
}

/// `W x` for `W` stored rows-of-outputs.
fn apply(w: &Mat, x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; w.len()];
    for r in 0..w.len() {
        for c in 0..x.len() {
            out[r] += w[r][c] * x[c];
        }
    }
    out
}

/// `x W` for `W` stored input-major.
fn right(x: &[f64], w: &Mat) -> Vec<f64> {
    let mut out = vec![0.0; w[0].len()];
    for k in 0..x.len() {
        for c in 0..w[0].len() {
            out[c] += x[k] * w[k][c];
        }
    }
    out
}

pub fn keys(params: &ModelParams, prefix: &[u32]) -> Mat {
    let e = to_mat(params.embedding());
    let mut out = Vec::new();
    for &v in prefix {
        out.push(unit(&e[v as usize]));
    }
    out
}

pub fn queries(params: &ModelParams, hyper: &HyperParams, k: &Mat) -> Mat {
    let n = k.len();
    let d = k[0].len();
    let count = if hyper.variant == Variant::M { 1 } else { hyper.levels };
    let levels = if count < n { count } else { n };
    let mut out = Vec::new();
    for l in 1..=levels {
        let w = to_mat(params.query(l));
        let x = match hyper.variant {
            Variant::LI => {
                let mut x = Vec::new();
                for j in n - l..n {
                    for c in 0..d {
                        x.push(k[j][c]);
                    }
                }
                x
            }
            Variant::IP => {
                let mut x = vec![0.0; d];
                for j in 0..n {
                    for c in 0..d {
                        x[c] += k[j][c];
                    }
                }
                x
            }
            _ => {
                let mut x = vec![0.0; d];
                for j in n - l..n {
                    for c in 0..d {
                        x[c] += k[j][c];
                    }
                }
                x
            }
        };
        out.push(apply(&w, &x));
    }
    out
}

/// `alpha[j][m * H + h]`.
pub fn attention(params: &ModelParams, hyper: &HyperParams, q: &Mat, k: &Mat) -> Mat {
    let n = k.len();
    let d = k[0].len() as f64;
    let heads = hyper.heads;
    let mut alpha = vec![vec![0.0; q.len() * heads]; n];
    for h in 0..heads {
        let wq = to_mat(params.head_query(h + 1));
        let wk = to_mat(params.head_key(h + 1));
        for m in 0..q.len() {
            let qp = right(&q[m], &wq);
            let mut logits = Vec::new();
            for j in 0..n {
                let kp = right(&k[j], &wk);
                let mut s = 0.0;
                for c in 0..kp.len() {
                    s += qp[c] * kp[c];
                }
                logits.push(s / d.sqrt());
            }
            let mut mx = f64::NEG_INFINITY;
            for &z in &logits {
                if z > mx {
                    mx = z;
                }
            }
            let mut total = 0.0;
            for &z in &logits {
                total += (z - mx).exp();
            }
            for j in 0..n {
                alpha[j][m * heads + h] = (logits[j] - mx).exp() / total;
            }
        }
    }
    alpha
}

/// Returns `(s~, per-head s^h)`.
pub fn mix(hyper: &HyperParams, alpha: &Mat, k: &Mat) -> (Vec<f64>, Mat) {
    let n = k.len();
    let d = k[0].len();
    let heads = hyper.heads;
    let levels = alpha[0].len() / heads;
    let mut parts = Vec::new();
    let mut joined = Vec::new();
    for h in 0..heads {
        let mut s = vec![0.0; d];
        for j in 0..n {
            let pooled = if hyper.variant == Variant::LP {
                let mut mx = 0.0;
                for m in 0..levels {
                    if alpha[j][m * heads + h] > mx {
                        mx = alpha[j][m * heads + h];
                    }
                }
                mx
            } else {
                let mut acc = 0.0;
                for m in 0..levels {
                    acc += alpha[j][m * heads + h].powf(hyper.p);
                }
                acc.powf(1.0 / hyper.p)
            };
            for c in 0..d {
                s[c] += pooled * k[j][c];
            }
        }
        joined.extend(s.iter().copied());
        parts.push(s);
    }
    (unit(&joined), parts)
}

pub fn score(params: &ModelParams, hyper: &HyperParams, session: &[f64], local: &[f64]) -> Vec<f64> {
    let e = to_mat(params.embedding());
    let wm = to_mat(params.merge());
    let mut z = session.to_vec();
    z.extend(local.iter().copied());
    let u = apply(&wm, &z);
    let mut logits = Vec::new();
    for j in 1..e.len() {
        let hj = unit(&e[j]);
        let mut s = 0.0;
        for c in 0..u.len() {
            s += u[c] * hj[c];
        }
        logits.push(hyper.sigma * s);
    }
    let mut mx = f64::NEG_INFINITY;
    for &z in &logits {
        if z > mx {
            mx = z;
        }
    }
    let mut total = 0.0;
    for &z in &logits {
        total += (z - mx).exp();
    }
    logits.iter().map(|z| (z - mx).exp() / total).collect()
}

pub fn forward(params: &ModelParams, hyper: &HyperParams, prefix: &[u32]) -> Vec<f64> {
    let k = keys(params, prefix);
    let q = queries(params, hyper, &k);
    let a = attention(params, hyper, &q, &k);
    let (s, _) = mix(hyper, &a, &k);
    score(params, hyper, &s, &k[k.len() - 1])
}
