//! Pretraining objectives.

use crate::error::{dim_err, Result};
use crate::math::{Graph, Var};

/// Symmetric InfoNCE over cosine similarities: row-wise (grid to road) and
/// column-wise (road to grid) cross-entropy against the diagonal, averaged.
/// `log_delta` is the log-temperature, a scalar.
pub fn contrastive_loss(g: &mut Graph, vg: Var, vr: Var, log_delta: Var) -> Result<Var> {
    let (sg, sr) = (g.shape(vg).to_vec(), g.shape(vr).to_vec());
    if sg.len() != 2 || sg != sr {
        return Err(dim_err(format!("contrastive loss over {sg:?} and {sr:?}")));
    }
    let n = sg[0];
    let a = g.l2_normalize_rows(vg)?;
    let b = g.l2_normalize_rows(vr)?;
    let s = g.matmul_t(a, b)?;
    let neg = g.scale(log_delta, -1.0);
    let inv = g.exp(neg);
    let logits = g.scale_by(s, inv)?;
    let targets: Vec<usize> = (0..n).collect();
    let lg = g.cross_entropy(logits, &targets)?;
    let lt = g.transpose(logits)?;
    let lr = g.cross_entropy(lt, &targets)?;
    let total = g.add(lg, lr)?;
    Ok(g.scale(total, 0.5))
}

/// Per-row weights for a masked reconstruction loss: each trajectory's
/// masked positions are averaged (or divided by `seq_len` of that row when
/// given), then trajectories with at least one mask are averaged.
pub fn mlm_weights(rows: &[usize], seq_len: Option<&[usize]>) -> Vec<f64> {
    let mut count = std::collections::BTreeMap::new();
    for &r in rows {
        *count.entry(r).or_insert(0usize) += 1;
    }
    let n_rows = count.len() as f64;
    rows.iter()
        .map(|r| {
            let denom = match seq_len {
                Some(len) => len[*r] as f64,
                None => count[r] as f64,
            };
            1.0 / (denom * n_rows)
        })
        .collect()
}

/// Cross-entropy of `[M, K]` logits at masked positions; 0 with no masks.
pub fn mlm_loss(g: &mut Graph, logits: Option<Var>, targets: &[usize], weights: &[f64]) -> Result<Var> {
    match logits {
        Some(l) if !targets.is_empty() => g.cross_entropy_weighted(l, targets, weights),
        _ => Ok(g.constant(crate::math::Tensor::scalar(0.0))),
    }
}
