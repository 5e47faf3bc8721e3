//! Dense `f64` tensors, a reverse-mode differentiation tape, and Adam.

mod adam;
mod backward;
mod graph;
mod params;
mod tensor;

pub use adam::{adam_step, clip_grad_norm, AdamState};
pub use backward::Gradients;
pub use graph::{Graph, Neighbourhoods, Var};
pub use params::{init_uniform, ParamId, ParamStore};
pub use tensor::Tensor;

/// Cosine similarity of two equal-length, nonzero vectors.
pub fn cosine(u: &[f64], v: &[f64]) -> crate::Result<f64> {
    if u.len() != v.len() {
        return Err(crate::Error::Dimension(format!("cosine of lengths {} and {}", u.len(), v.len())));
    }
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(crate::Error::Contract("cosine of a zero vector".into()));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}
