//! Dense tensors and a minimal reverse-mode autodiff engine.

mod checkpoint;
mod dense;
mod gradcheck;
mod kernels;
mod tape;

pub use checkpoint::{Checkpoint, MAGIC as CHECKPOINT_MAGIC, VERSION as CHECKPOINT_VERSION};
pub use dense::Tensor;
pub use gradcheck::{grad_check, grad_check_sampled, relative_error, GradCheckReport};
pub use tape::{Gradients, Padding, Tape, Var, BCE_EPS};

/// Attention probabilities `[heads, nq, nk]` for row-major `q: [nq, d]`, `k: [nk, d]`.
pub fn attention_probs(q: &Tensor<f64>, k: &Tensor<f64>, heads: usize) -> Tensor<f64> {
    let (nq, d) = (q.shape()[0], q.shape()[1]);
    let nk = k.shape()[0];
    let v = Tensor::zeros([nk, d]);
    let (_, probs) = kernels::attention(q.data(), k.data(), v.data(), nq, nk, d, heads);
    Tensor::new([heads, nq, nk], probs).expect("probability shape")
}
