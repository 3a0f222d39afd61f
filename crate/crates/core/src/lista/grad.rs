//! Reverse-mode gradients of the batch loss through the unrolled layers.
//!
//! With `r = b − A x`, `u = x + Wᵀ r` and `x' = S_λ(u)`, and `g' = ∂L/∂x'`:
//!
//! ```text
//! ∂L/∂u = g' ⊙ 1{|u| > λ}
//! ∂L/∂λ = −Σ sgn(u) ⊙ ∂L/∂u
//! ∂L/∂W = r (∂L/∂u)ᵀ
//! ∂L/∂x = ∂L/∂u − Aᵀ W ∂L/∂u
//! ```
//!
//! The derivative of the shrinkage at `|u| = λ` is taken to be 0.

use ndarray::{Array2, Zip};

use super::{layer_batch, Batch, ListaParams};
use crate::measurement::MeasurementMatrix;
use crate::Result;

/// Gradients for layers `first..K`; earlier layers are treated as frozen.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub first: usize,
    pub weights: Vec<Array2<f64>>,
    pub thresholds: Vec<f64>,
    /// Loss at the parameters the gradient was taken at.
    pub loss: f64,
}

impl Gradients {
    pub fn layers(&self) -> std::ops::Range<usize> {
        self.first..self.first + self.weights.len()
    }
}

/// Exact gradient of [`super::loss`] with respect to every layer.
pub fn backward(params: &ListaParams, a: &MeasurementMatrix, batch: &Batch) -> Result<Gradients> {
    backward_from(params, a, batch, 0)
}

/// Gradient with respect to layers `first..K` only. Backpropagation stops
/// at layer `first`, so training just the newest layer is cheap.
pub fn backward_from(
    params: &ListaParams,
    a: &MeasurementMatrix,
    batch: &Batch,
    first: usize,
) -> Result<Gradients> {
    params.check_against(a)?;
    batch.check(a)?;
    let depth = params.depth();
    let first = first.min(depth);
    let bsz = batch.len() as f64;

    // forward tape; layers before `first` need no residuals or pre-activations
    let mut x = Array2::zeros((a.cols(), batch.len()));
    let mut tape = Vec::with_capacity(depth - first);
    for (k, (w, &lam)) in params.weights.iter().zip(&params.thresholds).enumerate() {
        let (r, u, next) = layer_batch(a, w, lam, &batch.b, &x);
        if k >= first {
            tape.push((r, u));
        }
        x = next;
    }

    let mut g = x - &batch.x_star;
    let loss = g.iter().map(|v| v * v).sum::<f64>() / bsz;
    g *= 2.0 / bsz;

    let mut grad_w = Vec::with_capacity(depth - first);
    let mut grad_l = Vec::with_capacity(depth - first);
    for (k, (r, u)) in (first..depth).zip(tape).rev() {
        let lam = params.thresholds[k];
        let mut dl = 0.0;
        Zip::from(&mut g).and(&u).for_each(|gi, &ui| {
            if ui > lam {
                dl -= *gi;
            } else if ui < -lam {
                dl += *gi;
            } else {
                *gi = 0.0;
            }
        });
        // g now holds ∂L/∂u
        grad_w.push(r.dot(&g.t()));
        grad_l.push(dl);
        if k > first {
            let wg = params.weights[k].dot(&g);
            g -= &a.entries().t().dot(&wg);
        }
    }
    grad_w.reverse();
    grad_l.reverse();
    Ok(Gradients {
        first,
        weights: grad_w,
        thresholds: grad_l,
        loss,
    })
}
