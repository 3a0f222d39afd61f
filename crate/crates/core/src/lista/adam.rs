use ndarray::{Array2, Zip};

use super::{Gradients, ListaParams};

/// Smallest threshold the optimizer may leave behind.
pub const MIN_THRESHOLD: f64 = 1e-12;

/// Per-layer learning multipliers `c(W^k)`, `c(λ^k)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Multipliers {
    pub weights: Vec<f64>,
    pub thresholds: Vec<f64>,
}

impl Multipliers {
    pub fn ones(depth: usize) -> Self {
        Multipliers {
            weights: vec![1.0; depth],
            thresholds: vec![1.0; depth],
        }
    }

    pub fn push_layer(&mut self) {
        self.weights.push(1.0);
        self.thresholds.push(1.0);
    }

    pub fn decay(&mut self, gamma: f64) {
        self.weights.iter_mut().for_each(|c| *c *= gamma);
        self.thresholds.iter_mut().for_each(|c| *c *= gamma);
    }
}

/// Adam moments for a full parameter set.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub first_moment_w: Vec<Array2<f64>>,
    pub second_moment_w: Vec<Array2<f64>>,
    pub first_moment_l: Vec<f64>,
    pub second_moment_l: Vec<f64>,
    pub step_count: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(params: &ListaParams) -> Self {
        let zeros: Vec<Array2<f64>> = params
            .weights
            .iter()
            .map(|w| Array2::zeros(w.raw_dim()))
            .collect();
        AdamState {
            first_moment_w: zeros.clone(),
            second_moment_w: zeros,
            first_moment_l: vec![0.0; params.depth()],
            second_moment_l: vec![0.0; params.depth()],
            step_count: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// One bias-corrected Adam step on the layers covered by `grads`. Weights of
/// layer `k` move with rate `rate · weight_scale · c(W^k)`, thresholds with
/// `rate · c(λ^k)`.
pub fn adam_update(
    state: &mut AdamState,
    params: &mut ListaParams,
    grads: &Gradients,
    rate: f64,
    weight_scale: f64,
    multipliers: &Multipliers,
) {
    state.step_count += 1;
    let t = state.step_count as i32;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.epsilon);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);

    for (i, k) in grads.layers().enumerate() {
        let g = &grads.weights[i];
        let lr = rate * weight_scale * multipliers.weights[k];
        Zip::from(&mut params.weights[k])
            .and(&mut state.first_moment_w[k])
            .and(&mut state.second_moment_w[k])
            .and(g)
            .for_each(|p, m, v, &gi| {
                *m = b1 * *m + (1.0 - b1) * gi;
                *v = b2 * *v + (1.0 - b2) * gi * gi;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            });

        let gl = grads.thresholds[i];
        let m = &mut state.first_moment_l[k];
        let v = &mut state.second_moment_l[k];
        *m = b1 * *m + (1.0 - b1) * gl;
        *v = b2 * *v + (1.0 - b2) * gl * gl;
        let lr = rate * multipliers.thresholds[k];
        let lam = &mut params.thresholds[k];
        *lam = (*lam - lr * (*m / c1) / ((*v / c2).sqrt() + eps)).max(MIN_THRESHOLD);
    }
}
