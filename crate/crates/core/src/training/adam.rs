//! Adam over the matcher's parameter registry.

use crate::autodiff::Tensor;
use crate::matcher::MatcherWeights;

#[derive(Clone, Copy, Debug)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Per-step exponential learning-rate decay applied after `decay_after`
    /// steps.
    pub decay_factor: f64,
    pub decay_after: u64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            decay_factor: 0.999992,
            decay_after: 100_000,
        }
    }
}

/// First/second moment estimates, laid out parallel to the parameter list.
#[derive(Clone, Debug)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamState {
    pub fn for_weights(weights: &MatcherWeights) -> Self {
        let m = weights
            .params()
            .iter()
            .map(|p| vec![0.0; p.tensor.numel()])
            .collect::<Vec<_>>();
        AdamState {
            v: m.clone(),
            m,
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// One Adam update. `grads` is parallel to the parameter list; `None` means
/// a zero gradient for that tensor.
pub fn adam_step(
    weights: &mut MatcherWeights,
    grads: &[Option<Tensor>],
    state: &mut AdamState,
    hyper: &AdamHyper,
) {
    assert_eq!(grads.len(), weights.params().len(), "gradient layout mismatch");
    state.t += 1;
    let t = state.t;
    let decay_steps = t.saturating_sub(hyper.decay_after);
    let lr_t = hyper.lr * hyper.decay_factor.powi(decay_steps as i32);
    let bc1 = 1.0 - hyper.beta1.powi(t as i32);
    let bc2 = 1.0 - hyper.beta2.powi(t as i32);
    for (i, param) in weights.params_mut().iter_mut().enumerate() {
        let data = param.tensor.data_mut();
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for j in 0..data.len() {
            let g = grads[i].as_ref().map_or(0.0, |t| t.data()[j]);
            m[j] = hyper.beta1 * m[j] + (1.0 - hyper.beta1) * g;
            v[j] = hyper.beta2 * v[j] + (1.0 - hyper.beta2) * g * g;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            data[j] -= lr_t * m_hat / (v_hat.sqrt() + hyper.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matcher::MatcherConfig;

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let cfg = MatcherConfig::micro();
        let mut w = MatcherWeights::init(&cfg, 3);
        let before: Vec<Vec<f64>> = w.params().iter().map(|p| p.tensor.data().to_vec()).collect();
        let grads: Vec<Option<Tensor>> = vec![None; w.params().len()];
        let mut state = AdamState::for_weights(&w);
        adam_step(&mut w, &grads, &mut state, &AdamHyper::default());
        for (p, b) in w.params().iter().zip(before.iter()) {
            assert_eq!(p.tensor.data(), b.as_slice());
        }
    }

    #[test]
    fn first_step_magnitude_is_learning_rate() {
        let cfg = MatcherConfig::micro();
        let mut w = MatcherWeights::init(&cfg, 3);
        let before = w.params()[0].tensor.data()[0];
        let mut grads: Vec<Option<Tensor>> = vec![None; w.params().len()];
        let mut g = Tensor::zeros(w.params()[0].tensor.shape().to_vec());
        g.data_mut()[0] = 1234.5;
        grads[0] = Some(g);
        let mut state = AdamState::for_weights(&w);
        let hyper = AdamHyper {
            lr: 1e-3,
            ..AdamHyper::default()
        };
        adam_step(&mut w, &grads, &mut state, &hyper);
        let delta = (w.params()[0].tensor.data()[0] - before).abs();
        assert!((delta - 1e-3).abs() < 1e-6, "step {delta}");
    }

    #[test]
    fn quadratic_converges() {
        // Minimize (x - 3)² over a single fake parameter.
        let cfg = MatcherConfig::micro();
        let mut w = MatcherWeights::init(&cfg, 3);
        let mut state = AdamState::for_weights(&w);
        let hyper = AdamHyper {
            lr: 0.01,
            ..AdamHyper::default()
        };
        for _ in 0..2000 {
            let x = w.params()[0].tensor.data()[0];
            let mut grads: Vec<Option<Tensor>> = vec![None; w.params().len()];
            let mut g = Tensor::zeros(w.params()[0].tensor.shape().to_vec());
            g.data_mut()[0] = 2.0 * (x - 3.0);
            grads[0] = Some(g);
            adam_step(&mut w, &grads, &mut state, &hyper);
        }
        let x = w.params()[0].tensor.data()[0];
        assert!((x - 3.0).abs() < 1e-3, "converged to {x}");
    }
}
