//! Bias-corrected Adam over a [`ParamSet`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid Adam settings {self:?}")))
        }
    }
}

/// First and second moments, one flat buffer per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub t: u64,
    pub names: Vec<String>,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new<P: ParamSet<T>>(params: &P) -> Self {
        let views = params.views();
        Self {
            t: 0,
            names: views.iter().map(|t| t.name.clone()).collect(),
            m: views.iter().map(|t| vec![T::zero(); t.data.len()]).collect(),
            v: views.iter().map(|t| vec![T::zero(); t.data.len()]).collect(),
        }
    }
}

/// One Adam update. Gradients are checked before anything is modified, so a
/// non-finite gradient leaves parameters and moments untouched.
pub fn adam_step<T: Scalar, P: ParamSet<T>>(
    params: &mut P,
    grads: &P,
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
) -> Result<()> {
    let gviews = grads.views();
    if gviews.len() != state.m.len() {
        return Err(Error::shape("adam_step", format!("{} gradients for {} moments", gviews.len(), state.m.len())));
    }
    for (g, m) in gviews.iter().zip(&state.m) {
        if g.data.len() != m.len() {
            return Err(Error::shape("adam_step", format!("{}: {} values for {}", g.name, g.data.len(), m.len())));
        }
        if g.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient(g.name.clone()));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let b1 = T::lit(cfg.beta1);
    let b2 = T::lit(cfg.beta2);
    let one = T::one();
    let bc1 = T::lit(1.0 - cfg.beta1.powi(t));
    let bc2 = T::lit(1.0 - cfg.beta2.powi(t));
    let lr = T::lit(cfg.learning_rate);
    let eps = T::lit(cfg.epsilon);
    for ((p, g), (m, v)) in params
        .views_mut()
        .into_iter()
        .zip(&gviews)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        for (((theta, &grad), mi), vi) in p.data.iter_mut().zip(g.data).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = b1 * *mi + (one - b1) * grad;
            *vi = b2 * *vi + (one - b2) * grad * grad;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *theta -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Linear, TensorView, TensorViewMut};

    struct One(Linear<f64>);

    impl ParamSet<f64> for One {
        fn tensors<'a>(&'a self, prefix: &str, out: &mut Vec<TensorView<'a, f64>>) {
            self.0.push(prefix, out);
        }
        fn tensors_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<TensorViewMut<'a, f64>>) {
            self.0.push_mut(prefix, out);
        }
    }

    #[test]
    fn first_step_closed_form() {
        let mut p = One(Linear::zeros(1, 1));
        let mut g = One(Linear::zeros(1, 1));
        g.0.w[[0, 0]] = 1.0;
        let mut s = AdamState::new(&p);
        adam_step(&mut p, &g, &mut s, &AdamConfig::default()).unwrap();
        let expect = -1e-4 / (1.0 + 1e-8);
        assert!((p.0.w[[0, 0]] - expect).abs() < 1e-18);
        assert!((p.0.w[[0, 0]] + 1e-4).abs() < 1e-9);
        // zero gradient on the bias leaves it unchanged
        assert_eq!(p.0.b[0], 0.0);
        assert_eq!(s.t, 1);
    }

    #[test]
    fn non_finite_gradient_names_tensor_and_changes_nothing() {
        let mut p = One(Linear::zeros(2, 2));
        let mut g = One(Linear::zeros(2, 2));
        g.0.w[[0, 0]] = 1.0;
        g.0.b[1] = f64::NAN;
        let mut s = AdamState::new(&p);
        match adam_step(&mut p, &g, &mut s, &AdamConfig::default()) {
            Err(Error::NonFiniteGradient(name)) => assert_eq!(name, "b"),
            other => panic!("expected NonFiniteGradient, got {other:?}"),
        }
        assert_eq!(s.t, 0);
        assert_eq!(p.0.w[[0, 0]], 0.0);
    }

    #[test]
    fn trajectories_are_deterministic() {
        let run = || {
            let mut p = One(Linear::zeros(2, 3));
            let mut s = AdamState::new(&p);
            for step in 0..20 {
                let mut g = One(Linear::zeros(2, 3));
                g.0.w.iter_mut().enumerate().for_each(|(i, v)| *v = ((step * 7 + i) as f64).sin());
                adam_step(&mut p, &g, &mut s, &AdamConfig::default()).unwrap();
            }
            p.0
        };
        assert_eq!(run(), run());
    }
}
