//! Adam optimizer with bias correction, operating on a named parameter group.

use super::array::{NdArray, Scalar};
use super::graph::{Gradients, Graph};
use crate::error::{Error, Result};
use std::collections::HashMap;

/// First/second moment accumulators plus the shared step counter.
pub struct AdamState<F: Scalar> {
    first: HashMap<String, NdArray<F>>,
    second: HashMap<String, NdArray<F>>,
    step: u64,
}

impl<F: Scalar> AdamState<F> {
    pub fn new() -> Self {
        AdamState {
            first: HashMap::new(),
            second: HashMap::new(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

impl<F: Scalar> Default for AdamState<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Optimizer over a fixed subset of a graph's parameters.
pub struct Adam<F: Scalar> {
    names: Vec<String>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    state: AdamState<F>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(names: Vec<String>, beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            names,
            beta1,
            beta2,
            eps,
            state: AdamState::new(),
        }
    }

    pub fn state(&self) -> &AdamState<F> {
        &self.state
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// One Adam update on the group. Gradients must be finite; the offending
    /// parameter is named otherwise.
    pub fn step(&mut self, graph: &mut Graph<F>, grads: &Gradients<F>, lr: f64) -> Result<()> {
        self.state.step += 1;
        let t = self.state.step;
        let b1 = F::from_f64(self.beta1);
        let b2 = F::from_f64(self.beta2);
        let one = F::one();
        let corr1 = F::from_f64(1.0 - self.beta1.powi(t as i32));
        let corr2 = F::from_f64(1.0 - self.beta2.powi(t as i32));
        let lr_f = F::from_f64(lr);
        let eps = F::from_f64(self.eps);

        for name in &self.names {
            let grad = grads
                .get(name)
                .ok_or_else(|| Error::Eval(format!("no gradient for parameter `{}`", name)))?;
            if !grad.all_finite() {
                return Err(Error::NonFinite {
                    context: format!("gradient of `{}`", name),
                });
            }
            let param = graph.param_mut(name)?;
            if param.shape() != grad.shape() {
                return Err(Error::shape(
                    format!("adam `{}`", name),
                    format!("param {:?} vs grad {:?}", param.shape(), grad.shape()),
                ));
            }
            let m = self
                .state
                .first
                .entry(name.clone())
                .or_insert_with(|| NdArray::zeros(grad.shape().to_vec()));
            let v = self
                .state
                .second
                .entry(name.clone())
                .or_insert_with(|| NdArray::zeros(grad.shape().to_vec()));

            for ((p, g), (m, v)) in param
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
            {
                *m = b1 * *m + (one - b1) * *g;
                *v = b2 * *v + (one - b2) * *g * *g;
                let m_hat = *m / corr1;
                let v_hat = *v / corr2;
                *p = *p - lr_f * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::graph::GraphBuilder;

    fn one_param_graph(v: f64) -> Graph<f64> {
        let mut gb = GraphBuilder::new();
        let x = gb.param("x", NdArray::full(vec![2], v)).unwrap();
        let m = gb.mean(x).unwrap();
        gb.output("f", m);
        gb.build()
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut g = one_param_graph(1.5);
        let mut opt = Adam::new(vec!["x".into()], 0.9, 0.999, 1e-8);
        let mut grads = Gradients::new();
        grads.insert("x".into(), NdArray::zeros(vec![2]));
        opt.step(&mut g, &grads, 1e-2).unwrap();
        assert_eq!(g.param("x").unwrap().data(), &[1.5, 1.5]);
    }

    #[test]
    fn zero_lr_leaves_params_unchanged() {
        let mut g = one_param_graph(1.5);
        let mut opt = Adam::new(vec!["x".into()], 0.9, 0.999, 1e-8);
        let mut grads = Gradients::new();
        grads.insert("x".into(), NdArray::full(vec![2], 0.7));
        opt.step(&mut g, &grads, 0.0).unwrap();
        assert_eq!(g.param("x").unwrap().data(), &[1.5, 1.5]);
    }

    #[test]
    fn first_step_magnitude_is_close_to_lr() {
        // With bias correction, the first update is lr * g / (|g| + eps') ~ lr.
        let mut g = one_param_graph(0.0);
        let mut opt = Adam::new(vec!["x".into()], 0.9, 0.999, 1e-8);
        let mut grads = Gradients::new();
        grads.insert("x".into(), NdArray::full(vec![2], 0.3));
        let lr = 1e-3;
        opt.step(&mut g, &grads, lr).unwrap();
        for &p in g.param("x").unwrap().data() {
            assert!((p + lr).abs() < 1e-6, "update {} should be ~ -lr", p);
        }
    }

    #[test]
    fn zero_betas_reduce_to_sign_scaled_descent() {
        let mut g = one_param_graph(0.0);
        let mut opt = Adam::new(vec!["x".into()], 0.0, 0.0, 1e-8);
        let mut grads = Gradients::new();
        grads.insert("x".into(), NdArray::new(vec![2], vec![0.5, -2.0]).unwrap());
        opt.step(&mut g, &grads, 0.1).unwrap();
        let p = g.param("x").unwrap().data().to_vec();
        assert!((p[0] + 0.1).abs() < 1e-6);
        assert!((p[1] - 0.1).abs() < 1e-6);
    }

    #[test]
    fn non_finite_gradient_names_the_parameter() {
        let mut g = one_param_graph(0.0);
        let mut opt = Adam::new(vec!["x".into()], 0.9, 0.999, 1e-8);
        let mut grads = Gradients::new();
        grads.insert("x".into(), NdArray::full(vec![2], f64::NAN));
        let err = opt.step(&mut g, &grads, 0.1).unwrap_err();
        assert!(err.to_string().contains("`x`"));
    }
}
