//! Finite-difference gradient checking (64-bit only).
//!
//! Central differences with configurable step, compared against the analytic
//! reverse-mode gradient. Report-only: callers decide what to do with
//! failures.

use super::array::NdArray;
use super::graph::Graph;
use crate::error::Result;

/// Worst-case relative error for one parameter.
#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_err: f64,
    /// Flat index of the worst element.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub rows: Vec<ParamCheck>,
    pub threshold: f64,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.rows.iter().map(|r| r.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| r.max_rel_err <= self.threshold)
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for r in &self.rows {
            s.push_str(&format!(
                "{:<28} max_rel_err {:>12.3e}  (analytic {:>12.5e}, numeric {:>12.5e} at [{}])  {}\n",
                r.name,
                r.max_rel_err,
                r.analytic,
                r.numeric,
                r.worst_index,
                if r.max_rel_err <= self.threshold { "ok" } else { "FAIL" }
            ));
        }
        s.push_str(&format!(
            "overall max_rel_err {:.3e} (threshold {:.1e}): {}\n",
            self.max_rel_err(),
            self.threshold,
            if self.passed() { "PASS" } else { "FAIL" }
        ));
        s
    }
}

fn rel_err(a: f64, n: f64) -> f64 {
    if a == n {
        return 0.0;
    }
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Checks the gradient of the named scalar output w.r.t. every parameter.
///
/// Perturbs each parameter element by +/- eps and compares the central
/// difference of the output against the analytic gradient. The graph is
/// restored to its original parameter values afterwards.
pub fn grad_check(
    graph: &mut Graph<f64>,
    inputs: &[(&str, &NdArray<f64>)],
    output: &str,
    eps: f64,
    threshold: f64,
) -> Result<GradCheckReport> {
    let eval = graph.forward(inputs)?;
    let out = graph.output(&eval, output)?;
    debug_assert_eq!(out.numel(), 1, "grad_check requires a scalar output");
    let grads = graph.backward(&eval, output, &NdArray::scalar(1.0))?;

    let mut rows = Vec::new();
    for name in graph.param_names() {
        let analytic = grads[&name].clone();
        let n_elems = analytic.numel();
        let mut worst = ParamCheck {
            name: name.clone(),
            max_rel_err: 0.0,
            worst_index: 0,
            analytic: if n_elems > 0 { analytic.data()[0] } else { 0.0 },
            numeric: 0.0,
        };
        for i in 0..n_elems {
            let orig = graph.param(&name)?.data()[i];

            graph.param_mut(&name)?.data_mut()[i] = orig + eps;
            let plus = graph.output(&graph.forward(inputs)?, output)?.item();
            graph.param_mut(&name)?.data_mut()[i] = orig - eps;
            let minus = graph.output(&graph.forward(inputs)?, output)?.item();
            graph.param_mut(&name)?.data_mut()[i] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.data()[i];
            let e = rel_err(a, numeric);
            if e >= worst.max_rel_err {
                worst.max_rel_err = e;
                worst.worst_index = i;
                worst.analytic = a;
                worst.numeric = numeric;
            }
        }
        rows.push(worst);
    }
    Ok(GradCheckReport { rows, threshold })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::graph::GraphBuilder;
    use rand::SeedableRng;

    #[test]
    fn linear_tanh_network_passes() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mut gb = GraphBuilder::new();
        let x = gb.input("x", vec![3, 4]).unwrap();
        let w = gb.param("w", NdArray::randn(vec![5, 4], 0.8, &mut rng)).unwrap();
        let b = gb.param("b", NdArray::randn(vec![5], 0.5, &mut rng)).unwrap();
        let h = gb.linear(x, w, b).unwrap();
        let t = gb.tanh(h).unwrap();
        let m = gb.mean(t).unwrap();
        gb.output("f", m);
        let mut g = gb.build();

        let xv = NdArray::randn(vec![3, 4], 1.0, &mut rng);
        let report = grad_check(&mut g, &[("x", &xv)], "f", 1e-5, 1e-4).unwrap();
        assert!(report.passed(), "{}", report.render());
    }

    #[test]
    fn constant_function_reports_zero_everywhere() {
        let mut gb = GraphBuilder::new();
        let p = gb.param("p", NdArray::full(vec![3], 2.0f64)).unwrap();
        let d = gb.stop_grad(p).unwrap();
        let m = gb.mean(d).unwrap();
        gb.output("f", m);
        let mut g = gb.build();
        let report = grad_check(&mut g, &[], "f", 1e-5, 1e-4).unwrap();
        assert_eq!(report.rows.len(), 1);
        assert_eq!(report.max_rel_err(), 0.0);
        assert!(report.passed());
    }
}
