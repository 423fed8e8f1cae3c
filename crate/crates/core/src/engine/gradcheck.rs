//! Central finite-difference verification of analytic adjoints.

use super::graph::{Graph, OpKind, Var};
use super::tensor::Tensor;
use crate::error::{Result, SfcError};

/// Outcome of checking one graph against finite differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub op: String,
    pub max_rel_err: f64,
    /// Flat index across all inputs (input-major) of the worst element.
    pub worst_index: usize,
    pub elements: usize,
}

/// Finite-difference checker settings.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub step: f64,
    pub tol: f64,
    /// Denominator floor in the relative error, so that tiny gradients are
    /// compared in absolute terms.
    pub floor: f64,
    pub fault: Option<OpKind>,
    /// Check only this many elements, evenly spaced over the flat index.
    pub probes: Option<usize>,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            step: 1e-5,
            tol: 1e-4,
            floor: 1e-3,
            fault: None,
            probes: None,
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

impl GradCheck {
    pub fn with_tol(tol: f64) -> Self {
        GradCheck {
            tol,
            ..Default::default()
        }
    }

    /// Compare analytic gradients of `build` with central differences for
    /// every element of every input. `build` must return a scalar node.
    pub fn run<F>(&self, op: &str, inputs: &[Tensor<f64>], build: F) -> Result<GradReport>
    where
        F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
    {
        let report = self.measure(op, inputs, &build)?;
        if report.max_rel_err >= self.tol {
            return Err(SfcError::GradCheck {
                op: op.to_string(),
                index: report.worst_index,
                rel_err: report.max_rel_err,
                tol: self.tol,
            });
        }
        Ok(report)
    }

    /// Same as [`GradCheck::run`] but never fails on tolerance.
    pub fn measure<F>(&self, op: &str, inputs: &[Tensor<f64>], build: F) -> Result<GradReport>
    where
        F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
    {
        let mut g = Graph::new();
        if let Some(kind) = self.fault {
            g.inject_adjoint_fault(kind);
        }
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let out = build(&mut g, &vars)?;
        g.backward(out)?;
        let analytic: Vec<Tensor<f64>> = vars
            .iter()
            .zip(inputs)
            .map(|(&v, t)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();

        let eval = |inputs: &[Tensor<f64>]| -> Result<f64> {
            let mut g = Graph::new();
            let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), false)).collect();
            let out = build(&mut g, &vars)?;
            Ok(g.value(out).item())
        };

        let total: usize = inputs.iter().map(Tensor::numel).sum();
        let stride = match self.probes {
            Some(n) if n > 0 && n < total => total / n,
            _ => 1,
        };
        let mut worst = (0.0f64, 0usize);
        let mut flat = 0usize;
        let mut checked = 0usize;
        let mut probe = inputs.to_vec();
        for (i, grad) in analytic.iter().enumerate() {
            for e in 0..inputs[i].numel() {
                if !flat.is_multiple_of(stride) {
                    flat += 1;
                    continue;
                }
                checked += 1;
                let orig = inputs[i].data()[e];
                probe[i].data_mut()[e] = orig + self.step;
                let plus = eval(&probe)?;
                probe[i].data_mut()[e] = orig - self.step;
                let minus = eval(&probe)?;
                probe[i].data_mut()[e] = orig;
                let numeric = (plus - minus) / (2.0 * self.step);
                let err = relative_error(grad.data()[e], numeric, self.floor);
                if err > worst.0 || !err.is_finite() {
                    worst = (if err.is_finite() { err } else { f64::INFINITY }, flat);
                }
                flat += 1;
            }
        }
        Ok(GradReport {
            op: op.to_string(),
            max_rel_err: worst.0,
            worst_index: worst.1,
            elements: checked,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_graph() {
        let x = Tensor::new(vec![1], vec![0.7]).unwrap();
        let rep = GradCheck::with_tol(1e-10)
            .run("scale", &[x], |g, v| g.scale(v[0], 2.0))
            .unwrap();
        assert!(rep.max_rel_err < 1e-10, "{rep:?}");
    }

    #[test]
    fn corrupted_conv_adjoint_is_caught() {
        let x = Tensor::from_fn(&[1, 2, 5, 5], |i| ((i * 7919) % 13) as f64 / 13.0 - 0.5);
        let k = Tensor::from_fn(&[3, 2, 3, 3], |i| ((i * 104729) % 17) as f64 / 17.0 - 0.5);
        let w: Vec<f64> = (0..75).map(|i| ((i * 31) % 11) as f64 / 11.0 - 0.4).collect();
        let build = |g: &mut Graph<f64>, v: &[Var]| {
            let y = g.conv2d(v[0], v[1], None, 1, 1)?;
            g.weighted_sum(y, &w)
        };
        let clean = GradCheck::default();
        assert!(clean.run("conv2d", &[x.clone(), k.clone()], build).is_ok());
        let faulty = GradCheck {
            fault: Some(OpKind::Conv2d),
            ..Default::default()
        };
        match faulty.run("conv2d", &[x, k], build) {
            Err(SfcError::GradCheck { op, .. }) => assert_eq!(op, "conv2d"),
            other => panic!("expected a gradcheck failure, got {other:?}"),
        }
    }
}
