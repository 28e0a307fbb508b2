//! Central finite-difference verification of analytic gradients.

use super::graph::{Graph, NodeId};
use super::Tensor;
use crate::error::{Error, Result};

/// Denominator floor of the relative error, so that coordinates whose true
/// gradient is zero are judged on absolute error instead of rounding noise.
const RELATIVE_FLOOR: f64 = 1e-5;

/// One-sided slopes differing by more than this fraction flag a kink.
const KINK_RATIO: f64 = 1e-2;

#[derive(Debug, Clone, PartialEq)]
pub struct CoordinateCheck {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
    /// Non-differentiable point (ReLU/max/hinge kink) within `h`; not scored.
    pub kink: bool,
}

#[derive(Debug, Clone)]
pub struct FdReport {
    pub coordinates: Vec<CoordinateCheck>,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl FdReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }

    pub fn checked(&self) -> usize {
        self.coordinates.iter().filter(|c| !c.kink).count()
    }

    pub fn excluded(&self) -> usize {
        self.coordinates.iter().filter(|c| c.kink).count()
    }

    pub fn worst(&self) -> Option<&CoordinateCheck> {
        self.coordinates
            .iter()
            .filter(|c| !c.kink)
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

fn scalar_output(graph: &Graph<f64>, out: NodeId) -> Result<f64> {
    let v = graph.try_value(out)?;
    if v.len() != 1 {
        return Err(Error::invalid(
            "finite_difference_check",
            format!("loss must be a scalar, got shape {:?}", v.shape()),
        ));
    }
    Ok(v.item())
}

/// Compares the backward-pass gradient of a scalar loss with central
/// differences `(L(x+h) − L(x−h)) / 2h`.
///
/// `build` records the loss on a fresh graph given the variable node holding
/// the (possibly perturbed) point; it is re-invoked for every perturbation.
/// `coordinates` restricts the check to a subset of flat indices.
pub fn finite_difference_check<F>(
    point: &Tensor<f64>,
    h: f64,
    tolerance: f64,
    coordinates: Option<&[usize]>,
    mut build: F,
) -> Result<FdReport>
where
    F: FnMut(&mut Graph<f64>, NodeId) -> Result<NodeId>,
{
    let analytic = {
        let mut g = Graph::new();
        let var = g.variable(point.clone());
        let out = build(&mut g, var)?;
        scalar_output(&g, out)?;
        let grads = g.backward(out, None)?;
        grads
            .get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(point.shape()))
    };

    let mut eval = |x: Tensor<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let var = g.variable(x);
        let out = build(&mut g, var)?;
        scalar_output(&g, out)
    };
    let center = eval(point.clone())?;

    let all: Vec<usize>;
    let indices = match coordinates {
        Some(c) => c,
        None => {
            all = (0..point.len()).collect();
            &all
        }
    };

    let mut checks = Vec::with_capacity(indices.len());
    let mut max_rel_error = 0f64;
    for &i in indices {
        if i >= point.len() {
            return Err(Error::invalid(
                "finite_difference_check",
                format!("coordinate {i} out of range for {} elements", point.len()),
            ));
        }
        let mut plus = point.clone();
        plus.data_mut()[i] += h;
        let mut minus = point.clone();
        minus.data_mut()[i] -= h;
        let lp = eval(plus)?;
        let lm = eval(minus)?;
        let numeric = (lp - lm) / (2.0 * h);
        let forward = (lp - center) / h;
        let backward = (center - lm) / h;
        let slope_scale = forward.abs().max(backward.abs()).max(RELATIVE_FLOOR);
        let kink = (forward - backward).abs() > KINK_RATIO * slope_scale;
        let a = analytic.data()[i];
        let rel_error = (a - numeric).abs() / a.abs().max(numeric.abs()).max(RELATIVE_FLOOR);
        if !kink {
            max_rel_error = max_rel_error.max(rel_error);
        }
        checks.push(CoordinateCheck {
            index: i,
            analytic: a,
            numeric,
            rel_error,
            kink,
        });
    }
    Ok(FdReport {
        coordinates: checks,
        max_rel_error,
        tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_matches_to_rounding() {
        let w = Tensor::new(&[4], vec![0.5, -1.5, 2.0, 3.25]).unwrap();
        let x = Tensor::new(&[4], vec![0.1, 0.2, -0.3, 0.4]).unwrap();
        let report = finite_difference_check(&x, 1e-5, 1e-4, None, |g, v| {
            let k = g.constant(w.clone());
            let bias = g.constant(Tensor::zeros(&[1]));
            let w2 = g.reshape(k, &[4, 1])?;
            let y = g.dense(v, w2, bias)?;
            g.sum(y)
        })
        .unwrap();
        assert!(report.passed());
        assert!(report.max_rel_error < 1e-9, "{}", report.max_rel_error);
        assert_eq!(report.excluded(), 0);
    }

    #[test]
    fn relu_at_zero_is_excluded() {
        let x = Tensor::new(&[3], vec![0.0, 1.0, -2.0]).unwrap();
        let report = finite_difference_check(&x, 1e-5, 1e-4, None, |g, v| {
            let r = g.relu(v)?;
            g.sum(r)
        })
        .unwrap();
        assert!(report.coordinates[0].kink);
        assert!(!report.coordinates[1].kink);
        assert!(!report.coordinates[2].kink);
        assert!(report.passed());
    }

    #[test]
    fn wrong_gradient_is_caught() {
        // the first (analytic) recording differs from every re-evaluation
        let x = Tensor::new(&[2], vec![1.0, 2.0]).unwrap();
        let mut calls = 0;
        let report = finite_difference_check(&x, 1e-5, 1e-4, None, |g, v| {
            calls += 1;
            let factor = if calls == 1 { 1.0 } else { 3.0 };
            let s = g.scale(v, factor)?;
            g.sum(s)
        })
        .unwrap();
        assert!(!report.passed());
    }
}
