//! Central finite-difference verification of reverse-mode gradients.

use std::collections::BTreeMap;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::{AdError, Graph, NodeId};

/// Outcome of [`check_gradient`]: the worst relative disagreement between
/// reverse-mode and central finite differences, per parameter and overall.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub per_param: BTreeMap<String, f64>,
    pub tolerance: f64,
}

impl GradCheckReport {
    /// Worst relative error over all parameters; 0 for a parameter-free graph.
    pub fn max_rel_error(&self) -> f64 {
        self.per_param.values().copied().fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < self.tolerance
    }

    pub fn is_empty(&self) -> bool {
        self.per_param.is_empty()
    }
}

/// Compare the reverse-mode gradient of `target` against central finite
/// differences over every element of every parameter.
///
/// Relative error uses `|ad - fd| / max(1, |ad|, |fd|)`, so tiny gradients
/// are compared absolutely. The graph itself is not mutated.
pub fn check_gradient<S: Scalar>(
    graph: &Graph<S>,
    bindings: &BTreeMap<String, Tensor<S>>,
    target: NodeId,
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport, AdError> {
    assert!(step > 0.0, "finite-difference step must be positive");
    let analytic = graph.gradient(bindings, target)?;
    let mut per_param = BTreeMap::new();
    let mut scratch = graph.clone();
    for (name, grad) in &analytic {
        let base = graph.param_value(name)?.clone();
        let mut worst = 0.0f64;
        for idx in 0..base.len() {
            let x0 = base.data()[idx].as_f64();
            let mut plus = base.clone();
            plus.data_mut()[idx] = S::of(x0 + step);
            scratch.set_param(name, plus)?;
            let up = eval_scalar(&scratch, bindings, target)?;
            let mut minus = base.clone();
            minus.data_mut()[idx] = S::of(x0 - step);
            scratch.set_param(name, minus)?;
            let down = eval_scalar(&scratch, bindings, target)?;
            let fd = (up - down) / (2.0 * step);
            scratch.set_param(name, base.clone())?;
            let ad = grad.data()[idx].as_f64();
            let denom = 1.0f64.max(ad.abs()).max(fd.abs());
            worst = worst.max((ad - fd).abs() / denom);
        }
        per_param.insert(name.clone(), worst);
    }
    Ok(GradCheckReport {
        per_param,
        tolerance,
    })
}

fn eval_scalar<S: Scalar>(
    graph: &Graph<S>,
    bindings: &BTreeMap<String, Tensor<S>>,
    target: NodeId,
) -> Result<f64, AdError> {
    let eval = graph.evaluate(bindings)?;
    Ok(eval.value(target).scalar_value().as_f64())
}
