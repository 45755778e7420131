//! Central finite-difference gradient checking.

use super::{Graph, NodeId, Tensor};
use crate::{Result, ScmError};

/// Compare the analytic gradient of a scalar-valued tensor function against
/// central finite differences, returning the max relative error
/// |analytic - fd| / max(|analytic|, |fd|, 1e-8) over all elements of `x`.
///
/// `f` must be deterministic; this is verified by evaluating it twice.
pub fn check_gradients<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId>,
{
    let all: Vec<usize> = (0..x.len()).collect();
    check_gradients_at(f, x, eps, &all)
}

/// Like [`check_gradients`] but runs the finite-difference probe only at the
/// given element indices. The analytic gradient is still computed for the
/// whole tensor; this keeps expensive composite functions (full pipeline
/// forwards) inside a reasonable time budget while probing a representative
/// sample of coordinates.
pub fn check_gradients_at<F>(f: F, x: &Tensor, eps: f64, indices: &[usize]) -> Result<f64>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId>,
{
    let eval = |t: &Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let id = g.leaf(t.clone(), false);
        let out = f(&mut g, id)?;
        if !g.value(out).is_scalar() {
            return Err(ScmError::NonScalarLoss(g.value(out).shape().to_vec()));
        }
        Ok(g.value(out).item())
    };

    let v1 = eval(x)?;
    let v2 = eval(x)?;
    if v1.to_bits() != v2.to_bits() {
        return Err(ScmError::Oracle(format!(
            "function is non-deterministic: {} vs {}",
            v1, v2
        )));
    }

    let mut graph = Graph::new();
    let xid = graph.leaf(x.clone(), true);
    let out = f(&mut graph, xid)?;
    graph.backward(out)?;
    let analytic = graph
        .grad(xid)
        .ok_or_else(|| ScmError::Oracle("no gradient reached the input".into()))?
        .to_vec();

    let mut max_rel = 0.0f64;
    let mut probe = x.clone();
    for &i in indices {
        if i >= probe.len() {
            return Err(ScmError::Config(format!(
                "gradcheck index {} out of bounds for {} elements",
                i,
                probe.len()
            )));
        }
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = eval(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let fd = (plus - minus) / (2.0 * eps);
        let rel = (analytic[i] - fd).abs() / analytic[i].abs().max(fd.abs()).max(1e-8);
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}
