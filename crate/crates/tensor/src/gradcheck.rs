//! Central-difference verification of [`Graph::backward`].

use rand::seq::SliceRandom;

use crate::error::{Result, TensorError};
use crate::graph::{Graph, NodeId};
use crate::rng::SeedStream;

/// Coordinates compared per parameter (all of them when a parameter is smaller).
pub const MIN_COORDS: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    /// Coordinates rejected because `±step` crossed a ReLU or pooling boundary.
    pub skipped: usize,
    pub max_rel_err: f64,
    pub worst_index: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub step: f64,
    pub tol: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() < self.tol
    }

    pub fn checked(&self) -> usize {
        self.params.iter().map(|p| p.checked).sum()
    }

    pub fn skipped(&self) -> usize {
        self.params.iter().map(|p| p.skipped).sum()
    }
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compares analytic gradients with `(L(θ+h) − L(θ−h)) / 2h` on a seeded
/// subsample of coordinates of every parameter.
///
/// A coordinate whose perturbation changes the branch pattern of any ReLU or
/// max-pool is not on a smooth piece of the loss; it is skipped and another
/// coordinate is drawn in its place. The graph is left with its original
/// values.
pub fn finite_diff_check(
    graph: &mut Graph,
    loss: NodeId,
    step: f64,
    tol: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    if !(step > 0.0) {
        return Err(TensorError::InvalidArgument(format!("step must be > 0, got {step}")));
    }
    let analytic = graph.backward(loss)?;
    let base_sig = graph.branch_signature();
    let seeds = SeedStream::new(seed);
    let params: Vec<(String, NodeId)> = graph.params().map(|(n, id)| (n.to_string(), id)).collect();
    let mut report = Vec::with_capacity(params.len());
    for (name, id) in params {
        let original = graph.value(id).clone();
        let grad = analytic.get(&name).expect("every param has a gradient");
        let mut order: Vec<usize> = (0..original.numel()).collect();
        order.shuffle(&mut seeds.rng(&name));
        let mut check = ParamCheck {
            name,
            checked: 0,
            skipped: 0,
            max_rel_err: 0.0,
            worst_index: None,
        };
        let eval_at = |graph: &mut Graph, i: usize, delta: f64| -> Result<(f64, u64)> {
            let mut t = original.clone();
            t.data_mut()[i] += delta;
            graph.set_leaf(id, t)?;
            graph.replay()?;
            Ok((graph.value(loss).data()[0], graph.branch_signature()))
        };
        for i in order {
            if check.checked >= MIN_COORDS {
                break;
            }
            let (lp, sp) = eval_at(graph, i, step)?;
            let (lm, sm) = eval_at(graph, i, -step)?;
            if sp != base_sig || sm != base_sig {
                check.skipped += 1;
                continue;
            }
            let numeric = (lp - lm) / (2.0 * step);
            let err = relative_error(grad.data()[i], numeric);
            if err > check.max_rel_err || check.worst_index.is_none() {
                check.max_rel_err = check.max_rel_err.max(err);
                check.worst_index = Some(i);
            }
            check.checked += 1;
        }
        graph.set_leaf(id, original)?;
        report.push(check);
    }
    graph.replay()?;
    Ok(GradCheckReport {
        step,
        tol,
        params: report,
    })
}
