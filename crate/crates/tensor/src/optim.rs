use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::graph::Gradients;
use crate::ParamSet;

/// Per-parameter velocity buffers; absent entries start at zero.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MomentumState {
    velocity: BTreeMap<String, Vec<f64>>,
}

impl MomentumState {
    pub fn velocity(&self, name: &str) -> Option<&[f64]> {
        self.velocity.get(name).map(Vec::as_slice)
    }
}

/// `v ← μ·v + g`, `p ← p − lr·v` for every parameter that has a gradient.
///
/// `weight_decay` adds `λ·p` to the gradient first.
pub fn sgd_step(
    params: &mut ParamSet,
    grads: &Gradients,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
    state: &mut MomentumState,
) -> Result<()> {
    if !(lr > 0.0) {
        return Err(TensorError::InvalidArgument(format!("learning rate must be > 0, got {lr}")));
    }
    for (name, g) in grads.iter() {
        let Some(p) = params.get_mut(name) else {
            continue;
        };
        if p.shape() != g.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "sgd_step",
                detail: format!("{name}: param {:?}, grad {:?}", p.shape(), g.shape()),
            });
        }
        let v = state
            .velocity
            .entry(name.clone())
            .or_insert_with(|| vec![0.0; g.numel()]);
        for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
            *vv = momentum * *vv + gv + weight_decay * *pv;
            *pv -= lr * *vv;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::{Graph, Tensor};

    fn grads_of(value: f64) -> Gradients {
        // loss = value * sum(p) has gradient `value` everywhere
        let mut g = Graph::new();
        let p = g.param("p", &Tensor::zeros(&[1]));
        let s = g.scale(p, value);
        let l = g.sum(s);
        g.backward(l).unwrap()
    }

    fn single(v: f64) -> ParamSet {
        let mut ps = ParamSet::new();
        ps.insert("p".into(), Tensor::full(&[1], v));
        ps
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut ps = single(1.5);
        let mut st = MomentumState::default();
        sgd_step(&mut ps, &grads_of(0.0), 0.1, 0.9, 0.0, &mut st).unwrap();
        assert_eq!(ps["p"].data(), &[1.5]);
        assert_eq!(st.velocity("p"), Some(&[0.0][..]));
    }

    #[test]
    fn one_plain_step() {
        let mut ps = single(5.0);
        let mut st = MomentumState::default();
        sgd_step(&mut ps, &grads_of(2.0), 1.0, 0.0, 0.0, &mut st).unwrap();
        assert_eq!(ps["p"].data(), &[3.0]);
    }

    #[test]
    fn two_momentum_steps() {
        let mut ps = single(0.0);
        let mut st = MomentumState::default();
        let g = grads_of(1.0);
        sgd_step(&mut ps, &g, 0.1, 0.9, 0.0, &mut st).unwrap();
        assert!((ps["p"].data()[0] + 0.1).abs() < 1e-15);
        sgd_step(&mut ps, &g, 0.1, 0.9, 0.0, &mut st).unwrap();
        assert!((ps["p"].data()[0] + 0.29).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_is_error() {
        let mut ps = ParamSet::new();
        ps.insert("p".into(), Tensor::zeros(&[2]));
        let mut st = MomentumState::default();
        assert!(sgd_step(&mut ps, &grads_of(1.0), 0.1, 0.0, 0.0, &mut st).is_err());
    }
}
