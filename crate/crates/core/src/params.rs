//! Parameter storage and the graph-building context shared by every network part.

use std::collections::BTreeMap;

use hepadet_tensor::init::fan_in_uniform;
use hepadet_tensor::{
    BatchNormConfig, BatchNormState, Graph, Mode, NodeId, ParamSet, SeedStream, Tensor,
};

use crate::error::{CoreError, Result};

const RUNNING_MEAN: &str = ".running_mean";
const RUNNING_VAR: &str = ".running_var";

/// Trainable tensors plus batch-norm running statistics, keyed by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Store {
    pub params: ParamSet,
    pub bn: BTreeMap<String, BatchNormState>,
}

impl Store {
    /// Number of trainable scalars (running statistics excluded).
    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn param_count_with_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, t)| t.numel())
            .sum()
    }

    /// Flattens everything into one named tensor set for checkpointing.
    pub fn to_tensors(&self) -> ParamSet {
        let mut out = self.params.clone();
        for (name, st) in &self.bn {
            let c = st.running_mean.len();
            out.insert(
                format!("{name}{RUNNING_MEAN}"),
                Tensor::new(vec![c], st.running_mean.clone()).expect("vector"),
            );
            out.insert(
                format!("{name}{RUNNING_VAR}"),
                Tensor::new(vec![c], st.running_var.clone()).expect("vector"),
            );
        }
        out
    }

    pub fn from_tensors(tensors: ParamSet) -> Result<Self> {
        let mut store = Store::default();
        let mut vars = BTreeMap::new();
        for (name, t) in tensors {
            if let Some(base) = name.strip_suffix(RUNNING_MEAN) {
                store.bn.entry(base.to_string()).or_insert_with(|| BatchNormState::new(0)).running_mean =
                    t.into_data();
            } else if let Some(base) = name.strip_suffix(RUNNING_VAR) {
                vars.insert(base.to_string(), t.into_data());
            } else {
                store.params.insert(name, t);
            }
        }
        for (base, v) in vars {
            let st = store
                .bn
                .get_mut(&base)
                .ok_or_else(|| CoreError::MissingParam(format!("{base}{RUNNING_MEAN}")))?;
            if st.running_mean.len() != v.len() {
                return Err(CoreError::Shape(format!("running stats of {base} disagree")));
            }
            st.running_var = v;
        }
        if let Some((base, _)) = store.bn.iter().find(|(_, s)| s.running_var.len() != s.running_mean.len()) {
            return Err(CoreError::MissingParam(format!("{base}{RUNNING_VAR}")));
        }
        Ok(store)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform in `±sqrt(6 / fan_in)`.
    FanIn(usize),
    /// `FanIn` times a gain.
    ScaledFanIn(usize, f64),
    Const(f64),
    /// Square identity matrix (2-D shapes only).
    Identity,
}

/// Builds one forward graph against a [`Store`].
///
/// In initializing mode, missing parameters are created on first use;
/// otherwise a missing parameter is an error.
pub struct Ctx<'a> {
    pub g: Graph,
    pub store: &'a mut Store,
    pub mode: Mode,
    pub bn_config: BatchNormConfig,
    seeds: SeedStream,
    create: bool,
    dropout_calls: u64,
}

impl<'a> Ctx<'a> {
    pub fn new(store: &'a mut Store, mode: Mode, seeds: SeedStream) -> Self {
        Self {
            g: Graph::new(),
            store,
            mode,
            bn_config: BatchNormConfig::default(),
            seeds,
            create: false,
            dropout_calls: 0,
        }
    }

    /// Infer-mode context that creates parameters from `seeds` as they are met.
    pub fn initializing(store: &'a mut Store, seeds: SeedStream) -> Self {
        Self {
            create: true,
            ..Self::new(store, Mode::Infer, seeds)
        }
    }

    pub fn is_initializing(&self) -> bool {
        self.create
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        self.g.value(id)
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<NodeId> {
        if let Some(id) = self.g.param_id(name) {
            return Ok(id);
        }
        if !self.store.params.contains_key(name) {
            if !self.create {
                return Err(CoreError::MissingParam(name.to_string()));
            }
            let t = match init {
                Init::FanIn(fan) => fan_in_uniform(shape, fan, &self.seeds, name),
                Init::ScaledFanIn(fan, gain) => fan_in_uniform(shape, fan, &self.seeds, name).map(|v| v * gain),
                Init::Const(v) => Tensor::full(shape, v),
                Init::Identity => {
                    if shape.len() != 2 || shape[0] != shape[1] {
                        return Err(CoreError::Shape(format!("identity init for {name} needs a square matrix, got {shape:?}")));
                    }
                    Tensor::from_fn(shape, |i| if i / shape[1] == i % shape[1] { 1.0 } else { 0.0 })
                }
            };
            self.store.params.insert(name.to_string(), t);
        }
        let t = &self.store.params[name];
        if t.shape() != shape {
            return Err(CoreError::Shape(format!(
                "parameter {name} has shape {:?}, layer expects {shape:?}",
                t.shape()
            )));
        }
        Ok(self.g.param(name, t))
    }

    /// Bias-free convolution with weight `<name>.w`.
    pub fn conv(
        &mut self,
        name: &str,
        x: NodeId,
        out: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Result<NodeId> {
        let c = self.g.shape(x)[1];
        let w = self.param(
            &format!("{name}.w"),
            &[out, c, kernel.0, kernel.1],
            Init::FanIn(c * kernel.0 * kernel.1),
        )?;
        Ok(self.g.conv2d(x, w, stride, pad)?)
    }

    /// Convolution with a bias `<name>.b` broadcast over positions.
    pub fn conv_biased(
        &mut self,
        name: &str,
        x: NodeId,
        out: usize,
        kernel: (usize, usize),
        pad: (usize, usize),
        bias_init: f64,
    ) -> Result<NodeId> {
        let y = self.conv(name, x, out, kernel, (1, 1), pad)?;
        let b = self.param(&format!("{name}.b"), &[1, out, 1, 1], Init::Const(bias_init))?;
        Ok(self.g.add(y, b)?)
    }

    pub fn bn(&mut self, name: &str, x: NodeId) -> Result<NodeId> {
        self.bn_scaled(name, x, 1.0)
    }

    /// Batch norm whose scale starts at `gamma`.
    pub fn bn_scaled(&mut self, name: &str, x: NodeId, gamma: f64) -> Result<NodeId> {
        let c = self.g.shape(x)[1];
        let gamma = self.param(&format!("{name}.gamma"), &[c], Init::Const(gamma))?;
        let beta = self.param(&format!("{name}.beta"), &[c], Init::Const(0.0))?;
        if !self.store.bn.contains_key(name) {
            if !self.create {
                return Err(CoreError::MissingParam(format!("{name}{RUNNING_MEAN}")));
            }
            self.store.bn.insert(name.to_string(), BatchNormState::new(c));
        }
        let state = self.store.bn.get_mut(name).expect("inserted above");
        Ok(self.g.batchnorm(x, gamma, beta, self.mode, self.bn_config, state)?)
    }

    pub fn conv_bn(
        &mut self,
        name: &str,
        x: NodeId,
        out: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Result<NodeId> {
        let y = self.conv(name, x, out, kernel, stride, pad)?;
        self.bn(&format!("{name}.bn"), y)
    }

    pub fn conv_bn_relu(
        &mut self,
        name: &str,
        x: NodeId,
        out: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Result<NodeId> {
        let y = self.conv_bn(name, x, out, kernel, stride, pad)?;
        Ok(self.g.relu(y))
    }

    /// Affine layer with `<name>.w` `[F, out]` and `<name>.b` `[out]`.
    pub fn dense(&mut self, name: &str, x: NodeId, out: usize, bias_init: f64) -> Result<NodeId> {
        let f = self.g.shape(x)[1];
        let w = self.param(&format!("{name}.w"), &[f, out], Init::FanIn(f))?;
        let b = self.param(&format!("{name}.b"), &[out], Init::Const(bias_init))?;
        Ok(self.g.dense(x, w, b)?)
    }

    /// Dropout with a fresh seed per call, derived from the context seed.
    pub fn dropout(&mut self, x: NodeId, rate: f64) -> Result<NodeId> {
        let seed = self.seeds.child_index("dropout", self.dropout_calls).seed();
        self.dropout_calls += 1;
        Ok(self.g.dropout(x, rate, self.mode, seed)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn store_round_trips_through_tensors() {
        let mut store = Store::default();
        let mut ctx = Ctx::initializing(&mut store, SeedStream::new(1));
        let x = ctx.g.input(Tensor::ones(&[2, 3, 4, 4]));
        let y = ctx.conv_bn_relu("c", x, 5, (3, 3), (1, 1), (1, 1)).unwrap();
        assert_eq!(ctx.g.shape(y), &[2, 5, 4, 4]);
        store.bn.get_mut("c.bn").unwrap().running_var[2] = 0.25;
        let back = Store::from_tensors(store.to_tensors()).unwrap();
        assert_eq!(back, store);
        assert_eq!(store.param_count(), 5 * 3 * 9 + 10);
    }

    #[test]
    fn missing_parameter_outside_init() {
        let mut store = Store::default();
        let mut ctx = Ctx::new(&mut store, Mode::Infer, SeedStream::new(1));
        let x = ctx.g.input(Tensor::ones(&[1, 3]));
        assert!(matches!(ctx.dense("fc", x, 2, 0.0), Err(CoreError::MissingParam(_))));
    }
}
