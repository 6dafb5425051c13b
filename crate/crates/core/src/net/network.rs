use std::collections::{BTreeMap, HashMap};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::blocks::{Executor, Mode, ParamSpec, ParamStore, Stage};
use super::config::{ArchitectureConfig, BlockKind};
use crate::tensor::ops::{update_running_stats, BN_DECAY};
use crate::tensor::{Differentiable, Gradients, Graph, NodeId};
use crate::{Error, Real, Result, Tensor};

/// A validated config compiled into stages with a fixed parameter layout.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Architecture {
    pub config: ArchitectureConfig,
    pub stages: Vec<Stage>,
    pub params: Vec<ParamSpec>,
    /// Input height and width must be multiples of this.
    pub encoder_stride: usize,
    taps: Vec<usize>,
}

impl Architecture {
    pub fn compile(config: ArchitectureConfig) -> Result<Self> {
        let geometry = config.validate()?;
        let mut tap_index: HashMap<&str, usize> = HashMap::new();
        let mut stages = Vec::with_capacity(config.blocks.len());
        let mut params = Vec::new();
        let mut taps = Vec::new();
        for (i, (spec, geo)) in config.blocks.iter().zip(&geometry).enumerate() {
            let tap = match (&spec.skip, spec.kind) {
                (Some(name), BlockKind::ConcatSkip) => {
                    let &t = tap_index
                        .get(name.as_str())
                        .ok_or_else(|| Error::Config(format!("block {i}: unknown skip '{name}'")))?;
                    Some((t, geometry[t].out_channels))
                }
                _ => None,
            };
            let stage = Stage::compile(i, geo.in_channels, spec, tap)?;
            stage.params(&mut params);
            stages.push(stage);
            if let Some(t) = &spec.tap {
                tap_index.insert(t.as_str(), i);
                taps.push(i);
            }
        }
        let encoder_stride = geometry.iter().map(|g| g.scale).max().unwrap_or(1);
        Ok(Architecture {
            config,
            stages,
            params,
            encoder_stride,
            taps,
        })
    }

    /// Trainable scalars: kernels, biases and BN gamma/beta.
    pub fn count_params(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.kind.trainable())
            .map(|p| p.shape.numel())
            .sum()
    }

    pub fn trainable_names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().filter(|p| p.kind.trainable()).map(|p| p.name.as_str())
    }

    pub fn check_input(&self, shape: crate::Shape) -> Result<()> {
        let c = self.config.input_channels;
        if shape.c != c {
            return Err(Error::Shape(format!("network expects {c} input channels, got {}", shape.c)));
        }
        let m = self.encoder_stride;
        if shape.h == 0 || shape.w == 0 || !shape.h.is_multiple_of(m) || !shape.w.is_multiple_of(m) {
            return Err(Error::Shape(format!(
                "input height and width must be positive multiples of {m}, got {}x{}",
                shape.h, shape.w
            )));
        }
        Ok(())
    }

    /// Emits the whole network onto the executor's graph.
    pub fn emit<T: Real>(&self, ex: &mut Executor<'_, T>, x: NodeId) -> Result<NodeId> {
        self.check_input(ex.graph.shape(x))?;
        let mut outputs = Vec::with_capacity(self.stages.len());
        let mut cur = x;
        for stage in &self.stages {
            cur = stage.apply(ex, cur, &outputs)?;
            outputs.push(cur);
            if !ex.graph.grad_enabled() {
                let mut keep: Vec<NodeId> = self.taps.iter().filter_map(|&t| outputs.get(t).copied()).collect();
                keep.push(cur);
                ex.graph.release_all_except(&keep);
            }
        }
        Ok(cur)
    }
}

/// The segmentation network: compiled architecture plus named parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Network<T: Real = f32> {
    arch: Architecture,
    store: ParamStore<T>,
    mode: Mode,
}

/// A recorded train-mode forward pass, ready for backpropagation.
pub struct TrainPass<T: Real> {
    pub graph: Graph<T>,
    pub output: NodeId,
    params: Vec<(String, NodeId)>,
    batch_stats: Vec<(String, NodeId)>,
}

impl<T: Real> TrainPass<T> {
    pub fn output(&self) -> Result<&Tensor<T>> {
        self.graph.value(self.output)
    }

    /// Gradients of every trainable parameter given d(loss)/d(output).
    pub fn backward(&self, seed: Tensor<T>) -> Result<BTreeMap<String, Tensor<T>>> {
        let mut grads: Gradients<T> = self.graph.backward(self.output, seed)?;
        Ok(self
            .params
            .iter()
            .map(|(name, id)| {
                let g = grads
                    .take(*id)
                    .unwrap_or_else(|| Tensor::zeros(self.graph.shape(*id)));
                (name.clone(), g)
            })
            .collect())
    }
}

impl Network<f32> {
    /// Builds a network with He-normal kernels drawn from a ChaCha stream keyed by `seed`.
    pub fn build(config: ArchitectureConfig, seed: u64) -> Result<Self> {
        let arch = Architecture::compile(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let store = ParamStore::initialize(&arch.params, &mut rng);
        Ok(Network {
            arch,
            store,
            mode: Mode::Train,
        })
    }
}

impl<T: Real> Network<T> {
    /// Assembles a network from explicit parameters, checking names and shapes strictly.
    pub fn from_parts(arch: Architecture, store: ParamStore<T>, mode: Mode) -> Result<Self> {
        let expected = arch.params.len();
        let got = store.trainable.len() + store.running.len();
        for spec in &arch.params {
            let t = store
                .get(&spec.name)
                .ok_or_else(|| Error::Validation(format!("missing parameter {}", spec.name)))?;
            if t.shape() != spec.shape {
                return Err(Error::Validation(format!(
                    "parameter {} has shape {}, expected {}",
                    spec.name,
                    t.shape(),
                    spec.shape
                )));
            }
        }
        if got != expected {
            let known: std::collections::HashSet<&str> = arch.params.iter().map(|p| p.name.as_str()).collect();
            let extra = store
                .trainable
                .keys()
                .chain(store.running.keys())
                .find(|k| !known.contains(k.as_str()))
                .cloned()
                .unwrap_or_default();
            return Err(Error::Validation(format!("unexpected parameter {extra}")));
        }
        Ok(Network { arch, store, mode })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn config(&self) -> &ArchitectureConfig {
        &self.arch.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn count_params(&self) -> usize {
        self.store.trainable.values().map(|t| t.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> Network<U> {
        Network {
            arch: self.arch.clone(),
            store: self.store.cast(),
            mode: self.mode,
        }
    }

    /// Mode-governed forward pass. In train mode the batchnorm running statistics
    /// are updated from this batch.
    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        match self.mode {
            Mode::Inference => self.infer(x),
            Mode::Train => {
                let pass = self.forward_train(x)?;
                self.apply_batch_stats(&pass)?;
                Ok(pass.output()?.clone())
            }
        }
    }

    /// Inference-mode forward that never mutates the network. Intermediate maps are
    /// dropped as soon as no later stage needs them.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut ex = Executor::new(Graph::inference(), &self.store, Mode::Inference);
        let input = ex.graph.leaf(x.clone());
        let out = self.arch.emit(&mut ex, input)?;
        Ok(ex.graph.value(out)?.clone())
    }

    /// Train-mode forward pass recorded for backpropagation. Running statistics are
    /// not touched; see [`Network::apply_batch_stats`].
    pub fn forward_train(&self, x: &Tensor<T>) -> Result<TrainPass<T>> {
        let mut ex = Executor::new(Graph::new(), &self.store, Mode::Train);
        let input = ex.graph.leaf(x.clone());
        let output = self.arch.emit(&mut ex, input)?;
        let mut params: Vec<(String, NodeId)> = ex.bound().iter().map(|(k, &v)| (k.clone(), v)).collect();
        params.sort();
        let batch_stats = std::mem::take(&mut ex.batch_stats);
        Ok(TrainPass {
            graph: ex.graph,
            output,
            params,
            batch_stats,
        })
    }

    /// Folds the batch statistics of a train pass into the running estimates.
    pub fn apply_batch_stats(&mut self, pass: &TrainPass<T>) -> Result<()> {
        for (prefix, id) in &pass.batch_stats {
            let cache = pass
                .graph
                .batch_stats(*id)
                .ok_or_else(|| Error::Shape(format!("{prefix}: node is not a train-mode batchnorm")))?;
            let mut mean = self.take_running(&format!("{prefix}.running_mean"))?;
            let mut var = self.take_running(&format!("{prefix}.running_var"))?;
            update_running_stats(mean.data_mut(), var.data_mut(), cache, BN_DECAY);
            self.store.running.insert(format!("{prefix}.running_mean"), mean);
            self.store.running.insert(format!("{prefix}.running_var"), var);
        }
        Ok(())
    }

    fn take_running(&mut self, name: &str) -> Result<Tensor<T>> {
        self.store
            .running
            .remove(name)
            .ok_or_else(|| Error::Shape(format!("missing parameter {name}")))
    }
}

/// Whole-network probe for gradient checking: `inputs[0]` is the batch, the rest
/// are the trainable parameters in [`Architecture::trainable_names`] order.
pub struct NetworkProbe<'a> {
    pub arch: &'a Architecture,
    pub mode: Mode,
    /// Running statistics used in inference mode.
    pub running: &'a ParamStore<f64>,
}

impl NetworkProbe<'_> {
    /// Inputs for [`crate::tensor::grad_check`]: the batch followed by the parameters.
    pub fn inputs(&self, x: &Tensor<f64>, net: &Network<f64>) -> Vec<Tensor<f64>> {
        let mut v = vec![x.clone()];
        v.extend(self.arch.trainable_names().map(|n| net.params().trainable[n].clone()));
        v
    }
}

impl Differentiable for NetworkProbe<'_> {
    fn build<T: Real>(&self, g: &mut Graph<T>, inputs: &[NodeId]) -> Result<NodeId> {
        let store: ParamStore<T> = ParamStore {
            trainable: BTreeMap::new(),
            running: self.running.running.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        };
        let graph = std::mem::take(g);
        let mut ex = Executor::new(graph, &store, self.mode);
        for (name, &id) in self.arch.trainable_names().zip(&inputs[1..]) {
            ex.bind(name, id);
        }
        let out = self.arch.emit(&mut ex, inputs[0]);
        *g = ex.graph;
        out
    }
}
