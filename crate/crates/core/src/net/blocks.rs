//! Compiled blocks: each knows its parameter names/shapes and how to emit itself
//! onto a [`Graph`].

use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::config::{BlockKind, BlockSpec};
use crate::tensor::ops::{ConvGeometry, BN_EPSILON};
use crate::tensor::{Graph, NodeId};
use crate::{Error, Real, Result, Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batchnorm uses batch statistics and updates its running estimates.
    Train,
    /// Batchnorm uses the running estimates.
    Inference,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Kernel { fan_in: usize },
    Bias,
    Gamma,
    Beta,
    RunningMean,
    RunningVar,
}

impl ParamKind {
    pub fn trainable(self) -> bool {
        !matches!(self, ParamKind::RunningMean | ParamKind::RunningVar)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Shape,
    pub kind: ParamKind,
}

/// Named tensors: trainable parameters and batchnorm running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T: Real = f32> {
    pub trainable: BTreeMap<String, Tensor<T>>,
    pub running: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore {
            trainable: BTreeMap::new(),
            running: BTreeMap::new(),
        }
    }
}

impl<T: Real> ParamStore<T> {
    /// He-normal (fan-in) kernels, zero biases, BN gamma 1 / beta 0, running mean 0 / var 1.
    /// Draws happen in `specs` order.
    pub fn initialize(specs: &[ParamSpec], rng: &mut impl Rng) -> Self {
        let mut store = ParamStore::default();
        for spec in specs {
            let n = spec.shape.numel();
            let data: Vec<T> = match spec.kind {
                ParamKind::Kernel { fan_in } => {
                    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                    (0..n).map(|_| T::of(normal.sample(rng))).collect()
                }
                ParamKind::Bias | ParamKind::Beta | ParamKind::RunningMean => vec![T::zero(); n],
                ParamKind::Gamma | ParamKind::RunningVar => vec![T::one(); n],
            };
            store.insert(spec, Tensor::from_vec(spec.shape, data).expect("spec shape"));
        }
        store
    }

    pub fn insert(&mut self, spec: &ParamSpec, value: Tensor<T>) {
        let map = if spec.kind.trainable() {
            &mut self.trainable
        } else {
            &mut self.running
        };
        map.insert(spec.name.clone(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.trainable.get(name).or_else(|| self.running.get(name))
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            trainable: self.trainable.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            running: self.running.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    fn running_vec(&self, name: &str, channels: usize) -> Result<Vec<T>> {
        let t = self
            .running
            .get(name)
            .ok_or_else(|| Error::Shape(format!("missing parameter {name}")))?;
        if t.len() != channels {
            return Err(Error::Shape(format!(
                "{name}: expected {channels} entries, got {}",
                t.len()
            )));
        }
        Ok(t.data().to_vec())
    }
}

/// Emits blocks onto a graph, binding parameter names to leaf nodes on first use.
pub struct Executor<'a, T: Real> {
    pub graph: Graph<T>,
    store: &'a ParamStore<T>,
    mode: Mode,
    bound: HashMap<String, NodeId>,
    /// Train-mode batchnorm nodes, keyed by the BN prefix (`<unit>.bn`).
    pub batch_stats: Vec<(String, NodeId)>,
}

impl<'a, T: Real> Executor<'a, T> {
    pub fn new(graph: Graph<T>, store: &'a ParamStore<T>, mode: Mode) -> Self {
        Executor {
            graph,
            store,
            mode,
            bound: HashMap::new(),
            batch_stats: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Uses an existing node for a parameter instead of the stored tensor.
    pub fn bind(&mut self, name: &str, id: NodeId) {
        self.bound.insert(name.to_string(), id);
    }

    pub fn bound(&self) -> &HashMap<String, NodeId> {
        &self.bound
    }

    fn param(&mut self, name: &str, expected: Shape, stage: &str) -> Result<NodeId> {
        let id = match self.bound.get(name) {
            Some(&id) => id,
            None => {
                let t = self
                    .store
                    .trainable
                    .get(name)
                    .ok_or_else(|| Error::Shape(format!("{stage}: missing parameter {name}")))?;
                let id = self.graph.leaf(t.clone());
                self.bound.insert(name.to_string(), id);
                id
            }
        };
        let got = self.graph.shape(id);
        if got != expected {
            return Err(Error::Shape(format!(
                "{stage}: parameter {name} has shape {got}, expected {expected}"
            )));
        }
        Ok(id)
    }

    fn check_input(&self, x: NodeId, channels: usize, stage: &str) -> Result<()> {
        let c = self.graph.shape(x).c;
        if c != channels {
            return Err(Error::Shape(format!("{stage}: expected {channels} input channels, got {c}")));
        }
        Ok(())
    }
}

/// Convolution, optional batchnorm, optional ReLU.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvUnit {
    pub name: String,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub geom: ConvGeometry,
    pub bias: bool,
    pub bn: bool,
    pub relu: bool,
}

impl ConvUnit {
    fn new(name: String, c_in: usize, c_out: usize, kernel: usize, geom: ConvGeometry) -> Self {
        ConvUnit {
            name,
            c_in,
            c_out,
            kernel,
            geom,
            bias: false,
            bn: true,
            relu: true,
        }
    }

    fn pointwise(name: String, c_in: usize, c_out: usize) -> Self {
        Self::new(name, c_in, c_out, 1, ConvGeometry::default())
    }

    fn kernel_shape(&self) -> Shape {
        Shape::new(self.c_out, self.c_in / self.geom.groups, self.kernel, self.kernel)
    }

    fn params(&self, out: &mut Vec<ParamSpec>) {
        let k = self.kernel_shape();
        out.push(ParamSpec {
            name: format!("{}.kernel", self.name),
            shape: k,
            kind: ParamKind::Kernel { fan_in: k.c * k.h * k.w },
        });
        let vec = Shape::new(1, self.c_out, 1, 1);
        if self.bias {
            out.push(ParamSpec {
                name: format!("{}.bias", self.name),
                shape: vec,
                kind: ParamKind::Bias,
            });
        }
        if self.bn {
            for (suffix, kind) in [
                ("gamma", ParamKind::Gamma),
                ("beta", ParamKind::Beta),
                ("running_mean", ParamKind::RunningMean),
                ("running_var", ParamKind::RunningVar),
            ] {
                out.push(ParamSpec {
                    name: format!("{}.bn.{suffix}", self.name),
                    shape: vec,
                    kind,
                });
            }
        }
    }

    fn apply<T: Real>(&self, ex: &mut Executor<'_, T>, x: NodeId) -> Result<NodeId> {
        ex.check_input(x, self.c_in, &self.name)?;
        let kernel = ex.param(&format!("{}.kernel", self.name), self.kernel_shape(), &self.name)?;
        let vec = Shape::new(1, self.c_out, 1, 1);
        let bias = if self.bias {
            Some(ex.param(&format!("{}.bias", self.name), vec, &self.name)?)
        } else {
            None
        };
        let mut y = ex.graph.conv2d(x, kernel, bias, self.geom)?;
        if self.bn {
            let gamma = ex.param(&format!("{}.bn.gamma", self.name), vec, &self.name)?;
            let beta = ex.param(&format!("{}.bn.beta", self.name), vec, &self.name)?;
            y = match ex.mode {
                Mode::Train => {
                    let id = ex.graph.batchnorm_train(y, gamma, beta, BN_EPSILON)?;
                    ex.batch_stats.push((format!("{}.bn", self.name), id));
                    id
                }
                Mode::Inference => {
                    let mean = ex.store.running_vec(&format!("{}.bn.running_mean", self.name), self.c_out)?;
                    let var = ex.store.running_vec(&format!("{}.bn.running_var", self.name), self.c_out)?;
                    ex.graph.batchnorm_inference(y, gamma, beta, &mean, &var, BN_EPSILON)?
                }
            };
        }
        if self.relu {
            y = ex.graph.relu(y)?;
        }
        Ok(y)
    }
}

/// Inverted residual unit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IruBlock {
    pub expand: ConvUnit,
    pub depthwise: ConvUnit,
    pub project: ConvUnit,
    pub shortcut: bool,
}

impl IruBlock {
    pub fn new(prefix: &str, c_in: usize, spec: &BlockSpec) -> Self {
        let hidden = spec.expansion * c_in;
        let mut project = ConvUnit::pointwise(format!("{prefix}.project"), hidden, spec.filters);
        project.relu = false;
        IruBlock {
            expand: ConvUnit::pointwise(format!("{prefix}.expand"), c_in, hidden),
            depthwise: ConvUnit::new(
                format!("{prefix}.depthwise"),
                hidden,
                hidden,
                spec.kernel,
                ConvGeometry::same(spec.stride, spec.dilation, hidden),
            ),
            project,
            shortcut: spec.stride == 1 && c_in == spec.filters,
        }
    }

    fn params(&self, out: &mut Vec<ParamSpec>) {
        self.expand.params(out);
        self.depthwise.params(out);
        self.project.params(out);
    }

    pub fn apply<T: Real>(&self, ex: &mut Executor<'_, T>, x: NodeId) -> Result<NodeId> {
        let h = self.expand.apply(ex, x)?;
        let h = self.depthwise.apply(ex, h)?;
        let y = self.project.apply(ex, h)?;
        if self.shortcut {
            ex.graph.add(y, x)
        } else {
            Ok(y)
        }
    }
}

/// Atrous separable convolution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AscBlock {
    pub depthwise: ConvUnit,
    pub pointwise: ConvUnit,
}

impl AscBlock {
    pub fn new(prefix: &str, c_in: usize, filters: usize, kernel: usize, stride: usize, dilation: usize) -> Self {
        AscBlock {
            depthwise: ConvUnit::new(
                format!("{prefix}.depthwise"),
                c_in,
                c_in,
                kernel,
                ConvGeometry::same(stride, dilation, c_in),
            ),
            pointwise: ConvUnit::pointwise(format!("{prefix}.pointwise"), c_in, filters),
        }
    }

    fn params(&self, out: &mut Vec<ParamSpec>) {
        self.depthwise.params(out);
        self.pointwise.params(out);
    }

    pub fn apply<T: Real>(&self, ex: &mut Executor<'_, T>, x: NodeId) -> Result<NodeId> {
        let h = self.depthwise.apply(ex, x)?;
        self.pointwise.apply(ex, h)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AsppBlock {
    pub branch: ConvUnit,
    pub atrous: Vec<AscBlock>,
    pub pool: ConvUnit,
    pub fuse: ConvUnit,
}

impl AsppBlock {
    pub fn new(prefix: &str, c_in: usize, width: usize, rates: &[usize], kernel: usize) -> Result<Self> {
        if rates.is_empty() {
            return Err(Error::Config(format!("{prefix}: ASPP needs at least one atrous rate")));
        }
        Ok(AsppBlock {
            branch: ConvUnit::pointwise(format!("{prefix}.branch"), c_in, width),
            atrous: rates
                .iter()
                .enumerate()
                .map(|(i, &r)| AscBlock::new(&format!("{prefix}.atrous{i}"), c_in, width, kernel, 1, r))
                .collect(),
            pool: ConvUnit::pointwise(format!("{prefix}.pool"), c_in, width),
            fuse: ConvUnit::pointwise(format!("{prefix}.fuse"), (rates.len() + 2) * width, width),
        })
    }

    fn params(&self, out: &mut Vec<ParamSpec>) {
        self.branch.params(out);
        for a in &self.atrous {
            a.params(out);
        }
        self.pool.params(out);
        self.fuse.params(out);
    }

    pub fn apply<T: Real>(&self, ex: &mut Executor<'_, T>, x: NodeId) -> Result<NodeId> {
        let s = ex.graph.shape(x);
        let mut branches = vec![self.branch.apply(ex, x)?];
        for a in &self.atrous {
            branches.push(a.apply(ex, x)?);
        }
        let pooled = ex.graph.global_avg_pool(x)?;
        let pooled = self.pool.apply(ex, pooled)?;
        branches.push(ex.graph.resize(pooled, s.h, s.w)?);
        let cat = ex.graph.concat(&branches)?;
        self.fuse.apply(ex, cat)
    }
}

/// One compiled entry of the block list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Stage {
    Conv(ConvUnit),
    Iru(IruBlock),
    Asc(AscBlock),
    Aspp(AsppBlock),
    Upsample(usize),
    /// Index of the tapped stage and the 1×1 reduction applied to it.
    ConcatSkip { tap: usize, reduce: ConvUnit },
    Head(ConvUnit),
}

impl Stage {
    pub fn compile(index: usize, c_in: usize, spec: &BlockSpec, tap_stage: Option<(usize, usize)>) -> Result<Self> {
        let prefix = format!("b{index:02}.{}", spec.kind.as_str());
        Ok(match spec.kind {
            BlockKind::Conv => Stage::Conv(ConvUnit::new(
                prefix,
                c_in,
                spec.filters,
                spec.kernel,
                ConvGeometry::same(spec.stride, spec.dilation, 1),
            )),
            BlockKind::Iru => Stage::Iru(IruBlock::new(&prefix, c_in, spec)),
            BlockKind::Asc => Stage::Asc(AscBlock::new(
                &prefix,
                c_in,
                spec.filters,
                spec.kernel,
                spec.stride,
                spec.dilation,
            )),
            BlockKind::Aspp => Stage::Aspp(AsppBlock::new(&prefix, c_in, spec.filters, &spec.rates, spec.kernel)?),
            BlockKind::Upsample => Stage::Upsample(spec.stride),
            BlockKind::ConcatSkip => {
                let (tap, tap_channels) = tap_stage
                    .ok_or_else(|| Error::Config(format!("block {index}: concat-skip without a resolved tap")))?;
                Stage::ConcatSkip {
                    tap,
                    reduce: ConvUnit::pointwise(format!("{prefix}.reduce"), tap_channels, spec.filters),
                }
            }
            BlockKind::Head => {
                let mut unit = ConvUnit::new(prefix, c_in, spec.filters, spec.kernel, ConvGeometry::default());
                unit.bias = true;
                unit.bn = false;
                unit.relu = false;
                Stage::Head(unit)
            }
        })
    }

    pub fn params(&self, out: &mut Vec<ParamSpec>) {
        match self {
            Stage::Conv(u) | Stage::Head(u) | Stage::ConcatSkip { reduce: u, .. } => u.params(out),
            Stage::Iru(b) => b.params(out),
            Stage::Asc(b) => b.params(out),
            Stage::Aspp(b) => b.params(out),
            Stage::Upsample(_) => {}
        }
    }

    /// `outputs` holds the output node of every earlier stage.
    pub fn apply<T: Real>(&self, ex: &mut Executor<'_, T>, x: NodeId, outputs: &[NodeId]) -> Result<NodeId> {
        match self {
            Stage::Conv(u) => u.apply(ex, x),
            Stage::Iru(b) => b.apply(ex, x),
            Stage::Asc(b) => b.apply(ex, x),
            Stage::Aspp(b) => b.apply(ex, x),
            Stage::Upsample(f) => ex.graph.upsample(x, *f),
            Stage::ConcatSkip { tap, reduce } => {
                let r = reduce.apply(ex, outputs[*tap])?;
                ex.graph.concat(&[x, r])
            }
            Stage::Head(u) => {
                let logits = u.apply(ex, x)?;
                ex.graph.sigmoid(logits)
            }
        }
    }
}

fn run_eager<T: Real>(
    x: &Tensor<T>,
    params: &ParamStore<T>,
    mode: Mode,
    f: impl FnOnce(&mut Executor<'_, T>, NodeId) -> Result<NodeId>,
) -> Result<Tensor<T>> {
    let mut ex = Executor::new(Graph::inference(), params, mode);
    let input = ex.graph.leaf(x.clone());
    let out = f(&mut ex, input)?;
    Ok(ex.graph.value(out)?.clone())
}

/// Parameter names and shapes of a standalone block named `prefix`.
pub fn block_params(prefix: &str, c_in: usize, spec: &BlockSpec) -> Result<Vec<ParamSpec>> {
    let mut out = Vec::new();
    match spec.kind {
        BlockKind::Iru => IruBlock::new(prefix, c_in, spec).params(&mut out),
        BlockKind::Asc => {
            AscBlock::new(prefix, c_in, spec.filters, spec.kernel, spec.stride, spec.dilation).params(&mut out)
        }
        BlockKind::Aspp => AsppBlock::new(prefix, c_in, spec.filters, &spec.rates, spec.kernel)?.params(&mut out),
        other => {
            return Err(Error::Config(format!(
                "block_params supports iru/asc/aspp, got {}",
                other.as_str()
            )))
        }
    }
    Ok(out)
}

/// Standalone inverted residual unit whose parameters are named `prefix.*`.
pub fn iru_forward<T: Real>(
    x: &Tensor<T>,
    spec: &BlockSpec,
    params: &ParamStore<T>,
    prefix: &str,
    mode: Mode,
) -> Result<Tensor<T>> {
    let block = IruBlock::new(prefix, x.shape().c, spec);
    run_eager(x, params, mode, |ex, id| block.apply(ex, id))
}

pub fn asc_forward<T: Real>(
    x: &Tensor<T>,
    spec: &BlockSpec,
    params: &ParamStore<T>,
    prefix: &str,
    mode: Mode,
) -> Result<Tensor<T>> {
    let block = AscBlock::new(prefix, x.shape().c, spec.filters, spec.kernel, spec.stride, spec.dilation);
    run_eager(x, params, mode, |ex, id| block.apply(ex, id))
}

pub fn aspp_forward<T: Real>(
    x: &Tensor<T>,
    width: usize,
    rates: &[usize],
    params: &ParamStore<T>,
    prefix: &str,
    mode: Mode,
) -> Result<Tensor<T>> {
    let block = AsppBlock::new(prefix, x.shape().c, width, rates, 3)?;
    run_eager(x, params, mode, |ex, id| block.apply(ex, id))
}
