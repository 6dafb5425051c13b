//! Gradient-check cases shared by the gradient tests and the acceptance run.

#![allow(dead_code)]

use std::ops::Range;

use cloudseg::net::{ArchitectureConfig, BlockKind, Mode, Network, NetworkProbe, ParamKind};
use cloudseg::tensor::ops::{ConvGeometry, Padding, BN_EPSILON};
use cloudseg::tensor::{grad_check, Differentiable, GradCheckOptions, Graph, NodeId, Precision};
use cloudseg::{Real, Result, Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const INSTANCES: u64 = 20;
pub const TOL_F64: f64 = 1e-5;
pub const TOL_F32: f64 = 1e-3;
/// Relative-error floor for f32 checks: errors below 1e-5 absolute on gradients
/// smaller than 1e-2 are single-precision round-off, not bugs.
pub const FLOOR_F32: f64 = 1e-2;

#[derive(Debug, Clone)]
pub struct CaseReport {
    pub name: String,
    pub instances: u64,
    pub worst_f64: f64,
    pub worst_f32: f64,
    pub nonsmooth: usize,
    pub failures: Vec<String>,
}

impl CaseReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn summary(&self) -> String {
        format!(
            "{}: {} instances, worst f64 {:.2e}, worst f32 {:.2e}, {} kink coords skipped",
            self.name, self.instances, self.worst_f64, self.worst_f32, self.nonsmooth
        )
    }
}

pub fn random(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_vec(shape, (0..shape.numel()).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Values bounded away from zero, for ops with a kink there.
pub fn away_from_zero(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    random(shape, rng).map(|v| v.signum() * (0.1 + v.abs()))
}

fn vector(n: usize, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::vector((0..n).map(|_| rng.random_range(lo..hi)).collect())
}

/// Checks `op` on one random input set per seed, in both precisions.
pub fn check_op<D: Differentiable>(
    name: &str,
    op: &D,
    seeds: Range<u64>,
    max_coords: Option<usize>,
    make: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>>,
) -> CaseReport {
    let mut report = CaseReport {
        name: name.to_string(),
        instances: seeds.end - seeds.start,
        worst_f64: 0.0,
        worst_f32: 0.0,
        nonsmooth: 0,
        failures: Vec::new(),
    };
    for seed in seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = make(&mut rng);
        for precision in [Precision::F64, Precision::F32] {
            let (tol, floor) = match precision {
                Precision::F64 => (TOL_F64, GradCheckOptions::default().floor),
                Precision::F32 => (TOL_F32, FLOOR_F32),
            };
            let opts = GradCheckOptions {
                precision,
                seed,
                max_coords,
                floor,
                kink_screen: tol,
                ..Default::default()
            };
            let r = match grad_check(op, &inputs, &opts) {
                Ok(r) => r,
                Err(e) => {
                    report.failures.push(format!("{name} {precision:?} instance {seed}: {e}"));
                    continue;
                }
            };
            report.nonsmooth += r.nonsmooth;
            let slot = match precision {
                Precision::F64 => &mut report.worst_f64,
                Precision::F32 => &mut report.worst_f32,
            };
            *slot = slot.max(r.max_rel_error);
            if r.max_rel_error >= tol {
                report.failures.push(format!(
                    "{name} {precision:?} instance {seed}: rel error {:.3e} at {:?} (analytic {}, numeric {})",
                    r.max_rel_error, r.worst, r.analytic_at_worst, r.numeric_at_worst
                ));
            }
        }
    }
    report
}

pub struct Conv {
    pub geom: ConvGeometry,
    pub bias: bool,
}

impl Differentiable for Conv {
    fn build<T: Real>(&self, g: &mut Graph<T>, x: &[NodeId]) -> Result<NodeId> {
        g.conv2d(x[0], x[1], self.bias.then(|| x[2]), self.geom)
    }
}

pub fn conv2d_cases() -> Vec<CaseReport> {
    let plain = Conv {
        geom: ConvGeometry::default(),
        bias: true,
    };
    let strided = Conv {
        geom: ConvGeometry::same(2, 2, 1),
        bias: false,
    };
    let valid = Conv {
        geom: ConvGeometry {
            padding: Padding::Valid,
            ..ConvGeometry::default()
        },
        bias: false,
    };
    vec![
        check_op("conv2d", &plain, 0..INSTANCES, None, |rng| {
            vec![
                random(Shape::new(1, 2, 5, 5), rng),
                random(Shape::new(3, 2, 3, 3), rng),
                vector(3, -1.0, 1.0, rng),
            ]
        }),
        check_op("conv2d s2 d2", &strided, 0..INSTANCES, None, |rng| {
            vec![random(Shape::new(2, 3, 7, 6), rng), random(Shape::new(2, 3, 3, 3), rng)]
        }),
        check_op("conv2d valid", &valid, 0..INSTANCES, None, |rng| {
            vec![random(Shape::new(1, 2, 5, 5), rng), random(Shape::new(2, 2, 3, 3), rng)]
        }),
    ]
}

pub fn depthwise_cases() -> Vec<CaseReport> {
    let op = Conv {
        geom: ConvGeometry::same(1, 3, 4),
        bias: false,
    };
    vec![check_op("depthwise d3", &op, 0..INSTANCES, None, |rng| {
        vec![random(Shape::new(2, 4, 7, 7), rng), random(Shape::new(4, 1, 3, 3), rng)]
    })]
}

pub struct BnTrain;

impl Differentiable for BnTrain {
    fn build<T: Real>(&self, g: &mut Graph<T>, x: &[NodeId]) -> Result<NodeId> {
        g.batchnorm_train(x[0], x[1], x[2], BN_EPSILON)
    }
}

pub struct BnInference {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl Differentiable for BnInference {
    fn build<T: Real>(&self, g: &mut Graph<T>, x: &[NodeId]) -> Result<NodeId> {
        let mean: Vec<T> = self.mean.iter().map(|&v| T::of(v)).collect();
        let var: Vec<T> = self.var.iter().map(|&v| T::of(v)).collect();
        g.batchnorm_inference(x[0], x[1], x[2], &mean, &var, BN_EPSILON)
    }
}

pub fn batchnorm_cases() -> Vec<CaseReport> {
    let inference = BnInference {
        mean: vec![0.1, -0.2, 0.3],
        var: vec![0.5, 1.0, 2.0],
    };
    vec![
        check_op("batchnorm train", &BnTrain, 0..INSTANCES, None, |rng| {
            vec![
                random(Shape::new(2, 4, 3, 3), rng),
                vector(4, 0.5, 1.5, rng),
                vector(4, -1.0, 1.0, rng),
            ]
        }),
        check_op("batchnorm inference", &inference, 0..INSTANCES, None, |rng| {
            vec![
                random(Shape::new(2, 3, 3, 3), rng),
                random(Shape::new(1, 3, 1, 1), rng),
                random(Shape::new(1, 3, 1, 1), rng),
            ]
        }),
    ]
}

pub struct Relu;

impl Differentiable for Relu {
    fn build<T: Real>(&self, g: &mut Graph<T>, x: &[NodeId]) -> Result<NodeId> {
        g.relu(x[0])
    }
}

pub struct Sigmoid;

impl Differentiable for Sigmoid {
    fn build<T: Real>(&self, g: &mut Graph<T>, x: &[NodeId]) -> Result<NodeId> {
        g.sigmoid(x[0])
    }
}

pub fn activation_cases() -> Vec<CaseReport> {
    vec![
        check_op("relu", &Relu, 0..INSTANCES, None, |rng| vec![away_from_zero(Shape::new(2, 3, 4, 4), rng)]),
        check_op("sigmoid", &Sigmoid, 0..INSTANCES, None, |rng| {
            vec![random(Shape::new(2, 3, 4, 4), rng).map(|v| 4.0 * v)]
        }),
    ]
}

pub struct Resize(pub usize, pub usize);

impl Differentiable for Resize {
    fn build<T: Real>(&self, g: &mut Graph<T>, x: &[NodeId]) -> Result<NodeId> {
        g.resize(x[0], self.0, self.1)
    }
}

pub fn resize_cases() -> Vec<CaseReport> {
    vec![
        check_op("upsample x4", &Resize(12, 16), 0..INSTANCES, None, |rng| {
            vec![random(Shape::new(2, 2, 3, 4), rng)]
        }),
        check_op("resize 1x1 broadcast", &Resize(5, 3), 0..INSTANCES, None, |rng| {
            vec![random(Shape::new(2, 3, 1, 1), rng)]
        }),
        check_op("resize uneven", &Resize(7, 5), 0..INSTANCES, None, |rng| {
            vec![random(Shape::new(1, 2, 3, 4), rng)]
        }),
    ]
}

pub struct ConcatAdd;

impl Differentiable for ConcatAdd {
    fn build<T: Real>(&self, g: &mut Graph<T>, x: &[NodeId]) -> Result<NodeId> {
        let cat = g.concat(&[x[0], x[1], x[0]])?;
        g.add(cat, x[2])
    }
}

pub struct Pool;

impl Differentiable for Pool {
    fn build<T: Real>(&self, g: &mut Graph<T>, x: &[NodeId]) -> Result<NodeId> {
        g.global_avg_pool(x[0])
    }
}

pub fn structural_cases() -> Vec<CaseReport> {
    vec![
        check_op("concat+add", &ConcatAdd, 0..INSTANCES, None, |rng| {
            vec![
                random(Shape::new(2, 2, 3, 3), rng),
                random(Shape::new(2, 1, 3, 3), rng),
                random(Shape::new(2, 5, 3, 3), rng),
            ]
        }),
        check_op("global avg pool", &Pool, 0..INSTANCES, None, |rng| {
            vec![random(Shape::new(2, 3, 4, 5), rng)]
        }),
    ]
}

pub fn primitive_cases() -> Vec<CaseReport> {
    [
        conv2d_cases(),
        depthwise_cases(),
        batchnorm_cases(),
        activation_cases(),
        resize_cases(),
        structural_cases(),
    ]
    .concat()
}

/// A random tiny network instance: He-initialised kernels from `seed`, batchnorm
/// scales and shifts drawn away from their defaults, and a random batch of eight
/// 8x8 inputs.
pub fn tiny_network_instance(seed: u64, rng: &mut ChaCha8Rng) -> (Network<f64>, Tensor<f64>) {
    let mut net = Network::build(ArchitectureConfig::tiny(), seed).unwrap().cast::<f64>();
    let specs = net.architecture().params.clone();
    for spec in specs {
        let (lo, hi) = match spec.kind {
            ParamKind::Gamma => (0.5, 1.5),
            ParamKind::Beta | ParamKind::Bias => (-0.5, 0.5),
            _ => continue,
        };
        let t = net.params_mut().trainable.get_mut(&spec.name).unwrap();
        t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(lo..hi));
    }
    let shape = Shape::new(8, 4, 8, 8);
    let x = Tensor::from_vec(shape, (0..shape.numel()).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
    (net, x)
}

/// Whole tiny network in train mode, with up to `max_coords` probed coordinates
/// per input and parameter tensor.
pub fn whole_network_case(instances: u64, max_coords: usize) -> CaseReport {
    let mut report = CaseReport {
        name: "tiny network".into(),
        instances,
        worst_f64: 0.0,
        worst_f32: 0.0,
        nonsmooth: 0,
        failures: Vec::new(),
    };
    for seed in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let (net, x) = tiny_network_instance(seed, &mut rng);
        let probe = NetworkProbe {
            arch: net.architecture(),
            mode: Mode::Train,
            running: net.params(),
        };
        let inputs = probe.inputs(&x, &net);
        let one = check_op("tiny network", &probe, seed..seed + 1, Some(max_coords), |_| inputs.clone());
        report.worst_f64 = report.worst_f64.max(one.worst_f64);
        report.worst_f32 = report.worst_f32.max(one.worst_f32);
        report.nonsmooth += one.nonsmooth;
        report.failures.extend(one.failures);
    }
    report
}

/// Parameter count computed straight from the config text, independent of the
/// compiled layout.
pub fn oracle_count(config: &ArchitectureConfig) -> usize {
    let conv_bn = |k: usize, cin: usize, cout: usize| k * k * cin * cout + 2 * cout;
    let mut c = config.input_channels;
    let mut taps = std::collections::HashMap::new();
    let mut total = 0;
    for b in &config.blocks {
        match b.kind {
            BlockKind::Conv => {
                total += conv_bn(b.kernel, c, b.filters);
                c = b.filters;
            }
            BlockKind::Iru => {
                let h = b.expansion * c;
                total += conv_bn(1, c, h) + (9 * h + 2 * h) + conv_bn(1, h, b.filters);
                c = b.filters;
            }
            BlockKind::Asc => {
                total += (9 * c + 2 * c) + (c * b.filters + 2 * b.filters);
                c = b.filters;
            }
            BlockKind::Aspp => {
                let w = b.filters;
                let r = b.rates.len();
                total += (c * w + 2 * w) + r * ((9 * c + 2 * c) + (c * w + 2 * w)) + (c * w + 2 * w);
                total += (r + 2) * w * w + 2 * w;
                c = w;
            }
            BlockKind::Upsample => {}
            BlockKind::ConcatSkip => {
                let tc: usize = taps[b.skip.as_ref().unwrap()];
                total += tc * b.filters + 2 * b.filters;
                c += b.filters;
            }
            BlockKind::Head => {
                total += c * b.filters + b.filters;
                c = b.filters;
            }
        }
        if let Some(t) = &b.tap {
            taps.insert(t.clone(), c);
        }
    }
    total
}
