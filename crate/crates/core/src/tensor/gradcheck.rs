//! Central finite-difference gradient checking.
//!
//! The scalar probed is a fixed random linear functional of the op's output,
//! `L = Σ wᵢ yᵢ` with `wᵢ ~ U(-1, 1)`. A plain sum is the special case `w = 1`,
//! but for ops whose outputs sum to a constant (batchnorm in train mode) it has
//! an identically zero input gradient and would check nothing.
//!
//! Networks with ReLUs are only piecewise smooth. When a coordinate fails the
//! screen, it is probed again at half the step. On a smooth function the gap
//! between the one-sided slopes halves with the step and the central difference
//! stays put; if neither holds and the slope gap covers the analytic/numeric gap,
//! the probe straddled a kink, provided that slope gap stands clear of f64
//! round-off. Such coordinates are counted in
//! [`GradCheckReport::nonsmooth`] and left out of the maximum.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, NodeId, Real, Tensor};
use crate::{Error, Result};

/// An op (or composite of ops) that can be built on a [`Graph`] at any precision.
pub trait Differentiable {
    fn build<T: Real>(&self, graph: &mut Graph<T>, inputs: &[NodeId]) -> Result<NodeId>;
}

/// Precision of the analytic gradient. Finite differences always run in `f64`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub precision: Precision,
    /// Central-difference step.
    pub step: f64,
    /// Denominator floor of the relative error, so near-zero gradients are
    /// compared absolutely.
    pub floor: f64,
    /// Check at most this many randomly chosen coordinates per input.
    pub max_coords: Option<usize>,
    pub seed: u64,
    /// Relative error above which a coordinate is re-probed for a kink. A slope
    /// jump must also exceed this fraction of the gradient to count as one.
    pub kink_screen: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            precision: Precision::F64,
            step: 1e-5,
            floor: 1e-3,
            max_coords: None,
            seed: 0,
            kink_screen: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input, element)` with the largest error.
    pub worst: (usize, usize),
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub coords_checked: usize,
    /// Coordinates excluded because the finite difference crossed a kink.
    pub nonsmooth: usize,
}

fn forward<T: Real, D: Differentiable + ?Sized>(op: &D, inputs: &[Tensor<T>]) -> Result<(Graph<T>, Vec<NodeId>, NodeId)> {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = op.build(&mut g, &ids)?;
    Ok((g, ids, out))
}

fn analytic<T: Real, D: Differentiable + ?Sized>(op: &D, inputs: &[Tensor<f64>], weights: &[f64]) -> Result<Vec<Vec<f64>>> {
    let cast: Vec<Tensor<T>> = inputs.iter().map(|t| t.cast()).collect();
    let (g, ids, out) = forward(op, &cast)?;
    let shape = g.shape(out);
    let seed = Tensor::from_vec(shape, weights.iter().map(|&w| T::of(w)).collect())?;
    let grads = g.backward(out, seed)?;
    Ok(ids
        .iter()
        .zip(inputs)
        .map(|(&id, t)| match grads.get(id) {
            Some(gr) => gr.data().iter().map(|v| v.as_f64()).collect(),
            None => vec![0.0; t.len()],
        })
        .collect())
}

fn probe<D: Differentiable + ?Sized>(op: &D, inputs: &[Tensor<f64>], weights: &[f64]) -> Result<f64> {
    let (g, _, out) = forward(op, inputs)?;
    Ok(g.value(out)?.data().iter().zip(weights).map(|(y, w)| y * w).sum())
}

/// Compares the analytic gradient of `op` against central finite differences and
/// returns the largest relative error `|a - n| / max(|a|, |n|, floor)`.
pub fn grad_check<D: Differentiable + ?Sized>(
    op: &D,
    inputs: &[Tensor<f64>],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    // Analytic and numeric paths must see the same point, so snap inputs to the
    // analytic precision first.
    let inputs: Vec<Tensor<f64>> = match opts.precision {
        Precision::F64 => inputs.to_vec(),
        Precision::F32 => inputs.iter().map(|t| t.cast::<f32>().cast()).collect(),
    };
    let (g, _, out) = forward::<f64, D>(op, &inputs)?;
    let out_len = g.value(out)?.len();
    drop(g);
    let weights: Vec<f64> = (0..out_len).map(|_| rng.random_range(-1.0..1.0)).collect();

    let analytic = match opts.precision {
        Precision::F64 => analytic::<f64, D>(op, &inputs, &weights)?,
        Precision::F32 => analytic::<f32, D>(op, &inputs, &weights)?,
    };
    for (i, grad) in analytic.iter().enumerate() {
        if let Some(j) = grad.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("analytic gradient of input {i} at element {j}")));
        }
    }

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        coords_checked: 0,
        nonsmooth: 0,
    };
    let centre = probe(op, &inputs, &weights)?;
    let mut work = inputs.clone();
    for i in 0..inputs.len() {
        let len = inputs[i].len();
        let coords: Vec<usize> = match opts.max_coords {
            Some(k) if k < len => sample(&mut rng, len, k).into_vec(),
            _ => (0..len).collect(),
        };
        for j in coords {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + opts.step;
            let plus = probe(op, &work, &weights)?;
            work[i].data_mut()[j] = orig - opts.step;
            let minus = probe(op, &work, &weights)?;
            work[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic[i][j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
            report.coords_checked += 1;
            if rel > opts.kink_screen {
                let half = opts.step / 2.0;
                work[i].data_mut()[j] = orig + half;
                let plus2 = probe(op, &work, &weights)?;
                work[i].data_mut()[j] = orig - half;
                let minus2 = probe(op, &work, &weights)?;
                work[i].data_mut()[j] = orig;
                let split = ((plus - centre) - (centre - minus)).abs() / opts.step;
                let split2 = ((plus2 - centre) - (centre - minus2)).abs() / half;
                let numeric2 = (plus2 - minus2) / (2.0 * half);
                let gap = (a - numeric).abs();
                // Round-off in a second difference of f64 probes, scaled by the step.
                let scale = centre.abs().max(plus.abs()).max(minus.abs()).max(1.0);
                let noise = 8.0 * f64::EPSILON * scale / opts.step;
                let magnitude = a.abs().max(numeric.abs()).max(opts.floor);
                let real_jump = split >= gap && split > 1e3 * noise && split > opts.kink_screen * magnitude;
                let slope_jump = (split2 / split - 0.5).abs() > 0.2;
                let step_dependent = (numeric - numeric2).abs() > 0.25 * gap;
                if real_jump && (slope_jump || step_dependent) {
                    report.nonsmooth += 1;
                    continue;
                }
            }
            if rel > report.max_rel_error || !rel.is_finite() {
                report.max_rel_error = rel;
                report.worst = (i, j);
                report.analytic_at_worst = a;
                report.numeric_at_worst = numeric;
            }
        }
    }
    Ok(report)
}
