//! Confusion matrices and the ACC / PREC / SN / SP report.
//!
//! Cloud (255) is the positive class. Splits are micro-averaged: one confusion
//! matrix is pooled over every pixel before the ratios are taken.

use std::fmt::Write as _;
use std::ops::{Add, AddAssign};
use std::path::Path;

use rayon::prelude::*;

use crate::net::Network;
use crate::raster::{RasterScene, Samples, MASK_CLEAR, MASK_CLOUD};
use crate::train::Sample;
use crate::{Error, Result, Tensor};

pub const REPORT_HEADER: &str = "method,acc,prec,sn,sp";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionMatrix {
    pub fn new(tp: u64, fp: u64, fn_: u64, tn: u64) -> Self {
        ConfusionMatrix { tp, fp, fn_, tn }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// Adds one pixel.
    pub fn record(&mut self, predicted: bool, actual: bool) {
        match (predicted, actual) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fn_ += 1,
            (false, false) => self.tn += 1,
        }
    }

    /// The matrix with clear treated as the positive class.
    pub fn swapped(&self) -> Self {
        ConfusionMatrix::new(self.tn, self.fn_, self.fp, self.tp)
    }
}

impl Add for ConfusionMatrix {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        ConfusionMatrix::new(self.tp + o.tp, self.fp + o.fp, self.fn_ + o.fn_, self.tn + o.tn)
    }
}

impl AddAssign for ConfusionMatrix {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl std::iter::Sum for ConfusionMatrix {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), Add::add)
    }
}

fn mask_samples<'a>(m: &'a RasterScene, role: &str) -> Result<&'a [u8]> {
    match &m.data {
        Samples::U8(v) if m.bands == 1 => Ok(v),
        _ => Err(Error::Validation(format!(
            "{role} mask must be a single u8 band, got {} {:?} bands",
            m.bands,
            m.dtype()
        ))),
    }
}

/// Pixelwise tally of two binary masks.
pub fn confusion(pred: &RasterScene, gt: &RasterScene) -> Result<ConfusionMatrix> {
    if (pred.width, pred.height) != (gt.width, gt.height) {
        return Err(Error::Shape(format!(
            "prediction is {}x{} but ground truth is {}x{}",
            pred.width, pred.height, gt.width, gt.height
        )));
    }
    let (p, g) = (mask_samples(pred, "predicted")?, mask_samples(gt, "ground-truth")?);
    let mut cm = ConfusionMatrix::default();
    for (i, (&a, &b)) in p.iter().zip(g).enumerate() {
        for (v, role) in [(a, "predicted"), (b, "ground-truth")] {
            if v != MASK_CLOUD && v != MASK_CLEAR {
                return Err(Error::Validation(format!(
                    "{role} mask holds {v} at (x={}, y={}); expected 0 or 255",
                    i % pred.width,
                    i / pred.width
                )));
            }
        }
        cm.record(a == MASK_CLOUD, b == MASK_CLOUD);
    }
    Ok(cm)
}

/// Tally of `probs >= threshold` against 0/1 targets.
pub fn confusion_from_probs(probs: &Tensor, target: &Tensor, threshold: f32) -> Result<ConfusionMatrix> {
    if probs.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "prediction {} and target {} differ",
            probs.shape(),
            target.shape()
        )));
    }
    let mut cm = ConfusionMatrix::default();
    for (&p, &y) in probs.data().iter().zip(target.data()) {
        cm.record(p >= threshold, y >= 0.5);
    }
    Ok(cm)
}

/// One report line; each metric is a percentage, `None` when its denominator is 0.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub method: String,
    pub acc: Option<f64>,
    pub prec: Option<f64>,
    pub sn: Option<f64>,
    pub sp: Option<f64>,
}

impl MetricsRow {
    pub fn values(&self) -> [Option<f64>; 4] {
        [self.acc, self.prec, self.sn, self.sp]
    }

    pub fn is_complete(&self) -> bool {
        self.values().iter().all(Option::is_some)
    }

    pub fn to_csv_line(&self) -> String {
        let mut s = self.method.clone();
        for v in self.values() {
            match v {
                Some(x) => {
                    let _ = write!(s, ",{x:.2}");
                }
                None => s.push_str(",NA"),
            }
        }
        s
    }
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| 100.0 * num as f64 / den as f64)
}

pub fn compute_metrics(method: &str, cm: &ConfusionMatrix) -> MetricsRow {
    MetricsRow {
        method: method.to_string(),
        acc: ratio(cm.tp + cm.tn, cm.total()),
        prec: ratio(cm.tp, cm.tp + cm.fp),
        sn: ratio(cm.tp, cm.tp + cm.fn_),
        sp: ratio(cm.tn, cm.tn + cm.fp),
    }
}

/// Pooled confusion matrix of `net` over `samples`, predicted in inference mode.
pub fn split_confusion(net: &Network, samples: &[Sample], threshold: f32) -> Result<ConfusionMatrix> {
    if samples.is_empty() {
        return Err(Error::Config("cannot evaluate an empty split".into()));
    }
    let parts: Vec<Result<ConfusionMatrix>> = samples
        .par_iter()
        .map(|s| confusion_from_probs(&net.infer(&s.image)?, &s.mask, threshold))
        .collect();
    parts.into_iter().sum()
}

/// Micro-averaged metrics of `net` over `samples`.
pub fn evaluate_split(method: &str, net: &Network, samples: &[Sample], threshold: f32) -> Result<MetricsRow> {
    Ok(compute_metrics(method, &split_confusion(net, samples, threshold)?))
}

pub fn render_report(rows: &[MetricsRow]) -> String {
    let mut s = format!("{REPORT_HEADER}\n");
    for r in rows {
        s.push_str(&r.to_csv_line());
        s.push('\n');
    }
    s
}

pub fn emit_report(rows: &[MetricsRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, render_report(rows)).map_err(|e| Error::io(path, e))
}

/// Parses text written by [`render_report`].
pub fn parse_report(text: &str) -> Result<Vec<MetricsRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(REPORT_HEADER) {
        return Err(Error::Format(format!("report must start with '{REPORT_HEADER}'")));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 5 {
                return Err(Error::Format(format!("report line {}: expected 5 fields", i + 2)));
            }
            let num = |f: &str| -> Result<Option<f64>> {
                if f == "NA" {
                    return Ok(None);
                }
                f.parse()
                    .map(Some)
                    .map_err(|_| Error::Format(format!("report line {}: bad number '{f}'", i + 2)))
            };
            Ok(MetricsRow {
                method: fields[0].to_string(),
                acc: num(fields[1])?,
                prec: num(fields[2])?,
                sn: num(fields[3])?,
                sp: num(fields[4])?,
            })
        })
        .collect()
}
