//! Sliding-window inference over whole scenes.
//!
//! Windows are clamped to the scene border rather than padded, overlapping
//! probabilities are merged by maximum, and the merged canvas is thresholded with
//! `>=`. Because max is associative, commutative and idempotent the result does
//! not depend on the order in which windows finish.

use rayon::prelude::*;

use crate::net::Network;
use crate::raster::{extract_patch, RasterScene, Samples, MASK_CLEAR, MASK_CLOUD};
use crate::{Error, Result};

pub const DEFAULT_WINDOW: usize = 512;
pub const DEFAULT_OVERLAP: usize = 50;
pub const DEFAULT_THRESHOLD: f32 = 0.5;

/// Window origins for one scene, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WindowPlan {
    pub window: usize,
    pub overlap: usize,
    pub width: usize,
    pub height: usize,
    pub x_offsets: Vec<usize>,
    pub y_offsets: Vec<usize>,
}

impl WindowPlan {
    pub fn stride(&self) -> usize {
        self.window - self.overlap
    }

    pub fn len(&self) -> usize {
        self.x_offsets.len() * self.y_offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(x, y)` origins in row-major order.
    pub fn offsets(&self) -> Vec<(usize, usize)> {
        self.y_offsets
            .iter()
            .flat_map(|&y| self.x_offsets.iter().map(move |&x| (x, y)))
            .collect()
    }
}

/// Offsets along one axis: `0, s, 2s, …` while the window fits, plus `dim - window`
/// if the regular steps stop short of the border.
pub fn axis_offsets(dim: usize, window: usize, overlap: usize) -> Result<Vec<usize>> {
    if window == 0 || overlap >= window {
        return Err(Error::Config(format!(
            "overlap must be smaller than the window, got window {window} and overlap {overlap}"
        )));
    }
    if window > dim {
        return Err(Error::Config(format!("window {window} is larger than the scene side {dim}")));
    }
    let stride = window - overlap;
    let mut offsets: Vec<usize> = (0..).map(|i| i * stride).take_while(|o| o + window <= dim).collect();
    let last = dim - window;
    if offsets.last() != Some(&last) {
        offsets.push(last);
    }
    Ok(offsets)
}

pub fn plan_windows(width: usize, height: usize, window: usize, overlap: usize) -> Result<WindowPlan> {
    Ok(WindowPlan {
        window,
        overlap,
        width,
        height,
        x_offsets: axis_offsets(width, window, overlap)?,
        y_offsets: axis_offsets(height, window, overlap)?,
    })
}

/// Max-merged cloud probabilities and per-pixel window coverage.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityCanvas {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f32>,
    pub coverage: Vec<u32>,
}

impl ProbabilityCanvas {
    pub fn new(width: usize, height: usize) -> Self {
        ProbabilityCanvas {
            width,
            height,
            values: vec![0.0; width * height],
            coverage: vec![0; width * height],
        }
    }

    /// Merges a row-major `win_w × win_h` block of probabilities at `(x, y)`.
    pub fn merge_window(&mut self, probs: &[f32], win_w: usize, win_h: usize, x: usize, y: usize) -> Result<()> {
        if x + win_w > self.width || y + win_h > self.height {
            return Err(Error::Range(format!(
                "{win_w}x{win_h} window at ({x}, {y}) falls outside the {}x{} canvas",
                self.width, self.height
            )));
        }
        if probs.len() != win_w * win_h {
            return Err(Error::Shape(format!(
                "window holds {} values, expected {win_w}x{win_h}",
                probs.len()
            )));
        }
        for (r, src) in probs.chunks_exact(win_w).enumerate() {
            let base = (y + r) * self.width + x;
            for (dst, &p) in self.values[base..base + win_w].iter_mut().zip(src) {
                *dst = dst.max(p);
            }
            for c in &mut self.coverage[base..base + win_w] {
                *c += 1;
            }
        }
        Ok(())
    }

    pub fn min_coverage(&self) -> u32 {
        self.coverage.iter().copied().min().unwrap_or(0)
    }

    /// 255 where the probability is at least `threshold`, 0 elsewhere.
    pub fn threshold(&self, threshold: f32, tag: impl Into<String>) -> Result<RasterScene> {
        let data = self
            .values
            .iter()
            .map(|&p| if p >= threshold { MASK_CLOUD } else { MASK_CLEAR })
            .collect();
        RasterScene::mask(self.width, self.height, data, tag)
    }

    /// The canvas as a single-band f32 raster.
    pub fn to_scene(&self, tag: impl Into<String>) -> Result<RasterScene> {
        RasterScene::new(self.width, self.height, 1, Samples::F32(self.values.clone()), tag)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegmentOptions {
    pub window: usize,
    pub overlap: usize,
    pub threshold: f32,
}

impl Default for SegmentOptions {
    fn default() -> Self {
        SegmentOptions {
            window: DEFAULT_WINDOW,
            overlap: DEFAULT_OVERLAP,
            threshold: DEFAULT_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segmentation {
    pub mask: RasterScene,
    pub canvas: ProbabilityCanvas,
}

/// Plans windows over `scene` and segments it.
pub fn segment_scene(scene: &RasterScene, net: &Network, opts: &SegmentOptions) -> Result<Segmentation> {
    let plan = plan_windows(scene.width, scene.height, opts.window, opts.overlap)?;
    segment_windows(scene, net, opts, &plan.offsets())
}

/// Segments `scene` using the given window origins, in the given order. Windows run
/// in parallel in groups sized to the thread pool and are merged as each group
/// completes.
pub fn segment_windows(
    scene: &RasterScene,
    net: &Network,
    opts: &SegmentOptions,
    offsets: &[(usize, usize)],
) -> Result<Segmentation> {
    let bands = net.config().input_channels;
    if scene.bands != bands {
        return Err(Error::Config(format!(
            "scene has {} bands, the network expects {bands}",
            scene.bands
        )));
    }
    let size = opts.window;
    let mut canvas = ProbabilityCanvas::new(scene.width, scene.height);
    let group = rayon::current_num_threads().max(1);
    for chunk in offsets.chunks(group) {
        let probs: Vec<Result<Vec<f32>>> = chunk
            .par_iter()
            .map(|&(x, y)| {
                let patch = extract_patch(scene, x, y, size)?;
                Ok(net.infer(&patch.pixels)?.into_data())
            })
            .collect();
        for (&(x, y), p) in chunk.iter().zip(probs) {
            let p = p.map_err(|e| e.context(format!("window at ({x}, {y})")))?;
            canvas.merge_window(&p, size, size, x, y)?;
        }
    }
    let mask = canvas.threshold(opts.threshold, format!("mask of {}", scene.tag))?;
    Ok(Segmentation { mask, canvas })
}
