//! The eight dihedral transforms of a square patch.
//!
//! Rotations are counter-clockwise with the origin at the top-left pixel. The
//! order is identity, 90°, 180°, 270°, followed by the horizontal flip of each.

use crate::raster::{RasterScene, Samples};
use crate::{Error, Result, Tensor};

pub const AUGMENTATIONS: usize = 8;

/// Source index of `out[i][j]` for transform `k` on an `n × n` plane.
#[inline]
fn source(k: usize, n: usize, i: usize, j: usize) -> (usize, usize) {
    // Undo the flip first: transform k ≥ 4 is hflip(rot_{k-4}(x)).
    let j = if k >= AUGMENTATIONS / 2 { n - 1 - j } else { j };
    match k % 4 {
        0 => (i, j),
        1 => (j, n - 1 - i),
        2 => (n - 1 - i, n - 1 - j),
        _ => (n - 1 - j, i),
    }
}

fn transform_planes<S: Copy>(data: &[S], n: usize, k: usize) -> Vec<S> {
    let plane = n * n;
    let mut out = Vec::with_capacity(data.len());
    for chunk in data.chunks_exact(plane) {
        for i in 0..n {
            for j in 0..n {
                let (si, sj) = source(k, n, i, j);
                out.push(chunk[si * n + sj]);
            }
        }
    }
    out
}

fn check_square<T: crate::Real>(t: &Tensor<T>, what: &str) -> Result<usize> {
    let s = t.shape();
    if s.h != s.w {
        return Err(Error::Shape(format!("{what} must be square, got {}x{}", s.h, s.w)));
    }
    Ok(s.h)
}

/// Applies transform `k` (0..8) to every plane of a square tensor.
pub fn transform<T: crate::Real>(t: &Tensor<T>, k: usize) -> Result<Tensor<T>> {
    if k >= AUGMENTATIONS {
        return Err(Error::Range(format!("transform index {k} is not in 0..8")));
    }
    let n = check_square(t, "tensor")?;
    Tensor::from_vec(t.shape(), transform_planes(t.data(), n, k))
}

/// Counter-clockwise quarter turn: `out[i][j] = in[j][n-1-i]`.
pub fn rot90<T: crate::Real>(t: &Tensor<T>) -> Result<Tensor<T>> {
    transform(t, 1)
}

/// Mirror left-right: `out[i][j] = in[i][n-1-j]`.
pub fn hflip<T: crate::Real>(t: &Tensor<T>) -> Result<Tensor<T>> {
    transform(t, 4)
}

fn check_pair<T: crate::Real>(image: &Tensor<T>, mask: &Tensor<T>) -> Result<usize> {
    let n = check_square(image, "patch")?;
    let (si, sm) = (image.shape(), mask.shape());
    if (si.n, si.h, si.w) != (sm.n, sm.h, sm.w) {
        return Err(Error::Shape(format!("mask {sm} does not align with patch {si}")));
    }
    Ok(n)
}

/// All eight (patch, mask) variants; the first is the input itself.
pub fn augment_patch<T: crate::Real>(image: &Tensor<T>, mask: &Tensor<T>) -> Result<Vec<(Tensor<T>, Tensor<T>)>> {
    let n = check_pair(image, mask)?;
    (0..AUGMENTATIONS)
        .map(|k| {
            Ok((
                Tensor::from_vec(image.shape(), transform_planes(image.data(), n, k))?,
                Tensor::from_vec(mask.shape(), transform_planes(mask.data(), n, k))?,
            ))
        })
        .collect()
}

fn transform_samples(samples: &Samples, n: usize, k: usize) -> Samples {
    match samples {
        Samples::U8(v) => Samples::U8(transform_planes(v, n, k)),
        Samples::U16(v) => Samples::U16(transform_planes(v, n, k)),
        Samples::F32(v) => Samples::F32(transform_planes(v, n, k)),
    }
}

/// The eight variants of a square scene and its mask, keeping the raw dtype.
pub fn augment_scene(scene: &RasterScene, mask: &RasterScene) -> Result<Vec<(RasterScene, RasterScene)>> {
    if scene.width != scene.height {
        return Err(Error::Shape(format!(
            "patch must be square, got {}x{}",
            scene.width, scene.height
        )));
    }
    if (mask.width, mask.height) != (scene.width, scene.height) {
        return Err(Error::Shape(format!(
            "mask {}x{} does not align with patch {}x{}",
            mask.width, mask.height, scene.width, scene.height
        )));
    }
    let n = scene.width;
    (0..AUGMENTATIONS)
        .map(|k| {
            Ok((
                RasterScene::new(n, n, scene.bands, transform_samples(&scene.data, n, k), scene.tag.clone())?,
                RasterScene::new(n, n, 1, transform_samples(&mask.data, n, k), mask.tag.clone())?,
            ))
        })
        .collect()
}
