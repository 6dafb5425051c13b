//! Procedural 4-band scenes with ground-truth cloud masks.
//!
//! Clouds are soft-edged ellipses that are bright in every band. Each scene is a
//! pure function of `(seed, index)`: scene `i` draws from ChaCha stream `i`, so
//! scenes can be generated in any order or in parallel.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::raster::{write_msr, RasterScene, Samples, MASK_CLEAR, MASK_CLOUD, REFLECTANCE_SCALE};
use crate::{Error, Result};

pub const BANDS: usize = 4;
pub const MANIFEST_NAME: &str = "manifest.txt";
/// Retries per scene are encoded into the ChaCha stream id.
const MAX_RETRIES: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Terrain {
    Flat,
    Gradient,
    Speckle,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    /// Inclusive range of blobs per scene.
    pub blob_count: (usize, usize),
    /// Semi-axis range in pixels.
    pub blob_radius: (f64, f64),
    /// Reflectance range of cloud tops per band (R, G, B, NIR).
    pub cloud_brightness: [(f64, f64); BANDS],
    pub background_brightness: [(f64, f64); BANDS],
    pub terrain: Terrain,
    /// Accepted cloud-fraction range, inclusive.
    pub cloud_fraction: (f64, f64),
    pub max_retries: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            width: 512,
            height: 512,
            blob_count: (1, 6),
            blob_radius: (20.0, 120.0),
            cloud_brightness: [(0.55, 0.90), (0.55, 0.90), (0.58, 0.95), (0.60, 0.95)],
            background_brightness: [(0.03, 0.25), (0.04, 0.28), (0.02, 0.22), (0.10, 0.45)],
            terrain: Terrain::Speckle,
            cloud_fraction: (0.0, 0.95),
            max_retries: 50,
        }
    }
}

impl SynthConfig {
    /// A config scaled for `size × size` patches: blob radii follow the side length.
    pub fn for_patches(seed: u64, size: usize) -> Self {
        let s = size as f64;
        SynthConfig {
            seed,
            width: size,
            height: size,
            blob_count: (1, 3),
            blob_radius: (0.12 * s, 0.35 * s),
            cloud_fraction: (0.05, 0.85),
            ..Default::default()
        }
    }

    /// Scene defaults at 512 pixels and up; below that, blobs scale with the shorter side.
    pub fn for_size(seed: u64, width: usize, height: usize) -> Self {
        let side = width.min(height);
        let base = if side < 512 { Self::for_patches(seed, side) } else { Self { seed, ..Default::default() } };
        SynthConfig { width, height, ..base }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.width == 0 || self.height == 0 {
            return err(format!("scene size must be positive, got {}x{}", self.width, self.height));
        }
        if self.blob_count.0 > self.blob_count.1 {
            return err(format!("blob count range {:?} is empty", self.blob_count));
        }
        let (r0, r1) = self.blob_radius;
        if !(r0 > 0.0 && r0 <= r1 && r1.is_finite()) {
            return err(format!("blob radius range {:?} is invalid", self.blob_radius));
        }
        for b in 0..BANDS {
            let (c0, c1) = self.cloud_brightness[b];
            let (g0, g1) = self.background_brightness[b];
            if !(0.0 <= g0 && g0 <= g1 && g1 < c0 && c0 <= c1 && c1 <= 1.0) {
                return err(format!(
                    "band {b}: cloud brightness {:?} must lie strictly above background {:?} within [0, 1]",
                    self.cloud_brightness[b], self.background_brightness[b]
                ));
            }
        }
        let (f0, f1) = self.cloud_fraction;
        if !(0.0 <= f0 && f0 <= f1 && f1 < 1.0) {
            return err(format!("cloud fraction range {:?} must lie in [0, 1)", self.cloud_fraction));
        }
        if self.max_retries == 0 || self.max_retries > MAX_RETRIES {
            return err(format!("max_retries must be in 1..={MAX_RETRIES}"));
        }
        Ok(())
    }
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

struct Blob {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    cos: f64,
    sin: f64,
    brightness: [f64; BANDS],
}

impl Blob {
    /// Opacity falls linearly from 1 at 0.75 of the radius to 0 at 1.25, so the
    /// 0.5 contour is the ellipse itself.
    fn alpha(&self, x: f64, y: f64) -> f64 {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = (dx * self.cos + dy * self.sin) / self.rx;
        let v = (-dx * self.sin + dy * self.cos) / self.ry;
        let d = (u * u + v * v).sqrt();
        ((1.25 - d) / 0.5).clamp(0.0, 1.0)
    }
}

fn background(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let (w, h) = (cfg.width, cfg.height);
    let mut out = Vec::with_capacity(BANDS * w * h);
    match cfg.terrain {
        Terrain::Flat => {
            for range in cfg.background_brightness {
                let v = uniform(rng, range);
                out.extend(std::iter::repeat_n(v, w * h));
            }
        }
        Terrain::Gradient => {
            let angle = rng.random_range(0.0..std::f64::consts::TAU);
            let (c, s) = (angle.cos(), angle.sin());
            let span = (w as f64).hypot(h as f64).max(1.0);
            for (lo, hi) in cfg.background_brightness {
                let (a, b) = (uniform(rng, (lo, hi)), uniform(rng, (lo, hi)));
                for y in 0..h {
                    for x in 0..w {
                        let t = ((x as f64 * c + y as f64 * s) / span + 1.0) / 2.0;
                        out.push(a + (b - a) * t);
                    }
                }
            }
        }
        Terrain::Speckle => {
            // Smooth per-band base plus per-pixel noise, kept inside the band range.
            for (lo, hi) in cfg.background_brightness {
                let base = uniform(rng, (lo, hi));
                let amp = 0.25 * (hi - lo);
                for _ in 0..w * h {
                    out.push((base + rng.random_range(-amp..=amp)).clamp(lo, hi));
                }
            }
        }
    }
    out
}

fn attempt(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<u8>) {
    let (w, h) = (cfg.width, cfg.height);
    let mut pixels = background(cfg, rng);
    let count = rng.random_range(cfg.blob_count.0..=cfg.blob_count.1);
    let blobs: Vec<Blob> = (0..count)
        .map(|_| {
            let angle = rng.random_range(0.0..std::f64::consts::PI);
            let level = rng.random_range(0.0..=1.0);
            let mut brightness = [0.0; BANDS];
            for (b, &(lo, hi)) in cfg.cloud_brightness.iter().enumerate() {
                brightness[b] = lo + level * (hi - lo);
            }
            Blob {
                cx: rng.random_range(0.0..w as f64),
                cy: rng.random_range(0.0..h as f64),
                rx: uniform(rng, cfg.blob_radius),
                ry: uniform(rng, cfg.blob_radius),
                cos: angle.cos(),
                sin: angle.sin(),
                brightness,
            }
        })
        .collect();
    let mut mask = vec![MASK_CLEAR; w * h];
    for y in 0..h {
        for x in 0..w {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let best = blobs
                .iter()
                .map(|b| (b.alpha(px, py), b))
                .fold(None::<(f64, &Blob)>, |acc, cur| match acc {
                    Some(a) if a.0 >= cur.0 => Some(a),
                    _ => Some(cur),
                });
            if let Some((alpha, blob)) = best {
                if alpha > 0.0 {
                    let i = y * w + x;
                    for b in 0..BANDS {
                        let p = &mut pixels[b * w * h + i];
                        *p = (1.0 - alpha) * *p + alpha * blob.brightness[b];
                    }
                }
                if alpha >= 0.5 {
                    mask[y * w + x] = MASK_CLOUD;
                }
            }
        }
    }
    (pixels, mask)
}

/// Generates scene `index`: a 4-band u16 scene and its u8 mask.
pub fn generate_scene(cfg: &SynthConfig, index: u64) -> Result<(RasterScene, RasterScene)> {
    cfg.validate()?;
    let (w, h) = (cfg.width, cfg.height);
    for retry in 0..cfg.max_retries {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(index * MAX_RETRIES as u64 + retry as u64);
        let (pixels, mask) = attempt(cfg, &mut rng);
        let cloudy = mask.iter().filter(|&&m| m == MASK_CLOUD).count();
        let fraction = cloudy as f64 / mask.len() as f64;
        if fraction < cfg.cloud_fraction.0 || fraction > cfg.cloud_fraction.1 {
            continue;
        }
        let tag = format!("synth seed={} index={index}", cfg.seed);
        let samples = pixels
            .iter()
            .map(|&v| (v * REFLECTANCE_SCALE as f64).round().clamp(0.0, u16::MAX as f64) as u16)
            .collect();
        let scene = RasterScene::new(w, h, BANDS, Samples::U16(samples), tag.clone())?;
        let mask = RasterScene::mask(w, h, mask, tag)?;
        return Ok((scene, mask));
    }
    Err(Error::Config(format!(
        "scene {index}: no cloud fraction within {:?} after {} attempts",
        cfg.cloud_fraction, cfg.max_retries
    )))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub scene: PathBuf,
    pub mask: PathBuf,
    pub cloud_fraction: f64,
}

/// `scene_path,mask_path,cloud_fraction` lines; paths are relative to the
/// manifest's directory.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            writeln!(s, "{},{},{}", e.scene.display(), e.mask.display(), e.cloud_fraction).expect("string write");
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            let [scene, mask, fraction] = fields[..] else {
                return Err(Error::Format(format!(
                    "manifest line {}: expected scene_path,mask_path,cloud_fraction",
                    i + 1
                )));
            };
            let cloud_fraction = fraction
                .trim()
                .parse()
                .map_err(|_| Error::Format(format!("manifest line {}: bad cloud fraction '{fraction}'", i + 1)))?;
            entries.push(ManifestEntry {
                scene: PathBuf::from(scene.trim()),
                mask: PathBuf::from(mask.trim()),
                cloud_fraction,
            });
        }
        Ok(Manifest { entries })
    }

    /// Reads a manifest and resolves its paths against the manifest's directory.
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for e in &mut m.entries {
            e.scene = base.join(&e.scene);
            e.mask = base.join(&e.mask);
        }
        Ok(m)
    }

    /// Reads `dir/manifest.txt`.
    pub fn read_dir(dir: impl AsRef<Path>) -> Result<Self> {
        Self::read(dir.as_ref().join(MANIFEST_NAME))
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

/// Writes `n_scenes` scene/mask pairs and `manifest.txt` into `out_dir`.
pub fn generate_corpus(cfg: &SynthConfig, n_scenes: usize, out_dir: impl AsRef<Path>) -> Result<Manifest> {
    cfg.validate()?;
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let entries = (0..n_scenes)
        .into_par_iter()
        .map(|i| {
            let (scene, mask) = generate_scene(cfg, i as u64)?;
            let entry = ManifestEntry {
                scene: PathBuf::from(format!("scene_{i:04}.msr")),
                mask: PathBuf::from(format!("mask_{i:04}.msr")),
                cloud_fraction: mask.cloud_fraction(),
            };
            write_msr(&scene, out_dir.join(&entry.scene))?;
            write_msr(&mask, out_dir.join(&entry.mask))?;
            Ok(entry)
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest { entries };
    manifest.write(out_dir.join(MANIFEST_NAME))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> SynthConfig {
        SynthConfig::for_patches(seed, 48)
    }

    #[test]
    fn deterministic_per_seed_and_index() {
        let a = generate_scene(&small(3), 5).unwrap();
        let b = generate_scene(&small(3), 5).unwrap();
        let c = generate_scene(&small(3), 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn zero_blobs_gives_empty_mask() {
        let cfg = SynthConfig {
            blob_count: (0, 0),
            cloud_fraction: (0.0, 0.5),
            ..small(1)
        };
        let (_, mask) = generate_scene(&cfg, 0).unwrap();
        assert_eq!(mask.cloud_fraction(), 0.0);
    }

    #[test]
    fn impossible_fraction_fails_after_retries() {
        let cfg = SynthConfig {
            blob_count: (0, 0),
            cloud_fraction: (0.5, 0.9),
            max_retries: 3,
            ..small(1)
        };
        let err = generate_scene(&cfg, 0).unwrap_err();
        assert!(err.to_string().contains("3 attempts"), "{err}");
    }

    #[test]
    fn rejects_overlapping_brightness() {
        let mut cfg = small(0);
        cfg.cloud_brightness[3] = (0.3, 0.9);
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn every_terrain_stays_in_range() {
        for terrain in [Terrain::Flat, Terrain::Gradient, Terrain::Speckle] {
            let cfg = SynthConfig {
                terrain,
                blob_count: (0, 0),
                cloud_fraction: (0.0, 0.5),
                ..small(2)
            };
            let (scene, _) = generate_scene(&cfg, 1).unwrap();
            let Samples::U16(v) = &scene.data else { panic!() };
            let plane = 48 * 48;
            for b in 0..BANDS {
                let (lo, hi) = cfg.background_brightness[b];
                for &s in &v[b * plane..(b + 1) * plane] {
                    let r = s as f64 / 10_000.0;
                    assert!(r >= lo - 1e-4 && r <= hi + 1e-4, "{terrain:?} band {b}: {r}");
                }
            }
        }
    }

    #[test]
    fn manifest_text_roundtrip() {
        let m = Manifest {
            entries: vec![ManifestEntry {
                scene: "a.msr".into(),
                mask: "b.msr".into(),
                cloud_fraction: 0.123456789012345,
            }],
        };
        assert_eq!(Manifest::parse(&m.to_text()).unwrap(), m);
        assert!(Manifest::parse("a,b\n").is_err());
    }
}
