//! Multiband scenes and masks in the MSR1 container, plus patch extraction.
//!
//! MSR1 layout (little-endian, no padding, no checksum):
//!
//! | offset | size | field                                  |
//! |--------|------|----------------------------------------|
//! | 0      | 4    | magic `"MSR1"`                          |
//! | 4      | 4    | `u32` width                            |
//! | 8      | 4    | `u32` height                           |
//! | 12     | 2    | `u16` bands                            |
//! | 14     | 2    | `u16` dtype code (0 = u8, 1 = u16, 2 = f32) |
//! | 16     | 1    | `u8` tag length `L`                    |
//! | 17     | L    | UTF-8 tag                              |
//! | 17 + L | ...  | samples, band-sequential, row-major    |

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::tensor::{Shape, Tensor};
use crate::{Error, Result};

pub const MSR_MAGIC: &[u8; 4] = b"MSR1";
pub const MAX_BANDS: usize = 16;
pub const MAX_TAG_BYTES: usize = 255;
/// Integer reflectance counts are stored scaled by this factor.
pub const REFLECTANCE_SCALE: f32 = 10_000.0;
/// Mask value for cloud (positive) pixels.
pub const MASK_CLOUD: u8 = 255;
pub const MASK_CLEAR: u8 = 0;

const HEADER_FIXED: usize = 17;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    U8,
    U16,
    F32,
}

impl DType {
    pub fn code(self) -> u16 {
        match self {
            DType::U8 => 0,
            DType::U16 => 1,
            DType::F32 => 2,
        }
    }

    pub fn from_code(code: u16) -> Result<Self> {
        match code {
            0 => Ok(DType::U8),
            1 => Ok(DType::U16),
            2 => Ok(DType::F32),
            other => Err(Error::Format(format!("unsupported dtype code {other}"))),
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::U8 => 1,
            DType::U16 => 2,
            DType::F32 => 4,
        }
    }
}

/// Raw sample storage; the variant is the scene's dtype.
#[derive(Debug, Clone, PartialEq)]
pub enum Samples {
    U8(Vec<u8>),
    U16(Vec<u16>),
    F32(Vec<f32>),
}

impl Samples {
    pub fn dtype(&self) -> DType {
        match self {
            Samples::U8(_) => DType::U8,
            Samples::U16(_) => DType::U16,
            Samples::F32(_) => DType::F32,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Samples::U8(v) => v.len(),
            Samples::U16(v) => v.len(),
            Samples::F32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Normalised reflectance of sample `i`.
    #[inline]
    pub fn normalized(&self, i: usize) -> f32 {
        match self {
            Samples::U8(v) => normalize_u8(v[i]),
            Samples::U16(v) => normalize_u16(v[i]),
            Samples::F32(v) => normalize_f32(v[i]),
        }
    }
}

/// A band-sequential multiband raster. Bands are ordered R, G, B, NIR for scenes;
/// masks have a single u8 band holding 0 (clear) or 255 (cloud).
#[derive(Debug, Clone, PartialEq)]
pub struct RasterScene {
    pub width: usize,
    pub height: usize,
    pub bands: usize,
    pub data: Samples,
    pub tag: String,
}

impl RasterScene {
    /// Builds a scene and checks its invariants.
    pub fn new(width: usize, height: usize, bands: usize, data: Samples, tag: impl Into<String>) -> Result<Self> {
        let scene = RasterScene {
            width,
            height,
            bands,
            data,
            tag: tag.into(),
        };
        scene.validate()?;
        Ok(scene)
    }

    /// Builds a single-band u8 mask; every sample must be 0 or 255.
    pub fn mask(width: usize, height: usize, data: Vec<u8>, tag: impl Into<String>) -> Result<Self> {
        let scene = Self::new(width, height, 1, Samples::U8(data), tag)?;
        scene.validate_mask()?;
        Ok(scene)
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::Validation(format!(
                "scene dimensions must be positive, got {}x{}",
                self.width, self.height
            )));
        }
        if self.width > u32::MAX as usize || self.height > u32::MAX as usize {
            return Err(Error::Validation("scene dimensions exceed u32".into()));
        }
        if self.bands == 0 || self.bands > MAX_BANDS {
            return Err(Error::Validation(format!(
                "band count must be in 1..={MAX_BANDS}, got {}",
                self.bands
            )));
        }
        let expected = self.width * self.height * self.bands;
        if self.data.len() != expected {
            return Err(Error::Validation(format!(
                "data length {} does not match {}x{}x{} = {expected}",
                self.data.len(),
                self.width,
                self.height,
                self.bands
            )));
        }
        if self.tag.len() > MAX_TAG_BYTES {
            return Err(Error::Validation(format!(
                "tag is {} bytes, limit is {MAX_TAG_BYTES}",
                self.tag.len()
            )));
        }
        Ok(())
    }

    pub fn validate_mask(&self) -> Result<()> {
        self.validate()?;
        let Samples::U8(values) = &self.data else {
            return Err(Error::Validation(format!("mask must be u8, got {:?}", self.dtype())));
        };
        if self.bands != 1 {
            return Err(Error::Validation(format!("mask must have 1 band, got {}", self.bands)));
        }
        if let Some(i) = values.iter().position(|&v| v != MASK_CLEAR && v != MASK_CLOUD) {
            return Err(Error::Validation(format!(
                "mask sample {} at (x={}, y={}) is not 0 or 255",
                values[i],
                i % self.width,
                i / self.width
            )));
        }
        Ok(())
    }

    /// Fraction of mask pixels marked cloud. Meaningful for masks only.
    pub fn cloud_fraction(&self) -> f64 {
        match &self.data {
            Samples::U8(v) => v.iter().filter(|&&s| s == MASK_CLOUD).count() as f64 / v.len() as f64,
            _ => 0.0,
        }
    }

    fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_FIXED + self.tag.len() + self.data.len() * self.dtype().size());
        out.extend_from_slice(MSR_MAGIC);
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        out.extend_from_slice(&(self.bands as u16).to_le_bytes());
        out.extend_from_slice(&self.dtype().code().to_le_bytes());
        out.push(self.tag.len() as u8);
        out.extend_from_slice(self.tag.as_bytes());
        match &self.data {
            Samples::U8(v) => out.extend_from_slice(v),
            Samples::U16(v) => v.iter().for_each(|s| out.extend_from_slice(&s.to_le_bytes())),
            Samples::F32(v) => v.iter().for_each(|s| out.extend_from_slice(&s.to_le_bytes())),
        }
        out
    }

    fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MSR_MAGIC {
            return Err(Error::Format("not an MSR file".into()));
        }
        if bytes.len() < HEADER_FIXED {
            return Err(Error::Format("truncated MSR header".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
        let u16_at = |o: usize| u16::from_le_bytes(bytes[o..o + 2].try_into().unwrap()) as usize;
        let width = u32_at(4);
        let height = u32_at(8);
        let bands = u16_at(12);
        let dtype = DType::from_code(u16_at(14) as u16)?;
        let tag_len = bytes[16] as usize;
        let tag_end = HEADER_FIXED + tag_len;
        if bytes.len() < tag_end {
            return Err(Error::Format("truncated MSR header".into()));
        }
        let tag = std::str::from_utf8(&bytes[HEADER_FIXED..tag_end])
            .map_err(|_| Error::Format("MSR tag is not valid UTF-8".into()))?
            .to_string();
        let payload = &bytes[tag_end..];
        let count = width
            .checked_mul(height)
            .and_then(|p| p.checked_mul(bands))
            .ok_or_else(|| Error::Format("MSR dimensions overflow".into()))?;
        if Some(payload.len()) != count.checked_mul(dtype.size()) {
            return Err(Error::Format(format!(
                "payload length mismatch: header declares {width}x{height}x{bands} {dtype:?} samples, found {} bytes",
                payload.len()
            )));
        }
        let data = match dtype {
            DType::U8 => Samples::U8(payload.to_vec()),
            DType::U16 => Samples::U16(
                payload
                    .chunks_exact(2)
                    .map(|c| u16::from_le_bytes([c[0], c[1]]))
                    .collect(),
            ),
            DType::F32 => Samples::F32(
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
            ),
        };
        let scene = RasterScene {
            width,
            height,
            bands,
            data,
            tag,
        };
        scene.validate()?;
        Ok(scene)
    }

    /// Serialises the scene to MSR1 bytes.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        Ok(self.encode())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::decode(bytes)
    }
}

/// Writes `scene` as MSR1. Invariants are checked before the file is created.
pub fn write_msr(scene: &RasterScene, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = scene.to_bytes()?;
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_msr(path: impl AsRef<Path>) -> Result<RasterScene> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    RasterScene::decode(&bytes).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

#[inline]
pub fn normalize_u8(v: u8) -> f32 {
    v as f32 / 255.0
}

#[inline]
pub fn normalize_u16(v: u16) -> f32 {
    (v as f32 / REFLECTANCE_SCALE).min(1.0)
}

#[inline]
pub fn normalize_f32(v: f32) -> f32 {
    if v.is_nan() {
        0.0
    } else {
        v.clamp(0.0, 1.0)
    }
}

/// Maps raw samples to reflectance in `[0, 1]`: u8 by 1/255, u16 by 1/10000 with
/// clamping, f32 clamped (NaN maps to 0).
pub fn normalize_reflectance(samples: &Samples) -> Vec<f32> {
    match samples {
        Samples::U8(v) => v.iter().copied().map(normalize_u8).collect(),
        Samples::U16(v) => v.iter().copied().map(normalize_u16).collect(),
        Samples::F32(v) => v.iter().copied().map(normalize_f32).collect(),
    }
}

/// A square window cut from a scene, normalised to reflectance.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub origin_x: usize,
    pub origin_y: usize,
    pub size: usize,
    /// Shape `(1, bands, size, size)`.
    pub pixels: Tensor<f32>,
}

fn check_window(scene: &RasterScene, x: usize, y: usize, w: usize, h: usize) -> Result<()> {
    if w == 0 || h == 0 {
        return Err(Error::Range("window size must be positive".into()));
    }
    if x + w > scene.width {
        return Err(Error::Range(format!(
            "x={x} with size {w} exceeds scene width {}",
            scene.width
        )));
    }
    if y + h > scene.height {
        return Err(Error::Range(format!(
            "y={y} with size {h} exceeds scene height {}",
            scene.height
        )));
    }
    Ok(())
}

pub fn extract_patch(scene: &RasterScene, x: usize, y: usize, size: usize) -> Result<Patch> {
    check_window(scene, x, y, size, size)?;
    let mut out = Vec::with_capacity(scene.bands * size * size);
    for b in 0..scene.bands {
        let band_base = b * scene.pixels();
        for row in y..y + size {
            let base = band_base + row * scene.width + x;
            out.extend((base..base + size).map(|i| scene.data.normalized(i)));
        }
    }
    Ok(Patch {
        origin_x: x,
        origin_y: y,
        size,
        pixels: Tensor::from_vec(Shape::new(1, scene.bands, size, size), out)?,
    })
}

/// Crops a rectangular window keeping the raw dtype.
pub fn crop(scene: &RasterScene, x: usize, y: usize, w: usize, h: usize, tag: impl Into<String>) -> Result<RasterScene> {
    check_window(scene, x, y, w, h)?;
    fn gather<S: Copy>(src: &[S], scene: &RasterScene, x: usize, y: usize, w: usize, h: usize) -> Vec<S> {
        let mut out = Vec::with_capacity(scene.bands * w * h);
        for b in 0..scene.bands {
            for row in y..y + h {
                let base = b * scene.pixels() + row * scene.width + x;
                out.extend_from_slice(&src[base..base + w]);
            }
        }
        out
    }
    let data = match &scene.data {
        Samples::U8(v) => Samples::U8(gather(v, scene, x, y, w, h)),
        Samples::U16(v) => Samples::U16(gather(v, scene, x, y, w, h)),
        Samples::F32(v) => Samples::F32(gather(v, scene, x, y, w, h)),
    };
    RasterScene::new(w, h, scene.bands, data, tag)
}

/// Converts a whole scene to a `(1, bands, height, width)` tensor of reflectances.
pub fn scene_to_tensor(scene: &RasterScene) -> Result<Tensor<f32>> {
    Tensor::from_vec(
        Shape::new(1, scene.bands, scene.height, scene.width),
        normalize_reflectance(&scene.data),
    )
}

/// Converts a mask to a `(1, 1, height, width)` tensor of 0/1 targets.
pub fn mask_to_tensor(mask: &RasterScene) -> Result<Tensor<f32>> {
    mask.validate_mask()?;
    let Samples::U8(v) = &mask.data else { unreachable!() };
    Tensor::from_vec(
        Shape::new(1, 1, mask.height, mask.width),
        v.iter().map(|&s| if s == MASK_CLOUD { 1.0 } else { 0.0 }).collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn u16_scene(w: usize, h: usize, b: usize) -> RasterScene {
        let data = (0..w * h * b).map(|i| (i * 37 % 65536) as u16).collect();
        RasterScene::new(w, h, b, Samples::U16(data), "test").unwrap()
    }

    #[test]
    fn smallest_scene_layout() {
        // A 7-byte tag puts the payload at offset 24.
        let s = RasterScene::new(1, 1, 1, Samples::U8(vec![255]), "unit-px").unwrap();
        let bytes = s.to_bytes().unwrap();
        assert_eq!(bytes.len(), 25);
        assert_eq!(&bytes[..4], b"MSR1");
        assert_eq!(&bytes[4..8], &[1, 0, 0, 0]);
        assert_eq!(&bytes[8..12], &[1, 0, 0, 0]);
        assert_eq!(&bytes[12..14], &[1, 0]);
        assert_eq!(&bytes[14..16], &[0, 0]);
        assert_eq!(bytes[16], 7);
        assert_eq!(&bytes[17..24], b"unit-px");
        assert_eq!(bytes[24], 255);

        let untagged = RasterScene::new(1, 1, 1, Samples::U8(vec![255]), "").unwrap();
        assert_eq!(untagged.to_bytes().unwrap().len(), 18);
    }

    #[test]
    fn roundtrip_u16_scene_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.msr");
        let s = u16_scene(64, 64, 4);
        write_msr(&s, &path).unwrap();
        let back = read_msr(&path).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.to_bytes().unwrap(), fs::read(&path).unwrap());
    }

    #[test]
    fn invalid_scene_writes_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.msr");
        let s = RasterScene {
            width: 4,
            height: 4,
            bands: 1,
            data: Samples::U8(vec![0; 15]),
            tag: String::new(),
        };
        assert!(matches!(write_msr(&s, &path), Err(Error::Validation(_))));
        assert!(!path.exists());
    }

    #[test]
    fn rejects_bad_magic() {
        let mut bytes = u16_scene(2, 2, 1).to_bytes().unwrap();
        bytes[..4].copy_from_slice(b"XXXX");
        let err = RasterScene::from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("not an MSR file"), "{err}");
    }

    #[test]
    fn rejects_truncated_payload() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"MSR1");
        bytes.extend_from_slice(&512u32.to_le_bytes());
        bytes.extend_from_slice(&512u32.to_le_bytes());
        bytes.extend_from_slice(&4u16.to_le_bytes());
        bytes.extend_from_slice(&1u16.to_le_bytes());
        bytes.push(0);
        bytes.extend_from_slice(&[0u8; 10]);
        let err = RasterScene::from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("payload length mismatch"), "{err}");
    }

    #[test]
    fn rejects_unknown_dtype() {
        let mut bytes = u16_scene(2, 2, 1).to_bytes().unwrap();
        bytes[14] = 3;
        let err = RasterScene::from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("unsupported dtype"), "{err}");
    }

    #[test]
    fn scene_invariants() {
        assert!(RasterScene::new(0, 1, 1, Samples::U8(vec![]), "").is_err());
        assert!(RasterScene::new(1, 1, 17, Samples::U8(vec![0; 17]), "").is_err());
        assert!(RasterScene::new(1, 1, 1, Samples::U8(vec![0]), "x".repeat(256)).is_err());
        assert!(RasterScene::mask(2, 1, vec![0, 255], "").is_ok());
        let err = RasterScene::mask(2, 1, vec![0, 7], "").unwrap_err();
        assert!(err.to_string().contains("x=1"), "{err}");
    }

    #[test]
    fn normalization_rules() {
        assert_eq!(normalize_u8(255), 1.0);
        assert_eq!(normalize_u16(5000), 0.5);
        assert_eq!(normalize_u16(12000), 1.0);
        assert_eq!(normalize_f32(-0.5), 0.0);
        assert_eq!(normalize_f32(1.5), 1.0);
        assert_eq!(normalize_f32(f32::NAN), 0.0);
        let v = normalize_reflectance(&Samples::U16(vec![0, 10000, 65535]));
        assert_eq!(v, vec![0.0, 1.0, 1.0]);
    }

    #[test]
    fn whole_scene_patch() {
        let s = u16_scene(8, 8, 4);
        let p = extract_patch(&s, 0, 0, 8).unwrap();
        assert_eq!(p.pixels.data(), normalize_reflectance(&s.data).as_slice());
    }

    #[test]
    fn patch_fits_exactly_at_right_edge() {
        let s = RasterScene::new(974, 512, 1, Samples::U8(vec![10; 974 * 512]), "").unwrap();
        let p = extract_patch(&s, 462, 0, 512).unwrap();
        assert_eq!((p.origin_x, p.origin_y, p.size), (462, 0, 512));
        let err = extract_patch(&s, 974 - 511, 0, 512).unwrap_err();
        assert!(matches!(err, Error::Range(ref m) if m.contains("x=463")), "{err}");
    }

    fn arb_scene() -> impl Strategy<Value = RasterScene> {
        (1usize..12, 1usize..12, 1usize..5, 0u8..3, "[a-z0-9 ]{0,20}").prop_flat_map(|(w, h, b, d, tag)| {
            let n = w * h * b;
            let data = match d {
                0 => proptest::collection::vec(any::<u8>(), n).prop_map(Samples::U8).boxed(),
                1 => proptest::collection::vec(any::<u16>(), n).prop_map(Samples::U16).boxed(),
                _ => proptest::collection::vec(any::<u32>().prop_map(f32::from_bits), n)
                    .prop_map(Samples::F32)
                    .boxed(),
            };
            data.prop_map(move |data| RasterScene {
                width: w,
                height: h,
                bands: b,
                data,
                tag: tag.clone(),
            })
        })
    }

    proptest! {
        #[test]
        fn msr_roundtrip_is_bit_exact(s in arb_scene()) {
            let bytes = s.to_bytes().unwrap();
            let back = RasterScene::from_bytes(&bytes).unwrap();
            prop_assert_eq!(back.to_bytes().unwrap(), bytes);
        }

        #[test]
        fn patch_is_projection(s in arb_scene(), fx in 0.0f64..1.0, fy in 0.0f64..1.0, fs in 0.0f64..1.0) {
            let max = s.width.min(s.height);
            let size = 1 + ((max - 1) as f64 * fs) as usize;
            let x = ((s.width - size) as f64 * fx) as usize;
            let y = ((s.height - size) as f64 * fy) as usize;
            let p = extract_patch(&s, x, y, size).unwrap();
            for b in 0..s.bands {
                for i in 0..size {
                    for j in 0..size {
                        let raw = b * s.pixels() + (y + i) * s.width + x + j;
                        let v = p.pixels.get(0, b, i, j);
                        prop_assert_eq!(v.to_bits(), s.data.normalized(raw).to_bits());
                        prop_assert!((0.0..=1.0).contains(&v));
                    }
                }
            }
        }

        #[test]
        fn normalization_is_monotone(a in any::<u16>(), b in any::<u16>()) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(normalize_u16(lo) <= normalize_u16(hi));
            prop_assert!((0.0..=1.0).contains(&normalize_u16(a)));
        }
    }
}
