//! Declarative architecture description and its line-oriented text format.
//!
//! One block per line: `kind filters stride dilation expansion` followed by
//! optional `k=N`, `rates=a,b,...`, `tap=NAME` or `skip=NAME` tokens. `#` starts a
//! comment. An optional `input N` line sets the input channel count.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::{Error, Result};

pub const INPUT_CHANNELS: usize = 4;

const DEFAULT_ARCH: &str = include_str!("../../configs/default.arch");
const TINY_ARCH: &str = include_str!("../../configs/tiny.arch");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BlockKind {
    /// k×k convolution + BN + ReLU.
    Conv,
    /// Inverted residual unit: 1×1 expand, 3×3 depthwise, 1×1 project.
    Iru,
    /// Atrous separable convolution: dilated depthwise, then pointwise.
    Asc,
    Aspp,
    Upsample,
    /// 1×1-reduce a tapped feature map and concatenate it to the current one.
    ConcatSkip,
    /// 1×1 convolution with bias, then sigmoid.
    Head,
}

impl BlockKind {
    pub fn as_str(self) -> &'static str {
        match self {
            BlockKind::Conv => "conv",
            BlockKind::Iru => "iru",
            BlockKind::Asc => "asc",
            BlockKind::Aspp => "aspp",
            BlockKind::Upsample => "upsample",
            BlockKind::ConcatSkip => "concat-skip",
            BlockKind::Head => "head",
        }
    }
}

impl FromStr for BlockKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "conv" => BlockKind::Conv,
            "iru" => BlockKind::Iru,
            "asc" => BlockKind::Asc,
            "aspp" => BlockKind::Aspp,
            "upsample" => BlockKind::Upsample,
            "concat-skip" => BlockKind::ConcatSkip,
            "head" => BlockKind::Head,
            other => return Err(Error::Config(format!("unknown block kind '{other}'"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockSpec {
    pub kind: BlockKind,
    /// Output channels (`#`). Unused (0) for `upsample`.
    pub filters: usize,
    /// Convolution stride; the integer factor for `upsample`.
    pub stride: usize,
    pub dilation: usize,
    /// IRU expansion factor `t`.
    pub expansion: usize,
    /// Spatial kernel size of the conv / depthwise stage.
    pub kernel: usize,
    /// ASPP atrous rates.
    pub rates: Vec<usize>,
    pub tap: Option<String>,
    pub skip: Option<String>,
}

impl BlockSpec {
    pub fn new(kind: BlockKind, filters: usize, stride: usize) -> Self {
        BlockSpec {
            kind,
            filters,
            stride,
            dilation: 1,
            expansion: 1,
            kernel: if matches!(kind, BlockKind::Head | BlockKind::ConcatSkip) { 1 } else { 3 },
            rates: Vec::new(),
            tap: None,
            skip: None,
        }
    }

    pub fn with_dilation(mut self, d: usize) -> Self {
        self.dilation = d;
        self
    }

    pub fn with_expansion(mut self, t: usize) -> Self {
        self.expansion = t;
        self
    }

    pub fn with_rates(mut self, rates: &[usize]) -> Self {
        self.rates = rates.to_vec();
        self
    }

    pub fn with_tap(mut self, name: &str) -> Self {
        self.tap = Some(name.to_string());
        self
    }

    pub fn with_skip(mut self, name: &str) -> Self {
        self.skip = Some(name.to_string());
        self
    }

    fn validate(&self, index: usize) -> Result<()> {
        let err = |msg: String| Err(Error::Config(format!("block {index} ({}): {msg}", self.kind.as_str())));
        match self.kind {
            BlockKind::Upsample => {
                if self.filters != 0 {
                    return err(format!("upsample takes filters 0, got {}", self.filters));
                }
                if self.stride == 0 {
                    return err("upsample factor must be >= 1".into());
                }
            }
            _ => {
                if self.filters == 0 {
                    return err("filters must be >= 1".into());
                }
                if !matches!(self.stride, 1 | 2) {
                    return err(format!("stride must be 1 or 2, got {}", self.stride));
                }
            }
        }
        if matches!(self.kind, BlockKind::Aspp | BlockKind::ConcatSkip | BlockKind::Head) && self.stride != 1 {
            return err("stride must be 1".into());
        }
        if self.kind == BlockKind::Head && self.filters != 1 {
            return err(format!("head must have 1 filter, got {}", self.filters));
        }
        if self.dilation == 0 || self.expansion == 0 {
            return err("dilation and expansion must be >= 1".into());
        }
        if self.kernel.is_multiple_of(2) {
            return err(format!("kernel size must be odd, got {}", self.kernel));
        }
        if self.kind == BlockKind::Aspp {
            if self.rates.is_empty() {
                return err("ASPP needs at least one atrous rate".into());
            }
            if self.rates.contains(&0) {
                return err("ASPP rates must be >= 1".into());
            }
        } else if !self.rates.is_empty() {
            return err("rates= is only valid on aspp blocks".into());
        }
        if self.kind == BlockKind::ConcatSkip && self.skip.is_none() {
            return err("concat-skip needs skip=NAME".into());
        }
        if self.kind != BlockKind::ConcatSkip && self.skip.is_some() {
            return err("skip= is only valid on concat-skip blocks".into());
        }
        Ok(())
    }
}

impl fmt::Display for BlockSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {} {} {} {}",
            self.kind.as_str(),
            self.filters,
            self.stride,
            self.dilation,
            self.expansion
        )?;
        if self.kernel != BlockSpec::new(self.kind, 1, 1).kernel {
            write!(f, " k={}", self.kernel)?;
        }
        if !self.rates.is_empty() {
            let r: Vec<String> = self.rates.iter().map(|r| r.to_string()).collect();
            write!(f, " rates={}", r.join(","))?;
        }
        if let Some(t) = &self.tap {
            write!(f, " tap={t}")?;
        }
        if let Some(s) = &self.skip {
            write!(f, " skip={s}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArchitectureConfig {
    pub input_channels: usize,
    pub blocks: Vec<BlockSpec>,
}

/// Output channels and downsampling factor after each block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub scale: usize,
}

impl ArchitectureConfig {
    /// The shipped full-size network.
    pub fn full() -> Self {
        DEFAULT_ARCH.parse().expect("shipped default.arch is valid")
    }

    /// The small network used for gradient checks and desk-scale training.
    pub fn tiny() -> Self {
        TINY_ARCH.parse().expect("shipped tiny.arch is valid")
    }

    /// Resolves `builtin:default` / `builtin:tiny`, otherwise reads a file.
    pub fn load(spec: &str) -> Result<Self> {
        match spec {
            "builtin:default" => Ok(Self::full()),
            "builtin:tiny" => Ok(Self::tiny()),
            path => {
                let text = std::fs::read_to_string(Path::new(path)).map_err(|e| Error::io(path, e))?;
                text.parse().map_err(|e| match e {
                    Error::Config(m) => Error::Config(format!("{path}: {m}")),
                    other => other,
                })
            }
        }
    }

    pub fn aspp_rates(&self) -> Vec<usize> {
        self.blocks
            .iter()
            .filter(|b| b.kind == BlockKind::Aspp)
            .flat_map(|b| b.rates.iter().copied())
            .collect()
    }

    /// Checks every invariant and returns per-block channel/scale bookkeeping.
    pub fn validate(&self) -> Result<Vec<BlockGeometry>> {
        if self.input_channels != INPUT_CHANNELS {
            return Err(Error::Config(format!(
                "input must have {INPUT_CHANNELS} channels (R, G, B, NIR), got {}",
                self.input_channels
            )));
        }
        if self.blocks.is_empty() {
            return Err(Error::Config("architecture has no blocks".into()));
        }
        let mut taps: HashMap<&str, (usize, usize)> = HashMap::new();
        let mut seen_head = false;
        let mut channels = self.input_channels;
        let mut scale = 1usize;
        let mut out = Vec::with_capacity(self.blocks.len());
        for (i, b) in self.blocks.iter().enumerate() {
            b.validate(i)?;
            if seen_head && b.kind != BlockKind::Upsample {
                return Err(Error::Config(format!(
                    "block {i} ({}): only upsample blocks may follow the head",
                    b.kind.as_str()
                )));
            }
            let in_channels = channels;
            match b.kind {
                BlockKind::Upsample => {
                    if !scale.is_multiple_of(b.stride) {
                        return Err(Error::Config(format!(
                            "block {i}: upsample x{} from stride {scale} overshoots the input resolution",
                            b.stride
                        )));
                    }
                    scale /= b.stride;
                }
                BlockKind::ConcatSkip => {
                    let name = b.skip.as_deref().unwrap_or_default();
                    let &(tap_channels, tap_scale) = taps.get(name).ok_or_else(|| {
                        Error::Config(format!("block {i}: skip '{name}' does not name an earlier tap"))
                    })?;
                    let _ = tap_channels;
                    if tap_scale != scale {
                        return Err(Error::Config(format!(
                            "block {i}: skip '{name}' is at stride {tap_scale} but the current stride is {scale}"
                        )));
                    }
                    channels += b.filters;
                }
                BlockKind::Head => {
                    seen_head = true;
                    channels = b.filters;
                }
                _ => {
                    scale *= b.stride;
                    channels = b.filters;
                }
            }
            if let Some(t) = &b.tap {
                if taps.insert(t.as_str(), (channels, scale)).is_some() {
                    return Err(Error::Config(format!("block {i}: duplicate tap '{t}'")));
                }
            }
            out.push(BlockGeometry {
                in_channels,
                out_channels: channels,
                scale,
            });
        }
        if !seen_head {
            return Err(Error::Config("architecture has no head block".into()));
        }
        if channels != 1 || scale != 1 {
            return Err(Error::Config(format!(
                "network must end with 1 channel at input resolution, ends with {channels} channels at stride {scale}"
            )));
        }
        Ok(out)
    }

    /// Largest downsampling factor reached; input sides must be multiples of it.
    pub fn encoder_stride(&self) -> Result<usize> {
        Ok(self.validate()?.iter().map(|g| g.scale).max().unwrap_or(1))
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("input {}\n", self.input_channels);
        for b in &self.blocks {
            s.push_str(&b.to_string());
            s.push('\n');
        }
        s
    }
}

fn parse_usize(tok: &str, what: &str, line: usize) -> Result<usize> {
    tok.parse()
        .map_err(|_| Error::Config(format!("line {line}: {what} '{tok}' is not a non-negative integer")))
}

impl FromStr for ArchitectureConfig {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let mut input_channels = INPUT_CHANNELS;
        let mut blocks = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let toks: Vec<&str> = line.split_whitespace().collect();
            if toks[0] == "input" {
                if toks.len() != 2 || !blocks.is_empty() {
                    return Err(Error::Config(format!(
                        "line {line_no}: 'input N' must be a single leading directive"
                    )));
                }
                input_channels = parse_usize(toks[1], "input channels", line_no)?;
                continue;
            }
            let kind: BlockKind = toks[0]
                .parse()
                .map_err(|e: Error| Error::Config(format!("line {line_no}: {}", e.to_string().trim_start_matches("config error: "))))?;
            if toks.len() < 5 {
                return Err(Error::Config(format!(
                    "line {line_no}: expected 'kind filters stride dilation expansion', got '{line}'"
                )));
            }
            let mut spec = BlockSpec::new(kind, parse_usize(toks[1], "filters", line_no)?, parse_usize(toks[2], "stride", line_no)?);
            spec.dilation = parse_usize(toks[3], "dilation", line_no)?;
            spec.expansion = parse_usize(toks[4], "expansion", line_no)?;
            let mut keys = HashSet::new();
            for tok in &toks[5..] {
                let (key, value) = tok
                    .split_once('=')
                    .ok_or_else(|| Error::Config(format!("line {line_no}: unexpected token '{tok}'")))?;
                if !keys.insert(key) {
                    return Err(Error::Config(format!("line {line_no}: repeated key '{key}'")));
                }
                match key {
                    "k" => spec.kernel = parse_usize(value, "kernel size", line_no)?,
                    "rates" => {
                        spec.rates = value
                            .split(',')
                            .map(|r| parse_usize(r, "rate", line_no))
                            .collect::<Result<_>>()?
                    }
                    "tap" | "skip" if value.is_empty() => {
                        return Err(Error::Config(format!("line {line_no}: empty {key} name")));
                    }
                    "tap" => spec.tap = Some(value.to_string()),
                    "skip" => spec.skip = Some(value.to_string()),
                    other => return Err(Error::Config(format!("line {line_no}: unknown key '{other}'"))),
                }
            }
            blocks.push(spec);
        }
        let config = ArchitectureConfig { input_channels, blocks };
        config.validate()?;
        Ok(config)
    }
}
