//! Network description and its `key = value` text form.
//!
//! ```text
//! # FishNet-tiny
//! arch = fishnet
//! num_stages = 3
//! input_shape = 3, 32, 32
//! channels = 16, 32, 64
//! tail_blocks = 1, 1, 1
//! body_blocks = 1, 1, 1
//! head_blocks = 1, 1, 1
//! reduction_k = 1, 2, 2
//! num_classes = 10
//! ```
//!
//! Stage `s` runs at `H / 2^(s+1)` after the stem. Body stage `s` (for
//! `s >= 1`) holds the up-sampling refinement block fed by tail stage `s`;
//! `reduction_k[s]` is its channel reduction rate and `body_blocks[s]` its
//! block count (the reducing block plus `body_blocks[s] - 1` identity
//! blocks). `body_blocks[0]` adds identity blocks on the final body feature
//! and may be 0; `reduction_k[0]` must be 1.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Arch {
    FishNet,
    /// Pre-activation stages joined by a strided `conv1×1 → BN → ReLU`
    /// transition: the negative control for the analyzer.
    ResNetControl,
    /// Skip-free conv stack, the baseline for training comparisons.
    PlainCnn,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stem {
    Conv7x7S2,
    TwoResidualBlocks,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Downsample {
    Max2,
    Max3,
    Avg2,
    /// `BN → ReLU → conv3×3 stride 2`, channel preserving.
    Conv,
}

macro_rules! keyword_enum {
    ($ty:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        impl $ty {
            pub fn as_str(self) -> &'static str {
                match self { $($ty::$variant => $text),+ }
            }

            pub const CHOICES: &'static [&'static str] = &[$($text),+];
        }

        impl FromStr for $ty {
            type Err = String;

            fn from_str(s: &str) -> std::result::Result<Self, String> {
                match s {
                    $($text => Ok($ty::$variant),)+
                    other => Err(format!(
                        "unknown value `{other}` (expected one of: {})",
                        Self::CHOICES.join(", ")
                    )),
                }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }
    };
}

keyword_enum!(Arch { FishNet => "fishnet", ResNetControl => "resnet_control", PlainCnn => "plain_cnn" });
keyword_enum!(Stem { Conv7x7S2 => "conv7x7_s2", TwoResidualBlocks => "two_residual_blocks" });
keyword_enum!(Downsample { Max2 => "max2", Max3 => "max3", Avg2 => "avg2", Conv => "conv" });

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FishNetConfig {
    pub arch: Arch,
    pub num_stages: usize,
    /// (C, H, W)
    pub input_shape: [usize; 3],
    pub stem: Stem,
    pub channels: Vec<usize>,
    pub tail_blocks: Vec<usize>,
    pub body_blocks: Vec<usize>,
    pub head_blocks: Vec<usize>,
    pub reduction_k: Vec<usize>,
    pub body_dilation: usize,
    /// Channels per group at stage 0, doubling per stage; 0 = dense convs.
    pub group_width: usize,
    pub downsample: Downsample,
    pub se_reduction: usize,
    pub num_classes: usize,
}

const KEYS: &[&str] = &[
    "arch",
    "num_stages",
    "input_shape",
    "stem",
    "channels",
    "tail_blocks",
    "body_blocks",
    "head_blocks",
    "reduction_k",
    "body_dilation",
    "group_width",
    "downsample",
    "se_reduction",
    "num_classes",
];

/// Bottleneck width of a block with `out` output channels.
pub fn bottleneck_width(out: usize) -> usize {
    (out / 4).max(1)
}

impl FishNetConfig {
    /// The reference FishNet-tiny: three stages, widths 16/32/64.
    pub fn tiny() -> Self {
        Self {
            arch: Arch::FishNet,
            num_stages: 3,
            input_shape: [3, 32, 32],
            stem: Stem::Conv7x7S2,
            channels: vec![16, 32, 64],
            tail_blocks: vec![1, 1, 1],
            body_blocks: vec![1, 1, 1],
            head_blocks: vec![1, 1, 1],
            reduction_k: vec![1, 2, 2],
            body_dilation: 2,
            group_width: 0,
            downsample: Downsample::Max2,
            se_reduction: 16,
            num_classes: 10,
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut values: Vec<Option<(usize, String)>> = vec![None; KEYS.len()];
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::ConfigSyntax {
                    line: line_no,
                    message: format!("expected `key = value`, got `{line}`"),
                });
            };
            let key = key.trim();
            let Some(slot) = KEYS.iter().position(|k| *k == key) else {
                return Err(Error::ConfigSyntax {
                    line: line_no,
                    message: format!("unknown key `{key}`"),
                });
            };
            if values[slot].is_some() {
                return Err(Error::ConfigSyntax {
                    line: line_no,
                    message: format!("duplicate key `{key}`"),
                });
            }
            values[slot] = Some((line_no, value.trim().to_string()));
        }

        let get = |key: &str| -> Option<&(usize, String)> {
            values[KEYS.iter().position(|k| *k == key).unwrap()].as_ref()
        };
        fn syntax(line: usize, key: &str, msg: impl fmt::Display) -> Error {
            Error::ConfigSyntax {
                line,
                message: format!("`{key}`: {msg}"),
            }
        }
        let word = |key: &str| get(key).map(|(l, v)| (*l, v.as_str()));
        let int = |key: &str| -> Result<Option<usize>> {
            get(key)
                .map(|(l, v)| v.parse::<usize>().map_err(|e| syntax(*l, key, e)))
                .transpose()
        };
        let list = |key: &str| -> Result<Option<Vec<usize>>> {
            get(key)
                .map(|(l, v)| {
                    v.split(',')
                        .map(|p| p.trim().parse::<usize>().map_err(|e| syntax(*l, key, format!("`{}`: {e}", p.trim()))))
                        .collect()
                })
                .transpose()
        };
        let required = |key: &str| Error::config(None, format!("missing required key `{key}`"));

        let arch = match word("arch") {
            Some((l, v)) => v.parse().map_err(|e| syntax(l, "arch", e))?,
            None => Arch::FishNet,
        };
        let stem = match word("stem") {
            Some((l, v)) => v.parse().map_err(|e| syntax(l, "stem", e))?,
            None => Stem::Conv7x7S2,
        };
        let downsample = match word("downsample") {
            Some((l, v)) => v.parse().map_err(|e| syntax(l, "downsample", e))?,
            None => Downsample::Max2,
        };
        let num_stages = int("num_stages")?.ok_or_else(|| required("num_stages"))?;
        let input = list("input_shape")?.ok_or_else(|| required("input_shape"))?;
        let input_shape: [usize; 3] = input.as_slice().try_into().map_err(|_| {
            syntax(get("input_shape").unwrap().0, "input_shape", "expected three values C, H, W")
        })?;
        let fishnet = arch == Arch::FishNet;
        let per_stage = |key: &str, default: usize, needed: bool| -> Result<Vec<usize>> {
            match list(key)? {
                Some(v) => Ok(v),
                None if needed => Err(required(key)),
                None => Ok(vec![default; num_stages]),
            }
        };
        let cfg = Self {
            arch,
            num_stages,
            input_shape,
            stem,
            channels: list("channels")?.ok_or_else(|| required("channels"))?,
            tail_blocks: list("tail_blocks")?.ok_or_else(|| required("tail_blocks"))?,
            body_blocks: per_stage("body_blocks", 1, fishnet)?,
            head_blocks: per_stage("head_blocks", 1, fishnet)?,
            reduction_k: per_stage("reduction_k", 1, fishnet)?,
            body_dilation: int("body_dilation")?.unwrap_or(2),
            group_width: int("group_width")?.unwrap_or(0),
            downsample,
            se_reduction: int("se_reduction")?.unwrap_or(16),
            num_classes: int("num_classes")?.ok_or_else(|| required("num_classes"))?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical text form; `parse(to_text(c)) == c`.
    pub fn to_text(&self) -> String {
        let join = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", ");
        let mut out = String::new();
        let mut put = |k: &str, v: String| out.push_str(&format!("{k} = {v}\n"));
        put("arch", self.arch.to_string());
        put("num_stages", self.num_stages.to_string());
        put("input_shape", join(&self.input_shape));
        put("stem", self.stem.to_string());
        put("channels", join(&self.channels));
        put("tail_blocks", join(&self.tail_blocks));
        put("body_blocks", join(&self.body_blocks));
        put("head_blocks", join(&self.head_blocks));
        put("reduction_k", join(&self.reduction_k));
        put("body_dilation", self.body_dilation.to_string());
        put("group_width", self.group_width.to_string());
        put("downsample", self.downsample.to_string());
        put("se_reduction", self.se_reduction.to_string());
        put("num_classes", self.num_classes.to_string());
        out
    }

    /// Spatial size (H, W) of stage `s`.
    pub fn stage_resolution(&self, s: usize) -> (usize, usize) {
        let f = 1 << (s + 1);
        (self.input_shape[1] / f, self.input_shape[2] / f)
    }

    /// Channel count of body feature `x_s^b` for every stage.
    pub fn body_channels(&self) -> Vec<usize> {
        let s_max = self.num_stages - 1;
        let mut out = vec![0; self.num_stages];
        out[s_max] = self.channels[s_max];
        for s in (1..=s_max).rev() {
            out[s - 1] = (out[s] + self.channels[s]) / self.reduction_k[s].max(1);
        }
        out
    }

    /// Channel count of head stage-entry feature `x̃_s^h` for every stage.
    pub fn head_channels(&self) -> Vec<usize> {
        let body = self.body_channels();
        let mut out = Vec::with_capacity(self.num_stages);
        let mut acc = body[0] + self.channels[0];
        out.push(acc);
        for b in &body[1..] {
            acc += b;
            out.push(acc);
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |stage: Option<usize>, msg: String| Err(Error::config(stage, msg));
        let s_n = self.num_stages;
        if s_n < 2 {
            return cfg(None, format!("num_stages must be >= 2, got {s_n}"));
        }
        if s_n > 16 {
            return cfg(None, format!("num_stages {s_n} is unreasonably large"));
        }
        let lists: [(&str, &Vec<usize>); 5] = [
            ("channels", &self.channels),
            ("tail_blocks", &self.tail_blocks),
            ("body_blocks", &self.body_blocks),
            ("head_blocks", &self.head_blocks),
            ("reduction_k", &self.reduction_k),
        ];
        for (key, v) in lists {
            if v.len() != s_n {
                return cfg(None, format!("`{key}` has {} entries, expected num_stages = {s_n}", v.len()));
            }
        }
        let [c, h, w] = self.input_shape;
        if c == 0 {
            return cfg(None, "input_shape has zero channels".into());
        }
        for s in 0..s_n {
            let f = 1usize << (s + 1);
            if h % f != 0 || w % f != 0 || h < f || w < f {
                return cfg(
                    Some(s),
                    format!("input {h}×{w} does not halve cleanly to this stage (needs multiples of {f})"),
                );
            }
            if self.channels[s] == 0 {
                return cfg(Some(s), "zero channels".into());
            }
            if self.tail_blocks[s] == 0 {
                return cfg(Some(s), "tail_blocks must be >= 1".into());
            }
        }
        if self.num_classes < 2 {
            return cfg(None, format!("num_classes must be >= 2, got {}", self.num_classes));
        }
        if self.body_dilation == 0 {
            return cfg(None, "body_dilation must be >= 1".into());
        }
        if self.se_reduction == 0 {
            return cfg(None, "se_reduction must be >= 1".into());
        }
        if self.arch != Arch::FishNet {
            return self.validate_groups(&self.channels.iter().map(|&c| vec![c]).collect::<Vec<_>>());
        }

        if self.reduction_k[0] != 1 {
            return cfg(Some(0), format!("reduction_k[0] must be 1 (no block reduces into stage 0 from below), got {}", self.reduction_k[0]));
        }
        let mut body = self.channels[s_n - 1];
        for s in (1..s_n).rev() {
            let k = self.reduction_k[s];
            let merged = body + self.channels[s];
            if k == 0 || merged % k != 0 {
                return cfg(
                    Some(s),
                    format!("up-sampling block input of {merged} channels ({body} body + {} tail) is not divisible by reduction_k {k}", self.channels[s]),
                );
            }
            if self.body_blocks[s] == 0 {
                return cfg(Some(s), "body_blocks must be >= 1 above stage 0".into());
            }
            body = merged / k;
        }
        for s in 0..s_n {
            if self.head_blocks[s] == 0 {
                return cfg(Some(s), "head_blocks must be >= 1".into());
            }
        }
        let body = self.body_channels();
        let head = self.head_channels();
        let mut widths: Vec<Vec<usize>> = (0..s_n).map(|s| vec![self.channels[s], head[s], body[s]]).collect();
        // the reducing block and its followers run at stage s with body[s-1] outputs
        for s in 1..s_n {
            widths[s].push(body[s - 1]);
        }
        self.validate_groups(&widths)
    }

    /// Every grouped 3×3 conv at stage `s` must split its bottleneck width
    /// into groups of exactly `group_width · 2^s` channels.
    fn validate_groups(&self, block_outputs: &[Vec<usize>]) -> Result<()> {
        if self.group_width == 0 {
            return Ok(());
        }
        for (s, outs) in block_outputs.iter().enumerate() {
            let gw = self.group_width << s;
            for &out in outs {
                let width = bottleneck_width(out);
                if width % gw != 0 {
                    return Err(Error::config(
                        Some(s),
                        format!("bottleneck width {width} (block output {out}) is not a multiple of the group width {gw}"),
                    ));
                }
            }
        }
        Ok(())
    }
}

impl FromStr for FishNetConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::parse(s)
    }
}

impl fmt::Display for FishNetConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}
