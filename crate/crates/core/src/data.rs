//! Image datasets: the `FTDS` binary format and a seeded synthetic
//! generator.
//!
//! Layout (little-endian): `"FTDS"`, version `u16`, count `u32`, C, H, W
//! `u16` each, num_classes `u16`, then `count·C·H·W` `f32` pixels in
//! `[0, 1]`, then `count` `u32` labels.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"FTDS";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 4 + 2 + 4 + 6 + 2;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// (C, H, W)
    pub shape: [usize; 3],
    pub num_classes: usize,
    /// `len · C·H·W` pixels, example-major.
    pub pixels: Vec<f32>,
    pub labels: Vec<u32>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn example_len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.example_len();
        &self.pixels[i * n..(i + 1) * n]
    }

    pub fn validate(&self) -> Result<()> {
        let fmt = |m: String| Err(Error::Format(m));
        if self.shape.iter().any(|&d| d == 0 || d > u16::MAX as usize) {
            return fmt(format!("image shape {:?} out of range", self.shape));
        }
        if self.num_classes == 0 || self.num_classes > u16::MAX as usize {
            return fmt(format!("num_classes {} out of range", self.num_classes));
        }
        if self.pixels.len() != self.len() * self.example_len() {
            return fmt(format!("{} pixels for {} examples", self.pixels.len(), self.len()));
        }
        if let Some(l) = self.labels.iter().find(|&&l| l as usize >= self.num_classes) {
            return fmt(format!("label {l} >= num_classes {}", self.num_classes));
        }
        if let Some(p) = self.pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return fmt(format!("pixel value {p} outside [0, 1]"));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let count = u32::try_from(self.len()).map_err(|_| Error::Format("too many examples".into()))?;
        let mut out = Vec::with_capacity(HEADER_LEN + self.pixels.len() * 4 + self.labels.len() * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&count.to_le_bytes());
        for d in self.shape {
            out.extend_from_slice(&(d as u16).to_le_bytes());
        }
        out.extend_from_slice(&(self.num_classes as u16).to_le_bytes());
        for p in &self.pixels {
            out.extend_from_slice(&p.to_le_bytes());
        }
        for l in &self.labels {
            out.extend_from_slice(&l.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
            return Err(Error::Format("not an FTDS dataset (bad magic)".into()));
        }
        let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]);
        let version = u16_at(4);
        if version != VERSION {
            return Err(Error::Format(format!("unsupported FTDS version {version}")));
        }
        let count = u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes")) as usize;
        let shape = [u16_at(10) as usize, u16_at(12) as usize, u16_at(14) as usize];
        let num_classes = u16_at(16) as usize;
        let per = shape.iter().product::<usize>();
        let expected = HEADER_LEN + count * per * 4 + count * 4;
        if bytes.len() != expected {
            return Err(Error::Format(format!(
                "FTDS length {} does not match header ({count} × {}×{}×{} needs {expected})",
                bytes.len(),
                shape[0],
                shape[1],
                shape[2]
            )));
        }
        let body = &bytes[HEADER_LEN..];
        let (px, lb) = body.split_at(count * per * 4);
        let pixels = px
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let labels = lb
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let ds = Dataset {
            shape,
            num_classes,
            pixels,
            labels,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Per-channel mean and standard deviation over every pixel.
    pub fn channel_stats(&self) -> Normalization {
        let [c, h, w] = self.shape;
        let hw = h * w;
        let mut mean = vec![0.0f64; c];
        let mut sq = vec![0.0f64; c];
        for img in self.pixels.chunks_exact(c * hw) {
            for (ch, plane) in img.chunks_exact(hw).enumerate() {
                for &v in plane {
                    mean[ch] += v as f64;
                    sq[ch] += (v as f64) * (v as f64);
                }
            }
        }
        let n = (self.len() * hw).max(1) as f64;
        let mean: Vec<f64> = mean.iter().map(|m| m / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| ((s / n - m * m).max(0.0)).sqrt().max(1e-6))
            .collect::<Vec<f64>>();
        Normalization {
            mean: mean.iter().map(|&m| m as f32).collect(),
            std: std.iter().map(|&s| s as f32).collect(),
        }
    }
}

/// Per-channel standardization `(x − mean) / std`.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalization {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Normalization {
    pub fn apply(&self, image: &[f32], out: &mut [f32]) {
        let c = self.mean.len();
        let hw = image.len() / c;
        for ch in 0..c {
            let (m, s) = (self.mean[ch], self.std[ch]);
            for i in ch * hw..(ch + 1) * hw {
                out[i] = (image[i] - m) / s;
            }
        }
    }
}

/// Parameters of the synthetic generator. Templates depend only on
/// `seed`, so splits drawn with the same seed share their classes.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub per_class: usize,
    pub shape: [usize; 3],
    pub seed: u64,
    /// Selects the noise stream; use different values for train and test.
    pub split: u64,
    /// Standard deviation of the additive pixel noise.
    pub noise: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_classes: 10,
            per_class: 100,
            shape: [3, 32, 32],
            seed: 0,
            split: 0,
            noise: 0.15,
        }
    }
}

impl FromStr for SyntheticSpec {
    type Err = Error;

    /// `key=value` pairs separated by commas, e.g.
    /// `classes=10,per_class=100,shape=3x32x32,seed=0,split=1,noise=0.15`.
    /// Missing keys keep their defaults; `split` also accepts `train`/`test`.
    fn from_str(s: &str) -> Result<Self> {
        let mut spec = SyntheticSpec::default();
        let bad = |m: String| Error::Format(format!("dataset spec: {m}"));
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (k, v) = part.split_once('=').ok_or_else(|| bad(format!("`{part}` is not key=value")))?;
            let (k, v) = (k.trim(), v.trim());
            let num = |v: &str| v.parse::<u64>().map_err(|_| bad(format!("`{k}` needs an integer, got `{v}`")));
            match k {
                "classes" | "num_classes" => spec.num_classes = num(v)? as usize,
                "per_class" => spec.per_class = num(v)? as usize,
                "seed" => spec.seed = num(v)?,
                "split" => {
                    spec.split = match v {
                        "train" => 0,
                        "test" => 1,
                        _ => num(v)?,
                    }
                }
                "noise" => spec.noise = v.parse().map_err(|_| bad(format!("bad noise `{v}`")))?,
                "shape" => {
                    let dims: Vec<usize> = v
                        .split('x')
                        .map(|d| d.parse::<usize>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|_| bad(format!("bad shape `{v}`")))?;
                    spec.shape = dims
                        .try_into()
                        .map_err(|_| bad(format!("shape `{v}` must be CxHxW")))?;
                }
                _ => return Err(bad(format!("unknown key `{k}`"))),
            }
        }
        if spec.num_classes < 2 || spec.per_class == 0 || spec.shape.contains(&0) {
            return Err(bad("need >= 2 classes, >= 1 example per class and a non-empty shape".into()));
        }
        if !(spec.noise >= 0.0 && spec.noise.is_finite()) {
            return Err(bad(format!("noise must be >= 0, got {}", spec.noise)));
        }
        Ok(spec)
    }
}

/// Class templates: a random coarse grid (a quarter of the resolution per
/// side) upsampled to full size, values in `[0.2, 0.8]`.
pub fn class_templates(num_classes: usize, shape: [usize; 3], seed: u64) -> Vec<Vec<f32>> {
    let [c, h, w] = shape;
    let (gh, gw) = (h.div_ceil(4), w.div_ceil(4));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..num_classes)
        .map(|_| {
            let grid: Vec<f32> = (0..c * gh * gw).map(|_| rng.random_range(0.2f32..0.8)).collect();
            let mut t = vec![0.0; c * h * w];
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        t[(ch * h + y) * w + x] = grid[(ch * gh + y * gh / h) * gw + x * gw / w];
                    }
                }
            }
            t
        })
        .collect()
}

/// Template plus clamped Gaussian noise; labels cycle through the classes.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Dataset {
    let templates = class_templates(spec.num_classes, spec.shape, spec.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(spec.split + 1);
    let noise = Normal::new(0.0, spec.noise).expect("finite noise level");
    let count = spec.num_classes * spec.per_class;
    let per: usize = spec.shape.iter().product();
    let mut pixels = Vec::with_capacity(count * per);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let label = i % spec.num_classes;
        labels.push(label as u32);
        pixels.extend(
            templates[label]
                .iter()
                .map(|&t| (t as f64 + noise.sample(&mut rng)).clamp(0.0, 1.0) as f32),
        );
    }
    Dataset {
        shape: spec.shape,
        num_classes: spec.num_classes,
        pixels,
        labels,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_parsing() {
        let s: SyntheticSpec = "classes=4, per_class=3, shape=1x8x8, seed=9, split=test".parse().unwrap();
        assert_eq!(s.num_classes, 4);
        assert_eq!(s.shape, [1, 8, 8]);
        assert_eq!(s.split, 1);
        assert!("colour=red".parse::<SyntheticSpec>().is_err());
        assert!("shape=3x32".parse::<SyntheticSpec>().is_err());
    }

    #[test]
    fn templates_stay_in_range() {
        for t in class_templates(3, [2, 9, 7], 1) {
            assert!(t.iter().all(|&v| (0.2..0.8).contains(&v)));
        }
    }
}
