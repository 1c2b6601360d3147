//! Synthetic multi-domain nuclei images, image/mask file IO and batching.

mod components;
mod io;
mod sampler;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::align::DomainLabel;
use crate::error::{Error, Result};
use crate::nn::derive_seed;
use crate::tensor::Tensor;

pub use components::{connected_components, LabelMap};
pub use io::{
    load_manifest, load_pairs, read_pgm, read_ppm, write_dataset, write_pgm8, write_pgm16, write_ppm, Manifest,
    ManifestEntry, Split,
};
pub use sampler::{Batch, BatchSampler};

/// Domain id of the primary preset.
pub const PRIMARY_DOMAIN: u32 = 0;

/// Appearance and geometry of one synthetic domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub name: String,
    pub domain_id: u32,
    pub size: usize,
    /// Inclusive nuclei count range.
    pub count: (usize, usize),
    /// Equivalent radius range: each ellipse has area `π r²`.
    pub radius: (f64, f64),
    pub eccentricity: (f64, f64),
    pub foreground: [f64; 3],
    pub foreground_jitter: f64,
    pub background: [f64; 3],
    pub background_jitter: f64,
    /// Amplitude of the low-frequency background pattern.
    pub texture: f64,
    pub noise: f64,
    /// Box-blur radius in pixels.
    pub blur: usize,
    /// Largest IoU allowed between a new nucleus and any earlier one.
    pub max_iou: f64,
}

const PLACEMENT_ATTEMPTS: usize = 200;

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("domain {}: {m}", self.name)));
        let colours = self.foreground.iter().chain(&self.background);
        if colours.clone().any(|c| !(0.0..=1.0).contains(c)) {
            return bad("colour channels must lie in [0, 1]");
        }
        if self.count.0 == 0 || self.count.0 > self.count.1 {
            return bad("count range must satisfy 1 <= min <= max");
        }
        if !(self.radius.0 > 0.0 && self.radius.0 <= self.radius.1) {
            return bad("radius range must satisfy 0 < min <= max");
        }
        if !(0.0 <= self.eccentricity.0 && self.eccentricity.0 <= self.eccentricity.1 && self.eccentricity.1 < 1.0) {
            return bad("eccentricity range must lie in [0, 1)");
        }
        if !(self.noise >= 0.0 && self.texture >= 0.0 && self.foreground_jitter >= 0.0 && self.background_jitter >= 0.0) {
            return bad("noise, texture and jitter must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.max_iou) {
            return bad("max_iou must lie in [0, 1]");
        }
        if self.size == 0 || self.size % 4 != 0 {
            return bad("size must be a positive multiple of 4");
        }
        Ok(())
    }

    /// Built-in presets: `primary`, `aux1`, `aux2`, `aux3`, plus `pretrain`
    /// (the held-out domain used for the base-model stand-in). Nuclei counts
    /// scale with image area relative to 64x64.
    pub fn preset(name: &str, size: usize) -> Result<Self> {
        let base = Self {
            name: name.to_string(),
            domain_id: 0,
            size,
            count: (8, 14),
            radius: (3.0, 5.0),
            eccentricity: (0.0, 0.75),
            foreground: [0.45, 0.25, 0.60],
            foreground_jitter: 0.06,
            background: [0.92, 0.78, 0.86],
            background_jitter: 0.04,
            texture: 0.06,
            noise: 0.05,
            blur: 1,
            max_iou: 0.1,
        };
        let spec = match name {
            "primary" => base,
            "aux1" => Self {
                domain_id: 1,
                count: (10, 18),
                radius: (2.5, 4.5),
                foreground: [0.30, 0.20, 0.55],
                background: [0.85, 0.80, 0.90],
                noise: 0.07,
                ..base
            },
            "aux2" => Self {
                domain_id: 2,
                count: (5, 10),
                radius: (3.5, 6.0),
                foreground: [0.55, 0.30, 0.45],
                background: [0.95, 0.85, 0.80],
                texture: 0.1,
                noise: 0.04,
                ..base
            },
            "aux3" => Self {
                domain_id: 3,
                count: (8, 14),
                radius: (3.0, 5.0),
                foreground: [0.35, 0.35, 0.65],
                background: [0.80, 0.82, 0.88],
                noise: 0.09,
                blur: 2,
                ..base
            },
            "pretrain" => Self {
                domain_id: 9,
                count: (6, 16),
                radius: (2.5, 6.0),
                eccentricity: (0.0, 0.85),
                foreground: [0.20, 0.30, 0.40],
                foreground_jitter: 0.15,
                background: [0.85, 0.85, 0.80],
                background_jitter: 0.10,
                ..base
            },
            other => {
                return Err(Error::Config(format!(
                    "unknown preset {other:?} (expected primary, aux1, aux2, aux3 or pretrain)"
                )))
            }
        };
        let scale = (size as f64 / 64.0).powi(2);
        let scaled = |n: usize| ((n as f64 * scale).round() as usize).max(1);
        Ok(Self {
            count: (scaled(spec.count.0), scaled(spec.count.1)),
            ..spec
        })
    }

    pub const PRESETS: [&'static str; 4] = ["primary", "aux1", "aux2", "aux3"];
}

/// One image with its semantic mask, instance labels and domain tag.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainSample {
    /// `3 x H x W` in `[0, 1]`.
    pub image: Tensor<f64>,
    /// `1 x H x W` binary.
    pub mask: Tensor<f64>,
    pub instances: LabelMap,
    pub label: DomainLabel,
}

impl DomainSample {
    /// Builds the mask from the instance map so the two always agree.
    pub fn new(image: Tensor<f64>, instances: LabelMap, label: DomainLabel) -> Self {
        let (h, w) = (instances.height, instances.width);
        let mask = Tensor::from_fn([1, h, w], |i| if instances.labels[i] > 0 { 1.0 } else { 0.0 });
        Self {
            image,
            mask,
            instances,
            label,
        }
    }

    pub fn size(&self) -> usize {
        self.instances.height
    }

    /// Same sample tagged against a different primary domain.
    pub fn with_primary(mut self, primary_id: u32) -> Self {
        self.label = DomainLabel::new(self.label.domain_id, primary_id);
        self
    }
}

struct Ellipse {
    cy: f64,
    cx: f64,
    a: f64,
    b: f64,
    theta: f64,
}

impl Ellipse {
    fn pixels(&self, size: usize) -> Vec<usize> {
        let (s, c) = self.theta.sin_cos();
        let ext = self.a.ceil() as isize + 1;
        let (y0, x0) = (self.cy.floor() as isize, self.cx.floor() as isize);
        let mut out = Vec::new();
        for y in (y0 - ext).max(0)..=(y0 + ext).min(size as isize - 1) {
            for x in (x0 - ext).max(0)..=(x0 + ext).min(size as isize - 1) {
                if self.radial2(y as usize, x as usize, s, c) <= 1.0 {
                    out.push(y as usize * size + x as usize);
                }
            }
        }
        out
    }

    /// Squared normalised distance of pixel centre `(y, x)` from the centre.
    fn radial2(&self, y: usize, x: usize, s: f64, c: f64) -> f64 {
        let dy = y as f64 + 0.5 - self.cy;
        let dx = x as f64 + 0.5 - self.cx;
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u / self.a).powi(2) + (v / self.b).powi(2)
    }
}

fn place(spec: &DomainSpec, rng: &mut ChaCha8Rng, placed: &[(Ellipse, Vec<bool>)], index: usize) -> Result<Ellipse> {
    let size = spec.size as f64;
    for _ in 0..PLACEMENT_ATTEMPTS {
        let r = rng.gen_range(spec.radius.0..=spec.radius.1);
        let e = rng.gen_range(spec.eccentricity.0..=spec.eccentricity.1);
        let k = (1.0 - e * e).powf(0.25);
        let (a, b) = (r / k, r * k);
        if 2.0 * a + 1.0 > size {
            continue;
        }
        let ell = Ellipse {
            cy: rng.gen_range(a..size - a),
            cx: rng.gen_range(a..size - a),
            a,
            b,
            theta: rng.gen_range(0.0..std::f64::consts::PI),
        };
        let px = ell.pixels(spec.size);
        if px.is_empty() {
            continue;
        }
        let ok = placed.iter().all(|(_, cover)| {
            let inter = px.iter().filter(|&&i| cover[i]).count();
            let other = cover.iter().filter(|&&c| c).count();
            let iou = inter as f64 / (px.len() + other - inter) as f64;
            iou <= spec.max_iou
        });
        if ok {
            return Ok(ell);
        }
    }
    Err(Error::PlacementFailure {
        index,
        attempts: PLACEMENT_ATTEMPTS,
    })
}

fn box_blur(plane: &mut [f64], size: usize, radius: usize) {
    if radius == 0 {
        return;
    }
    let r = radius as isize;
    let n = size as isize;
    let mut tmp = vec![0.0; plane.len()];
    for pass in 0..2 {
        let (src, dst): (&[f64], &mut [f64]) = if pass == 0 { (&*plane, &mut tmp) } else { (&tmp, &mut *plane) };
        for y in 0..n {
            for x in 0..n {
                let mut acc = 0.0;
                for d in -r..=r {
                    let (yy, xx) = if pass == 0 {
                        (y, (x + d).clamp(0, n - 1))
                    } else {
                        ((y + d).clamp(0, n - 1), x)
                    };
                    acc += src[(yy * n + xx) as usize];
                }
                dst[(y * n + x) as usize] = acc / (2 * r + 1) as f64;
            }
        }
    }
}

/// Renders one sample from its own seed.
pub fn render(spec: &DomainSpec, seed: u64) -> Result<DomainSample> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = spec.size;
    let n = rng.gen_range(spec.count.0..=spec.count.1);
    let mut placed: Vec<(Ellipse, Vec<bool>)> = Vec::with_capacity(n);
    for i in 0..n {
        let ell = place(spec, &mut rng, &placed, i)?;
        let mut cover = vec![false; size * size];
        for p in ell.pixels(size) {
            cover[p] = true;
        }
        placed.push((ell, cover));
    }

    let mut planes = vec![vec![0.0; size * size]; 3];
    let phase: [f64; 2] = [rng.gen_range(0.0..6.3), rng.gen_range(0.0..6.3)];
    let freq: [(f64, f64); 2] = [
        (rng.gen_range(0.05..0.25), rng.gen_range(0.05..0.25)),
        (rng.gen_range(0.05..0.25), -rng.gen_range(0.05..0.25)),
    ];
    for (c, plane) in planes.iter_mut().enumerate() {
        let tint = spec.background[c] + rng.gen_range(-1.0..=1.0) * spec.background_jitter;
        for y in 0..size {
            for x in 0..size {
                let wave: f64 = (0..2)
                    .map(|k| (freq[k].0 * y as f64 + freq[k].1 * x as f64 + phase[k]).sin())
                    .sum::<f64>()
                    / 2.0;
                plane[y * size + x] = tint + spec.texture * wave;
            }
        }
    }

    let mut instances = LabelMap::zeros(size, size);
    for (k, (ell, _)) in placed.iter().enumerate() {
        let colour: Vec<f64> = (0..3)
            .map(|c| spec.foreground[c] + rng.gen_range(-1.0..=1.0) * spec.foreground_jitter)
            .collect();
        let (s, cth) = ell.theta.sin_cos();
        for p in ell.pixels(size) {
            let d2 = ell.radial2(p / size, p % size, s, cth);
            // Rim slightly lighter than the core.
            let shade = 0.85 + 0.15 * d2;
            for c in 0..3 {
                planes[c][p] = colour[c] * shade;
            }
            instances.labels[p] = k as u32 + 1;
        }
    }
    instances.relabel_contiguous();

    let noise = Normal::new(0.0, spec.noise.max(1e-300)).expect("noise is non-negative");
    for plane in planes.iter_mut() {
        box_blur(plane, size, spec.blur);
        for v in plane.iter_mut() {
            if spec.noise > 0.0 {
                *v += noise.sample(&mut rng);
            }
            *v = v.clamp(0.0, 1.0);
        }
    }
    let image = Tensor::new([3, size, size], planes.concat())?;
    Ok(DomainSample::new(
        image,
        instances,
        DomainLabel::new(spec.domain_id, PRIMARY_DOMAIN),
    ))
}

/// Per-sample seed; samples are independent of how many others are drawn.
pub fn sample_seed(spec: &DomainSpec, seed: u64, index: usize) -> u64 {
    derive_seed(seed, &format!("{}/{}/{}", spec.name, spec.domain_id, index))
}

/// `count` samples of `spec`, deterministic in `(spec, seed)`.
pub fn generate(spec: &DomainSpec, seed: u64, count: usize) -> Result<Vec<DomainSample>> {
    spec.validate()?;
    (0..count).map(|i| render(spec, sample_seed(spec, seed, i))).collect()
}

/// Area-average downsample of a `1 x H x W` binary mask by `factor`, then a
/// 0.5 threshold.
pub fn downsample_mask(mask: &Tensor<f64>, factor: usize) -> Result<Tensor<f64>> {
    let s = mask.shape();
    if s.len() != 3 || s[0] != 1 || factor == 0 || s[1] % factor != 0 || s[2] % factor != 0 {
        return Err(Error::attr("downsample_mask", format!("cannot downsample {s:?} by {factor}")));
    }
    let (h, w) = (s[1] / factor, s[2] / factor);
    let area = (factor * factor) as f64;
    Ok(Tensor::from_fn([1, h, w], |i| {
        let (y, x) = (i / w, i % w);
        let mut acc = 0.0;
        for dy in 0..factor {
            for dx in 0..factor {
                acc += mask.data()[(y * factor + dy) * s[2] + x * factor + dx];
            }
        }
        if acc / area >= 0.5 {
            1.0
        } else {
            0.0
        }
    }))
}

/// Train/validation/test split sizes for `n` samples (70/10/20, at least
/// one validation and test sample when `n >= 3`).
pub fn split_counts(n: usize) -> (usize, usize, usize) {
    if n < 3 {
        return (n, 0, 0);
    }
    let val = ((n as f64 * 0.1).round() as usize).max(1);
    let test = ((n as f64 * 0.2).round() as usize).max(1);
    (n - val - test, val, test)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_at_common_sizes() {
        for size in [32, 64, 128] {
            for name in DomainSpec::PRESETS.iter().chain(&["pretrain"]) {
                DomainSpec::preset(name, size).unwrap().validate().unwrap();
            }
        }
    }

    #[test]
    fn blur_preserves_constants() {
        let mut p = vec![0.25; 36];
        box_blur(&mut p, 6, 2);
        assert!(p.iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn splits_cover_everything() {
        for n in 0..50 {
            let (a, b, c) = split_counts(n);
            assert_eq!(a + b + c, n);
        }
        assert_eq!(split_counts(10), (7, 1, 2));
    }

    #[test]
    fn downsample_thresholds_block_means() {
        let m = Tensor::new([1, 2, 4], vec![1.0, 1.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        let d = downsample_mask(&m, 2).unwrap();
        assert_eq!(d.data(), &[1.0, 0.0]);
    }
}
