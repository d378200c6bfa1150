//! Deterministic synthetic scenes.
//!
//! # Random streams
//!
//! Every draw comes from `Xoshiro256PlusPlus`, seeded through
//! `seed_from_u64`, which expands the 64-bit seed into the 256-bit state with
//! SplitMix64. Normal variates use the `rand_distr` ziggurat
//! `StandardNormal`. Two kinds of stream exist:
//!
//! * the dataset stream, seeded with `spec.seed`, draws (in order) the
//!   category prototypes `[M, C]`, the teacher projection `[C_t, C]` and the
//!   text projection `[D, C]`;
//! * scene `i` uses a stream seeded with `spec.seed ^ mix(i)`, where `mix` is
//!   the first output of SplitMix64 seeded with `i + 1`.
//!
//! # Scene construction
//!
//! 1. Blobs (axis-aligned rectangles or ellipses) are painted onto an image
//!    grid of `grid * patch` pixels, background label 0. Every foreground
//!    category gets at least one blob; later blobs overwrite earlier ones.
//!    Masks are the one-hot encoding of the final label map.
//! 2. At the patch grid, a sharp field is formed as the coverage-weighted
//!    mix of category prototypes, plus one shared white-noise draw.
//! 3. Layer `L` of the pyramid is that field low-passed by the circular
//!    filter `exp(-blur * L * r^2)` (same normalized radius as the spectral
//!    analysis), so deeper layers lose high frequencies monotonically.
//! 4. The teacher is the coverage-weighted mix of projected prototypes on a
//!    grid twice as fine as the patch grid, with no blur and no noise.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_distr::StandardNormal;
use rand_xoshiro::{SplitMix64, Xoshiro256PlusPlus};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pyramid::{FeaturePyramid, DEFAULT_LAYERS};
use crate::seghead::{SegmentationMap, TextEmbeddingBank};
use crate::tensor::Tensor;

use super::dataset::SceneSample;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub seed: u64,
    /// Patch grid height and width.
    pub grid_h: usize,
    pub grid_w: usize,
    /// Image pixels per patch side; must be even.
    pub patch: usize,
    pub channels: usize,
    pub teacher_channels: usize,
    pub embed_dim: usize,
    /// Category count including background.
    pub categories: usize,
    pub blobs_min: usize,
    pub blobs_max: usize,
    /// Blob half-extent range in pixels.
    pub blob_min_radius: f64,
    pub blob_max_radius: f64,
    /// Standard deviation of the shared feature noise.
    pub noise: f64,
    /// Low-pass strength per layer index.
    pub blur_per_depth: f64,
    pub layers: Vec<usize>,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            seed: 0,
            grid_h: 8,
            grid_w: 8,
            patch: 4,
            channels: 16,
            teacher_channels: 8,
            embed_dim: 12,
            categories: 4,
            blobs_min: 3,
            blobs_max: 5,
            blob_min_radius: 8.0,
            blob_max_radius: 14.0,
            noise: 0.3,
            blur_per_depth: 0.25,
            layers: DEFAULT_LAYERS.to_vec(),
        }
    }
}

impl SyntheticSpec {
    pub fn image_h(&self) -> usize {
        self.grid_h * self.patch
    }

    pub fn image_w(&self) -> usize {
        self.grid_w * self.patch
    }

    pub fn validate(&self) -> Result<()> {
        let extents = [
            ("grid_h", self.grid_h),
            ("grid_w", self.grid_w),
            ("patch", self.patch),
            ("channels", self.channels),
            ("teacher_channels", self.teacher_channels),
            ("embed_dim", self.embed_dim),
            ("categories", self.categories),
        ];
        if let Some((name, v)) = extents.iter().find(|(_, v)| *v < 2) {
            return Err(Error::Validation(format!("{name} must be >= 2, got {v}")));
        }
        if self.patch % 2 != 0 {
            return Err(Error::Validation(format!("patch must be even, got {}", self.patch)));
        }
        if self.blobs_min > self.blobs_max {
            return Err(Error::Validation(format!(
                "blobs_min {} exceeds blobs_max {}",
                self.blobs_min, self.blobs_max
            )));
        }
        if !(self.blob_min_radius > 0.0 && self.blob_min_radius <= self.blob_max_radius) {
            return Err(Error::Validation(format!(
                "blob radius range [{}, {}] is invalid",
                self.blob_min_radius, self.blob_max_radius
            )));
        }
        if !(self.noise >= 0.0 && self.blur_per_depth >= 0.0) {
            return Err(Error::Validation("noise and blur_per_depth must be >= 0".into()));
        }
        crate::pyramid::validate_layer_set(&self.layers)?;
        if self.categories - 1 > self.blobs_max {
            return Err(Error::Generation(format!(
                "{} foreground categories cannot fit in at most {} blobs",
                self.categories - 1,
                self.blobs_max
            )));
        }
        Ok(())
    }

    pub fn category_names(&self) -> Vec<String> {
        (0..self.categories)
            .map(|j| if j == 0 { "background".to_string() } else { format!("class_{j}") })
            .collect()
    }
}

/// Dataset-level draws shared by every scene.
#[derive(Debug, Clone)]
pub struct World {
    /// `[M, C]`.
    pub prototypes: Tensor,
    /// `[C_t, C]`.
    pub teacher_proj: Tensor,
    /// `[D, C]`.
    pub text_proj: Tensor,
}

fn randn<R: Rng>(shape: &[usize], rng: &mut R) -> Tensor {
    Tensor::from_fn(shape, |_| rng.sample(StandardNormal))
}

impl World {
    pub fn new(spec: &SyntheticSpec) -> Self {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(spec.seed);
        let c = spec.channels;
        let prototypes = randn(&[spec.categories, c], &mut rng);
        let s = 1.0 / (c as f64).sqrt();
        let teacher_proj = randn(&[spec.teacher_channels, c], &mut rng).scale(s);
        let text_proj = randn(&[spec.embed_dim, c], &mut rng).scale(s);
        World {
            prototypes,
            teacher_proj,
            text_proj,
        }
    }

    /// `A @ prototypes^T` as `[rows(A), M]` columns per category.
    fn project(&self, a: &Tensor) -> Vec<Vec<f64>> {
        let (rows, c) = (a.shape()[0], a.shape()[1]);
        let m = self.prototypes.shape()[0];
        (0..m)
            .map(|j| {
                (0..rows)
                    .map(|r| (0..c).map(|k| a[r * c + k] * self.prototypes[j * c + k]).sum())
                    .collect()
            })
            .collect()
    }
}

fn scene_rng(seed: u64, index: u64) -> Xoshiro256PlusPlus {
    let mix = SplitMix64::seed_from_u64(index + 1).next_u64();
    Xoshiro256PlusPlus::seed_from_u64(seed ^ mix)
}

/// Paints the blobs; returns the `[H_img * W_img]` label map.
fn paint_labels<R: Rng>(spec: &SyntheticSpec, rng: &mut R) -> Vec<u32> {
    let (ih, iw) = (spec.image_h(), spec.image_w());
    let fg = spec.categories - 1;
    let lo = spec.blobs_min.max(fg);
    let n = rng.gen_range(lo..=spec.blobs_max);
    let mut cats: Vec<u32> = (1..=fg as u32).collect();
    cats.shuffle(rng);
    while cats.len() < n {
        cats.push(rng.gen_range(1..=fg as u32));
    }
    let mut labels = vec![0u32; ih * iw];
    for &cat in &cats {
        let ellipse = rng.gen_bool(0.5);
        let cy = rng.gen_range(0.0..ih as f64);
        let cx = rng.gen_range(0.0..iw as f64);
        let ry = rng.gen_range(spec.blob_min_radius..=spec.blob_max_radius);
        let rx = rng.gen_range(spec.blob_min_radius..=spec.blob_max_radius);
        for y in 0..ih {
            for x in 0..iw {
                let dy = (y as f64 + 0.5 - cy) / ry;
                let dx = (x as f64 + 0.5 - cx) / rx;
                let inside = if ellipse {
                    dy * dy + dx * dx <= 1.0
                } else {
                    dy.abs() <= 1.0 && dx.abs() <= 1.0
                };
                if inside {
                    labels[y * iw + x] = cat;
                }
            }
        }
    }
    labels
}

/// Per-category coverage fractions on a grid with `cell`-pixel cells.
fn coverage(labels: &[u32], ih: usize, iw: usize, cell: usize, m: usize) -> (usize, usize, Vec<f64>) {
    let (gh, gw) = (ih / cell, iw / cell);
    let mut cov = vec![0.0; m * gh * gw];
    let inv = 1.0 / (cell * cell) as f64;
    for y in 0..ih {
        for x in 0..iw {
            let j = labels[y * iw + x] as usize;
            cov[(j * gh + y / cell) * gw + x / cell] += inv;
        }
    }
    (gh, gw, cov)
}

/// Mixes per-category column vectors by coverage into a `[rows, gh, gw]` map.
fn mix(cols: &[Vec<f64>], cov: &[f64], gh: usize, gw: usize) -> Tensor {
    let rows = cols[0].len();
    let hw = gh * gw;
    Tensor::from_fn(&[rows, gh, gw], |i| {
        let (r, p) = (i / hw, i % hw);
        cols.iter().enumerate().map(|(j, col)| cov[j * hw + p] * col[r]).sum()
    })
}

/// Real kernel of the circular filter with response `exp(-kappa * (u/(n/2))^2 / 2)`.
fn lowpass_kernel(n: usize, kappa: f64) -> Vec<f64> {
    let half = n as f64 / 2.0;
    let resp: Vec<f64> = (0..n)
        .map(|k| {
            let u = if k <= n / 2 { k as f64 } else { k as f64 - n as f64 };
            (-kappa * (u / half).powi(2) / 2.0).exp()
        })
        .collect();
    (0..n)
        .map(|m| {
            resp.iter()
                .enumerate()
                .map(|(k, h)| h * (2.0 * PI * (k * m) as f64 / n as f64).cos())
                .sum::<f64>()
                / n as f64
        })
        .collect()
}

/// Separable circular low-pass with response `exp(-kappa * r^2)`.
pub fn lowpass(map: &Tensor, kappa: f64) -> Result<Tensor> {
    let (c, h, w) = map.chw("lowpass")?;
    if kappa == 0.0 {
        return Ok(map.clone());
    }
    let kh = lowpass_kernel(h, kappa);
    let kw = lowpass_kernel(w, kappa);
    let mut rows = Tensor::zeros(&[c, h, w]);
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                rows[(ch * h + y) * w + x] = (0..w).map(|t| kw[t] * map[(ch * h + y) * w + (x + w - t) % w]).sum();
            }
        }
    }
    let mut out = Tensor::zeros(&[c, h, w]);
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                out[(ch * h + y) * w + x] = (0..h).map(|t| kh[t] * rows[(ch * h + (y + h - t) % h) * w + x]).sum();
            }
        }
    }
    Ok(out)
}

/// Scene `index` of the dataset described by `spec`.
pub fn gen_scene(spec: &SyntheticSpec, index: u64) -> Result<SceneSample> {
    spec.validate()?;
    let world = World::new(spec);
    gen_scene_in(spec, &world, index)
}

pub fn gen_scene_in(spec: &SyntheticSpec, world: &World, index: u64) -> Result<SceneSample> {
    let mut rng = scene_rng(spec.seed, index);
    let (ih, iw) = (spec.image_h(), spec.image_w());
    let m = spec.categories;
    let labels = paint_labels(spec, &mut rng);

    let masks = Tensor::from_fn(&[m, ih, iw], |i| {
        let (j, p) = (i / (ih * iw), i % (ih * iw));
        if labels[p] as usize == j {
            1.0
        } else {
            0.0
        }
    });

    let protos: Vec<Vec<f64>> = (0..m)
        .map(|j| world.prototypes.data()[j * spec.channels..(j + 1) * spec.channels].to_vec())
        .collect();
    let (gh, gw, cov) = coverage(&labels, ih, iw, spec.patch, m);
    let noise = randn(&[spec.channels, gh, gw], &mut rng).scale(spec.noise);
    let base = mix(&protos, &cov, gh, gw).add(&noise)?;
    let mut pyramid = FeaturePyramid::new();
    for &l in &spec.layers {
        pyramid.insert(l, lowpass(&base, spec.blur_per_depth * l as f64)?)?;
    }

    let (th, tw, tcov) = coverage(&labels, ih, iw, spec.patch / 2, m);
    let teacher = mix(&world.project(&world.teacher_proj), &tcov, th, tw);

    Ok(SceneSample {
        pyramid,
        teacher,
        masks,
        gt: SegmentationMap::new(ih, iw, labels)?,
        names: spec.category_names(),
    })
}

/// Category prototypes projected to the text dimension and normalized.
pub fn gen_text_bank(spec: &SyntheticSpec) -> Result<TextEmbeddingBank> {
    spec.validate()?;
    let world = World::new(spec);
    let cols = world.project(&world.text_proj);
    let d = spec.embed_dim;
    let raw = Tensor::from_fn(&[spec.categories, d], |i| cols[i / d][i % d]);
    TextEmbeddingBank::from_raw(spec.category_names(), &raw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::spectrum::{dft2_power, layerwise_spectra, DEFAULT_CUTOFF};
    use crate::analysis::spectrum::normalized_radius;
    use crate::seghead::argmax_labels;

    #[test]
    fn same_seed_same_scene() {
        let spec = SyntheticSpec::default();
        let a = gen_scene(&spec, 3).unwrap();
        let b = gen_scene(&spec, 3).unwrap();
        assert_eq!(a, b);
        let c = gen_scene(&spec, 4).unwrap();
        assert_ne!(a.gt, c.gt);
    }

    #[test]
    fn masks_reconstruct_gt_and_are_exclusive() {
        let spec = SyntheticSpec::default();
        for i in 0..8 {
            let s = gen_scene(&spec, i).unwrap();
            assert_eq!(argmax_labels(&s.masks).unwrap(), s.gt);
            let (m, h, w) = s.masks.chw("").unwrap();
            for p in 0..h * w {
                let on: f64 = (0..m).map(|j| s.masks[j * h * w + p]).sum();
                assert_eq!(on, 1.0);
            }
        }
    }

    #[test]
    fn shapes_follow_spec() {
        let spec = SyntheticSpec::default();
        let s = gen_scene(&spec, 0).unwrap();
        assert_eq!(s.pyramid.layer_ids(), spec.layers);
        assert_eq!(s.pyramid.dims().unwrap(), (16, 8, 8));
        assert_eq!(s.teacher.shape(), &[8, 16, 16]);
        assert_eq!(s.masks.shape(), &[4, 32, 32]);
    }

    #[test]
    fn lowpass_has_the_documented_response() {
        let mut r = Xoshiro256PlusPlus::seed_from_u64(1);
        let x = Tensor::from_fn(&[1, 8, 6], |_| r.sample(StandardNormal));
        let kappa = 0.8;
        let y = lowpass(&x, kappa).unwrap();
        let px = dft2_power(&x.channel(0).unwrap()).unwrap();
        let py = dft2_power(&y.channel(0).unwrap()).unwrap();
        for i in 0..8 {
            for j in 0..6 {
                let r = normalized_radius(i, j, 8, 6);
                let gain = (-2.0 * kappa * r * r).exp();
                let k = i * 6 + j;
                assert!((py.values()[k] - gain * px.values()[k]).abs() < 1e-9 * (1.0 + px.values()[k]));
            }
        }
    }

    #[test]
    fn generated_pyramids_are_spectrally_monotone() {
        for seed in 0..5 {
            let spec = SyntheticSpec {
                seed,
                ..SyntheticSpec::default()
            };
            for i in 0..4 {
                let s = gen_scene(&spec, i).unwrap();
                let rep = layerwise_spectra(&s.pyramid, 4, DEFAULT_CUTOFF).unwrap();
                assert!(rep.monotone, "seed {seed} scene {i}: {:?}", rep.ratios());
            }
        }
    }

    #[test]
    fn text_bank_is_unit_and_separable() {
        let spec = SyntheticSpec::default();
        let b = gen_text_bank(&spec).unwrap();
        assert_eq!(b, gen_text_bank(&spec).unwrap());
        let d = b.dim();
        let e = b.embeddings();
        for j in 0..b.len() {
            let n: f64 = (0..d).map(|k| e[j * d + k].powi(2)).sum();
            assert!((n.sqrt() - 1.0).abs() < 1e-12);
            for i in 0..j {
                let c: f64 = (0..d).map(|k| e[j * d + k] * e[i * d + k]).sum();
                assert!(c < 0.99);
            }
        }
    }

    #[test]
    fn capacity_and_extent_errors() {
        let spec = SyntheticSpec {
            categories: 8,
            blobs_max: 5,
            ..SyntheticSpec::default()
        };
        assert!(matches!(gen_scene(&spec, 0), Err(Error::Generation(_))));
        let spec = SyntheticSpec {
            grid_h: 1,
            ..SyntheticSpec::default()
        };
        assert!(matches!(gen_scene(&spec, 0), Err(Error::Validation(_))));
    }
}
