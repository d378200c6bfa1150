//! 2D power spectra, radial energy profiles and the high/low frequency
//! log-ratio.

use num_complex::Complex64;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::pyramid::FeaturePyramid;
use crate::tensor::Tensor;

/// `|F(u,v)|^2` of the unnormalized forward DFT, shifted so that the zero
/// frequency sits at `(H/2, W/2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerSpectrum {
    values: Tensor,
}

impl PowerSpectrum {
    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn dims(&self) -> (usize, usize) {
        let s = self.values.shape();
        (s[0], s[1])
    }

    pub fn total(&self) -> f64 {
        self.values.sum()
    }

    /// Index of the zero frequency in the shifted layout.
    pub fn center(&self) -> (usize, usize) {
        let (h, w) = self.dims();
        (h / 2, w / 2)
    }

    /// Element-wise mean of spectra of equal dims.
    pub fn mean(spectra: &[PowerSpectrum]) -> Result<PowerSpectrum> {
        let first = spectra
            .first()
            .ok_or_else(|| Error::Validation("mean of zero spectra".into()))?;
        let mut acc = Tensor::zeros(first.values.shape());
        for s in spectra {
            acc.accumulate(&s.values)?;
        }
        Ok(PowerSpectrum {
            values: acc.scale(1.0 / spectra.len() as f64),
        })
    }
}

/// `e^{-i 2 pi k / n}` for `k` in `0..n`.
fn twiddles(n: usize) -> Vec<Complex64> {
    (0..n)
        .map(|k| Complex64::from_polar(1.0, -2.0 * std::f64::consts::PI * k as f64 / n as f64))
        .collect()
}

/// Direct DFT along rows then columns.
fn dft2(map: &Tensor) -> Result<(usize, usize, Vec<Complex64>)> {
    let (h, w) = map.matrix("dft2_power")?;
    let tw_w = twiddles(w);
    let tw_h = twiddles(h);
    let f = map.data();
    let mut rows = vec![Complex64::new(0.0, 0.0); h * w];
    for x in 0..h {
        for v in 0..w {
            let mut acc = Complex64::new(0.0, 0.0);
            for y in 0..w {
                acc += tw_w[(v * y) % w] * f[x * w + y];
            }
            rows[x * w + v] = acc;
        }
    }
    let mut out = vec![Complex64::new(0.0, 0.0); h * w];
    for u in 0..h {
        for v in 0..w {
            let mut acc = Complex64::new(0.0, 0.0);
            for x in 0..h {
                acc += tw_h[(u * x) % h] * rows[x * w + v];
            }
            out[u * w + v] = acc;
        }
    }
    Ok((h, w, out))
}

pub fn dft2_power(map: &Tensor) -> Result<PowerSpectrum> {
    let (h, w, spec) = dft2(map)?;
    if h < 2 || w < 2 {
        return Err(Error::Validation(format!(
            "dft2_power needs H, W >= 2, got {h}x{w}"
        )));
    }
    let mut shifted = vec![0.0; h * w];
    for u in 0..h {
        for v in 0..w {
            let su = (u + h / 2) % h;
            let sv = (v + w / 2) % w;
            shifted[su * w + sv] = spec[u * w + v].norm_sqr();
        }
    }
    Ok(PowerSpectrum {
        values: Tensor::new(&[h, w], shifted)?,
    })
}

/// How a `[C, H, W]` map becomes a single spectrum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub enum ChannelPolicy {
    /// Mean of the per-channel power spectra.
    #[default]
    MeanPower,
}

/// Spectrum of a multi-channel map under [`ChannelPolicy::MeanPower`].
pub fn channel_collapse(map: &Tensor) -> Result<PowerSpectrum> {
    channel_collapse_with(map, ChannelPolicy::MeanPower)
}

pub fn channel_collapse_with(map: &Tensor, policy: ChannelPolicy) -> Result<PowerSpectrum> {
    let (c, _, _) = map.chw("channel_collapse")?;
    match policy {
        ChannelPolicy::MeanPower => {
            let spectra = (0..c)
                .map(|ch| dft2_power(&map.channel(ch)?))
                .collect::<Result<Vec<_>>>()?;
            PowerSpectrum::mean(&spectra)
        }
    }
}

/// Azimuthally averaged energy `E(r)` over `n_bins` equal-width radius bins
/// on `[0, 1]`, plus the optional cutoff and log-ratio once computed.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpectralProfile {
    pub radii: Vec<f64>,
    pub energy: Vec<f64>,
    pub counts: Vec<usize>,
    pub cutoff: Option<f64>,
    pub ratio: Option<f64>,
}

/// Normalized radius of shifted index `(i, j)`: 0 at DC, 1 at the Nyquist corner.
pub fn normalized_radius(i: usize, j: usize, h: usize, w: usize) -> f64 {
    let u = i as f64 - (h / 2) as f64;
    let v = j as f64 - (w / 2) as f64;
    let a = u / (h as f64 / 2.0);
    let b = v / (w as f64 / 2.0);
    (a * a + b * b).sqrt() / std::f64::consts::SQRT_2
}

pub fn bin_of(r: f64, n_bins: usize) -> usize {
    ((r * n_bins as f64).floor() as usize).min(n_bins - 1)
}

pub fn radial_profile(spec: &PowerSpectrum, n_bins: usize) -> Result<SpectralProfile> {
    if n_bins < 2 {
        return Err(Error::Config(format!("radial_profile needs n_bins >= 2, got {n_bins}")));
    }
    let (h, w) = spec.dims();
    let p = spec.values.data();
    let mut sums = vec![0.0; n_bins];
    let mut counts = vec![0usize; n_bins];
    for i in 0..h {
        for j in 0..w {
            let b = bin_of(normalized_radius(i, j, h, w), n_bins);
            sums[b] += p[i * w + j];
            counts[b] += 1;
        }
    }
    let energy = sums
        .iter()
        .zip(&counts)
        .map(|(&s, &n)| if n == 0 { 0.0 } else { s / n as f64 })
        .collect();
    Ok(SpectralProfile {
        radii: (0..n_bins).map(|b| (b as f64 + 0.5) / n_bins as f64).collect(),
        energy,
        counts,
        cutoff: None,
        ratio: None,
    })
}

/// Integral over `[a, b]` of the piecewise-linear interpolant through
/// `(radii, energy)`, held flat beyond the first and last bin centers.
fn integrate(radii: &[f64], energy: &[f64], a: f64, b: f64) -> f64 {
    let n = radii.len();
    // knots: 0, centers..., 1
    let mut xs = Vec::with_capacity(n + 2);
    let mut ys = Vec::with_capacity(n + 2);
    xs.push(0.0);
    ys.push(energy[0]);
    xs.extend_from_slice(radii);
    ys.extend_from_slice(energy);
    xs.push(1.0);
    ys.push(energy[n - 1]);

    let mut total = 0.0;
    for k in 0..xs.len() - 1 {
        let (x0, x1) = (xs[k], xs[k + 1]);
        let lo = x0.max(a);
        let hi = x1.min(b);
        if hi <= lo {
            continue;
        }
        let slope = if x1 > x0 { (ys[k + 1] - ys[k]) / (x1 - x0) } else { 0.0 };
        let at = |x: f64| ys[k] + slope * (x - x0);
        total += 0.5 * (at(lo) + at(hi)) * (hi - lo);
    }
    total
}

const DEGENERATE_REL: f64 = 1e-14;

/// `log10(∫_{r_c}^1 E / ∫_0^{r_c} E)` by trapezoidal integration over bin centers.
pub fn freq_ratio(profile: &SpectralProfile, r_c: f64) -> Result<f64> {
    if !(r_c > 0.0 && r_c < 1.0) {
        return Err(Error::Config(format!("cutoff radius must be in (0, 1), got {r_c}")));
    }
    let low = integrate(&profile.radii, &profile.energy, 0.0, r_c);
    let high = integrate(&profile.radii, &profile.energy, r_c, 1.0);
    // Band energies at rounding level relative to the total count as zero.
    // The bin sums catch DC-only spectra, whose interpolant leaks across r_c.
    let floor = DEGENERATE_REL * (low.abs() + high.abs());
    let (mut low_bins, mut high_bins, mut n_low) = (0.0, 0.0, 0);
    for (&r, &e) in profile.radii.iter().zip(&profile.energy) {
        if r < r_c {
            low_bins += e;
            n_low += 1;
        } else {
            high_bins += e;
        }
    }
    let bin_floor = DEGENERATE_REL * (low_bins + high_bins).abs();
    let empty_band = !(high_bins > bin_floor) || (n_low > 0 && !(low_bins > bin_floor));
    if !(low > floor) || !(high > floor) || empty_band {
        return Err(Error::Degenerate {
            op: "freq_ratio",
            location: None,
            reason: format!(
                "non-positive band energy (low {low:e}, high {high:e}); the feature map is constant or band-limited"
            ),
        });
    }
    Ok((high / low).log10())
}

impl SpectralProfile {
    /// Computes and stores the log-ratio at `r_c`.
    pub fn with_ratio(mut self, r_c: f64) -> Result<Self> {
        self.ratio = Some(freq_ratio(&self, r_c)?);
        self.cutoff = Some(r_c);
        Ok(self)
    }
}

/// Default bin count for an `H x W` map: `min(H, W) / 2`, at least 2.
pub fn default_bins(h: usize, w: usize) -> usize {
    (h.min(w) / 2).max(2)
}

/// Default cutoff radius.
pub const DEFAULT_CUTOFF: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerProfile {
    pub layer: usize,
    pub radii: Vec<f64>,
    pub energy: Vec<f64>,
    pub ratio: f64,
    #[serde(skip)]
    pub counts: Vec<usize>,
}

/// Per-layer profiles and whether the ratio is non-increasing with depth.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerSpectralReport {
    pub layers: Vec<LayerProfile>,
    pub monotone: bool,
}

impl LayerSpectralReport {
    fn from_profiles(profiles: Vec<(usize, SpectralProfile)>) -> Self {
        let layers: Vec<LayerProfile> = profiles
            .into_iter()
            .map(|(layer, p)| LayerProfile {
                layer,
                radii: p.radii,
                energy: p.energy,
                ratio: p.ratio.expect("ratio computed"),
                counts: p.counts,
            })
            .collect();
        let monotone = layers.windows(2).all(|w| w[1].ratio <= w[0].ratio);
        LayerSpectralReport { layers, monotone }
    }

    pub fn ratios(&self) -> Vec<(usize, f64)> {
        self.layers.iter().map(|l| (l.layer, l.ratio)).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// One row per (layer, bin).
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,bin,radius,energy,count,ratio\n");
        for l in &self.layers {
            for (b, (r, e)) in l.radii.iter().zip(&l.energy).enumerate() {
                s.push_str(&format!(
                    "{},{},{},{:e},{},{}\n",
                    l.layer, b, r, e, l.counts[b], l.ratio
                ));
            }
        }
        s
    }
}

fn layer_error(layer: usize, e: Error) -> Error {
    match e {
        Error::Degenerate { op, reason, .. } => Error::Degenerate {
            op,
            location: Some(vec![layer]),
            reason: format!("layer {layer}: {reason}"),
        },
        other => other,
    }
}

pub fn layerwise_spectra(pyramid: &FeaturePyramid, n_bins: usize, r_c: f64) -> Result<LayerSpectralReport> {
    layerwise_spectra_pooled(std::slice::from_ref(pyramid), n_bins, r_c)
}

/// Like [`layerwise_spectra`], with each layer's spectrum averaged over
/// several pyramids of equal dims.
pub fn layerwise_spectra_pooled(
    pyramids: &[FeaturePyramid],
    n_bins: usize,
    r_c: f64,
) -> Result<LayerSpectralReport> {
    let first = pyramids
        .first()
        .filter(|p| !p.is_empty())
        .ok_or_else(|| Error::Validation("layerwise_spectra needs a non-empty pyramid".into()))?;
    let (_, h, w) = first.dims()?;
    let mut profiles = Vec::new();
    for layer in first.layer_ids() {
        let mut spectra = Vec::with_capacity(pyramids.len());
        for p in pyramids {
            let map = p.get(layer)?;
            let (_, lh, lw) = map.chw("layerwise_spectra")?;
            if (lh, lw) != (h, w) {
                return Err(Error::Dimension {
                    op: "layerwise_spectra",
                    axis: "spatial dims",
                    expected: h * w,
                    got: lh * lw,
                });
            }
            spectra.push(channel_collapse(map)?);
        }
        let profile = radial_profile(&PowerSpectrum::mean(&spectra)?, n_bins)?
            .with_ratio(r_c)
            .map_err(|e| layer_error(layer, e))?;
        profiles.push((layer, profile));
    }
    Ok(LayerSpectralReport::from_profiles(profiles))
}

/// Ratio of a single `[C, H, W]` map with default bins.
pub fn map_ratio(map: &Tensor, r_c: f64) -> Result<f64> {
    let (_, h, w) = map.chw("map_ratio")?;
    let profile = radial_profile(&channel_collapse(map)?, default_bins(h, w))?;
    freq_ratio(&profile, r_c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_xoshiro::Xoshiro256PlusPlus;

    /// O(N^4) double-sum DFT, returned in the same shifted layout.
    fn naive_power(map: &Tensor) -> Vec<f64> {
        let (h, w) = map.matrix("naive").unwrap();
        let mut out = vec![0.0; h * w];
        for u in 0..h {
            for v in 0..w {
                let (mut re, mut im) = (0.0, 0.0);
                for x in 0..h {
                    for y in 0..w {
                        let ang = -2.0
                            * std::f64::consts::PI
                            * (u as f64 * x as f64 / h as f64 + v as f64 * y as f64 / w as f64);
                        re += map[x * w + y] * ang.cos();
                        im += map[x * w + y] * ang.sin();
                    }
                }
                out[((u + h / 2) % h) * w + (v + w / 2) % w] = re * re + im * im;
            }
        }
        out
    }

    #[test]
    fn constant_map_is_dc_only() {
        let c = 1.7;
        let s = dft2_power(&Tensor::full(&[6, 4], c)).unwrap();
        let (ci, cj) = s.center();
        let want = (c * 24.0) * (c * 24.0);
        for i in 0..6 {
            for j in 0..4 {
                let v = s.values()[i * 4 + j];
                if (i, j) == (ci, cj) {
                    assert!((v - want).abs() < 1e-9 * want);
                } else {
                    assert!(v < 1e-18, "({i},{j}) = {v}");
                }
            }
        }
    }

    #[test]
    fn impulse_is_flat() {
        let mut t = Tensor::zeros(&[5, 8]);
        t[13] = 1.0;
        let s = dft2_power(&t).unwrap();
        assert!(s.values().data().iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn matches_naive_dft() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(4);
        for (h, w) in [(8, 8), (5, 6), (2, 3)] {
            let t = Tensor::randn(&[h, w], &mut rng);
            let fast = dft2_power(&t).unwrap();
            for (a, b) in fast.values().data().iter().zip(naive_power(&t)) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn single_channel_collapse_is_the_plain_spectrum() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(8);
        let t = Tensor::randn(&[1, 4, 4], &mut rng);
        let a = channel_collapse(&t).unwrap();
        let b = dft2_power(&t.channel(0).unwrap()).unwrap();
        assert_eq!(a, b);

        let ch = t.channel(0).unwrap();
        let twin = Tensor::new(&[2, 4, 4], [ch.data(), ch.data()].concat()).unwrap();
        assert_eq!(channel_collapse(&twin).unwrap(), b);
    }

    #[test]
    fn channel_mean_matches_per_channel_oracle() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(10);
        let t = Tensor::randn(&[3, 4, 4], &mut rng);
        let got = channel_collapse(&t).unwrap();
        let per: Vec<Vec<f64>> = (0..3).map(|c| naive_power(&t.channel(c).unwrap())).collect();
        for i in 0..16 {
            let mean = (per[0][i] + per[1][i] + per[2][i]) / 3.0;
            assert!((got.values()[i] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn flat_spectrum_profile_is_flat() {
        let mut t = Tensor::zeros(&[8, 8]);
        t[0] = 1.0;
        let p = radial_profile(&dft2_power(&t).unwrap(), 4).unwrap();
        for (e, n) in p.energy.iter().zip(&p.counts) {
            if *n > 0 {
                assert!((e - 1.0).abs() < 1e-12);
            }
        }
        assert_eq!(p.counts.iter().sum::<usize>(), 64);
    }

    #[test]
    fn dc_only_profile() {
        let p = radial_profile(&dft2_power(&Tensor::full(&[8, 8], 2.0)).unwrap(), 4).unwrap();
        assert!(p.energy[0] > 0.0);
        assert!(p.energy[1..].iter().all(|&e| e < 1e-18));
    }

    #[test]
    fn brute_force_binning() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(12);
        let s = dft2_power(&Tensor::randn(&[8, 8], &mut rng)).unwrap();
        let p = radial_profile(&s, 8).unwrap();
        let mut sums = [0.0; 8];
        let mut counts = [0usize; 8];
        for i in 0..8 {
            for j in 0..8 {
                let u = i as f64 - 4.0;
                let v = j as f64 - 4.0;
                let r = ((u / 4.0).powi(2) + (v / 4.0).powi(2)).sqrt() / 2f64.sqrt();
                let b = ((r * 8.0) as usize).min(7);
                sums[b] += s.values()[i * 8 + j];
                counts[b] += 1;
            }
        }
        for b in 0..8 {
            let want = if counts[b] == 0 { 0.0 } else { sums[b] / counts[b] as f64 };
            assert_eq!(counts[b], p.counts[b]);
            assert!((p.energy[b] - want).abs() < 1e-12);
        }
    }

    fn flat_profile(n: usize) -> SpectralProfile {
        SpectralProfile {
            radii: (0..n).map(|b| (b as f64 + 0.5) / n as f64).collect(),
            energy: vec![3.0; n],
            counts: vec![1; n],
            cutoff: None,
            ratio: None,
        }
    }

    #[test]
    fn constant_energy_ratios() {
        let p = flat_profile(4);
        assert!(freq_ratio(&p, 0.5).unwrap().abs() < 1e-12);
        assert!((freq_ratio(&p, 0.25).unwrap() - 3f64.log10()).abs() < 1e-12);
    }

    #[test]
    fn piecewise_linear_matches_riemann_sum() {
        let mut p = flat_profile(5);
        p.energy = vec![9.0, 4.0, 6.0, 1.0, 0.5];
        let interp = |r: f64| -> f64 {
            let c = &p.radii;
            if r <= c[0] {
                return p.energy[0];
            }
            if r >= c[4] {
                return p.energy[4];
            }
            let k = c.iter().rposition(|&x| x <= r).unwrap();
            let t = (r - c[k]) / (c[k + 1] - c[k]);
            p.energy[k] * (1.0 - t) + p.energy[k + 1] * t
        };
        let n = 1_000_000;
        let rc = 0.37;
        let (mut lo, mut hi) = (0.0, 0.0);
        for i in 0..n {
            let r = (i as f64 + 0.5) / n as f64;
            if r < rc {
                lo += interp(r) / n as f64;
            } else {
                hi += interp(r) / n as f64;
            }
        }
        let got = freq_ratio(&p, rc).unwrap();
        assert!((got - (hi / lo).log10()).abs() < 1e-6);
    }

    #[test]
    fn degenerate_spectrum_is_an_error() {
        let p = radial_profile(&dft2_power(&Tensor::full(&[8, 8], 1.0)).unwrap(), 4).unwrap();
        assert!(matches!(freq_ratio(&p, 0.25), Err(Error::Degenerate { .. })));
        assert!(freq_ratio(&p, 1.0).is_err());
    }
}
