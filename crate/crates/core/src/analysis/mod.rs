//! Spectral-bias and representation-similarity instruments.

pub mod cka;
pub mod spectrum;

pub use cka::{cka_heatmap, linear_cka, CkaMatrix};
pub use spectrum::{
    channel_collapse, dft2_power, freq_ratio, layerwise_spectra, layerwise_spectra_pooled, radial_profile,
    LayerSpectralReport, PowerSpectrum, SpectralProfile,
};
