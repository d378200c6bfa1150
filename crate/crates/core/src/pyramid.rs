use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Backbone layers sampled by default.
pub const DEFAULT_LAYERS: [usize; 6] = [2, 4, 6, 8, 10, 12];

/// The deepest layer; always the residual base of the fusion.
pub const TOP_LAYER: usize = 12;

/// Per-layer `[C, H, W]` patch features keyed by backbone layer index.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FeaturePyramid {
    layers: BTreeMap<usize, Tensor>,
}

impl FeaturePyramid {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, layer: usize, map: Tensor) -> Result<()> {
        map.chw("FeaturePyramid::insert")?;
        if let Some((_, first)) = self.layers.iter().next() {
            map.expect_same_shape(first, "FeaturePyramid::insert")?;
        }
        self.layers.insert(layer, map);
        Ok(())
    }

    pub fn from_layers(layers: impl IntoIterator<Item = (usize, Tensor)>) -> Result<Self> {
        let mut p = FeaturePyramid::new();
        for (k, t) in layers {
            p.insert(k, t)?;
        }
        Ok(p)
    }

    pub fn get(&self, layer: usize) -> Result<&Tensor> {
        self.layers
            .get(&layer)
            .ok_or_else(|| Error::Config(format!("feature pyramid has no layer {layer}")))
    }

    /// Layer indices in increasing order.
    pub fn layer_ids(&self) -> Vec<usize> {
        self.layers.keys().copied().collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &Tensor)> {
        self.layers.iter().map(|(&k, v)| (k, v))
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// Shared `[C, H, W]` of every layer.
    pub fn dims(&self) -> Result<(usize, usize, usize)> {
        let (_, t) = self
            .layers
            .iter()
            .next()
            .ok_or_else(|| Error::Validation("feature pyramid is empty".into()))?;
        t.chw("FeaturePyramid::dims")
    }
}

/// Checks a layer selection: strictly increasing, within 1..=12, ending at 12.
pub fn validate_layer_set(layers: &[usize]) -> Result<()> {
    if layers.len() < 2 {
        return Err(Error::Validation(format!(
            "layer set needs at least two layers, got {layers:?}"
        )));
    }
    if layers.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Validation(format!(
            "layer set must be strictly increasing, got {layers:?}"
        )));
    }
    if layers[0] == 0 || *layers.last().unwrap() != TOP_LAYER {
        return Err(Error::Validation(format!(
            "layer set must lie in 1..=12 and end with layer 12, got {layers:?}"
        )));
    }
    Ok(())
}
