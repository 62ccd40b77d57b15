//! 1D CNN regressor from a partial IC segment to the 15 differential charge
//! amounts, trained with Adam on min-max scaled data.

mod model_file;
mod network;
mod train;

pub use model_file::{read_model, write_model, MODEL_MAGIC};
pub use network::{LayerSpec, Network};
pub use train::{fit_scaler, train, Dataset, Scaler, TrainOptions, TrainReport, TrainedModel};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::signal::{FEATURE_COUNT, IC_STEP_V, IC_WINDOW_V};

#[derive(Debug, Error)]
pub enum RegressorError {
    #[error("config field {field} = {value} outside [{lo}, {hi}]")]
    ConfigRange { field: &'static str, value: f64, lo: f64, hi: f64 },
    #[error("IC segment bounds must satisfy 3.5 <= v1 < v2 <= 4.0 (got {v1}, {v2})")]
    SegmentBounds { v1: f64, v2: f64 },
    #[error("layer {layer} would have length {len}")]
    Shape { layer: usize, len: i64 },
    #[error("input has length {got}, network expects {expected}")]
    InputLength { expected: usize, got: usize },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("dataset needs at least {need} samples, has {got}")]
    TooFewSamples { need: usize, got: usize },
    #[error("inconsistent sample widths at sample {0}")]
    Ragged(usize),
    #[error("matrices differ in shape")]
    ShapeMismatch,
    #[error("training diverged at epoch {epoch}")]
    Divergence { epoch: usize },
    #[error("invalid training options: {0}")]
    InvalidOptions(String),
    #[error("model file: {0}")]
    Model(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, RegressorError>;

/// Architecture, learning rate and IC window searched by NSGA-II.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CnnConfig {
    pub conv_blocks: usize,
    pub filter_count: usize,
    pub filter_size: usize,
    pub pool_size: usize,
    pub pool_stride: usize,
    pub dense_layers: usize,
    pub dense_neurons: usize,
    pub learning_rate: f64,
    pub v1: f64,
    pub v2: f64,
}

/// Inclusive integer ranges of the searchable fields; filter size extends to
/// 32 so the larger tuned configurations are reachable.
pub const CONV_BLOCKS: (usize, usize) = (1, 5);
pub const FILTER_COUNT: (usize, usize) = (1, 128);
pub const FILTER_SIZE: (usize, usize) = (2, 32);
pub const POOL_SIZE: (usize, usize) = (2, 8);
pub const POOL_STRIDE: (usize, usize) = (1, 5);
pub const DENSE_LAYERS: (usize, usize) = (1, 5);
pub const DENSE_NEURONS: (usize, usize) = (8, 64);
pub const LEARNING_RATE: (f64, f64) = (2e-4, 1e-2);

/// The shipped default: a compact two-block network over 3.60–3.89 V that
/// trains in minutes on one core.
impl Default for CnnConfig {
    fn default() -> Self {
        Self {
            conv_blocks: 2,
            filter_count: 8,
            filter_size: 12,
            pool_size: 3,
            pool_stride: 2,
            dense_layers: 1,
            dense_neurons: 48,
            learning_rate: 0.004,
            v1: 3.60,
            v2: 3.89,
        }
    }
}

impl CnnConfig {
    /// The best-known larger configuration: two blocks of 13 filters of
    /// size 26 with stride-1 pooling over 3.601–3.891 V.
    pub fn published_best() -> Self {
        Self {
            conv_blocks: 2,
            filter_count: 13,
            filter_size: 26,
            pool_size: 3,
            pool_stride: 1,
            dense_layers: 1,
            dense_neurons: 45,
            learning_rate: 0.004,
            v1: 3.601,
            v2: 3.891,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ints = [
            ("conv_blocks", self.conv_blocks, CONV_BLOCKS),
            ("filter_count", self.filter_count, FILTER_COUNT),
            ("filter_size", self.filter_size, FILTER_SIZE),
            ("pool_size", self.pool_size, POOL_SIZE),
            ("pool_stride", self.pool_stride, POOL_STRIDE),
            ("dense_layers", self.dense_layers, DENSE_LAYERS),
            ("dense_neurons", self.dense_neurons, DENSE_NEURONS),
        ];
        for (field, value, (lo, hi)) in ints {
            if value < lo || value > hi {
                return Err(RegressorError::ConfigRange { field, value: value as f64, lo: lo as f64, hi: hi as f64 });
            }
        }
        let (lo, hi) = LEARNING_RATE;
        if !(self.learning_rate >= lo && self.learning_rate <= hi) {
            return Err(RegressorError::ConfigRange { field: "learning_rate", value: self.learning_rate, lo, hi });
        }
        let (wlo, whi) = IC_WINDOW_V;
        if !(self.v1 >= wlo - 1e-9 && self.v1 < self.v2 && self.v2 <= whi + 1e-9) {
            return Err(RegressorError::SegmentBounds { v1: self.v1, v2: self.v2 });
        }
        Network::plan(self.input_len(), &self.layer_specs())?;
        Ok(())
    }

    /// Number of 1 mV IC samples from `v1` to `v2` inclusive.
    pub fn input_len(&self) -> usize {
        ((self.v2 - self.v1) / IC_STEP_V).round().max(0.0) as usize + 1
    }

    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        let mut specs = Vec::new();
        for _ in 0..self.conv_blocks {
            specs.push(LayerSpec::Conv { filters: self.filter_count, size: self.filter_size });
            specs.push(LayerSpec::MaxPool { size: self.pool_size, stride: self.pool_stride });
        }
        specs.push(LayerSpec::Flatten);
        for _ in 0..self.dense_layers {
            specs.push(LayerSpec::Dense { neurons: self.dense_neurons, relu: true });
        }
        specs.push(LayerSpec::Dense { neurons: FEATURE_COUNT, relu: false });
        specs
    }
}

/// Deterministic construction of the network described by `config`.
pub fn build_network(config: &CnnConfig, seed: u64) -> Result<Network> {
    Network::build(config, seed)
}

/// Root mean square of element-wise differences over two equal-shape matrices.
pub fn rmse(pred: &[Vec<f64>], reference: &[Vec<f64>]) -> Result<f64> {
    if pred.len() != reference.len() || pred.iter().zip(reference).any(|(a, b)| a.len() != b.len()) {
        return Err(RegressorError::ShapeMismatch);
    }
    let (mut sum, mut count) = (0.0, 0usize);
    for (a, b) in pred.iter().zip(reference) {
        for (x, y) in a.iter().zip(b) {
            sum += (x - y) * (x - y);
            count += 1;
        }
    }
    Ok(if count == 0 { 0.0 } else { (sum / count as f64).sqrt() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Closed-form parameter count from the layer-length arithmetic.
    fn closed_form_params(c: &CnnConfig) -> usize {
        let (mut ch, mut len, mut total) = (1usize, c.input_len(), 0usize);
        for _ in 0..c.conv_blocks {
            total += c.filter_count * (ch * c.filter_size + 1);
            ch = c.filter_count;
            len = len - c.filter_size + 1;
            len = (len - c.pool_size) / c.pool_stride + 1;
        }
        let mut width = ch * len;
        for _ in 0..c.dense_layers {
            total += c.dense_neurons * (width + 1);
            width = c.dense_neurons;
        }
        total + FEATURE_COUNT * (width + 1)
    }

    #[test]
    fn published_config_builds_with_fifteen_outputs() {
        let c = CnnConfig::published_best();
        assert_eq!(c.input_len(), 291);
        let net = build_network(&c, 0).unwrap();
        assert_eq!(net.output_len(), 15);
        assert_eq!(net.parameter_count(), closed_form_params(&c));
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut built = 0;
        for _ in 0..200 {
            let v1 = rng.random_range(3.5..3.9);
            let c = CnnConfig {
                conv_blocks: rng.random_range(1..=3),
                filter_count: rng.random_range(1..=6),
                filter_size: rng.random_range(2..=12),
                pool_size: rng.random_range(2..=8),
                pool_stride: rng.random_range(1..=5),
                dense_layers: rng.random_range(1..=3),
                dense_neurons: rng.random_range(8..=16),
                learning_rate: 1e-3,
                v1,
                v2: rng.random_range(v1 + 0.01..=4.0),
            };
            if let Ok(net) = build_network(&c, 1) {
                assert_eq!(net.parameter_count(), closed_form_params(&c));
                built += 1;
            }
        }
        assert!(built > 50);
    }

    #[test]
    fn oversized_pool_is_shape_infeasible() {
        let c = CnnConfig {
            v1: 3.5,
            v2: 3.51,
            filter_size: 5,
            pool_size: 8,
            conv_blocks: 1,
            ..CnnConfig::published_best()
        };
        // 11 samples → conv 7 → pool 8 does not fit.
        assert!(matches!(c.validate(), Err(RegressorError::Shape { layer: 1, .. })));
        let bad = CnnConfig { filter_size: 33, ..CnnConfig::published_best() };
        assert!(matches!(bad.validate(), Err(RegressorError::ConfigRange { field: "filter_size", .. })));
        let swapped = CnnConfig { v1: 3.9, v2: 3.6, ..CnnConfig::published_best() };
        assert!(matches!(swapped.validate(), Err(RegressorError::SegmentBounds { .. })));
    }

    #[test]
    fn rmse_cases() {
        let a = vec![vec![1.0, 2.0], vec![3.0, 4.0]];
        assert_eq!(rmse(&a, &a).unwrap(), 0.0);
        let shifted: Vec<Vec<f64>> = a.iter().map(|r| r.iter().map(|x| x - 0.25).collect()).collect();
        assert!((rmse(&a, &shifted).unwrap() - 0.25).abs() < 1e-15);
        assert!(matches!(rmse(&a, &a[..1]), Err(RegressorError::ShapeMismatch)));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p: Vec<Vec<f64>> = (0..7).map(|_| (0..5).map(|_| rng.random::<f64>()).collect()).collect();
        let r: Vec<Vec<f64>> = (0..7).map(|_| (0..5).map(|_| rng.random::<f64>()).collect()).collect();
        let flat: f64 = p.concat().iter().zip(r.concat()).map(|(x, y)| (x - y).powi(2)).sum();
        assert!((rmse(&p, &r).unwrap() - (flat / 35.0).sqrt()).abs() < 1e-15);
    }
}
