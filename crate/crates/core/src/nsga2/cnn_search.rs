//! Joint search over CNN hyperparameters and the IC input window: minimize
//! the summed squared ΔQ error and the window width.

use serde::{Deserialize, Serialize};

use super::MooProblem;
use crate::regressor::{
    train, CnnConfig, Dataset, Network, RegressorError, TrainOptions, CONV_BLOCKS, DENSE_LAYERS, DENSE_NEURONS,
    FILTER_COUNT, FILTER_SIZE, LEARNING_RATE, POOL_SIZE, POOL_STRIDE,
};
use crate::signal::{IC_STEP_V, IC_WINDOW_V};

/// conv_blocks, filter_count, filter_size, pool_size, pool_stride,
/// dense_layers, dense_neurons, learning_rate, and the two window voltages.
pub const SEARCH_GENES: usize = 10;

/// The reduced, fixed training schedule used inside the objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchBudget {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Candidates whose forward pass exceeds this many multiply-adds are
    /// declared infeasible rather than trained.
    pub max_multiply_adds: usize,
}

impl Default for SearchBudget {
    fn default() -> Self {
        Self { epochs: 20, batch_size: 32, seed: 0, max_multiply_adds: 2_000_000 }
    }
}

pub struct CnnSearchProblem {
    /// Rows hold the IC over the whole 3.5–4.0 V window at 1 mV.
    data: Dataset,
    budget: SearchBudget,
    bounds: Vec<(f64, f64)>,
}

pub fn cnn_search_problem(data: Dataset, budget: SearchBudget) -> Result<CnnSearchProblem, RegressorError> {
    let full = ((IC_WINDOW_V.1 - IC_WINDOW_V.0) / IC_STEP_V).round() as usize + 1;
    if data.is_empty() {
        return Err(RegressorError::EmptyDataset);
    }
    if let Some(i) = data.inputs.iter().position(|x| x.len() != full) {
        return Err(RegressorError::Ragged(i));
    }
    let int = |(lo, hi): (usize, usize)| (lo as f64, hi as f64);
    let bounds = vec![
        int(CONV_BLOCKS),
        int(FILTER_COUNT),
        int(FILTER_SIZE),
        int(POOL_SIZE),
        int(POOL_STRIDE),
        int(DENSE_LAYERS),
        int(DENSE_NEURONS),
        LEARNING_RATE,
        IC_WINDOW_V,
        IC_WINDOW_V,
    ];
    Ok(CnnSearchProblem { data, budget, bounds })
}

impl CnnSearchProblem {
    /// The dataset restricted to the window of `config`.
    pub fn windowed(&self, config: &CnnConfig) -> Dataset {
        let start = ((config.v1 - IC_WINDOW_V.0) / IC_STEP_V).round() as usize;
        let len = config.input_len();
        Dataset {
            inputs: self.data.inputs.iter().map(|x| x[start..start + len].to_vec()).collect(),
            targets: self.data.targets.clone(),
        }
    }
}

fn round_mv(v: f64) -> f64 {
    (v / IC_STEP_V).round() * IC_STEP_V
}

impl MooProblem for CnnSearchProblem {
    type Candidate = Result<CnnConfig, RegressorError>;

    fn bounds(&self) -> &[(f64, f64)] {
        &self.bounds
    }

    fn objective_count(&self) -> usize {
        2
    }

    fn decode(&self, g: &[f64]) -> Self::Candidate {
        let int = |x: f64| x.round().max(0.0) as usize;
        let (a, b) = (round_mv(g[8]), round_mv(g[9]));
        let config = CnnConfig {
            conv_blocks: int(g[0]),
            filter_count: int(g[1]),
            filter_size: int(g[2]),
            pool_size: int(g[3]),
            pool_stride: int(g[4]),
            dense_layers: int(g[5]),
            dense_neurons: int(g[6]),
            learning_rate: g[7],
            v1: a.min(b),
            v2: a.max(b),
        };
        config.validate()?;
        Ok(config)
    }

    fn evaluate(&self, candidate: &Self::Candidate, _seed: u64) -> Option<Vec<f64>> {
        let config = candidate.as_ref().ok()?;
        let net = Network::build(config, self.budget.seed).ok()?;
        if net.multiply_adds() > self.budget.max_multiply_adds {
            return None;
        }
        let data = self.windowed(config);
        let opts = TrainOptions {
            val_fraction: 0.0,
            batch_size: self.budget.batch_size,
            max_epochs: self.budget.epochs,
            patience: self.budget.epochs,
            learning_rate: config.learning_rate,
            seed: self.budget.seed,
            ..TrainOptions::default()
        };
        let (model, _) = train(net, &data, &opts).ok()?;
        let pred = model.predict_many(&data.inputs).ok()?;
        let sse: f64 =
            pred.iter().zip(&data.targets).flat_map(|(p, t)| p.iter().zip(t).map(|(a, b)| (a - b) * (a - b))).sum();
        Some(vec![sse, config.v2 - config.v1])
    }

    fn describe(&self, candidate: &Self::Candidate) -> Vec<(String, String)> {
        let names = [
            "conv_blocks",
            "filter_count",
            "filter_size",
            "pool_size",
            "pool_stride",
            "dense_layers",
            "dense_neurons",
            "learning_rate",
            "v1",
            "v2",
        ];
        let values: Vec<String> = match candidate {
            Ok(c) => vec![
                c.conv_blocks.to_string(),
                c.filter_count.to_string(),
                c.filter_size.to_string(),
                c.pool_size.to_string(),
                c.pool_stride.to_string(),
                c.dense_layers.to_string(),
                c.dense_neurons.to_string(),
                format!("{:.6}", c.learning_rate),
                format!("{:.3}", c.v1),
                format!("{:.3}", c.v2),
            ],
            Err(_) => vec![String::new(); names.len()],
        };
        names.iter().map(|n| n.to_string()).zip(values).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Bumps whose positions carry the targets, so a window over the bumps
    /// is informative.
    fn toy_data(n: usize) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut d = Dataset::default();
        for _ in 0..n {
            let c: f64 = rng.random_range(3.65..3.85);
            let x = (0..501)
                .map(|k| {
                    let v = 3.5 + k as f64 * 0.001;
                    1000.0 * (-((v - c) / 0.03).powi(2)).exp()
                })
                .collect();
            d.push(x, (0..15).map(|j| 40.0 + 100.0 * (c - 3.65) * j as f64).collect());
        }
        d
    }

    fn midpoints(p: &CnnSearchProblem) -> Vec<f64> {
        p.bounds().iter().map(|(lo, hi)| 0.5 * (lo + hi)).collect()
    }

    #[test]
    fn midpoint_genes_decode() {
        let p = cnn_search_problem(toy_data(12), SearchBudget::default()).unwrap();
        let mut g = midpoints(&p);
        g[8] = 3.6;
        g[9] = 3.9;
        let c = p.decode(&g).unwrap();
        assert_eq!((c.conv_blocks, c.filter_count, c.filter_size, c.pool_size), (3, 65, 17, 5));
        assert_eq!((c.pool_stride, c.dense_layers, c.dense_neurons), (3, 3, 36));
        assert!((c.v1 - 3.6).abs() < 1e-12 && (c.v2 - 3.9).abs() < 1e-12);
    }

    #[test]
    fn voltage_pair_is_sorted_and_rounded() {
        let p = cnn_search_problem(toy_data(12), SearchBudget::default()).unwrap();
        let mut g = midpoints(&p);
        g[8] = 3.87342;
        g[9] = 3.60061;
        let c = p.decode(&g).unwrap();
        assert!((c.v1 - 3.601).abs() < 1e-12 && (c.v2 - 3.873).abs() < 1e-12);
        assert_eq!(c.input_len(), 273);
    }

    #[test]
    fn infeasible_shapes_score_none() {
        let p = cnn_search_problem(toy_data(12), SearchBudget::default()).unwrap();
        let mut g = midpoints(&p);
        g[0] = 5.0;
        g[2] = 32.0;
        g[8] = 3.60;
        g[9] = 3.65;
        assert!(p.decode(&g).is_err());
        assert!(p.evaluate(&p.decode(&g), 0).is_none());
    }

    #[test]
    fn small_config_trains_and_reports_width() {
        let p = cnn_search_problem(toy_data(24), SearchBudget { epochs: 5, ..SearchBudget::default() }).unwrap();
        let g = vec![1.0, 4.0, 5.0, 3.0, 2.0, 1.0, 8.0, 5e-3, 3.62, 3.88];
        let f = p.evaluate(&p.decode(&g), 0).unwrap();
        assert!(f[0].is_finite() && f[0] >= 0.0);
        assert!((f[1] - 0.26).abs() < 1e-12);
        assert_eq!(p.evaluate(&p.decode(&g), 0), Some(f));
    }

    #[test]
    fn bad_dataset_rejected() {
        let mut d = toy_data(3);
        d.inputs[1].pop();
        assert!(matches!(cnn_search_problem(d, SearchBudget::default()), Err(RegressorError::Ragged(1))));
    }
}
