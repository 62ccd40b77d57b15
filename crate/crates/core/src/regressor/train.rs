//! Min-max scaling, Adam and the early-stopped training loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::network::{Network, Workspace};
use super::{rmse, RegressorError, Result};

/// Paired inputs and targets, one row per sample.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<Vec<f64>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn push(&mut self, input: Vec<f64>, target: Vec<f64>) {
        self.inputs.push(input);
        self.targets.push(target);
    }

    pub fn subset(&self, rows: &[usize]) -> Dataset {
        Dataset {
            inputs: rows.iter().map(|&i| self.inputs[i].clone()).collect(),
            targets: rows.iter().map(|&i| self.targets[i].clone()).collect(),
        }
    }

    fn check(&self) -> Result<(usize, usize)> {
        if self.is_empty() {
            return Err(RegressorError::EmptyDataset);
        }
        if self.targets.len() != self.inputs.len() {
            return Err(RegressorError::Ragged(self.inputs.len().min(self.targets.len())));
        }
        let (ni, nt) = (self.inputs[0].len(), self.targets[0].len());
        for (i, (x, t)) in self.inputs.iter().zip(&self.targets).enumerate() {
            if x.len() != ni || t.len() != nt || x.iter().chain(t).any(|v| !v.is_finite()) {
                return Err(RegressorError::Ragged(i));
            }
        }
        Ok((ni, nt))
    }
}

/// Per-feature affine maps of inputs and targets onto [-1, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub input_min: Vec<f64>,
    pub input_max: Vec<f64>,
    pub target_min: Vec<f64>,
    pub target_max: Vec<f64>,
}

fn column_range(rows: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let width = rows[0].len();
    let mut lo = vec![f64::INFINITY; width];
    let mut hi = vec![f64::NEG_INFINITY; width];
    for r in rows {
        for (j, &v) in r.iter().enumerate() {
            lo[j] = lo[j].min(v);
            hi[j] = hi[j].max(v);
        }
    }
    for (l, h) in lo.iter_mut().zip(hi.iter_mut()) {
        if *h <= *l {
            let w = f64::EPSILON * l.abs().max(1.0);
            *l -= w;
            *h += w;
        }
    }
    (lo, hi)
}

fn to_unit(v: &[f64], lo: &[f64], hi: &[f64]) -> Vec<f64> {
    v.iter().zip(lo).zip(hi).map(|((x, l), h)| 2.0 * (x - l) / (h - l) - 1.0).collect()
}

fn from_unit(v: &[f64], lo: &[f64], hi: &[f64]) -> Vec<f64> {
    v.iter().zip(lo).zip(hi).map(|((s, l), h)| l + 0.5 * (s + 1.0) * (h - l)).collect()
}

pub fn fit_scaler(data: &Dataset) -> Result<Scaler> {
    data.check()?;
    let (input_min, input_max) = column_range(&data.inputs);
    let (target_min, target_max) = column_range(&data.targets);
    Ok(Scaler { input_min, input_max, target_min, target_max })
}

impl Scaler {
    pub fn scale_input(&self, x: &[f64]) -> Vec<f64> {
        to_unit(x, &self.input_min, &self.input_max)
    }

    pub fn unscale_input(&self, s: &[f64]) -> Vec<f64> {
        from_unit(s, &self.input_min, &self.input_max)
    }

    pub fn scale_target(&self, t: &[f64]) -> Vec<f64> {
        to_unit(t, &self.target_min, &self.target_max)
    }

    pub fn unscale_target(&self, s: &[f64]) -> Vec<f64> {
        from_unit(s, &self.target_min, &self.target_max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainOptions {
    pub val_fraction: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            val_fraction: 0.10,
            batch_size: 32,
            max_epochs: 2000,
            patience: 50,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
        }
    }
}

impl TrainOptions {
    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(RegressorError::InvalidOptions(m.into()));
        if !(0.0..0.5).contains(&self.val_fraction) {
            return bad("val_fraction must lie in [0, 0.5)");
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return bad("batch_size and max_epochs must be positive");
        }
        if !(self.learning_rate > 0.0 && self.epsilon > 0.0) {
            return bad("learning_rate and epsilon must be positive");
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return bad("Adam betas must lie in [0, 1)");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean scaled-space MSE per epoch.
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub train_rmse_mah: f64,
    /// Falls back to the training RMSE when there is no validation split.
    pub val_rmse_mah: f64,
    pub epochs: usize,
    pub best_epoch: usize,
    pub seed: u64,
}

/// A trained network with the scaler it was trained under.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub network: Network,
    pub scaler: Scaler,
}

impl TrainedModel {
    /// De-scaled prediction for one raw input.
    pub fn predict(&self, input: &[f64]) -> Result<Vec<f64>> {
        if input.len() != self.network.input_len() {
            return Err(RegressorError::InputLength { expected: self.network.input_len(), got: input.len() });
        }
        let out = self.network.forward(&self.scaler.scale_input(input))?;
        Ok(self.scaler.unscale_target(&out))
    }

    pub fn predict_many(&self, inputs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        inputs.iter().map(|x| self.predict(x)).collect()
    }

    pub fn rmse_on(&self, data: &Dataset) -> Result<f64> {
        rmse(&self.predict_many(&data.inputs)?, &data.targets)
    }
}

pub(crate) struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    lr: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
}

impl Adam {
    pub(crate) fn new(n: usize, opts: &TrainOptions) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            lr: opts.learning_rate,
            beta1: opts.beta1,
            beta2: opts.beta2,
            epsilon: opts.epsilon,
        }
    }

    pub(crate) fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (((p, g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.epsilon);
        }
    }
}

/// Mean squared error over the rows and outputs of one batch; fills `grad`
/// with its gradient.
pub(crate) fn batch_loss_grad(
    net: &Network,
    xs: &[&[f64]],
    ts: &[&[f64]],
    ws: &mut Workspace,
    grad: &mut [f64],
) -> f64 {
    grad.fill(0.0);
    let scale = 1.0 / (xs.len() * net.output_len()) as f64;
    let mut loss = 0.0;
    let mut d = vec![0.0; net.output_len()];
    for (x, t) in xs.iter().zip(ts) {
        let y = net.forward_into(x, ws);
        for ((di, yi), ti) in d.iter_mut().zip(y).zip(t.iter()) {
            let e = yi - ti;
            loss += e * e * scale;
            *di = 2.0 * e * scale;
        }
        net.backward_into(&d, ws, grad);
    }
    loss
}

fn mse(net: &Network, xs: &[Vec<f64>], ts: &[Vec<f64>], ws: &mut Workspace) -> f64 {
    let mut sum = 0.0;
    for (x, t) in xs.iter().zip(ts) {
        let y = net.forward_into(x, ws);
        sum += y.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    sum / (xs.len() * net.output_len()).max(1) as f64
}

/// Trains `network` on a seeded train/validation split, keeping the
/// parameters of the best validation epoch.
pub fn train(mut network: Network, data: &Dataset, opts: &TrainOptions) -> Result<(TrainedModel, TrainReport)> {
    opts.validate()?;
    if data.len() < 10 {
        return Err(RegressorError::TooFewSamples { need: 10, got: data.len() });
    }
    let (ni, nt) = data.check()?;
    if ni != network.input_len() {
        return Err(RegressorError::InputLength { expected: network.input_len(), got: ni });
    }
    if nt != network.output_len() {
        return Err(RegressorError::ShapeMismatch);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng);
    let n_val = (opts.val_fraction * data.len() as f64).round() as usize;
    let (val_rows, train_rows) = order.split_at(n_val);
    let train_set = data.subset(train_rows);
    let val_set = data.subset(val_rows);
    let scaler = fit_scaler(&train_set)?;

    let sx: Vec<Vec<f64>> = train_set.inputs.iter().map(|x| scaler.scale_input(x)).collect();
    let st: Vec<Vec<f64>> = train_set.targets.iter().map(|t| scaler.scale_target(t)).collect();
    let vx: Vec<Vec<f64>> = val_set.inputs.iter().map(|x| scaler.scale_input(x)).collect();
    let vt: Vec<Vec<f64>> = val_set.targets.iter().map(|t| scaler.scale_target(t)).collect();

    let mut ws = network.workspace();
    let mut grad = vec![0.0; network.parameter_count()];
    let mut adam = Adam::new(network.parameter_count(), opts);
    let mut batch_order: Vec<usize> = (0..sx.len()).collect();
    let (mut train_loss, mut val_loss) = (Vec::new(), Vec::new());
    let mut best = (f64::INFINITY, network.params.clone(), 0usize);
    let mut stall = 0;

    for epoch in 1..=opts.max_epochs {
        batch_order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in batch_order.chunks(opts.batch_size) {
            let xs: Vec<&[f64]> = batch.iter().map(|&i| sx[i].as_slice()).collect();
            let ts: Vec<&[f64]> = batch.iter().map(|&i| st[i].as_slice()).collect();
            let loss = batch_loss_grad(&network, &xs, &ts, &mut ws, &mut grad);
            epoch_loss += loss * batch.len() as f64;
            adam.step(&mut network.params, &grad);
        }
        epoch_loss /= sx.len() as f64;
        let monitored = if vx.is_empty() { mse(&network, &sx, &st, &mut ws) } else { mse(&network, &vx, &vt, &mut ws) };
        if !epoch_loss.is_finite() || !monitored.is_finite() {
            return Err(RegressorError::Divergence { epoch });
        }
        train_loss.push(epoch_loss);
        val_loss.push(monitored);
        if monitored < best.0 {
            best = (monitored, network.params.clone(), epoch);
            stall = 0;
        } else {
            stall += 1;
            if stall >= opts.patience {
                break;
            }
        }
    }

    network.params = best.1;
    let model = TrainedModel { network, scaler };
    let train_rmse_mah = model.rmse_on(&train_set)?;
    let val_rmse_mah = if val_set.is_empty() { train_rmse_mah } else { model.rmse_on(&val_set)? };
    let report = TrainReport {
        epochs: train_loss.len(),
        train_loss,
        val_loss,
        train_rmse_mah,
        val_rmse_mah,
        best_epoch: best.2,
        seed: opts.seed,
    };
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::regressor::LayerSpec;
    use rand::Rng;

    fn mlp(inputs: usize, outputs: usize, hidden: usize, seed: u64) -> Network {
        let specs =
            [LayerSpec::Dense { neurons: hidden, relu: true }, LayerSpec::Dense { neurons: outputs, relu: false }];
        Network::from_specs(inputs, &specs, seed).unwrap()
    }

    fn random_data(n: usize, ni: usize, nt: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut d = Dataset::default();
        for _ in 0..n {
            d.push(
                (0..ni).map(|_| rng.random_range(-3.0..7.0)).collect(),
                (0..nt).map(|_| rng.random_range(100.0..200.0)).collect(),
            );
        }
        d
    }

    #[test]
    fn scaler_midpoint_span_and_round_trip() {
        let d = Dataset { inputs: vec![vec![0.0], vec![10.0], vec![5.0]], targets: vec![vec![1.0]; 3] };
        let s = fit_scaler(&d).unwrap();
        assert_eq!(s.scale_input(&[5.0]), vec![0.0]);
        assert_eq!(s.scale_input(&[0.0]), vec![-1.0]);
        assert_eq!(s.scale_input(&[10.0]), vec![1.0]);
        // Constant target widened symmetrically: maps to zero, inverts exactly.
        assert_eq!(s.scale_target(&[1.0]), vec![0.0]);
        assert!(s.scale_input(&[20.0])[0] > 1.0);

        let r = random_data(40, 6, 3, 7);
        let s = fit_scaler(&r).unwrap();
        for (x, t) in r.inputs.iter().zip(&r.targets) {
            let sx = s.scale_input(x);
            assert!(sx.iter().all(|v| (-1.0 - 1e-12..=1.0 + 1e-12).contains(v)));
            for (a, b) in s.unscale_input(&sx).iter().zip(x) {
                assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
            }
            for (a, b) in s.unscale_target(&s.scale_target(t)).iter().zip(t) {
                assert!((a - b).abs() <= 1e-12 * b.abs());
            }
        }
        assert!(matches!(fit_scaler(&Dataset::default()), Err(RegressorError::EmptyDataset)));
    }

    #[test]
    fn constant_targets_are_learned() {
        let mut d = random_data(40, 4, 3, 1);
        d.targets.iter_mut().for_each(|t| *t = vec![120.0, 80.5, 3.25]);
        let opts = TrainOptions { max_epochs: 300, learning_rate: 1e-2, ..TrainOptions::default() };
        let (model, report) = train(mlp(4, 3, 8, 0), &d, &opts).unwrap();
        assert!(report.train_rmse_mah < 1e-3, "{}", report.train_rmse_mah);
        assert!(model.rmse_on(&d).unwrap() < 1e-3);
    }

    #[test]
    fn ten_samples_can_be_memorized() {
        let d = random_data(10, 5, 15, 2);
        let opts = TrainOptions {
            val_fraction: 0.0,
            max_epochs: 2000,
            patience: 2000,
            learning_rate: 5e-3,
            ..TrainOptions::default()
        };
        let (_, report) = train(mlp(5, 15, 64, 3), &d, &opts).unwrap();
        assert!(report.train_rmse_mah < 0.1, "{}", report.train_rmse_mah);
    }

    #[test]
    fn training_is_deterministic() {
        let d = random_data(30, 4, 2, 5);
        let opts = TrainOptions { max_epochs: 20, seed: 9, ..TrainOptions::default() };
        let (m1, r1) = train(mlp(4, 2, 8, 1), &d, &opts).unwrap();
        let (m2, r2) = train(mlp(4, 2, 8, 1), &d, &opts).unwrap();
        assert_eq!(r1, r2);
        assert_eq!(m1, m2);
        let x = &d.inputs[0];
        assert_eq!(m1.predict(x).unwrap(), m1.predict(x).unwrap());
        assert!(matches!(m1.predict(&x[..3]), Err(RegressorError::InputLength { .. })));
    }

    #[test]
    fn small_lr_adam_does_not_increase_batch_loss() {
        let d = random_data(16, 6, 3, 4);
        let s = fit_scaler(&d).unwrap();
        let sx: Vec<Vec<f64>> = d.inputs.iter().map(|x| s.scale_input(x)).collect();
        let st: Vec<Vec<f64>> = d.targets.iter().map(|t| s.scale_target(t)).collect();
        let xs: Vec<&[f64]> = sx.iter().map(Vec::as_slice).collect();
        let ts: Vec<&[f64]> = st.iter().map(Vec::as_slice).collect();
        let mut net = mlp(6, 3, 10, 2);
        let opts = TrainOptions { learning_rate: 1e-4, ..TrainOptions::default() };
        let mut adam = Adam::new(net.parameter_count(), &opts);
        let mut ws = net.workspace();
        let mut grad = vec![0.0; net.parameter_count()];
        let mut last = f64::INFINITY;
        for _ in 0..100 {
            let loss = batch_loss_grad(&net, &xs, &ts, &mut ws, &mut grad);
            assert!(loss <= last + 1e-15, "{loss} > {last}");
            last = loss;
            adam.step(&mut net.params, &grad);
        }
    }

    #[test]
    fn divergence_is_reported() {
        let mut d = random_data(20, 3, 2, 6);
        d.targets[0][0] = 1e308;
        d.targets[1][0] = -1e308;
        let err = train(mlp(3, 2, 4, 0), &d, &TrainOptions { max_epochs: 5, ..TrainOptions::default() });
        assert!(matches!(err, Err(RegressorError::Divergence { .. })), "{err:?}");
    }

    #[test]
    fn input_guards() {
        let d = random_data(9, 3, 2, 0);
        assert!(matches!(
            train(mlp(3, 2, 4, 0), &d, &TrainOptions::default()),
            Err(RegressorError::TooFewSamples { .. })
        ));
        let d = random_data(12, 3, 2, 0);
        assert!(matches!(
            train(mlp(4, 2, 4, 0), &d, &TrainOptions::default()),
            Err(RegressorError::InputLength { .. })
        ));
    }
}
