//! Layer arithmetic, forward pass and backpropagation for a single-channel 1D
//! CNN (or plain dense stack). Parameters live in one flat vector; each layer
//! records its offsets into it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{CnnConfig, RegressorError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum LayerSpec {
    /// Valid, stride-1 convolution with bias and no activation.
    Conv {
        filters: usize,
        size: usize,
    },
    MaxPool {
        size: usize,
        stride: usize,
    },
    /// Flattens channels-major; a no-op on the flat activation layout.
    Flatten,
    Dense {
        neurons: usize,
        relu: bool,
    },
}

/// A layer with its resolved shape and parameter offsets. Activations are
/// stored channel-major: `channels * len` values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Layer {
    pub spec: LayerSpec,
    pub in_channels: usize,
    pub in_len: usize,
    pub out_channels: usize,
    pub out_len: usize,
    pub w_off: usize,
    pub b_off: usize,
}

impl Layer {
    fn in_size(&self) -> usize {
        self.in_channels * self.in_len
    }

    fn out_size(&self) -> usize {
        self.out_channels * self.out_len
    }

    fn weight_count(&self) -> usize {
        match self.spec {
            LayerSpec::Conv { filters, size } => filters * self.in_channels * size,
            LayerSpec::Dense { neurons, .. } => neurons * self.in_size(),
            _ => 0,
        }
    }

    fn bias_count(&self) -> usize {
        match self.spec {
            LayerSpec::Conv { filters, .. } => filters,
            LayerSpec::Dense { neurons, .. } => neurons,
            _ => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    config: Option<CnnConfig>,
    input_len: usize,
    specs: Vec<LayerSpec>,
    pub(crate) layers: Vec<Layer>,
    pub(crate) params: Vec<f64>,
}

/// Per-sample scratch for one forward/backward pass.
pub(crate) struct Workspace {
    acts: Vec<Vec<f64>>,
    argmax: Vec<Vec<usize>>,
    grads: Vec<Vec<f64>>,
}

impl Network {
    /// Resolves shapes without allocating parameters.
    pub(crate) fn plan(input_len: usize, specs: &[LayerSpec]) -> Result<Vec<Layer>> {
        if input_len == 0 {
            return Err(RegressorError::Shape { layer: 0, len: 0 });
        }
        let (mut ch, mut len, mut off) = (1usize, input_len, 0usize);
        let mut layers = Vec::with_capacity(specs.len());
        for (index, &spec) in specs.iter().enumerate() {
            let (out_ch, out_len) = match spec {
                LayerSpec::Conv { filters, size } => {
                    if filters == 0 || size == 0 || size > len {
                        return Err(RegressorError::Shape { layer: index, len: len as i64 - size as i64 + 1 });
                    }
                    (filters, len - size + 1)
                }
                LayerSpec::MaxPool { size, stride } => {
                    if size == 0 || stride == 0 || size > len {
                        return Err(RegressorError::Shape { layer: index, len: 0 });
                    }
                    (ch, (len - size) / stride + 1)
                }
                LayerSpec::Flatten => (1, ch * len),
                LayerSpec::Dense { neurons, .. } => {
                    if neurons == 0 {
                        return Err(RegressorError::Shape { layer: index, len: 0 });
                    }
                    (1, neurons)
                }
            };
            let mut layer =
                Layer { spec, in_channels: ch, in_len: len, out_channels: out_ch, out_len, w_off: off, b_off: 0 };
            layer.b_off = off + layer.weight_count();
            off = layer.b_off + layer.bias_count();
            layers.push(layer);
            ch = out_ch;
            len = out_len;
        }
        Ok(layers)
    }

    /// Builds and initializes a network; weights are uniform in
    /// ±sqrt(6/fan_in), biases start at zero.
    pub fn from_specs(input_len: usize, specs: &[LayerSpec], seed: u64) -> Result<Self> {
        let layers = Self::plan(input_len, specs)?;
        let total = layers.last().map_or(0, |l| l.b_off + l.bias_count());
        let mut params = vec![0.0; total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for l in &layers {
            let fan_in = match l.spec {
                LayerSpec::Conv { size, .. } => l.in_channels * size,
                LayerSpec::Dense { .. } => l.in_size(),
                _ => continue,
            };
            let bound = (6.0 / fan_in as f64).sqrt();
            for w in &mut params[l.w_off..l.b_off] {
                *w = rng.random_range(-bound..=bound);
            }
        }
        Ok(Self { config: None, input_len, specs: specs.to_vec(), layers, params })
    }

    /// Conv blocks (conv + max-pool), flatten, ReLU hidden layers and a
    /// linear 15-wide head.
    pub fn build(config: &CnnConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut net = Self::from_specs(config.input_len(), &config.layer_specs(), seed)?;
        net.config = Some(*config);
        Ok(net)
    }

    /// Rebuilds a network around existing parameters.
    pub(crate) fn with_params(
        config: Option<CnnConfig>,
        input_len: usize,
        specs: &[LayerSpec],
        params: Vec<f64>,
    ) -> Result<Self> {
        let layers = Self::plan(input_len, specs)?;
        let total = layers.last().map_or(0, |l| l.b_off + l.bias_count());
        if params.len() != total {
            return Err(RegressorError::Model(format!("expected {total} parameters, found {}", params.len())));
        }
        Ok(Self { config, input_len, specs: specs.to_vec(), layers, params })
    }

    pub fn config(&self) -> Option<&CnnConfig> {
        self.config.as_ref()
    }

    pub fn input_len(&self) -> usize {
        self.input_len
    }

    pub fn output_len(&self) -> usize {
        self.layers.last().map_or(self.input_len, Layer::out_size)
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    pub fn parameter_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Multiply-adds of one forward pass; a proxy for training cost.
    pub fn multiply_adds(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match l.spec {
                LayerSpec::Conv { .. } => l.weight_count() * l.out_len,
                LayerSpec::Dense { .. } => l.weight_count(),
                LayerSpec::MaxPool { size, .. } => l.out_size() * size,
                LayerSpec::Flatten => 0,
            })
            .sum()
    }

    /// Per-layer parameter tensors with their shapes, in file order.
    pub fn tensors(&self) -> Vec<(Vec<usize>, &[f64])> {
        let mut out = Vec::new();
        for l in &self.layers {
            match l.spec {
                LayerSpec::Conv { filters, size } => {
                    out.push((vec![filters, l.in_channels, size], &self.params[l.w_off..l.b_off]));
                    out.push((vec![filters], &self.params[l.b_off..l.b_off + filters]));
                }
                LayerSpec::Dense { neurons, .. } => {
                    out.push((vec![neurons, l.in_size()], &self.params[l.w_off..l.b_off]));
                    out.push((vec![neurons], &self.params[l.b_off..l.b_off + neurons]));
                }
                _ => {}
            }
        }
        out
    }

    pub(crate) fn workspace(&self) -> Workspace {
        Workspace {
            acts: std::iter::once(self.input_len)
                .chain(self.layers.iter().map(Layer::out_size))
                .map(|n| vec![0.0; n])
                .collect(),
            argmax: self.layers.iter().map(|l| vec![0; l.out_size()]).collect(),
            grads: std::iter::once(self.input_len)
                .chain(self.layers.iter().map(Layer::out_size))
                .map(|n| vec![0.0; n])
                .collect(),
        }
    }

    /// Runs the network; the output lives in the workspace's last activation.
    pub(crate) fn forward_into<'w>(&self, input: &[f64], ws: &'w mut Workspace) -> &'w [f64] {
        ws.acts[0].copy_from_slice(input);
        for (li, l) in self.layers.iter().enumerate() {
            let (head, tail) = ws.acts.split_at_mut(li + 1);
            let x = &head[li];
            let y = &mut tail[0];
            match l.spec {
                LayerSpec::Conv { filters, size } => {
                    let (w, b) = (&self.params[l.w_off..l.b_off], &self.params[l.b_off..]);
                    let n = l.out_len;
                    for o in 0..filters {
                        let yo = &mut y[o * n..(o + 1) * n];
                        yo.fill(b[o]);
                        for i in 0..l.in_channels {
                            let xi = &x[i * l.in_len..(i + 1) * l.in_len];
                            let wo = &w[(o * l.in_channels + i) * size..][..size];
                            for (u, &wu) in wo.iter().enumerate() {
                                for (yt, xt) in yo.iter_mut().zip(&xi[u..u + n]) {
                                    *yt += wu * xt;
                                }
                            }
                        }
                    }
                }
                LayerSpec::MaxPool { size, stride } => {
                    let arg = &mut ws.argmax[li];
                    for c in 0..l.in_channels {
                        let xc = &x[c * l.in_len..(c + 1) * l.in_len];
                        for t in 0..l.out_len {
                            let start = t * stride;
                            let mut best = start;
                            for s in start + 1..start + size {
                                if xc[s] > xc[best] {
                                    best = s;
                                }
                            }
                            y[c * l.out_len + t] = xc[best];
                            arg[c * l.out_len + t] = c * l.in_len + best;
                        }
                    }
                }
                LayerSpec::Flatten => y.copy_from_slice(x),
                LayerSpec::Dense { neurons, relu } => {
                    let m = l.in_size();
                    let (w, b) = (&self.params[l.w_off..l.b_off], &self.params[l.b_off..]);
                    for o in 0..neurons {
                        let row = &w[o * m..(o + 1) * m];
                        let z = b[o] + row.iter().zip(x.iter()).map(|(a, c)| a * c).sum::<f64>();
                        y[o] = if relu { z.max(0.0) } else { z };
                    }
                }
            }
        }
        ws.acts.last().expect("input activation always present")
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        if input.len() != self.input_len {
            return Err(RegressorError::InputLength { expected: self.input_len, got: input.len() });
        }
        let mut ws = self.workspace();
        Ok(self.forward_into(input, &mut ws).to_vec())
    }

    /// Output for `input` and the gradient of `<d_out, output>` with
    /// respect to every parameter, in [`Self::params`] order.
    pub fn gradient(&self, input: &[f64], d_out: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        if input.len() != self.input_len {
            return Err(RegressorError::InputLength { expected: self.input_len, got: input.len() });
        }
        if d_out.len() != self.output_len() {
            return Err(RegressorError::ShapeMismatch);
        }
        let mut ws = self.workspace();
        let out = self.forward_into(input, &mut ws).to_vec();
        let mut grad = vec![0.0; self.params.len()];
        self.backward_into(d_out, &mut ws, &mut grad);
        Ok((out, grad))
    }

    /// Accumulates parameter gradients into `grad` given dLoss/dOutput, using
    /// the activations left in `ws` by the preceding forward pass.
    pub(crate) fn backward_into(&self, d_out: &[f64], ws: &mut Workspace, grad: &mut [f64]) {
        ws.grads.last_mut().expect("output gradient slot").copy_from_slice(d_out);
        for (li, l) in self.layers.iter().enumerate().rev() {
            let (gh, gt) = ws.grads.split_at_mut(li + 1);
            let dx = &mut gh[li];
            let dy = &mut gt[0];
            let x = &ws.acts[li];
            let y = &ws.acts[li + 1];
            let need_dx = li > 0;
            match l.spec {
                LayerSpec::Conv { filters, size } => {
                    let n = l.out_len;
                    if need_dx {
                        dx.fill(0.0);
                    }
                    for o in 0..filters {
                        let dyo = &dy[o * n..(o + 1) * n];
                        grad[l.b_off + o] += dyo.iter().sum::<f64>();
                        for i in 0..l.in_channels {
                            let xi = &x[i * l.in_len..(i + 1) * l.in_len];
                            let base = (o * l.in_channels + i) * size;
                            for u in 0..size {
                                grad[l.w_off + base + u] +=
                                    dyo.iter().zip(&xi[u..u + n]).map(|(g, v)| g * v).sum::<f64>();
                            }
                            if need_dx {
                                let dxi = &mut dx[i * l.in_len..(i + 1) * l.in_len];
                                for u in 0..size {
                                    let wu = self.params[l.w_off + base + u];
                                    for (d, g) in dxi[u..u + n].iter_mut().zip(dyo) {
                                        *d += wu * g;
                                    }
                                }
                            }
                        }
                    }
                }
                LayerSpec::MaxPool { .. } => {
                    if need_dx {
                        dx.fill(0.0);
                        for (g, &src) in dy.iter().zip(&ws.argmax[li]) {
                            dx[src] += g;
                        }
                    }
                }
                LayerSpec::Flatten => {
                    if need_dx {
                        dx.copy_from_slice(dy);
                    }
                }
                LayerSpec::Dense { neurons, relu } => {
                    let m = l.in_size();
                    if relu {
                        for (g, &a) in dy.iter_mut().zip(y.iter()) {
                            if a <= 0.0 {
                                *g = 0.0;
                            }
                        }
                    }
                    if need_dx {
                        dx.fill(0.0);
                    }
                    for o in 0..neurons {
                        let g = dy[o];
                        if g == 0.0 {
                            continue;
                        }
                        grad[l.b_off + o] += g;
                        let gw = &mut grad[l.w_off + o * m..l.w_off + (o + 1) * m];
                        for (gwi, xi) in gw.iter_mut().zip(x.iter()) {
                            *gwi += g * xi;
                        }
                        if need_dx {
                            let row = &self.params[l.w_off + o * m..l.w_off + (o + 1) * m];
                            for (d, w) in dx.iter_mut().zip(row) {
                                *d += g * w;
                            }
                        }
                    }
                }
            }
        }
    }
}
