//! Binary model container. All integers are little-endian `u32`, all reals
//! little-endian IEEE-754 `f64`:
//!
//! ```text
//! magic      8 bytes  "EAPCNN01"
//! header     u32 byte length, then UTF-8 JSON
//!            {"config": CnnConfig | null, "input_len": n, "layers": [LayerSpec, ...]}
//! scaler     four vectors (input_min, input_max, target_min, target_max),
//!            each a u32 length followed by that many f64
//! tensors    u32 count, then per tensor: u32 rank, rank u32 dims,
//!            product(dims) f64 in row-major order
//! ```
//!
//! Tensors appear per parameterized layer in order: weights then bias.
//! Convolution weights have shape [filters, in_channels, size], dense weights
//! [neurons, inputs].

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::network::{LayerSpec, Network};
use super::train::{Scaler, TrainedModel};
use super::{CnnConfig, RegressorError, Result};

pub const MODEL_MAGIC: &[u8; 8] = b"EAPCNN01";

#[derive(Serialize, Deserialize)]
struct Header {
    config: Option<CnnConfig>,
    input_len: usize,
    layers: Vec<LayerSpec>,
}

fn put_u32<W: Write>(w: &mut W, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| RegressorError::Model(format!("{v} does not fit in u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn put_f64s<W: Write>(w: &mut W, values: &[f64]) -> Result<()> {
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn get_u32<R: Read>(r: &mut R) -> Result<usize> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b) as usize)
}

fn get_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(n.min(1 << 24));
    let mut b = [0u8; 8];
    for _ in 0..n {
        r.read_exact(&mut b)?;
        out.push(f64::from_le_bytes(b));
    }
    Ok(out)
}

pub fn write_model<W: Write>(model: &TrainedModel, mut w: W) -> Result<()> {
    let net = &model.network;
    w.write_all(MODEL_MAGIC)?;
    let header = Header { config: net.config().copied(), input_len: net.input_len(), layers: net.specs().to_vec() };
    let json = serde_json::to_vec(&header).map_err(|e| RegressorError::Model(e.to_string()))?;
    put_u32(&mut w, json.len())?;
    w.write_all(&json)?;
    let s = &model.scaler;
    for v in [&s.input_min, &s.input_max, &s.target_min, &s.target_max] {
        put_u32(&mut w, v.len())?;
        put_f64s(&mut w, v)?;
    }
    let tensors = net.tensors();
    put_u32(&mut w, tensors.len())?;
    for (shape, data) in tensors {
        put_u32(&mut w, shape.len())?;
        for d in shape {
            put_u32(&mut w, d)?;
        }
        put_f64s(&mut w, data)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_model<R: Read>(mut r: R) -> Result<TrainedModel> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MODEL_MAGIC {
        return Err(RegressorError::Model("bad magic; not a model file".into()));
    }
    let len = get_u32(&mut r)?;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json)?;
    let header: Header = serde_json::from_slice(&json).map_err(|e| RegressorError::Model(e.to_string()))?;
    let mut vecs = Vec::with_capacity(4);
    for _ in 0..4 {
        let n = get_u32(&mut r)?;
        vecs.push(get_f64s(&mut r, n)?);
    }
    let target_max = vecs.pop().expect("four vectors");
    let target_min = vecs.pop().expect("four vectors");
    let input_max = vecs.pop().expect("four vectors");
    let input_min = vecs.pop().expect("four vectors");
    let count = get_u32(&mut r)?;
    let mut params = Vec::new();
    let mut shapes = Vec::with_capacity(count);
    for _ in 0..count {
        let rank = get_u32(&mut r)?;
        let dims = (0..rank).map(|_| get_u32(&mut r)).collect::<Result<Vec<_>>>()?;
        params.extend(get_f64s(&mut r, dims.iter().product())?);
        shapes.push(dims);
    }
    let network = Network::with_params(header.config, header.input_len, &header.layers, params)?;
    let expected: Vec<Vec<usize>> = network.tensors().into_iter().map(|(s, _)| s).collect();
    if expected != shapes {
        return Err(RegressorError::Model("tensor shapes disagree with the layer list".into()));
    }
    let scaler = Scaler { input_min, input_max, target_min, target_max };
    if scaler.input_min.len() != network.input_len()
        || scaler.input_max.len() != network.input_len()
        || scaler.target_min.len() != network.output_len()
        || scaler.target_max.len() != network.output_len()
    {
        return Err(RegressorError::Model("scaler widths disagree with the network".into()));
    }
    Ok(TrainedModel { network, scaler })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::regressor::build_network;

    fn model() -> TrainedModel {
        let config = CnnConfig {
            conv_blocks: 2,
            filter_count: 3,
            filter_size: 5,
            pool_size: 2,
            pool_stride: 2,
            dense_layers: 1,
            dense_neurons: 8,
            learning_rate: 1e-3,
            v1: 3.6,
            v2: 3.7,
        };
        let network = build_network(&config, 4).unwrap();
        let n = network.input_len();
        let scaler = Scaler {
            input_min: (0..n).map(|i| i as f64).collect(),
            input_max: (0..n).map(|i| 2.0 * i as f64 + 1.0).collect(),
            target_min: vec![-1.5; 15],
            target_max: vec![9.25; 15],
        };
        TrainedModel { network, scaler }
    }

    #[test]
    fn round_trip_is_exact() {
        let m = model();
        let mut buf = Vec::new();
        write_model(&m, &mut buf).unwrap();
        assert_eq!(&buf[..8], MODEL_MAGIC);
        let back = read_model(buf.as_slice()).unwrap();
        assert_eq!(back, m);
        let x: Vec<f64> = (0..m.network.input_len()).map(|i| (i as f64 * 0.37).sin() * 50.0).collect();
        assert_eq!(back.predict(&x).unwrap(), m.predict(&x).unwrap());
    }

    #[test]
    fn corrupt_files_rejected() {
        let mut buf = Vec::new();
        write_model(&model(), &mut buf).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_model(bad.as_slice()), Err(RegressorError::Model(_))));
        let truncated = &buf[..buf.len() - 3];
        assert!(matches!(read_model(truncated), Err(RegressorError::Io(_))));
    }
}
