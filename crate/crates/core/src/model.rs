//! Encoder/decoder density regressor.
//!
//! Encoder: three 3×3 stride-2 conv+ReLU stages and a linear 1×1 projection
//! to `latent_channels`, giving a `C × H/8 × W/8` latent that is flattened
//! for the GP. Decoder: 3×3 conv (C→C) + ReLU, 1×1 conv (C→1), bilinear
//! upsampling to the input resolution and a final ReLU.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::density::DensityMap;
use crate::error::{Error, Result};
use crate::tensor::{Array, Graph, NodeId};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    pub encoder_channels: [usize; 3],
    pub latent_channels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            encoder_channels: [8, 16, 16],
            latent_channels: 16,
        }
    }
}

impl ModelConfig {
    pub const DOWNSAMPLE: usize = 8;

    pub fn latent_shape(&self) -> [usize; 3] {
        [
            self.latent_channels,
            self.height.div_ceil(Self::DOWNSAMPLE),
            self.width.div_ceil(Self::DOWNSAMPLE),
        ]
    }

    /// Flattened latent length M.
    pub fn latent_dim(&self) -> usize {
        self.latent_shape().iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0
            || self.width == 0
            || self.latent_channels == 0
            || self.encoder_channels.contains(&0)
        {
            return Err(Error::Config("model extents and channel counts must be positive".into()));
        }
        Ok(())
    }

    fn layer_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        let [c1, c2, c3] = self.encoder_channels;
        let c = self.latent_channels;
        vec![
            ("enc1.weight", vec![c1, 1, 3, 3]),
            ("enc1.bias", vec![c1]),
            ("enc2.weight", vec![c2, c1, 3, 3]),
            ("enc2.bias", vec![c2]),
            ("enc3.weight", vec![c3, c2, 3, 3]),
            ("enc3.bias", vec![c3]),
            ("proj.weight", vec![c, c3, 1, 1]),
            ("proj.bias", vec![c]),
            ("dec1.weight", vec![c, c, 3, 3]),
            ("dec1.bias", vec![c]),
            ("dec2.weight", vec![1, c, 1, 1]),
            ("dec2.bias", vec![1]),
        ]
    }
}

/// Flattened encoder output.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentVector(pub Vec<f64>);

impl LatentVector {
    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Array,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub tensors: Vec<Param>,
}

/// Parameter tensors registered as graph leaves, in `ModelParams::tensors` order.
#[derive(Clone, Debug)]
pub struct BoundParams {
    pub nodes: Vec<NodeId>,
}

/// Scale of the density head at init, so initial counts start near zero
/// instead of in the thousands.
const OUTPUT_GAIN: f64 = 0.01;

/// Fan-in scaled uniform init, U(−√(6/fan_in), √(6/fan_in)); zero biases.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tensors = config
        .layer_shapes()
        .into_iter()
        .map(|(name, shape)| {
            let n: usize = shape.iter().product();
            let data = if shape.len() == 4 {
                let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
                let gain = if name == "dec2.weight" { OUTPUT_GAIN } else { 1.0 };
                let bound = gain * (6.0 / fan_in).sqrt();
                (0..n).map(|_| rng.random_range(-bound..bound)).collect()
            } else {
                vec![0.0; n]
            };
            Param {
                name: name.to_string(),
                value: Array::new(shape, data).expect("layer shape"),
            }
        })
        .collect();
    Ok(ModelParams {
        config: config.clone(),
        tensors,
    })
}

impl ModelParams {
    pub fn bind(&self, graph: &mut Graph, trainable: bool) -> BoundParams {
        BoundParams {
            nodes: self
                .tensors
                .iter()
                .map(|p| graph.leaf(p.value.clone(), trainable))
                .collect(),
        }
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(|p| p.value.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|p| p.value.all_finite())
    }
}

pub struct Encoded {
    /// Detached copy, bitwise equal to the node's value at call time.
    pub latent: LatentVector,
    /// Flattened latent node (length M) for gradient flow.
    pub node: NodeId,
}

fn image_node(graph: &mut Graph, pixels: &[f64], height: usize, width: usize) -> Result<NodeId> {
    let arr = Array::new(vec![1, height, width], pixels.to_vec())?;
    Ok(graph.constant(arr))
}

/// Encoder on an image of any size; returns the C×h×w latent map node.
fn encode_map(
    graph: &mut Graph,
    params: &BoundParams,
    pixels: &[f64],
    height: usize,
    width: usize,
) -> Result<NodeId> {
    let p = &params.nodes;
    let mut x = image_node(graph, pixels, height, width)?;
    for stage in 0..3 {
        x = graph.conv2d(x, p[2 * stage], p[2 * stage + 1], 2, 1)?;
        x = graph.relu(x);
    }
    graph.conv2d(x, p[6], p[7], 1, 0)
}

/// Decoder from a C×h×w latent map to an `height × width` density node.
fn decode_map(
    graph: &mut Graph,
    params: &BoundParams,
    z_map: NodeId,
    height: usize,
    width: usize,
) -> Result<NodeId> {
    let p = &params.nodes;
    let h = graph.conv2d(z_map, p[8], p[9], 1, 1)?;
    let h = graph.relu(h);
    let y = graph.conv2d(h, p[10], p[11], 1, 0)?;
    let y = graph.bilinear_upsample(y, height, width)?;
    let y = graph.relu(y);
    graph.reshape(y, &[height, width])
}

pub fn encode(
    graph: &mut Graph,
    params: &BoundParams,
    config: &ModelConfig,
    pixels: &[f64],
) -> Result<Encoded> {
    if pixels.len() != config.height * config.width {
        return Err(Error::Shape(format!(
            "encoder configured for {}×{} input, got {} pixels",
            config.height,
            config.width,
            pixels.len()
        )));
    }
    let map = encode_map(graph, params, pixels, config.height, config.width)?;
    let node = graph.reshape(map, &[config.latent_dim()])?;
    let latent = LatentVector(graph.value(node).data().to_vec());
    Ok(Encoded { latent, node })
}

pub fn decode(
    graph: &mut Graph,
    params: &BoundParams,
    config: &ModelConfig,
    z_node: NodeId,
) -> Result<NodeId> {
    if graph.value(z_node).len() != config.latent_dim() {
        return Err(Error::Shape(format!(
            "decoder expects a latent of length {}, got {}",
            config.latent_dim(),
            graph.value(z_node).len()
        )));
    }
    let map = graph.reshape(z_node, &config.latent_shape())?;
    decode_map(graph, params, map, config.height, config.width)
}

/// Full forward pass on an image whose sides are multiples of 8 (used for
/// sub-image crops, which differ from the configured size).
pub fn forward_region(
    graph: &mut Graph,
    params: &BoundParams,
    pixels: &[f64],
    height: usize,
    width: usize,
) -> Result<NodeId> {
    if height % ModelConfig::DOWNSAMPLE != 0 || width % ModelConfig::DOWNSAMPLE != 0 {
        return Err(Error::Shape(format!(
            "region {height}×{width} must have sides divisible by {}",
            ModelConfig::DOWNSAMPLE
        )));
    }
    let map = encode_map(graph, params, pixels, height, width)?;
    decode_map(graph, params, map, height, width)
}

/// Inference-only density prediction.
pub fn predict(params: &ModelParams, pixels: &[f64]) -> Result<DensityMap> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g, false);
    let enc = encode(&mut g, &bound, &params.config, pixels)?;
    let y = decode(&mut g, &bound, &params.config, enc.node)?;
    DensityMap::from_values(
        params.config.height,
        params.config.width,
        g.value(y).data().to_vec(),
    )
}

/// Inference-only latent.
pub fn latent(params: &ModelParams, pixels: &[f64]) -> Result<LatentVector> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g, false);
    Ok(encode(&mut g, &bound, &params.config, pixels)?.latent)
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"GPCKPT\0\0";
const CHECKPOINT_VERSION: u32 = 1;

/// Binary checkpoint: magic, version, model config, shape table, then all
/// values as little-endian `f64`.
pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let c = &params.config;
    for v in [
        c.height,
        c.width,
        c.encoder_channels[0],
        c.encoder_channels[1],
        c.encoder_channels[2],
        c.latent_channels,
    ] {
        buf.extend_from_slice(&(v as u64).to_le_bytes());
    }
    buf.extend_from_slice(&(params.tensors.len() as u32).to_le_bytes());
    for p in &params.tensors {
        buf.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(p.name.as_bytes());
        buf.extend_from_slice(&(p.value.shape().len() as u32).to_le_bytes());
        for &d in p.value.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
    }
    for p in &params.tensors {
        for v in p.value.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    file: String,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Parse {
                file: self.file.clone(),
                line: 0,
                msg: format!("truncated checkpoint at byte {}", self.pos),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn bad(&self, msg: impl Into<String>) -> Error {
        Error::Parse {
            file: self.file.clone(),
            line: 0,
            msg: msg.into(),
        }
    }
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut r = Reader {
        buf: &bytes,
        pos: 0,
        file: path.display().to_string(),
    };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(r.bad("not a checkpoint file"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(r.bad(format!("unsupported checkpoint version {version}")));
    }
    let mut dims = [0usize; 6];
    for d in &mut dims {
        *d = r.u64()? as usize;
    }
    let config = ModelConfig {
        height: dims[0],
        width: dims[1],
        encoder_channels: [dims[2], dims[3], dims[4]],
        latent_channels: dims[5],
    };
    config.validate()?;
    let n = r.u32()? as usize;
    let expected = config.layer_shapes();
    if n != expected.len() {
        return Err(r.bad(format!("expected {} tensors, found {n}", expected.len())));
    }
    let mut table = Vec::with_capacity(n);
    for (name, shape) in &expected {
        let len = r.u32()? as usize;
        let got = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| r.bad("tensor name is not UTF-8"))?;
        let ndim = r.u32()? as usize;
        let mut s = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            s.push(r.u64()? as usize);
        }
        if got != *name || s != *shape {
            return Err(r.bad(format!("tensor {got} {s:?} does not match {name} {shape:?}")));
        }
        table.push((got, s));
    }
    let mut tensors = Vec::with_capacity(n);
    for (name, shape) in table {
        let count: usize = shape.iter().product();
        let mut data = Vec::with_capacity(count);
        for _ in 0..count {
            data.push(f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes")));
        }
        tensors.push(Param {
            name,
            value: Array::new(shape, data)?,
        });
    }
    if r.pos != bytes.len() {
        return Err(r.bad("trailing bytes after checkpoint values"));
    }
    Ok(ModelParams { config, tensors })
}
