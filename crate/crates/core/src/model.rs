//! A small stride-1 fully-convolutional network with a manual backward pass.
//!
//! Every layer is a 3x3 "same" convolution; hidden layers are followed by a
//! rectifier and the last layer emits one logit channel, so the output heatmap
//! has the input's spatial size. Convolutions run as im2col followed by a dense
//! product ([`Scalar::gemm`]).

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heatmap::{Heatmap, HeatmapRole};
use crate::scalar::Scalar;

const KERNEL: usize = 3;
const TAPS: usize = KERNEL * KERNEL;

/// Channel plan of the network: `channels[0]` inputs, one conv per adjacent pair.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub channels: Vec<usize>,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            channels: vec![3, 16, 32, 32, 16, 1],
        }
    }
}

impl ModelSpec {
    pub fn new(channels: Vec<usize>) -> Result<Self> {
        let spec = Self { channels };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.len() < 2 {
            return Err(Error::Config("a model needs at least one layer".into()));
        }
        if self.channels.contains(&0) {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if *self.channels.last().unwrap() != 1 {
            return Err(Error::Config("the output layer must have one channel".into()));
        }
        Ok(())
    }

    pub fn in_channels(&self) -> usize {
        self.channels[0]
    }

    pub fn num_layers(&self) -> usize {
        self.channels.len() - 1
    }

    /// Pixels on each side whose output depends on zero padding.
    pub fn receptive_radius(&self) -> usize {
        self.num_layers() * (KERNEL / 2)
    }

    fn layer_dims(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.channels.windows(2).map(|w| (w[0], w[1]))
    }

    pub fn parameter_count(&self) -> usize {
        self.layer_dims().map(|(i, o)| o * i * TAPS + o).sum()
    }

    /// Offsets of each layer's weights and biases in the flat parameter vector.
    fn layout(&self) -> Vec<LayerLayout> {
        let mut offset = 0;
        self.layer_dims()
            .map(|(in_c, out_c)| {
                let weight = offset;
                let bias = weight + out_c * in_c * TAPS;
                offset = bias + out_c;
                LayerLayout {
                    in_c,
                    out_c,
                    weight,
                    bias,
                }
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug)]
struct LayerLayout {
    in_c: usize,
    out_c: usize,
    weight: usize,
    bias: usize,
}

impl LayerLayout {
    fn weight_len(&self) -> usize {
        self.out_c * self.in_c * TAPS
    }
}

/// Multi-channel image in channel-major, then row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct Planes<T> {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Planes<T> {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![T::zero(); channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::Dimension(format!(
                "{} values for a {channels}x{height}x{width} image",
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn get(&self, channel: usize, row: usize, col: usize) -> T {
        self.data[(channel * self.height + row) * self.width + col]
    }

    pub fn set(&mut self, channel: usize, row: usize, col: usize, value: T) {
        self.data[(channel * self.height + row) * self.width + col] = value;
    }

    pub fn cast<U: Scalar>(&self) -> Planes<U> {
        Planes {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| U::from_f64_lossy(v.to_f64_lossy())).collect(),
        }
    }
}

/// Parameters of a network, stored flat in declared order
/// (`conv0.weight`, `conv0.bias`, `conv1.weight`, ...).
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState<T> {
    spec: ModelSpec,
    seed: u64,
    params: Vec<T>,
}

/// Gradient of a scalar loss with respect to every parameter, same layout as
/// [`ModelState`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T> {
    pub values: Vec<T>,
}

impl<T: Scalar> Gradients<T> {
    pub fn zeros(len: usize) -> Self {
        Self {
            values: vec![T::zero(); len],
        }
    }

    pub fn add_assign(&mut self, other: &Gradients<T>) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += *b;
        }
    }

    pub fn scale(&mut self, factor: T) {
        self.values.iter_mut().for_each(|v| *v *= factor);
    }
}

/// Layer inputs retained by [`ModelState::forward`] for the backward pass.
#[derive(Clone, Debug)]
pub struct Activations<T> {
    /// `inputs[i]` is the input of layer `i`; `inputs[0]` is the image.
    inputs: Vec<Planes<T>>,
}

impl<T: Scalar> ModelState<T> {
    /// Fan-in scaled uniform weights (`U(-b, b)`, `b = sqrt(6 / fan_in)`), zero biases.
    pub fn init(spec: &ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![T::zero(); spec.parameter_count()];
        for layer in spec.layout() {
            let bound = (6.0 / (layer.in_c * TAPS) as f64).sqrt();
            for w in &mut params[layer.weight..layer.weight + layer.weight_len()] {
                *w = T::from_f64_lossy(rng.random_range(-bound..bound));
            }
        }
        Ok(Self {
            spec: spec.clone(),
            seed,
            params,
        })
    }

    pub fn from_parts(spec: ModelSpec, seed: u64, params: Vec<T>) -> Result<Self> {
        spec.validate()?;
        if params.len() != spec.parameter_count() {
            return Err(Error::Dimension(format!(
                "{} parameters for a model with {}",
                params.len(),
                spec.parameter_count()
            )));
        }
        Ok(Self { spec, seed, params })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.len()
    }

    /// `(name, values)` for every tensor in declared order.
    pub fn named_parameters(&self) -> Vec<(String, &[T])> {
        let mut out = Vec::new();
        for (i, layer) in self.spec.layout().into_iter().enumerate() {
            out.push((
                format!("conv{i}.weight"),
                &self.params[layer.weight..layer.weight + layer.weight_len()],
            ));
            out.push((format!("conv{i}.bias"), &self.params[layer.bias..layer.bias + layer.out_c]));
        }
        out
    }

    pub fn forward(&self, image: &Planes<T>) -> Result<(Heatmap<T>, Activations<T>)> {
        if image.channels != self.spec.in_channels() {
            return Err(Error::Dimension(format!(
                "model expects {} input channels, got {}",
                self.spec.in_channels(),
                image.channels
            )));
        }
        if image.height == 0 || image.width == 0 {
            return Err(Error::Dimension("empty input image".into()));
        }
        if image.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("input image contains non-finite values".into()));
        }

        let layout = self.spec.layout();
        let last = layout.len() - 1;
        let mut inputs = Vec::with_capacity(layout.len());
        let mut current = image.clone();
        let mut cols = Vec::new();
        for (i, layer) in layout.iter().enumerate() {
            let mut out = self.conv_forward(layer, &current, &mut cols);
            if i != last {
                out.data.iter_mut().for_each(|v| *v = v.max(T::zero()));
            }
            inputs.push(current);
            current = out;
        }
        let heat = Heatmap::from_vec(current.height, current.width, current.data, HeatmapRole::Logit)?;
        Ok((heat, Activations { inputs }))
    }

    /// Parameter gradients of a loss whose gradient w.r.t. the output logits is `grad_output`.
    pub fn backward(&self, acts: &Activations<T>, grad_output: &Heatmap<T>) -> Result<Gradients<T>> {
        let layout = self.spec.layout();
        if acts.inputs.len() != layout.len() {
            return Err(Error::Dimension("activations come from a different model".into()));
        }
        let (height, width) = (acts.inputs[0].height, acts.inputs[0].width);
        if grad_output.shape() != (height, width) {
            return Err(Error::Dimension(format!(
                "output gradient is {}x{}, forward output was {height}x{width}",
                grad_output.height(),
                grad_output.width()
            )));
        }

        let mut grads = Gradients::zeros(self.params.len());
        let mut delta = Planes::from_vec(1, height, width, grad_output.values().to_vec())?;
        let mut cols = Vec::new();
        for i in (0..layout.len()).rev() {
            let layer = &layout[i];
            let input = &acts.inputs[i];
            let need_input_grad = i > 0;
            let d_input = self.conv_backward(layer, input, &delta, &mut grads, &mut cols, need_input_grad);
            if let Some(mut d) = d_input {
                // inputs[i] is the rectified output of layer i - 1
                for (g, &a) in d.data.iter_mut().zip(&input.data) {
                    if a <= T::zero() {
                        *g = T::zero();
                    }
                }
                delta = d;
            }
        }
        Ok(grads)
    }

    fn conv_forward(&self, layer: &LayerLayout, input: &Planes<T>, cols: &mut Vec<T>) -> Planes<T> {
        let hw = input.plane_len();
        im2col(input, cols);
        let mut out = Planes::zeros(layer.out_c, input.height, input.width);
        for (o, plane) in out.data.chunks_mut(hw).enumerate() {
            plane.fill(self.params[layer.bias + o]);
        }
        let k = layer.in_c * TAPS;
        let weights = &self.params[layer.weight..layer.weight + layer.weight_len()];
        T::gemm(
            layer.out_c,
            k,
            hw,
            T::one(),
            (weights, k as isize, 1),
            (cols, hw as isize, 1),
            T::one(),
            (&mut out.data, hw as isize, 1),
        );
        out
    }

    fn conv_backward(
        &self,
        layer: &LayerLayout,
        input: &Planes<T>,
        delta: &Planes<T>,
        grads: &mut Gradients<T>,
        cols: &mut Vec<T>,
        need_input_grad: bool,
    ) -> Option<Planes<T>> {
        let hw = input.plane_len();
        let k = layer.in_c * TAPS;
        im2col(input, cols);

        let (head, tail) = grads.values.split_at_mut(layer.bias);
        let d_weight = &mut head[layer.weight..];
        // dW = delta (out_c x hw) * cols^T (hw x k)
        T::gemm(
            layer.out_c,
            hw,
            k,
            T::one(),
            (&delta.data, hw as isize, 1),
            (cols, 1, hw as isize),
            T::one(),
            (d_weight, k as isize, 1),
        );
        for (o, plane) in delta.data.chunks(hw).enumerate() {
            tail[o] += plane.iter().copied().sum::<T>();
        }

        if !need_input_grad {
            return None;
        }
        // dcols = W^T (k x out_c) * delta (out_c x hw)
        let weights = &self.params[layer.weight..layer.weight + layer.weight_len()];
        // beta = 0: gemm overwrites cols without reading it
        T::gemm(
            k,
            layer.out_c,
            hw,
            T::one(),
            (weights, 1, k as isize),
            (&delta.data, hw as isize, 1),
            T::zero(),
            (cols, hw as isize, 1),
        );
        Some(col2im(cols, layer.in_c, input.height, input.width))
    }

    pub fn cast<U: Scalar>(&self) -> ModelState<U> {
        ModelState {
            spec: self.spec.clone(),
            seed: self.seed,
            params: self.params.iter().map(|p| U::from_f64_lossy(p.to_f64_lossy())).collect(),
        }
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let bytes = checkpoint::encode(self);
        let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        checkpoint::decode(&bytes)
            .map_err(|msg| Error::Checkpoint(format!("{}: {msg}", path.display())))
    }
}

/// Unfolds 3x3 zero-padded neighborhoods: row `c*9 + kr*3 + kc`, column `r*w + x`.
fn im2col<T: Scalar>(input: &Planes<T>, cols: &mut Vec<T>) {
    let (h, w) = (input.height, input.width);
    let hw = h * w;
    cols.clear();
    cols.resize(input.channels * TAPS * hw, T::zero());
    for c in 0..input.channels {
        let plane = &input.data[c * hw..(c + 1) * hw];
        for kr in 0..KERNEL {
            for kc in 0..KERNEL {
                let row = &mut cols[(c * TAPS + kr * KERNEL + kc) * hw..][..hw];
                for r in 0..h {
                    let sr = r as isize + kr as isize - 1;
                    if sr < 0 || sr >= h as isize {
                        continue;
                    }
                    let src = &plane[sr as usize * w..(sr as usize + 1) * w];
                    let dst = &mut row[r * w..(r + 1) * w];
                    match kc {
                        0 => dst[1..].copy_from_slice(&src[..w - 1]),
                        1 => dst.copy_from_slice(src),
                        _ => dst[..w - 1].copy_from_slice(&src[1..]),
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`].
fn col2im<T: Scalar>(cols: &[T], channels: usize, h: usize, w: usize) -> Planes<T> {
    let hw = h * w;
    let mut out = Planes::zeros(channels, h, w);
    for c in 0..channels {
        let plane = &mut out.data[c * hw..(c + 1) * hw];
        for kr in 0..KERNEL {
            for kc in 0..KERNEL {
                let row = &cols[(c * TAPS + kr * KERNEL + kc) * hw..][..hw];
                for r in 0..h {
                    let sr = r as isize + kr as isize - 1;
                    if sr < 0 || sr >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[sr as usize * w..(sr as usize + 1) * w];
                    let src = &row[r * w..(r + 1) * w];
                    match kc {
                        0 => dst[..w - 1].iter_mut().zip(&src[1..]).for_each(|(d, s)| *d += *s),
                        1 => dst.iter_mut().zip(src).for_each(|(d, s)| *d += *s),
                        _ => dst[1..].iter_mut().zip(&src[..w - 1]).for_each(|(d, s)| *d += *s),
                    }
                }
            }
        }
    }
    out
}

/// Binary checkpoint layout, all integers little-endian:
///
/// ```text
/// magic    8 bytes  "SPKPCKPT"
/// version  u32
/// layers+1 u32, then one u32 per channel count
/// seed     u64
/// count    u64
/// params   count x f64
/// ```
pub mod checkpoint {
    use super::{ModelSpec, ModelState};
    use crate::scalar::Scalar;

    pub const MAGIC: &[u8; 8] = b"SPKPCKPT";
    pub const VERSION: u32 = 1;

    pub fn encode<T: Scalar>(state: &ModelState<T>) -> Vec<u8> {
        let mut out = Vec::with_capacity(32 + state.params.len() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(state.spec.channels.len() as u32).to_le_bytes());
        for &c in &state.spec.channels {
            out.extend_from_slice(&(c as u32).to_le_bytes());
        }
        out.extend_from_slice(&state.seed.to_le_bytes());
        out.extend_from_slice(&(state.params.len() as u64).to_le_bytes());
        for p in &state.params {
            out.extend_from_slice(&p.to_f64_lossy().to_le_bytes());
        }
        out
    }

    struct Reader<'a> {
        bytes: &'a [u8],
        pos: usize,
    }

    impl<'a> Reader<'a> {
        fn take(&mut self, n: usize) -> Result<&'a [u8], String> {
            let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
            match end {
                Some(end) => {
                    let s = &self.bytes[self.pos..end];
                    self.pos = end;
                    Ok(s)
                }
                None => Err(format!("truncated file at byte {}", self.pos)),
            }
        }

        fn u32(&mut self) -> Result<u32, String> {
            Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
        }

        fn u64(&mut self) -> Result<u64, String> {
            Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
        }
    }

    pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<ModelState<T>, String> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err("not a checkpoint (bad magic bytes)".into());
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(format!(
                "incompatible checkpoint version {version}, this build reads version {VERSION}"
            ));
        }
        let n_channels = r.u32()? as usize;
        if n_channels > 1024 {
            return Err(format!("implausible layer count {n_channels}"));
        }
        let channels = (0..n_channels)
            .map(|_| r.u32().map(|c| c as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let spec = ModelSpec { channels };
        spec.validate().map_err(|e| e.to_string())?;
        let seed = r.u64()?;
        let count = r.u64()? as usize;
        if count != spec.parameter_count() {
            return Err(format!(
                "parameter count {count} does not match the stored spec ({})",
                spec.parameter_count()
            ));
        }
        let raw = r.take(count.checked_mul(8).ok_or("parameter count overflows")?)?;
        if r.pos != bytes.len() {
            return Err(format!("{} trailing bytes", bytes.len() - r.pos));
        }
        let params = raw
            .chunks_exact(8)
            .map(|c| {
                let v = f64::from_le_bytes(c.try_into().unwrap());
                if v.is_finite() {
                    Ok(T::from_f64_lossy(v))
                } else {
                    Err("non-finite parameter".to_string())
                }
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(ModelState { spec, seed, params })
    }
}
