//! Minimal convolutional classifier: a stack of 3x3 conv + ReLU blocks (optional 2x2
//! max-pool), global average pooling over the final conv layer and a linear head.
//!
//! The final conv layer's channels are the "filters" every other module reasons about.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor3;

pub const CHECKPOINT_VERSION: u64 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvBlockSpec {
    pub channels: usize,
    pub pool: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_channels: usize,
    pub input_height: usize,
    pub input_width: usize,
    pub blocks: Vec<ConvBlockSpec>,
    pub label_count: usize,
}

impl Architecture {
    /// Three conv blocks on 3x16x16 inputs, 32 final filters, 10 classes.
    pub fn desk() -> Self {
        Self {
            input_channels: 3,
            input_height: 16,
            input_width: 16,
            blocks: vec![
                ConvBlockSpec {
                    channels: 16,
                    pool: true,
                },
                ConvBlockSpec {
                    channels: 32,
                    pool: true,
                },
                ConvBlockSpec {
                    channels: 32,
                    pool: false,
                },
            ],
            label_count: 10,
        }
    }

    /// Single conv block, used for exhaustive-search instances.
    pub fn tiny(input_channels: usize, side: usize, filters: usize, label_count: usize) -> Self {
        Self {
            input_channels,
            input_height: side,
            input_width: side,
            blocks: vec![ConvBlockSpec {
                channels: filters,
                pool: false,
            }],
            label_count,
        }
    }

    pub fn filter_count(&self) -> usize {
        self.blocks.last().map_or(0, |b| b.channels)
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() {
            return Err(Error::Usage(
                "architecture needs at least one conv block".into(),
            ));
        }
        if self.label_count == 0 || self.input_channels == 0 {
            return Err(Error::Usage(
                "label and input channel counts must be positive".into(),
            ));
        }
        if self.blocks.last().is_some_and(|b| b.pool) {
            return Err(Error::Usage(
                "the final conv block feeds global average pooling and cannot pool".into(),
            ));
        }
        let (mut h, mut w) = (self.input_height, self.input_width);
        if h == 0 || w == 0 {
            return Err(Error::Usage("input spatial size must be positive".into()));
        }
        for (i, block) in self.blocks.iter().enumerate() {
            if block.channels == 0 {
                return Err(Error::Usage(format!("block {i} has zero channels")));
            }
            if block.pool {
                if h % 2 != 0 || w % 2 != 0 {
                    return Err(Error::Usage(format!("block {i} pools an odd {h}x{w} map")));
                }
                h /= 2;
                w /= 2;
            }
        }
        Ok(())
    }

    /// Spatial size of the final conv layer's maps.
    pub fn final_spatial(&self) -> (usize, usize) {
        let pools = self.blocks.iter().filter(|b| b.pool).count() as u32;
        (self.input_height >> pools, self.input_width >> pools)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct ConvLayer<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub pool: bool,
    /// `[out][in][3][3]`
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Cnn<T> {
    arch: Architecture,
    convs: Vec<ConvLayer<T>>,
    /// `[label][filter]`
    head_weights: Vec<T>,
    head_bias: Vec<T>,
}

/// Everything `backward` needs from one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace<T> {
    inputs: Vec<Tensor3<T>>,
    /// Post-ReLU output of each conv layer, before pooling.
    activations: Vec<Tensor3<T>>,
    pool_index: Vec<Option<Vec<usize>>>,
    pub gap: Vec<T>,
    pub logits: Vec<T>,
}

impl<T: Scalar> ForwardTrace<T> {
    /// Final conv layer maps (post-ReLU), the tensor the filter mask gates.
    pub fn final_maps(&self) -> &Tensor3<T> {
        self.activations
            .last()
            .expect("trace has at least one layer")
    }
}

/// Parameter gradients laid out exactly like the network's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub conv_weights: Vec<Vec<T>>,
    pub conv_bias: Vec<Vec<T>>,
    pub head_weights: Vec<T>,
    pub head_bias: Vec<T>,
}

impl<T: Scalar> Gradients<T> {
    pub fn zeros_like(net: &Cnn<T>) -> Self {
        Self {
            conv_weights: net
                .convs
                .iter()
                .map(|c| vec![T::zero(); c.weights.len()])
                .collect(),
            conv_bias: net
                .convs
                .iter()
                .map(|c| vec![T::zero(); c.bias.len()])
                .collect(),
            head_weights: vec![T::zero(); net.head_weights.len()],
            head_bias: vec![T::zero(); net.head_bias.len()],
        }
    }

    pub fn slices(&self) -> Vec<&[T]> {
        let mut out: Vec<&[T]> = Vec::with_capacity(2 * self.conv_weights.len() + 2);
        for (w, b) in self.conv_weights.iter().zip(&self.conv_bias) {
            out.push(w);
            out.push(b);
        }
        out.push(&self.head_weights);
        out.push(&self.head_bias);
        out
    }

    fn slices_mut(&mut self) -> Vec<&mut [T]> {
        let mut out: Vec<&mut [T]> = Vec::with_capacity(2 * self.conv_weights.len() + 2);
        for (w, b) in self.conv_weights.iter_mut().zip(self.conv_bias.iter_mut()) {
            out.push(w);
            out.push(b);
        }
        out.push(&mut self.head_weights);
        out.push(&mut self.head_bias);
        out
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (dst, src) in self.slices_mut().into_iter().zip(other.slices()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += *s;
            }
        }
    }

    pub fn scale(&mut self, factor: T) {
        for dst in self.slices_mut() {
            for d in dst.iter_mut() {
                *d *= factor;
            }
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
struct Checkpoint<T> {
    checkpoint_version: u64,
    scalar: String,
    network: Cnn<T>,
}

impl<T: Scalar> Cnn<T> {
    /// He-normal conv weights, scaled-normal head, zero biases.
    pub fn new(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut normal = |std: f64| -> T {
            let z: f64 = StandardNormal.sample(&mut rng);
            T::lit(z * std)
        };
        let mut convs = Vec::with_capacity(arch.blocks.len());
        let mut in_channels = arch.input_channels;
        for block in &arch.blocks {
            let fan_in = (in_channels * 9) as f64;
            let std = (2.0 / fan_in).sqrt();
            let weights = (0..block.channels * in_channels * 9)
                .map(|_| normal(std))
                .collect();
            convs.push(ConvLayer {
                in_channels,
                out_channels: block.channels,
                pool: block.pool,
                weights,
                bias: vec![T::zero(); block.channels],
            });
            in_channels = block.channels;
        }
        let n = arch.filter_count();
        let std = (1.0 / n as f64).sqrt();
        let head_weights = (0..arch.label_count * n).map(|_| normal(std)).collect();
        Ok(Self {
            head_bias: vec![T::zero(); arch.label_count],
            arch,
            convs,
            head_weights,
        })
    }

    /// Builds a network from explicit parameters.
    pub fn from_parts(
        arch: Architecture,
        convs: Vec<ConvLayer<T>>,
        head_weights: Vec<T>,
        head_bias: Vec<T>,
    ) -> Result<Self> {
        arch.validate()?;
        if convs.len() != arch.blocks.len() {
            return Err(Error::Usage("one conv layer per block is required".into()));
        }
        let mut in_channels = arch.input_channels;
        for (layer, block) in convs.iter().zip(&arch.blocks) {
            if layer.in_channels != in_channels
                || layer.out_channels != block.channels
                || layer.pool != block.pool
                || layer.weights.len() != layer.out_channels * layer.in_channels * 9
                || layer.bias.len() != layer.out_channels
            {
                return Err(Error::Usage(
                    "conv layer does not match the architecture".into(),
                ));
            }
            in_channels = layer.out_channels;
        }
        let n = arch.filter_count();
        if head_weights.len() != arch.label_count * n || head_bias.len() != arch.label_count {
            return Err(Error::Usage(
                "head parameters do not match the architecture".into(),
            ));
        }
        Ok(Self {
            arch,
            convs,
            head_weights,
            head_bias,
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn label_count(&self) -> usize {
        self.arch.label_count
    }

    pub fn filter_count(&self) -> usize {
        self.arch.filter_count()
    }

    pub fn conv_layers(&self) -> &[ConvLayer<T>] {
        &self.convs
    }

    pub fn head_weights(&self) -> &[T] {
        &self.head_weights
    }

    pub fn head_bias(&self) -> &[T] {
        &self.head_bias
    }

    pub fn head_weight(&self, label: usize, filter: usize) -> T {
        self.head_weights[label * self.filter_count() + filter]
    }

    pub fn check_input(&self, image: &Tensor3<T>) -> Result<()> {
        let expected = (
            self.arch.input_channels,
            self.arch.input_height,
            self.arch.input_width,
        );
        if image.shape() != expected {
            return Err(Error::Input(format!(
                "image shape {:?} does not match classifier input {:?}",
                image.shape(),
                expected
            )));
        }
        Ok(())
    }

    /// Classification head applied to a GAP feature vector.
    pub fn head_logits(&self, gap: &[T]) -> Vec<T> {
        let n = self.filter_count();
        (0..self.label_count())
            .map(|c| {
                let row = &self.head_weights[c * n..(c + 1) * n];
                let mut acc = T::zero();
                for (w, g) in row.iter().zip(gap) {
                    acc += *w * *g;
                }
                acc + self.head_bias[c]
            })
            .collect()
    }

    /// Post-ReLU maps of the final conv layer.
    pub fn final_maps(&self, image: &Tensor3<T>) -> Result<Tensor3<T>> {
        self.check_input(image)?;
        let mut x = image.clone();
        for layer in &self.convs {
            let mut act = conv3x3_forward(layer, &x);
            relu_in_place(&mut act);
            x = if layer.pool {
                maxpool2_forward(&act).0
            } else {
                act
            };
        }
        Ok(x)
    }

    pub fn forward(&self, image: &Tensor3<T>) -> Result<ForwardTrace<T>> {
        self.check_input(image)?;
        let mut inputs = Vec::with_capacity(self.convs.len());
        let mut activations = Vec::with_capacity(self.convs.len());
        let mut pool_index = Vec::with_capacity(self.convs.len());
        let mut x = image.clone();
        for layer in &self.convs {
            let mut act = conv3x3_forward(layer, &x);
            relu_in_place(&mut act);
            inputs.push(x);
            if layer.pool {
                let (pooled, idx) = maxpool2_forward(&act);
                pool_index.push(Some(idx));
                activations.push(act);
                x = pooled;
            } else {
                pool_index.push(None);
                x = act.clone();
                activations.push(act);
            }
        }
        let gap = global_average_pool(&x);
        let logits = self.head_logits(&gap);
        Ok(ForwardTrace {
            inputs,
            activations,
            pool_index,
            gap,
            logits,
        })
    }

    /// Logits with the final conv layer's channels gated element-wise by `mask`.
    pub fn masked_logits(&self, image: &Tensor3<T>, mask: &[T]) -> Result<Vec<T>> {
        let n = self.filter_count();
        if mask.len() != n {
            return Err(Error::Usage(format!(
                "mask has length {}, classifier has {} filters",
                mask.len(),
                n
            )));
        }
        let mut maps = self.final_maps(image)?;
        for (k, &m) in mask.iter().enumerate() {
            for v in maps.plane_mut(k) {
                *v = m * *v;
            }
        }
        Ok(self.head_logits(&global_average_pool(&maps)))
    }

    /// Gradients of a scalar loss given `dL/dlogits` and an optional extra
    /// `dL/dgap` contributed by terms defined directly on the GAP features.
    pub fn backward(
        &self,
        trace: &ForwardTrace<T>,
        dlogits: &[T],
        dgap_extra: Option<&[T]>,
    ) -> Gradients<T> {
        let n = self.filter_count();
        let mut grads = Gradients::zeros_like(self);
        let mut dgap = vec![T::zero(); n];
        for (c, &dl) in dlogits.iter().enumerate() {
            grads.head_bias[c] = dl;
            let row = &self.head_weights[c * n..(c + 1) * n];
            let grow = &mut grads.head_weights[c * n..(c + 1) * n];
            for k in 0..n {
                grow[k] = dl * trace.gap[k];
                dgap[k] += dl * row[k];
            }
        }
        if let Some(extra) = dgap_extra {
            for (d, e) in dgap.iter_mut().zip(extra) {
                *d += *e;
            }
        }

        let last = trace.activations.len() - 1;
        let final_act = &trace.activations[last];
        let inv_area = T::one() / T::lit(final_act.plane_len() as f64);
        let mut dact = Tensor3::zeros(final_act.channels, final_act.height, final_act.width);
        for k in 0..n {
            let g = dgap[k] * inv_area;
            dact.plane_mut(k).fill(g);
        }

        for l in (0..self.convs.len()).rev() {
            let act = &trace.activations[l];
            for (d, a) in dact.data.iter_mut().zip(&act.data) {
                if *a <= T::zero() {
                    *d = T::zero();
                }
            }
            let need_input_grad = l > 0;
            let dinput = conv3x3_backward(
                &self.convs[l],
                &trace.inputs[l],
                &dact,
                &mut grads.conv_weights[l],
                &mut grads.conv_bias[l],
                need_input_grad,
            );
            if let Some(dinput) = dinput {
                let below = &trace.activations[l - 1];
                dact = match &trace.pool_index[l - 1] {
                    Some(idx) => maxpool2_backward(&dinput, idx, below.shape()),
                    None => dinput,
                };
            }
        }
        grads
    }

    /// `d logit[class] / d final_maps`, the quantity Grad-CAM weights channels by.
    pub fn class_gradient_wrt_final_maps(&self, class: usize) -> Result<Tensor3<T>> {
        if class >= self.label_count() {
            return Err(Error::Usage(format!("class {class} out of range")));
        }
        let (h, w) = self.arch.final_spatial();
        let n = self.filter_count();
        let inv_area = T::one() / T::lit((h * w) as f64);
        Ok(Tensor3::from_fn(n, h, w, |k, _, _| {
            self.head_weight(class, k) * inv_area
        }))
    }

    /// Mutable views of every trainable parameter, in [`Gradients::slices`] order.
    pub fn param_slices_mut(&mut self) -> Vec<&mut [T]> {
        let mut out: Vec<&mut [T]> = Vec::with_capacity(2 * self.convs.len() + 2);
        for layer in &mut self.convs {
            out.push(&mut layer.weights);
            out.push(&mut layer.bias);
        }
        out.push(&mut self.head_weights);
        out.push(&mut self.head_bias);
        out
    }

    pub fn param_count(&self) -> usize {
        self.convs
            .iter()
            .map(|c| c.weights.len() + c.bias.len())
            .sum::<usize>()
            + self.head_weights.len()
            + self.head_bias.len()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let ckpt = Checkpoint {
            checkpoint_version: CHECKPOINT_VERSION,
            scalar: T::NAME.to_string(),
            network: self.clone(),
        };
        let bytes = serde_json::to_vec(&ckpt)?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let value: serde_json::Value = serde_json::from_slice(&bytes)?;
        let version = value
            .get("checkpoint_version")
            .and_then(|v| v.as_u64())
            .unwrap_or(0);
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                kind: "checkpoint",
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let ckpt: Checkpoint<T> = serde_json::from_value(value)?;
        if ckpt.scalar != T::NAME {
            return Err(Error::Format(format!(
                "checkpoint holds {} parameters, expected {}",
                ckpt.scalar,
                T::NAME
            )));
        }
        let net = ckpt.network;
        Self::from_parts(net.arch, net.convs, net.head_weights, net.head_bias)
            .map_err(|e| Error::Format(e.to_string()))
    }
}

pub fn global_average_pool<T: Scalar>(maps: &Tensor3<T>) -> Vec<T> {
    let inv_area = T::one() / T::lit(maps.plane_len() as f64);
    (0..maps.channels)
        .map(|c| maps.plane(c).iter().copied().sum::<T>() * inv_area)
        .collect()
}

fn relu_in_place<T: Scalar>(t: &mut Tensor3<T>) {
    for v in &mut t.data {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// Output rows/cols that read an in-bounds input for kernel offset `k` (pad 1).
#[inline]
fn valid_range(k: usize, len: usize) -> (usize, usize) {
    match k {
        0 => (1, len),
        1 => (0, len),
        _ => (0, len - 1),
    }
}

fn conv3x3_forward<T: Scalar>(layer: &ConvLayer<T>, input: &Tensor3<T>) -> Tensor3<T> {
    let (h, w) = (input.height, input.width);
    let mut out = Tensor3::zeros(layer.out_channels, h, w);
    for oc in 0..layer.out_channels {
        let out_plane = out.plane_mut(oc);
        out_plane.fill(layer.bias[oc]);
        for ic in 0..layer.in_channels {
            let in_plane = input.plane(ic);
            let wbase = (oc * layer.in_channels + ic) * 9;
            for ky in 0..3 {
                let (y0, y1) = valid_range(ky, h);
                for kx in 0..3 {
                    let wv = layer.weights[wbase + ky * 3 + kx];
                    let (x0, x1) = valid_range(kx, w);
                    for y in y0..y1 {
                        let iy = y + ky - 1;
                        let orow = &mut out_plane[y * w + x0..y * w + x1];
                        let irow = &in_plane[iy * w + x0 + kx - 1..iy * w + x1 + kx - 1];
                        for (o, i) in orow.iter_mut().zip(irow) {
                            *o += wv * *i;
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv3x3_backward<T: Scalar>(
    layer: &ConvLayer<T>,
    input: &Tensor3<T>,
    dout: &Tensor3<T>,
    dweights: &mut [T],
    dbias: &mut [T],
    need_input_grad: bool,
) -> Option<Tensor3<T>> {
    let (h, w) = (input.height, input.width);
    let mut dinput = need_input_grad.then(|| Tensor3::zeros(input.channels, h, w));
    for oc in 0..layer.out_channels {
        let dplane = dout.plane(oc);
        dbias[oc] += dplane.iter().copied().sum::<T>();
        for ic in 0..layer.in_channels {
            let in_plane = input.plane(ic);
            let wbase = (oc * layer.in_channels + ic) * 9;
            for ky in 0..3 {
                let (y0, y1) = valid_range(ky, h);
                for kx in 0..3 {
                    let (x0, x1) = valid_range(kx, w);
                    let wv = layer.weights[wbase + ky * 3 + kx];
                    let mut acc = T::zero();
                    for y in y0..y1 {
                        let iy = y + ky - 1;
                        let drow = &dplane[y * w + x0..y * w + x1];
                        let irow = &in_plane[iy * w + x0 + kx - 1..iy * w + x1 + kx - 1];
                        for (d, i) in drow.iter().zip(irow) {
                            acc += *d * *i;
                        }
                        if let Some(dinput) = dinput.as_mut() {
                            let dirow = &mut dinput.plane_mut(ic)
                                [iy * w + x0 + kx - 1..iy * w + x1 + kx - 1];
                            for (di, d) in dirow.iter_mut().zip(drow) {
                                *di += wv * *d;
                            }
                        }
                    }
                    dweights[wbase + ky * 3 + kx] += acc;
                }
            }
        }
    }
    dinput
}

/// 2x2 stride-2 max pooling; returns the pooled tensor and, per output cell,
/// the flat index of the winning input cell (first maximum wins).
fn maxpool2_forward<T: Scalar>(input: &Tensor3<T>) -> (Tensor3<T>, Vec<usize>) {
    let (c, h, w) = input.shape();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor3::zeros(c, oh, ow);
    let mut idx = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let plane = input.plane(ch);
        let base = ch * h * w;
        for y in 0..oh {
            for x in 0..ow {
                let mut best = (2 * y) * w + 2 * x;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let cand = (2 * y + dy) * w + 2 * x + dx;
                    if plane[cand] > plane[best] {
                        best = cand;
                    }
                }
                out.data[(ch * oh + y) * ow + x] = plane[best];
                idx.push(base + best);
            }
        }
    }
    (out, idx)
}

fn maxpool2_backward<T: Scalar>(
    dout: &Tensor3<T>,
    idx: &[usize],
    shape: (usize, usize, usize),
) -> Tensor3<T> {
    let mut dinput = Tensor3::zeros(shape.0, shape.1, shape.2);
    for (d, &i) in dout.data.iter().zip(idx) {
        dinput.data[i] += *d;
    }
    dinput
}
