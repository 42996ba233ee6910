//! Forward and backward passes for the convolutional branch: 2-D
//! convolution, 2×2 max-pooling, dense layers, and the activation family.
//!
//! Convolution is plain cross-correlation over an F×F window with zero
//! padding. Output extents follow `(W - F + 2P)/S + 1` exactly; a
//! non-integral division is an error rather than a silent floor. Every
//! backward pass is the exact analytic gradient of its forward map and is
//! checked against central finite differences in the tests.

use crate::error::{Error, Result};
use crate::tensor::{RngState, Tensor};

/// Activation applied elementwise after a layer's affine map. Softmax is
/// the exception: it normalizes over the last axis and is only legal on
/// dense layers.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum ActivationKind {
    Sigmoid,
    Tanh,
    /// Slope for negative inputs; must lie in (0, 1).
    LeakyReLU(f64),
    Softmax,
    Identity,
}

impl ActivationKind {
    pub fn apply(&self, z: &Tensor) -> Tensor {
        match self {
            ActivationKind::Softmax => {
                let last = *z.shape().last().expect("softmax needs a final axis");
                let mut data = z.data().to_vec();
                for row in data.chunks_mut(last) {
                    softmax_row(row);
                }
                Tensor::from_raw(z.shape().to_vec(), data)
            }
            _ => z.map(|v| self.scalar(v)),
        }
    }

    fn scalar(&self, z: f64) -> f64 {
        match self {
            ActivationKind::Sigmoid => sigmoid(z),
            ActivationKind::Tanh => z.tanh(),
            ActivationKind::LeakyReLU(alpha) => {
                if z > 0.0 {
                    z
                } else {
                    alpha * z
                }
            }
            ActivationKind::Identity => z,
            ActivationKind::Softmax => unreachable!("softmax is not elementwise"),
        }
    }

    /// d(activation)/dz at pre-activation `z`, for the elementwise kinds.
    fn scalar_derivative(&self, z: f64) -> f64 {
        match self {
            ActivationKind::Sigmoid => {
                let s = sigmoid(z);
                s * (1.0 - s)
            }
            ActivationKind::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            ActivationKind::LeakyReLU(alpha) => {
                if z > 0.0 {
                    1.0
                } else {
                    *alpha
                }
            }
            ActivationKind::Identity => 1.0,
            ActivationKind::Softmax => unreachable!("softmax gradient needs the full Jacobian"),
        }
    }
}

pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Numerically stabilized softmax over one row, in place.
fn softmax_row(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Full softmax Jacobian product: given the softmax output `s` and the
/// gradient w.r.t. it, returns the gradient w.r.t. the logits:
/// `s ∘ (g − <g, s>)` per row.
pub fn softmax_backward(softmax_out: &[f64], grad_out: &[f64]) -> Vec<f64> {
    let dot: f64 = softmax_out
        .iter()
        .zip(grad_out.iter())
        .map(|(s, g)| s * g)
        .sum();
    softmax_out
        .iter()
        .zip(grad_out.iter())
        .map(|(s, g)| s * (g - dot))
        .collect()
}

/// Output extent of a convolution/pooling stage: `(W − F + 2P)/S + 1`.
/// A non-integral quotient is rejected.
pub fn conv_output_size(w: usize, f: usize, p: usize, s: usize) -> Result<usize> {
    if w == 0 || f == 0 || s == 0 {
        return Err(Error::Argument(format!(
            "conv_output_size needs W, F, S >= 1 (got W={w}, F={f}, S={s})"
        )));
    }
    if w + 2 * p < f {
        return Err(Error::Argument(format!(
            "kernel F={f} does not fit input W={w} with padding P={p}"
        )));
    }
    let span = w + 2 * p - f;
    if span % s != 0 {
        return Err(Error::Argument(format!(
            "conv output size (W={w} - F={f} + 2*P={p}) = {span} is not divisible by stride S={s}"
        )));
    }
    Ok(span / s + 1)
}

/// 2-D convolution layer: `out_ch` kernels of extent `in_ch × F × F`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub kernels: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
    pub activation: ActivationKind,
}

/// Forward cache for the backward pass: the layer input and the
/// pre-activation values.
#[derive(Debug, Clone)]
pub struct ConvCache {
    pub input: Tensor,
    pub pre: Tensor,
}

impl ConvLayer {
    pub fn new(
        kernels: Tensor,
        bias: Tensor,
        stride: usize,
        padding: usize,
        activation: ActivationKind,
    ) -> Result<Self> {
        if kernels.shape().len() != 4 {
            return Err(Error::dim("ConvLayer kernels (rank 4)", kernels.shape(), &[]));
        }
        if bias.shape() != [kernels.shape()[0]] {
            return Err(Error::dim("ConvLayer bias", bias.shape(), kernels.shape()));
        }
        if kernels.shape()[2] != kernels.shape()[3] {
            return Err(Error::dim("ConvLayer square kernel", kernels.shape(), &[]));
        }
        if stride == 0 {
            return Err(Error::Argument("stride must be >= 1".into()));
        }
        if matches!(activation, ActivationKind::Softmax) {
            return Err(Error::Argument("softmax is not valid on a conv layer".into()));
        }
        Ok(ConvLayer {
            kernels,
            bias,
            stride,
            padding,
            activation,
        })
    }

    /// Kaiming-style initialization: kernels ~ normal(0, sqrt(2/fan_in)),
    /// biases zero.
    pub fn kaiming(
        out_ch: usize,
        in_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        activation: ActivationKind,
        rng: &mut RngState,
    ) -> Result<Self> {
        let fan_in = (in_ch * kernel * kernel) as f64;
        let kernels =
            rng.sample_normal(vec![out_ch, in_ch, kernel, kernel], 0.0, (2.0 / fan_in).sqrt())?;
        ConvLayer::new(kernels, Tensor::zeros(vec![out_ch]), stride, padding, activation)
    }

    pub fn out_channels(&self) -> usize {
        self.kernels.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.kernels.shape()[1]
    }

    pub fn kernel_size(&self) -> usize {
        self.kernels.shape()[2]
    }
}

pub fn conv2d_forward(layer: &ConvLayer, input: &Tensor) -> Result<(Tensor, ConvCache)> {
    if input.shape().len() != 3 || input.shape()[0] != layer.in_channels() {
        return Err(Error::dim(
            "conv2d_forward input channels",
            input.shape(),
            layer.kernels.shape(),
        ));
    }
    let (in_ch, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (f, s, p) = (layer.kernel_size(), layer.stride, layer.padding);
    let oh = conv_output_size(h, f, p, s)?;
    let ow = conv_output_size(w, f, p, s)?;
    let out_ch = layer.out_channels();

    let x = input.data();
    let k = layer.kernels.data();
    let mut pre = vec![0.0; out_ch * oh * ow];
    for o in 0..out_ch {
        let bias = layer.bias.data()[o];
        for i in 0..oh {
            for j in 0..ow {
                let mut acc = bias;
                for c in 0..in_ch {
                    for a in 0..f {
                        let y = (i * s + a) as isize - p as isize;
                        if y < 0 || y >= h as isize {
                            continue;
                        }
                        for b in 0..f {
                            let xcol = (j * s + b) as isize - p as isize;
                            if xcol < 0 || xcol >= w as isize {
                                continue;
                            }
                            acc += k[((o * in_ch + c) * f + a) * f + b]
                                * x[(c * h + y as usize) * w + xcol as usize];
                        }
                    }
                }
                pre[(o * oh + i) * ow + j] = acc;
            }
        }
    }
    let pre = Tensor::from_raw(vec![out_ch, oh, ow], pre);
    let output = layer.activation.apply(&pre);
    Ok((
        output,
        ConvCache {
            input: input.clone(),
            pre,
        },
    ))
}

pub fn conv2d_backward(
    layer: &ConvLayer,
    cache: &ConvCache,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    if grad_out.shape() != cache.pre.shape() {
        return Err(Error::dim(
            "conv2d_backward grad_out",
            grad_out.shape(),
            cache.pre.shape(),
        ));
    }
    let (in_ch, h, w) = (
        cache.input.shape()[0],
        cache.input.shape()[1],
        cache.input.shape()[2],
    );
    let (out_ch, oh, ow) = (
        grad_out.shape()[0],
        grad_out.shape()[1],
        grad_out.shape()[2],
    );
    let (f, s, p) = (layer.kernel_size(), layer.stride, layer.padding);

    let x = cache.input.data();
    let k = layer.kernels.data();
    let mut grad_input = vec![0.0; in_ch * h * w];
    let mut grad_kernels = vec![0.0; out_ch * in_ch * f * f];
    let mut grad_bias = vec![0.0; out_ch];

    for o in 0..out_ch {
        for i in 0..oh {
            for j in 0..ow {
                let flat = (o * oh + i) * ow + j;
                let g = grad_out.data()[flat]
                    * layer.activation.scalar_derivative(cache.pre.data()[flat]);
                grad_bias[o] += g;
                for c in 0..in_ch {
                    for a in 0..f {
                        let y = (i * s + a) as isize - p as isize;
                        if y < 0 || y >= h as isize {
                            continue;
                        }
                        for b in 0..f {
                            let xcol = (j * s + b) as isize - p as isize;
                            if xcol < 0 || xcol >= w as isize {
                                continue;
                            }
                            let xi = (c * h + y as usize) * w + xcol as usize;
                            let ki = ((o * in_ch + c) * f + a) * f + b;
                            grad_kernels[ki] += g * x[xi];
                            grad_input[xi] += g * k[ki];
                        }
                    }
                }
            }
        }
    }
    Ok((
        Tensor::from_raw(vec![in_ch, h, w], grad_input),
        Tensor::from_raw(vec![out_ch, in_ch, f, f], grad_kernels),
        Tensor::from_raw(vec![out_ch], grad_bias),
    ))
}

/// Argmax positions recorded by max-pooling, one flat input index per
/// output element.
#[derive(Debug, Clone)]
pub struct PoolCache {
    pub in_shape: Vec<usize>,
    pub out_shape: Vec<usize>,
    pub argmax: Vec<usize>,
}

/// 2×2 max-pooling with stride 2. Odd extents are treated as padded with
/// −∞, so the output extent is `ceil(H/2) × ceil(W/2)`. Ties go to the
/// lowest flat index.
pub fn maxpool2d(input: &Tensor) -> Result<(Tensor, PoolCache)> {
    if input.shape().len() != 3 {
        return Err(Error::dim("maxpool2d input (rank 3)", input.shape(), &[]));
    }
    let (ch, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let oh = h.div_ceil(2);
    let ow = w.div_ceil(2);
    let x = input.data();
    let mut out = vec![0.0; ch * oh * ow];
    let mut argmax = vec![0usize; ch * oh * ow];
    for c in 0..ch {
        for i in 0..oh {
            for j in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0usize;
                for a in 0..2 {
                    let y = 2 * i + a;
                    if y >= h {
                        continue;
                    }
                    for b in 0..2 {
                        let xc = 2 * j + b;
                        if xc >= w {
                            continue;
                        }
                        let idx = (c * h + y) * w + xc;
                        if x[idx] > best {
                            best = x[idx];
                            best_idx = idx;
                        }
                    }
                }
                out[(c * oh + i) * ow + j] = best;
                argmax[(c * oh + i) * ow + j] = best_idx;
            }
        }
    }
    Ok((
        Tensor::from_raw(vec![ch, oh, ow], out),
        PoolCache {
            in_shape: vec![ch, h, w],
            out_shape: vec![ch, oh, ow],
            argmax,
        },
    ))
}

/// Scatter the gradient back to the recorded argmax positions.
pub fn maxpool2d_backward(cache: &PoolCache, grad_out: &Tensor) -> Result<Tensor> {
    if grad_out.shape() != cache.out_shape.as_slice() {
        return Err(Error::dim(
            "maxpool2d_backward grad_out",
            grad_out.shape(),
            &cache.out_shape,
        ));
    }
    let mut grad_input = vec![0.0; cache.in_shape.iter().product()];
    for (flat, &src) in cache.argmax.iter().enumerate() {
        grad_input[src] += grad_out.data()[flat];
    }
    Ok(Tensor::from_raw(cache.in_shape.clone(), grad_input))
}

/// Fully connected layer: `output = activation(W·x + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weights: Tensor,
    pub bias: Tensor,
    pub activation: ActivationKind,
}

#[derive(Debug, Clone)]
pub struct DenseCache {
    pub input: Tensor,
    pub pre: Tensor,
}

impl DenseLayer {
    pub fn new(weights: Tensor, bias: Tensor, activation: ActivationKind) -> Result<Self> {
        if weights.shape().len() != 2 {
            return Err(Error::dim("DenseLayer weights (rank 2)", weights.shape(), &[]));
        }
        if bias.shape() != [weights.shape()[0]] {
            return Err(Error::dim("DenseLayer bias", bias.shape(), weights.shape()));
        }
        Ok(DenseLayer {
            weights,
            bias,
            activation,
        })
    }

    pub fn kaiming(
        out_dim: usize,
        in_dim: usize,
        activation: ActivationKind,
        rng: &mut RngState,
    ) -> Result<Self> {
        let weights =
            rng.sample_normal(vec![out_dim, in_dim], 0.0, (2.0 / in_dim as f64).sqrt())?;
        DenseLayer::new(weights, Tensor::zeros(vec![out_dim]), activation)
    }

    pub fn out_dim(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn in_dim(&self) -> usize {
        self.weights.shape()[1]
    }
}

pub fn dense_forward(layer: &DenseLayer, input: &Tensor) -> Result<(Tensor, DenseCache)> {
    if input.shape() != [layer.in_dim()] {
        return Err(Error::dim(
            "dense_forward input",
            input.shape(),
            layer.weights.shape(),
        ));
    }
    let (out_dim, in_dim) = (layer.out_dim(), layer.in_dim());
    let w = layer.weights.data();
    let mut pre = layer.bias.data().to_vec();
    for (o, acc) in pre.iter_mut().enumerate() {
        let row = &w[o * in_dim..(o + 1) * in_dim];
        *acc += row
            .iter()
            .zip(input.data().iter())
            .map(|(wv, xv)| wv * xv)
            .sum::<f64>();
    }
    let pre = Tensor::from_raw(vec![out_dim], pre);
    let output = layer.activation.apply(&pre);
    Ok((
        output,
        DenseCache {
            input: input.clone(),
            pre,
        },
    ))
}

pub fn dense_backward(
    layer: &DenseLayer,
    cache: &DenseCache,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    if grad_out.shape() != cache.pre.shape() {
        return Err(Error::dim(
            "dense_backward grad_out",
            grad_out.shape(),
            cache.pre.shape(),
        ));
    }
    let (out_dim, in_dim) = (layer.out_dim(), layer.in_dim());
    let dpre: Vec<f64> = match layer.activation {
        ActivationKind::Softmax => {
            let out = layer.activation.apply(&cache.pre);
            softmax_backward(out.data(), grad_out.data())
        }
        act => cache
            .pre
            .data()
            .iter()
            .zip(grad_out.data().iter())
            .map(|(&z, &g)| g * act.scalar_derivative(z))
            .collect(),
    };
    let w = layer.weights.data();
    let x = cache.input.data();
    let mut grad_w = vec![0.0; out_dim * in_dim];
    let mut grad_x = vec![0.0; in_dim];
    for o in 0..out_dim {
        let g = dpre[o];
        for i in 0..in_dim {
            grad_w[o * in_dim + i] = g * x[i];
            grad_x[i] += g * w[o * in_dim + i];
        }
    }
    Ok((
        Tensor::from_raw(vec![in_dim], grad_x),
        Tensor::from_raw(vec![out_dim, in_dim], grad_w),
        Tensor::from_raw(vec![out_dim], dpre),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    const FD_H: f64 = 1e-5;

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    #[test]
    fn output_size_formula() {
        assert_eq!(conv_output_size(32, 3, 0, 1).unwrap(), 30);
        assert_eq!(conv_output_size(10, 3, 1, 1).unwrap(), 10);
        assert!(conv_output_size(28, 3, 0, 2).is_err());
    }

    #[test]
    fn output_size_matches_enumeration() {
        // Count the start offsets at which an F-window fits in the padded
        // input when stepping by S.
        for w in 1..=64usize {
            for f in 1..=7usize {
                for p in 0..=3usize {
                    for s in 1..=3usize {
                        if w + 2 * p < f || (w + 2 * p - f) % s != 0 {
                            continue;
                        }
                        let mut count = 0;
                        let mut start = 0;
                        while start + f <= w + 2 * p {
                            count += 1;
                            start += s;
                        }
                        assert_eq!(conv_output_size(w, f, p, s).unwrap(), count);
                    }
                }
            }
        }
    }

    #[test]
    fn conv_sum_of_ones() {
        let layer = ConvLayer::new(
            Tensor::filled(vec![1, 1, 3, 3], 1.0),
            Tensor::zeros(vec![1]),
            1,
            0,
            ActivationKind::Identity,
        )
        .unwrap();
        let input = Tensor::filled(vec![1, 3, 3], 1.0);
        let (out, _) = conv2d_forward(&layer, &input).unwrap();
        assert_eq!(out.shape(), &[1, 1, 1]);
        assert_eq!(out.data(), &[9.0]);
    }

    #[test]
    fn conv_delta_kernel_is_identity() {
        let mut kernel = vec![0.0; 9];
        kernel[4] = 1.0; // center of the 3x3 window
        let layer = ConvLayer::new(
            Tensor::new(vec![1, 1, 3, 3], kernel).unwrap(),
            Tensor::zeros(vec![1]),
            1,
            1,
            ActivationKind::Identity,
        )
        .unwrap();
        let mut rng = RngState::new(13);
        let input = rng.sample_normal(vec![1, 5, 5], 0.0, 1.0).unwrap();
        let (out, _) = conv2d_forward(&layer, &input).unwrap();
        assert_eq!(out, input);
    }

    /// Six-nested-loop convolution oracle, indexing the padded input
    /// directly.
    fn conv_oracle(layer: &ConvLayer, input: &Tensor) -> Vec<f64> {
        let (in_ch, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
        let (f, s, p) = (layer.kernel_size(), layer.stride, layer.padding);
        let oh = conv_output_size(h, f, p, s).unwrap();
        let ow = conv_output_size(w, f, p, s).unwrap();
        let pad_at = |c: usize, y: isize, x: isize| -> f64 {
            if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                0.0
            } else {
                input.data()[(c * h + y as usize) * w + x as usize]
            }
        };
        let mut out = Vec::new();
        for o in 0..layer.out_channels() {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = layer.bias.data()[o];
                    for c in 0..in_ch {
                        for a in 0..f {
                            for b in 0..f {
                                acc += layer.kernels.data()[((o * in_ch + c) * f + a) * f + b]
                                    * pad_at(
                                        c,
                                        (i * s + a) as isize - p as isize,
                                        (j * s + b) as isize - p as isize,
                                    );
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_loop_oracle() {
        let mut rng = RngState::new(21);
        let layer = ConvLayer::kaiming(4, 2, 3, 1, 1, ActivationKind::Identity, &mut rng).unwrap();
        let input = rng.sample_normal(vec![2, 5, 5], 0.0, 1.0).unwrap();
        let (out, _) = conv2d_forward(&layer, &input).unwrap();
        for (got, want) in out.data().iter().zip(conv_oracle(&layer, &input)) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_channel_mismatch() {
        let mut rng = RngState::new(1);
        let layer = ConvLayer::kaiming(2, 3, 3, 1, 0, ActivationKind::Identity, &mut rng).unwrap();
        let input = Tensor::zeros(vec![2, 5, 5]);
        assert!(matches!(
            conv2d_forward(&layer, &input),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn conv_backward_zero_grad() {
        let mut rng = RngState::new(2);
        let layer =
            ConvLayer::kaiming(2, 1, 3, 1, 0, ActivationKind::LeakyReLU(0.01), &mut rng).unwrap();
        let input = rng.sample_normal(vec![1, 4, 4], 0.0, 1.0).unwrap();
        let (out, cache) = conv2d_forward(&layer, &input).unwrap();
        let (gi, gk, gb) = conv2d_backward(&layer, &cache, &Tensor::zeros(out.shape().to_vec())).unwrap();
        assert!(gi.data().iter().all(|&v| v == 0.0));
        assert!(gk.data().iter().all(|&v| v == 0.0));
        assert!(gb.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_backward_scalar_chain_rule() {
        let layer = ConvLayer::new(
            Tensor::new(vec![1, 1, 1, 1], vec![2.0]).unwrap(),
            Tensor::zeros(vec![1]),
            1,
            0,
            ActivationKind::Identity,
        )
        .unwrap();
        let input = Tensor::new(vec![1, 1, 1], vec![3.0]).unwrap();
        let (_, cache) = conv2d_forward(&layer, &input).unwrap();
        let grad_out = Tensor::new(vec![1, 1, 1], vec![5.0]).unwrap();
        let (gi, gk, gb) = conv2d_backward(&layer, &cache, &grad_out).unwrap();
        assert_eq!(gk.data(), &[15.0]); // input * grad_out
        assert_eq!(gi.data(), &[10.0]); // kernel * grad_out
        assert_eq!(gb.data(), &[5.0]);
    }

    /// Scalar loss `sum(probe ∘ output)` so grad_out == probe; finite
    /// differences of it validate the analytic gradients.
    fn conv_fd_check(layer: &ConvLayer, input: &Tensor, probe: &Tensor) -> f64 {
        let loss = |l: &ConvLayer, x: &Tensor| -> f64 {
            let (out, _) = conv2d_forward(l, x).unwrap();
            out.data()
                .iter()
                .zip(probe.data().iter())
                .map(|(o, p)| o * p)
                .sum()
        };
        let (_, cache) = conv2d_forward(layer, input).unwrap();
        let (gi, gk, gb) = conv2d_backward(layer, &cache, probe).unwrap();
        let mut worst: f64 = 0.0;
        for idx in 0..layer.kernels.len() {
            let mut plus = layer.clone();
            plus.kernels.data_mut()[idx] += FD_H;
            let mut minus = layer.clone();
            minus.kernels.data_mut()[idx] -= FD_H;
            let fd = (loss(&plus, input) - loss(&minus, input)) / (2.0 * FD_H);
            worst = worst.max(rel_err(fd, gk.data()[idx]));
        }
        for idx in 0..layer.bias.len() {
            let mut plus = layer.clone();
            plus.bias.data_mut()[idx] += FD_H;
            let mut minus = layer.clone();
            minus.bias.data_mut()[idx] -= FD_H;
            let fd = (loss(&plus, input) - loss(&minus, input)) / (2.0 * FD_H);
            worst = worst.max(rel_err(fd, gb.data()[idx]));
        }
        for idx in 0..input.len() {
            let mut plus = input.clone();
            plus.data_mut()[idx] += FD_H;
            let mut minus = input.clone();
            minus.data_mut()[idx] -= FD_H;
            let fd = (loss(layer, &plus) - loss(layer, &minus)) / (2.0 * FD_H);
            worst = worst.max(rel_err(fd, gi.data()[idx]));
        }
        worst
    }

    fn kink_proximal(pre: &Tensor) -> bool {
        pre.data().iter().any(|v| v.abs() < 1e-3)
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = RngState::new(77);
        let mut done = 0;
        while done < 20 {
            let layer =
                ConvLayer::kaiming(3, 2, 3, 1, 1, ActivationKind::LeakyReLU(0.01), &mut rng)
                    .unwrap();
            let input = rng.sample_normal(vec![2, 5, 5], 0.0, 1.0).unwrap();
            let (_, cache) = conv2d_forward(&layer, &input).unwrap();
            if kink_proximal(&cache.pre) {
                continue; // resample instances near the LeakyReLU kink
            }
            let probe = rng
                .sample_normal(vec![3, 5, 5], 0.0, 1.0)
                .unwrap();
            let worst = conv_fd_check(&layer, &input, &probe);
            assert!(worst < 1e-4, "conv gradient relative error {worst}");
            done += 1;
        }
    }

    #[test]
    fn maxpool_basics() {
        let input = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (out, cache) = maxpool2d(&input).unwrap();
        assert_eq!(out.data(), &[4.0]);
        assert_eq!(cache.argmax, vec![3]);
    }

    #[test]
    fn maxpool_tie_breaks_to_lowest_index() {
        let input = Tensor::filled(vec![1, 2, 2], 7.0);
        let (out, cache) = maxpool2d(&input).unwrap();
        assert_eq!(out.data(), &[7.0]);
        assert_eq!(cache.argmax, vec![0]);
        let grad = maxpool2d_backward(&cache, &Tensor::filled(vec![1, 1, 1], 1.0)).unwrap();
        assert_eq!(grad.data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn maxpool_matches_window_oracle() {
        let mut rng = RngState::new(5);
        let input = rng.sample_normal(vec![1, 8, 8], 0.0, 1.0).unwrap();
        let (out, _) = maxpool2d(&input).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let mut best = f64::NEG_INFINITY;
                for a in 0..2 {
                    for b in 0..2 {
                        best = best.max(input.data()[(2 * i + a) * 8 + (2 * j + b)]);
                    }
                }
                assert_eq!(out.data()[i * 4 + j], best);
            }
        }
    }

    #[test]
    fn maxpool_odd_extent_pads_with_neg_infinity() {
        let input = Tensor::new(vec![1, 3, 3], (1..=9).map(|v| v as f64).collect()).unwrap();
        let (out, _) = maxpool2d(&input).unwrap();
        assert_eq!(out.shape(), &[1, 2, 2]);
        assert_eq!(out.data(), &[5.0, 6.0, 8.0, 9.0]);
    }

    #[test]
    fn dense_identity() {
        let eye = Tensor::new(vec![3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        let layer = DenseLayer::new(eye, Tensor::zeros(vec![3]), ActivationKind::Identity).unwrap();
        let x = Tensor::from_vec(vec![0.5, -1.0, 2.0]).unwrap();
        let (out, _) = dense_forward(&layer, &x).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn dense_sigmoid_at_zero() {
        let mut rng = RngState::new(8);
        let layer = DenseLayer::kaiming(4, 3, ActivationKind::Sigmoid, &mut rng).unwrap();
        let (out, _) = dense_forward(&layer, &Tensor::zeros(vec![3])).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn dense_backward_matches_finite_differences() {
        let mut rng = RngState::new(99);
        let mut done = 0;
        while done < 20 {
            let layer = DenseLayer::kaiming(4, 6, ActivationKind::LeakyReLU(0.01), &mut rng).unwrap();
            let x = rng.sample_normal(vec![6], 0.0, 1.0).unwrap();
            let (_, cache) = dense_forward(&layer, &x).unwrap();
            if kink_proximal(&cache.pre) {
                continue;
            }
            let probe = rng.sample_normal(vec![4], 0.0, 1.0).unwrap();
            let (gx, gw, gb) = dense_backward(&layer, &cache, &probe).unwrap();
            let loss = |l: &DenseLayer, xv: &Tensor| -> f64 {
                let (out, _) = dense_forward(l, xv).unwrap();
                out.data()
                    .iter()
                    .zip(probe.data().iter())
                    .map(|(o, p)| o * p)
                    .sum()
            };
            let mut worst: f64 = 0.0;
            for idx in 0..layer.weights.len() {
                let mut plus = layer.clone();
                plus.weights.data_mut()[idx] += FD_H;
                let mut minus = layer.clone();
                minus.weights.data_mut()[idx] -= FD_H;
                let fd = (loss(&plus, &x) - loss(&minus, &x)) / (2.0 * FD_H);
                worst = worst.max(rel_err(fd, gw.data()[idx]));
            }
            for idx in 0..layer.bias.len() {
                let mut plus = layer.clone();
                plus.bias.data_mut()[idx] += FD_H;
                let mut minus = layer.clone();
                minus.bias.data_mut()[idx] -= FD_H;
                let fd = (loss(&plus, &x) - loss(&minus, &x)) / (2.0 * FD_H);
                worst = worst.max(rel_err(fd, gb.data()[idx]));
            }
            for idx in 0..x.len() {
                let mut plus = x.clone();
                plus.data_mut()[idx] += FD_H;
                let mut minus = x.clone();
                minus.data_mut()[idx] -= FD_H;
                let fd = (loss(&layer, &plus) - loss(&layer, &minus)) / (2.0 * FD_H);
                worst = worst.max(rel_err(fd, gx.data()[idx]));
            }
            assert!(worst < 1e-4, "dense gradient relative error {worst}");
            done += 1;
        }
    }

    #[test]
    fn activation_fixed_points() {
        assert_eq!(ActivationKind::Sigmoid.scalar(0.0), 0.5);
        assert_eq!(ActivationKind::Tanh.scalar(0.0), 0.0);
        assert_eq!(ActivationKind::LeakyReLU(0.01).scalar(-2.0), -0.02);
        assert_eq!(ActivationKind::LeakyReLU(0.01).scalar(3.0), 3.0);
    }

    #[test]
    fn softmax_constant_row_is_uniform() {
        for c in [-40.0, 0.0, 17.5] {
            let z = Tensor::filled(vec![3], c);
            let s = ActivationKind::Softmax.apply(&z);
            for &v in s.data() {
                assert!((v - 1.0 / 3.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn softmax_matches_direct_formula() {
        let z = Tensor::from_vec(vec![1.0, 2.0, 3.0]).unwrap();
        let s = ActivationKind::Softmax.apply(&z);
        let denom: f64 = z.data().iter().map(|v| v.exp()).sum();
        for (got, zi) in s.data().iter().zip(z.data()) {
            assert!((got - zi.exp() / denom).abs() < 1e-12);
        }
        assert!((s.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_shift_invariant() {
        let z = Tensor::from_vec(vec![0.3, -1.2, 2.5, 0.0]).unwrap();
        let shifted = z.map(|v| v + 123.456);
        let a = ActivationKind::Softmax.apply(&z);
        let b = ActivationKind::Softmax.apply(&shifted);
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_probability_vector_on_random_inputs() {
        let mut rng = RngState::new(31);
        for _ in 0..1000 {
            let z = rng.sample_normal(vec![9], 0.0, 5.0).unwrap();
            let s = ActivationKind::Softmax.apply(&z);
            assert!(s.data().iter().all(|&v| v >= 0.0));
            assert!((s.data().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}
