//! The parallel CNN-LSTM classifier.
//!
//! Both branches consume the same normalized window. The CNN branch sees
//! it reshaped row-major into a square single-channel image and runs
//! conv → pool → conv → pool → flatten; the LSTM branch consumes the raw
//! sequence one sample per step and keeps the final hidden output. Each
//! branch projects to a common dimension through its mapping layer, the
//! projections are concatenated, and a dense head produces one score per
//! appliance — softmax in exclusive mode, sigmoid in multi-label mode.
//!
//! Single-branch reductions (`Arch::Cnn`, `Arch::Lstm`) drop the other
//! branch and feed the surviving mapping layer straight into the head;
//! they exist as ablation baselines.

use std::path::Path;

use crate::error::{Error, Result};
use crate::layers::{
    conv2d_backward, conv2d_forward, dense_backward, dense_forward, maxpool2d,
    maxpool2d_backward, ActivationKind, ConvCache, ConvLayer, DenseCache, DenseLayer, PoolCache,
};
use crate::lstm::{lstm_backward, lstm_sequence_forward, GateCache, LstmParams, LstmState};
use crate::tensor::{RngState, Tensor};

/// Slope of every LeakyReLU in the model.
pub const LEAKY_SLOPE: f64 = 0.01;

/// Checkpoint format version string.
pub const CHECKPOINT_VERSION: &str = "nilm-forge/1";
const CHECKPOINT_MAGIC: &[u8; 8] = b"NILMCKPT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputMode {
    /// Softmax head; exactly one appliance is predicted on.
    Exclusive,
    /// Sigmoid head; any subset of appliances may be on.
    MultiLabel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Cnn,
    Lstm,
    Hybrid,
}

impl std::str::FromStr for Arch {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cnn" => Ok(Arch::Cnn),
            "lstm" => Ok(Arch::Lstm),
            "hybrid" => Ok(Arch::Hybrid),
            other => Err(Error::Argument(format!(
                "unknown arch {other:?} (expected cnn, lstm, or hybrid)"
            ))),
        }
    }
}

impl std::str::FromStr for OutputMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exclusive" => Ok(OutputMode::Exclusive),
            "multilabel" => Ok(OutputMode::MultiLabel),
            other => Err(Error::Argument(format!(
                "unknown output mode {other:?} (expected exclusive or multilabel)"
            ))),
        }
    }
}

/// Full hyperparameter record. The defaults are the reference settings:
/// 3×3 kernels at stride 1, 64 then 128 kernels, 64 hidden neurons,
/// Adam at 1e-4, 200 iterations.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Input window length; must be a perfect square so the CNN branch
    /// can fold it into an image.
    pub window_len: usize,
    pub appliance_count: usize,
    pub conv1_kernels: usize,
    pub conv2_kernels: usize,
    pub kernel_size: usize,
    pub stride: usize,
    pub lstm_hidden: usize,
    /// Width both mapping layers project to before concatenation.
    pub map_dim: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub output_mode: OutputMode,
    pub arch: Arch,
    /// Global-norm gradient clip applied before each optimizer step.
    pub clip_norm: f64,
    /// Optional early-stop gate: stop once train accuracy reaches this.
    pub target_train_acc: Option<f64>,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            window_len: 100,
            appliance_count: 9,
            conv1_kernels: 64,
            conv2_kernels: 128,
            kernel_size: 3,
            stride: 1,
            lstm_hidden: 64,
            map_dim: 64,
            learning_rate: 1e-4,
            epochs: 200,
            batch_size: 32,
            output_mode: OutputMode::Exclusive,
            arch: Arch::Hybrid,
            clip_norm: 5.0,
            target_train_acc: None,
            seed: 0,
        }
    }
}

/// Spatial extents of the CNN branch, derived purely from the config.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShapePlan {
    pub side: usize,
    pub conv1_out: usize,
    pub pool1_out: usize,
    pub conv2_out: usize,
    pub pool2_out: usize,
    pub flat: usize,
}

/// Validate a config and compute the CNN extent chain.
pub fn plan_shapes(config: &ModelConfig) -> Result<ShapePlan> {
    for (name, v) in [
        ("window_len", config.window_len),
        ("appliance_count", config.appliance_count),
        ("conv1_kernels", config.conv1_kernels),
        ("conv2_kernels", config.conv2_kernels),
        ("kernel_size", config.kernel_size),
        ("stride", config.stride),
        ("lstm_hidden", config.lstm_hidden),
        ("map_dim", config.map_dim),
        ("batch_size", config.batch_size),
    ] {
        if v == 0 {
            return Err(Error::Config(format!("{name} must be positive")));
        }
    }
    let side = (config.window_len as f64).sqrt().round() as usize;
    if side * side != config.window_len {
        return Err(Error::Config(format!(
            "window_len {} is not a perfect square",
            config.window_len
        )));
    }
    let chain = |w: usize| -> Result<usize> {
        crate::layers::conv_output_size(w, config.kernel_size, 0, config.stride)
            .map_err(|e| Error::Config(format!("CNN extent chain infeasible: {e}")))
    };
    let conv1_out = chain(side)?;
    let pool1_out = conv1_out.div_ceil(2);
    let conv2_out = chain(pool1_out)?;
    let pool2_out = conv2_out.div_ceil(2);
    Ok(ShapePlan {
        side,
        conv1_out,
        pool1_out,
        conv2_out,
        pool2_out,
        flat: config.conv2_kernels * pool2_out * pool2_out,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CnnBranch {
    pub conv1: ConvLayer,
    pub conv2: ConvLayer,
    pub map: DenseLayer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmBranch {
    pub cell: LstmParams,
    pub map: DenseLayer,
}

/// All learnable parameters, addressable per layer for the optimizer,
/// checkpoints, and gradient checking. Gradient bundles reuse this type
/// (same shapes, gradient values).
#[derive(Debug, Clone, PartialEq)]
pub struct HybridParams {
    pub config: ModelConfig,
    pub cnn: Option<CnnBranch>,
    pub lstm: Option<LstmBranch>,
    pub head: DenseLayer,
}

/// Initialize a model from its config: Kaiming draws for weights, zero
/// biases, drawn in a fixed order so the result is a pure function of
/// the seed.
pub fn build_model(config: &ModelConfig, rng: &mut RngState) -> Result<HybridParams> {
    let plan = plan_shapes(config)?;
    let leaky = ActivationKind::LeakyReLU(LEAKY_SLOPE);

    let cnn = match config.arch {
        Arch::Cnn | Arch::Hybrid => Some(CnnBranch {
            conv1: ConvLayer::kaiming(
                config.conv1_kernels,
                1,
                config.kernel_size,
                config.stride,
                0,
                leaky,
                rng,
            )?,
            conv2: ConvLayer::kaiming(
                config.conv2_kernels,
                config.conv1_kernels,
                config.kernel_size,
                config.stride,
                0,
                leaky,
                rng,
            )?,
            map: DenseLayer::kaiming(config.map_dim, plan.flat, leaky, rng)?,
        }),
        Arch::Lstm => None,
    };
    let lstm = match config.arch {
        Arch::Lstm | Arch::Hybrid => Some(LstmBranch {
            cell: LstmParams::kaiming(config.lstm_hidden, 1, rng)?,
            map: DenseLayer::kaiming(config.map_dim, config.lstm_hidden, leaky, rng)?,
        }),
        Arch::Cnn => None,
    };
    let head_in = match config.arch {
        Arch::Hybrid => 2 * config.map_dim,
        _ => config.map_dim,
    };
    let head = DenseLayer::kaiming(config.appliance_count, head_in, ActivationKind::Identity, rng)?;
    Ok(HybridParams {
        config: config.clone(),
        cnn,
        lstm,
        head,
    })
}

impl HybridParams {
    /// Same structure with every tensor zeroed; the container for
    /// gradients and optimizer moments.
    pub fn zeros_like(&self) -> HybridParams {
        let mut out = self.clone();
        for (_, t) in out.tensors_mut() {
            t.data_mut().fill(0.0);
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Named views of every parameter tensor, in a fixed traversal order.
    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = Vec::new();
        if let Some(cnn) = &self.cnn {
            out.push(("cnn.conv1.kernels".into(), &cnn.conv1.kernels));
            out.push(("cnn.conv1.bias".into(), &cnn.conv1.bias));
            out.push(("cnn.conv2.kernels".into(), &cnn.conv2.kernels));
            out.push(("cnn.conv2.bias".into(), &cnn.conv2.bias));
            out.push(("cnn.map.weights".into(), &cnn.map.weights));
            out.push(("cnn.map.bias".into(), &cnn.map.bias));
        }
        if let Some(lstm) = &self.lstm {
            out.push(("lstm.w_forget".into(), &lstm.cell.w_forget));
            out.push(("lstm.b_forget".into(), &lstm.cell.b_forget));
            out.push(("lstm.w_input".into(), &lstm.cell.w_input));
            out.push(("lstm.b_input".into(), &lstm.cell.b_input));
            out.push(("lstm.w_candidate".into(), &lstm.cell.w_candidate));
            out.push(("lstm.b_candidate".into(), &lstm.cell.b_candidate));
            out.push(("lstm.w_output".into(), &lstm.cell.w_output));
            out.push(("lstm.b_output".into(), &lstm.cell.b_output));
            out.push(("lstm.map.weights".into(), &lstm.map.weights));
            out.push(("lstm.map.bias".into(), &lstm.map.bias));
        }
        out.push(("head.weights".into(), &self.head.weights));
        out.push(("head.bias".into(), &self.head.bias));
        out
    }

    /// Mutable counterpart of [`HybridParams::tensors`], same order.
    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = Vec::new();
        if let Some(cnn) = &mut self.cnn {
            out.push(("cnn.conv1.kernels".into(), &mut cnn.conv1.kernels));
            out.push(("cnn.conv1.bias".into(), &mut cnn.conv1.bias));
            out.push(("cnn.conv2.kernels".into(), &mut cnn.conv2.kernels));
            out.push(("cnn.conv2.bias".into(), &mut cnn.conv2.bias));
            out.push(("cnn.map.weights".into(), &mut cnn.map.weights));
            out.push(("cnn.map.bias".into(), &mut cnn.map.bias));
        }
        if let Some(lstm) = &mut self.lstm {
            out.push(("lstm.w_forget".into(), &mut lstm.cell.w_forget));
            out.push(("lstm.b_forget".into(), &mut lstm.cell.b_forget));
            out.push(("lstm.w_input".into(), &mut lstm.cell.w_input));
            out.push(("lstm.b_input".into(), &mut lstm.cell.b_input));
            out.push(("lstm.w_candidate".into(), &mut lstm.cell.w_candidate));
            out.push(("lstm.b_candidate".into(), &mut lstm.cell.b_candidate));
            out.push(("lstm.w_output".into(), &mut lstm.cell.w_output));
            out.push(("lstm.b_output".into(), &mut lstm.cell.b_output));
            out.push(("lstm.map.weights".into(), &mut lstm.map.weights));
            out.push(("lstm.map.bias".into(), &mut lstm.map.bias));
        }
        out.push(("head.weights".into(), &mut self.head.weights));
        out.push(("head.bias".into(), &mut self.head.bias));
        out
    }
}

struct CnnCache {
    conv1: ConvCache,
    pool1: PoolCache,
    conv2: ConvCache,
    pool2: PoolCache,
    map: DenseCache,
}

struct LstmSeqCache {
    steps: Vec<GateCache>,
    map: DenseCache,
    hidden_dim: usize,
}

/// Forward cache; `logits` are the head's pre-nonlinearity values and
/// `scores` the softmax/sigmoid outputs.
pub struct HybridCache {
    cnn: Option<CnnCache>,
    lstm: Option<LstmSeqCache>,
    head: DenseCache,
    pub logits: Tensor,
    pub scores: Tensor,
}

pub fn hybrid_forward(params: &HybridParams, window: &Tensor) -> Result<(Tensor, HybridCache)> {
    let cfg = &params.config;
    if window.shape() != [cfg.window_len] {
        return Err(Error::dim(
            "hybrid_forward window",
            window.shape(),
            &[cfg.window_len],
        ));
    }
    let mut features: Vec<f64> = Vec::with_capacity(2 * cfg.map_dim);

    let cnn_cache = match &params.cnn {
        Some(cnn) => {
            let side = (cfg.window_len as f64).sqrt().round() as usize;
            let image = window.clone().reshape(vec![1, side, side])?;
            let (a1, conv1) = conv2d_forward(&cnn.conv1, &image)?;
            let (p1, pool1) = maxpool2d(&a1)?;
            let (a2, conv2) = conv2d_forward(&cnn.conv2, &p1)?;
            let (p2, pool2) = maxpool2d(&a2)?;
            let flat = p2.clone().reshape(vec![p2.len()])?;
            let (feat, map) = dense_forward(&cnn.map, &flat)?;
            features.extend_from_slice(feat.data());
            Some(CnnCache {
                conv1,
                pool1,
                conv2,
                pool2,
                map,
            })
        }
        None => None,
    };
    let lstm_cache = match &params.lstm {
        Some(lstm) => {
            let seq = window.clone().reshape(vec![cfg.window_len, 1])?;
            let hidden_dim = lstm.cell.hidden_dim();
            let (d_seq, steps) =
                lstm_sequence_forward(&lstm.cell, &seq, &LstmState::zeros(hidden_dim))?;
            let last = Tensor::from_raw(
                vec![hidden_dim],
                d_seq.data()[(cfg.window_len - 1) * hidden_dim..].to_vec(),
            );
            let (feat, map) = dense_forward(&lstm.map, &last)?;
            features.extend_from_slice(feat.data());
            Some(LstmSeqCache {
                steps,
                map,
                hidden_dim,
            })
        }
        None => None,
    };

    let concat = Tensor::from_raw(vec![features.len()], features);
    let (logits, head) = dense_forward(&params.head, &concat)?;
    let scores = match cfg.output_mode {
        OutputMode::Exclusive => ActivationKind::Softmax.apply(&logits),
        OutputMode::MultiLabel => ActivationKind::Sigmoid.apply(&logits),
    };
    Ok((
        scores.clone(),
        HybridCache {
            cnn: cnn_cache,
            lstm: lstm_cache,
            head,
            logits,
            scores,
        },
    ))
}

/// Exact reverse of [`hybrid_forward`]. `grad_scores` follows the fused
/// convention: it is the loss gradient w.r.t. the head's pre-nonlinearity
/// logits, as produced by [`crate::train::loss`]. Returns a params-shaped
/// gradient bundle.
pub fn hybrid_backward(
    params: &HybridParams,
    cache: &HybridCache,
    grad_scores: &Tensor,
) -> Result<HybridParams> {
    let cfg = &params.config;
    if grad_scores.shape() != [cfg.appliance_count] {
        return Err(Error::dim(
            "hybrid_backward grad_scores",
            grad_scores.shape(),
            &[cfg.appliance_count],
        ));
    }
    let mut grads = params.zeros_like();

    let (grad_concat, grad_head_w, grad_head_b) =
        dense_backward(&params.head, &cache.head, grad_scores)?;
    grads.head.weights = grad_head_w;
    grads.head.bias = grad_head_b;

    let mut offset = 0;
    if let (Some(cnn), Some(cnn_cache)) = (&params.cnn, &cache.cnn) {
        let grad_feat = Tensor::from_raw(
            vec![cfg.map_dim],
            grad_concat.data()[offset..offset + cfg.map_dim].to_vec(),
        );
        offset += cfg.map_dim;
        let (grad_flat, grad_map_w, grad_map_b) =
            dense_backward(&cnn.map, &cnn_cache.map, &grad_feat)?;
        let grad_p2 = grad_flat.reshape(cnn_cache.pool2.out_shape.clone())?;
        let grad_a2 = maxpool2d_backward(&cnn_cache.pool2, &grad_p2)?;
        let (grad_p1, grad_k2, grad_b2) = conv2d_backward(&cnn.conv2, &cnn_cache.conv2, &grad_a2)?;
        let grad_a1 = maxpool2d_backward(&cnn_cache.pool1, &grad_p1)?;
        let (_, grad_k1, grad_b1) = conv2d_backward(&cnn.conv1, &cnn_cache.conv1, &grad_a1)?;
        let branch = grads.cnn.as_mut().expect("grads mirror params");
        branch.conv1.kernels = grad_k1;
        branch.conv1.bias = grad_b1;
        branch.conv2.kernels = grad_k2;
        branch.conv2.bias = grad_b2;
        branch.map.weights = grad_map_w;
        branch.map.bias = grad_map_b;
    }
    if let (Some(lstm), Some(lstm_cache)) = (&params.lstm, &cache.lstm) {
        let grad_feat = Tensor::from_raw(
            vec![cfg.map_dim],
            grad_concat.data()[offset..offset + cfg.map_dim].to_vec(),
        );
        let (grad_last, grad_map_w, grad_map_b) =
            dense_backward(&lstm.map, &lstm_cache.map, &grad_feat)?;
        // Sequence-to-one: only the final step's hidden output feeds the
        // mapping layer, so earlier rows get zero gradient.
        let steps = lstm_cache.steps.len();
        let hidden = lstm_cache.hidden_dim;
        let mut grad_d_seq = vec![0.0; steps * hidden];
        grad_d_seq[(steps - 1) * hidden..].copy_from_slice(grad_last.data());
        let grad_d_seq = Tensor::from_raw(vec![steps, hidden], grad_d_seq);
        let (cell_grads, _) = lstm_backward(&lstm.cell, &lstm_cache.steps, &grad_d_seq)?;
        let branch = grads.lstm.as_mut().expect("grads mirror params");
        branch.cell = cell_grads;
        branch.map.weights = grad_map_w;
        branch.map.bias = grad_map_b;
    }
    Ok(grads)
}

/// Binary on/off decision per appliance from a score vector.
/// Exclusive mode: one-hot at the argmax, ties to the lowest index.
/// Multi-label mode: elementwise threshold, on iff score > 0.5.
pub fn states_from_scores(mode: OutputMode, scores: &Tensor) -> Vec<u8> {
    match mode {
        OutputMode::Exclusive => {
            let mut best = 0;
            for (i, &v) in scores.data().iter().enumerate() {
                if v > scores.data()[best] {
                    best = i;
                }
            }
            (0..scores.len()).map(|i| u8::from(i == best)).collect()
        }
        OutputMode::MultiLabel => scores.data().iter().map(|&v| u8::from(v > 0.5)).collect(),
    }
}

pub fn predict_states(params: &HybridParams, window: &Tensor) -> Result<Vec<u8>> {
    let (scores, _) = hybrid_forward(params, window)?;
    Ok(states_from_scores(params.config.output_mode, &scores))
}

// --- checkpoint format -------------------------------------------------
//
// Binary, little-endian, in this exact order:
//
//   magic    8 bytes "NILMCKPT"
//   version  u32 length + that many UTF-8 bytes ("nilm-forge/1")
//   config   u32 length + that many bytes of config JSON
//   count    u32 number of tensors
//   tensor   u32 name length + name bytes
//            u32 rank + rank × u64 extents
//            product(extents) × f64 payload, row-major
//
// Tensors appear in the fixed traversal order of `HybridParams::tensors`.

pub fn checkpoint_to_bytes(params: &HybridParams) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    let push_block = |out: &mut Vec<u8>, bytes: &[u8]| {
        out.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
        out.extend_from_slice(bytes);
    };
    push_block(&mut out, CHECKPOINT_VERSION.as_bytes());
    let config_json = serde_json::to_string(&params.config)
        .map_err(|e| Error::Checkpoint(format!("config serialization failed: {e}")))?;
    push_block(&mut out, config_json.as_bytes());
    let tensors = params.tensors();
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        push_block(&mut out, name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<HybridParams> {
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    let take_u32 =
        |pos: &mut usize| -> Result<u32> { Ok(u32::from_le_bytes(take(pos, 4)?.try_into().unwrap())) };
    if take(&mut pos, 8)? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic; not a checkpoint file".into()));
    }
    let vlen = take_u32(&mut pos)? as usize;
    let version = std::str::from_utf8(take(&mut pos, vlen)?)
        .map_err(|_| Error::Checkpoint("version is not UTF-8".into()))?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version:?} (expected {CHECKPOINT_VERSION:?})"
        )));
    }
    let clen = take_u32(&mut pos)? as usize;
    let config: ModelConfig = serde_json::from_slice(take(&mut pos, clen)?)
        .map_err(|e| Error::Checkpoint(format!("bad config block: {e}")))?;

    // Rebuild the structure, then fill tensors in traversal order.
    let mut rng = RngState::new(config.seed);
    let mut params = build_model(&config, &mut rng)?;
    let count = take_u32(&mut pos)? as usize;
    {
        let mut slots = params.tensors_mut();
        if count != slots.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {count} tensors, config implies {}",
                slots.len()
            )));
        }
        for (name, slot) in slots.iter_mut() {
            let nlen = take_u32(&mut pos)? as usize;
            let fname = std::str::from_utf8(take(&mut pos, nlen)?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            if fname != name {
                return Err(Error::Checkpoint(format!(
                    "tensor order mismatch: found {fname:?}, expected {name:?}"
                )));
            }
            let rank = take_u32(&mut pos)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize);
            }
            if shape != slot.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} shape {shape:?} does not match config shape {:?}",
                    slot.shape()
                )));
            }
            let n: usize = shape.iter().product();
            let raw = take(&mut pos, n * 8)?;
            let data: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            **slot = Tensor::new(shape, data)
                .map_err(|e| Error::Checkpoint(format!("tensor {name}: {e}")))?;
        }
    }
    if pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after last tensor".into()));
    }
    Ok(params)
}

pub fn save_checkpoint(params: &HybridParams, path: &Path) -> Result<()> {
    std::fs::write(path, checkpoint_to_bytes(params)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<HybridParams> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shrunken_config() -> ModelConfig {
        ModelConfig {
            window_len: 16,
            appliance_count: 3,
            conv1_kernels: 2,
            conv2_kernels: 3,
            kernel_size: 2,
            lstm_hidden: 4,
            map_dim: 4,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn default_config_matches_reference_settings() {
        let c = ModelConfig::default();
        assert_eq!(c.kernel_size, 3);
        assert_eq!(c.conv1_kernels, 64);
        assert_eq!(c.conv2_kernels, 128);
        assert_eq!(c.stride, 1);
        assert_eq!(c.lstm_hidden, 64);
        assert_eq!(c.learning_rate, 1e-4);
        assert_eq!(c.epochs, 200);
    }

    #[test]
    fn default_shape_chain() {
        let plan = plan_shapes(&ModelConfig::default()).unwrap();
        assert_eq!(plan.side, 10);
        assert_eq!(plan.conv1_out, 8);
        assert_eq!(plan.pool1_out, 4);
        assert_eq!(plan.conv2_out, 2);
        assert_eq!(plan.pool2_out, 1);
        assert_eq!(plan.flat, 128);
        let mut rng = RngState::new(0);
        let p = build_model(&ModelConfig::default(), &mut rng).unwrap();
        let cnn = p.cnn.as_ref().unwrap();
        assert_eq!(cnn.conv1.kernels.shape(), &[64, 1, 3, 3]);
        assert_eq!(cnn.conv2.kernels.shape(), &[128, 64, 3, 3]);
        assert_eq!(cnn.map.in_dim(), 128);
        assert_eq!(p.head.in_dim(), 128); // 2 × map_dim
    }

    #[test]
    fn same_seed_same_params() {
        let cfg = shrunken_config();
        let a = build_model(&cfg, &mut RngState::new(5)).unwrap();
        let b = build_model(&cfg, &mut RngState::new(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn non_square_window_rejected() {
        let cfg = ModelConfig {
            window_len: 50,
            ..ModelConfig::default()
        };
        assert!(matches!(plan_shapes(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn zero_extent_rejected() {
        let cfg = ModelConfig {
            map_dim: 0,
            ..ModelConfig::default()
        };
        assert!(matches!(plan_shapes(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn softmax_scores_sum_to_one() {
        let cfg = shrunken_config();
        let p = build_model(&cfg, &mut RngState::new(3)).unwrap();
        let mut rng = RngState::new(4);
        for _ in 0..10 {
            let w = rng.sample_normal(vec![16], 0.5, 0.3).unwrap();
            let (scores, _) = hybrid_forward(&p, &w).unwrap();
            assert!((scores.data().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_params_give_uniform_scores() {
        let cfg = shrunken_config();
        let p = build_model(&cfg, &mut RngState::new(3)).unwrap().zeros_like();
        let w = Tensor::filled(vec![16], 0.7);
        let (scores, _) = hybrid_forward(&p, &w).unwrap();
        for &s in scores.data() {
            assert!((s - 1.0 / 3.0).abs() < 1e-12);
        }
        assert_eq!(predict_states(&p, &w).unwrap(), vec![1, 0, 0]);
    }

    #[test]
    fn forward_is_bitwise_deterministic() {
        let cfg = shrunken_config();
        let p = build_model(&cfg, &mut RngState::new(9)).unwrap();
        let w = RngState::new(1).sample_normal(vec![16], 0.0, 1.0).unwrap();
        let (a, _) = hybrid_forward(&p, &w).unwrap();
        let (b, _) = hybrid_forward(&p, &w).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn window_length_mismatch() {
        let cfg = shrunken_config();
        let p = build_model(&cfg, &mut RngState::new(9)).unwrap();
        let w = Tensor::zeros(vec![25]);
        assert!(matches!(
            hybrid_forward(&p, &w),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn states_from_scores_examples() {
        let argmax = states_from_scores(
            OutputMode::Exclusive,
            &Tensor::from_vec(vec![0.1, 0.7, 0.2]).unwrap(),
        );
        assert_eq!(argmax, vec![0, 1, 0]);
        let multi = states_from_scores(
            OutputMode::MultiLabel,
            &Tensor::from_vec(vec![0.49, 0.51]).unwrap(),
        );
        assert_eq!(multi, vec![0, 1]);
        let tie = states_from_scores(
            OutputMode::Exclusive,
            &Tensor::from_vec(vec![0.25, 0.25, 0.25, 0.25]).unwrap(),
        );
        assert_eq!(tie, vec![1, 0, 0, 0]);
    }

    #[test]
    fn zero_grad_scores_give_zero_grads() {
        let cfg = shrunken_config();
        let p = build_model(&cfg, &mut RngState::new(21)).unwrap();
        let w = RngState::new(2).sample_normal(vec![16], 0.0, 1.0).unwrap();
        let (_, cache) = hybrid_forward(&p, &w).unwrap();
        let grads = hybrid_backward(&p, &cache, &Tensor::zeros(vec![3])).unwrap();
        for (name, t) in grads.tensors() {
            assert!(t.data().iter().all(|&v| v == 0.0), "{name} not zero");
        }
    }

    #[test]
    fn gradient_respects_branch_split() {
        // Zero the head columns that read one branch's mapping output and
        // the gradient into that branch must vanish.
        let cfg = shrunken_config();
        let base = build_model(&cfg, &mut RngState::new(33)).unwrap();
        let w = RngState::new(3).sample_normal(vec![16], 0.5, 0.2).unwrap();
        let grad = Tensor::from_vec(vec![1.0, -0.5, 0.25]).unwrap();

        let mut cnn_only_head = base.clone();
        for row in 0..cfg.appliance_count {
            for col in cfg.map_dim..2 * cfg.map_dim {
                cnn_only_head.head.weights.data_mut()[row * 2 * cfg.map_dim + col] = 0.0;
            }
        }
        let (_, cache) = hybrid_forward(&cnn_only_head, &w).unwrap();
        let grads = hybrid_backward(&cnn_only_head, &cache, &grad).unwrap();
        let lstm = grads.lstm.as_ref().unwrap();
        assert!(lstm.cell.w_forget.data().iter().all(|&v| v == 0.0));
        assert!(lstm.map.weights.data().iter().all(|&v| v == 0.0));
        let cnn = grads.cnn.as_ref().unwrap();
        assert!(cnn.conv1.kernels.data().iter().any(|&v| v != 0.0));

        let mut lstm_only_head = base.clone();
        for row in 0..cfg.appliance_count {
            for col in 0..cfg.map_dim {
                lstm_only_head.head.weights.data_mut()[row * 2 * cfg.map_dim + col] = 0.0;
            }
        }
        let (_, cache) = hybrid_forward(&lstm_only_head, &w).unwrap();
        let grads = hybrid_backward(&lstm_only_head, &cache, &grad).unwrap();
        let cnn = grads.cnn.as_ref().unwrap();
        assert!(cnn.conv1.kernels.data().iter().all(|&v| v == 0.0));
        assert!(cnn.map.weights.data().iter().all(|&v| v == 0.0));
        let lstm = grads.lstm.as_ref().unwrap();
        assert!(lstm.map.weights.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn permuting_head_rows_permutes_predictions() {
        let cfg = shrunken_config();
        let base = build_model(&cfg, &mut RngState::new(55)).unwrap();
        let w = RngState::new(6).sample_normal(vec![16], 0.5, 0.2).unwrap();
        let (scores, _) = hybrid_forward(&base, &w).unwrap();

        let perm = [2usize, 0, 1];
        let mut permuted = base.clone();
        let in_dim = base.head.in_dim();
        for (new_row, &old_row) in perm.iter().enumerate() {
            for col in 0..in_dim {
                permuted.head.weights.data_mut()[new_row * in_dim + col] =
                    base.head.weights.data()[old_row * in_dim + col];
            }
            permuted.head.bias.data_mut()[new_row] = base.head.bias.data()[old_row];
        }
        let (scores_p, _) = hybrid_forward(&permuted, &w).unwrap();
        for (new_row, &old_row) in perm.iter().enumerate() {
            assert!((scores_p.data()[new_row] - scores.data()[old_row]).abs() < 1e-12);
        }
        let pred = predict_states(&base, &w).unwrap();
        let pred_p = predict_states(&permuted, &w).unwrap();
        for (new_row, &old_row) in perm.iter().enumerate() {
            assert_eq!(pred_p[new_row], pred[old_row]);
        }
    }

    #[test]
    fn single_branch_archs_forward_and_backward() {
        for arch in [Arch::Cnn, Arch::Lstm] {
            let cfg = ModelConfig {
                arch,
                ..shrunken_config()
            };
            let p = build_model(&cfg, &mut RngState::new(5)).unwrap();
            assert_eq!(p.head.in_dim(), cfg.map_dim);
            let w = RngState::new(7).sample_normal(vec![16], 0.5, 0.2).unwrap();
            let (scores, cache) = hybrid_forward(&p, &w).unwrap();
            assert!((scores.data().iter().sum::<f64>() - 1.0).abs() < 1e-9);
            let grads =
                hybrid_backward(&p, &cache, &Tensor::from_vec(vec![0.5, -0.2, 0.1]).unwrap())
                    .unwrap();
            assert_eq!(grads.param_count(), p.param_count());
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let cfg = shrunken_config();
        let p = build_model(&cfg, &mut RngState::new(123)).unwrap();
        let bytes = checkpoint_to_bytes(&p).unwrap();
        let q = checkpoint_from_bytes(&bytes).unwrap();
        assert_eq!(p, q);
        // and the re-serialization is byte-identical
        assert_eq!(bytes, checkpoint_to_bytes(&q).unwrap());
    }

    #[test]
    fn checkpoint_rejects_corruption() {
        let cfg = shrunken_config();
        let p = build_model(&cfg, &mut RngState::new(123)).unwrap();
        let mut bytes = checkpoint_to_bytes(&p).unwrap();
        assert!(checkpoint_from_bytes(&bytes[..bytes.len() - 4]).is_err());
        bytes[0] = b'X';
        assert!(checkpoint_from_bytes(&bytes).is_err());
    }

    /// Full-model finite-difference check on the shrunken config, using a
    /// probe loss on the logits so the analytic path is the plain
    /// backward pass.
    #[test]
    fn full_model_gradients_match_finite_differences() {
        let h = 1e-5;
        let cfg = shrunken_config();
        let mut rng = RngState::new(2025);
        let params = build_model(&cfg, &mut rng).unwrap();
        let w = rng.sample_normal(vec![16], 0.5, 0.3).unwrap();
        let probe = rng.sample_normal(vec![3], 0.0, 1.0).unwrap();
        let loss = |p: &HybridParams| -> f64 {
            let (_, cache) = hybrid_forward(p, &w).unwrap();
            cache
                .logits
                .data()
                .iter()
                .zip(probe.data().iter())
                .map(|(l, q)| l * q)
                .sum()
        };
        let (_, cache) = hybrid_forward(&params, &w).unwrap();
        let grads = hybrid_backward(&params, &cache, &probe).unwrap();
        let analytic: Vec<(String, Vec<f64>)> = grads
            .tensors()
            .into_iter()
            .map(|(n, t)| (n, t.data().to_vec()))
            .collect();
        let mut worst: f64 = 0.0;
        for (ti, (name, an)) in analytic.iter().enumerate() {
            for idx in 0..an.len() {
                let mut plus = params.clone();
                plus.tensors_mut()[ti].1.data_mut()[idx] += h;
                let mut minus = params.clone();
                minus.tensors_mut()[ti].1.data_mut()[idx] -= h;
                let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
                let err = (fd - an[idx]).abs() / fd.abs().max(an[idx].abs()).max(1e-6);
                assert!(err < 1e-4, "{name}[{idx}]: fd {fd} vs analytic {}", an[idx]);
                worst = worst.max(err);
            }
        }
        assert!(worst < 1e-4);
    }
}
