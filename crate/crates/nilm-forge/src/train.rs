//! Loss functions, the Adam optimizer, the epoch loop, and the
//! finite-difference gradient-check harness.
//!
//! The loss gradient is fused with the output nonlinearity: for softmax +
//! categorical cross-entropy and for sigmoid + mean binary cross-entropy
//! the gradient w.r.t. the head logits is `(scores − label)` (divided by
//! K in the multi-label case). [`crate::model::hybrid_backward`] expects
//! exactly that vector, so the chain through `log` never materializes.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use crate::data::WindowDataset;
use crate::error::{Error, Result};
use crate::metrics::{accuracy, confusion, evaluate_model, ConfusionCounts};
use crate::model::{
    hybrid_backward, hybrid_forward, states_from_scores, HybridParams, OutputMode,
};
use crate::tensor::{RngState, Tensor};

/// Stream index separating epoch-shuffle draws from parameter
/// initialization draws on the same seed.
const SHUFFLE_STREAM: u64 = 0x53485546;

/// Loss value and the fused gradient w.r.t. the head logits.
///
/// Exclusive mode: categorical cross-entropy `−Σ y_i ln s_i` against a
/// one-hot label. Multi-label mode: mean binary cross-entropy. Labels
/// must be exact {0,1} vectors (one-hot in exclusive mode).
pub fn loss(mode: OutputMode, scores: &Tensor, label: &Tensor) -> Result<(f64, Tensor)> {
    if scores.shape() != label.shape() {
        return Err(Error::dim("loss", scores.shape(), label.shape()));
    }
    let legal_binary = label.data().iter().all(|&v| v == 0.0 || v == 1.0);
    if !legal_binary {
        return Err(Error::Argument(
            "label entries must be exactly 0 or 1".into(),
        ));
    }
    let k = label.len();
    match mode {
        OutputMode::Exclusive => {
            let ones = label.data().iter().filter(|&&v| v == 1.0).count();
            if ones != 1 {
                return Err(Error::Argument(format!(
                    "exclusive-mode label must be one-hot, found {ones} ones"
                )));
            }
            let mut value = 0.0;
            for (&s, &y) in scores.data().iter().zip(label.data()) {
                if y == 1.0 {
                    value -= s.max(1e-300).ln();
                }
            }
            let grad = scores.sub(label)?;
            Ok((value, grad))
        }
        OutputMode::MultiLabel => {
            let mut value = 0.0;
            for (&s, &y) in scores.data().iter().zip(label.data()) {
                let s = s.clamp(1e-12, 1.0 - 1e-12);
                value -= y * s.ln() + (1.0 - y) * (1.0 - s).ln();
            }
            value /= k as f64;
            let grad = scores.sub(label)?.map(|v| v / k as f64);
            Ok((value, grad))
        }
    }
}

/// Adam optimizer state: first and second moment tensors mirroring the
/// parameter shapes, plus the step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: HybridParams,
    v: HybridParams,
    step: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(params: &HybridParams, learning_rate: f64) -> AdamState {
        AdamState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update: `m ← β1·m + (1−β1)·g`, `v ← β2·v + (1−β2)·g²`,
    /// bias-corrected, then `θ ← θ − η·m̂/(√v̂ + ε)`.
    pub fn step(&mut self, params: &mut HybridParams, grads: &HybridParams) -> Result<()> {
        self.step += 1;
        let mut m_all = self.m.tensors_mut();
        let mut v_all = self.v.tensors_mut();
        let mut p_all = params.tensors_mut();
        let g_all = grads.tensors();
        if g_all.len() != p_all.len() {
            return Err(Error::dim("adam_step", &[g_all.len()], &[p_all.len()]));
        }
        for i in 0..p_all.len() {
            let (ref gname, ref gt) = g_all[i];
            let (ref pname, ref mut pt) = p_all[i];
            if gname != pname || gt.shape() != pt.shape() {
                return Err(Error::dim("adam_step tensor", gt.shape(), pt.shape()));
            }
            adam_update(
                pt.data_mut(),
                gt.data(),
                m_all[i].1.data_mut(),
                v_all[i].1.data_mut(),
                self.step,
                self.learning_rate,
                self.beta1,
                self.beta2,
                self.epsilon,
            );
        }
        Ok(())
    }
}

/// The per-tensor Adam kernel.
#[allow(clippy::too_many_arguments)]
fn adam_update(
    theta: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    step: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
) {
    let bc1 = 1.0 - beta1.powi(step as i32);
    let bc2 = 1.0 - beta2.powi(step as i32);
    for i in 0..theta.len() {
        m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i];
        v[i] = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i];
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        theta[i] -= lr * m_hat / (v_hat.sqrt() + epsilon);
    }
}

/// Add `other`'s tensors into `into`, elementwise.
pub fn accumulate_grads(into: &mut HybridParams, other: &HybridParams) {
    let mut dst = into.tensors_mut();
    let src = other.tensors();
    for i in 0..dst.len() {
        for (d, s) in dst[i].1.data_mut().iter_mut().zip(src[i].1.data()) {
            *d += s;
        }
    }
}

pub fn scale_grads(grads: &mut HybridParams, factor: f64) {
    for (_, t) in grads.tensors_mut() {
        for v in t.data_mut() {
            *v *= factor;
        }
    }
}

/// L2 norm over every gradient element.
pub fn global_norm(grads: &HybridParams) -> f64 {
    grads
        .tensors()
        .iter()
        .map(|(_, t)| t.data().iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Scale the whole gradient down to `max_norm` if it exceeds it; returns
/// the pre-clip norm.
pub fn clip_global_norm(grads: &mut HybridParams, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        scale_grads(grads, max_norm / norm);
    }
    norm
}

/// One row of training history.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
    pub seconds: f64,
}

/// Per-epoch records, exportable as CSV
/// (`epoch,train_loss,train_acc,test_acc,seconds`). The seconds column is
/// wall time and is the one non-deterministic field.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("epoch,train_loss,train_acc,test_acc,seconds\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.epoch, r.train_loss, r.train_acc, r.test_acc, r.seconds
            ));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv_string()).map_err(|e| Error::io(path, e))
    }

    /// The CSV with the wall-clock column masked, for determinism
    /// comparisons.
    pub fn to_csv_string_without_seconds(&self) -> String {
        let mut out = String::from("epoch,train_loss,train_acc,test_acc\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{}\n",
                r.epoch, r.train_loss, r.train_acc, r.test_acc
            ));
        }
        out
    }

    pub fn final_test_acc(&self) -> Option<f64> {
        self.records.last().map(|r| r.test_acc)
    }
}

/// Minibatch training loop: shuffle (seeded), forward, loss, backward,
/// clip, Adam step; per-epoch history with train accuracy measured on the
/// pre-update forward passes and test accuracy on a full evaluation pass.
/// Early-stops once train accuracy reaches `config.target_train_acc`, if
/// set. Erroring out on a non-finite loss names the epoch and batch.
pub fn fit(
    params: &mut HybridParams,
    train: &WindowDataset,
    test: &WindowDataset,
) -> Result<TrainHistory> {
    let cfg = params.config.clone();
    if train.is_empty() || test.is_empty() {
        return Err(Error::Argument("train and test sets must be nonempty".into()));
    }
    for (what, ds) in [("train", train), ("test", test)] {
        if ds.appliance_count() != cfg.appliance_count {
            return Err(Error::Config(format!(
                "{what} set has {} appliances, config expects {}",
                ds.appliance_count(),
                cfg.appliance_count
            )));
        }
        if ds.window_len() != cfg.window_len {
            return Err(Error::Config(format!(
                "{what} set window length {} does not match config {}",
                ds.window_len(),
                cfg.window_len
            )));
        }
    }

    let mut shuffle_rng = RngState::stream(cfg.seed, SHUFFLE_STREAM);
    let mut adam = AdamState::new(params, cfg.learning_rate);
    let mut history = TrainHistory::default();
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        shuffle_rng.shuffle(&mut order);
        let mut epoch_loss_sum = 0.0;
        let mut epoch_counts = ConfusionCounts::default();

        for (batch_idx, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut batch_grads = params.zeros_like();
            let mut batch_loss = 0.0;
            for &i in batch {
                let window = train.window(i);
                let label = train.label_tensor(i);
                let (scores, cache) = hybrid_forward(params, &window)?;
                let (value, grad_scores) = loss(cfg.output_mode, &scores, &label)?;
                batch_loss += value;
                let sample_grads = hybrid_backward(params, &cache, &grad_scores)?;
                accumulate_grads(&mut batch_grads, &sample_grads);

                let pred = states_from_scores(cfg.output_mode, &scores);
                let truth = train.label_row(i);
                epoch_counts.add(&confusion(&[pred], &[truth])?);
            }
            if !batch_loss.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    batch: batch_idx,
                });
            }
            epoch_loss_sum += batch_loss;
            scale_grads(&mut batch_grads, 1.0 / batch.len() as f64);
            clip_global_norm(&mut batch_grads, cfg.clip_norm);
            adam.step(params, &batch_grads)?;
        }

        let train_acc = accuracy(&epoch_counts)?;
        let test_acc = evaluate_model(params, test)?.acc;
        history.records.push(EpochRecord {
            epoch,
            train_loss: epoch_loss_sum / train.len() as f64,
            train_acc,
            test_acc,
            seconds: started.elapsed().as_secs_f64(),
        });
        if let Some(target) = cfg.target_train_acc {
            if train_acc >= target {
                break;
            }
        }
    }
    Ok(history)
}

/// Gradient-check report for one tensor.
#[derive(Debug, Clone)]
pub struct TensorCheck {
    pub name: String,
    pub coords_checked: usize,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.tensors.iter().all(|t| t.max_rel_err < self.tolerance)
    }

    pub fn worst(&self) -> f64 {
        self.tensors
            .iter()
            .map(|t| t.max_rel_err)
            .fold(0.0, f64::max)
    }

    pub fn failures(&self) -> Vec<&TensorCheck> {
        self.tensors
            .iter()
            .filter(|t| t.max_rel_err >= self.tolerance)
            .collect()
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for t in &self.tensors {
            writeln!(
                f,
                "{:24} coords {:5}  max rel err {:.3e}  {}",
                t.name,
                t.coords_checked,
                t.max_rel_err,
                if t.max_rel_err < self.tolerance { "ok" } else { "FAIL" }
            )?;
        }
        Ok(())
    }
}

/// Settings for [`gradient_check`]; the defaults pin h=1e-5, tol=1e-4,
/// and at least 200 sampled coordinates per tensor.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckSettings {
    pub h: f64,
    pub tolerance: f64,
    pub coords_per_tensor: usize,
    pub seed: u64,
}

impl Default for GradCheckSettings {
    fn default() -> Self {
        GradCheckSettings {
            h: 1e-5,
            tolerance: 1e-4,
            coords_per_tensor: 200,
            seed: 0,
        }
    }
}

/// Compare central finite differences of `loss_fn` against the supplied
/// analytic gradients on a random coordinate subsample (all coordinates
/// when a tensor is small enough). The report flags failures; it never
/// errors.
pub fn gradient_check<F>(
    mut loss_fn: F,
    params: &mut HybridParams,
    analytic: &HybridParams,
    settings: GradCheckSettings,
) -> GradCheckReport
where
    F: FnMut(&HybridParams) -> f64,
{
    let mut rng = RngState::new(settings.seed);
    let names: Vec<String> = params.tensors().iter().map(|(n, _)| n.clone()).collect();
    let analytic_data: BTreeMap<String, Vec<f64>> = analytic
        .tensors()
        .into_iter()
        .map(|(n, t)| (n, t.data().to_vec()))
        .collect();

    let mut tensors = Vec::new();
    for (ti, name) in names.iter().enumerate() {
        let len = params.tensors()[ti].1.len();
        let coords: Vec<usize> = if len <= settings.coords_per_tensor {
            (0..len).collect()
        } else {
            let mut all: Vec<usize> = (0..len).collect();
            rng.shuffle(&mut all);
            all.truncate(settings.coords_per_tensor);
            all
        };
        let an = &analytic_data[name];
        let mut max_rel_err: f64 = 0.0;
        for &idx in &coords {
            let original = params.tensors()[ti].1.data()[idx];
            params.tensors_mut()[ti].1.data_mut()[idx] = original + settings.h;
            let plus = loss_fn(params);
            params.tensors_mut()[ti].1.data_mut()[idx] = original - settings.h;
            let minus = loss_fn(params);
            params.tensors_mut()[ti].1.data_mut()[idx] = original;
            let fd = (plus - minus) / (2.0 * settings.h);
            let rel = (fd - an[idx]).abs() / fd.abs().max(an[idx].abs()).max(1e-6);
            max_rel_err = max_rel_err.max(rel);
        }
        tensors.push(TensorCheck {
            name: name.clone(),
            coords_checked: coords.len(),
            max_rel_err,
        });
    }
    GradCheckReport {
        tolerance: settings.tolerance,
        tensors,
    }
}
