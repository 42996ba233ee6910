//! Dataset ingestion and preparation: CSV loading, synthetic generation,
//! on/off label derivation, min-max normalization, windowing with a
//! temporal train/test split, and SNR-calibrated Gaussian noise
//! injection.
//!
//! The CSV schema is UTF-8 with a header row:
//! `timestamp,aggregate,<appliance_1>,...,<appliance_K>` — integer-second
//! timestamps, decimal watts. A dataset archive is a directory holding
//! `data.csv`, `labels.csv`, `norm.json`, and `meta.json`.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{RngState, Tensor};

/// Default per-appliance on threshold: anything above this is "on".
pub const DEFAULT_ON_THRESHOLD_WATTS: f64 = 10.0;

/// Raw uniform-rate meter recording: aggregate active power plus one
/// channel per appliance.
#[derive(Debug, Clone, PartialEq)]
pub struct RawMeterSeries {
    pub timestamps: Vec<i64>,
    pub aggregate: Vec<f64>,
    pub appliance_names: Vec<String>,
    /// K channels, each the same length as `aggregate`.
    pub per_appliance: Vec<Vec<f64>>,
}

impl RawMeterSeries {
    pub fn new(
        timestamps: Vec<i64>,
        aggregate: Vec<f64>,
        appliance_names: Vec<String>,
        per_appliance: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let n = timestamps.len();
        if aggregate.len() != n || per_appliance.iter().any(|c| c.len() != n) {
            return Err(Error::Argument(
                "all series columns must have equal length".into(),
            ));
        }
        if appliance_names.len() != per_appliance.len() {
            return Err(Error::Argument(
                "appliance names and channels disagree in count".into(),
            ));
        }
        if timestamps.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Argument(
                "timestamps must be strictly increasing".into(),
            ));
        }
        if aggregate.iter().any(|&v| v < 0.0)
            || per_appliance.iter().flatten().any(|&v| v < 0.0)
        {
            return Err(Error::Argument("power values must be non-negative".into()));
        }
        Ok(RawMeterSeries {
            timestamps,
            aggregate,
            appliance_names,
            per_appliance,
        })
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn appliance_count(&self) -> usize {
        self.per_appliance.len()
    }
}

/// Parse a meter CSV. Schema violations report the offending 1-based
/// line number.
pub fn load_csv(path: &Path) -> Result<RawMeterSeries> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::Parse {
            path: path.into(),
            line: 0,
            message: e.to_string(),
        })?;
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.into(),
        line,
        message,
    };

    let headers = reader
        .headers()
        .map_err(|e| parse_err(1, e.to_string()))?
        .clone();
    let cols: Vec<&str> = headers.iter().collect();
    if cols.len() < 2 || cols[0] != "timestamp" {
        return Err(parse_err(1, "first column must be `timestamp`".into()));
    }
    if cols[1] != "aggregate" {
        return Err(parse_err(1, "missing `aggregate` column in position 2".into()));
    }
    let appliance_names: Vec<String> = cols[2..].iter().map(|s| s.to_string()).collect();
    let k = appliance_names.len();

    let mut timestamps = Vec::new();
    let mut aggregate = Vec::new();
    let mut per_appliance: Vec<Vec<f64>> = vec![Vec::new(); k];
    let mut prev_ts: Option<i64> = None;
    for record in reader.records() {
        let record = record.map_err(|e| parse_err(0, e.to_string()))?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        if record.len() != 2 + k {
            return Err(parse_err(
                line,
                format!("expected {} fields, found {}", 2 + k, record.len()),
            ));
        }
        let ts: i64 = record[0]
            .trim()
            .parse()
            .map_err(|_| parse_err(line, format!("bad timestamp {:?}", &record[0])))?;
        if let Some(prev) = prev_ts {
            if ts <= prev {
                return Err(parse_err(
                    line,
                    format!("timestamp {ts} is not greater than previous {prev}"),
                ));
            }
        }
        prev_ts = Some(ts);
        timestamps.push(ts);
        let parse_power = |field: &str, what: &str| -> Result<f64> {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| parse_err(line, format!("bad value {field:?} in column {what}")))?;
            if !v.is_finite() || v < 0.0 {
                return Err(parse_err(
                    line,
                    format!("negative or non-finite power {v} in column {what}"),
                ));
            }
            Ok(v)
        };
        aggregate.push(parse_power(&record[1], "aggregate")?);
        for (i, name) in appliance_names.iter().enumerate() {
            per_appliance[i].push(parse_power(&record[2 + i], name)?);
        }
    }
    RawMeterSeries::new(timestamps, aggregate, appliance_names, per_appliance)
}

/// Write a series in the canonical schema; `load_csv(write_csv(s)) == s`.
pub fn write_csv(series: &RawMeterSeries, path: &Path) -> Result<()> {
    let mut out = String::new();
    out.push_str("timestamp,aggregate");
    for name in &series.appliance_names {
        out.push(',');
        out.push_str(name);
    }
    out.push('\n');
    for i in 0..series.len() {
        out.push_str(&series.timestamps[i].to_string());
        out.push(',');
        out.push_str(&series.aggregate[i].to_string());
        for channel in &series.per_appliance {
            out.push(',');
            out.push_str(&channel[i].to_string());
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Per-instant on/off labels: `label[t][k] = 1` iff appliance `k` draws
/// more than `thresholds[k]` watts at instant `t`. Returns an `N × K`
/// tensor of zeros and ones.
pub fn make_labels(series: &RawMeterSeries, thresholds: &[f64]) -> Result<Tensor> {
    let k = series.appliance_count();
    if thresholds.len() != k {
        return Err(Error::dim("make_labels thresholds", &[thresholds.len()], &[k]));
    }
    if thresholds.iter().any(|&t| t <= 0.0) {
        return Err(Error::Argument("on thresholds must be positive".into()));
    }
    let n = series.len();
    let mut data = vec![0.0; n * k];
    for (col, channel) in series.per_appliance.iter().enumerate() {
        for (t, &p) in channel.iter().enumerate() {
            if p > thresholds[col] {
                data[t * k + col] = 1.0;
            }
        }
    }
    Tensor::new(vec![n, k], data)
}

/// Min-max statistics recorded from training data only.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NormStats {
    pub min: f64,
    pub max: f64,
}

impl NormStats {
    pub fn normalize(&self, x: f64) -> f64 {
        (x - self.min) / (self.max - self.min)
    }

    pub fn denormalize(&self, x: f64) -> f64 {
        x * (self.max - self.min) + self.min
    }
}

/// Min-max normalize with statistics taken from the train slice only;
/// test values may leave [0, 1].
pub fn normalize(train: &[f64], test: &[f64]) -> Result<(Vec<f64>, Vec<f64>, NormStats)> {
    if train.is_empty() {
        return Err(Error::Argument("cannot normalize an empty train slice".into()));
    }
    let min = train.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = train.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == min {
        return Err(Error::ConstantSignal { value: min });
    }
    let stats = NormStats { min, max };
    Ok((
        train.iter().map(|&x| stats.normalize(x)).collect(),
        test.iter().map(|&x| stats.normalize(x)).collect(),
        stats,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Normalized non-overlapping windows paired with the label vector at
/// each window's final instant.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowDataset {
    /// N × L.
    pub windows: Tensor,
    /// N × K of {0, 1}.
    pub labels: Tensor,
    pub norm: NormStats,
    pub split: Split,
    pub appliance_names: Vec<String>,
}

impl WindowDataset {
    pub fn len(&self) -> usize {
        self.windows.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn window_len(&self) -> usize {
        self.windows.shape()[1]
    }

    pub fn appliance_count(&self) -> usize {
        self.labels.shape()[1]
    }

    pub fn window(&self, i: usize) -> Tensor {
        let l = self.window_len();
        Tensor::from_raw(vec![l], self.windows.data()[i * l..(i + 1) * l].to_vec())
    }

    pub fn label_row(&self, i: usize) -> Vec<u8> {
        let k = self.appliance_count();
        self.labels.data()[i * k..(i + 1) * k]
            .iter()
            .map(|&v| v as u8)
            .collect()
    }

    pub fn label_tensor(&self, i: usize) -> Tensor {
        let k = self.appliance_count();
        Tensor::from_raw(vec![k], self.labels.data()[i * k..(i + 1) * k].to_vec())
    }

    /// Replace the window tensor, keeping labels and metadata.
    pub fn with_windows(&self, windows: Tensor) -> Result<WindowDataset> {
        if windows.shape() != self.windows.shape() {
            return Err(Error::dim(
                "with_windows",
                windows.shape(),
                self.windows.shape(),
            ));
        }
        Ok(WindowDataset {
            windows,
            ..self.clone()
        })
    }
}

/// Temporal split at `train_len`, then non-overlapping windows of
/// `window_len` within each segment. The window label is the per-instant
/// label vector at the window's final sample. Normalization statistics
/// come from the train segment only.
pub fn window_and_split(
    series: &RawMeterSeries,
    labels: &Tensor,
    window_len: usize,
    train_len: usize,
    test_len: usize,
) -> Result<(WindowDataset, WindowDataset)> {
    if window_len == 0 || train_len == 0 || test_len == 0 {
        return Err(Error::Argument(
            "window_len, train_len, test_len must be positive".into(),
        ));
    }
    if series.len() < train_len + test_len {
        return Err(Error::Argument(format!(
            "series length {} is below the required minimum {} (train {} + test {})",
            series.len(),
            train_len + test_len,
            train_len,
            test_len
        )));
    }
    if labels.shape()[0] != series.len() {
        return Err(Error::dim(
            "window_and_split labels",
            labels.shape(),
            &[series.len()],
        ));
    }
    if window_len > train_len || window_len > test_len {
        return Err(Error::Argument(format!(
            "window_len {window_len} exceeds a split segment (train {train_len}, test {test_len})"
        )));
    }
    let k = labels.shape()[1];
    let (train_norm, test_norm, stats) = normalize(
        &series.aggregate[..train_len],
        &series.aggregate[train_len..train_len + test_len],
    )?;

    let build = |segment: &[f64], offset: usize, split: Split| -> WindowDataset {
        let count = segment.len() / window_len;
        let mut windows = Vec::with_capacity(count * window_len);
        let mut window_labels = Vec::with_capacity(count * k);
        for w in 0..count {
            windows.extend_from_slice(&segment[w * window_len..(w + 1) * window_len]);
            let end = offset + (w + 1) * window_len - 1;
            window_labels.extend_from_slice(&labels.data()[end * k..(end + 1) * k]);
        }
        WindowDataset {
            windows: Tensor::from_raw(vec![count, window_len], windows),
            labels: Tensor::from_raw(vec![count, k], window_labels),
            norm: stats,
            split,
            appliance_names: series.appliance_names.clone(),
        }
    };
    Ok((
        build(&train_norm, 0, Split::Train),
        build(&test_norm, train_len, Split::Test),
    ))
}

/// Add white Gaussian noise calibrated so that
/// `10·log10(signal_power / noise_variance) == snr_db`, with signal power
/// the mean square over the whole window tensor.
pub fn inject_noise(windows: &Tensor, snr_db: f64, rng: &mut RngState) -> Result<Tensor> {
    let n = windows.len() as f64;
    let power = windows.data().iter().map(|&v| v * v).sum::<f64>() / n;
    if power <= 0.0 {
        return Err(Error::Argument(
            "cannot inject noise into an all-zero signal".into(),
        ));
    }
    let variance = power / 10f64.powf(snr_db / 10.0);
    let std = variance.sqrt();
    let data = windows.data().iter().map(|&v| v + std * rng.normal()).collect();
    Ok(Tensor::from_raw(windows.shape().to_vec(), data))
}

/// Empirical SNR of `noisy` against `clean`, in dB.
pub fn measured_snr_db(clean: &Tensor, noisy: &Tensor) -> Result<f64> {
    if clean.shape() != noisy.shape() {
        return Err(Error::dim("measured_snr_db", clean.shape(), noisy.shape()));
    }
    let n = clean.len() as f64;
    let signal = clean.data().iter().map(|&v| v * v).sum::<f64>() / n;
    let noise = clean
        .data()
        .iter()
        .zip(noisy.data().iter())
        .map(|(&c, &y)| (y - c) * (y - c))
        .sum::<f64>()
        / n;
    if signal <= 0.0 || noise <= 0.0 {
        return Err(Error::Argument("SNR undefined for zero power".into()));
    }
    Ok(10.0 * (signal / noise).log10())
}

// --- synthetic generation ----------------------------------------------

/// Power profile during an on-bout.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum SignatureShape {
    Flat,
    /// Linear ramp from half power to full power across the bout.
    Ramp,
    /// Sinusoidal modulation with the given period in samples.
    Cyclic(usize),
}

impl std::str::FromStr for SignatureShape {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "flat" => Ok(SignatureShape::Flat),
            "ramp" => Ok(SignatureShape::Ramp),
            other => {
                if let Some(period) = other.strip_prefix("cyclic:") {
                    let period: usize = period
                        .parse()
                        .map_err(|_| Error::Argument(format!("bad cyclic period in {other:?}")))?;
                    if period == 0 {
                        return Err(Error::Argument("cyclic period must be positive".into()));
                    }
                    Ok(SignatureShape::Cyclic(period))
                } else {
                    Err(Error::Argument(format!(
                        "unknown shape {other:?} (expected flat, ramp, or cyclic:<period>)"
                    )))
                }
            }
        }
    }
}

impl TryFrom<String> for SignatureShape {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<SignatureShape> for String {
    fn from(s: SignatureShape) -> String {
        match s {
            SignatureShape::Flat => "flat".into(),
            SignatureShape::Ramp => "ramp".into(),
            SignatureShape::Cyclic(p) => format!("cyclic:{p}"),
        }
    }
}

impl SignatureShape {
    fn factor(&self, pos: usize, bout_len: usize) -> f64 {
        match self {
            SignatureShape::Flat => 1.0,
            SignatureShape::Ramp => 0.5 + 0.5 * pos as f64 / (bout_len.max(2) - 1) as f64,
            SignatureShape::Cyclic(period) => {
                1.0 + 0.5 * (2.0 * std::f64::consts::PI * pos as f64 / *period as f64).sin()
            }
        }
    }
}

/// One synthetic appliance. `duty_cycle` weights how often the appliance
/// runs (and degenerates to never-on at 0 and always-on at 1); bout
/// lengths draw from geometric distributions with the given means.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ApplianceSpec {
    pub name: String,
    pub on_power_mean: f64,
    #[serde(default)]
    pub on_power_jitter: f64,
    pub duty_cycle: f64,
    pub mean_on_duration: usize,
    pub mean_off_duration: usize,
    #[serde(default = "default_shape")]
    pub shape: SignatureShape,
}

fn default_shape() -> SignatureShape {
    SignatureShape::Flat
}

impl ApplianceSpec {
    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(',') {
            return Err(Error::Argument(format!("bad appliance name {:?}", self.name)));
        }
        if self.on_power_mean <= 0.0 {
            return Err(Error::Argument(format!(
                "appliance {}: on_power_mean must be positive",
                self.name
            )));
        }
        if self.on_power_jitter < 0.0 {
            return Err(Error::Argument(format!(
                "appliance {}: on_power_jitter must be non-negative",
                self.name
            )));
        }
        if !(0.0..=1.0).contains(&self.duty_cycle) {
            return Err(Error::Argument(format!(
                "appliance {}: duty_cycle {} outside [0, 1]",
                self.name, self.duty_cycle
            )));
        }
        if self.mean_on_duration == 0 || self.mean_off_duration == 0 {
            return Err(Error::Argument(format!(
                "appliance {}: bout durations must be >= 1",
                self.name
            )));
        }
        Ok(())
    }
}

/// Whole-dataset generation spec, loadable from a TOML file.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SynthSpec {
    #[serde(default)]
    pub baseline_watts: f64,
    /// Schedule at most one appliance on per instant (gapless bouts), so
    /// every instant has exactly one appliance running.
    #[serde(default)]
    pub exclusive: bool,
    #[serde(default = "default_window_len")]
    pub window_len: usize,
    pub train_len: Option<usize>,
    pub test_len: Option<usize>,
    #[serde(rename = "appliance")]
    pub appliances: Vec<ApplianceSpec>,
}

fn default_window_len() -> usize {
    100
}

impl SynthSpec {
    pub fn from_toml_str(text: &str, origin: &Path) -> Result<SynthSpec> {
        let spec: SynthSpec = toml::from_str(text).map_err(|e| {
            let line = e
                .span()
                .map(|s| text[..s.start].lines().count())
                .unwrap_or(0);
            Error::Parse {
                path: origin.into(),
                line,
                message: e.message().to_string(),
            }
        })?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn from_path(path: &Path) -> Result<SynthSpec> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        SynthSpec::from_toml_str(&text, path)
    }

    pub fn validate(&self) -> Result<()> {
        if self.appliances.is_empty() {
            return Err(Error::Argument("spec has no appliances".into()));
        }
        if self.baseline_watts < 0.0 {
            return Err(Error::Argument("baseline_watts must be non-negative".into()));
        }
        let mut seen = BTreeMap::new();
        for a in &self.appliances {
            a.validate()?;
            if seen.insert(a.name.clone(), ()).is_some() {
                return Err(Error::Argument(format!(
                    "duplicate appliance name {:?}",
                    a.name
                )));
            }
        }
        Ok(())
    }
}

/// Geometric bout length with the given mean, at least 1.
fn geometric(rng: &mut RngState, mean: usize) -> usize {
    if mean <= 1 {
        return 1;
    }
    let p = 1.0 / mean as f64;
    let u = rng.next_f64();
    let d = (u.ln() / (1.0 - p).ln()).ceil();
    (d as usize).max(1)
}

/// Simulate the appliance fleet and return the raw series. Independent
/// mode lets each appliance alternate on/off bouts on its own; exclusive
/// mode schedules gapless back-to-back bouts with at most one appliance
/// on per instant, picked with probability proportional to duty cycle.
pub fn generate_synthetic(
    spec: &SynthSpec,
    length: usize,
    rng: &mut RngState,
) -> Result<RawMeterSeries> {
    if length == 0 {
        return Err(Error::Argument("length must be >= 1".into()));
    }
    spec.validate()?;
    let k = spec.appliances.len();
    let mut channels: Vec<Vec<f64>> = vec![vec![0.0; length]; k];

    let fill_bout = |channels: &mut Vec<Vec<f64>>,
                     rng: &mut RngState,
                     idx: usize,
                     start: usize,
                     bout_len: usize| {
        let a = &spec.appliances[idx];
        let end = (start + bout_len).min(length);
        for t in start..end {
            let factor = a.shape.factor(t - start, bout_len);
            let power = factor * a.on_power_mean + a.on_power_jitter * rng.normal();
            channels[idx][t] = power.max(0.0);
        }
    };

    if spec.exclusive {
        let weights: Vec<f64> = spec.appliances.iter().map(|a| a.duty_cycle).collect();
        let total: f64 = weights.iter().sum();
        if total > 0.0 {
            let mut t = 0;
            while t < length {
                let mut pick = rng.next_f64() * total;
                let mut idx = 0;
                for (i, &w) in weights.iter().enumerate() {
                    idx = i;
                    if pick <= w {
                        break;
                    }
                    pick -= w;
                }
                let bout = geometric(rng, spec.appliances[idx].mean_on_duration);
                fill_bout(&mut channels, rng, idx, t, bout);
                t += bout;
            }
        }
    } else {
        for idx in 0..k {
            let a = &spec.appliances[idx];
            if a.duty_cycle <= 0.0 {
                continue;
            }
            if a.duty_cycle >= 1.0 {
                fill_bout(&mut channels, rng, idx, 0, length);
                continue;
            }
            let mut on = rng.next_f64() < a.duty_cycle;
            let mut t = 0;
            while t < length {
                let bout = if on {
                    let b = geometric(rng, a.mean_on_duration);
                    fill_bout(&mut channels, rng, idx, t, b);
                    b
                } else {
                    geometric(rng, a.mean_off_duration)
                };
                t += bout;
                on = !on;
            }
        }
    }

    let aggregate: Vec<f64> = (0..length)
        .map(|t| spec.baseline_watts + channels.iter().map(|c| c[t]).sum::<f64>())
        .collect();
    let timestamps: Vec<i64> = (0..length as i64).collect();
    RawMeterSeries::new(
        timestamps,
        aggregate,
        spec.appliances.iter().map(|a| a.name.clone()).collect(),
        channels,
    )
}

// --- dataset archive ---------------------------------------------------

/// Sidecar metadata for an archive directory.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ArchiveMeta {
    pub window_len: usize,
    pub appliance_count: usize,
    pub appliance_names: Vec<String>,
    pub train_len: usize,
    pub test_len: usize,
    pub exclusive: bool,
    pub on_threshold_watts: f64,
}

/// Write `data.csv`, `labels.csv`, `norm.json`, `meta.json` into `dir`.
/// Normalization statistics are computed on the train segment.
pub fn write_archive(
    dir: &Path,
    series: &RawMeterSeries,
    labels: &Tensor,
    meta: &ArchiveMeta,
) -> Result<()> {
    if meta.train_len + meta.test_len > series.len() {
        return Err(Error::Argument(format!(
            "split {} + {} exceeds series length {}",
            meta.train_len,
            meta.test_len,
            series.len()
        )));
    }
    if meta.appliance_names != series.appliance_names
        || meta.appliance_count != series.appliance_count()
    {
        return Err(Error::Argument(
            "meta appliance list disagrees with series".into(),
        ));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_csv(series, &dir.join("data.csv"))?;

    let k = series.appliance_count();
    let mut out = String::from("timestamp");
    for name in &series.appliance_names {
        out.push(',');
        out.push_str(name);
    }
    out.push('\n');
    for t in 0..series.len() {
        out.push_str(&series.timestamps[t].to_string());
        for col in 0..k {
            out.push(',');
            out.push_str(if labels.data()[t * k + col] > 0.0 { "1" } else { "0" });
        }
        out.push('\n');
    }
    let labels_path = dir.join("labels.csv");
    std::fs::write(&labels_path, out).map_err(|e| Error::io(&labels_path, e))?;

    let (_, _, stats) = normalize(
        &series.aggregate[..meta.train_len],
        &series.aggregate[meta.train_len..meta.train_len + meta.test_len],
    )?;
    let norm_path = dir.join("norm.json");
    std::fs::write(
        &norm_path,
        serde_json::to_string_pretty(&stats).expect("stats serialize"),
    )
    .map_err(|e| Error::io(&norm_path, e))?;
    let meta_path = dir.join("meta.json");
    std::fs::write(
        &meta_path,
        serde_json::to_string_pretty(meta).expect("meta serialize"),
    )
    .map_err(|e| Error::io(&meta_path, e))?;
    Ok(())
}

/// Read an archive back; returns the raw series, per-instant labels, and
/// metadata after validating them against each other.
pub fn load_archive(dir: &Path) -> Result<(RawMeterSeries, Tensor, ArchiveMeta)> {
    let meta_path = dir.join("meta.json");
    let meta: ArchiveMeta = serde_json::from_str(
        &std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?,
    )
    .map_err(|e| Error::Parse {
        path: meta_path.clone(),
        line: 0,
        message: e.to_string(),
    })?;
    let series = load_csv(&dir.join("data.csv"))?;
    if series.appliance_names != meta.appliance_names {
        return Err(Error::Argument(
            "archive data.csv appliance columns disagree with meta.json".into(),
        ));
    }

    let labels_path = dir.join("labels.csv");
    let text = std::fs::read_to_string(&labels_path).map_err(|e| Error::io(&labels_path, e))?;
    let k = meta.appliance_count;
    let mut data = Vec::with_capacity(series.len() * k);
    for (i, row) in text.lines().enumerate().skip(1) {
        let fields: Vec<&str> = row.split(',').collect();
        if fields.len() != k + 1 {
            return Err(Error::Parse {
                path: labels_path.clone(),
                line: i + 1,
                message: format!("expected {} fields, found {}", k + 1, fields.len()),
            });
        }
        for field in &fields[1..] {
            match *field {
                "0" => data.push(0.0),
                "1" => data.push(1.0),
                other => {
                    return Err(Error::Parse {
                        path: labels_path.clone(),
                        line: i + 1,
                        message: format!("label must be 0 or 1, found {other:?}"),
                    })
                }
            }
        }
    }
    let labels = Tensor::new(vec![series.len(), k], data)?;

    let norm_path = dir.join("norm.json");
    let stored: NormStats = serde_json::from_str(
        &std::fs::read_to_string(&norm_path).map_err(|e| Error::io(&norm_path, e))?,
    )
    .map_err(|e| Error::Parse {
        path: norm_path.clone(),
        line: 0,
        message: e.to_string(),
    })?;
    let (_, _, recomputed) = normalize(
        &series.aggregate[..meta.train_len],
        &series.aggregate[meta.train_len..meta.train_len + meta.test_len],
    )?;
    if stored != recomputed {
        return Err(Error::Argument(format!(
            "norm.json {stored:?} disagrees with stats recomputed from the train segment {recomputed:?}"
        )));
    }
    Ok((series, labels, meta))
}
