//! Dataset loading, standardization, windowing and the seeded synthetic corpus.
//!
//! On-disk layout: `<root>/<name>/manifest.toml` naming one matrix file per split
//! (`train`, `val`, `test`) and a `labels` vector. Matrices are either the
//! checkpoint blob format (`.bin`: `u64` rows, `u64` cols, row-major `f64`, all
//! little-endian) or delimited text (`.csv`/`.txt`, comma or whitespace separated).

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use ndarray::{s, Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{decode_blob, encode_blob};
use crate::error::{LeftError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SeriesDataset {
    pub name: String,
    pub train: Array2<f64>,
    pub validation: Array2<f64>,
    pub test: Array2<f64>,
    pub test_labels: Vec<u8>,
    pub window: usize,
    pub stride: usize,
}

/// Per-channel statistics fitted on the training split.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Array1<f64>,
    pub std: Array1<f64>,
}

impl Standardizer {
    pub fn fit(train: &Array2<f64>) -> Self {
        let mean = train.mean_axis(Axis(0)).unwrap_or_else(|| Array1::zeros(train.ncols()));
        let std = train.std_axis(Axis(0), 0.0).mapv(|s| if s > 1e-12 { s } else { 1.0 });
        Self { mean, std }
    }

    pub fn apply(&self, x: &Array2<f64>) -> Array2<f64> {
        (x - &self.mean) / &self.std
    }
}

impl SeriesDataset {
    pub fn channels(&self) -> usize {
        self.train.ncols()
    }

    /// Standardize every split with training statistics.
    pub fn standardize(&mut self) -> Standardizer {
        let st = Standardizer::fit(&self.train);
        self.train = st.apply(&self.train);
        self.validation = st.apply(&self.validation);
        self.test = st.apply(&self.test);
        st
    }

    pub fn validate(&self) -> Result<()> {
        if self.test_labels.len() != self.test.nrows() {
            return Err(LeftError::shape(format!(
                "{} labels for {} test rows",
                self.test_labels.len(),
                self.test.nrows()
            )));
        }
        let c = self.train.ncols();
        if self.validation.ncols() != c || self.test.ncols() != c {
            return Err(LeftError::shape("splits disagree on channel count"));
        }
        if self.test_labels.iter().any(|&l| l > 1) {
            return Err(LeftError::invalid("labels must be 0 or 1"));
        }
        Ok(())
    }
}

/// Window length per benchmark; `None` for unknown names.
pub fn benchmark_window(name: &str) -> Option<usize> {
    match name.to_ascii_lowercase().as_str() {
        "msl" => Some(96),
        "psm" | "smap" | "smd" | "swat" | "swan" => Some(192),
        "gecco" => Some(128),
        _ => None,
    }
}

/// Benchmarks evaluated on their first channel only.
pub fn first_channel_only(name: &str) -> bool {
    matches!(name.to_ascii_lowercase().as_str(), "msl" | "smap")
}

/// Start offsets of windows of length `t`; with `keep_tail` a last window is right-aligned to the end.
pub fn window_offsets(len: usize, t: usize, stride: usize, keep_tail: bool) -> Result<Vec<usize>> {
    if t == 0 || stride == 0 {
        return Err(LeftError::invalid("window and stride must be ≥ 1"));
    }
    if t > len {
        return Err(LeftError::invalid(format!("window {t} exceeds series length {len}")));
    }
    let mut offsets: Vec<usize> = (0..=len - t).step_by(stride).collect();
    if keep_tail && offsets.last() != Some(&(len - t)) {
        offsets.push(len - t);
    }
    Ok(offsets)
}

pub fn make_windows(series: &Array2<f64>, t: usize, stride: usize, keep_tail: bool) -> Result<Vec<(usize, Array2<f64>)>> {
    Ok(window_offsets(series.nrows(), t, stride, keep_tail)?
        .into_iter()
        .map(|o| (o, series.slice(s![o..o + t, ..]).to_owned()))
        .collect())
}

/// Windows only, for training.
pub fn training_windows(series: &Array2<f64>, t: usize, stride: usize) -> Result<Vec<Array2<f64>>> {
    Ok(make_windows(series, t, stride, true)?.into_iter().map(|(_, w)| w).collect())
}

/// Replace NaN cells by the previous value in their column (the next valid value
/// for a leading run, zero for an all-NaN column). Returns the number filled.
pub fn forward_fill(x: &mut Array2<f64>) -> usize {
    let mut filled = 0;
    for mut col in x.columns_mut() {
        let first = col.iter().copied().find(|v| !v.is_nan()).unwrap_or(0.0);
        let mut prev = first;
        for v in col.iter_mut() {
            if v.is_nan() {
                *v = prev;
                filled += 1;
            } else {
                prev = *v;
            }
        }
    }
    filled
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    #[serde(default = "default_dtype")]
    pub dtype: String,
    #[serde(default)]
    pub window: Option<usize>,
    #[serde(default)]
    pub stride: Option<usize>,
    pub files: BTreeMap<String, String>,
    #[serde(default)]
    pub shapes: BTreeMap<String, [usize; 2]>,
}

fn default_dtype() -> String {
    "f64le".into()
}

fn read_matrix(path: &Path) -> Result<Array2<f64>> {
    if !path.exists() {
        return Err(LeftError::DatasetNotFound(path.to_path_buf()));
    }
    match path.extension().and_then(|e| e.to_str()) {
        Some("bin") => {
            let bytes = std::fs::read(path)?;
            decode_blob(&bytes).map_err(|e| LeftError::invalid(format!("{}: {e}", path.display())))
        }
        _ => {
            let text = std::fs::read_to_string(path)?;
            let rows: Vec<Vec<f64>> = text
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#'))
                .map(|l| {
                    l.split(|c: char| c == ',' || c.is_whitespace())
                        .filter(|f| !f.is_empty())
                        .map(|f| {
                            let f = f.trim();
                            if f.eq_ignore_ascii_case("nan") || f.is_empty() {
                                Ok(f64::NAN)
                            } else {
                                f.parse::<f64>()
                                    .map_err(|e| LeftError::invalid(format!("{}: {f:?}: {e}", path.display())))
                            }
                        })
                        .collect::<Result<Vec<f64>>>()
                })
                .collect::<Result<_>>()?;
            let cols = rows.first().map_or(0, Vec::len);
            if rows.iter().any(|r| r.len() != cols) {
                return Err(LeftError::invalid(format!("{}: ragged rows", path.display())));
            }
            let n = rows.len();
            Array2::from_shape_vec((n, cols), rows.into_iter().flatten().collect())
                .map_err(|e| LeftError::invalid(e.to_string()))
        }
    }
}

/// Load `<root>/<name>`, standardize with training statistics and apply the benchmark conventions.
pub fn load_dataset(root: &Path, name: &str) -> Result<SeriesDataset> {
    let dir = root.join(name);
    let manifest_path = dir.join("manifest.toml");
    if !manifest_path.exists() {
        return Err(LeftError::DatasetNotFound(manifest_path));
    }
    let text = std::fs::read_to_string(&manifest_path)?;
    let manifest: DatasetManifest =
        toml::from_str(&text).map_err(|e| LeftError::Config(format!("{}: {e}", manifest_path.display())))?;
    if manifest.dtype != "f64le" {
        return Err(LeftError::Config(format!("unsupported dtype {}", manifest.dtype)));
    }
    let file = |split: &str| -> Result<PathBuf> {
        let f = manifest.files.get(split).cloned().unwrap_or_else(|| format!("{split}.bin"));
        Ok(dir.join(f))
    };
    let mut splits = Vec::new();
    for split in ["train", "val", "test"] {
        let mut m = read_matrix(&file(split)?)?;
        if let Some(&[r, c]) = manifest.shapes.get(split) {
            if (r, c) != m.dim() {
                log::warn!("{name}/{split}: manifest shape {:?}, file has {:?}", (r, c), m.dim());
            }
        }
        let filled = forward_fill(&mut m);
        if filled > 0 {
            log::info!("{name}/{split}: forward-filled {filled} NaN cells");
        }
        if first_channel_only(name) && m.ncols() > 1 {
            m = m.slice(s![.., 0..1]).to_owned();
        }
        splits.push(m);
    }
    let labels = read_matrix(&file("labels")?)?;
    let test_labels = labels
        .iter()
        .map(|&v| match v {
            v if v == 0.0 => Ok(0u8),
            v if v == 1.0 => Ok(1u8),
            v => Err(LeftError::invalid(format!("label value {v} is not 0 or 1"))),
        })
        .collect::<Result<Vec<u8>>>()?;
    let window = benchmark_window(name).or(manifest.window).unwrap_or(96);
    let stride = manifest.stride.unwrap_or((window / 2).max(1));
    let test = splits.pop().unwrap();
    let validation = splits.pop().unwrap();
    let train = splits.pop().unwrap();
    let mut ds = SeriesDataset { name: name.to_string(), train, validation, test, test_labels, window, stride };
    ds.validate()?;
    ds.standardize();
    Ok(ds)
}

/// Write a dataset in the documented layout (binary matrices).
pub fn write_dataset(root: &Path, ds: &SeriesDataset) -> Result<PathBuf> {
    ds.validate()?;
    let dir = root.join(&ds.name);
    std::fs::create_dir_all(&dir)?;
    let labels = Array2::from_shape_fn((ds.test_labels.len(), 1), |(i, _)| ds.test_labels[i] as f64);
    let mut files = BTreeMap::new();
    let mut shapes = BTreeMap::new();
    for (split, m) in [("train", &ds.train), ("val", &ds.validation), ("test", &ds.test), ("labels", &labels)] {
        let f = format!("{split}.bin");
        std::fs::write(dir.join(&f), encode_blob(m))?;
        files.insert(split.to_string(), f);
        shapes.insert(split.to_string(), [m.nrows(), m.ncols()]);
    }
    let manifest = DatasetManifest {
        name: ds.name.clone(),
        dtype: default_dtype(),
        window: Some(ds.window),
        stride: Some(ds.stride),
        files,
        shapes,
    };
    let text = toml::to_string(&manifest).map_err(|e| LeftError::Config(e.to_string()))?;
    std::fs::write(dir.join("manifest.toml"), text)?;
    Ok(dir)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AnomalyKind {
    /// Additive level jump of `magnitude` for `duration` samples.
    Spike,
    /// Linear ramp from 0 to `magnitude` across the interval.
    Drift,
    /// The base sinusoid runs `magnitude` times faster inside the interval.
    PeriodShift,
    /// Adds a period-4 oscillation of amplitude `magnitude`.
    BandEnergyShift,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnomalySpec {
    pub kind: AnomalyKind,
    pub start: usize,
    pub duration: usize,
    pub magnitude: f64,
    /// Affected channel; all channels when `None`.
    #[serde(default)]
    pub channel: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub length: usize,
    pub channels: usize,
    /// Base period per channel, in samples.
    pub periods: Vec<f64>,
    pub noise: f64,
    pub anomalies: Vec<AnomalySpec>,
    pub seed: u64,
    pub window: usize,
    pub stride: usize,
}

impl SynthConfig {
    /// First index of the test portion under the 60/20/20 split.
    pub fn test_start(&self) -> usize {
        self.length * 8 / 10
    }

    pub fn validation_start(&self) -> usize {
        self.length * 6 / 10
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.periods.len() != self.channels {
            return Err(LeftError::invalid(format!("{} periods for {} channels", self.periods.len(), self.channels)));
        }
        if self.periods.iter().any(|&p| !(p > 0.0)) || !(self.noise >= 0.0) {
            return Err(LeftError::invalid("periods must be positive and noise nonnegative"));
        }
        let lo = self.test_start();
        for a in &self.anomalies {
            if a.start < lo || a.start + a.duration > self.length || a.duration == 0 {
                return Err(LeftError::invalid(format!(
                    "anomaly at {}..{} lies outside the test portion {lo}..{}",
                    a.start,
                    a.start + a.duration,
                    self.length
                )));
            }
            if a.channel.is_some_and(|c| c >= self.channels) {
                return Err(LeftError::invalid(format!("anomaly channel {:?} out of range", a.channel)));
            }
        }
        Ok(())
    }

    /// The seeded acceptance corpus: 20k samples, three channels, spikes, drifts and period shifts.
    pub fn acceptance(seed: u64) -> Self {
        Self::with_length(20_000, seed)
    }

    /// The acceptance mix at another length: anomalies every 380 samples through
    /// the test portion, at most ten. Lengths below 2650 leave no room for one.
    pub fn with_length(length: usize, seed: u64) -> Self {
        let base = length * 8 / 10;
        let plan = [
            (AnomalyKind::Spike, 3, 4.0),
            (AnomalyKind::Drift, 120, 3.0),
            (AnomalyKind::PeriodShift, 120, 3.0),
            (AnomalyKind::Spike, 2, -4.0),
            (AnomalyKind::PeriodShift, 120, 0.33),
            (AnomalyKind::Drift, 120, -3.0),
            (AnomalyKind::Spike, 4, 5.0),
            (AnomalyKind::PeriodShift, 100, 2.5),
            (AnomalyKind::Drift, 100, 2.5),
            (AnomalyKind::Spike, 3, -5.0),
        ];
        let count = ((length - base).saturating_sub(150) / 380).min(plan.len());
        let anomalies = plan[..count]
            .iter()
            .enumerate()
            .map(|(i, &(kind, duration, magnitude))| AnomalySpec {
                kind,
                start: base + 150 + 380 * i,
                duration,
                magnitude,
                channel: Some(i % 3),
            })
            .collect();
        Self { length, channels: 3, periods: vec![23.3, 41.7, 58.9], noise: 0.1, anomalies, seed, window: 96, stride: 48 }
    }
}

/// Sinusoid per channel plus Gaussian noise and the configured anomalies; split 60/20/20.
pub fn synth_generate(cfg: &SynthConfig) -> Result<SeriesDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.length;
    let mut freq_scale = Array2::<f64>::ones((n, cfg.channels));
    let mut additive = Array2::<f64>::zeros((n, cfg.channels));
    let mut labels = vec![0u8; n];
    for a in &cfg.anomalies {
        let chans: Vec<usize> = a.channel.map_or_else(|| (0..cfg.channels).collect(), |c| vec![c]);
        for t in a.start..a.start + a.duration {
            labels[t] = 1;
            for &c in &chans {
                match a.kind {
                    AnomalyKind::Spike => additive[[t, c]] += a.magnitude,
                    AnomalyKind::Drift => {
                        additive[[t, c]] += a.magnitude * (t - a.start + 1) as f64 / a.duration as f64;
                    }
                    AnomalyKind::PeriodShift => freq_scale[[t, c]] = a.magnitude,
                    AnomalyKind::BandEnergyShift => additive[[t, c]] += a.magnitude * (PI * t as f64 / 2.0).sin(),
                }
            }
        }
    }
    let noise = Normal::new(0.0, cfg.noise.max(f64::MIN_POSITIVE)).expect("valid normal");
    let mut series = Array2::<f64>::zeros((n, cfg.channels));
    for c in 0..cfg.channels {
        let mut phase = 0.0f64;
        for t in 0..n {
            series[[t, c]] = phase.sin() + additive[[t, c]];
            phase += 2.0 * PI * freq_scale[[t, c]] / cfg.periods[c];
        }
    }
    if cfg.noise > 0.0 {
        series.mapv_inplace(|v| v + noise.sample(&mut rng));
    }
    let (v0, t0) = (cfg.validation_start(), cfg.test_start());
    Ok(SeriesDataset {
        name: "synth".into(),
        train: series.slice(s![..v0, ..]).to_owned(),
        validation: series.slice(s![v0..t0, ..]).to_owned(),
        test: series.slice(s![t0.., ..]).to_owned(),
        test_labels: labels[t0..].to_vec(),
        window: cfg.window,
        stride: cfg.stride,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_enumeration_examples() {
        assert_eq!(window_offsets(10, 4, 4, true).unwrap(), vec![0, 4, 6]);
        assert_eq!(window_offsets(12, 4, 4, true).unwrap().len(), 3);
        assert_eq!(window_offsets(12, 4, 4, false).unwrap().len(), 3);
        assert_eq!(window_offsets(10, 4, 1, false).unwrap().len(), 7);
        assert!(window_offsets(3, 4, 1, true).is_err());
        for len in 4..40 {
            for stride in 1..=4 {
                let off = window_offsets(len, 4, stride, true).unwrap();
                let mut covered = vec![false; len];
                for o in off {
                    covered[o..o + 4].iter_mut().for_each(|c| *c = true);
                }
                assert!(covered.iter().all(|&c| c));
            }
        }
    }

    fn clean_config() -> SynthConfig {
        SynthConfig {
            length: 1000,
            channels: 2,
            periods: vec![20.0, 50.0],
            noise: 0.0,
            anomalies: vec![],
            seed: 1,
            window: 96,
            stride: 48,
        }
    }

    #[test]
    fn synth_clean_series_is_the_sinusoid_sum() {
        let ds = synth_generate(&clean_config()).unwrap();
        assert!(ds.test_labels.iter().all(|&l| l == 0));
        assert_eq!((ds.train.nrows(), ds.validation.nrows(), ds.test.nrows()), (600, 200, 200));
        for (t, v) in ds.train.column(1).iter().enumerate() {
            assert!((v - (2.0 * PI * t as f64 / 50.0).sin()).abs() < 1e-9);
        }
    }

    #[test]
    fn synth_spike_labels_and_determinism() {
        let mut cfg = clean_config();
        cfg.noise = 0.1;
        cfg.anomalies.push(AnomalySpec { kind: AnomalyKind::Spike, start: 900, duration: 3, magnitude: 1.0, channel: None });
        let ds = synth_generate(&cfg).unwrap();
        let marked: Vec<usize> = ds.test_labels.iter().enumerate().filter(|(_, &l)| l == 1).map(|(i, _)| i + 800).collect();
        assert_eq!(marked, vec![900, 901, 902]);
        assert_eq!(ds, synth_generate(&cfg).unwrap());
        cfg.anomalies[0].start = 100;
        assert!(synth_generate(&cfg).is_err());
    }

    #[test]
    fn forward_fill_counts() {
        let mut x = ndarray::array![[f64::NAN, 1.0], [2.0, f64::NAN], [f64::NAN, 3.0]];
        assert_eq!(forward_fill(&mut x), 3);
        assert_eq!(x, ndarray::array![[2.0, 1.0], [2.0, 1.0], [2.0, 3.0]]);
    }

    #[test]
    fn benchmark_conventions() {
        assert_eq!(benchmark_window("MSL"), Some(96));
        assert_eq!(benchmark_window("psm"), Some(192));
        assert_eq!(benchmark_window("gecco"), Some(128));
        assert!(first_channel_only("smap") && !first_channel_only("psm"));
    }

    fn write_benchmark(root: &Path, name: &str, channels: usize) {
        let dir = root.join(name);
        std::fs::create_dir_all(&dir).unwrap();
        let mat = |rows: usize, offset: f64| Array2::from_shape_fn((rows, channels), |(t, c)| offset + ((t * (c + 1)) as f64 * 0.37).sin());
        std::fs::write(dir.join("train.bin"), encode_blob(&mat(500, 3.0))).unwrap();
        std::fs::write(dir.join("val.bin"), encode_blob(&mat(100, 3.0))).unwrap();
        let mut text = String::new();
        for row in mat(300, 10.0).rows() {
            text.push_str(&row.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","));
            text.push('\n');
        }
        std::fs::write(dir.join("test.csv"), text).unwrap();
        std::fs::write(dir.join("labels.txt"), "0\n".repeat(290) + &"1\n".repeat(10)).unwrap();
        let manifest = format!(
            "name = \"{name}\"\ndtype = \"f64le\"\n[files]\ntrain = \"train.bin\"\nval = \"val.bin\"\ntest = \"test.csv\"\nlabels = \"labels.txt\"\n"
        );
        std::fs::write(dir.join("manifest.toml"), manifest).unwrap();
    }

    #[test]
    fn load_applies_benchmark_conventions() {
        let root = tempfile::tempdir().unwrap();
        write_benchmark(root.path(), "MSL", 4);
        write_benchmark(root.path(), "PSM", 25);
        let msl = load_dataset(root.path(), "MSL").unwrap();
        assert_eq!((msl.window, msl.channels()), (96, 1));
        let psm = load_dataset(root.path(), "PSM").unwrap();
        assert_eq!((psm.window, psm.channels()), (192, 25));
        for col in psm.train.columns() {
            assert!(col.mean().unwrap().abs() < 1e-9);
            assert!((col.var(0.0) - 1.0).abs() < 1e-6);
        }
        assert!(matches!(load_dataset(root.path(), "SMD"), Err(LeftError::DatasetNotFound(_))));
    }

    #[test]
    fn standardization_uses_training_statistics_only() {
        let mut cfg = clean_config();
        cfg.noise = 0.2;
        let base = synth_generate(&cfg).unwrap();
        let mut a = base.clone();
        let mut b = base.clone();
        b.test.mapv_inplace(|v| v * 100.0 + 7.0);
        a.standardize();
        b.standardize();
        assert_eq!(a.train, b.train);
        assert_eq!(a.validation, b.validation);
    }

    #[test]
    fn write_then_load_round_trip() {
        let root = tempfile::tempdir().unwrap();
        let mut cfg = clean_config();
        cfg.noise = 0.1;
        let ds = synth_generate(&cfg).unwrap();
        write_dataset(root.path(), &ds).unwrap();
        let mut expected = ds.clone();
        expected.standardize();
        assert_eq!(load_dataset(root.path(), "synth").unwrap(), expected);
    }
}
