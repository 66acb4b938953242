//! Representation diagnostics: layer-by-layer CKA between two models and
//! membrane-potential histograms, exported as CSV.
//!
//! Heatmap features are membrane potentials averaged over time steps and
//! flattened per sample.

use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::losses::{feature_cka, LossError};
use crate::numerics::{format_real, Tensor};
use crate::snn::{EncodedInput, Head, Network, Record, SnnError};

/// How heatmap features are pooled over time; recorded with every result.
pub const HEATMAP_FEATURE: &str = "membrane potential, mean over time steps";
const PROBE_BATCH: usize = 64;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("layer tap {tap} invalid: the model has {available} LIF layers")]
    LayerTapInvalid { tap: usize, available: usize },
    #[error("no probe inputs")]
    EmptyProbe,
    #[error("histogram needs at least 2 bins, got {0}")]
    TooFewBins(usize),
    #[error(transparent)]
    Snn(#[from] SnnError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("malformed CSV: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapResult {
    /// Layers of model A.
    pub rows: Vec<String>,
    /// Layers of model B.
    pub cols: Vec<String>,
    /// Row-major `rows × cols` CKA values.
    pub values: Vec<f64>,
    pub samples: usize,
}

impl HeatmapResult {
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols.len() + c]
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.rows.len().min(self.cols.len())).map(|i| self.get(i, i)).collect()
    }

    pub fn mean_diagonal(&self) -> f64 {
        let d = self.diagonal();
        d.iter().sum::<f64>() / d.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    /// `counts.len() + 1` increasing bin edges.
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

fn check_taps(net: &Network, taps: &[usize]) -> Result<(), AnalysisError> {
    let available = net.lif_layers().len();
    match taps.iter().find(|&&t| t >= available) {
        Some(&tap) => Err(AnalysisError::LayerTapInvalid { tap, available }),
        None => Ok(()),
    }
}

/// Per tapped layer, a `[N, D]` matrix of time-averaged membrane potentials.
pub fn layer_features(
    net: &Network,
    inputs: &[EncodedInput],
    taps: &[usize],
) -> Result<Vec<Tensor>, AnalysisError> {
    if inputs.is_empty() {
        return Err(AnalysisError::EmptyProbe);
    }
    check_taps(net, taps)?;
    let mut net = net.clone();
    let mut rows: Vec<Vec<f64>> = vec![Vec::new(); taps.len()];
    let mut dims = vec![0; taps.len()];
    let record = Record {
        membranes: true,
        spikes: false,
    };
    for chunk in inputs.chunks(PROBE_BATCH) {
        let refs: Vec<&EncodedInput> = chunk.iter().collect();
        let tr = net.evaluate_trace(&refs, Head::Event, record)?;
        let membranes = tr.membranes.unwrap_or_default();
        for (k, &tap) in taps.iter().enumerate() {
            let steps = &membranes[tap];
            let d = steps[0].shape()[1];
            dims[k] = d;
            let mut mean = vec![0.0; chunk.len() * d];
            for s in steps {
                mean.iter_mut().zip(s.data()).for_each(|(m, v)| *m += v / steps.len() as f64);
            }
            rows[k].extend(mean);
        }
    }
    Ok(rows
        .into_iter()
        .zip(dims)
        .map(|(data, d)| Tensor::new(vec![inputs.len(), d], data).expect("feature matrix"))
        .collect())
}

/// CKA between every tapped layer of `a` (rows) and of `b` (columns), both
/// probed with the same inputs.
pub fn cka_heatmap(
    a: &Network,
    b: &Network,
    inputs: &[EncodedInput],
    taps: &[usize],
) -> Result<HeatmapResult, AnalysisError> {
    check_taps(a, taps)?;
    check_taps(b, taps)?;
    let fa = layer_features(a, inputs, taps)?;
    let fb = layer_features(b, inputs, taps)?;
    let mut values = Vec::with_capacity(taps.len() * taps.len());
    for x in &fa {
        for y in &fb {
            values.push(feature_cka(x, y)?);
        }
    }
    let names = |n: &Network| taps.iter().map(|&t| n.lif_layers()[t].clone()).collect();
    Ok(HeatmapResult {
        rows: names(a),
        cols: names(b),
        values,
        samples: inputs.len(),
    })
}

/// Every membrane potential of one layer, over samples, steps and neurons.
pub fn membrane_samples(net: &Network, inputs: &[EncodedInput], layer: usize) -> Result<Vec<f64>, AnalysisError> {
    if inputs.is_empty() {
        return Err(AnalysisError::EmptyProbe);
    }
    check_taps(net, &[layer])?;
    let mut net = net.clone();
    let mut out = Vec::new();
    let record = Record {
        membranes: true,
        spikes: false,
    };
    for chunk in inputs.chunks(PROBE_BATCH) {
        let refs: Vec<&EncodedInput> = chunk.iter().collect();
        let tr = net.evaluate_trace(&refs, Head::Event, record)?;
        for s in &tr.membranes.unwrap_or_default()[layer] {
            out.extend_from_slice(s.data());
        }
    }
    Ok(out)
}

/// Fixed-width bins spanning the observed range. A constant sample gets a
/// unit-wide range centred on its value.
pub fn histogram(samples: &[f64], bins: usize) -> Result<Histogram, AnalysisError> {
    if bins < 2 {
        return Err(AnalysisError::TooFewBins(bins));
    }
    if samples.is_empty() {
        return Err(AnalysisError::EmptyProbe);
    }
    let lo = samples.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = samples.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if hi > lo { (lo, hi) } else { (lo - 0.5, hi + 0.5) };
    let width = (hi - lo) / bins as f64;
    let edges: Vec<f64> = (0..=bins).map(|i| if i == bins { hi } else { lo + width * i as f64 }).collect();
    let mut counts = vec![0u64; bins];
    for &v in samples {
        let i = (((v - lo) / width) as usize).min(bins - 1);
        counts[i] += 1;
    }
    Ok(Histogram { edges, counts })
}

pub fn membrane_histogram(
    net: &Network,
    inputs: &[EncodedInput],
    layer: usize,
    bins: usize,
) -> Result<Histogram, AnalysisError> {
    histogram(&membrane_samples(net, inputs, layer)?, bins)
}

/// Two-sample Kolmogorov-Smirnov statistic `sup |F_a - F_b|`.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
    }
    d
}

fn to_csv(rows: &[Vec<String>]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.write_record(r).expect("writing to memory");
    }
    String::from_utf8(w.into_inner().expect("writing to memory")).expect("UTF-8 CSV")
}

/// Labeled matrix: a header of column layers, then one row per row layer.
pub fn heatmap_csv(h: &HeatmapResult) -> String {
    let mut rows = Vec::with_capacity(h.rows.len() + 1);
    rows.push(std::iter::once("layer".to_string()).chain(h.cols.iter().cloned()).collect());
    for (r, name) in h.rows.iter().enumerate() {
        let mut row = vec![name.clone()];
        row.extend((0..h.cols.len()).map(|c| format_real(h.get(r, c))));
        rows.push(row);
    }
    to_csv(&rows)
}

/// One `lower_edge,upper_edge,count` row per bin.
pub fn histogram_csv(h: &Histogram) -> String {
    let mut rows = vec![vec!["lower_edge".to_string(), "upper_edge".into(), "count".into()]];
    for (i, c) in h.counts.iter().enumerate() {
        rows.push(vec![format_real(h.edges[i]), format_real(h.edges[i + 1]), c.to_string()]);
    }
    to_csv(&rows)
}

/// Reads back a [`heatmap_csv`] export. The sample count is not part of
/// the file and comes back as 0.
pub fn parse_heatmap_csv(text: &str) -> Result<HeatmapResult, AnalysisError> {
    let mut reader = csv::ReaderBuilder::new().has_headers(false).from_reader(text.as_bytes());
    let mut records = reader.records();
    let bad = |m: String| AnalysisError::Parse(m);
    let header = records
        .next()
        .ok_or_else(|| bad("empty file".into()))?
        .map_err(|e| bad(e.to_string()))?;
    let cols: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let mut rows = Vec::new();
    let mut values = Vec::new();
    for rec in records {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        rows.push(rec[0].to_string());
        for v in rec.iter().skip(1) {
            values.push(v.parse::<f64>().map_err(|_| bad(format!("bad value {v:?}")))?);
        }
    }
    if values.len() != rows.len() * cols.len() {
        return Err(bad("ragged matrix".into()));
    }
    Ok(HeatmapResult {
        rows,
        cols,
        values,
        samples: 0,
    })
}

/// Writes `text` to `path`, creating parent directories.
pub fn export_csv(text: &str, path: &Path) -> Result<(), AnalysisError> {
    let io = |source| AnalysisError::Io {
        path: path.to_path_buf(),
        source,
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io)?;
    }
    fs::write(path, text).map_err(|source| AnalysisError::Io {
        path: path.to_path_buf(),
        source,
    })
}
