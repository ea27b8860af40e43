//! Layer importance from feature-map statistics.
//!
//! Every scalar activation of a layer (pooled over images, channels and
//! spatial positions) feeds a streaming summary: exact Welford moments for
//! the mean and standard deviation, a fixed-range histogram for the entropy
//! and a uniform value reservoir for the median. Summaries are collected in
//! two passes over the selected images: the first fixes the observed range,
//! the second fills the histogram.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::AnnotatedImage;
use crate::error::{Error, IoContext, Result};
use crate::model::{Detector, Input, Scope};
use crate::tensor::FeatureMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    Mean,
    Median,
    Std,
    Entropy,
}

impl Criterion {
    pub const ALL: [Criterion; 4] = [
        Criterion::Mean,
        Criterion::Median,
        Criterion::Std,
        Criterion::Entropy,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Criterion::Mean => "mean",
            Criterion::Median => "median",
            Criterion::Std => "std",
            Criterion::Entropy => "entropy",
        }
    }
}

impl std::str::FromStr for Criterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Criterion::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::Argument(format!("unknown criterion `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SummaryConfig {
    pub bins: usize,
    pub reservoir_capacity: usize,
    /// Images per forward pass while collecting.
    pub batch_size: usize,
}

impl Default for SummaryConfig {
    fn default() -> Self {
        Self {
            bins: 64,
            reservoir_capacity: 1_000_000,
            batch_size: 16,
        }
    }
}

/// Streaming statistics of one layer's activations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationSummary {
    pub layer_name: String,
    pub count: u64,
    pub mean: f64,
    pub m2: f64,
    pub observed_min: f64,
    pub observed_max: f64,
    pub histogram: Vec<u64>,
    #[serde(skip)]
    pub reservoir: Vec<f32>,
    pub reservoir_capacity: usize,
    pub per_sample_count: usize,
}

impl ActivationSummary {
    fn empty(layer_name: &str, cfg: &SummaryConfig) -> Self {
        Self {
            layer_name: layer_name.to_string(),
            count: 0,
            mean: 0.0,
            m2: 0.0,
            observed_min: f64::INFINITY,
            observed_max: f64::NEG_INFINITY,
            histogram: vec![0; cfg.bins.max(1)],
            reservoir: Vec::new(),
            reservoir_capacity: cfg.reservoir_capacity,
            per_sample_count: 0,
        }
    }

    /// Builds a finalized summary from an in-memory list of activations.
    pub fn from_values(
        layer_name: &str,
        values: &[f32],
        per_sample_count: usize,
        cfg: &SummaryConfig,
        seed: u64,
    ) -> Self {
        let mut acc = SummaryAccumulator::new(layer_name, cfg, seed);
        acc.observe(values);
        acc.begin_histogram();
        acc.observe_histogram(values);
        acc.finish(per_sample_count)
    }

    pub fn bins(&self) -> usize {
        self.histogram.len()
    }

    /// Merges a summary built over a disjoint set of activations with the
    /// same histogram range. Moments use the parallel Welford update; the
    /// reservoir is merged by sampling without replacement from both streams.
    pub fn merge(&mut self, other: &ActivationSummary, seed: u64) -> Result<()> {
        if self.histogram.len() != other.histogram.len()
            || (self.count > 0
                && other.count > 0
                && (self.observed_min != other.observed_min
                    || self.observed_max != other.observed_max))
        {
            return Err(Error::Argument(
                "summaries must share one histogram range to merge".into(),
            ));
        }
        if other.count == 0 {
            return Ok(());
        }
        let (na, nb) = (self.count as f64, other.count as f64);
        let n = na + nb;
        let delta = other.mean - self.mean;
        self.mean += delta * nb / n;
        self.m2 += other.m2 + delta * delta * na * nb / n;
        self.observed_min = self.observed_min.min(other.observed_min);
        self.observed_max = self.observed_max.max(other.observed_max);
        for (a, b) in self.histogram.iter_mut().zip(&other.histogram) {
            *a += b;
        }
        self.reservoir = merge_reservoirs(
            &self.reservoir,
            self.count,
            &other.reservoir,
            other.count,
            self.reservoir_capacity,
            seed,
        );
        self.count += other.count;
        self.per_sample_count += other.per_sample_count;
        Ok(())
    }
}

fn merge_reservoirs(
    a: &[f32],
    seen_a: u64,
    b: &[f32],
    seen_b: u64,
    capacity: usize,
    seed: u64,
) -> Vec<f32> {
    if a.len() + b.len() <= capacity && a.len() as u64 == seen_a && b.len() as u64 == seen_b {
        return a.iter().chain(b).copied().collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Hypergeometric split: how many of `capacity` draws (without
    // replacement from the union stream) land in stream A.
    let target = capacity.min((seen_a + seen_b) as usize);
    let (mut rem_a, mut rem_b) = (seen_a, seen_b);
    let mut take_a = 0usize;
    for _ in 0..target {
        if rng.gen_range(0..rem_a + rem_b) < rem_a {
            take_a += 1;
            rem_a -= 1;
        } else {
            rem_b -= 1;
        }
    }
    let take_a = take_a.min(a.len());
    let take_b = (target - take_a).min(b.len());
    let mut out: Vec<f32> = a.choose_multiple(&mut rng, take_a).copied().collect();
    out.extend(b.choose_multiple(&mut rng, take_b).copied());
    out
}

/// Two-pass builder for an [`ActivationSummary`].
pub struct SummaryAccumulator {
    summary: ActivationSummary,
    rng: ChaCha8Rng,
    hist_count: u64,
    hist_open: bool,
}

impl SummaryAccumulator {
    pub fn new(layer_name: &str, cfg: &SummaryConfig, seed: u64) -> Self {
        Self {
            summary: ActivationSummary::empty(layer_name, cfg),
            rng: ChaCha8Rng::seed_from_u64(seed),
            hist_count: 0,
            hist_open: false,
        }
    }

    /// First pass: moments, range and reservoir.
    pub fn observe(&mut self, values: &[f32]) {
        let s = &mut self.summary;
        for &v in values {
            let x = v as f64;
            s.count += 1;
            let delta = x - s.mean;
            s.mean += delta / s.count as f64;
            s.m2 += delta * (x - s.mean);
            s.observed_min = s.observed_min.min(x);
            s.observed_max = s.observed_max.max(x);
            if s.reservoir.len() < s.reservoir_capacity {
                s.reservoir.push(v);
            } else if s.reservoir_capacity > 0 {
                let j = self.rng.gen_range(0..s.count);
                if (j as usize) < s.reservoir_capacity {
                    s.reservoir[j as usize] = v;
                }
            }
        }
    }

    /// Fixes the histogram range to the range seen in the first pass.
    pub fn begin_histogram(&mut self) {
        self.hist_open = true;
    }

    /// Second pass: histogram over the fixed range.
    pub fn observe_histogram(&mut self, values: &[f32]) {
        assert!(self.hist_open, "begin_histogram must precede the second pass");
        let s = &mut self.summary;
        let bins = s.histogram.len();
        for &v in values {
            s.histogram[bin_index(v as f64, s.observed_min, s.observed_max, bins)] += 1;
        }
        self.hist_count += values.len() as u64;
    }

    pub fn finish(mut self, per_sample_count: usize) -> ActivationSummary {
        debug_assert_eq!(self.hist_count, self.summary.count, "passes saw different data");
        if self.summary.count == 0 {
            self.summary.observed_min = 0.0;
            self.summary.observed_max = 0.0;
        }
        self.summary.per_sample_count = per_sample_count;
        self.summary
    }
}

/// Histogram bin of `x` over `[lo, hi]` split into `bins` equal bins; the
/// upper edge belongs to the last bin and a degenerate range uses bin 0.
pub fn bin_index(x: f64, lo: f64, hi: f64, bins: usize) -> usize {
    if hi <= lo {
        return 0;
    }
    let pos = ((x - lo) / (hi - lo) * bins as f64).floor();
    (pos.max(0.0) as usize).min(bins - 1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerScore {
    pub layer_name: String,
    pub criterion: Criterion,
    pub value: f64,
}

fn non_empty(summary: &ActivationSummary) -> Result<()> {
    if summary.count == 0 {
        Err(Error::EmptySummary(summary.layer_name.clone()))
    } else {
        Ok(())
    }
}

pub fn score_mean(summary: &ActivationSummary) -> Result<LayerScore> {
    non_empty(summary)?;
    Ok(LayerScore {
        layer_name: summary.layer_name.clone(),
        criterion: Criterion::Mean,
        value: summary.mean,
    })
}

pub fn score_median(summary: &ActivationSummary) -> Result<LayerScore> {
    if summary.reservoir.is_empty() {
        return Err(Error::EmptySummary(summary.layer_name.clone()));
    }
    let mut v = summary.reservoir.clone();
    v.sort_by(f32::total_cmp);
    let mid = v.len() / 2;
    let value = if v.len() % 2 == 1 {
        v[mid] as f64
    } else {
        (v[mid - 1] as f64 + v[mid] as f64) / 2.0
    };
    Ok(LayerScore {
        layer_name: summary.layer_name.clone(),
        criterion: Criterion::Median,
        value,
    })
}

pub fn score_std(summary: &ActivationSummary) -> Result<LayerScore> {
    non_empty(summary)?;
    Ok(LayerScore {
        layer_name: summary.layer_name.clone(),
        criterion: Criterion::Std,
        value: (summary.m2.max(0.0) / summary.count as f64).sqrt(),
    })
}

/// Shannon entropy (bits) of the activation histogram.
pub fn score_entropy(summary: &ActivationSummary) -> Result<LayerScore> {
    non_empty(summary)?;
    let total: u64 = summary.histogram.iter().sum();
    let n = total as f64;
    let value = summary
        .histogram
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum::<f64>()
        .max(0.0);
    Ok(LayerScore {
        layer_name: summary.layer_name.clone(),
        criterion: Criterion::Entropy,
        value,
    })
}

pub fn score(summary: &ActivationSummary, criterion: Criterion) -> Result<LayerScore> {
    match criterion {
        Criterion::Mean => score_mean(summary),
        Criterion::Median => score_median(summary),
        Criterion::Std => score_std(summary),
        Criterion::Entropy => score_entropy(summary),
    }
}

/// Number of images forwarded for a sample fraction: `ceil(fraction * n)`.
pub fn sample_count(fraction: f64, n: usize) -> usize {
    crate::mining::topk_count(fraction, n).max(1).min(n)
}

/// Forwards `ceil(fraction_n * |samples|)` seed-selected images through the
/// model (twice: range pass, then histogram pass) and summarizes every layer
/// of the requested scopes.
pub fn collect_summaries(
    model: &Detector,
    samples: &[AnnotatedImage],
    fraction_n: f64,
    scopes: &[Scope],
    seed: u64,
    cfg: &SummaryConfig,
) -> Result<BTreeMap<String, ActivationSummary>> {
    if samples.is_empty() {
        return Err(Error::Argument("cannot collect summaries on an empty dataset".into()));
    }
    if !(fraction_n > 0.0 && fraction_n <= 1.0) {
        return Err(Error::Argument(format!(
            "sample fraction must be in (0, 1], got {fraction_n}"
        )));
    }
    let n = sample_count(fraction_n, samples.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen: Vec<usize> = (0..samples.len()).collect();
    chosen.shuffle(&mut rng);
    chosen.truncate(n);
    chosen.sort_unstable();

    let layers: Vec<String> = model
        .layer_inventory(scopes)
        .into_iter()
        .map(|l| l.name)
        .collect();
    let names: Vec<&str> = layers.iter().map(String::as_str).collect();
    let mut accs: Vec<SummaryAccumulator> = layers
        .iter()
        .enumerate()
        .map(|(i, name)| SummaryAccumulator::new(name, cfg, seed ^ (0x9e37_79b9 + i as u64)))
        .collect();

    let batches: Vec<&[usize]> = chosen.chunks(cfg.batch_size.max(1)).collect();
    for pass in 0..2 {
        for batch in &batches {
            let bufs: Vec<&[f32]> = batch.iter().map(|&i| samples[i].pixels.as_slice()).collect();
            let (h, w) = samples[batch[0]].size();
            let x = FeatureMap::from_images(&bufs, 3, h, w);
            let (_, caps) = model.forward_with_capture(Input::Images(&x), &names)?;
            for (acc, name) in accs.iter_mut().zip(&layers) {
                let values = &caps[name].data;
                if pass == 0 {
                    acc.observe(values);
                } else {
                    acc.observe_histogram(values);
                }
            }
        }
        if pass == 0 {
            accs.iter_mut().for_each(SummaryAccumulator::begin_histogram);
        }
    }
    Ok(layers
        .into_iter()
        .zip(accs)
        .map(|(name, acc)| (name, acc.finish(n)))
        .collect())
}

/// Which layers to freeze and why.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FreezePlan {
    pub criterion: Criterion,
    pub percentage: f64,
    pub frozen_layers: Vec<String>,
    pub candidate_count: usize,
}

/// `round_half_up(percentage / 100 * candidates)`, at least 1 when
/// `percentage > 0` and there are candidates.
pub fn frozen_count(percentage: f64, candidates: usize) -> usize {
    if percentage <= 0.0 || candidates == 0 {
        return 0;
    }
    let exact = percentage * candidates as f64 / 100.0;
    let k = (exact + 0.5 + 1e-9).floor() as usize;
    k.clamp(1, candidates)
}

/// Freezes the highest-scoring layers. `scores` must be in canonical
/// (forward-pass) order, which also breaks ties.
pub fn rank_and_plan(scores: &[LayerScore], percentage: f64) -> Result<FreezePlan> {
    let criterion = match scores.first() {
        Some(s) => s.criterion,
        None => Criterion::Entropy,
    };
    if scores.iter().any(|s| s.criterion != criterion) {
        return Err(Error::Argument("scores mix several criteria".into()));
    }
    if !(0.0..=100.0).contains(&percentage) {
        return Err(Error::Argument(format!(
            "percentage must be in [0, 100], got {percentage}"
        )));
    }
    let key = |v: f64| if v.is_nan() { f64::NEG_INFINITY } else { v };
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        key(scores[b].value)
            .total_cmp(&key(scores[a].value))
            .then(a.cmp(&b))
    });
    let k = frozen_count(percentage, scores.len());
    let mut frozen: Vec<usize> = order[..k].to_vec();
    frozen.sort_unstable();
    Ok(FreezePlan {
        criterion,
        percentage,
        frozen_layers: frozen
            .into_iter()
            .map(|i| scores[i].layer_name.clone())
            .collect(),
        candidate_count: scores.len(),
    })
}

#[derive(Serialize, Deserialize)]
struct SummaryFile {
    summaries: Vec<SummaryRecord>,
}

#[derive(Serialize, Deserialize)]
struct SummaryRecord {
    #[serde(flatten)]
    summary: ActivationSummary,
    reservoir_offset: u64,
    reservoir_len: u64,
}

/// Writes `<stem>.json` and a little-endian `f32` reservoir sidecar
/// `<stem>.reservoir`.
pub fn save_summaries(
    summaries: &BTreeMap<String, ActivationSummary>,
    dir: &Path,
    stem: &str,
) -> Result<()> {
    let mut raw = Vec::new();
    let mut records = Vec::new();
    for s in summaries.values() {
        records.push(SummaryRecord {
            summary: s.clone(),
            reservoir_offset: raw.len() as u64,
            reservoir_len: s.reservoir.len() as u64,
        });
        for v in &s.reservoir {
            raw.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::create_dir_all(dir).at(dir)?;
    let json_path = dir.join(format!("{stem}.json"));
    fs::write(
        &json_path,
        serde_json::to_vec_pretty(&SummaryFile { summaries: records })?,
    )
    .at(&json_path)?;
    let raw_path = dir.join(format!("{stem}.reservoir"));
    fs::write(&raw_path, raw).at(raw_path)
}

pub fn load_summaries(dir: &Path, stem: &str) -> Result<BTreeMap<String, ActivationSummary>> {
    let json_path = dir.join(format!("{stem}.json"));
    let file: SummaryFile = serde_json::from_slice(&fs::read(&json_path).at(&json_path)?)?;
    let raw_path = dir.join(format!("{stem}.reservoir"));
    let raw = fs::read(&raw_path).at(&raw_path)?;
    let mut out = BTreeMap::new();
    for rec in file.summaries {
        let start = rec.reservoir_offset as usize;
        let bytes = raw
            .get(start..start + 4 * rec.reservoir_len as usize)
            .ok_or_else(|| Error::Structural("truncated reservoir sidecar".into()))?;
        let mut s = rec.summary;
        s.reservoir = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        out.insert(s.layer_name.clone(), s);
    }
    Ok(out)
}
