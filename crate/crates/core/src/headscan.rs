//! Probe sweeps over every `(layer, head)` cell, seed statistics and ranking.

use std::fmt::Write as _;

use log::{debug, warn};
use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::actstore::{make_split, ActivationDataset, HeadCoord, SplitAssignment, DEFAULT_TRAIN_FRACTION};
use crate::error::{Error, Result};
use crate::probekit::{
    accuracy, train_binary, train_mlp, train_multinomial, BinaryTarget, Labels, Probe, ProbeConfig,
};

pub const DEFAULT_TOP_K: usize = 16;
pub const DEFAULT_BASELINE: f64 = 0.75;
const Z_95: f64 = 1.96;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeFamily {
    Binary,
    Multinomial,
    Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScanTarget {
    Oracle,
    Protagonist,
    Joint,
}

impl ScanTarget {
    fn binary(self) -> Option<BinaryTarget> {
        match self {
            ScanTarget::Oracle => Some(BinaryTarget::Oracle),
            ScanTarget::Protagonist => Some(BinaryTarget::Protagonist),
            ScanTarget::Joint => None,
        }
    }
}

/// Rejects family/target pairs that have no meaning (a binary probe cannot
/// predict the 4-way joint class, a multinomial probe is always joint).
pub fn check_combination(family: ProbeFamily, target: ScanTarget) -> Result<()> {
    match (family, target) {
        (ProbeFamily::Binary, ScanTarget::Joint) => Err(Error::invalid("binary probes need an oracle or protagonist target")),
        (ProbeFamily::Multinomial, ScanTarget::Oracle | ScanTarget::Protagonist) => {
            Err(Error::invalid("multinomial probes predict the joint class; use target `joint`"))
        }
        _ => Ok(()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanConfig {
    pub probe: ProbeConfig,
    pub train_fraction: f64,
}

impl Default for ScanConfig {
    fn default() -> Self {
        ScanConfig {
            probe: ProbeConfig::default(),
            train_fraction: DEFAULT_TRAIN_FRACTION,
        }
    }
}

/// NaN is written as JSON `null` and read back as NaN.
mod nan_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(v.iter().map(|x| if x.is_nan() { None } else { Some(*x) }))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        let raw: Vec<Option<f64>> = Vec::deserialize(d)?;
        Ok(raw.into_iter().map(|x| x.unwrap_or(f64::NAN)).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub layer: usize,
    pub head: usize,
    pub seed: u64,
    pub message: String,
}

/// Validation accuracies for every `(layer, head, seed)` cell.
///
/// The flat vectors are indexed `(layer * heads + head) * seeds.len() + s`.
/// Failed cells hold NaN; subset accuracies are NaN when the validation split
/// has no row of that condition.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScanResult {
    pub layers: usize,
    pub heads: usize,
    pub seeds: Vec<u64>,
    pub family: ProbeFamily,
    pub target: ScanTarget,
    pub config: ScanConfig,
    #[serde(with = "nan_as_null")]
    pub accuracies: Vec<f64>,
    #[serde(with = "nan_as_null")]
    pub tb_accuracies: Vec<f64>,
    #[serde(with = "nan_as_null")]
    pub fb_accuracies: Vec<f64>,
    pub failures: Vec<CellFailure>,
}

fn same_floats(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

impl PartialEq for ScanResult {
    /// Bitwise comparison of the accuracy tensors, so NaN cells compare equal.
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers
            && self.heads == other.heads
            && self.seeds == other.seeds
            && self.family == other.family
            && self.target == other.target
            && self.config == other.config
            && same_floats(&self.accuracies, &other.accuracies)
            && same_floats(&self.tb_accuracies, &other.tb_accuracies)
            && same_floats(&self.fb_accuracies, &other.fb_accuracies)
            && self.failures == other.failures
    }
}

impl ScanResult {
    /// Builds a result directly from an accuracy tensor (flat, see type docs).
    /// Subset accuracies are left as NaN.
    pub fn from_accuracies(
        layers: usize,
        heads: usize,
        seeds: Vec<u64>,
        accuracies: Vec<f64>,
        family: ProbeFamily,
        target: ScanTarget,
    ) -> Result<Self> {
        if seeds.is_empty() {
            return Err(Error::invalid("at least one seed is required"));
        }
        let cells = layers * heads * seeds.len();
        if accuracies.len() != cells {
            return Err(Error::Dimension {
                expected: cells,
                got: accuracies.len(),
            });
        }
        if let Some(bad) = accuracies.iter().find(|a| !a.is_nan() && !(0.0..=1.0).contains(*a)) {
            return Err(Error::invalid(format!("accuracy {bad} outside [0, 1]")));
        }
        Ok(ScanResult {
            layers,
            heads,
            seeds,
            family,
            target,
            config: ScanConfig::default(),
            accuracies,
            tb_accuracies: vec![f64::NAN; cells],
            fb_accuracies: vec![f64::NAN; cells],
            failures: Vec::new(),
        })
    }

    pub fn seed_count(&self) -> usize {
        self.seeds.len()
    }

    fn offset(&self, head: HeadCoord) -> Result<usize> {
        if head.layer >= self.layers || head.head >= self.heads {
            return Err(Error::HeadOutOfRange(head));
        }
        Ok((head.layer * self.heads + head.head) * self.seeds.len())
    }

    /// Per-seed accuracies of one head, NaN for failed cells.
    pub fn seed_accuracies(&self, head: HeadCoord) -> Result<&[f64]> {
        let o = self.offset(head)?;
        Ok(&self.accuracies[o..o + self.seeds.len()])
    }

    fn valid_seed_accuracies(&self, head: HeadCoord) -> Result<Vec<f64>> {
        Ok(self.seed_accuracies(head)?.iter().copied().filter(|a| !a.is_nan()).collect())
    }

    /// Mean over the seeds that succeeded; NaN if none did.
    pub fn mean_accuracy(&self, head: HeadCoord) -> Result<f64> {
        let v = self.valid_seed_accuracies(head)?;
        Ok(if v.is_empty() { f64::NAN } else { v.iter().sum::<f64>() / v.len() as f64 })
    }

    fn subset_mean(&self, values: &[f64], head: HeadCoord) -> Result<f64> {
        let o = self.offset(head)?;
        let v: Vec<f64> = values[o..o + self.seeds.len()].iter().copied().filter(|a| !a.is_nan()).collect();
        Ok(if v.is_empty() { f64::NAN } else { v.iter().sum::<f64>() / v.len() as f64 })
    }

    pub fn mean_tb_accuracy(&self, head: HeadCoord) -> Result<f64> {
        self.subset_mean(&self.tb_accuracies, head)
    }

    pub fn mean_fb_accuracy(&self, head: HeadCoord) -> Result<f64> {
        self.subset_mean(&self.fb_accuracies, head)
    }

    pub fn head_coords(&self) -> Vec<HeadCoord> {
        (0..self.layers)
            .flat_map(|l| (0..self.heads).map(move |h| HeadCoord::new(l, h)))
            .collect()
    }

    /// `layers x heads` grid of mean accuracies.
    pub fn mean_grid(&self) -> Array2<f64> {
        Array2::from_shape_fn((self.layers, self.heads), |(l, h)| {
            self.mean_accuracy(HeadCoord::new(l, h)).unwrap()
        })
    }

    /// Mean-accuracy grid as CSV: header `layer,h0,h1,...`, one row per
    /// layer, failed heads left empty.
    pub fn grid_csv(&self) -> String {
        let grid = self.mean_grid();
        let mut out = String::from("layer");
        for h in 0..self.heads {
            write!(out, ",h{h}").unwrap();
        }
        out.push('\n');
        for (l, row) in grid.rows().into_iter().enumerate() {
            write!(out, "{l}").unwrap();
            for v in row {
                if v.is_nan() {
                    out.push(',');
                } else {
                    write!(out, ",{v:.6}").unwrap();
                }
            }
            out.push('\n');
        }
        out
    }
}

struct CellScore {
    val: f64,
    tb: f64,
    fb: f64,
}

fn subset_accuracy<T: PartialEq>(pred: &[T], labels: &[T], mask: &[bool]) -> f64 {
    if mask.iter().any(|&m| m) {
        accuracy(pred, labels, Some(mask)).unwrap()
    } else {
        f64::NAN
    }
}

/// Trains one probe on the training rows of `split` and scores it on the
/// validation rows. The returned probe carries its head, target and
/// validation accuracy.
pub fn train_head_probe(
    ds: &ActivationDataset,
    head: HeadCoord,
    family: ProbeFamily,
    target: ScanTarget,
    split: &SplitAssignment,
    cfg: &ProbeConfig,
) -> Result<Probe> {
    Ok(fit_cell(ds, head, family, target, split, cfg)?.0)
}

fn fit_cell(
    ds: &ActivationDataset,
    head: HeadCoord,
    family: ProbeFamily,
    target: ScanTarget,
    split: &SplitAssignment,
    cfg: &ProbeConfig,
) -> Result<(Probe, CellScore)> {
    check_combination(family, target)?;
    let x_train = ds.slice_head_rows(head, &split.train)?;
    let x_val = ds.slice_head_rows(head, &split.val)?;
    let tb_all = ds.true_belief_mask();
    let tb: Vec<bool> = split.val.iter().map(|&i| tb_all[i]).collect();
    let fb: Vec<bool> = tb.iter().map(|t| !t).collect();

    let binary_labels = |rows: &[usize]| -> Vec<bool> {
        let src = match target {
            ScanTarget::Oracle => ds.y_oracle(),
            _ => ds.y_protagonist(),
        };
        rows.iter().map(|&i| src[i]).collect()
    };
    let joint = ds.joint_labels();
    let joint_labels = |rows: &[usize]| rows.iter().map(|&i| joint[i]).collect::<Vec<_>>();

    let score = |pred_ok: &dyn Fn(&[bool]) -> f64| CellScore {
        val: pred_ok(&vec![true; split.val.len()]),
        tb: if tb.iter().any(|&m| m) { pred_ok(&tb) } else { f64::NAN },
        fb: if fb.iter().any(|&m| m) { pred_ok(&fb) } else { f64::NAN },
    };

    match (family, target.binary()) {
        (ProbeFamily::Binary, Some(bt)) => {
            let y_val = binary_labels(&split.val);
            let probe = train_binary(x_train.view(), &binary_labels(&split.train), cfg)?;
            let pred = probe.predict_labels(x_val.view())?;
            let s = score(&|m| subset_accuracy(&pred, &y_val, m));
            let probe = probe.with_head(head).with_target(bt).with_val_accuracy(s.val);
            Ok((Probe::Binary(probe), s))
        }
        (ProbeFamily::Multinomial, None) => {
            let y_val = joint_labels(&split.val);
            let probe = train_multinomial(x_train.view(), &joint_labels(&split.train), cfg)?;
            let pred = probe.predict_classes(x_val.view())?;
            let s = score(&|m| subset_accuracy(&pred, &y_val, m));
            let probe = probe.with_head(head).with_val_accuracy(s.val);
            Ok((Probe::Multinomial(probe), s))
        }
        (ProbeFamily::Mlp, bt) => {
            let (probe, y_val) = match bt {
                Some(_) => {
                    let y = binary_labels(&split.train);
                    let probe = train_mlp(x_train.view(), Labels::Binary(&y), cfg)?;
                    let y_val: Vec<usize> = binary_labels(&split.val).into_iter().map(usize::from).collect();
                    (probe, y_val)
                }
                None => {
                    let y = joint_labels(&split.train);
                    let probe = train_mlp(x_train.view(), Labels::Joint(&y), cfg)?;
                    let y_val: Vec<usize> = joint_labels(&split.val).iter().map(|c| c.index()).collect();
                    (probe, y_val)
                }
            };
            let pred = probe.predict_classes(x_val.view())?;
            let s = score(&|m| subset_accuracy(&pred, &y_val, m));
            let probe = probe.with_head(head).with_val_accuracy(s.val);
            Ok((Probe::Mlp(probe), s))
        }
        _ => unreachable!("combination checked above"),
    }
}

/// Trains and scores one probe per `(layer, head, seed)` cell in parallel.
///
/// Seed `s` selects both the stratified split and the MLP initialization.
/// A cell whose training fails is recorded in `failures` with NaN accuracy;
/// only invalid arguments abort the scan.
pub fn scan(
    ds: &ActivationDataset,
    family: ProbeFamily,
    target: ScanTarget,
    seeds: &[u64],
    cfg: &ScanConfig,
) -> Result<ScanResult> {
    if seeds.is_empty() {
        return Err(Error::invalid("at least one seed is required"));
    }
    check_combination(family, target)?;
    cfg.probe.validate()?;
    let splits = seeds
        .iter()
        .map(|&s| make_split(ds, s, cfg.train_fraction))
        .collect::<Result<Vec<_>>>()?;

    let (layers, heads, n_seeds) = (ds.layers(), ds.heads(), seeds.len());
    let cells: Vec<(HeadCoord, usize)> = ds
        .head_coords()
        .into_iter()
        .flat_map(|h| (0..n_seeds).map(move |s| (h, s)))
        .collect();

    let outcomes: Vec<std::result::Result<CellScore, String>> = cells
        .par_iter()
        .map(|&(head, s)| {
            let probe_cfg = ProbeConfig {
                seed: seeds[s],
                ..cfg.probe.clone()
            };
            fit_cell(ds, head, family, target, &splits[s], &probe_cfg)
                .map(|(_, score)| score)
                .map_err(|e| e.to_string())
        })
        .collect();

    let total = cells.len();
    let mut result = ScanResult {
        layers,
        heads,
        seeds: seeds.to_vec(),
        family,
        target,
        config: cfg.clone(),
        accuracies: Vec::with_capacity(total),
        tb_accuracies: Vec::with_capacity(total),
        fb_accuracies: Vec::with_capacity(total),
        failures: Vec::new(),
    };
    for ((head, s), outcome) in cells.into_iter().zip(outcomes) {
        match outcome {
            Ok(score) => {
                result.accuracies.push(score.val);
                result.tb_accuracies.push(score.tb);
                result.fb_accuracies.push(score.fb);
            }
            Err(message) => {
                warn!("probe for {head} seed {} failed: {message}", seeds[s]);
                result.accuracies.push(f64::NAN);
                result.tb_accuracies.push(f64::NAN);
                result.fb_accuracies.push(f64::NAN);
                result.failures.push(CellFailure {
                    layer: head.layer,
                    head: head.head,
                    seed: seeds[s],
                    message,
                });
            }
        }
    }
    debug!("scanned {total} cells, {} failed", result.failures.len());
    Ok(result)
}

/// Mean with a normal-approximation 95% interval, not clamped.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanInterval {
    pub mean: f64,
    pub low: f64,
    pub high: f64,
    /// Sample standard deviation.
    pub sd: f64,
    pub n: usize,
}

impl MeanInterval {
    /// `mean ± 1.96 · sd / sqrt(n)` with the sample standard deviation.
    pub fn from_values(values: &[f64]) -> Result<Self> {
        let n = values.len();
        if n < 2 {
            return Err(Error::degenerate(format!("a confidence interval needs at least 2 values, got {n}")));
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let sd = var.sqrt();
        let half = Z_95 * sd / (n as f64).sqrt();
        Ok(MeanInterval {
            mean,
            low: mean - half,
            high: mean + half,
            sd,
            n,
        })
    }

    pub fn clamped(&self) -> (f64, f64) {
        (self.low.clamp(0.0, 1.0), self.high.clamp(0.0, 1.0))
    }
}

/// One-sided one-sample t-test of `H0: mean <= baseline`.
///
/// With zero spread the statistic is infinite: p is 0 above the baseline and
/// 1 at or below it.
pub fn one_sided_t_test(values: &[f64], baseline: f64) -> Result<f64> {
    let mi = MeanInterval::from_values(values)?;
    if mi.sd == 0.0 {
        return Ok(if mi.mean > baseline { 0.0 } else { 1.0 });
    }
    let t = (mi.mean - baseline) / (mi.sd / (mi.n as f64).sqrt());
    let dist = StudentsT::new(0.0, 1.0, (mi.n - 1) as f64).map_err(|e| Error::invalid(e.to_string()))?;
    Ok(dist.sf(t))
}

pub fn bonferroni(p_raw: f64, m: usize) -> f64 {
    (p_raw * m as f64).min(1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadStats {
    pub head: HeadCoord,
    pub mean_acc: f64,
    /// Interval endpoints clamped to `[0, 1]`.
    pub ci_low: f64,
    pub ci_high: f64,
    pub n_seeds: usize,
    pub p_raw: Option<f64>,
    pub p_corrected: Option<f64>,
}

impl HeadStats {
    fn from_interval(head: HeadCoord, mi: &MeanInterval) -> Self {
        let (ci_low, ci_high) = mi.clamped();
        HeadStats {
            head,
            mean_acc: mi.mean,
            ci_low,
            ci_high,
            n_seeds: mi.n,
            p_raw: None,
            p_corrected: None,
        }
    }
}

/// Mean and clamped 95% interval for every head with at least two
/// successful seeds. Requires a scan over two or more seeds.
pub fn aggregate(sr: &ScanResult) -> Result<Vec<HeadStats>> {
    if sr.seed_count() < 2 {
        return Err(Error::degenerate("confidence intervals need a scan over at least 2 seeds"));
    }
    let mut out = Vec::new();
    for head in sr.head_coords() {
        let v = sr.valid_seed_accuracies(head)?;
        if v.len() >= 2 {
            out.push(HeadStats::from_interval(head, &MeanInterval::from_values(&v)?));
        }
    }
    Ok(out)
}

/// Statistics plus Bonferroni-corrected p-values for `heads`, with family
/// size `m = heads.len()`.
pub fn bonferroni_test(sr: &ScanResult, baseline: f64, heads: &[HeadCoord]) -> Result<Vec<HeadStats>> {
    if heads.is_empty() {
        return Err(Error::invalid("bonferroni_test needs at least one head"));
    }
    let m = heads.len();
    heads
        .iter()
        .map(|&head| {
            let v = sr.valid_seed_accuracies(head)?;
            let mi = MeanInterval::from_values(&v)?;
            let p = one_sided_t_test(&v, baseline)?;
            Ok(HeadStats {
                p_raw: Some(p),
                p_corrected: Some(bonferroni(p, m)),
                ..HeadStats::from_interval(head, &mi)
            })
        })
        .collect()
}

/// The `k` best heads by mean accuracy, ties broken by `(layer, head)`.
/// Heads whose every seed failed are not ranked.
pub fn top_k(sr: &ScanResult, k: usize) -> Result<Vec<HeadCoord>> {
    let total = sr.layers * sr.heads;
    if k == 0 || k > total {
        return Err(Error::OutOfRange {
            what: "k",
            index: k,
            limit: total,
        });
    }
    let mut ranked: Vec<(HeadCoord, f64)> = sr
        .head_coords()
        .into_iter()
        .map(|h| (h, sr.mean_accuracy(h).unwrap()))
        .filter(|(_, m)| !m.is_nan())
        .collect();
    if ranked.len() < k {
        return Err(Error::degenerate(format!(
            "only {} heads have a valid accuracy, cannot select {k}",
            ranked.len()
        )));
    }
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(ranked.into_iter().take(k).map(|(h, _)| h).collect())
}
