//! Per-head probes: binary logistic, 4-way multinomial softmax and a
//! one-hidden-layer MLP.
//!
//! Training is a pure function of `(features, labels, config)`. Features are
//! z-scored with statistics fit on the rows passed to `train_*` (callers pass
//! training rows only), and the fitted [`Standardizer`] is stored in the
//! probe so prediction applies exactly the same transform.

pub mod objective;
pub mod optim;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::actstore::{HeadCoord, JointClass};
use crate::error::{Error, Result};
use objective::{sigmoid, softmax_rows, BinaryLogistic, MlpClassifier, Objective, SoftmaxRegression};
pub use optim::Optimizer;
use optim::{minimize, Minimum, StopRule};

/// Lower bound applied to per-feature standard deviations.
pub const STD_FLOOR: f64 = 1e-8;
pub const DEFAULT_MLP_HIDDEN: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InitStrategy {
    #[default]
    Zeros,
    /// Small Gaussian weights drawn from `seed`.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub l2_lambda: f64,
    pub max_iterations: usize,
    pub grad_tolerance: f64,
    pub standardize: bool,
    pub seed: u64,
    pub optimizer: Optimizer,
    /// Initialization of the linear probes. MLPs always start from a seeded
    /// random point.
    pub init: InitStrategy,
    pub mlp_hidden: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            l2_lambda: 1e-3,
            max_iterations: 1000,
            grad_tolerance: 1e-6,
            standardize: true,
            seed: 0,
            optimizer: Optimizer::default(),
            init: InitStrategy::Zeros,
            mlp_hidden: DEFAULT_MLP_HIDDEN,
        }
    }
}

impl ProbeConfig {
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        if !(self.grad_tolerance > 0.0) {
            return Err(Error::invalid("grad_tolerance must be positive"));
        }
        if self.max_iterations == 0 {
            return Err(Error::invalid("max_iterations must be at least 1"));
        }
        if !(self.l2_lambda >= 0.0) {
            return Err(Error::invalid("l2_lambda must be non-negative"));
        }
        if self.mlp_hidden == 0 {
            return Err(Error::invalid("mlp_hidden must be at least 1"));
        }
        Ok(())
    }

    fn stop_rule(&self) -> StopRule {
        StopRule {
            max_iterations: self.max_iterations,
            grad_tolerance: self.grad_tolerance,
        }
    }
}

/// Per-feature z-scoring.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn identity(d: usize) -> Self {
        Standardizer {
            mean: vec![0.0; d],
            std: vec![1.0; d],
        }
    }

    /// Population mean and standard deviation per column, std floored at
    /// [`STD_FLOOR`]. Returns the identity when `enabled` is false.
    pub fn fit(x: ArrayView2<f64>, enabled: bool) -> Self {
        if !enabled {
            return Self::identity(x.ncols());
        }
        let mean = x.mean_axis(Axis(0)).expect("at least one row");
        let std = x.std_axis(Axis(0), 0.0).mapv(|s| s.max(STD_FLOOR));
        Standardizer {
            mean: mean.to_vec(),
            std: std.to_vec(),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        check_cols(x, self.dim())?;
        let mean = Array1::from(self.mean.clone());
        let std = Array1::from(self.std.clone());
        Ok((&x - &mean) / &std)
    }
}

fn check_cols(x: ArrayView2<f64>, d: usize) -> Result<()> {
    if x.ncols() != d {
        return Err(Error::Dimension {
            expected: d,
            got: x.ncols(),
        });
    }
    Ok(())
}

fn check_finite(x: ArrayView2<f64>) -> Result<()> {
    match x.indexed_iter().find(|(_, v)| !v.is_finite()) {
        Some((idx, _)) => Err(Error::NonFinite(format!("features{idx:?}"))),
        None => Ok(()),
    }
}

fn check_rows(x: ArrayView2<f64>, labels: usize) -> Result<()> {
    if x.nrows() != labels {
        return Err(Error::Dimension {
            expected: x.nrows(),
            got: labels,
        });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    /// Final regularized objective.
    pub loss: f64,
    pub train_accuracy: f64,
    pub iterations: usize,
    pub grad_inf_norm: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinaryTarget {
    Oracle,
    Protagonist,
}

/// Logistic probe `p = sigmoid(standardize(x) . w + b)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinaryProbe {
    w: Vec<f64>,
    b: f64,
    standardizer: Standardizer,
    target: Option<BinaryTarget>,
    head: Option<HeadCoord>,
    val_accuracy: Option<f64>,
    report: Option<TrainingReport>,
}

impl BinaryProbe {
    /// A probe with hand-set parameters.
    pub fn from_parts(w: Vec<f64>, b: f64, standardizer: Standardizer) -> Result<Self> {
        if w.len() != standardizer.dim() {
            return Err(Error::Dimension {
                expected: standardizer.dim(),
                got: w.len(),
            });
        }
        Ok(BinaryProbe {
            w,
            b,
            standardizer,
            target: None,
            head: None,
            val_accuracy: None,
            report: None,
        })
    }

    pub fn weights(&self) -> &[f64] {
        &self.w
    }

    pub fn bias(&self) -> f64 {
        self.b
    }

    pub fn standardizer(&self) -> &Standardizer {
        &self.standardizer
    }

    pub fn target(&self) -> Option<BinaryTarget> {
        self.target
    }

    pub fn head(&self) -> Option<HeadCoord> {
        self.head
    }

    pub fn val_accuracy(&self) -> Option<f64> {
        self.val_accuracy
    }

    pub fn report(&self) -> Option<&TrainingReport> {
        self.report.as_ref()
    }

    pub fn with_target(mut self, target: BinaryTarget) -> Self {
        self.target = Some(target);
        self
    }

    pub fn with_head(mut self, head: HeadCoord) -> Self {
        self.head = Some(head);
        self
    }

    pub fn with_val_accuracy(mut self, acc: f64) -> Self {
        self.val_accuracy = Some(acc);
        self
    }

    pub fn predict(&self, x: ArrayView2<f64>) -> Result<Vec<f64>> {
        predict_binary(self, x)
    }

    pub fn predict_labels(&self, x: ArrayView2<f64>) -> Result<Vec<bool>> {
        Ok(self.predict(x)?.into_iter().map(|p| p >= 0.5).collect())
    }
}

/// Softmax probe over the four joint belief classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultinomialProbe {
    /// `D x 4` weights.
    w: Array2<f64>,
    b: Vec<f64>,
    standardizer: Standardizer,
    head: Option<HeadCoord>,
    val_accuracy: Option<f64>,
    report: Option<TrainingReport>,
}

impl MultinomialProbe {
    pub fn from_parts(w: Array2<f64>, b: Vec<f64>, standardizer: Standardizer) -> Result<Self> {
        if w.ncols() != JointClass::COUNT || b.len() != JointClass::COUNT {
            return Err(Error::Dimension {
                expected: JointClass::COUNT,
                got: w.ncols(),
            });
        }
        if w.nrows() != standardizer.dim() {
            return Err(Error::Dimension {
                expected: standardizer.dim(),
                got: w.nrows(),
            });
        }
        Ok(MultinomialProbe {
            w,
            b,
            standardizer,
            head: None,
            val_accuracy: None,
            report: None,
        })
    }

    pub fn weights(&self) -> &Array2<f64> {
        &self.w
    }

    pub fn bias(&self) -> &[f64] {
        &self.b
    }

    pub fn standardizer(&self) -> &Standardizer {
        &self.standardizer
    }

    pub fn head(&self) -> Option<HeadCoord> {
        self.head
    }

    pub fn val_accuracy(&self) -> Option<f64> {
        self.val_accuracy
    }

    pub fn report(&self) -> Option<&TrainingReport> {
        self.report.as_ref()
    }

    pub fn with_head(mut self, head: HeadCoord) -> Self {
        self.head = Some(head);
        self
    }

    pub fn with_val_accuracy(mut self, acc: f64) -> Self {
        self.val_accuracy = Some(acc);
        self
    }

    pub fn predict(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        predict_multinomial(self, x)
    }

    pub fn predict_classes(&self, x: ArrayView2<f64>) -> Result<Vec<JointClass>> {
        let p = self.predict(x)?;
        Ok(argmax_rows(&p)
            .into_iter()
            .map(|i| JointClass::new(i).unwrap())
            .collect())
    }
}

/// Labels accepted by [`train_mlp`].
#[derive(Debug, Clone, Copy)]
pub enum Labels<'a> {
    Binary(&'a [bool]),
    Joint(&'a [JointClass]),
}

impl Labels<'_> {
    fn len(&self) -> usize {
        match self {
            Labels::Binary(y) => y.len(),
            Labels::Joint(y) => y.len(),
        }
    }

    fn classes(&self) -> usize {
        match self {
            Labels::Binary(_) => 2,
            Labels::Joint(_) => JointClass::COUNT,
        }
    }

    pub fn indices(&self) -> Vec<usize> {
        match self {
            Labels::Binary(y) => y.iter().map(|&b| b as usize).collect(),
            Labels::Joint(y) => y.iter().map(|c| c.index()).collect(),
        }
    }
}

/// One-hidden-layer rectified-linear probe with a softmax output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpProbe {
    w1: Array2<f64>,
    b1: Vec<f64>,
    w2: Array2<f64>,
    b2: Vec<f64>,
    standardizer: Standardizer,
    seed: u64,
    head: Option<HeadCoord>,
    val_accuracy: Option<f64>,
    report: Option<TrainingReport>,
}

impl MlpProbe {
    pub fn hidden_width(&self) -> usize {
        self.w1.ncols()
    }

    pub fn classes(&self) -> usize {
        self.w2.ncols()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn hidden_weights(&self) -> &Array2<f64> {
        &self.w1
    }

    pub fn output_weights(&self) -> &Array2<f64> {
        &self.w2
    }

    pub fn head(&self) -> Option<HeadCoord> {
        self.head
    }

    pub fn val_accuracy(&self) -> Option<f64> {
        self.val_accuracy
    }

    pub fn report(&self) -> Option<&TrainingReport> {
        self.report.as_ref()
    }

    pub fn with_head(mut self, head: HeadCoord) -> Self {
        self.head = Some(head);
        self
    }

    pub fn with_val_accuracy(mut self, acc: f64) -> Self {
        self.val_accuracy = Some(acc);
        self
    }

    pub fn predict(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        let xs = self.standardizer.apply(x)?;
        let hidden = (xs.dot(&self.w1) + &Array1::from(self.b1.clone())).mapv(|v| v.max(0.0));
        let z = hidden.dot(&self.w2) + &Array1::from(self.b2.clone());
        Ok(softmax_rows(z))
    }

    pub fn predict_classes(&self, x: ArrayView2<f64>) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.predict(x)?))
    }
}

/// Any trained probe, tagged by family when serialized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Probe {
    Binary(BinaryProbe),
    Multinomial(MultinomialProbe),
    Mlp(MlpProbe),
}

impl Probe {
    pub fn head(&self) -> Option<HeadCoord> {
        match self {
            Probe::Binary(p) => p.head(),
            Probe::Multinomial(p) => p.head(),
            Probe::Mlp(p) => p.head(),
        }
    }

    pub fn val_accuracy(&self) -> Option<f64> {
        match self {
            Probe::Binary(p) => p.val_accuracy(),
            Probe::Multinomial(p) => p.val_accuracy(),
            Probe::Mlp(p) => p.val_accuracy(),
        }
    }
}

/// Index of the largest entry of each row; ties resolve to the lower index.
pub fn argmax_rows(p: &Array2<f64>) -> Vec<usize> {
    p.rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

fn initial_params(n: usize, cfg: &ProbeConfig) -> Vec<f64> {
    match cfg.init {
        InitStrategy::Zeros => vec![0.0; n],
        InitStrategy::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            (0..n)
                .map(|_| 0.1 * Distribution::<f64>::sample(&StandardNormal, &mut rng))
                .collect::<Vec<f64>>()
        }
    }
}

fn report(min: &Minimum, train_accuracy: f64) -> TrainingReport {
    TrainingReport {
        loss: min.value,
        train_accuracy,
        iterations: min.iterations,
        grad_inf_norm: min.grad_inf_norm,
        converged: min.converged,
    }
}

pub fn train_binary(x: ArrayView2<f64>, y: &[bool], cfg: &ProbeConfig) -> Result<BinaryProbe> {
    cfg.validate()?;
    check_rows(x, y.len())?;
    check_finite(x)?;
    if x.nrows() < 2 {
        return Err(Error::degenerate("binary probe needs at least 2 examples"));
    }
    if y.iter().all(|&v| v == y[0]) {
        return Err(Error::degenerate("binary probe needs both classes present"));
    }
    let standardizer = Standardizer::fit(x, cfg.standardize);
    let xs = standardizer.apply(x)?;
    let obj = BinaryLogistic::new(xs.view(), y, cfg.l2_lambda);
    let min = minimize(&obj, initial_params(obj.dim(), cfg), cfg.optimizer, cfg.stop_rule());

    let d = x.ncols();
    let mut probe = BinaryProbe::from_parts(min.params[..d].to_vec(), min.params[d], standardizer)?;
    let pred = probe.predict_labels(x)?;
    probe.report = Some(report(&min, accuracy(&pred, y, None)?));
    Ok(probe)
}

pub fn predict_binary(p: &BinaryProbe, x: ArrayView2<f64>) -> Result<Vec<f64>> {
    let xs = p.standardizer.apply(x)?;
    let z = xs.dot(&Array1::from(p.w.clone())) + p.b;
    // Keep outputs strictly inside (0, 1) even when the logit saturates.
    let hi = 1.0 - f64::EPSILON / 2.0;
    Ok(z.iter().map(|&v| sigmoid(v).clamp(f64::MIN_POSITIVE, hi)).collect())
}

pub fn train_multinomial(
    x: ArrayView2<f64>,
    y: &[JointClass],
    cfg: &ProbeConfig,
) -> Result<MultinomialProbe> {
    cfg.validate()?;
    check_rows(x, y.len())?;
    check_finite(x)?;
    if x.nrows() < JointClass::COUNT {
        return Err(Error::degenerate("multinomial probe needs at least 4 examples"));
    }
    if y.iter().all(|&c| c == y[0]) {
        return Err(Error::degenerate("multinomial probe needs at least 2 classes present"));
    }
    let standardizer = Standardizer::fit(x, cfg.standardize);
    let xs = standardizer.apply(x)?;
    let obj = SoftmaxRegression {
        x: xs.view(),
        y: y.iter().map(|c| c.index()).collect(),
        classes: JointClass::COUNT,
        lambda: cfg.l2_lambda,
    };
    let min = minimize(&obj, initial_params(obj.dim(), cfg), cfg.optimizer, cfg.stop_rule());

    let (d, c) = (x.ncols(), JointClass::COUNT);
    let w = Array2::from_shape_vec((d, c), min.params[..d * c].to_vec()).unwrap();
    let mut probe = MultinomialProbe::from_parts(w, min.params[d * c..].to_vec(), standardizer)?;
    let pred = probe.predict_classes(x)?;
    probe.report = Some(report(&min, accuracy(&pred, y, None)?));
    Ok(probe)
}

pub fn predict_multinomial(p: &MultinomialProbe, x: ArrayView2<f64>) -> Result<Array2<f64>> {
    let xs = p.standardizer.apply(x)?;
    let z = xs.dot(&p.w) + &Array1::from(p.b.clone());
    Ok(softmax_rows(z))
}

pub fn train_mlp(x: ArrayView2<f64>, labels: Labels<'_>, cfg: &ProbeConfig) -> Result<MlpProbe> {
    cfg.validate()?;
    check_rows(x, labels.len())?;
    check_finite(x)?;
    let y = labels.indices();
    let classes = labels.classes();
    if x.nrows() < 2 {
        return Err(Error::degenerate("MLP probe needs at least 2 examples"));
    }
    if y.iter().all(|&c| c == y[0]) {
        return Err(Error::degenerate("MLP probe needs at least 2 classes present"));
    }
    let standardizer = Standardizer::fit(x, cfg.standardize);
    let xs = standardizer.apply(x)?;
    let (d, h) = (x.ncols(), cfg.mlp_hidden);
    let obj = MlpClassifier {
        x: xs.view(),
        y: y.clone(),
        hidden: h,
        classes,
        lambda: cfg.l2_lambda,
    };

    // He-scaled hidden layer, 1/sqrt(H) output layer, zero biases.
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut init = vec![0.0; obj.dim()];
    let s1 = (2.0 / d as f64).sqrt();
    let s2 = (1.0 / h as f64).sqrt();
    for v in &mut init[..d * h] {
        *v = s1 * Distribution::<f64>::sample(&StandardNormal, &mut rng);
    }
    let o2 = d * h + h;
    for v in &mut init[o2..o2 + h * classes] {
        *v = s2 * Distribution::<f64>::sample(&StandardNormal, &mut rng);
    }

    let min = minimize(&obj, init, cfg.optimizer, cfg.stop_rule());
    let p = objective::mlp_views(&min.params, d, h, classes);
    let mut probe = MlpProbe {
        w1: p.w1.to_owned(),
        b1: p.b1.to_vec(),
        w2: p.w2.to_owned(),
        b2: p.b2.to_vec(),
        standardizer,
        seed: cfg.seed,
        head: None,
        val_accuracy: None,
        report: None,
    };
    let pred = probe.predict_classes(x)?;
    probe.report = Some(report(&min, accuracy(&pred, &y, None)?));
    Ok(probe)
}

/// Fraction of `predictions` equal to `labels`, optionally over the rows
/// where `mask` is true.
pub fn accuracy<T: PartialEq>(predictions: &[T], labels: &[T], mask: Option<&[bool]>) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::Dimension {
            expected: labels.len(),
            got: predictions.len(),
        });
    }
    if let Some(m) = mask {
        if m.len() != labels.len() {
            return Err(Error::Dimension {
                expected: labels.len(),
                got: m.len(),
            });
        }
    }
    let mut total = 0usize;
    let mut correct = 0usize;
    for i in 0..labels.len() {
        if mask.is_none_or(|m| m[i]) {
            total += 1;
            correct += (predictions[i] == labels[i]) as usize;
        }
    }
    if total == 0 {
        return Err(Error::degenerate("accuracy over an empty subset"));
    }
    Ok(correct as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;
    use proptest::prelude::*;

    fn raw_cfg() -> ProbeConfig {
        ProbeConfig {
            standardize: false,
            ..Default::default()
        }
    }

    #[test]
    fn separable_one_dimensional() {
        let x = arr2(&[[-1.0], [1.0]]);
        let p = train_binary(x.view(), &[false, true], &ProbeConfig::default()).unwrap();
        assert!(p.weights()[0] > 0.0);
        assert_eq!(p.report().unwrap().train_accuracy, 1.0);
    }

    #[test]
    fn unlearnable_duplicate_points() {
        // Every threshold classifier on {0,0,1,1} with labels {F,T,F,T}
        // gets exactly 2 of 4 right, so the best achievable accuracy is 0.5.
        let x = arr2(&[[0.0], [0.0], [1.0], [1.0]]);
        let y = [false, true, false, true];
        let best = (0..=2)
            .flat_map(|t| [(t, true), (t, false)])
            .map(|(t, dir)| {
                let pred: Vec<bool> = (0..4).map(|i| (x[[i, 0]] >= t as f64) == dir).collect();
                accuracy(&pred, &y, None).unwrap()
            })
            .fold(0.0, f64::max);
        assert_eq!(best, 0.5);
        let p = train_binary(x.view(), &y, &ProbeConfig::default()).unwrap();
        assert!(p.report().unwrap().train_accuracy <= 0.5 + 1e-12);
    }

    #[test]
    fn single_class_rejected() {
        let x = arr2(&[[0.0], [1.0]]);
        assert!(matches!(
            train_binary(x.view(), &[true, true], &ProbeConfig::default()),
            Err(Error::Degenerate(_))
        ));
        let x4 = arr2(&[[0.0], [1.0], [2.0], [3.0]]);
        assert!(train_multinomial(x4.view(), &[JointClass::TP_FO; 4], &ProbeConfig::default()).is_err());
        let bad = arr2(&[[f64::NAN], [1.0]]);
        assert!(matches!(
            train_binary(bad.view(), &[true, false], &ProbeConfig::default()),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn hand_set_sigmoid() {
        let p = BinaryProbe::from_parts(vec![1.0], 0.0, Standardizer::identity(1)).unwrap();
        let out = p.predict(arr2(&[[2.0], [0.0]]).view()).unwrap();
        assert!((out[0] - 0.880797).abs() < 1e-6);
        assert_eq!(out[1], 0.5);
        assert!(matches!(
            p.predict(arr2(&[[1.0, 2.0]]).view()),
            Err(Error::Dimension { .. })
        ));
        // Saturated logits stay strictly inside (0, 1).
        let sat = p.predict(arr2(&[[1e4], [-1e4]]).view()).unwrap();
        assert!(sat[0] < 1.0 && sat[1] > 0.0);
    }

    #[test]
    fn hand_set_softmax() {
        let w = arr2(&[[0.0, 1.0, 2.0, 3.0]]);
        let p = MultinomialProbe::from_parts(w, vec![0.0; 4], Standardizer::identity(1)).unwrap();
        let out = p.predict(arr2(&[[1.0]]).view()).unwrap();
        for (a, b) in out.iter().zip([0.0321, 0.0871, 0.2369, 0.6439]) {
            assert!((a - b).abs() < 1e-4);
        }
        let zero = MultinomialProbe::from_parts(Array2::zeros((3, 4)), vec![0.0; 4], Standardizer::identity(3)).unwrap();
        let out = zero.predict(arr2(&[[1.0, -2.0, 5.0], [0.0, 0.0, 0.0]]).view()).unwrap();
        assert!(out.iter().all(|&v| v == 0.25));
    }

    fn gaussian_clusters(per_class: usize, sep: f64, seed: u64) -> (Array2<f64>, Vec<JointClass>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let centers = [[sep, 0.0], [0.0, sep], [-sep, 0.0], [0.0, -sep]];
        let mut x = Array2::zeros((4 * per_class, 2));
        let mut y = Vec::new();
        for (c, center) in centers.iter().enumerate() {
            for i in 0..per_class {
                let r = c * per_class + i;
                for (k, mu) in center.iter().enumerate() {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    x[[r, k]] = mu + e;
                }
                y.push(JointClass::new(c).unwrap());
            }
        }
        (x, y)
    }

    #[test]
    fn separated_clusters_fit() {
        // Centers 6 noise units from the origin on distinct axes.
        let (x, y) = gaussian_clusters(50, 6.0, 3);
        let nearest_mean: Vec<JointClass> = x
            .rows()
            .into_iter()
            .map(|r| {
                let centers = [[6.0, 0.0], [0.0, 6.0], [-6.0, 0.0], [0.0, -6.0]];
                let d: Vec<f64> = centers.iter().map(|c| (r[0] - c[0]).powi(2) + (r[1] - c[1]).powi(2)).collect();
                JointClass::new((0..4).min_by(|&a, &b| d[a].total_cmp(&d[b])).unwrap()).unwrap()
            })
            .collect();
        assert_eq!(accuracy(&nearest_mean, &y, None).unwrap(), 1.0);
        let p = train_multinomial(x.view(), &y, &ProbeConfig::default()).unwrap();
        assert!(p.report().unwrap().train_accuracy >= 0.99);
    }

    #[test]
    fn xor_needs_the_mlp() {
        let x = arr2(&[[0.0, 0.0], [0.0, 1.0], [1.0, 0.0], [1.0, 1.0]]);
        let y = [false, true, true, false];
        // Enumerate every labelling a line can induce on the 4 corners:
        // none of them is XOR, so a linear probe gets at most 3 of 4.
        let mut best_linear: f64 = 0.0;
        for wx in -4..=4 {
            for wy in -4..=4 {
                for b2 in -9..=9 {
                    let pred: Vec<bool> = x
                        .rows()
                        .into_iter()
                        .map(|r| wx as f64 * r[0] + wy as f64 * r[1] + b2 as f64 * 0.5 > 0.0)
                        .collect();
                    best_linear = best_linear.max(accuracy(&pred, &y, None).unwrap());
                }
            }
        }
        assert_eq!(best_linear, 0.75);
        let lin = train_binary(x.view(), &y, &ProbeConfig::default()).unwrap();
        assert!(lin.report().unwrap().train_accuracy <= 0.75);

        let mlp = train_mlp(x.view(), Labels::Binary(&y), &ProbeConfig::default()).unwrap();
        assert_eq!(mlp.hidden_width(), 256);
        assert_eq!(mlp.report().unwrap().train_accuracy, 1.0);
        let again = train_mlp(x.view(), Labels::Binary(&y), &ProbeConfig::default()).unwrap();
        assert_eq!(mlp, again);
    }

    #[test]
    fn mlp_not_worse_on_separable_data() {
        let (x, y) = gaussian_clusters(40, 5.0, 11);
        let yb: Vec<bool> = y.iter().map(|c| c.y_oracle()).collect();
        let train: Vec<usize> = (0..160).filter(|i| i % 5 != 0).collect();
        let val: Vec<usize> = (0..160).filter(|i| i % 5 == 0).collect();
        let sel = |rows: &[usize]| x.select(Axis(0), rows);
        let ysel = |rows: &[usize]| rows.iter().map(|&i| yb[i]).collect::<Vec<_>>();
        let cfg = ProbeConfig::default();
        let lin = train_binary(sel(&train).view(), &ysel(&train), &cfg).unwrap();
        let mlp = train_mlp(sel(&train).view(), Labels::Binary(&ysel(&train)), &cfg).unwrap();
        let lin_acc = accuracy(&lin.predict_labels(sel(&val).view()).unwrap(), &ysel(&val), None).unwrap();
        let mlp_pred: Vec<bool> = mlp.predict_classes(sel(&val).view()).unwrap().into_iter().map(|c| c == 1).collect();
        let mlp_acc = accuracy(&mlp_pred, &ysel(&val), None).unwrap();
        assert!(mlp_acc >= lin_acc - 0.01, "mlp {mlp_acc} vs linear {lin_acc}");
    }

    #[test]
    fn linear_losses_agree_across_initializations() {
        let (x, y) = gaussian_clusters(15, 1.5, 5);
        let yb: Vec<bool> = y.iter().map(|c| c.y_protagonist()).collect();
        let zeros = ProbeConfig::default();
        let random = ProbeConfig {
            init: InitStrategy::Random,
            seed: 77,
            ..Default::default()
        };
        let a = train_binary(x.view(), &yb, &zeros).unwrap();
        let b = train_binary(x.view(), &yb, &random).unwrap();
        assert!((a.report().unwrap().loss - b.report().unwrap().loss).abs() <= 1e-6);
        let a = train_multinomial(x.view(), &y, &zeros).unwrap();
        let b = train_multinomial(x.view(), &y, &random).unwrap();
        assert!((a.report().unwrap().loss - b.report().unwrap().loss).abs() <= 1e-6);
    }

    #[test]
    fn accuracy_cases() {
        assert_eq!(accuracy(&[1, 2, 3], &[1, 2, 3], None).unwrap(), 1.0);
        assert_eq!(accuracy(&[1, 2, 3, 4], &[1, 2, 3, 0], None).unwrap(), 0.75);
        assert_eq!(accuracy(&[1, 2], &[1, 0], Some(&[true, false])).unwrap(), 1.0);
        assert!(accuracy(&[1, 2], &[1, 0], Some(&[false, false])).is_err());
        assert!(accuracy(&[1], &[1, 0], None).is_err());
    }

    #[test]
    fn standardization_uses_training_rows_only() {
        let x = arr2(&[[0.0, 10.0], [2.0, 30.0], [4.0, 20.0], [6.0, 40.0]]);
        let p = train_binary(x.view(), &[false, false, true, true], &ProbeConfig::default()).unwrap();
        assert_eq!(p.standardizer().mean, vec![3.0, 25.0]);
        let before = p.clone();
        p.predict(arr2(&[[100.0, -5.0]]).view()).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn unstandardized_probe_keeps_identity_stats() {
        let x = arr2(&[[0.0], [1.0], [3.0], [4.0]]);
        let p = train_binary(x.view(), &[false, false, true, true], &raw_cfg()).unwrap();
        assert_eq!(p.standardizer(), &Standardizer::identity(1));
    }

    #[test]
    fn probe_json_roundtrip() {
        let x = arr2(&[[0.0, 1.0], [1.0, 0.5], [2.0, 2.0], [3.0, 1.0]]);
        let p = train_binary(x.view(), &[false, false, true, true], &ProbeConfig::default())
            .unwrap()
            .with_head(HeadCoord::new(1, 2))
            .with_target(BinaryTarget::Oracle);
        let json = serde_json::to_string(&Probe::Binary(p.clone())).unwrap();
        assert!(json.contains("\"family\":\"binary\""));
        let back: Probe = serde_json::from_str(&json).unwrap();
        assert_eq!(back, Probe::Binary(p));
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(
            w in proptest::collection::vec(-20.0f64..20.0, 12),
            b in proptest::collection::vec(-5.0f64..5.0, 4),
            x in proptest::collection::vec(-10.0f64..10.0, 6),
            shift in proptest::collection::vec(-50.0f64..50.0, 3),
        ) {
            let wm = Array2::from_shape_vec((3, 4), w).unwrap();
            let xm = Array2::from_shape_vec((2, 3), x).unwrap();
            let p = MultinomialProbe::from_parts(wm.clone(), b.clone(), Standardizer::identity(3)).unwrap();
            let probs = p.predict(xm.view()).unwrap();
            for row in probs.rows() {
                prop_assert!((row.sum() - 1.0).abs() <= 1e-9);
            }
            // Adding the same vector to every class column leaves the
            // argmax unchanged.
            let mut shifted = wm.clone();
            for (k, mut row) in shifted.rows_mut().into_iter().enumerate() {
                row += shift[k];
            }
            let q = MultinomialProbe::from_parts(shifted, b, Standardizer::identity(3)).unwrap();
            let shifted_probs = q.predict(xm.view()).unwrap();
            prop_assert_eq!(argmax_rows(&probs), argmax_rows(&shifted_probs));
            for (a, b) in probs.iter().zip(shifted_probs.iter()) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }

        #[test]
        fn sigmoid_monotone_along_weights(
            w in proptest::collection::vec(-3.0f64..3.0, 3),
            x in proptest::collection::vec(-3.0f64..3.0, 3),
            step in 0.0f64..5.0,
        ) {
            let p = BinaryProbe::from_parts(w.clone(), 0.3, Standardizer::identity(3)).unwrap();
            let moved: Vec<f64> = x.iter().zip(&w).map(|(a, b)| a + step * b).collect();
            let m = Array2::from_shape_vec((2, 3), x.into_iter().chain(moved).collect()).unwrap();
            let out = p.predict(m.view()).unwrap();
            prop_assert!(out[1] >= out[0]);
            prop_assert!(out.iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }
}
