//! Intervention directions derived from probes, and the `InterventionSpec`
//! exchanged with the models that apply them.
//!
//! A spec shifts the output of each listed head by `alpha * sigma * theta`
//! before the head's slice of the output projection. `theta` is a unit vector
//! in raw (unstandardized) activation space and `sigma` is the spread of the
//! activations along it.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use ndarray::{ArrayView1, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::actstore::{ActivationDataset, HeadCoord, JointClass};
use crate::error::{Error, Result};
use crate::probekit::{BinaryProbe, BinaryTarget, MultinomialProbe, Probe};
use crate::task::Task;

/// Allowed deviation of `|theta|` from 1.
pub const UNIT_TOLERANCE: f64 = 1e-9;
pub const DEFAULT_ALPHA: f64 = 8.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DirectionKind {
    Random,
    PlusProtagonist,
    MinusOracle,
    PlusTpfo,
    Transferred,
}

impl DirectionKind {
    pub fn label(self) -> &'static str {
        match self {
            DirectionKind::Random => "random",
            DirectionKind::PlusProtagonist => "+ protagonist",
            DirectionKind::MinusOracle => "- oracle",
            DirectionKind::PlusTpfo => "+ TpFo",
            DirectionKind::Transferred => "+ transferred",
        }
    }
}

impl std::str::FromStr for DirectionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "random" => Ok(DirectionKind::Random),
            "plus_protagonist" => Ok(DirectionKind::PlusProtagonist),
            "minus_oracle" => Ok(DirectionKind::MinusOracle),
            "plus_tpfo" => Ok(DirectionKind::PlusTpfo),
            "transferred" => Ok(DirectionKind::Transferred),
            _ => Err(Error::invalid(format!("unknown direction kind `{s}`"))),
        }
    }
}

/// Which token positions receive the shift during generation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Positions {
    #[default]
    All,
    Last,
}

impl Positions {
    fn is_default(&self) -> bool {
        *self == Positions::All
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpecEntry {
    pub layer: usize,
    pub head: usize,
    pub sigma: f64,
    pub theta: Vec<f64>,
}

impl SpecEntry {
    pub fn coord(&self) -> HeadCoord {
        HeadCoord::new(self.layer, self.head)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionSpec {
    pub kind: DirectionKind,
    pub alpha: f64,
    pub k: usize,
    pub entries: Vec<SpecEntry>,
    #[serde(default, skip_serializing_if = "Positions::is_default")]
    pub positions: Positions,
    /// Task whose probes produced the directions, for transferred specs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_task: Option<Task>,
}

impl InterventionSpec {
    pub fn new(kind: DirectionKind, alpha: f64, entries: Vec<SpecEntry>) -> Result<Self> {
        let spec = InterventionSpec {
            kind,
            alpha,
            k: entries.len(),
            entries,
            positions: Positions::All,
            source_task: None,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.alpha.is_finite() {
            return Err(Error::NonFinite("alpha".into()));
        }
        if self.entries.len() != self.k {
            return Err(Error::invalid(format!("k = {} but the spec has {} entries", self.k, self.entries.len())));
        }
        let mut seen = BTreeSet::new();
        for e in &self.entries {
            if !seen.insert(e.coord()) {
                return Err(Error::invalid(format!("head {} appears twice", e.coord())));
            }
            if !(e.sigma.is_finite() && e.sigma >= 0.0) {
                return Err(Error::invalid(format!("sigma of {} must be finite and non-negative", e.coord())));
            }
            if e.theta.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("theta of {}", e.coord())));
            }
            let norm = l2(&e.theta);
            if (norm - 1.0).abs() > UNIT_TOLERANCE {
                return Err(Error::invalid(format!("theta of {} has norm {norm}", e.coord())));
            }
        }
        if self.kind == DirectionKind::Transferred && self.source_task.is_none() {
            return Err(Error::invalid("a transferred spec must name its source task"));
        }
        Ok(())
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        self
    }

    pub fn with_positions(mut self, positions: Positions) -> Self {
        self.positions = positions;
        self
    }

    /// Relabels the spec for application to a task other than the one its
    /// probes were trained on.
    pub fn transferred_from(mut self, source: Task) -> Self {
        self.kind = DirectionKind::Transferred;
        self.source_task = Some(source);
        self
    }

    pub fn heads(&self) -> Vec<HeadCoord> {
        self.entries.iter().map(SpecEntry::coord).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let spec: InterventionSpec = serde_json::from_str(s)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()? + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn normalize(mut v: Vec<f64>, what: &str) -> Result<Vec<f64>> {
    let n = l2(&v);
    if !(n > 0.0 && n.is_finite()) {
        return Err(Error::degenerate(format!("{what} has zero norm")));
    }
    v.iter_mut().for_each(|x| *x /= n);
    Ok(v)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sign {
    Plus,
    Minus,
}

impl Sign {
    fn factor(self) -> f64 {
        match self {
            Sign::Plus => 1.0,
            Sign::Minus => -1.0,
        }
    }
}

/// `sign * (w / feat_std)`, normalized.
pub fn binary_direction(p: &BinaryProbe, sign: Sign) -> Result<Vec<f64>> {
    let std = &p.standardizer().std;
    let raw = p.weights().iter().zip(std).map(|(w, s)| sign.factor() * w / s).collect();
    normalize(raw, "binary probe weight vector")
}

/// Column `cls` of the multinomial weights, de-standardized and normalized.
pub fn joint_direction(p: &MultinomialProbe, cls: JointClass) -> Result<Vec<f64>> {
    let std = &p.standardizer().std;
    let col = p.weights().column(cls.index());
    let raw = col.iter().zip(std).map(|(w, s)| w / s).collect();
    normalize(raw, &format!("multinomial weight column {}", cls.name()))
}

/// Isotropic unit vector drawn from `seed`.
pub fn random_direction(d: usize, seed: u64) -> Result<Vec<f64>> {
    if d == 0 {
        return Err(Error::invalid("direction dimension must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        if l2(&v) > 0.0 {
            return normalize(v, "random direction");
        }
    }
}

/// Population standard deviation of the projections `x_i . theta`.
pub fn sigma_along(x: ArrayView2<f64>, theta: &[f64]) -> Result<f64> {
    if x.nrows() < 2 {
        return Err(Error::degenerate("sigma needs at least 2 rows"));
    }
    if x.ncols() != theta.len() {
        return Err(Error::Dimension {
            expected: x.ncols(),
            got: theta.len(),
        });
    }
    let proj = x.dot(&ArrayView1::from(theta));
    Ok(proj.std(0.0))
}

/// Direction of `kind` read off `probe`. Random and transferred specs do
/// not come from a single probe and are rejected.
pub fn probe_direction(probe: &Probe, kind: DirectionKind) -> Result<Vec<f64>> {
    match (kind, probe) {
        (DirectionKind::PlusProtagonist, Probe::Binary(p)) if p.target() != Some(BinaryTarget::Oracle) => {
            binary_direction(p, Sign::Plus)
        }
        (DirectionKind::MinusOracle, Probe::Binary(p)) if p.target() != Some(BinaryTarget::Protagonist) => {
            binary_direction(p, Sign::Minus)
        }
        (DirectionKind::PlusTpfo, Probe::Multinomial(p)) => joint_direction(p, JointClass::TP_FO),
        (kind, _) => Err(Error::invalid(format!(
            "a `{}` direction cannot be derived from this probe",
            kind.label()
        ))),
    }
}

/// Per-head seed for random directions.
fn head_seed(seed: u64, head: HeadCoord) -> u64 {
    seed ^ ((head.layer as u64) << 32 | head.head as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Spec over the first `k` of the ranked `heads`.
///
/// Each head's theta comes from its probe (or from `seed` for random
/// directions) and its sigma from the dataset rows `rows`, normally the
/// training split the probes were fit on.
#[allow(clippy::too_many_arguments)]
pub fn build_spec(
    heads: &[HeadCoord],
    probes: &BTreeMap<HeadCoord, Probe>,
    kind: DirectionKind,
    alpha: f64,
    k: usize,
    ds: &ActivationDataset,
    rows: &[usize],
    seed: u64,
) -> Result<InterventionSpec> {
    if k == 0 || k > heads.len() {
        return Err(Error::OutOfRange {
            what: "k",
            index: k,
            limit: heads.len(),
        });
    }
    if kind == DirectionKind::Transferred {
        return Err(Error::invalid(
            "build the spec with the source task's direction kind, then call transferred_from",
        ));
    }
    let mut entries = Vec::with_capacity(k);
    for &head in &heads[..k] {
        ds.check_head(head)?;
        let theta = match kind {
            DirectionKind::Random => random_direction(ds.head_dim(), head_seed(seed, head))?,
            _ => {
                let probe = probes
                    .get(&head)
                    .ok_or_else(|| Error::invalid(format!("no probe for head {head}")))?;
                probe_direction(probe, kind)?
            }
        };
        let sigma = sigma_along(ds.slice_head_rows(head, rows)?.view(), &theta)?;
        entries.push(SpecEntry {
            layer: head.layer,
            head: head.head,
            sigma,
            theta,
        });
    }
    InterventionSpec::new(kind, alpha, entries)
}

/// Cosine between the two specs' thetas on every head they share.
pub fn cosine_matrix(a: &InterventionSpec, b: &InterventionSpec) -> Result<Vec<(HeadCoord, f64)>> {
    let theirs: BTreeMap<HeadCoord, &SpecEntry> = b.entries.iter().map(|e| (e.coord(), e)).collect();
    let mut out: Vec<(HeadCoord, f64)> = Vec::new();
    for e in &a.entries {
        if let Some(f) = theirs.get(&e.coord()) {
            if e.theta.len() != f.theta.len() {
                return Err(Error::Dimension {
                    expected: e.theta.len(),
                    got: f.theta.len(),
                });
            }
            let c: f64 = e.theta.iter().zip(&f.theta).map(|(x, y)| x * y).sum();
            out.push((e.coord(), c.clamp(-1.0, 1.0)));
        }
    }
    if out.is_empty() {
        return Err(Error::invalid("the specs share no heads"));
    }
    out.sort_by_key(|(h, _)| *h);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::probekit::{train_binary, ProbeConfig, Standardizer};
    use ndarray::{arr2, Array2};
    use proptest::prelude::*;

    fn std_with(s: Vec<f64>) -> Standardizer {
        Standardizer {
            mean: vec![0.0; s.len()],
            std: s,
        }
    }

    #[test]
    fn binary_direction_cases() {
        let p = BinaryProbe::from_parts(vec![3.0, 4.0], 0.0, Standardizer::identity(2)).unwrap();
        assert_eq!(binary_direction(&p, Sign::Plus).unwrap(), vec![0.6, 0.8]);
        assert_eq!(binary_direction(&p, Sign::Minus).unwrap(), vec![-0.6, -0.8]);
        let p = BinaryProbe::from_parts(vec![2.0, 0.0], 0.0, std_with(vec![2.0, 1.0])).unwrap();
        assert_eq!(binary_direction(&p, Sign::Plus).unwrap(), vec![1.0, 0.0]);
        let z = BinaryProbe::from_parts(vec![0.0, 0.0], 0.0, Standardizer::identity(2)).unwrap();
        assert!(matches!(binary_direction(&z, Sign::Plus), Err(Error::Degenerate(_))));
    }

    #[test]
    fn joint_direction_cases() {
        let mut w = Array2::zeros((3, 4));
        w[[1, 1]] = 5.0;
        w[[0, 3]] = 1.0;
        let p = MultinomialProbe::from_parts(w.clone(), vec![0.0; 4], Standardizer::identity(3)).unwrap();
        assert_eq!(joint_direction(&p, JointClass::TP_FO).unwrap(), vec![0.0, 1.0, 0.0]);
        let scaled = MultinomialProbe::from_parts(&w * 10.0, vec![0.0; 4], Standardizer::identity(3)).unwrap();
        assert_eq!(joint_direction(&scaled, JointClass::TP_FO).unwrap(), vec![0.0, 1.0, 0.0]);
        assert!(joint_direction(&p, JointClass::FP_FO).is_err());
    }

    #[test]
    fn unstandardized_probe_direction_is_normalized_weights() {
        let x = arr2(&[[0.0, 1.0], [1.0, 3.0], [2.0, 0.5], [3.0, 2.0]]);
        let cfg = ProbeConfig {
            standardize: false,
            ..Default::default()
        };
        let p = train_binary(x.view(), &[false, false, true, true], &cfg).unwrap();
        let n = l2(p.weights());
        let expect: Vec<f64> = p.weights().iter().map(|w| w / n).collect();
        assert_eq!(binary_direction(&p, Sign::Plus).unwrap(), expect);
    }

    #[test]
    fn flipped_labels_flip_direction() {
        let x = arr2(&[[0.0, 1.0], [1.0, 3.0], [2.0, 0.5], [3.0, 2.0], [1.5, 1.0]]);
        let y = [false, false, true, true, true];
        let flipped: Vec<bool> = y.iter().map(|v| !v).collect();
        let cfg = ProbeConfig::default();
        let a = binary_direction(&train_binary(x.view(), &y, &cfg).unwrap(), Sign::Plus).unwrap();
        let b = binary_direction(&train_binary(x.view(), &flipped, &cfg).unwrap(), Sign::Plus).unwrap();
        for (u, v) in a.iter().zip(&b) {
            assert!((u + v).abs() < 1e-6);
        }
    }

    #[test]
    fn random_directions() {
        let a = random_direction(128, 9).unwrap();
        assert_eq!(a, random_direction(128, 9).unwrap());
        assert!((l2(&a) - 1.0).abs() < 1e-9);
        let vs: Vec<Vec<f64>> = (0..100).map(|s| random_direction(128, s).unwrap()).collect();
        let mut total = 0.0;
        let mut pairs = 0;
        for i in 0..vs.len() {
            for j in i + 1..vs.len() {
                total += vs[i].iter().zip(&vs[j]).map(|(x, y)| x * y).sum::<f64>().abs();
                pairs += 1;
            }
        }
        assert!(total / pairs as f64 <= 0.2);
        assert!(random_direction(0, 1).is_err());
    }

    #[test]
    fn sigma_cases() {
        let theta = [1.0, 0.0];
        assert_eq!(sigma_along(arr2(&[[2.0, 1.0], [2.0, 1.0]]).view(), &theta).unwrap(), 0.0);
        assert_eq!(sigma_along(arr2(&[[-1.0, 7.0], [1.0, 2.0]]).view(), &theta).unwrap(), 1.0);
        let x = arr2(&[[0.0, 0.0], [0.0, 1.0], [3.0, 2.0], [3.0, 3.0]]);
        assert_eq!(sigma_along(x.view(), &theta).unwrap(), 1.5);
        assert!(sigma_along(arr2(&[[1.0, 0.0]]).view(), &theta).is_err());
    }

    fn entry(layer: usize, head: usize, theta: Vec<f64>) -> SpecEntry {
        SpecEntry {
            layer,
            head,
            sigma: 0.5,
            theta,
        }
    }

    #[test]
    fn spec_validation_and_json() {
        let spec = InterventionSpec::new(
            DirectionKind::PlusTpfo,
            8.0,
            vec![entry(0, 1, vec![0.6, 0.8]), entry(2, 0, vec![1.0, 0.0])],
        )
        .unwrap();
        let json = spec.to_json().unwrap();
        assert!(!json.contains("positions") && !json.contains("source_task"));
        assert_eq!(InterventionSpec::from_json(&json).unwrap(), spec);

        let dup = InterventionSpec::new(DirectionKind::Random, 1.0, vec![entry(0, 1, vec![1.0]), entry(0, 1, vec![1.0])]);
        assert!(dup.is_err());
        assert!(InterventionSpec::new(DirectionKind::Random, 1.0, vec![entry(0, 0, vec![0.5, 0.5])]).is_err());
        let mut bad_k = spec.clone();
        bad_k.k = 3;
        assert!(bad_k.validate().is_err());
        let t = spec.clone().transferred_from(Task::ForwardBelief);
        let json = t.to_json().unwrap();
        assert!(json.contains("\"source_task\": \"forward_belief\""));
        assert_eq!(InterventionSpec::from_json(&json).unwrap(), t);
    }

    #[test]
    fn cosines() {
        let a = InterventionSpec::new(DirectionKind::PlusTpfo, 1.0, vec![entry(0, 0, vec![1.0, 0.0]), entry(1, 1, vec![0.6, 0.8])]).unwrap();
        let b = InterventionSpec::new(DirectionKind::PlusTpfo, 1.0, vec![entry(0, 0, vec![0.0, 1.0])]).unwrap();
        assert!(cosine_matrix(&a, &a).unwrap().iter().all(|(_, c)| (c - 1.0).abs() < 1e-12));
        assert_eq!(cosine_matrix(&a, &b).unwrap(), vec![(HeadCoord::new(0, 0), 0.0)]);
        let c = InterventionSpec::new(DirectionKind::PlusTpfo, 1.0, vec![entry(5, 5, vec![1.0, 0.0])]).unwrap();
        assert!(cosine_matrix(&a, &c).is_err());
    }

    proptest! {
        #[test]
        fn spec_roundtrip_is_bitwise(raw in proptest::collection::vec(-1e3f64..1e3, 1..9), sigma in 0.0f64..1e4, alpha in -50.0f64..50.0) {
            prop_assume!(l2(&raw) > 1e-6);
            let theta = normalize(raw, "theta").unwrap();
            let spec = InterventionSpec::new(DirectionKind::Random, alpha, vec![SpecEntry { layer: 3, head: 7, sigma, theta }]).unwrap();
            let back = InterventionSpec::from_json(&spec.to_json().unwrap()).unwrap();
            prop_assert_eq!(back.alpha.to_bits(), spec.alpha.to_bits());
            prop_assert_eq!(back.entries[0].sigma.to_bits(), sigma.to_bits());
            for (a, b) in back.entries[0].theta.iter().zip(&spec.entries[0].theta) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }

        #[test]
        fn sigma_translation_invariant(rows in proptest::collection::vec(-10.0f64..10.0, 6..20), shift in proptest::collection::vec(-100.0f64..100.0, 2)) {
            let n = rows.len() / 2;
            let x = Array2::from_shape_vec((n, 2), rows[..2 * n].to_vec()).unwrap();
            let shifted = &x + &ndarray::Array1::from(shift);
            let theta = [0.6, 0.8];
            let a = sigma_along(x.view(), &theta).unwrap();
            let b = sigma_along(shifted.view(), &theta).unwrap();
            prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a));
        }
    }
}
