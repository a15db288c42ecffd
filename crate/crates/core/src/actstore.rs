//! Activation datasets and the ACTV1 container.
//!
//! An [`ActivationDataset`] holds one final-token activation vector per
//! (example, layer, head) together with the two belief labels of each
//! example. The on-disk layout is:
//!
//! ```text
//! "ACTV"  u8 version = 1
//! u32 LE  header length in bytes
//! header  UTF-8 JSON: {"n","l","h","d","dtype":"f32le","labels","meta"}
//! tensor  n*l*h*d little-endian f32, row-major in (n, l, h, d)
//! labels  n bytes y_oracle (0/1), then n bytes y_protagonist (0/1)
//! ```

use std::fmt;
use std::fs;
use std::path::Path;

use ndarray::{Array2, Array4};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::task::Task;

pub const MAGIC: &[u8; 4] = b"ACTV";
pub const VERSION: u8 = 1;
pub const DTYPE: &str = "f32le";
pub const LABEL_NAMES: [&str; 2] = ["y_oracle", "y_protagonist"];

/// Default fraction of each joint class assigned to the training split.
pub const DEFAULT_TRAIN_FRACTION: f64 = 0.8;

/// Coordinate of one attention head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct HeadCoord {
    pub layer: usize,
    pub head: usize,
}

impl HeadCoord {
    pub const fn new(layer: usize, head: usize) -> Self {
        HeadCoord { layer, head }
    }
}

impl fmt::Display for HeadCoord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.layer, self.head)
    }
}

/// Joint belief class of an example, `index = 2 * y_oracle + y_protagonist`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct JointClass(u8);

impl JointClass {
    /// Protagonist false, oracle false.
    pub const FP_FO: JointClass = JointClass(0);
    /// Protagonist true, oracle false.
    pub const TP_FO: JointClass = JointClass(1);
    /// Protagonist false, oracle true.
    pub const FP_TO: JointClass = JointClass(2);
    /// Protagonist true, oracle true.
    pub const TP_TO: JointClass = JointClass(3);

    pub const COUNT: usize = 4;

    pub fn from_labels(y_oracle: bool, y_protagonist: bool) -> Self {
        JointClass(2 * y_oracle as u8 + y_protagonist as u8)
    }

    pub fn new(index: usize) -> Result<Self> {
        if index < Self::COUNT {
            Ok(JointClass(index as u8))
        } else {
            Err(Error::OutOfRange {
                what: "joint class",
                index,
                limit: Self::COUNT,
            })
        }
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn y_oracle(self) -> bool {
        self.0 & 2 != 0
    }

    pub fn y_protagonist(self) -> bool {
        self.0 & 1 != 0
    }

    pub fn name(self) -> &'static str {
        ["FpFo", "TpFo", "FpTo", "TpTo"][self.index()]
    }
}

impl TryFrom<u8> for JointClass {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self> {
        JointClass::new(v as usize)
    }
}

impl From<JointClass> for u8 {
    fn from(c: JointClass) -> u8 {
        c.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub model: String,
    pub task: Task,
    pub template_id: String,
    pub source_ids: Vec<String>,
}

impl DatasetMeta {
    pub fn new(model: impl Into<String>, task: Task, template_id: impl Into<String>) -> Self {
        DatasetMeta {
            model: model.into(),
            task,
            template_id: template_id.into(),
            source_ids: Vec::new(),
        }
    }
}

/// Head activations of shape `N x L x H x D` with per-example belief labels.
///
/// Immutable once constructed; every constructor validates the invariants.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationDataset {
    x: Array4<f32>,
    y_oracle: Vec<bool>,
    y_protagonist: Vec<bool>,
    meta: DatasetMeta,
}

#[derive(Serialize, Deserialize)]
struct Header {
    n: usize,
    l: usize,
    h: usize,
    d: usize,
    dtype: String,
    labels: Vec<String>,
    meta: DatasetMeta,
}

impl ActivationDataset {
    pub fn new(
        x: Array4<f32>,
        y_oracle: Vec<bool>,
        y_protagonist: Vec<bool>,
        mut meta: DatasetMeta,
    ) -> Result<Self> {
        let (n, l, h, d) = x.dim();
        if n == 0 || l == 0 || h == 0 || d == 0 {
            return Err(Error::invalid(format!(
                "all dimensions must be at least 1, got {n}x{l}x{h}x{d}"
            )));
        }
        for (what, len) in [("y_oracle", y_oracle.len()), ("y_protagonist", y_protagonist.len())] {
            if len != n {
                return Err(Error::invalid(format!("{what} has length {len}, expected {n}")));
            }
        }
        if meta.source_ids.is_empty() {
            meta.source_ids = (0..n).map(|i| i.to_string()).collect();
        } else if meta.source_ids.len() != n {
            return Err(Error::invalid(format!(
                "meta.source_ids has length {}, expected {n}",
                meta.source_ids.len()
            )));
        }
        if let Some((idx, _)) = x.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFinite(format!("x{idx:?}")));
        }
        Ok(ActivationDataset {
            x,
            y_oracle,
            y_protagonist,
            meta,
        })
    }

    pub fn n(&self) -> usize {
        self.x.dim().0
    }

    pub fn layers(&self) -> usize {
        self.x.dim().1
    }

    pub fn heads(&self) -> usize {
        self.x.dim().2
    }

    pub fn head_dim(&self) -> usize {
        self.x.dim().3
    }

    pub fn x(&self) -> &Array4<f32> {
        &self.x
    }

    pub fn y_oracle(&self) -> &[bool] {
        &self.y_oracle
    }

    pub fn y_protagonist(&self) -> &[bool] {
        &self.y_protagonist
    }

    pub fn meta(&self) -> &DatasetMeta {
        &self.meta
    }

    pub fn joint_class(&self, i: usize) -> JointClass {
        JointClass::from_labels(self.y_oracle[i], self.y_protagonist[i])
    }

    pub fn joint_labels(&self) -> Vec<JointClass> {
        (0..self.n()).map(|i| self.joint_class(i)).collect()
    }

    /// `true` for examples where both perspectives agree (true-belief rows).
    pub fn true_belief_mask(&self) -> Vec<bool> {
        self.y_oracle
            .iter()
            .zip(&self.y_protagonist)
            .map(|(o, p)| o == p)
            .collect()
    }

    /// Every head coordinate in layer-major order.
    pub fn head_coords(&self) -> Vec<HeadCoord> {
        let h = self.heads();
        (0..self.layers() * h)
            .map(|i| HeadCoord::new(i / h, i % h))
            .collect()
    }

    pub fn check_head(&self, head: HeadCoord) -> Result<()> {
        if head.layer < self.layers() && head.head < self.heads() {
            Ok(())
        } else {
            Err(Error::HeadOutOfRange(head))
        }
    }

    /// Activations of one head as an `N x D` matrix.
    pub fn slice_head(&self, layer: usize, head: usize) -> Result<Array2<f64>> {
        self.check_head(HeadCoord::new(layer, head))?;
        let view = self.x.slice(ndarray::s![.., layer, head, ..]);
        Ok(view.mapv(f64::from))
    }

    /// Same as [`slice_head`](Self::slice_head) restricted to `rows`.
    pub fn slice_head_rows(&self, head: HeadCoord, rows: &[usize]) -> Result<Array2<f64>> {
        self.check_head(head)?;
        let d = self.head_dim();
        let mut out = Array2::zeros((rows.len(), d));
        for (r, &i) in rows.iter().enumerate() {
            if i >= self.n() {
                return Err(Error::OutOfRange {
                    what: "row",
                    index: i,
                    limit: self.n(),
                });
            }
            for k in 0..d {
                out[[r, k]] = f64::from(self.x[[i, head.layer, head.head, k]]);
            }
        }
        Ok(out)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let (n, l, h, d) = self.x.dim();
        let header = Header {
            n,
            l,
            h,
            d,
            dtype: DTYPE.to_string(),
            labels: LABEL_NAMES.iter().map(|s| s.to_string()).collect(),
            meta: self.meta.clone(),
        };
        let header = serde_json::to_vec(&header)?;
        let header_len = u32::try_from(header.len())
            .map_err(|_| Error::Format("header longer than 4 GiB".into()))?;

        let mut out = Vec::with_capacity(9 + header.len() + self.x.len() * 4 + 2 * n);
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&header_len.to_le_bytes());
        out.extend_from_slice(&header);
        // Standard layout iteration is row-major regardless of memory order.
        for v in self.x.iter() {
            if !v.is_finite() {
                return Err(Error::NonFinite("tensor payload".into()));
            }
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend(self.y_oracle.iter().map(|&b| b as u8));
        out.extend(self.y_protagonist.iter().map(|&b| b as u8));
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 9 {
            return Err(Error::Truncated {
                expected: 9,
                found: bytes.len(),
            });
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::Format(format!(
                "bad magic {:?}, expected \"ACTV\"",
                String::from_utf8_lossy(&bytes[..4])
            )));
        }
        if bytes[4] != VERSION {
            return Err(Error::Format(format!("unsupported version {}", bytes[4])));
        }
        let header_len = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
        let header_end = 9 + header_len;
        if bytes.len() < header_end {
            return Err(Error::Truncated {
                expected: header_end,
                found: bytes.len(),
            });
        }
        let header: Header = serde_json::from_slice(&bytes[9..header_end])?;
        if header.dtype != DTYPE {
            return Err(Error::Format(format!("unsupported dtype `{}`", header.dtype)));
        }
        if header.labels != LABEL_NAMES {
            return Err(Error::Format(format!("unexpected label names {:?}", header.labels)));
        }
        let Header { n, l, h, d, meta, .. } = header;
        let numel = n
            .checked_mul(l)
            .and_then(|v| v.checked_mul(h))
            .and_then(|v| v.checked_mul(d))
            .ok_or_else(|| Error::Format("dimensions overflow".into()))?;
        let expected = header_end + numel * 4 + 2 * n;
        if bytes.len() < expected {
            return Err(Error::Truncated {
                expected,
                found: bytes.len(),
            });
        }
        if bytes.len() > expected {
            return Err(Error::Format(format!(
                "payload has {} trailing bytes beyond the declared dimensions",
                bytes.len() - expected
            )));
        }

        let tensor = &bytes[header_end..header_end + numel * 4];
        let data: Vec<f32> = tensor
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let x = Array4::from_shape_vec((n, l, h, d), data)
            .map_err(|e| Error::Format(e.to_string()))?;

        let label_bytes = &bytes[header_end + numel * 4..];
        let decode = |slice: &[u8], what: &str| -> Result<Vec<bool>> {
            slice
                .iter()
                .map(|&b| match b {
                    0 => Ok(false),
                    1 => Ok(true),
                    other => Err(Error::Format(format!("{what} byte {other} is not 0/1"))),
                })
                .collect()
        };
        let y_oracle = decode(&label_bytes[..n], "y_oracle")?;
        let y_protagonist = decode(&label_bytes[n..], "y_protagonist")?;
        ActivationDataset::new(x, y_oracle, y_protagonist, meta)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

pub fn write_dataset(ds: &ActivationDataset, path: impl AsRef<Path>) -> Result<()> {
    ds.write(path)
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<ActivationDataset> {
    ActivationDataset::read(path)
}

/// Disjoint train/validation index sets, stratified by joint class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub seed: u64,
    /// Stored as bits so the assignment stays `Eq`.
    train_fraction_bits: u64,
}

impl SplitAssignment {
    pub fn train_fraction(&self) -> f64 {
        f64::from_bits(self.train_fraction_bits)
    }

    /// Splits examples so that each joint class contributes
    /// `round(fraction * size)` training rows, clamped to `[1, size - 1]`.
    ///
    /// Classes are visited in index order and shuffled with a single
    /// ChaCha8 stream seeded by `seed`, so the result depends only on
    /// `(classes, seed, fraction)`.
    pub fn stratified(classes: &[JointClass], seed: u64, train_fraction: f64) -> Result<Self> {
        if !(train_fraction > 0.0 && train_fraction < 1.0) {
            return Err(Error::invalid(format!(
                "train fraction must lie in (0, 1), got {train_fraction}"
            )));
        }
        let mut buckets: [Vec<usize>; JointClass::COUNT] = Default::default();
        for (i, c) in classes.iter().enumerate() {
            buckets[c.index()].push(i);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut train = Vec::with_capacity(classes.len());
        let mut val = Vec::new();
        for (cls, bucket) in buckets.iter_mut().enumerate() {
            if bucket.is_empty() {
                continue;
            }
            if bucket.len() < 2 {
                return Err(Error::degenerate(format!(
                    "joint class {} has {} member(s); stratified splitting needs at least 2",
                    JointClass(cls as u8).name(),
                    bucket.len()
                )));
            }
            bucket.shuffle(&mut rng);
            let n_train = ((train_fraction * bucket.len() as f64).round() as usize)
                .clamp(1, bucket.len() - 1);
            train.extend_from_slice(&bucket[..n_train]);
            val.extend_from_slice(&bucket[n_train..]);
        }
        train.sort_unstable();
        val.sort_unstable();
        Ok(SplitAssignment {
            train,
            val,
            seed,
            train_fraction_bits: train_fraction.to_bits(),
        })
    }
}

pub fn make_split(ds: &ActivationDataset, seed: u64, train_fraction: f64) -> Result<SplitAssignment> {
    SplitAssignment::stratified(&ds.joint_labels(), seed, train_fraction)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta() -> DatasetMeta {
        DatasetMeta::new("test", Task::Custom, "none")
    }

    fn indexed() -> ActivationDataset {
        let x = Array4::from_shape_fn((2, 2, 2, 1), |(i, l, h, _)| (100 * i + 10 * l + h) as f32);
        ActivationDataset::new(x, vec![false, true], vec![true, true], meta()).unwrap()
    }

    #[test]
    fn joint_class_encoding() {
        assert_eq!(JointClass::from_labels(false, true), JointClass::TP_FO);
        assert_eq!(JointClass::TP_FO.index(), 1);
        for i in 0..4 {
            let c = JointClass::new(i).unwrap();
            assert_eq!(JointClass::from_labels(c.y_oracle(), c.y_protagonist()), c);
        }
        assert!(JointClass::new(4).is_err());
    }

    #[test]
    fn minimal_file_size() {
        let x = Array4::from_shape_vec((1, 1, 1, 2), vec![0.0f32, 1.0]).unwrap();
        let ds = ActivationDataset::new(x, vec![true], vec![false], meta()).unwrap();
        let bytes = ds.to_bytes().unwrap();
        let header_len = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
        assert_eq!(&bytes[..5], b"ACTV\x01");
        assert_eq!(bytes.len(), 9 + header_len + 8 + 2);
        assert_eq!(&bytes[bytes.len() - 2..], &[1, 0]);
        assert_eq!(ActivationDataset::from_bytes(&bytes).unwrap(), ds);
    }

    #[test]
    fn header_keys() {
        let bytes = indexed().to_bytes().unwrap();
        let header_len = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
        let v: serde_json::Value = serde_json::from_slice(&bytes[9..9 + header_len]).unwrap();
        for key in ["n", "l", "h", "d", "dtype", "labels", "meta"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
        assert_eq!(v["dtype"], "f32le");
        assert_eq!(v["meta"]["task"], "custom");
    }

    #[test]
    fn rejects_nan() {
        let x = Array4::from_shape_vec((1, 1, 1, 2), vec![f32::NAN, 1.0]).unwrap();
        assert!(matches!(
            ActivationDataset::new(x, vec![true], vec![false], meta()),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn bad_magic_and_truncation() {
        let mut bytes = indexed().to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[..4].copy_from_slice(b"XXXX");
        assert!(matches!(ActivationDataset::from_bytes(&bad), Err(Error::Format(_))));

        let mut wrong_version = bytes.clone();
        wrong_version[4] = 2;
        assert!(matches!(ActivationDataset::from_bytes(&wrong_version), Err(Error::Format(_))));

        bytes.truncate(bytes.len() - 3);
        assert!(matches!(ActivationDataset::from_bytes(&bytes), Err(Error::Truncated { .. })));
    }

    #[test]
    fn header_claims_more_examples_than_payload() {
        // N=10 declared, but only 9 examples of floats (and labels) present.
        let x = Array4::from_shape_fn((10, 1, 1, 3), |(i, _, _, k)| (i * 3 + k) as f32);
        let ds = ActivationDataset::new(x, vec![true; 10], vec![false; 10], meta()).unwrap();
        let bytes = ds.to_bytes().unwrap();
        let header_len = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
        let mut short = bytes[..9 + header_len + 9 * 3 * 4].to_vec();
        short.extend(std::iter::repeat_n(1u8, 18));
        assert!(matches!(ActivationDataset::from_bytes(&short), Err(Error::Truncated { .. })));
    }

    #[test]
    fn slice_head_index_arithmetic() {
        let ds = indexed();
        let m = ds.slice_head(1, 0).unwrap();
        assert_eq!(m, ndarray::arr2(&[[10.0], [110.0]]));
        assert_eq!(m, ds.slice_head(1, 0).unwrap());
        assert!(ds.slice_head(2, 0).is_err());
        assert!(ds.slice_head(0, 2).is_err());
    }

    #[test]
    fn slice_single_cell_is_flat_tensor() {
        let x = Array4::from_shape_fn((3, 1, 1, 2), |(i, _, _, k)| (i * 2 + k) as f32);
        let ds = ActivationDataset::new(x.clone(), vec![true; 3], vec![true; 3], meta()).unwrap();
        let m = ds.slice_head(0, 0).unwrap();
        let flat: Vec<f64> = x.iter().map(|&v| v as f64).collect();
        assert_eq!(m.iter().copied().collect::<Vec<_>>(), flat);
    }

    #[test]
    fn balanced_split_arithmetic() {
        let classes: Vec<JointClass> = (0..10)
            .map(|i| if i < 5 { JointClass::TP_TO } else { JointClass::FP_FO })
            .collect();
        let s = SplitAssignment::stratified(&classes, 7, 0.8).unwrap();
        assert_eq!(s.train.len(), 8);
        assert_eq!(s.val.len(), 2);
        assert_eq!(s.val.iter().filter(|&&i| i < 5).count(), 1);
        assert_eq!(s, SplitAssignment::stratified(&classes, 7, 0.8).unwrap());
    }

    #[test]
    fn split_errors() {
        let classes = vec![JointClass::TP_TO, JointClass::TP_TO, JointClass::FP_FO];
        assert!(matches!(
            SplitAssignment::stratified(&classes, 0, 0.8),
            Err(Error::Degenerate(_))
        ));
        let classes = vec![JointClass::TP_TO; 4];
        assert!(SplitAssignment::stratified(&classes, 0, 1.0).is_err());
        assert!(SplitAssignment::stratified(&classes, 0, 0.0).is_err());
    }

    #[test]
    fn different_seeds_give_different_val_sets() {
        let classes: Vec<JointClass> = (0..100).map(|i| JointClass::new(i % 4).unwrap()).collect();
        // Rerun the procedure over many seeds; nearly all val sets must be distinct.
        let sets: Vec<Vec<usize>> = (0..20)
            .map(|s| SplitAssignment::stratified(&classes, s, 0.8).unwrap().val)
            .collect();
        assert_ne!(sets[0], sets[1]);
        let mut uniq = sets.clone();
        uniq.sort();
        uniq.dedup();
        assert_eq!(uniq.len(), sets.len());
    }
}
