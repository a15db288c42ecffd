//! Two-dimensional views of head activations and static figure output.
//!
//! [`cca_fit`] reduces a head's activations to the two directions most
//! correlated with the label pair `[y_oracle, y_protagonist]`.
//! [`boundaries_2d`] then fits fresh probes in that plane, since projecting a
//! high-dimensional hyperplane does not give its 2-D decision line.

mod render;

pub use render::{
    artifact_stem, render_cca, render_curves, render_grid, render_scatter, render_strip, Rendered, ScatterPoint,
};

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::actstore::JointClass;
use crate::error::{Error, Result};
use crate::probekit::{accuracy, train_binary, train_multinomial, ProbeConfig, Standardizer};

/// Ridge added to the diagonal of both covariance blocks.
pub const CCA_RIDGE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CcaProjection {
    /// `D x 2`; column `i` is the i-th canonical direction in activation space.
    pub projection: Array2<f64>,
    /// `2 x 2`; column `i` pairs with `projection` column `i`.
    pub label_weights: Array2<f64>,
    /// Correlations of the projected fit set, descending.
    pub correlations: [f64; 2],
    pub x_mean: Array1<f64>,
    pub label_mean: Array1<f64>,
}

impl CcaProjection {
    pub fn dim(&self) -> usize {
        self.projection.nrows()
    }

    pub fn transform(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.dim() {
            return Err(Error::Dimension {
                expected: self.dim(),
                got: x.ncols(),
            });
        }
        Ok((&x - &self.x_mean).dot(&self.projection))
    }

    pub fn transform_labels(&self, labels: ArrayView2<f64>) -> Result<Array2<f64>> {
        if labels.ncols() != 2 {
            return Err(Error::Dimension { expected: 2, got: labels.ncols() });
        }
        Ok((&labels - &self.label_mean).dot(&self.label_weights))
    }
}

/// `[y_oracle, y_protagonist]` as a 0/1 matrix.
pub fn label_matrix(y_oracle: &[bool], y_protagonist: &[bool]) -> Result<Array2<f64>> {
    if y_oracle.len() != y_protagonist.len() {
        return Err(Error::Dimension {
            expected: y_oracle.len(),
            got: y_protagonist.len(),
        });
    }
    Ok(Array2::from_shape_fn((y_oracle.len(), 2), |(i, j)| {
        let v = if j == 0 { y_oracle[i] } else { y_protagonist[i] };
        v as u8 as f64
    }))
}

fn covariance(a: &Array2<f64>, b: &Array2<f64>) -> DMatrix<f64> {
    let c = a.t().dot(b) / (a.nrows() - 1) as f64;
    DMatrix::from_fn(c.nrows(), c.ncols(), |i, j| c[[i, j]])
}

fn inverse_sqrt(mut c: DMatrix<f64>) -> DMatrix<f64> {
    for i in 0..c.nrows() {
        c[(i, i)] += CCA_RIDGE;
    }
    let eig = SymmetricEigen::new(c);
    let inv = eig.eigenvalues.map(|v| 1.0 / v.max(f64::MIN_POSITIVE).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&inv) * eig.eigenvectors.transpose()
}

fn pearson(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    let (ma, mb) = (a.mean().unwrap(), b.mean().unwrap());
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        0.0
    } else {
        sab / (saa * sbb).sqrt()
    }
}

/// Regularized CCA between `x` (`N x D`, `D >= 2`) and a two-column label
/// matrix. Both views are centered here.
///
/// Whitens each view with `(C + ridge I)^(-1/2)` and takes the SVD of the
/// whitened cross-covariance. Each projection column is rescaled to unit
/// variance on the fit set and its sign fixed so that its first nonzero
/// entry is positive; the paired label weights flip with it.
pub fn cca_fit(x: ArrayView2<f64>, labels: ArrayView2<f64>) -> Result<CcaProjection> {
    let (n, d) = x.dim();
    if labels.dim() != (n, 2) {
        return Err(Error::Dimension {
            expected: n,
            got: labels.nrows(),
        });
    }
    if n < 3 || d < 2 {
        return Err(Error::invalid(format!("CCA needs at least 3 rows and 2 columns, got {n} x {d}")));
    }
    if x.iter().chain(labels.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("CCA input".into()));
    }
    let x_mean = x.mean_axis(Axis(0)).unwrap();
    let label_mean = labels.mean_axis(Axis(0)).unwrap();
    let xc = &x - &x_mean;
    let yc = &labels - &label_mean;
    for j in 0..2 {
        if yc.column(j).iter().all(|&v| v == 0.0) {
            return Err(Error::degenerate(format!("label column {j} is constant")));
        }
    }

    let kx = inverse_sqrt(covariance(&xc, &xc));
    let ky = inverse_sqrt(covariance(&yc, &yc));
    let m = &kx * covariance(&xc, &yc) * &ky;
    let svd = m.svd(true, true);
    let u = svd.u.expect("requested");
    let v_t = svd.v_t.expect("requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));

    let mut projection = Array2::zeros((d, 2));
    let mut label_weights = Array2::zeros((2, 2));
    let mut correlations = [0.0; 2];
    for (slot, &i) in order.iter().take(2).enumerate() {
        let a = &kx * u.column(i);
        let b = &ky * v_t.row(i).transpose();
        let mut a = Array1::from_iter(a.iter().cloned());
        let mut b = Array1::from_iter(b.iter().cloned());
        let pa = xc.dot(&a);
        let pb = yc.dot(&b);
        let sa = pa.std(1.0);
        let sb = pb.std(1.0);
        if sa == 0.0 || sb == 0.0 {
            return Err(Error::degenerate("canonical direction with zero variance"));
        }
        a /= sa;
        b /= sb;
        let sign = a.iter().find(|v| **v != 0.0).map_or(1.0, |v| v.signum());
        a *= sign;
        b *= sign;
        correlations[slot] = pearson(&xc.dot(&a), &yc.dot(&b)).clamp(0.0, 1.0);
        projection.column_mut(slot).assign(&a);
        label_weights.column_mut(slot).assign(&b);
    }
    if correlations[1] > correlations[0] {
        correlations.swap(0, 1);
        for m in [&mut projection, &mut label_weights] {
            let first = m.column(0).to_owned();
            let second = m.column(1).to_owned();
            m.column_mut(0).assign(&second);
            m.column_mut(1).assign(&first);
        }
    }
    Ok(CcaProjection {
        projection,
        label_weights,
        correlations,
        x_mean,
        label_mean,
    })
}

/// The line `w . z + b = 0` in raw 2-D coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Line {
    pub w: [f64; 2],
    pub b: f64,
}

impl Line {
    pub fn side(&self, z: [f64; 2]) -> bool {
        self.w[0] * z[0] + self.w[1] * z[1] + self.b > 0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseLine {
    pub classes: [JointClass; 2],
    /// Positive on the side of `classes[0]`.
    pub line: Line,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Boundaries2d {
    pub oracle: Line,
    pub protagonist: Line,
    pub oracle_accuracy: f64,
    pub protagonist_accuracy: f64,
    /// Per-class weight vectors of the 4-way probe in raw coordinates,
    /// centered across classes (the softmax is unchanged by a common shift).
    pub arrows: [[f64; 2]; 4],
    pub class_bias: [f64; 4],
    pub multinomial_accuracy: f64,
    pub pairwise: Vec<PairwiseLine>,
}

fn raw_affine(w: &[f64], b: f64, s: &Standardizer) -> ([f64; 2], f64) {
    let w_raw = [w[0] / s.std[0], w[1] / s.std[1]];
    let b_raw = b - w_raw[0] * s.mean[0] - w_raw[1] * s.mean[1];
    (w_raw, b_raw)
}

/// Fits oracle, protagonist and joint-class probes on 2-D coordinates.
pub fn boundaries_2d(
    coords: ArrayView2<f64>,
    y_oracle: &[bool],
    y_protagonist: &[bool],
    cfg: &ProbeConfig,
) -> Result<Boundaries2d> {
    if coords.ncols() != 2 {
        return Err(Error::Dimension {
            expected: 2,
            got: coords.ncols(),
        });
    }
    let binary = |y: &[bool]| -> Result<(Line, f64)> {
        let p = train_binary(coords, y, cfg)?;
        let (w, b) = raw_affine(p.weights(), p.bias(), p.standardizer());
        let acc = accuracy(&p.predict_labels(coords)?, y, None)?;
        Ok((Line { w, b }, acc))
    };
    let (oracle, oracle_accuracy) = binary(y_oracle)?;
    let (protagonist, protagonist_accuracy) = binary(y_protagonist)?;

    let classes: Vec<JointClass> = y_oracle
        .iter()
        .zip(y_protagonist)
        .map(|(&o, &p)| JointClass::from_labels(o, p))
        .collect();
    let m = train_multinomial(coords, &classes, cfg)?;
    let multinomial_accuracy = accuracy(&m.predict_classes(coords)?, &classes, None)?;
    let mut arrows = [[0.0; 2]; 4];
    let mut class_bias = [0.0; 4];
    for c in 0..4 {
        let col: Vec<f64> = m.weights().column(c).to_vec();
        let (w, b) = raw_affine(&col, m.bias()[c], m.standardizer());
        arrows[c] = w;
        class_bias[c] = b;
    }
    let centre = [0, 1].map(|k| arrows.iter().map(|a| a[k]).sum::<f64>() / 4.0);
    let bias_centre = class_bias.iter().sum::<f64>() / 4.0;
    for c in 0..4 {
        arrows[c][0] -= centre[0];
        arrows[c][1] -= centre[1];
        class_bias[c] -= bias_centre;
    }
    let mut pairwise = Vec::with_capacity(6);
    for i in 0..4 {
        for j in i + 1..4 {
            pairwise.push(PairwiseLine {
                classes: [JointClass::new(i)?, JointClass::new(j)?],
                line: Line {
                    w: [arrows[i][0] - arrows[j][0], arrows[i][1] - arrows[j][1]],
                    b: class_bias[i] - class_bias[j],
                },
            });
        }
    }
    Ok(Boundaries2d {
        oracle,
        protagonist,
        oracle_accuracy,
        protagonist_accuracy,
        arrows,
        class_bias,
        multinomial_accuracy,
        pairwise,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::actstore::HeadCoord;
    use crate::toylab::{synth_dataset, LabelScheme, PlantedHead, SynthConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn noise(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        Array2::from_shape_fn((n, d), |_| rng.sample(StandardNormal))
    }

    fn labels(n: usize, rng: &mut ChaCha8Rng) -> (Vec<bool>, Vec<bool>) {
        (0..n).map(|_| (rng.random_bool(0.5), rng.random_bool(0.5))).unzip()
    }

    #[test]
    fn recovers_a_planted_coordinate() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (yo, yp) = labels(300, &mut rng);
        let mut x = noise(300, 6, &mut rng);
        for i in 0..300 {
            x[[i, 0]] = yo[i] as u8 as f64;
        }
        let y = label_matrix(&yo, &yp).unwrap();
        let cca = cca_fit(x.view(), y.view()).unwrap();
        assert!(cca.correlations[0] >= 0.99, "{:?}", cca.correlations);
        let col = cca.projection.column(0);
        let cos = col[0].abs() / col.dot(&col).sqrt();
        assert!(cos >= 0.95, "{cos}");
        assert!(col[0] > 0.0);
    }

    #[test]
    fn projections_have_unit_variance_and_stated_correlations() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (yo, yp) = labels(200, &mut rng);
        let mut x = noise(200, 5, &mut rng);
        for i in 0..200 {
            x[[i, 1]] += 0.7 * yo[i] as u8 as f64;
            x[[i, 3]] -= 0.4 * yp[i] as u8 as f64;
        }
        let y = label_matrix(&yo, &yp).unwrap();
        let cca = cca_fit(x.view(), y.view()).unwrap();
        let zx = cca.transform(x.view()).unwrap();
        let zy = cca.transform_labels(y.view()).unwrap();
        for i in 0..2 {
            assert!((zx.column(i).std(1.0) - 1.0).abs() < 1e-9);
            let r = pearson(&zx.column(i).to_owned(), &zy.column(i).to_owned());
            assert!((r - cca.correlations[i]).abs() < 1e-6);
        }
        assert!(cca.correlations[0] >= cca.correlations[1]);
    }

    #[test]
    fn independent_data_stays_uncorrelated() {
        for trial in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + trial);
            let (yo, yp) = labels(500, &mut rng);
            let x = noise(500, 8, &mut rng);
            let cca = cca_fit(x.view(), label_matrix(&yo, &yp).unwrap().view()).unwrap();
            assert!(cca.correlations[0] <= 0.3, "{:?}", cca.correlations);
        }
    }

    #[test]
    fn rejects_constant_labels() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = noise(20, 3, &mut rng);
        let yo = vec![true; 20];
        let yp: Vec<bool> = (0..20).map(|i| i % 2 == 0).collect();
        let err = cca_fit(x.view(), label_matrix(&yo, &yp).unwrap().view()).unwrap_err();
        assert!(matches!(err, Error::Degenerate(_)));
    }

    #[test]
    fn separable_clusters_get_clean_boundaries() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut coords = Array2::zeros((80, 2));
        let mut yo = Vec::new();
        let mut yp = Vec::new();
        for i in 0..80 {
            let (o, p) = (i % 2 == 0, (i / 2) % 2 == 0);
            coords[[i, 0]] = if o { 5.0 } else { -5.0 } + 0.3 * rng.sample::<f64, _>(StandardNormal);
            coords[[i, 1]] = if p { 5.0 } else { -5.0 } + 0.3 * rng.sample::<f64, _>(StandardNormal);
            yo.push(o);
            yp.push(p);
        }
        let b = boundaries_2d(coords.view(), &yo, &yp, &ProbeConfig::default()).unwrap();
        assert_eq!(b.oracle_accuracy, 1.0);
        assert_eq!(b.protagonist_accuracy, 1.0);
        assert_eq!(b.multinomial_accuracy, 1.0);
        for i in 0..80 {
            assert_eq!(b.oracle.side([coords[[i, 0]], coords[[i, 1]]]), yo[i]);
        }
        let sum: f64 = b.arrows.iter().map(|a| a[0] + a[1]).sum();
        assert!(sum.abs() < 1e-9);
        assert_eq!(b.pairwise.len(), 6);
    }

    #[test]
    fn planted_direction_survives_projection() {
        let head = HeadCoord::new(0, 0);
        let s = synth_dataset(&SynthConfig {
            n: 400,
            layers: 1,
            heads: 1,
            head_dim: 8,
            planted: vec![PlantedHead::orthogonal(head, 8, 4.0, 1.0).unwrap()],
            labels: LabelScheme::Balanced,
            background_noise: 1.0,
            seed: 9,
        })
        .unwrap();
        let ds = &s.dataset;
        let x = ds.slice_head(0, 0).unwrap();
        let cca = cca_fit(x.view(), label_matrix(ds.y_oracle(), ds.y_protagonist()).unwrap().view()).unwrap();
        let z = cca.transform(x.view()).unwrap();
        let b = boundaries_2d(z.view(), ds.y_oracle(), ds.y_protagonist(), &ProbeConfig::default()).unwrap();

        let truth = Array2::from_shape_vec((1, 8), s.mean_difference(head, JointClass::TP_FO).unwrap()).unwrap();
        let t2 = truth.dot(&cca.projection);
        let arrow = b.arrows[JointClass::TP_FO.index()];
        let cos = (arrow[0] * t2[[0, 0]] + arrow[1] * t2[[0, 1]])
            / ((arrow[0].powi(2) + arrow[1].powi(2)).sqrt() * (t2[[0, 0]].powi(2) + t2[[0, 1]].powi(2)).sqrt());
        assert!(cos >= 15f64.to_radians().cos(), "cos {cos}");
    }
}
