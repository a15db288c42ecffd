//! Regularized training objectives with analytic gradients.
//!
//! Every objective is a mean cross-entropy over the rows of an (already
//! standardized) feature matrix plus `lambda / 2` times the squared norm of
//! the weight parameters. Biases are never penalized.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

pub trait Objective {
    fn dim(&self) -> usize;

    /// Writes the gradient into `grad` and returns the objective value.
    fn eval(&self, params: &[f64], grad: &mut [f64]) -> f64;

    fn value(&self, params: &[f64]) -> f64 {
        let mut scratch = vec![0.0; self.dim()];
        self.eval(params, &mut scratch)
    }
}

/// `log(1 + exp(z))` without overflow.
pub fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax, shifted by the row maximum.
pub fn softmax_rows(mut z: Array2<f64>) -> Array2<f64> {
    for mut row in z.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    z
}

fn log_sum_exp(row: ArrayView1<f64>) -> f64 {
    let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Binary logistic regression; parameters are `[w_0 .. w_{D-1}, b]`.
pub struct BinaryLogistic<'a> {
    pub x: ArrayView2<'a, f64>,
    pub y: Vec<f64>,
    pub lambda: f64,
}

impl<'a> BinaryLogistic<'a> {
    pub fn new(x: ArrayView2<'a, f64>, y: &[bool], lambda: f64) -> Self {
        BinaryLogistic {
            x,
            y: y.iter().map(|&b| b as u8 as f64).collect(),
            lambda,
        }
    }
}

impl Objective for BinaryLogistic<'_> {
    fn dim(&self) -> usize {
        self.x.ncols() + 1
    }

    fn eval(&self, params: &[f64], grad: &mut [f64]) -> f64 {
        let d = self.x.ncols();
        let n = self.x.nrows() as f64;
        let w = ArrayView1::from(&params[..d]);
        let b = params[d];
        let z = self.x.dot(&w) + b;

        let mut loss = 0.0;
        let mut resid = Array1::zeros(z.len());
        for (i, &zi) in z.iter().enumerate() {
            // y=1 contributes softplus(-z), y=0 contributes softplus(z).
            loss += if self.y[i] > 0.5 { softplus(-zi) } else { softplus(zi) };
            resid[i] = sigmoid(zi) - self.y[i];
        }
        let gw = self.x.t().dot(&resid) / n;
        for k in 0..d {
            grad[k] = gw[k] + self.lambda * w[k];
        }
        grad[d] = resid.sum() / n;
        loss / n + 0.5 * self.lambda * w.dot(&w)
    }
}

/// Multinomial logistic regression over `classes` outputs; parameters are the
/// `D x C` weight matrix in row-major order followed by the `C` biases.
pub struct SoftmaxRegression<'a> {
    pub x: ArrayView2<'a, f64>,
    pub y: Vec<usize>,
    pub classes: usize,
    pub lambda: f64,
}

impl Objective for SoftmaxRegression<'_> {
    fn dim(&self) -> usize {
        (self.x.ncols() + 1) * self.classes
    }

    fn eval(&self, params: &[f64], grad: &mut [f64]) -> f64 {
        let (d, c) = (self.x.ncols(), self.classes);
        let n = self.x.nrows() as f64;
        let w = ArrayView2::from_shape((d, c), &params[..d * c]).unwrap();
        let b = ArrayView1::from(&params[d * c..]);
        let z = self.x.dot(&w) + b;

        let mut loss = 0.0;
        for (row, &yi) in z.rows().into_iter().zip(&self.y) {
            loss += log_sum_exp(row) - row[yi];
        }
        let mut resid = softmax_rows(z);
        for (i, &yi) in self.y.iter().enumerate() {
            resid[[i, yi]] -= 1.0;
        }
        let gw = self.x.t().dot(&resid) / n + &(&w * self.lambda);
        let gb = resid.sum_axis(Axis(0)) / n;
        grad[..d * c].copy_from_slice(gw.as_slice().unwrap());
        grad[d * c..].copy_from_slice(gb.as_slice().unwrap());
        loss / n + 0.5 * self.lambda * w.iter().map(|v| v * v).sum::<f64>()
    }
}

/// One-hidden-layer rectified-linear network with a softmax output.
/// Parameters: `W1 (D x H)`, `b1 (H)`, `W2 (H x C)`, `b2 (C)`, row-major.
pub struct MlpClassifier<'a> {
    pub x: ArrayView2<'a, f64>,
    pub y: Vec<usize>,
    pub hidden: usize,
    pub classes: usize,
    pub lambda: f64,
}

pub(crate) struct MlpParams<'p> {
    pub w1: ArrayView2<'p, f64>,
    pub b1: ArrayView1<'p, f64>,
    pub w2: ArrayView2<'p, f64>,
    pub b2: ArrayView1<'p, f64>,
}

pub(crate) fn mlp_views(params: &[f64], d: usize, h: usize, c: usize) -> MlpParams<'_> {
    let (o1, o2, o3) = (d * h, d * h + h, d * h + h + h * c);
    MlpParams {
        w1: ArrayView2::from_shape((d, h), &params[..o1]).unwrap(),
        b1: ArrayView1::from(&params[o1..o2]),
        w2: ArrayView2::from_shape((h, c), &params[o2..o3]).unwrap(),
        b2: ArrayView1::from(&params[o3..]),
    }
}

pub fn mlp_param_count(d: usize, hidden: usize, classes: usize) -> usize {
    d * hidden + hidden + hidden * classes + classes
}

impl Objective for MlpClassifier<'_> {
    fn dim(&self) -> usize {
        mlp_param_count(self.x.ncols(), self.hidden, self.classes)
    }

    fn eval(&self, params: &[f64], grad: &mut [f64]) -> f64 {
        let (d, h, c) = (self.x.ncols(), self.hidden, self.classes);
        let n = self.x.nrows() as f64;
        let p = mlp_views(params, d, h, c);

        let pre = self.x.dot(&p.w1) + p.b1;
        let act = pre.mapv(|v| v.max(0.0));
        let z = act.dot(&p.w2) + p.b2;

        let mut loss = 0.0;
        for (row, &yi) in z.rows().into_iter().zip(&self.y) {
            loss += log_sum_exp(row) - row[yi];
        }
        let mut dz = softmax_rows(z);
        for (i, &yi) in self.y.iter().enumerate() {
            dz[[i, yi]] -= 1.0;
        }
        dz /= n;

        let gw2 = act.t().dot(&dz) + &(&p.w2 * self.lambda);
        let gb2 = dz.sum_axis(Axis(0));
        let mut dpre = dz.dot(&p.w2.t());
        ndarray::Zip::from(&mut dpre).and(&pre).for_each(|g, &v| {
            if v <= 0.0 {
                *g = 0.0;
            }
        });
        let gw1 = self.x.t().dot(&dpre) + &(&p.w1 * self.lambda);
        let gb1 = dpre.sum_axis(Axis(0));

        let (o1, o2, o3) = (d * h, d * h + h, d * h + h + h * c);
        grad[..o1].copy_from_slice(gw1.as_standard_layout().as_slice().unwrap());
        grad[o1..o2].copy_from_slice(gb1.as_slice().unwrap());
        grad[o2..o3].copy_from_slice(gw2.as_standard_layout().as_slice().unwrap());
        grad[o3..].copy_from_slice(gb2.as_slice().unwrap());

        let reg = p.w1.iter().chain(p.w2.iter()).map(|v| v * v).sum::<f64>();
        loss / n + 0.5 * self.lambda * reg
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stable_scalar_functions() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((sigmoid(2.0) - 0.880797077977882).abs() < 1e-12);
        assert!((softplus(-800.0)).abs() < 1e-300);
        assert!((softplus(800.0) - 800.0).abs() < 1e-12);
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn softmax_reference_values() {
        let p = softmax_rows(ndarray::arr2(&[[0.0, 1.0, 2.0, 3.0]]));
        let expect = [0.0320586, 0.0871443, 0.2368828, 0.6439143];
        for (a, b) in p.iter().zip(expect) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    /// Norm-wise relative error between the analytic gradient and central
    /// differences.
    fn gradient_error(obj: &dyn Objective, params: &[f64]) -> f64 {
        let mut g = vec![0.0; obj.dim()];
        obj.eval(params, &mut g);
        let h = 1e-6;
        let mut p = params.to_vec();
        let fd: Vec<f64> = (0..params.len())
            .map(|i| {
                p[i] = params[i] + h;
                let up = obj.value(&p);
                p[i] = params[i] - h;
                let down = obj.value(&p);
                p[i] = params[i];
                (up - down) / (2.0 * h)
            })
            .collect();
        let diff: f64 = g.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale = g.iter().map(|v| v * v).sum::<f64>().sqrt().max(fd.iter().map(|v| v * v).sum::<f64>().sqrt());
        diff / scale
    }

    fn fixture() -> (Array2<f64>, Vec<f64>) {
        let x = Array2::from_shape_fn((7, 3), |(i, j)| ((i * 3 + j) as f64 * 0.77).sin() * 1.5);
        let params: Vec<f64> = (0..64).map(|k| (k as f64 * 1.3).cos() * 0.4).collect();
        (x, params)
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        let (x, params) = fixture();
        let y = [true, false, true, true, false, false, true];
        let bin = BinaryLogistic::new(x.view(), &y, 1e-3);
        assert!(gradient_error(&bin, &params[..bin.dim()]) < 1e-6);

        let soft = SoftmaxRegression {
            x: x.view(),
            y: vec![0, 1, 2, 3, 1, 2, 0],
            classes: 4,
            lambda: 1e-3,
        };
        assert!(gradient_error(&soft, &params[..soft.dim()]) < 1e-6);

        let mlp = MlpClassifier {
            x: x.view(),
            y: vec![0, 1, 2, 3, 1, 2, 0],
            hidden: 5,
            classes: 4,
            lambda: 1e-3,
        };
        assert_eq!(mlp.dim(), 3 * 5 + 5 + 5 * 4 + 4);
        assert!(gradient_error(&mlp, &params[..mlp.dim()]) < 1e-5);
    }

    #[test]
    fn logistic_loss_is_convex_along_segments() {
        let (x, params) = fixture();
        let y = [true, false, true, true, false, false, true];
        let obj = BinaryLogistic::new(x.view(), &y, 1e-3);
        let a = &params[..4];
        let b: Vec<f64> = params[10..14].iter().map(|v| v * 5.0).collect();
        for k in 1..10 {
            let t = k as f64 / 10.0;
            let mid: Vec<f64> = a.iter().zip(&b).map(|(p, q)| (1.0 - t) * p + t * q).collect();
            assert!(obj.value(&mid) <= (1.0 - t) * obj.value(a) + t * obj.value(&b) + 1e-12);
        }
    }
}
