//! Reverse-mode gradient of a head's projection onto a direction with respect
//! to the input embeddings.

use ndarray::{s, Array2, Axis};
use serde::{Deserialize, Serialize};

use super::forward::{Capture, LayerCache};
use super::{gelu_grad, LayerWeights, ToyTransformer};
use crate::actstore::HeadCoord;
use crate::error::{Error, Result};
use crate::steering::UNIT_TOLERANCE;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenAttribution {
    pub token_index: usize,
    pub token_id: usize,
    pub magnitude: f64,
}

fn check_theta(model: &ToyTransformer, head: HeadCoord, theta: &[f64]) -> Result<()> {
    model.check_head(head)?;
    if theta.len() != model.cfg.d_head {
        return Err(Error::Dimension {
            expected: model.cfg.d_head,
            got: theta.len(),
        });
    }
    let norm = theta.iter().map(|v| v * v).sum::<f64>().sqrt();
    if (norm - 1.0).abs() > UNIT_TOLERANCE {
        return Err(Error::invalid(format!("theta has norm {norm}, expected 1")));
    }
    Ok(())
}

/// `s = z_head(final token) . theta` for the embedding input `x`.
pub fn head_score(model: &ToyTransformer, x: &Array2<f64>, head: HeadCoord, theta: &[f64]) -> Result<f64> {
    check_theta(model, head, theta)?;
    let out = model.forward_embeddings(x.clone(), Some(&Capture::heads(vec![head])), None)?;
    let z = out.head(head).expect("requested head is captured");
    Ok(z.row(0).iter().zip(theta).map(|(a, b)| a * b).sum())
}

/// Gradient of [`head_score`] with respect to every entry of `x`.
pub fn head_score_gradient(model: &ToyTransformer, x: &Array2<f64>, head: HeadCoord, theta: &[f64]) -> Result<Array2<f64>> {
    check_theta(model, head, theta)?;
    let pass = model.run(x.clone(), None, None)?;
    let t_len = x.nrows();
    let dh = model.cfg.d_head;

    let mut dz = Array2::zeros((t_len, model.cfg.d_model));
    for (j, &v) in theta.iter().enumerate() {
        dz[[t_len - 1, head.head * dh + j]] = v;
    }
    let target = &model.layers[head.layer];
    let mut dx = attention_backward(target, &pass.caches[head.layer], &dz, dh);
    for l in (0..head.layer).rev() {
        dx = layer_backward(&model.layers[l], &pass.caches[l], &dx, dh);
    }
    Ok(dx)
}

/// Per-token L2 norm of the score gradient, scaled so the largest is 1
/// (left unscaled when every gradient is zero).
pub fn grad_attribution(
    model: &ToyTransformer,
    tokens: &[usize],
    head: HeadCoord,
    theta: &[f64],
) -> Result<Vec<TokenAttribution>> {
    if tokens.is_empty() {
        return Err(Error::invalid("attribution needs at least one token"));
    }
    let x = model.embed(tokens)?;
    let g = head_score_gradient(model, &x, head, theta)?;
    let norms: Vec<f64> = g.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
    let max = norms.iter().cloned().fold(0.0, f64::max);
    let scale = if max > 0.0 { 1.0 / max } else { 1.0 };
    Ok(tokens
        .iter()
        .zip(norms)
        .enumerate()
        .map(|(i, (&id, n))| TokenAttribution {
            token_index: i,
            token_id: id,
            magnitude: n * scale,
        })
        .collect())
}

/// Gradient with respect to the layer input of a loss whose gradient with
/// respect to the concatenated head outputs is `dz`.
fn attention_backward(w: &LayerWeights, c: &LayerCache, dz: &Array2<f64>, dh: usize) -> Array2<f64> {
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = Array2::zeros(c.q.raw_dim());
    let mut dk = Array2::zeros(c.k.raw_dim());
    let mut dv = Array2::zeros(c.v.raw_dim());
    for (h, p) in c.probs.iter().enumerate() {
        let cols = s![.., h * dh..(h + 1) * dh];
        let dzh = dz.slice(cols);
        if dzh.iter().all(|&v| v == 0.0) {
            continue;
        }
        let dp = dzh.dot(&c.v.slice(cols).t());
        dv.slice_mut(cols).assign(&p.t().dot(&dzh));
        let row_dot = (&dp * p).sum_axis(Axis(1)).insert_axis(Axis(1));
        let ds = p * &(&dp - &row_dot) * scale;
        dq.slice_mut(cols).assign(&ds.dot(&c.k.slice(cols)));
        dk.slice_mut(cols).assign(&ds.t().dot(&c.q.slice(cols)));
    }
    let dy1 = dq.dot(&w.wq.t()) + dk.dot(&w.wk.t()) + dv.dot(&w.wv.t());
    c.ln1.backward(&dy1, &w.ln1_gain)
}

fn layer_backward(w: &LayerWeights, c: &LayerCache, d_out: &Array2<f64>, dh: usize) -> Array2<f64> {
    let d_act = d_out.dot(&w.w2.t());
    let d_h1 = d_act * &c.h1.mapv(gelu_grad);
    let d_y2 = d_h1.dot(&w.w1.t());
    let d_mid = d_out + &c.ln2.backward(&d_y2, &w.ln2_gain);
    let dz = d_mid.dot(&w.wo.t());
    &d_mid + &attention_backward(w, c, &dz, dh)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::steering::random_direction;
    use crate::toylab::ToyConfig;

    fn rel_err(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        let diff = (a - b).mapv(|v| v * v).sum().sqrt();
        let scale = a.mapv(|v| v * v).sum().sqrt().max(b.mapv(|v| v * v).sum().sqrt());
        diff / scale
    }

    fn finite_difference(m: &ToyTransformer, x: &Array2<f64>, head: HeadCoord, theta: &[f64]) -> Array2<f64> {
        let h = 1e-5;
        let mut g = Array2::zeros(x.raw_dim());
        let mut xp = x.clone();
        for i in 0..x.nrows() {
            for j in 0..x.ncols() {
                xp[[i, j]] = x[[i, j]] + h;
                let up = head_score(m, &xp, head, theta).unwrap();
                xp[[i, j]] = x[[i, j]] - h;
                let down = head_score(m, &xp, head, theta).unwrap();
                xp[[i, j]] = x[[i, j]];
                g[[i, j]] = (up - down) / (2.0 * h);
            }
        }
        g
    }

    #[test]
    fn gradient_matches_finite_differences_at_every_depth() {
        let m = ToyTransformer::init(ToyConfig::with_seed(21)).unwrap();
        let x = m.embed(&[5, 17, 2, 40, 8, 11]).unwrap();
        for layer in 0..4 {
            let head = HeadCoord::new(layer, (layer + 1) % 4);
            let theta = random_direction(8, layer as u64).unwrap();
            let g = head_score_gradient(&m, &x, head, &theta).unwrap();
            let fd = finite_difference(&m, &x, head, &theta);
            assert!(rel_err(&g, &fd) < 1e-6, "layer {layer}: {}", rel_err(&g, &fd));
        }
    }

    #[test]
    fn unreachable_direction_gives_zero() {
        let mut m = ToyTransformer::init(ToyConfig::with_seed(2)).unwrap();
        // Head 1 of layer 2 can never output anything along its first axis.
        m.layers[2].wv.column_mut(8).fill(0.0);
        let mut theta = vec![0.0; 8];
        theta[0] = 1.0;
        let a = grad_attribution(&m, &[1, 2, 3], HeadCoord::new(2, 1), &theta).unwrap();
        assert!(a.iter().all(|t| t.magnitude == 0.0));
    }

    #[test]
    fn planted_marker_dominates() {
        let mut m = ToyTransformer::init(ToyConfig::with_seed(4)).unwrap();
        m.plant_marker_head(2, 63).unwrap();
        let theta = random_direction(8, 5).unwrap();
        let toks = [10, 11, 63, 12, 13, 14];
        let a = grad_attribution(&m, &toks, HeadCoord::new(0, 2), &theta).unwrap();
        let best = a.iter().max_by(|x, y| x.magnitude.total_cmp(&y.magnitude)).unwrap();
        assert_eq!(best.token_index, 2);
        assert_eq!(best.magnitude, 1.0);
    }

    #[test]
    fn rejects_bad_theta() {
        let m = ToyTransformer::init(ToyConfig::with_seed(2)).unwrap();
        assert!(grad_attribution(&m, &[1], HeadCoord::new(0, 0), &[1.0; 8]).is_err());
        assert!(grad_attribution(&m, &[1], HeadCoord::new(0, 0), &[1.0]).is_err());
        assert!(grad_attribution(&m, &[], HeadCoord::new(0, 0), &random_direction(8, 1).unwrap()).is_err());
    }
}
