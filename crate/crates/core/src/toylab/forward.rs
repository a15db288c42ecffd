use ndarray::{s, Array1, Array2, ArrayView1};

use super::{gelu, layer_norm, LnCache, ToyTransformer};
use crate::actstore::HeadCoord;
use crate::error::{Error, Result};
use crate::steering::{InterventionSpec, Positions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CapturePositions {
    /// Only the last token of the sequence.
    #[default]
    Final,
    All,
}

/// What a forward pass should record besides logits.
#[derive(Debug, Clone, Default)]
pub struct Capture {
    pub heads: Vec<HeadCoord>,
    pub positions: CapturePositions,
    /// Record head outputs after the intervention shift instead of before.
    pub post_intervention: bool,
    /// Record the residual stream around every layer.
    pub residual: bool,
}

impl Capture {
    pub fn heads(heads: Vec<HeadCoord>) -> Self {
        Capture {
            heads,
            ..Default::default()
        }
    }

    pub fn residual() -> Self {
        Capture {
            residual: true,
            ..Default::default()
        }
    }
}

/// Head-space output of one head (after attention mixing, before the
/// output projection). Rows are the captured positions.
#[derive(Debug, Clone, PartialEq)]
pub struct CapturedHead {
    pub head: HeadCoord,
    pub values: Array2<f64>,
}

/// Residual stream entering a layer, after its attention block, and after
/// its MLP block.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace {
    pub input: Array2<f64>,
    pub mid: Array2<f64>,
    pub output: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    /// `seq_len x vocab_size`.
    pub logits: Array2<f64>,
    pub heads: Vec<CapturedHead>,
    pub residual: Vec<LayerTrace>,
}

impl ForwardOutput {
    pub fn head(&self, head: HeadCoord) -> Option<&Array2<f64>> {
        self.heads.iter().find(|c| c.head == head).map(|c| &c.values)
    }

    pub fn last_logits(&self) -> ArrayView1<'_, f64> {
        self.logits.row(self.logits.nrows() - 1)
    }
}

/// Intermediate values of one layer, kept for the backward pass.
pub(crate) struct LayerCache {
    pub ln1: LnCache,
    pub q: Array2<f64>,
    pub k: Array2<f64>,
    pub v: Array2<f64>,
    /// Per head, `T x T` causal attention weights.
    pub probs: Vec<Array2<f64>>,
    pub ln2: LnCache,
    pub h1: Array2<f64>,
}

pub(crate) struct Pass {
    pub output: ForwardOutput,
    pub caches: Vec<LayerCache>,
}

/// Per layer, the `(head, shift vector, positions)` triples of a spec.
type Shifts = Vec<Vec<(usize, Array1<f64>, Positions)>>;

/// Index of the largest logit; ties go to the smaller token id.
pub fn argmax(row: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

impl ToyTransformer {
    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::invalid("token sequence is empty"));
        }
        if tokens.len() > self.cfg.max_seq_len {
            return Err(Error::OutOfRange {
                what: "sequence length",
                index: tokens.len(),
                limit: self.cfg.max_seq_len,
            });
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.cfg.vocab_size) {
            return Err(Error::OutOfRange {
                what: "token id",
                index: t,
                limit: self.cfg.vocab_size,
            });
        }
        Ok(())
    }

    /// Token plus position embeddings, `seq_len x d_model`.
    pub fn embed(&self, tokens: &[usize]) -> Result<Array2<f64>> {
        self.check_tokens(tokens)?;
        let mut x = Array2::zeros((tokens.len(), self.cfg.d_model));
        for (t, &id) in tokens.iter().enumerate() {
            let row = &self.tok_emb.row(id) + &self.pos_emb.row(t);
            x.row_mut(t).assign(&row);
        }
        Ok(x)
    }

    fn shifts(&self, spec: Option<&InterventionSpec>) -> Result<Shifts> {
        let mut out: Shifts = vec![Vec::new(); self.cfg.n_layers];
        let Some(spec) = spec else { return Ok(out) };
        spec.validate()?;
        for e in &spec.entries {
            self.check_head(e.coord())?;
            if e.theta.len() != self.cfg.d_head {
                return Err(Error::Dimension {
                    expected: self.cfg.d_head,
                    got: e.theta.len(),
                });
            }
            let shift = Array1::from(e.theta.clone()) * (spec.alpha * e.sigma);
            out[e.layer].push((e.head, shift, spec.positions));
        }
        Ok(out)
    }

    pub fn forward(
        &self,
        tokens: &[usize],
        capture: Option<&Capture>,
        spec: Option<&InterventionSpec>,
    ) -> Result<ForwardOutput> {
        Ok(self.run(self.embed(tokens)?, capture, spec)?.output)
    }

    /// Forward pass from an explicit `seq_len x d_model` input, as produced
    /// by [`ToyTransformer::embed`].
    pub fn forward_embeddings(
        &self,
        x: Array2<f64>,
        capture: Option<&Capture>,
        spec: Option<&InterventionSpec>,
    ) -> Result<ForwardOutput> {
        Ok(self.run(x, capture, spec)?.output)
    }

    pub(crate) fn run(&self, mut x: Array2<f64>, capture: Option<&Capture>, spec: Option<&InterventionSpec>) -> Result<Pass> {
        let (t_len, dh) = (x.nrows(), self.cfg.d_head);
        if t_len == 0 || t_len > self.cfg.max_seq_len || x.ncols() != self.cfg.d_model {
            return Err(Error::Dimension {
                expected: self.cfg.d_model,
                got: x.ncols(),
            });
        }
        let shifts = self.shifts(spec)?;
        let default_capture = Capture::default();
        let capture = capture.unwrap_or(&default_capture);
        for &h in &capture.heads {
            self.check_head(h)?;
        }
        let scale = 1.0 / (dh as f64).sqrt();

        let mut captured = Vec::new();
        let mut residual = Vec::new();
        let mut caches = Vec::with_capacity(self.cfg.n_layers);
        for (l, w) in self.layers.iter().enumerate() {
            let input = x.clone();
            let (y1, ln1) = layer_norm(&x, &w.ln1_gain, &w.ln1_bias);
            let q = y1.dot(&w.wq);
            let k = y1.dot(&w.wk);
            let v = y1.dot(&w.wv);
            let mut z = Array2::zeros((t_len, self.cfg.d_model));
            let mut probs = Vec::with_capacity(self.cfg.n_heads);
            for h in 0..self.cfg.n_heads {
                let cols = s![.., h * dh..(h + 1) * dh];
                let scores = q.slice(cols).dot(&k.slice(cols).t()) * scale;
                let p = causal_softmax(scores);
                z.slice_mut(cols).assign(&p.dot(&v.slice(cols)));
                probs.push(p);
            }
            let mut shifted = z.clone();
            for (h, shift, positions) in &shifts[l] {
                let rows = match positions {
                    Positions::All => 0..t_len,
                    Positions::Last => t_len - 1..t_len,
                };
                for t in rows {
                    let mut seg = shifted.slice_mut(s![t, h * dh..(h + 1) * dh]);
                    seg += shift;
                }
            }
            for &hc in capture.heads.iter().filter(|hc| hc.layer == l) {
                let src = if capture.post_intervention { &shifted } else { &z };
                let rows = match capture.positions {
                    CapturePositions::Final => t_len - 1..t_len,
                    CapturePositions::All => 0..t_len,
                };
                captured.push(CapturedHead {
                    head: hc,
                    values: src.slice(s![rows, hc.head * dh..(hc.head + 1) * dh]).to_owned(),
                });
            }
            x += &shifted.dot(&w.wo);
            let mid = if capture.residual { Some(x.clone()) } else { None };

            let (y2, ln2) = layer_norm(&x, &w.ln2_gain, &w.ln2_bias);
            let h1 = y2.dot(&w.w1) + &w.b1;
            let act = h1.mapv(gelu);
            x += &(act.dot(&w.w2) + &w.b2);
            if let Some(mid) = mid {
                residual.push(LayerTrace {
                    input,
                    mid,
                    output: x.clone(),
                });
            }
            caches.push(LayerCache {
                ln1,
                q,
                k,
                v,
                probs,
                ln2,
                h1,
            });
        }
        let (yf, _) = layer_norm(&x, &self.lnf_gain, &self.lnf_bias);
        let logits = yf.dot(&self.unembed);
        // Report captures in request order.
        captured.sort_by_key(|c: &CapturedHead| capture.heads.iter().position(|h| *h == c.head));
        Ok(Pass {
            output: ForwardOutput {
                logits,
                heads: captured,
                residual,
            },
            caches,
        })
    }

    /// Greedy decoding. Returns the prompt followed by `max_new` generated
    /// tokens; the intervention, if any, is applied on every step.
    pub fn generate(&self, prompt: &[usize], max_new: usize, spec: Option<&InterventionSpec>) -> Result<Vec<usize>> {
        self.check_tokens(prompt)?;
        if prompt.len() + max_new > self.cfg.max_seq_len {
            return Err(Error::OutOfRange {
                what: "prompt length + max_new",
                index: prompt.len() + max_new,
                limit: self.cfg.max_seq_len,
            });
        }
        let mut tokens = prompt.to_vec();
        for _ in 0..max_new {
            let out = self.forward(&tokens, None, spec)?;
            tokens.push(argmax(out.last_logits()));
        }
        Ok(tokens)
    }
}

fn causal_softmax(mut scores: Array2<f64>) -> Array2<f64> {
    for (i, mut row) in scores.rows_mut().into_iter().enumerate() {
        let m = row.slice(s![..=i]).fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut sum = 0.0;
        for (j, v) in row.iter_mut().enumerate() {
            if j <= i {
                *v = (*v - m).exp();
                sum += *v;
            } else {
                *v = 0.0;
            }
        }
        row.mapv_inplace(|v| v / sum);
    }
    scores
}
