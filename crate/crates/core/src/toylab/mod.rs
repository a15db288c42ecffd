//! A small seeded decoder-only transformer with explicit per-head structure.
//!
//! Architecture (pre-norm): token + learned position embeddings, then per
//! layer `x += attn(ln1(x))`, `x += mlp(ln2(x))`, then a final layer norm and
//! an unembedding. Attention has no biases; head `h` owns columns
//! `h*D..(h+1)*D` of `W_q`, `W_k`, `W_v` and rows `h*D..(h+1)*D` of `W_o`.
//! The MLP uses the tanh GELU. Layer norms use `eps = 1e-5` with gain and
//! bias. Every matrix multiplies from the right (`x @ W`).
//!
//! Weights are stored as `f64` values that are exactly representable in
//! `f32`, so the weight file is lossless; all arithmetic is `f64`.
//!
//! Initialization: tensor number `i` (in [`ToyTransformer::tensor_names`]
//! order) draws from `ChaCha8Rng::seed_from_u64(seed)` with stream `i`,
//! sampling `rand_distr::StandardNormal`. Matrices are scaled by
//! `1/sqrt(rows)`, embeddings are unscaled, gains start at 1 and biases at 0.

mod attribution;
mod extract;
mod flip;
mod forward;
mod synth;

pub use attribution::{grad_attribution, head_score, head_score_gradient, TokenAttribution};
pub use extract::{extract_dataset, tokenize, FIRST_WORD_ID};
pub use flip::{find_flip_alpha, FlipScan, FlipTask, FlipTaskRunner};
pub use forward::{Capture, CapturePositions, CapturedHead, ForwardOutput, LayerTrace};
pub use synth::{
    synth_dataset, LabelScheme, PlantedHead, SynthConfig, SynthDataset,
};

use std::fs;
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayViewD, ArrayViewMutD};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::actstore::HeadCoord;
use crate::error::{Error, Result};

pub const LN_EPS: f64 = 1e-5;
pub const WEIGHTS_MAGIC: &[u8; 4] = b"TOYW";
pub const WEIGHTS_VERSION: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyConfig {
    pub vocab_size: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub mlp_hidden: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            vocab_size: 64,
            n_layers: 4,
            n_heads: 4,
            d_model: 32,
            d_head: 8,
            mlp_hidden: 64,
            max_seq_len: 64,
            seed: 0,
        }
    }
}

impl ToyConfig {
    pub fn with_seed(seed: u64) -> Self {
        ToyConfig {
            seed,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("d_head", self.d_head),
            ("mlp_hidden", self.mlp_hidden),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid(format!("{name} must be at least 1")));
        }
        if self.n_heads * self.d_head != self.d_model {
            return Err(Error::invalid(format!(
                "n_heads * d_head = {} but d_model = {}",
                self.n_heads * self.d_head,
                self.d_model
            )));
        }
        Ok(())
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let (v, d, m, t) = (self.vocab_size, self.d_model, self.mlp_hidden, self.max_seq_len);
        let per_layer = 2 * d + 4 * d * d + 2 * d + d * m + m + m * d + d;
        v * d + t * d + self.n_layers * per_layer + 2 * d + d * v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub ln1_gain: Array1<f64>,
    pub ln1_bias: Array1<f64>,
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub wo: Array2<f64>,
    pub ln2_gain: Array1<f64>,
    pub ln2_bias: Array1<f64>,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

impl LayerWeights {
    fn zeros(cfg: &ToyConfig) -> Self {
        let (d, m) = (cfg.d_model, cfg.mlp_hidden);
        LayerWeights {
            ln1_gain: Array1::zeros(d),
            ln1_bias: Array1::zeros(d),
            wq: Array2::zeros((d, d)),
            wk: Array2::zeros((d, d)),
            wv: Array2::zeros((d, d)),
            wo: Array2::zeros((d, d)),
            ln2_gain: Array1::zeros(d),
            ln2_bias: Array1::zeros(d),
            w1: Array2::zeros((d, m)),
            b1: Array1::zeros(m),
            w2: Array2::zeros((m, d)),
            b2: Array1::zeros(d),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyTransformer {
    cfg: ToyConfig,
    pub tok_emb: Array2<f64>,
    pub pos_emb: Array2<f64>,
    pub layers: Vec<LayerWeights>,
    pub lnf_gain: Array1<f64>,
    pub lnf_bias: Array1<f64>,
    /// `d_model x vocab_size`.
    pub unembed: Array2<f64>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct WeightsHeader {
    config: ToyConfig,
    dtype: String,
    tensors: Vec<TensorEntry>,
}

impl ToyTransformer {
    fn zeros(cfg: ToyConfig) -> Self {
        let (v, d, t) = (cfg.vocab_size, cfg.d_model, cfg.max_seq_len);
        ToyTransformer {
            tok_emb: Array2::zeros((v, d)),
            pos_emb: Array2::zeros((t, d)),
            layers: (0..cfg.n_layers).map(|_| LayerWeights::zeros(&cfg)).collect(),
            lnf_gain: Array1::zeros(d),
            lnf_bias: Array1::zeros(d),
            unembed: Array2::zeros((d, v)),
            cfg,
        }
    }

    /// Seeded random initialization; see the module docs for the scheme.
    pub fn init(cfg: ToyConfig) -> Result<Self> {
        cfg.validate()?;
        let mut model = Self::zeros(cfg);
        for (i, (name, mut t)) in model.tensors_mut().into_iter().enumerate() {
            if name.ends_with("gain") {
                t.fill(1.0);
                continue;
            }
            if name.ends_with("bias") || name.ends_with(".b1") || name.ends_with(".b2") {
                continue;
            }
            let scale = if name.ends_with("emb") { 1.0 } else { 1.0 / (t.shape()[0] as f64).sqrt() };
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(i as u64);
            for v in t.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v = f64::from((scale * z) as f32);
            }
        }
        Ok(model)
    }

    pub fn config(&self) -> &ToyConfig {
        &self.cfg
    }

    pub fn head_coords(&self) -> Vec<HeadCoord> {
        (0..self.cfg.n_layers)
            .flat_map(|l| (0..self.cfg.n_heads).map(move |h| HeadCoord::new(l, h)))
            .collect()
    }

    pub fn check_head(&self, head: HeadCoord) -> Result<()> {
        if head.layer >= self.cfg.n_layers || head.head >= self.cfg.n_heads {
            return Err(Error::HeadOutOfRange(head));
        }
        Ok(())
    }

    /// `Q_l^h`: the `d_head x d_model` slice of the output projection that
    /// maps head `h`'s output back to the residual stream.
    pub fn head_output_map(&self, head: HeadCoord) -> Result<Array2<f64>> {
        self.check_head(head)?;
        let dh = self.cfg.d_head;
        Ok(self.layers[head.layer].wo.slice(s![head.head * dh..(head.head + 1) * dh, ..]).to_owned())
    }

    pub fn tensor_names(&self) -> Vec<String> {
        self.tensors().into_iter().map(|(n, _)| n).collect()
    }

    fn tensors(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        let mut out = vec![
            ("tok_emb".to_string(), self.tok_emb.view().into_dyn()),
            ("pos_emb".to_string(), self.pos_emb.view().into_dyn()),
        ];
        for (l, w) in self.layers.iter().enumerate() {
            let n = |s: &str| format!("layers.{l}.{s}");
            out.extend([
                (n("ln1.gain"), w.ln1_gain.view().into_dyn()),
                (n("ln1.bias"), w.ln1_bias.view().into_dyn()),
                (n("attn.wq"), w.wq.view().into_dyn()),
                (n("attn.wk"), w.wk.view().into_dyn()),
                (n("attn.wv"), w.wv.view().into_dyn()),
                (n("attn.wo"), w.wo.view().into_dyn()),
                (n("ln2.gain"), w.ln2_gain.view().into_dyn()),
                (n("ln2.bias"), w.ln2_bias.view().into_dyn()),
                (n("mlp.w1"), w.w1.view().into_dyn()),
                (n("mlp.b1"), w.b1.view().into_dyn()),
                (n("mlp.w2"), w.w2.view().into_dyn()),
                (n("mlp.b2"), w.b2.view().into_dyn()),
            ]);
        }
        out.extend([
            ("lnf.gain".to_string(), self.lnf_gain.view().into_dyn()),
            ("lnf.bias".to_string(), self.lnf_bias.view().into_dyn()),
            ("unembed".to_string(), self.unembed.view().into_dyn()),
        ]);
        out
    }

    fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        let mut out = vec![
            ("tok_emb".to_string(), self.tok_emb.view_mut().into_dyn()),
            ("pos_emb".to_string(), self.pos_emb.view_mut().into_dyn()),
        ];
        for (l, w) in self.layers.iter_mut().enumerate() {
            let n = |s: &str| format!("layers.{l}.{s}");
            out.extend([
                (n("ln1.gain"), w.ln1_gain.view_mut().into_dyn()),
                (n("ln1.bias"), w.ln1_bias.view_mut().into_dyn()),
                (n("attn.wq"), w.wq.view_mut().into_dyn()),
                (n("attn.wk"), w.wk.view_mut().into_dyn()),
                (n("attn.wv"), w.wv.view_mut().into_dyn()),
                (n("attn.wo"), w.wo.view_mut().into_dyn()),
                (n("ln2.gain"), w.ln2_gain.view_mut().into_dyn()),
                (n("ln2.bias"), w.ln2_bias.view_mut().into_dyn()),
                (n("mlp.w1"), w.w1.view_mut().into_dyn()),
                (n("mlp.b1"), w.b1.view_mut().into_dyn()),
                (n("mlp.w2"), w.w2.view_mut().into_dyn()),
                (n("mlp.b2"), w.b2.view_mut().into_dyn()),
            ]);
        }
        out.extend([
            ("lnf.gain".to_string(), self.lnf_gain.view_mut().into_dyn()),
            ("lnf.bias".to_string(), self.lnf_bias.view_mut().into_dyn()),
            ("unembed".to_string(), self.unembed.view_mut().into_dyn()),
        ]);
        out
    }

    /// Number of allocated parameters.
    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Weight file: `"TOYW"`, version byte, u32 LE header length, JSON header
    /// `{config, dtype: "f32le", tensors: [{name, shape}]}`, then every
    /// tensor's values as row-major f32 LE in header order.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let tensors = self.tensors();
        let header = WeightsHeader {
            config: self.cfg,
            dtype: "f32le".into(),
            tensors: tensors
                .iter()
                .map(|(n, t)| TensorEntry {
                    name: n.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(9 + json.len() + 4 * self.param_count());
        out.extend_from_slice(WEIGHTS_MAGIC);
        out.push(WEIGHTS_VERSION);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for (name, t) in &tensors {
            for &v in t.iter() {
                let f = v as f32;
                if f64::from(f) != v {
                    return Err(Error::Format(format!("{name} holds a value not representable as f32")));
                }
                out.extend_from_slice(&f.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 9 || &bytes[..4] != WEIGHTS_MAGIC {
            return Err(Error::Format("not a toy weight file".into()));
        }
        if bytes[4] != WEIGHTS_VERSION {
            return Err(Error::Format(format!("unsupported weight file version {}", bytes[4])));
        }
        let hlen = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
        let body = bytes.get(9..9 + hlen).ok_or(Error::Truncated {
            expected: 9 + hlen,
            found: bytes.len(),
        })?;
        let header: WeightsHeader = serde_json::from_slice(body)?;
        if header.dtype != "f32le" {
            return Err(Error::Format(format!("unsupported dtype `{}`", header.dtype)));
        }
        header.config.validate()?;
        let mut model = Self::zeros(header.config);
        let mut offset = 9 + hlen;
        let slots = model.tensors_mut();
        if slots.len() != header.tensors.len() {
            return Err(Error::Format(format!(
                "expected {} tensors, header lists {}",
                slots.len(),
                header.tensors.len()
            )));
        }
        for ((name, mut t), entry) in slots.into_iter().zip(&header.tensors) {
            if entry.name != name || entry.shape != t.shape() {
                return Err(Error::Format(format!(
                    "tensor `{}` {:?} does not match expected `{name}` {:?}",
                    entry.name,
                    entry.shape,
                    t.shape()
                )));
            }
            let need = 4 * t.len();
            let raw = bytes.get(offset..offset + need).ok_or(Error::Truncated {
                expected: offset + need,
                found: bytes.len(),
            })?;
            for (v, chunk) in t.iter_mut().zip(raw.chunks_exact(4)) {
                *v = f64::from(f32::from_le_bytes(chunk.try_into().unwrap()));
            }
            offset += need;
        }
        if offset != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - offset)));
        }
        Ok(model)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }

    /// Rewires layer 0, head `head` so that every position after a `marker`
    /// token attends almost entirely to it.
    ///
    /// Channel `d_model-1` becomes a constant 1 after the first layer norm
    /// (gain 0, bias 1) and channel `d_model-2` is zero for every token and
    /// position except `marker`, which gets `4.0`. The head's query reads the
    /// constant channel and its key reads the marker channel, both through
    /// head dimension 0, so the attention logit of the marker exceeds all
    /// others by a wide margin.
    pub fn plant_marker_head(&mut self, head: usize, marker: usize) -> Result<()> {
        let hc = HeadCoord::new(0, head);
        self.check_head(hc)?;
        let (d, dh) = (self.cfg.d_model, self.cfg.d_head);
        if d < 3 {
            return Err(Error::invalid("marker planting needs d_model >= 3"));
        }
        if marker >= self.cfg.vocab_size {
            return Err(Error::OutOfRange {
                what: "marker token",
                index: marker,
                limit: self.cfg.vocab_size,
            });
        }
        let (s_ch, r_ch) = (d - 1, d - 2);
        self.tok_emb.column_mut(r_ch).fill(0.0);
        self.pos_emb.column_mut(r_ch).fill(0.0);
        self.tok_emb[[marker, r_ch]] = 4.0;
        let l0 = &mut self.layers[0];
        l0.ln1_gain[s_ch] = 0.0;
        l0.ln1_bias[s_ch] = 1.0;
        let cols = head * dh..(head + 1) * dh;
        l0.wq.slice_mut(s![.., cols.clone()]).fill(0.0);
        l0.wk.slice_mut(s![.., cols]).fill(0.0);
        l0.wq[[s_ch, head * dh]] = 5.0;
        l0.wk[[r_ch, head * dh]] = 4.0;
        Ok(())
    }

    /// View of one tensor by name.
    pub fn tensor(&self, name: &str) -> Option<ArrayViewD<'_, f64>> {
        self.tensors().into_iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

pub(crate) fn layer_norm(x: &Array2<f64>, gain: &Array1<f64>, bias: &Array1<f64>) -> (Array2<f64>, LnCache) {
    let d = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut rstd = Array1::zeros(x.nrows());
    for (i, mut row) in xhat.rows_mut().into_iter().enumerate() {
        let mu = row.sum() / d;
        row.mapv_inplace(|v| v - mu);
        let var = row.iter().map(|v| v * v).sum::<f64>() / d;
        let r = 1.0 / (var + LN_EPS).sqrt();
        row.mapv_inplace(|v| v * r);
        rstd[i] = r;
    }
    let y = &xhat * gain + bias;
    (y, LnCache { xhat, rstd })
}

pub(crate) struct LnCache {
    pub xhat: Array2<f64>,
    pub rstd: Array1<f64>,
}

impl LnCache {
    /// Gradient with respect to the layer-norm input.
    pub fn backward(&self, dy: &Array2<f64>, gain: &Array1<f64>) -> Array2<f64> {
        let d = dy.ncols() as f64;
        let dxhat = dy * gain;
        let mut dx = Array2::zeros(dy.raw_dim());
        for i in 0..dy.nrows() {
            let g = dxhat.row(i);
            let xh = self.xhat.row(i);
            let mean_g = g.sum() / d;
            let mean_gx = g.dot(&xh) / d;
            for j in 0..dy.ncols() {
                dx[[i, j]] = self.rstd[i] * (g[j] - mean_g - xh[j] * mean_gx);
            }
        }
        dx
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}
