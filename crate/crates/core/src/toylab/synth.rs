//! Synthetic activation datasets with known signal-carrying heads.

use ndarray::Array4;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::actstore::{ActivationDataset, DatasetMeta, HeadCoord, JointClass};
use crate::error::{Error, Result};
use crate::task::Task;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "scheme")]
pub enum LabelScheme {
    /// `n / 4` rows per joint class (the first `n % 4` classes get one
    /// more), in shuffled order.
    #[default]
    Balanced,
    /// Each label an independent Bernoulli draw.
    Independent { p_oracle: f64, p_protagonist: f64 },
}

/// A head whose activations are `class_means[joint class] + noise_scale * N(0, I)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedHead {
    pub head: HeadCoord,
    pub class_means: [Vec<f64>; 4],
    pub noise_scale: f64,
}

impl PlantedHead {
    /// Class `c` centred at `offset * e_c`, so any two class means are
    /// `offset * sqrt(2)` apart.
    pub fn orthogonal(head: HeadCoord, head_dim: usize, offset: f64, noise_scale: f64) -> Result<Self> {
        if head_dim < JointClass::COUNT {
            return Err(Error::invalid("orthogonal class means need head_dim >= 4"));
        }
        let mean = |c: usize| {
            let mut v = vec![0.0; head_dim];
            v[c] = offset;
            v
        };
        Ok(PlantedHead {
            head,
            class_means: [mean(0), mean(1), mean(2), mean(3)],
            noise_scale,
        })
    }

    /// `mu_cls - mean(mu_other)`, normalized.
    pub fn mean_difference(&self, cls: JointClass) -> Vec<f64> {
        let d = self.class_means[0].len();
        let mut v = self.class_means[cls.index()].clone();
        for (c, m) in self.class_means.iter().enumerate() {
            if c != cls.index() {
                for k in 0..d {
                    v[k] -= m[k] / 3.0;
                }
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter().map(|x| x / n).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n: usize,
    pub layers: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub planted: Vec<PlantedHead>,
    pub labels: LabelScheme,
    /// Standard deviation of the label-independent cells.
    pub background_noise: f64,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub dataset: ActivationDataset,
    pub planted: Vec<PlantedHead>,
}

impl SynthDataset {
    pub fn planted_heads(&self) -> Vec<HeadCoord> {
        self.planted.iter().map(|p| p.head).collect()
    }

    /// Ground-truth direction of `cls` at a planted head.
    pub fn mean_difference(&self, head: HeadCoord, cls: JointClass) -> Option<Vec<f64>> {
        self.planted.iter().find(|p| p.head == head).map(|p| p.mean_difference(cls))
    }
}

fn validate(cfg: &SynthConfig) -> Result<()> {
    if cfg.n < JointClass::COUNT {
        return Err(Error::invalid("synthetic datasets need n >= 4"));
    }
    if !(cfg.background_noise >= 0.0 && cfg.background_noise.is_finite()) {
        return Err(Error::invalid("background_noise must be finite and non-negative"));
    }
    if let LabelScheme::Independent { p_oracle, p_protagonist } = cfg.labels {
        if !(0.0..=1.0).contains(&p_oracle) || !(0.0..=1.0).contains(&p_protagonist) {
            return Err(Error::invalid("label probabilities must lie in [0, 1]"));
        }
    }
    for (i, p) in cfg.planted.iter().enumerate() {
        if p.head.layer >= cfg.layers || p.head.head >= cfg.heads {
            return Err(Error::HeadOutOfRange(p.head));
        }
        if cfg.planted[..i].iter().any(|q| q.head == p.head) {
            return Err(Error::invalid(format!("head {} planted twice", p.head)));
        }
        if !(p.noise_scale >= 0.0 && p.noise_scale.is_finite()) {
            return Err(Error::invalid("noise_scale must be finite and non-negative"));
        }
        for m in &p.class_means {
            if m.len() != cfg.head_dim {
                return Err(Error::Dimension {
                    expected: cfg.head_dim,
                    got: m.len(),
                });
            }
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("class mean at {}", p.head)));
            }
        }
        for a in 0..4 {
            for b in a + 1..4 {
                if p.class_means[a] == p.class_means[b] {
                    return Err(Error::degenerate(format!("class means {a} and {b} coincide at {}", p.head)));
                }
            }
        }
    }
    Ok(())
}

/// Builds the dataset. Labels use stream 0 of `ChaCha8Rng::seed_from_u64(seed)`;
/// cell `(l, h)` uses stream `1 + l * heads + h`.
pub fn synth_dataset(cfg: &SynthConfig) -> Result<SynthDataset> {
    validate(cfg)?;
    let rng_for = |stream: u64| {
        let mut r = ChaCha8Rng::seed_from_u64(cfg.seed);
        r.set_stream(stream);
        r
    };

    let mut rng = rng_for(0);
    let classes: Vec<JointClass> = match cfg.labels {
        LabelScheme::Balanced => {
            let mut c: Vec<JointClass> = (0..cfg.n).map(|i| JointClass::new(i % 4).unwrap()).collect();
            c.shuffle(&mut rng);
            c
        }
        LabelScheme::Independent { p_oracle, p_protagonist } => (0..cfg.n)
            .map(|_| {
                let o = rng.random_bool(p_oracle);
                let p = rng.random_bool(p_protagonist);
                JointClass::from_labels(o, p)
            })
            .collect(),
    };

    let mut x = Array4::<f32>::zeros((cfg.n, cfg.layers, cfg.heads, cfg.head_dim));
    for l in 0..cfg.layers {
        for h in 0..cfg.heads {
            let mut rng = rng_for(1 + (l * cfg.heads + h) as u64);
            let planted = cfg.planted.iter().find(|p| p.head == HeadCoord::new(l, h));
            for (i, cls) in classes.iter().enumerate() {
                for k in 0..cfg.head_dim {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    let v = match planted {
                        Some(p) => p.class_means[cls.index()][k] + p.noise_scale * z,
                        None => cfg.background_noise * z,
                    };
                    x[[i, l, h, k]] = v as f32;
                }
            }
        }
    }
    let y_oracle = classes.iter().map(|c| c.y_oracle()).collect();
    let y_protagonist = classes.iter().map(|c| c.y_protagonist()).collect();
    let meta = DatasetMeta::new("synthetic", Task::Custom, "synthetic");
    Ok(SynthDataset {
        dataset: ActivationDataset::new(x, y_oracle, y_protagonist, meta)?,
        planted: cfg.planted.clone(),
    })
}
