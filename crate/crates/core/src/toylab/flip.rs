//! A toy benchmark runner with a planted belief direction, and a brute-force
//! search for an intervention strength that changes a generated token.

use ndarray::s;
use serde::{Deserialize, Serialize};

use super::extract::{word_id, FIRST_WORD_ID};
use super::forward::argmax;
use super::{Capture, CapturePositions, ToyTransformer};
use crate::actstore::HeadCoord;
use crate::error::{Error, Result};
use crate::steering::{random_direction, sigma_along, DirectionKind, InterventionSpec, SpecEntry};
use crate::tombench::{BenchmarkItem, Condition, OptionLabel, Runner};

/// Token ids and planted head of a [`FlipTaskRunner`].
///
/// The model answers with one of three readout tokens: `oracle_tok` picks
/// the option matching the world state, `belief_tok` the option the
/// protagonist holds, `garbage_tok` neither. Prompts end in `suffix_tok`,
/// whose embedding sets the baseline preference; story words map to ids
/// from `FIRST_WORD_ID` upward.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlipTask {
    pub head: HeadCoord,
    pub oracle_tok: usize,
    pub belief_tok: usize,
    pub garbage_tok: usize,
    pub suffix_tok: usize,
    /// Readout margin of `oracle_tok` over `belief_tok` at `alpha = 0`.
    pub oracle_margin: f64,
    /// Readout deficit of `garbage_tok` at `alpha = 0`.
    pub garbage_offset: f64,
    /// Per unit of `alpha`, the garbage readout rises this many times
    /// faster than the belief readout.
    pub garbage_rate: f64,
}

impl Default for FlipTask {
    /// With these values the argmax is `oracle_tok` for `alpha < 3`,
    /// `belief_tok` for `3 < alpha < 12` and `garbage_tok` above 12.
    fn default() -> Self {
        FlipTask {
            head: HeadCoord::new(1, 2),
            oracle_tok: 2,
            belief_tok: 3,
            garbage_tok: 4,
            suffix_tok: 5,
            oracle_margin: 3.0,
            garbage_offset: -12.0,
            garbage_rate: 2.0,
        }
    }
}

/// Answers benchmark items by greedy decoding on a rewired toy model.
#[derive(Debug, Clone)]
pub struct FlipTaskRunner {
    model: ToyTransformer,
    task: FlipTask,
}

impl FlipTaskRunner {
    /// Rewires `model` so that the first generated token is decided by four
    /// readout channels that only the planted head's output map writes to.
    ///
    /// Channels `0..4` are cleared from every embedding, output map and MLP
    /// output, except that the suffix token carries the baseline readout
    /// and head dimension 0 of the planted head writes `(0, 0, 1, rate)`.
    /// Unembedding columns of the readout tokens are differences of those
    /// channels, so the final layer norm cannot reorder them; every other
    /// token reads a constant -100 through a gain-0, bias-1 channel.
    pub fn new(mut model: ToyTransformer, task: FlipTask) -> Result<Self> {
        let cfg = *model.config();
        model.check_head(task.head)?;
        let toks = [task.oracle_tok, task.belief_tok, task.garbage_tok, task.suffix_tok];
        if cfg.d_model < 5 || cfg.vocab_size <= FIRST_WORD_ID {
            return Err(Error::invalid("flip task needs d_model >= 5 and vocab_size > 8"));
        }
        if toks.iter().any(|&t| t >= FIRST_WORD_ID) || (1..4).any(|i| toks[..i].contains(&toks[i])) {
            return Err(Error::invalid("flip task tokens must be distinct and below 8"));
        }
        let readout = 0..4;
        let konst = cfg.d_model - 1;
        model.tok_emb.slice_mut(s![.., readout.clone()]).fill(0.0);
        model.pos_emb.slice_mut(s![.., readout.clone()]).fill(0.0);
        model.tok_emb[[task.suffix_tok, 1]] = task.oracle_margin;
        model.tok_emb[[task.suffix_tok, 3]] = task.garbage_offset;
        for layer in &mut model.layers {
            layer.wo.slice_mut(s![.., readout.clone()]).fill(0.0);
            layer.w2.slice_mut(s![.., readout.clone()]).fill(0.0);
            layer.b2.slice_mut(s![readout.clone()]).fill(0.0);
        }
        let row = task.head.head * cfg.d_head;
        let wo = &mut model.layers[task.head.layer].wo;
        wo[[row, 2]] = 1.0;
        wo[[row, 3]] = task.garbage_rate;

        model.lnf_gain[konst] = 0.0;
        model.lnf_bias.fill(0.0);
        model.lnf_bias[konst] = 1.0;
        model.unembed.fill(0.0);
        model.unembed.row_mut(konst).fill(-100.0);
        for (tok, ch) in [(task.oracle_tok, 1), (task.belief_tok, 2), (task.garbage_tok, 3)] {
            model.unembed[[konst, tok]] = 0.0;
            model.unembed[[ch, tok]] = 1.0;
            model.unembed[[0, tok]] = -1.0;
        }
        Ok(FlipTaskRunner { model, task })
    }

    pub fn model(&self) -> &ToyTransformer {
        &self.model
    }

    pub fn task(&self) -> &FlipTask {
        &self.task
    }

    /// Spec steering the planted head along its belief direction.
    pub fn spec(&self, alpha: f64) -> InterventionSpec {
        let mut theta = vec![0.0; self.model.config().d_head];
        theta[0] = 1.0;
        InterventionSpec::new(
            DirectionKind::PlusTpfo,
            alpha,
            vec![SpecEntry {
                layer: self.task.head.layer,
                head: self.task.head.head,
                sigma: 1.0,
                theta,
            }],
        )
        .expect("planted spec is valid")
    }

    /// Story and question words as ids, truncated from the front to leave
    /// room for the suffix and one generated token.
    pub fn prompt(&self, item: &BenchmarkItem) -> Vec<usize> {
        let cfg = self.model.config();
        let mut ids: Vec<usize> = item
            .story
            .split_whitespace()
            .chain(item.question.split_whitespace())
            .map(|w| word_id(w, cfg.vocab_size))
            .collect();
        let room = cfg.max_seq_len - 2;
        if ids.len() > room {
            ids.drain(..ids.len() - room);
        }
        ids.push(self.task.suffix_tok);
        ids
    }

    pub fn first_token(&self, item: &BenchmarkItem, spec: Option<&InterventionSpec>) -> Result<usize> {
        let prompt = self.prompt(item);
        Ok(*self.model.generate(&prompt, 1, spec)?.last().unwrap())
    }
}

fn letter(l: OptionLabel) -> &'static str {
    match l {
        OptionLabel::A => "a)",
        OptionLabel::B => "b)",
    }
}

impl Runner for FlipTaskRunner {
    fn respond(&self, item: &BenchmarkItem, spec: Option<&InterventionSpec>) -> Result<String> {
        let tok = self.first_token(item, spec)?;
        let oracle = match item.condition {
            Condition::TB => item.correct,
            Condition::FB => item.correct.other(),
        };
        Ok(if tok == self.task.oracle_tok {
            letter(oracle).to_string()
        } else if tok == self.task.belief_tok {
            letter(item.correct).to_string()
        } else {
            format!("<{tok}>")
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlipScan {
    pub head: HeadCoord,
    pub alpha: f64,
    pub theta: Vec<f64>,
    pub sigma: f64,
    pub baseline_token: usize,
    pub steered_token: usize,
}

/// Scans `heads` in order and, for each, `alphas` in order, steering along
/// a random unit direction (seeded by `seed` and the head) with `sigma`
/// measured over all prompt positions. Returns the first setting whose
/// first generated token differs from the unsteered one.
pub fn find_flip_alpha(
    model: &ToyTransformer,
    prompt: &[usize],
    heads: &[HeadCoord],
    alphas: &[f64],
    seed: u64,
) -> Result<Option<FlipScan>> {
    let baseline = model.generate(prompt, 1, None)?[prompt.len()];
    let capture = Capture {
        positions: CapturePositions::All,
        ..Capture::heads(heads.to_vec())
    };
    let out = model.forward(prompt, Some(&capture), None)?;
    let d = model.config().d_head;
    for &head in heads {
        let theta = random_direction(d, seed ^ ((head.layer as u64) << 32 | head.head as u64))?;
        let values = out.head(head).expect("captured");
        let sigma = sigma_along(values.view(), &theta)?;
        for &alpha in alphas {
            let spec = InterventionSpec::new(
                DirectionKind::Random,
                alpha,
                vec![SpecEntry {
                    layer: head.layer,
                    head: head.head,
                    sigma,
                    theta: theta.clone(),
                }],
            )?;
            let logits = model.forward(prompt, None, Some(&spec))?;
            let tok = argmax(logits.last_logits());
            if tok != baseline {
                return Ok(Some(FlipScan {
                    head,
                    alpha,
                    theta,
                    sigma,
                    baseline_token: baseline,
                    steered_token: tok,
                }));
            }
        }
    }
    Ok(None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task::Task;
    use crate::toylab::ToyConfig;
    use crate::tombench::{score, sweep};

    fn items() -> Vec<BenchmarkItem> {
        let mut v = Vec::new();
        for (i, name) in ["Ravi", "Chi", "Anna", "Juan"].iter().enumerate() {
            for cond in [Condition::TB, Condition::FB] {
                v.push(BenchmarkItem {
                    scenario_id: name.to_lowercase(),
                    task: Task::ForwardBelief,
                    condition: cond,
                    story: format!("{name} puts the key in the drawer and leaves the room"),
                    question: format!("Where does {name} think the key is?"),
                    option_a: "drawer".into(),
                    option_b: "box".into(),
                    correct: if i % 2 == 0 { OptionLabel::A } else { OptionLabel::B },
                });
            }
        }
        v
    }

    #[test]
    fn belief_steering_rises_then_degrades() {
        let model = ToyTransformer::init(ToyConfig::with_seed(1234)).unwrap();
        let task = FlipTask::default();
        let runner = FlipTaskRunner::new(model, task).unwrap();
        let template = runner.spec(1.0);
        let s = sweep(&runner, &items(), &template, &[0.0, 2.0, 4.0, 8.0, 16.0], &[1]).unwrap();
        let fb: Vec<f64> = s.cells.iter().map(|c| c.report.fb_accuracy).collect();
        let tb: Vec<f64> = s.cells.iter().map(|c| c.report.tb_accuracy).collect();
        assert_eq!(fb, [0.0, 0.0, 1.0, 1.0, 0.0]);
        assert_eq!(tb, [1.0, 1.0, 1.0, 1.0, 0.0]);
        assert_eq!(s.cells[4].report.invalid_rate, 1.0);
        let baseline: Vec<_> = items().iter().map(|i| crate::tombench::grade_response(i, &runner.respond(i, None).unwrap())).collect();
        let mut cell = s.cells[0].report.clone();
        cell.label = None;
        assert_eq!(score(&baseline).unwrap(), cell);
    }

    #[test]
    fn scan_finds_a_flip_on_the_default_model() {
        let model = ToyTransformer::init(ToyConfig::with_seed(1234)).unwrap();
        let prompt = [3, 14, 15, 9, 26, 5];
        let alphas: Vec<f64> = (1..=50).map(f64::from).collect();
        let found = find_flip_alpha(&model, &prompt, &model.head_coords(), &alphas, 7).unwrap().unwrap();
        assert!(found.alpha <= 50.0);
        assert_ne!(found.baseline_token, found.steered_token);
    }
}
