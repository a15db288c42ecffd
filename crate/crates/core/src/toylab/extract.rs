//! Word-level tokenization and activation capture over probe prompts.

use ndarray::{s, Array4};

use super::{Capture, ToyTransformer};
use crate::actstore::{ActivationDataset, DatasetMeta};
use crate::error::{Error, Result};
use crate::tombench::ProbePrompt;

/// Ids below this are reserved for special tokens.
pub const FIRST_WORD_ID: usize = 8;

pub(crate) fn word_id(word: &str, vocab: usize) -> usize {
    // FNV-1a, stable across platforms and releases.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in word.to_lowercase().bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    FIRST_WORD_ID + (h % (vocab - FIRST_WORD_ID) as u64) as usize
}

/// Whitespace-separated words hashed into `FIRST_WORD_ID..vocab`, keeping
/// the last `max_len` words.
pub fn tokenize(model: &ToyTransformer, text: &str, max_len: usize) -> Result<Vec<usize>> {
    let vocab = model.config().vocab_size;
    if vocab <= FIRST_WORD_ID {
        return Err(Error::invalid("vocab_size too small for word tokens"));
    }
    let mut ids: Vec<usize> = text.split_whitespace().map(|w| word_id(w, vocab)).collect();
    if ids.len() > max_len {
        ids.drain(..ids.len() - max_len);
    }
    if ids.is_empty() {
        return Err(Error::invalid("prompt has no words"));
    }
    Ok(ids)
}

/// Final-position activations of every head for each prompt, labelled from
/// the prompt's oracle and protagonist truth values.
pub fn extract_dataset(model: &ToyTransformer, prompts: &[ProbePrompt], meta: DatasetMeta) -> Result<ActivationDataset> {
    let cfg = model.config();
    let capture = Capture::heads(model.head_coords());
    let mut x = Array4::<f32>::zeros((prompts.len(), cfg.n_layers, cfg.n_heads, cfg.d_head));
    for (i, p) in prompts.iter().enumerate() {
        let tokens = tokenize(model, &p.text, cfg.max_seq_len)?;
        let out = model.forward(&tokens, Some(&capture), None)?;
        for ch in &out.heads {
            let row = ch.values.row(0).mapv(|v| v as f32);
            x.slice_mut(s![i, ch.head.layer, ch.head.head, ..]).assign(&row);
        }
    }
    let y_o = prompts.iter().map(|p| p.y_oracle).collect();
    let y_p = prompts.iter().map(|p| p.y_protagonist).collect();
    ActivationDataset::new(x, y_o, y_p, meta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task::Task;
    use crate::tombench::{build_probe_prompts, BenchmarkItem, Condition, OptionLabel};
    use crate::toylab::ToyConfig;

    #[test]
    fn extraction_matches_direct_capture() {
        let m = ToyTransformer::init(ToyConfig::with_seed(3)).unwrap();
        let items: Vec<BenchmarkItem> = [Condition::TB, Condition::FB]
            .into_iter()
            .map(|condition| BenchmarkItem {
                scenario_id: "s".into(),
                task: Task::ForwardBelief,
                condition,
                story: "Mia hides the ball under the cup".into(),
                question: "Where does Mia look?".into(),
                option_a: "cup".into(),
                option_b: "bag".into(),
                correct: OptionLabel::A,
            })
            .collect();
        let prompts = build_probe_prompts(&items, Task::ForwardBelief).unwrap();
        let ds = extract_dataset(&m, &prompts, DatasetMeta::new("toy", Task::ForwardBelief, "forward_belief.v1")).unwrap();
        assert_eq!((ds.n(), ds.layers(), ds.heads(), ds.head_dim()), (4, 4, 4, 8));
        assert_eq!(ds.y_protagonist(), &[true, false, true, false]);
        assert_eq!(ds.y_oracle(), &[true, false, false, true]);

        let hc = crate::actstore::HeadCoord::new(2, 1);
        let toks = tokenize(&m, &prompts[3].text, 64).unwrap();
        let out = m.forward(&toks, Some(&Capture::heads(vec![hc])), None).unwrap();
        let direct = out.head(hc).unwrap().row(0).mapv(|v| v as f32);
        assert_eq!(ds.slice_head(2, 1).unwrap().row(3).mapv(|v| v as f32), direct);
        assert!(tokenize(&m, "  ", 8).is_err());
        assert!(tokenize(&m, "Story: x", 8).unwrap().iter().all(|&t| t >= FIRST_WORD_ID));
    }
}
