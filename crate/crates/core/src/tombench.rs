//! Two-option belief benchmarks: items, probing prompts, response grading,
//! TB/FB/Both scoring and intervention sweeps.
//!
//! Benchmark files are JSONL with keys `scenario_id`, `task`, `condition`
//! (`"TB"`/`"FB"`), `story`, `question`, `option_a`, `option_b` and
//! `correct` (`"a"`/`"b"`).

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::LazyLock;

use log::warn;
use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::steering::{DirectionKind, InterventionSpec};
use crate::task::Task;

/// Version of the grading rules in [`grade_text`].
pub const GRADER_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Condition {
    TB,
    FB,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptionLabel {
    A,
    B,
}

impl OptionLabel {
    pub fn other(self) -> Self {
        match self {
            OptionLabel::A => OptionLabel::B,
            OptionLabel::B => OptionLabel::A,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkItem {
    pub scenario_id: String,
    pub task: Task,
    pub condition: Condition,
    pub story: String,
    pub question: String,
    pub option_a: String,
    pub option_b: String,
    pub correct: OptionLabel,
}

/// `(scenario_id, task, condition)`, unique within a benchmark.
pub type ItemKey = (String, Task, Condition);

impl BenchmarkItem {
    pub fn key(&self) -> ItemKey {
        (self.scenario_id.clone(), self.task, self.condition)
    }

    pub fn option(&self, label: OptionLabel) -> &str {
        match label {
            OptionLabel::A => &self.option_a,
            OptionLabel::B => &self.option_b,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.scenario_id.is_empty() {
            return Err(Error::invalid("empty scenario_id"));
        }
        if self.option_a.trim() == self.option_b.trim() {
            return Err(Error::invalid(format!("{}: the two options are identical", self.scenario_id)));
        }
        Ok(())
    }

    /// Zero-shot question prompt: story, question and both options.
    pub fn question_prompt(&self) -> String {
        format!(
            "Story: {}\nQuestion: {}\na) {}\nb) {}\nAnswer:",
            self.story, self.question, self.option_a, self.option_b
        )
    }
}

/// Parses benchmark JSONL. Blank lines are skipped; errors name the
/// 1-based line. Scenarios missing one condition are logged, not rejected.
pub fn parse_benchmark(text: &str) -> Result<Vec<BenchmarkItem>> {
    let mut items = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let line_no = i + 1;
        let item: BenchmarkItem = serde_json::from_str(line).map_err(|e| Error::Line {
            line: line_no,
            message: e.to_string(),
        })?;
        item.validate().map_err(|e| Error::Line {
            line: line_no,
            message: e.to_string(),
        })?;
        if !seen.insert(item.key()) {
            return Err(Error::Line {
                line: line_no,
                message: format!("duplicate item {} / {} / {:?}", item.scenario_id, item.task, item.condition),
            });
        }
        items.push(item);
    }
    let pairs = pair_index(&items);
    if let Some(first) = pairs.unpaired.first() {
        warn!(
            "{} scenario(s) have only one condition, e.g. {} ({}); they are excluded from Both",
            pairs.unpaired.len(),
            first.0,
            first.1
        );
    }
    Ok(items)
}

pub fn load_benchmark(path: impl AsRef<Path>) -> Result<Vec<BenchmarkItem>> {
    let path = path.as_ref();
    parse_benchmark(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

pub fn benchmark_to_jsonl(items: &[BenchmarkItem]) -> Result<String> {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item)?);
        out.push('\n');
    }
    Ok(out)
}

/// TB/FB pairing over `(scenario_id, task)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PairIndex {
    /// `(tb index, fb index)` into the item list.
    pub paired: Vec<(usize, usize)>,
    pub unpaired: Vec<(String, Task)>,
}

pub fn pair_index(items: &[BenchmarkItem]) -> PairIndex {
    let mut groups: BTreeMap<(String, Task), [Option<usize>; 2]> = BTreeMap::new();
    for (i, it) in items.iter().enumerate() {
        let slot = groups.entry((it.scenario_id.clone(), it.task)).or_default();
        slot[(it.condition == Condition::FB) as usize] = Some(i);
    }
    let mut idx = PairIndex::default();
    for (key, slot) in groups {
        match slot {
            [Some(tb), Some(fb)] => idx.paired.push((tb, fb)),
            _ => idx.unpaired.push(key),
        }
    }
    idx
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbePrompt {
    pub scenario_id: String,
    pub task: Task,
    pub condition: Condition,
    pub option: OptionLabel,
    pub template_id: String,
    pub story: String,
    pub statement: String,
    /// Fully rendered prompt.
    pub text: String,
    pub y_oracle: bool,
    pub y_protagonist: bool,
}

fn template(task: Task) -> Result<(&'static str, &'static str)> {
    match task {
        Task::ForwardBelief => Ok(("forward_belief.v1", "Belief")),
        Task::BackwardBelief => Ok(("backward_belief.v1", "Belief")),
        Task::ForwardAction => Ok(("forward_action.v1", "Action")),
        Task::Tomi => Ok(("tomi.v1", "Action")),
        Task::Custom => Err(Error::invalid("no probing template for task `custom`")),
    }
}

/// Two prompts per item, one per option statement.
///
/// The correct option is what the protagonist holds (`y_p = true`); the
/// oracle agrees in TB and holds the other option in FB.
pub fn build_probe_prompts(items: &[BenchmarkItem], task: Task) -> Result<Vec<ProbePrompt>> {
    let (template_id, field) = template(task)?;
    let mut out = Vec::with_capacity(2 * items.len());
    for item in items {
        for option in [OptionLabel::A, OptionLabel::B] {
            let statement = item.option(option).to_string();
            let is_correct = option == item.correct;
            let y_protagonist = is_correct;
            let y_oracle = if is_correct {
                item.condition == Condition::TB
            } else {
                item.condition == Condition::FB
            };
            out.push(ProbePrompt {
                scenario_id: item.scenario_id.clone(),
                task,
                condition: item.condition,
                option,
                template_id: template_id.to_string(),
                text: format!("Story: {}\n{field}: {statement}", item.story),
                story: item.story.clone(),
                statement,
                y_oracle,
                y_protagonist,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Verdict {
    A,
    B,
    Invalid,
}

impl From<OptionLabel> for Verdict {
    fn from(l: OptionLabel) -> Self {
        match l {
            OptionLabel::A => Verdict::A,
            OptionLabel::B => Verdict::B,
        }
    }
}

static ANSWER_LINE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?im)^\s*answer:\s*\(?([ab])\b").unwrap());

fn letter(c: char) -> Option<Verdict> {
    match c.to_ascii_lowercase() {
        'a' => Some(Verdict::A),
        'b' => Some(Verdict::B),
        _ => None,
    }
}

fn option_key(text: &str) -> String {
    text.trim().to_lowercase().trim_end_matches('.').trim().to_string()
}

/// Grading cascade, first match wins:
///
/// 1. the response starts (after whitespace) with `a` or `b` immediately
///    followed by `)` or `.`;
/// 2. some line reads `Answer: a` / `Answer: (b` (case-insensitive);
/// 3. the response contains the text of exactly one option, compared in
///    lowercase without a trailing period;
/// 4. otherwise the response is invalid.
///
/// A bare leading letter with no `)` or `.` is not accepted by rule 1.
pub fn grade_text(item: &BenchmarkItem, text: &str) -> Verdict {
    let mut chars = text.trim_start().chars();
    if let (Some(c), Some(p)) = (chars.next(), chars.next()) {
        if let Some(v) = letter(c).filter(|_| p == ')' || p == '.') {
            return v;
        }
    }
    if let Some(c) = ANSWER_LINE.captures(text) {
        return letter(c[1].chars().next().unwrap()).unwrap();
    }
    let low = text.to_lowercase();
    let hits: Vec<OptionLabel> = [OptionLabel::A, OptionLabel::B]
        .into_iter()
        .filter(|&l| {
            let key = option_key(item.option(l));
            !key.is_empty() && low.contains(&key)
        })
        .collect();
    match hits.as_slice() {
        [one] => (*one).into(),
        _ => Verdict::Invalid,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradedResult {
    pub scenario_id: String,
    pub task: Task,
    pub condition: Condition,
    pub response: String,
    pub verdict: Verdict,
    pub correct: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl GradedResult {
    pub fn key(&self) -> ItemKey {
        (self.scenario_id.clone(), self.task, self.condition)
    }

    /// A result for an item whose response could not be produced.
    pub fn failed(item: &BenchmarkItem, note: impl Into<String>) -> Self {
        GradedResult {
            scenario_id: item.scenario_id.clone(),
            task: item.task,
            condition: item.condition,
            response: String::new(),
            verdict: Verdict::Invalid,
            correct: false,
            note: Some(note.into()),
        }
    }
}

pub fn grade_response(item: &BenchmarkItem, text: &str) -> GradedResult {
    let verdict = grade_text(item, text);
    GradedResult {
        scenario_id: item.scenario_id.clone(),
        task: item.task,
        condition: item.condition,
        response: text.to_string(),
        verdict,
        correct: verdict == item.correct.into(),
        note: None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    /// Accuracy over TB items; 0 when there are none (see `n_tb`).
    pub tb_accuracy: f64,
    pub fb_accuracy: f64,
    /// Fraction of TB/FB pairs with both answers correct; 0 with no pairs.
    pub both_accuracy: f64,
    pub invalid_rate: f64,
    pub n_items: usize,
    pub n_tb: usize,
    pub n_fb: usize,
    pub n_pairs: usize,
    pub tb_correct: usize,
    pub fb_correct: usize,
    pub both_correct: usize,
    pub invalid: usize,
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Accepts a `(TB, FB, Both)` triple that some set of graded pairs could
/// produce: all rates in `[0, 1]` and `Both <= min(TB, FB)`.
pub fn validate_rates(tb: f64, fb: f64, both: f64) -> Result<()> {
    for (name, v) in [("TB", tb), ("FB", fb), ("Both", both)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::invalid(format!("{name} accuracy {v} outside [0, 1]")));
        }
    }
    if both > tb.min(fb) + 1e-12 {
        return Err(Error::invalid(format!("Both accuracy {both} exceeds min(TB {tb}, FB {fb})")));
    }
    Ok(())
}

impl ScoreReport {
    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = Some(label.into());
        self
    }

    /// Checks that rates follow from the counts and, when every item is
    /// paired, that Both does not exceed TB or FB.
    pub fn validate(&self) -> Result<()> {
        let consistent = self.n_tb + self.n_fb == self.n_items
            && self.tb_correct <= self.n_tb
            && self.fb_correct <= self.n_fb
            && self.both_correct <= self.n_pairs
            && self.invalid <= self.n_items
            && self.tb_accuracy == ratio(self.tb_correct, self.n_tb)
            && self.fb_accuracy == ratio(self.fb_correct, self.n_fb)
            && self.both_accuracy == ratio(self.both_correct, self.n_pairs)
            && self.invalid_rate == ratio(self.invalid, self.n_items);
        if !consistent {
            return Err(Error::invalid("report rates do not match its counts"));
        }
        if self.n_pairs > 0 && self.n_tb == self.n_pairs && self.n_fb == self.n_pairs {
            validate_rates(self.tb_accuracy, self.fb_accuracy, self.both_accuracy)?;
        }
        Ok(())
    }
}

/// TB and FB accuracy per condition, Both over `(scenario_id, task)` pairs
/// that have a graded result for each condition. Invalid answers count as
/// wrong everywhere.
pub fn score(results: &[GradedResult]) -> Result<ScoreReport> {
    if results.is_empty() {
        return Err(Error::invalid("cannot score an empty result list"));
    }
    let mut r = ScoreReport {
        label: None,
        tb_accuracy: 0.0,
        fb_accuracy: 0.0,
        both_accuracy: 0.0,
        invalid_rate: 0.0,
        n_items: results.len(),
        n_tb: 0,
        n_fb: 0,
        n_pairs: 0,
        tb_correct: 0,
        fb_correct: 0,
        both_correct: 0,
        invalid: 0,
    };
    let mut pairs: HashMap<(&str, Task), [Option<bool>; 2]> = HashMap::new();
    for g in results {
        let correct = g.correct && g.verdict != Verdict::Invalid;
        match g.condition {
            Condition::TB => {
                r.n_tb += 1;
                r.tb_correct += correct as usize;
            }
            Condition::FB => {
                r.n_fb += 1;
                r.fb_correct += correct as usize;
            }
        }
        r.invalid += (g.verdict == Verdict::Invalid) as usize;
        let slot = pairs.entry((g.scenario_id.as_str(), g.task)).or_default();
        let cell = &mut slot[(g.condition == Condition::FB) as usize];
        if cell.is_some() {
            return Err(Error::invalid(format!(
                "{} / {} / {:?} graded twice",
                g.scenario_id, g.task, g.condition
            )));
        }
        *cell = Some(correct);
    }
    for slot in pairs.values() {
        if let [Some(tb), Some(fb)] = slot {
            r.n_pairs += 1;
            r.both_correct += (*tb && *fb) as usize;
        }
    }
    r.tb_accuracy = ratio(r.tb_correct, r.n_tb);
    r.fb_accuracy = ratio(r.fb_correct, r.n_fb);
    r.both_accuracy = ratio(r.both_correct, r.n_pairs);
    r.invalid_rate = ratio(r.invalid, r.n_items);
    Ok(r)
}

/// Produces a model response for a benchmark item, optionally under an
/// intervention. Implementations must be deterministic.
pub trait Runner: Sync {
    fn respond(&self, item: &BenchmarkItem, spec: Option<&InterventionSpec>) -> Result<String>;
}

/// Responds from recorded transcripts.
///
/// Transcript JSONL lines hold `scenario_id`, `task`, `condition`,
/// `response` and, for steered runs, `alpha` and `k`. A request with no
/// spec or with `alpha == 0` is answered from the unsteered entries.
#[derive(Debug, Clone, Default)]
pub struct TranscriptRunner {
    responses: HashMap<(ItemKey, Option<(u64, usize)>), String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TranscriptLine {
    pub scenario_id: String,
    pub task: Task,
    pub condition: Condition,
    pub response: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
}

fn setting(alpha: Option<f64>, k: Option<usize>) -> Option<(u64, usize)> {
    match alpha {
        Some(a) if a != 0.0 => Some((a.to_bits(), k.unwrap_or(0))),
        _ => None,
    }
}

impl TranscriptRunner {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds transcript lines. Lines without `alpha` are unsteered; when
    /// `steered` is given it supplies `(alpha, k)` for lines lacking them.
    pub fn add_jsonl(&mut self, text: &str, steered: Option<(f64, usize)>) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let t: TranscriptLine = serde_json::from_str(line).map_err(|e| Error::Line {
                line: i + 1,
                message: e.to_string(),
            })?;
            let alpha = t.alpha.or(steered.map(|s| s.0));
            let k = t.k.or(steered.map(|s| s.1));
            let key = ((t.scenario_id, t.task, t.condition), setting(alpha, k));
            if self.responses.insert(key, t.response).is_some() {
                return Err(Error::Line {
                    line: i + 1,
                    message: "duplicate transcript entry".into(),
                });
            }
        }
        Ok(())
    }

    pub fn insert(&mut self, key: ItemKey, steered: Option<(f64, usize)>, response: String) {
        self.responses.insert((key, setting(steered.map(|s| s.0), steered.map(|s| s.1))), response);
    }

    pub fn len(&self) -> usize {
        self.responses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.responses.is_empty()
    }
}

impl Runner for TranscriptRunner {
    fn respond(&self, item: &BenchmarkItem, spec: Option<&InterventionSpec>) -> Result<String> {
        let s = spec.and_then(|s| setting(Some(s.alpha), Some(s.k)));
        self.responses
            .get(&(item.key(), s))
            .cloned()
            .ok_or_else(|| Error::invalid(format!("no transcript for {} / {:?}", item.scenario_id, item.condition)))
    }
}

/// Runs and grades every item. Runner errors become invalid results with
/// the error as note.
pub fn evaluate(
    runner: &dyn Runner,
    items: &[BenchmarkItem],
    spec: Option<&InterventionSpec>,
) -> Result<(Vec<GradedResult>, ScoreReport)> {
    if items.is_empty() {
        return Err(Error::invalid("no benchmark items to evaluate"));
    }
    let graded: Vec<GradedResult> = items
        .par_iter()
        .map(|item| match runner.respond(item, spec) {
            Ok(text) => grade_response(item, &text),
            Err(e) => GradedResult::failed(item, e.to_string()),
        })
        .collect();
    let report = score(&graded)?;
    Ok((graded, report))
}

/// `template` restricted to its first `k` entries, at strength `alpha`.
pub fn spec_for(template: &InterventionSpec, alpha: f64, k: usize) -> Result<InterventionSpec> {
    if k == 0 || k > template.entries.len() {
        return Err(Error::OutOfRange {
            what: "k",
            index: k,
            limit: template.entries.len(),
        });
    }
    let mut spec = template.clone();
    spec.entries.truncate(k);
    spec.k = k;
    spec.alpha = alpha;
    spec.validate()?;
    Ok(spec)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub alpha: f64,
    pub k: usize,
    pub report: ScoreReport,
    pub results: Vec<GradedResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub kind: DirectionKind,
    pub cells: Vec<SweepCell>,
}

impl SweepResult {
    pub fn cell(&self, alpha: f64, k: usize) -> Option<&SweepCell> {
        self.cells.iter().find(|c| c.alpha == alpha && c.k == k)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("alpha,k,tb_accuracy,fb_accuracy,both_accuracy,invalid_rate,n_items\n");
        for c in &self.cells {
            let r = &c.report;
            writeln!(
                out,
                "{},{},{:.6},{:.6},{:.6},{:.6},{}",
                c.alpha, c.k, r.tb_accuracy, r.fb_accuracy, r.both_accuracy, r.invalid_rate, r.n_items
            )
            .unwrap();
        }
        out
    }
}

/// Scores every `(alpha, k)` combination, `alphas` outermost. The
/// template's entries must be ranked best first.
pub fn sweep(
    runner: &dyn Runner,
    items: &[BenchmarkItem],
    template: &InterventionSpec,
    alphas: &[f64],
    ks: &[usize],
) -> Result<SweepResult> {
    if alphas.is_empty() || ks.is_empty() {
        return Err(Error::invalid("sweep needs at least one alpha and one k"));
    }
    let mut cells = Vec::with_capacity(alphas.len() * ks.len());
    for &alpha in alphas {
        for &k in ks {
            let spec = spec_for(template, alpha, k)?;
            let (results, report) = evaluate(runner, items, Some(&spec))?;
            cells.push(SweepCell {
                alpha,
                k,
                report: report.with_label(format!("{} alpha={alpha} k={k}", template.kind.label())),
                results,
            });
        }
    }
    Ok(SweepResult {
        kind: template.kind,
        cells,
    })
}

/// Evaluates a spec built on one task against another task's items.
pub fn transfer_eval(spec: &InterventionSpec, target: &[BenchmarkItem], runner: &dyn Runner) -> Result<ScoreReport> {
    let source = spec
        .source_task
        .ok_or_else(|| Error::invalid("the spec does not record its source task"))?;
    let spec = spec.clone().transferred_from(source);
    let (_, report) = evaluate(runner, target, Some(&spec))?;
    Ok(report.with_label(DirectionKind::Transferred.label()))
}
