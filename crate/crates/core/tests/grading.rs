use std::collections::HashMap;
use std::path::PathBuf;

use beliefscope::tombench::{grade_response, load_benchmark, score, Condition, Runner, TranscriptRunner};
use beliefscope::Task;
use serde::Deserialize;

#[derive(Deserialize)]
struct Expected {
    scenario_id: String,
    task: Task,
    condition: Condition,
    baseline_correct: bool,
    steered_correct: bool,
}

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/steered_transcripts").join(name)
}

fn runner(model: &str, file: &str) -> TranscriptRunner {
    let mut r = TranscriptRunner::new();
    r.add_jsonl(&std::fs::read_to_string(fixture(&format!("{model}_{file}.jsonl"))).unwrap(), None)
        .unwrap();
    r
}

#[test]
fn recorded_verdicts_are_reproduced() {
    for model in ["mistral", "deepseek"] {
        let items = load_benchmark(fixture(&format!("{model}_benchmark.jsonl"))).unwrap();
        let baseline = runner(model, "baseline");
        let steered = runner(model, "steered");
        let expected: HashMap<_, Expected> = std::fs::read_to_string(fixture(&format!("{model}_expected.jsonl")))
            .unwrap()
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                let e: Expected = serde_json::from_str(l).unwrap();
                ((e.scenario_id.clone(), e.task, e.condition), e)
            })
            .collect();
        assert_eq!(expected.len(), items.len());

        let mut base_results = Vec::new();
        for item in &items {
            let e = &expected[&item.key()];
            let b = grade_response(item, &baseline.respond(item, None).unwrap());
            let s = grade_response(item, &steered.respond(item, None).unwrap());
            assert_eq!(b.correct, e.baseline_correct, "{model} baseline {}", item.scenario_id);
            assert_eq!(s.correct, e.steered_correct, "{model} steered {}", item.scenario_id);
            base_results.push(b);
        }
        let report = score(&base_results).unwrap();
        report.validate().unwrap();
        assert_eq!(report.n_items, items.len());
    }
}
