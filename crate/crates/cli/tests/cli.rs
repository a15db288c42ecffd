use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_beliefscope"));
    c.env_remove("BELIEFSCOPE_JOBS").env("RUST_LOG", "error");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn fixture(name: &str) -> String {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../fixtures/steered_transcripts")
        .join(name)
        .to_string_lossy()
        .into_owned()
}

fn synth(dir: &Path) -> String {
    let out = run(&[
        "toylab", "synth", "--n", "120", "--layers", "3", "--heads", "2", "--dim", "4", "--plant", "1:0", "--seed", "5",
        "--out", dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    dir.join("synthetic.actv").to_string_lossy().into_owned()
}

fn jsonl(path: &Path) -> Vec<Value> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn grade_reproduces_fixture_verdicts() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().to_str().unwrap();
    for model in ["mistral", "deepseek"] {
        let expected: HashMap<(String, String), Value> = jsonl(Path::new(&fixture(&format!("{model}_expected.jsonl"))))
            .into_iter()
            .map(|v| ((v["scenario_id"].as_str().unwrap().to_string(), v["condition"].as_str().unwrap().to_string()), v))
            .collect();
        for (run_name, field) in [("baseline", "baseline_correct"), ("steered", "steered_correct")] {
            let name = format!("{model}_{run_name}");
            let out = run(&[
                "grade",
                "--benchmark",
                &fixture(&format!("{model}_benchmark.jsonl")),
                "--transcripts",
                &fixture(&format!("{name}.jsonl")),
                "--name",
                &name,
                "--out",
                out_dir,
            ]);
            assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
            let results = jsonl(&dir.path().join(format!("{name}_results.jsonl")));
            assert_eq!(results.len(), expected.len());
            for r in results {
                let key = (r["scenario_id"].as_str().unwrap().to_string(), r["condition"].as_str().unwrap().to_string());
                assert_eq!(r["correct"], expected[&key][field], "{name} {key:?}");
            }
        }
    }
}

#[test]
fn directions_rejects_k_beyond_head_count() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path());
    let out = run(&["directions", "--data", &data, "--k", "7", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("--k 7") && err.contains("6 heads"), "{err}");

    let ok = run(&["directions", "--data", &data, "--k", "2", "--out", dir.path().to_str().unwrap()]);
    assert!(ok.status.success(), "{}", String::from_utf8_lossy(&ok.stderr));
    let spec: Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("custom_spec_plus-tpfo-k2.json")).unwrap()).unwrap();
    assert_eq!(spec["k"], 2);
    assert_eq!(spec["entries"][0]["layer"], 1);
}

#[test]
fn scan_output_is_byte_identical_across_runs_and_job_counts() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path());
    let mut outputs = Vec::new();
    for (i, jobs) in ["1", "4"].iter().enumerate() {
        let out_dir = dir.path().join(format!("run{i}"));
        let out = run(&[
            "--jobs", jobs, "scan", "--data", &data, "--seeds", "3", "--family", "multinomial", "--target", "joint", "--out",
            out_dir.to_str().unwrap(),
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        outputs.push(std::fs::read(out_dir.join("custom_scan_multinomial-joint.json")).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn flag_and_input_errors_exit_with_one() {
    assert_eq!(run(&["scan", "--bogus"]).status.code(), Some(1));
    assert_eq!(run(&["scan", "--data", "/nonexistent.actv"]).status.code(), Some(1));
    assert_eq!(run(&["scan", "--target", "joint", "--family", "binary", "--data", "/nonexistent"]).status.code(), Some(1));
    let help = run(&["sweep", "--help"]);
    assert_eq!(help.status.code(), Some(0));
    let text = String::from_utf8_lossy(&help.stdout);
    for flag in ["--benchmark", "--spec", "--runner", "--transcripts", "--alphas", "--ks", "--toy-seed", "--jobs", "--config", "--out"] {
        assert!(text.contains(flag), "missing {flag}");
    }
}

#[test]
fn config_file_supplies_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path());
    let cfg = dir.path().join("run.toml");
    let out_dir = dir.path().join("from_config");
    std::fs::write(
        &cfg,
        format!(
            "out = {:?}\nseeds = 2\n[paths]\ndataset = {:?}\n[probe]\nmax_iterations = 200\n",
            out_dir.to_str().unwrap(),
            data
        ),
    )
    .unwrap();
    let out = run(&["--config", cfg.to_str().unwrap(), "scan"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let scan: Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("custom_scan_binary-oracle.json")).unwrap()).unwrap();
    assert_eq!(scan["seeds"].as_array().unwrap().len(), 2);
    assert_eq!(scan["config"]["probe"]["max_iterations"], 200);

    std::fs::write(&cfg, "unknown_key = 1\n").unwrap();
    assert_eq!(run(&["--config", cfg.to_str().unwrap(), "scan"]).status.code(), Some(1));
}

#[test]
fn toy_sweep_and_curves() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let out = run(&["sweep", "--runner", "toy", "--benchmark", &fixture("deepseek_benchmark.jsonl"), "--out", d]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = String::from_utf8_lossy(&out.stdout);
    let fb: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').nth(3).unwrap()).collect();
    assert_eq!(fb, ["0.000000", "0.000000", "1.000000", "1.000000", "0.000000"]);
    let sweep = dir.path().join("forward_belief_sweep_plus-tpfo.json");
    let r = run(&["report", "--kind", "curves", "--sweep", sweep.to_str().unwrap(), "--out", d]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let curves = std::fs::read_to_string(dir.path().join("forward_belief_curves_plus-tpfo-k1.csv")).unwrap();
    assert!(curves.starts_with("alpha,tb_acc,fb_acc,both_acc,invalid_rate\n"));
}

#[test]
fn toylab_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    assert!(run(&["toylab", "init", "--seed", "1234", "--out", d]).status.success());
    let w = dir.path().join("toy_seed1234.weights");
    let w = w.to_str().unwrap();
    let g = run(&["toylab", "generate", "--weights", w, "--tokens", "3,14,15", "--max-new", "4", "--out", d]);
    assert!(g.status.success());
    let v: Value = serde_json::from_slice(&g.stdout).unwrap();
    assert_eq!(v["generated"].as_array().unwrap().len(), 4);
    let a = run(&[
        "toylab", "attribute", "--weights", w, "--tokens", "3,14,15", "--layer", "2", "--head", "1", "--theta",
        "1,0,0,0,0,0,0,0", "--out", d,
    ]);
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
    let attr: Vec<Value> =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("toylab_attribution.json")).unwrap()).unwrap();
    assert_eq!(attr.len(), 3);
    assert!(attr.iter().all(|t| t.get("token_index").is_some() && t.get("magnitude").is_some()));
    let bad = run(&["toylab", "attribute", "--weights", w, "--tokens", "3", "--layer", "2", "--head", "1", "--theta", "1,1", "--out", d]);
    assert_eq!(bad.status.code(), Some(1));
}
