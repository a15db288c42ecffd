use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context as _};
use beliefscope::actstore::{make_split, ActivationDataset, DatasetMeta, HeadCoord, DEFAULT_TRAIN_FRACTION};
use beliefscope::headscan::{
    aggregate, bonferroni, bonferroni_test, check_combination, scan as run_scan, top_k, train_head_probe,
    ProbeFamily, ScanConfig, ScanResult, ScanTarget,
};
use beliefscope::steering::{build_spec, DirectionKind, InterventionSpec, DEFAULT_ALPHA};
use beliefscope::tombench::{
    build_probe_prompts, evaluate, load_benchmark, sweep as run_sweep, BenchmarkItem, Runner, SweepResult,
    TranscriptRunner,
};
use beliefscope::toylab::{
    extract_dataset, grad_attribution, synth_dataset, FlipTask, FlipTaskRunner, LabelScheme, PlantedHead,
    SynthConfig, TokenAttribution, ToyConfig, ToyTransformer,
};
use beliefscope::vizreport::{
    artifact_stem, boundaries_2d, cca_fit, label_matrix, render_cca, render_curves, render_grid, render_scatter,
    render_strip, Rendered, ScatterPoint,
};
use beliefscope::{JointClass, Task};
use serde::Serialize;

use crate::config::RunConfig;
use crate::{
    Classify, CmdResult, DirectionsArgs, ExtractArgs, FamilyArg, Failure, GenerateArgs, GradeArgs, KindArg,
    PromptsArgs, ReportArgs, ReportKind, RunnerArg, ScanArgs, StatsArgs, SweepArgs, SynthArgs, TargetArg,
    ToyCommand,
};

pub struct Context {
    pub cfg: RunConfig,
    pub out: PathBuf,
}

const DEFAULT_SEEDS: usize = 10;
const DEFAULT_K: usize = 16;
const DEFAULT_ALPHAS: [f64; 5] = [0.0, 2.0, 4.0, 8.0, 16.0];

fn invalid(msg: impl Into<String>) -> Failure {
    Failure::Validation(anyhow!(msg.into()))
}

/// Flag value, else config value; the file must exist.
fn input(flag: Option<PathBuf>, fallback: Option<&PathBuf>, name: &str) -> CmdResult<PathBuf> {
    let path = flag
        .or_else(|| fallback.cloned())
        .ok_or_else(|| invalid(format!("{name} is required (flag or config)")))?;
    if !path.is_file() {
        return Err(invalid(format!("{name}: {} does not exist", path.display())));
    }
    Ok(path)
}

impl Context {
    fn out_file(&self, name: &str) -> CmdResult<PathBuf> {
        fs::create_dir_all(&self.out)
            .with_context(|| format!("creating {}", self.out.display()))
            .runtime()?;
        Ok(self.out.join(name))
    }

    fn write_text(&self, name: &str, text: &str) -> CmdResult<PathBuf> {
        let path = self.out_file(name)?;
        fs::write(&path, text).with_context(|| format!("writing {}", path.display())).runtime()?;
        eprintln!("wrote {}", path.display());
        Ok(path)
    }

    fn write_json<T: Serialize>(&self, name: &str, value: &T) -> CmdResult<PathBuf> {
        let text = serde_json::to_string_pretty(value).runtime()? + "\n";
        self.write_text(name, &text)
    }

    fn write_rendered(&self, r: &Rendered, stem: &str) -> CmdResult {
        fs::create_dir_all(&self.out).runtime()?;
        let (svg, csv) = r.write(&self.out, stem).runtime()?;
        eprintln!("wrote {}\nwrote {}", svg.display(), csv.display());
        Ok(())
    }

    fn probe_config(&self) -> beliefscope::probekit::ProbeConfig {
        self.cfg.probe.clone().unwrap_or_default()
    }

    fn train_fraction(&self, flag: Option<f64>) -> f64 {
        flag.or(self.cfg.train_fraction).unwrap_or(DEFAULT_TRAIN_FRACTION)
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> CmdResult<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display())).invalid()?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display())).invalid()
}

fn family(f: FamilyArg) -> ProbeFamily {
    match f {
        FamilyArg::Binary => ProbeFamily::Binary,
        FamilyArg::Multinomial => ProbeFamily::Multinomial,
        FamilyArg::Mlp => ProbeFamily::Mlp,
    }
}

fn target(t: TargetArg) -> ScanTarget {
    match t {
        TargetArg::Oracle => ScanTarget::Oracle,
        TargetArg::Protagonist => ScanTarget::Protagonist,
        TargetArg::Joint => ScanTarget::Joint,
    }
}

fn kind(k: KindArg) -> DirectionKind {
    match k {
        KindArg::Random => DirectionKind::Random,
        KindArg::PlusProtagonist => DirectionKind::PlusProtagonist,
        KindArg::MinusOracle => DirectionKind::MinusOracle,
        KindArg::PlusTpfo => DirectionKind::PlusTpfo,
    }
}

fn snake<T: Serialize>(v: &T) -> String {
    serde_json::to_value(v)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

fn file_stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

pub fn scan(ctx: &Context, a: ScanArgs) -> CmdResult {
    let path = input(a.data, ctx.cfg.paths.dataset.as_ref(), "--data")?;
    let ds = ActivationDataset::read(&path).invalid()?;
    let (fam, tgt) = (family(a.family), target(a.target));
    check_combination(fam, tgt).invalid()?;
    let n = a.seeds.or(ctx.cfg.seeds).unwrap_or(DEFAULT_SEEDS);
    if n == 0 {
        return Err(invalid("--seeds must be at least 1"));
    }
    let seeds: Vec<u64> = (0..n as u64).collect();
    let cfg = ScanConfig {
        probe: ctx.probe_config(),
        train_fraction: ctx.train_fraction(a.train_fraction),
    };
    cfg.probe.validate().invalid()?;
    let sr = run_scan(&ds, fam, tgt, &seeds, &cfg).runtime()?;
    for f in &sr.failures {
        log::warn!("L{} H{} seed {}: {}", f.layer, f.head, f.seed, f.message);
    }
    let stem = artifact_stem(ds.meta().task, "scan", &format!("{}-{}", snake(&fam), snake(&tgt)));
    ctx.write_json(&format!("{stem}.json"), &sr)?;
    ctx.write_text(&format!("{stem}.csv"), &sr.grid_csv())?;
    Ok(())
}

#[derive(Serialize)]
struct StatsOutput<'a> {
    baseline: f64,
    bonferroni_m: usize,
    tests: &'a [beliefscope::headscan::HeadStats],
    aggregate: &'a [beliefscope::headscan::HeadStats],
}

pub fn stats(ctx: &Context, a: StatsArgs) -> CmdResult {
    let path = input(a.scan, ctx.cfg.paths.scan.as_ref(), "--scan")?;
    let sr: ScanResult = read_json(&path)?;
    if !(0.0..=1.0).contains(&a.baseline) {
        return Err(invalid("--baseline must lie in [0, 1]"));
    }
    let agg = aggregate(&sr).invalid()?;
    let heads = top_k(&sr, a.top_k).invalid()?;
    let mut tests = bonferroni_test(&sr, a.baseline, &heads).invalid()?;
    let m = a.bonferroni_m.unwrap_or(heads.len());
    if m == 0 {
        return Err(invalid("--bonferroni-m must be at least 1"));
    }
    for t in &mut tests {
        t.p_corrected = t.p_raw.map(|p| bonferroni(p, m));
    }
    let mut csv = String::from("layer,head,mean_acc,ci_low,ci_high,n_seeds,p_raw,p_corrected\n");
    println!("{:>5} {:>4} {:>8} {:>17} {:>10} {:>10}", "layer", "head", "mean", "95% CI", "p", "p_bonf");
    for t in &tests {
        let p = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:.6e}"));
        csv.push_str(&format!(
            "{},{},{:.6},{:.6},{:.6},{},{},{}\n",
            t.head.layer,
            t.head.head,
            t.mean_acc,
            t.ci_low,
            t.ci_high,
            t.n_seeds,
            p(t.p_raw),
            p(t.p_corrected)
        ));
        println!(
            "{:>5} {:>4} {:>8.4} [{:.4}, {:.4}] {:>10} {:>10}",
            t.head.layer,
            t.head.head,
            t.mean_acc,
            t.ci_low,
            t.ci_high,
            p(t.p_raw),
            p(t.p_corrected)
        );
    }
    let stem = format!("{}_stats", file_stem(&path));
    ctx.write_json(
        &format!("{stem}.json"),
        &StatsOutput {
            baseline: a.baseline,
            bonferroni_m: m,
            tests: &tests,
            aggregate: &agg,
        },
    )?;
    ctx.write_text(&format!("{stem}.csv"), &csv)?;
    Ok(())
}

fn probe_kind(kind: DirectionKind) -> (ProbeFamily, ScanTarget) {
    match kind {
        DirectionKind::PlusProtagonist => (ProbeFamily::Binary, ScanTarget::Protagonist),
        DirectionKind::MinusOracle => (ProbeFamily::Binary, ScanTarget::Oracle),
        _ => (ProbeFamily::Multinomial, ScanTarget::Joint),
    }
}

pub fn directions(ctx: &Context, a: DirectionsArgs) -> CmdResult {
    let path = input(a.data, ctx.cfg.paths.dataset.as_ref(), "--data")?;
    let ds = ActivationDataset::read(&path).invalid()?;
    let kind = match (a.kind, ctx.cfg.intervention.kind) {
        (Some(k), _) => kind(k),
        (None, Some(DirectionKind::Transferred)) => {
            return Err(invalid("kind `transferred` is set with --transferred, not as a kind"))
        }
        (None, Some(k)) => k,
        (None, None) => DirectionKind::PlusTpfo,
    };
    let k = a.k.or(ctx.cfg.intervention.k).unwrap_or(DEFAULT_K);
    let total = ds.layers() * ds.heads();
    if k == 0 || k > total {
        return Err(invalid(format!(
            "--k {k} is out of range: {} has {total} heads ({} layers x {} heads)",
            path.display(),
            ds.layers(),
            ds.heads()
        )));
    }
    let alpha = a.alpha.or(ctx.cfg.intervention.alpha).unwrap_or(DEFAULT_ALPHA);
    let frac = ctx.train_fraction(a.train_fraction);
    let probe_cfg = beliefscope::probekit::ProbeConfig {
        seed: a.seed,
        ..ctx.probe_config()
    };
    probe_cfg.validate().invalid()?;
    let (fam, tgt) = probe_kind(kind);

    let scan_path = a.scan.or_else(|| ctx.cfg.paths.scan.clone());
    let ranking = match scan_path {
        Some(p) => {
            let sr: ScanResult = read_json(&p)?;
            if (sr.layers, sr.heads) != (ds.layers(), ds.heads()) {
                return Err(invalid(format!(
                    "scan grid {}x{} does not match dataset {}x{}",
                    sr.layers,
                    sr.heads,
                    ds.layers(),
                    ds.heads()
                )));
            }
            sr
        }
        None => {
            let cfg = ScanConfig {
                probe: probe_cfg.clone(),
                train_fraction: frac,
            };
            run_scan(&ds, fam, tgt, &[a.seed], &cfg).runtime()?
        }
    };
    let heads = top_k(&ranking, k).invalid()?;
    let split = make_split(&ds, a.seed, frac).invalid()?;
    let mut probes = BTreeMap::new();
    if kind != DirectionKind::Random {
        for &h in &heads {
            let p = train_head_probe(&ds, h, fam, tgt, &split, &probe_cfg)
                .with_context(|| format!("probe at {h}"))
                .runtime()?;
            probes.insert(h, p);
        }
    }
    let mut spec = build_spec(&heads, &probes, kind, alpha, k, &ds, &split.train, a.seed).runtime()?;
    if a.transferred {
        spec = spec.transferred_from(ds.meta().task);
    }
    let stem = artifact_stem(ds.meta().task, "spec", &format!("{}-k{k}", snake(&kind)));
    let path = ctx.out_file(&format!("{stem}.json"))?;
    spec.write(&path).runtime()?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn load_model(ctx: &Context, flag: Option<PathBuf>) -> CmdResult<ToyTransformer> {
    let path = input(flag, ctx.cfg.paths.weights.as_ref(), "--weights")?;
    ToyTransformer::read(&path).invalid()
}

fn load_spec(path: &Path) -> CmdResult<InterventionSpec> {
    if !path.is_file() {
        return Err(invalid(format!("--spec: {} does not exist", path.display())));
    }
    InterventionSpec::read(path).invalid()
}

#[derive(Serialize)]
struct Generation {
    prompt: Vec<usize>,
    generated: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    alpha: Option<f64>,
}

#[derive(Serialize)]
struct Comparison {
    prompt: Vec<usize>,
    baseline: Vec<usize>,
    steered: Vec<usize>,
    alpha: f64,
    first_token_changed: bool,
}

pub fn toylab(ctx: &Context, cmd: ToyCommand) -> CmdResult {
    match cmd {
        ToyCommand::Init { seed } => {
            let model = ToyTransformer::init(ToyConfig::with_seed(seed)).runtime()?;
            let path = ctx.out_file(&format!("toy_seed{seed}.weights"))?;
            model.write(&path).runtime()?;
            eprintln!("wrote {} ({} parameters)", path.display(), model.param_count());
            Ok(())
        }
        ToyCommand::Generate(a) => {
            let model = load_model(ctx, a.weights.clone())?;
            let spec = a.spec.as_deref().map(load_spec).transpose()?;
            let tokens = model.generate(&a.tokens, a.max_new, spec.as_ref()).invalid()?;
            let g = Generation {
                generated: tokens[a.tokens.len()..].to_vec(),
                prompt: a.tokens,
                alpha: spec.map(|s| s.alpha),
            };
            println!("{}", serde_json::to_string(&g).runtime()?);
            ctx.write_json("toylab_generate.json", &g)?;
            Ok(())
        }
        ToyCommand::Intervene(GenerateArgs {
            weights,
            tokens,
            max_new,
            spec,
        }) => {
            let model = load_model(ctx, weights)?;
            let spec = load_spec(&spec.ok_or_else(|| invalid("--spec is required for intervene"))?)?;
            let base = model.generate(&tokens, max_new, None).invalid()?;
            let steered = model.generate(&tokens, max_new, Some(&spec)).invalid()?;
            let n = tokens.len();
            let c = Comparison {
                first_token_changed: max_new > 0 && base[n] != steered[n],
                baseline: base[n..].to_vec(),
                steered: steered[n..].to_vec(),
                prompt: tokens,
                alpha: spec.alpha,
            };
            println!("{}", serde_json::to_string(&c).runtime()?);
            ctx.write_json("toylab_intervene.json", &c)?;
            Ok(())
        }
        ToyCommand::Attribute(a) => {
            let model = load_model(ctx, a.weights)?;
            let head = HeadCoord::new(a.layer, a.head);
            let theta = match (a.spec, a.theta) {
                (Some(p), _) => load_spec(&p)?
                    .entries
                    .into_iter()
                    .find(|e| e.coord() == head)
                    .map(|e| e.theta)
                    .ok_or_else(|| invalid(format!("spec has no entry for {head}")))?,
                (None, Some(t)) => t,
                (None, None) => return Err(invalid("one of --spec or --theta is required")),
            };
            let attr: Vec<TokenAttribution> = grad_attribution(&model, &a.tokens, head, &theta).invalid()?;
            ctx.write_json("toylab_attribution.json", &attr)?;
            Ok(())
        }
        ToyCommand::Synth(a) => synth(ctx, a),
        ToyCommand::Extract(a) => extract(ctx, a),
    }
}

fn parse_head(s: &str) -> CmdResult<HeadCoord> {
    let (l, h) = s
        .split_once(':')
        .ok_or_else(|| invalid(format!("planted head `{s}` is not layer:head")))?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|_| invalid(format!("bad planted head `{s}`")));
    Ok(HeadCoord::new(parse(l)?, parse(h)?))
}

#[derive(Serialize)]
struct PlantedInfo {
    head: HeadCoord,
    /// Normalized mean difference of the TpFo class.
    tpfo_direction: Vec<f64>,
}

fn synth(ctx: &Context, a: SynthArgs) -> CmdResult {
    let mut planted = Vec::new();
    for p in &a.plant {
        let head = parse_head(p)?;
        planted.push(PlantedHead::orthogonal(head, a.dim, a.separation * a.noise, a.noise).invalid()?);
    }
    let cfg = SynthConfig {
        n: a.n,
        layers: a.layers,
        heads: a.heads,
        head_dim: a.dim,
        planted,
        labels: LabelScheme::Balanced,
        background_noise: a.background,
        seed: a.seed,
    };
    let s = synth_dataset(&cfg).invalid()?;
    let path = ctx.out_file("synthetic.actv")?;
    s.dataset.write(&path).runtime()?;
    eprintln!("wrote {}", path.display());
    let info: Vec<PlantedInfo> = s
        .planted
        .iter()
        .map(|p| PlantedInfo {
            head: p.head,
            tpfo_direction: p.mean_difference(JointClass::TP_FO),
        })
        .collect();
    ctx.write_json("synthetic_planted.json", &info)?;
    Ok(())
}

fn task_items(ctx: &Context, flag: Option<PathBuf>, task: Task) -> CmdResult<Vec<BenchmarkItem>> {
    let path = input(flag, ctx.cfg.paths.benchmark.as_ref(), "--benchmark")?;
    let items: Vec<BenchmarkItem> = load_benchmark(&path).invalid()?.into_iter().filter(|i| i.task == task).collect();
    if items.is_empty() {
        return Err(invalid(format!("{} has no `{task}` items", path.display())));
    }
    Ok(items)
}

fn extract(ctx: &Context, a: ExtractArgs) -> CmdResult {
    let model = load_model(ctx, a.weights)?;
    let task: Task = a.task.into();
    let items = task_items(ctx, a.benchmark, task)?;
    let prompts = build_probe_prompts(&items, task).invalid()?;
    let meta = DatasetMeta::new(format!("toy-seed{}", model.config().seed), task, prompts[0].template_id.clone());
    let ds = extract_dataset(&model, &prompts, meta).runtime()?;
    let path = ctx.out_file(&format!("{task}_toy.actv"))?;
    ds.write(&path).runtime()?;
    eprintln!("wrote {} ({} rows)", path.display(), ds.n());
    Ok(())
}

pub fn grade(ctx: &Context, a: GradeArgs) -> CmdResult {
    let path = input(a.benchmark, ctx.cfg.paths.benchmark.as_ref(), "--benchmark")?;
    let items = load_benchmark(&path).invalid()?;
    let text = fs::read_to_string(&a.transcripts)
        .with_context(|| format!("reading {}", a.transcripts.display()))
        .invalid()?;
    let mut runner = TranscriptRunner::new();
    runner.add_jsonl(&text, None).invalid()?;
    let (results, report) = evaluate(&runner, &items, None).invalid()?;
    let mut jsonl = String::new();
    for r in &results {
        jsonl.push_str(&serde_json::to_string(r).runtime()?);
        jsonl.push('\n');
    }
    ctx.write_text(&format!("{}_results.jsonl", a.name), &jsonl)?;
    ctx.write_json(&format!("{}_report.json", a.name), &report)?;
    println!("{}", serde_json::to_string_pretty(&report).runtime()?);
    Ok(())
}

pub fn sweep(ctx: &Context, a: SweepArgs) -> CmdResult {
    let path = input(a.benchmark, ctx.cfg.paths.benchmark.as_ref(), "--benchmark")?;
    let items = load_benchmark(&path).invalid()?;
    if items.is_empty() {
        return Err(invalid(format!("{} has no items", path.display())));
    }
    let spec_path = a.spec.or_else(|| ctx.cfg.paths.spec.clone());
    let alphas = a
        .alphas
        .or_else(|| ctx.cfg.intervention.alphas.clone())
        .unwrap_or_else(|| DEFAULT_ALPHAS.to_vec());
    let (runner, template): (Box<dyn Runner>, InterventionSpec) = match a.runner {
        RunnerArg::Toy => {
            let model = ToyTransformer::init(ToyConfig::with_seed(a.toy_seed)).runtime()?;
            let r = FlipTaskRunner::new(model, FlipTask::default()).runtime()?;
            let t = match &spec_path {
                Some(p) => load_spec(p)?,
                None => r.spec(1.0),
            };
            (Box::new(r), t)
        }
        RunnerArg::Transcripts => {
            if a.transcripts.is_empty() {
                return Err(invalid("--transcripts is required for the transcripts runner"));
            }
            let mut r = TranscriptRunner::new();
            for p in &a.transcripts {
                let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display())).invalid()?;
                r.add_jsonl(&text, None).with_context(|| p.display().to_string()).invalid()?;
            }
            let p = spec_path.ok_or_else(|| invalid("--spec is required for the transcripts runner"))?;
            (Box::new(r), load_spec(&p)?)
        }
    };
    let ks = a
        .ks
        .or_else(|| ctx.cfg.intervention.ks.clone())
        .unwrap_or_else(|| vec![template.k]);
    if let Some(&bad) = ks.iter().find(|&&k| k == 0 || k > template.entries.len()) {
        return Err(invalid(format!("k = {bad} but the spec has {} entries", template.entries.len())));
    }
    if alphas.is_empty() || alphas.iter().any(|a| !a.is_finite()) {
        return Err(invalid("--alphas must be a non-empty list of finite numbers"));
    }
    let result = run_sweep(runner.as_ref(), &items, &template, &alphas, &ks).runtime()?;
    let stem = artifact_stem(items[0].task, "sweep", &snake(&template.kind));
    ctx.write_json(&format!("{stem}.json"), &result)?;
    ctx.write_text(&format!("{stem}.csv"), &result.to_csv())?;
    print!("{}", result.to_csv());
    Ok(())
}

pub fn report(ctx: &Context, a: ReportArgs) -> CmdResult {
    let need = |p: Option<PathBuf>, name: &str| input(p, None, name);
    match a.kind {
        ReportKind::Grid => {
            let path = need(a.scan.or_else(|| ctx.cfg.paths.scan.clone()), "--scan")?;
            let sr: ScanResult = read_json(&path)?;
            let title = format!("{} {} probe accuracy", snake(&sr.family), snake(&sr.target));
            let r = render_grid(sr.mean_grid().view(), &title).invalid()?;
            ctx.write_rendered(&r, &file_stem(&path).replacen("_scan", "_grid", 1))
        }
        ReportKind::Curves => {
            let path = need(a.sweep, "--sweep")?;
            let s: SweepResult = read_json(&path)?;
            let k = a.k.or_else(|| s.cells.first().map(|c| c.k)).ok_or_else(|| invalid("empty sweep"))?;
            let r = render_curves(&s, k).invalid()?;
            ctx.write_rendered(&r, &format!("{}-k{k}", file_stem(&path).replacen("_sweep", "_curves", 1)))
        }
        ReportKind::Scatter => {
            let px = need(a.scan, "--scan")?;
            let py = need(a.scan_y, "--scan-y")?;
            let (sx, sy): (ScanResult, ScanResult) = (read_json(&px)?, read_json(&py)?);
            if (sx.layers, sx.heads) != (sy.layers, sy.heads) {
                return Err(invalid("the two scans cover different head grids"));
            }
            let points: Vec<ScatterPoint> = sx
                .head_coords()
                .into_iter()
                .filter_map(|h| {
                    let (x, y) = (sx.mean_accuracy(h).ok()?, sy.mean_accuracy(h).ok()?);
                    (x.is_finite() && y.is_finite()).then_some(ScatterPoint { head: h, x, y })
                })
                .collect();
            let r = render_scatter(&points, &file_stem(&px), &file_stem(&py)).invalid()?;
            ctx.write_rendered(&r, &format!("{}_scatter_{}", file_stem(&px), file_stem(&py)))
        }
        ReportKind::Strip => {
            let path = need(a.attribution, "--attribution")?;
            let attr: Vec<TokenAttribution> = read_json(&path)?;
            let labels = a
                .labels
                .unwrap_or_else(|| attr.iter().map(|t| t.token_id.to_string()).collect());
            let r = render_strip(&labels, &attr).invalid()?;
            ctx.write_rendered(&r, &format!("{}_strip", file_stem(&path)))
        }
        ReportKind::Cca => {
            let path = need(a.data.or_else(|| ctx.cfg.paths.dataset.clone()), "--data")?;
            let ds = ActivationDataset::read(&path).invalid()?;
            let (l, h) = (
                a.layer.ok_or_else(|| invalid("--layer is required for cca"))?,
                a.head.ok_or_else(|| invalid("--head is required for cca"))?,
            );
            let x = ds.slice_head(l, h).invalid()?;
            let y = label_matrix(ds.y_oracle(), ds.y_protagonist()).invalid()?;
            let cca = cca_fit(x.view(), y.view()).invalid()?;
            let z = cca.transform(x.view()).runtime()?;
            let b = boundaries_2d(z.view(), ds.y_oracle(), ds.y_protagonist(), &ctx.probe_config()).runtime()?;
            let r = render_cca(z.view(), &ds.joint_labels(), Some(&b)).runtime()?;
            let stem = artifact_stem(ds.meta().task, "cca", &format!("L{l}H{h}"));
            ctx.write_json(&format!("{stem}.json"), &serde_json::json!({ "cca": cca, "boundaries": b }))?;
            ctx.write_rendered(&r, &stem)
        }
    }
}

pub fn prompts(ctx: &Context, a: PromptsArgs) -> CmdResult {
    let task: Task = a.task.into();
    let items = task_items(ctx, a.benchmark, task)?;
    let prompts = build_probe_prompts(&items, task).invalid()?;
    let mut out = String::new();
    for p in &prompts {
        out.push_str(&serde_json::to_string(p).runtime()?);
        out.push('\n');
    }
    ctx.write_text(&format!("{task}_prompts.jsonl"), &out)?;
    Ok(())
}
