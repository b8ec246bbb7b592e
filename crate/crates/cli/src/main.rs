use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ctsdg::data::{group_by_domain, read_jsonl, write_jsonl, DomainDataset, SequenceSample};
use ctsdg::eval::{
    ablation_text, accuracy, export_representations, lodo_table, run_ablations, run_fixed_target, run_lodo,
    AblationTable, LodoResult, Method,
};
use ctsdg::io::write_atomic;
use ctsdg::manifest::RunManifest;
use ctsdg::model::{AnyModel, SequenceClassifier};
use ctsdg::nn::ParamSet;
use ctsdg::scm::{gen_domain_dataset, sample_domain, DomainSpec, ScmConfig};
use ctsdg::training::{read_config_table, stream_rng, train_ctsdg, train_erm, TrainConfig, TrainReport};
use ctsdg::{Error, Result};

#[derive(Parser)]
#[command(name = "ctsdg", version, about = "Causal domain-generalizing pass/yield intention prediction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate labeled interaction windows from the causal simulator
    Synth(SynthArgs),
    /// Train one model on source domains
    Train(TrainArgs),
    /// Accuracy of a checkpoint on a dataset
    Eval(EvalArgs),
    /// Leave-one-domain-out (or fixed-target) evaluation
    Lodo(LodoArgs),
    /// The five-column ablation table
    Ablate(AblateArgs),
    /// Write per-sample causal features and representations as CSV
    ExportRepr(ExportArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Built-in domain name (FT-1, FT-2, FT-3, ZS) or a TOML/JSON spec file; repeatable
    #[arg(long = "spec", required = true)]
    specs: Vec<String>,
    #[arg(long, default_value_t = 100)]
    n_per_class: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Jitter each spec's angle by up to ±5 degrees
    #[arg(long)]
    jitter: bool,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    causal_sidecar: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
}

/// Training hyperparameters; each flag overrides the config file.
#[derive(Args, Default)]
struct ConfigArgs {
    /// TOML or JSON file of training settings
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    phase1_threshold: Option<usize>,
    #[arg(long)]
    val_frac: Option<f64>,
    /// cos_dist, l1 or l2
    #[arg(long)]
    metric: Option<String>,
    #[arg(long)]
    metric_override: Option<String>,
    #[arg(long)]
    no_lv: bool,
    #[arg(long)]
    no_contrast: bool,
    /// mean or sum
    #[arg(long)]
    loss_reduction: Option<String>,
    #[arg(long)]
    grad_clip: Option<f64>,
    #[arg(long)]
    init_scale: Option<f64>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<TrainConfig> {
        let base = match &self.config {
            Some(p) => read_config_table(p)?,
            None => Default::default(),
        };
        let mut o = toml::Table::new();
        let mut put = |k: &str, v: Option<toml::Value>| {
            if let Some(v) = v {
                o.insert(k.to_string(), v);
            }
        };
        let int = |v: Option<usize>| v.map(|x| toml::Value::Integer(x as i64));
        let float = |v: Option<f64>| v.map(toml::Value::Float);
        let string = |v: &Option<String>| v.clone().map(toml::Value::String);
        put("seed", self.seed.map(|s| toml::Value::Integer(s as i64)));
        put("lr", float(self.lr));
        put("epochs", int(self.epochs));
        put("batch", int(self.batch));
        put("patience", int(self.patience));
        put("tau", float(self.tau));
        put("gamma", float(self.gamma));
        put("lambda", float(self.lambda));
        put("phase1_threshold", int(self.phase1_threshold));
        put("val_frac", float(self.val_frac));
        put("metric", string(&self.metric));
        put("metric_override", string(&self.metric_override));
        put("reduction", string(&self.loss_reduction));
        put("grad_clip", float(self.grad_clip));
        put("init_scale", float(self.init_scale));
        put("no_lv", self.no_lv.then_some(toml::Value::Boolean(true)));
        put("no_contrast", self.no_contrast.then_some(toml::Value::Boolean(true)));
        TrainConfig::from_tables(base, o)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, required = true, num_args = 1..)]
    data: Vec<PathBuf>,
    /// Domain excluded from training
    #[arg(long)]
    holdout_domain: Option<String>,
    #[arg(long, default_value = "ctsdg")]
    method: String,
    #[arg(long)]
    out_ckpt: PathBuf,
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, required = true, num_args = 1..)]
    data: Vec<PathBuf>,
    /// Restrict evaluation to one domain
    #[arg(long)]
    domain: Option<String>,
    #[arg(long)]
    out_json: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long, num_args = 1..)]
    domains: Vec<PathBuf>,
    #[arg(long, default_value_t = 3)]
    runs: usize,
    /// Worker threads (default: CTSDG_WORKERS or available parallelism)
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    out_json: Option<PathBuf>,
    #[arg(long)]
    out_table: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Re-run from a manifest and check the outputs are byte-identical
    #[arg(long, conflicts_with_all = ["domains", "config"])]
    replay: Option<PathBuf>,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args)]
struct LodoArgs {
    #[arg(long, default_value = "ctsdg")]
    method: String,
    /// Fixed-target mode: the single test domain
    #[arg(long, requires = "sources")]
    target: Option<String>,
    /// Fixed-target mode: training domains
    #[arg(long, num_args = 1.., requires = "target")]
    sources: Vec<String>,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, required = true, num_args = 1..)]
    data: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Lodo(a) => lodo(a),
        Command::Ablate(a) => ablate(a),
        Command::ExportRepr(a) => export(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn workers(flag: Option<usize>) -> Result<usize> {
    if let Some(w) = flag {
        return Ok(w.max(1));
    }
    match std::env::var("CTSDG_WORKERS") {
        Ok(v) => v
            .parse::<usize>()
            .map(|w| w.max(1))
            .map_err(|_| Error::Config(format!("CTSDG_WORKERS must be a positive integer, got {v:?}"))),
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

fn manifest_path(flag: &Option<PathBuf>, primary: Option<&Path>) -> Option<PathBuf> {
    flag.clone()
        .or_else(|| primary.map(|p| PathBuf::from(format!("{}.manifest.json", p.display()))))
}

fn load_spec(name: &str) -> Result<DomainSpec> {
    if let Some(s) = DomainSpec::named(name) {
        return Ok(s);
    }
    let path = Path::new(name);
    if !path.exists() {
        return Err(Error::Usage(format!("{name:?} is neither a built-in domain nor a spec file")));
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let spec: DomainSpec = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{name}: {e}")))?
    } else {
        toml::from_str(&text).map_err(|e| Error::Config(format!("{name}: {e}")))?
    };
    spec.validate()?;
    Ok(spec)
}

fn synth(a: SynthArgs) -> Result<()> {
    let scm = ScmConfig::default();
    let mut samples = Vec::new();
    let mut sidecar = String::new();
    let mut seen = BTreeSet::new();
    for (i, name) in a.specs.iter().enumerate() {
        let spec = load_spec(name)?;
        if !seen.insert(spec.domain_id.clone()) {
            return Err(Error::Usage(format!("domain {} given twice", spec.domain_id)));
        }
        let mut rng = stream_rng(a.seed, i as u64);
        let spec = sample_domain(&[spec], a.jitter, &mut rng)?;
        let generated = gen_domain_dataset(&spec, a.n_per_class, &scm, &mut rng)?;
        log::info!(
            "{}: {} samples ({} abandoned)",
            spec.domain_id,
            generated.dataset.len(),
            generated.skipped
        );
        sidecar.push_str(&generated.sidecar_jsonl());
        samples.extend(generated.dataset.samples);
    }
    write_jsonl(&a.out, &samples)?;
    let mut m = RunManifest::start("synth", &TrainConfig::default());
    m.seeds.push(a.seed);
    m.set("specs", &a.specs);
    m.set("n_per_class", a.n_per_class);
    m.set("jitter", a.jitter);
    m.set("scm", &scm);
    m.add_output(&a.out)?;
    if let Some(p) = &a.causal_sidecar {
        write_atomic(p, sidecar.as_bytes())?;
        m.add_output(p)?;
    }
    m.finish();
    m.write(&manifest_path(&a.manifest, Some(&a.out)).expect("path"))
}

fn load_domains(paths: &[PathBuf], window: usize, manifest: Option<&mut RunManifest>) -> Result<Vec<DomainDataset>> {
    if paths.is_empty() {
        return Err(Error::Usage("no dataset files given".into()));
    }
    let mut all: Vec<SequenceSample> = Vec::new();
    for p in paths {
        all.extend(read_jsonl(p, window)?);
    }
    if let Some(m) = manifest {
        for p in paths {
            m.add_input(p)?;
        }
    }
    let mut ids = BTreeSet::new();
    for s in &all {
        if !ids.insert(s.sample_id.as_str()) {
            return Err(Error::Data(format!("duplicate sample id {}", s.sample_id)));
        }
    }
    Ok(group_by_domain(all))
}

fn parse_method(s: &str) -> Result<Method> {
    s.parse().map_err(|e: Error| Error::Usage(e.to_string()))
}

fn train(a: TrainArgs) -> Result<()> {
    let cfg = a.cfg.resolve()?;
    let method = parse_method(&a.method)?;
    let mut m = RunManifest::start("train", &cfg);
    let domains = load_domains(&a.data, cfg.window, Some(&mut m))?;
    let sources: Vec<DomainDataset> = domains
        .into_iter()
        .filter(|d| Some(&d.domain_id) != a.holdout_domain.as_ref())
        .collect();
    log::info!(
        "training {} on {:?}",
        a.method,
        sources.iter().map(|d| &d.domain_id).collect::<Vec<_>>()
    );
    let (params, kind, report): (ParamSet, &str, TrainReport) = match method {
        Method::Ctsdg => {
            let (model, r) = train_ctsdg(&cfg, &sources)?;
            (model.params().clone(), model.kind(), r)
        }
        Method::Erm => {
            let (model, r) = train_erm(&cfg, &sources)?;
            (model.params().clone(), model.kind(), r)
        }
    };
    params.save(&a.out_ckpt, kind)?;
    m.seeds.push(cfg.seed);
    m.set("method", &a.method);
    m.set("holdout_domain", &a.holdout_domain);
    m.add_output(&a.out_ckpt.join(ctsdg::nn::MANIFEST_FILE))?;
    if let Some(p) = &a.report {
        write_atomic(p, serde_json::to_string_pretty(&report).expect("report serializes").as_bytes())?;
        m.add_output(p)?;
    }
    m.finish();
    m.write(&manifest_path(&a.manifest, Some(&a.out_ckpt.join("run"))).expect("path"))
}

fn load_model(dir: &Path) -> Result<AnyModel> {
    let (kind, params) = ParamSet::load(dir)?;
    AnyModel::from_checkpoint(&kind, params)
}

fn eval(a: EvalArgs) -> Result<()> {
    let model = load_model(&a.ckpt)?;
    let domains = load_domains(&a.data, ctsdg::data::DEFAULT_WINDOW, None)?;
    let samples: Vec<SequenceSample> = domains
        .into_iter()
        .filter(|d| a.domain.as_ref().is_none_or(|id| &d.domain_id == id))
        .flat_map(|d| d.samples)
        .collect();
    let acc = accuracy(&model, &samples)?;
    let out = serde_json::json!({ "accuracy": acc, "n": samples.len(), "domain": a.domain });
    println!("{}", serde_json::to_string(&out).expect("json"));
    if let Some(p) = &a.out_json {
        write_atomic(p, serde_json::to_string_pretty(&out).expect("json").as_bytes())?;
    }
    Ok(())
}

/// Settings recorded for a lodo/ablate run, or recovered from a manifest.
struct Resolved {
    cfg: TrainConfig,
    domains_paths: Vec<PathBuf>,
    runs: usize,
    out_json: Option<PathBuf>,
    out_table: Option<PathBuf>,
    replay: Option<RunManifest>,
}

fn resolve_run(r: &RunArgs, command: &str) -> Result<Resolved> {
    if let Some(p) = &r.replay {
        let m = RunManifest::read(p)?;
        if m.command != command {
            return Err(Error::Usage(format!("manifest records a {} run, not {command}", m.command)));
        }
        m.verify_inputs()?;
        let recorded = |key: &str| -> Result<Option<PathBuf>> { m.setting::<Option<PathBuf>>(key) };
        return Ok(Resolved {
            cfg: m.config.clone(),
            domains_paths: m.inputs.iter().map(|i| PathBuf::from(&i.path)).collect(),
            runs: m.setting("runs")?,
            out_json: r.out_json.clone().or(recorded("out_json")?),
            out_table: r.out_table.clone().or(recorded("out_table")?),
            replay: Some(m),
        });
    }
    Ok(Resolved {
        cfg: r.cfg.resolve()?,
        domains_paths: r.domains.clone(),
        runs: r.runs,
        out_json: r.out_json.clone(),
        out_table: r.out_table.clone(),
        replay: None,
    })
}

fn finish_run(
    r: &RunArgs,
    res: &Resolved,
    mut m: RunManifest,
    json: String,
    table: String,
) -> Result<()> {
    print!("{table}");
    if let Some(p) = &res.out_json {
        write_atomic(p, json.as_bytes())?;
        m.add_output(p)?;
    }
    if let Some(p) = &res.out_table {
        write_atomic(p, table.as_bytes())?;
        m.add_output(p)?;
    }
    m.set("runs", res.runs);
    m.set("out_json", &res.out_json);
    m.set("out_table", &res.out_table);
    m.seeds = (0..res.runs as u64).map(|k| res.cfg.seed + k).collect();
    m.finish();
    if let Some(old) = &res.replay {
        let old_digests: Vec<&str> = old.outputs.iter().map(|o| o.sha256.as_str()).collect();
        let new_digests: Vec<&str> = m.outputs.iter().map(|o| o.sha256.as_str()).collect();
        if old_digests != new_digests {
            return Err(Error::Numeric("replayed outputs differ from the recorded run".into()));
        }
        log::info!("replay reproduced {} output file(s) byte for byte", m.outputs.len());
        return Ok(());
    }
    match manifest_path(&r.manifest, res.out_json.as_deref().or(res.out_table.as_deref())) {
        Some(p) => m.write(&p),
        None => Ok(()),
    }
}

fn lodo(a: LodoArgs) -> Result<()> {
    let res = resolve_run(&a.run, "lodo")?;
    let (method, target, sources) = match &res.replay {
        Some(m) => (m.setting::<String>("method")?, m.setting("target")?, m.setting("sources")?),
        None => (a.method.clone(), a.target.clone(), a.sources.clone()),
    };
    let method_kind = parse_method(&method)?;
    let mut m = RunManifest::start("lodo", &res.cfg);
    let domains = load_domains(&res.domains_paths, res.cfg.window, Some(&mut m))?;
    let w = workers(a.run.workers)?;
    let results: Vec<LodoResult> = match &target {
        Some(t) => vec![run_fixed_target(&domains, &sources, t, &res.cfg, res.runs, method_kind, w)?],
        None => run_lodo(&domains, &res.cfg, res.runs, method_kind, w)?,
    };
    m.set("method", &method);
    m.set("target", &target);
    m.set("sources", &sources);
    let json = serde_json::to_string_pretty(&results).expect("results serialize");
    finish_run(&a.run, &res, m, json, lodo_table(&results))
}

fn ablate(a: AblateArgs) -> Result<()> {
    let res = resolve_run(&a.run, "ablate")?;
    let mut m = RunManifest::start("ablate", &res.cfg);
    let domains = load_domains(&res.domains_paths, res.cfg.window, Some(&mut m))?;
    let table: AblationTable = run_ablations(&domains, &res.cfg, res.runs, workers(a.run.workers)?)?;
    let json = serde_json::to_string_pretty(&table).expect("table serializes");
    finish_run(&a.run, &res, m, json, ablation_text(&table))
}

fn export(a: ExportArgs) -> Result<()> {
    let model = load_model(&a.ckpt)?;
    let domains = load_domains(&a.data, ctsdg::data::DEFAULT_WINDOW, None)?;
    let samples: Vec<SequenceSample> = domains.into_iter().flat_map(|d| d.samples).collect();
    let rows = export_representations(&model, &samples, &a.out)?;
    log::info!("wrote {} rows to {}", rows.len(), a.out.display());
    Ok(())
}
