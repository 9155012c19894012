use std::fs;
use std::path::PathBuf;

use anyhow::Context as _;
use serde::Serialize;
use serde_json::{json, Value};
use ugprobe::data::{
    align, load_embeddings, load_importance, load_responses_with_dim, load_targets, AlignedDataset, DropReport,
    ResponseTable,
};
use ugprobe::experiment::{run_segment_experiment, ExperimentReport, SegmentConfig};
use ugprobe::masking::{
    default_fractions, random_importance, remove_and_retrain, remove_and_test, subset_masking_comparison,
    validate_fractions, MaskingCurve,
};
use ugprobe::rng::{derive_seed, RNG_ALGORITHM};
use ugprobe::segmentation::{ranking_csv, sort_desc_by_uncertainty};
use ugprobe::synthetic::{end_to_end_check, generate_planted, oracle_gap_experiment, GapConfig, SyntheticConfig};
use ugprobe::uncertainty::{score_dataset, score_responses, Estimator};
use ugprobe::VERSION;

use crate::config::{self, input_error, pick, require, FileConfig, Preset};
use crate::{
    Cli, Command, Common, E2eArgs, GenerateArgs, Inputs, MaskArgs, Masking, Scoring, SubsetArgs, SweepArgs,
    SyntheticCommand, TrendArgs, UncertaintyArgs,
};

const DEFAULT_OUT: &str = "ugprobe-out";
/// Seed stream of the random-mask control.
const RANDOM_CONTROL: u64 = 0x7261_6e64;

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.workers {
        Some(0) => Err(input_error("--workers must be at least 1")),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .context("building worker pool")?
            .install(|| dispatch(cli.command)),
        None => dispatch(cli.command),
    }
}

fn dispatch(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Uncertainty(a) => uncertainty(a),
        Command::ProbeSweep(a) => probe_sweep(a),
        Command::MaskEval(a) => mask(a, false),
        Command::Roar(a) => mask(a, true),
        Command::Subsets(a) => subsets(a),
        Command::Synthetic(SyntheticCommand::Generate(a)) => synthetic_generate(a),
        Command::Synthetic(SyntheticCommand::E2e(a)) => synthetic_e2e(a),
        Command::Synthetic(SyntheticCommand::OracleTrend(a)) => oracle_trend(a),
    }
}

struct Output {
    dir: PathBuf,
}

impl Output {
    fn new(common: &Common, file: &FileConfig) -> anyhow::Result<Self> {
        let dir = pick(common.out.clone(), file.out.clone(), PathBuf::from(DEFAULT_OUT));
        fs::create_dir_all(&dir)
            .map_err(|e| input_error(format!("cannot create output directory {}: {e}", dir.display())))?;
        Ok(Self { dir })
    }

    fn write(&self, name: &str, contents: impl AsRef<[u8]>) -> anyhow::Result<()> {
        let path = self.dir.join(name);
        fs::write(&path, contents).map_err(|e| input_error(format!("cannot write {}: {e}", path.display())))
    }

    fn json(&self, name: &str, value: &impl Serialize) -> anyhow::Result<()> {
        self.write(name, serde_json::to_string_pretty(value)? + "\n")
    }

    /// Effective configuration, tool version and headline results.
    fn manifest(&self, command: &str, config: Value, results: Value) -> anyhow::Result<()> {
        self.json(
            "manifest.json",
            &json!({
                "tool": "ugprobe",
                "version": VERSION,
                "command": command,
                "rng": RNG_ALGORITHM,
                "config": config,
                "results": results,
            }),
        )
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_owned(), |v| format!("{v:.4}"))
}

fn show(p: &Option<PathBuf>) -> Value {
    p.as_ref().map_or(Value::Null, |p| Value::String(p.display().to_string()))
}

struct Loaded {
    dataset: AlignedDataset,
    echo: Value,
}

fn report_drops(drops: &DropReport) {
    for (source, ids) in [
        ("embeddings", &drops.embeddings),
        ("responses", &drops.responses),
        ("targets", &drops.targets),
    ] {
        if !ids.is_empty() {
            eprintln!("note: {} ids missing from {source} were dropped", ids.len());
        }
    }
    if let Some(ids) = drops.importance.as_ref().filter(|ids| !ids.is_empty()) {
        eprintln!("note: {} ids missing from importance were dropped", ids.len());
    }
}

fn load(inputs: &Inputs, file: &FileConfig, need_responses: bool, need_importance: bool) -> anyhow::Result<Loaded> {
    let embeddings = require(inputs.embeddings.clone(), file.embeddings.clone(), "embeddings")?;
    let targets = require(inputs.targets.clone(), file.targets.clone(), "targets")?;
    let responses = inputs.responses.clone().or(file.responses.clone());
    let importance = inputs.importance.clone().or(file.importance.clone());
    let response_dim = inputs.response_dim.or(file.response_dim);
    if need_responses && responses.is_none() {
        return Err(input_error("missing --responses (or \"responses\" in the config file)"));
    }
    if need_importance && importance.is_none() {
        return Err(input_error("missing --importance (or \"importance\" in the config file)"));
    }

    let emb = load_embeddings(&embeddings)?;
    let tgt = load_targets(&targets)?;
    let resp = match &responses {
        Some(p) => load_responses_with_dim(p, response_dim)?,
        None => ResponseTable::empty_for(emb.ids(), tgt.t())?,
    };
    let imp = importance.as_ref().map(load_importance).transpose()?;
    let dataset = align(&emb, &resp, &tgt, imp.as_ref())?;
    report_drops(&dataset.drops);
    let echo = json!({
        "embeddings": embeddings.display().to_string(),
        "responses": show(&responses),
        "targets": targets.display().to_string(),
        "importance": show(&importance),
        "response_dim": response_dim,
        "n_aligned": dataset.n(),
        "d": dataset.d(),
        "t": dataset.t(),
    });
    Ok(Loaded { dataset, echo })
}

fn scoring(s: &Scoring, file: &FileConfig) -> (Estimator, usize) {
    let estimator = pick(s.estimator, file.estimator, Estimator::Variance);
    let min = pick(s.min_responses, file.min_responses, estimator.min_responses_floor());
    (estimator, min)
}

fn uncertainty(a: UncertaintyArgs) -> anyhow::Result<()> {
    let file = FileConfig::load(a.common.config.as_deref())?;
    let responses = require(a.inputs.responses.clone(), file.responses.clone(), "responses")?;
    let response_dim = a.inputs.response_dim.or(file.response_dim);
    let (estimator, min_responses) = scoring(&a.scoring, &file);
    let table = load_responses_with_dim(&responses, response_dim)?;
    let scores = score_responses(&table, estimator, min_responses)?;

    let out = Output::new(&a.common, &file)?;
    out.write("scores.csv", scores.to_csv())?;
    out.write("ranking.csv", ranking_csv(&sort_desc_by_uncertainty(&scores)))?;
    let n = scores.len() as f64;
    let stats = json!({
        "n_scored": scores.len(),
        "n_excluded": scores.excluded.len(),
        "excluded": scores.excluded,
        "min": scores.scores.iter().copied().fold(f64::INFINITY, f64::min),
        "mean": scores.scores.iter().sum::<f64>() / n,
        "max": scores.scores.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    });
    println!(
        "scored {} samples ({} excluded): min {} mean {} max {}",
        scores.len(),
        scores.excluded.len(),
        stats["min"],
        stats["mean"],
        stats["max"]
    );
    out.manifest(
        "uncertainty",
        json!({
            "responses": responses.display().to_string(),
            "response_dim": response_dim,
            "estimator": estimator,
            "min_responses": min_responses,
        }),
        stats,
    )
}

fn write_report(out: &Output, report: &ExperimentReport) -> anyhow::Result<Value> {
    out.write("segments.csv", report.rows_csv())?;
    out.write("summary.json", report.summary_json()? + "\n")?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    match &report.summary {
        Some(s) => println!(
            "{} segments; uncertainty vs r2: spearman {} kendall {} pearson {}",
            s.segments_used,
            opt(s.uncertainty_vs_r2.spearman),
            opt(s.uncertainty_vs_r2.kendall),
            opt(s.uncertainty_vs_r2.pearson)
        ),
        None => println!("{} segment(s); too few for a correlation summary", report.rows.len()),
    }
    Ok(json!({ "summary": report.summary, "warnings": report.warnings }))
}

fn probe_sweep(a: SweepArgs) -> anyhow::Result<()> {
    let file = FileConfig::load(a.common.config.as_deref())?;
    let loaded = load(&a.inputs, &file, true, false)?;
    let (estimator, min_responses) = scoring(&a.scoring, &file);
    let protocol = config::protocol(&file, a.protocol.seeds, a.protocol.lambda_grid.clone(), a.common.seed)?;
    let segment = SegmentConfig {
        window: pick(a.window, file.window, 6000),
        stride: pick(a.stride, file.stride, 1000),
        top_k: a.top_k.or(file.top_k),
        protocol,
    };
    let scores = score_dataset(&loaded.dataset, estimator, min_responses)?;
    let report = run_segment_experiment(&loaded.dataset, &scores, &segment)?;

    let out = Output::new(&a.common, &file)?;
    out.write("ranking.csv", ranking_csv(&sort_desc_by_uncertainty(&scores)))?;
    let results = write_report(&out, &report)?;
    out.manifest(
        "probe-sweep",
        json!({
            "inputs": loaded.echo,
            "estimator": estimator,
            "min_responses": min_responses,
            "segment": segment,
        }),
        results,
    )
}

fn fractions(m: &Masking, file: &FileConfig) -> anyhow::Result<Vec<f64>> {
    let f = pick(m.fractions.clone(), file.fractions.clone(), default_fractions());
    validate_fractions(&f)?;
    Ok(f)
}

fn recovery(curve: &MaskingCurve) -> Value {
    json!({
        "subset": curve.subset,
        "baseline_r2": curve.baseline.r2,
        "baseline_spearman": curve.baseline.spearman,
        "min_fraction_reaching_90pct_r2": curve.min_fraction_reaching(0.9),
    })
}

fn mask(a: MaskArgs, retrain: bool) -> anyhow::Result<()> {
    let file = FileConfig::load(a.common.config.as_deref())?;
    let loaded = load(&a.inputs, &file, false, true)?;
    let ds = &loaded.dataset;
    let importance = ds.importance.as_ref().expect("importance was required");
    let protocol = config::protocol(&file, a.protocol.seeds, a.protocol.lambda_grid.clone(), a.common.seed)?;
    let fractions = fractions(&a.masking, &file)?;
    let mode = pick(a.masking.mode, file.mode, Default::default());
    let random_control = a.random_control || file.random_control.unwrap_or(false);
    let run = |imp| {
        if retrain {
            remove_and_retrain(ds, imp, &fractions, mode, &protocol)
        } else {
            remove_and_test(ds, imp, &fractions, mode, &protocol)
        }
    };

    let mut curves = vec![run(importance)?];
    if random_control {
        let seed = derive_seed(protocol.master_seed, &[RANDOM_CONTROL]);
        let mut c = run(&random_importance(ds.ids(), ds.d(), seed)?)?;
        c.subset = Some("random".into());
        curves.push(c);
    }

    let out = Output::new(&a.common, &file)?;
    let mut csv = MaskingCurve::csv_header().to_owned();
    for c in &curves {
        csv.push_str(&c.csv_rows());
    }
    out.write("curve.csv", csv)?;
    out.json("curve.json", &curves)?;
    for c in &curves {
        println!(
            "{}: baseline r2 {:.4}; 90% recovery at fraction {}",
            c.subset.as_deref().unwrap_or("all"),
            c.baseline.r2,
            opt(c.min_fraction_reaching(0.9))
        );
    }
    let command = if retrain { "roar" } else { "mask-eval" };
    out.manifest(
        command,
        json!({
            "inputs": loaded.echo,
            "protocol": protocol,
            "fractions": fractions,
            "mode": mode,
            "random_control": random_control,
        }),
        Value::Array(curves.iter().map(recovery).collect()),
    )
}

fn subsets(a: SubsetArgs) -> anyhow::Result<()> {
    let file = FileConfig::load(a.common.config.as_deref())?;
    let loaded = load(&a.inputs, &file, true, true)?;
    let ds = &loaded.dataset;
    let importance = ds.importance.as_ref().expect("importance was required");
    let (estimator, min_responses) = scoring(&a.scoring, &file);
    let protocol = config::protocol(&file, a.protocol.seeds, a.protocol.lambda_grid.clone(), a.common.seed)?;
    let fractions = fractions(&a.masking, &file)?;
    let mode = pick(a.masking.mode, file.mode, Default::default());
    let subset_size = pick(a.subset_size, file.subset_size, 5000);
    let strategy = pick(a.strategy, file.strategy, Default::default());

    let scores = score_dataset(ds, estimator, min_responses)?;
    let cmp = subset_masking_comparison(ds, &scores, importance, subset_size, &fractions, mode, &protocol, strategy)?;

    let out = Output::new(&a.common, &file)?;
    out.write("curves.csv", cmp.to_csv())?;
    out.json("curves.json", &cmp)?;
    for c in cmp.curves() {
        println!(
            "{}: baseline r2 {:.4}; 90% recovery at fraction {}",
            c.subset.as_deref().unwrap_or(""),
            c.baseline.r2,
            opt(c.min_fraction_reaching(0.9))
        );
    }
    out.manifest(
        "subsets",
        json!({
            "inputs": loaded.echo,
            "estimator": estimator,
            "min_responses": min_responses,
            "protocol": protocol,
            "fractions": fractions,
            "mode": mode,
            "subset_size": subset_size,
            "strategy": strategy,
        }),
        Value::Array(cmp.curves().iter().map(|c| recovery(c)).collect()),
    )
}

fn synthetic_config(preset: Option<Preset>, common: &Common, file: &FileConfig) -> anyhow::Result<SyntheticConfig> {
    let mut config = match (preset, &file.synthetic) {
        (Some(p), _) => p.config(0),
        (None, Some(c)) => c.clone(),
        (None, None) => file.preset.unwrap_or(Preset::EightTier).config(0),
    };
    if let Some(seed) = common.seed.or(file.seed) {
        config.master_seed = seed;
    }
    config.validate()?;
    Ok(config)
}

fn synthetic_generate(a: GenerateArgs) -> anyhow::Result<()> {
    let file = FileConfig::load(a.common.config.as_deref())?;
    let config = synthetic_config(a.preset, &a.common, &file)?;
    let bundle = generate_planted(&config)?;
    let out = Output::new(&a.common, &file)?;
    bundle.write(&out.dir)?;
    println!(
        "wrote {} samples x {} features in {} groups to {}",
        config.n,
        config.d,
        config.groups.len(),
        out.dir.display()
    );
    out.manifest(
        "synthetic generate",
        json!({ "synthetic": config }),
        json!({ "group_sizes": config.group_sizes() }),
    )
}

fn synthetic_e2e(a: E2eArgs) -> anyhow::Result<()> {
    let file = FileConfig::load(a.common.config.as_deref())?;
    let config = synthetic_config(a.preset, &a.common, &file)?;
    let protocol = config::protocol(&file, a.protocol.seeds, a.protocol.lambda_grid.clone(), a.common.seed)?;
    let window = pick(a.window, file.window, 1000);
    let stride = pick(a.stride, file.stride, 250);
    let report = end_to_end_check(&config, window, stride, &protocol)?;
    let out = Output::new(&a.common, &file)?;
    let results = write_report(&out, &report)?;
    out.manifest(
        "synthetic e2e",
        json!({
            "synthetic": config,
            "window": window,
            "stride": stride,
            "protocol": protocol,
            "estimator": Estimator::Variance,
        }),
        results,
    )
}

fn oracle_trend(a: TrendArgs) -> anyhow::Result<()> {
    let file = FileConfig::load(a.common.config.as_deref())?;
    let mut gap = file
        .gap
        .clone()
        .unwrap_or_else(|| GapConfig::new(512, vec![4, 8, 16, 32, 64], 256, 1.0, 50));
    gap.d = a.d.unwrap_or(gap.d);
    gap.s_values = a.s_values.clone().unwrap_or(gap.s_values);
    gap.n = a.n.unwrap_or(gap.n);
    gap.lambda = a.lambda.unwrap_or(gap.lambda);
    gap.trials = a.trials.unwrap_or(gap.trials);
    if let Some(seed) = a.common.seed.or(file.seed) {
        gap.master_seed = seed;
    }
    let table = oracle_gap_experiment(&gap)?;

    let out = Output::new(&a.common, &file)?;
    out.write("gap.csv", table.to_csv())?;
    out.json("gap.json", &table)?;
    println!("spearman(s, mean gap) = {}", opt(table.trend));
    out.manifest("synthetic oracle-trend", json!({ "gap": gap }), json!({ "trend": table.trend }))
}

