use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use cdyn_core::dataio::{
    build_loo_folds, derive_seed, load_snapshot_table, save_snapshot_table, ConditionInfo, FoldSpec, RunConfig,
    SnapshotDataset,
};
use cdyn_core::evalsuite::{EvaluationReport, ProbeConfig};
use cdyn_core::genmodel::ModelParams;
use cdyn_core::numcore::BackwardFault;
use cdyn_core::pipeline::{
    diagnose_model, evaluate_folds, model_fold_groups, predict_cells, recovery_metrics, resolve_embedding,
    run_gradcheck, score_block_report, state_pairs_from_latents, table_fold_groups, train_model, Ablation,
    DiagnoseReport, GradcheckConfig, StepLog,
};
use cdyn_core::synthgen::{export_dataset, load_latents_truth, make_generator, sample_trajectories, Manifest, SynthConfig};
use serde::Serialize;

use crate::{CliError, Command, DiagnoseArgs, EvaluateArgs, GenerateArgs, GradcheckArgs, PredictArgs, TrainArgs};

type CmdResult = Result<Vec<PathBuf>, CliError>;

pub(crate) struct Ctx<'a> {
    pub env_seed: Option<&'a str>,
    pub out: &'a mut dyn Write,
}

impl Ctx<'_> {
    fn say(&mut self, line: impl AsRef<str>) {
        let _ = writeln!(self.out, "{}", line.as_ref());
    }

    /// flag > CDYN_SEED > file value
    fn seed(&self, file: u64, flag: Option<u64>) -> Result<u64, CliError> {
        if let Some(s) = flag {
            return Ok(s);
        }
        match self.env_seed {
            Some(v) => v
                .trim()
                .parse()
                .map_err(|_| CliError::Validation(format!("CDYN_SEED=`{v}` is not an unsigned integer"))),
            None => Ok(file),
        }
    }
}

pub(crate) fn dispatch(cmd: Command, mut ctx: Ctx<'_>) -> CmdResult {
    match cmd {
        Command::Generate(a) => generate(a, &mut ctx),
        Command::Train(a) => train(a, &mut ctx),
        Command::Predict(a) => predict(a, &mut ctx),
        Command::Evaluate(a) => evaluate(a, &mut ctx),
        Command::Gradcheck(a) => gradcheck(a, &mut ctx),
        Command::Diagnose(a) => diagnose(a, &mut ctx),
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

fn mkdir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<PathBuf, CliError> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| io_err(path, e))?;
    Ok(path.to_path_buf())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}

fn model_file(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join("model.json")
    } else {
        path.to_path_buf()
    }
}

fn load_model(path: &Path) -> Result<ModelParams, CliError> {
    let file = model_file(path);
    if !file.exists() {
        return Err(CliError::Validation(format!("model file {} not found", file.display())));
    }
    Ok(ModelParams::load(&file)?)
}

fn generate(a: GenerateArgs, ctx: &mut Ctx<'_>) -> CmdResult {
    let mut cfg: SynthConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => SynthConfig::default(),
    };
    cfg.seed = ctx.seed(cfg.seed, a.seed)?;
    if a.unpaired {
        cfg.unpaired = true;
    }
    if let Some(n) = a.cells {
        cfg.n_cells = n;
    }
    cfg.validate()?;
    let gen = make_generator(&cfg)?;
    let bundle = sample_trajectories(&gen, cfg.n_cells, cfg.horizon, derive_seed(cfg.seed, &[20]), cfg.unpaired)?;
    let summary = export_dataset(&gen, &bundle, &cfg, &a.out)?;
    ctx.say(format!(
        "generated {} cells over {} conditions in {}",
        summary.n_cells,
        summary.n_conditions,
        a.out.display()
    ));
    ctx.say(format!(
        "rank check: rank {} of required {} ({})",
        summary.rank.rank,
        summary.rank.required,
        if summary.rank.pass { "pass" } else { "FAIL" }
    ));
    Ok(vec![a.out.join("snapshot.csv"), a.out.join("conditions.json"), a.out.join("manifest.json")])
}

/// Condition ids with the control first.
fn control_first(ds: &SnapshotDataset) -> Vec<String> {
    let mut ids = vec![ds.control_id().to_string()];
    ids.extend(ds.condition_ids().into_iter().filter(|c| c != ds.control_id()));
    ids
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    model: &'a str,
    steps: usize,
    final_loss: f64,
    ablation: Ablation,
    skipped: Vec<String>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    unmatched: Vec<String>,
}

#[derive(Serialize)]
struct LogLine<'a> {
    model: &'a str,
    #[serde(flatten)]
    step: &'a StepLog,
}

fn train(a: TrainArgs, ctx: &mut Ctx<'_>) -> CmdResult {
    let ablation: Ablation = a.ablate.parse()?;
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.seed = ctx.seed(cfg.seed, a.seed)?;
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    cfg.validate()?;
    let ds = load_snapshot_table(&a.data)?;
    mkdir(&a.out)?;
    let log_path = a.out.join("train_log.jsonl");
    let mut log = BufWriter::new(File::create(&log_path).map_err(|e| io_err(&log_path, e))?);
    let mut reports = vec![log_path.clone()];
    reports.push(write_json(&a.out.join("config.json"), &cfg)?);

    let mut summaries = Vec::new();
    let mut fit = |name: &str, data: &SnapshotDataset, conditions: &[String], out: &Path| -> CmdResult {
        let mut on_step = |s: &StepLog| -> cdyn_core::Result<()> {
            serde_json::to_writer(&mut log, &LogLine { model: name, step: s })?;
            log.write_all(b"\n").map_err(|e| cdyn_core::Error::io(&log_path, e))
        };
        let r = train_model(data, conditions, &cfg, ablation, &mut on_step)?;
        mkdir(out)?;
        let model_path = out.join("model.json");
        r.params.save(&model_path)?;
        summaries.push((name.to_string(), r.final_loss));
        let summary = TrainSummary {
            model: name,
            steps: r.steps,
            final_loss: r.final_loss,
            ablation,
            skipped: r.skipped.iter().map(|s| format!("{}@t{}", s.condition, s.time)).collect(),
            unmatched: r.unmatched.iter().map(|(k, c, t)| format!("{k}:{c}@t{t}")).collect(),
        };
        Ok(vec![model_path, write_json(&out.join("train_summary.json"), &summary)?])
    };

    reports.extend(fit("full", &ds, &control_first(&ds), &a.out)?);
    if a.loo {
        let folds = build_loo_folds(&ds, cfg.n_hvg, cfg.k_de)?;
        for fold in &folds {
            let rows: Vec<usize> = fold
                .train_mask(&ds)
                .iter()
                .enumerate()
                .filter_map(|(i, &keep)| keep.then_some(i))
                .collect();
            let sub = ds.subset_cells(&rows).subset_genes(&fold.genes);
            let dir = a.out.join("folds").join(&fold.held_out);
            reports.extend(fit(&fold.held_out, &sub, &fold.train_conditions, &dir)?);
            reports.push(write_json(&dir.join("fold.json"), fold)?);
        }
        reports.push(write_json(&a.out.join("fold_report.json"), &folds)?);
    }
    drop(fit);
    log.flush().map_err(|e| io_err(&log_path, e))?;
    for (name, loss) in &summaries {
        ctx.say(format!("trained {name}: final epoch mean loss {loss:.6}"));
    }
    ctx.say(format!("wrote {}", a.out.display()));
    Ok(reports)
}

#[derive(Serialize)]
struct PredictionSummary {
    requested: String,
    embedding: String,
    fallback: bool,
    start_time: usize,
    start_from: String,
    times: Vec<usize>,
    cells_per_time: usize,
    seed: u64,
}

fn predict(a: PredictArgs, ctx: &mut Ctx<'_>) -> CmdResult {
    if a.horizon <= 0 {
        return Err(CliError::Validation(format!("horizon must be ≥ 1, got {}", a.horizon)));
    }
    let horizon = a.horizon as usize;
    let seed = ctx.seed(0, a.seed)?;
    let params = load_model(&a.model)?;
    let ds = load_snapshot_table(&a.data)?;
    if params.config.p != ds.n_genes() {
        return Err(CliError::Validation(format!(
            "model expects {} genes, data has {}",
            params.config.p,
            ds.n_genes()
        )));
    }
    let targets: Option<Vec<String>> = a
        .targets
        .as_ref()
        .map(|t| t.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect());
    let choice = resolve_embedding(&params.config.conditions, &ds.conditions, &a.condition, targets.as_deref())?;

    // start from the condition's latest snapshot, or the control's when it has no cells
    let own = ds.condition_index(&a.condition).ok();
    let times = ds.times();
    let latest = |c: usize| times.iter().rev().copied().find(|&t| !ds.cells(c, t).is_empty());
    let (src, t0) = match own.and_then(|c| latest(c).map(|t| (c, t))) {
        Some(x) => x,
        None => {
            let c = ds.control_index();
            (c, latest(c).ok_or_else(|| CliError::Validation("control has no cells".into()))?)
        }
    };
    let start = times.iter().position(|&t| t == t0).expect("time from dataset");
    let x0 = ds.expression.select_rows(&ds.cells(src, t0));
    let cells = predict_cells(&params, &x0, start.min(params.config.horizon), &choice.used, horizon, seed)?;

    let mut conditions = ds.conditions.clone();
    let cond_idx = match own {
        Some(c) => c,
        None => {
            conditions.push(ConditionInfo {
                id: a.condition.clone(),
                targets: targets.clone().unwrap_or_default(),
                is_control: false,
            });
            conditions.len() - 1
        }
    };
    let n = x0.rows();
    let refs: Vec<&_> = cells.iter().collect();
    let expression = cdyn_core::numcore::Matrix::vcat(&refs)?;
    let out_times: Vec<usize> = (1..=horizon).map(|k| t0 + k).collect();
    let pred = SnapshotDataset {
        expression,
        cell_ids: out_times
            .iter()
            .flat_map(|t| {
                let c = &a.condition;
                (0..n).map(move |i| format!("{c}_pred_t{t}_{i}"))
            })
            .collect(),
        condition: vec![cond_idx; n * horizon],
        time: out_times.iter().flat_map(|&t| std::iter::repeat_n(t, n)).collect(),
        genes: ds.genes.clone(),
        conditions,
        value_mode: ds.value_mode,
    };
    save_snapshot_table(&pred, &a.out)?;
    let summary = PredictionSummary {
        requested: a.condition.clone(),
        embedding: choice.used.clone(),
        fallback: choice.fallback,
        start_time: t0,
        start_from: ds.conditions[src].id.clone(),
        times: out_times,
        cells_per_time: n,
        seed,
    };
    let sp = write_json(&a.out.join("prediction.json"), &summary)?;
    if choice.fallback {
        ctx.say(format!(
            "`{}` was not seen in training; used the embedding of `{}`",
            a.condition, choice.used
        ));
    }
    ctx.say(format!("predicted {horizon} step(s) of {n} cells into {}", a.out.display()));
    Ok(vec![a.out.join("snapshot.csv"), a.out.join("conditions.json"), sp])
}

fn evaluate(a: EvaluateArgs, ctx: &mut Ctx<'_>) -> CmdResult {
    let seed = ctx.seed(0, a.seed)?;
    let ds = load_snapshot_table(&a.data)?;
    let k = a.k.unwrap_or(100);
    if k == 0 {
        return Err(CliError::Validation("--K must be ≥ 1".into()));
    }
    mkdir(&a.out)?;
    let mut reports = Vec::new();
    let mut notes = Vec::new();

    let model_dir = a.model.as_ref().map(|m| match model_file(m).parent() {
        Some(p) => p.to_path_buf(),
        None => PathBuf::from("."),
    });
    let fold_dir = |h: &str| model_dir.as_ref().map(|d| d.join("folds").join(h));

    let folds: Vec<FoldSpec> = match &a.folds {
        Some(p) => read_json(p)?,
        None => {
            let built = build_loo_folds(&ds, None, k)?;
            // fold models fix their own gene subsets
            built
                .into_iter()
                .map(|f| match fold_dir(&f.held_out).map(|d| d.join("fold.json")).filter(|p| p.exists()) {
                    Some(p) => read_json(&p),
                    None => Ok(f),
                })
                .collect::<Result<_, _>>()?
        }
    };
    if a.folds.is_none() {
        reports.push(write_json(&a.out.join("fold_report.json"), &folds)?);
    }

    let full = match &a.model {
        Some(m) => Some(load_model(m)?),
        None => None,
    };
    let preds = match &a.pred {
        Some(p) => Some(load_snapshot_table(p)?),
        None => None,
    };
    let mut shared = Vec::new();
    let (fold_reports, pooled) = evaluate_folds(&ds, &folds, k, |fold| {
        if let Some(p) = &preds {
            return table_fold_groups(&ds, fold, p);
        }
        let own = fold_dir(&fold.held_out).map(|d| d.join("model.json")).filter(|p| p.exists());
        match own {
            Some(path) => model_fold_groups(&ds, fold, &ModelParams::load(&path)?, derive_seed(seed, &[40])),
            None => {
                shared.push(fold.held_out.clone());
                let params = full.as_ref().expect("model or predictions required");
                model_fold_groups(&ds, fold, params, derive_seed(seed, &[40]))
            }
        }
    })?;
    if !shared.is_empty() {
        notes.push(format!(
            "no per-fold model for {}; the full model (trained with these conditions) was used",
            shared.join(", ")
        ));
    }

    let (mut recovery, mut probe, mut recovery_note) = (None, None, None);
    match (&full, load_latents_truth(&a.data, &ds)?) {
        (Some(params), Some(truth)) if truth.cols() == params.config.d_latent() && params.config.p == ds.n_genes() => {
            let r = recovery_metrics(params, &ds, &truth, derive_seed(seed, &[41]), &ProbeConfig::default(), a.recovery_cells)?;
            recovery = Some(r.recovery);
            probe = Some(r.probe);
        }
        (Some(_), Some(_)) => recovery_note = Some("model latent size or gene count differs from the ground truth".into()),
        (None, _) => recovery_note = Some("recovery needs a model; predictions only were given".into()),
        (_, None) => recovery_note = Some("no ground-truth latents next to the data".into()),
    }
    let report = EvaluationReport {
        folds: fold_reports,
        pooled,
        recovery,
        probe,
        recovery_note,
        notes,
    };
    report.save(&a.out)?;
    reports.push(a.out.join("evaluation.json"));
    reports.push(a.out.join("metrics.csv"));

    for f in &report.folds {
        let m = &f.metrics;
        ctx.say(format!(
            "{:>10}  rmse {:.4}  r2 {}  mae {:.4}  dpearson {:.4}  auc {:.4}  auprc {:.4}",
            f.held_out,
            m.rmse,
            m.pseudobulk_r2.map_or("n/a".to_string(), |v| format!("{v:.4}")),
            m.mae,
            m.delta_pearson,
            m.auc_roc,
            m.auprc
        ));
    }
    match (&report.recovery, &report.probe) {
        (Some(r), Some(p)) => ctx.say(format!(
            "recovery: mcc_nu {:.4}  linear r2 iota {:?}  probe r2 {:.4}  probe spearman {:.4}",
            r.mcc_nu, r.linear_r2_iota, p.r2_mean, p.spearman_mean
        )),
        _ => ctx.say(format!(
            "recovery: absent ({})",
            report.recovery_note.as_deref().unwrap_or("unknown")
        )),
    }
    Ok(reports)
}

fn gradcheck(a: GradcheckArgs, ctx: &mut Ctx<'_>) -> CmdResult {
    let mut cfg: GradcheckConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => GradcheckConfig::default(),
    };
    cfg.seed = ctx.seed(cfg.seed, a.seed)?;
    if let Some(t) = a.trials {
        cfg.trials = t;
    }
    let fault = a.inject_fault.then_some(BackwardFault::FlipTanhSign);
    let report = run_gradcheck(&cfg, fault)?;
    let mut reports = Vec::new();
    if let Some(out) = &a.out {
        mkdir(out)?;
        reports.push(write_json(&out.join("gradcheck.json"), &report)?);
    }
    let w = report.worst();
    ctx.say(format!(
        "{} trials, max relative error {:.3e} (tolerance {:.0e})",
        report.trials.len(),
        report.max_rel_error,
        report.tolerance
    ));
    if !report.pass {
        return Err(CliError::Validation(format!(
            "gradient check failed: trial {}, coordinate {} ({}), analytic {:.6e}, numeric {:.6e}, relative error {:.3e}",
            w.trial, w.worst_index, w.worst_param, w.analytic, w.numeric, w.max_rel_error
        )));
    }
    Ok(reports)
}

fn diagnose(a: DiagnoseArgs, ctx: &mut Ctx<'_>) -> CmdResult {
    let ds = load_snapshot_table(&a.data)?;
    if ds.conditions.len() < 2 {
        return Err(CliError::Validation("diagnosis needs at least two environments".into()));
    }
    if a.per_env == 0 {
        return Err(CliError::Validation("--per-env must be ≥ 1".into()));
    }
    let report: DiagnoseReport = if a.generator {
        let manifest = Manifest::load(&a.data)?;
        let truth = load_latents_truth(&a.data, &ds)?
            .ok_or_else(|| CliError::Validation("no ground-truth latents next to the data".into()))?;
        let pairs = state_pairs_from_latents(&ds, &truth, a.per_env)?;
        score_block_report(&manifest.generator, &pairs, &manifest.generator.bank.baseline().id)?
    } else {
        let params = load_model(a.model.as_ref().expect("clap enforces a law"))?;
        diagnose_model(&params, &ds, a.per_env)?
    };
    mkdir(&a.out)?;
    let path = write_json(&a.out.join("diagnose.json"), &report)?;
    ctx.say(format!(
        "mean |d_iota| {:.4e}  mean |d_nu| {:.4e}  ratio {:.4e}  over {} environments",
        report.iota_norm_mean,
        report.nu_norm_mean,
        report.ratio,
        report.environments.len()
    ));
    Ok(vec![path])
}
