use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use serde::de::DeserializeOwned;
use serde::Serialize;

use kbq_core::dialog::{self, heuristic_position, subsequent_entities, Dialog};
use kbq_core::position::{self, label_metrics, PositionConfig, PositionMetrics, PositionModel};
use kbq_core::synth::{self, BenchConfig, SynthError};
use kbq_core::train::{self, Dataset, EpochRecord, QueryMetrics, TrainHistory};
use kbq_core::{
    systematic_explore, FeatureTemplate, KnowledgeBase, PolicyError, PolicyParameters, TrainConfig, TrainError,
};

use crate::manifest::Record;
use crate::{
    manifest_path, CmdResult, Command, EvalArgs, ExploreArgs, Failure, Format, LabelArgs, Positions, SynthArgs,
    TrainArgs,
};

pub fn execute(cmd: Command) -> CmdResult<Record> {
    match cmd {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Explore(a) => explore(a),
        Command::LabelPositions(a) => label_positions(a),
        Command::Replay(_) => unreachable!("replay is dispatched by the caller"),
    }
}

fn load_kb(path: &Path) -> CmdResult<KnowledgeBase> {
    let kb = KnowledgeBase::load(path)
        .with_context(|| format!("loading KB {}", path.display()))
        .map_err(Failure::data)?;
    if kb.fields().len() > kbq_core::policy::MAX_FIELDS {
        return Err(Failure::data(anyhow!(
            "KB has {} fields; at most {} are supported",
            kb.fields().len(),
            kbq_core::policy::MAX_FIELDS
        )));
    }
    Ok(kb)
}

fn load_corpus(path: &Path) -> CmdResult<Vec<Dialog>> {
    dialog::load_corpus(path)
        .with_context(|| format!("loading corpus {}", path.display()))
        .map_err(Failure::data)
}

fn read_config<T: DeserializeOwned>(path: &Path) -> CmdResult<T> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))
        .map_err(Failure::usage)?;
    serde_json::from_str(&text)
        .with_context(|| format!("parsing config {}", path.display()))
        .map_err(Failure::usage)
}

fn write(path: &Path, text: impl AsRef<[u8]>) -> CmdResult {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)
            .with_context(|| format!("creating {}", dir.display()))
            .map_err(Failure::data)?;
    }
    std::fs::write(path, text)
        .with_context(|| format!("writing {}", path.display()))
        .map_err(Failure::data)
}

fn write_json(path: &Path, value: &impl Serialize) -> CmdResult {
    write(path, serde_json::to_string_pretty(value).expect("serializable") + "\n")
}

fn make_dir(dir: &Path) -> CmdResult {
    std::fs::create_dir_all(dir)
        .with_context(|| format!("creating {}", dir.display()))
        .map_err(Failure::data)
}

fn override_with<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

fn synth(a: SynthArgs) -> CmdResult<Record> {
    let mut cfg: BenchConfig = match &a.config {
        Some(p) => read_config(p)?,
        None => BenchConfig::default(),
    };
    override_with(&mut cfg.rho, a.rho);
    override_with(&mut cfg.rows, a.rows);
    override_with(&mut cfg.train_dialogs, a.dialogs);
    override_with(&mut cfg.val_dialogs, a.val_dialogs);
    override_with(&mut cfg.test_dialogs, a.test_dialogs);
    override_with(&mut cfg.heuristic_match, a.heuristic_match);
    override_with(&mut cfg.overconstrained, a.overconstrained);
    override_with(&mut cfg.seed, a.seed);

    let bench = synth::generate(&cfg).map_err(|e| match e {
        SynthError::Config(_) => Failure::usage(e),
        _ => Failure::data(e),
    })?;
    let gold = synth::verify_gold(&bench).map_err(Failure::data)?;

    make_dir(&a.out)?;
    let mut outputs = Vec::new();
    let kb_path = a.out.join("kb.json");
    write(&kb_path, bench.kb.to_json_string())?;
    outputs.push(kb_path);
    for (name, dialogs) in bench.splits() {
        let p = a.out.join(format!("{name}.json"));
        write(&p, dialog::corpus_to_json_string(dialogs))?;
        outputs.push(p);
    }
    #[derive(Serialize)]
    struct Manifest<'a> {
        #[serde(flatten)]
        bench: &'a synth::BenchManifest,
        gold: &'a synth::GoldReport,
    }
    let p = a.out.join("manifest.json");
    write_json(
        &p,
        &Manifest {
            bench: &bench.manifest,
            gold: &gold,
        },
    )?;
    outputs.push(p);

    println!(
        "wrote {} rows, {}/{}/{} dialogs to {} (achieved rho {:.3})",
        bench.kb.rows().len(),
        bench.train.len(),
        bench.val.len(),
        bench.test.len(),
        a.out.display(),
        bench.manifest.achieved_rho
    );
    Ok(Record {
        seed: Some(cfg.seed),
        configs: a.config.into_iter().collect(),
        inputs: Vec::new(),
        outputs,
        manifest: manifest_path(&a.out, true),
    })
}

fn train_failure(e: TrainError) -> Failure {
    match e {
        TrainError::Config(_) | TrainError::MissingGold(_) | TrainError::NoPositionModel => Failure::usage(e),
        _ => Failure::data(e),
    }
}

fn load_position_model(path: &Path, kb: &KnowledgeBase) -> CmdResult<PositionModel> {
    PositionModel::load(path, kb).map_err(|e| match e {
        position::PositionError::SchemaMismatch { .. } => Failure::state(e),
        _ => Failure::data(anyhow::Error::new(e).context(format!("loading {}", path.display()))),
    })
}

/// Resolves positions for `dialogs`, filling heuristic labels in place when
/// that mode is requested.
fn positions_for(
    dialogs: &mut [Dialog],
    kb: &KnowledgeBase,
    mode: Positions,
    model: Option<&PositionModel>,
) -> CmdResult<Vec<usize>> {
    if mode == Positions::Heuristic {
        for d in dialogs.iter_mut() {
            d.heuristic_position = heuristic_position(d, kb);
        }
    }
    if mode == Positions::Predicted && model.is_none() {
        return Err(Failure::usage(anyhow!("--positions predicted needs --position-model")));
    }
    train::resolve_positions(dialogs, kb, mode.into(), model).map_err(train_failure)
}

fn metrics_csv(epochs: &[EpochRecord]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["epoch", "split", "metric", "value"])
        .expect("in-memory write");
    for e in epochs {
        for (split, metric, value) in e.rows() {
            w.write_record([e.epoch.to_string(), split.into(), metric.into(), value.to_string()])
                .expect("in-memory write");
        }
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("ascii")
}

#[derive(Serialize)]
struct TrainReport<'a> {
    config: &'a TrainConfig,
    positions: &'static str,
    train_dialogs: usize,
    val_dialogs: usize,
    best_epoch: usize,
    best: &'a EpochRecord,
    history: &'a TrainHistory,
}

fn positions_name(p: Positions) -> &'static str {
    match p {
        Positions::Gold => "gold",
        Positions::Heuristic => "heuristic",
        Positions::Predicted => "predicted",
    }
}

fn train(a: TrainArgs) -> CmdResult<Record> {
    let mut cfg: TrainConfig = match &a.config {
        Some(p) => read_config(p)?,
        None => TrainConfig::default(),
    };
    override_with(&mut cfg.estimator, a.estimator.map(Into::into));
    override_with(&mut cfg.alpha, a.alpha);
    override_with(&mut cfg.alpha_h, a.alpha_h);
    override_with(&mut cfg.alpha_o, a.alpha_o);
    override_with(&mut cfg.lambda, a.lambda);
    override_with(&mut cfg.epsilon, a.eps);
    override_with(&mut cfg.samples, a.samples);
    override_with(&mut cfg.beam_width, a.beam);
    override_with(&mut cfg.learning_rate, a.lr);
    override_with(&mut cfg.batch_size, a.batch);
    override_with(&mut cfg.max_epochs, a.epochs);
    override_with(&mut cfg.patience, a.patience);
    override_with(&mut cfg.seed, a.seed);
    override_with(&mut cfg.max_clauses, a.max_clauses);
    override_with(&mut cfg.hash_bits, a.hash_bits);
    cfg.validate().map_err(train_failure)?;

    let kb = load_kb(&a.kb)?;
    let mut train_dialogs = load_corpus(&a.train)?;
    let mut val_dialogs = load_corpus(&a.val)?;
    if matches!(
        cfg.estimator,
        kbq_core::EstimatorKind::Sl | kbq_core::EstimatorKind::Slrl
    ) {
        if let Some(i) = train_dialogs.iter().position(|d| d.gold_query.is_none()) {
            return Err(Failure::usage(anyhow!(
                "--estimator {} needs gold queries; training dialog {i} has none",
                cfg.estimator
            )));
        }
    }
    let model = match &a.position_model {
        Some(p) => Some(load_position_model(p, &kb)?),
        None => None,
    };
    let train_pos = positions_for(&mut train_dialogs, &kb, a.positions, model.as_ref())?;
    let val_pos = positions_for(&mut val_dialogs, &kb, a.positions, model.as_ref())?;

    make_dir(&a.out)?;
    let mut outputs = Vec::new();
    if a.positions == Positions::Heuristic {
        let p = a.out.join("train.labeled.json");
        write(&p, dialog::corpus_to_json_string(&train_dialogs))?;
        outputs.push(p);
    }

    let template = cfg.template(&kb);
    let build = |ds: &[Dialog], pos: &[usize]| Dataset::new(ds, pos, &kb, &template).map_err(train_failure);
    let train_set = build(&train_dialogs, &train_pos)?;
    let val_set = build(&val_dialogs, &val_pos)?;
    let outcome = train::train(&train_set, &val_set, &kb, &cfg).map_err(train_failure)?;

    let ck = a.out.join("checkpoint.json");
    outcome.params.save(&ck).map_err(Failure::data)?;
    outputs.push(ck);
    let csv_path = a.out.join("metrics.csv");
    write(&csv_path, metrics_csv(&outcome.history.epochs))?;
    outputs.push(csv_path);
    let h = &outcome.history;
    let best = &h.epochs[h.best_epoch - 1];
    let report = a.out.join("report.json");
    write_json(
        &report,
        &TrainReport {
            config: &cfg,
            positions: positions_name(a.positions),
            train_dialogs: train_set.len(),
            val_dialogs: val_set.len(),
            best_epoch: h.best_epoch,
            best,
            history: h,
        },
    )?;
    outputs.push(report);

    if a.train_position {
        let labels: Vec<Option<usize>> = train_dialogs.iter().map(|d| heuristic_position(d, &kb)).collect();
        let labeled: Vec<Dialog> = train_dialogs
            .iter()
            .zip(&labels)
            .map(|(d, &l)| Dialog {
                heuristic_position: l,
                ..d.clone()
            })
            .collect();
        let pm = position::train_position(&labeled, &kb, |d| d.heuristic_position, &PositionConfig::default())
            .map_err(Failure::data)?;
        let p = a.out.join("position.json");
        pm.save(&p).map_err(Failure::data)?;
        outputs.push(p);
        if val_dialogs.iter().all(|d| d.gold_position.is_some()) {
            let m = position::position_metrics(&pm, &val_dialogs, &kb).map_err(Failure::data)?;
            let p = a.out.join("position_report.json");
            write_json(&p, &m)?;
            outputs.push(p);
        }
    }

    println!(
        "best epoch {} of {}: val total reward {:.4}{}",
        h.best_epoch,
        h.epochs.len(),
        best.val.total_reward,
        best.val
            .query_accuracy
            .map(|x| format!(", accuracy {x:.3}"))
            .unwrap_or_default()
    );
    let mut inputs = vec![a.kb, a.train, a.val];
    inputs.extend(a.position_model);
    Ok(Record {
        seed: Some(cfg.seed),
        configs: a.config.into_iter().collect(),
        inputs,
        outputs,
        manifest: manifest_path(&a.out, true),
    })
}

fn load_checkpoint(path: &Path, kb: &KnowledgeBase) -> CmdResult<PolicyParameters> {
    let params = PolicyParameters::load(path, None).map_err(|e| match e {
        PolicyError::TemplateMismatch { .. } | PolicyError::Corrupt(_) => Failure::state(e),
        _ => Failure::data(anyhow::Error::new(e).context(format!("loading {}", path.display()))),
    })?;
    let t = params.template();
    if t.fields.len() > kbq_core::policy::MAX_FIELDS || t.hash_bits > 24 {
        return Err(Failure::state(anyhow!("checkpoint template is out of range")));
    }
    let expected = FeatureTemplate::new(kb, t.hash_bits, t.max_clauses);
    if expected.hash() != t.hash() {
        return Err(Failure::state(PolicyError::TemplateMismatch {
            expected: expected.hash(),
            found: t.hash(),
        }));
    }
    Ok(params)
}

#[derive(Debug, Serialize)]
struct EvalReport {
    positions: &'static str,
    query: QueryMetrics,
    /// Classifier positions against gold, when both are available.
    position: Option<PositionMetrics>,
    /// Heuristic labels against gold, when gold positions are present.
    heuristic_position: Option<PositionMetrics>,
}

impl EvalReport {
    fn rows(&self) -> Vec<(&'static str, &'static str, f64)> {
        let q = &self.query;
        let mut out = Vec::new();
        if let Some(x) = q.query_accuracy {
            out.push(("eval", "query_accuracy", x));
        }
        if let Some(x) = q.piq_ratio {
            out.push(("eval", "piq_ratio", x));
        }
        out.push(("eval", "total_reward", q.total_reward));
        out.push(("eval", "mean_reward", q.mean_reward));
        for (split, m) in [("position", &self.position), ("heuristic", &self.heuristic_position)] {
            if let Some(m) = m {
                out.push((split, "accuracy", m.accuracy));
                out.push((split, "lenient_accuracy", m.lenient_accuracy));
                out.push((split, "average_turn_difference", m.average_turn_difference));
            }
        }
        out
    }
}

fn eval(a: EvalArgs) -> CmdResult<Record> {
    let kb = load_kb(&a.kb)?;
    let params = load_checkpoint(&a.checkpoint, &kb)?;
    let mut dialogs = load_corpus(&a.corpus)?;
    let model = match &a.position_model {
        Some(p) => Some(load_position_model(p, &kb)?),
        None => None,
    };
    let pos = positions_for(&mut dialogs, &kb, a.positions, model.as_ref())?;
    let data = Dataset::new(&dialogs, &pos, &kb, params.template()).map_err(train_failure)?;
    let query = train::evaluate(&params, &data, &kb);
    let has_gold_pos = !dialogs.is_empty() && dialogs.iter().all(|d| d.gold_position.is_some());
    let position = match (&model, has_gold_pos) {
        (Some(m), true) => Some(position::position_metrics(m, &dialogs, &kb).map_err(Failure::data)?),
        _ => None,
    };
    let heuristic = if has_gold_pos {
        Some(label_metrics(&dialogs, |d| heuristic_position(d, &kb)).map_err(Failure::data)?)
    } else {
        None
    };
    let report = EvalReport {
        positions: positions_name(a.positions),
        query,
        position,
        heuristic_position: heuristic,
    };
    match a.format {
        Format::Json => write_json(&a.out, &report)?,
        Format::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(["epoch", "split", "metric", "value"])
                .expect("in-memory write");
            for (split, metric, value) in report.rows() {
                w.write_record(["0", split, metric, &value.to_string()])
                    .expect("in-memory write");
            }
            write(&a.out, w.into_inner().expect("in-memory flush"))?;
        }
    }
    println!(
        "{} dialogs: accuracy {}, PIQ {}, total reward {:.4}",
        report.query.dialogs,
        fmt_opt(report.query.query_accuracy),
        fmt_opt(report.query.piq_ratio),
        report.query.total_reward
    );
    let mut inputs = vec![a.kb, a.corpus, a.checkpoint];
    inputs.extend(a.position_model);
    Ok(Record {
        seed: None,
        configs: Vec::new(),
        inputs,
        manifest: manifest_path(&a.out, false),
        outputs: vec![a.out],
    })
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(|| "n/a".into(), |v| format!("{v:.3}"))
}

#[derive(Serialize)]
struct ExploreDump {
    dialog: usize,
    position: usize,
    best_reward: f64,
    entries: Vec<kbq_core::ExplorationEntry>,
}

fn explore(a: ExploreArgs) -> CmdResult<Record> {
    let kb = load_kb(&a.kb)?;
    let mut dialogs = load_corpus(&a.corpus)?;
    let pos = positions_for(&mut dialogs, &kb, a.positions, None)?;
    let mut dumps = Vec::new();
    let mut skipped = 0;
    for (i, (d, &q)) in dialogs.iter().zip(&pos).enumerate() {
        let bad = |e: dialog::DialogError| Failure::data(anyhow!("dialog {i}: {e}"));
        let es = subsequent_entities(d, q, &kb).map_err(bad)?;
        if es.is_empty() {
            eprintln!("dialog {i}: nothing after turn {q} links to the KB; skipped");
            skipped += 1;
            continue;
        }
        let ctx = d.context(q).map_err(bad)?;
        let r = systematic_explore(&ctx, &es, &kb, a.max_clauses);
        dumps.push(ExploreDump {
            dialog: i,
            position: q,
            best_reward: r.best_reward,
            entries: r.entries,
        });
    }
    write_json(&a.out, &dumps)?;
    let n = dumps.len().max(1) as f64;
    println!(
        "explored {} dialogs ({} skipped): mean {:.2} positive queries, mean best reward {:.4}",
        dumps.len(),
        skipped,
        dumps.iter().map(|d| d.entries.len()).sum::<usize>() as f64 / n,
        dumps.iter().map(|d| d.best_reward).sum::<f64>() / n
    );
    Ok(Record {
        seed: None,
        configs: Vec::new(),
        inputs: vec![a.kb, a.corpus],
        manifest: manifest_path(&a.out, false),
        outputs: vec![a.out],
    })
}

fn label_positions(a: LabelArgs) -> CmdResult<Record> {
    let kb = load_kb(&a.kb)?;
    let mut dialogs = load_corpus(&a.corpus)?;
    let mut unlabeled = 0;
    for d in &mut dialogs {
        d.heuristic_position = heuristic_position(d, &kb);
        unlabeled += usize::from(d.heuristic_position.is_none());
    }
    write(&a.out, dialog::corpus_to_json_string(&dialogs))?;
    println!(
        "labeled {} of {} dialogs; {unlabeled} have no system turn introducing a new entity",
        dialogs.len() - unlabeled,
        dialogs.len()
    );
    Ok(Record {
        seed: None,
        configs: Vec::new(),
        inputs: vec![a.kb, a.corpus],
        manifest: manifest_path(&a.out, false),
        outputs: vec![PathBuf::from(&a.out)],
    })
}
