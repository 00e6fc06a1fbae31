//! One function per pipeline stage. Every stage reads explicit artifact
//! files, writes its own, and prints a deterministic summary to stdout so
//! identical runs produce identical output byte for byte.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use riskgraph_core::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use riskgraph_core::config::RunConfig;
use riskgraph_core::graph::{
    build_graph as build_csr, graph_summary, load_graph, restrict_to, save_graph,
    TransactionGraph,
};
use riskgraph_core::ingest::{load_tables, ColumnData, RawTable};
use riskgraph_core::metrics::{auroc, metrics_report, MetricsReport};
use riskgraph_core::model::{predict, ModelParams};
use riskgraph_core::preprocess::{
    load_features, preprocess_report, save_features, time_split, transform, FeatureMatrix,
    Split,
};
use riskgraph_core::synth::{generate, write_csvs};
use riskgraph_core::train::{evaluate_all, train_loop};
use riskgraph_core::{Error, Result};

fn ensure_out_dir(cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(&cfg.paths.out_dir)
        .map_err(|e| Error::io(&cfg.paths.out_dir, e))
}

pub fn synth(cfg: &RunConfig) -> Result<()> {
    ensure_out_dir(cfg)?;
    let out = generate(&cfg.synth)?;
    let tx = cfg.paths.transactions_path();
    let id = cfg.paths.identity_path().ok_or_else(|| {
        Error::ConfigError("synth needs paths.identity to write the identity table".into())
    })?;
    write_csvs(&out, &tx, &id)?;
    // Ground-truth ring membership, for analysis; the model never sees it.
    let rings = cfg.paths.out_dir.join("rings.json");
    let ring_json = serde_json::to_string(&out.ring_members)
        .map_err(|e| Error::format(&rings, format!("encode: {e}")))?;
    std::fs::write(&rings, ring_json).map_err(|e| Error::io(&rings, e))?;
    let n_fraud: usize = out
        .transaction_rows
        .iter()
        .filter(|r| r[1] == "1")
        .count();
    println!(
        "generated {} transactions ({} fraud, {} rings), {} identity rows",
        out.transaction_rows.len(),
        n_fraud,
        out.ring_members.len(),
        out.identity_rows.len()
    );
    println!("wrote {} and {}", tx.display(), id.display());
    Ok(())
}

/// Serialize the merged table so later stages re-read exactly what ingest
/// validated. Missing cells become empty strings; floats print in the
/// shortest round-trip form, so a reload parses to identical bits. A
/// categorical value that is literally "NaN" or "" would reload as
/// MISSING — the generator never emits those.
fn write_table_csv(path: &Path, table: &RawTable) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    w.write_record(table.columns.iter().map(|c| c.name.as_str()))
        .map_err(|e| Error::csv(path, e))?;
    let mut record = Vec::with_capacity(table.columns.len());
    for i in 0..table.n_rows {
        record.clear();
        for data in &table.data {
            record.push(match data {
                ColumnData::Identifier(v) => v[i].to_string(),
                ColumnData::Label(v) => match v[i] {
                    Some(l) => l.to_string(),
                    None => String::new(),
                },
                ColumnData::Numeric(v) | ColumnData::Time(v) => match v[i] {
                    Some(x) => format!("{x}"),
                    None => String::new(),
                },
                ColumnData::Categorical(v) => v[i].clone().unwrap_or_default(),
            });
        }
        w.write_record(&record).map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn load_table_dump(path: &Path, cfg: &RunConfig) -> Result<RawTable> {
    load_tables(path, None, &cfg.effective_schema())
}

pub fn ingest(
    cfg: &RunConfig,
    transactions: Option<PathBuf>,
    identity: Option<PathBuf>,
    no_identity: bool,
) -> Result<()> {
    ensure_out_dir(cfg)?;
    let tx = transactions.unwrap_or_else(|| cfg.paths.transactions_path());
    let id = if no_identity {
        None
    } else {
        identity.or_else(|| cfg.paths.identity_path())
    };
    let table = load_tables(&tx, id.as_deref(), &cfg.effective_schema())?;
    let out_path = cfg.paths.table_path();
    write_table_csv(&out_path, &table)?;
    let labels = table.labels();
    let pos = labels.iter().filter(|l| **l == Some(1)).count();
    let unlabeled = labels.iter().filter(|l| l.is_none()).count();
    println!(
        "ingested {} rows, {} columns ({} fraud, {} unlabeled)",
        table.n_rows,
        table.columns.len(),
        pos,
        unlabeled
    );
    println!("wrote {}", out_path.display());
    Ok(())
}

pub fn preprocess(cfg: &RunConfig) -> Result<()> {
    ensure_out_dir(cfg)?;
    let table = load_table_dump(&cfg.paths.table_path(), cfg)?;
    let (fm, fitted, _kept) = riskgraph_core::preprocess::run(&table, &cfg.preprocess)?;
    let out_path = cfg.paths.features_path();
    save_features(&out_path, &fm, &fitted)?;
    let report = preprocess_report(&table, &fm, &fitted);
    let (tr, va, te) = report.split_counts;
    println!(
        "features: {} x {}; split train/val/test = {}/{}/{}",
        fm.n(),
        fm.d(),
        tr,
        va,
        te
    );
    if !report.dropped.is_empty() {
        let names: Vec<&str> = report.dropped.iter().map(|(n, _)| n.as_str()).collect();
        println!("dropped high-missing columns: {}", names.join(", "));
    }
    println!("wrote {}", out_path.display());
    Ok(())
}

pub fn build_graph(cfg: &RunConfig) -> Result<()> {
    ensure_out_dir(cfg)?;
    let table = load_table_dump(&cfg.paths.table_path(), cfg)?;
    let graph = build_csr(&table, &cfg.graph.rules, cfg.graph.min_component_size)?;
    let out_path = cfg.paths.graph_path();
    save_graph(&out_path, &graph)?;
    print!("{}", graph_summary(&graph));
    println!("wrote {}", out_path.display());
    Ok(())
}

pub fn train(cfg: &RunConfig) -> Result<()> {
    ensure_out_dir(cfg)?;
    let (fm, fitted) = load_features(&cfg.paths.features_path())?;
    let graph = load_graph(&cfg.paths.graph_path())?;
    let out = train_loop(&graph, &fm, &cfg.model, &cfg.train)?;

    let history_path = cfg.paths.history_path();
    let mut log = String::new();
    for record in &out.history {
        let line = serde_json::to_string(record)
            .map_err(|e| Error::format(&history_path, format!("encode: {e}")))?;
        log.push_str(&line);
        log.push('\n');
    }
    std::fs::write(&history_path, log).map_err(|e| Error::io(&history_path, e))?;

    let ckpt = Checkpoint {
        config: cfg.clone(),
        fitted,
        seed: cfg.train.seed,
        input_dim: fm.d(),
        best_epoch: out.best_epoch,
        best_val_auprc: out.best_val_auprc,
        beta: out.beta,
        params: out.params,
    };
    let ckpt_path = cfg.paths.checkpoint_path();
    save_checkpoint(&ckpt_path, &ckpt)?;

    println!(
        "trained {} epochs ({}); pos_weight beta = {}",
        out.history.len(),
        if out.stopped_early {
            "stopped early"
        } else {
            "reached max_epochs"
        },
        out.beta
    );
    println!(
        "best epoch {} with val auprc {}",
        out.best_epoch,
        opt_metric(out.best_val_auprc)
    );
    println!("wrote {} and {}", ckpt_path.display(), history_path.display());
    Ok(())
}

fn opt_metric(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x}"),
        None => "undefined".to_string(),
    }
}

/// Stable plain-text rendering: fixed key order, shortest round-trip float
/// formatting, one section per split.
fn render_reports(reports: &[MetricsReport]) -> String {
    let mut out = String::new();
    for r in reports {
        let _ = writeln!(out, "[{}]", r.split);
        let _ = writeln!(out, "n = {}", r.n);
        let _ = writeln!(out, "positives = {}", r.n_pos);
        let _ = writeln!(out, "threshold = {}", r.threshold);
        let _ = writeln!(out, "accuracy = {}", r.accuracy);
        let _ = writeln!(out, "precision = {}", r.precision);
        let _ = writeln!(out, "recall = {}", r.recall);
        let _ = writeln!(out, "f1 = {}", r.f1);
        let _ = writeln!(out, "auroc = {}", opt_metric(r.auroc));
        let _ = writeln!(out, "auprc = {}", opt_metric(r.auprc));
        let _ = writeln!(out, "brier = {}", r.brier);
        let _ = writeln!(out, "ece = {} ({} bins)", r.ece, r.n_bins);
        let _ = writeln!(out, "reliability:");
        for (i, bin) in r.reliability.iter().enumerate() {
            let lo = i as f64 / r.n_bins as f64;
            let hi = (i + 1) as f64 / r.n_bins as f64;
            let _ = writeln!(
                out,
                "  bin {i:>2} [{lo:.3}, {hi:.3}): count={} mean_p={} pos_rate={}",
                bin.count, bin.mean_p, bin.pos_rate
            );
        }
        let _ = writeln!(out);
    }
    out
}

/// Per-split reports mirroring strict-time training: train metrics on the
/// train-only graph, val on train+val, test on everything.
fn strict_reports(
    graph: &TransactionGraph,
    fm: &FeatureMatrix,
    params: &ModelParams,
    cfg: &RunConfig,
    tau: f64,
) -> Result<Vec<MetricsReport>> {
    let keep_train: Vec<bool> = fm.split.iter().map(|&s| s == Split::Train).collect();
    let keep_tv: Vec<bool> = fm.split.iter().map(|&s| s != Split::Test).collect();
    let g_train = restrict_to(graph, &keep_train);
    let g_tv = restrict_to(graph, &keep_tv);
    let mut reports = Vec::new();
    for (split, g) in [
        (Split::Train, &g_train),
        (Split::Val, &g_tv),
        (Split::Test, graph),
    ] {
        let rows = fm.rows_of(split);
        if rows.is_empty() {
            continue;
        }
        let (probs, _) = predict(g, &fm.x, params, &cfg.model)?;
        let p: Vec<f64> = rows.iter().map(|&i| probs[i]).collect();
        let y: Vec<u8> = rows.iter().map(|&i| fm.y[i]).collect();
        reports.push(metrics_report(
            &format!("{split:?}").to_lowercase(),
            &p,
            &y,
            tau,
            cfg.train.ece_bins,
        )?);
    }
    Ok(reports)
}

/// Load a table with the checkpoint's schema, apply its fitted transform
/// (with the chronological split recomputed the way training did), check
/// dimensions, and rebuild the graph under the checkpoint's rules.
fn prepare_scoring(
    ckpt: &Checkpoint,
    table_path: &Path,
    scoring_only: bool,
) -> Result<(FeatureMatrix, TransactionGraph)> {
    let table = load_tables(table_path, None, &ckpt.config.effective_schema())?;
    let split = if scoring_only {
        vec![Split::Test; table.n_rows]
    } else {
        let t: Vec<f64> = match table.times() {
            Some(times) => times.iter().map(|c| c.unwrap_or(0.0)).collect(),
            None => vec![0.0; table.n_rows],
        };
        time_split(&t, ckpt.config.preprocess.split_fractions, table.ids())
    };
    let fm = transform(&table, &ckpt.fitted, &split)?;
    if fm.d() != ckpt.input_dim {
        return Err(Error::SchemaViolation(format!(
            "feature dimension {} does not match the checkpoint's {}",
            fm.d(),
            ckpt.input_dim
        )));
    }
    let graph = build_csr(
        &table,
        &ckpt.config.graph.rules,
        ckpt.config.graph.min_component_size,
    )?;
    Ok((fm, graph))
}

pub fn evaluate(
    cfg: &RunConfig,
    checkpoint: Option<PathBuf>,
    table: Option<PathBuf>,
    threshold: Option<f64>,
    strict_time_edges: bool,
) -> Result<()> {
    ensure_out_dir(cfg)?;
    let ckpt_path = checkpoint.unwrap_or_else(|| cfg.paths.checkpoint_path());
    let table_path = table.unwrap_or_else(|| cfg.paths.table_path());
    let ckpt = load_checkpoint(&ckpt_path)?;
    let (fm, graph) = prepare_scoring(&ckpt, &table_path, false)?;
    let tau = threshold.unwrap_or(ckpt.config.train.threshold);
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::ConfigError(format!(
            "threshold must be in (0,1), got {tau}"
        )));
    }
    let strict = strict_time_edges || ckpt.config.train.strict_time_edges;
    let reports = if strict {
        strict_reports(&graph, &fm, &ckpt.params, &ckpt.config, tau)?
    } else {
        evaluate_all(
            &graph,
            &fm,
            &ckpt.params,
            &ckpt.config.model,
            tau,
            ckpt.config.train.ece_bins,
        )?
    };
    let text = render_reports(&reports);
    let metrics_path = cfg.paths.metrics_path();
    std::fs::write(&metrics_path, &text).map_err(|e| Error::io(&metrics_path, e))?;
    print!("{text}");
    println!("wrote {}", metrics_path.display());
    Ok(())
}

pub fn report(cfg: &RunConfig) -> Result<()> {
    let ckpt_path = cfg.paths.checkpoint_path();
    let history_path = cfg.paths.history_path();
    let metrics_path = cfg.paths.metrics_path();
    let mut found_any = false;

    if ckpt_path.exists() {
        found_any = true;
        let ckpt = load_checkpoint(&ckpt_path)?;
        println!("checkpoint: {}", ckpt_path.display());
        println!("  seed = {}", ckpt.seed);
        println!("  input_dim = {}", ckpt.input_dim);
        println!(
            "  model = {} layers, hidden {}, {} heads, dropout {}, {:?} aggregation",
            ckpt.config.model.n_layers,
            ckpt.config.model.hidden_dim,
            ckpt.config.model.n_heads,
            ckpt.config.model.dropout_rate,
            ckpt.config.model.aggregation
        );
        println!("  pos_weight beta = {}", ckpt.beta);
        println!(
            "  best epoch = {} (val auprc {})",
            ckpt.best_epoch,
            opt_metric(ckpt.best_val_auprc)
        );
    }
    if history_path.exists() {
        found_any = true;
        let text = std::fs::read_to_string(&history_path)
            .map_err(|e| Error::io(&history_path, e))?;
        let epochs = text.lines().filter(|l| !l.trim().is_empty()).count();
        println!("history: {} epochs logged in {}", epochs, history_path.display());
        if let Some(last) = text.lines().rev().find(|l| !l.trim().is_empty()) {
            println!("  last epoch: {last}");
        }
    }
    if metrics_path.exists() {
        found_any = true;
        let text = std::fs::read_to_string(&metrics_path)
            .map_err(|e| Error::io(&metrics_path, e))?;
        println!("metrics: {}", metrics_path.display());
        print!("{text}");
    }
    if !found_any {
        return Err(Error::ConfigError(format!(
            "no artifacts under {}; run the pipeline first",
            cfg.paths.out_dir.display()
        )));
    }
    Ok(())
}

pub fn score(
    cfg: &RunConfig,
    checkpoint: Option<PathBuf>,
    table: Option<PathBuf>,
    threshold: Option<f64>,
) -> Result<()> {
    ensure_out_dir(cfg)?;
    let ckpt_path = checkpoint.unwrap_or_else(|| cfg.paths.checkpoint_path());
    let table_path = table.unwrap_or_else(|| cfg.paths.table_path());
    let ckpt = load_checkpoint(&ckpt_path)?;
    let (fm, graph) = prepare_scoring(&ckpt, &table_path, true)?;
    let tau = threshold.unwrap_or(ckpt.config.train.threshold);
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::ConfigError(format!(
            "threshold must be in (0,1), got {tau}"
        )));
    }

    let probs = if fm.n() == 0 {
        Vec::new()
    } else {
        predict(&graph, &fm.x, &ckpt.params, &ckpt.config.model)?.0
    };
    let scores_path = cfg.paths.scores_path();
    let mut w = csv::Writer::from_path(&scores_path).map_err(|e| Error::csv(&scores_path, e))?;
    w.write_record(["TransactionID", "p_hat", "label"])
        .map_err(|e| Error::csv(&scores_path, e))?;
    let mut flagged = 0usize;
    for (id, &p) in fm.ids.iter().zip(&probs) {
        let label = u8::from(p >= tau);
        flagged += label as usize;
        w.write_record([id.to_string(), format!("{p}"), label.to_string()])
            .map_err(|e| Error::csv(&scores_path, e))?;
    }
    w.flush().map_err(|e| Error::io(&scores_path, e))?;
    println!("scored {} rows; {} flagged at threshold {}", fm.n(), flagged, tau);
    println!("wrote {}", scores_path.display());
    Ok(())
}

pub fn sweep(
    cfg: &RunConfig,
    param: &str,
    values: Option<Vec<f64>>,
    parallel: usize,
) -> Result<()> {
    ensure_out_dir(cfg)?;
    let mut values = values.unwrap_or_else(|| match param {
        "dropout" => vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5],
        _ => vec![16.0, 32.0, 64.0, 128.0, 256.0],
    });
    if values.is_empty() {
        return Err(Error::ConfigError("sweep needs at least one value".into()));
    }
    values.sort_by(|a, b| a.total_cmp(b));

    // Fail fast: materialize and validate every per-value config up front.
    let mut configs = Vec::with_capacity(values.len());
    for &v in &values {
        let mut c = cfg.clone();
        match param {
            "hidden_dim" => {
                if v.fract() != 0.0 || v < 1.0 {
                    return Err(Error::ConfigError(format!(
                        "hidden_dim sweep values must be positive integers, got {v}"
                    )));
                }
                c.model.hidden_dim = v as usize;
            }
            "dropout" => c.model.dropout_rate = v,
            other => {
                return Err(Error::ConfigError(format!(
                    "unknown sweep param {other:?} (expected hidden_dim or dropout)"
                )))
            }
        }
        c.validate()?;
        configs.push(c);
    }

    // The data, features, and graph are identical across sweep points.
    let table = load_table_dump(&cfg.paths.table_path(), cfg)?;
    let (fm, _fitted, _) = riskgraph_core::preprocess::run(&table, &cfg.preprocess)?;
    let graph = build_csr(&table, &cfg.graph.rules, cfg.graph.min_component_size)?;

    let run_one = |c: &RunConfig| -> Result<f64> {
        let out = train_loop(&graph, &fm, &c.model, &c.train)?;
        let (probs, _) = predict(&graph, &fm.x, &out.params, &c.model)?;
        let rows = fm.rows_of(Split::Test);
        let p: Vec<f64> = rows.iter().map(|&i| probs[i]).collect();
        let y: Vec<u8> = rows.iter().map(|&i| fm.y[i]).collect();
        auroc(&p, &y)
    };

    let n_workers = parallel.clamp(1, configs.len());
    let results: Vec<Mutex<Option<Result<f64>>>> =
        configs.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|s| {
        for _ in 0..n_workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= configs.len() {
                    break;
                }
                let r = run_one(&configs[i]);
                *results[i].lock().unwrap() = Some(r);
            });
        }
    });

    let mut rows = Vec::with_capacity(values.len());
    for (v, cell) in values.iter().zip(results) {
        let r = cell
            .into_inner()
            .unwrap()
            .expect("every sweep index was visited");
        rows.push((*v, r?));
    }

    let fmt_value = |v: f64| {
        if param == "hidden_dim" {
            format!("{}", v as usize)
        } else {
            format!("{v}")
        }
    };
    let mut file = String::new();
    let _ = writeln!(file, "{param}\ttest_auroc");
    println!("{param:<12} test_auroc");
    for (v, a) in &rows {
        let _ = writeln!(file, "{}\t{}", fmt_value(*v), a);
        println!("{:<12} {:.6}", fmt_value(*v), a);
    }
    let sweep_path = cfg.paths.sweep_path();
    std::fs::write(&sweep_path, file).map_err(|e| Error::io(&sweep_path, e))?;
    println!("wrote {}", sweep_path.display());
    Ok(())
}
