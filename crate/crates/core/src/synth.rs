//! Synthetic transaction data with planted fraud rings, plus the no-graph
//! logistic baseline the graph model is measured against.
//!
//! Ring members share a full card tuple (and, where an identity row
//! exists, a ring-specific DeviceInfo), so the default edge rules connect
//! every ring into a dense subgraph. Numeric features are class-conditional
//! Gaussians shifted by `class_mean_shift` — deliberately weak individual
//! signal — and ring membership is independent of the feature draws given
//! the class, so any ranking lift over the baseline comes from the graph.

use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::ingest::{ColumnKind, ColumnSpec};
use crate::metrics;
use crate::model::logistic_predict;
use crate::preprocess::{FeatureMatrix, Split};
use crate::train::{
    cosine_lr, loss_cls, resolve_pos_weight, AdamW, EpochRecord, TrainConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Zipf};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;
use std::rc::Rc;

pub const FIRST_TRANSACTION_ID: i64 = 3_000_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_transactions: usize,
    pub fraud_rate: f64,
    pub n_rings: usize,
    pub ring_size_min: usize,
    pub ring_size_max: usize,
    pub n_numeric_features: usize,
    pub class_mean_shift: f64,
    /// Vocabulary size per categorical column.
    pub key_vocab: BTreeMap<String, usize>,
    /// Probability a transaction has an identity row at all.
    pub identity_presence: f64,
    pub time_span_seconds: u64,
    /// Ring burst half-width: member timestamps fall within +/- this of
    /// the ring's burst center.
    pub ring_burst_half_width: u64,
    pub seed: u64,
}

fn default_vocab() -> BTreeMap<String, usize> {
    [
        ("card1", 12000),
        ("card2", 300),
        ("card3", 8),
        ("card4", 4),
        ("card5", 120),
        ("card6", 3),
        ("addr1", 300),
        ("addr2", 60),
        ("P_emaildomain", 25),
        ("R_emaildomain", 30),
        ("DeviceType", 2),
        ("DeviceInfo", 6000),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect()
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_transactions: 20000,
            fraud_rate: 0.035,
            n_rings: 40,
            ring_size_min: 4,
            ring_size_max: 12,
            n_numeric_features: 20,
            class_mean_shift: 0.3,
            key_vocab: default_vocab(),
            identity_presence: 0.8,
            time_span_seconds: 30 * 86400,
            ring_burst_half_width: 1800,
            seed: 42,
        }
    }
}

impl SynthConfig {
    pub fn positive_budget(&self) -> usize {
        (self.n_transactions as f64 * self.fraud_rate).round() as usize
    }

    fn vocab(&self, name: &str) -> Result<usize> {
        match self.key_vocab.get(name) {
            Some(&v) if v >= 1 => Ok(v),
            Some(_) => Err(Error::ConfigError(format!("key_vocab.{name} must be >= 1"))),
            None => Err(Error::ConfigError(format!("key_vocab is missing {name}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fraud_rate > 0.0 && self.fraud_rate < 0.5) {
            return Err(Error::ConfigError(format!(
                "fraud_rate must be in (0, 0.5), got {}",
                self.fraud_rate
            )));
        }
        if self.n_transactions < 10 {
            return Err(Error::ConfigError("n_transactions must be >= 10".into()));
        }
        if self.ring_size_min < 2 || self.ring_size_min > self.ring_size_max {
            return Err(Error::ConfigError(format!(
                "need 2 <= ring_size_min <= ring_size_max, got {}..{}",
                self.ring_size_min, self.ring_size_max
            )));
        }
        if self.n_numeric_features < 1 {
            return Err(Error::ConfigError("n_numeric_features must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.identity_presence) {
            return Err(Error::ConfigError("identity_presence must be in [0,1]".into()));
        }
        if self.time_span_seconds == 0 {
            return Err(Error::ConfigError("time_span_seconds must be > 0".into()));
        }
        if self.n_rings * self.ring_size_min > self.positive_budget() {
            return Err(Error::ConfigError(format!(
                "infeasible ring budget: {} rings of at least {} members exceed the {} positives",
                self.n_rings,
                self.ring_size_min,
                self.positive_budget()
            )));
        }
        for key in [
            "card1", "card2", "card3", "card4", "card5", "card6", "addr1", "addr2",
            "P_emaildomain", "R_emaildomain", "DeviceType", "DeviceInfo",
        ] {
            self.vocab(key)?;
        }
        if self.vocab("card1")? < self.n_rings || self.vocab("DeviceInfo")? < self.n_rings {
            return Err(Error::ConfigError(
                "card1 and DeviceInfo vocabularies must be at least n_rings (rings get distinct values)".into(),
            ));
        }
        Ok(())
    }
}

/// TransactionAmt plus C1..C10 then D1..D9 style names (extended or
/// truncated to `k` total columns).
pub fn numeric_feature_names(k: usize) -> Vec<String> {
    let mut names = vec!["TransactionAmt".to_string()];
    for i in 1..k {
        if i <= 10 {
            names.push(format!("C{i}"));
        } else {
            names.push(format!("D{}", i - 10));
        }
    }
    names
}

/// The ingest schema matching [`generate`]'s output.
pub fn schema_for(cfg: &SynthConfig) -> Vec<ColumnSpec> {
    let mut schema = vec![
        ColumnSpec::new("TransactionID", ColumnKind::Identifier),
        ColumnSpec::new("isFraud", ColumnKind::Label),
        ColumnSpec::new("TransactionDT", ColumnKind::Time),
    ];
    for name in numeric_feature_names(cfg.n_numeric_features) {
        schema.push(ColumnSpec::new(&name, ColumnKind::Numeric));
    }
    for name in [
        "card1", "card2", "card3", "card4", "card5", "card6", "addr1", "addr2",
        "P_emaildomain", "R_emaildomain", "DeviceType", "DeviceInfo",
    ] {
        schema.push(ColumnSpec::new(name, ColumnKind::Categorical));
    }
    schema
}

pub struct SynthOutput {
    pub transaction_header: Vec<String>,
    pub transaction_rows: Vec<Vec<String>>,
    pub identity_header: Vec<String>,
    pub identity_rows: Vec<Vec<String>>,
    /// TransactionIDs per planted ring.
    pub ring_members: Vec<Vec<i64>>,
}

struct RowDraft {
    t: u64,
    y: u8,
    ring: Option<usize>,
    numerics: Vec<Option<f64>>,
    cards: [usize; 6],
    addr: Option<(usize, usize)>,
    p_email: Option<usize>,
    r_email: Option<usize>,
    device: Option<(usize, usize)>,
    order: usize,
}

struct Drawers {
    card1: Zipf<f64>,
    device_info: Zipf<f64>,
    normal: Normal<f64>,
}

/// Background categorical draws; card1 and DeviceInfo are Zipf-skewed so
/// repeated values (and hence moderate frequency-encoded values) are
/// ordinary for legitimate traffic too, not a fraud tell.
fn draw_background_cards(cfg: &SynthConfig, dr: &Drawers, rng: &mut ChaCha8Rng) -> [usize; 6] {
    [
        dr.card1.sample(rng) as usize - 1,
        rng.gen_range(0..cfg.vocab("card2").unwrap()),
        rng.gen_range(0..cfg.vocab("card3").unwrap()),
        rng.gen_range(0..cfg.vocab("card4").unwrap()),
        rng.gen_range(0..cfg.vocab("card5").unwrap()),
        rng.gen_range(0..cfg.vocab("card6").unwrap()),
    ]
}

fn draw_numerics(
    cfg: &SynthConfig,
    dr: &Drawers,
    y: u8,
    rng: &mut ChaCha8Rng,
) -> Vec<Option<f64>> {
    let shift = cfg.class_mean_shift * y as f64;
    (0..cfg.n_numeric_features)
        .map(|j| {
            let g: f64 = dr.normal.sample(rng) + shift;
            if j == 0 {
                // Log-amount is the shifted Gaussian; cents rounding.
                let amt = (g + 4.0).exp();
                Some((amt * 100.0).round() / 100.0)
            } else if j >= 11 && rng.gen_bool(0.10) {
                None
            } else {
                Some(g)
            }
        })
        .collect()
}

fn draw_shared_fields(
    cfg: &SynthConfig,
    rng: &mut ChaCha8Rng,
) -> (Option<(usize, usize)>, Option<usize>, Option<usize>) {
    let addr = if rng.gen_bool(0.10) {
        None
    } else {
        Some((
            rng.gen_range(0..cfg.vocab("addr1").unwrap()),
            rng.gen_range(0..cfg.vocab("addr2").unwrap()),
        ))
    };
    let p_email = if rng.gen_bool(0.15) {
        None
    } else {
        Some(rng.gen_range(0..cfg.vocab("P_emaildomain").unwrap()))
    };
    let r_email = if rng.gen_bool(0.40) {
        None
    } else {
        Some(rng.gen_range(0..cfg.vocab("R_emaildomain").unwrap()))
    };
    (addr, p_email, r_email)
}

fn fmt_opt_num(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn fmt_opt_cat(v: Option<usize>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Generate the transaction/identity table pair. Deterministic in the
/// config's seed.
pub fn generate(cfg: &SynthConfig) -> Result<SynthOutput> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.n_transactions;
    let budget = cfg.positive_budget();

    let dr = Drawers {
        card1: Zipf::new(cfg.vocab("card1")? as u64, 0.8)
            .map_err(|e| Error::ConfigError(format!("card1 zipf: {e}")))?,
        device_info: Zipf::new(cfg.vocab("DeviceInfo")? as u64, 0.8)
            .map_err(|e| Error::ConfigError(format!("DeviceInfo zipf: {e}")))?,
        normal: Normal::new(0.0, 1.0).expect("unit normal"),
    };

    // Ring plans: sizes, distinct card1 / DeviceInfo values, full card
    // tuples, burst centers.
    let sizes: Vec<usize> = (0..cfg.n_rings)
        .map(|_| rng.gen_range(cfg.ring_size_min..=cfg.ring_size_max))
        .collect();
    let ring_total: usize = sizes.iter().sum();
    if ring_total > budget {
        return Err(Error::ConfigError(format!(
            "infeasible ring budget: sampled ring sizes total {ring_total} > {budget} positives"
        )));
    }
    let ring_card1 = rand::seq::index::sample(&mut rng, cfg.vocab("card1")?, cfg.n_rings);
    let ring_device = rand::seq::index::sample(&mut rng, cfg.vocab("DeviceInfo")?, cfg.n_rings);
    let ring_tuples: Vec<[usize; 6]> = (0..cfg.n_rings)
        .map(|r| {
            Ok([
                ring_card1.index(r),
                rng.gen_range(0..cfg.vocab("card2")?),
                rng.gen_range(0..cfg.vocab("card3")?),
                rng.gen_range(0..cfg.vocab("card4")?),
                rng.gen_range(0..cfg.vocab("card5")?),
                rng.gen_range(0..cfg.vocab("card6")?),
            ])
        })
        .collect::<Result<_>>()?;
    let centers: Vec<u64> = (0..cfg.n_rings)
        .map(|_| rng.gen_range(0..cfg.time_span_seconds))
        .collect();

    let mut rows: Vec<RowDraft> = Vec::with_capacity(n);
    let half = cfg.ring_burst_half_width as i64;
    for r in 0..cfg.n_rings {
        for _ in 0..sizes[r] {
            let jitter = rng.gen_range(-half..=half);
            let t = (centers[r] as i64 + jitter).clamp(0, cfg.time_span_seconds as i64) as u64;
            let numerics = draw_numerics(cfg, &dr, 1, &mut rng);
            let (addr, p_email, r_email) = draw_shared_fields(cfg, &mut rng);
            let device = if rng.gen_bool(cfg.identity_presence) {
                Some((
                    rng.gen_range(0..cfg.vocab("DeviceType")?),
                    ring_device.index(r),
                ))
            } else {
                None
            };
            rows.push(RowDraft {
                t,
                y: 1,
                ring: Some(r),
                numerics,
                cards: ring_tuples[r],
                addr,
                p_email,
                r_email,
                device,
                order: rows.len(),
            });
        }
    }
    // Singleton frauds and legitimate traffic share the background draw.
    for i in ring_total..n {
        let y = (i < budget) as u8;
        let t = rng.gen_range(0..cfg.time_span_seconds);
        let numerics = draw_numerics(cfg, &dr, y, &mut rng);
        let cards = draw_background_cards(cfg, &dr, &mut rng);
        let (addr, p_email, r_email) = draw_shared_fields(cfg, &mut rng);
        let device = if rng.gen_bool(cfg.identity_presence) {
            Some((
                rng.gen_range(0..cfg.vocab("DeviceType")?),
                dr.device_info.sample(&mut rng) as usize - 1,
            ))
        } else {
            None
        };
        rows.push(RowDraft {
            t,
            y,
            ring: None,
            numerics,
            cards,
            addr,
            p_email,
            r_email,
            device,
            order: rows.len(),
        });
    }

    rows.sort_by_key(|r| (r.t, r.order));

    let mut transaction_header = vec![
        "TransactionID".to_string(),
        "isFraud".to_string(),
        "TransactionDT".to_string(),
    ];
    transaction_header.extend(numeric_feature_names(cfg.n_numeric_features));
    transaction_header.extend(
        [
            "card1", "card2", "card3", "card4", "card5", "card6", "addr1", "addr2",
            "P_emaildomain", "R_emaildomain",
        ]
        .iter()
        .map(|s| s.to_string()),
    );
    let identity_header = vec![
        "TransactionID".to_string(),
        "DeviceType".to_string(),
        "DeviceInfo".to_string(),
    ];

    let mut transaction_rows = Vec::with_capacity(n);
    let mut identity_rows = Vec::new();
    let mut ring_members: Vec<Vec<i64>> = vec![Vec::new(); cfg.n_rings];
    for (idx, row) in rows.iter().enumerate() {
        let id = FIRST_TRANSACTION_ID + idx as i64;
        if let Some(r) = row.ring {
            ring_members[r].push(id);
        }
        let mut rec = vec![id.to_string(), row.y.to_string(), row.t.to_string()];
        rec.extend(row.numerics.iter().map(|&v| fmt_opt_num(v)));
        rec.extend(row.cards.iter().map(|&c| c.to_string()));
        match row.addr {
            Some((a1, a2)) => {
                rec.push(a1.to_string());
                rec.push(a2.to_string());
            }
            None => {
                rec.push(String::new());
                rec.push(String::new());
            }
        }
        rec.push(fmt_opt_cat(row.p_email));
        rec.push(fmt_opt_cat(row.r_email));
        transaction_rows.push(rec);
        if let Some((dt, di)) = row.device {
            identity_rows.push(vec![id.to_string(), dt.to_string(), di.to_string()]);
        }
    }

    Ok(SynthOutput {
        transaction_header,
        transaction_rows,
        identity_header,
        identity_rows,
        ring_members,
    })
}

/// Write the pair of comma-separated files ingest reads.
pub fn write_csvs(
    out: &SynthOutput,
    transaction_path: &Path,
    identity_path: &Path,
) -> Result<()> {
    let write = |path: &Path, header: &[String], rows: &[Vec<String>]| -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
        w.write_record(header).map_err(|e| Error::csv(path, e))?;
        for row in rows {
            w.write_record(row).map_err(|e| Error::csv(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    };
    write(transaction_path, &out.transaction_header, &out.transaction_rows)?;
    write(identity_path, &out.identity_header, &out.identity_rows)?;
    Ok(())
}

/// Logistic regression trained with the same weighted BCE, AdamW, cosine
/// schedule, and early stopping as the graph model — but no graph. Always
/// full batch (there is no neighborhood to sample).
pub struct BaselineOutput {
    /// Probabilities for every row of the feature matrix, best-epoch params.
    pub probs: Vec<f64>,
    pub w: Tensor,
    pub b: f64,
    pub beta: f64,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
    pub stopped_early: bool,
}

pub fn logistic_baseline(fm: &FeatureMatrix, tcfg: &TrainConfig) -> Result<BaselineOutput> {
    tcfg.validate()?;
    let train_rows = fm.rows_of(Split::Train);
    let val_rows = fm.rows_of(Split::Val);
    if train_rows.is_empty() {
        return Err(Error::ConfigError("no training rows in the split".into()));
    }
    let beta = resolve_pos_weight(tcfg.pos_weight, &fm.y, &train_rows);
    let d = fm.d();

    let x_train = {
        let mut x = Tensor::zeros(train_rows.len(), d);
        for (l, &g) in train_rows.iter().enumerate() {
            x.row_mut(l).copy_from_slice(fm.x.row(g));
        }
        x
    };
    let y_train: Vec<u8> = train_rows.iter().map(|&g| fm.y[g]).collect();
    let mask: Rc<Vec<usize>> = Rc::new((0..train_rows.len()).collect());
    let x_val = {
        let mut x = Tensor::zeros(val_rows.len(), d);
        for (l, &g) in val_rows.iter().enumerate() {
            x.row_mut(l).copy_from_slice(fm.x.row(g));
        }
        x
    };
    let y_val: Vec<u8> = val_rows.iter().map(|&g| fm.y[g]).collect();

    let mut w = Tensor::zeros(d, 1);
    let mut b = Tensor::zeros(1, 1);
    let mut opt = AdamW::new(
        [("w".to_string(), &w), ("b".to_string(), &b)],
        tcfg,
    );

    let mut history = Vec::new();
    let mut best: Option<(Tensor, f64)> = None;
    let mut best_epoch = 0usize;
    let mut best_exact = f64::NEG_INFINITY;
    let mut patience_best = f64::NEG_INFINITY;
    let mut bad_epochs = 0usize;
    let mut stopped_early = false;

    for epoch in 1..=tcfg.max_epochs {
        let lr_t = cosine_lr(epoch - 1, tcfg.max_epochs, tcfg.lr0, tcfg.lr_min);
        let mut tape = Tape::new();
        let wid = tape.leaf(w.clone(), true);
        let bid = tape.leaf(b.clone(), true);
        let xid = tape.constant(x_train.clone());
        let z = tape.matmul(xid, wid)?;
        let z = tape.add(z, bid)?;
        let loss = loss_cls(&mut tape, z, &y_train, Rc::clone(&mask), beta)?;
        let loss_value = tape.value(loss).item();
        tape.backward(loss)?;
        let grads = vec![tape.grad(wid).cloned(), tape.grad(bid).cloned()];
        drop(tape);
        opt.step(
            &mut [("w".to_string(), &mut w), ("b".to_string(), &mut b)],
            &grads,
            lr_t,
        )?;

        let (val_auroc, val_auprc) = if val_rows.is_empty() {
            (None, None)
        } else {
            let p = logistic_predict(&x_val, &w, b.item());
            (
                defined(metrics::auroc(&p, &y_val))?,
                defined(metrics::auprc(&p, &y_val))?,
            )
        };
        history.push(EpochRecord {
            epoch,
            loss_cls: loss_value,
            loss_smooth: 0.0,
            loss_total: loss_value,
            lr: lr_t,
            val_auroc,
            val_auprc,
        });

        let metric = val_auprc.unwrap_or(f64::NEG_INFINITY);
        if metric > best_exact {
            best_exact = metric;
            best_epoch = epoch;
            best = Some((w.clone(), b.item()));
        }
        if metric > patience_best + 1e-5 {
            patience_best = metric;
            bad_epochs = 0;
        } else {
            bad_epochs += 1;
            if bad_epochs >= tcfg.patience.max(1) {
                stopped_early = true;
                break;
            }
        }
    }

    let (w_best, b_best) = best.unwrap_or((w, b.item()));
    if best_epoch == 0 {
        best_epoch = history.len();
    }
    let probs = logistic_predict(&fm.x, &w_best, b_best);
    Ok(BaselineOutput {
        probs,
        w: w_best,
        b: b_best,
        beta,
        best_epoch,
        history,
        stopped_early,
    })
}

fn defined(r: Result<f64>) -> Result<Option<f64>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::UndefinedMetric(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_graph, default_rules};
    use crate::ingest::load_tables;

    #[test]
    fn same_seed_is_bit_identical() {
        let cfg = SynthConfig {
            n_transactions: 1500,
            n_rings: 6,
            ..SynthConfig::default()
        };
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        assert_eq!(a.transaction_rows, b.transaction_rows);
        assert_eq!(a.identity_rows, b.identity_rows);
        assert_eq!(a.ring_members, b.ring_members);
        let c = generate(&SynthConfig { seed: 43, ..cfg }).unwrap();
        assert_ne!(a.transaction_rows, c.transaction_rows);
    }

    #[test]
    fn fraud_fraction_hits_target() {
        let cfg = SynthConfig::default();
        let out = generate(&cfg).unwrap();
        let n = out.transaction_rows.len();
        assert_eq!(n, 20000);
        let pos = out
            .transaction_rows
            .iter()
            .filter(|r| r[1] == "1")
            .count();
        let realized = pos as f64 / n as f64;
        assert!(
            (realized - cfg.fraud_rate).abs() <= 0.005,
            "realized fraud rate {realized}"
        );
        // Timestamps ascend and ids are unique and ascending.
        let ts: Vec<i64> = out
            .transaction_rows
            .iter()
            .map(|r| r[2].parse().unwrap())
            .collect();
        assert!(ts.windows(2).all(|w| w[0] <= w[1]));
        let ids: Vec<i64> = out
            .transaction_rows
            .iter()
            .map(|r| r[0].parse().unwrap())
            .collect();
        assert!(ids.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn infeasible_ring_budget_rejected() {
        let cfg = SynthConfig {
            n_transactions: 100,
            fraud_rate: 0.05,
            n_rings: 2,
            ring_size_min: 4,
            ring_size_max: 4,
            ..SynthConfig::default()
        };
        assert!(matches!(generate(&cfg), Err(Error::ConfigError(_))));
    }

    #[test]
    fn class_shift_shows_up_in_numerics() {
        let cfg = SynthConfig::default();
        let out = generate(&cfg).unwrap();
        // C1 is column index 4 (id, label, time, amt, C1...).
        let (mut s1, mut n1, mut s0, mut n0) = (0.0, 0, 0.0, 0);
        for r in &out.transaction_rows {
            if r[4].is_empty() {
                continue;
            }
            let v: f64 = r[4].parse().unwrap();
            if r[1] == "1" {
                s1 += v;
                n1 += 1;
            } else {
                s0 += v;
                n0 += 1;
            }
        }
        let gap = s1 / n1 as f64 - s0 / n0 as f64;
        assert!(
            (gap - cfg.class_mean_shift).abs() < 0.1,
            "class gap {gap} vs shift {}",
            cfg.class_mean_shift
        );
    }

    /// Writes the pair, loads it through ingest, builds the default-rule
    /// graph, and checks each planted ring lands in one connected
    /// component.
    #[test]
    fn rings_are_connected_in_the_built_graph() {
        let cfg = SynthConfig {
            n_transactions: 6000,
            n_rings: 12,
            ..SynthConfig::default()
        };
        run_ring_connectivity(&cfg);
    }

    fn run_ring_connectivity(cfg: &SynthConfig) {
        let out = generate(cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let tx = dir.path().join("transaction.csv");
        let idp = dir.path().join("identity.csv");
        write_csvs(&out, &tx, &idp).unwrap();
        let table = load_tables(&tx, Some(&idp), &schema_for(cfg)).unwrap();
        let graph = build_graph(&table, &default_rules(), 1).unwrap();
        // Row index by TransactionID.
        let row_of: BTreeMap<i64, usize> = table
            .ids()
            .iter()
            .enumerate()
            .map(|(i, &id)| (id, i))
            .collect();
        // Component labels by BFS.
        let mut comp = vec![usize::MAX; graph.n_nodes];
        let mut next = 0;
        for s in 0..graph.n_nodes {
            if comp[s] != usize::MAX {
                continue;
            }
            let mut stack = vec![s];
            comp[s] = next;
            while let Some(u) = stack.pop() {
                for &v in graph.neighbors(u) {
                    if comp[v] == usize::MAX {
                        comp[v] = next;
                        stack.push(v);
                    }
                }
            }
            next += 1;
        }
        for (r, members) in out.ring_members.iter().enumerate() {
            let c0 = comp[row_of[&members[0]]];
            for id in members {
                assert_eq!(
                    comp[row_of[id]], c0,
                    "ring {r} is split across components"
                );
            }
        }
    }

    #[test]
    fn nondefault_config_round_trips_through_ingest() {
        let cfg = SynthConfig {
            n_transactions: 800,
            fraud_rate: 0.08,
            n_rings: 5,
            ring_size_min: 3,
            ring_size_max: 6,
            n_numeric_features: 8,
            seed: 7,
            ..SynthConfig::default()
        };
        let out = generate(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let tx = dir.path().join("t.csv");
        let idp = dir.path().join("i.csv");
        write_csvs(&out, &tx, &idp).unwrap();
        let table = load_tables(&tx, Some(&idp), &schema_for(&cfg)).unwrap();
        assert_eq!(table.n_rows, 800);
        // Roughly 20% of identity cells are missing (row absence).
        let missing = match table.column("DeviceInfo").unwrap().1 {
            crate::ingest::ColumnData::Categorical(v) => {
                v.iter().filter(|c| c.is_none()).count()
            }
            _ => panic!("DeviceInfo should be categorical"),
        };
        let frac = missing as f64 / 800.0;
        assert!((frac - 0.2).abs() < 0.07, "identity missing fraction {frac}");
    }

    fn separable_fm(n: usize) -> FeatureMatrix {
        let mut x = Tensor::zeros(n, 2);
        let mut y = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for i in 0..n {
            let label = (i % 5 == 0) as u8;
            let base = if label == 1 { 2.0 } else { -2.0 };
            x.row_mut(i)[0] = base + rng.gen_range(-0.5..0.5);
            x.row_mut(i)[1] = -base + rng.gen_range(-0.5..0.5);
            y.push(label);
        }
        FeatureMatrix {
            x,
            y,
            t: (0..n).map(|i| i as f64).collect(),
            ids: (0..n).map(|i| i as i64).collect(),
            split: (0..n)
                .map(|i| {
                    if i < n * 7 / 10 {
                        Split::Train
                    } else if i < n * 85 / 100 {
                        Split::Val
                    } else {
                        Split::Test
                    }
                })
                .collect(),
            feature_names: vec!["a".into(), "b".into()],
        }
    }

    #[test]
    fn baseline_separates_a_separable_toy() {
        let fm = separable_fm(200);
        let tcfg = TrainConfig {
            lr0: 0.05,
            max_epochs: 120,
            patience: 30,
            ..TrainConfig::default()
        };
        let out = logistic_baseline(&fm, &tcfg).unwrap();
        let train_rows = fm.rows_of(Split::Train);
        let p: Vec<f64> = train_rows.iter().map(|&i| out.probs[i]).collect();
        let yv: Vec<u8> = train_rows.iter().map(|&i| fm.y[i]).collect();
        assert_eq!(metrics::auroc(&p, &yv).unwrap(), 1.0);
    }

    #[test]
    fn baseline_is_deterministic() {
        let fm = separable_fm(120);
        let tcfg = TrainConfig {
            max_epochs: 15,
            ..TrainConfig::default()
        };
        let a = logistic_baseline(&fm, &tcfg).unwrap();
        let b = logistic_baseline(&fm, &tcfg).unwrap();
        assert_eq!(a.probs, b.probs);
        assert_eq!(a.best_epoch, b.best_epoch);
    }
}
