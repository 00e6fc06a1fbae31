//! RawTable -> dense FeatureMatrix: missing-value imputation, quantile
//! clipping, standardization, categorical encoding, cyclic time features,
//! and the chronological split.
//!
//! Every statistic is fitted on training-split rows only and carried in a
//! serializable [`FittedTransform`] so inference reuses the exact training
//! statistics.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::ingest::{ColumnData, ColumnKind, RawTable};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

pub const SECONDS_PER_DAY: f64 = 86_400.0;
pub const SECONDS_PER_WEEK: f64 = 604_800.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    /// Drop feature columns whose missing fraction strictly exceeds this.
    pub max_missing_frac: f64,
    pub q_low: f64,
    pub q_high: f64,
    /// Categories seen fewer than this many times in train fold into RARE.
    pub rare_min_count: usize,
    /// One-hot encode when codes (categories + RARE + MISSING) fit within
    /// this budget; otherwise emit a single train-frequency feature.
    pub onehot_max_cardinality: usize,
    pub split_fractions: (f64, f64, f64),
    pub std_epsilon: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            max_missing_frac: 0.9,
            q_low: 0.005,
            q_high: 0.995,
            rare_min_count: 10,
            onehot_max_cardinality: 16,
            split_fractions: (0.7, 0.1, 0.2),
            std_epsilon: 1e-8,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.max_missing_frac) {
            return Err(Error::ConfigError(format!(
                "max_missing_frac must be in [0,1], got {}",
                self.max_missing_frac
            )));
        }
        if !(0.0 <= self.q_low && self.q_low < self.q_high && self.q_high <= 1.0) {
            return Err(Error::ConfigError(format!(
                "quantile bounds must satisfy 0 <= q_low < q_high <= 1, got ({}, {})",
                self.q_low, self.q_high
            )));
        }
        let (a, b, c) = self.split_fractions;
        if !(a > 0.0 && b > 0.0 && c > 0.0 && (a + b + c - 1.0).abs() <= 1e-9) {
            return Err(Error::ConfigError(format!(
                "split_fractions must be positive and sum to 1, got ({a}, {b}, {c})"
            )));
        }
        if !(self.std_epsilon > 0.0) {
            return Err(Error::ConfigError(format!(
                "std_epsilon must be positive, got {}",
                self.std_epsilon
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NumericStats {
    pub name: String,
    /// Imputation value: median of the non-missing train values.
    pub median: f64,
    pub clip_lo: f64,
    pub clip_hi: f64,
    /// Mean/std of the imputed, clipped train values; std floored at
    /// std_epsilon.
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoricalMap {
    pub name: String,
    /// Retained categories ordered by (train count desc, name asc); the
    /// code of a category is its index here. Code len() is RARE,
    /// len()+1 is MISSING.
    pub categories: Vec<String>,
    /// Train-frequency fraction per code (retained..., RARE pooled,
    /// MISSING fixed at 0).
    pub frequencies: Vec<f64>,
    pub one_hot: bool,
}

impl CategoricalMap {
    pub fn rare_code(&self) -> usize {
        self.categories.len()
    }
    pub fn missing_code(&self) -> usize {
        self.categories.len() + 1
    }
    /// Total number of codes = one-hot width.
    pub fn cardinality(&self) -> usize {
        self.categories.len() + 2
    }
    fn code_of(&self, value: Option<&str>) -> usize {
        match value {
            None => self.missing_code(),
            Some(v) => self
                .categories
                .iter()
                .position(|c| c == v)
                .unwrap_or_else(|| self.rare_code()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum ColumnTransform {
    Numeric(NumericStats),
    Categorical(CategoricalMap),
}

impl ColumnTransform {
    pub fn name(&self) -> &str {
        match self {
            ColumnTransform::Numeric(s) => &s.name,
            ColumnTransform::Categorical(m) => &m.name,
        }
    }
    fn width(&self) -> usize {
        match self {
            ColumnTransform::Numeric(_) => 1,
            ColumnTransform::Categorical(m) => {
                if m.one_hot {
                    m.cardinality()
                } else {
                    1
                }
            }
        }
    }
}

/// Everything needed to map new raw rows into the training feature space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FittedTransform {
    /// Feature columns in schema order.
    pub columns: Vec<ColumnTransform>,
    pub has_time: bool,
}

impl FittedTransform {
    pub fn retained(&self) -> Vec<&str> {
        self.columns.iter().map(|c| c.name()).collect()
    }

    pub fn n_features(&self) -> usize {
        self.columns.iter().map(|c| c.width()).sum::<usize>()
            + if self.has_time { 4 } else { 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    /// n x d, fully finite.
    pub x: Tensor,
    pub y: Vec<u8>,
    /// Seconds; missing time cells are 0.
    pub t: Vec<f64>,
    pub ids: Vec<i64>,
    pub split: Vec<Split>,
    pub feature_names: Vec<String>,
}

impl FeatureMatrix {
    pub fn n(&self) -> usize {
        self.x.rows()
    }
    pub fn d(&self) -> usize {
        self.x.cols()
    }
    pub fn rows_of(&self, s: Split) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.split[i] == s).collect()
    }
    pub fn split_counts(&self) -> (usize, usize, usize) {
        let c = |s| self.split.iter().filter(|&&v| v == s).count();
        (c(Split::Train), c(Split::Val), c(Split::Test))
    }
}

fn missing_fraction(data: &ColumnData, n_rows: usize) -> f64 {
    if n_rows == 0 {
        return 0.0;
    }
    let missing = match data {
        ColumnData::Numeric(v) => v.iter().filter(|c| c.is_none()).count(),
        ColumnData::Categorical(v) => v.iter().filter(|c| c.is_none()).count(),
        ColumnData::Time(v) => v.iter().filter(|c| c.is_none()).count(),
        ColumnData::Label(v) => v.iter().filter(|c| c.is_none()).count(),
        ColumnData::Identifier(_) => 0,
    };
    missing as f64 / n_rows as f64
}

/// Drop numeric/categorical columns whose missing fraction strictly
/// exceeds the threshold. Identifier, label, and time columns always stay.
pub fn drop_high_missing(table: &RawTable, max_missing_frac: f64) -> RawTable {
    let mut columns = Vec::new();
    let mut data = Vec::new();
    for (spec, col) in table.columns.iter().zip(&table.data) {
        let structural = matches!(
            spec.kind,
            ColumnKind::Identifier | ColumnKind::Label | ColumnKind::Time
        );
        if structural || missing_fraction(col, table.n_rows) <= max_missing_frac {
            columns.push(spec.clone());
            data.push(col.clone());
        }
    }
    RawTable {
        columns,
        n_rows: table.n_rows,
        data,
    }
}

/// Linear interpolation at position q*(n-1) on sorted values.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty slice");
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

/// Chronological split: rows sorted ascending by (t, id), first
/// floor(f_train*n) to train, next floor(f_val*n) to val, rest test. The
/// returned mask is indexed by input row position.
pub fn time_split(t: &[f64], fractions: (f64, f64, f64), ids: &[i64]) -> Vec<Split> {
    assert_eq!(t.len(), ids.len());
    let n = t.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| t[a].total_cmp(&t[b]).then(ids[a].cmp(&ids[b])));
    let n_train = (fractions.0 * n as f64).floor() as usize;
    let n_val = (fractions.1 * n as f64).floor() as usize;
    let mut split = vec![Split::Test; n];
    for (k, &row) in order.iter().enumerate() {
        split[row] = if k < n_train {
            Split::Train
        } else if k < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    split
}

/// (sin_day, cos_day, sin_week, cos_week) at time t seconds.
pub fn encode_time(t: f64) -> (f64, f64, f64, f64) {
    let day = 2.0 * std::f64::consts::PI * t / SECONDS_PER_DAY;
    let week = 2.0 * std::f64::consts::PI * t / SECONDS_PER_WEEK;
    (day.sin(), day.cos(), week.sin(), week.cos())
}

fn numeric_values<'t>(
    table: &'t RawTable,
    name: &str,
) -> Result<&'t [Option<f64>]> {
    match table.column(name) {
        Some((_, ColumnData::Numeric(v))) => Ok(v),
        Some((spec, _)) => Err(Error::SchemaViolation(format!(
            "column {:?} is {:?}, fitted as numeric",
            name, spec.kind
        ))),
        None => Err(Error::SchemaViolation(format!(
            "fitted column {name:?} not present in table"
        ))),
    }
}

fn categorical_values<'t>(
    table: &'t RawTable,
    name: &str,
) -> Result<&'t [Option<String>]> {
    match table.column(name) {
        Some((_, ColumnData::Categorical(v))) => Ok(v),
        Some((spec, _)) => Err(Error::SchemaViolation(format!(
            "column {:?} is {:?}, fitted as categorical",
            name, spec.kind
        ))),
        None => Err(Error::SchemaViolation(format!(
            "fitted column {name:?} not present in table"
        ))),
    }
}

fn fit_numeric(
    name: &str,
    values: &[Option<f64>],
    train_rows: &[usize],
    config: &PreprocessConfig,
) -> NumericStats {
    let mut present: Vec<f64> = train_rows.iter().filter_map(|&i| values[i]).collect();
    present.sort_by(f64::total_cmp);
    // All-missing within train: neutral stats, column becomes all-zero.
    let median = if present.is_empty() {
        0.0
    } else {
        quantile(&present, 0.5)
    };
    let mut imputed: Vec<f64> = train_rows
        .iter()
        .map(|&i| values[i].unwrap_or(median))
        .collect();
    imputed.sort_by(f64::total_cmp);
    let clip_lo = quantile(&imputed, config.q_low);
    let clip_hi = quantile(&imputed, config.q_high);
    let clipped: Vec<f64> = imputed
        .iter()
        .map(|&v| v.clamp(clip_lo, clip_hi))
        .collect();
    let n = clipped.len() as f64;
    let mean = clipped.iter().sum::<f64>() / n;
    let var = clipped.iter().map(|&v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt().max(config.std_epsilon);
    NumericStats {
        name: name.to_string(),
        median,
        clip_lo,
        clip_hi,
        mean,
        std,
    }
}

fn fit_categorical(
    name: &str,
    values: &[Option<String>],
    train_rows: &[usize],
    config: &PreprocessConfig,
) -> CategoricalMap {
    // BTreeMap keeps counting deterministic before the explicit sort.
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for &i in train_rows {
        if let Some(v) = &values[i] {
            *counts.entry(v.as_str()).or_insert(0) += 1;
        }
    }
    let mut retained: Vec<(&str, usize)> = Vec::new();
    let mut rare_total = 0usize;
    for (&cat, &count) in &counts {
        if count >= config.rare_min_count {
            retained.push((cat, count));
        } else {
            rare_total += count;
        }
    }
    retained.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    let n_train = train_rows.len().max(1) as f64;
    let mut frequencies: Vec<f64> = retained
        .iter()
        .map(|&(_, count)| count as f64 / n_train)
        .collect();
    frequencies.push(rare_total as f64 / n_train); // RARE
    frequencies.push(0.0); // MISSING
    let categories: Vec<String> = retained.iter().map(|&(c, _)| c.to_string()).collect();
    let one_hot = categories.len() + 2 <= config.onehot_max_cardinality;
    CategoricalMap {
        name: name.to_string(),
        categories,
        frequencies,
        one_hot,
    }
}

/// Fit all statistics from the training rows of `table` (already passed
/// through [`drop_high_missing`]).
pub fn fit(
    table: &RawTable,
    config: &PreprocessConfig,
    split: &[Split],
) -> Result<FittedTransform> {
    config.validate()?;
    if split.len() != table.n_rows {
        return Err(Error::ShapeError {
            op: "fit",
            left: (split.len(), 1),
            right: (table.n_rows, 1),
        });
    }
    let train_rows: Vec<usize> = (0..table.n_rows)
        .filter(|&i| split[i] == Split::Train)
        .collect();
    if train_rows.len() < 2 {
        return Err(Error::ConfigError(format!(
            "training split has {} rows; need at least 2 to fit statistics",
            train_rows.len()
        )));
    }
    let mut columns = Vec::new();
    let mut has_time = false;
    for (spec, data) in table.columns.iter().zip(&table.data) {
        match (spec.kind, data) {
            (ColumnKind::Numeric, ColumnData::Numeric(v)) => {
                columns.push(ColumnTransform::Numeric(fit_numeric(
                    &spec.name, v, &train_rows, config,
                )));
            }
            (ColumnKind::Categorical, ColumnData::Categorical(v)) => {
                columns.push(ColumnTransform::Categorical(fit_categorical(
                    &spec.name, v, &train_rows, config,
                )));
            }
            (ColumnKind::Time, _) => has_time = true,
            _ => {}
        }
    }
    if columns.is_empty() {
        return Err(Error::ConfigError(
            "no feature columns retained after missing-rate filtering".into(),
        ));
    }
    Ok(FittedTransform { columns, has_time })
}

/// Apply a fitted transform; `split` must be indexed like the table rows
/// (use all-Test when scoring data without a meaningful split).
pub fn transform(
    table: &RawTable,
    fitted: &FittedTransform,
    split: &[Split],
) -> Result<FeatureMatrix> {
    if split.len() != table.n_rows {
        return Err(Error::ShapeError {
            op: "transform",
            left: (split.len(), 1),
            right: (table.n_rows, 1),
        });
    }
    let n = table.n_rows;
    let d = fitted.n_features();
    let mut x = Tensor::zeros(n, d);
    let mut feature_names = Vec::with_capacity(d);
    let mut offset = 0;
    for col in &fitted.columns {
        match col {
            ColumnTransform::Numeric(s) => {
                let values = numeric_values(table, &s.name)?;
                for i in 0..n {
                    let v = values[i].unwrap_or(s.median).clamp(s.clip_lo, s.clip_hi);
                    x.set(i, offset, (v - s.mean) / s.std);
                }
                feature_names.push(s.name.clone());
                offset += 1;
            }
            ColumnTransform::Categorical(m) => {
                let values = categorical_values(table, &m.name)?;
                if m.one_hot {
                    for i in 0..n {
                        let code = m.code_of(values[i].as_deref());
                        x.set(i, offset + code, 1.0);
                    }
                    for cat in &m.categories {
                        feature_names.push(format!("{}={}", m.name, cat));
                    }
                    feature_names.push(format!("{}=RARE", m.name));
                    feature_names.push(format!("{}=MISSING", m.name));
                    offset += m.cardinality();
                } else {
                    for i in 0..n {
                        let code = m.code_of(values[i].as_deref());
                        x.set(i, offset, m.frequencies[code]);
                    }
                    feature_names.push(format!("{}:freq", m.name));
                    offset += 1;
                }
            }
        }
    }
    let t: Vec<f64> = match table.times() {
        Some(times) => times.iter().map(|c| c.unwrap_or(0.0)).collect(),
        None => vec![0.0; n],
    };
    if fitted.has_time {
        for i in 0..n {
            let (sd, cd, sw, cw) = encode_time(t[i]);
            x.set(i, offset, sd);
            x.set(i, offset + 1, cd);
            x.set(i, offset + 2, sw);
            x.set(i, offset + 3, cw);
        }
        let tname = table
            .columns
            .iter()
            .find(|c| c.kind == ColumnKind::Time)
            .map(|c| c.name.as_str())
            .unwrap_or("time");
        for suffix in ["sin_day", "cos_day", "sin_week", "cos_week"] {
            feature_names.push(format!("{tname}:{suffix}"));
        }
        offset += 4;
    }
    debug_assert_eq!(offset, d);
    assert!(
        x.all_finite(),
        "transform produced a non-finite feature value"
    );
    // Unlabeled rows (scoring) count as negatives.
    let y: Vec<u8> = table.labels().iter().map(|l| l.unwrap_or(0)).collect();
    Ok(FeatureMatrix {
        x,
        y,
        t,
        ids: table.ids().to_vec(),
        split: split.to_vec(),
        feature_names,
    })
}

/// The standard chain: drop high-missing columns, chronological split,
/// fit on train, transform everything.
pub fn run(
    table: &RawTable,
    config: &PreprocessConfig,
) -> Result<(FeatureMatrix, FittedTransform, RawTable)> {
    config.validate()?;
    let kept = drop_high_missing(table, config.max_missing_frac);
    let t: Vec<f64> = match kept.times() {
        Some(times) => times.iter().map(|c| c.unwrap_or(0.0)).collect(),
        None => vec![0.0; kept.n_rows],
    };
    let split = time_split(&t, config.split_fractions, kept.ids());
    let fitted = fit(&kept, config, &split)?;
    let features = transform(&kept, &fitted, &split)?;
    Ok((features, fitted, kept))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnMissingRate {
    pub name: String,
    pub before: f64,
    pub after: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NumericSummary {
    pub name: String,
    pub before_min: f64,
    pub before_median: f64,
    pub before_max: f64,
    pub clip_lo: f64,
    pub clip_hi: f64,
    pub after_min: f64,
    pub after_max: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreprocessReport {
    pub n_rows: usize,
    pub n_features: usize,
    pub split_counts: (usize, usize, usize),
    pub retained: Vec<ColumnMissingRate>,
    /// (column name, missing rate) for columns dropped by the filter.
    pub dropped: Vec<(String, f64)>,
    pub numeric_summaries: Vec<NumericSummary>,
}

/// Before/after view of one pipeline run: missing rates, drop list, and
/// clipping summaries for the numeric columns.
pub fn preprocess_report(
    before: &RawTable,
    after: &FeatureMatrix,
    fitted: &FittedTransform,
) -> PreprocessReport {
    let retained_names = fitted.retained();
    let mut retained = Vec::new();
    let mut dropped = Vec::new();
    let mut numeric_summaries = Vec::new();
    // Feature-block offsets in the output matrix per fitted column.
    let mut offsets = Vec::with_capacity(fitted.columns.len());
    let mut off = 0;
    for col in &fitted.columns {
        offsets.push(off);
        off += col.width();
    }
    for (spec, data) in before.columns.iter().zip(&before.data) {
        if !matches!(spec.kind, ColumnKind::Numeric | ColumnKind::Categorical) {
            continue;
        }
        let rate = missing_fraction(data, before.n_rows);
        let Some(pos) = retained_names.iter().position(|&n| n == spec.name) else {
            dropped.push((spec.name.clone(), rate));
            continue;
        };
        // "Missing" after transform means non-finite, which transform
        // forbids; still measured directly rather than assumed.
        let col = &fitted.columns[pos];
        let (lo, width) = (offsets[pos], col.width());
        let mut non_finite = 0usize;
        for i in 0..after.n() {
            for j in lo..lo + width {
                if !after.x.get(i, j).is_finite() {
                    non_finite += 1;
                }
            }
        }
        let after_rate = if after.n() == 0 {
            0.0
        } else {
            non_finite as f64 / (after.n() * width) as f64
        };
        retained.push(ColumnMissingRate {
            name: spec.name.clone(),
            before: rate,
            after: after_rate,
        });
        if let (ColumnTransform::Numeric(s), ColumnData::Numeric(values)) = (col, data) {
            let present: Vec<f64> = values.iter().flatten().copied().collect();
            if present.is_empty() {
                continue;
            }
            let mut sorted = present.clone();
            sorted.sort_by(f64::total_cmp);
            numeric_summaries.push(NumericSummary {
                name: s.name.clone(),
                before_min: sorted[0],
                before_median: quantile(&sorted, 0.5),
                before_max: *sorted.last().unwrap(),
                clip_lo: s.clip_lo,
                clip_hi: s.clip_hi,
                after_min: sorted[0].clamp(s.clip_lo, s.clip_hi),
                after_max: sorted.last().unwrap().clamp(s.clip_lo, s.clip_hi),
            });
        }
    }
    PreprocessReport {
        n_rows: before.n_rows,
        n_features: after.d(),
        split_counts: after.split_counts(),
        retained,
        dropped,
        numeric_summaries,
    }
}

const FEATURES_MAGIC: &[u8; 7] = b"RGFEAT1";
const FEATURES_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct FeaturesHeader {
    n: usize,
    d: usize,
    feature_names: Vec<String>,
    fitted: FittedTransform,
}

fn split_code(s: Split) -> u8 {
    match s {
        Split::Train => 0,
        Split::Val => 1,
        Split::Test => 2,
    }
}

/// Feature-matrix dump: magic, u32 version, u64 header length, JSON header
/// (shape, names, fitted transform), then ids as i64, labels and split
/// codes as bytes, times and the row-major matrix as f64 — all little
/// endian. Doubles on disk keep the train stage bit-identical to an
/// in-memory pipeline.
pub fn save_features(
    path: &std::path::Path,
    fm: &FeatureMatrix,
    fitted: &FittedTransform,
) -> Result<()> {
    use std::io::Write as _;
    let header = FeaturesHeader {
        n: fm.n(),
        d: fm.d(),
        feature_names: fm.feature_names.clone(),
        fitted: fitted.clone(),
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| Error::format(path, format!("header encode: {e}")))?;
    let mut buf =
        Vec::with_capacity(19 + header_json.len() + fm.n() * (18 + 8 * fm.d()));
    buf.extend_from_slice(FEATURES_MAGIC);
    buf.extend_from_slice(&FEATURES_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header_json);
    for &id in &fm.ids {
        buf.extend_from_slice(&id.to_le_bytes());
    }
    buf.extend_from_slice(&fm.y);
    for &s in &fm.split {
        buf.push(split_code(s));
    }
    for &t in &fm.t {
        buf.extend_from_slice(&t.to_le_bytes());
    }
    for &v in fm.x.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn load_features(path: &std::path::Path) -> Result<(FeatureMatrix, FittedTransform)> {
    use std::io::Read as _;
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let need = |end: usize| -> Result<()> {
        if end > bytes.len() {
            Err(Error::format(path, "truncated features file"))
        } else {
            Ok(())
        }
    };
    need(19)?;
    if &bytes[..7] != FEATURES_MAGIC {
        return Err(Error::format(path, "bad magic; not a features dump"));
    }
    let version = u32::from_le_bytes(bytes[7..11].try_into().unwrap());
    if version != FEATURES_VERSION {
        return Err(Error::format(
            path,
            format!("unsupported format version {version} (expected {FEATURES_VERSION})"),
        ));
    }
    let header_len = u64::from_le_bytes(bytes[11..19].try_into().unwrap()) as usize;
    need(19 + header_len)?;
    let header: FeaturesHeader = serde_json::from_slice(&bytes[19..19 + header_len])
        .map_err(|e| Error::format(path, format!("header decode: {e}")))?;
    let (n, d) = (header.n, header.d);
    if header.feature_names.len() != d {
        return Err(Error::format(path, "feature name count does not match d"));
    }
    let mut off = 19 + header_len;
    need(off + n * 8 + n + n + n * 8 + n * d * 8)?;
    let mut ids = Vec::with_capacity(n);
    for i in 0..n {
        ids.push(i64::from_le_bytes(
            bytes[off + 8 * i..off + 8 * i + 8].try_into().unwrap(),
        ));
    }
    off += 8 * n;
    let y = bytes[off..off + n].to_vec();
    if y.iter().any(|&v| v > 1) {
        return Err(Error::format(path, "label byte outside {0,1}"));
    }
    off += n;
    let mut split = Vec::with_capacity(n);
    for &code in &bytes[off..off + n] {
        split.push(match code {
            0 => Split::Train,
            1 => Split::Val,
            2 => Split::Test,
            other => {
                return Err(Error::format(path, format!("bad split code {other}")))
            }
        });
    }
    off += n;
    let mut t = Vec::with_capacity(n);
    for i in 0..n {
        t.push(f64::from_le_bytes(
            bytes[off + 8 * i..off + 8 * i + 8].try_into().unwrap(),
        ));
    }
    off += 8 * n;
    let mut data = Vec::with_capacity(n * d);
    for i in 0..n * d {
        data.push(f64::from_le_bytes(
            bytes[off + 8 * i..off + 8 * i + 8].try_into().unwrap(),
        ));
    }
    off += 8 * n * d;
    if off != bytes.len() {
        return Err(Error::format(path, "trailing bytes after feature data"));
    }
    let x = Tensor::from_vec(n, d, data);
    if !x.all_finite() {
        return Err(Error::format(path, "non-finite feature value"));
    }
    Ok((
        FeatureMatrix {
            x,
            y,
            t,
            ids,
            split,
            feature_names: header.feature_names,
        },
        header.fitted,
    ))
}
