//! Price CSV ingestion, feature computation, sliding-window instance
//! construction, and chronological splits.
//!
//! Feature layout per stock-day (15 columns):
//! `[open, high, low, close, adj_close, return_ratio, F_open, F_high, F_low,
//! MA5, MA10, MA15, MA20, MA25, MA30]`. The five raw prices are z-scored with
//! train-split statistics at split time; the ratio columns are already
//! scale-free and stay as computed.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const FEATURE_DIM: usize = 15;
/// Columns 0..5 hold raw prices and are the only normalized dimensions.
pub const BASIC_PRICE_DIMS: usize = 5;
pub const MA_WINDOWS: [usize; 6] = [5, 10, 15, 20, 25, 30];
/// Prior trading days a stock needs before a day becomes feature-eligible.
pub const HISTORY_DAYS: usize = 30;

// ── Bars and catalogs ────────────────────────────────────────────────────

/// One stock's OHLCV + adjusted-close record for one trading day.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriceBar {
    pub stock_id: String,
    pub date: NaiveDate,
    pub open: f64,
    pub high: f64,
    pub low: f64,
    pub close: f64,
    pub adj_close: f64,
    pub volume: u64,
}

impl PriceBar {
    fn validate(&self) -> Result<()> {
        let prices = [self.open, self.high, self.low, self.close, self.adj_close];
        if prices.iter().any(|p| !p.is_finite() || *p <= 0.0) {
            return Err(Error::Data(format!(
                "{} {}: non-positive or non-finite price",
                self.stock_id, self.date
            )));
        }
        if self.low > self.open.min(self.close) || self.high < self.open.max(self.close) {
            return Err(Error::Data(format!(
                "{} {}: low/high bounds violated (open {}, high {}, low {}, close {})",
                self.stock_id, self.date, self.open, self.high, self.low, self.close
            )));
        }
        Ok(())
    }
}

/// Stock → sector assignment plus derived member lists.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SectorCatalog {
    stock_to_sector: BTreeMap<String, String>,
}

impl SectorCatalog {
    /// Build from (stock, sector) pairs; a stock listed twice is a data error.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, String)>) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (stock, sector) in pairs {
            if map.insert(stock.clone(), sector).is_some() {
                return Err(Error::Data(format!("stock {stock} mapped to two sectors")));
            }
        }
        Ok(SectorCatalog { stock_to_sector: map })
    }

    pub fn sector_of(&self, stock: &str) -> Option<&str> {
        self.stock_to_sector.get(stock).map(|s| s.as_str())
    }

    /// Sorted list of distinct sectors.
    pub fn sectors(&self) -> Vec<&str> {
        let mut out: Vec<&str> = self.stock_to_sector.values().map(|s| s.as_str()).collect();
        out.sort();
        out.dedup();
        out
    }

    /// Sorted member list of one sector.
    pub fn members(&self, sector: &str) -> Vec<&str> {
        self.stock_to_sector
            .iter()
            .filter(|(_, sec)| sec.as_str() == sector)
            .map(|(stock, _)| stock.as_str())
            .collect()
    }

    pub fn stocks(&self) -> impl Iterator<Item = &str> {
        self.stock_to_sector.keys().map(|s| s.as_str())
    }

    pub fn num_stocks(&self) -> usize {
        self.stock_to_sector.len()
    }

    pub fn pairs(&self) -> Vec<(String, String)> {
        self.stock_to_sector
            .iter()
            .map(|(a, b)| (a.clone(), b.clone()))
            .collect()
    }
}

const PRICE_HEADER: [&str; 8] =
    ["stock_id", "date", "open", "high", "low", "close", "adj_close", "volume"];
const SECTOR_HEADER: [&str; 2] = ["stock_id", "sector_id"];

fn record_line(record: &csv::StringRecord, fallback: usize) -> usize {
    record.position().map(|p| p.line() as usize).unwrap_or(fallback)
}

fn csv_reader(path: &Path) -> Result<csv::Reader<File>> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => {
                Error::Io(std::io::Error::new(std::io::ErrorKind::NotFound, e.to_string()))
            }
            _ => Error::Parse { line: 1, details: e.to_string() },
        })
}

fn check_header(reader: &mut csv::Reader<File>, expected: &[&str]) -> Result<()> {
    let headers = reader
        .headers()
        .map_err(|e| Error::Parse { line: 1, details: e.to_string() })?;
    let got: Vec<&str> = headers.iter().collect();
    if got != expected {
        return Err(Error::Parse {
            line: 1,
            details: format!("header must be exactly {expected:?}, got {got:?}"),
        });
    }
    Ok(())
}

/// Load a price CSV into per-stock bar lists, sorted ascending by date.
/// Duplicate (stock, date) rows and invariant-violating bars are rejected.
pub fn load_prices(path: &Path) -> Result<BTreeMap<String, Vec<PriceBar>>> {
    let mut reader = csv_reader(path)?;
    check_header(&mut reader, &PRICE_HEADER)?;

    let mut bars: BTreeMap<String, Vec<PriceBar>> = BTreeMap::new();
    for (i, record) in reader.records().enumerate() {
        let fallback_line = i + 2;
        let record = record.map_err(|e| Error::Parse {
            line: e
                .position()
                .map(|p| p.line() as usize)
                .unwrap_or(fallback_line),
            details: e.to_string(),
        })?;
        let line = record_line(&record, fallback_line);
        let field = |idx: usize| -> &str { record.get(idx).unwrap_or("") };
        let parse_f64 = |idx: usize| -> Result<f64> {
            field(idx).trim().parse::<f64>().map_err(|_| Error::Parse {
                line,
                details: format!("bad number {:?} in column {}", field(idx), PRICE_HEADER[idx]),
            })
        };
        let date = NaiveDate::parse_from_str(field(1).trim(), "%Y-%m-%d").map_err(|_| {
            Error::Parse { line, details: format!("bad date {:?}, expected YYYY-MM-DD", field(1)) }
        })?;
        let bar = PriceBar {
            stock_id: field(0).trim().to_string(),
            date,
            open: parse_f64(2)?,
            high: parse_f64(3)?,
            low: parse_f64(4)?,
            close: parse_f64(5)?,
            adj_close: parse_f64(6)?,
            volume: field(7).trim().parse::<u64>().map_err(|_| Error::Parse {
                line,
                details: format!("bad volume {:?}", field(7)),
            })?,
        };
        if bar.stock_id.is_empty() {
            return Err(Error::Parse { line, details: "empty stock_id".into() });
        }
        bar.validate()?;
        bars.entry(bar.stock_id.clone()).or_default().push(bar);
    }

    for (stock, list) in &mut bars {
        list.sort_by_key(|b| b.date);
        if let Some(pair) = list.windows(2).find(|w| w[0].date == w[1].date) {
            return Err(Error::Data(format!(
                "duplicate bar for {stock} on {}",
                pair[0].date
            )));
        }
    }
    Ok(bars)
}

/// Load a `stock_id,sector_id` CSV into a catalog.
pub fn load_sectors(path: &Path) -> Result<SectorCatalog> {
    let mut reader = csv_reader(path)?;
    check_header(&mut reader, &SECTOR_HEADER)?;
    let mut pairs = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let fallback_line = i + 2;
        let record = record.map_err(|e| Error::Parse {
            line: e
                .position()
                .map(|p| p.line() as usize)
                .unwrap_or(fallback_line),
            details: e.to_string(),
        })?;
        let line = record_line(&record, fallback_line);
        let stock = record.get(0).unwrap_or("").trim().to_string();
        let sector = record.get(1).unwrap_or("").trim().to_string();
        if stock.is_empty() || sector.is_empty() {
            return Err(Error::Parse { line, details: "empty stock_id or sector_id".into() });
        }
        pairs.push((stock, sector));
    }
    SectorCatalog::from_pairs(pairs)
}

// ── Features ─────────────────────────────────────────────────────────────

/// One-day relative price change `(p_cur − p_prev) / p_prev`.
pub fn return_ratio(p_prev: f64, p_cur: f64) -> Result<f64> {
    if !p_prev.is_finite() || p_prev <= 0.0 {
        return Err(Error::Domain {
            op: "return_ratio",
            details: format!("previous price {p_prev} must be positive"),
        });
    }
    Ok((p_cur - p_prev) / p_prev)
}

/// `F_μ = μ/close − 1` for μ ∈ {open, high, low}.
pub fn price_ratio_features(bar: &PriceBar) -> Result<[f64; 3]> {
    if !bar.close.is_finite() || bar.close <= 0.0 {
        return Err(Error::Domain {
            op: "price_ratio_features",
            details: format!("close {} must be positive", bar.close),
        });
    }
    Ok([
        bar.open / bar.close - 1.0,
        bar.high / bar.close - 1.0,
        bar.low / bar.close - 1.0,
    ])
}

/// Moving-average feature for one window length. `history` holds adjusted
/// closes ending at (and including) the current day. The standard form is
/// `mean(last φ) / adjclose − 1`; `literal` preserves the printed
/// `mean(last φ) / (adjclose − 1)` for comparison.
pub fn moving_average_feature(history: &[f64], phi: usize, literal: bool) -> Result<f64> {
    if phi == 0 || history.len() < phi {
        return Err(Error::Eligibility(format!(
            "need {phi} days of history, have {}",
            history.len()
        )));
    }
    let current = *history.last().expect("nonempty");
    let mean: f64 = history[history.len() - phi..].iter().sum::<f64>() / phi as f64;
    if literal {
        let denom = current - 1.0;
        if denom.abs() < 1e-12 {
            return Err(Error::Domain {
                op: "moving_average_feature",
                details: "literal form divides by adjclose − 1 = 0".into(),
            });
        }
        Ok(mean / denom)
    } else {
        if !current.is_finite() || current <= 0.0 {
            return Err(Error::Domain {
                op: "moving_average_feature",
                details: format!("adjusted close {current} must be positive"),
            });
        }
        Ok(mean / current - 1.0)
    }
}

/// All six moving-average features. Requires the full 30 prior days plus the
/// current one; shorter histories make the day ineligible.
pub fn moving_average_features(history: &[f64], literal: bool) -> Result<[f64; 6]> {
    if history.len() < HISTORY_DAYS + 1 {
        return Err(Error::Eligibility(format!(
            "need {} prior days, have {}",
            HISTORY_DAYS,
            history.len().saturating_sub(1)
        )));
    }
    let mut out = [0.0; 6];
    for (slot, phi) in MA_WINDOWS.iter().enumerate() {
        out[slot] = moving_average_feature(history, *phi, literal)?;
    }
    Ok(out)
}

/// Full 15-dim feature vector for `bars[idx]`; requires `idx ≥ HISTORY_DAYS`.
fn feature_vector(bars: &[PriceBar], idx: usize, literal: bool) -> Result<[f64; FEATURE_DIM]> {
    if idx < HISTORY_DAYS {
        return Err(Error::Eligibility(format!(
            "day index {idx} has fewer than {HISTORY_DAYS} prior days"
        )));
    }
    let bar = &bars[idx];
    let ret = return_ratio(bars[idx - 1].adj_close, bar.adj_close)?;
    let ratios = price_ratio_features(bar)?;
    let history: Vec<f64> = bars[..=idx].iter().map(|b| b.adj_close).collect();
    let mas = moving_average_features(&history, literal)?;
    let mut v = [0.0; FEATURE_DIM];
    v[0] = bar.open;
    v[1] = bar.high;
    v[2] = bar.low;
    v[3] = bar.close;
    v[4] = bar.adj_close;
    v[5] = ret;
    v[6..9].copy_from_slice(&ratios);
    v[9..15].copy_from_slice(&mas);
    Ok(v)
}

// ── Instances ────────────────────────────────────────────────────────────

/// One stock's slice of an instance: 15 days × 15 features plus the day-16
/// targets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StockSlice {
    pub stock_id: String,
    pub features: Vec<Vec<f64>>,
    pub target_return: f64,
    pub target_move: bool,
}

/// A full cross-section for one prediction day: every included stock carries
/// `weeks × days_per_week` contiguous feature rows; day 16 supplies targets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceWindow {
    pub prediction_date: NaiveDate,
    pub stocks: Vec<StockSlice>,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct DataOptions {
    /// Preserve the literal moving-average denominator for comparison runs.
    pub ma_literal: bool,
    /// A calendar date counts as a common trading day when at least this
    /// fraction of the universe traded on it.
    pub calendar_threshold: f64,
}

impl Default for DataOptions {
    fn default() -> Self {
        DataOptions { ma_literal: false, calendar_threshold: 0.9 }
    }
}

/// Common trading calendar: sorted dates on which at least
/// `threshold × n_stocks` of the universe traded.
pub fn trading_calendar(
    bars: &BTreeMap<String, Vec<PriceBar>>,
    threshold: f64,
) -> Vec<NaiveDate> {
    let n = bars.len();
    let mut counts: BTreeMap<NaiveDate, usize> = BTreeMap::new();
    for list in bars.values() {
        for bar in list {
            *counts.entry(bar.date).or_default() += 1;
        }
    }
    counts
        .into_iter()
        .filter(|(_, c)| *c as f64 >= threshold * n as f64)
        .map(|(d, _)| d)
        .collect()
}

/// Build one instance per eligible prediction day (stride 1). A stock joins a
/// day's cross-section only when it has a bar on all 16 calendar days and a
/// full 30-day feature history on each window day; otherwise it is excluded
/// from that instance and the exclusion is logged.
pub fn build_instances(
    bars: &BTreeMap<String, Vec<PriceBar>>,
    catalog: &SectorCatalog,
    weeks: usize,
    days_per_week: usize,
    opts: &DataOptions,
) -> Result<Vec<InstanceWindow>> {
    if weeks == 0 || days_per_week == 0 {
        return Err(Error::Config("weeks and days_per_week must be positive".into()));
    }
    let window = weeks * days_per_week;

    // Universe = stocks with both bars and a sector assignment.
    let universe: BTreeMap<String, &Vec<PriceBar>> = bars
        .iter()
        .filter(|(stock, _)| {
            let known = catalog.sector_of(stock).is_some();
            if !known {
                log::warn!("stock {stock} has no sector assignment; dropped from universe");
            }
            known
        })
        .map(|(k, v)| (k.clone(), v))
        .collect();
    if universe.is_empty() {
        return Err(Error::Data("no stock appears in both prices and sectors".into()));
    }

    let owned: BTreeMap<String, Vec<PriceBar>> = universe
        .iter()
        .map(|(k, v)| (k.clone(), (*v).clone()))
        .collect();
    let calendar = trading_calendar(&owned, opts.calendar_threshold);

    struct StockSeries<'a> {
        bars: &'a [PriceBar],
        date_index: BTreeMap<NaiveDate, usize>,
    }
    let mut series: BTreeMap<&str, StockSeries> = BTreeMap::new();
    for (stock, list) in &universe {
        let date_index = list.iter().enumerate().map(|(i, b)| (b.date, i)).collect();
        series.insert(stock.as_str(), StockSeries { bars: list, date_index });
    }

    let mut instances = Vec::new();
    for t in window..calendar.len() {
        let window_dates = &calendar[t - window..t];
        let target_date = calendar[t];
        let mut slices = Vec::new();
        for (stock, s) in &series {
            let Some(&target_idx) = s.date_index.get(&target_date) else {
                log::debug!("{stock} excluded from {target_date}: missing target bar");
                continue;
            };
            if target_idx == 0 {
                continue;
            }
            let mut day_indices = Vec::with_capacity(window);
            let mut complete = true;
            for d in window_dates {
                match s.date_index.get(d) {
                    Some(&i) if i >= HISTORY_DAYS => day_indices.push(i),
                    Some(_) => {
                        log::debug!("{stock} excluded from {target_date}: {d} lacks history");
                        complete = false;
                        break;
                    }
                    None => {
                        log::debug!("{stock} excluded from {target_date}: missing bar on {d}");
                        complete = false;
                        break;
                    }
                }
            }
            if !complete {
                continue;
            }
            let mut features = Vec::with_capacity(window);
            for &i in &day_indices {
                features.push(feature_vector(s.bars, i, opts.ma_literal)?.to_vec());
            }
            let target_return = return_ratio(
                s.bars[target_idx - 1].adj_close,
                s.bars[target_idx].adj_close,
            )?;
            slices.push(StockSlice {
                stock_id: (*stock).to_string(),
                features,
                target_return,
                target_move: target_return > 0.0,
            });
        }
        if slices.is_empty() {
            log::debug!("no stock eligible on {target_date}; instance skipped");
            continue;
        }
        instances.push(InstanceWindow { prediction_date: target_date, stocks: slices });
    }
    Ok(instances)
}

// ── Splits and normalization ─────────────────────────────────────────────

/// Per-feature mean and standard deviation, computed from the train portion
/// only and applied to the raw price columns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    /// Population statistics over every stock-day feature row.
    pub fn compute(instances: &[InstanceWindow]) -> NormStats {
        let mut count = 0usize;
        let mut mean = vec![0.0; FEATURE_DIM];
        for inst in instances {
            for s in &inst.stocks {
                for row in &s.features {
                    for (m, v) in mean.iter_mut().zip(row) {
                        *m += v;
                    }
                    count += 1;
                }
            }
        }
        let n = count.max(1) as f64;
        for m in &mut mean {
            *m /= n;
        }
        let mut var = vec![0.0; FEATURE_DIM];
        for inst in instances {
            for s in &inst.stocks {
                for row in &s.features {
                    for ((v, m), acc) in row.iter().zip(&mean).zip(var.iter_mut()) {
                        let d = v - m;
                        *acc += d * d;
                    }
                }
            }
        }
        let std = var.into_iter().map(|v| (v / n).sqrt()).collect();
        NormStats { mean, std }
    }

    /// Z-score the raw price columns in place; ratio columns are untouched.
    pub fn apply(&self, instances: &mut [InstanceWindow]) {
        for inst in instances.iter_mut() {
            for s in &mut inst.stocks {
                for row in &mut s.features {
                    for d in 0..BASIC_PRICE_DIMS {
                        let sd = if self.std[d] > 1e-12 { self.std[d] } else { 1.0 };
                        row[d] = (row[d] - self.mean[d]) / sd;
                    }
                }
            }
        }
    }
}

/// Ordered train/validation/test instances with train-only normalization
/// statistics already applied.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<InstanceWindow>,
    pub validation: Vec<InstanceWindow>,
    pub test: Vec<InstanceWindow>,
    pub norm: NormStats,
}

/// Split by day count into contiguous prefix/middle/suffix, compute
/// normalization statistics on the train portion only, and apply them to all
/// three portions.
pub fn split_chronological(
    mut instances: Vec<InstanceWindow>,
    ratios: (f64, f64, f64),
) -> Result<DatasetSplit> {
    let (r_train, r_val, r_test) = ratios;
    if r_train <= 0.0
        || r_val <= 0.0
        || r_test <= 0.0
        || (r_train + r_val + r_test - 1.0).abs() > 1e-9
    {
        return Err(Error::Config(format!(
            "split ratios must be positive and sum to 1, got {ratios:?}"
        )));
    }
    instances.sort_by_key(|i| i.prediction_date);
    let n = instances.len();
    let n_train = (n as f64 * r_train).round() as usize;
    let n_val = (n as f64 * r_val).round() as usize;
    if n_train == 0 || n_val == 0 || n_train + n_val >= n {
        return Err(Error::Config(format!(
            "{n} prediction days cannot be split {ratios:?} without an empty part"
        )));
    }
    let test = instances.split_off(n_train + n_val);
    let validation = instances.split_off(n_train);
    let mut train = instances;

    let norm = NormStats::compute(&train);
    let mut validation = validation;
    let mut test = test;
    norm.apply(&mut train);
    norm.apply(&mut validation);
    norm.apply(&mut test);
    Ok(DatasetSplit { train, validation, test, norm })
}

// ── Instance cache ───────────────────────────────────────────────────────

pub const CACHE_MAGIC: &str = "FINGAT.CACHE";
pub const CACHE_VERSION: u32 = 1;

/// First line of the JSON-lines cache file.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CacheHeader {
    pub magic: String,
    pub version: u32,
    pub weeks: usize,
    pub days_per_week: usize,
    pub ma_literal: bool,
    pub calendar_threshold: f64,
    pub catalog: Vec<(String, String)>,
    pub n_instances: usize,
}

/// Write the cache: header line, then one instance per line. Output bytes
/// are a pure function of the inputs.
pub fn write_cache(path: &Path, header: &CacheHeader, instances: &[InstanceWindow]) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer(&mut w, header)?;
    w.write_all(b"\n")?;
    for inst in instances {
        serde_json::to_writer(&mut w, inst)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_cache(path: &Path) -> Result<(CacheHeader, SectorCatalog, Vec<InstanceWindow>)> {
    let file = File::open(path)?;
    let mut lines = BufReader::new(file).lines();
    let header_line = lines
        .next()
        .ok_or_else(|| Error::Data("cache file is empty".into()))??;
    let header: CacheHeader = serde_json::from_str(&header_line)
        .map_err(|e| Error::Data(format!("bad cache header: {e}")))?;
    if header.magic != CACHE_MAGIC {
        return Err(Error::Data(format!("not a cache file (magic {:?})", header.magic)));
    }
    if header.version != CACHE_VERSION {
        return Err(Error::Data(format!(
            "cache version {} unsupported (expected {CACHE_VERSION})",
            header.version
        )));
    }
    let mut instances = Vec::with_capacity(header.n_instances);
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        instances.push(
            serde_json::from_str(&line).map_err(|e| Error::Data(format!("bad cache line: {e}")))?,
        );
    }
    if instances.len() != header.n_instances {
        return Err(Error::Data(format!(
            "cache header promises {} instances, found {}",
            header.n_instances,
            instances.len()
        )));
    }
    let catalog = SectorCatalog::from_pairs(header.catalog.clone())?;
    Ok((header, catalog, instances))
}
