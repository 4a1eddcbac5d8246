//! Seeded synthetic market with momentum-driven returns.
//!
//! Each stock carries a slowly mean-reverting drift state; sectors share a
//! common factor. Next-day returns are therefore largely predictable from
//! recent history, which makes the dataset learnable by construction and
//! suitable as a training/acceptance fixture.

use std::collections::BTreeMap;
use std::path::Path;

use chrono::NaiveDate;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{PriceBar, SectorCatalog};
use crate::layers::seeded_rng;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SynthConfig {
    pub stocks: usize,
    pub sectors: usize,
    pub weeks: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig { stocks: 12, sectors: 3, weeks: 40, seed: 42 }
    }
}

const DRIFT_PERSISTENCE: f64 = 0.95;
const DRIFT_SCALE: f64 = 0.012;
const SECTOR_PERSISTENCE: f64 = 0.9;
const SECTOR_SCALE: f64 = 0.006;
const NOISE_SCALE: f64 = 0.0015;

pub fn stock_id(i: usize) -> String {
    format!("S{:02}", i + 1)
}

pub fn sector_id(i: usize) -> String {
    format!("IND{}", i + 1)
}

/// Consecutive weekdays starting 2020-01-06 (a Monday).
pub fn weekday_calendar(n_days: usize) -> Vec<NaiveDate> {
    let mut out = Vec::with_capacity(n_days);
    let mut d = NaiveDate::from_ymd_opt(2020, 1, 6).expect("valid date");
    while out.len() < n_days {
        if d.format("%u").to_string().parse::<u32>().unwrap() <= 5 {
            out.push(d);
        }
        d = d.succ_opt().expect("date overflow");
    }
    out
}

/// Generate the synthetic market: per-stock bar series plus the sector
/// catalog. Identical configs produce identical output.
pub fn generate(cfg: &SynthConfig) -> Result<(BTreeMap<String, Vec<PriceBar>>, SectorCatalog)> {
    if cfg.stocks == 0 || cfg.sectors == 0 || cfg.weeks == 0 {
        return Err(Error::Config("synthetic market needs stocks, sectors, weeks > 0".into()));
    }
    if cfg.sectors > cfg.stocks {
        return Err(Error::Config(format!(
            "{} sectors cannot cover {} stocks",
            cfg.sectors, cfg.stocks
        )));
    }
    let n_days = cfg.weeks * 5;
    let calendar = weekday_calendar(n_days);
    let mut rng = seeded_rng(cfg.seed);
    let normal = |rng: &mut rand_chacha::ChaCha8Rng| -> f64 { rng.sample(StandardNormal) };

    // Contiguous blocks of stocks per sector.
    let sector_of: Vec<usize> = (0..cfg.stocks)
        .map(|q| (q * cfg.sectors) / cfg.stocks)
        .collect();

    let mut drift = vec![0.0f64; cfg.stocks];
    let mut sector_factor = vec![0.0f64; cfg.sectors];
    let mut close: Vec<f64> = (0..cfg.stocks).map(|q| 40.0 + 3.0 * q as f64).collect();

    let mut bars: BTreeMap<String, Vec<PriceBar>> = BTreeMap::new();
    for q in 0..cfg.stocks {
        bars.insert(stock_id(q), Vec::with_capacity(n_days));
    }

    let drift_innov = (1.0 - DRIFT_PERSISTENCE * DRIFT_PERSISTENCE).sqrt() * DRIFT_SCALE;
    let sector_innov = (1.0 - SECTOR_PERSISTENCE * SECTOR_PERSISTENCE).sqrt() * SECTOR_SCALE;

    for (day, date) in calendar.iter().enumerate() {
        for s in sector_factor.iter_mut() {
            *s = SECTOR_PERSISTENCE * *s + sector_innov * normal(&mut rng);
        }
        for q in 0..cfg.stocks {
            drift[q] = DRIFT_PERSISTENCE * drift[q] + drift_innov * normal(&mut rng);
            let ret = (drift[q] + sector_factor[sector_of[q]] + NOISE_SCALE * normal(&mut rng))
                .clamp(-0.12, 0.12);

            let prev_close = close[q];
            if day > 0 {
                close[q] = prev_close * (1.0 + ret);
            }
            let open = if day == 0 {
                close[q]
            } else {
                prev_close * (1.0 + 0.003 * normal(&mut rng)).max(0.5)
            };
            let hi_pad: f64 = 0.002 * normal(&mut rng);
            let lo_pad: f64 = 0.002 * normal(&mut rng);
            let high = open.max(close[q]) * (1.0 + hi_pad.abs());
            let low = open.min(close[q]) * (1.0 - lo_pad.abs()).max(0.01);
            let volume = (1.0e5 * (1.0 + 0.3 * normal(&mut rng).abs())) as u64;

            bars.get_mut(&stock_id(q)).expect("stock exists").push(PriceBar {
                stock_id: stock_id(q),
                date: *date,
                open,
                high,
                low,
                close: close[q],
                adj_close: close[q],
                volume,
            });
        }
    }

    let catalog = SectorCatalog::from_pairs(
        (0..cfg.stocks).map(|q| (stock_id(q), sector_id(sector_of[q]))),
    )?;
    Ok((bars, catalog))
}

/// Write bars in the price CSV schema, grouped by stock then date.
pub fn write_prices_csv(path: &Path, bars: &BTreeMap<String, Vec<PriceBar>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    w.write_record(["stock_id", "date", "open", "high", "low", "close", "adj_close", "volume"])
        .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    for list in bars.values() {
        for b in list {
            w.write_record([
                b.stock_id.as_str(),
                &b.date.format("%Y-%m-%d").to_string(),
                &b.open.to_string(),
                &b.high.to_string(),
                &b.low.to_string(),
                &b.close.to_string(),
                &b.adj_close.to_string(),
                &b.volume.to_string(),
            ])
            .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_sectors_csv(path: &Path, catalog: &SectorCatalog) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    w.write_record(["stock_id", "sector_id"])
        .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    for (stock, sector) in catalog.pairs() {
        w.write_record([stock.as_str(), sector.as_str()])
            .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    }
    w.flush()?;
    Ok(())
}
