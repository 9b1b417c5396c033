//! Panel ingestion, engineered features, factor-mimicking portfolios and the
//! time-varying investible universe.
//!
//! A stock is not investible in a period for which its price is missing, and
//! no return is computed into or out of a price gap. Every such cell carries a
//! NaN sentinel and is masked off.

use std::collections::BTreeMap;
use std::fs::File;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use chrono::{Duration, NaiveDate};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BVTP: &str = "BVTP";
pub const MV: &str = "MV";
pub const MOMS: &str = "MOMS";
pub const MOML: &str = "MOML";

pub const SHORT_MOMENTUM_WEEKS: usize = 13;
pub const LONG_MOMENTUM_WEEKS: usize = 52;

const DATE_FORMAT: &str = "%Y-%m-%d";

/// Aligned period × asset panel. Immutable after construction.
#[derive(Debug)]
pub struct AssetPanel {
    dates: Vec<NaiveDate>,
    asset_ids: Vec<String>,
    prices: DMatrix<f64>,
    returns: DMatrix<f64>,
    excess: DMatrix<f64>,
    available: DMatrix<bool>,
    rf: Vec<f64>,
    char_names: Vec<String>,
    chars: Vec<DMatrix<f64>>,
    macro_vars: DMatrix<f64>,
    masked_reads: AtomicUsize,
}

impl Clone for AssetPanel {
    fn clone(&self) -> Self {
        Self {
            dates: self.dates.clone(),
            asset_ids: self.asset_ids.clone(),
            prices: self.prices.clone(),
            returns: self.returns.clone(),
            excess: self.excess.clone(),
            available: self.available.clone(),
            rf: self.rf.clone(),
            char_names: self.char_names.clone(),
            chars: self.chars.clone(),
            macro_vars: self.macro_vars.clone(),
            masked_reads: AtomicUsize::new(0),
        }
    }
}

impl AssetPanel {
    /// Builds a panel from a price matrix (NaN = missing). Returns and the
    /// availability mask are derived from consecutive prices.
    pub fn from_prices(
        dates: Vec<NaiveDate>,
        asset_ids: Vec<String>,
        prices: DMatrix<f64>,
        rf: Vec<f64>,
        characteristics: Vec<(String, DMatrix<f64>)>,
        macro_vars: Option<DMatrix<f64>>,
    ) -> Result<Self> {
        let t_len = dates.len();
        let n = asset_ids.len();
        if prices.shape() != (t_len, n) {
            return Err(Error::Dimension(format!(
                "prices are {:?}, expected ({t_len}, {n})",
                prices.shape()
            )));
        }
        if rf.len() != t_len {
            return Err(Error::Dimension(format!("rf has {} periods, expected {t_len}", rf.len())));
        }
        if let Some(w) = dates.windows(2).find(|w| w[1] <= w[0]) {
            return Err(Error::invalid(format!("dates not strictly increasing at {}", w[1])));
        }
        if rf.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("risk-free series"));
        }
        for (name, m) in &characteristics {
            if m.shape() != (t_len, n) {
                return Err(Error::Dimension(format!(
                    "characteristic {name} is {:?}, expected ({t_len}, {n})",
                    m.shape()
                )));
            }
            if name == MV && m.iter().any(|v| v.is_finite() && *v <= 0.0) {
                return Err(Error::invalid("market value must be positive where present"));
            }
        }
        let macro_vars = macro_vars.unwrap_or_else(|| DMatrix::zeros(t_len, 0));
        if macro_vars.nrows() != t_len {
            return Err(Error::Dimension("macro variables misaligned with dates".into()));
        }

        let valid_price = |p: f64| p.is_finite() && p > 0.0;
        let mut returns = DMatrix::from_element(t_len, n, f64::NAN);
        let mut excess = DMatrix::from_element(t_len, n, f64::NAN);
        let mut available = DMatrix::from_element(t_len, n, false);
        for t in 1..t_len {
            for i in 0..n {
                let (p0, p1) = (prices[(t - 1, i)], prices[(t, i)]);
                if valid_price(p0) && valid_price(p1) {
                    let r = p1 / p0 - 1.0;
                    returns[(t, i)] = r;
                    excess[(t, i)] = r - rf[t];
                    available[(t, i)] = true;
                }
            }
        }
        let (char_names, chars) = characteristics.into_iter().unzip();
        Ok(Self {
            dates,
            asset_ids,
            prices,
            returns,
            excess,
            available,
            rf,
            char_names,
            chars,
            macro_vars,
            masked_reads: AtomicUsize::new(0),
        })
    }

    pub fn n_periods(&self) -> usize {
        self.dates.len()
    }

    pub fn n_assets(&self) -> usize {
        self.asset_ids.len()
    }

    pub fn dates(&self) -> &[NaiveDate] {
        &self.dates
    }

    pub fn asset_ids(&self) -> &[String] {
        &self.asset_ids
    }

    pub fn rf(&self, t: usize) -> f64 {
        self.rf[t]
    }

    pub fn rf_series(&self) -> &[f64] {
        &self.rf
    }

    pub fn is_available(&self, t: usize, i: usize) -> bool {
        self.available[(t, i)]
    }

    pub fn available_row(&self, t: usize) -> Vec<bool> {
        (0..self.n_assets()).map(|i| self.available[(t, i)]).collect()
    }

    pub fn price(&self, t: usize, i: usize) -> Option<f64> {
        let p = self.prices[(t, i)];
        p.is_finite().then_some(p)
    }

    /// Simple return; `None` when masked.
    pub fn simple_return(&self, t: usize, i: usize) -> Option<f64> {
        self.available[(t, i)].then(|| self.returns[(t, i)])
    }

    /// Raw excess-return accessor. Reading a masked cell is counted (see
    /// [`AssetPanel::masked_reads`]) and yields NaN.
    pub fn excess_return(&self, t: usize, i: usize) -> f64 {
        if !self.available[(t, i)] {
            self.masked_reads.fetch_add(1, Ordering::Relaxed);
        }
        self.excess[(t, i)]
    }

    /// Excess returns for period `t` with masked cells zero-filled, plus the mask.
    pub fn excess_row(&self, t: usize) -> (DVector<f64>, Vec<bool>) {
        let mask = self.available_row(t);
        let v = DVector::from_fn(self.n_assets(), |i, _| {
            if mask[i] {
                self.excess[(t, i)]
            } else {
                0.0
            }
        });
        (v, mask)
    }

    /// Number of masked cells read through [`AssetPanel::excess_return`].
    pub fn masked_reads(&self) -> usize {
        self.masked_reads.load(Ordering::Relaxed)
    }

    pub fn characteristic_names(&self) -> &[String] {
        &self.char_names
    }

    pub fn characteristic_index(&self, name: &str) -> Option<usize> {
        self.char_names.iter().position(|n| n == name)
    }

    /// Characteristic `k` for asset `i` at `t`; `None` when missing.
    pub fn characteristic(&self, t: usize, i: usize, k: usize) -> Option<f64> {
        let v = self.chars[k][(t, i)];
        v.is_finite().then_some(v)
    }

    pub fn characteristic_by_name(&self, t: usize, i: usize, name: &str) -> Option<f64> {
        self.characteristic_index(name)
            .and_then(|k| self.characteristic(t, i, k))
    }

    pub fn n_macro(&self) -> usize {
        self.macro_vars.ncols()
    }

    pub fn macro_row(&self, t: usize) -> DVector<f64> {
        self.macro_vars.row(t).transpose()
    }

    /// Copy with `name` added or replaced.
    pub fn with_characteristic(&self, name: &str, values: DMatrix<f64>) -> Result<Self> {
        if values.shape() != (self.n_periods(), self.n_assets()) {
            return Err(Error::Dimension(format!("characteristic {name} misaligned")));
        }
        let mut out = self.clone();
        match out.characteristic_index(name) {
            Some(k) => out.chars[k] = values,
            None => {
                out.char_names.push(name.to_string());
                out.chars.push(values);
            }
        }
        Ok(out)
    }

    /// The first `len` periods only. Everything derived from a prefix is
    /// identical to the same prefix of the full panel.
    pub fn truncated(&self, len: usize) -> Self {
        let len = len.min(self.n_periods());
        let rows = |m: &DMatrix<f64>| m.rows(0, len).into_owned();
        Self {
            dates: self.dates[..len].to_vec(),
            asset_ids: self.asset_ids.clone(),
            prices: rows(&self.prices),
            returns: rows(&self.returns),
            excess: rows(&self.excess),
            available: self.available.rows(0, len).into_owned(),
            rf: self.rf[..len].to_vec(),
            char_names: self.char_names.clone(),
            chars: self.chars.iter().map(rows).collect(),
            macro_vars: rows(&self.macro_vars),
            masked_reads: AtomicUsize::new(0),
        }
    }
}

/// Weekly calendar starting at `start`.
pub fn weekly_dates(start: NaiveDate, len: usize) -> Vec<NaiveDate> {
    (0..len)
        .map(|k| start + Duration::weeks(k as i64))
        .collect()
}

// ---------------------------------------------------------------------------
// CSV ingestion

fn parse_err(path: &Path, line: u64, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn open_csv(path: &Path) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(file))
}

fn check_header(path: &Path, rdr: &mut csv::Reader<File>, expected: &[&str]) -> Result<()> {
    let header = rdr
        .headers()
        .map_err(|e| parse_err(path, 1, e.to_string()))?;
    let got: Vec<String> = header.iter().map(|h| h.to_ascii_lowercase()).collect();
    if got != expected {
        return Err(parse_err(
            path,
            1,
            format!("expected header {}, found {}", expected.join(","), got.join(",")),
        ));
    }
    Ok(())
}

fn parse_date(path: &Path, line: u64, s: &str) -> Result<NaiveDate> {
    NaiveDate::parse_from_str(s, DATE_FORMAT)
        .map_err(|e| parse_err(path, line, format!("bad date {s:?}: {e}")))
}

fn parse_opt_f64(path: &Path, line: u64, field: &str, s: &str) -> Result<Option<f64>> {
    if s.is_empty() {
        return Ok(None);
    }
    let v: f64 = s
        .parse()
        .map_err(|_| parse_err(path, line, format!("bad {field} value {s:?}")))?;
    if !v.is_finite() {
        return Err(parse_err(path, line, format!("non-finite {field}")));
    }
    Ok(Some(v))
}

struct LongRow {
    line: u64,
    date: NaiveDate,
    asset: String,
    values: Vec<Option<f64>>,
}

/// Reads a long-format file (date, asset_id, values...) whose dates are grouped
/// in non-decreasing order.
fn read_long(path: &Path, value_fields: &[&str]) -> Result<Vec<LongRow>> {
    let mut rdr = open_csv(path)?;
    let mut header = vec!["date", "asset_id"];
    header.extend_from_slice(value_fields);
    check_header(path, &mut rdr, &header)?;
    let mut out = Vec::new();
    let mut last: Option<NaiveDate> = None;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            parse_err(path, line, e.to_string())
        })?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        if rec.len() != header.len() {
            return Err(parse_err(path, line, format!("expected {} fields", header.len())));
        }
        let date = parse_date(path, line, &rec[0])?;
        if let Some(prev) = last {
            if date < prev {
                return Err(Error::NonMonotoneDates {
                    path: path.to_path_buf(),
                    line,
                    date: rec[0].to_string(),
                });
            }
        }
        last = Some(date);
        let asset = rec[1].to_string();
        if asset.is_empty() {
            return Err(parse_err(path, line, "empty asset_id"));
        }
        let values = value_fields
            .iter()
            .enumerate()
            .map(|(k, f)| parse_opt_f64(path, line, f, &rec[2 + k]))
            .collect::<Result<Vec<_>>>()?;
        out.push(LongRow {
            line,
            date,
            asset,
            values,
        });
    }
    Ok(out)
}

fn read_rf(path: &Path) -> Result<(Vec<NaiveDate>, Vec<f64>)> {
    let mut rdr = open_csv(path)?;
    check_header(path, &mut rdr, &["date", "rf"])?;
    let mut dates: Vec<NaiveDate> = Vec::new();
    let mut rf = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            parse_err(path, line, e.to_string())
        })?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        if rec.len() != 2 {
            return Err(parse_err(path, line, "expected 2 fields"));
        }
        let date = parse_date(path, line, &rec[0])?;
        if dates.last().is_some_and(|&d| date <= d) {
            return Err(Error::NonMonotoneDates {
                path: path.to_path_buf(),
                line,
                date: rec[0].to_string(),
            });
        }
        let v = parse_opt_f64(path, line, "rf", &rec[1])?
            .ok_or_else(|| parse_err(path, line, "missing risk-free rate"))?;
        dates.push(date);
        rf.push(v);
    }
    if dates.is_empty() {
        return Err(parse_err(path, 1, "no periods"));
    }
    Ok((dates, rf))
}

/// Loads `prices.csv` (date,asset_id,price), `characteristics.csv`
/// (date,asset_id,bvtp,mv) and `rf.csv` (date,rf). The rf file defines the
/// calendar; assets are ordered by ascending id.
pub fn load_panel(
    prices_path: impl AsRef<Path>,
    characteristics_path: impl AsRef<Path>,
    rf_path: impl AsRef<Path>,
) -> Result<AssetPanel> {
    let (prices_path, chars_path, rf_path) = (
        prices_path.as_ref(),
        characteristics_path.as_ref(),
        rf_path.as_ref(),
    );
    let (dates, rf) = read_rf(rf_path)?;
    let date_index: BTreeMap<NaiveDate, usize> =
        dates.iter().enumerate().map(|(k, &d)| (d, k)).collect();
    let price_rows = read_long(prices_path, &["price"])?;
    let char_rows = read_long(chars_path, &["bvtp", "mv"])?;

    let mut ids: Vec<String> = price_rows.iter().map(|r| r.asset.clone()).collect();
    ids.sort();
    ids.dedup();
    let asset_index: BTreeMap<&str, usize> =
        ids.iter().enumerate().map(|(k, s)| (s.as_str(), k)).collect();
    let (t_len, n) = (dates.len(), ids.len());

    let locate = |path: &Path, row: &LongRow| -> Result<(usize, Option<usize>)> {
        let t = *date_index.get(&row.date).ok_or_else(|| {
            parse_err(path, row.line, format!("date {} not in risk-free calendar", row.date))
        })?;
        Ok((t, asset_index.get(row.asset.as_str()).copied()))
    };

    let mut prices = DMatrix::from_element(t_len, n, f64::NAN);
    let mut seen = DMatrix::from_element(t_len, n, false);
    for row in &price_rows {
        let (t, i) = locate(prices_path, row)?;
        let i = i.expect("asset ids come from the price file");
        if seen[(t, i)] {
            return Err(parse_err(prices_path, row.line, "duplicate (date, asset_id)"));
        }
        seen[(t, i)] = true;
        if let Some(p) = row.values[0] {
            if p <= 0.0 {
                return Err(parse_err(prices_path, row.line, "price must be positive"));
            }
            prices[(t, i)] = p;
        }
    }

    let mut bvtp = DMatrix::from_element(t_len, n, f64::NAN);
    let mut mv = DMatrix::from_element(t_len, n, f64::NAN);
    let mut seen = DMatrix::from_element(t_len, n, false);
    for row in &char_rows {
        let (t, i) = locate(chars_path, row)?;
        // characteristics for assets that never trade are irrelevant
        let Some(i) = i else { continue };
        if seen[(t, i)] {
            return Err(parse_err(chars_path, row.line, "duplicate (date, asset_id)"));
        }
        seen[(t, i)] = true;
        if let Some(b) = row.values[0] {
            bvtp[(t, i)] = b;
        }
        if let Some(m) = row.values[1] {
            if m <= 0.0 {
                return Err(parse_err(chars_path, row.line, "market value must be positive"));
            }
            mv[(t, i)] = m;
        }
    }

    AssetPanel::from_prices(
        dates,
        ids,
        prices,
        rf,
        vec![(BVTP.to_string(), bvtp), (MV.to_string(), mv)],
        None,
    )
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

fn create(path: &Path) -> Result<csv::Writer<File>> {
    let file = File::create(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(csv::Writer::from_writer(file))
}

fn io_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| Error::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e.to_string()),
    }
}

/// Writes the panel in the three-file input schema. Returns the paths written
/// (prices, characteristics, rf).
pub fn write_panel_csv(panel: &AssetPanel, dir: impl AsRef<Path>) -> Result<[PathBuf; 3]> {
    let dir = dir.as_ref();
    let paths = [
        dir.join("prices.csv"),
        dir.join("characteristics.csv"),
        dir.join("rf.csv"),
    ];
    let bk = panel.characteristic_index(BVTP);
    let mk = panel.characteristic_index(MV);

    let mut w = create(&paths[0])?;
    w.write_record(["date", "asset_id", "price"]).map_err(io_err(&paths[0]))?;
    for (t, d) in panel.dates().iter().enumerate() {
        for (i, id) in panel.asset_ids().iter().enumerate() {
            let date = d.format(DATE_FORMAT).to_string();
            w.write_record([date.as_str(), id, &fmt_opt(panel.price(t, i))])
                .map_err(io_err(&paths[0]))?;
        }
    }
    w.flush().map_err(|source| Error::Io {
        path: paths[0].clone(),
        source,
    })?;

    let mut w = create(&paths[1])?;
    w.write_record(["date", "asset_id", "bvtp", "mv"]).map_err(io_err(&paths[1]))?;
    for (t, d) in panel.dates().iter().enumerate() {
        for (i, id) in panel.asset_ids().iter().enumerate() {
            let b = bk.and_then(|k| panel.characteristic(t, i, k));
            let m = mk.and_then(|k| panel.characteristic(t, i, k));
            let date = d.format(DATE_FORMAT).to_string();
            w.write_record([date.as_str(), id, &fmt_opt(b), &fmt_opt(m)])
                .map_err(io_err(&paths[1]))?;
        }
    }
    w.flush().map_err(|source| Error::Io {
        path: paths[1].clone(),
        source,
    })?;

    let mut w = create(&paths[2])?;
    w.write_record(["date", "rf"]).map_err(io_err(&paths[2]))?;
    for (t, d) in panel.dates().iter().enumerate() {
        let date = d.format(DATE_FORMAT).to_string();
        w.write_record([date, format!("{}", panel.rf(t))])
            .map_err(io_err(&paths[2]))?;
    }
    w.flush().map_err(|source| Error::Io {
        path: paths[2].clone(),
        source,
    })?;
    Ok(paths)
}

// ---------------------------------------------------------------------------
// Features

/// Adds MOMS (13-week) and MOML (52-week) cumulative returns through `t`.
pub fn compute_momentum(panel: &AssetPanel) -> Result<AssetPanel> {
    compute_momentum_with(panel, SHORT_MOMENTUM_WEEKS, LONG_MOMENTUM_WEEKS)
}

pub fn compute_momentum_with(panel: &AssetPanel, short: usize, long: usize) -> Result<AssetPanel> {
    if short == 0 || long == 0 {
        return Err(Error::invalid("momentum windows must be positive"));
    }
    let moms = cumulative_returns(panel, short);
    let moml = cumulative_returns(panel, long);
    panel
        .with_characteristic(MOMS, moms)?
        .with_characteristic(MOML, moml)
}

fn cumulative_returns(panel: &AssetPanel, window: usize) -> DMatrix<f64> {
    let (t_len, n) = (panel.n_periods(), panel.n_assets());
    let mut out = DMatrix::from_element(t_len, n, f64::NAN);
    for i in 0..n {
        // length of the run of consecutive available returns ending at t
        let mut run = 0usize;
        for t in 0..t_len {
            run = if panel.is_available(t, i) { run + 1 } else { 0 };
            if run >= window {
                let growth: f64 = ((t + 1 - window)..=t)
                    .map(|s| 1.0 + panel.returns[(s, i)])
                    .product();
                out[(t, i)] = growth - 1.0;
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Factor-mimicking portfolios

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FactorConfig {
    /// Fraction of the cross-section in the small leg of the size sort.
    pub size_split: f64,
    /// Fraction in each tail leg of the book-to-price sort.
    pub value_quantile: f64,
    pub min_leg: usize,
}

impl Default for FactorConfig {
    fn default() -> Self {
        Self {
            size_split: 0.5,
            value_quantile: 0.3,
            min_leg: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Breakpoints {
    pub size: f64,
    pub value_low: f64,
    pub value_high: f64,
}

/// Asset indices on each leg of one period's sorts.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorLegs {
    pub small: Vec<usize>,
    pub big: Vec<usize>,
    pub growth: Vec<usize>,
    pub value: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FactorSeries {
    names: Vec<String>,
    returns: DMatrix<f64>,
    breakpoints: Vec<Option<Breakpoints>>,
}

impl FactorSeries {
    /// Factor returns with NaN rows for unavailable periods.
    pub fn from_matrix(names: Vec<String>, returns: DMatrix<f64>) -> Result<Self> {
        if names.len() != returns.ncols() {
            return Err(Error::Dimension("factor names and columns differ".into()));
        }
        let breakpoints = vec![None; returns.nrows()];
        Ok(Self {
            names,
            returns,
            breakpoints,
        })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn n_factors(&self) -> usize {
        self.returns.ncols()
    }

    pub fn n_periods(&self) -> usize {
        self.returns.nrows()
    }

    pub fn is_available(&self, t: usize) -> bool {
        self.returns.row(t).iter().all(|v| v.is_finite())
    }

    pub fn row(&self, t: usize) -> Option<DVector<f64>> {
        self.is_available(t)
            .then(|| self.returns.row(t).transpose())
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.returns
    }

    pub fn breakpoints(&self, t: usize) -> Option<Breakpoints> {
        self.breakpoints[t]
    }

    pub fn truncated(&self, len: usize) -> Self {
        let len = len.min(self.n_periods());
        Self {
            names: self.names.clone(),
            returns: self.returns.rows(0, len).into_owned(),
            breakpoints: self.breakpoints[..len].to_vec(),
        }
    }
}

fn sorted_by(values: &[(usize, f64)]) -> Vec<(usize, f64)> {
    let mut v = values.to_vec();
    // stable sort: ties keep ascending asset id
    v.sort_by(|a, b| a.1.total_cmp(&b.1));
    v
}

fn leg_mean(legs: &[usize], returns: &[Option<f64>]) -> f64 {
    legs.iter().map(|&i| returns[i].unwrap()).sum::<f64>() / legs.len() as f64
}

/// SMB and HML for one period from formation-date market values and
/// book-to-price and the period's returns. Only assets with all three
/// present are sorted. `None` when a leg would fall below `min_leg`.
pub fn factor_returns_at(
    mv: &[Option<f64>],
    bvtp: &[Option<f64>],
    returns: &[Option<f64>],
    cfg: &FactorConfig,
) -> Option<(DVector<f64>, Breakpoints, FactorLegs)> {
    let eligible: Vec<usize> = (0..returns.len())
        .filter(|&i| returns[i].is_some() && mv[i].is_some() && bvtp[i].is_some())
        .collect();
    let n = eligible.len();
    let min_leg = cfg.min_leg.max(1);
    let n_small = (cfg.size_split * n as f64).floor() as usize;
    let n_tail = ((cfg.value_quantile * n as f64).floor() as usize).max(min_leg);
    if n < 2 || n_small < min_leg || n - n_small < min_leg || 2 * n_tail > n {
        return None;
    }

    let by_size = sorted_by(&eligible.iter().map(|&i| (i, mv[i].unwrap())).collect::<Vec<_>>());
    let by_value =
        sorted_by(&eligible.iter().map(|&i| (i, bvtp[i].unwrap())).collect::<Vec<_>>());
    let legs = FactorLegs {
        small: by_size[..n_small].iter().map(|p| p.0).collect(),
        big: by_size[n_small..].iter().map(|p| p.0).collect(),
        growth: by_value[..n_tail].iter().map(|p| p.0).collect(),
        value: by_value[n - n_tail..].iter().map(|p| p.0).collect(),
    };
    let smb = leg_mean(&legs.small, returns) - leg_mean(&legs.big, returns);
    let hml = leg_mean(&legs.value, returns) - leg_mean(&legs.growth, returns);
    let breaks = Breakpoints {
        size: 0.5 * (by_size[n_small - 1].1 + by_size[n_small].1),
        value_low: by_value[n_tail - 1].1,
        value_high: by_value[n - n_tail].1,
    };
    Some((DVector::from_vec(vec![smb, hml]), breaks, legs))
}

/// SMB/HML series. Sorts for period `t` use characteristics observed at
/// `t - 1` and are re-formed every period over assets available at `t`.
pub fn build_factor_portfolios(panel: &AssetPanel, cfg: &FactorConfig) -> Result<FactorSeries> {
    let mk = panel
        .characteristic_index(MV)
        .ok_or_else(|| Error::InsufficientData("panel has no MV characteristic".into()))?;
    let bk = panel
        .characteristic_index(BVTP)
        .ok_or_else(|| Error::InsufficientData("panel has no BVTP characteristic".into()))?;
    let (t_len, n) = (panel.n_periods(), panel.n_assets());
    let mut returns = DMatrix::from_element(t_len, 2, f64::NAN);
    let mut breakpoints = vec![None; t_len];
    for t in 1..t_len {
        let mv: Vec<Option<f64>> = (0..n).map(|i| panel.characteristic(t - 1, i, mk)).collect();
        let bv: Vec<Option<f64>> = (0..n).map(|i| panel.characteristic(t - 1, i, bk)).collect();
        let r: Vec<Option<f64>> = (0..n).map(|i| panel.simple_return(t, i)).collect();
        if let Some((f, b, _)) = factor_returns_at(&mv, &bv, &r, cfg) {
            returns.set_row(t, &f.transpose());
            breakpoints[t] = Some(b);
        }
    }
    Ok(FactorSeries {
        names: vec!["SMB".into(), "HML".into()],
        returns,
        breakpoints,
    })
}

/// Up to `size` largest assets by market value among those available at `t`,
/// as ascending indices. Ties go to the lower asset index.
pub fn investible_universe(panel: &AssetPanel, t: usize, size: usize) -> Result<Vec<usize>> {
    if t >= panel.n_periods() {
        return Err(Error::OutOfRange {
            index: t,
            len: panel.n_periods(),
        });
    }
    let mk = panel
        .characteristic_index(MV)
        .ok_or_else(|| Error::InsufficientData("panel has no MV characteristic".into()))?;
    let mut cands: Vec<(usize, f64)> = (0..panel.n_assets())
        .filter(|&i| panel.is_available(t, i))
        .filter_map(|i| panel.characteristic(t, i, mk).map(|m| (i, m)))
        .collect();
    cands.sort_by(|a, b| b.1.total_cmp(&a.1));
    let mut out: Vec<usize> = cands.into_iter().take(size).map(|c| c.0).collect();
    out.sort_unstable();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::io::Write;

    fn d(s: &str) -> NaiveDate {
        NaiveDate::parse_from_str(s, DATE_FORMAT).unwrap()
    }

    fn panel_from(prices: DMatrix<f64>, rf: f64) -> AssetPanel {
        let (t, n) = prices.shape();
        let mv = DMatrix::from_fn(t, n, |_, i| (n - i) as f64 * 10.0);
        let bv = DMatrix::from_fn(t, n, |_, i| i as f64);
        AssetPanel::from_prices(
            weekly_dates(d("2001-01-05"), t),
            (0..n).map(|i| format!("A{i}")).collect(),
            prices,
            vec![rf; t],
            vec![(BVTP.into(), bv), (MV.into(), mv)],
            None,
        )
        .unwrap()
    }

    #[test]
    fn price_gap_masks_both_adjacent_returns() {
        let mut prices = DMatrix::from_element(9, 3, 100.0);
        prices[(5, 1)] = f64::NAN;
        let p = panel_from(prices, 0.0);
        assert!(!p.is_available(5, 1));
        assert!(!p.is_available(6, 1));
        assert!(p.is_available(7, 1));
        assert!(p.is_available(5, 0) && p.is_available(6, 2));
        assert!((0..3).all(|i| !p.is_available(0, i)));
    }

    #[test]
    fn constant_prices_zero_returns() {
        let p = panel_from(DMatrix::from_element(6, 2, 50.0), 0.0);
        for t in 1..6 {
            for i in 0..2 {
                assert_eq!(p.simple_return(t, i), Some(0.0));
            }
        }
    }

    #[test]
    fn return_and_excess_arithmetic() {
        let prices = DMatrix::from_row_slice(2, 1, &[100.0, 110.0]);
        let p = panel_from(prices, 0.01);
        assert_relative_eq!(p.simple_return(1, 0).unwrap(), 0.10, epsilon = 1e-12);
        assert_relative_eq!(p.excess_return(1, 0), 0.09, epsilon = 1e-12);
    }

    #[test]
    fn masked_read_is_counted() {
        let p = panel_from(DMatrix::from_element(3, 1, 1.0), 0.0);
        assert_eq!(p.masked_reads(), 0);
        assert!(p.excess_return(0, 0).is_nan());
        assert_eq!(p.masked_reads(), 1);
        let (row, mask) = p.excess_row(0);
        assert_eq!(row[0], 0.0);
        assert!(!mask[0]);
        assert_eq!(p.masked_reads(), 1);
    }

    #[test]
    fn momentum_compounds_weekly_returns() {
        let prices = DMatrix::from_fn(60, 1, |t, _| 100.0 * 1.01f64.powi(t as i32));
        let p = compute_momentum(&panel_from(prices, 0.0)).unwrap();
        let k = p.characteristic_index(MOMS).unwrap();
        assert!(p.characteristic(12, 0, k).is_none());
        assert_relative_eq!(
            p.characteristic(13, 0, k).unwrap(),
            1.01f64.powi(13) - 1.0,
            epsilon = 1e-12
        );
        let l = p.characteristic_index(MOML).unwrap();
        assert!(p.characteristic(51, 0, l).is_none());
        assert_relative_eq!(
            p.characteristic(52, 0, l).unwrap(),
            1.01f64.powi(52) - 1.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn momentum_zero_for_flat_prices() {
        let p = compute_momentum(&panel_from(DMatrix::from_element(60, 2, 7.0), 0.0)).unwrap();
        assert_eq!(p.characteristic_by_name(55, 1, MOMS), Some(0.0));
        assert_eq!(p.characteristic_by_name(55, 1, MOML), Some(0.0));
    }

    #[test]
    fn momentum_gap_propagates() {
        let mut prices = DMatrix::from_element(40, 1, 100.0);
        prices[(20, 0)] = f64::NAN;
        let p = compute_momentum(&panel_from(prices, 0.0)).unwrap();
        for t in 20..34 {
            assert!(p.characteristic_by_name(t, 0, MOMS).is_none(), "t={t}");
        }
        assert!(p.characteristic_by_name(34, 0, MOMS).is_some());
    }

    #[test]
    fn momentum_matches_price_ratio() {
        let prices = DMatrix::from_fn(80, 3, |t, i| {
            100.0 * (1.0 + 0.3 * ((t * (i + 2)) as f64 * 0.37).sin()) + t as f64
        });
        let p = compute_momentum(&panel_from(prices.clone(), 0.001)).unwrap();
        for t in 13..80 {
            for i in 0..3 {
                let m = p.characteristic_by_name(t, i, MOMS).unwrap();
                assert!((m - (prices[(t, i)] / prices[(t - 13, i)] - 1.0)).abs() < 1e-12);
            }
        }
    }

    fn some(v: &[f64]) -> Vec<Option<f64>> {
        v.iter().map(|&x| Some(x)).collect()
    }

    #[test]
    fn smb_hand_arithmetic() {
        // assets 0,1 small; 2,3 big
        let mv = some(&[1.0, 2.0, 10.0, 20.0]);
        let bv = some(&[0.5, 0.6, 0.7, 0.8]);
        let r = some(&[0.02, 0.04, 0.00, 0.02]);
        let (f, _, legs) = factor_returns_at(&mv, &bv, &r, &FactorConfig::default()).unwrap();
        assert_eq!(legs.small, vec![0, 1]);
        assert_relative_eq!(f[0], 0.02, epsilon = 1e-15);
        // 30% of 4 -> one asset per tail: value=3 (0.02), growth=0 (0.02)
        assert_relative_eq!(f[1], 0.0, epsilon = 1e-15);
    }

    #[test]
    fn identical_assets_give_zero_factors() {
        let mv = some(&[5.0; 6]);
        let bv = some(&[1.0; 6]);
        let r = some(&[0.013; 6]);
        let (f, _, legs) = factor_returns_at(&mv, &bv, &r, &FactorConfig::default()).unwrap();
        assert_eq!(legs.small, vec![0, 1, 2]);
        assert_eq!(legs.growth, vec![0]);
        assert_eq!(legs.value, vec![5]);
        assert_eq!(f[0], 0.0);
        assert_eq!(f[1], 0.0);
    }

    #[test]
    fn legs_partition_available_assets() {
        let mv = vec![Some(3.0), None, Some(1.0), Some(4.0), Some(1.5), Some(9.0), Some(2.0)];
        let bv = some(&[0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7]);
        let r = vec![Some(0.0), Some(0.1), None, Some(0.0), Some(0.0), Some(0.0), Some(0.0)];
        let (_, _, legs) = factor_returns_at(&mv, &bv, &r, &FactorConfig::default()).unwrap();
        let mut all: Vec<usize> = legs.small.iter().chain(&legs.big).copied().collect();
        all.sort_unstable();
        assert_eq!(all, vec![0, 3, 4, 5, 6]);
        let w: f64 = legs.small.iter().map(|_| 1.0 / legs.small.len() as f64).sum();
        assert_relative_eq!(w, 1.0, epsilon = 1e-15);
    }

    #[test]
    fn single_asset_period_has_no_factor_return() {
        assert!(factor_returns_at(&some(&[1.0]), &some(&[1.0]), &some(&[0.1]), &FactorConfig::default())
            .is_none());
        let mut prices = DMatrix::from_element(4, 3, 10.0);
        prices[(2, 1)] = f64::NAN;
        prices[(2, 2)] = f64::NAN;
        let fs = build_factor_portfolios(&panel_from(prices, 0.0), &FactorConfig::default()).unwrap();
        assert!(!fs.is_available(0));
        assert!(fs.is_available(1));
        assert!(!fs.is_available(2));
    }

    #[test]
    fn universe_ranks_by_market_value() {
        let t = 3;
        let mv = DMatrix::from_fn(t, 5, |_, i| [5.0, 4.0, 3.0, 2.0, 1.0][i]);
        let mut prices = DMatrix::from_element(t, 5, 1.0);
        let mk = |prices: DMatrix<f64>| {
            AssetPanel::from_prices(
                weekly_dates(d("2001-01-05"), t),
                (0..5).map(|i| format!("A{i}")).collect(),
                prices,
                vec![0.0; t],
                vec![(MV.into(), mv.clone())],
                None,
            )
            .unwrap()
        };
        let p = mk(prices.clone());
        assert_eq!(investible_universe(&p, 2, 3).unwrap(), vec![0, 1, 2]);
        assert_eq!(investible_universe(&p, 2, 100).unwrap(), vec![0, 1, 2, 3, 4]);
        prices[(2, 0)] = f64::NAN;
        let p = mk(prices);
        assert_eq!(investible_universe(&p, 2, 3).unwrap(), vec![1, 2, 3]);
        assert!(matches!(investible_universe(&p, 3, 3), Err(Error::OutOfRange { .. })));
    }

    fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
        let path = dir.join(name);
        std::fs::File::create(&path).unwrap().write_all(body.as_bytes()).unwrap();
        path
    }

    #[test]
    fn load_panel_from_csv() {
        let dir = tempfile::tempdir().unwrap();
        let rf = write(dir.path(), "rf.csv", "date,rf\n2020-01-03,0.001\n2020-01-10,0.001\n2020-01-17,0.001\n");
        let prices = write(
            dir.path(),
            "prices.csv",
            "date,asset_id,price\n2020-01-03,B,10\n2020-01-03,A,100\n2020-01-10,A,110\n2020-01-10,B,\n2020-01-17,A,121\n2020-01-17,B,12\n",
        );
        let chars = write(
            dir.path(),
            "characteristics.csv",
            "date,asset_id,bvtp,mv\n2020-01-03,A,0.5,1000\n2020-01-03,B,,50\n",
        );
        let p = load_panel(&prices, &chars, &rf).unwrap();
        assert_eq!(p.asset_ids(), &["A".to_string(), "B".to_string()]);
        assert_relative_eq!(p.simple_return(1, 0).unwrap(), 0.1, epsilon = 1e-12);
        assert_relative_eq!(p.excess_return(2, 0), 0.099, epsilon = 1e-12);
        assert!(!p.is_available(1, 1) && !p.is_available(2, 1));
        assert_eq!(p.characteristic_by_name(0, 1, BVTP), None);
        assert_eq!(p.characteristic_by_name(0, 1, MV), Some(50.0));
    }

    #[test]
    fn load_panel_errors() {
        let dir = tempfile::tempdir().unwrap();
        let rf = write(dir.path(), "rf.csv", "date,rf\n2020-01-03,0.001\n2020-01-10,0.001\n");
        let chars = write(dir.path(), "c.csv", "date,asset_id,bvtp,mv\n");
        let bad = write(dir.path(), "p1.csv", "date,asset_id,price\n2020-01-03,A,100\n2020-01-10,A,abc\n");
        match load_panel(&bad, &chars, &rf) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        let back = write(dir.path(), "p2.csv", "date,asset_id,price\n2020-01-10,A,100\n2020-01-03,A,90\n");
        assert!(matches!(load_panel(&back, &chars, &rf), Err(Error::NonMonotoneDates { line: 3, .. })));
        let rf_bad = write(dir.path(), "rf2.csv", "date,rf\n2020-01-10,0.001\n2020-01-03,0.001\n");
        assert!(matches!(load_panel(&back, &chars, &rf_bad), Err(Error::NonMonotoneDates { .. })));
        let missing = dir.path().join("nope.csv");
        match load_panel(&missing, &chars, &rf) {
            Err(Error::Io { path, .. }) => assert_eq!(path, missing),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn csv_roundtrip_preserves_panel() {
        let mut prices = DMatrix::from_fn(10, 3, |t, i| 50.0 + (t * (i + 1)) as f64);
        prices[(4, 2)] = f64::NAN;
        let p = panel_from(prices, 0.0005);
        let dir = tempfile::tempdir().unwrap();
        let [a, b, c] = write_panel_csv(&p, dir.path()).unwrap();
        let q = load_panel(a, b, c).unwrap();
        for t in 0..10 {
            for i in 0..3 {
                assert_eq!(p.simple_return(t, i), q.simple_return(t, i));
                assert_eq!(p.characteristic_by_name(t, i, MV), q.characteristic_by_name(t, i, MV));
            }
        }
    }
}
