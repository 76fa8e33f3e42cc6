//! Panel data model and ingestion: journey-event aggregation into
//! region-month compliance rates, CSV loading, boundary adjustment and the
//! covariate correlation screen.
//!
//! A journey is compliant ("latched") when a seat-belt latch event occurs at
//! or shortly after its first engine-on; the per-cell compliance rate is the
//! latched share of observed journeys.

use std::collections::{BTreeMap, HashMap};
use std::io::Read;
use std::path::Path;

use chrono::{DateTime, Datelike};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Driver-event tags carried by the telematics feed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    EngineOn,
    EngineOff,
    SeatbeltLatch,
    Other,
}

impl EventKind {
    /// Unknown tags map to `Other`; they are valid events, just not ones the
    /// latch rule cares about.
    pub fn parse(s: &str) -> EventKind {
        match s {
            "engine_on" => EventKind::EngineOn,
            "engine_off" => EventKind::EngineOff,
            "seatbelt_latch" => EventKind::SeatbeltLatch,
            _ => EventKind::Other,
        }
    }
}

/// One raw telematics event.
#[derive(Debug, Clone, PartialEq)]
pub struct JourneyEvent {
    pub journey_id: String,
    pub region_id: String,
    pub timestamp_ms: i64,
    pub kind: EventKind,
}

/// Counts produced by the ingest pass, serialized as the ingest report.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct IngestReport {
    pub n_events: u64,
    pub n_malformed_records: u64,
    pub n_journeys: u64,
    pub n_journeys_no_engine_on: u64,
    pub n_cells: u64,
    pub warnings: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub correlation_screen: Option<CorrelationScreen>,
}

/// Pairwise Pearson correlations between covariates, with |r| over the
/// threshold flagged. The screen reports; it never drops columns.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorrelationScreen {
    pub threshold: f64,
    pub pairs: Vec<CorrelationPair>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorrelationPair {
    pub a: String,
    pub b: String,
    pub r: f64,
    pub flagged: bool,
}

/// Aggregates a journey-event stream into per-(region, month) latch counts.
///
/// Rules: a journey belongs to the region and calendar month of its first
/// engine-on; it is latched when a seat-belt latch occurs in the window
/// `[engine_on, engine_on + latch_window_s]`. Journeys with no engine-on are
/// dropped and tallied in the report. Events within a journey are sorted by
/// timestamp first, so input order does not matter.
pub fn aggregate_journeys(
    events: &[JourneyEvent],
    latch_window_s: f64,
) -> Result<(BTreeMap<(String, u32), (u64, u64)>, IngestReport)> {
    if !(latch_window_s > 0.0) {
        return Err(Error::Validation(format!(
            "latch window must be positive, got {latch_window_s}"
        )));
    }
    let mut report = IngestReport { n_events: events.len() as u64, ..Default::default() };
    if events.is_empty() {
        report.warnings.push("empty event stream: no journeys to aggregate".into());
        return Ok((BTreeMap::new(), report));
    }

    let mut by_journey: HashMap<&str, Vec<&JourneyEvent>> = HashMap::new();
    for ev in events {
        by_journey.entry(&ev.journey_id).or_default().push(ev);
    }
    report.n_journeys = by_journey.len() as u64;

    let window_ms = (latch_window_s * 1000.0).round() as i64;
    let mut cells: BTreeMap<(String, u32), (u64, u64)> = BTreeMap::new();
    for evs in by_journey.values_mut() {
        evs.sort_by_key(|e| e.timestamp_ms);
        let Some(on) = evs.iter().find(|e| e.kind == EventKind::EngineOn) else {
            report.n_journeys_no_engine_on += 1;
            continue;
        };
        let t0 = on.timestamp_ms;
        let latched = evs.iter().any(|e| {
            e.kind == EventKind::SeatbeltLatch && e.timestamp_ms >= t0 && e.timestamp_ms <= t0 + window_ms
        });
        let month = month_of_timestamp(t0)?;
        let cell = cells.entry((on.region_id.clone(), month)).or_insert((0, 0));
        cell.1 += 1;
        if latched {
            cell.0 += 1;
        }
    }
    report.n_cells = cells.len() as u64;
    Ok((cells, report))
}

/// Calendar month (1-12) of a millisecond UTC timestamp. The panel is a
/// single-year product, so the year is dropped.
fn month_of_timestamp(ts_ms: i64) -> Result<u32> {
    DateTime::from_timestamp_millis(ts_ms)
        .map(|dt| dt.month())
        .ok_or_else(|| Error::Validation(format!("timestamp {ts_ms} ms out of range")))
}

/// Reads the journey-event CSV (`journey_id,region_id,timestamp_ms,kind`).
/// Malformed rows are skipped and counted.
pub fn read_events_csv<R: Read>(reader: R) -> Result<(Vec<JourneyEvent>, u64)> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
    expect_headers(&mut rdr, &["journey_id", "region_id", "timestamp_ms", "kind"])?;
    let mut events = Vec::new();
    let mut malformed = 0u64;
    for record in rdr.records() {
        let record = record?;
        let parsed = (|| -> Option<JourneyEvent> {
            let journey_id = record.get(0)?.trim();
            let region_id = record.get(1)?.trim();
            let ts: i64 = record.get(2)?.trim().parse().ok()?;
            let kind = EventKind::parse(record.get(3)?.trim());
            if journey_id.is_empty() || region_id.is_empty() {
                return None;
            }
            Some(JourneyEvent {
                journey_id: journey_id.to_string(),
                region_id: region_id.to_string(),
                timestamp_ms: ts,
                kind,
            })
        })();
        match parsed {
            Some(ev) => events.push(ev),
            None => malformed += 1,
        }
    }
    Ok((events, malformed))
}

pub fn read_events_file<P: AsRef<Path>>(path: P) -> Result<(Vec<JourneyEvent>, u64)> {
    read_events_csv(std::fs::File::open(path)?)
}

/// Writes the compliance CSV (`region_id,month,rate,n_journeys`) from
/// aggregated latch counts. Rates are raw shares; boundary adjustment is a
/// load-time concern.
pub fn write_compliance_csv<W: std::io::Write>(
    cells: &BTreeMap<(String, u32), (u64, u64)>,
    out: W,
) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    wtr.write_record(["region_id", "month", "rate", "n_journeys"])?;
    for ((region, month), &(latched, total)) in cells {
        let rate = if total > 0 { latched as f64 / total as f64 } else { 0.0 };
        wtr.write_record([region.as_str(), &month.to_string(), &format!("{rate}"), &total.to_string()])?;
    }
    wtr.flush()?;
    Ok(())
}

/// Compresses a raw rate in `[0,1]` to the open interval:
/// `(rate * (n - 1) + 0.5) / n`. Strictly monotone in the rate and within
/// `0.5/n` of it. Returns `None` for `n = 0` (a missing observation).
pub fn boundary_adjust(raw_rate: f64, n: u64) -> Option<f64> {
    if n == 0 {
        return None;
    }
    let n = n as f64;
    Some((raw_rate * (n - 1.0) + 0.5) / n)
}

/// When load-time boundary adjustment applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryMode {
    /// Adjust only rates that sit on 0 or 1; interior rates pass through.
    #[default]
    AtBounds,
    /// Apply the compression to every rate.
    Always,
}

/// Per-covariate transform applied at load time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalingMode {
    #[default]
    None,
    /// Subtract the per-covariate mean.
    Center,
    /// Subtract the mean and divide by the standard deviation.
    Standardize,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct LoadOptions {
    pub scaling: ScalingMode,
    pub boundary: BoundaryMode,
    /// |r| at or above this flags a covariate pair in the screen.
    pub correlation_threshold: Option<f64>,
}

/// One observed panel cell.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelObservation {
    pub region_index: usize,
    pub month_index: usize,
    /// Model-ready rate, strictly inside (0,1).
    pub rate: f64,
    /// Rate as found in the input, before boundary adjustment.
    pub raw_rate: f64,
    pub n_journeys: u64,
    pub covariates: Vec<f64>,
}

/// Record of the centering/scale applied to one covariate; identity is
/// `(0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CovariateScaling {
    pub center: f64,
    pub scale: f64,
}

/// Dense region x month grid of optional observations plus covariate
/// metadata. Regions are ordered by sorted `region_id`; months are the
/// contiguous label range found in the data. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct Panel {
    n_regions: usize,
    n_months: usize,
    observations: Vec<Option<PanelObservation>>,
    pub covariate_names: Vec<String>,
    pub covariate_scaling: Vec<CovariateScaling>,
    pub region_ids: Vec<String>,
    /// Original month labels, `month_labels[t]` for month index `t`.
    pub month_labels: Vec<u32>,
}

impl Panel {
    pub fn n_regions(&self) -> usize {
        self.n_regions
    }

    pub fn n_months(&self) -> usize {
        self.n_months
    }

    pub fn n_covariates(&self) -> usize {
        self.covariate_names.len()
    }

    pub fn obs(&self, region: usize, month: usize) -> Option<&PanelObservation> {
        self.observations[region * self.n_months + month].as_ref()
    }

    /// All observed cells in (region, month) order.
    pub fn observed(&self) -> impl Iterator<Item = &PanelObservation> {
        self.observations.iter().flatten()
    }

    pub fn n_observed(&self) -> usize {
        self.observations.iter().filter(|o| o.is_some()).count()
    }

    pub fn grid_len(&self) -> usize {
        self.observations.len()
    }

    /// SHA-256 over a canonical byte encoding of the panel contents; used to
    /// tie fit artifacts to their input data.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.n_regions as u64).to_le_bytes());
        h.update((self.n_months as u64).to_le_bytes());
        for id in &self.region_ids {
            h.update(id.as_bytes());
            h.update([0u8]);
        }
        for name in &self.covariate_names {
            h.update(name.as_bytes());
            h.update([0u8]);
        }
        for s in &self.covariate_scaling {
            h.update(s.center.to_le_bytes());
            h.update(s.scale.to_le_bytes());
        }
        for m in &self.month_labels {
            h.update(m.to_le_bytes());
        }
        for cell in &self.observations {
            match cell {
                None => h.update([0u8]),
                Some(o) => {
                    h.update([1u8]);
                    h.update(o.rate.to_le_bytes());
                    h.update(o.raw_rate.to_le_bytes());
                    h.update(o.n_journeys.to_le_bytes());
                    for x in &o.covariates {
                        h.update(x.to_le_bytes());
                    }
                }
            }
        }
        let digest = h.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Writes the compliance and covariate CSVs that reproduce this panel
    /// under [`load_panel`] with the same options (raw rates and unscaled
    /// covariates are written).
    pub fn write_csvs<W1: std::io::Write, W2: std::io::Write>(
        &self,
        compliance_out: W1,
        covariates_out: W2,
    ) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(compliance_out);
        wtr.write_record(["region_id", "month", "rate", "n_journeys"])?;
        for i in 0..self.n_regions {
            for t in 0..self.n_months {
                if let Some(o) = self.obs(i, t) {
                    wtr.write_record([
                        self.region_ids[i].as_str(),
                        &self.month_labels[t].to_string(),
                        &format!("{}", o.raw_rate),
                        &o.n_journeys.to_string(),
                    ])?;
                }
            }
        }
        wtr.flush()?;

        let mut wtr = csv::Writer::from_writer(covariates_out);
        let mut header = vec!["region_id".to_string()];
        header.extend(self.covariate_names.iter().cloned());
        wtr.write_record(&header)?;
        for i in 0..self.n_regions {
            // Covariates are constant over months; take them from any
            // observed cell, falling back to zeros for all-missing regions.
            let row = (0..self.n_months).find_map(|t| self.obs(i, t));
            let mut rec = vec![self.region_ids[i].clone()];
            for k in 0..self.n_covariates() {
                let scaled = row.map(|o| o.covariates[k]).unwrap_or(0.0);
                let s = self.covariate_scaling[k];
                rec.push(format!("{}", scaled * s.scale + s.center));
            }
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Loads a panel from the compliance CSV and an optional covariate CSV.
///
/// Hard errors: duplicate (region, month) rows, compliance regions missing
/// from the covariate table, rates outside `[0,1]`, months outside 1-12.
/// Rows with `n_journeys = 0` become missing cells. Regions are the sorted
/// covariate-table regions (or sorted compliance regions when no covariate
/// table is given); months span the contiguous label range in the data.
pub fn load_panel<R1: Read, R2: Read>(
    compliance: R1,
    covariates: Option<R2>,
    options: &LoadOptions,
) -> Result<(Panel, Option<CorrelationScreen>)> {
    // Compliance rows.
    let mut rdr = csv::Reader::from_reader(compliance);
    expect_headers(&mut rdr, &["region_id", "month", "rate", "n_journeys"])?;
    struct Row {
        region: String,
        month: u32,
        rate: f64,
        n: u64,
    }
    let mut rows = Vec::new();
    for (k, record) in rdr.records().enumerate() {
        let record = record?;
        let line = k + 2;
        let region = record
            .get(0)
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .ok_or_else(|| Error::Validation(format!("compliance line {line}: missing region_id")))?
            .to_string();
        let month: u32 = parse_field(&record, 1, "month", line)?;
        if !(1..=12).contains(&month) {
            return Err(Error::Validation(format!(
                "compliance line {line}: month {month} outside 1-12"
            )));
        }
        let rate: f64 = parse_field(&record, 2, "rate", line)?;
        if !(0.0..=1.0).contains(&rate) {
            return Err(Error::Validation(format!(
                "compliance line {line}: rate {rate} outside [0,1]"
            )));
        }
        let n: u64 = parse_field(&record, 3, "n_journeys", line)?;
        rows.push(Row { region, month, rate, n });
    }
    if rows.is_empty() {
        return Err(Error::Validation("compliance table has no data rows".into()));
    }

    // Covariate table (optional).
    let (covariate_names, region_covariates) = match covariates {
        Some(reader) => {
            let mut rdr = csv::Reader::from_reader(reader);
            let headers = rdr.headers()?.clone();
            if headers.get(0).map(str::trim) != Some("region_id") {
                return Err(Error::Validation(
                    "covariate table must start with a region_id column".into(),
                ));
            }
            let names: Vec<String> =
                headers.iter().skip(1).map(|s| s.trim().to_string()).collect();
            let mut map: BTreeMap<String, Vec<f64>> = BTreeMap::new();
            for (k, record) in rdr.records().enumerate() {
                let record = record?;
                let line = k + 2;
                let region = record
                    .get(0)
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .ok_or_else(|| {
                        Error::Validation(format!("covariate line {line}: missing region_id"))
                    })?
                    .to_string();
                if record.len() != names.len() + 1 {
                    return Err(Error::Validation(format!(
                        "covariate line {line}: expected {} fields, got {}",
                        names.len() + 1,
                        record.len()
                    )));
                }
                let mut xs = Vec::with_capacity(names.len());
                for (c, name) in names.iter().enumerate() {
                    let v: f64 = parse_field(&record, c + 1, name, line)?;
                    xs.push(v);
                }
                if map.insert(region.clone(), xs).is_some() {
                    return Err(Error::Validation(format!(
                        "covariate table: duplicate region {region:?}"
                    )));
                }
            }
            (names, map)
        }
        None => {
            let mut map = BTreeMap::new();
            for r in &rows {
                map.entry(r.region.clone()).or_insert_with(Vec::new);
            }
            (Vec::new(), map)
        }
    };

    for r in &rows {
        if !region_covariates.contains_key(&r.region) {
            return Err(Error::Validation(format!(
                "region {:?} appears in the compliance table but not in the covariate table",
                r.region
            )));
        }
    }

    let region_ids: Vec<String> = region_covariates.keys().cloned().collect();
    let region_index: HashMap<&str, usize> =
        region_ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();

    let min_month = rows.iter().map(|r| r.month).min().unwrap();
    let max_month = rows.iter().map(|r| r.month).max().unwrap();
    let n_months = (max_month - min_month + 1) as usize;
    let month_labels: Vec<u32> = (min_month..=max_month).collect();
    let n_regions = region_ids.len();

    // Covariate scaling (computed over regions, applied to every cell).
    let k_cov = covariate_names.len();
    let mut scaling = vec![CovariateScaling { center: 0.0, scale: 1.0 }; k_cov];
    if options.scaling != ScalingMode::None && k_cov > 0 {
        for k in 0..k_cov {
            let vals: Vec<f64> = region_covariates.values().map(|x| x[k]).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let scale = match options.scaling {
                ScalingMode::Standardize => {
                    let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
                        / (vals.len().max(2) - 1) as f64;
                    if var > 0.0 {
                        var.sqrt()
                    } else {
                        1.0
                    }
                }
                _ => 1.0,
            };
            scaling[k] = CovariateScaling { center: mean, scale };
        }
    }

    let mut observations: Vec<Option<PanelObservation>> = vec![None; n_regions * n_months];
    for r in &rows {
        let i = region_index[r.region.as_str()];
        let t = (r.month - min_month) as usize;
        let slot = &mut observations[i * n_months + t];
        if slot.is_some() {
            return Err(Error::Validation(format!(
                "duplicate (region, month) row: ({:?}, {})",
                r.region, r.month
            )));
        }
        let adjusted = match options.boundary {
            BoundaryMode::Always => boundary_adjust(r.rate, r.n),
            BoundaryMode::AtBounds => {
                if r.rate <= 0.0 || r.rate >= 1.0 {
                    boundary_adjust(r.rate, r.n)
                } else if r.n == 0 {
                    None
                } else {
                    Some(r.rate)
                }
            }
        };
        let Some(rate) = adjusted else {
            continue; // n_journeys = 0: missing observation
        };
        let xs: Vec<f64> = region_covariates[&r.region]
            .iter()
            .zip(&scaling)
            .map(|(x, s)| (x - s.center) / s.scale)
            .collect();
        *slot = Some(PanelObservation {
            region_index: i,
            month_index: t,
            rate,
            raw_rate: r.rate,
            n_journeys: r.n,
            covariates: xs,
        });
    }

    let screen = if k_cov >= 2 {
        let threshold = options.correlation_threshold.unwrap_or(0.8);
        let mut pairs = Vec::new();
        for a in 0..k_cov {
            for b in (a + 1)..k_cov {
                let xs: Vec<f64> = region_covariates.values().map(|x| x[a]).collect();
                let ys: Vec<f64> = region_covariates.values().map(|x| x[b]).collect();
                let r = pearson(&xs, &ys);
                pairs.push(CorrelationPair {
                    a: covariate_names[a].clone(),
                    b: covariate_names[b].clone(),
                    r,
                    flagged: r.abs() >= threshold,
                });
            }
        }
        Some(CorrelationScreen { threshold, pairs })
    } else {
        None
    };

    let panel = Panel {
        n_regions,
        n_months,
        observations,
        covariate_names,
        covariate_scaling: scaling,
        region_ids,
        month_labels,
    };
    Ok((panel, screen))
}

pub fn load_panel_files<P: AsRef<Path>>(
    compliance: P,
    covariates: Option<P>,
    options: &LoadOptions,
) -> Result<(Panel, Option<CorrelationScreen>)> {
    let comp = std::fs::File::open(compliance)?;
    match covariates {
        Some(p) => load_panel(comp, Some(std::fs::File::open(p)?), options),
        None => load_panel(comp, None::<std::fs::File>, options),
    }
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return 0.0;
    }
    sxy / (sxx * syy).sqrt()
}

fn parse_field<T: std::str::FromStr>(
    record: &csv::StringRecord,
    idx: usize,
    name: &str,
    line: usize,
) -> Result<T> {
    record
        .get(idx)
        .map(str::trim)
        .and_then(|s| s.parse::<T>().ok())
        .ok_or_else(|| Error::Validation(format!("line {line}: bad or missing field {name:?}")))
}

fn expect_headers<R: Read>(rdr: &mut csv::Reader<R>, expected: &[&str]) -> Result<()> {
    let headers = rdr.headers()?;
    let got: Vec<&str> = headers.iter().map(str::trim).collect();
    if got.len() < expected.len() || got[..expected.len()] != *expected {
        return Err(Error::Validation(format!(
            "bad CSV header: expected {expected:?}, got {got:?}"
        )));
    }
    Ok(())
}

/// Convenience for tests and the synthetic generator: builds a panel
/// directly from in-memory cells.
pub struct PanelBuilder {
    pub region_ids: Vec<String>,
    pub month_labels: Vec<u32>,
    pub covariate_names: Vec<String>,
    cells: Vec<Option<PanelObservation>>,
}

impl PanelBuilder {
    pub fn new(region_ids: Vec<String>, month_labels: Vec<u32>, covariate_names: Vec<String>) -> Self {
        let n = region_ids.len() * month_labels.len();
        Self { region_ids, month_labels, covariate_names, cells: vec![None; n] }
    }

    pub fn set(&mut self, region: usize, month: usize, rate: f64, n_journeys: u64, covariates: Vec<f64>) {
        let t_len = self.month_labels.len();
        self.cells[region * t_len + month] = Some(PanelObservation {
            region_index: region,
            month_index: month,
            rate,
            raw_rate: rate,
            n_journeys,
            covariates,
        });
    }

    pub fn build(self) -> Panel {
        let k = self.covariate_names.len();
        Panel {
            n_regions: self.region_ids.len(),
            n_months: self.month_labels.len(),
            observations: self.cells,
            covariate_names: self.covariate_names,
            covariate_scaling: vec![CovariateScaling { center: 0.0, scale: 1.0 }; k],
            region_ids: self.region_ids,
            month_labels: self.month_labels,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn ev(j: &str, r: &str, ts: i64, kind: EventKind) -> JourneyEvent {
        JourneyEvent { journey_id: j.into(), region_id: r.into(), timestamp_ms: ts, kind }
    }

    // 2022-03-15 00:00:00 UTC in ms.
    const T0: i64 = 1_647_302_400_000;

    #[test]
    fn three_journeys_two_latched() {
        let events = vec![
            ev("j1", "a", T0, EventKind::EngineOn),
            ev("j1", "a", T0 + 5_000, EventKind::SeatbeltLatch),
            ev("j2", "a", T0 + 100, EventKind::EngineOn),
            ev("j2", "a", T0 + 30_000, EventKind::SeatbeltLatch),
            ev("j3", "a", T0 + 200, EventKind::EngineOn),
            ev("j3", "a", T0 + 9_000, EventKind::EngineOff),
        ];
        let (cells, report) = aggregate_journeys(&events, 600.0).unwrap();
        assert_eq!(cells[&("a".to_string(), 3)], (2, 3));
        assert_eq!(report.n_journeys, 3);
        assert_eq!(report.n_journeys_no_engine_on, 0);
    }

    #[test]
    fn pre_ignition_latch_does_not_count() {
        let events = vec![
            ev("j1", "a", T0, EventKind::SeatbeltLatch),
            ev("j1", "a", T0 + 5_000, EventKind::EngineOn),
        ];
        let (cells, _) = aggregate_journeys(&events, 600.0).unwrap();
        assert_eq!(cells[&("a".to_string(), 3)], (0, 1));
    }

    #[test]
    fn latch_outside_window_does_not_count() {
        let events = vec![
            ev("j1", "a", T0, EventKind::EngineOn),
            ev("j1", "a", T0 + 601_000, EventKind::SeatbeltLatch),
        ];
        let (cells, _) = aggregate_journeys(&events, 600.0).unwrap();
        assert_eq!(cells[&("a".to_string(), 3)], (0, 1));
    }

    #[test]
    fn journey_without_engine_on_dropped() {
        let events = vec![
            ev("j1", "a", T0, EventKind::EngineOn),
            ev("jx", "a", T0, EventKind::SeatbeltLatch),
        ];
        let (cells, report) = aggregate_journeys(&events, 600.0).unwrap();
        assert_eq!(report.n_journeys_no_engine_on, 1);
        assert_eq!(cells[&("a".to_string(), 3)].1, 1);
    }

    #[test]
    fn journey_region_is_first_engine_on() {
        // Journey crosses from region a to b; it counts for a.
        let events = vec![
            ev("j1", "b", T0 + 50_000, EventKind::EngineOn),
            ev("j1", "a", T0, EventKind::EngineOn),
        ];
        let (cells, _) = aggregate_journeys(&events, 600.0).unwrap();
        assert!(cells.contains_key(&("a".to_string(), 3)));
        assert!(!cells.contains_key(&("b".to_string(), 3)));
    }

    #[test]
    fn empty_stream_warns() {
        let (cells, report) = aggregate_journeys(&[], 600.0).unwrap();
        assert!(cells.is_empty());
        assert!(!report.warnings.is_empty());
    }

    #[test]
    fn total_journeys_invariant() {
        let mut events = Vec::new();
        for j in 0..20 {
            let id = format!("j{j}");
            events.push(ev(&id, if j % 2 == 0 { "a" } else { "b" }, T0 + j * 1_000, EventKind::EngineOn));
            if j % 3 == 0 {
                events.push(ev(&id, "a", T0 + j * 1_000 + 10, EventKind::SeatbeltLatch));
            }
        }
        events.push(ev("stray", "c", T0, EventKind::EngineOff));
        let (cells, report) = aggregate_journeys(&events, 600.0).unwrap();
        let total: u64 = cells.values().map(|&(_, n)| n).sum();
        let latched: u64 = cells.values().map(|&(l, _)| l).sum();
        assert_eq!(total, 20);
        assert_eq!(report.n_journeys_no_engine_on, 1);
        assert!(latched <= total);
    }

    #[test]
    fn boundary_adjust_values() {
        assert_relative_eq!(boundary_adjust(1.0, 10).unwrap(), 0.95);
        assert_relative_eq!(boundary_adjust(0.0, 10).unwrap(), 0.05);
        assert_relative_eq!(boundary_adjust(0.5, 1000).unwrap(), 0.5);
        assert_eq!(boundary_adjust(0.3, 0), None);
    }

    fn compliance_csv() -> String {
        let mut s = String::from("region_id,month,rate,n_journeys\n");
        for m in 1..=3 {
            s.push_str(&format!("a,{m},0.6,100\n"));
            s.push_str(&format!("b,{m},0.7,50\n"));
        }
        s
    }

    const COVARIATES_CSV: &str = "region_id,income,vmt\na,3.5,2.0\nb,4.0,1.0\n";

    #[test]
    fn load_small_panel() {
        let (panel, screen) = load_panel(
            compliance_csv().as_bytes(),
            Some(COVARIATES_CSV.as_bytes()),
            &LoadOptions::default(),
        )
        .unwrap();
        assert_eq!(panel.n_regions(), 2);
        assert_eq!(panel.n_months(), 3);
        assert_eq!(panel.n_observed(), 6);
        assert_eq!(panel.covariate_names, vec!["income", "vmt"]);
        assert_eq!(panel.obs(0, 0).unwrap().covariates, vec![3.5, 2.0]);
        let screen = screen.unwrap();
        assert_eq!(screen.pairs.len(), 1);
        assert!(screen.pairs[0].flagged); // two points are perfectly correlated
    }

    #[test]
    fn single_cell_panel() {
        let (panel, _) = load_panel(
            "region_id,month,rate,n_journeys\nx,5,0.4,10\n".as_bytes(),
            None::<&[u8]>,
            &LoadOptions::default(),
        )
        .unwrap();
        assert_eq!((panel.n_regions(), panel.n_months()), (1, 1));
        assert_eq!(panel.month_labels, vec![5]);
    }

    #[test]
    fn rate_out_of_bounds_is_hard_error() {
        let err = load_panel(
            "region_id,month,rate,n_journeys\na,1,1.2,10\n".as_bytes(),
            None::<&[u8]>,
            &LoadOptions::default(),
        )
        .unwrap_err();
        assert!(err.to_string().contains("1.2"));
    }

    #[test]
    fn duplicate_row_is_hard_error() {
        let csv = "region_id,month,rate,n_journeys\na,1,0.5,10\na,1,0.6,10\n";
        assert!(load_panel(csv.as_bytes(), None::<&[u8]>, &LoadOptions::default()).is_err());
    }

    #[test]
    fn compliance_region_missing_from_covariates() {
        let err = load_panel(
            compliance_csv().as_bytes(),
            Some("region_id,income\na,3.5\n".as_bytes()),
            &LoadOptions::default(),
        )
        .unwrap_err();
        assert!(err.to_string().contains('b'));
    }

    #[test]
    fn boundary_rates_adjusted_at_load() {
        let csv = "region_id,month,rate,n_journeys\na,1,1.0,10\na,2,0.0,10\na,3,0.5,10\n";
        let (panel, _) =
            load_panel(csv.as_bytes(), None::<&[u8]>, &LoadOptions::default()).unwrap();
        assert_relative_eq!(panel.obs(0, 0).unwrap().rate, 0.95);
        assert_relative_eq!(panel.obs(0, 1).unwrap().rate, 0.05);
        assert_relative_eq!(panel.obs(0, 2).unwrap().rate, 0.5); // interior untouched
        assert_relative_eq!(panel.obs(0, 0).unwrap().raw_rate, 1.0);
    }

    #[test]
    fn zero_journeys_is_missing() {
        let csv = "region_id,month,rate,n_journeys\na,1,0.5,0\na,2,0.5,10\n";
        let (panel, _) =
            load_panel(csv.as_bytes(), None::<&[u8]>, &LoadOptions::default()).unwrap();
        assert!(panel.obs(0, 0).is_none());
        assert_eq!(panel.n_observed(), 1);
    }

    #[test]
    fn standardize_records_scaling() {
        let options =
            LoadOptions { scaling: ScalingMode::Standardize, ..Default::default() };
        let (panel, _) = load_panel(
            compliance_csv().as_bytes(),
            Some(COVARIATES_CSV.as_bytes()),
            &options,
        )
        .unwrap();
        assert_relative_eq!(panel.covariate_scaling[0].center, 3.75);
        let xs: Vec<f64> = (0..2).map(|i| panel.obs(i, 0).unwrap().covariates[0]).collect();
        assert_relative_eq!(xs.iter().sum::<f64>(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn csv_round_trip_is_identity() {
        for scaling in [ScalingMode::None, ScalingMode::Standardize] {
            let options = LoadOptions { scaling, ..Default::default() };
            let (panel, _) = load_panel(
                compliance_csv().as_bytes(),
                Some(COVARIATES_CSV.as_bytes()),
                &options,
            )
            .unwrap();
            let mut comp = Vec::new();
            let mut cov = Vec::new();
            panel.write_csvs(&mut comp, &mut cov).unwrap();
            let (reloaded, _) =
                load_panel(comp.as_slice(), Some(cov.as_slice()), &options).unwrap();
            assert_eq!(panel.checksum(), reloaded.checksum());
            assert_eq!(panel, reloaded);
        }
    }

    #[test]
    fn events_csv_skips_malformed() {
        let csv = "journey_id,region_id,timestamp_ms,kind\n\
                   j1,a,1000,engine_on\n\
                   ,a,1000,engine_on\n\
                   j2,a,notanumber,engine_on\n\
                   j3,b,2000,mystery_tag\n";
        let (events, malformed) = read_events_csv(csv.as_bytes()).unwrap();
        assert_eq!(events.len(), 2);
        assert_eq!(malformed, 2);
        assert_eq!(events[1].kind, EventKind::Other);
    }
}
