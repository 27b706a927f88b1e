//! Trip-record ingestion onto a zone grid.
//!
//! Each grid cell belongs to at most one zone (the zone dominating that cell,
//! decided upstream). A trip's passengers are split equally among the cells of
//! its pickup zone and summed per interval of a daily time window.

use super::STDataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use chrono::{Duration, NaiveDate, NaiveDateTime, NaiveTime, Timelike};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::io::Read;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TripRecord {
    pub pickup_time: NaiveDateTime,
    pub zone_id: u32,
    pub passenger_count: u32,
}

/// Cell → zone assignment for an `h × w` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GridMapping {
    pub height: usize,
    pub width: usize,
    /// Row-major; `None` marks an empty cell.
    pub cells: Vec<Option<u32>>,
}

impl GridMapping {
    pub fn new(height: usize, width: usize, cells: Vec<Option<u32>>) -> Result<Self> {
        if height == 0 || width == 0 || cells.len() != height * width {
            return Err(Error::usage(format!(
                "mapping needs {height}x{width} cells, got {}",
                cells.len()
            )));
        }
        Ok(Self {
            height,
            width,
            cells,
        })
    }

    /// Row-major cell indices of each zone.
    pub fn zone_cells(&self) -> BTreeMap<u32, Vec<usize>> {
        let mut out: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, z) in self.cells.iter().enumerate() {
            if let Some(z) = z {
                out.entry(*z).or_default().push(i);
            }
        }
        out
    }
}

/// How intervals are laid out in the output tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FrameLayout {
    /// One single-channel frame per interval.
    #[default]
    Time,
    /// One frame per day with one channel per interval.
    Channels,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IngestConfig {
    pub first_day: NaiveDate,
    pub days: usize,
    pub period_start: NaiveTime,
    pub period_end: NaiveTime,
    pub interval_minutes: u32,
    pub layout: FrameLayout,
}

impl IngestConfig {
    fn intervals_per_day(&self) -> Result<usize> {
        let span = (self.period_end - self.period_start).num_minutes();
        if span <= 0 {
            return Err(Error::usage("daily period must end after it starts"));
        }
        if self.interval_minutes == 0 || span % self.interval_minutes as i64 != 0 {
            return Err(Error::usage(format!(
                "interval of {} minutes does not divide the {span}-minute period",
                self.interval_minutes
            )));
        }
        if self.days == 0 {
            return Err(Error::usage("ingestion needs at least one day"));
        }
        Ok((span / self.interval_minutes as i64) as usize)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IngestReport {
    pub dataset: STDataset,
    pub accepted: usize,
    pub accepted_passengers: u64,
    pub unknown_zone: usize,
    pub outside_window: usize,
    /// Average passengers per interval for every mapped zone.
    pub zone_demand: BTreeMap<u32, f64>,
}

pub fn ingest_trips(
    records: impl IntoIterator<Item = TripRecord>,
    mapping: &GridMapping,
    cfg: &IngestConfig,
) -> Result<IngestReport> {
    let per_day = cfg.intervals_per_day()?;
    let cells = mapping.height * mapping.width;
    let zone_cells = mapping.zone_cells();
    let total_intervals = cfg.days * per_day;
    // Interval-major accumulation: [day * per_day + interval, cell].
    let mut grid = vec![0.0; total_intervals * cells];
    let mut passengers_by_zone: BTreeMap<u32, u64> = zone_cells.keys().map(|&z| (z, 0)).collect();
    let (mut accepted, mut accepted_passengers, mut unknown_zone, mut outside_window) =
        (0, 0u64, 0, 0);

    for rec in records {
        let Some(owned) = zone_cells.get(&rec.zone_id) else {
            unknown_zone += 1;
            continue;
        };
        let day = (rec.pickup_time.date() - cfg.first_day).num_days();
        let time = rec.pickup_time.time();
        if day < 0 || day as usize >= cfg.days || time < cfg.period_start || time >= cfg.period_end
        {
            outside_window += 1;
            continue;
        }
        let minutes = (time - cfg.period_start).num_minutes() as usize;
        let slot = day as usize * per_day + minutes / cfg.interval_minutes as usize;
        let share = rec.passenger_count as f64 / owned.len() as f64;
        for &cell in owned {
            grid[slot * cells + cell] += share;
        }
        accepted += 1;
        accepted_passengers += rec.passenger_count as u64;
        *passengers_by_zone
            .get_mut(&rec.zone_id)
            .expect("mapped zone") += rec.passenger_count as u64;
    }

    let day_start =
        |d: usize| (cfg.first_day + Duration::days(d as i64)).and_time(cfg.period_start);
    let step = Duration::minutes(cfg.interval_minutes as i64);
    let (frames, timestamps, interval) = match cfg.layout {
        FrameLayout::Time => {
            let ts = (0..total_intervals)
                .map(|s| day_start(s / per_day) + step * (s % per_day) as i32)
                .collect();
            let t = Tensor::new(
                vec![total_intervals, 1, mapping.height, mapping.width],
                grid,
            )?;
            (t, ts, cfg.interval_minutes)
        }
        FrameLayout::Channels => {
            // Already [day, interval, cell] in memory, i.e. [day, c, h, w].
            let ts = (0..cfg.days).map(day_start).collect();
            let t = Tensor::new(vec![cfg.days, per_day, mapping.height, mapping.width], grid)?;
            (t, ts, 24 * 60)
        }
    };
    let zone_demand = passengers_by_zone
        .into_iter()
        .map(|(z, p)| (z, p as f64 / total_intervals as f64))
        .collect();
    Ok(IngestReport {
        dataset: STDataset::new(frames, timestamps, interval)?,
        accepted,
        accepted_passengers,
        unknown_zone,
        outside_window,
        zone_demand,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PixelationReport {
    /// Mean over zones of `|area share − cell share| × demand`.
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    /// Population standard deviation of the per-zone weighted errors.
    pub std: f64,
    pub per_zone: BTreeMap<u32, f64>,
}

/// Discretization error of a mapping: for every zone, the absolute gap
/// between its share of total area and its share of grid cells, weighted by
/// the zone's demand.
pub fn pixelation_error(
    mapping: &GridMapping,
    zone_areas: &BTreeMap<u32, f64>,
    demand_weights: &BTreeMap<u32, f64>,
) -> Result<PixelationReport> {
    let zone_cells = mapping.zone_cells();
    let area_keys: BTreeSet<_> = zone_areas.keys().collect();
    let weight_keys: BTreeSet<_> = demand_weights.keys().collect();
    if area_keys != weight_keys {
        let missing: Vec<_> = area_keys.symmetric_difference(&weight_keys).collect();
        return Err(Error::usage(format!(
            "zones missing from areas or weights: {missing:?}"
        )));
    }
    if let Some(z) = zone_cells.keys().find(|z| !zone_areas.contains_key(z)) {
        return Err(Error::usage(format!("mapped zone {z} has no area")));
    }
    if zone_areas.is_empty() {
        return Err(Error::usage("no zones to compare"));
    }
    if zone_areas.values().any(|&a| a.is_nan() || a <= 0.0)
        || demand_weights.values().any(|&w| w.is_nan() || w < 0.0)
    {
        return Err(Error::usage(
            "zone areas must be positive and demand weights nonnegative",
        ));
    }
    let total_area: f64 = zone_areas.values().sum();
    let total_cells: usize = zone_cells.values().map(Vec::len).sum();
    if total_cells == 0 {
        return Err(Error::usage("mapping assigns no cells to any zone"));
    }
    let per_zone: BTreeMap<u32, f64> = zone_areas
        .iter()
        .map(|(&z, &area)| {
            let cell_share = zone_cells.get(&z).map_or(0, Vec::len) as f64 / total_cells as f64;
            (
                z,
                (area / total_area - cell_share).abs() * demand_weights[&z],
            )
        })
        .collect();
    let n = per_zone.len() as f64;
    let mean = per_zone.values().sum::<f64>() / n;
    let std = (per_zone.values().map(|e| (e - mean).powi(2)).sum::<f64>() / n).sqrt();
    Ok(PixelationReport {
        mean,
        min: per_zone.values().copied().fold(f64::INFINITY, f64::min),
        max: per_zone.values().copied().fold(f64::NEG_INFINITY, f64::max),
        std,
        per_zone,
    })
}

fn csv_reader(input: impl Read) -> csv::Reader<impl Read> {
    csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(input)
}

fn column_indices<R: Read>(rdr: &mut csv::Reader<R>, wanted: &[&str]) -> Result<Vec<usize>> {
    let headers = rdr
        .headers()
        .map_err(|e| Error::Parse {
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    wanted
        .iter()
        .map(|name| {
            headers
                .iter()
                .position(|h| h == *name)
                .ok_or_else(|| Error::usage(format!("missing column `{name}`")))
        })
        .collect()
}

fn records<R: Read>(
    rdr: &mut csv::Reader<R>,
    cols: &[usize],
    mut row: impl FnMut(&[&str]) -> std::result::Result<(), String>,
) -> Result<()> {
    for (i, rec) in rdr.records().enumerate() {
        let line = rec
            .as_ref()
            .ok()
            .and_then(|r| r.position())
            .map_or(i as u64 + 2, |p| p.line());
        let rec = rec.map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        let fields: Vec<&str> = cols.iter().map(|&c| rec.get(c).unwrap_or("")).collect();
        row(&fields).map_err(|message| Error::Parse { line, message })?;
    }
    Ok(())
}

fn parse_timestamp(s: &str) -> std::result::Result<NaiveDateTime, String> {
    const FORMATS: [&str; 4] = [
        "%Y-%m-%dT%H:%M:%S",
        "%Y-%m-%d %H:%M:%S",
        "%Y-%m-%dT%H:%M",
        "%Y-%m-%d %H:%M",
    ];
    FORMATS
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(s, f).ok())
        .map(|t| t.with_second(0).expect("zero seconds are valid"))
        .ok_or_else(|| format!("bad pickup_datetime {s:?}"))
}

/// Reads `pickup_datetime,zone_id,passenger_count` rows.
pub fn read_trips(input: impl Read) -> Result<Vec<TripRecord>> {
    let mut rdr = csv_reader(input);
    let cols = column_indices(&mut rdr, &["pickup_datetime", "zone_id", "passenger_count"])?;
    let mut out = Vec::new();
    records(&mut rdr, &cols, |f| {
        out.push(TripRecord {
            pickup_time: parse_timestamp(f[0])?,
            zone_id: f[1]
                .parse()
                .map_err(|_| format!("bad zone_id {:?}", f[1]))?,
            passenger_count: f[2]
                .parse()
                .map_err(|_| format!("bad passenger_count {:?}", f[2]))?,
        });
        Ok(())
    })?;
    Ok(out)
}

/// Reads `row,col,zone_id` rows; the grid spans the largest row/col seen.
/// An empty `zone_id` marks an empty cell, as does omitting the cell.
pub fn read_mapping(input: impl Read) -> Result<GridMapping> {
    let mut rdr = csv_reader(input);
    let cols = column_indices(&mut rdr, &["row", "col", "zone_id"])?;
    let mut entries = Vec::new();
    records(&mut rdr, &cols, |f| {
        let row: usize = f[0].parse().map_err(|_| format!("bad row {:?}", f[0]))?;
        let col: usize = f[1].parse().map_err(|_| format!("bad col {:?}", f[1]))?;
        let zone = if f[2].is_empty() {
            None
        } else {
            Some(
                f[2].parse::<u32>()
                    .map_err(|_| format!("bad zone_id {:?}", f[2]))?,
            )
        };
        entries.push((row, col, zone));
        Ok(())
    })?;
    let height = entries.iter().map(|e| e.0 + 1).max().unwrap_or(0);
    let width = entries.iter().map(|e| e.1 + 1).max().unwrap_or(0);
    if height == 0 {
        return Err(Error::usage("mapping file has no cells"));
    }
    let mut cells = vec![None; height * width];
    for (row, col, zone) in entries {
        let slot = &mut cells[row * width + col];
        if slot.is_some() && zone.is_some() && *slot != zone {
            return Err(Error::usage(format!(
                "cell ({row},{col}) assigned to two zones"
            )));
        }
        *slot = slot.or(zone);
    }
    GridMapping::new(height, width, cells)
}

/// Reads `zone_id,area` rows.
pub fn read_zone_areas(input: impl Read) -> Result<BTreeMap<u32, f64>> {
    let mut rdr = csv_reader(input);
    let cols = column_indices(&mut rdr, &["zone_id", "area"])?;
    let mut out = BTreeMap::new();
    records(&mut rdr, &cols, |f| {
        let zone: u32 = f[0]
            .parse()
            .map_err(|_| format!("bad zone_id {:?}", f[0]))?;
        let area: f64 = f[1].parse().map_err(|_| format!("bad area {:?}", f[1]))?;
        out.insert(zone, area);
        Ok(())
    })?;
    Ok(out)
}
