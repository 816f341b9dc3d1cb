//! Loading and shaping of hourly sensor counts.
//!
//! A [`PanelSeries`] is a `T x N` matrix of counts (one row per hour, one
//! column per sensor). Missing cells hold `NaN` and are flagged in the
//! missing mask. Everything downstream (clustering, graph construction,
//! training) consumes panels produced here.
//!
//! # On-disk panel format
//!
//! [`write_panel`] produces two files:
//!
//! * `<name>.csv`: header `timestamp,<sensor_id_1>,...,<sensor_id_N>`, one row
//!   per hour, timestamps in `%Y-%m-%dT%H:%M:%S`, missing cells left empty.
//! * `<name>.sensors.json`: `{"format_version": 1, "sensors": [{"sensor_id",
//!   "latitude", "longitude", "name"}, ...]}` in column order. Unknown
//!   coordinates are `null`.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use chrono::{NaiveDateTime, TimeDelta, Timelike};
use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Timestamp format used by every artifact this crate writes.
pub const TIMESTAMP_FORMAT: &str = "%Y-%m-%dT%H:%M:%S";

const PANEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorMeta {
    pub sensor_id: String,
    pub latitude: Option<f64>,
    pub longitude: Option<f64>,
    #[serde(default)]
    pub name: String,
}

impl SensorMeta {
    pub fn new(sensor_id: impl Into<String>) -> Self {
        Self {
            sensor_id: sensor_id.into(),
            latitude: None,
            longitude: None,
            name: String::new(),
        }
    }

    pub fn with_location(mut self, latitude: f64, longitude: f64) -> Self {
        self.latitude = Some(latitude);
        self.longitude = Some(longitude);
        self
    }

    /// Validated `(latitude, longitude)` in decimal degrees.
    pub fn coordinates(&self) -> Result<(f64, f64)> {
        match (self.latitude, self.longitude) {
            (Some(lat), Some(lon))
                if lat.is_finite()
                    && lon.is_finite()
                    && (-90.0..=90.0).contains(&lat)
                    && (-180.0..=180.0).contains(&lon) =>
            {
                Ok((lat, lon))
            }
            _ => Err(Error::InvalidCoordinates {
                sensor: self.sensor_id.clone(),
            }),
        }
    }
}

/// Hourly counts for `N` sensors over `T` timestamps.
#[derive(Debug, Clone)]
pub struct PanelSeries {
    values: Array2<f64>,
    timestamps: Vec<NaiveDateTime>,
    sensors: Vec<SensorMeta>,
    missing: Array2<bool>,
}

/// Missing cells compare equal to each other.
impl PartialEq for PanelSeries {
    fn eq(&self, other: &Self) -> bool {
        self.timestamps == other.timestamps
            && self.sensors == other.sensors
            && self.missing == other.missing
            && self.values.dim() == other.values.dim()
            && self
                .values
                .iter()
                .zip(other.values.iter())
                .all(|(a, b)| a == b || (a.is_nan() && b.is_nan()))
    }
}

impl PanelSeries {
    /// Builds a panel, checking its invariants.
    ///
    /// Timestamps must be strictly increasing and fall on whole hours. Panels
    /// produced by ingestion are contiguous; panels with abnormal weeks
    /// removed have gaps that are multiples of one hour.
    pub fn new(
        values: Array2<f64>,
        timestamps: Vec<NaiveDateTime>,
        sensors: Vec<SensorMeta>,
        missing: Array2<bool>,
    ) -> Result<Self> {
        let (t, n) = values.dim();
        if sensors.is_empty() {
            return Err(Error::NoSensors);
        }
        if timestamps.len() != t || sensors.len() != n || missing.dim() != (t, n) {
            return Err(Error::ShapeMismatch(format!(
                "values {t}x{n}, {} timestamps, {} sensors, mask {:?}",
                timestamps.len(),
                sensors.len(),
                missing.dim()
            )));
        }
        let mut seen = HashMap::new();
        for (i, s) in sensors.iter().enumerate() {
            if let Some(prev) = seen.insert(s.sensor_id.as_str(), i) {
                return Err(Error::InvalidArgument(format!(
                    "sensor id {} appears in columns {prev} and {i}",
                    s.sensor_id
                )));
            }
        }
        for ts in &timestamps {
            if ts.minute() != 0 || ts.second() != 0 || ts.nanosecond() != 0 {
                return Err(Error::InvalidArgument(format!(
                    "timestamp {ts} is not on a whole hour"
                )));
            }
        }
        for w in timestamps.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::InvalidArgument(format!(
                    "timestamps not strictly increasing at {}",
                    w[1]
                )));
            }
        }
        for ((idx, v), m) in values.indexed_iter().zip(missing.iter()) {
            if !m && !v.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "non-finite value at row {}, sensor {}",
                    idx.0, sensors[idx.1].sensor_id
                )));
            }
        }
        Ok(Self {
            values,
            timestamps,
            sensors,
            missing,
        })
    }

    /// A panel with no missing cells.
    pub fn complete(
        values: Array2<f64>,
        timestamps: Vec<NaiveDateTime>,
        sensors: Vec<SensorMeta>,
    ) -> Result<Self> {
        let missing = Array2::from_elem(values.dim(), false);
        Self::new(values, timestamps, sensors, missing)
    }

    pub fn values(&self) -> ArrayView2<'_, f64> {
        self.values.view()
    }

    pub fn timestamps(&self) -> &[NaiveDateTime] {
        &self.timestamps
    }

    pub fn sensors(&self) -> &[SensorMeta] {
        &self.sensors
    }

    pub fn sensor_ids(&self) -> Vec<String> {
        self.sensors.iter().map(|s| s.sensor_id.clone()).collect()
    }

    pub fn missing_mask(&self) -> ArrayView2<'_, bool> {
        self.missing.view()
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn num_sensors(&self) -> usize {
        self.sensors.len()
    }

    pub fn has_missing(&self) -> bool {
        self.missing.iter().any(|&m| m)
    }

    pub fn missing_count(&self, sensor: usize) -> usize {
        self.missing.column(sensor).iter().filter(|&&m| m).count()
    }

    pub fn sensor_index(&self, sensor_id: &str) -> Option<usize> {
        self.sensors.iter().position(|s| s.sensor_id == sensor_id)
    }

    /// True when consecutive timestamps are exactly one hour apart.
    pub fn is_contiguous(&self) -> bool {
        self.timestamps
            .windows(2)
            .all(|w| w[1] - w[0] == TimeDelta::hours(1))
    }

    /// Rows `range` as a new panel.
    pub fn slice_rows(&self, range: std::ops::Range<usize>) -> PanelSeries {
        PanelSeries {
            values: self.values.slice(s![range.clone(), ..]).to_owned(),
            timestamps: self.timestamps[range.clone()].to_vec(),
            sensors: self.sensors.clone(),
            missing: self.missing.slice(s![range, ..]).to_owned(),
        }
    }

    /// Keeps the listed rows, in the given order (which must be increasing).
    pub fn select_rows(&self, rows: &[usize]) -> Result<PanelSeries> {
        let values = self.values.select(Axis(0), rows);
        let missing = self.missing.select(Axis(0), rows);
        let timestamps = rows.iter().map(|&r| self.timestamps[r]).collect();
        PanelSeries::new(values, timestamps, self.sensors.clone(), missing)
    }

    pub fn select_columns(&self, cols: &[usize]) -> PanelSeries {
        PanelSeries {
            values: self.values.select(Axis(1), cols),
            timestamps: self.timestamps.clone(),
            sensors: cols.iter().map(|&c| self.sensors[c].clone()).collect(),
            missing: self.missing.select(Axis(1), cols),
        }
    }

    /// Replaces sensor metadata by id, keeping column order.
    pub fn attach_locations(&mut self, locations: &[SensorMeta]) {
        let by_id: HashMap<&str, &SensorMeta> = locations
            .iter()
            .map(|s| (s.sensor_id.as_str(), s))
            .collect();
        for sensor in &mut self.sensors {
            if let Some(loc) = by_id.get(sensor.sensor_id.as_str()) {
                sensor.latitude = loc.latitude;
                sensor.longitude = loc.longitude;
                if !loc.name.is_empty() {
                    sensor.name = loc.name.clone();
                }
            }
        }
    }

    /// Concatenates panels with identical sensors in time order.
    pub fn concat(parts: &[PanelSeries]) -> Result<PanelSeries> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("nothing to concatenate".into()))?;
        let values: Vec<_> = parts.iter().map(|p| p.values.view()).collect();
        let missing: Vec<_> = parts.iter().map(|p| p.missing.view()).collect();
        for p in parts {
            if p.sensors != first.sensors {
                return Err(Error::ShapeMismatch(
                    "concatenated panels have different sensors".into(),
                ));
            }
        }
        let values = ndarray::concatenate(Axis(0), &values)
            .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
        let missing = ndarray::concatenate(Axis(0), &missing)
            .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
        let timestamps = parts.iter().flat_map(|p| p.timestamps.clone()).collect();
        PanelSeries::new(values, timestamps, first.sensors.clone(), missing)
    }

    /// A copy with `values` replaced; the mask is kept.
    pub(crate) fn with_values(&self, values: Array2<f64>) -> PanelSeries {
        PanelSeries {
            values,
            timestamps: self.timestamps.clone(),
            sensors: self.sensors.clone(),
            missing: self.missing.clone(),
        }
    }
}

/// Column mapping for raw count CSV files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CountSchema {
    pub sensor_column: String,
    pub timestamp_column: String,
    pub count_column: String,
    pub timestamp_format: String,
    pub latitude_column: Option<String>,
    pub longitude_column: Option<String>,
    pub name_column: Option<String>,
}

impl Default for CountSchema {
    fn default() -> Self {
        Self {
            sensor_column: "sensor_id".into(),
            timestamp_column: "timestamp".into(),
            count_column: "count".into(),
            timestamp_format: TIMESTAMP_FORMAT.into(),
            latitude_column: None,
            longitude_column: None,
            name_column: None,
        }
    }
}

fn column_index(headers: &csv::StringRecord, name: &str) -> Result<usize> {
    headers
        .iter()
        .position(|h| h.trim() == name)
        .ok_or_else(|| Error::Parse {
            line: 1,
            message: format!("missing column {name:?}"),
        })
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| Error::io(path, e))
}

/// Reads long-format `(sensor, timestamp, count)` rows into a panel.
///
/// Columns are sorted by sensor id. The time axis covers every hour between
/// the earliest and latest timestamp; hours without a row are missing. Empty
/// count fields are treated as missing too.
pub fn ingest_csv(path: &Path, schema: &CountSchema) -> Result<PanelSeries> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(BufReader::new(open(path)?));
    let headers = reader.headers()?.clone();
    let sensor_col = column_index(&headers, &schema.sensor_column)?;
    let time_col = column_index(&headers, &schema.timestamp_column)?;
    let count_col = column_index(&headers, &schema.count_column)?;
    let lat_col = schema
        .latitude_column
        .as_deref()
        .map(|c| column_index(&headers, c))
        .transpose()?;
    let lon_col = schema
        .longitude_column
        .as_deref()
        .map(|c| column_index(&headers, c))
        .transpose()?;
    let name_col = schema
        .name_column
        .as_deref()
        .map(|c| column_index(&headers, c))
        .transpose()?;

    let mut meta: BTreeMap<String, SensorMeta> = BTreeMap::new();
    // (sensor, timestamp) -> (count, line)
    let mut observations: HashMap<(String, NaiveDateTime), (Option<f64>, u64)> = HashMap::new();

    for record in reader.records() {
        let record = record?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let field = |idx: usize| -> Result<&str> {
            record.get(idx).ok_or_else(|| Error::Parse {
                line,
                message: format!("row has {} fields, expected column {idx}", record.len()),
            })
        };
        let sensor = field(sensor_col)?.to_string();
        if sensor.is_empty() {
            return Err(Error::Parse {
                line,
                message: "empty sensor id".into(),
            });
        }
        let raw_time = field(time_col)?;
        let timestamp = NaiveDateTime::parse_from_str(raw_time, &schema.timestamp_format)
            .map_err(|e| Error::Parse {
                line,
                message: format!("bad timestamp {raw_time:?}: {e}"),
            })?;
        if timestamp.minute() != 0 || timestamp.second() != 0 {
            return Err(Error::Parse {
                line,
                message: format!("timestamp {raw_time:?} is not on a whole hour"),
            });
        }
        let raw_count = field(count_col)?;
        let count = if raw_count.is_empty() {
            None
        } else {
            let c: f64 = raw_count.parse().map_err(|_| Error::Parse {
                line,
                message: format!("bad count {raw_count:?}"),
            })?;
            if !c.is_finite() || c < 0.0 {
                return Err(Error::Parse {
                    line,
                    message: format!("count {raw_count:?} is not a nonnegative number"),
                });
            }
            Some(c)
        };

        let entry = meta
            .entry(sensor.clone())
            .or_insert_with(|| SensorMeta::new(sensor.clone()));
        let parse_coord = |idx: Option<usize>| -> Result<Option<f64>> {
            match idx {
                None => Ok(None),
                Some(i) => {
                    let raw = field(i)?;
                    if raw.is_empty() {
                        return Ok(None);
                    }
                    raw.parse().map(Some).map_err(|_| Error::Parse {
                        line,
                        message: format!("bad coordinate {raw:?}"),
                    })
                }
            }
        };
        if entry.latitude.is_none() {
            entry.latitude = parse_coord(lat_col)?;
        }
        if entry.longitude.is_none() {
            entry.longitude = parse_coord(lon_col)?;
        }
        if entry.name.is_empty() {
            if let Some(i) = name_col {
                entry.name = field(i)?.to_string();
            }
        }

        if let Some((_, first_line)) = observations.insert((sensor.clone(), timestamp), (count, line))
        {
            return Err(Error::DuplicateObservation {
                sensor,
                timestamp: timestamp.format(TIMESTAMP_FORMAT).to_string(),
                first_line,
                line,
            });
        }
    }

    if meta.is_empty() {
        return Err(Error::NoSensors);
    }
    let start = observations.keys().map(|(_, t)| *t).min().expect("nonempty");
    let end = observations.keys().map(|(_, t)| *t).max().expect("nonempty");
    let hours = (end - start).num_hours() as usize + 1;
    let timestamps: Vec<NaiveDateTime> = (0..hours)
        .map(|h| start + TimeDelta::hours(h as i64))
        .collect();
    let column: HashMap<&str, usize> = meta
        .keys()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();
    let n = meta.len();
    let mut values = Array2::from_elem((hours, n), f64::NAN);
    let mut missing = Array2::from_elem((hours, n), true);
    for ((sensor, ts), (count, _)) in &observations {
        if let Some(c) = count {
            let row = (*ts - start).num_hours() as usize;
            let col = column[sensor.as_str()];
            values[[row, col]] = *c;
            missing[[row, col]] = false;
        }
    }
    PanelSeries::new(values, timestamps, meta.into_values().collect(), missing)
}

/// Reads a `sensor_id,latitude,longitude[,name]` CSV.
pub fn load_sensor_locations(path: &Path) -> Result<Vec<SensorMeta>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(BufReader::new(open(path)?));
    let headers = reader.headers()?.clone();
    let id = column_index(&headers, "sensor_id")?;
    let lat = column_index(&headers, "latitude")?;
    let lon = column_index(&headers, "longitude")?;
    let name = headers.iter().position(|h| h == "name");
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let parse = |i: usize| -> Result<f64> {
            record
                .get(i)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Parse {
                    line,
                    message: "bad coordinate".into(),
                })
        };
        let mut meta = SensorMeta::new(record.get(id).unwrap_or_default())
            .with_location(parse(lat)?, parse(lon)?);
        meta.coordinates().map_err(|_| Error::Parse {
            line,
            message: format!("coordinates out of range for {}", meta.sensor_id),
        })?;
        if let Some(i) = name {
            meta.name = record.get(i).unwrap_or_default().to_string();
        }
        out.push(meta);
    }
    Ok(out)
}

/// Keeps the `n` sensors with the fewest missing cells.
///
/// Ties are broken by sensor id. Kept columns stay in their original order.
pub fn select_sensors(panel: &PanelSeries, n: usize) -> Result<PanelSeries> {
    let total = panel.num_sensors();
    if n > total {
        return Err(Error::InvalidArgument(format!(
            "cannot select {n} sensors from {total}"
        )));
    }
    if n == 0 {
        return Err(Error::NoSensors);
    }
    let mut ranked: Vec<usize> = (0..total).collect();
    ranked.sort_by(|&a, &b| {
        panel
            .missing_count(a)
            .cmp(&panel.missing_count(b))
            .then_with(|| panel.sensors[a].sensor_id.cmp(&panel.sensors[b].sensor_id))
    });
    let mut keep = ranked[..n].to_vec();
    keep.sort_unstable();
    Ok(panel.select_columns(&keep))
}

/// Fills each missing cell with the mean of the same sensor's observed values
/// at the same hour of day.
pub fn impute_missing(panel: &PanelSeries) -> Result<PanelSeries> {
    if !panel.has_missing() {
        return Ok(panel.clone());
    }
    let hours: Vec<usize> = panel.timestamps.iter().map(|t| t.hour() as usize).collect();
    let mut values = panel.values.clone();
    for (col, sensor) in panel.sensors.iter().enumerate() {
        let mut sums = [0.0f64; 24];
        let mut counts = [0usize; 24];
        for (row, &h) in hours.iter().enumerate() {
            if !panel.missing[[row, col]] {
                sums[h] += panel.values[[row, col]];
                counts[h] += 1;
            }
        }
        for (row, &h) in hours.iter().enumerate() {
            if panel.missing[[row, col]] {
                if counts[h] == 0 {
                    return Err(Error::EmptyImputationPool {
                        sensor: sensor.sensor_id.clone(),
                        hour: h as u32,
                    });
                }
                values[[row, col]] = sums[h] / counts[h] as f64;
            }
        }
    }
    PanelSeries::new(
        values,
        panel.timestamps.clone(),
        panel.sensors.clone(),
        Array2::from_elem(panel.missing.dim(), false),
    )
}

/// One supervised example: `l_in` observed rows followed by `l_out` targets.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSample {
    pub input: Array2<f64>,
    pub target: Array2<f64>,
    /// Row index of the last input row.
    pub anchor: usize,
}

/// Number of windows [`make_windows`] yields.
pub fn window_count(len: usize, l_in: usize, l_out: usize, step: usize) -> usize {
    if l_in == 0 || l_out == 0 || step == 0 || len < l_in + l_out {
        0
    } else {
        (len - l_in - l_out) / step + 1
    }
}

/// Row ranges of maximal runs of hourly-consecutive timestamps.
pub fn contiguous_segments(panel: &PanelSeries) -> Vec<std::ops::Range<usize>> {
    let ts = panel.timestamps();
    let mut out = Vec::new();
    let mut start = 0;
    for i in 1..=ts.len() {
        if i == ts.len() || ts[i] - ts[i - 1] != TimeDelta::hours(1) {
            if i > start {
                out.push(start..i);
            }
            start = i;
        }
    }
    out
}

/// Windows that never straddle a gap in the timestamps. Segments too short
/// for a single window are skipped; anchors index rows of `panel`.
pub fn make_segment_windows(
    panel: &PanelSeries,
    l_in: usize,
    l_out: usize,
    step: usize,
) -> Result<Vec<WindowSample>> {
    let mut out = Vec::new();
    for range in contiguous_segments(panel) {
        if range.len() < l_in + l_out {
            continue;
        }
        let offset = range.start;
        out.extend(
            make_windows(&panel.slice_rows(range), l_in, l_out, step)?
                .into_iter()
                .map(|mut w| {
                    w.anchor += offset;
                    w
                }),
        );
    }
    if out.is_empty() {
        return Err(Error::NotEnoughData(format!(
            "no contiguous segment holds a window of {l_in} + {l_out}"
        )));
    }
    Ok(out)
}

/// Sliding windows anchored at `l_in - 1, l_in - 1 + step, ...`.
pub fn make_windows(
    panel: &PanelSeries,
    l_in: usize,
    l_out: usize,
    step: usize,
) -> Result<Vec<WindowSample>> {
    if l_in == 0 || l_out == 0 || step == 0 {
        return Err(Error::InvalidArgument(
            "window lengths and step must be at least 1".into(),
        ));
    }
    let t = panel.len();
    if t < l_in + l_out {
        return Err(Error::NotEnoughData(format!(
            "{t} rows cannot hold a window of {l_in} + {l_out}"
        )));
    }
    if panel.has_missing() {
        return Err(Error::InvalidArgument(
            "panel has missing values; impute before windowing".into(),
        ));
    }
    let count = window_count(t, l_in, l_out, step);
    Ok((0..count)
        .map(|w| {
            let anchor = l_in - 1 + w * step;
            WindowSample {
                input: panel
                    .values
                    .slice(s![anchor + 1 - l_in..=anchor, ..])
                    .to_owned(),
                target: panel
                    .values
                    .slice(s![anchor + 1..anchor + 1 + l_out, ..])
                    .to_owned(),
                anchor,
            }
        })
        .collect())
}

/// Train / validation / test proportions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSplit", into = "RawSplit")]
pub struct SplitSpec {
    train: f64,
    val: f64,
    test: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSplit {
    train: f64,
    val: f64,
    test: f64,
}

impl TryFrom<RawSplit> for SplitSpec {
    type Error = Error;

    fn try_from(raw: RawSplit) -> Result<Self> {
        SplitSpec::new(raw.train, raw.val, raw.test)
    }
}

impl From<SplitSpec> for RawSplit {
    fn from(s: SplitSpec) -> Self {
        RawSplit {
            train: s.train,
            val: s.val,
            test: s.test,
        }
    }
}

impl Default for SplitSpec {
    /// 70 / 10 / 20.
    fn default() -> Self {
        Self {
            train: 0.7,
            val: 0.1,
            test: 0.2,
        }
    }
}

impl SplitSpec {
    pub fn new(train: f64, val: f64, test: f64) -> Result<Self> {
        let all = [train, val, test];
        if all.iter().any(|f| !f.is_finite() || *f <= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "split fractions must be positive, got {all:?}"
            )));
        }
        if ((train + val + test) - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "split fractions must sum to 1, got {}",
                train + val + test
            )));
        }
        Ok(Self { train, val, test })
    }

    pub fn train(&self) -> f64 {
        self.train
    }

    pub fn val(&self) -> f64 {
        self.val
    }

    pub fn test(&self) -> f64 {
        self.test
    }

    /// Segment boundaries `(floor(train * T), floor((train + val) * T))`.
    pub fn boundaries(&self, len: usize) -> (usize, usize) {
        // Small slack so that 0.7 + 0.1 does not floor 80 down to 79.
        let cut = |frac: f64| ((frac * len as f64) + 1e-9).floor() as usize;
        (cut(self.train).min(len), cut(self.train + self.val).min(len))
    }
}

/// Splits a panel into contiguous train, validation and test segments.
pub fn chronological_split(
    panel: &PanelSeries,
    spec: &SplitSpec,
) -> Result<(PanelSeries, PanelSeries, PanelSeries)> {
    let t = panel.len();
    let (a, b) = spec.boundaries(t);
    if a == 0 || b == a || b == t {
        return Err(Error::NotEnoughData(format!(
            "split of {t} rows yields an empty segment (boundaries {a}, {b})"
        )));
    }
    Ok((
        panel.slice_rows(0..a),
        panel.slice_rows(a..b),
        panel.slice_rows(b..t),
    ))
}

/// Per-sensor z-score statistics taken from a training segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub sensor_ids: Vec<String>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    /// Mean and population standard deviation of each observed column.
    pub fn fit(train: &PanelSeries) -> Result<Self> {
        let mut mean = Vec::with_capacity(train.num_sensors());
        let mut std = Vec::with_capacity(train.num_sensors());
        for (col, sensor) in train.sensors.iter().enumerate() {
            let observed: Vec<f64> = train
                .values
                .column(col)
                .iter()
                .zip(train.missing.column(col))
                .filter(|(_, &m)| !m)
                .map(|(v, _)| *v)
                .collect();
            if observed.is_empty() {
                return Err(Error::ZeroStd {
                    sensor: sensor.sensor_id.clone(),
                });
            }
            let m = observed.iter().sum::<f64>() / observed.len() as f64;
            let var = observed.iter().map(|v| (v - m).powi(2)).sum::<f64>() / observed.len() as f64;
            mean.push(m);
            std.push(var.sqrt());
        }
        Self::new(train.sensor_ids(), mean, std)
    }

    pub fn new(sensor_ids: Vec<String>, mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        if sensor_ids.len() != mean.len() || mean.len() != std.len() {
            return Err(Error::ShapeMismatch("normalizer lengths differ".into()));
        }
        for (id, s) in sensor_ids.iter().zip(&std) {
            if !(*s > 0.0) || !s.is_finite() {
                return Err(Error::ZeroStd { sensor: id.clone() });
            }
        }
        Ok(Self {
            sensor_ids,
            mean,
            std,
        })
    }

    fn check(&self, n: usize) -> Result<()> {
        if n != self.mean.len() {
            return Err(Error::ShapeMismatch(format!(
                "normalizer has {} sensors, data has {n}",
                self.mean.len()
            )));
        }
        Ok(())
    }

    pub fn normalize_array(&self, values: &Array2<f64>) -> Result<Array2<f64>> {
        self.check(values.ncols())?;
        let mean = Array1::from(self.mean.clone());
        let std = Array1::from(self.std.clone());
        Ok((values - &mean) / &std)
    }

    pub fn denormalize_array(&self, values: &Array2<f64>) -> Result<Array2<f64>> {
        self.check(values.ncols())?;
        let mean = Array1::from(self.mean.clone());
        let std = Array1::from(self.std.clone());
        Ok(values * &std + &mean)
    }

    pub fn normalize(&self, panel: &PanelSeries) -> Result<PanelSeries> {
        Ok(panel.with_values(self.normalize_array(&panel.values)?))
    }

    pub fn denormalize(&self, panel: &PanelSeries) -> Result<PanelSeries> {
        Ok(panel.with_values(self.denormalize_array(&panel.values)?))
    }
}

#[derive(Serialize, Deserialize)]
struct PanelSidecar {
    format_version: u32,
    sensors: Vec<SensorMeta>,
}

/// Path of the sensor metadata file that accompanies a panel CSV.
pub fn sidecar_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("sensors.json")
}

pub fn write_panel(panel: &PanelSeries, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut writer = csv::Writer::from_writer(BufWriter::new(file));
    let mut header = vec!["timestamp".to_string()];
    header.extend(panel.sensor_ids());
    writer.write_record(&header)?;
    for (row, ts) in panel.timestamps.iter().enumerate() {
        let mut record = vec![ts.format(TIMESTAMP_FORMAT).to_string()];
        for col in 0..panel.num_sensors() {
            if panel.missing[[row, col]] {
                record.push(String::new());
            } else {
                record.push(format!("{}", panel.values[[row, col]]));
            }
        }
        writer.write_record(&record)?;
    }
    writer.flush().map_err(|e| Error::io(path, e))?;

    let sidecar = sidecar_path(path);
    let file = File::create(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(
        &mut w,
        &PanelSidecar {
            format_version: PANEL_FORMAT_VERSION,
            sensors: panel.sensors.clone(),
        },
    )?;
    w.write_all(b"\n").map_err(|e| Error::io(&sidecar, e))?;
    Ok(())
}

/// Reads a panel written by [`write_panel`]. A missing sidecar yields
/// sensors without coordinates.
pub fn read_panel(path: &Path) -> Result<PanelSeries> {
    let mut reader = csv::ReaderBuilder::new().from_reader(BufReader::new(open(path)?));
    let headers = reader.headers()?.clone();
    if headers.get(0) != Some("timestamp") || headers.len() < 2 {
        return Err(Error::Parse {
            line: 1,
            message: "panel header must be timestamp followed by sensor ids".into(),
        });
    }
    let ids: Vec<String> = headers.iter().skip(1).map(str::to_string).collect();
    let n = ids.len();
    let mut timestamps = Vec::new();
    let mut flat = Vec::new();
    let mut mask = Vec::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        if record.len() != n + 1 {
            return Err(Error::Parse {
                line,
                message: format!("expected {} fields, found {}", n + 1, record.len()),
            });
        }
        let ts = NaiveDateTime::parse_from_str(&record[0], TIMESTAMP_FORMAT).map_err(|e| {
            Error::Parse {
                line,
                message: format!("bad timestamp {:?}: {e}", &record[0]),
            }
        })?;
        timestamps.push(ts);
        for field in record.iter().skip(1) {
            if field.is_empty() {
                flat.push(f64::NAN);
                mask.push(true);
            } else {
                flat.push(field.parse().map_err(|_| Error::Parse {
                    line,
                    message: format!("bad value {field:?}"),
                })?);
                mask.push(false);
            }
        }
    }
    let t = timestamps.len();
    let values = Array2::from_shape_vec((t, n), flat).expect("row lengths checked");
    let missing = Array2::from_shape_vec((t, n), mask).expect("row lengths checked");

    let sidecar = sidecar_path(path);
    let sensors = if sidecar.exists() {
        let file = open(&sidecar)?;
        let meta: PanelSidecar = serde_json::from_reader(BufReader::new(file))?;
        if meta.format_version != PANEL_FORMAT_VERSION {
            return Err(Error::InvalidArgument(format!(
                "unsupported panel format version {}",
                meta.format_version
            )));
        }
        let ok = meta.sensors.len() == n
            && meta.sensors.iter().zip(&ids).all(|(m, id)| &m.sensor_id == id);
        if !ok {
            return Err(Error::ShapeMismatch(
                "sensor sidecar does not match panel columns".into(),
            ));
        }
        meta.sensors
    } else {
        ids.into_iter().map(SensorMeta::new).collect()
    };
    PanelSeries::new(values, timestamps, sensors, missing)
}

#[cfg(test)]
pub(crate) mod test_support {
    use super::*;
    use chrono::NaiveDate;

    pub fn hour(h: i64) -> NaiveDateTime {
        NaiveDate::from_ymd_opt(2019, 4, 1)
            .unwrap()
            .and_hms_opt(0, 0, 0)
            .unwrap()
            + TimeDelta::hours(h)
    }

    pub fn panel_from(values: Array2<f64>) -> PanelSeries {
        let n = values.ncols();
        let ts = (0..values.nrows() as i64).map(hour).collect();
        let sensors = (0..n).map(|i| SensorMeta::new(format!("s{i}"))).collect();
        PanelSeries::complete(values, ts, sensors).unwrap()
    }
}
