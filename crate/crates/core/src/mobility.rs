//! GPS check-in ingestion and per-slot user traces.
//!
//! Raw check-ins (`user_id,timestamp,lat,lon`) are grouped per user, projected
//! into a local metric frame around the scenario origin and resampled onto a
//! uniform slot grid by piecewise-linear interpolation.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Mean Earth radius used by the equirectangular projection.
pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

/// Largest span (in either direction) the local projection accepts.
pub const MAX_PROJECTION_SPAN_M: f64 = 100_000.0;

/// Default slot length in seconds.
pub const DEFAULT_SLOT_SECONDS: f64 = 200.0;

/// Shortest trace that can be split into train and test parts.
pub const MIN_SPLIT_SLOTS: usize = 8;

#[derive(Debug, Error)]
pub enum MobilityError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {reason}")]
    MalformedRow { line: usize, reason: String },
    #[error("no user has at least {min_reports} check-ins")]
    EmptyCohort { min_reports: usize },
    #[error("user {user}: point ({x:.1}, {y:.1}) m lies outside the {x_max} x {y_max} m extent")]
    OutOfExtent {
        user: String,
        x: f64,
        y: f64,
        x_max: f64,
        y_max: f64,
    },
    #[error("user {user}: check-ins span {span:.0} m, beyond the {max:.0} m projection limit")]
    SpanTooLarge { user: String, span: f64, max: f64 },
    #[error("user {user}: a trace needs at least 2 check-ins, got {count}")]
    DegenerateTrace { user: String, count: usize },
    #[error("user {user}: duplicate timestamp {timestamp}")]
    DuplicateTimestamp { user: String, timestamp: f64 },
    #[error("trace of {n_slots} slots is too short to split (need at least {MIN_SPLIT_SLOTS})")]
    TooShort { n_slots: usize },
    #[error("invalid extent: {0}")]
    InvalidExtent(String),
    #[error("trace file: {0}")]
    TraceFormat(String),
}

pub type Result<T> = std::result::Result<T, MobilityError>;

/// One GPS report of one user.
#[derive(Debug, Clone, PartialEq)]
pub struct RawCheckin {
    pub user_id: String,
    /// Seconds since the Unix epoch.
    pub timestamp: f64,
    pub lat: f64,
    pub lon: f64,
}

/// A check-in after projection into the local frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalCheckin {
    pub timestamp: f64,
    pub x: f64,
    pub y: f64,
}

/// Rectangular study area `[0, x_max] x [0, y_max]` anchored at a WGS84 origin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorldExtent {
    pub x_max: f64,
    pub y_max: f64,
    pub origin_lat: f64,
    pub origin_lon: f64,
}

impl WorldExtent {
    pub fn validate(&self) -> Result<()> {
        if !(self.x_max > 0.0 && self.y_max > 0.0) {
            return Err(MobilityError::InvalidExtent(format!(
                "x_max and y_max must be positive, got {} and {}",
                self.x_max, self.y_max
            )));
        }
        if !(-90.0..=90.0).contains(&self.origin_lat) || !(-180.0..=180.0).contains(&self.origin_lon)
        {
            return Err(MobilityError::InvalidExtent(format!(
                "origin ({}, {}) is not a valid latitude/longitude",
                self.origin_lat, self.origin_lon
            )));
        }
        Ok(())
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        (0.0..=self.x_max).contains(&x) && (0.0..=self.y_max).contains(&y)
    }

    pub fn clamp(&self, x: f64, y: f64) -> [f64; 2] {
        [x.clamp(0.0, self.x_max), y.clamp(0.0, self.y_max)]
    }

    /// Equirectangular projection about the origin: `(lat, lon)` to metres.
    pub fn project(&self, lat: f64, lon: f64) -> [f64; 2] {
        let cos_lat = self.origin_lat.to_radians().cos();
        let x = EARTH_RADIUS_M * cos_lat * (lon - self.origin_lon).to_radians();
        let y = EARTH_RADIUS_M * (lat - self.origin_lat).to_radians();
        [x, y]
    }

    /// Inverse of [`WorldExtent::project`], returning `(lat, lon)` in degrees.
    pub fn unproject(&self, x: f64, y: f64) -> (f64, f64) {
        let cos_lat = self.origin_lat.to_radians().cos();
        let lat = self.origin_lat + (y / EARTH_RADIUS_M).to_degrees();
        let lon = self.origin_lon + (x / (EARTH_RADIUS_M * cos_lat)).to_degrees();
        (lat, lon)
    }
}

/// Per-user positions on the uniform slot grid.
#[derive(Debug, Clone, PartialEq)]
pub struct UserTrace {
    pub user_id: String,
    pub positions: Vec<[f64; 2]>,
    pub slot_seconds: f64,
    /// Set when at least one interpolated position had to be clamped into the extent.
    pub clamped: bool,
}

impl UserTrace {
    pub fn n_slots(&self) -> usize {
        self.positions.len()
    }
}

/// Reads a `user_id,timestamp,lat,lon` CSV and keeps users with at least
/// `min_reports` check-ins, each sorted by time.
pub fn ingest_checkins(path: &Path, min_reports: usize) -> Result<Vec<Vec<RawCheckin>>> {
    let text = fs::read_to_string(path).map_err(|source| MobilityError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_checkins(&text, min_reports)
}

/// Same as [`ingest_checkins`] but over CSV text.
pub fn parse_checkins(text: &str, min_reports: usize) -> Result<Vec<Vec<RawCheckin>>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());

    let headers = reader
        .headers()
        .map_err(|e| MobilityError::MalformedRow {
            line: 1,
            reason: e.to_string(),
        })?
        .clone();
    let expected = ["user_id", "timestamp", "lat", "lon"];
    if headers.len() != 4 || headers.iter().zip(expected).any(|(h, e)| h != e) {
        return Err(MobilityError::MalformedRow {
            line: 1,
            reason: format!("expected header `{}`", expected.join(",")),
        });
    }

    let mut by_user: BTreeMap<String, Vec<RawCheckin>> = BTreeMap::new();
    for (idx, record) in reader.records().enumerate() {
        // header is line 1
        let line = idx + 2;
        let record = record.map_err(|e| MobilityError::MalformedRow {
            line,
            reason: e.to_string(),
        })?;
        if record.len() != 4 {
            return Err(MobilityError::MalformedRow {
                line,
                reason: format!("expected 4 fields, found {}", record.len()),
            });
        }
        let field = |i: usize, name: &str| -> Result<f64> {
            record[i]
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| MobilityError::MalformedRow {
                    line,
                    reason: format!("invalid {name} `{}`", &record[i]),
                })
        };
        let user_id = record[0].to_string();
        if user_id.is_empty() {
            return Err(MobilityError::MalformedRow {
                line,
                reason: "empty user_id".into(),
            });
        }
        let timestamp = field(1, "timestamp")?;
        let lat = field(2, "lat")?;
        let lon = field(3, "lon")?;
        if !(-90.0..=90.0).contains(&lat) {
            return Err(MobilityError::MalformedRow {
                line,
                reason: format!("latitude {lat} outside [-90, 90]"),
            });
        }
        if !(-180.0..=180.0).contains(&lon) {
            return Err(MobilityError::MalformedRow {
                line,
                reason: format!("longitude {lon} outside [-180, 180]"),
            });
        }
        by_user.entry(user_id.clone()).or_default().push(RawCheckin {
            user_id,
            timestamp,
            lat,
            lon,
        });
    }

    let mut cohort = Vec::new();
    for (user, mut checkins) in by_user {
        if checkins.len() < min_reports {
            continue;
        }
        checkins.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
        if let Some(w) = checkins.windows(2).find(|w| w[0].timestamp == w[1].timestamp) {
            return Err(MobilityError::DuplicateTimestamp {
                user,
                timestamp: w[0].timestamp,
            });
        }
        cohort.push(checkins);
    }
    if cohort.is_empty() {
        return Err(MobilityError::EmptyCohort { min_reports });
    }
    Ok(cohort)
}

/// Projects one user's check-ins into the extent's metric frame.
pub fn project_to_local(checkins: &[RawCheckin], extent: &WorldExtent) -> Result<Vec<LocalCheckin>> {
    extent.validate()?;
    let local: Vec<LocalCheckin> = checkins
        .iter()
        .map(|c| {
            let [x, y] = extent.project(c.lat, c.lon);
            LocalCheckin {
                timestamp: c.timestamp,
                x,
                y,
            }
        })
        .collect();

    let user = checkins.first().map(|c| c.user_id.clone()).unwrap_or_default();
    if let Some(span) = span_of(&local) {
        if span > MAX_PROJECTION_SPAN_M {
            return Err(MobilityError::SpanTooLarge {
                user,
                span,
                max: MAX_PROJECTION_SPAN_M,
            });
        }
    }
    if let Some(p) = local.iter().find(|p| !extent.contains(p.x, p.y)) {
        return Err(MobilityError::OutOfExtent {
            user,
            x: p.x,
            y: p.y,
            x_max: extent.x_max,
            y_max: extent.y_max,
        });
    }
    Ok(local)
}

fn span_of(points: &[LocalCheckin]) -> Option<f64> {
    let first = points.first()?;
    let (mut x0, mut x1, mut y0, mut y1) = (first.x, first.x, first.y, first.y);
    for p in points {
        x0 = x0.min(p.x);
        x1 = x1.max(p.x);
        y0 = y0.min(p.y);
        y1 = y1.max(p.y);
    }
    Some((x1 - x0).max(y1 - y0))
}

/// Resamples check-ins onto `n_slots` instants `start + k * slot_seconds`.
///
/// Linear between check-ins, clamped to the first/last check-in outside their span.
pub fn interpolate_trace(
    user_id: &str,
    checkins: &[LocalCheckin],
    start: f64,
    slot_seconds: f64,
    n_slots: usize,
) -> Result<UserTrace> {
    if checkins.len() < 2 {
        return Err(MobilityError::DegenerateTrace {
            user: user_id.to_string(),
            count: checkins.len(),
        });
    }
    if let Some(w) = checkins.windows(2).find(|w| w[1].timestamp <= w[0].timestamp) {
        return Err(MobilityError::DuplicateTimestamp {
            user: user_id.to_string(),
            timestamp: w[1].timestamp,
        });
    }
    let positions = (0..n_slots)
        .map(|k| position_at(checkins, start + k as f64 * slot_seconds))
        .collect();
    Ok(UserTrace {
        user_id: user_id.to_string(),
        positions,
        slot_seconds,
        clamped: false,
    })
}

fn position_at(checkins: &[LocalCheckin], t: f64) -> [f64; 2] {
    let first = checkins[0];
    let last = checkins[checkins.len() - 1];
    if t <= first.timestamp {
        return [first.x, first.y];
    }
    if t >= last.timestamp {
        return [last.x, last.y];
    }
    // first index whose timestamp is > t; guaranteed in 1..len
    let hi = checkins.partition_point(|c| c.timestamp <= t);
    let a = checkins[hi - 1];
    let b = checkins[hi];
    if t == a.timestamp {
        return [a.x, a.y];
    }
    let w = (t - a.timestamp) / (b.timestamp - a.timestamp);
    [a.x + w * (b.x - a.x), a.y + w * (b.y - a.y)]
}

/// Clamps every position of the trace into the extent, flagging the trace if anything moved.
pub fn clamp_to_extent(trace: &mut UserTrace, extent: &WorldExtent) {
    for p in &mut trace.positions {
        let c = extent.clamp(p[0], p[1]);
        if c != *p {
            trace.clamped = true;
            *p = c;
        }
    }
}

/// Number of training slots for a trace of `n_slots`: `floor(0.75 * n_slots)`.
pub fn train_len(n_slots: usize) -> usize {
    n_slots * 3 / 4
}

/// Contiguous 75/25 split of a position sequence.
pub fn split_train_test<T>(positions: &[T]) -> Result<(&[T], &[T])> {
    if positions.len() < MIN_SPLIT_SLOTS {
        return Err(MobilityError::TooShort {
            n_slots: positions.len(),
        });
    }
    Ok(positions.split_at(train_len(positions.len())))
}

/// A cohort of traces sharing one slot grid.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceSet {
    pub slot_seconds: f64,
    pub n_slots: usize,
    pub users: Vec<UserTrace>,
}

#[derive(Serialize, Deserialize)]
struct TraceFile {
    slot_seconds: f64,
    n_slots: usize,
    users: Vec<TraceFileUser>,
}

#[derive(Serialize, Deserialize)]
struct TraceFileUser {
    id: String,
    xy: Vec<[f64; 2]>,
}

fn round3(v: f64) -> f64 {
    (v * 1000.0).round() / 1000.0
}

impl TraceSet {
    pub fn new(slot_seconds: f64, users: Vec<UserTrace>) -> Result<Self> {
        let n_slots = users.first().map(UserTrace::n_slots).unwrap_or(0);
        let set = Self {
            slot_seconds,
            n_slots,
            users,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        if self.users.is_empty() {
            return Err(MobilityError::TraceFormat("cohort has no users".into()));
        }
        if !(self.slot_seconds > 0.0) {
            return Err(MobilityError::TraceFormat(format!(
                "slot_seconds must be positive, got {}",
                self.slot_seconds
            )));
        }
        for u in &self.users {
            if u.positions.len() != self.n_slots {
                return Err(MobilityError::TraceFormat(format!(
                    "user {} has {} slots, expected {}",
                    u.user_id,
                    u.positions.len(),
                    self.n_slots
                )));
            }
            if u.positions.iter().flatten().any(|v| !v.is_finite()) {
                return Err(MobilityError::TraceFormat(format!(
                    "user {} has a non-finite position",
                    u.user_id
                )));
            }
        }
        Ok(())
    }

    /// Positions of every user at one slot.
    pub fn snapshot(&self, slot: usize) -> Vec<[f64; 2]> {
        self.users.iter().map(|u| u.positions[slot]).collect()
    }

    /// Serializes as `{slot_seconds, n_slots, users:[{id, xy}]}` with 3-decimal metres.
    pub fn to_json(&self) -> String {
        let file = TraceFile {
            slot_seconds: self.slot_seconds,
            n_slots: self.n_slots,
            users: self
                .users
                .iter()
                .map(|u| TraceFileUser {
                    id: u.user_id.clone(),
                    xy: u.positions.iter().map(|p| [round3(p[0]), round3(p[1])]).collect(),
                })
                .collect(),
        };
        serde_json::to_string_pretty(&file).expect("trace file serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: TraceFile =
            serde_json::from_str(text).map_err(|e| MobilityError::TraceFormat(e.to_string()))?;
        let set = Self {
            slot_seconds: file.slot_seconds,
            n_slots: file.n_slots,
            users: file
                .users
                .into_iter()
                .map(|u| UserTrace {
                    user_id: u.id,
                    positions: u.xy,
                    slot_seconds: file.slot_seconds,
                    clamped: false,
                })
                .collect(),
        };
        set.validate()?;
        Ok(set)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| MobilityError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }
}

/// Full ingestion: filter, project, interpolate and clamp a whole cohort.
///
/// The slot grid starts at `start` or, when `None`, at the cohort's earliest check-in.
pub fn build_traces(
    cohort: &[Vec<RawCheckin>],
    extent: &WorldExtent,
    start: Option<f64>,
    slot_seconds: f64,
    n_slots: usize,
) -> Result<TraceSet> {
    let start = start.unwrap_or_else(|| {
        cohort
            .iter()
            .filter_map(|c| c.first())
            .map(|c| c.timestamp)
            .fold(f64::INFINITY, f64::min)
    });
    let mut users = Vec::with_capacity(cohort.len());
    for checkins in cohort {
        let user = checkins.first().map(|c| c.user_id.as_str()).unwrap_or("");
        let local = project_to_local(checkins, extent)?;
        let mut trace = interpolate_trace(user, &local, start, slot_seconds, n_slots)?;
        clamp_to_extent(&mut trace, extent);
        if trace.clamped {
            log::warn!("user {user}: trace clamped to the study extent");
        }
        users.push(trace);
    }
    TraceSet::new(slot_seconds, users)
}
