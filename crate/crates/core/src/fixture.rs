//! Synthetic check-in cohort used by the bundled scenario.
//!
//! Users start around a few hotspots and walk a random-waypoint pattern whose
//! waypoints spread out over the day; a share of the users wanders off toward
//! a personal destination. Check-ins are reported at jittered, occasionally
//! skipped intervals and written in the `user_id,timestamp,lat,lon` schema.

use std::fmt::Write as _;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::mobility::{RawCheckin, WorldExtent};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureSpec {
    pub n_users: usize,
    pub n_slots: usize,
    pub slot_seconds: f64,
    /// Hotspot centres in local metres.
    pub hotspots: Vec<[f64; 2]>,
    /// Spread of the initial positions around the hotspot.
    pub start_spread: f64,
    /// Waypoint spread around the hotspot at the start and at the end of the day.
    pub spread_start: f64,
    pub spread_end: f64,
    /// Displacement of each hotspot's crowd centre once the migration is over.
    pub hotspot_drift: Vec<[f64; 2]>,
    /// Fraction of the day after which the crowds stop migrating.
    pub drift_end_fraction: f64,
    /// Fraction of users heading for a personal destination instead of their hotspot.
    pub leaver_fraction: f64,
    pub speed_range: [f64; 2],
    pub max_pause_seconds: f64,
    pub report_jitter_seconds: f64,
    pub skip_probability: f64,
    pub epoch_start: f64,
    pub seed: u64,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        Self {
            n_users: 50,
            n_slots: 432,
            slot_seconds: 200.0,
            hotspots: vec![[700.0, 800.0], [1300.0, 1200.0]],
            start_spread: 100.0,
            spread_start: 60.0,
            spread_end: 350.0,
            hotspot_drift: vec![[-600.0, -200.0], [500.0, 300.0]],
            drift_end_fraction: 0.6,
            leaver_fraction: 0.3,
            speed_range: [0.5, 1.2],
            max_pause_seconds: 600.0,
            report_jitter_seconds: 40.0,
            skip_probability: 0.15,
            epoch_start: 1_500_000_000.0,
            seed: 2017,
        }
    }
}

/// The study area the bundled fixture lives in: 2 km x 2 km near Oxford Street, London.
pub fn default_extent() -> WorldExtent {
    WorldExtent {
        x_max: 2000.0,
        y_max: 2000.0,
        origin_lat: 51.506,
        origin_lon: -0.158,
    }
}

const SIM_STEP: f64 = 10.0;

/// Generates check-ins for every user, in user order then time order.
pub fn synthetic_checkins(spec: &FixtureSpec, extent: &WorldExtent) -> Vec<RawCheckin> {
    let margin = 20.0;
    let keep_in = |p: [f64; 2]| {
        [
            p[0].clamp(margin, extent.x_max - margin),
            p[1].clamp(margin, extent.y_max - margin),
        ]
    };
    let duration = spec.n_slots as f64 * spec.slot_seconds;
    let mut out = Vec::new();
    for u in 0..spec.n_users {
        let mut r = rng::stream(spec.seed, "fixture-user", u as u64);
        let hotspot = spec.hotspots[u % spec.hotspots.len()];
        let drift = spec.hotspot_drift.get(u % spec.hotspots.len()).copied().unwrap_or([0.0, 0.0]);
        let unit = Normal::new(0.0, 1.0).expect("unit normal");
        let leaver = r.gen_bool(spec.leaver_fraction);
        let destination = keep_in([r.gen_range(0.0..extent.x_max), r.gen_range(0.0..extent.y_max)]);
        let speed = r.gen_range(spec.speed_range[0]..spec.speed_range[1]);

        let mut pos = keep_in([
            hotspot[0] + spec.start_spread * unit.sample(&mut r),
            hotspot[1] + spec.start_spread * unit.sample(&mut r),
        ]);
        let mut target = pos;
        let mut pause = 0.0;
        let mut t = 0.0;
        let mut next_report = r.gen_range(0.0..spec.report_jitter_seconds.max(1.0));
        // report before the window opens so the interpolated trace has no clamped head
        let mut reports = vec![(-spec.slot_seconds, pos)];
        while t <= duration + spec.slot_seconds {
            if t >= next_report {
                if !r.gen_bool(spec.skip_probability) {
                    reports.push((t, pos));
                }
                next_report += spec.slot_seconds + r.gen_range(-1.0..1.0) * spec.report_jitter_seconds;
            }
            if pause > 0.0 {
                pause -= SIM_STEP;
            } else {
                let dx = target[0] - pos[0];
                let dy = target[1] - pos[1];
                let dist = (dx * dx + dy * dy).sqrt();
                let step = speed * SIM_STEP;
                if dist <= step {
                    pos = target;
                    pause = r.gen_range(0.0..=spec.max_pause_seconds);
                    let frac = t / duration;
                    let spread = spec.spread_start + (spec.spread_end - spec.spread_start) * frac;
                    let centre = if leaver {
                        [
                            hotspot[0] + (destination[0] - hotspot[0]) * frac,
                            hotspot[1] + (destination[1] - hotspot[1]) * frac,
                        ]
                    } else {
                        let moved = (frac / spec.drift_end_fraction).min(1.0);
                        [hotspot[0] + drift[0] * moved, hotspot[1] + drift[1] * moved]
                    };
                    let offset = [unit.sample(&mut r), unit.sample(&mut r)];
                    target = keep_in([centre[0] + spread * offset[0], centre[1] + spread * offset[1]]);
                } else {
                    pos = [pos[0] + dx / dist * step, pos[1] + dy / dist * step];
                }
            }
            t += SIM_STEP;
        }
        for (ts, p) in reports {
            let (lat, lon) = extent.unproject(p[0], p[1]);
            out.push(RawCheckin {
                user_id: format!("u{u:03}"),
                timestamp: spec.epoch_start + ts,
                lat,
                lon,
            });
        }
    }
    out
}

/// Renders check-ins as CSV with a header row.
pub fn to_csv(checkins: &[RawCheckin]) -> String {
    let mut s = String::from("user_id,timestamp,lat,lon\n");
    for c in checkins {
        writeln!(s, "{},{:.1},{:.7},{:.7}", c.user_id, c.timestamp, c.lat, c.lon).expect("write to string");
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mobility::{build_traces, parse_checkins};

    #[test]
    fn fixture_round_trips_through_ingestion() {
        let spec = FixtureSpec {
            n_users: 6,
            n_slots: 24,
            ..FixtureSpec::default()
        };
        let ext = default_extent();
        let csv = to_csv(&synthetic_checkins(&spec, &ext));
        let cohort = parse_checkins(&csv, 4).unwrap();
        assert_eq!(cohort.len(), 6);
        let traces = build_traces(&cohort, &ext, Some(spec.epoch_start), spec.slot_seconds, spec.n_slots).unwrap();
        assert_eq!(traces.n_slots, 24);
        assert!(traces.users.iter().all(|u| !u.clamped));
    }

    #[test]
    fn fixture_is_deterministic() {
        let spec = FixtureSpec {
            n_users: 3,
            n_slots: 10,
            ..FixtureSpec::default()
        };
        let a = to_csv(&synthetic_checkins(&spec, &default_extent()));
        let b = to_csv(&synthetic_checkins(&spec, &default_extent()));
        assert_eq!(a, b);
    }
}
