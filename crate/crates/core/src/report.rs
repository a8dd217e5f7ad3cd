//! Run directory writers: `report.json`, `sum_rate.csv`, `trajectories.geojson`,
//! `learning_curve.csv`, plus `timing.json` for the non-reproducible wall-clock.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use serde_json::json;

use crate::marl::CurvePoint;
use crate::mobility::WorldExtent;
use crate::sim::{RunReport, SweepRow, Timing};

pub const REPORT_FILES: [&str; 4] = ["report.json", "sum_rate.csv", "trajectories.geojson", "learning_curve.csv"];

pub fn sum_rate_csv(report: &RunReport) -> String {
    let mut s = String::from("slot,time_s,sum_rate_bps\n");
    for (t, r) in report.sum_rate.iter().enumerate() {
        writeln!(s, "{t},{},{r}", t as f64 * report.slot_seconds).expect("write to string");
    }
    s
}

pub fn learning_curve_csv(curve: &[CurvePoint]) -> String {
    let mut s = String::from("trial,iteration,sum_rate_bps,cum_reward\n");
    for p in curve {
        writeln!(s, "{},{},{},{}", p.trial, p.iteration, p.metric, p.cum_reward).expect("write to string");
    }
    s
}

/// One LineString per UAV in WGS84 (lon, lat, altitude) with per-vertex power.
pub fn trajectories_geojson(report: &RunReport, extent: &WorldExtent) -> serde_json::Value {
    let features: Vec<serde_json::Value> = report
        .trajectories
        .iter()
        .enumerate()
        .map(|(n, row)| {
            let coords: Vec<[f64; 3]> = row
                .iter()
                .map(|u| {
                    let (lat, lon) = extent.unproject(u.x, u.y);
                    [lon, lat, u.h]
                })
                .collect();
            json!({
                "type": "Feature",
                "properties": {
                    "uav": n,
                    "controller": report.controller,
                    "slot_seconds": report.slot_seconds,
                    "power_w": row.iter().map(|u| u.p_total).collect::<Vec<_>>(),
                },
                "geometry": { "type": "LineString", "coordinates": coords },
            })
        })
        .collect();
    json!({ "type": "FeatureCollection", "features": features })
}

fn pretty(v: &impl serde::Serialize) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serialisable");
    s.push('\n');
    s
}

/// Writes the four report files into `dir`, creating it if needed.
pub fn write_run(dir: &Path, report: &RunReport, extent: &WorldExtent) -> io::Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("report.json"), pretty(report))?;
    fs::write(dir.join("sum_rate.csv"), sum_rate_csv(report))?;
    fs::write(dir.join("trajectories.geojson"), pretty(&trajectories_geojson(report, extent)))?;
    fs::write(dir.join("learning_curve.csv"), learning_curve_csv(&report.learning_curve))?;
    Ok(())
}

pub fn write_timing(dir: &Path, timing: &Timing) -> io::Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("timing.json"), pretty(timing))
}

/// Collated sweep table, one row per value.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from(
        "axis,value,controller,mean_sum_rate_bps,prediction_mse,historical_average_mse,min_rate_violations\n",
    );
    for r in rows {
        writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.axis,
            r.value,
            r.report.controller.name(),
            r.report.mean_sum_rate,
            r.report.prediction.test_mse,
            r.report.prediction.historical_average_mse,
            r.report.min_rate_violations
        )
        .expect("write to string");
    }
    s
}
