//! Scenario files: every knob of a pipeline run in one TOML document.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::{ChannelConfig, ChannelParams, Limits};
use crate::clustering::GaParams;
use crate::esn::EsnConfig;
use crate::fixture;
use crate::marl::{GridSpec, RlParams};
use crate::mobility::{self, TraceSet, WorldExtent};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read scenario {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("scenario parse error: {0}")]
    Parse(String),
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, ScenarioError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Controller {
    #[default]
    Learned,
    LearnedNoPowerControl,
    Static,
    GakmeansFollow,
}

impl Controller {
    pub const ALL: [Controller; 4] = [
        Controller::Learned,
        Controller::LearnedNoPowerControl,
        Controller::GakmeansFollow,
        Controller::Static,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Controller::Learned => "learned",
            Controller::LearnedNoPowerControl => "learned_no_power_control",
            Controller::Static => "static",
            Controller::GakmeansFollow => "gakmeans_follow",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == s)
    }
}

/// Grid section: cell counts follow from the extent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub cell_meters: f64,
    pub altitude_levels: Vec<f64>,
    pub power_levels: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MobilityConfig {
    /// Users with fewer check-ins are dropped at ingestion.
    #[serde(default = "default_min_reports")]
    pub min_reports: usize,
    /// Epoch seconds of slot 0; the earliest check-in when absent.
    #[serde(default)]
    pub start: Option<f64>,
}

fn default_min_reports() -> usize {
    2
}

impl Default for MobilityConfig {
    fn default() -> Self {
        Self {
            min_reports: default_min_reports(),
            start: None,
        }
    }
}

/// A complete run description. Module seeds inside `esn` and `ga` are ignored by
/// the pipeline, which derives them from `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub seed: u64,
    pub n_uavs: usize,
    pub slot_seconds: f64,
    pub n_slots: usize,
    #[serde(default)]
    pub controller: Controller,
    pub extent: WorldExtent,
    pub channel: ChannelConfig,
    pub limits: Limits,
    pub grid: GridConfig,
    pub esn: EsnConfig,
    #[serde(default)]
    pub ga: GaParams,
    #[serde(default)]
    pub rl: RlParams,
    #[serde(default)]
    pub mobility: MobilityConfig,
}

/// The scenario shipped with the repository, matching the synthetic fixture.
pub const BUNDLED: &str = include_str!("../scenarios/bundled.toml");

impl Scenario {
    pub fn from_toml(text: &str) -> Result<Self> {
        let s: Scenario = toml::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| ScenarioError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn bundled() -> Self {
        Self::from_toml(BUNDLED).expect("bundled scenario is valid")
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serialises")
    }

    pub fn grid(&self) -> GridSpec {
        GridSpec::covering(
            &self.extent,
            self.grid.cell_meters,
            self.grid.altitude_levels.clone(),
            self.grid.power_levels.clone(),
        )
    }

    pub fn channel_params(&self) -> Result<ChannelParams> {
        ChannelParams::from_config(&self.channel).map_err(|e| ScenarioError::Invalid(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ScenarioError::Invalid(m));
        if self.n_uavs == 0 {
            return bad("n_uavs must be >= 1".into());
        }
        if self.n_slots == 0 {
            return bad("n_slots must be >= 1".into());
        }
        if !(self.slot_seconds > 0.0) {
            return bad("slot_seconds must be positive".into());
        }
        if !(self.limits.h_min > 0.0 && self.limits.h_min <= self.limits.h_max && self.limits.p_max > 0.0) {
            return bad(format!("bad limits {:?}", self.limits));
        }
        self.extent.validate().map_err(|e| ScenarioError::Invalid(e.to_string()))?;
        self.channel_params()?;
        self.grid().validate(&self.limits).map_err(|e| ScenarioError::Invalid(e.to_string()))?;
        self.esn.validate().map_err(|e| ScenarioError::Invalid(e.to_string()))?;
        self.ga.validate().map_err(|e| ScenarioError::Invalid(e.to_string()))?;
        self.rl
            .tables(1, &GridSpec {
                x_cells: 1,
                y_cells: 1,
                ..self.grid()
            })
            .map_err(|e| ScenarioError::Invalid(e.to_string()))?;
        Ok(())
    }

    /// Fixture parameters consistent with this scenario's window and extent.
    pub fn fixture_spec(&self) -> fixture::FixtureSpec {
        fixture::FixtureSpec {
            n_slots: self.n_slots,
            slot_seconds: self.slot_seconds,
            epoch_start: self.mobility.start.unwrap_or(fixture::FixtureSpec::default().epoch_start),
            ..fixture::FixtureSpec::default()
        }
    }

    /// Ingests the synthetic cohort for this scenario through the check-in CSV
    /// path, so the result matches what the `ingest` command writes.
    pub fn synthetic_traces(&self, fixture_seed: Option<u64>) -> Result<TraceSet> {
        let mut spec = self.fixture_spec();
        if let Some(seed) = fixture_seed {
            spec.seed = seed;
        }
        let csv = fixture::to_csv(&fixture::synthetic_checkins(&spec, &self.extent));
        let invalid = |e: mobility::MobilityError| ScenarioError::Invalid(e.to_string());
        let cohort = mobility::parse_checkins(&csv, self.mobility.min_reports).map_err(invalid)?;
        mobility::build_traces(&cohort, &self.extent, self.mobility.start, self.slot_seconds, self.n_slots).map_err(invalid)
    }
}
