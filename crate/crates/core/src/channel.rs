//! Air-to-ground propagation and downlink rate model.
//!
//! LoS probability is a power law in the elevation angle; the power gain blends
//! LoS and NLoS excess attenuation by that probability. Each UAV splits its
//! power and band equally among the users of its cluster (FDMA), and every
//! other UAV interferes.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Speed of light in m/s.
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ChannelError {
    #[error("UAV and user coincide in 3D (distance 0)")]
    DegenerateGeometry,
    #[error("UAV {uav} serves no users")]
    EmptyCluster { uav: usize },
    #[error("user {user} is assigned to UAV {uav} but only {n_uavs} UAVs exist")]
    BadAssignment { user: usize, uav: usize, n_uavs: usize },
    #[error("assignment covers {assigned} users but {users} positions were given")]
    AssignmentLength { assigned: usize, users: usize },
    #[error("rate requirement {r0} bps for {cluster_size} users over {bandwidth} Hz is infeasible at any power")]
    InfeasibleRate {
        r0: f64,
        cluster_size: usize,
        bandwidth: f64,
    },
    #[error("invalid channel parameter: {0}")]
    InvalidParams(String),
}

pub type Result<T> = std::result::Result<T, ChannelError>;

fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

/// Channel constants as written in a scenario file (attenuations and noise in dB).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelConfig {
    pub carrier_hz: f64,
    pub b1: f64,
    pub b2: f64,
    #[serde(default)]
    pub zeta_deg: f64,
    pub path_loss_exponent: f64,
    pub mu_los_db: f64,
    pub mu_nlos_db: f64,
    pub noise_dbm_per_hz: f64,
    pub bandwidth_hz: f64,
    pub min_rate_bps: f64,
    /// Use the power bound with the altitude to the first power instead of the path-loss exponent.
    #[serde(default)]
    pub bound_linear_altitude: bool,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        Self {
            carrier_hz: 2e9,
            b1: 0.36,
            b2: 0.21,
            zeta_deg: 0.0,
            path_loss_exponent: 2.0,
            mu_los_db: 3.0,
            mu_nlos_db: 23.0,
            noise_dbm_per_hz: -170.0,
            bandwidth_hz: 1e6,
            min_rate_bps: 20e3,
            bound_linear_altitude: false,
        }
    }
}

/// Which form of the transmit-power lower bound to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BoundForm {
    /// Altitude raised to the path-loss exponent.
    PathLossExponent,
    /// Altitude to the first power.
    LinearAltitude,
}

/// Propagation constants in linear SI units.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChannelParams {
    pub carrier_hz: f64,
    pub b1: f64,
    pub b2: f64,
    pub zeta_deg: f64,
    pub alpha: f64,
    pub mu_los: f64,
    pub mu_nlos: f64,
    /// Noise power spectral density in W/Hz.
    pub n0: f64,
    pub bandwidth_total: f64,
    pub r0: f64,
    pub bound_form: BoundForm,
    k0: f64,
}

impl ChannelParams {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        carrier_hz: f64,
        b1: f64,
        b2: f64,
        zeta_deg: f64,
        alpha: f64,
        mu_los: f64,
        mu_nlos: f64,
        n0: f64,
        bandwidth_total: f64,
        r0: f64,
    ) -> Result<Self> {
        let positive = [
            ("carrier_hz", carrier_hz),
            ("b1", b1),
            ("b2", b2),
            ("path_loss_exponent", alpha),
            ("mu_los", mu_los),
            ("mu_nlos", mu_nlos),
            ("n0", n0),
            ("bandwidth", bandwidth_total),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(ChannelError::InvalidParams(format!("{name} must be positive, got {v}")));
            }
        }
        if !(zeta_deg.is_finite() && zeta_deg >= 0.0) {
            return Err(ChannelError::InvalidParams(format!("zeta must be >= 0, got {zeta_deg}")));
        }
        if !(r0.is_finite() && r0 >= 0.0) {
            return Err(ChannelError::InvalidParams(format!("min rate must be >= 0, got {r0}")));
        }
        if mu_los > mu_nlos {
            return Err(ChannelError::InvalidParams(format!(
                "LoS attenuation {mu_los} exceeds NLoS attenuation {mu_nlos}"
            )));
        }
        let k0 = (4.0 * std::f64::consts::PI * carrier_hz / SPEED_OF_LIGHT).powi(2);
        Ok(Self {
            carrier_hz,
            b1,
            b2,
            zeta_deg,
            alpha,
            mu_los,
            mu_nlos,
            n0,
            bandwidth_total,
            r0,
            bound_form: BoundForm::PathLossExponent,
            k0,
        })
    }

    pub fn from_config(cfg: &ChannelConfig) -> Result<Self> {
        let mut p = Self::new(
            cfg.carrier_hz,
            cfg.b1,
            cfg.b2,
            cfg.zeta_deg,
            cfg.path_loss_exponent,
            db_to_linear(cfg.mu_los_db),
            db_to_linear(cfg.mu_nlos_db),
            // dBm/Hz to W/Hz
            db_to_linear(cfg.noise_dbm_per_hz) * 1e-3,
            cfg.bandwidth_hz,
            cfg.min_rate_bps,
        )?;
        if cfg.bound_linear_altitude {
            p.bound_form = BoundForm::LinearAltitude;
        }
        Ok(p)
    }

    /// Free-space constant `(4 pi f_c / c)^2`.
    pub fn k0(&self) -> f64 {
        self.k0
    }
}

/// Continuous UAV state: horizontal position, altitude and total transmit power.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UavState {
    pub x: f64,
    pub y: f64,
    pub h: f64,
    pub p_total: f64,
}

impl UavState {
    pub fn distance_to(&self, user: [f64; 2]) -> f64 {
        let dx = self.x - user[0];
        let dy = self.y - user[1];
        (self.h * self.h + dx * dx + dy * dy).sqrt()
    }
}

/// Everything computed for one user's downlink.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LinkBudget {
    pub d: f64,
    pub theta: f64,
    pub p_los: f64,
    pub gain: f64,
    pub interference: f64,
    pub noise: f64,
    pub sinr: f64,
    pub rate: f64,
}

/// Elevation angle `asin(h / d)` from the user up to the UAV.
pub fn elevation_angle(uav: &UavState, user: [f64; 2]) -> Result<f64> {
    let d = uav.distance_to(user);
    if d == 0.0 {
        return Err(ChannelError::DegenerateGeometry);
    }
    Ok((uav.h / d).clamp(-1.0, 1.0).asin())
}

/// `b1 * (theta_deg - zeta)^b2`, clamped into `[0, 1]`.
pub fn los_probability(theta: f64, params: &ChannelParams) -> f64 {
    let excess = theta.to_degrees() - params.zeta_deg;
    if excess <= 0.0 {
        log::trace!("elevation {:.3} deg at or below zeta; LoS probability 0", theta.to_degrees());
        return 0.0;
    }
    (params.b1 * excess.powf(params.b2)).clamp(0.0, 1.0)
}

/// Average power gain at distance `d` given the LoS probability.
pub fn channel_gain(d: f64, p_los: f64, params: &ChannelParams) -> Result<f64> {
    if !(d > 0.0) {
        return Err(ChannelError::DegenerateGeometry);
    }
    let excess = p_los * params.mu_los + (1.0 - p_los) * params.mu_nlos;
    Ok(1.0 / (params.k0 * d.powf(params.alpha) * excess))
}

/// Gain from `uav` to a user at `user`, with the intermediate geometry.
pub fn link_gain(uav: &UavState, user: [f64; 2], params: &ChannelParams) -> Result<(f64, f64, f64, f64)> {
    let d = uav.distance_to(user);
    let theta = elevation_angle(uav, user)?;
    let p_los = los_probability(theta, params);
    let g = channel_gain(d, p_los, params)?;
    Ok((d, theta, p_los, g))
}

/// Equal split of a UAV's power and bandwidth over its cluster.
pub fn per_user_share(total: f64, cluster_size: usize, uav: usize) -> Result<f64> {
    if cluster_size == 0 {
        return Err(ChannelError::EmptyCluster { uav });
    }
    Ok(total / cluster_size as f64)
}

/// SINR and rate of one user served by `uavs[serving]`.
///
/// `per_user_power[n]` is UAV `n`'s power per served user (0 for a UAV without users);
/// every UAV other than the serving one contributes interference.
pub fn sinr_and_rate(
    user: [f64; 2],
    serving: usize,
    uavs: &[UavState],
    per_user_power: &[f64],
    per_user_bandwidth: f64,
    params: &ChannelParams,
) -> Result<LinkBudget> {
    if !(per_user_bandwidth.is_finite() && per_user_bandwidth > 0.0) {
        return Err(ChannelError::EmptyCluster { uav: serving });
    }
    let (d, theta, p_los, gain) = link_gain(&uavs[serving], user, params)?;
    let mut interference = 0.0;
    for (n, uav) in uavs.iter().enumerate() {
        if n == serving || per_user_power[n] == 0.0 {
            continue;
        }
        let (_, _, _, g) = link_gain(uav, user, params)?;
        interference += per_user_power[n] * g;
    }
    let noise = per_user_bandwidth * params.n0;
    let sinr = per_user_power[serving] * gain / (interference + noise);
    let rate = per_user_bandwidth * (1.0 + sinr).log2();
    Ok(LinkBudget {
        d,
        theta,
        p_los,
        gain,
        interference,
        noise,
        sinr,
        rate,
    })
}

/// Number of users assigned to each UAV.
pub fn cluster_sizes(assignment: &[usize], n_uavs: usize) -> Result<Vec<usize>> {
    let mut sizes = vec![0usize; n_uavs];
    for (user, &uav) in assignment.iter().enumerate() {
        if uav >= n_uavs {
            return Err(ChannelError::BadAssignment { user, uav, n_uavs });
        }
        sizes[uav] += 1;
    }
    Ok(sizes)
}

/// Link budget of every user, in user order.
pub fn user_links(
    assignment: &[usize],
    uavs: &[UavState],
    users: &[[f64; 2]],
    params: &ChannelParams,
) -> Result<Vec<LinkBudget>> {
    if assignment.len() != users.len() {
        return Err(ChannelError::AssignmentLength {
            assigned: assignment.len(),
            users: users.len(),
        });
    }
    let sizes = cluster_sizes(assignment, uavs.len())?;
    let per_user_power: Vec<f64> = uavs
        .iter()
        .zip(&sizes)
        .map(|(u, &k)| if k == 0 { 0.0 } else { u.p_total / k as f64 })
        .collect();
    users
        .iter()
        .zip(assignment)
        .map(|(&user, &n)| {
            let bw = per_user_share(params.bandwidth_total, sizes[n], n)?;
            sinr_and_rate(user, n, uavs, &per_user_power, bw, params)
        })
        .collect()
}

/// Instantaneous sum rate over all users in bps.
pub fn sum_rate(
    assignment: &[usize],
    uavs: &[UavState],
    users: &[[f64; 2]],
    params: &ChannelParams,
) -> Result<f64> {
    Ok(user_links(assignment, uavs, users, params)?
        .iter()
        .map(|l| l.rate)
        .sum())
}

/// Lower bound on the maximum transmit power that lets every user reach the minimum rate.
///
/// Evaluates `|K| mu_los sigma^2 K0 (2^(|K| r0 / B) - 1) max(h)^e` for the largest
/// cluster, with `sigma^2 = (B / |K|) N0` and `e` the path-loss exponent
/// (or 1 under [`BoundForm::LinearAltitude`]).
pub fn pmax_lower_bound(cluster_sizes: &[usize], heights: &[f64], params: &ChannelParams) -> Result<f64> {
    let k = cluster_sizes.iter().copied().max().unwrap_or(0);
    if k == 0 || cluster_sizes.contains(&0) {
        let uav = cluster_sizes.iter().position(|&s| s == 0).unwrap_or(0);
        return Err(ChannelError::EmptyCluster { uav });
    }
    if heights.is_empty() || heights.iter().any(|h| !(h.is_finite() && *h > 0.0)) {
        return Err(ChannelError::InvalidParams("heights must be positive".into()));
    }
    let h_max = heights.iter().copied().fold(0.0, f64::max);
    let kf = k as f64;
    let sigma2 = params.bandwidth_total / kf * params.n0;
    let snr_needed = (kf * params.r0 / params.bandwidth_total).exp2() - 1.0;
    let exponent = match params.bound_form {
        BoundForm::PathLossExponent => params.alpha,
        BoundForm::LinearAltitude => 1.0,
    };
    let bound = kf * params.mu_los * sigma2 * params.k0 * snr_needed * h_max.powf(exponent);
    if !bound.is_finite() {
        return Err(ChannelError::InfeasibleRate {
            r0: params.r0,
            cluster_size: k,
            bandwidth: params.bandwidth_total,
        });
    }
    Ok(bound)
}

/// Altitude and power limits a committed UAV state must respect.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Limits {
    pub h_min: f64,
    pub h_max: f64,
    pub p_max: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Constraint {
    /// Every user in exactly one cluster, no cluster empty.
    DisjointClusters,
    AltitudeBounds,
    MinimumRate,
    PowerBudget,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub constraint: Constraint,
    /// UAV index for altitude/power/cluster violations, user index for rate violations.
    pub entity: usize,
    pub value: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ConstraintReport {
    pub violations: Vec<Violation>,
}

impl ConstraintReport {
    pub fn is_feasible(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn count(&self, constraint: Constraint) -> usize {
        self.violations.iter().filter(|v| v.constraint == constraint).count()
    }
}

/// Audits a joint UAV state and user assignment against the problem constraints.
pub fn check_constraints(
    uavs: &[UavState],
    assignment: &[usize],
    users: &[[f64; 2]],
    params: &ChannelParams,
    limits: &Limits,
) -> ConstraintReport {
    let mut violations = Vec::new();
    let mut sizes = vec![0usize; uavs.len()];
    let mut assignment_ok = assignment.len() == users.len();
    for (user, &n) in assignment.iter().enumerate() {
        match sizes.get_mut(n) {
            Some(s) => *s += 1,
            None => {
                assignment_ok = false;
                violations.push(Violation {
                    constraint: Constraint::DisjointClusters,
                    entity: user,
                    value: n as f64,
                });
            }
        }
    }
    for (n, &s) in sizes.iter().enumerate() {
        if s == 0 {
            assignment_ok = false;
            violations.push(Violation {
                constraint: Constraint::DisjointClusters,
                entity: n,
                value: 0.0,
            });
        }
    }
    for (n, u) in uavs.iter().enumerate() {
        if !(limits.h_min..=limits.h_max).contains(&u.h) {
            violations.push(Violation {
                constraint: Constraint::AltitudeBounds,
                entity: n,
                value: u.h,
            });
        }
        if !(0.0..=limits.p_max).contains(&u.p_total) {
            violations.push(Violation {
                constraint: Constraint::PowerBudget,
                entity: n,
                value: u.p_total,
            });
        }
    }
    if assignment_ok {
        match user_links(assignment, uavs, users, params) {
            Ok(links) => {
                for (user, l) in links.iter().enumerate() {
                    if l.rate < params.r0 {
                        violations.push(Violation {
                            constraint: Constraint::MinimumRate,
                            entity: user,
                            value: l.rate,
                        });
                    }
                }
            }
            Err(e) => log::warn!("rate audit skipped: {e}"),
        }
    }
    ConstraintReport { violations }
}
