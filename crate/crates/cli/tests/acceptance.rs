//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any fails.

use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::{Arc, OnceLock};
use std::time::{Duration, Instant};

use aeronet::channel::{self, ChannelConfig, ChannelParams, UavState};
use aeronet::clustering::{gak_means, kmeans, wcss, GaParams};
use aeronet::esn::{self, build_reservoir, predict_cohort, ridge_solve, EsnModel};
use aeronet::marl::{self, EpsilonSchedule, LearningRate, MultiAgentEnv, QTableSet, SelectionRule, TrainConfig, Transition};
use aeronet::report::REPORT_FILES;
use aeronet::scenario::{Controller, Scenario};
use aeronet::sim;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * b.abs().max(f64::MIN_POSITIVE)
}

// ---------------------------------------------------------------- channel

struct OracleLink {
    p_los: f64,
    gain: f64,
    sinr: f64,
    rate: f64,
}

/// Straight evaluation of the air-to-ground model from the config values.
fn channel_oracle(cfg: &ChannelConfig, uavs: &[UavState], users: &[[f64; 2]], assign: &[usize]) -> Vec<OracleLink> {
    let c = 299_792_458.0;
    let k0 = (4.0 * std::f64::consts::PI * cfg.carrier_hz / c).powi(2);
    let mu_l = 10f64.powf(cfg.mu_los_db / 10.0);
    let mu_n = 10f64.powf(cfg.mu_nlos_db / 10.0);
    let n0 = 10f64.powf(cfg.noise_dbm_per_hz / 10.0) / 1000.0;
    let gain = |u: &UavState, p: [f64; 2]| {
        let horiz = ((u.x - p[0]).powi(2) + (u.y - p[1]).powi(2)).sqrt();
        let d = (horiz * horiz + u.h * u.h).sqrt();
        let theta = u.h.atan2(horiz).to_degrees();
        let p_los = if theta > cfg.zeta_deg {
            (cfg.b1 * (theta - cfg.zeta_deg).powf(cfg.b2)).min(1.0)
        } else {
            0.0
        };
        let g = 1.0 / (k0 * d.powf(cfg.path_loss_exponent) * (p_los * mu_l + (1.0 - p_los) * mu_n));
        (p_los, g)
    };
    let mut sizes = vec![0usize; uavs.len()];
    for &a in assign {
        sizes[a] += 1;
    }
    users
        .iter()
        .zip(assign)
        .map(|(&p, &n)| {
            let k = sizes[n] as f64;
            let bw = cfg.bandwidth_hz / k;
            let (p_los, g) = gain(&uavs[n], p);
            let mut interference = 0.0;
            for (m, u) in uavs.iter().enumerate() {
                if m != n && sizes[m] > 0 {
                    interference += u.p_total / sizes[m] as f64 * gain(u, p).1;
                }
            }
            let sinr = uavs[n].p_total / k * g / (interference + bw * n0);
            OracleLink {
                p_los,
                gain: g,
                sinr,
                rate: bw * (1.0 + sinr).log2(),
            }
        })
        .collect()
}

fn random_channel(r: &mut ChaCha8Rng) -> ChannelConfig {
    ChannelConfig {
        carrier_hz: r.gen_range(0.5e9..6e9),
        b1: r.gen_range(0.1..0.8),
        b2: r.gen_range(0.05..0.5),
        zeta_deg: r.gen_range(0.0..15.0),
        path_loss_exponent: r.gen_range(2.0..4.0),
        mu_los_db: r.gen_range(0.0..5.0),
        mu_nlos_db: r.gen_range(10.0..30.0),
        noise_dbm_per_hz: r.gen_range(-180.0..-160.0),
        bandwidth_hz: r.gen_range(0.5e6..5e6),
        ..ChannelConfig::default()
    }
}

fn random_uav(r: &mut ChaCha8Rng) -> UavState {
    UavState {
        x: r.gen_range(0.0..2000.0),
        y: r.gen_range(0.0..2000.0),
        h: r.gen_range(50.0..300.0),
        p_total: r.gen_range(0.01..1.0),
    }
}

fn criterion_1() -> Check {
    let mut r = ChaCha8Rng::seed_from_u64(101);
    let mut worst: f64 = 0.0;
    for case in 0..200 {
        let cfg = random_channel(&mut r);
        let params = ChannelParams::from_config(&cfg).map_err(|e| e.to_string())?;
        let uavs: Vec<UavState> = (0..r.gen_range(1..=4)).map(|_| random_uav(&mut r)).collect();
        let users: Vec<[f64; 2]> = (0..r.gen_range(1..=20))
            .map(|_| [r.gen_range(0.0..2000.0), r.gen_range(0.0..2000.0)])
            .collect();
        let assign: Vec<usize> = users.iter().map(|_| r.gen_range(0..uavs.len())).collect();
        let links = channel::user_links(&assign, &uavs, &users, &params).map_err(|e| e.to_string())?;
        let oracle = channel_oracle(&cfg, &uavs, &users, &assign);
        for (k, (l, o)) in links.iter().zip(&oracle).enumerate() {
            for (name, a, b) in [("p_los", l.p_los, o.p_los), ("gain", l.gain, o.gain), ("sinr", l.sinr, o.sinr), ("rate", l.rate, o.rate)] {
                ensure(close(a, b, 1e-9), || format!("fixture {case} user {k}: {name} {a} vs oracle {b}"))?;
                if b != 0.0 {
                    worst = worst.max((a - b).abs() / b.abs());
                }
            }
        }
        let total = channel::sum_rate(&assign, &uavs, &users, &params).map_err(|e| e.to_string())?;
        let expect: f64 = oracle.iter().map(|o| o.rate).sum();
        ensure(close(total, expect, 1e-9), || format!("fixture {case}: sum rate {total} vs oracle {expect}"))?;
    }

    let params = ChannelParams::from_config(&ChannelConfig::default()).unwrap();
    for i in 0..1000 {
        let (t1, t2) = (r.gen_range(0.001..1.57f64), r.gen_range(0.001..1.57f64));
        let (lo, hi) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
        ensure(channel::los_probability(lo, &params) <= channel::los_probability(hi, &params), || {
            format!("pair {i}: LoS probability falls from {lo} to {hi} rad")
        })?;

        let (d1, d2) = (r.gen_range(10.0..3000.0f64), r.gen_range(10.0..3000.0f64));
        let p_los = r.gen_range(0.0..=1.0);
        if d1 != d2 {
            let (near, far) = if d1 < d2 { (d1, d2) } else { (d2, d1) };
            let (gn, gf) = (
                channel::channel_gain(near, p_los, &params).unwrap(),
                channel::channel_gain(far, p_los, &params).unwrap(),
            );
            ensure(gn > gf, || format!("pair {i}: gain {gn} at {near} m not above {gf} at {far} m"))?;
        }

        let uavs = [random_uav(&mut r), random_uav(&mut r)];
        let user = [r.gen_range(0.0..2000.0), r.gen_range(0.0..2000.0)];
        let other = r.gen_range(0.0..0.1);
        let (p1, p2) = (r.gen_range(0.001..0.5), r.gen_range(0.001..0.5));
        let (plo, phi) = if p1 < p2 { (p1, p2) } else { (p2, p1) };
        if plo < phi {
            let rate = |p: f64| channel::sinr_and_rate(user, 0, &uavs, &[p, other], 1e5, &params).unwrap().rate;
            ensure(rate(plo) < rate(phi), || format!("pair {i}: rate not increasing in own power"))?;
        }
    }
    Ok(format!("200 fixtures, worst relative error {worst:.1e}; 1000 monotonicity pairs"))
}

// ---------------------------------------------------------------- power bound

fn criterion_2() -> Check {
    let mut r = ChaCha8Rng::seed_from_u64(202);
    let mut tightest = f64::INFINITY;
    for case in 0..50 {
        let cfg = ChannelConfig {
            // saturates the LoS probability at 1 for every elevation used below
            b1: 1e9,
            zeta_deg: 0.0,
            path_loss_exponent: r.gen_range(2.0..3.5),
            bandwidth_hz: r.gen_range(0.5e6..2e6),
            min_rate_bps: r.gen_range(1e4..2e5),
            ..ChannelConfig::default()
        };
        let params = ChannelParams::from_config(&cfg).unwrap();
        let h = r.gen_range(50.0..300.0);
        let k = r.gen_range(1..=15usize);
        let users: Vec<[f64; 2]> = (0..k).map(|_| [r.gen_range(-500.0..500.0), r.gen_range(-500.0..500.0)]).collect();
        let assign = vec![0usize; k];
        let bound = channel::pmax_lower_bound(&[k], &[h], &params).map_err(|e| e.to_string())?;
        let feasible = |p: f64| {
            let uav = [UavState { x: 0.0, y: 0.0, h, p_total: p }];
            let links = channel::user_links(&assign, &uav, &users, &params).unwrap();
            assert!(links.iter().all(|l| l.p_los == 1.0), "instance is not pure LoS");
            links.iter().all(|l| l.rate >= cfg.min_rate_bps)
        };
        let steps = 4000;
        let p_min = (0..=steps)
            .map(|i| bound * 10f64.powf(-3.0 + 9.0 * i as f64 / steps as f64))
            .find(|&p| feasible(p))
            .ok_or_else(|| format!("instance {case}: no feasible power on the grid"))?;
        ensure(p_min >= bound, || format!("instance {case}: feasible at {p_min} W below bound {bound} W"))?;
        tightest = tightest.min(p_min / bound);
    }
    Ok(format!("50 instances, smallest feasible/bound ratio {tightest:.4}"))
}

// ---------------------------------------------------------------- prediction

struct EsnTrend {
    medians: [f64; 3],
    ranges: [(f64, f64); 3],
    historical_average: f64,
    worst_residual: f64,
}

static ESN_TREND: OnceLock<Result<EsnTrend, String>> = OnceLock::new();
const RESERVOIR_SIZES: [usize; 3] = [100, 500, 1000];

fn esn_trend() -> &'static Result<EsnTrend, String> {
    ESN_TREND.get_or_init(|| {
        let s = Scenario::bundled();
        let traces = s.synthetic_traces(None).map_err(|e| e.to_string())?;
        let users: Vec<Vec<[f64; 2]>> = traces.users.iter().map(|u| u.positions.clone()).collect();
        let mut mses = [vec![], vec![], vec![]];
        let mut ha = f64::NAN;
        let mut worst: f64 = 0.0;
        for seed in 0..20u64 {
            for (i, &n) in RESERVOIR_SIZES.iter().enumerate() {
                let cfg = esn::EsnConfig {
                    reservoir_size: n,
                    rng_seed: seed,
                    ..s.esn
                };
                let p = predict_cohort(&users, &cfg, &s.extent).map_err(|e| e.to_string())?;
                mses[i].push(p.test_mse);
                ha = p.historical_average_mse;
                worst = worst.max(p.worst_normal_residual);
            }
        }
        let range = |v: &Vec<f64>| (v.iter().copied().fold(f64::INFINITY, f64::min), v.iter().copied().fold(0.0, f64::max));
        Ok(EsnTrend {
            ranges: [range(&mses[0]), range(&mses[1]), range(&mses[2])],
            medians: mses.map(median),
            historical_average: ha,
            worst_residual: worst,
        })
    })
}

fn criterion_3() -> Check {
    let t = esn_trend().as_ref().map_err(Clone::clone)?;
    let [m100, m500, m1000] = t.medians;
    let detail = format!(
        "median MSE {m100:.2} / {m500:.2} / {m1000:.2} for N_x 100/500/1000 (ranges {:.1}-{:.1}, {:.1}-{:.1}, {:.1}-{:.1}), historical average {:.2}",
        t.ranges[0].0, t.ranges[0].1, t.ranges[1].0, t.ranges[1].1, t.ranges[2].0, t.ranges[2].1, t.historical_average
    );
    ensure(m100 > m500 && m500 > m1000, || format!("ordering broken: {detail}"))?;
    ensure(m1000 < t.historical_average, || format!("no gain over historical average: {detail}"))?;
    Ok(detail)
}

/// Relative residual of the ridge normal equations, computed from scratch.
fn normal_residual(z: &DMatrix<f64>, y: &DMatrix<f64>, w: &DMatrix<f64>, lambda: f64) -> f64 {
    let gram = z * z.transpose() + DMatrix::identity(z.nrows(), z.nrows()) * lambda;
    let lhs = &gram * w.transpose();
    let rhs = z * y.transpose();
    (0..y.nrows())
        .map(|j| (lhs.column(j) - rhs.column(j)).norm() / rhs.column(j).norm())
        .fold(0.0, f64::max)
}

fn harvest(n: usize, t: usize, seed: u64, r: &mut ChaCha8Rng) -> DMatrix<f64> {
    let cfg = esn::EsnConfig {
        reservoir_size: n,
        leak_rate: 1.0,
        washout: 0,
        rng_seed: seed,
        ..Scenario::bundled().esn
    };
    let mut m = EsnModel::new(Arc::new(build_reservoir(&cfg, 2).unwrap()), 1);
    let inputs: Vec<Vec<f64>> = (0..t).map(|_| vec![r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0)]).collect();
    m.harvest(&inputs).unwrap()
}

fn criterion_4() -> Check {
    let mut r = ChaCha8Rng::seed_from_u64(404);
    let mut worst: f64 = 0.0;
    for (i, &(n, t, lambda)) in [(20, 200, 1e-6), (20, 200, 1.0), (80, 50, 1e-2), (80, 50, 2.0), (50, 300, 1e-3), (120, 100, 0.5)]
        .iter()
        .enumerate()
    {
        let z = harvest(n, t, i as u64, &mut r);
        let y = DMatrix::from_fn(2, t, |_, _| r.gen_range(-1.0..1.0));
        let (w, reported) = ridge_solve(&z, &y, lambda).map_err(|e| e.to_string())?;
        let res = normal_residual(&z, &y, &w, lambda);
        ensure(res < 1e-8 && reported < 1e-8, || format!("fixture {i}: residual {res:.2e} (reported {reported:.2e})"))?;
        worst = worst.max(res);
    }
    let trend = esn_trend().as_ref().map_err(Clone::clone)?;
    ensure(trend.worst_residual < 1e-8, || format!("cohort fits: residual {:.2e}", trend.worst_residual))?;
    worst = worst.max(trend.worst_residual);

    let z = harvest(30, 400, 9, &mut r);
    let k = 7;
    let y = DMatrix::from_fn(1, z.ncols(), |_, c| z[(k, c)]);
    let (w, _) = ridge_solve(&z, &y, 1e-12).map_err(|e| e.to_string())?;
    let err = (0..w.ncols())
        .map(|j| (w[(0, j)] - if j == k { 1.0 } else { 0.0 }).abs())
        .fold(0.0, f64::max);
    ensure(err < 1e-6, || format!("selector recovered with error {err:.2e}"))?;
    Ok(format!("worst normal-equation residual {worst:.1e} over 6 fixtures and 3000 cohort fits; selector error {err:.1e}"))
}

// ---------------------------------------------------------------- Q-learning

/// A known finite MDP: `p[s][a][s']`, `r[s][a]`.
#[derive(Clone)]
struct Mdp {
    p: Vec<Vec<Vec<f64>>>,
    r: Vec<Vec<f64>>,
}

impl Mdp {
    fn two_state() -> Self {
        Self {
            p: vec![vec![vec![0.8, 0.2], vec![0.1, 0.9]], vec![vec![0.3, 0.7], vec![0.6, 0.4]]],
            r: vec![vec![0.2, 0.0], vec![1.0, 0.5]],
        }
    }

    fn three_state() -> Self {
        Self {
            p: vec![
                vec![vec![0.7, 0.2, 0.1], vec![0.1, 0.8, 0.1], vec![0.2, 0.2, 0.6]],
                vec![vec![0.5, 0.5, 0.0], vec![0.1, 0.3, 0.6], vec![0.0, 0.9, 0.1]],
                vec![vec![0.4, 0.0, 0.6], vec![0.3, 0.3, 0.4], vec![0.8, 0.1, 0.1]],
            ],
            r: vec![vec![0.0, 0.3, 0.1], vec![0.6, 0.2, 0.4], vec![0.9, 0.0, 0.5]],
        }
    }

    fn n_states(&self) -> usize {
        self.r.len()
    }

    fn n_actions(&self) -> usize {
        self.r[0].len()
    }

    fn sample(&self, s: usize, a: usize, rng: &mut ChaCha8Rng) -> usize {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (next, &p) in self.p[s][a].iter().enumerate() {
            acc += p;
            if u < acc {
                return next;
            }
        }
        self.n_states() - 1
    }

    fn value_iteration(&self, beta: f64) -> Vec<Vec<f64>> {
        let (ns, na) = (self.n_states(), self.n_actions());
        let mut q = vec![vec![0.0; na]; ns];
        loop {
            let v: Vec<f64> = q.iter().map(|row| row.iter().copied().fold(f64::NEG_INFINITY, f64::max)).collect();
            let next: Vec<Vec<f64>> = (0..ns)
                .map(|s| (0..na).map(|a| self.r[s][a] + beta * (0..ns).map(|t| self.p[s][a][t] * v[t]).sum::<f64>()).collect())
                .collect();
            let delta = next.iter().flatten().zip(q.iter().flatten()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            q = next;
            if delta < 1e-13 {
                return q;
            }
        }
    }
}

/// Agents on independent copies of an MDP, each rewarded by its own transition.
struct MdpEnv {
    mdp: Mdp,
    states: Vec<usize>,
    rng: ChaCha8Rng,
}

impl MultiAgentEnv for MdpEnv {
    fn n_agents(&self) -> usize {
        self.states.len()
    }

    fn n_states(&self) -> usize {
        self.mdp.n_states()
    }

    fn n_actions(&self) -> usize {
        self.mdp.n_actions()
    }

    fn reset(&mut self) -> Vec<usize> {
        let ns = self.mdp.n_states();
        for s in &mut self.states {
            *s = self.rng.gen_range(0..ns);
        }
        self.states.clone()
    }

    fn step(&mut self, actions: &[usize]) -> Transition {
        let rewards: Vec<f64> = self.states.iter().zip(actions).map(|(&s, &a)| self.mdp.r[s][a]).collect();
        for (s, &a) in self.states.iter_mut().zip(actions) {
            *s = self.mdp.sample(*s, a, &mut self.rng);
        }
        Transition {
            next_states: self.states.clone(),
            metric: rewards.iter().sum(),
            rewards,
        }
    }
}

fn argmax(row: &[f64]) -> usize {
    (0..row.len()).fold(0, |b, a| if row[a] > row[b] { a } else { b })
}

/// Trains `n_agents` learners for 10^5 steps per seed; returns the worst |Q - Q*|.
fn q_learning_check(mdp: &Mdp, n_agents: usize, beta: f64) -> Result<f64, String> {
    let q_star = mdp.value_iteration(beta);
    let policy: Vec<usize> = q_star.iter().map(|row| argmax(row)).collect();
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let mut worst: f64 = 0.0;
    for seed in 0..20u64 {
        let mut env = MdpEnv {
            mdp: mdp.clone(),
            states: vec![0; n_agents],
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let mut tables = QTableSet::new(
            n_agents,
            ns,
            na,
            LearningRate::VisitPolynomial { omega: 0.7 },
            beta,
            EpsilonSchedule::constant(1.0),
        )
        .map_err(|e| e.to_string())?;
        let cfg = TrainConfig {
            episodes: 100,
            steps_per_episode: 1000,
            selection: SelectionRule::Independent,
            allowed_actions: vec![],
            record_every: 0,
            seed,
        };
        marl::train(&mut env, &mut tables, &cfg);
        for (n, t) in tables.tables.iter().enumerate() {
            for s in 0..ns {
                for a in 0..na {
                    worst = worst.max((t.get(s, a) - q_star[s][a]).abs());
                }
            }
            ensure(worst < 0.05, || format!("seed {seed} agent {n}: max |Q - Q*| = {worst:.4}"))?;
        }
        let all: Vec<usize> = (0..na).collect();
        for joint in 0..ns.pow(n_agents as u32) {
            let states: Vec<usize> = (0..n_agents).map(|n| joint / ns.pow(n as u32) % ns).collect();
            let greedy = tables.greedy(&states, SelectionRule::Independent, &all);
            let optimal: Vec<usize> = states.iter().map(|&s| policy[s]).collect();
            ensure(greedy == optimal, || format!("seed {seed}: greedy {greedy:?} at {states:?}, optimal {optimal:?}"))?;
        }
    }
    Ok(worst)
}

/// Value iteration on the joint two-agent chain, checked against the sum of the
/// per-agent optima (the joint optimum decomposes because rewards and moves do).
fn joint_decomposes(mdp: &Mdp, beta: f64) -> Result<(), String> {
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let joint = Mdp {
        p: (0..ns * ns)
            .map(|s| {
                let (s1, s2) = (s / ns, s % ns);
                (0..na * na)
                    .map(|a| {
                        let (a1, a2) = (a / na, a % na);
                        (0..ns * ns).map(|t| mdp.p[s1][a1][t / ns] * mdp.p[s2][a2][t % ns]).collect()
                    })
                    .collect()
            })
            .collect(),
        r: (0..ns * ns)
            .map(|s| (0..na * na).map(|a| mdp.r[s / ns][a / na] + mdp.r[s % ns][a % na]).collect())
            .collect(),
    };
    let qj = joint.value_iteration(beta);
    let q = mdp.value_iteration(beta);
    for s in 0..ns * ns {
        for a in 0..na * na {
            let sum = q[s / ns][a / na] + q[s % ns][a % na];
            ensure((qj[s][a] - sum).abs() < 1e-9, || format!("joint Q* {} vs summed {sum}", qj[s][a]))?;
        }
    }
    Ok(())
}

fn criterion_5() -> Check {
    let beta = 0.7;
    let single = q_learning_check(&Mdp::two_state(), 1, beta)?;
    joint_decomposes(&Mdp::three_state(), beta)?;
    let pair = q_learning_check(&Mdp::three_state(), 2, beta)?;
    Ok(format!(
        "20 seeds x 10^5 steps, optimal greedy policy everywhere; max |Q - Q*| {single:.4} (1 agent, 2 states), {pair:.4} (2 agents, 3 states)"
    ))
}

// ---------------------------------------------------------------- placement training

fn criterion_6() -> Check {
    let s = Scenario::bundled();
    let traces = s.synthetic_traces(None).map_err(|e| e.to_string())?;
    let p = sim::predict_stage(&s, &traces).map_err(|e| e.to_string())?;
    let c = sim::cluster_stage(&s, &p.predicted).map_err(|e| e.to_string())?;
    let placement = sim::placement_stage(&s, &p.predicted, &c, Controller::Learned).map_err(|e| e.to_string())?;
    let best = placement.training.running_best();
    ensure(best.len() == 30, || format!("{} trials recorded", best.len()))?;
    ensure(placement.training.episodes.iter().all(|e| e.best_metric.is_finite()), || "non-finite trial metric".into())?;
    ensure(best.windows(2).all(|w| w[1] >= w[0]), || format!("trial-best decreases: {best:?}"))?;
    let tail = &best[best.len() - 5..];
    let spread = (tail[4] - tail[0]) / tail[4];
    let first_final = best.iter().position(|&b| b == best[best.len() - 1]).unwrap() + 1;
    ensure(spread < 0.02, || format!("last-5 spread {:.2}%: {best:?}", 100.0 * spread))?;
    Ok(format!(
        "30 trials x {} iterations; trial-best {:.3e} -> {:.3e} bps, final value first reached in trial {first_final}, last-5 spread {:.3}%",
        s.rl.placement_steps,
        best[0],
        best[29],
        100.0 * spread
    ))
}

// ---------------------------------------------------------------- end-to-end runs

const BIN: &str = env!("CARGO_BIN_EXE_aeronet");

fn bundled_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/scenarios/bundled.toml")
}

fn aeronet(args: &[&str]) -> Result<(), String> {
    let out = Command::new(BIN).args(args).output().map_err(|e| e.to_string())?;
    ensure(out.status.success(), || {
        format!("aeronet {} failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr))
    })
}

struct Runs {
    dir: TempDir,
    /// (label, run directory)
    runs: Vec<(String, PathBuf)>,
}

static RUNS: OnceLock<Result<Runs, String>> = OnceLock::new();

fn simulate(dir: &Path, traces: &Path, label: &str, controller: Controller) -> Result<PathBuf, String> {
    let out = dir.join(label);
    let scenario = bundled_path();
    aeronet(&[
        "simulate",
        "--scenario",
        scenario.to_str().unwrap(),
        "--traces",
        traces.to_str().unwrap(),
        "--controller",
        controller.name(),
        "--out",
        out.to_str().unwrap(),
    ])?;
    Ok(out)
}

fn runs() -> &'static Result<Runs, String> {
    RUNS.get_or_init(|| {
        let dir = TempDir::new().map_err(|e| e.to_string())?;
        let traces = dir.path().join("traces.json");
        let scenario = bundled_path();
        aeronet(&["ingest", "--scenario", scenario.to_str().unwrap(), "--synthetic-fixture", "--out", traces.to_str().unwrap()])?;
        let mut runs = Vec::new();
        for c in Controller::ALL {
            runs.push((c.name().to_string(), simulate(dir.path(), &traces, c.name(), c)?));
        }
        Ok(Runs { dir, runs })
    })
}

fn load_report(dir: &Path) -> Result<serde_json::Value, String> {
    let text = fs::read_to_string(dir.join("report.json")).map_err(|e| e.to_string())?;
    serde_json::from_str(&text).map_err(|e| e.to_string())
}

fn criterion_7() -> Check {
    let runs = runs().as_ref().map_err(Clone::clone)?;
    let mut mean = Vec::new();
    for name in ["learned", "learned_no_power_control", "gakmeans_follow", "static"] {
        let (_, dir) = runs.runs.iter().find(|(l, _)| l == name).unwrap();
        mean.push(load_report(dir)?["mean_sum_rate"].as_f64().ok_or("mean_sum_rate missing")?);
    }
    let detail = format!(
        "mean sum rate learned {:.4e} >= no power control {:.4e} >= follow {:.4e} >= static {:.4e}; learned/static {:.3}",
        mean[0],
        mean[1],
        mean[2],
        mean[3],
        mean[0] / mean[3]
    );
    ensure(mean.windows(2).all(|w| w[0] >= w[1]), || format!("ordering broken: {detail}"))?;
    ensure(mean[0] >= 1.10 * mean[3], || format!("gain below 10%: {detail}"))?;
    Ok(detail)
}

fn criterion_9() -> Check {
    let runs = runs().as_ref().map_err(Clone::clone)?;
    let dir = runs.dir.path();
    let traces = dir.join("traces.json");
    let again = dir.join("traces_again.json");
    let scenario = bundled_path();
    aeronet(&["ingest", "--scenario", scenario.to_str().unwrap(), "--synthetic-fixture", "--out", again.to_str().unwrap()])?;
    ensure(fs::read(&traces).unwrap() == fs::read(&again).unwrap(), || "ingested traces differ".into())?;
    let (_, first) = &runs.runs[0];
    let second = simulate(dir, &traces, "learned_again", Controller::Learned)?;
    for f in REPORT_FILES {
        let (a, b) = (fs::read(first.join(f)).map_err(|e| e.to_string())?, fs::read(second.join(f)).map_err(|e| e.to_string())?);
        ensure(a == b, || format!("{f} differs between identical runs"))?;
    }
    Ok(format!("traces and {} report files byte-identical across repeated runs", REPORT_FILES.len()))
}

fn criterion_10() -> Check {
    let runs = runs().as_ref().map_err(Clone::clone)?;
    let s = Scenario::bundled();
    let mut dirs: Vec<PathBuf> = runs.runs.iter().map(|(_, d)| d.clone()).collect();
    let again = runs.dir.path().join("learned_again");
    if again.is_dir() {
        dirs.push(again);
    }
    let mut below = 0usize;
    for dir in &dirs {
        let rep = load_report(dir)?;
        let name = dir.file_name().unwrap().to_string_lossy().to_string();
        let n_slots = rep["n_slots"].as_u64().unwrap() as usize;
        let states = rep["states"].as_array().unwrap();
        let trajectories = rep["trajectories"].as_array().unwrap();
        for (n, row) in states.iter().enumerate() {
            let row = row.as_array().unwrap();
            ensure(row.len() == n_slots, || format!("{name}: uav {n} has {} states", row.len()))?;
            let idx = |v: &serde_json::Value, k: &str| v[k].as_i64().unwrap();
            for (t, w) in row.windows(2).enumerate() {
                let moved: i64 = ["cell_x", "cell_y", "h_idx"].iter().map(|k| (idx(&w[1], k) - idx(&w[0], k)).abs()).sum();
                let dp = (idx(&w[1], "p_idx") - idx(&w[0], "p_idx")).abs();
                ensure(moved <= 1 && dp <= 1, || format!("{name}: uav {n} jumps between slots {t} and {}", t + 1))?;
            }
            for (t, u) in trajectories[n].as_array().unwrap().iter().enumerate() {
                let (h, p) = (u["h"].as_f64().unwrap(), u["p_total"].as_f64().unwrap());
                ensure((s.limits.h_min..=s.limits.h_max).contains(&h), || format!("{name}: uav {n} altitude {h} at slot {t}"))?;
                ensure((0.0..=s.limits.p_max).contains(&p), || format!("{name}: uav {n} power {p} at slot {t}"))?;
            }
        }
        let mut count = 0usize;
        for (t, (rates, report)) in rep["user_rates"].as_array().unwrap().iter().zip(rep["constraints"].as_array().unwrap()).enumerate() {
            let listed: Vec<u64> = report["violations"]
                .as_array()
                .unwrap()
                .iter()
                .filter(|v| v["constraint"] == "minimum_rate")
                .map(|v| v["entity"].as_u64().unwrap())
                .collect();
            for (k, r) in rates.as_array().unwrap().iter().enumerate() {
                if r.as_f64().unwrap() < s.channel.min_rate_bps {
                    count += 1;
                    ensure(listed.contains(&(k as u64)), || format!("{name}: user {k} below minimum rate at slot {t} not reported"))?;
                }
            }
            ensure(listed.len() <= rates.as_array().unwrap().len(), || "duplicate rate violations".into())?;
        }
        let summary = rep["min_rate_violations"].as_u64().unwrap() as usize;
        ensure(summary == count, || format!("{name}: summary counts {summary} rate violations, recomputed {count}"))?;
        below += count;
    }
    Ok(format!(
        "{} runs audited: one step per slot, altitude and power in bounds, all {below} minimum-rate shortfalls reported",
        dirs.len()
    ))
}

// ---------------------------------------------------------------- clustering

fn optimum_wcss(pts: &[[f64; 2]], k: usize) -> f64 {
    fn go(pts: &[[f64; 2]], k: usize, labels: &mut Vec<usize>, used: usize, best: &mut f64) {
        if labels.len() == pts.len() {
            if used == k {
                let mut total = 0.0;
                for c in 0..k {
                    let m: Vec<[f64; 2]> = pts.iter().zip(labels.iter()).filter(|(_, &l)| l == c).map(|(p, _)| *p).collect();
                    let (mx, my) = (
                        m.iter().map(|p| p[0]).sum::<f64>() / m.len() as f64,
                        m.iter().map(|p| p[1]).sum::<f64>() / m.len() as f64,
                    );
                    total += m.iter().map(|p| (p[0] - mx).powi(2) + (p[1] - my).powi(2)).sum::<f64>();
                }
                *best = best.min(total);
            }
            return;
        }
        if k - used > pts.len() - labels.len() {
            return;
        }
        for l in 0..=used.min(k - 1) {
            labels.push(l);
            go(pts, k, labels, used.max(l + 1), best);
            labels.pop();
        }
    }
    let mut best = f64::INFINITY;
    go(pts, k, &mut Vec::new(), 0, &mut best);
    best
}

fn criterion_8() -> Check {
    let mut r = ChaCha8Rng::seed_from_u64(808);
    let points = |r: &mut ChaCha8Rng, n: usize| -> Vec<[f64; 2]> { (0..n).map(|_| [r.gen_range(0.0..1000.0), r.gen_range(0.0..1000.0)]).collect() };
    let mut strictly_better = 0;
    for i in 0..100u64 {
        let n = r.gen_range(10..80);
        let k = r.gen_range(2..6);
        let pts = points(&mut r, n);
        let ga = GaParams { rng_seed: i, ..GaParams::default() };
        let g = wcss(&gak_means(&pts, k, &ga).map_err(|e| e.to_string())?, &pts);
        let km = wcss(&kmeans(&pts, k, i).map_err(|e| e.to_string())?, &pts);
        ensure(g <= km, || format!("instance {i}: GAK-means {g} > k-means {km}"))?;
        if g < km {
            strictly_better += 1;
        }
    }
    for i in 0..30u64 {
        let n = r.gen_range(4..=12);
        let k = r.gen_range(2..=4.min(n));
        let pts = points(&mut r, n);
        let opt = optimum_wcss(&pts, k);
        let ga = GaParams { rng_seed: 1000 + i, ..GaParams::default() };
        let g = wcss(&gak_means(&pts, k, &ga).map_err(|e| e.to_string())?, &pts);
        ensure(g <= opt * (1.0 + 1e-9) + 1e-9, || format!("enumerable instance {i}: {g} vs optimum {opt}"))?;
    }
    Ok(format!("100 paired instances (GAK-means strictly better on {strictly_better}); 30 enumerable instances solved exactly"))
}

// ---------------------------------------------------------------- driver

type Criterion = (u32, &'static str, fn() -> Check, Option<Duration>);

fn main() {
    let criteria: [Criterion; 10] = [
        (1, "channel oracle", criterion_1, Some(Duration::from_secs(10))),
        (2, "power bound soundness", criterion_2, Some(Duration::from_secs(60))),
        (3, "prediction trend", criterion_3, Some(Duration::from_secs(300))),
        (4, "ridge readout", criterion_4, None),
        (5, "tabular convergence", criterion_5, Some(Duration::from_secs(120))),
        (6, "placement convergence", criterion_6, Some(Duration::from_secs(900))),
        (7, "throughput ordering", criterion_7, Some(Duration::from_secs(1800))),
        (8, "clustering quality", criterion_8, None),
        (9, "determinism", criterion_9, None),
        (10, "kinematics and constraints", criterion_10, None),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (id, name, f, budget) in criteria {
        let t0 = Instant::now();
        let result = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let elapsed = t0.elapsed();
        let result = match (result, budget) {
            (Ok(_), Some(b)) if elapsed > b => Err(format!("took {:.1} s, budget {} s", elapsed.as_secs_f64(), b.as_secs())),
            (r, _) => r,
        };
        let (tag, detail) = match &result {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("criterion {id:>2} {tag} [{name}] {detail} ({:.1} s)", elapsed.as_secs_f64());
    }
    println!("acceptance: {} passed, {failed} failed", 10 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
