//! Leaky-integrator echo state network with a ridge-regression readout.
//!
//! The reservoir (`W_in`, sparse `W`) is frozen at construction; only `W_out` is
//! trained. Every user gets its own [`EsnModel`] (own state, own readout) over a
//! reservoir that may be shared read-only between users.

use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mobility::{train_len, WorldExtent};
use crate::rng;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EsnError {
    #[error("invalid ESN configuration: {0}")]
    InvalidConfig(String),
    #[error("recurrent matrix has spectral radius 0 and cannot be rescaled; raise sparsity or change the seed")]
    NilpotentReservoir,
    #[error("input has {got} components, model expects {expected}")]
    InputDim { expected: usize, got: usize },
    #[error("non-finite value in input at step {0}")]
    NonFiniteInput(usize),
    #[error("{inputs} inputs but {targets} targets")]
    LengthMismatch { inputs: usize, targets: usize },
    #[error("need at least 2 samples after a washout of {washout}, got {samples}")]
    TooFewSamples { samples: usize, washout: usize },
    #[error("normal equations are singular; use ridge_lambda > 0")]
    Singular,
    #[error("model has no trained readout")]
    Untrained,
    #[error("prediction window {start}..{end} is outside the {len}-slot trace")]
    BadWindow { start: usize, end: usize, len: usize },
    #[error("prediction and target shapes differ: {0}")]
    ShapeMismatch(String),
}

pub type Result<T> = std::result::Result<T, EsnError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EsnConfig {
    pub reservoir_size: usize,
    #[serde(default = "defaults::sparsity")]
    pub sparsity: f64,
    #[serde(default = "defaults::spectral_radius")]
    pub spectral_radius: f64,
    #[serde(default = "defaults::leak_rate")]
    pub leak_rate: f64,
    #[serde(default = "defaults::input_scaling")]
    pub input_scaling: f64,
    #[serde(default = "defaults::ridge_lambda")]
    pub ridge_lambda: f64,
    #[serde(default = "defaults::washout")]
    pub washout: usize,
    /// Fit the readout to the per-slot displacement and add it to the current position.
    #[serde(default = "defaults::displacement")]
    pub displacement_target: bool,
    #[serde(default)]
    pub rng_seed: u64,
}

mod defaults {
    pub fn sparsity() -> f64 {
        0.1
    }
    pub fn spectral_radius() -> f64 {
        0.9
    }
    pub fn leak_rate() -> f64 {
        0.3
    }
    pub fn input_scaling() -> f64 {
        1.0
    }
    pub fn ridge_lambda() -> f64 {
        1e-3
    }
    pub fn washout() -> usize {
        10
    }
    pub fn displacement() -> bool {
        true
    }
}

impl Default for EsnConfig {
    fn default() -> Self {
        Self {
            reservoir_size: 500,
            sparsity: defaults::sparsity(),
            spectral_radius: defaults::spectral_radius(),
            leak_rate: defaults::leak_rate(),
            input_scaling: defaults::input_scaling(),
            ridge_lambda: defaults::ridge_lambda(),
            washout: defaults::washout(),
            displacement_target: defaults::displacement(),
            rng_seed: 0,
        }
    }
}

impl EsnConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(EsnError::InvalidConfig(m));
        if self.reservoir_size == 0 {
            return bad("reservoir_size must be >= 1".into());
        }
        if !(self.sparsity > 0.0 && self.sparsity <= 1.0) {
            return bad(format!("sparsity must be in (0, 1], got {}", self.sparsity));
        }
        if !(self.spectral_radius > 0.0 && self.spectral_radius.is_finite()) {
            return bad(format!("spectral_radius must be > 0, got {}", self.spectral_radius));
        }
        if !(self.leak_rate > 0.0 && self.leak_rate <= 1.0) {
            return bad(format!("leak_rate must be in (0, 1], got {}", self.leak_rate));
        }
        if !(self.input_scaling > 0.0 && self.input_scaling.is_finite()) {
            return bad(format!("input_scaling must be > 0, got {}", self.input_scaling));
        }
        if !(self.ridge_lambda >= 0.0 && self.ridge_lambda.is_finite()) {
            return bad(format!("ridge_lambda must be >= 0, got {}", self.ridge_lambda));
        }
        Ok(())
    }
}

/// Compressed sparse row matrix, square.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl CsrMatrix {
    /// Builds from `(row, col, value)` triplets; duplicates are not merged.
    pub fn from_triplets(n: usize, mut triplets: Vec<(usize, usize, f64)>) -> Self {
        triplets.sort_by_key(|&(r, c, _)| (r, c));
        let mut row_ptr = vec![0usize; n + 1];
        for &(r, _, _) in &triplets {
            row_ptr[r + 1] += 1;
        }
        for i in 0..n {
            row_ptr[i + 1] += row_ptr[i];
        }
        Self {
            n,
            row_ptr,
            cols: triplets.iter().map(|t| t.1).collect(),
            vals: triplets.iter().map(|t| t.2).collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn triplets(&self) -> Vec<(usize, usize, f64)> {
        let mut out = Vec::with_capacity(self.nnz());
        for r in 0..self.n {
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                out.push((r, self.cols[k], self.vals[k]));
            }
        }
        out
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.n, self.n);
        for (r, c, v) in self.triplets() {
            m[(r, c)] += v;
        }
        m
    }

    pub fn scale(&mut self, s: f64) {
        self.vals.iter_mut().for_each(|v| *v *= s);
    }

    /// `out += self * x`
    pub fn mul_add(&self, x: &DVector<f64>, out: &mut DVector<f64>) {
        let x = x.as_slice();
        for (o, w) in out.as_mut_slice().iter_mut().zip(self.row_ptr.windows(2)) {
            let (cols, vals) = (&self.cols[w[0]..w[1]], &self.vals[w[0]..w[1]]);
            let mut acc = 0.0;
            for (&c, &v) in cols.iter().zip(vals) {
                acc += v * x[c];
            }
            *o += acc;
        }
    }
}

/// Largest eigenvalue modulus of a dense square matrix.
pub fn spectral_radius(m: &DMatrix<f64>) -> Result<f64> {
    let a = faer::Mat::<f64>::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)]);
    let eig = a
        .eigenvalues()
        .map_err(|e| EsnError::InvalidConfig(format!("eigenvalue solver failed: {e:?}")))?;
    Ok(eig.iter().map(|z| z.norm()).fold(0.0, f64::max))
}

/// Frozen input and recurrent weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Reservoir {
    pub config: EsnConfig,
    pub n_inputs: usize,
    /// `N_x x (1 + N_u)`, first column multiplies the bias.
    pub w_in: DMatrix<f64>,
    pub w: CsrMatrix,
}

impl Reservoir {
    pub fn size(&self) -> usize {
        self.config.reservoir_size
    }
}

/// Draws `W_in` and `W` and rescales `W` to the configured spectral radius.
pub fn build_reservoir(config: &EsnConfig, n_inputs: usize) -> Result<Reservoir> {
    config.validate()?;
    if n_inputs == 0 {
        return Err(EsnError::InvalidConfig("model needs at least one input".into()));
    }
    let n = config.reservoir_size;
    let mut r = rng::stream(config.rng_seed, "esn-reservoir", n as u64);
    let s = config.input_scaling;
    let w_in = DMatrix::from_fn(n, 1 + n_inputs, |_, _| r.gen_range(-s..s));

    let total = n * n;
    let nnz = ((config.sparsity * total as f64).round() as usize).clamp(1, total);
    let triplets: Vec<(usize, usize, f64)> = sample(&mut r, total, nnz)
        .into_iter()
        .map(|idx| (idx / n, idx % n, r.gen_range(-1.0..1.0)))
        .collect();
    let mut w = CsrMatrix::from_triplets(n, triplets);
    let rho = spectral_radius(&w.to_dense())?;
    if !(rho > 1e-12) {
        return Err(EsnError::NilpotentReservoir);
    }
    w.scale(config.spectral_radius / rho);
    log::debug!("reservoir {n}: {nnz} nonzeros, raw spectral radius {rho:.4}");
    Ok(Reservoir {
        config: *config,
        n_inputs,
        w_in,
        w,
    })
}

/// Readout fit diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FitStats {
    pub samples: usize,
    /// Worst relative residual of the ridge normal equations over output rows.
    pub normal_residual: f64,
    pub train_mse: f64,
}

#[derive(Debug, Clone)]
pub struct EsnModel {
    pub reservoir: Arc<Reservoir>,
    /// `N_y x (1 + N_x)` over the feature vector `[1; x]`.
    pub w_out: DMatrix<f64>,
    pub state: DVector<f64>,
    trained: bool,
}

impl EsnModel {
    pub fn new(reservoir: Arc<Reservoir>, n_outputs: usize) -> Self {
        let nx = reservoir.size();
        Self {
            w_out: DMatrix::zeros(n_outputs, 1 + nx),
            state: DVector::zeros(nx),
            trained: false,
            reservoir,
        }
    }

    pub fn n_features(&self) -> usize {
        1 + self.reservoir.size()
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub fn reset(&mut self) {
        self.state.fill(0.0);
    }

    /// One leaky-integrator update driven by input `u`.
    pub fn step(&mut self, u: &[f64]) -> Result<()> {
        let res = &self.reservoir;
        if u.len() != res.n_inputs {
            return Err(EsnError::InputDim {
                expected: res.n_inputs,
                got: u.len(),
            });
        }
        if u.iter().any(|v| !v.is_finite()) {
            return Err(EsnError::NonFiniteInput(0));
        }
        let mut pre = res.w_in.column(0).clone_owned();
        for (j, &uj) in u.iter().enumerate() {
            pre.axpy(uj, &res.w_in.column(j + 1), 1.0);
        }
        res.w.mul_add(&self.state, &mut pre);
        let a = res.config.leak_rate;
        for (x, p) in self.state.iter_mut().zip(pre.iter()) {
            *x = (1.0 - a) * *x + a * p.tanh();
        }
        Ok(())
    }

    /// Current feature vector `[1; x]`.
    pub fn features(&self) -> DVector<f64> {
        let mut z = DVector::zeros(self.n_features());
        z[0] = 1.0;
        z.rows_mut(1, self.state.len()).copy_from(&self.state);
        z
    }

    pub fn readout(&self) -> DVector<f64> {
        &self.w_out * self.features()
    }

    /// Drives the reservoir from a zero state over `inputs` and fits `W_out` to
    /// `targets` by ridge regression on the post-washout features.
    pub fn train_readout(&mut self, inputs: &[Vec<f64>], targets: &[Vec<f64>], lambda: f64) -> Result<FitStats> {
        if inputs.len() != targets.len() {
            return Err(EsnError::LengthMismatch {
                inputs: inputs.len(),
                targets: targets.len(),
            });
        }
        let washout = self.reservoir.config.washout;
        let samples = inputs.len().saturating_sub(washout);
        if samples < 2 {
            return Err(EsnError::TooFewSamples { samples, washout });
        }
        let ny = self.w_out.nrows();
        if let Some(t) = targets.iter().find(|t| t.len() != ny) {
            return Err(EsnError::ShapeMismatch(format!("target has {} components, expected {ny}", t.len())));
        }
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(EsnError::InvalidConfig(format!("ridge lambda must be >= 0, got {lambda}")));
        }
        let feats = self.harvest(inputs)?;
        let z = feats.columns(washout, samples).clone_owned();
        let y = DMatrix::from_fn(ny, samples, |i, j| targets[washout + j][i]);
        let (w_out, normal_residual) = ridge_solve(&z, &y, lambda)?;
        let fitted = &w_out * &z;
        let train_mse = (&fitted - &y).norm_squared() / (samples * ny) as f64;
        self.w_out = w_out;
        self.trained = true;
        Ok(FitStats {
            samples,
            normal_residual,
            train_mse,
        })
    }

    /// Drives the reservoir from a zero state and returns the feature vector after
    /// every input as the columns of a `(1 + N_x) x T` matrix.
    pub fn harvest(&mut self, inputs: &[Vec<f64>]) -> Result<DMatrix<f64>> {
        self.reset();
        let mut z = DMatrix::zeros(self.n_features(), inputs.len());
        for (t, u) in inputs.iter().enumerate() {
            self.step(u).map_err(|e| match e {
                EsnError::NonFiniteInput(_) => EsnError::NonFiniteInput(t),
                e => e,
            })?;
            z[(0, t)] = 1.0;
            z.view_mut((1, t), (self.state.len(), 1)).copy_from(&self.state);
        }
        Ok(z)
    }

    pub fn export(&self) -> EsnExport {
        let res = &self.reservoir;
        let rows = |m: &DMatrix<f64>| (0..m.nrows()).map(|r| m.row(r).iter().copied().collect()).collect();
        EsnExport {
            config: res.config,
            n_inputs: res.n_inputs,
            w_in: rows(&res.w_in),
            w: res.w.triplets(),
            w_out: rows(&self.w_out),
        }
    }
}

/// Serialisable snapshot of a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EsnExport {
    pub config: EsnConfig,
    pub n_inputs: usize,
    pub w_in: Vec<Vec<f64>>,
    pub w: Vec<(usize, usize, f64)>,
    pub w_out: Vec<Vec<f64>>,
}

fn cholesky_solve(a: &DMatrix<f64>, b: &DMatrix<f64>, refine: bool) -> Option<DMatrix<f64>> {
    let chol = Cholesky::<f64, Dyn>::new(a.clone())?;
    let mut x = chol.solve(b);
    if refine {
        let r = b - a * &x;
        x += chol.solve(&r);
    }
    x.iter().all(|v| v.is_finite()).then_some(x)
}

/// Relative residual of `(Z Z^T + lambda I) w = Z y` for every output row.
pub fn normal_equation_residual(z: &DMatrix<f64>, y: &DMatrix<f64>, w_out: &DMatrix<f64>, lambda: f64) -> f64 {
    let mut worst: f64 = 0.0;
    for j in 0..y.nrows() {
        let w = w_out.row(j).transpose();
        let yj = y.row(j).transpose();
        let rhs = z * &yj;
        let lhs = z * (z.transpose() * &w) + &w * lambda;
        let scale = rhs.norm();
        let res = (lhs - &rhs).norm();
        worst = worst.max(if scale > 0.0 { res / scale } else { res });
    }
    worst
}

/// Ridge regression `argmin ||W Z - Y||^2 + lambda ||W||^2` with features in the
/// columns of `z`. Solved in feature space when features <= samples, otherwise
/// through the sample Gram matrix.
pub fn ridge_solve(z: &DMatrix<f64>, y: &DMatrix<f64>, lambda: f64) -> Result<(DMatrix<f64>, f64)> {
    let (f, t) = z.shape();
    let w_out = if f <= t {
        let mut a = z * z.transpose();
        for i in 0..f {
            a[(i, i)] += lambda;
        }
        let b = z * y.transpose();
        cholesky_solve(&a, &b, true).ok_or(EsnError::Singular)?.transpose()
    } else {
        let mut g = z.transpose() * z;
        for i in 0..t {
            g[(i, i)] += lambda;
        }
        let alpha = cholesky_solve(&g, &y.transpose(), true).ok_or(EsnError::Singular)?;
        (z * alpha).transpose()
    };
    let residual = normal_equation_residual(z, y, &w_out, lambda);
    if lambda == 0.0 && !(residual < 1e-6) {
        return Err(EsnError::Singular);
    }
    Ok((w_out, residual))
}

/// Maps the extent onto `[-1, 1]^2`.
fn normalise(p: [f64; 2], extent: &WorldExtent) -> Vec<f64> {
    vec![2.0 * p[0] / extent.x_max - 1.0, 2.0 * p[1] / extent.y_max - 1.0]
}


/// Input/target pairs over a position sequence: input is the position at slot `t`,
/// target the position (or displacement) at `t + 1`, both scaled into `[-1, 1]`.
fn position_pairs(positions: &[[f64; 2]], extent: &WorldExtent, displacement: bool) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let n = positions.len().saturating_sub(1);
    let inputs = positions[..n].iter().map(|&p| normalise(p, extent)).collect();
    let targets = positions
        .windows(2)
        .map(|w| {
            let next = normalise(w[1], extent);
            if displacement {
                let cur = normalise(w[0], extent);
                vec![next[0] - cur[0], next[1] - cur[1]]
            } else {
                next
            }
        })
        .collect();
    (inputs, targets)
}

/// Maps a readout back to a clamped position, given the current position `p`.
fn to_position(y: &[f64], p: [f64; 2], extent: &WorldExtent, displacement: bool) -> [f64; 2] {
    let q = if displacement {
        [p[0] + y[0] * extent.x_max / 2.0, p[1] + y[1] * extent.y_max / 2.0]
    } else {
        [(y[0] + 1.0) * extent.x_max / 2.0, (y[1] + 1.0) * extent.y_max / 2.0]
    };
    extent.clamp(q[0], q[1])
}

/// Trains a one-step position model on `train`.
pub fn fit_positions(reservoir: Arc<Reservoir>, train: &[[f64; 2]], extent: &WorldExtent) -> Result<(EsnModel, FitStats)> {
    let lambda = reservoir.config.ridge_lambda;
    let (inputs, targets) = position_pairs(train, extent, reservoir.config.displacement_target);
    let mut model = EsnModel::new(reservoir, 2);
    let stats = model.train_readout(&inputs, &targets, lambda)?;
    Ok((model, stats))
}

/// Teacher-forced one-step-ahead predictions for slots `start..start + horizon`.
///
/// The prediction for slot `t` is read out after feeding the true positions of
/// slots `0..t`, so `trace` must hold at least `start + horizon - 1` slots.
pub fn predict_trace(
    model: &mut EsnModel,
    trace: &[[f64; 2]],
    start: usize,
    horizon: usize,
    extent: &WorldExtent,
) -> Result<Vec<[f64; 2]>> {
    if !model.is_trained() {
        return Err(EsnError::Untrained);
    }
    if horizon == 0 {
        return Ok(Vec::new());
    }
    let end = start + horizon;
    if start == 0 || end > trace.len() + 1 {
        return Err(EsnError::BadWindow {
            start,
            end,
            len: trace.len(),
        });
    }
    model.reset();
    let displacement = model.reservoir.config.displacement_target;
    let mut out = Vec::with_capacity(horizon);
    for (t, &p) in trace[..end - 1].iter().enumerate() {
        model.step(&normalise(p, extent)).map_err(|_| EsnError::NonFiniteInput(t))?;
        if t + 1 >= start {
            out.push(to_position(model.readout().as_slice(), p, extent, displacement));
        }
    }
    Ok(out)
}

/// Mean over users of each user's root mean squared Euclidean error over time.
pub fn user_rmse_mean(pred: &[Vec<[f64; 2]>], target: &[Vec<[f64; 2]>]) -> Result<f64> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(EsnError::ShapeMismatch(format!("{} vs {} users", pred.len(), target.len())));
    }
    let mut total = 0.0;
    for (u, (p, t)) in pred.iter().zip(target).enumerate() {
        if p.len() != t.len() || p.is_empty() {
            return Err(EsnError::ShapeMismatch(format!("user {u}: {} vs {} slots", p.len(), t.len())));
        }
        let sq: f64 = p
            .iter()
            .zip(t)
            .map(|(a, b)| (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2))
            .sum();
        total += (sq / p.len() as f64).sqrt();
    }
    Ok(total / pred.len() as f64)
}

/// Predicts every test slot as the mean training position.
pub fn historical_average(train: &[[f64; 2]], horizon: usize) -> Vec<[f64; 2]> {
    let n = train.len().max(1) as f64;
    let m = train.iter().fold([0.0, 0.0], |a, p| [a[0] + p[0], a[1] + p[1]]);
    vec![[m[0] / n, m[1] / n]; horizon]
}

/// Predicts slot `t` as the true position at `t - 1`.
pub fn zero_order_hold(trace: &[[f64; 2]], start: usize, horizon: usize) -> Vec<[f64; 2]> {
    (start..start + horizon).map(|t| trace[t - 1]).collect()
}

/// Per-cohort prediction output.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CohortPrediction {
    /// Full-length per-user series: slot 0 is the observed start, later slots are one-step predictions.
    pub predicted: Vec<Vec<[f64; 2]>>,
    pub test_start: usize,
    pub test_mse: f64,
    pub historical_average_mse: f64,
    pub zero_order_hold_mse: f64,
    pub worst_normal_residual: f64,
}

/// Trains one model per user on the first 75% of slots over a reservoir shared by
/// the cohort, and scores one-step predictions on the remaining slots.
pub fn predict_cohort(users: &[Vec<[f64; 2]>], config: &EsnConfig, extent: &WorldExtent) -> Result<CohortPrediction> {
    let n_slots = users.first().map_or(0, |u| u.len());
    let split = train_len(n_slots);
    let horizon = n_slots - split;
    if split < config.washout + 3 || horizon == 0 {
        return Err(EsnError::TooFewSamples {
            samples: split.saturating_sub(1 + config.washout),
            washout: config.washout,
        });
    }
    let reservoir = Arc::new(build_reservoir(config, 2)?);
    let lambda = config.ridge_lambda;
    let mut predicted = Vec::with_capacity(users.len());
    let (mut test_pred, mut test_true, mut ha, mut zoh) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let mut worst = 0.0f64;
    for trace in users {
        if trace.len() != n_slots {
            return Err(EsnError::ShapeMismatch("traces differ in length".into()));
        }
        // one reservoir pass serves both the fit (training slots) and every prediction
        let (inputs, targets) = position_pairs(trace, extent, config.displacement_target);
        let mut model = EsnModel::new(reservoir.clone(), 2);
        let feats = model.harvest(&inputs)?;
        let samples = split - 1 - config.washout;
        let z = feats.columns(config.washout, samples).clone_owned();
        let y = DMatrix::from_fn(2, samples, |i, j| targets[config.washout + j][i]);
        let (w_out, residual) = ridge_solve(&z, &y, lambda)?;
        worst = worst.max(residual);
        let out = &w_out * &feats;
        let mut full = vec![trace[0]];
        for t in 0..n_slots - 1 {
            full.push(to_position(&[out[(0, t)], out[(1, t)]], trace[t], extent, config.displacement_target));
        }
        test_pred.push(full[split..].to_vec());
        test_true.push(trace[split..].to_vec());
        ha.push(historical_average(&trace[..split], horizon));
        zoh.push(zero_order_hold(trace, split, horizon));
        predicted.push(full);
    }
    Ok(CohortPrediction {
        predicted,
        test_start: split,
        test_mse: user_rmse_mean(&test_pred, &test_true)?,
        historical_average_mse: user_rmse_mean(&ha, &test_true)?,
        zero_order_hold_mse: user_rmse_mean(&zoh, &test_true)?,
        worst_normal_residual: worst,
    })
}
