//! Closed-form results for the pairwise GraDeS and PISync recursions, and a
//! Monte-Carlo oracle that rolls the scalar recursions directly.
//!
//! All quantities follow the pairwise model: the error `e` is in seconds,
//! `z = rate * f0 - 1` is the normalized rate error, `w` is the per-round
//! integral of the frequency deviation and `d` the per-round delay noise.
//!
//! GraDeS: `z' = z (1 - 2 a B f0 g) + 2 a B f0 (f0 d - w)`
//! PISync: `z' = z (1 - a g) + a (f0 d - w)`
//!
//! with `g = B f0 + w` and `e' = z (B + w/f0) + w/f0 - d`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::parallel::{map_indexed, Execution};
use crate::protocols::Protocol;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AnalysisError {
    #[error("invalid parameters: {0}")]
    InvalidParams(&'static str),
    #[error("{protocol} variance undefined: denominator {denominator} <= 0")]
    InvalidRegime {
        protocol: Protocol,
        denominator: f64,
    },
}

/// Free symbols of the pairwise model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SystemParams {
    /// Beacon period `B`.
    pub b: f64,
    /// Nominal frequency `f0`.
    pub f0: f64,
    /// Frequency deviation bound `f_max` (same units as `f0`).
    pub f_max: f64,
    /// Delay standard deviation `sigma_d`.
    pub sigma_d: f64,
    pub alpha: f64,
}

impl SystemParams {
    /// Unit-normalized point (`B = f0 = 1`).
    pub fn normalized(alpha: f64, f_max: f64, sigma_d: f64) -> Self {
        Self {
            b: 1.0,
            f0: 1.0,
            f_max,
            sigma_d,
            alpha,
        }
    }

    pub fn with_alpha(self, alpha: f64) -> Self {
        Self { alpha, ..self }
    }

    pub fn validate(&self) -> Result<(), AnalysisError> {
        let finite = [self.b, self.f0, self.f_max, self.sigma_d, self.alpha]
            .iter()
            .all(|x| x.is_finite());
        if !finite {
            return Err(AnalysisError::InvalidParams("non-finite value"));
        }
        if self.b <= 0.0 {
            return Err(AnalysisError::InvalidParams("B must be positive"));
        }
        if self.f0 <= 0.0 {
            return Err(AnalysisError::InvalidParams("f0 must be positive"));
        }
        if self.f_max < 0.0 || self.sigma_d < 0.0 {
            return Err(AnalysisError::InvalidParams(
                "noise scales must be non-negative",
            ));
        }
        if self.alpha < 0.0 {
            return Err(AnalysisError::InvalidParams("alpha must be non-negative"));
        }
        Ok(())
    }

    /// `E[w^2] = B f_max^2 / 3`.
    pub fn drift_second_moment(&self) -> f64 {
        self.b * self.f_max * self.f_max / 3.0
    }

    /// `E[g^2] = B^2 f0^2 + B f_max^2 / 3`.
    fn g_second_moment(&self) -> f64 {
        self.b * self.b * self.f0 * self.f0 + self.drift_second_moment()
    }

    /// Loop gain `kappa` such that the mean rate error contracts by `1 - kappa`.
    pub fn loop_gain(&self, protocol: Protocol) -> f64 {
        match protocol {
            Protocol::Grades => 2.0 * self.alpha * self.b * self.b * self.f0 * self.f0,
            Protocol::Pisync => self.alpha * self.b * self.f0,
        }
    }
}

/// `(0, 1 - 2 a B^2 f0^2)`.
pub fn grades_eigenvalues(p: &SystemParams) -> (f64, f64) {
    (0.0, 1.0 - p.loop_gain(Protocol::Grades))
}

/// `(0, 1 - a B f0)`.
pub fn pisync_eigenvalues(p: &SystemParams) -> (f64, f64) {
    (0.0, 1.0 - p.loop_gain(Protocol::Pisync))
}

pub fn eigenvalues(protocol: Protocol, p: &SystemParams) -> (f64, f64) {
    match protocol {
        Protocol::Grades => grades_eigenvalues(p),
        Protocol::Pisync => pisync_eigenvalues(p),
    }
}

/// Open upper bound on alpha for mean stability.
pub fn stability_bound(protocol: Protocol, b: f64, f0: f64) -> f64 {
    match protocol {
        Protocol::Grades => 1.0 / (b * b * f0 * f0),
        Protocol::Pisync => 2.0 / (b * f0),
    }
}

pub fn is_stable(protocol: Protocol, p: &SystemParams) -> bool {
    p.alpha > 0.0 && p.alpha < stability_bound(protocol, p.b, p.f0)
}

/// Equilibrium `(e, rate)`; identical for both protocols: `(0, 1/f0)`.
pub fn grades_steady_state(p: &SystemParams) -> (f64, f64) {
    (0.0, 1.0 / p.f0)
}

pub fn pisync_steady_state(p: &SystemParams) -> (f64, f64) {
    (0.0, 1.0 / p.f0)
}

/// Shared tail of both variance expressions given the `E[z^2]` denominator.
fn variance_with(
    p: &SystemParams,
    protocol: Protocol,
    denominator: f64,
) -> Result<f64, AnalysisError> {
    p.validate()?;
    if denominator <= 0.0 {
        return Err(AnalysisError::InvalidRegime {
            protocol,
            denominator,
        });
    }
    let w2 = p.drift_second_moment();
    let f0_sq = p.f0 * p.f0;
    let z2 = p.alpha * (w2 + f0_sq * p.sigma_d * p.sigma_d) / denominator;
    Ok(z2 * (p.b * p.b + w2 / f0_sq) + w2 / f0_sq + p.sigma_d * p.sigma_d)
}

/// Asymptotic error variance of GraDeS, seconds^2.
pub fn grades_variance(p: &SystemParams) -> Result<f64, AnalysisError> {
    variance_with(p, Protocol::Grades, 1.0 - p.alpha * p.g_second_moment())
}

/// Asymptotic error variance of PISync, seconds^2.
pub fn pisync_variance(p: &SystemParams) -> Result<f64, AnalysisError> {
    variance_with(
        p,
        Protocol::Pisync,
        2.0 * p.b * p.f0 - p.alpha * p.g_second_moment(),
    )
}

pub fn variance(protocol: Protocol, p: &SystemParams) -> Result<f64, AnalysisError> {
    match protocol {
        Protocol::Grades => grades_variance(p),
        Protocol::Pisync => pisync_variance(p),
    }
}

/// Outcome of a pairwise comparison at equal alpha.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Winner {
    Grades,
    Pisync,
    Tie,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Comparison {
    pub convergence_winner: Winner,
    pub variance_winner: Winner,
    pub grades_lambda: f64,
    pub pisync_lambda: f64,
    pub grades_variance: f64,
    pub pisync_variance: f64,
}

fn smaller(grades: f64, pisync: f64) -> Winner {
    if grades < pisync {
        Winner::Grades
    } else if pisync < grades {
        Winner::Pisync
    } else {
        Winner::Tie
    }
}

/// Compares spectral radii and asymptotic variances at the shared alpha.
/// Both protocols must be in their variance regime at `p.alpha`.
pub fn compare_protocols(p: &SystemParams) -> Result<Comparison, AnalysisError> {
    let (_, lg) = grades_eigenvalues(p);
    let (_, lp) = pisync_eigenvalues(p);
    let vg = grades_variance(p)?;
    let vp = pisync_variance(p)?;
    Ok(Comparison {
        convergence_winner: smaller(lg.abs(), lp.abs()),
        variance_winner: smaller(vg, vp),
        grades_lambda: lg,
        pisync_lambda: lp,
        grades_variance: vg,
        pisync_variance: vp,
    })
}

/// How the per-round delay noise `d` is generated in the oracle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseConvention {
    /// `d ~ N(0, sigma_d^2)` independently each round.
    Iid,
    /// `d_{h+1} = T_{h+1} - T_h` from an explicit delay sequence, so
    /// `E[d^2] = 2 sigma_d^2` and consecutive `d` are correlated.
    DelayDifference,
}

impl NoiseConvention {
    pub fn name(self) -> &'static str {
        match self {
            NoiseConvention::Iid => "iid",
            NoiseConvention::DelayDifference => "delay-difference",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McOptions {
    pub noise: NoiseConvention,
    /// Initial normalized rate error `z_0`.
    pub z0: f64,
    pub execution: Execution,
}

impl Default for McOptions {
    fn default() -> Self {
        Self {
            noise: NoiseConvention::Iid,
            z0: 0.0,
            execution: Execution::default(),
        }
    }
}

/// Steady-state statistics from the oracle.
#[derive(Debug, Clone, PartialEq)]
pub struct McEstimate {
    pub mean_error: f64,
    /// Standard error of `mean_error`, from the spread of per-trial means.
    pub mean_error_se: f64,
    pub var_error: f64,
    pub mean_rate: f64,
    pub samples: usize,
}

/// Per-round stochastic inputs of the recursion.
struct Noise {
    rng: ChaCha8Rng,
    w: Option<Normal<f64>>,
    t: Option<Normal<f64>>,
    convention: NoiseConvention,
    prev_delay: f64,
}

impl Noise {
    fn new(p: &SystemParams, convention: NoiseConvention, seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        let w_sd = p.drift_second_moment().sqrt();
        let mut noise = Self {
            rng,
            w: (w_sd > 0.0).then(|| Normal::new(0.0, w_sd).expect("finite")),
            t: (p.sigma_d > 0.0).then(|| Normal::new(0.0, p.sigma_d).expect("finite")),
            convention,
            prev_delay: 0.0,
        };
        if convention == NoiseConvention::DelayDifference {
            noise.prev_delay = noise.delay();
        }
        noise
    }

    fn delay(&mut self) -> f64 {
        match &self.t {
            Some(n) => n.sample(&mut self.rng),
            None => 0.0,
        }
    }

    /// Returns `(w, d)` for one round.
    fn draw(&mut self) -> (f64, f64) {
        let w = match &self.w {
            Some(n) => n.sample(&mut self.rng),
            None => 0.0,
        };
        let d = match self.convention {
            NoiseConvention::Iid => self.delay(),
            NoiseConvention::DelayDifference => {
                let next = self.delay();
                let d = next - self.prev_delay;
                self.prev_delay = next;
                d
            }
        };
        (w, d)
    }
}

/// One round of the scalar recursion. Returns `(e_{h+1}, z_{h+1})`.
pub fn recursion_step(protocol: Protocol, p: &SystemParams, z: f64, w: f64, d: f64) -> (f64, f64) {
    let error = z * (p.b + w / p.f0) + w / p.f0 - d;
    let z_next = match protocol {
        Protocol::Grades => z - 2.0 * p.alpha * p.b * p.f0 * p.f0 * error,
        Protocol::Pisync => z - p.alpha * p.f0 * error,
    };
    (error, z_next)
}

struct TrialStats {
    sum_e: f64,
    sum_e2: f64,
    sum_rate: f64,
    n: usize,
}

fn run_trial(
    protocol: Protocol,
    p: &SystemParams,
    rounds: usize,
    seed: u64,
    trial: u64,
    opts: &McOptions,
) -> TrialStats {
    let mut noise = Noise::new(p, opts.noise, seed, trial);
    let burn_in = rounds / 2;
    let mut z = opts.z0;
    let mut stats = TrialStats {
        sum_e: 0.0,
        sum_e2: 0.0,
        sum_rate: 0.0,
        n: 0,
    };
    for h in 0..rounds {
        let (w, d) = noise.draw();
        let (e, z_next) = recursion_step(protocol, p, z, w, d);
        z = z_next;
        if h >= burn_in {
            stats.sum_e += e;
            stats.sum_e2 += e * e;
            stats.sum_rate += (z + 1.0) / p.f0;
            stats.n += 1;
        }
    }
    stats
}

/// Rolls `trials` independent copies of the recursion for `rounds` rounds,
/// discards the first half of each as burn-in and returns pooled
/// steady-state statistics of the error.
pub fn estimate_variance_mc(
    p: &SystemParams,
    protocol: Protocol,
    rounds: usize,
    trials: usize,
    seed: u64,
    opts: &McOptions,
) -> Result<McEstimate, AnalysisError> {
    p.validate()?;
    if rounds < 2 || trials < 2 {
        return Err(AnalysisError::InvalidParams(
            "need at least 2 rounds and 2 trials",
        ));
    }
    let per_trial = map_indexed(opts.execution, trials, |i| {
        run_trial(protocol, p, rounds, seed, i as u64, opts)
    });
    let n: usize = per_trial.iter().map(|s| s.n).sum();
    let nf = n as f64;
    let sum_e: f64 = per_trial.iter().map(|s| s.sum_e).sum();
    let sum_e2: f64 = per_trial.iter().map(|s| s.sum_e2).sum();
    let sum_rate: f64 = per_trial.iter().map(|s| s.sum_rate).sum();
    let mean = sum_e / nf;
    let var = (sum_e2 / nf - mean * mean).max(0.0) * nf / (nf - 1.0);

    let trial_means: Vec<f64> = per_trial.iter().map(|s| s.sum_e / s.n as f64).collect();
    let m = trial_means.len() as f64;
    let tm_mean = trial_means.iter().sum::<f64>() / m;
    let tm_var = trial_means
        .iter()
        .map(|x| (x - tm_mean).powi(2))
        .sum::<f64>()
        / (m - 1.0);

    Ok(McEstimate {
        mean_error: mean,
        mean_error_se: (tm_var / m).sqrt(),
        var_error: var,
        mean_rate: sum_rate / nf,
        samples: n,
    })
}

/// Trial-averaged `E[z_h]` for `h = 0..=rounds` (index 0 is `z0`).
pub fn mean_rate_error_trajectory(
    p: &SystemParams,
    protocol: Protocol,
    rounds: usize,
    trials: usize,
    seed: u64,
    opts: &McOptions,
) -> Vec<f64> {
    let paths = map_indexed(opts.execution, trials.max(1), |i| {
        let mut noise = Noise::new(p, opts.noise, seed, i as u64);
        let mut z = opts.z0;
        let mut path = Vec::with_capacity(rounds + 1);
        path.push(z);
        for _ in 0..rounds {
            let (w, d) = noise.draw();
            z = recursion_step(protocol, p, z, w, d).1;
            path.push(z);
        }
        path
    });
    let m = paths.len() as f64;
    (0..=rounds)
        .map(|h| paths.iter().map(|path| path[h]).sum::<f64>() / m)
        .collect()
}

/// Geometric decay ratio of a sequence: least-squares slope of `ln|x_h|`
/// against `h`, exponentiated, with the sign taken from consecutive terms.
/// Terms whose magnitude falls below `floor * |x_0|` are ignored.
pub fn geometric_ratio(xs: &[f64], floor: f64) -> Option<f64> {
    let first = xs.first()?.abs();
    let pts: Vec<(f64, f64)> = xs
        .iter()
        .enumerate()
        .take_while(|(_, x)| x.abs() > floor * first && x.abs() > 0.0)
        .map(|(h, x)| (h as f64, x.abs().ln()))
        .collect();
    if pts.len() < 3 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let magnitude = (sxy / sxx).exp();
    let flips = xs[..pts.len()]
        .windows(2)
        .filter(|w| w[0] * w[1] < 0.0)
        .count();
    let sign = if 2 * flips > pts.len() - 1 { -1.0 } else { 1.0 };
    Some(sign * magnitude)
}
