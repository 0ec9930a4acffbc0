//! Hardware oscillators, logical clocks and the message-delay process.
//!
//! A [`HardwareClock`] integrates a bounded, possibly random, frequency
//! path over real time. Its frequency is always piecewise constant, so both
//! directions of the time/tick mapping are exact: [`HardwareClock::advance`]
//! integrates forward and [`HardwareClock::time_at_ticks`] inverts the
//! integral to find when a tick count will be reached. Random drift is drawn
//! from a per-clock stream in segment order, which keeps every trajectory a
//! pure function of `(parameters, seed)` regardless of how it is queried.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

/// Default nominal oscillator frequency, ticks per second.
pub const DEFAULT_NOMINAL_FREQUENCY: f64 = 1.0e6;
/// Default bound on the frequency deviation, as a fraction of nominal (100 ppm).
pub const DEFAULT_MAX_DEVIATION_PPM: f64 = 100.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ClockError {
    #[error("nominal frequency must be positive and finite, got {0}")]
    InvalidNominal(f64),
    #[error("maximum deviation {max_deviation} must be non-negative and below the nominal frequency {nominal}")]
    InvalidDeviation { nominal: f64, max_deviation: f64 },
    #[error(
        "drift of {deviation} ticks/s exceeds the configured bound of {max_deviation} ticks/s"
    )]
    DriftOutOfBounds { deviation: f64, max_deviation: f64 },
    #[error("drift schedule must start at t=0 and be strictly increasing in time")]
    BadSchedule,
    #[error("white drift segment length must be positive, got {0}")]
    BadSegment(f64),
    #[error("hardware reading {hw_now} precedes the last update at {hw_at_update}")]
    NonMonotonic { hw_now: f64, hw_at_update: f64 },
    #[error("rate multiplier must be positive and finite, got {0}")]
    NonPositiveRate(f64),
    #[error("delay standard deviation must be non-negative and finite, got {0}")]
    InvalidDelay(f64),
}

/// How the integral of a white frequency deviation is realized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WhiteRealization {
    /// One independent uniform deviation in `[-f_max, f_max]` per unit of
    /// real time. Exact model; integral variance over length `B` is
    /// `B f_max^2 / 3`.
    ExactUniform,
    /// Frequency constant over blocks of `block` time units with a Gaussian
    /// block integral of variance `block f_max^2 / 3`, clamped so the
    /// frequency stays inside its bound.
    Gaussian { block: f64 },
}

/// Frequency deviation process of one oscillator.
///
/// Deviations are fractions of the nominal frequency (`1e-4` is 100 ppm).
#[derive(Debug, Clone, PartialEq)]
pub enum DriftModel {
    Constant(f64),
    /// `(start_time, deviation)` pairs; the first must start at 0.
    PiecewiseConstant(Vec<(f64, f64)>),
    WhitePerUnit(WhiteRealization),
}

impl DriftModel {
    /// Copy of the model with schedule times multiplied by `scale`.
    pub fn rescaled_time(&self, scale: f64) -> DriftModel {
        match self {
            DriftModel::PiecewiseConstant(steps) => {
                DriftModel::PiecewiseConstant(steps.iter().map(|&(t, d)| (t * scale, d)).collect())
            }
            other => other.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClockParams {
    pub nominal_frequency: f64,
    pub max_deviation: f64,
    /// Report `floor`ed tick counts from [`HardwareClock::reading`].
    pub quantize: bool,
}

impl ClockParams {
    pub fn new(nominal_frequency: f64, max_deviation: f64) -> Self {
        Self {
            nominal_frequency,
            max_deviation,
            quantize: false,
        }
    }
}

impl Default for ClockParams {
    fn default() -> Self {
        Self::new(
            DEFAULT_NOMINAL_FREQUENCY,
            DEFAULT_NOMINAL_FREQUENCY * DEFAULT_MAX_DEVIATION_PPM * 1e-6,
        )
    }
}

#[derive(Debug, Clone)]
struct WhiteTrack {
    rng: ChaCha8Rng,
    segment: f64,
    gaussian: Option<Normal<f64>>,
    /// Index of the segment stored at `devs[0]`.
    first: u64,
    devs: VecDeque<f64>,
}

impl WhiteTrack {
    fn deviation(&mut self, index: u64, max_deviation: f64) -> f64 {
        debug_assert!(index >= self.first);
        while self.first + self.devs.len() as u64 <= index {
            let dev = match &self.gaussian {
                None => {
                    if max_deviation > 0.0 {
                        self.rng.random_range(-max_deviation..=max_deviation)
                    } else {
                        0.0
                    }
                }
                Some(normal) => normal
                    .sample(&mut self.rng)
                    .clamp(-max_deviation, max_deviation),
            };
            self.devs.push_back(dev);
        }
        self.devs[(index - self.first) as usize]
    }

    fn release_before(&mut self, index: u64) {
        while self.first < index && !self.devs.is_empty() {
            self.devs.pop_front();
            self.first += 1;
        }
    }
}

/// A node's free-running oscillator counter `h(t)`.
#[derive(Debug, Clone)]
pub struct HardwareClock {
    params: ClockParams,
    drift: DriftModel,
    now: f64,
    ticks: f64,
    white: Option<WhiteTrack>,
}

impl HardwareClock {
    /// Builds a clock at `t = 0` with `h = 0`. `seed` drives white drift and is
    /// ignored by the deterministic models.
    pub fn new(params: ClockParams, drift: DriftModel, seed: u64) -> Result<Self, ClockError> {
        let f0 = params.nominal_frequency;
        if !(f0.is_finite() && f0 > 0.0) {
            return Err(ClockError::InvalidNominal(f0));
        }
        let fmax = params.max_deviation;
        if !(fmax.is_finite() && fmax >= 0.0 && fmax < f0) {
            return Err(ClockError::InvalidDeviation {
                nominal: f0,
                max_deviation: fmax,
            });
        }
        let check = |fraction: f64| {
            let deviation = fraction * f0;
            // Allow rounding in the ppm -> ticks/s conversion.
            if !deviation.is_finite() || deviation.abs() > fmax * (1.0 + 1e-12) {
                Err(ClockError::DriftOutOfBounds {
                    deviation,
                    max_deviation: fmax,
                })
            } else {
                Ok(())
            }
        };
        let mut white = None;
        match &drift {
            DriftModel::Constant(d) => check(*d)?,
            DriftModel::PiecewiseConstant(steps) => {
                if steps.is_empty() || steps[0].0 != 0.0 {
                    return Err(ClockError::BadSchedule);
                }
                if steps.windows(2).any(|w| !(w[1].0 > w[0].0)) {
                    return Err(ClockError::BadSchedule);
                }
                for &(_, d) in steps {
                    check(d)?;
                }
            }
            DriftModel::WhitePerUnit(realization) => {
                let (segment, gaussian) = match *realization {
                    WhiteRealization::ExactUniform => (1.0, None),
                    WhiteRealization::Gaussian { block } => {
                        if !(block.is_finite() && block > 0.0) {
                            return Err(ClockError::BadSegment(block));
                        }
                        let sd = fmax / (3.0 * block).sqrt();
                        (block, Some(Normal::new(0.0, sd).expect("finite sd")))
                    }
                };
                white = Some(WhiteTrack {
                    rng: ChaCha8Rng::seed_from_u64(seed),
                    segment,
                    gaussian,
                    first: 0,
                    devs: VecDeque::new(),
                });
            }
        }
        Ok(Self {
            params,
            drift,
            now: 0.0,
            ticks: 0.0,
            white,
        })
    }

    pub fn params(&self) -> &ClockParams {
        &self.params
    }

    pub fn drift(&self) -> &DriftModel {
        &self.drift
    }

    /// Real time the clock has been advanced to.
    pub fn now(&self) -> f64 {
        self.now
    }

    /// Unquantized accumulated ticks `h(now)`.
    pub fn accumulated_ticks(&self) -> f64 {
        self.ticks
    }

    /// Reading as software sees it; floored when quantization is on.
    pub fn reading(&self) -> f64 {
        if self.params.quantize {
            self.ticks.floor()
        } else {
            self.ticks
        }
    }

    /// Instantaneous frequency (ticks per time unit) at the current instant.
    pub fn frequency(&mut self) -> f64 {
        let (_, dev) = self.piece(self.now);
        self.params.nominal_frequency + dev
    }

    /// Returns the end of the constant-frequency piece containing `t` and the
    /// deviation (ticks per time unit) on that piece.
    fn piece(&mut self, t: f64) -> (f64, f64) {
        let f0 = self.params.nominal_frequency;
        let fmax = self.params.max_deviation;
        match &self.drift {
            DriftModel::Constant(d) => (f64::INFINITY, d * f0),
            DriftModel::PiecewiseConstant(steps) => {
                let i = steps.partition_point(|&(start, _)| start <= t).max(1) - 1;
                let end = steps.get(i + 1).map_or(f64::INFINITY, |s| s.0);
                (end, steps[i].1 * f0)
            }
            DriftModel::WhitePerUnit(_) => {
                let track = self.white.as_mut().expect("white track");
                let mut index = (t / track.segment).floor().max(0.0) as u64;
                let mut end = (index + 1) as f64 * track.segment;
                if end <= t {
                    index += 1;
                    end = (index + 1) as f64 * track.segment;
                }
                (end, track.deviation(index, fmax))
            }
        }
    }

    /// Advances real time by `real_dt` and returns the ticks elapsed.
    ///
    /// Panics if `real_dt` is negative or not finite.
    pub fn advance(&mut self, real_dt: f64) -> f64 {
        assert!(
            real_dt.is_finite() && real_dt >= 0.0,
            "advance requires a non-negative interval, got {real_dt}"
        );
        let target = self.now + real_dt;
        let f0 = self.params.nominal_frequency;
        let mut t = self.now;
        let mut elapsed = 0.0;
        while t < target {
            let (end, dev) = self.piece(t);
            let stop = end.min(target);
            elapsed += (stop - t) * (f0 + dev);
            t = stop;
        }
        self.now = target;
        self.ticks += elapsed;
        if let Some(track) = self.white.as_mut() {
            let index = (target / track.segment).floor() as u64;
            track.release_before(index);
        }
        elapsed
    }

    /// Advances to absolute real time `t` (no-op if `t` is not in the future).
    pub fn advance_to(&mut self, t: f64) -> f64 {
        if t > self.now {
            self.advance(t - self.now)
        } else {
            0.0
        }
    }

    /// Real time at which the accumulated tick count reaches `target`.
    /// Returns `now` if it has already been reached.
    pub fn time_at_ticks(&mut self, target: f64) -> f64 {
        if target <= self.ticks {
            return self.now;
        }
        let f0 = self.params.nominal_frequency;
        let mut t = self.now;
        let mut acc = self.ticks;
        loop {
            let (end, dev) = self.piece(t);
            let rate = f0 + dev;
            let need = target - acc;
            if end.is_infinite() || acc + rate * (end - t) >= target {
                return t + need / rate;
            }
            acc += rate * (end - t);
            t = end;
        }
    }
}

/// Offset plus rate multiplier over a hardware clock:
/// `l(h) = value_at_update + rate_multiplier * (h - hw_at_update)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogicalClock {
    pub value_at_update: f64,
    pub rate_multiplier: f64,
    pub hw_at_update: f64,
}

impl Default for LogicalClock {
    fn default() -> Self {
        Self {
            value_at_update: 0.0,
            rate_multiplier: 1.0,
            hw_at_update: 0.0,
        }
    }
}

impl LogicalClock {
    pub fn new(
        value_at_update: f64,
        rate_multiplier: f64,
        hw_at_update: f64,
    ) -> Result<Self, ClockError> {
        if !(rate_multiplier.is_finite() && rate_multiplier > 0.0) {
            return Err(ClockError::NonPositiveRate(rate_multiplier));
        }
        Ok(Self {
            value_at_update,
            rate_multiplier,
            hw_at_update,
        })
    }

    fn check(&self, hw_now: f64) -> Result<(), ClockError> {
        if hw_now < self.hw_at_update {
            Err(ClockError::NonMonotonic {
                hw_now,
                hw_at_update: self.hw_at_update,
            })
        } else {
            Ok(())
        }
    }

    pub fn read(&self, hw_now: f64) -> Result<f64, ClockError> {
        self.check(hw_now)?;
        Ok(self.value_at_update + self.rate_multiplier * (hw_now - self.hw_at_update))
    }

    /// Offset correction: the clock reads `new_value` at `hw_now`; the rate is kept.
    pub fn set_offset(&mut self, new_value: f64, hw_now: f64) -> Result<(), ClockError> {
        self.check(hw_now)?;
        self.value_at_update = new_value;
        self.hw_at_update = hw_now;
        Ok(())
    }

    /// Changes the rate multiplier at `hw_now`, re-anchoring so the reading is
    /// continuous across the change.
    pub fn set_rate(&mut self, rate_multiplier: f64, hw_now: f64) -> Result<(), ClockError> {
        if !(rate_multiplier.is_finite() && rate_multiplier > 0.0) {
            return Err(ClockError::NonPositiveRate(rate_multiplier));
        }
        let value = self.read(hw_now)?;
        self.value_at_update = value;
        self.hw_at_update = hw_now;
        self.rate_multiplier = rate_multiplier;
        Ok(())
    }
}

/// Zero-mean Gaussian residual timestamping error per delivered message.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DelayModel {
    std_dev: f64,
    normal: Option<Normal<f64>>,
}

impl DelayModel {
    pub fn new(std_dev: f64) -> Result<Self, ClockError> {
        if !(std_dev.is_finite() && std_dev >= 0.0) {
            return Err(ClockError::InvalidDelay(std_dev));
        }
        let normal = (std_dev > 0.0).then(|| Normal::new(0.0, std_dev).expect("finite sd"));
        Ok(Self { std_dev, normal })
    }

    pub fn std_dev(&self) -> f64 {
        self.std_dev
    }

    /// One draw; negative values are kept.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match &self.normal {
            Some(n) => n.sample(rng),
            None => 0.0,
        }
    }
}
