//! Per-node GraDeS and PISync state machines.
//!
//! Both protocols share the flooding skeleton: accept a message only when it
//! carries a newer sequence number, reset the logical clock to the received
//! value, adapt the step size and apply a rate correction. They differ in the
//! correction term (`alpha * 2 B f0 e` for GraDeS, `alpha * e` for PISync),
//! in the signal the adaptation keys on and in the step-size cap.

use std::fmt;

use thiserror::Error;

use crate::clocks::{ClockError, LogicalClock};

/// Node identifier, `1..=n` within a topology.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub u32);

impl NodeId {
    pub fn index(self) -> usize {
        self.0 as usize - 1
    }

    pub fn from_index(index: usize) -> Self {
        NodeId(index as u32 + 1)
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Protocol {
    Grades,
    Pisync,
}

impl Protocol {
    pub const ALL: [Protocol; 2] = [Protocol::Grades, Protocol::Pisync];

    pub fn name(self) -> &'static str {
        match self {
            Protocol::Grades => "grades",
            Protocol::Pisync => "pisync",
        }
    }

    /// Largest step size the adaptive rule may reach.
    ///
    /// GraDeS may sit on its bound `1/(B^2 f0^2)`; PISync stays strictly
    /// below `2/(B f0)`.
    pub fn step_cap(self, beacon_period: f64, nominal_frequency: f64) -> f64 {
        let bf = beacon_period * nominal_frequency;
        match self {
            Protocol::Grades => 1.0 / (bf * bf),
            Protocol::Pisync => (2.0 / bf).next_down(),
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Protocol {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "grades" => Ok(Protocol::Grades),
            "pisync" => Ok(Protocol::Pisync),
            other => Err(format!("unknown protocol `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProtocolError {
    #[error("rate multiplier would become {rate} (alpha {alpha} is mis-scaled for these units)")]
    NonPositiveRate { rate: f64, alpha: f64 },
    #[error("step size {alpha} outside (0, {cap}]")]
    StepOutOfRange { alpha: f64, cap: f64 },
    #[error(transparent)]
    Clock(#[from] ClockError),
}

/// Beacon period and nominal frequency in the units the protocol runs in.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyncParams {
    pub beacon_period: f64,
    pub nominal_frequency: f64,
}

/// Synchronization broadcast. In dual-protocol mode both clock fields are set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyncMessage {
    pub sender: NodeId,
    pub seq: u64,
    pub grades_clock: Option<f64>,
    pub pisync_clock: Option<f64>,
}

impl SyncMessage {
    pub fn clock(&self, protocol: Protocol) -> Option<f64> {
        match protocol {
            Protocol::Grades => self.grades_clock,
            Protocol::Pisync => self.pisync_clock,
        }
    }

    /// Copy as seen by a receiver whose channel added `offset` to every
    /// carried clock value.
    pub fn perturbed(&self, offset: f64) -> SyncMessage {
        SyncMessage {
            grades_clock: self.grades_clock.map(|c| c + offset),
            pisync_clock: self.pisync_clock.map(|c| c + offset),
            ..*self
        }
    }
}

/// Step size with its adaptation mode and cap.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepSize {
    pub alpha: f64,
    pub cap: f64,
    pub adaptive: bool,
}

impl StepSize {
    pub fn fixed(alpha: f64, cap: f64) -> Result<Self, ProtocolError> {
        Self::checked(alpha, cap, false)
    }

    pub fn adaptive(initial: f64, cap: f64) -> Result<Self, ProtocolError> {
        Self::checked(initial, cap, true)
    }

    fn checked(alpha: f64, cap: f64, adaptive: bool) -> Result<Self, ProtocolError> {
        if !(alpha > 0.0 && alpha <= cap && cap.is_finite()) {
            return Err(ProtocolError::StepOutOfRange { alpha, cap });
        }
        Ok(Self {
            alpha,
            cap,
            adaptive,
        })
    }
}

/// Error of the local clock against a received one: positive when local is ahead.
pub fn compute_error(local_read: f64, received_clock: f64) -> f64 {
    local_read - received_clock
}

/// Expected derivative of the squared error with respect to the rate multiplier.
pub fn grades_gradient(error: f64, beacon_period: f64, nominal_frequency: f64) -> f64 {
    2.0 * beacon_period * nominal_frequency * error
}

/// Doubles the step when consecutive signals agree in sign, divides it by
/// three otherwise (a zero product counts as disagreement), then clamps to
/// `alpha_max` and refuses to underflow to zero.
pub fn adapt_step(alpha: f64, signal_now: f64, signal_prev: f64, alpha_max: f64) -> f64 {
    let next = if signal_now * signal_prev > 0.0 {
        2.0 * alpha
    } else {
        alpha / 3.0
    };
    if next > alpha_max {
        alpha_max
    } else if next == 0.0 {
        alpha
    } else {
        next
    }
}

/// What an accepted message did to a node's state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Update {
    pub seq: u64,
    pub error: f64,
    /// Signal the step adaptation keyed on: the gradient for GraDeS, the
    /// error for PISync.
    pub signal: f64,
    pub alpha: f64,
    pub rate_multiplier: f64,
}

/// Common interface of the two state machines.
pub trait SyncState {
    fn protocol(&self) -> Protocol;
    fn seq(&self) -> u64;
    fn logical(&self) -> &LogicalClock;
    fn step(&self) -> &StepSize;

    /// Processes `msg` received at hardware reading `hw_now`. Returns `None`
    /// when the message is stale and the state was left untouched.
    fn on_message(
        &mut self,
        msg: &SyncMessage,
        hw_now: f64,
        params: &SyncParams,
    ) -> Result<Option<Update>, ProtocolError>;

    /// Beacon instant: the reference advances the round; every node reports
    /// its logical reading and current sequence number.
    fn on_beacon_tick(
        &mut self,
        is_reference: bool,
        hw_now: f64,
    ) -> Result<(u64, f64), ProtocolError>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Core {
    step: StepSize,
    prev_signal: f64,
    seq: u64,
    logical: LogicalClock,
}

impl Core {
    fn new(step: StepSize) -> Self {
        Self {
            step,
            prev_signal: 0.0,
            seq: 0,
            logical: LogicalClock::default(),
        }
    }

    /// Message flow shared by both protocols; `signal` maps the error to the
    /// adaptation signal and `correction` maps (alpha, signal, error) to the
    /// amount subtracted from the rate multiplier.
    fn accept(
        &mut self,
        msg_seq: u64,
        received: f64,
        hw_now: f64,
        signal: impl Fn(f64) -> f64,
        correction: impl Fn(f64, f64, f64) -> f64,
    ) -> Result<Option<Update>, ProtocolError> {
        if msg_seq <= self.seq {
            return Ok(None);
        }
        let local = self.logical.read(hw_now)?;
        let error = compute_error(local, received);
        let s = signal(error);
        let alpha = if self.step.adaptive {
            adapt_step(self.step.alpha, s, self.prev_signal, self.step.cap)
        } else {
            self.step.alpha
        };
        let rate = self.logical.rate_multiplier - correction(alpha, s, error);
        if !(rate > 0.0 && rate.is_finite()) {
            return Err(ProtocolError::NonPositiveRate { rate, alpha });
        }
        self.seq = msg_seq;
        self.logical.set_offset(received, hw_now)?;
        self.logical.rate_multiplier = rate;
        self.step.alpha = alpha;
        self.prev_signal = s;
        Ok(Some(Update {
            seq: msg_seq,
            error,
            signal: s,
            alpha,
            rate_multiplier: rate,
        }))
    }

    fn beacon(&mut self, is_reference: bool, hw_now: f64) -> Result<(u64, f64), ProtocolError> {
        if is_reference {
            self.seq += 1;
        }
        Ok((self.seq, self.logical.read(hw_now)?))
    }
}

/// GraDeS node state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradesState {
    core: Core,
}

impl GradesState {
    pub fn new(step: StepSize) -> Self {
        Self {
            core: Core::new(step),
        }
    }

    pub fn with_logical(step: StepSize, logical: LogicalClock) -> Self {
        let mut s = Self::new(step);
        s.core.logical = logical;
        s
    }

    pub fn prev_gradient(&self) -> f64 {
        self.core.prev_signal
    }
}

impl SyncState for GradesState {
    fn protocol(&self) -> Protocol {
        Protocol::Grades
    }
    fn seq(&self) -> u64 {
        self.core.seq
    }
    fn logical(&self) -> &LogicalClock {
        &self.core.logical
    }
    fn step(&self) -> &StepSize {
        &self.core.step
    }

    fn on_message(
        &mut self,
        msg: &SyncMessage,
        hw_now: f64,
        params: &SyncParams,
    ) -> Result<Option<Update>, ProtocolError> {
        let Some(received) = msg.grades_clock else {
            return Ok(None);
        };
        let SyncParams {
            beacon_period,
            nominal_frequency,
        } = *params;
        self.core.accept(
            msg.seq,
            received,
            hw_now,
            |e| grades_gradient(e, beacon_period, nominal_frequency),
            |alpha, gradient, _| alpha * gradient,
        )
    }

    fn on_beacon_tick(
        &mut self,
        is_reference: bool,
        hw_now: f64,
    ) -> Result<(u64, f64), ProtocolError> {
        self.core.beacon(is_reference, hw_now)
    }
}

/// PISync node state (single feedback term on the rate multiplier).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PisyncState {
    core: Core,
}

impl PisyncState {
    pub fn new(step: StepSize) -> Self {
        Self {
            core: Core::new(step),
        }
    }

    pub fn with_logical(step: StepSize, logical: LogicalClock) -> Self {
        let mut s = Self::new(step);
        s.core.logical = logical;
        s
    }

    pub fn prev_error(&self) -> f64 {
        self.core.prev_signal
    }
}

impl SyncState for PisyncState {
    fn protocol(&self) -> Protocol {
        Protocol::Pisync
    }
    fn seq(&self) -> u64 {
        self.core.seq
    }
    fn logical(&self) -> &LogicalClock {
        &self.core.logical
    }
    fn step(&self) -> &StepSize {
        &self.core.step
    }

    fn on_message(
        &mut self,
        msg: &SyncMessage,
        hw_now: f64,
        _params: &SyncParams,
    ) -> Result<Option<Update>, ProtocolError> {
        let Some(received) = msg.pisync_clock else {
            return Ok(None);
        };
        self.core.accept(
            msg.seq,
            received,
            hw_now,
            |e| e,
            |alpha, _, error| alpha * error,
        )
    }

    fn on_beacon_tick(
        &mut self,
        is_reference: bool,
        hw_now: f64,
    ) -> Result<(u64, f64), ProtocolError> {
        self.core.beacon(is_reference, hw_now)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    const UNIT: SyncParams = SyncParams {
        beacon_period: 1.0,
        nominal_frequency: 1.0,
    };

    fn msg(seq: u64, clock: f64) -> SyncMessage {
        SyncMessage {
            sender: NodeId(1),
            seq,
            grades_clock: Some(clock),
            pisync_clock: Some(clock),
        }
    }

    fn grades(alpha: f64, adaptive: bool) -> GradesState {
        let cap = Protocol::Grades.step_cap(1.0, 1.0);
        let step = if adaptive {
            StepSize::adaptive(alpha, cap).unwrap()
        } else {
            StepSize::fixed(alpha, cap).unwrap()
        };
        GradesState::new(step)
    }

    #[test]
    fn error_sign_convention() {
        assert_eq!(compute_error(100.0, 100.0), 0.0);
        assert_eq!(compute_error(105.0, 100.0), 5.0);
        assert_eq!(compute_error(100.0, 103.0), -3.0);
    }

    #[test]
    fn gradient_examples() {
        assert_eq!(grades_gradient(0.0, 30.0, 1.0), 0.0);
        assert_eq!(grades_gradient(1.0, 1.0, 1.0), 2.0);
        assert_relative_eq!(grades_gradient(3e-3, 30.0, 1.0), 0.18, max_relative = 1e-12);
    }

    #[test]
    fn adapt_step_branches() {
        assert_eq!(adapt_step(0.2, 1.0, 2.0, 1.0), 0.4);
        assert_relative_eq!(adapt_step(0.3, 1.0, -2.0, 1.0), 0.1, max_relative = 1e-15);
        assert_eq!(adapt_step(0.8, 1.0, 1.0, 1.0), 1.0);
        assert_relative_eq!(adapt_step(0.3, 0.0, 1.0, 1.0), 0.1, max_relative = 1e-15);
        assert_relative_eq!(adapt_step(0.3, -1.0, -1.0, 1.0), 0.6);
    }

    #[test]
    fn adapt_step_keeps_previous_on_underflow() {
        let tiny = f64::from_bits(1); // smallest subnormal
        assert_eq!(adapt_step(tiny, 1.0, -1.0, 1.0), tiny);
    }

    #[test]
    fn pisync_cap_is_strictly_inside_bound() {
        let cap = Protocol::Pisync.step_cap(30.0, 1.0e6);
        assert!(cap < 2.0 / 30.0e6);
        assert_eq!(Protocol::Grades.step_cap(1.0, 1.0), 1.0);
    }

    #[test]
    fn stale_message_leaves_state_bit_identical() {
        let mut s = grades(0.1, false);
        s.on_message(&msg(4, 1.0), 1.0, &UNIT).unwrap().unwrap();
        let before = s;
        assert!(s.on_message(&msg(4, 9.0), 2.0, &UNIT).unwrap().is_none());
        assert!(s.on_message(&msg(2, 9.0), 2.0, &UNIT).unwrap().is_none());
        assert_eq!(s, before);

        let mut p = PisyncState::new(StepSize::fixed(0.1, 2.0f64.next_down()).unwrap());
        p.on_message(&msg(1, 1.0), 1.0, &UNIT).unwrap();
        let before = p;
        assert!(p.on_message(&msg(1, 5.0), 3.0, &UNIT).unwrap().is_none());
        assert_eq!(p, before);
    }

    #[test]
    fn grades_rate_update_substitution() {
        // Local reads 1.05 at hw 1.05 (rate 1); received 1.0 => e = 0.05.
        let mut s = grades(0.1, false);
        let up = s.on_message(&msg(1, 1.0), 1.05, &UNIT).unwrap().unwrap();
        assert_relative_eq!(up.error, 0.05, max_relative = 1e-12);
        assert_relative_eq!(s.logical().rate_multiplier, 0.99, max_relative = 1e-12);
        assert_eq!(s.logical().read(1.05).unwrap(), 1.0);
        assert_eq!(s.seq(), 1);
    }

    #[test]
    fn pisync_rate_update_substitution() {
        let mut p = PisyncState::new(StepSize::fixed(0.1, 2.0f64.next_down()).unwrap());
        p.on_message(&msg(1, 1.0), 1.05, &UNIT).unwrap().unwrap();
        assert_relative_eq!(p.logical().rate_multiplier, 0.995, max_relative = 1e-12);
        assert_relative_eq!(p.prev_error(), 0.05, max_relative = 1e-12);
    }

    #[test]
    fn zero_error_only_resets_offset() {
        let mut s = grades(0.4, true);
        s.on_message(&msg(1, 2.0), 2.0, &UNIT).unwrap().unwrap();
        assert_eq!(s.logical().rate_multiplier, 1.0);
        // Zero product: shrink branch.
        assert_relative_eq!(s.step().alpha, 0.4 / 3.0);

        let mut p = PisyncState::new(StepSize::fixed(0.5, 1.9).unwrap());
        p.on_message(&msg(1, 3.0), 3.0, &UNIT).unwrap();
        assert_eq!(p.logical().rate_multiplier, 1.0);
    }

    #[test]
    fn first_adaptation_shrinks_from_zero_prev_gradient() {
        let mut s = grades(0.3, true);
        s.on_message(&msg(1, 1.0), 1.1, &UNIT).unwrap();
        assert_relative_eq!(s.step().alpha, 0.1, max_relative = 1e-15);
        // Same sign again: doubles.
        s.on_message(&msg(2, 2.0), 2.2, &UNIT).unwrap();
        assert_relative_eq!(s.step().alpha, 0.2, max_relative = 1e-15);
    }

    #[test]
    fn clamp_holds_alpha_at_bound() {
        let mut s = grades(0.8, true);
        s.core.prev_signal = 1.0;
        s.on_message(&msg(1, 1.0), 1.01, &UNIT).unwrap();
        assert_eq!(s.step().alpha, 1.0);
    }

    #[test]
    fn mis_scaled_alpha_is_reported() {
        // Physical units with a normalized-scale alpha blows the rate up.
        let params = SyncParams {
            beacon_period: 30.0,
            nominal_frequency: 1.0e6,
        };
        let mut s = GradesState::new(StepSize::fixed(0.5, 1.0).unwrap());
        let err = s
            .on_message(&msg(1, 30.0e6), 30.003e6, &params)
            .unwrap_err();
        assert!(matches!(err, ProtocolError::NonPositiveRate { .. }));
        assert_eq!(s.seq(), 0);
    }

    #[test]
    fn step_size_validation() {
        assert!(StepSize::fixed(0.0, 1.0).is_err());
        assert!(StepSize::fixed(1.5, 1.0).is_err());
        assert!(StepSize::adaptive(1.0, 1.0).is_ok());
    }

    #[test]
    fn beacon_tick_sequence_rules() {
        let mut r = grades(0.1, false);
        for _ in 0..4 {
            r.on_beacon_tick(true, 0.0).unwrap();
        }
        let (seq, clock) = r.on_beacon_tick(true, 42.5).unwrap();
        assert_eq!(seq, 5);
        // Reference logical clock is its hardware clock.
        assert_eq!(clock, 42.5);

        let mut n = grades(0.1, false);
        n.on_message(&msg(4, 10.0), 10.0, &UNIT).unwrap();
        let (seq, _) = n.on_beacon_tick(false, 11.0).unwrap();
        assert_eq!(seq, 4);
    }

    #[test]
    fn missing_protocol_field_is_ignored() {
        let mut s = grades(0.1, false);
        let m = SyncMessage {
            grades_clock: None,
            ..msg(3, 1.0)
        };
        assert!(s.on_message(&m, 1.0, &UNIT).unwrap().is_none());
        assert_eq!(s.seq(), 0);
    }

    proptest! {
        #[test]
        fn discard_is_monotone(seqs in proptest::collection::vec(0u64..20, 1..40), clocks in proptest::collection::vec(-1.0f64..1.0, 40)) {
            let mut s = grades(0.05, true);
            let mut hw = 0.0;
            let mut last = 0;
            for (i, &q) in seqs.iter().enumerate() {
                hw += 1.0;
                let before = s;
                let res = s.on_message(&msg(q, hw + clocks[i] * 1e-3), hw, &UNIT).unwrap();
                prop_assert!(s.seq() >= last);
                if q <= before.seq() {
                    prop_assert!(res.is_none());
                    prop_assert_eq!(s, before);
                } else {
                    prop_assert_eq!(s.seq(), q);
                }
                last = s.seq();
            }
        }

        #[test]
        fn accepted_message_sets_clock_exactly(received in -1e6f64..1e6, hw in 0.0f64..1e6, rate in 0.5f64..1.5) {
            let step = StepSize::fixed(1e-9, 1.0).unwrap();
            let logical = LogicalClock::new(0.0, rate, 0.0).unwrap();
            let mut s = GradesState::with_logical(step, logical);
            s.on_message(&msg(1, received), hw, &UNIT).unwrap();
            prop_assert_eq!(s.logical().read(hw).unwrap(), received);
        }

        #[test]
        fn adapted_alpha_stays_in_range(alpha in 1e-300f64..1.0, a in -1.0f64..1.0, b in -1.0f64..1.0) {
            let next = adapt_step(alpha, a, b, 1.0);
            prop_assert!(next > 0.0 && next <= 1.0);
        }
    }
}
