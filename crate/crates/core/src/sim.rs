//! Deterministic discrete-event simulator for multi-hop flooding
//! synchronization.
//!
//! Each node beacons whenever its own hardware clock crosses the next
//! multiple of `B f0` ticks (shifted by a per-node phase). A broadcast is
//! delivered to every neighbor at the same real instant, with an
//! independent Gaussian timestamp error added to the carried clock values.
//! Every receiver runs all configured protocols on the same message, so a
//! dual-protocol run sees exactly the message stream each protocol would see
//! alone. Events are ordered by `(time, node id, kind)` and all randomness
//! comes from seeded ChaCha streams, so a configuration fully determines the
//! resulting [`SkewTrace`].

use std::cmp::Ordering;
use std::collections::{BinaryHeap, VecDeque};
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::clocks::{ClockError, ClockParams, DelayModel, DriftModel, HardwareClock};
use crate::parallel::{map_indexed, Execution};
use crate::protocols::{
    GradesState, NodeId, PisyncState, Protocol, ProtocolError, StepSize, SyncMessage, SyncParams,
    SyncState,
};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid topology: {0}")]
    InvalidTopology(String),
    #[error(transparent)]
    Clock(#[from] ClockError),
    #[error("node {node} at t={time_seconds}s ({protocol}): {source}")]
    Protocol {
        node: NodeId,
        time_seconds: f64,
        protocol: Protocol,
        source: ProtocolError,
    },
}

/// Connected undirected graph over nodes `1..=n` with a designated reference.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Topology {
    adjacency: Vec<Vec<NodeId>>,
    reference: NodeId,
}

impl Topology {
    /// Builds a topology from undirected edges; rejects self-loops, unknown
    /// ids and disconnected graphs.
    pub fn new(n: usize, edges: &[(u32, u32)], reference: NodeId) -> Result<Self, SimError> {
        if n == 0 {
            return Err(SimError::InvalidTopology("no nodes".into()));
        }
        let valid = |id: u32| id >= 1 && id as usize <= n;
        if !valid(reference.0) {
            return Err(SimError::InvalidTopology(format!(
                "reference {reference} not in 1..={n}"
            )));
        }
        let mut adjacency = vec![Vec::new(); n];
        for &(a, b) in edges {
            if !valid(a) || !valid(b) || a == b {
                return Err(SimError::InvalidTopology(format!("bad edge ({a}, {b})")));
            }
            let (a, b) = (NodeId(a), NodeId(b));
            if !adjacency[a.index()].contains(&b) {
                adjacency[a.index()].push(b);
                adjacency[b.index()].push(a);
            }
        }
        for list in &mut adjacency {
            list.sort();
        }
        let topo = Self {
            adjacency,
            reference,
        };
        if topo.hops_from_reference().iter().any(Option::is_none) {
            return Err(SimError::InvalidTopology("graph is not connected".into()));
        }
        Ok(topo)
    }

    /// Path `1 - 2 - ... - n` rooted at node 1.
    pub fn line(n: usize) -> Result<Self, SimError> {
        let edges: Vec<(u32, u32)> = (1..n as u32).map(|i| (i, i + 1)).collect();
        Self::new(n, &edges, NodeId(1))
    }

    pub fn len(&self) -> usize {
        self.adjacency.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adjacency.is_empty()
    }

    pub fn reference(&self) -> NodeId {
        self.reference
    }

    pub fn neighbors(&self, node: NodeId) -> &[NodeId] {
        &self.adjacency[node.index()]
    }

    pub fn nodes(&self) -> impl Iterator<Item = NodeId> {
        (0..self.len()).map(NodeId::from_index)
    }

    /// BFS hop count from the reference to every node.
    pub fn hops_from_reference(&self) -> Vec<Option<usize>> {
        let mut hops = vec![None; self.len()];
        let mut queue = VecDeque::from([self.reference]);
        hops[self.reference.index()] = Some(0);
        while let Some(u) = queue.pop_front() {
            let h = hops[u.index()].expect("visited");
            for &v in self.neighbors(u) {
                if hops[v.index()].is_none() {
                    hops[v.index()] = Some(h + 1);
                    queue.push_back(v);
                }
            }
        }
        hops
    }

    /// Largest hop count from the reference.
    pub fn depth(&self) -> usize {
        self.hops_from_reference()
            .into_iter()
            .flatten()
            .max()
            .unwrap_or(0)
    }
}

/// Unit system the protocols run in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnitMode {
    /// Seconds and oscillator ticks.
    Physical,
    /// One beacon period is the time unit and `f0 = 1`, so ticks count rounds.
    Normalized,
}

impl UnitMode {
    pub fn name(self) -> &'static str {
        match self {
            UnitMode::Physical => "physical",
            UnitMode::Normalized => "normalized",
        }
    }
}

impl FromStr for UnitMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "physical" => Ok(UnitMode::Physical),
            "normalized" => Ok(UnitMode::Normalized),
            other => Err(format!("unknown unit mode `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProtocolSet {
    Grades,
    Pisync,
    Both,
}

impl ProtocolSet {
    pub fn protocols(self) -> &'static [Protocol] {
        match self {
            ProtocolSet::Grades => &[Protocol::Grades],
            ProtocolSet::Pisync => &[Protocol::Pisync],
            ProtocolSet::Both => &Protocol::ALL,
        }
    }
}

impl FromStr for ProtocolSet {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "grades" => Ok(ProtocolSet::Grades),
            "pisync" => Ok(ProtocolSet::Pisync),
            "both" => Ok(ProtocolSet::Both),
            other => Err(format!("unknown protocol set `{other}`")),
        }
    }
}

/// Step-size policy, expressed in the run's unit system.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AlphaPolicy {
    Fixed(f64),
    /// Fixed at this fraction of the protocol's step cap.
    FractionOfCap(f64),
    /// Adaptive, starting at this fraction of the cap.
    Adaptive {
        initial_fraction: f64,
    },
}

impl Default for AlphaPolicy {
    fn default() -> Self {
        AlphaPolicy::Adaptive {
            initial_fraction: 0.5,
        }
    }
}

impl AlphaPolicy {
    fn resolve(self, cap: f64) -> Result<StepSize, ProtocolError> {
        match self {
            AlphaPolicy::Fixed(a) => StepSize::fixed(a, cap),
            AlphaPolicy::FractionOfCap(x) => StepSize::fixed(x * cap, cap),
            AlphaPolicy::Adaptive { initial_fraction } => {
                StepSize::adaptive(initial_fraction * cap, cap)
            }
        }
    }
}

/// How oscillator drift is assigned to nodes.
#[derive(Debug, Clone, PartialEq)]
pub enum DriftAssignment {
    /// Each node gets a constant deviation drawn uniformly in `[-f_max, f_max]`.
    RandomConstant,
    /// Same model for every node (white models get independent streams).
    Uniform(DriftModel),
    /// One model per node, in node-id order; schedule times in seconds.
    PerNode(Vec<DriftModel>),
}

/// How the beacon grid of each node is offset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PhasePolicy {
    /// Non-reference phases uniform in `[0, B)`; the reference has phase 0.
    Random,
    Aligned,
}

/// Full description of one run. Physical quantities are in seconds and
/// ticks; `units` picks the unit system the protocols compute in.
#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub topology: Topology,
    pub beacon_period: f64,
    pub nominal_frequency: f64,
    /// Frequency deviation bound, ticks per second.
    pub max_deviation: f64,
    /// Standard deviation of the timestamp error, seconds.
    pub delay_std: f64,
    pub duration: f64,
    pub units: UnitMode,
    pub drift: DriftAssignment,
    pub protocols: ProtocolSet,
    pub grades_alpha: AlphaPolicy,
    pub pisync_alpha: AlphaPolicy,
    pub seed: u64,
    /// Trace sampling cadence in seconds; `None` means `B / 3`.
    pub sample_interval: Option<f64>,
    pub phases: PhasePolicy,
    /// Per-delivery loss probability. Kept at 0 for all reported experiments.
    pub drop_probability: f64,
    pub quantize: bool,
    /// Global-skew level, in seconds, below which the run counts as converged.
    pub convergence_threshold: f64,
}

impl SimConfig {
    /// Physical-unit defaults: `B = 30 s`, `f0 = 1 MHz`, 100 ppm drift bound,
    /// 10 us timestamp noise, adaptive steps for both protocols.
    pub fn new(topology: Topology) -> Self {
        Self {
            topology,
            beacon_period: 30.0,
            nominal_frequency: 1.0e6,
            max_deviation: 100.0,
            delay_std: 10.0e-6,
            duration: 3000.0,
            units: UnitMode::Physical,
            drift: DriftAssignment::RandomConstant,
            protocols: ProtocolSet::Both,
            grades_alpha: AlphaPolicy::default(),
            pisync_alpha: AlphaPolicy::default(),
            seed: 0,
            sample_interval: None,
            phases: PhasePolicy::Random,
            drop_probability: 0.0,
            quantize: false,
            convergence_threshold: 1.0e-3,
        }
    }

    fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::InvalidConfig(m.to_string()));
        let positive = |x: f64| x.is_finite() && x > 0.0;
        if !positive(self.beacon_period) {
            return bad("beacon period must be positive");
        }
        if !positive(self.nominal_frequency) {
            return bad("nominal frequency must be positive");
        }
        if !positive(self.duration) {
            return bad("duration must be positive");
        }
        if !(self.max_deviation.is_finite() && self.max_deviation >= 0.0)
            || self.max_deviation >= self.nominal_frequency
        {
            return bad("max deviation must be in [0, f0)");
        }
        if !(self.delay_std.is_finite() && self.delay_std >= 0.0) {
            return bad("delay std must be non-negative");
        }
        if let Some(s) = self.sample_interval {
            if !positive(s) {
                return bad("sample interval must be positive");
            }
        }
        if !(0.0..1.0).contains(&self.drop_probability) {
            return bad("drop probability must be in [0, 1)");
        }
        if !(self.convergence_threshold >= 0.0) {
            return bad("convergence threshold must be non-negative");
        }
        if let DriftAssignment::PerNode(models) = &self.drift {
            if models.len() != self.topology.len() {
                return bad("per-node drift list length must equal node count");
            }
        }
        Ok(())
    }

    fn scale(&self) -> Scale {
        match self.units {
            UnitMode::Physical => Scale {
                time: 1.0,
                f0: self.nominal_frequency,
                freq: 1.0,
            },
            UnitMode::Normalized => Scale {
                time: self.beacon_period,
                f0: 1.0,
                freq: 1.0 / self.nominal_frequency,
            },
        }
    }

    /// Beacon period and nominal frequency as the protocols see them.
    pub fn sync_params(&self) -> SyncParams {
        let s = self.scale();
        SyncParams {
            beacon_period: self.beacon_period / s.time,
            nominal_frequency: s.f0,
        }
    }

    /// Step cap of `protocol` in the run's units.
    pub fn step_cap(&self, protocol: Protocol) -> f64 {
        let sp = self.sync_params();
        protocol.step_cap(sp.beacon_period, sp.nominal_frequency)
    }
}

/// Conversion from physical to internal units.
#[derive(Debug, Clone, Copy)]
struct Scale {
    /// Seconds per internal time unit.
    time: f64,
    /// Internal nominal frequency.
    f0: f64,
    /// Multiplier from ticks/s to internal ticks per unit (applied after `time`).
    freq: f64,
}

/// One accepted synchronization message.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateRecord {
    pub t_seconds: f64,
    pub node: NodeId,
    pub protocol: Protocol,
    pub seq: u64,
    pub error: f64,
    pub alpha: f64,
    pub rate_multiplier: f64,
    /// Instantaneous hardware frequency relative to nominal, `f_u / f0`.
    pub hw_rate: f64,
}

impl UpdateRecord {
    /// Relative offset of the logical clock frequency, `f_u * rate / f0 - 1`.
    pub fn logical_rate_offset(&self) -> f64 {
        self.hw_rate * self.rate_multiplier - 1.0
    }
}

/// Sampled logical clocks and derived skew metrics of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct SkewTrace {
    pub units: UnitMode,
    pub protocols: Vec<Protocol>,
    pub nodes: Vec<NodeId>,
    pub reference: NodeId,
    /// Sample instants, seconds.
    pub times: Vec<f64>,
    /// `readings[p][k][i]`: protocol `p`, sample `k`, node index `i`; ticks.
    pub readings: Vec<Vec<Vec<f64>>>,
    /// `skew[p][k]`, ticks.
    pub skew: Vec<Vec<f64>>,
    pub updates: Vec<UpdateRecord>,
    /// Convergence threshold in ticks.
    pub threshold_ticks: f64,
}

impl SkewTrace {
    fn protocol_index(&self, protocol: Protocol) -> Option<usize> {
        self.protocols.iter().position(|&p| p == protocol)
    }

    pub fn skew_series(&self, protocol: Protocol) -> Option<&[f64]> {
        self.protocol_index(protocol)
            .map(|i| self.skew[i].as_slice())
    }

    pub fn readings(&self, protocol: Protocol) -> Option<&[Vec<f64>]> {
        self.protocol_index(protocol)
            .map(|i| self.readings[i].as_slice())
    }

    pub fn convergence_time(&self, protocol: Protocol) -> Option<f64> {
        convergence_time(
            &self.times,
            self.skew_series(protocol)?,
            self.threshold_ticks,
        )
    }

    pub fn updates_for(
        &self,
        node: NodeId,
        protocol: Protocol,
    ) -> impl Iterator<Item = &UpdateRecord> {
        self.updates
            .iter()
            .filter(move |u| u.node == node && u.protocol == protocol)
    }
}

/// Largest pairwise difference of simultaneous readings; 0 for fewer than two.
pub fn global_skew(readings: &[f64]) -> f64 {
    let mut it = readings.iter().copied();
    let Some(first) = it.next() else {
        return 0.0;
    };
    let (lo, hi) = it.fold((first, first), |(lo, hi), x| (lo.min(x), hi.max(x)));
    hi - lo
}

/// First sample instant after which the series stays strictly below
/// `threshold` until the end. `None` if the final sample is not below it.
pub fn convergence_time(times: &[f64], skew: &[f64], threshold: f64) -> Option<f64> {
    debug_assert_eq!(times.len(), skew.len());
    match skew.iter().rposition(|&s| !(s < threshold)) {
        None => times.first().copied(),
        Some(last) if last + 1 < skew.len() => Some(times[last + 1]),
        Some(_) => None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum EventKind {
    Beacon = 0,
    Sample = 1,
}

#[derive(Debug, Clone, Copy)]
struct Event {
    time: f64,
    node: u32,
    kind: EventKind,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Event {}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Event {
    // Reversed: BinaryHeap is a max-heap and we pop the earliest event.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .time
            .total_cmp(&self.time)
            .then_with(|| other.node.cmp(&self.node))
            .then_with(|| (other.kind as u8).cmp(&(self.kind as u8)))
    }
}

struct SimNode {
    id: NodeId,
    clock: HardwareClock,
    grades: Option<GradesState>,
    pisync: Option<PisyncState>,
    phase_ticks: f64,
    next_k: u64,
}

impl SimNode {
    fn states_mut(&mut self) -> [Option<&mut dyn SyncState>; 2] {
        [
            self.grades.as_mut().map(|s| s as &mut dyn SyncState),
            self.pisync.as_mut().map(|s| s as &mut dyn SyncState),
        ]
    }

    fn read(&self, protocol: Protocol) -> Result<f64, ClockError> {
        let hw = self.clock.reading();
        match protocol {
            Protocol::Grades => self.grades.as_ref().expect("configured").logical().read(hw),
            Protocol::Pisync => self.pisync.as_ref().expect("configured").logical().read(hw),
        }
    }
}

/// Runs one simulation to completion.
pub fn run(config: &SimConfig) -> Result<SkewTrace, SimError> {
    config.validate()?;
    let scale = config.scale();
    let sync = config.sync_params();
    let f0 = sync.nominal_frequency;
    let b = sync.beacon_period;
    let duration = config.duration / scale.time;
    let sample_interval = config.sample_interval.unwrap_or(config.beacon_period / 3.0) / scale.time;
    let max_dev = config.max_deviation * scale.freq;
    let delay = DelayModel::new(config.delay_std / scale.time)?;
    let topo = &config.topology;
    let reference = topo.reference();
    let protocols = config.protocols.protocols();

    let step = |protocol: Protocol, policy: AlphaPolicy| -> Result<Option<StepSize>, SimError> {
        if !protocols.contains(&protocol) {
            return Ok(None);
        }
        policy
            .resolve(config.step_cap(protocol))
            .map(Some)
            .map_err(|e| SimError::InvalidConfig(format!("{protocol} alpha: {e}")))
    };
    let grades_step = step(Protocol::Grades, config.grades_alpha)?;
    let pisync_step = step(Protocol::Pisync, config.pisync_alpha)?;

    let mut setup = ChaCha8Rng::seed_from_u64(config.seed);
    let mut channel = ChaCha8Rng::seed_from_u64(config.seed);
    channel.set_stream(1);

    let clock_params = ClockParams {
        nominal_frequency: f0,
        max_deviation: max_dev,
        quantize: config.quantize,
    };
    let max_fraction = config.max_deviation / config.nominal_frequency;
    let mut nodes = Vec::with_capacity(topo.len());
    for id in topo.nodes() {
        let phase = match config.phases {
            PhasePolicy::Random if id != reference => setup.random::<f64>(),
            _ => 0.0,
        };
        let drift = match &config.drift {
            DriftAssignment::RandomConstant => {
                let u: f64 = setup.random_range(-1.0..=1.0);
                DriftModel::Constant(u * max_fraction)
            }
            DriftAssignment::Uniform(m) => m.rescaled_time(1.0 / scale.time),
            DriftAssignment::PerNode(ms) => ms[id.index()].rescaled_time(1.0 / scale.time),
        };
        let clock_seed = setup.random::<u64>();
        let clock = HardwareClock::new(clock_params, drift, clock_seed)?;
        nodes.push(SimNode {
            id,
            clock,
            grades: grades_step.map(GradesState::new),
            pisync: pisync_step.map(PisyncState::new),
            phase_ticks: phase * b * f0,
            next_k: if phase > 0.0 { 0 } else { 1 },
        });
    }

    let mut queue = BinaryHeap::new();
    for node in &mut nodes {
        let target = (node.next_k as f64) * b * f0 + node.phase_ticks;
        let t = node.clock.time_at_ticks(target);
        queue.push(Event {
            time: t,
            node: node.id.0,
            kind: EventKind::Beacon,
        });
    }
    queue.push(Event {
        time: 0.0,
        node: u32::MAX,
        kind: EventKind::Sample,
    });

    let mut trace = SkewTrace {
        units: config.units,
        protocols: protocols.to_vec(),
        nodes: topo.nodes().collect(),
        reference,
        times: Vec::new(),
        readings: vec![Vec::new(); protocols.len()],
        skew: vec![Vec::new(); protocols.len()],
        updates: Vec::new(),
        threshold_ticks: config.convergence_threshold / scale.time * f0,
    };
    let mut sample_index: u64 = 0;

    while let Some(event) = queue.pop() {
        if event.time > duration {
            break;
        }
        let t = event.time;
        let t_seconds = t * scale.time;
        match event.kind {
            EventKind::Sample => {
                for node in &mut nodes {
                    node.clock.advance_to(t);
                }
                trace.times.push(t_seconds);
                for (pi, &p) in protocols.iter().enumerate() {
                    let row = nodes
                        .iter()
                        .map(|n| n.read(p))
                        .collect::<Result<Vec<_>, _>>()?;
                    trace.skew[pi].push(global_skew(&row));
                    trace.readings[pi].push(row);
                }
                sample_index += 1;
                queue.push(Event {
                    time: sample_index as f64 * sample_interval,
                    node: u32::MAX,
                    kind: EventKind::Sample,
                });
            }
            EventKind::Beacon => {
                let sender = NodeId(event.node);
                let is_reference = sender == reference;
                let msg = {
                    let node = &mut nodes[sender.index()];
                    node.clock.advance_to(t);
                    let hw = node.clock.reading();
                    let mut msg = SyncMessage {
                        sender,
                        seq: 0,
                        grades_clock: None,
                        pisync_clock: None,
                    };
                    for state in node.states_mut().into_iter().flatten() {
                        let protocol = state.protocol();
                        let (seq, clock) =
                            state.on_beacon_tick(is_reference, hw).map_err(|source| {
                                SimError::Protocol {
                                    node: sender,
                                    time_seconds: t_seconds,
                                    protocol,
                                    source,
                                }
                            })?;
                        msg.seq = seq;
                        match protocol {
                            Protocol::Grades => msg.grades_clock = Some(clock),
                            Protocol::Pisync => msg.pisync_clock = Some(clock),
                        }
                    }
                    msg
                };

                for &v in topo.neighbors(sender) {
                    let offset = delay.sample(&mut channel) * f0;
                    if config.drop_probability > 0.0
                        && channel.random::<f64>() < config.drop_probability
                    {
                        continue;
                    }
                    if v == reference {
                        continue;
                    }
                    let received = msg.perturbed(offset);
                    let node = &mut nodes[v.index()];
                    node.clock.advance_to(t);
                    let hw = node.clock.reading();
                    let hw_rate = node.clock.frequency() / f0;
                    for state in node.states_mut().into_iter().flatten() {
                        let protocol = state.protocol();
                        let outcome = state.on_message(&received, hw, &sync).map_err(|source| {
                            SimError::Protocol {
                                node: v,
                                time_seconds: t_seconds,
                                protocol,
                                source,
                            }
                        })?;
                        if let Some(up) = outcome {
                            trace.updates.push(UpdateRecord {
                                t_seconds,
                                node: v,
                                protocol,
                                seq: up.seq,
                                error: up.error,
                                alpha: up.alpha,
                                rate_multiplier: up.rate_multiplier,
                                hw_rate,
                            });
                        }
                    }
                }

                let node = &mut nodes[sender.index()];
                node.next_k += 1;
                let target = node.next_k as f64 * b * f0 + node.phase_ticks;
                let next = node.clock.time_at_ticks(target);
                queue.push(Event {
                    time: next,
                    node: sender.0,
                    kind: EventKind::Beacon,
                });
            }
        }
    }
    Ok(trace)
}

/// Mean, standard deviation and maximum of a slice; `None` when empty.
pub fn describe(xs: &[f64]) -> Option<(f64, f64, f64)> {
    if xs.is_empty() {
        return None;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Some((mean, var.sqrt(), max))
}

/// Mean global skew over the second half of the run.
pub fn steady_state_mean_skew(trace: &SkewTrace, protocol: Protocol) -> Option<f64> {
    let series = trace.skew_series(protocol)?;
    let end = *trace.times.last()?;
    let start = trace.times.partition_point(|&t| t < end / 2.0);
    describe(&series[start..]).map(|(mean, _, _)| mean)
}

/// Rms offset of the node `hops` away from the reference over the second half.
pub fn steady_state_reference_rms(
    trace: &SkewTrace,
    protocol: Protocol,
    node: NodeId,
) -> Option<f64> {
    let readings = trace.readings(protocol)?;
    let end = *trace.times.last()?;
    let start = trace.times.partition_point(|&t| t < end / 2.0);
    let r = trace.reference.index();
    let sq: Vec<f64> = readings[start..]
        .iter()
        .map(|row| (row[node.index()] - row[r]).powi(2))
        .collect();
    describe(&sq).map(|(mean, _, _)| mean.sqrt())
}

/// Post-convergence skew of one line diameter, across seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalingRow {
    pub diameter: usize,
    /// Seed average of the steady-state mean global skew.
    pub mean: f64,
    pub std: f64,
    pub per_seed: Vec<f64>,
    /// Seed average of the far-end node's rms offset from the reference.
    pub far_end_rms: f64,
}

/// Runs line topologies of the given diameters (hops from the reference at
/// one end) for every seed and reports the steady-state mean global skew of
/// `protocol`, averaged over seeds.
pub fn scaling_experiment(
    base: &SimConfig,
    protocol: Protocol,
    diameters: &[usize],
    seeds: &[u64],
    exec: Execution,
) -> Result<Vec<ScalingRow>, SimError> {
    if !base.protocols.protocols().contains(&protocol) {
        return Err(SimError::InvalidConfig(format!(
            "{protocol} not in the protocol set"
        )));
    }
    if let DriftAssignment::PerNode(_) = base.drift {
        return Err(SimError::InvalidConfig(
            "scaling needs a size-independent drift assignment".into(),
        ));
    }
    let jobs: Vec<(usize, u64)> = diameters
        .iter()
        .flat_map(|&d| seeds.iter().map(move |&s| (d, s)))
        .collect();
    let results = map_indexed(exec, jobs.len(), |i| -> Result<(f64, f64), SimError> {
        let (d, seed) = jobs[i];
        let mut cfg = base.clone();
        cfg.topology = Topology::line(d + 1)?;
        cfg.seed = seed;
        let trace = run(&cfg)?;
        let far = NodeId::from_index(d);
        Ok((
            steady_state_mean_skew(&trace, protocol).unwrap_or(0.0),
            steady_state_reference_rms(&trace, protocol, far).unwrap_or(0.0),
        ))
    });
    let mut values = results.into_iter();
    diameters
        .iter()
        .map(|&d| {
            let pairs = values
                .by_ref()
                .take(seeds.len())
                .collect::<Result<Vec<_>, _>>()?;
            let per_seed: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let (mean, std, _) = describe(&per_seed).unwrap_or((0.0, 0.0, 0.0));
            let far_end_rms = pairs.iter().map(|p| p.1).sum::<f64>() / pairs.len().max(1) as f64;
            Ok(ScalingRow {
                diameter: d,
                mean,
                std,
                per_seed,
                far_end_rms,
            })
        })
        .collect()
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(points: &[(f64, f64)]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = points
        .iter()
        .filter(|p| p.0 > 0.0 && p.1 > 0.0)
        .map(|p| (p.0.ln(), p.1.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    Some(sxy / sxx)
}

/// Exponent `p` of `mean ~ diameter^p`, fitted on log-log axes.
pub fn power_law_exponent(rows: &[ScalingRow]) -> Option<f64> {
    log_log_slope(
        &rows
            .iter()
            .map(|r| (r.diameter as f64, r.mean))
            .collect::<Vec<_>>(),
    )
}

/// Exponent of the far-end offset against diameter.
pub fn far_end_exponent(rows: &[ScalingRow]) -> Option<f64> {
    log_log_slope(
        &rows
            .iter()
            .map(|r| (r.diameter as f64, r.far_end_rms))
            .collect::<Vec<_>>(),
    )
}

impl fmt::Display for ScalingRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "D={} mean={:.4e} std={:.4e}",
            self.diameter, self.mean, self.std
        )
    }
}
