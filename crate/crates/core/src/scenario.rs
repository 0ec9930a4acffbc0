//! Named experiment presets, run summaries and CSV output.
//!
//! A preset is a [`Settings`] value with scenario-specific defaults; `key=value`
//! overrides are validated against the keys the scenario actually uses.
//! Running a scenario produces a [`ScenarioOutput`] holding the CSV files in
//! memory, so identical settings give byte-identical files.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::analysis::{
    estimate_variance_mc, variance, AnalysisError, McEstimate, McOptions, NoiseConvention,
    SystemParams,
};
use crate::clocks::DriftModel;
use crate::parallel::{map_indexed, Execution};
use crate::protocols::{NodeId, Protocol};
use crate::sim::{
    self, describe, AlphaPolicy, DriftAssignment, PhasePolicy, ProtocolSet, ScalingRow, SimConfig,
    SimError, SkewTrace, Topology, UnitMode,
};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Parse { path: PathBuf, msg: String },
}

fn usage<T>(msg: impl Into<String>) -> Result<T, ScenarioError> {
    Err(ScenarioError::Usage(msg.into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScenarioName {
    Fig1Pairwise,
    Fig2Stepsize,
    Fig3Multihop,
    Scaling,
    TheoryCheck,
}

impl ScenarioName {
    pub const ALL: [ScenarioName; 5] = [
        ScenarioName::Fig1Pairwise,
        ScenarioName::Fig2Stepsize,
        ScenarioName::Fig3Multihop,
        ScenarioName::Scaling,
        ScenarioName::TheoryCheck,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScenarioName::Fig1Pairwise => "fig1-pairwise",
            ScenarioName::Fig2Stepsize => "fig2-stepsize",
            ScenarioName::Fig3Multihop => "fig3-multihop",
            ScenarioName::Scaling => "scaling",
            ScenarioName::TheoryCheck => "theory-check",
        }
    }

    /// Override keys this scenario reads.
    pub fn keys(self) -> &'static [&'static str] {
        match self {
            ScenarioName::Fig1Pairwise => &[
                "seed",
                "beacon_period",
                "nominal_frequency",
                "f_max_ppm",
                "sigma_d",
                "duration",
                "units",
                "sample_interval",
                "quantize",
                "drift_ppm",
                "tolerance_ppm",
                "protocols",
                "alpha",
                "grades_alpha",
                "pisync_alpha",
                "switch_ppm",
                "switch_round",
            ],
            ScenarioName::Fig2Stepsize => &[
                "seed",
                "beacon_period",
                "nominal_frequency",
                "f_max_ppm",
                "sigma_d",
                "duration",
                "units",
                "sample_interval",
                "quantize",
                "drift_ppm",
                "tolerance_ppm",
                "protocol",
                "alphas",
                "adaptive_initial",
            ],
            ScenarioName::Fig3Multihop | ScenarioName::Scaling => &[
                "seed",
                "seeds",
                "beacon_period",
                "nominal_frequency",
                "f_max_ppm",
                "sigma_d",
                "duration",
                "units",
                "sample_interval",
                "quantize",
                "protocols",
                "alpha",
                "grades_alpha",
                "pisync_alpha",
                "nodes",
                "diameters",
                "threshold",
                "phases",
            ],
            ScenarioName::TheoryCheck => &["seed", "rounds", "trials"],
        }
    }
}

impl fmt::Display for ScenarioName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScenarioName {
    type Err = ScenarioError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ScenarioName::ALL
            .into_iter()
            .find(|n| n.name() == s)
            .ok_or_else(|| {
                let known: Vec<&str> = ScenarioName::ALL.iter().map(|n| n.name()).collect();
                ScenarioError::Usage(format!(
                    "unknown scenario `{s}` (known: {})",
                    known.join(", ")
                ))
            })
    }
}

/// Every tunable of every preset. Times in seconds, deviations in ppm.
#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub scenario: ScenarioName,
    pub seed: u64,
    pub seeds: usize,
    pub beacon_period: f64,
    pub nominal_frequency: f64,
    pub f_max_ppm: f64,
    pub sigma_d: f64,
    pub duration: f64,
    pub units: UnitMode,
    pub sample_interval: Option<f64>,
    pub quantize: bool,
    pub protocols: ProtocolSet,
    pub grades_alpha: AlphaPolicy,
    pub pisync_alpha: AlphaPolicy,
    pub phases: PhasePolicy,
    pub nodes: usize,
    pub diameters: Vec<usize>,
    pub threshold: f64,
    pub drift_ppm: f64,
    pub switch_ppm: f64,
    pub switch_round: f64,
    pub tolerance_ppm: f64,
    pub protocol: Protocol,
    pub alphas: Vec<f64>,
    pub adaptive_initial: f64,
    pub rounds: usize,
    pub trials: usize,
}

impl Settings {
    pub fn preset(scenario: ScenarioName) -> Self {
        let base = Settings {
            scenario,
            seed: 1,
            seeds: 1,
            beacon_period: 30.0,
            nominal_frequency: 1.0e6,
            f_max_ppm: 100.0,
            sigma_d: 100.0e-6,
            duration: 40.0 * 30.0,
            units: UnitMode::Normalized,
            sample_interval: None,
            quantize: false,
            protocols: ProtocolSet::Both,
            grades_alpha: AlphaPolicy::Fixed(0.5),
            pisync_alpha: AlphaPolicy::Fixed(0.5),
            phases: PhasePolicy::Aligned,
            nodes: 2,
            diameters: vec![],
            threshold: 1.0e-3,
            drift_ppm: 100.0,
            switch_ppm: 50.0,
            switch_round: 20.0,
            tolerance_ppm: 20.0,
            protocol: Protocol::Grades,
            alphas: vec![],
            adaptive_initial: 0.5,
            rounds: 4000,
            trials: 250,
        };
        match scenario {
            ScenarioName::Fig1Pairwise => base,
            ScenarioName::Fig2Stepsize => Settings {
                duration: 100.0 * 30.0,
                alphas: vec![0.5, 0.25, 0.1, 0.05],
                ..base
            },
            ScenarioName::Fig3Multihop => Settings {
                seeds: 5,
                sigma_d: 10.0e-6,
                duration: 20000.0,
                units: UnitMode::Physical,
                grades_alpha: AlphaPolicy::default(),
                pisync_alpha: AlphaPolicy::default(),
                phases: PhasePolicy::Random,
                nodes: 20,
                ..base
            },
            ScenarioName::Scaling => Settings {
                seeds: 10,
                sigma_d: 10.0e-6,
                duration: 200.0 * 30.0,
                units: UnitMode::Physical,
                grades_alpha: AlphaPolicy::default(),
                pisync_alpha: AlphaPolicy::default(),
                phases: PhasePolicy::Random,
                diameters: vec![4, 9, 16, 25],
                ..base
            },
            ScenarioName::TheoryCheck => base,
        }
    }

    /// Applies one `key=value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ScenarioError> {
        if !self.scenario.keys().contains(&key) {
            return usage(format!(
                "`{key}` is not a setting of {} (valid: {})",
                self.scenario,
                self.scenario.keys().join(", ")
            ));
        }
        let bad = |what: &str| {
            ScenarioError::Usage(format!("invalid value for {key}: `{value}` ({what})"))
        };
        let num = || value.parse::<f64>().map_err(|_| bad("expected a number"));
        let count = || {
            value
                .parse::<usize>()
                .map_err(|_| bad("expected a non-negative integer"))
        };
        match key {
            "seed" => self.seed = value.parse().map_err(|_| bad("expected a u64"))?,
            "seeds" => self.seeds = count()?,
            "beacon_period" => self.beacon_period = num()?,
            "nominal_frequency" => self.nominal_frequency = num()?,
            "f_max_ppm" => self.f_max_ppm = num()?,
            "sigma_d" => self.sigma_d = num()?,
            "duration" => self.duration = num()?,
            "units" => self.units = value.parse().map_err(|e: String| bad(&e))?,
            "sample_interval" => self.sample_interval = Some(num()?),
            "quantize" => {
                self.quantize = value.parse().map_err(|_| bad("expected true or false"))?
            }
            "protocols" => self.protocols = value.parse().map_err(|e: String| bad(&e))?,
            "protocol" => self.protocol = value.parse().map_err(|e: String| bad(&e))?,
            "alpha" => {
                let policy = parse_alpha(value).map_err(|e| bad(&e))?;
                self.grades_alpha = policy;
                self.pisync_alpha = policy;
            }
            "grades_alpha" => self.grades_alpha = parse_alpha(value).map_err(|e| bad(&e))?,
            "pisync_alpha" => self.pisync_alpha = parse_alpha(value).map_err(|e| bad(&e))?,
            "phases" => {
                self.phases = match value {
                    "random" => PhasePolicy::Random,
                    "aligned" => PhasePolicy::Aligned,
                    _ => return Err(bad("expected random or aligned")),
                }
            }
            "nodes" => self.nodes = count()?,
            "diameters" => {
                self.diameters =
                    parse_list(value).map_err(|_| bad("expected a comma-separated list"))?
            }
            "threshold" => self.threshold = num()?,
            "drift_ppm" => self.drift_ppm = num()?,
            "switch_ppm" => self.switch_ppm = num()?,
            "switch_round" => self.switch_round = num()?,
            "tolerance_ppm" => self.tolerance_ppm = num()?,
            "alphas" => {
                self.alphas =
                    parse_list(value).map_err(|_| bad("expected a comma-separated list"))?
            }
            "adaptive_initial" => self.adaptive_initial = num()?,
            "rounds" => self.rounds = count()?,
            "trials" => self.trials = count()?,
            _ => unreachable!("key list and match arms out of sync: {key}"),
        }
        Ok(())
    }

    pub fn apply(&mut self, overrides: &[(String, String)]) -> Result<(), ScenarioError> {
        overrides.iter().try_for_each(|(k, v)| self.set(k, v))
    }

    fn check(&self) -> Result<(), ScenarioError> {
        if self.seeds == 0 {
            return usage("seeds must be at least 1");
        }
        if self.scenario == ScenarioName::Fig3Multihop && self.nodes < 2 {
            return usage("nodes must be at least 2");
        }
        if self.scenario == ScenarioName::Scaling && self.diameters.is_empty() {
            return usage("diameters must not be empty");
        }
        if self.scenario == ScenarioName::Fig2Stepsize && self.alphas.is_empty() {
            return usage("alphas must not be empty");
        }
        if self.scenario == ScenarioName::TheoryCheck && (self.rounds < 2 || self.trials < 2) {
            return usage("rounds and trials must be at least 2");
        }
        Ok(())
    }

    fn max_deviation(&self) -> f64 {
        self.f_max_ppm * 1e-6 * self.nominal_frequency
    }

    /// Simulation config shared by the multi-node presets.
    pub fn network_config(&self, topology: Topology, seed: u64) -> SimConfig {
        SimConfig {
            beacon_period: self.beacon_period,
            nominal_frequency: self.nominal_frequency,
            max_deviation: self.max_deviation(),
            delay_std: self.sigma_d,
            duration: self.duration,
            units: self.units,
            drift: DriftAssignment::RandomConstant,
            protocols: self.protocols,
            grades_alpha: self.grades_alpha,
            pisync_alpha: self.pisync_alpha,
            seed,
            sample_interval: self.sample_interval,
            phases: self.phases,
            drop_probability: 0.0,
            quantize: self.quantize,
            convergence_threshold: self.threshold,
            ..SimConfig::new(topology)
        }
    }

    /// Reference plus one node whose drift steps from `drift_ppm` to
    /// `switch_ppm` at round `switch_round` (no step when `switch_ppm` is NaN).
    pub fn pairwise_config(
        &self,
        protocols: ProtocolSet,
        grades: AlphaPolicy,
        pisync: AlphaPolicy,
    ) -> Result<SimConfig, ScenarioError> {
        let mut schedule = vec![(0.0, self.drift_ppm * 1e-6)];
        if self.switch_ppm.is_finite() {
            schedule.push((
                self.switch_round * self.beacon_period,
                self.switch_ppm * 1e-6,
            ));
        }
        Ok(SimConfig {
            drift: DriftAssignment::PerNode(vec![
                DriftModel::Constant(0.0),
                DriftModel::PiecewiseConstant(schedule),
            ]),
            protocols,
            grades_alpha: grades,
            pisync_alpha: pisync,
            phases: PhasePolicy::Aligned,
            ..self.network_config(Topology::line(2)?, self.seed)
        })
    }
}

/// `0.5` fixed, `cap:0.3` fixed fraction of the cap, `adaptive` or
/// `adaptive:0.25` adaptive from a fraction of the cap.
pub fn parse_alpha(s: &str) -> Result<AlphaPolicy, String> {
    let frac = |v: &str| v.parse::<f64>().map_err(|_| format!("bad number `{v}`"));
    match s.split_once(':') {
        None if s == "adaptive" => Ok(AlphaPolicy::default()),
        None => frac(s).map(AlphaPolicy::Fixed),
        Some(("cap", v)) => frac(v).map(AlphaPolicy::FractionOfCap),
        Some(("adaptive", v)) => {
            frac(v).map(|initial_fraction| AlphaPolicy::Adaptive { initial_fraction })
        }
        Some(_) => Err("expected <number>, cap:<fraction>, adaptive or adaptive:<fraction>".into()),
    }
}

fn parse_list<T: FromStr>(s: &str) -> Result<Vec<T>, T::Err> {
    s.split(',').map(|v| v.trim().parse()).collect()
}

/// Splits `key=value`.
pub fn parse_override(s: &str) -> Result<(String, String), ScenarioError> {
    match s.split_once('=') {
        Some((k, v)) if !k.trim().is_empty() => Ok((k.trim().to_string(), v.trim().to_string())),
        _ => usage(format!("expected key=value, got `{s}`")),
    }
}

/// Flat `key=value` lines; blank lines and `#` comments are skipped.
pub fn parse_config(text: &str) -> Result<Vec<(String, String)>, ScenarioError> {
    text.lines()
        .map(|l| l.split_once('#').map_or(l, |(head, _)| head).trim())
        .filter(|l| !l.is_empty())
        .map(parse_override)
        .collect()
}

/// Decimal text rounded to 9 significant digits.
pub fn sig9(x: f64) -> String {
    if !x.is_finite() {
        return x.to_string();
    }
    if x == 0.0 {
        return "0".to_string();
    }
    let rounded: f64 = format!("{x:.8e}").parse().expect("round trip");
    format!("{rounded}")
}

/// Post-convergence statistics of one skew series, in ticks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub convergence_time: f64,
    pub max_skew: f64,
    pub mean_skew: f64,
    pub std_skew: f64,
}

/// `None` is the "not converged" sentinel, also used when the
/// post-convergence window is empty.
pub fn summarize(times: &[f64], skew: &[f64], threshold: f64) -> Option<Summary> {
    let t = sim::convergence_time(times, skew, threshold)?;
    let start = times.partition_point(|&s| s < t);
    let (mean, std, max) = describe(&skew[start..])?;
    Some(Summary {
        convergence_time: t,
        max_skew: max,
        mean_skew: mean,
        std_skew: std,
    })
}

pub const NOT_CONVERGED: &str = "not_converged";
pub const SUMMARY_HEADER: &str =
    "seed,protocol,convergence_time_seconds,max_skew_ticks,mean_skew_ticks,std_skew_ticks";

pub fn summary_row(seed: u64, protocol: Protocol, summary: Option<Summary>) -> String {
    match summary {
        Some(s) => format!(
            "{seed},{protocol},{},{},{},{}",
            sig9(s.convergence_time),
            sig9(s.max_skew),
            sig9(s.mean_skew),
            sig9(s.std_skew)
        ),
        None => format!("{seed},{protocol},{NOT_CONVERGED},,,"),
    }
}

/// Trace values in physical ticks.
fn tick_scale(cfg: &SimConfig) -> f64 {
    match cfg.units {
        UnitMode::Physical => 1.0,
        UnitMode::Normalized => cfg.beacon_period * cfg.nominal_frequency,
    }
}

fn header_comments(cfg: &SimConfig, scenario: ScenarioName) -> String {
    format!(
        "# scenario={scenario}\n# units={}\n# seed={}\n# convergence_threshold_ticks={}\n",
        cfg.units.name(),
        cfg.seed,
        sig9(cfg.convergence_threshold * cfg.nominal_frequency)
    )
}

/// Per-node logical readings, `t_seconds,node_id,protocol,logical_ticks`.
pub fn trace_csv(trace: &SkewTrace, cfg: &SimConfig, scenario: ScenarioName) -> String {
    let scale = tick_scale(cfg);
    let mut out = header_comments(cfg, scenario);
    out.push_str("t_seconds,node_id,protocol,logical_ticks\n");
    for (k, &t) in trace.times.iter().enumerate() {
        for (pi, p) in trace.protocols.iter().enumerate() {
            for (i, node) in trace.nodes.iter().enumerate() {
                let v = trace.readings[pi][k][i] * scale;
                out.push_str(&format!("{},{node},{p},{}\n", sig9(t), sig9(v)));
            }
        }
    }
    out
}

/// Global skew series, `t_seconds,protocol,global_skew_ticks`.
pub fn skew_csv(trace: &SkewTrace, cfg: &SimConfig, scenario: ScenarioName) -> String {
    let scale = tick_scale(cfg);
    let mut out = header_comments(cfg, scenario);
    out.push_str("t_seconds,protocol,global_skew_ticks\n");
    for (k, &t) in trace.times.iter().enumerate() {
        for (pi, p) in trace.protocols.iter().enumerate() {
            out.push_str(&format!(
                "{},{p},{}\n",
                sig9(t),
                sig9(trace.skew[pi][k] * scale)
            ));
        }
    }
    out
}

fn trace_summary(trace: &SkewTrace, cfg: &SimConfig, protocol: Protocol) -> Option<Summary> {
    let scale = tick_scale(cfg);
    let skew: Vec<f64> = trace
        .skew_series(protocol)?
        .iter()
        .map(|s| s * scale)
        .collect();
    summarize(&trace.times, &skew, trace.threshold_ticks * scale)
}

/// Logical-frequency sample of one node after one accepted message.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrequencyPoint {
    pub round: u64,
    pub t_seconds: f64,
    pub alpha: f64,
    /// `f_u * rate / f0 - 1`, in ppm.
    pub offset_ppm: f64,
}

pub fn frequency_series(
    trace: &SkewTrace,
    node: NodeId,
    protocol: Protocol,
) -> Vec<FrequencyPoint> {
    trace
        .updates_for(node, protocol)
        .map(|u| FrequencyPoint {
            round: u.seq,
            t_seconds: u.t_seconds,
            alpha: u.alpha,
            offset_ppm: u.logical_rate_offset() * 1e6,
        })
        .collect()
}

/// Number of updates, counted from the first one in `points`, after which
/// every remaining offset stays within `tolerance_ppm`. `None` if the last
/// one is outside.
pub fn rounds_to_converge(points: &[FrequencyPoint], tolerance_ppm: f64) -> Option<usize> {
    match points
        .iter()
        .rposition(|p| !(p.offset_ppm.abs() <= tolerance_ppm))
    {
        None if points.is_empty() => None,
        None => Some(1),
        Some(last) if last + 1 < points.len() => Some(last + 2),
        Some(_) => None,
    }
}

/// Sample standard deviation of offsets at or after `from_seconds`.
pub fn offset_spread(points: &[FrequencyPoint], from_seconds: f64) -> Option<f64> {
    let xs: Vec<f64> = points
        .iter()
        .filter(|p| p.t_seconds >= from_seconds)
        .map(|p| p.offset_ppm)
        .collect();
    describe(&xs).map(|(_, std, _)| std)
}

/// Files and console lines produced by one scenario.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScenarioOutput {
    pub files: Vec<(String, String)>,
    pub report: Vec<String>,
}

impl ScenarioOutput {
    pub fn file(&self, name: &str) -> Option<&str> {
        self.files
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, c)| c.as_str())
    }

    pub fn write_to(&self, dir: &Path) -> Result<(), ScenarioError> {
        let io = |path: &Path| {
            let path = path.to_path_buf();
            move |source| ScenarioError::Io { path, source }
        };
        fs::create_dir_all(dir).map_err(io(dir))?;
        for (name, contents) in &self.files {
            let path = dir.join(name);
            fs::write(&path, contents).map_err(io(&path))?;
        }
        Ok(())
    }
}

pub fn run_scenario(settings: &Settings, exec: Execution) -> Result<ScenarioOutput, ScenarioError> {
    settings.check()?;
    match settings.scenario {
        ScenarioName::Fig1Pairwise => fig1(settings),
        ScenarioName::Fig2Stepsize => fig2(settings, exec),
        ScenarioName::Fig3Multihop => fig3(settings, exec),
        ScenarioName::Scaling => scaling(settings, exec),
        ScenarioName::TheoryCheck => theory_check(settings, exec),
    }
}

/// Convergence of one protocol in the pairwise preset: rounds to converge
/// from the start and after the drift switch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairwiseConvergence {
    pub protocol: Protocol,
    pub initial_rounds: Option<usize>,
    pub after_switch_rounds: Option<usize>,
}

pub fn fig1_convergence(settings: &Settings, trace: &SkewTrace) -> Vec<PairwiseConvergence> {
    let t_switch = settings.switch_round * settings.beacon_period;
    trace
        .protocols
        .iter()
        .map(|&p| {
            let pts = frequency_series(trace, NodeId(2), p);
            let split = pts.partition_point(|q| q.t_seconds < t_switch);
            PairwiseConvergence {
                protocol: p,
                initial_rounds: rounds_to_converge(&pts[..split], settings.tolerance_ppm),
                after_switch_rounds: if settings.switch_ppm.is_finite() {
                    rounds_to_converge(&pts[split..], settings.tolerance_ppm)
                } else {
                    None
                },
            }
        })
        .collect()
}

fn fmt_rounds(r: Option<usize>) -> String {
    r.map_or(NOT_CONVERGED.to_string(), |r| r.to_string())
}

fn fig1(settings: &Settings) -> Result<ScenarioOutput, ScenarioError> {
    let name = settings.scenario;
    let cfg = settings.pairwise_config(
        settings.protocols,
        settings.grades_alpha,
        settings.pisync_alpha,
    )?;
    let trace = sim::run(&cfg)?;
    let mut out = ScenarioOutput::default();

    let mut freq = header_comments(&cfg, name);
    freq.push_str("round,t_seconds,protocol,alpha,rate_offset_ppm\n");
    for &p in &trace.protocols {
        for q in frequency_series(&trace, NodeId(2), p) {
            freq.push_str(&format!(
                "{},{},{p},{},{}\n",
                q.round,
                sig9(q.t_seconds),
                sig9(q.alpha),
                sig9(q.offset_ppm)
            ));
        }
    }

    let mut conv = String::from("protocol,phase,rounds\n");
    for c in fig1_convergence(settings, &trace) {
        conv.push_str(&format!(
            "{},initial,{}\n",
            c.protocol,
            fmt_rounds(c.initial_rounds)
        ));
        conv.push_str(&format!(
            "{},after_switch,{}\n",
            c.protocol,
            fmt_rounds(c.after_switch_rounds)
        ));
        out.report.push(format!(
            "{}: converged in {} rounds, re-converged {} rounds after the switch",
            c.protocol,
            fmt_rounds(c.initial_rounds),
            fmt_rounds(c.after_switch_rounds)
        ));
    }

    let mut summary = format!("{SUMMARY_HEADER}\n");
    for &p in &trace.protocols {
        summary.push_str(&summary_row(cfg.seed, p, trace_summary(&trace, &cfg, p)));
        summary.push('\n');
    }
    out.files = vec![
        ("frequency.csv".into(), freq),
        ("convergence.csv".into(), conv),
        ("trace.csv".into(), trace_csv(&trace, &cfg, name)),
        ("skew.csv".into(), skew_csv(&trace, &cfg, name)),
        ("summary.csv".into(), summary),
    ];
    Ok(out)
}

/// One step-size series of the step-size preset.
#[derive(Debug, Clone, PartialEq)]
pub struct StepSeries {
    pub label: String,
    pub initial_alpha: f64,
    pub points: Vec<FrequencyPoint>,
    pub convergence_rounds: Option<usize>,
    pub spread_ppm: Option<f64>,
}

/// Runs the pairwise setup once per constant alpha plus once adaptive,
/// without a drift switch. Spread is measured over the second half.
pub fn fig2_series(settings: &Settings, exec: Execution) -> Result<Vec<StepSeries>, ScenarioError> {
    let protocol = settings.protocol;
    let set = match protocol {
        Protocol::Grades => ProtocolSet::Grades,
        Protocol::Pisync => ProtocolSet::Pisync,
    };
    let no_switch = Settings {
        switch_ppm: f64::NAN,
        ..settings.clone()
    };
    let mut policies: Vec<(String, AlphaPolicy)> = settings
        .alphas
        .iter()
        .map(|&a| (format!("const-{a}"), AlphaPolicy::Fixed(a)))
        .collect();
    policies.push((
        "adaptive".into(),
        AlphaPolicy::Adaptive {
            initial_fraction: settings.adaptive_initial,
        },
    ));
    let results = map_indexed(
        exec,
        policies.len(),
        |i| -> Result<StepSeries, ScenarioError> {
            let (label, policy) = &policies[i];
            let cfg = no_switch.pairwise_config(set, *policy, *policy)?;
            let initial_alpha = match *policy {
                AlphaPolicy::Fixed(a) => a,
                AlphaPolicy::FractionOfCap(x) => x * cfg.step_cap(protocol),
                AlphaPolicy::Adaptive { initial_fraction } => {
                    initial_fraction * cfg.step_cap(protocol)
                }
            };
            let trace = sim::run(&cfg)?;
            let points = frequency_series(&trace, NodeId(2), protocol);
            Ok(StepSeries {
                label: label.clone(),
                initial_alpha,
                convergence_rounds: rounds_to_converge(&points, settings.tolerance_ppm),
                spread_ppm: offset_spread(&points, settings.duration / 2.0),
                points,
            })
        },
    );
    results.into_iter().collect()
}

fn fig2(settings: &Settings, exec: Execution) -> Result<ScenarioOutput, ScenarioError> {
    let series = fig2_series(settings, exec)?;
    let mut freq = format!(
        "# scenario={}\n# units={}\n# seed={}\n# protocol={}\nseries,round,t_seconds,alpha,rate_offset_ppm\n",
        settings.scenario,
        settings.units.name(),
        settings.seed,
        settings.protocol
    );
    let mut table = String::from("series,alpha_initial,convergence_rounds,spread_ppm\n");
    let mut out = ScenarioOutput::default();
    for s in &series {
        for q in &s.points {
            freq.push_str(&format!(
                "{},{},{},{},{}\n",
                s.label,
                q.round,
                sig9(q.t_seconds),
                sig9(q.alpha),
                sig9(q.offset_ppm)
            ));
        }
        let spread = s.spread_ppm.map_or(String::new(), sig9);
        table.push_str(&format!(
            "{},{},{},{spread}\n",
            s.label,
            sig9(s.initial_alpha),
            fmt_rounds(s.convergence_rounds)
        ));
        out.report.push(format!(
            "{}: converged in {} rounds, steady-state spread {} ppm",
            s.label,
            fmt_rounds(s.convergence_rounds),
            if spread.is_empty() {
                "n/a".into()
            } else {
                spread
            }
        ));
    }
    out.files = vec![
        ("frequency.csv".into(), freq),
        ("stepsize.csv".into(), table),
    ];
    Ok(out)
}

/// Per-seed traces of the multi-hop preset.
pub fn fig3_runs(
    settings: &Settings,
    exec: Execution,
) -> Result<Vec<(SimConfig, SkewTrace)>, ScenarioError> {
    let topology = Topology::line(settings.nodes)?;
    let runs = map_indexed(exec, settings.seeds, |i| -> Result<_, ScenarioError> {
        let cfg = settings.network_config(topology.clone(), settings.seed + i as u64);
        let trace = sim::run(&cfg)?;
        Ok((cfg, trace))
    });
    runs.into_iter().collect()
}

fn fig3(settings: &Settings, exec: Execution) -> Result<ScenarioOutput, ScenarioError> {
    let runs = fig3_runs(settings, exec)?;
    let mut out = ScenarioOutput::default();
    let mut summary = format!("{SUMMARY_HEADER}\n");
    for (cfg, trace) in &runs {
        for &p in &trace.protocols {
            let s = trace_summary(trace, cfg, p);
            summary.push_str(&summary_row(cfg.seed, p, s));
            summary.push('\n');
            out.report.push(match s {
                Some(s) => format!(
                    "seed {} {p}: converged at {} s, post-convergence skew max {} mean {} ticks",
                    cfg.seed,
                    sig9(s.convergence_time),
                    sig9(s.max_skew),
                    sig9(s.mean_skew)
                ),
                None => format!("seed {} {p}: {NOT_CONVERGED}", cfg.seed),
            });
        }
    }
    let (cfg, trace) = &runs[0];
    out.files = vec![
        ("trace.csv".into(), trace_csv(trace, cfg, settings.scenario)),
        ("skew.csv".into(), skew_csv(trace, cfg, settings.scenario)),
        ("summary.csv".into(), summary),
    ];
    Ok(out)
}

/// Scaling table and fitted exponent for each configured protocol.
pub fn scaling_rows(
    settings: &Settings,
    exec: Execution,
) -> Result<Vec<(Protocol, Vec<ScalingRow>, Option<f64>)>, ScenarioError> {
    let base = settings.network_config(Topology::line(2)?, settings.seed);
    let seeds: Vec<u64> = (0..settings.seeds as u64)
        .map(|i| settings.seed + i)
        .collect();
    settings
        .protocols
        .protocols()
        .iter()
        .map(|&p| {
            let rows = sim::scaling_experiment(&base, p, &settings.diameters, &seeds, exec)?;
            let exponent = sim::power_law_exponent(&rows);
            Ok((p, rows, exponent))
        })
        .collect()
}

fn scaling(settings: &Settings, exec: Execution) -> Result<ScenarioOutput, ScenarioError> {
    let results = scaling_rows(settings, exec)?;
    let scale = match settings.units {
        UnitMode::Physical => 1.0,
        UnitMode::Normalized => settings.beacon_period * settings.nominal_frequency,
    };
    let mut table = format!(
        "# scenario={}\n# units={}\n# seed={}\ndiameter,protocol,mean_skew_ticks,std_skew_ticks,far_end_rms_ticks,seeds\n",
        settings.scenario,
        settings.units.name(),
        settings.seed
    );
    let mut fit = String::from("protocol,skew_exponent,far_end_exponent\n");
    let mut out = ScenarioOutput::default();
    for (p, rows, exponent) in &results {
        for r in rows {
            table.push_str(&format!(
                "{},{p},{},{},{},{}\n",
                r.diameter,
                sig9(r.mean * scale),
                sig9(r.std * scale),
                sig9(r.far_end_rms * scale),
                r.per_seed.len()
            ));
        }
        let e = exponent.map_or(String::from("nan"), sig9);
        let far = sim::far_end_exponent(rows).map_or(String::from("nan"), sig9);
        fit.push_str(&format!("{p},{e},{far}\n"));
        out.report.push(format!(
            "{p}: global skew ~ D^{e}, far-end offset ~ D^{far}"
        ));
    }
    out.files = vec![
        ("scaling.csv".into(), table),
        ("scaling_fit.csv".into(), fit),
    ];
    Ok(out)
}

/// Parameter grid of the theory check, normalized units (`f0 = 1`): three
/// beacon periods, three step sizes per protocol and three noise mixes.
pub fn theory_grid() -> Vec<(Protocol, SystemParams)> {
    let mut grid = Vec::new();
    for protocol in Protocol::ALL {
        for b in [0.5, 1.0, 2.0] {
            for frac in [0.1, 0.4, 0.8] {
                for (f_max, sigma_d) in [(1e-4, 1e-4), (1e-4, 2e-5), (2e-5, 1e-4)] {
                    let alpha = frac * protocol.step_cap(b, 1.0);
                    grid.push((
                        protocol,
                        SystemParams {
                            b,
                            f0: 1.0,
                            f_max,
                            sigma_d,
                            alpha,
                        },
                    ));
                }
            }
        }
    }
    grid
}

/// One grid point compared against the oracle.
#[derive(Debug, Clone, PartialEq)]
pub struct TheoryPoint {
    pub protocol: Protocol,
    pub params: SystemParams,
    pub noise: NoiseConvention,
    pub formula: f64,
    pub estimate: McEstimate,
}

impl TheoryPoint {
    pub fn relative_error(&self) -> f64 {
        (self.estimate.var_error - self.formula).abs() / self.formula
    }
}

pub fn theory_points(
    grid: &[(Protocol, SystemParams)],
    noise: NoiseConvention,
    rounds: usize,
    trials: usize,
    seed: u64,
    exec: Execution,
) -> Result<Vec<TheoryPoint>, ScenarioError> {
    let opts = McOptions {
        noise,
        execution: Execution::Sequential,
        ..McOptions::default()
    };
    let points = map_indexed(
        exec,
        grid.len(),
        |i| -> Result<TheoryPoint, ScenarioError> {
            let (protocol, params) = grid[i];
            let formula = variance(protocol, &params)?;
            let estimate = estimate_variance_mc(
                &params,
                protocol,
                rounds,
                trials,
                seed.wrapping_add(i as u64),
                &opts,
            )?;
            Ok(TheoryPoint {
                protocol,
                params,
                noise,
                formula,
                estimate,
            })
        },
    );
    points.into_iter().collect()
}

fn theory_check(settings: &Settings, exec: Execution) -> Result<ScenarioOutput, ScenarioError> {
    let grid = theory_grid();
    let mut table = String::from(
        "protocol,noise,alpha,b,f0,f_max,sigma_d,formula_variance,mc_variance,relative_error,mean_error,mean_error_se,mean_rate\n",
    );
    let mut out = ScenarioOutput::default();
    for noise in [NoiseConvention::Iid, NoiseConvention::DelayDifference] {
        let points = theory_points(
            &grid,
            noise,
            settings.rounds,
            settings.trials,
            settings.seed,
            exec,
        )?;
        let mut worst = 0.0f64;
        for pt in &points {
            let p = &pt.params;
            worst = worst.max(pt.relative_error());
            table.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
                pt.protocol,
                noise.name(),
                sig9(p.alpha),
                sig9(p.b),
                sig9(p.f0),
                sig9(p.f_max),
                sig9(p.sigma_d),
                sig9(pt.formula),
                sig9(pt.estimate.var_error),
                sig9(pt.relative_error()),
                sig9(pt.estimate.mean_error),
                sig9(pt.estimate.mean_error_se),
                sig9(pt.estimate.mean_rate)
            ));
        }
        out.report.push(format!(
            "{} noise: {} points, worst relative error {:.2}%",
            noise.name(),
            points.len(),
            worst * 100.0
        ));
    }
    out.files = vec![("theory.csv".into(), table)];
    Ok(out)
}

/// Skew series read back from a `skew.csv` file.
#[derive(Debug, Clone, PartialEq)]
pub struct SkewFile {
    pub seed: u64,
    pub threshold_ticks: f64,
    /// `(protocol, times, skew)` in file order of first appearance.
    pub series: Vec<(Protocol, Vec<f64>, Vec<f64>)>,
}

pub fn read_skew_csv(path: &Path) -> Result<SkewFile, ScenarioError> {
    let text = fs::read_to_string(path).map_err(|source| ScenarioError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_skew_csv(&text).map_err(|msg| ScenarioError::Parse {
        path: path.to_path_buf(),
        msg,
    })
}

pub fn parse_skew_csv(text: &str) -> Result<SkewFile, String> {
    let mut file = SkewFile {
        seed: 0,
        threshold_ticks: f64::NAN,
        series: Vec::new(),
    };
    let mut saw_header = false;
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(comment) = line.strip_prefix('#') {
            if let Some((k, v)) = comment.trim().split_once('=') {
                match k {
                    "seed" => {
                        file.seed = v.parse().map_err(|_| format!("line {}: bad seed", n + 1))?
                    }
                    "convergence_threshold_ticks" => {
                        file.threshold_ticks = v
                            .parse()
                            .map_err(|_| format!("line {}: bad threshold", n + 1))?
                    }
                    _ => {}
                }
            }
            continue;
        }
        if !saw_header {
            if line != "t_seconds,protocol,global_skew_ticks" {
                return Err(format!("line {}: unexpected header `{line}`", n + 1));
            }
            saw_header = true;
            continue;
        }
        let bad = || format!("line {}: malformed row `{line}`", n + 1);
        let mut cols = line.split(',');
        let (Some(t), Some(p), Some(s), None) =
            (cols.next(), cols.next(), cols.next(), cols.next())
        else {
            return Err(bad());
        };
        let t: f64 = t.parse().map_err(|_| bad())?;
        let p: Protocol = p.parse().map_err(|_| bad())?;
        let s: f64 = s.parse().map_err(|_| bad())?;
        match file.series.iter_mut().find(|(q, _, _)| *q == p) {
            Some((_, ts, ss)) => {
                ts.push(t);
                ss.push(s);
            }
            None => file.series.push((p, vec![t], vec![s])),
        }
    }
    if !saw_header {
        return Err("missing header".into());
    }
    if file.threshold_ticks.is_nan() {
        return Err("missing convergence_threshold_ticks comment".into());
    }
    Ok(file)
}

/// Summary table for skew files, one row per file and protocol.
pub fn report_summary(paths: &[PathBuf]) -> Result<String, ScenarioError> {
    let mut out = format!("file,{SUMMARY_HEADER}\n");
    for path in paths {
        let f = read_skew_csv(path)?;
        for (p, times, skew) in &f.series {
            let row = summary_row(f.seed, *p, summarize(times, skew, f.threshold_ticks));
            out.push_str(&format!("{},{row}\n", path.display()));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sig9_formatting() {
        assert_eq!(sig9(0.0), "0");
        assert_eq!(sig9(30003000.0), "30003000");
        assert_eq!(sig9(1.0 / 3.0), "0.333333333");
        assert_eq!(sig9(-2.0e-7), "-0.0000002");
        assert_eq!(sig9(123456789012.0), "123456789000");
        assert_eq!(sig9(f64::NAN), "NaN");
    }

    #[test]
    fn config_parsing() {
        let text = "# comment\nseed = 7\n\nsigma_d=1e-5 # trailing\n";
        let kv = parse_config(text).unwrap();
        assert_eq!(
            kv,
            vec![
                ("seed".into(), "7".into()),
                ("sigma_d".into(), "1e-5".into())
            ]
        );
        assert!(parse_config("novalue\n").is_err());
        assert!(parse_override("=3").is_err());
    }

    #[test]
    fn override_validation() {
        let mut s = Settings::preset(ScenarioName::Fig1Pairwise);
        s.set("alpha", "0.25").unwrap();
        assert_eq!(s.grades_alpha, AlphaPolicy::Fixed(0.25));
        s.set("grades_alpha", "adaptive:0.1").unwrap();
        assert_eq!(
            s.grades_alpha,
            AlphaPolicy::Adaptive {
                initial_fraction: 0.1
            }
        );
        assert!(matches!(s.set("nodes", "5"), Err(ScenarioError::Usage(_))));
        assert!(matches!(
            s.set("sigma_d", "abc"),
            Err(ScenarioError::Usage(_))
        ));
        assert!(matches!(
            s.set("units", "furlongs"),
            Err(ScenarioError::Usage(_))
        ));
        let mut t = Settings::preset(ScenarioName::TheoryCheck);
        assert!(t.set("rounds", "100").is_ok());
        assert!(t.set("alpha", "0.1").is_err());
        assert!("fig9".parse::<ScenarioName>().is_err());
    }

    #[test]
    fn every_key_is_settable() {
        for name in ScenarioName::ALL {
            let mut s = Settings::preset(name);
            for key in name.keys() {
                let value = match *key {
                    "units" => "physical",
                    "protocols" => "both",
                    "protocol" => "pisync",
                    "phases" => "random",
                    "quantize" => "false",
                    "alpha" | "grades_alpha" | "pisync_alpha" => "adaptive",
                    _ => "3",
                };
                s.set(key, value)
                    .unwrap_or_else(|e| panic!("{name} {key}: {e}"));
            }
        }
    }

    #[test]
    fn summary_sentinel_and_window() {
        let times = [0.0, 1.0, 2.0, 3.0];
        assert_eq!(summarize(&times, &[5.0, 5.0, 5.0, 5.0], 1.0), None);
        let s = summarize(&times, &[5.0, 0.5, 0.2, 0.3], 1.0).unwrap();
        assert_eq!(s.convergence_time, 1.0);
        assert_eq!(s.max_skew, 0.5);
        assert!((s.mean_skew - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(
            summary_row(3, Protocol::Grades, None),
            "3,grades,not_converged,,,"
        );
    }

    #[test]
    fn rounds_to_converge_counts_updates() {
        let pt = |offset_ppm| FrequencyPoint {
            round: 0,
            t_seconds: 0.0,
            alpha: 0.0,
            offset_ppm,
        };
        let pts: Vec<_> = [100.0, 50.0, 10.0, -5.0].into_iter().map(pt).collect();
        assert_eq!(rounds_to_converge(&pts, 20.0), Some(3));
        assert_eq!(rounds_to_converge(&pts[2..], 20.0), Some(1));
        assert_eq!(rounds_to_converge(&pts[..2], 20.0), None);
        assert_eq!(rounds_to_converge(&[], 20.0), None);
    }

    #[test]
    fn skew_csv_round_trip() {
        let text = "# units=physical\n# seed=4\n# convergence_threshold_ticks=2\nt_seconds,protocol,global_skew_ticks\n0,grades,9\n0,pisync,8\n10,grades,1\n10,pisync,3\n";
        let f = parse_skew_csv(text).unwrap();
        assert_eq!(f.seed, 4);
        assert_eq!(f.series.len(), 2);
        assert_eq!(f.series[1].2, vec![8.0, 3.0]);
        assert!(parse_skew_csv("t_seconds,protocol,global_skew_ticks\n").is_err());
        assert!(parse_skew_csv("# convergence_threshold_ticks=1\nbad,header\n").is_err());
    }
}
