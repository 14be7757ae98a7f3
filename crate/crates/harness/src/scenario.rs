//! Scenario files: cluster shape, workload, membership steps and faults.

use std::path::Path;

use cachefs::fsops::Consistency;
use cachefs::server::ClusterConfig;
use cachefs::simnet::{FaultAction, FaultRule, FaultTarget, Matcher, SimConfig};
use cachefs::{NodeId, Tick};
use serde::Deserialize;
use thiserror::Error;

use crate::workload::WorkloadSpec;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}:{line}:{column}: {message}")]
    Parse { path: String, line: usize, column: usize, message: String },
    #[error("{path}: {message}")]
    Invalid { path: String, message: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Strict,
    Weak,
}

impl From<Mode> for Consistency {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Strict => Consistency::Strict,
            Mode::Weak => Consistency::Weak,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(default = "one")]
    pub seed: u64,
    #[serde(default = "one_node")]
    pub nodes: usize,
    #[serde(default = "default_chunk")]
    pub chunk_size: u64,
    #[serde(default = "default_buckets")]
    pub buckets: Vec<String>,
    /// Background flush period; absent keeps dirty data in the cache.
    pub flush_interval: Option<Tick>,
    #[serde(default)]
    pub consistency: Mode,
    #[serde(default)]
    pub sim: SimSection,
    pub workload: WorkloadSpec,
    /// Files written and persisted before the main workload, in their own
    /// directory, so ring changes have clean data to leave alone.
    #[serde(default)]
    pub clean_files: usize,
    #[serde(default)]
    pub steps: Vec<Step>,
    /// Faults, active during `fault_phase`.
    #[serde(default)]
    pub faults: Vec<FaultSpec>,
    #[serde(default)]
    pub fault_phase: FaultPhase,
    pub sweep: Option<Sweep>,
}

fn one() -> u64 {
    1
}

fn one_node() -> usize {
    1
}

fn default_chunk() -> u64 {
    64 << 10
}

fn default_buckets() -> Vec<String> {
    vec!["data".into()]
}

#[derive(Clone, Debug, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSection {
    #[serde(default = "one")]
    pub latency: Tick,
    #[serde(default)]
    pub jitter: Tick,
    #[serde(default = "default_restart")]
    pub auto_restart: Option<Tick>,
}

fn default_restart() -> Option<Tick> {
    Some(10)
}

impl Default for SimSection {
    fn default() -> Self {
        SimSection { latency: 1, jitter: 0, auto_restart: default_restart() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FaultPhase {
    #[default]
    Workload,
    Steps,
}

#[derive(Clone, Debug, PartialEq, Eq, Deserialize)]
#[serde(try_from = "RawStep")]
pub enum Step {
    /// Adds nodes one at a time.
    Join { count: usize },
    /// Removes the lowest-numbered members one at a time.
    Leave { count: usize },
    /// Removes every member.
    ScaleToZero,
    /// Boots a fresh cluster against the same object store.
    ColdStart { nodes: usize },
    /// Persists every file and directory.
    PersistAll,
    /// Crashes a member and lets it restart.
    Crash { node: NodeId },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Action {
    Join,
    Leave,
    ScaleToZero,
    ColdStart,
    PersistAll,
    Crash,
}

/// A step table as written. Kept flat so a bad value is reported at its
/// own line rather than at the start of the table.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawStep {
    action: Action,
    count: Option<usize>,
    nodes: Option<usize>,
    node: Option<NodeId>,
}

impl TryFrom<RawStep> for Step {
    type Error = String;

    fn try_from(r: RawStep) -> Result<Step, String> {
        let allowed: &[&str] = match r.action {
            Action::Join | Action::Leave => &["count"],
            Action::ColdStart => &["nodes"],
            Action::Crash => &["node"],
            Action::ScaleToZero | Action::PersistAll => &[],
        };
        for (key, set) in [("count", r.count.is_some()), ("nodes", r.nodes.is_some()), ("node", r.node.is_some())] {
            if set && !allowed.contains(&key) {
                return Err(format!("`{key}` does not apply to {:?}", r.action));
            }
        }
        Ok(match r.action {
            Action::Join => Step::Join { count: r.count.unwrap_or(1) },
            Action::Leave => Step::Leave { count: r.count.unwrap_or(1) },
            Action::ScaleToZero => Step::ScaleToZero,
            Action::ColdStart => Step::ColdStart { nodes: r.nodes.unwrap_or(1) },
            Action::PersistAll => Step::PersistAll,
            Action::Crash => Step::Crash { node: r.node.ok_or("crash needs `node`")? },
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionSpec {
    Drop,
    Duplicate,
    Delay,
    CrashBefore,
    CrashAfter,
}

#[derive(Clone, Debug, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultSpec {
    /// Node the rule is restricted to; absent matches every node.
    pub node: Option<NodeId>,
    /// `durable_write`, `any_message`, or a message kind such as `Prepare`.
    pub on: String,
    pub ordinal: Option<u64>,
    pub action: ActionSpec,
    #[serde(default = "default_delay")]
    pub delay: Tick,
}

fn default_delay() -> Tick {
    20
}

impl FaultSpec {
    pub fn rule(&self) -> FaultRule {
        FaultRule {
            target: self.node.map_or(FaultTarget::Any, FaultTarget::Node),
            matcher: matcher(&self.on),
            ordinal: self.ordinal,
            action: action(self.action, self.delay),
        }
    }
}

pub fn matcher(on: &str) -> Matcher {
    match on {
        "durable_write" => Matcher::DurableWrite,
        "any_message" => Matcher::AnyMessage,
        kind => Matcher::Message(kind.to_string()),
    }
}

pub fn action(a: ActionSpec, delay: Tick) -> FaultAction {
    match a {
        ActionSpec::Drop => FaultAction::Drop,
        ActionSpec::Duplicate => FaultAction::Duplicate,
        ActionSpec::Delay => FaultAction::Delay(delay),
        ActionSpec::CrashBefore => FaultAction::CrashBefore,
        ActionSpec::CrashAfter => FaultAction::CrashAfter,
    }
}

/// Reruns the scenario once per ordinal and action, with a single fault
/// active during the fault phase, until the ordinal no longer fires.
#[derive(Clone, Debug, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sweep {
    /// `durable_write` or `any_message`.
    pub on: String,
    pub actions: Vec<ActionSpec>,
    /// Upper bound on ordinals tried.
    #[serde(default = "default_max_ordinal")]
    pub max_ordinal: u64,
    /// Try every `stride`-th ordinal.
    #[serde(default = "one")]
    pub stride: u64,
}

fn default_max_ordinal() -> u64 {
    10_000
}

impl Scenario {
    pub fn parse(text: &str, path: &str) -> Result<Scenario, ScenarioError> {
        let s: Scenario = toml::from_str(text).map_err(|e| {
            let (line, column) = e.span().map_or((0, 0), |r| line_col(text, r.start));
            ScenarioError::Parse { path: path.into(), line, column, message: e.message().to_string() }
        })?;
        s.validate().map_err(|message| ScenarioError::Invalid { path: path.into(), message })?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Scenario, ScenarioError> {
        let p = path.display().to_string();
        let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io { path: p.clone(), source })?;
        Scenario::parse(&text, &p)
    }

    fn validate(&self) -> Result<(), String> {
        if self.chunk_size == 0 {
            return Err("chunk_size must be positive".into());
        }
        if self.buckets.is_empty() {
            return Err("at least one bucket is required".into());
        }
        if !self.buckets.contains(&self.workload.bucket) {
            return Err(format!("workload bucket {:?} is not in buckets", self.workload.bucket));
        }
        if self.workload.min_size > self.workload.max_size {
            return Err("workload min_size exceeds max_size".into());
        }
        if self.workload.files > 0 && self.workload.dirs == 0 {
            return Err("workload needs at least one directory".into());
        }
        if self.workload.clients == 0 {
            return Err("workload needs at least one client".into());
        }
        if let Some(s) = &self.sweep {
            if !matches!(s.on.as_str(), "durable_write" | "any_message") {
                return Err(format!("sweep.on must be durable_write or any_message, not {:?}", s.on));
            }
            if s.actions.is_empty() || s.stride == 0 {
                return Err("sweep needs actions and a positive stride".into());
            }
        }
        Ok(())
    }

    pub fn cluster_config(&self) -> ClusterConfig {
        ClusterConfig {
            chunk_size: self.chunk_size,
            buckets: self.buckets.clone(),
            flush_interval: self.flush_interval,
            ..ClusterConfig::default()
        }
    }

    pub fn sim_config(&self, seed: u64) -> SimConfig {
        SimConfig {
            seed,
            latency: self.sim.latency,
            jitter: self.sim.jitter,
            auto_restart: self.sim.auto_restart,
            ..SimConfig::default()
        }
    }
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.len() - before.rfind('\n').map_or(0, |i| i + 1) + 1;
    (line, column)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
name = "t"
nodes = 2

[workload]
files = 4
dirs = 2
min_size = 10
max_size = 20

[[steps]]
action = "join"
count = 2

[[steps]]
action = "scale_to_zero"
"#;

    #[test]
    fn parses_steps_and_defaults() {
        let s = Scenario::parse(MINIMAL, "t.toml").unwrap();
        assert_eq!(s.steps, vec![Step::Join { count: 2 }, Step::ScaleToZero]);
        assert_eq!(s.chunk_size, 64 << 10);
        assert_eq!(s.workload.bucket, "data");
        assert_eq!(s.sim, SimSection::default());
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let bad = MINIMAL.replace("count = 2", "count = \"two\"");
        let e = Scenario::parse(&bad, "t.toml").unwrap_err().to_string();
        assert!(e.starts_with("t.toml:13:9:"), "{e}");
        let unknown = MINIMAL.replace("action = \"scale_to_zero\"", "action = \"explode\"");
        let e = Scenario::parse(&unknown, "t.toml").unwrap_err().to_string();
        assert!(e.starts_with("t.toml:16:10:"), "{e}");
    }

    #[test]
    fn validation_rejects_inconsistent_workloads() {
        let bad = MINIMAL.replace("min_size = 10", "min_size = 30");
        assert!(matches!(Scenario::parse(&bad, "t"), Err(ScenarioError::Invalid { .. })));
    }

    #[test]
    fn fault_specs_become_rules() {
        let f = FaultSpec { node: Some(2), on: "Prepare".into(), ordinal: Some(3), action: ActionSpec::Drop, delay: 20 };
        let r = f.rule();
        assert_eq!(r.target, FaultTarget::Node(2));
        assert_eq!(r.matcher, Matcher::Message("Prepare".into()));
        assert_eq!(r.action, FaultAction::Drop);
    }
}
