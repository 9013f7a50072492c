//! Experiment configs, runners and the acceptance suite.
//!
//! A config file is checked against `schema/experiment.schema.json`, then
//! deserialized and cross-checked (embodiment ids, MoF shape, buffer size).
//! Every failure names the offending value by JSON pointer.

pub mod acceptance;
pub mod cli;
pub mod experiments;
pub mod runners;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::runtime::{Clock, Fallback, DEFAULT_STARVATION_LIMIT};
use crate::sim::{default_fleet, Dynamics, FleetMember, LatencyKind, Task};
use crate::unified_space::{project, SlotLayout, SpaceConfig};
use experiments::{BimodalConfig, FieldArch, MpgAblationConfig, PolicyConfig, TrackingSession};

/// The published config schema.
pub const SCHEMA: &str = include_str!("../../schema/experiment.schema.json");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UacSettings {
    pub enabled: bool,
    pub safety_steps: usize,
    /// Ring-buffer capacity; twice the chunk length when absent.
    pub capacity: Option<usize>,
    pub fallback: Fallback,
    pub starvation_limit: usize,
}

impl Default for UacSettings {
    fn default() -> Self {
        Self {
            enabled: true,
            safety_steps: 1,
            capacity: None,
            fallback: Fallback::HoldLast,
            starvation_limit: DEFAULT_STARVATION_LIMIT,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SessionSettings {
    pub task: Task,
    pub latency: LatencyKind,
    /// Latency values are fractions of each embodiment's latency budget.
    pub latency_relative: bool,
    pub steps: u64,
    pub clock: Clock,
}

impl Default for SessionSettings {
    fn default() -> Self {
        Self {
            task: Task::FigureEight {
                period_steps: 160,
                amplitude: 0.8,
            },
            latency: LatencyKind::UniformJitter { lo: 0.5, hi: 1.0 },
            latency_relative: true,
            steps: 2000,
            clock: Clock::Sim,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSettings {
    /// Paired seeds for `ablate-uac`.
    pub seeds: usize,
    /// Restricts `ablate-uac` to one embodiment.
    pub embodiment: Option<String>,
    pub mpg: MpgAblationConfig,
}

impl Default for AblationSettings {
    fn default() -> Self {
        Self {
            seeds: 50,
            embodiment: None,
            mpg: MpgAblationConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSettings {
    pub dir: PathBuf,
}

impl Default for OutputSettings {
    fn default() -> Self {
        Self { dir: "out".into() }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Custom layout and fleet; the default 48-slot layout and three-robot
    /// fleet when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub space: Option<SpaceConfig>,
    /// Simulator dynamics per embodiment id (integrator when absent).
    #[serde(default)]
    pub dynamics: BTreeMap<String, Dynamics>,
    /// Embodiments to run; the whole fleet when empty.
    #[serde(default)]
    pub embodiments: Vec<String>,
    #[serde(default)]
    pub policy: PolicyConfig,
    #[serde(default)]
    pub uac: UacSettings,
    #[serde(default)]
    pub session: SessionSettings,
    #[serde(default)]
    pub toy: BimodalConfig,
    #[serde(default)]
    pub ablation: AblationSettings,
    #[serde(default)]
    pub output: OutputSettings,
}

impl ExperimentConfig {
    /// Defaults everywhere except the seed.
    pub fn with_seed(seed: u64) -> Self {
        serde_json::from_value(serde_json::json!({ "seed": seed })).expect("defaults deserialize")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::Config {
            pointer: String::new(),
            reason: format!("not valid JSON: {e}"),
        })?;
        Self::from_value(&value)
    }

    pub fn from_value(value: &serde_json::Value) -> Result<Self> {
        check_schema(value)?;
        let cfg: Self = serde_path_to_error::deserialize(value).map_err(|e| {
            let mut pointer = path_pointer(e.path());
            let reason = e.inner().to_string();
            if let Some(field) = reason.strip_prefix("missing field `").and_then(|r| r.split('`').next()) {
                pointer.push('/');
                pointer.push_str(&escape(field));
            }
            Error::Config { pointer, reason }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Hex SHA-256 of the effective config in canonical JSON. The output
    /// directory is left out: where results land does not change them.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(obj) = v.as_object_mut() {
            obj.remove("output");
        }
        crate::params::config_hash(&serde_json::to_vec(&v).expect("config serializes"))
    }

    /// Cross-field checks the schema cannot express.
    pub fn validate(&self) -> Result<()> {
        let bad = |pointer: &str, reason: String| Error::Config {
            pointer: pointer.into(),
            reason,
        };
        let (_, fleet) = self.all_members().map_err(|e| bad("/space", e.to_string()))?;
        let known = |id: &str| fleet.iter().any(|m| m.spec.id == id);
        for (i, id) in self.embodiments.iter().enumerate() {
            if !known(id) {
                return Err(bad(&format!("/embodiments/{i}"), format!("unknown embodiment `{id}`")));
            }
        }
        if let Some(id) = self.dynamics.keys().find(|id| !known(id)) {
            return Err(bad(&format!("/dynamics/{}", escape(id)), format!("unknown embodiment `{id}`")));
        }
        if let Some(id) = &self.ablation.embodiment {
            if !known(id) {
                return Err(bad("/ablation/embodiment", format!("unknown embodiment `{id}`")));
            }
        }
        let p = &self.policy;
        if p.chunk_len == 0 || p.denoise_steps == 0 {
            return Err(bad("/policy", "chunk_len and denoise_steps must be >= 1".into()));
        }
        if p.arch == FieldArch::Mof && !(1..=p.mof.experts).contains(&p.mof.top_k) {
            return Err(bad(
                "/policy/mof/top_k",
                format!("{} not in 1..={}", p.mof.top_k, p.mof.experts),
            ));
        }
        crate::mpg::MpgParams::new(1, &p.mpg, 0).map_err(|e| bad("/policy/mpg", e.to_string()))?;
        if let Some(c) = self.uac.capacity {
            if c < 2 * p.chunk_len {
                return Err(bad(
                    "/uac/capacity",
                    format!("{c} is below twice the chunk length {}", p.chunk_len),
                ));
            }
        }
        self.session
            .latency
            .validate()
            .map_err(|e| bad("/session/latency", e.to_string()))?;
        let g = self.ablation.mpg.g_target;
        if !(g > 0.0 && g < 1.0) {
            return Err(bad("/ablation/mpg/g_target", format!("{g} outside (0, 1)")));
        }
        Ok(())
    }

    fn all_members(&self) -> Result<(SlotLayout, Vec<FleetMember>)> {
        let Some(space) = &self.space else {
            let layout = SlotLayout::default_layout();
            let mut fleet = default_fleet(&layout)?;
            for m in &mut fleet {
                if let Some(d) = self.dynamics.get(&m.spec.id) {
                    m.dynamics = *d;
                }
            }
            return Ok((layout, fleet));
        };
        let (layout, specs) = space.build()?;
        let fleet = specs
            .into_iter()
            .zip(&space.embodiments)
            .map(|(spec, entry)| {
                let safe_pose = match &entry.safe_pose {
                    Some(p) => project(p, &spec, &layout)?.into_inner(),
                    None => vec![0.0; layout.dim()],
                };
                Ok(FleetMember {
                    dynamics: self.dynamics.get(&spec.id).copied().unwrap_or(Dynamics::Integrator),
                    spec,
                    safe_pose,
                })
            })
            .collect::<Result<_>>()?;
        Ok((layout, fleet))
    }

    /// The layout and the selected fleet members, in config order.
    pub fn fleet(&self) -> Result<(SlotLayout, Vec<FleetMember>)> {
        let (layout, all) = self.all_members()?;
        if self.embodiments.is_empty() {
            return Ok((layout, all));
        }
        let picked = self
            .embodiments
            .iter()
            .filter_map(|id| all.iter().find(|m| &m.spec.id == id).cloned())
            .collect();
        Ok((layout, picked))
    }

    /// Session settings resolved for one embodiment.
    pub fn tracking(&self, member: &FleetMember) -> TrackingSession {
        let s = &self.session;
        let latency = if s.latency_relative {
            s.latency.scaled(member.spec.latency_budget_s)
        } else {
            s.latency
        };
        TrackingSession {
            task: s.task.clone(),
            latency,
            steps: s.steps,
            chunk_len: self.policy.chunk_len,
            denoise_steps: self.policy.denoise_steps,
            safety_steps: self.uac.safety_steps,
            uac: self.uac.enabled,
            clock: s.clock,
            capacity: self.uac.capacity,
            fallback: self.uac.fallback,
            starvation_limit: self.uac.starvation_limit,
        }
    }
}

fn schema_validator() -> &'static jsonschema::Validator {
    static V: OnceLock<jsonschema::Validator> = OnceLock::new();
    V.get_or_init(|| {
        let schema: serde_json::Value = serde_json::from_str(SCHEMA).expect("schema is JSON");
        jsonschema::validator_for(&schema).expect("schema compiles")
    })
}

/// First schema violation, if any.
pub fn check_schema(value: &serde_json::Value) -> Result<()> {
    match schema_validator().iter_errors(value).next() {
        None => Ok(()),
        Some(e) => Err(Error::Config {
            pointer: e.instance_path().to_string(),
            reason: e.to_string(),
        }),
    }
}

fn escape(token: &str) -> String {
    token.replace('~', "~0").replace('/', "~1")
}

fn path_pointer(path: &serde_path_to_error::Path) -> String {
    use serde_path_to_error::Segment;
    let mut out = String::new();
    for seg in path.iter() {
        match seg {
            Segment::Seq { index } => out.push_str(&format!("/{index}")),
            Segment::Map { key } => {
                out.push('/');
                out.push_str(&escape(key));
            }
            Segment::Enum { .. } | Segment::Unknown => {}
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pointer(text: &str) -> String {
        match ExperimentConfig::from_json(text) {
            Err(Error::Config { pointer, .. }) => pointer,
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn minimal_config_uses_defaults() {
        let c = ExperimentConfig::from_json(r#"{"seed": 7}"#).unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.policy.chunk_len, 8);
        assert_eq!(c.fleet().unwrap().1.len(), 3);
        assert_eq!(c.hash(), ExperimentConfig::with_seed(7).hash());
        assert_ne!(c.hash(), ExperimentConfig::with_seed(8).hash());
    }

    #[test]
    fn schema_errors_carry_pointers() {
        assert_eq!(pointer("{}"), "");
        assert_eq!(pointer(r#"{"seed": -1}"#), "/seed");
        assert_eq!(pointer(r#"{"seed": 1, "policy": {"chunk_len": "8"}}"#), "/policy/chunk_len");
        assert_eq!(pointer(r#"{"seed": 1, "uac": {"bogus": 1}}"#), "/uac");
        assert_eq!(pointer(r#"{"seed": 1, "embodiments": ["gripper_arm_20hz", 3]}"#), "/embodiments/1");
        assert_eq!(pointer("{"), "");
    }

    #[test]
    fn semantic_errors_carry_pointers() {
        assert_eq!(pointer(r#"{"seed": 1, "embodiments": ["gripper_arm_20hz", "nope"]}"#), "/embodiments/1");
        assert_eq!(pointer(r#"{"seed": 1, "uac": {"capacity": 15}}"#), "/uac/capacity");
        assert_eq!(
            pointer(r#"{"seed": 1, "policy": {"arch": "mof", "mof": {"experts": 2, "top_k": 3}}}"#),
            "/policy/mof/top_k"
        );
        assert_eq!(
            pointer(r#"{"seed": 1, "session": {"latency": {"type": "uniform_jitter", "lo": 2, "hi": 1}}}"#),
            "/session/latency"
        );
        assert_eq!(pointer(r#"{"seed": 1, "dynamics": {"ghost": {"type": "integrator"}}}"#), "/dynamics/ghost");
    }

    #[test]
    fn serde_path_pointer_for_missing_field() {
        // bypasses the schema to exercise the typed path
        let v = serde_json::json!({"seed": 1, "space": {"groups": [{"name": "a", "width": 1}]}});
        let err = serde_path_to_error::deserialize::<_, ExperimentConfig>(&v).unwrap_err();
        assert_eq!(path_pointer(err.path()), "/space/groups/0");
        assert_eq!(pointer(&v.to_string()), "/space/groups/0");
    }

    #[test]
    fn custom_space_and_selection() {
        let text = r#"{
            "seed": 3,
            "space": {
                "groups": [{"name": "j", "width": 3, "kind": "arm_joint_rad"}],
                "embodiments": [
                    {"id": "a", "active_slots": [0, 1], "control_period_s": 0.05, "latency_budget_s": 0.1,
                     "safe_pose": [0.5, -0.5]},
                    {"id": "b", "active_slots": [2], "control_period_s": 0.1, "latency_budget_s": 0.1}
                ]
            },
            "dynamics": {"b": {"type": "first_order_lag", "alpha": 0.5}},
            "embodiments": ["b"]
        }"#;
        let c = ExperimentConfig::from_json(text).unwrap();
        let (layout, fleet) = c.fleet().unwrap();
        assert_eq!(layout.dim(), 3);
        assert_eq!(fleet.len(), 1);
        assert_eq!(fleet[0].dynamics, Dynamics::FirstOrderLag { alpha: 0.5 });
        let (_, all) = c.all_members().unwrap();
        assert_eq!(all[0].safe_pose, vec![0.5, -0.5, 0.0]);
        let t = c.tracking(&fleet[0]);
        assert_eq!(t.latency, LatencyKind::UniformJitter { lo: 0.05, hi: 0.1 });
    }

    #[test]
    fn schema_accepts_serialized_defaults() {
        let mut v = serde_json::to_value(ExperimentConfig::with_seed(1)).unwrap();
        // training seeds derive from the root seed and are not configurable
        v["toy"]["train"].as_object_mut().unwrap().remove("seed");
        v["ablation"]["mpg"]["train"].as_object_mut().unwrap().remove("seed");
        check_schema(&v).unwrap();
    }
}
