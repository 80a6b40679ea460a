//! Experiment configuration files.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::de::{self, Deserializer, Visitor};
use serde::{Deserialize, Serialize, Serializer};

use super::ScenarioError;
use crate::av::{AvControllerConfig, AvMode, AvRunConfig, DoorScenario};
use crate::toy::ToyParams;
use crate::vehicle::VehicleParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Toy,
    ToySweep,
    ToyExpectedCost,
    Av,
    AvSweep,
}

impl ExperimentKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ExperimentKind::Toy => "toy",
            ExperimentKind::ToySweep => "toy-sweep",
            ExperimentKind::ToyExpectedCost => "toy-expected-cost",
            ExperimentKind::Av => "av",
            ExperimentKind::AvSweep => "av-sweep",
        }
    }

    fn is_sweep(&self) -> bool {
        matches!(
            self,
            ExperimentKind::ToySweep | ExperimentKind::ToyExpectedCost | ExperimentKind::AvSweep
        )
    }
}

/// A time (or step) at which the hazard starts, or `"never"`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Trigger<T> {
    At(T),
    Never,
}

impl<T: Copy> Trigger<T> {
    pub fn as_option(&self) -> Option<T> {
        match self {
            Trigger::At(v) => Some(*v),
            Trigger::Never => None,
        }
    }
}

impl<T: Serialize> Serialize for Trigger<T> {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Trigger::At(v) => v.serialize(s),
            Trigger::Never => s.serialize_str("never"),
        }
    }
}

struct TriggerVisitor<T>(std::marker::PhantomData<T>);

impl<'de, T: TriggerValue> Visitor<'de> for TriggerVisitor<T> {
    type Value = Trigger<T>;

    fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
        write!(f, "{} or \"never\"", T::EXPECTING)
    }

    fn visit_str<E: de::Error>(self, v: &str) -> Result<Self::Value, E> {
        if v == "never" {
            Ok(Trigger::Never)
        } else {
            Err(E::invalid_value(de::Unexpected::Str(v), &self))
        }
    }

    fn visit_i64<E: de::Error>(self, v: i64) -> Result<Self::Value, E> {
        T::from_i64(v)
            .map(Trigger::At)
            .ok_or_else(|| E::invalid_value(de::Unexpected::Signed(v), &self))
    }

    fn visit_u64<E: de::Error>(self, v: u64) -> Result<Self::Value, E> {
        self.visit_i64(v as i64)
    }

    fn visit_f64<E: de::Error>(self, v: f64) -> Result<Self::Value, E> {
        T::from_f64(v)
            .map(Trigger::At)
            .ok_or_else(|| E::invalid_value(de::Unexpected::Float(v), &self))
    }
}

impl<'de, T: TriggerValue> Deserialize<'de> for Trigger<T> {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        d.deserialize_any(TriggerVisitor(std::marker::PhantomData))
    }
}

pub trait TriggerValue: Sized + Copy {
    const EXPECTING: &'static str;
    fn from_i64(v: i64) -> Option<Self>;
    fn from_f64(v: f64) -> Option<Self>;
}

impl TriggerValue for usize {
    const EXPECTING: &'static str = "a step number";
    fn from_i64(v: i64) -> Option<Self> {
        usize::try_from(v).ok()
    }
    fn from_f64(_: f64) -> Option<Self> {
        None
    }
}

impl TriggerValue for f64 {
    const EXPECTING: &'static str = "a time in seconds";
    fn from_i64(v: i64) -> Option<Self> {
        Some(v as f64)
    }
    fn from_f64(v: f64) -> Option<Self> {
        Some(v)
    }
}

impl std::str::FromStr for Trigger<f64> {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "never" {
            return Ok(Trigger::Never);
        }
        s.parse()
            .map(Trigger::At)
            .map_err(|_| format!("expected a time in seconds or \"never\", got {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ToyControllerKind {
    Rmpc,
    Cmpc,
    Oracle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToySection {
    pub model: ToyParams,
    pub controller: ToyControllerKind,
    pub pc: f64,
    /// Grid for the sweep kinds.
    pub pcs: Vec<f64>,
    /// Step at which the hurdle pops.
    pub pop: Trigger<usize>,
    /// Per-step pop probability for the expected-cost table.
    pub probability: f64,
    /// Bisection tolerance for the crossover probability.
    pub crossover_tolerance: f64,
}

impl Default for ToySection {
    fn default() -> Self {
        Self {
            model: ToyParams::default(),
            controller: ToyControllerKind::Cmpc,
            pc: 0.25,
            pcs: crate::toy::unit_grid(21),
            pop: Trigger::Never,
            probability: 0.1,
            crossover_tolerance: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AvSection {
    pub controller: AvControllerConfig,
    pub scenario: DoorScenario,
    /// s
    pub duration: f64,
    /// s
    pub dt_plant: f64,
    pub trigger: Trigger<f64>,
    /// Grid for `av-sweep`; `controller.pc` is used by `av`.
    pub pcs: Vec<f64>,
    /// Also run the single-horizon robust controller in a sweep.
    pub robust_reference: bool,
    /// TOML file with the vehicle parameters, relative to the config file.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub vehicle_file: Option<PathBuf>,
}

impl Default for AvSection {
    fn default() -> Self {
        let run = AvRunConfig::default();
        Self {
            controller: run.controller,
            scenario: run.scenario,
            duration: run.duration,
            dt_plant: run.dt_plant,
            trigger: Trigger::At(1.2),
            pcs: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            robust_reference: true,
            vehicle_file: None,
        }
    }
}

impl AvSection {
    pub fn run_config(&self, pc: f64, mode: AvMode) -> AvRunConfig {
        let mut controller = self.controller.clone();
        controller.pc = pc;
        controller.mode = mode;
        AvRunConfig {
            controller,
            scenario: self.scenario,
            duration: self.duration,
            dt_plant: self.dt_plant,
            record_horizons: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    /// Output directory, relative to the working directory.
    #[serde(default = "default_out")]
    pub out: PathBuf,
    /// Reserved; every experiment is deterministic.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub toy: ToySection,
    #[serde(default)]
    pub av: AvSection,
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

/// Command-line overrides applied before validation.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub pcs: Option<Vec<f64>>,
    pub trigger: Option<Trigger<f64>>,
}

fn invalid(field: impl Into<String>, reason: impl Into<String>) -> ScenarioError {
    ScenarioError::Config {
        field: field.into(),
        reason: reason.into(),
    }
}

fn check_pc(field: &str, pc: f64) -> Result<(), ScenarioError> {
    if (0.0..=1.0).contains(&pc) {
        Ok(())
    } else {
        Err(invalid(
            field,
            format!("{pc} is outside the valid range [0, 1]"),
        ))
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, ScenarioError> {
        toml::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configs serialize")
    }

    /// Applies CLI overrides. A single `--pc` sets the controller weight of
    /// the single-run kinds; a list replaces the sweep grid.
    pub fn apply(&mut self, o: &Overrides) -> Result<(), ScenarioError> {
        if let Some(out) = &o.out {
            self.out = out.clone();
        }
        if let Some(pcs) = &o.pcs {
            match self.kind {
                ExperimentKind::ToySweep | ExperimentKind::ToyExpectedCost => {
                    self.toy.pcs = pcs.clone()
                }
                ExperimentKind::AvSweep => self.av.pcs = pcs.clone(),
                ExperimentKind::Toy | ExperimentKind::Av => {
                    let [pc] = pcs.as_slice() else {
                        return Err(invalid(
                            "--pc",
                            format!("{} accepts a single value", self.kind.as_str()),
                        ));
                    };
                    if self.kind == ExperimentKind::Toy {
                        self.toy.pc = *pc;
                    } else {
                        self.av.controller.pc = *pc;
                    }
                }
            }
        }
        if let Some(trigger) = o.trigger {
            match self.kind {
                ExperimentKind::Av | ExperimentKind::AvSweep => self.av.trigger = trigger,
                _ => {
                    self.toy.pop = match trigger {
                        Trigger::Never => Trigger::Never,
                        Trigger::At(t) if t >= 0.0 && t.fract() == 0.0 => Trigger::At(t as usize),
                        Trigger::At(t) => {
                            return Err(invalid(
                                "--trigger",
                                format!("pop step must be a whole number, got {t}"),
                            ))
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Range checks, plus resolving `av.vehicle_file` against `base`. The
    /// result no longer references the file, so it validates again as is.
    pub fn validate(mut self, base: &Path) -> Result<Self, ScenarioError> {
        let t = &self.toy;
        if t.model.horizon < 2 {
            return Err(invalid(
                "toy.model.horizon",
                format!("must be at least 2, got {}", t.model.horizon),
            ));
        }
        for (name, v) in [
            ("toy.model.initial_height", t.model.initial_height),
            ("toy.model.max_height", t.model.max_height),
            ("toy.model.rise_speed", t.model.rise_speed),
        ] {
            if !v.is_finite() {
                return Err(invalid(name, "must be finite"));
            }
        }
        if t.model.rise_speed < 0.0 {
            return Err(invalid("toy.model.rise_speed", "must be nonnegative"));
        }
        check_pc("toy.pc", t.pc)?;
        for (i, &pc) in t.pcs.iter().enumerate() {
            check_pc(&format!("toy.pcs[{i}]"), pc)?;
        }
        if let Trigger::At(p) = t.pop {
            if p == 0 || p > t.model.horizon {
                return Err(invalid(
                    "toy.pop",
                    format!("step {p} is outside 1..={}", t.model.horizon),
                ));
            }
        }
        if !(0.0..=1.0).contains(&t.probability) {
            return Err(invalid(
                "toy.probability",
                format!("{} is outside the valid range [0, 1]", t.probability),
            ));
        }
        if !(t.crossover_tolerance > 0.0 && t.crossover_tolerance < 1.0) {
            return Err(invalid("toy.crossover_tolerance", "must lie in (0, 1)"));
        }

        if let Some(file) = self.av.vehicle_file.take() {
            if self.av.controller.params != VehicleParams::default() {
                return Err(invalid(
                    "av.vehicle_file",
                    "vehicle parameters are also set in av.controller.params; use one",
                ));
            }
            let path = base.join(&file);
            let text = std::fs::read_to_string(&path).map_err(|e| {
                invalid(
                    "av.vehicle_file",
                    format!("cannot read {}: {e}", path.display()),
                )
            })?;
            self.av.controller.params = toml::from_str(&text)
                .map_err(|e| invalid("av.vehicle_file", format!("{}: {e}", path.display())))?;
        }
        let a = &self.av;
        check_pc("av.controller.pc", a.controller.pc)?;
        for (i, &pc) in a.pcs.iter().enumerate() {
            check_pc(&format!("av.pcs[{i}]"), pc)?;
        }
        a.controller
            .validate()
            .map_err(|e| invalid("av.controller", e.to_string()))?;
        if !(a.duration > 0.0 && a.duration.is_finite()) {
            return Err(invalid("av.duration", "must be positive"));
        }
        if !(a.dt_plant > 0.0 && a.dt_plant <= 2e-3) {
            return Err(invalid(
                "av.dt_plant",
                format!("{} must lie in (0, 0.002]", a.dt_plant),
            ));
        }
        let s = &a.scenario;
        if !(s.length > 0.0 && s.width > 0.0 && s.opening_speed > 0.0 && s.approach_speed > 0.0) {
            return Err(invalid(
                "av.scenario",
                "length, width, opening_speed and approach_speed must be positive",
            ));
        }
        if s.e_right >= s.e_left {
            return Err(invalid("av.scenario", "e_right must lie below e_left"));
        }
        if let Trigger::At(tr) = a.trigger {
            if !(tr >= 0.0 && tr.is_finite()) {
                return Err(invalid(
                    "av.trigger",
                    format!("{tr} must be a nonnegative time"),
                ));
            }
        }
        if self.kind.is_sweep() {
            let grid = if self.kind == ExperimentKind::AvSweep {
                &a.pcs
            } else {
                &t.pcs
            };
            if grid.is_empty() {
                return Err(invalid("pcs", "sweep needs at least one Pc value"));
            }
        }
        Ok(self)
    }
}

/// Reads, parses and validates a config file.
pub fn validate_config(path: &Path) -> Result<ExperimentConfig, ScenarioError> {
    load_config(path, &Overrides::default())
}

pub fn load_config(path: &Path, overrides: &Overrides) -> Result<ExperimentConfig, ScenarioError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ScenarioError::Read(format!("cannot read {}: {e}", path.display())))?;
    let mut cfg = ExperimentConfig::parse(&text)?;
    cfg.apply(overrides)?;
    cfg.validate(path.parent().unwrap_or(Path::new(".")))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<ExperimentConfig, ScenarioError> {
        ExperimentConfig::parse(text)?.validate(Path::new("."))
    }

    #[test]
    fn minimal_toy_config_fills_defaults() {
        let c = parse("kind = \"toy\"").unwrap();
        assert_eq!(c.toy.model.horizon, 10);
        assert_eq!(c.toy.model.max_height, 1.0);
        assert_eq!(c.toy.model.rise_speed, 0.25);
        assert_eq!(c.toy.pop, Trigger::Never);
    }

    #[test]
    fn av_defaults_without_weights() {
        let c = parse("kind = \"av\"\n[av.controller]\npc = 0.5\n").unwrap();
        assert_eq!(c.av.controller.weights.q, [0.0, 0.0, 1.0, 1.0]);
        assert_eq!(c.av.controller.weights.r, 0.01);
        assert_eq!(c.av.controller.weights.w, 1000.0);
        assert_eq!(c.av.controller.schedule.len(), 20);
    }

    #[test]
    fn out_of_range_pc_names_the_field() {
        let err = parse("kind = \"toy\"\n[toy]\npc = 1.3\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("toy.pc") && msg.contains("[0, 1]"), "{msg}");
        let err = parse("kind = \"av-sweep\"\n[av]\npcs = [0.0, 1.3]\n").unwrap_err();
        assert!(err.to_string().contains("av.pcs[1]"));
    }

    #[test]
    fn unknown_keys_are_rejected_with_a_line() {
        let err = parse("kind = \"toy\"\n[toy]\nhorizn = 4\n").unwrap_err();
        let ScenarioError::Parse(msg) = err else {
            panic!("parse error expected")
        };
        assert!(msg.contains("horizn") && msg.contains("line 3"), "{msg}");
    }

    #[test]
    fn trigger_accepts_time_integer_and_never() {
        let c = parse("kind = \"av\"\n[av]\ntrigger = \"never\"\n").unwrap();
        assert_eq!(c.av.trigger, Trigger::Never);
        let c = parse("kind = \"av\"\n[av]\ntrigger = 1\n").unwrap();
        assert_eq!(c.av.trigger, Trigger::At(1.0));
        let c = parse("kind = \"toy\"\n[toy]\npop = 3\n").unwrap();
        assert_eq!(c.toy.pop, Trigger::At(3));
        assert!(parse("kind = \"toy\"\n[toy]\npop = \"soon\"\n").is_err());
        assert!(parse("kind = \"toy\"\n[toy]\npop = 11\n").is_err());
    }

    #[test]
    fn round_trip_is_a_fixed_point() {
        for kind in ["toy", "toy-sweep", "toy-expected-cost", "av", "av-sweep"] {
            let c = parse(&format!("kind = \"{kind}\"\n[av]\ntrigger = 0.8\n")).unwrap();
            let again = parse(&c.to_toml()).unwrap();
            assert_eq!(c, again, "{kind}");
        }
    }

    #[test]
    fn overrides() {
        let mut c = ExperimentConfig::parse("kind = \"av\"").unwrap();
        let o = Overrides {
            pcs: Some(vec![0.75]),
            trigger: Some(Trigger::Never),
            ..Default::default()
        };
        c.apply(&o).unwrap();
        assert_eq!(c.av.controller.pc, 0.75);
        assert_eq!(c.av.trigger, Trigger::Never);
        let o = Overrides {
            pcs: Some(vec![0.1, 0.2]),
            ..Default::default()
        };
        assert!(c.apply(&o).is_err());
        let mut t = ExperimentConfig::parse("kind = \"toy\"").unwrap();
        t.apply(&Overrides {
            trigger: Some(Trigger::At(4.0)),
            ..Default::default()
        })
        .unwrap();
        assert_eq!(t.toy.pop, Trigger::At(4));
    }

    #[test]
    fn vehicle_file_is_resolved_and_inlined() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("car.toml"), "mass = 1500.0\n").unwrap();
        let cfg = dir.path().join("run.toml");
        std::fs::write(&cfg, "kind = \"av\"\n[av]\nvehicle_file = \"car.toml\"\n").unwrap();
        let c = validate_config(&cfg).unwrap();
        assert_eq!(c.av.controller.params.mass, 1500.0);
        assert_eq!(c.av.vehicle_file, None);
        std::fs::write(
            &cfg,
            "kind = \"av\"\n[av]\nvehicle_file = \"missing.toml\"\n",
        )
        .unwrap();
        assert!(validate_config(&cfg)
            .unwrap_err()
            .to_string()
            .contains("av.vehicle_file"));
    }
}
