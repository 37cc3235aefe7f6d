//! Effective parameters of a run and the `--set key=value` overrides.
//!
//! Keys are dotted paths into one document with the namespaces `gen`,
//! `scenario`, `mission`, `dataset`, `train` and `detect`; array elements
//! are addressed by index (`scenario.patrol.0.x_m`). Values are read as
//! JSON when they parse, otherwise as plain strings.

use panelbot_core::cascade::{DatasetSpec, DetectParams, TrainParams};
use panelbot_core::mission::MissionConfig;
use panelbot_core::scene::{GenParams, Scenario};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::CliError;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Settings {
    pub gen: GenParams,
    pub mission: MissionConfig,
    pub dataset: DatasetSpec,
    pub train: TrainParams,
    pub detect: DetectParams,
}

/// One parsed `--set` entry.
#[derive(Clone, Debug, PartialEq)]
pub struct Override {
    pub namespace: String,
    pub path: Vec<String>,
    pub value: Value,
}

impl Override {
    pub fn parse(raw: &str) -> Result<Override, CliError> {
        let (key, value) = raw
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("override {raw:?} is not key=value")))?;
        let mut parts = key.trim().split('.').map(str::to_string);
        let namespace = parts.next().filter(|s| !s.is_empty()).ok_or_else(|| CliError::Usage(format!("empty key in {raw:?}")))?;
        let path: Vec<String> = parts.collect();
        if path.is_empty() || path.iter().any(String::is_empty) {
            return Err(CliError::Usage(format!("override {raw:?} needs namespace.field")));
        }
        let value = serde_json::from_str(value.trim()).unwrap_or_else(|_| Value::String(value.trim().to_string()));
        Ok(Override { namespace, path, value })
    }

    fn key(&self) -> String {
        format!("{}.{}", self.namespace, self.path.join("."))
    }
}

fn set_path(doc: &mut Value, o: &Override) -> Result<(), CliError> {
    let unknown = || CliError::Usage(format!("unknown parameter {}", o.key()));
    let mut cur = doc;
    for seg in &o.path {
        cur = match cur {
            Value::Object(map) => map.get_mut(seg).ok_or_else(unknown)?,
            Value::Array(items) => {
                let i: usize = seg.parse().map_err(|_| unknown())?;
                items.get_mut(i).ok_or_else(unknown)?
            }
            _ => return Err(unknown()),
        };
    }
    *cur = o.value.clone();
    Ok(())
}

/// `value` with the overrides applied, checked by deserializing back.
pub fn patch<T: Serialize + DeserializeOwned>(value: &T, overrides: &[&Override]) -> Result<T, CliError> {
    if overrides.is_empty() {
        return serde_json::from_value(serde_json::to_value(value).map_err(|e| CliError::Usage(e.to_string()))?)
            .map_err(|e| CliError::Usage(e.to_string()));
    }
    let mut doc = serde_json::to_value(value).map_err(|e| CliError::Usage(e.to_string()))?;
    for o in overrides {
        set_path(&mut doc, o)?;
    }
    serde_json::from_value(doc).map_err(|e| {
        let keys: Vec<String> = overrides.iter().map(|o| o.key()).collect();
        CliError::Usage(format!("invalid value for {}: {e}", keys.join(", ")))
    })
}

impl Settings {
    /// Defaults with the overrides of every settings namespace applied.
    /// `scenario.*` overrides are left for [`apply_scenario`].
    pub fn resolve(overrides: &[Override]) -> Result<Settings, CliError> {
        for o in overrides {
            if !matches!(o.namespace.as_str(), "gen" | "scenario" | "mission" | "dataset" | "train" | "detect") {
                return Err(CliError::Usage(format!("unknown namespace {:?} in {}", o.namespace, o.key())));
            }
        }
        let of = |ns: &str| overrides.iter().filter(|o| o.namespace == ns).collect::<Vec<_>>();
        let s = Settings {
            gen: patch(&GenParams::default(), &of("gen"))?,
            mission: patch(&MissionConfig::default(), &of("mission"))?,
            dataset: patch(&DatasetSpec::default(), &of("dataset"))?,
            train: patch(&TrainParams::default(), &of("train"))?,
            detect: patch(&DetectParams::default(), &of("detect"))?,
        };
        s.gen.validate()?;
        s.mission.validate()?;
        s.train.validate()?;
        Ok(s)
    }
}

/// Applies the `scenario.*` overrides and re-validates.
pub fn apply_scenario(sc: &Scenario, overrides: &[Override]) -> Result<Scenario, CliError> {
    let of: Vec<&Override> = overrides.iter().filter(|o| o.namespace == "scenario").collect();
    if of.is_empty() {
        return Ok(sc.clone());
    }
    let sc: Scenario = patch(sc, &of)?;
    sc.validate()?;
    Ok(sc)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_values() {
        let o = Override::parse("mission.slip_probability=0.25").unwrap();
        assert_eq!(o.namespace, "mission");
        assert_eq!(o.path, vec!["slip_probability"]);
        assert_eq!(o.value, Value::from(0.25));
        assert_eq!(Override::parse("gen.wrench_side=back").unwrap().value, Value::from("back"));
        assert!(Override::parse("mission").is_err());
        assert!(Override::parse("mission=3").is_err());
    }

    #[test]
    fn resolves_nested_keys() {
        let o = [
            Override::parse("mission.docking.cycles=3").unwrap(),
            Override::parse("gen.wrench_side=null").unwrap(),
            Override::parse("detect.stride=2").unwrap(),
        ];
        let s = Settings::resolve(&o).unwrap();
        assert_eq!(s.mission.docking.cycles, 3);
        assert_eq!(s.gen.wrench_side, None);
        assert_eq!(s.detect.stride, 2);
    }

    #[test]
    fn rejects_unknown_and_mistyped() {
        for raw in ["mission.nope=1", "gen.distractors=many", "robot.x=1", "mission.slip_probability=3"] {
            let o = [Override::parse(raw).unwrap()];
            assert!(matches!(Settings::resolve(&o), Err(e) if e.exit_code() == 2), "{raw}");
        }
    }
}
