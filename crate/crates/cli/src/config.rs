//! Configuration resolution and run snapshots.
//!
//! A run's configuration starts from a preset, is patched by an optional
//! JSON file and then by command-line flags. Every leaf key remembers which
//! of the three supplied it.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use aftermath::classifier::TrainConfig;
use aftermath::experiment::BenchmarkConfig;
use aftermath::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

pub const SNAPSHOT: &str = "resolved_config.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Preset {
    /// Desk-scale benchmark settings.
    Desk,
    /// Tiny models and datasets for a quick end-to-end check.
    Smoke,
    /// Desk-scale data with the reference classifier optimizer settings (small learning rates, 2000 iterations).
    Reference,
}

impl Preset {
    pub fn config(self) -> BenchmarkConfig {
        match self {
            Preset::Desk => BenchmarkConfig::default(),
            Preset::Smoke => BenchmarkConfig::smoke(),
            Preset::Reference => BenchmarkConfig { train: TrainConfig::default(), ..BenchmarkConfig::default() },
        }
    }

    fn name(self) -> &'static str {
        match self {
            Preset::Desk => "desk",
            Preset::Smoke => "smoke",
            Preset::Reference => "reference",
        }
    }
}

/// One flag-supplied value for a dotted config key.
#[derive(Clone, Debug)]
pub struct Override {
    pub key: String,
    pub value: Value,
    pub flag: String,
}

impl Override {
    /// Parses `key=value`; the value is read as JSON when possible and as a
    /// plain string otherwise.
    pub fn parse_set(text: &str) -> Result<Self> {
        let (key, raw) = text
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {text:?}")))?;
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_owned()));
        Ok(Self { key: key.trim().to_owned(), value, flag: format!("--set {key}") })
    }
}

#[derive(Clone, Debug)]
pub struct Resolved {
    pub config: BenchmarkConfig,
    pub sources: BTreeMap<String, String>,
}

fn leaves(v: &Value, prefix: &str, out: &mut Vec<String>) {
    match v {
        Value::Object(m) if !m.is_empty() => {
            for (k, x) in m {
                leaves(x, &join(prefix, k), out);
            }
        }
        _ => out.push(prefix.to_owned()),
    }
}

fn join(prefix: &str, key: &str) -> String {
    if prefix.is_empty() {
        key.to_owned()
    } else {
        format!("{prefix}.{key}")
    }
}

fn mark(sources: &mut BTreeMap<String, String>, path: &str, v: &Value, source: &str) {
    let nested = format!("{path}.");
    sources.retain(|k, _| k != path && !k.starts_with(&nested));
    let mut ls = Vec::new();
    leaves(v, path, &mut ls);
    for l in ls {
        sources.insert(l, source.to_owned());
    }
}

fn merge(base: &mut Value, patch: &Value, prefix: &str, source: &str, sources: &mut BTreeMap<String, String>) -> Result<()> {
    let (Value::Object(b), Value::Object(p)) = (&mut *base, patch) else {
        return Err(Error::Config(format!("{source}: expected a JSON object at {prefix:?}")));
    };
    for (k, v) in p {
        let path = join(prefix, k);
        let slot = b.get_mut(k).ok_or_else(|| Error::Config(format!("unknown config key {path:?} in {source}")))?;
        if slot.is_object() && v.is_object() {
            merge(slot, v, &path, source, sources)?;
        } else {
            *slot = v.clone();
            mark(sources, &path, v, source);
        }
    }
    Ok(())
}

fn set(base: &mut Value, o: &Override, sources: &mut BTreeMap<String, String>) -> Result<()> {
    let mut slot = base;
    for part in o.key.split('.') {
        slot = slot
            .as_object_mut()
            .and_then(|m| m.get_mut(part))
            .ok_or_else(|| Error::Config(format!("unknown config key {:?} given by {}", o.key, o.flag)))?;
    }
    *slot = o.value.clone();
    mark(sources, &o.key, &o.value, &o.flag);
    Ok(())
}

/// Flags override the file, which overrides the preset.
pub fn resolve(preset: Preset, file: Option<&Path>, overrides: &[Override]) -> Result<Resolved> {
    let mut value = serde_json::to_value(preset.config())?;
    let mut ls = Vec::new();
    leaves(&value, "", &mut ls);
    let default = format!("preset {}", preset.name());
    let mut sources: BTreeMap<String, String> = ls.into_iter().map(|l| (l, default.clone())).collect();
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(|e| Error::load(path, e.to_string()))?;
        let patch: Value = serde_json::from_str(&text).map_err(|e| Error::load(path, e.to_string()))?;
        merge(&mut value, &patch, "", &format!("config file {}", path.display()), &mut sources)?;
    }
    for o in overrides {
        set(&mut value, o, &mut sources)?;
    }
    let config: BenchmarkConfig =
        serde_json::from_value(value).map_err(|e| Error::Config(format!("invalid configuration: {e}")))?;
    config.validate()?;
    Ok(Resolved { config, sources })
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn files_under(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let Ok(read) = std::fs::read_dir(dir) else { return Ok(()) };
    for entry in read {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            files_under(&path, out)?;
        } else {
            out.push(path);
        }
    }
    Ok(())
}

/// Content hashes of every file under `dir` except the snapshot itself.
pub fn hash_outputs(dir: &Path) -> Result<BTreeMap<String, String>> {
    let mut files = Vec::new();
    files_under(dir, &mut files)?;
    let mut out = BTreeMap::new();
    for f in files {
        let rel = f.strip_prefix(dir).unwrap_or(&f).to_string_lossy().replace('\\', "/");
        if rel != SNAPSHOT {
            out.insert(rel, sha256_file(&f)?);
        }
    }
    Ok(out)
}

/// What a finished run leaves in its output directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub command: String,
    pub args: Value,
    pub inputs: BTreeMap<String, String>,
    pub config: Value,
    pub config_hash: String,
    pub sources: BTreeMap<String, String>,
    pub fingerprint: String,
    #[serde(default)]
    pub outputs: BTreeMap<String, String>,
}

impl Snapshot {
    pub fn new(command: &str, args: Value, inputs: BTreeMap<String, String>, resolved: &Resolved) -> Result<Self> {
        let config = serde_json::to_value(&resolved.config)?;
        let key = serde_json::to_string(&(command, &args, &inputs, &config))?;
        Ok(Self {
            command: command.to_owned(),
            args,
            inputs,
            config,
            config_hash: resolved.config.hash(),
            sources: resolved.sources.clone(),
            fingerprint: hex::encode(Sha256::digest(key.as_bytes())),
            outputs: BTreeMap::new(),
        })
    }

    pub fn read(dir: &Path) -> Result<Option<Self>> {
        let path = dir.join(SNAPSHOT);
        if !path.exists() {
            return Ok(None);
        }
        let text = std::fs::read_to_string(&path).map_err(|e| Error::load(&path, e.to_string()))?;
        serde_json::from_str(&text).map(Some).map_err(|e| Error::load(&path, e.to_string()))
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(SNAPSHOT);
        std::fs::write(&path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&path, e))
    }
}

#[derive(Debug, PartialEq, Eq)]
pub enum Plan {
    Run,
    Skip,
}

fn flat(v: &Value) -> BTreeMap<String, Value> {
    let mut ls = Vec::new();
    leaves(v, "", &mut ls);
    ls.into_iter()
        .map(|l| {
            let x = l.split('.').filter(|p| !p.is_empty()).fold(v, |acc, p| &acc[p]);
            (l, x.clone())
        })
        .collect()
}

/// Names the first setting that differs between two snapshots and where
/// each value came from.
pub fn describe_conflict(old: &Snapshot, new: &Snapshot, path: &Path) -> String {
    let here = format!("existing snapshot {}", path.display());
    if old.command != new.command {
        return format!("{here} was written by `{}`, not `{}`", old.command, new.command);
    }
    let pairs = [("argument", &old.args, &new.args), ("config key", &old.config, &new.config)];
    for (what, a, b) in pairs {
        let (fa, fb) = (flat(a), flat(b));
        for (k, va) in &fa {
            let vb = fb.get(k).unwrap_or(&Value::Null);
            if va != vb {
                let (sa, sb) = if what == "config key" {
                    let s = |m: &BTreeMap<String, String>| m.get(k).cloned().unwrap_or_else(|| "unknown".into());
                    (s(&old.sources), s(&new.sources))
                } else {
                    ("recorded arguments".into(), "command line".into())
                };
                return format!("{what} {k:?} is {va} in the {here} (from {sa}) but {vb} in this run (from {sb})");
            }
        }
    }
    for (k, va) in &old.inputs {
        if new.inputs.get(k) != Some(va) {
            return format!("input {k:?} has changed since the {here} was written");
        }
    }
    format!("the {here} does not match this run")
}

/// Decides whether to run, skip an identical completed run, or refuse to
/// overwrite a run made with different settings.
pub fn plan(dir: &Path, new: &Snapshot, force: bool) -> Result<Plan> {
    let Some(old) = Snapshot::read(dir)? else { return Ok(Plan::Run) };
    if old.fingerprint == new.fingerprint {
        if hash_outputs(dir)? == old.outputs {
            return Ok(Plan::Skip);
        }
        log::warn!("outputs in {} are incomplete or modified; rerunning", dir.display());
        return Ok(Plan::Run);
    }
    if force {
        return Ok(Plan::Run);
    }
    Err(Error::Config(format!(
        "{}; pass --force to overwrite or choose another --out",
        describe_conflict(&old, new, &dir.join(SNAPSHOT))
    )))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precedence_and_sources() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("c.json");
        std::fs::write(&file, r#"{"replicates": 2, "codec": {"iterations": 50}}"#).unwrap();
        let o = Override::parse_set("codec.iterations=70").unwrap();
        let r = resolve(Preset::Desk, Some(&file), &[o]).unwrap();
        assert_eq!(r.config.replicates, 2);
        assert_eq!(r.config.codec.iterations, 70);
        assert_eq!(r.sources["codec.iterations"], "--set codec.iterations");
        assert!(r.sources["replicates"].starts_with("config file"));
        assert_eq!(r.sources["seed"], "preset desk");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let o = Override::parse_set("codec.iterationz=5").unwrap();
        assert!(matches!(resolve(Preset::Desk, None, &[o]), Err(Error::Config(_))));
    }
}
