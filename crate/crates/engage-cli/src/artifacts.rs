//! Artifact persistence: atomic writes, JSONL helpers, content hashing and
//! the pipeline manifest.

use crate::error::CliError;
use engage_core::dialogue::UserCondition;
use engage_core::Scenario;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

/// Writes bytes via a temp file in the same directory, then renames into
/// place, so readers never observe a half-written artifact.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let dir = path
        .parent()
        .ok_or_else(|| CliError::Config(format!("no parent dir for {}", path.display())))?;
    std::fs::create_dir_all(dir).map_err(|e| CliError::io("creating output dir", e))?;
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name().and_then(|n| n.to_str()).unwrap_or("artifact")
    ));
    std::fs::write(&tmp, bytes).map_err(|e| CliError::io("writing temp artifact", e))?;
    std::fs::rename(&tmp, path).map_err(|e| CliError::io("renaming artifact", e))?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Invariant(format!("serializing {}: {e}", path.display())))?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::io(&format!("reading {}", path.display()), e))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("bad JSON in {}: {e}", path.display())))
}

/// One JSON object per line, UTF-8, newline-delimited.
pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), CliError> {
    let mut out = String::new();
    for item in items {
        let line = serde_json::to_string(item)
            .map_err(|e| CliError::Invariant(format!("serializing {}: {e}", path.display())))?;
        out.push_str(&line);
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::io(&format!("reading {}", path.display()), e))?;
    let mut items = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(line).map_err(|e| {
            CliError::Config(format!("{}:{}: bad line: {e}", path.display(), i + 1))
        })?;
        items.push(item);
    }
    Ok(items)
}

/// Loads and validates the conditions file; every condition must match the
/// run scenario. Errors carry 1-based line numbers.
pub fn load_conditions(path: &Path, scenario: Scenario) -> Result<Vec<UserCondition>, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::io(&format!("reading conditions {}", path.display()), e))?;
    let mut conditions = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.trim_start().starts_with('#') {
            continue;
        }
        let condition: UserCondition = serde_json::from_str(line).map_err(|e| {
            CliError::Config(format!("{}:{}: bad condition: {e}", path.display(), i + 1))
        })?;
        condition.validate().map_err(|e| {
            CliError::Config(format!("{}:{}: invalid condition: {e}", path.display(), i + 1))
        })?;
        if condition.scenario != scenario {
            return Err(CliError::Config(format!(
                "{}:{}: condition {:?} does not match run scenario {:?}",
                path.display(),
                i + 1,
                condition.scenario,
                scenario
            )));
        }
        conditions.push(condition);
    }
    if conditions.is_empty() {
        return Err(CliError::Config(format!(
            "no conditions found in {}",
            path.display()
        )));
    }
    Ok(conditions)
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path)
        .map_err(|e| CliError::io(&format!("hashing {}", path.display()), e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub scenario: Scenario,
    pub root_seed: u64,
    pub stages: Vec<StageEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct StageEntry {
    pub name: String,
    pub artifacts: Vec<ArtifactEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ArtifactEntry {
    pub path: String,
    pub sha256: String,
}

impl Manifest {
    pub fn new(scenario: Scenario, root_seed: u64) -> Manifest {
        Manifest {
            scenario,
            root_seed,
            stages: Vec::new(),
        }
    }

    /// Records a finished stage by hashing its artifacts (paths are stored
    /// relative to the output dir, sorted).
    pub fn push_stage(
        &mut self,
        name: &str,
        out_dir: &Path,
        artifact_paths: &[PathBuf],
    ) -> Result<(), CliError> {
        let mut artifacts = Vec::with_capacity(artifact_paths.len());
        for path in artifact_paths {
            let rel = path
                .strip_prefix(out_dir)
                .unwrap_or(path)
                .to_string_lossy()
                .replace('\\', "/");
            artifacts.push(ArtifactEntry {
                path: rel,
                sha256: sha256_file(path)?,
            });
        }
        artifacts.sort_by(|a, b| a.path.cmp(&b.path));
        self.stages.push(StageEntry {
            name: name.to_string(),
            artifacts,
        });
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn atomic_write_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nested/x.json");
        write_json(&path, &serde_json::json!({"a": 1})).unwrap();
        let back: serde_json::Value = read_json(&path).unwrap();
        assert_eq!(back["a"], 1);
        assert!(!dir.path().join("nested/.x.json.tmp").exists());
    }

    #[test]
    fn jsonl_round_trips_and_reports_bad_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rows.jsonl");
        write_jsonl(&path, &[1u32, 2, 3]).unwrap();
        let back: Vec<u32> = read_jsonl(&path).unwrap();
        assert_eq!(back, vec![1, 2, 3]);

        std::fs::write(&path, "1\nnot json\n").unwrap();
        let err = read_jsonl::<u32>(&path).unwrap_err();
        assert!(err.to_string().contains(":2:"), "line number in {err}");
    }

    #[test]
    fn conditions_must_match_scenario() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("conds.jsonl");
        std::fs::write(
            &path,
            "{\"scenario\":\"persuasion\",\"description\":\"(a, b)\",\"id\":\"p0\"}\n",
        )
        .unwrap();
        let err = load_conditions(&path, Scenario::EmotionalSupport).unwrap_err();
        assert!(err.to_string().contains(":1:"));
        assert!(load_conditions(&path, Scenario::Persuasion).is_ok());
    }

    #[test]
    fn manifest_hashes_are_stable() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.txt");
        std::fs::write(&a, "hello").unwrap();
        let mut m1 = Manifest::new(Scenario::EmotionalSupport, 7);
        m1.push_stage("s", dir.path(), &[a.clone()]).unwrap();
        let mut m2 = Manifest::new(Scenario::EmotionalSupport, 7);
        m2.push_stage("s", dir.path(), &[a]).unwrap();
        assert_eq!(
            serde_json::to_string(&m1).unwrap(),
            serde_json::to_string(&m2).unwrap()
        );
    }
}
