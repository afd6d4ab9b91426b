//! Core records shared by every stage of the pipeline, the seeded stream
//! contract, and the JSON / JSONL file forms.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// An injectable skill: an agent-visible description plus a procedural body.
///
/// `sources` records the task ids the skill was distilled from; library
/// construction merges it on deduplication and reads task families from it.
/// `effect` is simulator ground truth and is absent from real libraries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Skill {
    pub id: String,
    pub name: String,
    pub description: String,
    pub body: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sources: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub effect: Option<SimEffect>,
}

impl Skill {
    pub fn new(
        id: impl Into<String>,
        name: impl Into<String>,
        description: impl Into<String>,
        body: impl Into<String>,
    ) -> Self {
        Skill {
            id: id.into(),
            name: name.into(),
            description: description.into(),
            body: body.into(),
            sources: Vec::new(),
            effect: None,
        }
    }

    /// Text used for library-level embedding and sparse retrieval.
    pub fn full_text(&self) -> String {
        format!("{} {} {}", self.name, self.description, self.body)
    }

    /// Planted gain for a task; tasks absent from the map get zero.
    pub fn gain_for(&self, task_id: &str) -> f64 {
        self.effect
            .as_ref()
            .and_then(|e| e.per_task_gain.get(task_id).copied())
            .unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub id: String,
    pub instruction: String,
    pub domain: String,
    pub base_pass: f64,
    pub base_messages: f64,
}

impl Task {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.base_pass) {
            return Err(Error::invalid(format!(
                "task {} has base_pass {} outside [0,1]",
                self.id, self.base_pass
            )));
        }
        if !(self.base_messages >= 0.0) {
            return Err(Error::invalid(format!(
                "task {} has negative base_messages",
                self.id
            )));
        }
        Ok(())
    }
}

/// Simulator-only effect profile of a skill.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimEffect {
    pub per_task_gain: BTreeMap<String, f64>,
    pub message_cost: f64,
    pub overlap_group: String,
}

impl SimEffect {
    pub fn validate(&self) -> Result<()> {
        if let Some((task, g)) = self
            .per_task_gain
            .iter()
            .find(|(_, g)| !(-1.0..=1.0).contains(*g))
        {
            return Err(Error::invalid(format!(
                "gain {g} for task {task} outside [-1,1]"
            )));
        }
        if !(self.message_cost >= 0.0) {
            return Err(Error::invalid("message_cost must be nonnegative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RolloutRecord {
    pub task_id: String,
    pub context_skill_ids: Vec<String>,
    pub seed: u64,
    pub reward: u8,
    pub messages: u64,
}

impl RolloutRecord {
    /// One-line trace summary consumed by the renderer teacher.
    pub fn trace_summary(&self) -> String {
        format!(
            "steps={}, reward={}, skills={}",
            self.messages,
            self.reward,
            self.context_skill_ids.join(",")
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilityLabel {
    pub task_id: String,
    pub skill_id: String,
    pub delta: f64,
    pub y: f64,
    pub rollouts: usize,
}

impl UtilityLabel {
    pub fn new(task_id: &str, skill_id: &str, delta: f64, rollouts: usize) -> Self {
        UtilityLabel {
            task_id: task_id.to_string(),
            skill_id: skill_id.to_string(),
            delta,
            y: label_from_delta(delta),
            rollouts,
        }
    }
}

/// Affine map of a benefit in [-1,1] onto [0,1]. Harmful skills keep their
/// relative order instead of collapsing at zero.
pub fn label_from_delta(delta: f64) -> f64 {
    ((delta + 1.0) / 2.0).clamp(0.0, 1.0)
}

/// Seeded random stream.
///
/// Backed by ChaCha8. Child streams are keyed on the root seed and a label
/// only, through SHA-256, so a child never depends on how many values were
/// drawn from its parent or from any sibling.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Child stream for `label`. Labels must be nonempty.
    pub fn derive_stream(&self, label: &str) -> Rng {
        assert!(!label.is_empty(), "stream label must be nonempty");
        Rng::new(derive_seed(self.seed, label))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in [0, 1).
    pub fn next_f64(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in [0, n). `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    let digest = h.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

/// Lowercase hex SHA-256 of `text`.
pub fn sha256_hex(text: &str) -> String {
    let digest = Sha256::digest(text.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Order-independent short hash of a set of skill ids.
pub fn context_hash(ids: &[String]) -> String {
    let mut sorted: Vec<&str> = ids.iter().map(String::as_str).collect();
    sorted.sort_unstable();
    sha256_hex(&sorted.join("\n"))[..8].to_string()
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        what: path.display().to_string(),
        message: e.to_string(),
    })
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Parse {
        what: path.display().to_string(),
        message: e.to_string(),
    })?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            what: format!("{}:{}", path.display(), lineno + 1),
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for row in rows {
        let line = serde_json::to_string(row).map_err(|e| Error::Parse {
            what: path.display().to_string(),
            message: e.to_string(),
        })?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn draws(rng: &mut Rng, n: usize) -> Vec<u64> {
        (0..n).map(|_| rng.next_u64()).collect()
    }

    #[test]
    fn derived_stream_is_repeatable() {
        let root = Rng::new(42);
        let a = draws(&mut root.derive_stream("task:t1"), 64);
        let b = draws(&mut root.derive_stream("task:t1"), 64);
        assert_eq!(a, b);
    }

    #[test]
    fn derived_streams_differ_by_label_and_seed() {
        let t1 = draws(&mut Rng::new(42).derive_stream("task:t1"), 64);
        let t2 = draws(&mut Rng::new(42).derive_stream("task:t2"), 64);
        assert!(t1.iter().zip(&t2).any(|(a, b)| a != b));

        let x42 = draws(&mut Rng::new(42).derive_stream("x"), 64);
        let x43 = draws(&mut Rng::new(43).derive_stream("x"), 64);
        assert!(x42.iter().zip(&x43).any(|(a, b)| a != b));
    }

    #[test]
    fn child_ignores_parent_draws() {
        let mut root = Rng::new(7);
        let before = draws(&mut root.derive_stream("c"), 8);
        root.next_u64();
        root.next_u64();
        let after = draws(&mut root.derive_stream("c"), 8);
        assert_eq!(before, after);
    }

    #[test]
    #[should_panic]
    fn empty_label_rejected() {
        Rng::new(1).derive_stream("");
    }

    #[test]
    fn label_mapping() {
        assert_eq!(label_from_delta(0.0), 0.5);
        assert_eq!(label_from_delta(1.0), 1.0);
        assert_eq!(label_from_delta(-1.0), 0.0);
        assert_eq!(label_from_delta(-3.0), 0.0);
        assert!((label_from_delta(0.4) - 0.7).abs() < 1e-12);
    }

    #[test]
    fn context_hash_ignores_order() {
        let a = vec!["b".to_string(), "a".to_string()];
        let b = vec!["a".to_string(), "b".to_string()];
        assert_eq!(context_hash(&a), context_hash(&b));
        assert_ne!(context_hash(&a), context_hash(&["a".to_string()]));
    }

    #[test]
    fn task_validation() {
        let mut t = Task {
            id: "t".into(),
            instruction: "x".into(),
            domain: "d".into(),
            base_pass: 0.5,
            base_messages: 3.0,
        };
        assert!(t.validate().is_ok());
        t.base_pass = 1.5;
        assert!(t.validate().is_err());
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labels.jsonl");
        let rows = vec![
            UtilityLabel::new("t1", "s1", 0.4, 5),
            UtilityLabel::new("t1", "s2", -0.2, 5),
        ];
        write_jsonl(&path, &rows).unwrap();
        let back: Vec<UtilityLabel> = read_jsonl(&path).unwrap();
        assert_eq!(rows, back);
    }
}
