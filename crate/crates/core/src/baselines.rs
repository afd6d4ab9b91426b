//! Comparison selectors: no skill, a random skill, the full library, sparse
//! and dense retrieval, planner top-k, globally best k, and the adaptive
//! planner pipeline.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::budget::{select_adaptive, AdmissionConfig};
use crate::domain::{Rng, Task};
use crate::embed::{cosine, embed, EmbedderConfig};
use crate::error::{Error, Result};
use crate::librarian::SkillLibrary;
use crate::planner::{description_embeddings, score_candidates, score_tasks, PlannerModel};

pub const BM25_K1: f64 = 1.5;
pub const BM25_B: f64 = 0.75;

/// Lowercased whitespace tokens with leading and trailing punctuation
/// stripped.
pub fn bm25_tokens(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|t| {
            t.trim_matches(|c: char| !c.is_alphanumeric())
                .to_lowercase()
        })
        .filter(|t| !t.is_empty())
        .collect()
}

/// Okapi BM25 score of every skill (library order) for `query`, over
/// name, description and body. Uses `idf = ln(1 + (N − n + 0.5)/(n + 0.5))`.
pub fn bm25_scores(query: &str, library: &SkillLibrary) -> Result<Vec<f64>> {
    if library.is_empty() {
        return Err(Error::invalid("bm25 over an empty library"));
    }
    let docs: Vec<Vec<String>> = library.skills.iter().map(|s| bm25_tokens(&s.full_text())).collect();
    let n_docs = docs.len() as f64;
    let avgdl = docs.iter().map(Vec::len).sum::<usize>() as f64 / n_docs;
    let tfs: Vec<HashMap<&str, f64>> = docs
        .iter()
        .map(|d| {
            let mut m = HashMap::new();
            for t in d {
                *m.entry(t.as_str()).or_insert(0.0) += 1.0;
            }
            m
        })
        .collect();
    let mut scores = vec![0.0; docs.len()];
    for term in bm25_tokens(query) {
        let df = tfs.iter().filter(|m| m.contains_key(term.as_str())).count() as f64;
        if df == 0.0 {
            continue;
        }
        let idf = (1.0 + (n_docs - df + 0.5) / (df + 0.5)).ln();
        for (i, m) in tfs.iter().enumerate() {
            if let Some(&tf) = m.get(term.as_str()) {
                let norm = 1.0 - BM25_B + BM25_B * docs[i].len() as f64 / avgdl;
                scores[i] += idf * tf * (BM25_K1 + 1.0) / (tf + BM25_K1 * norm);
            }
        }
    }
    Ok(scores)
}

fn top_k(library: &SkillLibrary, scores: &[f64], k: usize) -> Vec<String> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .total_cmp(&scores[a])
            .then_with(|| library.skills[a].id.cmp(&library.skills[b].id))
    });
    order.into_iter().take(k).map(|i| library.skills[i].id.clone()).collect()
}

pub fn bm25_rank(query: &str, library: &SkillLibrary, k: usize) -> Result<Vec<String>> {
    if k < 1 {
        return Err(Error::invalid("k must be at least 1"));
    }
    Ok(top_k(library, &bm25_scores(query, library)?, k))
}

/// Skills by descending cosine between the query and skill full text.
pub fn dense_rank(query: &str, library: &SkillLibrary, k: usize, embedder: &EmbedderConfig) -> Result<Vec<String>> {
    if k < 1 {
        return Err(Error::invalid("k must be at least 1"));
    }
    if library.is_empty() {
        return Err(Error::invalid("dense retrieval over an empty library"));
    }
    let q = embed(query, embedder);
    let scores: Vec<f64> = library
        .skills
        .iter()
        .map(|s| cosine(&q, &embed(&s.full_text(), embedder)))
        .collect::<Result<_>>()?;
    Ok(top_k(library, &scores, k))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectorKind {
    None,
    Random,
    Full,
    Bm25,
    Dense,
    FixedTopk,
    GlobalTopk,
    PlannerAdaptive,
}

impl SelectorKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            SelectorKind::None => "none",
            SelectorKind::Random => "random",
            SelectorKind::Full => "full",
            SelectorKind::Bm25 => "bm25",
            SelectorKind::Dense => "dense",
            SelectorKind::FixedTopk => "fixed_topk",
            SelectorKind::GlobalTopk => "global_topk",
            SelectorKind::PlannerAdaptive => "planner_adaptive",
        }
    }

    pub fn needs_k(&self) -> bool {
        matches!(
            self,
            SelectorKind::Bm25 | SelectorKind::Dense | SelectorKind::FixedTopk | SelectorKind::GlobalTopk
        )
    }

    pub fn needs_model(&self) -> bool {
        matches!(
            self,
            SelectorKind::FixedTopk | SelectorKind::GlobalTopk | SelectorKind::PlannerAdaptive
        )
    }

    /// Planner-driven selectors render by default.
    pub fn renders_by_default(&self) -> bool {
        self.needs_model()
    }
}

impl std::str::FromStr for SelectorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "none" => SelectorKind::None,
            "random" => SelectorKind::Random,
            "full" => SelectorKind::Full,
            "bm25" => SelectorKind::Bm25,
            "dense" => SelectorKind::Dense,
            "fixed_topk" => SelectorKind::FixedTopk,
            "global_topk" => SelectorKind::GlobalTopk,
            "planner_adaptive" | "planner" => SelectorKind::PlannerAdaptive,
            other => return Err(Error::invalid(format!("unknown method {other}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectorSpec {
    pub kind: SelectorKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Overrides the kind's rendering default.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub render: Option<bool>,
}

impl SelectorSpec {
    pub fn new(kind: SelectorKind) -> Self {
        SelectorSpec {
            kind,
            k: None,
            seed: None,
            render: None,
        }
    }

    pub fn with_k(kind: SelectorKind, k: usize) -> Self {
        SelectorSpec {
            k: Some(k),
            ..SelectorSpec::new(kind)
        }
    }

    pub fn rendered(&self) -> bool {
        self.render.unwrap_or_else(|| self.kind.renders_by_default())
    }

    /// Method name in result tables, e.g. `bm25@4` or
    /// `planner_adaptive/no_render`.
    pub fn label(&self) -> String {
        let mut s = self.kind.as_str().to_string();
        if let Some(k) = self.k {
            s.push_str(&format!("@{k}"));
        }
        if self.render.is_some() && self.rendered() != self.kind.renders_by_default() {
            s.push_str(if self.rendered() { "/render" } else { "/no_render" });
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind.needs_k() && self.k.is_none_or(|k| k < 1) {
            return Err(Error::invalid(format!("{} requires k >= 1", self.kind.as_str())));
        }
        Ok(())
    }
}

/// Skill ids ordered by mean planner score over `dev_tasks` (ties to the
/// smaller id).
pub fn global_order(model: &PlannerModel, dev_tasks: &[Task], library: &SkillLibrary) -> Vec<String> {
    let scores = score_tasks(model, dev_tasks, library);
    let mut means: Vec<(String, f64)> = library
        .skills
        .iter()
        .map(|s| {
            let total: f64 = scores.iter().map(|m| m[&s.id]).sum();
            (s.id.clone(), total / scores.len().max(1) as f64)
        })
        .collect();
    means.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    means.into_iter().map(|(id, _)| id).collect()
}

/// Everything a selector may consult besides the task.
pub struct Selector<'a> {
    pub library: &'a SkillLibrary,
    pub embedder: EmbedderConfig,
    pub model: Option<&'a PlannerModel>,
    pub admission: Option<AdmissionConfig>,
    /// Ranking for `global_topk`, from [`global_order`].
    pub global: Option<Vec<String>>,
}

impl<'a> Selector<'a> {
    pub fn new(library: &'a SkillLibrary, embedder: EmbedderConfig) -> Self {
        Selector {
            library,
            embedder,
            model: None,
            admission: None,
            global: None,
        }
    }

    fn model(&self, spec: &SelectorSpec) -> Result<&PlannerModel> {
        self.model
            .ok_or_else(|| Error::invalid(format!("{} requires a trained planner", spec.kind.as_str())))
    }

    /// Planner logits keyed by skill id.
    pub fn planner_scores(&self, model: &PlannerModel, task: &Task) -> BTreeMap<String, f64> {
        let embs = description_embeddings(self.library, &model.embedder);
        self.library
            .skills
            .iter()
            .map(|s| s.id.clone())
            .zip(score_candidates(model, task, &embs))
            .collect()
    }

    /// Ordered skill ids for `task`; `eval_seed` only affects `random`.
    pub fn select(&self, spec: &SelectorSpec, task: &Task, eval_seed: u64) -> Result<Vec<String>> {
        spec.validate()?;
        let k = spec.k.unwrap_or(0);
        match spec.kind {
            SelectorKind::None => Ok(Vec::new()),
            SelectorKind::Full => Ok(self.library.ids()),
            SelectorKind::Random => {
                if self.library.is_empty() {
                    return Ok(Vec::new());
                }
                let mut rng = Rng::new(spec.seed.unwrap_or(0))
                    .derive_stream(&format!("random:{}:{eval_seed}", task.id));
                Ok(vec![self.library.skills[rng.below(self.library.len())].id.clone()])
            }
            SelectorKind::Bm25 => bm25_rank(&task.instruction, self.library, k),
            SelectorKind::Dense => dense_rank(&task.instruction, self.library, k, &self.embedder),
            SelectorKind::FixedTopk => {
                let scores = self.planner_scores(self.model(spec)?, task);
                let mut v: Vec<(String, f64)> = scores.into_iter().collect();
                v.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
                Ok(v.into_iter().take(k).map(|(id, _)| id).collect())
            }
            SelectorKind::GlobalTopk => {
                self.model(spec)?;
                let order = self
                    .global
                    .as_ref()
                    .ok_or_else(|| Error::invalid("global_topk requires a dev-set ranking"))?;
                Ok(order.iter().take(k).cloned().collect())
            }
            SelectorKind::PlannerAdaptive => {
                let admission = self
                    .admission
                    .ok_or_else(|| Error::invalid("planner_adaptive requires an admission config"))?;
                let scores = self.planner_scores(self.model(spec)?, task);
                select_adaptive(&scores, &admission)
            }
        }
    }
}
