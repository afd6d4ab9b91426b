//! Context planner: an MLP scoring (task, skill) pairs, trained to align its
//! per-task softmax with a benefit distribution over execution-grounded
//! labels plus a pairwise odds-ratio preference term on mined hard negatives.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::{read_json, write_json, Rng, Skill, Task, UtilityLabel};
use crate::embed::{cosine_unchecked, embed, EmbedderConfig, Embedding};
use crate::error::{Error, Result};
use crate::librarian::SkillLibrary;

pub const ACTIVATION: &str = "softplus";
pub const WEIGHTS_FORMAT_VERSION: u32 = 1;
/// Probability clamp applied before taking odds.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlannerTrainConfig {
    pub beta: f64,
    pub gamma: f64,
    pub lambda_pref: f64,
    pub lr: f64,
    pub epochs: usize,
    pub hard_neg_k: usize,
    pub pair_margin: f64,
    pub seed: u64,
    pub hidden: usize,
    pub dropout: f64,
    /// Share of each task's candidates treated as positives for mining.
    pub positive_fraction: f64,
    /// Tasks packed into one optimizer step.
    pub batch_tasks: usize,
    /// Disables the alignment term for the preference-only ablation.
    pub use_align: bool,
}

impl Default for PlannerTrainConfig {
    fn default() -> Self {
        PlannerTrainConfig {
            beta: 0.5,
            gamma: 0.5,
            lambda_pref: 0.3,
            lr: 1e-3,
            epochs: 200,
            hard_neg_k: 5,
            pair_margin: 0.05,
            seed: 0,
            hidden: 128,
            dropout: 0.1,
            positive_fraction: 0.4,
            batch_tasks: 1,
            use_align: true,
        }
    }
}

impl PlannerTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.gamma > 0.0) {
            return Err(Error::invalid("temperatures beta and gamma must be positive"));
        }
        if !(self.lambda_pref >= 0.0) || !(self.pair_margin >= 0.0) {
            return Err(Error::invalid("lambda_pref and pair_margin must be nonnegative"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::invalid("lr must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid("dropout must lie in [0,1)"));
        }
        if !(self.positive_fraction > 0.0 && self.positive_fraction <= 1.0) {
            return Err(Error::invalid("positive_fraction must lie in (0,1]"));
        }
        if self.hidden < 1 || self.batch_tasks < 1 {
            return Err(Error::invalid("hidden and batch_tasks must be positive"));
        }
        if !self.use_align && self.lambda_pref == 0.0 {
            return Err(Error::invalid("objective has no active term"));
        }
        Ok(())
    }
}

/// Dense layer with row-major `rows × cols` weights (rows = outputs).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub rows: usize,
    pub cols: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    fn zeros(rows: usize, cols: usize) -> Self {
        Layer {
            rows,
            cols,
            weights: vec![0.0; rows * cols],
            bias: vec![0.0; rows],
        }
    }

    fn forward(&self, x: &[f64], n: usize) -> Vec<f64> {
        let mut out = vec![0.0; n * self.rows];
        for b in 0..n {
            let xb = &x[b * self.cols..(b + 1) * self.cols];
            for o in 0..self.rows {
                let w = &self.weights[o * self.cols..(o + 1) * self.cols];
                out[b * self.rows + o] = self.bias[o] + w.iter().zip(xb).map(|(a, c)| a * c).sum::<f64>();
            }
        }
        out
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlannerModel {
    pub layers: Vec<Layer>,
    pub dropout_rate: f64,
    pub embedder: EmbedderConfig,
}

struct ForwardCache {
    /// Input to each layer, `n × cols`.
    inputs: Vec<Vec<f64>>,
    /// Pre-activations of hidden layers.
    pre: Vec<Vec<f64>>,
    /// Inverted-dropout multipliers per hidden layer (empty when off).
    masks: Vec<Vec<f64>>,
    n: usize,
}

impl PlannerModel {
    /// Layer widths `dims[0] → dims[1] → … → 1` with Glorot-uniform init.
    pub fn new(dims: &[usize], dropout_rate: f64, embedder: EmbedderConfig, seed: u64) -> Self {
        let mut rng = Rng::new(seed).derive_stream("planner-init");
        let layers = dims
            .windows(2)
            .map(|w| {
                let (cols, rows) = (w[0], w[1]);
                let a = (6.0 / (rows + cols) as f64).sqrt();
                let mut l = Layer::zeros(rows, cols);
                l.weights.iter_mut().for_each(|v| *v = rng.uniform(-a, a));
                l
            })
            .collect();
        PlannerModel {
            layers,
            dropout_rate,
            embedder,
        }
    }

    /// Standard shape: `2·D → hidden → hidden → 1`.
    pub fn for_embedder(embedder: EmbedderConfig, hidden: usize, dropout_rate: f64, seed: u64) -> Self {
        let d = embedder.dimension * 2;
        PlannerModel::new(&[d, hidden, hidden, 1], dropout_rate, embedder, seed)
    }

    pub fn zeros(dims: &[usize], embedder: EmbedderConfig) -> Self {
        PlannerModel {
            layers: dims.windows(2).map(|w| Layer::zeros(w[1], w[0])).collect(),
            dropout_rate: 0.0,
            embedder,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].cols
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.bias).all(|v| v.is_finite()))
    }

    fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for l in &self.layers {
            out.extend(&l.weights);
            out.extend(&l.bias);
        }
        out
    }

    fn set_params(&mut self, flat: &[f64]) {
        let mut at = 0;
        for l in &mut self.layers {
            let nw = l.weights.len();
            l.weights.copy_from_slice(&flat[at..at + nw]);
            at += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&flat[at..at + nb]);
            at += nb;
        }
    }

    fn forward_cached(&self, x: &[f64], n: usize, mut dropout: Option<&mut Rng>) -> (Vec<f64>, ForwardCache) {
        let mut cache = ForwardCache {
            inputs: Vec::with_capacity(self.layers.len()),
            pre: Vec::new(),
            masks: Vec::new(),
            n,
        };
        let mut h = x.to_vec();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(&h, n);
            cache.inputs.push(h);
            if i == last {
                return (z, cache);
            }
            let mut a: Vec<f64> = z.iter().map(|&v| softplus(v)).collect();
            let mask = match dropout.as_deref_mut() {
                Some(rng) if self.dropout_rate > 0.0 => {
                    let keep = 1.0 - self.dropout_rate;
                    let m: Vec<f64> = (0..a.len())
                        .map(|_| if rng.bernoulli(keep) { 1.0 / keep } else { 0.0 })
                        .collect();
                    a.iter_mut().zip(&m).for_each(|(v, k)| *v *= k);
                    m
                }
                _ => Vec::new(),
            };
            cache.pre.push(z);
            cache.masks.push(mask);
            h = a;
        }
        unreachable!("model has at least one layer")
    }

    /// Logits for `n` stacked inputs, dropout off.
    pub fn forward(&self, x: &[f64], n: usize) -> Vec<f64> {
        self.forward_cached(x, n, None).0
    }

    /// Gradients flattened in parameter order.
    fn backward(&self, cache: &ForwardCache, dlogits: &[f64]) -> Vec<f64> {
        let n = cache.n;
        let mut grads: Vec<Layer> = self.layers.iter().map(|l| Layer::zeros(l.rows, l.cols)).collect();
        let mut g = dlogits.to_vec();
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            let x = &cache.inputs[i];
            let gl = &mut grads[i];
            let mut dx = vec![0.0; n * layer.cols];
            for b in 0..n {
                let xb = &x[b * layer.cols..(b + 1) * layer.cols];
                let dxb = &mut dx[b * layer.cols..(b + 1) * layer.cols];
                for o in 0..layer.rows {
                    let go = g[b * layer.rows + o];
                    if go == 0.0 {
                        continue;
                    }
                    gl.bias[o] += go;
                    let w = &layer.weights[o * layer.cols..(o + 1) * layer.cols];
                    let gw = &mut gl.weights[o * layer.cols..(o + 1) * layer.cols];
                    for c in 0..layer.cols {
                        gw[c] += go * xb[c];
                        dxb[c] += go * w[c];
                    }
                }
            }
            if i > 0 {
                let pre = &cache.pre[i - 1];
                let mask = &cache.masks[i - 1];
                for (k, v) in dx.iter_mut().enumerate() {
                    *v *= sigmoid(pre[k]);
                    if !mask.is_empty() {
                        *v *= mask[k];
                    }
                }
            }
            g = dx;
        }
        let mut flat = Vec::with_capacity(self.n_params());
        for l in &grads {
            flat.extend(&l.weights);
            flat.extend(&l.bias);
        }
        flat
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = WeightsFile {
            format_version: WEIGHTS_FORMAT_VERSION,
            activation: ACTIVATION.to_string(),
            dropout_rate: self.dropout_rate,
            embedder_fingerprint: self.embedder.fingerprint(),
            embedder: self.embedder,
            layers: self.layers.clone(),
        };
        write_json(path, &file)
    }

    pub fn load(path: &Path) -> Result<PlannerModel> {
        if !path.exists() {
            return Err(Error::MissingArtifact {
                stage: "train-planner".to_string(),
                path: path.to_path_buf(),
            });
        }
        let file: WeightsFile = read_json(path)?;
        let bad = |m: String| Error::Parse {
            what: path.display().to_string(),
            message: m,
        };
        if file.format_version != WEIGHTS_FORMAT_VERSION {
            return Err(bad(format!("unsupported format_version {}", file.format_version)));
        }
        if file.activation != ACTIVATION {
            return Err(bad(format!("unsupported activation {}", file.activation)));
        }
        if file.embedder_fingerprint != file.embedder.fingerprint() {
            return Err(bad("embedder fingerprint does not match embedder config".into()));
        }
        if file.layers.is_empty() {
            return Err(bad("no layers".into()));
        }
        for (i, l) in file.layers.iter().enumerate() {
            if l.weights.len() != l.rows * l.cols || l.bias.len() != l.rows {
                return Err(bad(format!("layer {i} has inconsistent shape")));
            }
            if i > 0 && file.layers[i - 1].rows != l.cols {
                return Err(bad(format!("layer {i} does not chain")));
            }
        }
        if file.layers[0].cols != 2 * file.embedder.dimension || file.layers.last().map(|l| l.rows) != Some(1) {
            return Err(bad("input or output width does not match the embedder".into()));
        }
        Ok(PlannerModel {
            layers: file.layers,
            dropout_rate: file.dropout_rate,
            embedder: file.embedder,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct WeightsFile {
    format_version: u32,
    activation: String,
    dropout_rate: f64,
    embedder_fingerprint: String,
    embedder: EmbedderConfig,
    layers: Vec<Layer>,
}

/// Appends one (task, skill) input row.
fn push_pair(x: &mut Vec<f64>, task: &Embedding, skill: &Embedding) {
    x.extend(task.as_slice());
    x.extend(skill.as_slice());
}

fn concat(a: &Embedding, b: &Embedding) -> Vec<f64> {
    let mut v = Vec::with_capacity(a.dim() + b.dim());
    push_pair(&mut v, a, b);
    v
}

/// Planner logit for one (task, skill) pair.
pub fn score(model: &PlannerModel, task: &Task, skill: &Skill, embedder: &EmbedderConfig) -> f64 {
    let x = concat(&embed(&task.instruction, embedder), &embed(&skill.description, embedder));
    model.forward(&x, 1)[0]
}

/// Logits of every library skill for one task, in library order.
pub fn score_candidates(model: &PlannerModel, task: &Task, skill_embs: &[Embedding]) -> Vec<f64> {
    let t = embed(&task.instruction, &model.embedder);
    let mut x = Vec::with_capacity(skill_embs.len() * model.input_dim());
    for s in skill_embs {
        push_pair(&mut x, &t, s);
    }
    model.forward(&x, skill_embs.len())
}

pub fn description_embeddings(library: &SkillLibrary, embedder: &EmbedderConfig) -> Vec<Embedding> {
    library.skills.iter().map(|s| embed(&s.description, embedder)).collect()
}

/// Scores keyed by skill id for every task, computed in parallel.
pub fn score_tasks(
    model: &PlannerModel,
    tasks: &[Task],
    library: &SkillLibrary,
) -> Vec<BTreeMap<String, f64>> {
    let embs = description_embeddings(library, &model.embedder);
    tasks
        .par_iter()
        .map(|t| {
            library
                .skills
                .iter()
                .map(|s| s.id.clone())
                .zip(score_candidates(model, t, &embs))
                .collect()
        })
        .collect()
}

/// Temperature softmax.
pub fn softmax(xs: &[f64], temperature: f64) -> Vec<f64> {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| ((x - m) / temperature).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// `softmax(y / β)` over one task's labels, in input order.
pub fn benefit_distribution(labels: &[UtilityLabel], beta: f64) -> Result<Vec<f64>> {
    if labels.is_empty() {
        return Err(Error::invalid("benefit distribution needs at least one label"));
    }
    if !(beta > 0.0) {
        return Err(Error::invalid("beta must be positive"));
    }
    let ys: Vec<f64> = labels.iter().map(|l| l.y).collect();
    Ok(softmax(&ys, beta))
}

/// `KL(q ‖ softmax(logits / γ))`.
pub fn align_loss(pred_logits: &[f64], q: &[f64], gamma: f64) -> Result<f64> {
    if pred_logits.len() != q.len() {
        return Err(Error::DimensionMismatch {
            left: pred_logits.len(),
            right: q.len(),
        });
    }
    let p = softmax(pred_logits, gamma);
    Ok(kl(q, &p))
}

fn kl(q: &[f64], p: &[f64]) -> f64 {
    q.iter()
        .zip(p)
        .filter(|(qi, _)| **qi > 0.0)
        .map(|(qi, pi)| qi * (qi.ln() - pi.max(f64::MIN_POSITIVE).ln()))
        .sum::<f64>()
        .max(0.0)
}

fn log_odds(p: f64) -> f64 {
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    (p / (1.0 - p)).ln()
}

/// `log(1 + exp(o(neg) − o(pos)))` with `o(p) = log(p / (1 − p))`.
pub fn pref_loss(pos_prob: f64, neg_prob: f64) -> f64 {
    softplus(log_odds(neg_prob) - log_odds(pos_prob))
}

/// Hard-negative pairs for one task, as (positive id, negative id).
///
/// Positives are the top `positive_fraction` of candidates by `y` (ties to
/// the smaller id). Each positive is paired with up to `hard_neg_k`
/// candidates of strictly lower `y`, at least `pair_margin` below, taken in
/// decreasing description cosine to the positive.
pub fn mine_pairs(
    labels: &[UtilityLabel],
    library: &SkillLibrary,
    cfg: &PlannerTrainConfig,
    embedder: &EmbedderConfig,
) -> Result<Vec<(String, String)>> {
    let embs: HashMap<&str, Embedding> = labels
        .iter()
        .map(|l| {
            let s = library
                .get(&l.skill_id)
                .ok_or_else(|| Error::UnknownSkill(l.skill_id.clone()))?;
            Ok((l.skill_id.as_str(), embed(&s.description, embedder)))
        })
        .collect::<Result<_>>()?;
    Ok(mine_pairs_with(labels, cfg, &|a, b| cosine_unchecked(&embs[a], &embs[b])))
}

fn mine_pairs_with(
    labels: &[UtilityLabel],
    cfg: &PlannerTrainConfig,
    similarity: &dyn Fn(&str, &str) -> f64,
) -> Vec<(String, String)> {
    let mut by_y: Vec<&UtilityLabel> = labels.iter().collect();
    by_y.sort_by(|a, b| b.y.total_cmp(&a.y).then_with(|| a.skill_id.cmp(&b.skill_id)));
    let n_pos = ((labels.len() as f64) * cfg.positive_fraction).ceil() as usize;
    let mut pairs = Vec::new();
    for pos in by_y.iter().take(n_pos) {
        let mut negs: Vec<(f64, &str)> = labels
            .iter()
            .filter(|n| n.y < pos.y && pos.y - n.y >= cfg.pair_margin)
            .map(|n| (similarity(&pos.skill_id, &n.skill_id), n.skill_id.as_str()))
            .collect();
        negs.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
        for (_, neg) in negs.into_iter().take(cfg.hard_neg_k) {
            pairs.push((pos.skill_id.clone(), neg.to_string()));
        }
    }
    pairs
}

/// One task's training batch: stacked pair features, the target
/// distribution and mined pairs as candidate indices.
#[derive(Debug, Clone)]
pub struct TaskBatch {
    pub task_id: String,
    pub features: Vec<f64>,
    pub n: usize,
    pub q: Vec<f64>,
    pub pairs: Vec<(usize, usize)>,
}

/// Loss and logit gradient for one task.
fn task_objective(logits: &[f64], batch: &TaskBatch, cfg: &PlannerTrainConfig) -> (f64, Vec<f64>) {
    let g = cfg.gamma;
    let p = softmax(logits, g);
    let mut loss = 0.0;
    let mut dz = vec![0.0; logits.len()];
    if cfg.use_align {
        loss += kl(&batch.q, &p);
        for j in 0..p.len() {
            dz[j] += (p[j] - batch.q[j]) / g;
        }
    }
    if cfg.lambda_pref > 0.0 && !batch.pairs.is_empty() {
        let w = cfg.lambda_pref / batch.pairs.len() as f64;
        let mut dp = vec![0.0; p.len()];
        for &(a, b) in &batch.pairs {
            let diff = log_odds(p[b]) - log_odds(p[a]);
            loss += w * softplus(diff);
            let s = w * sigmoid(diff);
            dp[b] += s * dlog_odds(p[b]);
            dp[a] -= s * dlog_odds(p[a]);
        }
        let inner: f64 = dp.iter().zip(&p).map(|(d, pi)| d * pi).sum();
        for j in 0..p.len() {
            dz[j] += p[j] * (dp[j] - inner) / g;
        }
    }
    (loss, dz)
}

fn dlog_odds(p: f64) -> f64 {
    if p <= PROB_EPS || p >= 1.0 - PROB_EPS {
        0.0
    } else {
        1.0 / (p * (1.0 - p))
    }
}

/// Mean objective over `batches` and its gradient in parameter order.
fn objective(
    model: &PlannerModel,
    batches: &[&TaskBatch],
    cfg: &PlannerTrainConfig,
    mut dropout: Option<&mut Rng>,
) -> (f64, Vec<f64>) {
    let mut total = 0.0;
    let mut grad = vec![0.0; model.n_params()];
    let scale = 1.0 / batches.len() as f64;
    for b in batches {
        let (logits, cache) = model.forward_cached(&b.features, b.n, dropout.as_deref_mut());
        let (loss, mut dz) = task_objective(&logits, b, cfg);
        total += loss * scale;
        dz.iter_mut().for_each(|v| *v *= scale);
        for (g, d) in grad.iter_mut().zip(model.backward(&cache, &dz)) {
            *g += d;
        }
    }
    (total, grad)
}

/// Builds per-task batches over the full library as candidate set.
pub fn build_batches(
    labels: &[UtilityLabel],
    library: &SkillLibrary,
    tasks: &[Task],
    cfg: &PlannerTrainConfig,
    embedder: &EmbedderConfig,
) -> Result<Vec<TaskBatch>> {
    let mut by_task: HashMap<&str, HashMap<&str, &UtilityLabel>> = HashMap::new();
    for l in labels {
        by_task.entry(&l.task_id).or_default().insert(&l.skill_id, l);
    }
    let skill_embs = description_embeddings(library, embedder);
    let index: HashMap<&str, usize> = library
        .skills
        .iter()
        .enumerate()
        .map(|(i, s)| (s.id.as_str(), i))
        .collect();
    let sim = |a: &str, b: &str| cosine_unchecked(&skill_embs[index[a]], &skill_embs[index[b]]);
    tasks
        .iter()
        .map(|t| {
            let row = by_task
                .get(t.id.as_str())
                .ok_or_else(|| Error::invalid(format!("no labels for task {}", t.id)))?;
            let task_labels: Vec<UtilityLabel> = library
                .skills
                .iter()
                .map(|s| {
                    row.get(s.id.as_str()).map(|l| (*l).clone()).ok_or_else(|| {
                        Error::invalid(format!("task {} lacks a label for skill {}", t.id, s.id))
                    })
                })
                .collect::<Result<_>>()?;
            let q = benefit_distribution(&task_labels, cfg.beta)?;
            let pairs = mine_pairs_with(&task_labels, cfg, &sim)
                .into_iter()
                .map(|(a, b)| (index[a.as_str()], index[b.as_str()]))
                .collect();
            let te = embed(&t.instruction, embedder);
            let mut features = Vec::with_capacity(library.len() * 2 * embedder.dimension);
            for se in &skill_embs {
                push_pair(&mut features, &te, se);
            }
            Ok(TaskBatch {
                task_id: t.id.clone(),
                features,
                n: library.len(),
                q,
                pairs,
            })
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: PlannerModel,
    /// Objective value at every optimizer step.
    pub losses: Vec<f64>,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = Self::B1 * self.m[i] + (1.0 - Self::B1) * grad[i];
            self.v[i] = Self::B2 * self.v[i] + (1.0 - Self::B2) * grad[i] * grad[i];
            params[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + Self::EPS);
        }
    }
}

/// Trains a planner on labeled tasks. Deterministic given `cfg.seed`.
pub fn train(
    labels: &[UtilityLabel],
    library: &SkillLibrary,
    tasks: &[Task],
    cfg: &PlannerTrainConfig,
    embedder: &EmbedderConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    embedder.validate()?;
    if tasks.is_empty() || library.is_empty() {
        return Err(Error::invalid("training needs at least one task and one skill"));
    }
    let batches = build_batches(labels, library, tasks, cfg, embedder)?;
    let model = PlannerModel::for_embedder(*embedder, cfg.hidden, cfg.dropout, cfg.seed);
    train_on_batches(model, &batches, cfg)
}

pub fn train_on_batches(
    mut model: PlannerModel,
    batches: &[TaskBatch],
    cfg: &PlannerTrainConfig,
) -> Result<TrainOutcome> {
    let root = Rng::new(cfg.seed);
    let mut adam = Adam::new(model.n_params());
    let mut params = model.params();
    let mut losses = Vec::new();
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..batches.len()).collect();
        root.derive_stream(&format!("order:{epoch}")).shuffle(&mut order);
        for chunk in order.chunks(cfg.batch_tasks) {
            let group: Vec<&TaskBatch> = chunk.iter().map(|&i| &batches[i]).collect();
            let mut drop_rng = root.derive_stream(&format!("dropout:{step}"));
            let (loss, grad) = objective(&model, &group, cfg, Some(&mut drop_rng));
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite { step });
            }
            adam.step(&mut params, &grad, cfg.lr);
            model.set_params(&params);
            if !model.is_finite() {
                return Err(Error::NonFinite { step });
            }
            losses.push(loss);
            step += 1;
        }
    }
    Ok(TrainOutcome { model, losses })
}

/// Dropout-free objective over all batches, for monitoring.
pub fn evaluate_objective(model: &PlannerModel, batches: &[TaskBatch], cfg: &PlannerTrainConfig) -> f64 {
    let refs: Vec<&TaskBatch> = batches.iter().collect();
    objective(model, &refs, cfg, None).0
}

/// Random task batch with labels, targets and margin-cleared pairs.
pub fn random_batch(rng: &mut Rng, n: usize, dim: usize) -> TaskBatch {
    let features = (0..n * dim).map(|_| rng.uniform(-1.0, 1.0)).collect();
    let ys: Vec<f64> = (0..n).map(|_| rng.next_f64()).collect();
    let q = softmax(&ys, 0.5);
    let mut pairs = Vec::new();
    for a in 0..n {
        for b in 0..n {
            if ys[a] > ys[b] + 0.05 && pairs.len() < 6 {
                pairs.push((a, b));
            }
        }
    }
    TaskBatch {
        task_id: "t".into(),
        features,
        n,
        q,
        pairs,
    }
}

/// Max relative error between analytic and central-difference gradients of
/// the full objective for a small random model and two random task batches
/// (dropout off, h = 1e-4).
pub fn gradient_check(seed: u64) -> f64 {
    let mut rng = Rng::new(seed);
    let emb = EmbedderConfig {
        dimension: 8,
        ..EmbedderConfig::default()
    };
    let mut model = PlannerModel::new(&[6, 5, 4, 1], 0.0, emb, seed);
    let batches: Vec<TaskBatch> = (0..2).map(|_| random_batch(&mut rng, 5, 6)).collect();
    let refs: Vec<&TaskBatch> = batches.iter().collect();
    let c = PlannerTrainConfig::default();
    let (_, analytic) = objective(&model, &refs, &c, None);
    let base = model.params();
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    for i in 0..base.len() {
        let mut p = base.clone();
        p[i] += h;
        model.set_params(&p);
        let up = objective(&model, &refs, &c, None).0;
        p[i] -= 2.0 * h;
        model.set_params(&p);
        let down = objective(&model, &refs, &c, None).0;
        let numeric = (up - down) / (2.0 * h);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-6);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    worst
}
