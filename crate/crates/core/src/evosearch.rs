//! Regularized (aging) evolution over per-layer a-b vectors. Each
//! candidate is scored by validation accuracy after a short fine-tune of
//! the model pruned to the budget.

use std::collections::{BTreeMap, VecDeque};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::engine::Exec;
use crate::error::{Error, Result};
use crate::model::ModelState;
use crate::picplan::{derive_masks, importance, AbVector, CompressionPlan, Currency};
use crate::quantize::BitwidthSchedule;
use crate::rankfp::FilterPropertyTable;
use crate::spec::{LayerId, NetworkSpec};
use crate::train::{evaluate, finetune, FineTuneConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchConfig {
    pub population_size: usize,
    pub sample_size: usize,
    pub iterations: usize,
    /// Standard deviation of the Gaussian step applied to `a`.
    pub random_walk: f64,
    /// Fraction of prunable layers mutated per child.
    pub mutation_ratio: f64,
    /// Fine-tune steps per candidate score.
    pub scoring_steps: usize,
    pub scoring_learning_rate: f64,
    pub scoring_batch_size: usize,
    pub budget_ratio: f64,
    pub currency: Currency,
    pub seed: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            population_size: 16,
            sample_size: 4,
            iterations: 100,
            random_walk: 0.5,
            mutation_ratio: 0.1,
            scoring_steps: 200,
            scoring_learning_rate: 0.01,
            scoring_batch_size: 16,
            budget_ratio: 30.0,
            currency: Currency::Joint,
            seed: 0,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.population_size == 0 {
            bad.push("population_size must be positive".to_string());
        }
        if self.sample_size == 0 || self.sample_size > self.population_size {
            bad.push(format!("sample_size must be in 1..={}", self.population_size));
        }
        if !(self.random_walk >= 0.0 && self.random_walk.is_finite()) {
            bad.push("random_walk must be finite and non-negative".into());
        }
        if !(self.mutation_ratio > 0.0 && self.mutation_ratio <= 1.0) {
            bad.push("mutation_ratio must be in (0, 1]".into());
        }
        if self.scoring_steps == 0 || self.scoring_batch_size == 0 {
            bad.push("scoring_steps and scoring_batch_size must be positive".into());
        }
        if !(self.scoring_learning_rate > 0.0 && self.scoring_learning_rate.is_finite()) {
            bad.push("scoring_learning_rate must be positive".into());
        }
        if !(self.budget_ratio >= 1.0 && self.budget_ratio.is_finite()) {
            bad.push("budget_ratio must be >= 1".into());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::validation(bad.join("; ")))
        }
    }

    fn scoring(&self, birth_index: u64) -> FineTuneConfig {
        FineTuneConfig {
            batch_size: self.scoring_batch_size,
            seed: stream_seed(self.seed, birth_index),
            ..FineTuneConfig::new(self.scoring_steps, self.scoring_learning_rate)
        }
    }
}

/// Independent seed per (run seed, stream index).
fn stream_seed(seed: u64, index: u64) -> u64 {
    // splitmix64 finalizer over the pair
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn stream(seed: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(seed, index))
}

/// Everything scoring needs besides the candidate; shared read-only.
#[derive(Clone, Copy)]
pub struct ScoreContext<'a> {
    pub spec: &'a NetworkSpec,
    pub state: &'a ModelState,
    pub fp: &'a FilterPropertyTable,
    pub schedule: &'a BitwidthSchedule,
    pub floors: &'a BTreeMap<LayerId, usize>,
    pub train: &'a Dataset,
    pub validation: &'a Dataset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub score: f64,
    pub achieved_ratio: f64,
    pub feasible: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub ab: AbVector,
    pub birth_index: u64,
    pub score: Score,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HistoryRecord {
    /// 0 for the initial population.
    pub iter: usize,
    pub birth_index: u64,
    pub ab: AbVector,
    pub score: f64,
    pub achieved_ratio: f64,
    pub feasible: bool,
}

impl HistoryRecord {
    fn of(iter: usize, c: &Candidate) -> Self {
        Self {
            iter,
            birth_index: c.birth_index,
            ab: c.ab.clone(),
            score: c.score.score,
            achieved_ratio: c.score.achieved_ratio,
            feasible: c.score.feasible,
        }
    }
}

pub fn history_to_jsonl(history: &[HistoryRecord]) -> String {
    history.iter().map(|r| serde_json::to_string(r).expect("record serializes") + "\n").collect()
}

pub fn history_from_jsonl(text: &str) -> Result<Vec<HistoryRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::format(format!("history line {}: {e}", i + 1))))
        .collect()
}

/// The plan a candidate prunes to, or the infeasibility error.
pub fn candidate_plan(ab: &AbVector, ctx: &ScoreContext<'_>, config: &SearchConfig) -> Result<CompressionPlan> {
    let imp = importance(ctx.fp, ab)?;
    derive_masks(&imp, ctx.spec, ctx.schedule, config.budget_ratio, ctx.floors, config.currency)
}

/// Validation accuracy after `scoring_steps` of fine-tuning the pruned,
/// unquantized model. An unreachable budget scores 0 and is flagged.
pub fn score(ab: &AbVector, ctx: &ScoreContext<'_>, config: &SearchConfig, birth_index: u64) -> Result<Score> {
    let plan = match candidate_plan(ab, ctx, config) {
        Ok(plan) => plan,
        Err(Error::Infeasible { max_achievable, .. }) => {
            return Ok(Score { score: 0.0, achieved_ratio: max_achievable, feasible: false })
        }
        Err(e) => return Err(e),
    };
    let tuned = finetune(ctx.spec, ctx.state, ctx.train, &config.scoring(birth_index), Exec::pruned(&plan))?;
    let acc = evaluate(ctx.spec, &tuned, ctx.validation, Exec::pruned(&plan))?;
    Ok(Score { score: acc, achieved_ratio: plan.achieved_ratio, feasible: true })
}

/// Child of `parent`: `ceil(u * L)` distinct layers get `a += N(0, W)` and
/// `b += N(0, W * spread)`.
pub fn mutate(parent: &AbVector, config: &SearchConfig, spread: f64, rng: &mut ChaCha8Rng) -> AbVector {
    let mut child = parent.clone();
    let layers = parent.len();
    if layers == 0 {
        return child;
    }
    let count = ((config.mutation_ratio * layers as f64).ceil() as usize).clamp(1, layers);
    let mut chosen = sample(rng, layers, count).into_vec();
    chosen.sort_unstable();
    let step_a = Normal::new(0.0, config.random_walk).expect("validated walk size");
    let step_b = Normal::new(0.0, config.random_walk * spread).expect("finite spread");
    for i in chosen {
        child.pairs[i].a += step_a.sample(rng);
        child.pairs[i].b += step_b.sample(rng);
    }
    child
}

/// Identity first, then identity perturbed on every layer by the
/// mutation distribution; all scored.
pub fn init_population(ctx: &ScoreContext<'_>, config: &SearchConfig) -> Result<Vec<Candidate>> {
    config.validate()?;
    let identity = AbVector::identity(ctx.spec);
    let spread = fp_spread(ctx.fp);
    let everywhere = SearchConfig { mutation_ratio: 1.0, ..config.clone() };
    let abs: Vec<AbVector> = (0..config.population_size as u64)
        .map(|birth| {
            if birth == 0 {
                identity.clone()
            } else {
                mutate(&identity, &everywhere, spread, &mut stream(config.seed, birth))
            }
        })
        .collect();
    abs.into_par_iter()
        .enumerate()
        .map(|(birth, ab)| {
            let birth = birth as u64;
            let score = score(&ab, ctx, config, birth)?;
            Ok(Candidate { ab, birth_index: birth, score })
        })
        .collect()
}

fn fp_spread(fp: &FilterPropertyTable) -> f64 {
    let (lo, hi) = fp.range();
    if hi > lo {
        hi - lo
    } else {
        0.0
    }
}

#[derive(Debug, Clone)]
pub struct SearchResult {
    pub best: Candidate,
    pub history: Vec<HistoryRecord>,
    /// Pool at the end, oldest first.
    pub population: Vec<Candidate>,
}

/// Aging evolution: each iteration samples `S` pool members, mutates the
/// best of them, scores the child and evicts the oldest member.
pub fn search(ctx: &ScoreContext<'_>, config: &SearchConfig) -> Result<SearchResult> {
    ctx.fp.check(ctx.spec)?;
    let spread = fp_spread(ctx.fp);
    let initial = init_population(ctx, config)?;
    let mut history: Vec<HistoryRecord> = initial.iter().map(|c| HistoryRecord::of(0, c)).collect();
    let mut best = initial[0].clone();
    for c in &initial {
        if c.score.score > best.score.score {
            best = c.clone();
        }
    }
    let mut pool: VecDeque<Candidate> = initial.into();
    for (iter, birth) in (1..=config.iterations).zip(config.population_size as u64..) {
        let mut rng = stream(config.seed, birth);
        let picks = sample(&mut rng, pool.len(), config.sample_size).into_vec();
        // highest score wins; ties go to the earliest-born
        let parent = picks
            .iter()
            .map(|&i| &pool[i])
            .max_by(|x, y| x.score.score.total_cmp(&y.score.score).then(y.birth_index.cmp(&x.birth_index)))
            .expect("sample is non-empty");
        let ab = mutate(&parent.ab, config, spread, &mut rng);
        let child = Candidate { score: score(&ab, ctx, config, birth)?, ab, birth_index: birth };
        history.push(HistoryRecord::of(iter, &child));
        if child.score.score > best.score.score {
            best = child.clone();
        }
        pool.pop_front();
        pool.push_back(child);
    }
    Ok(SearchResult { best, history, population: pool.into() })
}
