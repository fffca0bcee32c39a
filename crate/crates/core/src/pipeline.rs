//! End-to-end compression run: baseline, filter properties, a-b search,
//! final plan, three-step fine-tuning and artifact output.

use std::fs::{File, OpenOptions};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::container::{read_dataset, read_state, write_state};
use crate::cost::{model_cost, CostReport};
use crate::data::{synthetic, Dataset, SyntheticConfig};
use crate::engine::{calibrate_activations, Exec, QuantMode};
use crate::error::{read_text, write_file, Error, Result};
use crate::evosearch::{history_to_jsonl, search, ScoreContext, SearchConfig};
use crate::model::{init_model, ModelState};
use crate::picplan::{default_floors, derive_masks, importance, AbVector, CompressionPlan, Currency};
use crate::quantize::{BitwidthSchedule, ScheduleConfig};
use crate::rankfp::{average_rank, FilterPropertyTable, DEFAULT_BATCHES, DEFAULT_BATCH_SIZE, DEFAULT_REL_TOLERANCE};
use crate::spec::{desk_network, NetworkSpec};
use crate::train::{evaluate, finetune, FineTuneConfig};

/// Where training and test images come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    Synthetic(SyntheticConfig),
    Files { train: PathBuf, test: PathBuf },
}

impl Default for DatasetSource {
    fn default() -> Self {
        DatasetSource::Synthetic(SyntheticConfig::default())
    }
}

impl DatasetSource {
    pub fn load(&self) -> Result<(Dataset, Dataset)> {
        match self {
            DatasetSource::Synthetic(cfg) => synthetic(cfg),
            DatasetSource::Files { train, test } => Ok((read_dataset(train)?, read_dataset(test)?)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RankConfig {
    pub batches: usize,
    pub batch_size: usize,
    pub tolerance: f64,
}

impl Default for RankConfig {
    fn default() -> Self {
        Self { batches: DEFAULT_BATCHES, batch_size: DEFAULT_BATCH_SIZE, tolerance: DEFAULT_REL_TOLERANCE }
    }
}

/// Fine-tune settings of the three compression stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageConfigs {
    pub pruned: FineTuneConfig,
    pub act_quantized: FineTuneConfig,
    pub fully_quantized: FineTuneConfig,
}

impl Default for StageConfigs {
    fn default() -> Self {
        let stage = FineTuneConfig { lr_schedule: vec![(0.5, 0.2), (0.8, 0.04)], ..FineTuneConfig::new(1000, 0.01) };
        Self { pruned: stage.clone(), act_quantized: stage.clone(), fully_quantized: stage }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Network spec JSON; the desk network when absent.
    pub spec: Option<PathBuf>,
    /// Baseline weight container; trained from scratch when absent.
    pub weights: Option<PathBuf>,
    /// Saved a-b vector; when present the search is skipped.
    pub ab: Option<PathBuf>,
    pub data: DatasetSource,
    pub budget_ratio: f64,
    pub prune_only: bool,
    pub schedule: ScheduleConfig,
    pub rank: RankConfig,
    /// `budget_ratio`, `currency` and `seed` are taken from this config.
    pub search: SearchConfig,
    pub baseline: FineTuneConfig,
    pub stages: StageConfigs,
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            spec: None,
            weights: None,
            ab: None,
            data: DatasetSource::default(),
            budget_ratio: 30.0,
            prune_only: false,
            schedule: ScheduleConfig::default(),
            rank: RankConfig::default(),
            search: SearchConfig::default(),
            baseline: FineTuneConfig { lr_schedule: vec![(0.6, 0.2), (0.85, 0.04)], ..FineTuneConfig::new(2500, 0.02) },
            stages: StageConfigs::default(),
            validation_fraction: 0.1,
            seed: 0,
        }
    }
}

/// Derived seeds for the independent random streams of one run.
const SEED_INIT: u64 = 1;
const SEED_SPLIT: u64 = 2;
const SEED_RANK: u64 = 3;
const SEED_BASELINE: u64 = 4;
const SEED_STAGES: u64 = 5;

fn derived_seed(seed: u64, stream: u64) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).rotate_left(17) ^ stream.wrapping_mul(0xbf58_476d_1ce4_e5b9)
}

impl PipelineConfig {
    /// Parse a JSON config; relative paths resolve against `base`.
    pub fn from_json(text: &str, base: &Path) -> Result<Self> {
        let mut cfg: Self = serde_json::from_str(text)?;
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        cfg.spec.as_mut().map(resolve);
        cfg.weights.as_mut().map(resolve);
        cfg.ab.as_mut().map(resolve);
        if let DatasetSource::Files { train, test } = &mut cfg.data {
            resolve(train);
            resolve(test);
        }
        Ok(cfg)
    }

    pub fn currency(&self) -> Currency {
        if self.prune_only {
            Currency::PruneOnly
        } else {
            Currency::Joint
        }
    }

    /// Search settings with the run-wide budget, mode and seed applied.
    pub fn effective_search(&self) -> SearchConfig {
        SearchConfig {
            budget_ratio: self.budget_ratio,
            currency: self.currency(),
            seed: self.seed,
            ..self.search.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if !(self.validation_fraction > 0.0 && self.validation_fraction <= 0.5) {
            bad.push(format!("validation_fraction must be in (0, 0.5], got {}", self.validation_fraction));
        }
        if !(self.budget_ratio >= 1.0 && self.budget_ratio.is_finite()) {
            bad.push(format!("budget_ratio must be >= 1, got {}", self.budget_ratio));
        }
        if self.rank.batches == 0 || self.rank.batch_size == 0 || !(self.rank.tolerance > 0.0) {
            bad.push("rank batches, batch_size and tolerance must be positive".into());
        }
        let mut paths: Vec<&Path> =
            [&self.spec, &self.weights, &self.ab].into_iter().flatten().map(|p| p.as_path()).collect();
        if let DatasetSource::Files { train, test } = &self.data {
            paths.extend([train.as_path(), test.as_path()]);
        }
        for p in paths {
            if !p.is_file() {
                bad.push(format!("{} does not exist", p.display()));
            }
        }
        for (name, stage) in [
            ("baseline", &self.baseline),
            ("stages.pruned", &self.stages.pruned),
            ("stages.act_quantized", &self.stages.act_quantized),
            ("stages.fully_quantized", &self.stages.fully_quantized),
        ] {
            if let Err(e) = stage.validate() {
                bad.push(format!("{name}: {e}"));
            }
        }
        if self.ab.is_none() {
            if let Err(e) = self.effective_search().validate() {
                bad.push(format!("search: {e}"));
            }
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::validation(bad.join("; ")))
        }
    }

    pub fn load_spec(&self, classes: usize) -> Result<NetworkSpec> {
        match &self.spec {
            Some(path) => NetworkSpec::from_json(&read_text(path)?),
            None => Ok(desk_network(classes)),
        }
    }
}

/// Train split, validation split and test set of a run.
pub struct Splits {
    pub train: Dataset,
    pub validation: Dataset,
    pub test: Dataset,
}

/// Training split and held-out validation split of `data` for a run.
pub fn split_validation(config: &PipelineConfig, data: &Dataset) -> Result<(Dataset, Dataset)> {
    data.split_validation(config.validation_fraction, derived_seed(config.seed, SEED_SPLIT))
}

pub fn load_splits(config: &PipelineConfig) -> Result<Splits> {
    let (full, test) = config.data.load()?;
    let (train, validation) = split_validation(config, &full)?;
    Ok(Splits { train, validation, test })
}

fn classes_of(data: &Dataset) -> usize {
    data.labels.iter().map(|&l| l as usize + 1).max().unwrap_or(1)
}

/// Fine-tune results of the three compression stages.
#[derive(Debug, Clone)]
pub struct StagedModels {
    pub pruned: ModelState,
    /// Absent in prune-only runs.
    pub act_quantized: Option<ModelState>,
    pub fully_quantized: Option<ModelState>,
    pub report: CostReport,
}

fn calibration_batches(data: &Dataset) -> Result<Vec<crate::tensor::Tensor<f32>>> {
    let idx: Vec<usize> = (0..data.len()).collect();
    idx.chunks(64).map(|c| data.batch(c)).collect()
}

/// Stage 1 fine-tunes the pruned full-precision model. Stage 2 adds
/// activation quantization. Stage 3 restarts from the stage-1 weights
/// with weights and activations quantized. Activation ranges are
/// calibrated on the training data at the start of stages 2 and 3.
/// Accuracies are measured on `eval`.
pub fn three_step_finetune(
    spec: &NetworkSpec,
    baseline: &ModelState,
    plan: &CompressionPlan,
    train: &Dataset,
    eval: &Dataset,
    stages: &StageConfigs,
) -> Result<StagedModels> {
    plan.check(spec)?;
    let mut report = model_cost(spec, plan)?;
    report.accuracy.baseline = Some(evaluate(spec, baseline, eval, Exec::dense())?);

    let pruned = finetune(spec, baseline, train, &stages.pruned, Exec::pruned(plan))
        .map_err(|e| e.in_stage("prune fine-tune"))?;
    report.accuracy.pruned = Some(evaluate(spec, &pruned, eval, Exec::pruned(plan))?);
    if !plan.layers.values().any(|l| l.is_quantized()) {
        return Ok(StagedModels { pruned, act_quantized: None, fully_quantized: None, report });
    }

    let calib = calibration_batches(train)?;
    let quantized_stage = |start: &ModelState, mode: QuantMode, config: &FineTuneConfig, stage: &'static str| {
        let mut state = start.clone();
        state.act_max = calibrate_activations(spec, &state, &calib, plan, mode)?;
        let exec = Exec::quantized(plan, mode);
        let tuned = finetune(spec, &state, train, config, exec).map_err(|e| e.in_stage(stage))?;
        let acc = evaluate(spec, &tuned, eval, exec)?;
        Ok::<_, Error>((tuned, acc))
    };
    let (act_q, act_acc) =
        quantized_stage(&pruned, QuantMode::Activations, &stages.act_quantized, "activation-quantized fine-tune")?;
    let (full_q, full_acc) =
        quantized_stage(&pruned, QuantMode::Full, &stages.fully_quantized, "fully-quantized fine-tune")?;
    report.accuracy.act_quantized = Some(act_acc);
    report.accuracy.fully_quantized = Some(full_acc);
    Ok(StagedModels { pruned, act_quantized: Some(act_q), fully_quantized: Some(full_q), report })
}

/// File names written into the output directory.
pub mod artifacts {
    pub const BASELINE: &str = "baseline.picw";
    pub const FILTER_PROPERTIES: &str = "fp.json";
    pub const AB: &str = "ab.json";
    pub const HISTORY: &str = "history.jsonl";
    pub const PLAN: &str = "plan.json";
    pub const PRUNED: &str = "pruned.picw";
    pub const ACT_QUANTIZED: &str = "actq.picw";
    pub const FINAL: &str = "final.picw";
    pub const REPORT: &str = "report.json";
    pub const LOCK: &str = ".picpq.lock";
}

/// Exclusive claim on an output directory for the life of a run.
pub struct DirLock {
    path: PathBuf,
    _file: File,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        let path = dir.join(artifacts::LOCK);
        let file = OpenOptions::new().write(true).create_new(true).open(&path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::AlreadyExists {
                Error::validation(format!(
                    "{} is locked by another run (remove {} if stale)",
                    dir.display(),
                    path.display()
                ))
            } else {
                e.into()
            }
        })?;
        Ok(Self { path, _file: file })
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

/// In-memory outcome of a run; the same content is written to disk.
#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub spec: NetworkSpec,
    pub baseline: ModelState,
    pub fp: FilterPropertyTable,
    pub ab: AbVector,
    pub plan: CompressionPlan,
    pub staged: StagedModels,
    /// Number of candidates scored; 0 when a saved a-b vector was reused.
    pub evaluated: usize,
}

/// Baseline weights: loaded from the config, else trained from scratch.
pub fn baseline_state(config: &PipelineConfig, spec: &NetworkSpec, train: &Dataset) -> Result<ModelState> {
    match &config.weights {
        Some(path) => {
            let state = read_state(path)?;
            state.check_against(spec)?;
            Ok(state)
        }
        None => {
            let init = init_model(spec, derived_seed(config.seed, SEED_INIT))?;
            let cfg = FineTuneConfig { seed: derived_seed(config.seed, SEED_BASELINE), ..config.baseline.clone() };
            finetune(spec, &init, train, &cfg, Exec::dense())
        }
    }
}

pub fn filter_properties(
    config: &PipelineConfig,
    spec: &NetworkSpec,
    state: &ModelState,
    train: &Dataset,
) -> Result<FilterPropertyTable> {
    let batches =
        train.sample_batches(config.rank.batches, config.rank.batch_size, 0, derived_seed(config.seed, SEED_RANK))?;
    average_rank(spec, state, &batches, config.rank.tolerance)
}

fn stage_configs(config: &PipelineConfig) -> StageConfigs {
    let seed = derived_seed(config.seed, SEED_STAGES);
    let with = |c: &FineTuneConfig, k: u64| FineTuneConfig { seed: seed ^ k, ..c.clone() };
    StageConfigs {
        pruned: with(&config.stages.pruned, 1),
        act_quantized: with(&config.stages.act_quantized, 2),
        fully_quantized: with(&config.stages.fully_quantized, 3),
    }
}

/// Run every stage and write the artifacts into `out`.
pub fn run_pipeline(config: &PipelineConfig, out: &Path) -> Result<PipelineOutput> {
    config.validate()?;
    std::fs::create_dir_all(out).map_err(Error::at(out))?;
    let _lock = DirLock::acquire(out)?;
    let write = |name: &str, text: &str| write_file(&out.join(name), text);

    let splits = load_splits(config).map_err(|e| e.in_stage("load data"))?;
    let spec = config.load_spec(classes_of(&splits.train)).map_err(|e| e.in_stage("load spec"))?;
    let schedule: BitwidthSchedule = config.schedule.build(&spec).map_err(|e| e.in_stage("bitwidth schedule"))?;
    let floors = default_floors(&spec);

    let baseline = baseline_state(config, &spec, &splits.train).map_err(|e| e.in_stage("baseline"))?;
    write_state(&out.join(artifacts::BASELINE), &baseline)?;

    let fp = filter_properties(config, &spec, &baseline, &splits.train).map_err(|e| e.in_stage("rank"))?;
    write(artifacts::FILTER_PROPERTIES, &fp.to_json())?;

    let search_cfg = config.effective_search();
    let (ab, evaluated) = match &config.ab {
        Some(path) => {
            let ab = AbVector::from_json(&read_text(path)?).map_err(|e| e.in_stage("load a-b vector"))?;
            ab.check(&spec)?;
            (ab, 0)
        }
        None => {
            let ctx = ScoreContext {
                spec: &spec,
                state: &baseline,
                fp: &fp,
                schedule: &schedule,
                floors: &floors,
                train: &splits.train,
                validation: &splits.validation,
            };
            let result = search(&ctx, &search_cfg).map_err(|e| e.in_stage("search"))?;
            write(artifacts::HISTORY, &history_to_jsonl(&result.history))?;
            (result.best.ab, result.history.len())
        }
    };
    write(artifacts::AB, &ab.to_json())?;

    let imp = importance(&fp, &ab).map_err(|e| e.in_stage("plan"))?;
    let plan = derive_masks(&imp, &spec, &schedule, config.budget_ratio, &floors, config.currency())
        .map_err(|e| e.in_stage("plan"))?;
    write(artifacts::PLAN, &plan.to_json())?;

    let staged = three_step_finetune(&spec, &baseline, &plan, &splits.train, &splits.test, &stage_configs(config))?;
    write_state(&out.join(artifacts::PRUNED), &staged.pruned)?;
    if let Some(s) = &staged.act_quantized {
        write_state(&out.join(artifacts::ACT_QUANTIZED), s)?;
    }
    write_state(&out.join(artifacts::FINAL), staged.fully_quantized.as_ref().unwrap_or(&staged.pruned))?;
    write(artifacts::REPORT, &staged.report.to_json())?;

    Ok(PipelineOutput { spec, baseline, fp, ab, plan, staged, evaluated })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_defaults_and_unknown_fields() {
        let cfg = PipelineConfig::from_json("{}", Path::new(".")).unwrap();
        assert_eq!(cfg, PipelineConfig::default());
        assert!(PipelineConfig::from_json(r#"{"budget": 3}"#, Path::new(".")).is_err());
        let cfg = PipelineConfig::from_json(
            r#"{"data": {"files": {"train": "a.picd", "test": "/abs/b.picd"}}, "budget_ratio": 8}"#,
            Path::new("/base"),
        )
        .unwrap();
        assert_eq!(
            cfg.data,
            DatasetSource::Files { train: PathBuf::from("/base/a.picd"), test: PathBuf::from("/abs/b.picd") }
        );
        assert_eq!(cfg.effective_search().budget_ratio, 8.0);
    }

    #[test]
    fn validation_collects_problems() {
        let cfg = PipelineConfig {
            validation_fraction: 0.7,
            weights: Some(PathBuf::from("/nonexistent/w.picw")),
            ..Default::default()
        };
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("validation_fraction") && msg.contains("w.picw"), "{msg}");
    }

    #[test]
    fn lock_is_exclusive_and_released() {
        let dir = std::env::temp_dir().join(format!("picpq-lock-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let first = DirLock::acquire(&dir).unwrap();
        assert!(DirLock::acquire(&dir).is_err());
        drop(first);
        DirLock::acquire(&dir).unwrap();
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn seeds_differ_per_stream() {
        assert_ne!(derived_seed(0, SEED_INIT), derived_seed(0, SEED_SPLIT));
        assert_ne!(derived_seed(0, SEED_INIT), derived_seed(1, SEED_INIT));
    }
}
