//! Whole-pipeline runs driven by one JSON config document.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{generate_dataset, make_splits, Dataset, GeneratorConfig, SplitAssignment, SplitParams};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, PromptSource};
use crate::retrieval::{evaluate, Evaluation, RetrievalReport};
use crate::train::{train_phase1, train_phase2, Ablation, Checkpoint, EpochLog, OnePhaseMode, TrainConfig, TrainOptions};

pub const SCHEMA_VERSION: u32 = 1;

/// Every knob of a run. The top-level `seed` is copied into the generator,
/// the splits and both phases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub generator: GeneratorConfig,
    pub split: SplitParams,
    pub model: ModelConfig,
    pub phase1: TrainConfig,
    pub phase2: TrainConfig,
    pub ablation: Ablation,
    pub metric_ks: Vec<usize>,
    pub workers: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            generator: GeneratorConfig::default(),
            split: SplitParams::default(),
            model: ModelConfig::default(),
            phase1: TrainConfig::phase1(),
            phase2: TrainConfig::phase2(),
            ablation: Ablation::default(),
            metric_ks: vec![10, 50],
            workers: 1,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(format!("run config: {e}")))?;
        let seed = cfg.seed;
        let cfg = cfg.with_seed(seed);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.generator.seed = seed;
        self.split.seed = seed;
        self.phase1.seed = seed;
        self.phase2.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!("schema_version {} is not supported, expected {SCHEMA_VERSION}", self.schema_version)));
        }
        if self.metric_ks.is_empty() || self.metric_ks.contains(&0) {
            return Err(Error::Config(format!("metric_ks must be non-empty positive integers, got {:?}", self.metric_ks)));
        }
        if self.workers == 0 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        if self.generator.tokens != self.model.encoder.tokens || self.generator.token_dim != self.model.encoder.input_dim {
            return Err(Error::Config(format!(
                "generator makes {}x{} token grids but the encoder expects {}x{}",
                self.generator.tokens, self.generator.token_dim, self.model.encoder.tokens, self.model.encoder.input_dim
            )));
        }
        self.generator.validate()?;
        self.model.validate()?;
        self.phase1.validate()?;
        self.phase2.validate()
    }

    /// Prompt source used at test time for this run's ablation.
    pub fn test_source(&self) -> PromptSource {
        match self.ablation.one_phase_mode {
            OnePhaseMode::Off => PromptSource::Tpg,
            OnePhaseMode::Prompts => PromptSource::Uniform,
            OnePhaseMode::LinearProbe => PromptSource::Probe,
        }
    }

    pub fn two_phase(&self) -> bool {
        self.ablation.one_phase_mode == OnePhaseMode::Off
    }
}

/// Generated data plus its split.
pub struct Prepared {
    pub dataset: Dataset,
    pub splits: SplitAssignment,
}

pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    let mut dataset = generate_dataset(&cfg.generator)?;
    let splits = make_splits(&dataset.manifest, &cfg.split)?;
    dataset.manifest.record_split(&splits);
    Ok(Prepared { dataset, splits })
}

/// Trained state of one run; `phase2` is absent for one-phase ablations.
pub struct Trained {
    pub phase1: Checkpoint,
    pub phase2: Option<Checkpoint>,
}

impl Trained {
    pub fn model(&self) -> &Model {
        self.phase2.as_ref().map_or(&self.phase1.model, |c| &c.model)
    }
}

pub fn train(cfg: &RunConfig, data: &Prepared, on_epoch: &mut dyn FnMut(&EpochLog)) -> Result<Trained> {
    let opts = TrainOptions { on_epoch: Some(&mut *on_epoch), workers: cfg.workers, ..Default::default() };
    let phase1 = train_phase1(&data.dataset, &data.splits, &cfg.model, &cfg.phase1, &cfg.ablation, opts)?;
    let phase2 = if cfg.two_phase() {
        let opts = TrainOptions { on_epoch: Some(on_epoch), workers: cfg.workers, ..Default::default() };
        Some(train_phase2(&data.dataset, &data.splits, &phase1, &cfg.phase2, &cfg.ablation, opts)?)
    } else {
        None
    };
    Ok(Trained { phase1, phase2 })
}

/// The untrained model used by the zero-shot baseline.
pub fn zero_shot_model(cfg: &RunConfig, data: &Prepared) -> Result<Model> {
    Model::init(&cfg.model, &data.dataset.manifest, &data.splits, cfg.phase1.momentum_rate, cfg.phase1.seed)
}

pub fn evaluate_model(cfg: &RunConfig, data: &Prepared, model: &Model, source: PromptSource) -> Result<Evaluation> {
    evaluate(&data.dataset, &data.splits, model, source, &cfg.metric_ks, cfg.split.gallery_mode, cfg.workers)
}

/// Contents of `report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportFile {
    pub config: RunConfig,
    pub checkpoint_sha256: Option<String>,
    pub report: RetrievalReport,
}

impl ReportFile {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

/// One row of the ablation grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    /// `None` means no training at all (zero-shot).
    pub ablation: Option<Ablation>,
    pub pairs: usize,
}

impl Variant {
    fn trained(name: &str, ablation: Ablation, pairs: usize) -> Self {
        Self { name: name.into(), ablation: Some(ablation), pairs }
    }
}

/// Baselines and reduced configurations next to the full model.
pub fn standard_variants(base: &RunConfig) -> Vec<Variant> {
    let full = Ablation { one_phase_mode: OnePhaseMode::Off, ..base.ablation.clone() };
    let r = base.phase1.loss.pairs;
    vec![
        Variant { name: "zero_shot".into(), ablation: None, pairs: r },
        Variant::trained("linear_probe", Ablation { one_phase_mode: OnePhaseMode::LinearProbe, ..full.clone() }, r),
        Variant::trained("one_phase_prompts", Ablation { one_phase_mode: OnePhaseMode::Prompts, ..full.clone() }, r),
        Variant::trained("uv_tpg", Ablation { use_mask: false, use_tst: false, ..full.clone() }, r),
        Variant::trained("uv_tpg_mask", Ablation { use_mask: true, use_tst: false, ..full.clone() }, r),
        Variant::trained("uv_tpg_tst", Ablation { use_mask: false, use_tst: true, ..full.clone() }, r),
        Variant::trained("full", Ablation { use_mask: true, use_tst: true, ..full.clone() }, r),
        Variant::trained("full_pairs_1", Ablation { use_mask: true, use_tst: true, ..full }, 1),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub variant: Variant,
    pub report: RetrievalReport,
}

/// Runs each variant on the same data. Variants that differ only in phase
/// 2 share one phase-1 run.
pub fn run_variants(cfg: &RunConfig, data: &Prepared, variants: &[Variant]) -> Result<Vec<VariantResult>> {
    let mut phase1_cache: Vec<(TrainConfig, Ablation, Checkpoint)> = Vec::new();
    let mut out = Vec::with_capacity(variants.len());
    for v in variants {
        let Some(ablation) = &v.ablation else {
            let model = zero_shot_model(cfg, data)?;
            let eval = evaluate_model(cfg, data, &model, PromptSource::None)?;
            out.push(VariantResult { variant: v.clone(), report: eval.report });
            continue;
        };
        let mut run = RunConfig { ablation: ablation.clone(), ..cfg.clone() };
        run.phase1.loss.pairs = v.pairs;
        // mask and pairing only matter in phase 2
        let key = Ablation { use_mask: true, crossed_tpg_pairing: false, ..ablation.clone() };
        let cached = phase1_cache.iter().position(|(t, a, _)| *t == run.phase1 && *a == key);
        let phase1 = match cached {
            Some(i) => phase1_cache[i].2.clone(),
            None => {
                log::info!("variant {}: training phase 1", v.name);
                let opts = TrainOptions { workers: cfg.workers, ..Default::default() };
                let ckpt = train_phase1(&data.dataset, &data.splits, &run.model, &run.phase1, &run.ablation, opts)?;
                phase1_cache.push((run.phase1.clone(), key, ckpt.clone()));
                ckpt
            }
        };
        let model = if run.two_phase() {
            log::info!("variant {}: training phase 2", v.name);
            let opts = TrainOptions { workers: cfg.workers, ..Default::default() };
            train_phase2(&data.dataset, &data.splits, &phase1, &run.phase2, &run.ablation, opts)?.model
        } else {
            phase1.model
        };
        let eval = evaluate_model(&run, data, &model, run.test_source())?;
        out.push(VariantResult { variant: v.clone(), report: eval.report });
    }
    Ok(out)
}

/// Plain-text comparison table, one row per variant.
pub fn format_table(results: &[VariantResult], ks: &[usize]) -> String {
    let mut s = format!("{:<20}", "variant");
    for k in ks {
        s += &format!(" {:>9} {:>9}", format!("mAP@{k}"), format!("P@{k}"));
    }
    s += &format!(" {:>9}\n", "mAP@all");
    for r in results {
        s += &format!("{:<20}", r.variant.name);
        for k in ks {
            let m = r.report.metrics.iter().find(|m| m.k == *k);
            s += &format!(" {:>9.4} {:>9.4}", m.map_or(f64::NAN, |m| m.map), m.map_or(f64::NAN, |m| m.precision));
        }
        s += &format!(" {:>9.4}\n", r.report.map_all);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_reaches_every_component() {
        let c = RunConfig::default().with_seed(9);
        assert_eq!((c.generator.seed, c.split.seed, c.phase1.seed, c.phase2.seed), (9, 9, 9, 9));
    }

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::default();
        let back = RunConfig::from_json(&c.to_json().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_keys_and_bad_versions_are_config_errors() {
        let e = RunConfig::from_json(r#"{"schema_version": 1, "sede": 3}"#).unwrap_err();
        assert_eq!(e.category(), "config");
        let e = RunConfig::from_json(r#"{"schema_version": 2}"#).unwrap_err();
        assert_eq!(e.category(), "config");
        let e = RunConfig::from_json(r#"{"metric_ks": []}"#).unwrap_err();
        assert_eq!(e.category(), "config");
    }

    #[test]
    fn partial_documents_fill_defaults() {
        let c = RunConfig::from_json(r#"{"seed": 4, "phase1": {"max_epochs": 3}}"#).unwrap();
        assert_eq!(c.phase1.max_epochs, 3);
        assert_eq!(c.phase1.batch_size, 64);
        assert_eq!(c.phase2.seed, 4);
    }

    #[test]
    fn mismatched_token_shapes_rejected() {
        let mut c = RunConfig::default();
        c.generator.token_dim = 32;
        assert_eq!(c.validate().unwrap_err().category(), "config");
    }

    #[test]
    fn variants_cover_the_grid() {
        let names: Vec<String> = standard_variants(&RunConfig::default()).into_iter().map(|v| v.name).collect();
        assert_eq!(names.len(), 8);
        assert!(names.contains(&"full".to_string()) && names.contains(&"zero_shot".to_string()));
    }
}
