use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use ucdr_core::data::{load_dataset, load_splits, save_dataset, save_splits, SPLITS_FILE};
use ucdr_core::experiment::{self, Prepared, ReportFile, RunConfig};
use ucdr_core::gradients;
use ucdr_core::model::PromptSource;
use ucdr_core::retrieval::{embed_set, rank, rankings_csv, write_embeddings};
use ucdr_core::train::{file_sha256, train_phase1, train_phase2, Checkpoint, EpochLog, TrainOptions};
use ucdr_core::{Error, Result};

use crate::{Cli, Command, Scope};

fn config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_prepared(dir: &Path) -> Result<Prepared> {
    let dataset = load_dataset(dir)?;
    let splits = load_splits(&dir.join(SPLITS_FILE))?;
    splits.validate(&dataset.manifest)?;
    Ok(Prepared { dataset, splits })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, text)?;
    Ok(())
}

pub fn run(cli: Cli) -> Result<ExitCode> {
    let cfg = config(&cli)?;
    match cli.command {
        Command::GenData { out } => gen_data(&cfg, &out),
        Command::Train { phase, data, out, phase1, resume, log, stop_after_epoch } => {
            let log = log.unwrap_or_else(|| {
                let mut p = out.clone().into_os_string();
                p.push(".log.jsonl");
                PathBuf::from(p)
            });
            train(&cfg, phase, &data, &out, phase1.as_deref(), resume.as_deref(), &log, stop_after_epoch)
        }
        Command::Eval { data, mode, ckpt, out, rankings, embeddings, ablate } => {
            if ablate {
                ablation(&cfg, &data, &out)
            } else {
                eval(&cfg, &data, mode.into(), ckpt.as_deref(), &out, rankings.as_deref(), embeddings.as_deref())
            }
        }
        Command::Retrieve { data, ckpt, query_ids, k, mode } => retrieve(&cfg, &data, &ckpt, &query_ids, k, mode.into()),
        Command::GradCheck { scope } => grad_check(scope),
    }
}

fn gen_data(cfg: &RunConfig, out: &Path) -> Result<ExitCode> {
    let data = experiment::prepare(cfg)?;
    save_dataset(&data.dataset, out)?;
    save_splits(&data.splits, &out.join(SPLITS_FILE))?;
    write_text(&out.join("config.json"), &(cfg.to_json()? + "\n"))?;
    println!("{} samples written to {}", data.dataset.samples.len(), out.display());
    Ok(ExitCode::SUCCESS)
}

#[allow(clippy::too_many_arguments)]
fn train(
    cfg: &RunConfig,
    phase: u8,
    data: &Path,
    out: &Path,
    phase1: Option<&Path>,
    resume: Option<&Path>,
    log: &Path,
    stop_after_epoch: Option<usize>,
) -> Result<ExitCode> {
    let prepared = load_prepared(data)?;
    let resume = resume.map(Checkpoint::load).transpose()?;
    if let Some(dir) = log.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    // a resumed run appends to the log it started
    let mut log_file = if resume.is_some() {
        File::options().create(true).append(true).open(log)?
    } else {
        File::create(log)?
    };
    let mut failure: Option<std::io::Error> = None;
    let mut on_epoch = |e: &EpochLog| {
        let line = serde_json::to_string(e).expect("epoch log serializes");
        println!("{line}");
        if let Err(err) = writeln!(log_file, "{line}") {
            failure.get_or_insert(err);
        }
    };
    let opts = TrainOptions { resume, halt_after_epoch: stop_after_epoch, on_epoch: Some(&mut on_epoch), workers: cfg.workers };
    let ckpt = match phase {
        1 => train_phase1(&prepared.dataset, &prepared.splits, &cfg.model, &cfg.phase1, &cfg.ablation, opts)?,
        _ => {
            let p1 = phase1.ok_or_else(|| Error::Config("train --phase 2 needs --phase1 <checkpoint>".into()))?;
            let p1 = Checkpoint::load(p1)?;
            train_phase2(&prepared.dataset, &prepared.splits, &p1, &cfg.phase2, &cfg.ablation, opts)?
        }
    };
    if let Some(err) = failure {
        return Err(err.into());
    }
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    ckpt.save(out)?;
    log::info!("phase {phase}: {} trainable parameters", ckpt.meta.trainable_parameters);
    eprintln!(
        "phase {phase}: {} epochs, {} trainable parameters, finished={}, sha256 {}",
        ckpt.meta.epochs_done,
        ckpt.meta.trainable_parameters,
        ckpt.meta.finished,
        file_sha256(out)?
    );
    Ok(ExitCode::SUCCESS)
}

fn model_for(cfg: &RunConfig, data: &Prepared, source: PromptSource, ckpt: Option<&Path>) -> Result<(ucdr_core::model::Model, Option<String>)> {
    match ckpt {
        Some(p) => Ok((Checkpoint::load(p)?.model, Some(file_sha256(p)?))),
        None if source == PromptSource::None => Ok((experiment::zero_shot_model(cfg, data)?, None)),
        None => Err(Error::State(format!("mode {} needs --ckpt", source.name()))),
    }
}

fn eval(
    cfg: &RunConfig,
    data: &Path,
    source: PromptSource,
    ckpt: Option<&Path>,
    out: &Path,
    rankings: Option<&Path>,
    embeddings: Option<&Path>,
) -> Result<ExitCode> {
    let prepared = load_prepared(data)?;
    let (model, checkpoint_sha256) = model_for(cfg, &prepared, source, ckpt)?;
    let eval = experiment::evaluate_model(cfg, &prepared, &model, source)?;
    let file = ReportFile { config: cfg.clone(), checkpoint_sha256, report: eval.report.clone() };
    write_text(out, &file.to_json()?)?;
    if let Some(p) = rankings {
        write_text(p, &rankings_csv(&eval.rankings))?;
    }
    if let Some(p) = embeddings {
        write_embeddings(&eval, p)?;
    }
    for m in &eval.report.metrics {
        println!("mAP@{} {:.4}  P@{} {:.4}", m.k, m.map, m.k, m.precision);
    }
    println!("mAP@all {:.4}", eval.report.map_all);
    Ok(ExitCode::SUCCESS)
}

fn ablation(cfg: &RunConfig, data: &Path, out: &Path) -> Result<ExitCode> {
    let prepared = load_prepared(data)?;
    let variants = experiment::standard_variants(cfg);
    let results = experiment::run_variants(cfg, &prepared, &variants)?;
    let doc = serde_json::json!({ "config": cfg, "results": results });
    write_text(out, &(serde_json::to_string_pretty(&doc)? + "\n"))?;
    print!("{}", experiment::format_table(&results, &cfg.metric_ks));
    Ok(ExitCode::SUCCESS)
}

fn retrieve(cfg: &RunConfig, data: &Path, ckpt: &Path, query_ids: &[usize], k: usize, source: PromptSource) -> Result<ExitCode> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    let prepared = load_prepared(data)?;
    let model = Checkpoint::load(ckpt)?.model;
    let n = prepared.dataset.samples.len();
    if let Some(bad) = query_ids.iter().find(|&&i| i >= n) {
        return Err(Error::Config(format!("query id {bad} is outside the dataset of {n} samples")));
    }
    let gallery_ids = prepared.splits.test_gallery_ids(cfg.split.gallery_mode);
    let gallery = prepared.dataset.get(&gallery_ids);
    let queries = prepared.dataset.get(query_ids);
    let g = embed_set(&model, &gallery, source, cfg.workers)?;
    let q = embed_set(&model, &queries, source, cfg.workers)?;
    println!("query_id,rank,gallery_id,distance,same_class");
    for (s, emb) in queries.iter().zip(&q) {
        for (r, (i, d)) in rank(emb, &g)?.into_iter().take(k).enumerate() {
            println!("{},{},{},{:.6},{}", s.id, r + 1, gallery[i].id, d, gallery[i].class_id == s.class_id);
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn grad_check(scope: Scope) -> Result<ExitCode> {
    let scope = match scope {
        Scope::Losses => gradients::Scope::Losses,
        Scope::Tpg => gradients::Scope::Tpg,
        Scope::All => gradients::Scope::All,
    };
    let outcomes = gradients::run(scope)?;
    for o in &outcomes {
        println!("{}", serde_json::to_string(o)?);
    }
    let failed = outcomes.iter().filter(|o| !o.passed).count();
    eprintln!("{} of {} checks within {:e}", outcomes.len() - failed, outcomes.len(), gradients::TOLERANCE);
    Ok(if failed == 0 { ExitCode::SUCCESS } else { ExitCode::from(1) })
}
