use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::phase1::check_resume;
use super::{
    check_finite, epoch_order, validation_map, Ablation, Adam, Checkpoint, CheckpointMeta, EarlyStopping, EpochLog,
    OnePhaseMode, TrainConfig, TrainOptions,
};
use crate::data::{Dataset, SplitAssignment};
use crate::error::{Error, Result};
use crate::losses::{itc_loss, phase2_loss};
use crate::model::{Model, PromptSource};
use crate::numerics::{Tape, Tensor};
use crate::prompts::one_hot;
use crate::tpg::{frozen_bank, TargetPromptGenerator};

/// Text features of every seen class per seen domain, computed once from
/// the phase-1 template.
pub(crate) fn frozen_text(model: &Model) -> Result<BTreeMap<usize, Tensor>> {
    model
        .seen_domains
        .iter()
        .map(|&d| {
            let rows = model.text_features(d)?;
            let e = rows.first().map_or(0, Vec::len);
            Ok((d, Tensor::new(vec![rows.len(), e], rows.concat())?))
        })
        .collect()
}

fn step(
    model: &mut Model,
    adam: &mut Adam,
    dataset: &Dataset,
    texts: &BTreeMap<usize, Tensor>,
    batch: &[usize],
    config: &TrainConfig,
    ablation: &Ablation,
    lr: f64,
    epoch: usize,
    index: usize,
) -> Result<f64> {
    let tpg = model.tpg.as_ref().ok_or_else(|| Error::State("phase 2 without a prompt generator".into()))?;
    let mut tape = Tape::new();
    let image = model.image.bind(&mut tape);
    let gen = tpg.bind(&mut tape);
    let bank = frozen_bank(&mut tape, &model.bank);
    let (nc, nd) = (model.bank.num_classes(), model.bank.num_domains());
    let mut itc = Vec::with_capacity(batch.len());
    for s in dataset.get(batch) {
        let (c, d) = model.bank_index(s.class_id, s.domain_id).expect("training sample");
        let (ex_c, ex_d) = if ablation.use_mask { (one_hot(nc, c), one_hot(nd, d)) } else { (vec![false; nc], vec![false; nd]) };
        let x = tape.constant(&s.tokens);
        let g = gen.generate(&mut tape, &bank, x, &ex_c, &ex_d)?;
        let f = image.encode(&mut tape, &model.image, x, Some(g.prompt))?;
        let text = texts.get(&s.domain_id).ok_or_else(|| Error::State(format!("no frozen text features for domain {}", s.domain_id)))?;
        let t = tape.constant(text);
        itc.push(itc_loss(&mut tape, f, t, c, config.loss.temperature)?);
    }
    let loss = phase2_loss(&mut tape, &itc)?;
    let value = f64::from(tape.scalar(loss));
    check_finite(value, epoch, index, "phase-2 loss")?;
    let grads = tape.backward(loss)?;
    let vars = gen.vars();
    let tpg = model.tpg.as_mut().expect("checked above");
    let mut ps: Vec<&mut Tensor> = tpg.tensors_mut().into_iter().collect();
    let gs: Vec<Vec<f32>> = vars.iter().zip(&ps).map(|(&v, p)| grads.get_or_zeros(v, p.len())).collect();
    adam.update(&mut ps, &gs, lr)?;
    Ok(value)
}

/// Target prompt generator training on top of a frozen phase-1 model.
pub fn train_phase2(
    dataset: &Dataset,
    splits: &SplitAssignment,
    phase1: &Checkpoint,
    config: &TrainConfig,
    ablation: &Ablation,
    mut options: TrainOptions<'_>,
) -> Result<Checkpoint> {
    config.validate()?;
    splits.validate(&dataset.manifest)?;
    if phase1.meta.phase != 1 {
        return Err(Error::State(format!("phase 2 needs a phase-1 checkpoint, got phase {}", phase1.meta.phase)));
    }
    if phase1.meta.ablation.one_phase_mode != OnePhaseMode::Off || ablation.one_phase_mode != OnePhaseMode::Off {
        return Err(Error::State("one-phase runs have no second phase".into()));
    }
    if phase1.meta.seen_classes != splits.seen_classes || phase1.meta.seen_domains != splits.seen_domains {
        return Err(Error::State("phase-1 checkpoint was trained on different label sets".into()));
    }
    let mut ckpt = match options.resume.take() {
        Some(ckpt) => {
            check_resume(&ckpt, 2, &phase1.meta.model, config, ablation)?;
            ckpt
        }
        None => {
            let mut model = phase1.model.clone();
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(2);
            let tpg = TargetPromptGenerator::new(
                model.config.encoder.input_dim,
                model.config.prompt_dim,
                &model.config.tpg,
                ablation.crossed_tpg_pairing,
                &mut rng,
            )?;
            let adam = Adam::new(&tpg.tensors().iter().map(|t| t.shape().to_vec()).collect::<Vec<_>>());
            let trainable = tpg.tensors().iter().map(|t| t.len()).sum();
            log::info!("phase 2 trains {trainable} parameters");
            model.tpg = Some(tpg);
            Checkpoint {
                meta: CheckpointMeta {
                    phase: 2,
                    train: config.clone(),
                    ablation: ablation.clone(),
                    epochs_done: 0,
                    stopping: EarlyStopping::new(config.early_stop_patience),
                    finished: false,
                    trainable_parameters: trainable,
                    history: Vec::new(),
                    ..phase1.meta.clone()
                },
                model,
                adam,
            }
        }
    };
    // everything from phase 1 stays frozen
    ckpt.model.bank.set_trainable(false);
    ckpt.model.text.template.domain_context.set_requires_grad(false);
    ckpt.model.tpg.as_mut().expect("phase-2 model has a generator").set_trainable(true);

    let texts = frozen_text(&ckpt.model)?;
    let train_ids = splits.train_ids();
    while !ckpt.meta.finished && ckpt.meta.epochs_done < config.max_epochs {
        let epoch = ckpt.meta.epochs_done;
        let lr = config.lr_at(epoch);
        let order = epoch_order(&train_ids, config.seed, 2, epoch);
        let (mut loss, mut batches) = (0.0, 0);
        for (i, batch) in order.chunks(config.batch_size).enumerate() {
            loss += step(&mut ckpt.model, &mut ckpt.adam, dataset, &texts, batch, config, ablation, lr, epoch, i)?;
            batches += 1;
        }
        let val = validation_map(dataset, splits, &ckpt.model, PromptSource::Tpg, config.validation_k, options.workers)?;
        let improved = ckpt.meta.stopping.observe(val);
        let loss = loss / batches.max(1) as f64;
        let entry = EpochLog { phase: 2, epoch, lr, loss, triplet: 0.0, itc: loss, batches, validation_map: val, improved };
        log::info!("phase 2 epoch {epoch}: loss {loss:.5} validation mAP@{} {val:.4}", config.validation_k);
        if let Some(cb) = options.on_epoch.as_mut() {
            cb(&entry);
        }
        ckpt.meta.history.push(entry);
        ckpt.meta.epochs_done = epoch + 1;
        if ckpt.meta.stopping.should_stop() || ckpt.meta.epochs_done >= config.max_epochs {
            ckpt.meta.finished = true;
        }
        if options.halt_after_epoch == Some(epoch) {
            break;
        }
    }
    Ok(ckpt)
}
