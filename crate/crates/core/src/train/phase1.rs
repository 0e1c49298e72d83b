use std::collections::BTreeMap;

use super::{
    check_finite, epoch_order, validation_map, Ablation, Adam, Checkpoint, CheckpointMeta, EarlyStopping, EpochLog,
    OnePhaseMode, TrainConfig, TrainOptions,
};
use crate::data::{Dataset, SampleRecord, SplitAssignment};
use crate::encoders::{BoundImageEncoder, BoundTextEncoder};
use crate::error::{Error, Result};
use crate::losses::{itc_loss, phase1_loss, phase2_loss, triplet_loss};
use crate::memory::ClassQueueSet;
use crate::model::{Model, ModelConfig, PromptSource};
use crate::numerics::{Tape, Tensor, Var};

/// Trainable tensors of phase 1 in optimizer order.
fn params<'a>(model: &'a mut Model, ablation: &Ablation) -> Vec<&'a mut Tensor> {
    let mut out: Vec<&mut Tensor> = match model.probe.as_mut() {
        Some(p) => vec![&mut p.weight, &mut p.bias],
        None => vec![&mut model.bank.u, &mut model.bank.v, &mut model.bank.projection.weight, &mut model.bank.projection.bias],
    };
    if ablation.use_tst {
        out.push(&mut model.text.template.domain_context);
    }
    out
}

fn set_trainable(model: &mut Model, ablation: &Ablation) {
    model.bank.set_trainable(false);
    model.text.template.domain_context.set_requires_grad(false);
    if let Some(p) = model.probe.as_mut() {
        p.weight.set_requires_grad(false);
        p.bias.set_requires_grad(false);
    }
    for p in params(model, ablation) {
        p.set_requires_grad(true);
    }
}

/// Refills the queues from scratch with momentum-path features of the
/// `capacity` most recent training samples (by id) of every seen class.
pub fn warm_queues(
    model: &Model,
    dataset: &Dataset,
    train_ids: &[usize],
    queues: &mut ClassQueueSet,
    use_momentum: bool,
) -> Result<()> {
    queues.clear();
    for &class in &model.seen_classes {
        let ids: Vec<usize> = train_ids.iter().copied().filter(|&i| dataset.samples[i].class_id == class).collect();
        let start = ids.len().saturating_sub(queues.capacity());
        for s in dataset.get(&ids[start..]) {
            let f = queue_feature(model, s, use_momentum)?;
            queues.push(class, &f)?;
        }
    }
    Ok(())
}

fn queue_feature(model: &Model, s: &SampleRecord, use_momentum: bool) -> Result<Vec<f32>> {
    let (c, d) = model
        .bank_index(s.class_id, s.domain_id)
        .ok_or_else(|| Error::contract("queue_feature", format!("sample {} is not a training sample", s.id)))?;
    let p = model.bank.select_prompt(c, d, use_momentum)?;
    model.image.encode(&s.tokens, Some(&p))
}

/// Stacks the text features of every seen class for `domain` into a
/// `[classes, E]` matrix on the tape.
pub(crate) fn text_matrix(tape: &mut Tape, model: &Model, bound: &BoundTextEncoder, domain: usize) -> Result<Var> {
    let rows = model
        .seen_classes
        .iter()
        .map(|&c| {
            let f = bound.encode(tape, &model.text, c, domain)?;
            let e = tape.value(f).len();
            tape.reshape(f, vec![1, e])
        })
        .collect::<Result<Vec<_>>>()?;
    tape.concat(&rows, 0)
}

struct StepTotals {
    loss: f64,
    triplet: f64,
    itc: f64,
}

struct Phase1Step<'a> {
    dataset: &'a Dataset,
    config: &'a TrainConfig,
    ablation: &'a Ablation,
    zero_shot: &'a BTreeMap<usize, Vec<f32>>,
}

impl Phase1Step<'_> {
    fn run(&self, model: &mut Model, adam: &mut Adam, queues: &mut ClassQueueSet, batch: &[usize], lr: f64, epoch: usize, index: usize) -> Result<StepTotals> {
        let samples = self.dataset.get(batch);
        let tau = self.config.loss.temperature;
        let mut tape = Tape::new();
        let text = model.text.bind(&mut tape)?;
        let mut texts = BTreeMap::new();
        for s in &samples {
            if !texts.contains_key(&s.domain_id) {
                texts.insert(s.domain_id, text_matrix(&mut tape, model, &text, s.domain_id)?);
            }
        }

        let mut itc = Vec::with_capacity(samples.len());
        let mut triplet = Vec::with_capacity(samples.len());
        let param_vars: Vec<Var>;
        if let Some(probe) = &model.probe {
            let head = probe.bind(&mut tape);
            for s in &samples {
                let (c, _) = model.bank_index(s.class_id, s.domain_id).expect("training sample");
                let x = tape.constant_vec(self.zero_shot[&s.id].clone());
                let y = head.forward(&mut tape, x)?;
                let y = tape.normalize(y);
                itc.push(itc_loss(&mut tape, y, texts[&s.domain_id], c, tau)?);
            }
            param_vars = vec![head.weight, head.bias];
        } else {
            let image: BoundImageEncoder = model.image.bind(&mut tape);
            let bank = model.bank.bind(&mut tape);
            let mut features = Vec::with_capacity(samples.len());
            for s in &samples {
                let (c, d) = model.bank_index(s.class_id, s.domain_id).expect("training sample");
                let prompt = bank.select(&mut tape, c, d)?;
                let x = tape.constant(&s.tokens);
                let f = image.encode(&mut tape, &model.image, x, Some(prompt))?;
                itc.push(itc_loss(&mut tape, f, texts[&s.domain_id], c, tau)?);
                features.push(f);
            }
            for (s, &f) in samples.iter().zip(&features) {
                let q = if self.ablation.use_momentum { queue_feature(model, s, true)? } else { tape.value(f).to_vec() };
                queues.push(s.class_id, &q)?;
            }
            for (s, &f) in samples.iter().zip(&features) {
                let pairs = queues.sample_hard_pairs(tape.value(f), s.class_id, self.config.loss.pairs)?;
                triplet.push(triplet_loss(&mut tape, f, &pairs, self.config.loss.margin)?);
            }
            param_vars = vec![bank.u, bank.v, bank.projection.weight, bank.projection.bias];
        }

        let mean = |tape: &Tape, vars: &[Var]| vars.iter().map(|&v| f64::from(tape.scalar(v))).sum::<f64>() / vars.len().max(1) as f64;
        let itc_mean = mean(&tape, &itc);
        let triplet_mean = mean(&tape, &triplet);
        check_finite(itc_mean, epoch, index, "image-text contrastive loss")?;
        check_finite(triplet_mean, epoch, index, "triplet loss")?;
        let loss = if triplet.is_empty() { phase2_loss(&mut tape, &itc)? } else { phase1_loss(&mut tape, &triplet, &itc)? };
        let loss_value = f64::from(tape.scalar(loss));
        check_finite(loss_value, epoch, index, "phase-1 loss")?;

        let grads = tape.backward(loss)?;
        let mut vars = param_vars;
        if self.ablation.use_tst {
            vars.push(text.context());
        }
        let mut ps = params(model, self.ablation);
        let gs: Vec<Vec<f32>> = vars.iter().zip(&ps).map(|(&v, p)| grads.get_or_zeros(v, p.len())).collect();
        adam.update(&mut ps, &gs, lr)?;
        if model.probe.is_none() {
            model.bank.momentum_update()?;
        }
        Ok(StepTotals { loss: loss_value, triplet: triplet_mean, itc: itc_mean })
    }
}

pub(crate) fn check_resume(ckpt: &Checkpoint, phase: u8, model: &ModelConfig, config: &TrainConfig, ablation: &Ablation) -> Result<()> {
    if ckpt.meta.phase != phase {
        return Err(Error::State(format!("cannot resume phase {phase} from a phase-{} checkpoint", ckpt.meta.phase)));
    }
    if &ckpt.meta.model != model || &ckpt.meta.train != config || &ckpt.meta.ablation != ablation {
        return Err(Error::Config("resume checkpoint was trained with a different configuration".into()));
    }
    Ok(())
}

/// Source prompt learning. Returns the state after the last epoch run.
pub fn train_phase1(
    dataset: &Dataset,
    splits: &SplitAssignment,
    model_config: &ModelConfig,
    config: &TrainConfig,
    ablation: &Ablation,
    mut options: TrainOptions<'_>,
) -> Result<Checkpoint> {
    config.validate()?;
    splits.validate(&dataset.manifest)?;
    let mut ckpt = match options.resume.take() {
        Some(ckpt) => {
            check_resume(&ckpt, 1, model_config, config, ablation)?;
            ckpt
        }
        None => {
            let mut model = Model::init(model_config, &dataset.manifest, splits, config.momentum_rate, config.seed)?;
            if ablation.one_phase_mode == OnePhaseMode::LinearProbe {
                model.attach_probe();
            }
            let adam = Adam::for_params(&params(&mut model, ablation));
            let trainable = params(&mut model, ablation).iter().map(|p| p.len()).sum();
            log::info!("phase 1 trains {trainable} parameters");
            Checkpoint {
                meta: CheckpointMeta {
                    phase: 1,
                    model: model_config.clone(),
                    train: config.clone(),
                    ablation: ablation.clone(),
                    num_classes: dataset.manifest.num_classes(),
                    num_domains: dataset.manifest.num_domains(),
                    seen_classes: splits.seen_classes.clone(),
                    seen_domains: splits.seen_domains.clone(),
                    momentum_rate: config.momentum_rate,
                    epochs_done: 0,
                    stopping: EarlyStopping::new(config.early_stop_patience),
                    finished: false,
                    trainable_parameters: trainable,
                    history: Vec::new(),
                },
                model,
                adam,
            }
        }
    };
    set_trainable(&mut ckpt.model, ablation);

    let train_ids = splits.train_ids();
    let probe = ckpt.model.probe.is_some();
    let source = if probe { PromptSource::Probe } else { PromptSource::Phase1 };
    let zero_shot: BTreeMap<usize, Vec<f32>> = if probe {
        dataset
            .get(&train_ids)
            .into_iter()
            .map(|s| Ok((s.id, ckpt.model.image.encode(&s.tokens, None)?)))
            .collect::<Result<_>>()?
    } else {
        BTreeMap::new()
    };
    let step = Phase1Step { dataset, config, ablation, zero_shot: &zero_shot };
    let mut queues = ClassQueueSet::new(&splits.seen_classes, config.queue_capacity)?;

    while !ckpt.meta.finished && ckpt.meta.epochs_done < config.max_epochs {
        let epoch = ckpt.meta.epochs_done;
        let lr = config.lr_at(epoch);
        if !probe {
            warm_queues(&ckpt.model, dataset, &train_ids, &mut queues, ablation.use_momentum)?;
        }
        let order = epoch_order(&train_ids, config.seed, 1, epoch);
        let (mut loss, mut triplet, mut itc, mut batches) = (0.0, 0.0, 0.0, 0);
        for (i, batch) in order.chunks(config.batch_size).enumerate() {
            let t = step.run(&mut ckpt.model, &mut ckpt.adam, &mut queues, batch, lr, epoch, i)?;
            loss += t.loss;
            triplet += t.triplet;
            itc += t.itc;
            batches += 1;
        }
        let val = validation_map(dataset, splits, &ckpt.model, source, config.validation_k, options.workers)?;
        let improved = ckpt.meta.stopping.observe(val);
        let n = batches.max(1) as f64;
        let entry = EpochLog {
            phase: 1,
            epoch,
            lr,
            loss: loss / n,
            triplet: triplet / n,
            itc: itc / n,
            batches,
            validation_map: val,
            improved,
        };
        log::info!("phase 1 epoch {epoch}: loss {:.5} validation mAP@{} {val:.4}", entry.loss, config.validation_k);
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
