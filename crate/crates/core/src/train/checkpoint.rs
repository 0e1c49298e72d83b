use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Ablation, Adam, EarlyStopping, EpochLog, TrainConfig};
use crate::encoders::{ImageEncoder, Linear, TextEncoder};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::numerics::io::{read_tensor, write_tensor, ByteReader};
use crate::numerics::Tensor;
use crate::prompts::PromptBank;
use crate::tpg::TargetPromptGenerator;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"UCDC";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything in a checkpoint that is not a tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub phase: u8,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub ablation: Ablation,
    pub num_classes: usize,
    pub num_domains: usize,
    pub seen_classes: Vec<usize>,
    pub seen_domains: Vec<usize>,
    pub momentum_rate: f64,
    /// Epochs completed in this phase.
    pub epochs_done: usize,
    pub stopping: EarlyStopping,
    /// Set once the phase has stopped, early or at `max_epochs`.
    pub finished: bool,
    pub trainable_parameters: usize,
    pub history: Vec<EpochLog>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub model: Model,
    pub adam: Adam,
}

fn section(buf: &mut Vec<u8>, name: &str, t: &Tensor) {
    buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    write_tensor(buf, t);
}

impl Checkpoint {
    /// Named tensors in their fixed on-disk order.
    fn sections(&self) -> Vec<(String, &Tensor)> {
        let m = &self.model;
        let mut out: Vec<(String, &Tensor)> = vec![
            ("prompt.u".into(), &m.bank.u),
            ("prompt.v".into(), &m.bank.v),
            ("prompt.u_m".into(), &m.bank.u_m),
            ("prompt.v_m".into(), &m.bank.v_m),
            ("prompt.projection.weight".into(), &m.bank.projection.weight),
            ("prompt.projection.bias".into(), &m.bank.projection.bias),
            ("text.domain_context".into(), &m.text.template.domain_context),
        ];
        if let Some(tpg) = &m.tpg {
            let names = ["g_in.weight", "g_in.bias", "g_out.weight", "g_out.bias", "query.weight", "query.bias", "key.weight", "key.bias"];
            out.extend(names.iter().zip(tpg.tensors()).map(|(n, t)| (format!("tpg.{n}"), t)));
        }
        if let Some(p) = &m.probe {
            out.push(("probe.weight".into(), &p.weight));
            out.push(("probe.bias".into(), &p.bias));
        }
        for (i, t) in self.adam.first.iter().enumerate() {
            out.push((format!("adam.first.{i}"), t));
        }
        for (i, t) in self.adam.second.iter().enumerate() {
            out.push((format!("adam.second.{i}"), t));
        }
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta)?;
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&u32::from(self.meta.phase).to_le_bytes());
        buf.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        buf.extend_from_slice(&meta);
        buf.extend_from_slice(&self.adam.step.to_le_bytes());
        let sections = self.sections();
        buf.extend_from_slice(&(sections.len() as u32).to_le_bytes());
        for (name, t) in sections {
            section(&mut buf, &name, t);
        }
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.magic(CHECKPOINT_MAGIC)?;
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("checkpoint version {version}, expected {CHECKPOINT_VERSION}")));
        }
        let phase = r.u32()?;
        let meta_len = r.u64()? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)?;
        if u32::from(meta.phase) != phase {
            return Err(Error::Format(format!("header says phase {phase}, metadata says {}", meta.phase)));
        }
        let adam_step = r.u64()?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Format("section name is not utf-8".into()))?
                .to_string();
            tensors.push((name, read_tensor(&mut r)?));
        }
        if !r.is_at_end() {
            return Err(Error::Format(format!("{} trailing bytes after the last section", bytes.len() - r.position())));
        }
        Self::assemble(meta, adam_step, tensors)
    }

    fn assemble(meta: CheckpointMeta, adam_step: u64, tensors: Vec<(String, Tensor)>) -> Result<Self> {
        type Sections = std::iter::Peekable<std::vec::IntoIter<(String, Tensor)>>;
        fn take(it: &mut Sections, expected: &str) -> Result<Tensor> {
            match it.next() {
                Some((name, t)) if name == expected => Ok(t),
                Some((name, _)) => Err(Error::Format(format!("expected section {expected}, found {name}"))),
                None => Err(Error::Format(format!("missing section {expected}"))),
            }
        }
        fn has(it: &mut Sections, prefix: &str) -> bool {
            it.peek().is_some_and(|(n, _)| n.starts_with(prefix))
        }
        fn linear(it: &mut Sections, prefix: &str) -> Result<Linear> {
            Ok(Linear { weight: take(it, &format!("{prefix}.weight"))?, bias: take(it, &format!("{prefix}.bias"))? })
        }

        let mut it = tensors.into_iter().peekable();
        let u = take(&mut it, "prompt.u")?;
        let v = take(&mut it, "prompt.v")?;
        let u_m = take(&mut it, "prompt.u_m")?;
        let v_m = take(&mut it, "prompt.v_m")?;
        let projection = linear(&mut it, "prompt.projection")?;
        let context = take(&mut it, "text.domain_context")?;
        let tpg = if has(&mut it, "tpg.") {
            Some(TargetPromptGenerator {
                g_in: linear(&mut it, "tpg.g_in")?,
                g_out: linear(&mut it, "tpg.g_out")?,
                query: linear(&mut it, "tpg.query")?,
                key: linear(&mut it, "tpg.key")?,
                crossed: meta.ablation.crossed_tpg_pairing,
            })
        } else {
            None
        };
        let probe = if has(&mut it, "probe.") { Some(linear(&mut it, "probe")?) } else { None };
        let mut first = Vec::new();
        while has(&mut it, "adam.first.") {
            first.push(take(&mut it, &format!("adam.first.{}", first.len()))?);
        }
        let mut second = Vec::new();
        while has(&mut it, "adam.second.") {
            second.push(take(&mut it, &format!("adam.second.{}", second.len()))?);
        }
        if let Some((name, _)) = it.next() {
            return Err(Error::Format(format!("unexpected section {name}")));
        }
        if first.len() != second.len() {
            return Err(Error::Format("adam moment sections are unbalanced".into()));
        }

        let enc = &meta.model.encoder;
        let mut text = TextEncoder::new(enc, meta.num_classes, meta.num_domains);
        if context.shape() != text.template.domain_context.shape() {
            return Err(Error::Format(format!(
                "domain context {:?} does not fit the encoder {:?}",
                context.shape(),
                text.template.domain_context.shape()
            )));
        }
        text.template.domain_context = context;
        let (nd, nc) = (meta.seen_domains.len(), meta.seen_classes.len());
        if u.shape() != [nd, meta.model.prompt_dim] || v.shape() != [nc, meta.model.prompt_dim] || u_m.shape() != u.shape() || v_m.shape() != v.shape() {
            return Err(Error::Format("prompt bank shapes disagree with the seen label sets".into()));
        }
        let model = Model {
            config: meta.model.clone(),
            seen_classes: meta.seen_classes.clone(),
            seen_domains: meta.seen_domains.clone(),
            image: ImageEncoder::new(enc),
            text,
            bank: PromptBank { u, v, u_m, v_m, projection, momentum_rate: meta.momentum_rate },
            tpg,
            probe,
        };
        Ok(Self { meta, model, adam: Adam { step: adam_step, first, second } })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Hex SHA-256 of a file's bytes.
pub fn file_sha256(path: &Path) -> Result<String> {
    use sha2::{Digest, Sha256};
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}
