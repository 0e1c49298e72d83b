//! Everything a trained pipeline carries: frozen encoders plus the learned
//! pieces of each phase.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{DatasetManifest, SampleRecord, SplitAssignment};
use crate::encoders::{EncoderConfig, ImageEncoder, Linear, TextEncoder};
use crate::error::{Error, Result};
use crate::numerics::{normalized, Tape, Tensor};
use crate::prompts::PromptBank;
use crate::tpg::{TargetPromptGenerator, TpgConfig};

/// Architecture choices that do not change during training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    /// Width `m` of one prompt row.
    pub prompt_dim: usize,
    pub tpg: TpgConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { encoder: EncoderConfig::default(), prompt_dim: 16, tpg: TpgConfig::default() }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.prompt_dim == 0 {
            return Err(Error::Config("prompt_dim must be at least 1".into()));
        }
        Ok(())
    }
}

/// How an image gets its prompt before encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptSource {
    /// No prompt: the zero-shot encoder.
    None,
    /// Phase-1 prompt of the sample's own (class, domain); seen labels only.
    Phase1,
    /// Prompt from the target prompt generator.
    Tpg,
    /// One prompt from the mean bank rows, for every sample.
    Uniform,
    /// Zero-shot feature passed through the linear probe head.
    Probe,
}

impl PromptSource {
    pub fn name(self) -> &'static str {
        match self {
            PromptSource::None => "none",
            PromptSource::Phase1 => "phase1",
            PromptSource::Tpg => "tpg",
            PromptSource::Uniform => "uniform",
            PromptSource::Probe => "probe",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub seen_classes: Vec<usize>,
    pub seen_domains: Vec<usize>,
    pub image: ImageEncoder,
    pub text: TextEncoder,
    pub bank: PromptBank,
    pub tpg: Option<TargetPromptGenerator>,
    pub probe: Option<Linear>,
}

impl Model {
    /// Fresh model with seeded encoders and a random prompt bank.
    pub fn init(
        config: &ModelConfig,
        manifest: &DatasetManifest,
        splits: &SplitAssignment,
        momentum_rate: f64,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        if manifest.token_dim != config.encoder.input_dim || manifest.tokens != config.encoder.tokens {
            return Err(Error::Config(format!(
                "encoder expects [{}, {}] token grids but the dataset has [{}, {}]",
                config.encoder.tokens, config.encoder.input_dim, manifest.tokens, manifest.token_dim
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bank = PromptBank::new(
            splits.seen_domains.len(),
            splits.seen_classes.len(),
            config.prompt_dim,
            config.encoder.input_dim,
            momentum_rate,
            &mut rng,
        )?;
        Ok(Self {
            config: config.clone(),
            seen_classes: splits.seen_classes.clone(),
            seen_domains: splits.seen_domains.clone(),
            image: ImageEncoder::new(&config.encoder),
            text: TextEncoder::new(&config.encoder, manifest.num_classes(), manifest.num_domains()),
            bank,
            tpg: None,
            probe: None,
        })
    }

    /// Bank row indices of a seen (class, domain).
    pub fn bank_index(&self, class_id: usize, domain_id: usize) -> Option<(usize, usize)> {
        let c = self.seen_classes.iter().position(|&c| c == class_id)?;
        let d = self.seen_domains.iter().position(|&d| d == domain_id)?;
        Some((c, d))
    }

    /// Identity-initialized head over zero-shot features.
    pub fn attach_probe(&mut self) {
        let e = self.config.encoder.embed_dim;
        let mut weight = Tensor::zeros(&[e, e]);
        for i in 0..e {
            weight.data_mut()[i * e + i] = 1.0;
        }
        self.probe = Some(Linear { weight, bias: Tensor::zeros(&[e]) });
    }

    /// Text features of every seen class in one domain, rows in seen order.
    pub fn text_features(&self, domain_id: usize) -> Result<Vec<Vec<f32>>> {
        self.seen_classes
            .iter()
            .map(|&c| self.text.encode_seen(c, domain_id, &self.seen_classes, &self.seen_domains))
            .collect()
    }

    /// Prompt a sample receives under `source`; `None` means no prompt.
    pub fn prompt_for(&self, sample: &SampleRecord, source: PromptSource) -> Result<Option<Vec<f32>>> {
        match source {
            PromptSource::None | PromptSource::Probe => Ok(None),
            PromptSource::Uniform => Ok(Some(self.bank.uniform_prompt())),
            PromptSource::Phase1 => {
                let (c, d) = self.bank_index(sample.class_id, sample.domain_id).ok_or_else(|| {
                    Error::Misuse(format!(
                        "phase-1 prompts requested for sample {} with unseen label ({}, {})",
                        sample.id, sample.class_id, sample.domain_id
                    ))
                })?;
                Ok(Some(self.bank.select_prompt(c, d, false)?))
            }
            PromptSource::Tpg => {
                let tpg = self.tpg.as_ref().ok_or_else(|| Error::State("no target prompt generator; run phase 2 first".into()))?;
                Ok(Some(tpg.generate(&self.bank, &sample.tokens)?))
            }
        }
    }

    /// Unit-norm embedding of one sample.
    pub fn embed(&self, sample: &SampleRecord, source: PromptSource) -> Result<Vec<f32>> {
        let prompt = self.prompt_for(sample, source)?;
        let f = self.image.encode(&sample.tokens, prompt.as_deref())?;
        if source != PromptSource::Probe {
            return Ok(f);
        }
        let probe = self.probe.as_ref().ok_or_else(|| Error::State("no linear probe in this checkpoint".into()))?;
        let mut tape = Tape::new();
        let x = tape.constant_vec(f);
        let b = probe.bind(&mut tape);
        let y = b.forward(&mut tape, x)?;
        let (out, _) = normalized(tape.value(y));
        Ok(out)
    }
}
