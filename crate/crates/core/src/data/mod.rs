//! Synthetic multi-domain datasets, split protocols and their on-disk form.

mod generator;
mod splits;
mod store;

use serde::{Deserialize, Serialize};

pub use generator::{class_prototypes, generate_dataset, DomainTransform, GeneratorConfig};
pub use splits::{make_splits, GalleryMode, Protocol, SplitAssignment, SplitParams, SplitTag, CANONICAL_DOMAIN};
pub use store::{load_dataset, load_splits, save_dataset, save_splits, MANIFEST_FILE, SAMPLES_FILE, SPLITS_FILE};

use crate::numerics::Tensor;

/// One synthetic "image": a `tokens x token_dim` grid with its labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub id: usize,
    pub tokens: Tensor<f32>,
    pub class_id: usize,
    pub domain_id: usize,
}

/// Protocol view recorded alongside the dataset once splits are made.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolSummary {
    pub protocol: Protocol,
    pub gallery_mode: GalleryMode,
    pub seen_classes: Vec<usize>,
    pub seen_domains: Vec<usize>,
    pub unseen_classes: Vec<usize>,
    pub unseen_domains: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub class_names: Vec<String>,
    pub domain_names: Vec<String>,
    pub tokens: usize,
    pub token_dim: usize,
    /// `counts[class][domain]`
    pub counts: Vec<Vec<usize>>,
    /// `(class_id, domain_id)` for each sample id, in storage order.
    pub labels: Vec<(usize, usize)>,
    pub generator_seed: u64,
    pub generator: GeneratorConfig,
    pub split: Option<ProtocolSummary>,
}

impl DatasetManifest {
    pub const FORMAT_VERSION: u32 = 1;

    fn from_samples(config: &GeneratorConfig, samples: &[SampleRecord]) -> Self {
        let mut counts = vec![vec![0; config.num_domains]; config.num_classes];
        for s in samples {
            counts[s.class_id][s.domain_id] += 1;
        }
        Self {
            format_version: Self::FORMAT_VERSION,
            class_names: (0..config.num_classes).map(|c| format!("class_{c:02}")).collect(),
            domain_names: (0..config.num_domains).map(generator::domain_name).collect(),
            tokens: config.tokens,
            token_dim: config.token_dim,
            counts,
            labels: samples.iter().map(|s| (s.class_id, s.domain_id)).collect(),
            generator_seed: config.seed,
            generator: config.clone(),
            split: None,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn num_domains(&self) -> usize {
        self.domain_names.len()
    }

    pub fn record_split(&mut self, split: &SplitAssignment) {
        self.split = Some(ProtocolSummary {
            protocol: split.protocol,
            gallery_mode: split.gallery_mode,
            seen_classes: split.seen_classes.clone(),
            seen_domains: split.seen_domains.clone(),
            unseen_classes: split.unseen_classes.clone(),
            unseen_domains: split.unseen_domains.clone(),
        });
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub samples: Vec<SampleRecord>,
}

impl Dataset {
    pub fn get(&self, ids: &[usize]) -> Vec<&SampleRecord> {
        ids.iter().map(|&i| &self.samples[i]).collect()
    }
}
