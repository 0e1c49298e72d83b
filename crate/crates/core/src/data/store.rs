use std::fs;
use std::path::Path;

use super::{Dataset, DatasetManifest, SampleRecord, SplitAssignment};
use crate::error::{Error, Result};
use crate::numerics::io::{read_tensor, write_tensor, ByteReader};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const SAMPLES_FILE: &str = "samples.bin";
pub const SPLITS_FILE: &str = "splits.json";

pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = serde_json::to_vec_pretty(&dataset.manifest)?;
    manifest.push(b'\n');
    fs::write(dir.join(MANIFEST_FILE), manifest)?;
    let mut bin = Vec::new();
    for s in &dataset.samples {
        write_tensor(&mut bin, &s.tokens);
    }
    fs::write(dir.join(SAMPLES_FILE), bin)?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest: DatasetManifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST_FILE))?)?;
    if manifest.format_version != DatasetManifest::FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported dataset format version {}", manifest.format_version)));
    }
    let bytes = fs::read(dir.join(SAMPLES_FILE))?;
    let mut r = ByteReader::new(&bytes);
    let mut samples = Vec::with_capacity(manifest.labels.len());
    for (id, &(class_id, domain_id)) in manifest.labels.iter().enumerate() {
        let tokens = read_tensor(&mut r)?;
        if tokens.shape() != [manifest.tokens, manifest.token_dim] {
            return Err(Error::Format(format!(
                "sample {id} has shape {:?}, manifest declares [{}, {}]",
                tokens.shape(),
                manifest.tokens,
                manifest.token_dim
            )));
        }
        if class_id >= manifest.num_classes() || domain_id >= manifest.num_domains() {
            return Err(Error::Format(format!("sample {id} has out-of-range labels ({class_id}, {domain_id})")));
        }
        samples.push(SampleRecord { id, tokens, class_id, domain_id });
    }
    if !r.is_at_end() {
        return Err(Error::Format(format!("{} trailing bytes after the last sample", bytes.len() - r.position())));
    }
    Ok(Dataset { manifest, samples })
}

pub fn save_splits(split: &SplitAssignment, path: &Path) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(split)?;
    bytes.push(b'\n');
    fs::write(path, bytes)?;
    Ok(())
}

pub fn load_splits(path: &Path) -> Result<SplitAssignment> {
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}
