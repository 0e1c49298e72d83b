use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::DatasetManifest;
use crate::error::{Error, Result};

/// Gallery images always come from this domain.
pub const CANONICAL_DOMAIN: usize = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Protocol {
    /// Query class and query domain both unseen.
    #[serde(rename = "UCDR")]
    Ucdr,
    /// Query classes unseen, query domain seen.
    #[serde(rename = "UcCDR")]
    UcCdr,
    /// Query domain unseen, classes seen.
    #[serde(rename = "UdCDR")]
    UdCdr,
}

impl Protocol {
    pub fn holds_out_classes(self) -> bool {
        matches!(self, Protocol::Ucdr | Protocol::UcCdr)
    }

    pub fn holds_out_domain(self) -> bool {
        matches!(self, Protocol::Ucdr | Protocol::UdCdr)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GalleryMode {
    #[default]
    UnseenOnly,
    SeenPlusUnseen,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitTag {
    Train,
    ValidationQuery,
    ValidationGallery,
    TestQuery,
    TestGallery,
    /// Held-out canonical-domain images of seen classes, added to the
    /// gallery only in [`GalleryMode::SeenPlusUnseen`].
    TestGallerySeen,
    Unused,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitParams {
    pub protocol: Protocol,
    /// Query domain. Required for UCDR and UdCDR; optional for UcCDR,
    /// where it defaults to the last domain.
    pub holdout_domain: Option<usize>,
    pub holdout_class_fraction: f64,
    /// Share of every seen (class, domain) cell reserved for validation,
    /// and again for the seen-class gallery in the canonical domain.
    pub validation_fraction: f64,
    pub gallery_mode: GalleryMode,
    pub seed: u64,
}

impl Default for SplitParams {
    fn default() -> Self {
        Self {
            protocol: Protocol::Ucdr,
            holdout_domain: Some(4),
            holdout_class_fraction: 1.0 / 3.0,
            validation_fraction: 0.2,
            gallery_mode: GalleryMode::UnseenOnly,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub protocol: Protocol,
    pub gallery_mode: GalleryMode,
    pub query_domain: usize,
    pub canonical_domain: usize,
    pub seen_classes: Vec<usize>,
    pub unseen_classes: Vec<usize>,
    pub seen_domains: Vec<usize>,
    pub unseen_domains: Vec<usize>,
    pub tags: BTreeMap<usize, SplitTag>,
}

fn fraction_count(n: usize, f: f64) -> usize {
    ((n as f64) * f).round() as usize
}

pub fn make_splits(manifest: &DatasetManifest, params: &SplitParams) -> Result<SplitAssignment> {
    let (nc, nd) = (manifest.class_names.len(), manifest.domain_names.len());
    let f = params.holdout_class_fraction;
    if !(0.0..1.0).contains(&f) {
        return Err(Error::Config(format!("holdout_class_fraction {f} outside [0, 1)")));
    }
    if !(0.0..0.5).contains(&params.validation_fraction) {
        return Err(Error::Config(format!("validation_fraction {} outside [0, 0.5)", params.validation_fraction)));
    }
    let protocol = params.protocol;
    if protocol.holds_out_classes() && f <= 0.0 {
        return Err(Error::Config(format!("{protocol:?} requires holdout_class_fraction > 0")));
    }
    if protocol == Protocol::UdCdr && f > 0.0 {
        return Err(Error::Config("UdCDR keeps every class seen; holdout_class_fraction must be 0".into()));
    }
    let query_domain = match (protocol, params.holdout_domain) {
        (Protocol::UcCdr, None) => nd - 1,
        (_, Some(d)) => d,
        (_, None) => return Err(Error::Config(format!("{protocol:?} requires holdout_domain"))),
    };
    if query_domain >= nd {
        return Err(Error::Config(format!("holdout_domain {query_domain} out of range for {nd} domains")));
    }
    if query_domain == CANONICAL_DOMAIN {
        return Err(Error::Infeasible(format!(
            "query domain {query_domain} is the canonical gallery domain; queries and gallery must differ in domain"
        )));
    }

    let mut unseen_classes = Vec::new();
    if protocol.holds_out_classes() {
        let k = fraction_count(nc, f);
        if k == 0 || k >= nc {
            return Err(Error::Infeasible(format!(
                "holdout_class_fraction {f} leaves {k} unseen of {nc} classes; need at least one seen and one unseen class"
            )));
        }
        let mut order: Vec<usize> = (0..nc).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(params.seed));
        unseen_classes = order[..k].to_vec();
        unseen_classes.sort_unstable();
    }
    let seen_classes: Vec<usize> = (0..nc).filter(|c| !unseen_classes.contains(c)).collect();
    let unseen_domains: Vec<usize> = if protocol.holds_out_domain() { vec![query_domain] } else { vec![] };
    let seen_domains: Vec<usize> = (0..nd).filter(|d| !unseen_domains.contains(d)).collect();

    let mut tags = BTreeMap::new();
    let mut cell_pos: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for (id, &(c, d)) in manifest.labels.iter().enumerate() {
        let pos = cell_pos.entry((c, d)).or_insert(0);
        let i = *pos;
        *pos += 1;
        let cell_n = manifest.counts[c][d];
        let n_val = fraction_count(cell_n, params.validation_fraction);
        let class_seen = !unseen_classes.contains(&c);
        let domain_seen = !unseen_domains.contains(&d);
        let tag = if !class_seen {
            if d == query_domain {
                SplitTag::TestQuery
            } else if d == CANONICAL_DOMAIN {
                SplitTag::TestGallery
            } else {
                SplitTag::Unused
            }
        } else if !domain_seen {
            // UdCDR queries come from the held-out domain for every class;
            // under UCDR seen classes in that domain play no role.
            if protocol == Protocol::UdCdr {
                SplitTag::TestQuery
            } else {
                SplitTag::Unused
            }
        } else if i < n_val {
            if d == CANONICAL_DOMAIN {
                SplitTag::ValidationGallery
            } else {
                SplitTag::ValidationQuery
            }
        } else if d == CANONICAL_DOMAIN && i < 2 * n_val {
            if protocol == Protocol::UdCdr {
                SplitTag::TestGallery
            } else {
                SplitTag::TestGallerySeen
            }
        } else {
            SplitTag::Train
        };
        tags.insert(id, tag);
    }

    let split = SplitAssignment {
        protocol,
        gallery_mode: params.gallery_mode,
        query_domain,
        canonical_domain: CANONICAL_DOMAIN,
        seen_classes,
        unseen_classes,
        seen_domains,
        unseen_domains,
        tags,
    };
    split.validate(manifest)?;
    Ok(split)
}

impl SplitAssignment {
    pub fn ids_with(&self, tag: SplitTag) -> Vec<usize> {
        self.tags.iter().filter(|(_, &t)| t == tag).map(|(&id, _)| id).collect()
    }

    pub fn train_ids(&self) -> Vec<usize> {
        self.ids_with(SplitTag::Train)
    }

    pub fn test_query_ids(&self) -> Vec<usize> {
        self.ids_with(SplitTag::TestQuery)
    }

    pub fn test_gallery_ids(&self, mode: GalleryMode) -> Vec<usize> {
        self.tags
            .iter()
            .filter(|(_, &t)| {
                t == SplitTag::TestGallery || (mode == GalleryMode::SeenPlusUnseen && t == SplitTag::TestGallerySeen)
            })
            .map(|(&id, _)| id)
            .collect()
    }

    pub fn validation_ids(&self) -> (Vec<usize>, Vec<usize>) {
        (self.ids_with(SplitTag::ValidationQuery), self.ids_with(SplitTag::ValidationGallery))
    }

    /// Position of a global class index within the seen-class list.
    pub fn seen_class_index(&self, class_id: usize) -> Option<usize> {
        self.seen_classes.iter().position(|&c| c == class_id)
    }

    pub fn seen_domain_index(&self, domain_id: usize) -> Option<usize> {
        self.seen_domains.iter().position(|&d| d == domain_id)
    }

    /// Checks the protocol's set relations and that every working split is
    /// non-empty.
    pub fn validate(&self, manifest: &DatasetManifest) -> Result<()> {
        let disjoint = |a: &[usize], b: &[usize]| a.iter().all(|x| !b.contains(x));
        match self.protocol {
            Protocol::Ucdr => {
                if !disjoint(&self.seen_classes, &self.unseen_classes) || !disjoint(&self.seen_domains, &self.unseen_domains) {
                    return Err(Error::Infeasible("UCDR requires disjoint class and domain sets".into()));
                }
            }
            Protocol::UdCdr => {
                if !self.unseen_classes.is_empty() || !disjoint(&self.seen_domains, &self.unseen_domains) {
                    return Err(Error::Infeasible("UdCDR requires equal class sets and disjoint domains".into()));
                }
            }
            Protocol::UcCdr => {
                if !disjoint(&self.seen_classes, &self.unseen_classes) || !self.seen_domains.contains(&self.query_domain) {
                    return Err(Error::Infeasible("UcCDR requires disjoint classes and a seen query domain".into()));
                }
            }
        }
        if self.tags.len() != manifest.labels.len() {
            return Err(Error::Format(format!(
                "split covers {} samples, dataset has {}",
                self.tags.len(),
                manifest.labels.len()
            )));
        }
        let required = [
            (SplitTag::Train, "train"),
            (SplitTag::ValidationQuery, "validation-query"),
            (SplitTag::ValidationGallery, "validation-gallery"),
            (SplitTag::TestQuery, "test-query"),
        ];
        for (tag, name) in required {
            if !self.tags.values().any(|&t| t == tag) {
                return Err(Error::Infeasible(format!("{:?}: the {name} split is empty", self.protocol)));
            }
        }
        if self.test_gallery_ids(self.gallery_mode).is_empty() {
            return Err(Error::Infeasible(format!("{:?}: the test-gallery split is empty", self.protocol)));
        }
        for (&id, &tag) in &self.tags {
            let (c, d) = manifest.labels[id];
            if tag == SplitTag::Train && (self.unseen_classes.contains(&c) || self.unseen_domains.contains(&d)) {
                return Err(Error::Infeasible(format!("sample {id} trains on an unseen label")));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, GeneratorConfig};
    use std::collections::BTreeSet;

    fn manifest() -> DatasetManifest {
        generate_dataset(&GeneratorConfig { tokens: 2, token_dim: 4, ..Default::default() }).unwrap().manifest
    }

    fn labels_of(m: &DatasetManifest, ids: &[usize]) -> (BTreeSet<usize>, BTreeSet<usize>) {
        (ids.iter().map(|&i| m.labels[i].0).collect(), ids.iter().map(|&i| m.labels[i].1).collect())
    }

    #[test]
    fn ucdr_trains_on_eight_classes_and_four_domains() {
        let m = manifest();
        let s = make_splits(&m, &SplitParams::default()).unwrap();
        let (cls, dom) = labels_of(&m, &s.train_ids());
        assert_eq!(cls.len(), 8);
        assert_eq!(dom, BTreeSet::from([0, 1, 2, 3]));
        assert!(cls.iter().all(|c| !s.unseen_classes.contains(c)));
        let (qc, qd) = labels_of(&m, &s.test_query_ids());
        assert_eq!(qd, BTreeSet::from([4]));
        assert!(qc.iter().all(|c| s.unseen_classes.contains(c)));
    }

    #[test]
    fn udcdr_queries_seen_classes_in_novel_domain() {
        let m = manifest();
        let p = SplitParams { protocol: Protocol::UdCdr, holdout_class_fraction: 0.0, ..Default::default() };
        let s = make_splits(&m, &p).unwrap();
        let (train_c, train_d) = labels_of(&m, &s.train_ids());
        let (qc, qd) = labels_of(&m, &s.test_query_ids());
        assert!(qc.is_subset(&train_c));
        assert!(qd.is_disjoint(&train_d));
    }

    #[test]
    fn uccdr_queries_novel_classes_in_seen_domain() {
        let m = manifest();
        let p = SplitParams { protocol: Protocol::UcCdr, holdout_domain: None, ..Default::default() };
        let s = make_splits(&m, &p).unwrap();
        let (train_c, train_d) = labels_of(&m, &s.train_ids());
        let (qc, qd) = labels_of(&m, &s.test_query_ids());
        assert!(qc.is_disjoint(&train_c));
        assert!(qd.is_subset(&train_d));
    }

    #[test]
    fn seen_plus_unseen_gallery_covers_all_classes_in_canonical_domain() {
        let m = manifest();
        let p = SplitParams { gallery_mode: GalleryMode::SeenPlusUnseen, ..Default::default() };
        let s = make_splits(&m, &p).unwrap();
        let (gc, gd) = labels_of(&m, &s.test_gallery_ids(GalleryMode::SeenPlusUnseen));
        assert_eq!(gd, BTreeSet::from([CANONICAL_DOMAIN]));
        assert_eq!(gc, (0..12).collect());
        let (uc, _) = labels_of(&m, &s.test_gallery_ids(GalleryMode::UnseenOnly));
        assert_eq!(uc, s.unseen_classes.iter().copied().collect());
    }

    #[test]
    fn protocol_argument_errors() {
        let m = manifest();
        let no_domain = SplitParams { holdout_domain: None, ..Default::default() };
        assert_eq!(make_splits(&m, &no_domain).unwrap_err().category(), "config");
        let no_fraction = SplitParams { holdout_class_fraction: 0.0, ..Default::default() };
        assert_eq!(make_splits(&m, &no_fraction).unwrap_err().category(), "config");
        let canonical = SplitParams { holdout_domain: Some(0), ..Default::default() };
        assert_eq!(make_splits(&m, &canonical).unwrap_err().category(), "infeasible");
        let no_val = SplitParams { validation_fraction: 0.0, ..Default::default() };
        let err = make_splits(&m, &no_val).unwrap_err();
        assert!(err.to_string().contains("validation"), "{err}");
    }

    #[test]
    fn disjointness_matches_protocol_for_many_seeds() {
        let m = manifest();
        for seed in 0..10 {
            for (protocol, holdout, frac) in [
                (Protocol::Ucdr, Some(4), 0.25),
                (Protocol::UcCdr, Some(2), 0.5),
                (Protocol::UdCdr, Some(3), 0.0),
            ] {
                let p = SplitParams { protocol, holdout_domain: holdout, holdout_class_fraction: frac, seed, ..Default::default() };
                let s = make_splits(&m, &p).unwrap();
                let (tc, td) = labels_of(&m, &s.train_ids());
                let (qc, qd) = labels_of(&m, &s.test_query_ids());
                assert_eq!(tc.is_disjoint(&qc), protocol.holds_out_classes(), "{protocol:?} seed {seed}");
                assert_eq!(td.is_disjoint(&qd), protocol.holds_out_domain(), "{protocol:?} seed {seed}");
            }
        }
    }
}
