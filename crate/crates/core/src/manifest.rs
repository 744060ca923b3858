//! Dataset manifests: labeled real/fake samples with identity provenance.
//!
//! On disk a manifest is line-delimited UTF-8, one record per line with the
//! comma-separated fields `path,identity,is_fake,source_id,target_id,
//! quality_tag,split` (absent fields empty, booleans as 0/1). A leading
//! `#identity_set,...` directive pins the identity ordering; lines starting
//! with `#` are otherwise ignored.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::identity::{IdentityError, IdentitySet};

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: expected 7 comma-separated fields, got {got}")]
    FieldCount { line: usize, got: usize },
    #[error("line {line}: {reason}")]
    InvalidRecord { line: usize, reason: String },
    #[error(transparent)]
    Identity(#[from] IdentityError),
    #[error("record `{path}` references identity `{identity}` missing from the identity set")]
    UnknownIdentity { path: String, identity: String },
    #[error("train split contains fake record `{0}`")]
    FakeInTrainSplit(String),
    #[error("identity `{identity}` has {available} real records, {required} required")]
    InsufficientSamples { identity: String, available: usize, required: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// One labeled sample. Real records carry `identity` and no source/target;
/// fake records carry both `source_id` and `target_id`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleRecord {
    /// Content locator, relative to a content root supplied at load time.
    pub image_ref: String,
    pub identity: Option<String>,
    pub is_fake: bool,
    pub source_id: Option<String>,
    pub target_id: Option<String>,
    pub quality_tag: String,
    pub split: Split,
}

impl SampleRecord {
    pub fn real(image_ref: impl Into<String>, identity: impl Into<String>, split: Split) -> Self {
        Self {
            image_ref: image_ref.into(),
            identity: Some(identity.into()),
            is_fake: false,
            source_id: None,
            target_id: None,
            quality_tag: String::new(),
            split,
        }
    }

    pub fn fake(
        image_ref: impl Into<String>,
        source_id: impl Into<String>,
        target_id: impl Into<String>,
    ) -> Self {
        Self {
            image_ref: image_ref.into(),
            identity: None,
            is_fake: true,
            source_id: Some(source_id.into()),
            target_id: Some(target_id.into()),
            quality_tag: String::new(),
            split: Split::Test,
        }
    }

    fn validate(&self, line: usize) -> Result<(), ManifestError> {
        let fail = |reason: &str| {
            Err(ManifestError::InvalidRecord { line, reason: format!("{}: {reason}", self.image_ref) })
        };
        for field in [&self.image_ref, &self.quality_tag]
            .into_iter()
            .chain(self.identity.iter())
            .chain(self.source_id.iter())
            .chain(self.target_id.iter())
        {
            if field.contains(',') || field.contains('\n') {
                return fail("field contains a reserved character");
            }
        }
        if self.image_ref.is_empty() {
            return fail("empty image_ref");
        }
        if self.is_fake {
            if self.source_id.is_none() || self.target_id.is_none() {
                return fail("fake record must carry source_id and target_id");
            }
        } else {
            if self.identity.is_none() {
                return fail("real record must carry an identity");
            }
            if self.source_id.is_some() || self.target_id.is_some() {
                return fail("real record must not carry source/target ids");
            }
        }
        Ok(())
    }

    fn to_line(&self) -> String {
        let mut s = String::new();
        let empty = String::new();
        let _ = write!(
            s,
            "{},{},{},{},{},{},{}",
            self.image_ref,
            self.identity.as_ref().unwrap_or(&empty),
            u8::from(self.is_fake),
            self.source_id.as_ref().unwrap_or(&empty),
            self.target_id.as_ref().unwrap_or(&empty),
            self.quality_tag,
            self.split.as_str(),
        );
        s
    }

    fn from_line(line: &str, line_no: usize) -> Result<Self, ManifestError> {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 {
            return Err(ManifestError::FieldCount { line: line_no, got: fields.len() });
        }
        let opt = |s: &str| if s.is_empty() { None } else { Some(s.to_string()) };
        let is_fake = match fields[2] {
            "0" => false,
            "1" => true,
            other => {
                return Err(ManifestError::InvalidRecord {
                    line: line_no,
                    reason: format!("is_fake must be 0 or 1, got `{other}`"),
                })
            }
        };
        let split = match fields[6] {
            "train" => Split::Train,
            "test" => Split::Test,
            other => {
                return Err(ManifestError::InvalidRecord {
                    line: line_no,
                    reason: format!("split must be train or test, got `{other}`"),
                })
            }
        };
        let record = SampleRecord {
            image_ref: fields[0].to_string(),
            identity: opt(fields[1]),
            is_fake,
            source_id: opt(fields[3]),
            target_id: opt(fields[4]),
            quality_tag: fields[5].to_string(),
            split,
        };
        record.validate(line_no)?;
        Ok(record)
    }
}

/// A validated collection of records plus the identity set they reference.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    records: Vec<SampleRecord>,
    identity_set: IdentitySet,
}

impl DatasetManifest {
    pub fn new(records: Vec<SampleRecord>, identity_set: IdentitySet) -> Result<Self, ManifestError> {
        for (i, record) in records.iter().enumerate() {
            record.validate(i + 1)?;
            for id in record
                .identity
                .iter()
                .chain(record.source_id.iter())
                .chain(record.target_id.iter())
            {
                if !identity_set.contains(id) {
                    return Err(ManifestError::UnknownIdentity {
                        path: record.image_ref.clone(),
                        identity: id.clone(),
                    });
                }
            }
            if record.split == Split::Train && record.is_fake {
                return Err(ManifestError::FakeInTrainSplit(record.image_ref.clone()));
            }
        }
        Ok(Self { records, identity_set })
    }

    pub fn records(&self) -> &[SampleRecord] {
        &self.records
    }

    pub fn identity_set(&self) -> &IdentitySet {
        &self.identity_set
    }

    pub fn train_records(&self) -> impl Iterator<Item = &SampleRecord> {
        self.records.iter().filter(|r| r.split == Split::Train)
    }

    pub fn test_records(&self) -> impl Iterator<Item = &SampleRecord> {
        self.records.iter().filter(|r| r.split == Split::Test)
    }

    pub fn serialize(&self) -> String {
        let mut out = String::new();
        out.push_str("#identity_set");
        for label in self.identity_set.labels() {
            out.push(',');
            out.push_str(label);
        }
        out.push('\n');
        for record in &self.records {
            out.push_str(&record.to_line());
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, ManifestError> {
        let mut records = Vec::new();
        let mut identity_set: Option<IdentitySet> = None;
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                if let Some(ids) = rest.strip_prefix("identity_set,") {
                    identity_set = Some(IdentitySet::new(ids.split(','))?);
                }
                continue;
            }
            records.push(SampleRecord::from_line(line, line_no)?);
        }
        let identity_set = match identity_set {
            Some(set) => set,
            None => Self::derive_identity_set(&records)?,
        };
        Self::new(records, identity_set)
    }

    /// Identity order of first reference when no directive is present.
    fn derive_identity_set(records: &[SampleRecord]) -> Result<IdentitySet, ManifestError> {
        let mut labels: Vec<String> = Vec::new();
        for record in records {
            for id in record
                .identity
                .iter()
                .chain(record.source_id.iter())
                .chain(record.target_id.iter())
            {
                if !labels.iter().any(|l| l == id) {
                    labels.push(id.clone());
                }
            }
        }
        Ok(IdentitySet::new(labels)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), ManifestError> {
        std::fs::write(path, self.serialize())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ManifestError> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    /// Re-partitions the real records: exactly `per_identity` reals per
    /// identity go to the train split (chosen deterministically from `seed`),
    /// every other record to test. Selected train records never reappear in
    /// the returned test split.
    pub fn sample_training_set(&self, per_identity: usize, seed: u64) -> Result<DatasetManifest, ManifestError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut chosen: Vec<bool> = vec![false; self.records.len()];
        for identity in self.identity_set.labels() {
            let indices: Vec<usize> = self
                .records
                .iter()
                .enumerate()
                .filter(|(_, r)| !r.is_fake && r.identity.as_deref() == Some(identity))
                .map(|(i, _)| i)
                .collect();
            if indices.len() < per_identity {
                return Err(ManifestError::InsufficientSamples {
                    identity: identity.clone(),
                    available: indices.len(),
                    required: per_identity,
                });
            }
            let mut shuffled = indices;
            shuffled.shuffle(&mut rng);
            for &i in shuffled.iter().take(per_identity) {
                chosen[i] = true;
            }
        }
        let records = self
            .records
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let mut r = r.clone();
                r.split = if chosen[i] { Split::Train } else { Split::Test };
                r
            })
            .collect();
        DatasetManifest::new(records, self.identity_set.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_manifest(reals_per_id: usize) -> DatasetManifest {
        let ids = IdentitySet::new(["ida", "idb"]).unwrap();
        let mut records = Vec::new();
        for id in ["ida", "idb"] {
            for k in 0..reals_per_id {
                records.push(SampleRecord::real(format!("{id}_{k}.png"), id, Split::Test));
            }
        }
        records.push(SampleRecord::fake("fake_0.png", "ida", "idb"));
        DatasetManifest::new(records, ids).unwrap()
    }

    #[test]
    fn sampling_counts_and_disjointness() {
        let manifest = toy_manifest(12);
        let sampled = manifest.sample_training_set(10, 7).unwrap();
        assert_eq!(sampled.train_records().count(), 20);
        let test_reals = sampled.test_records().filter(|r| !r.is_fake).count();
        assert_eq!(test_reals, 4);
        // fakes stay in test
        assert_eq!(sampled.test_records().filter(|r| r.is_fake).count(), 1);
        // disjoint by construction: every record has exactly one split
        let train_refs: Vec<_> = sampled.train_records().map(|r| &r.image_ref).collect();
        for r in sampled.test_records() {
            assert!(!train_refs.contains(&&r.image_ref));
        }
    }

    #[test]
    fn sampling_zero_per_identity_keeps_test() {
        let manifest = toy_manifest(3);
        let sampled = manifest.sample_training_set(0, 1).unwrap();
        assert_eq!(sampled.train_records().count(), 0);
        assert_eq!(sampled.test_records().count(), manifest.records().len());
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let manifest = toy_manifest(12);
        let a = manifest.sample_training_set(10, 42).unwrap();
        let b = manifest.sample_training_set(10, 42).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn distinct_seeds_vary_selection() {
        let manifest = toy_manifest(12);
        let baseline = manifest.sample_training_set(10, 0).unwrap();
        let any_differs = (1..100).any(|seed| manifest.sample_training_set(10, seed).unwrap() != baseline);
        assert!(any_differs, "100 seeds produced identical selections");
    }

    #[test]
    fn insufficient_samples_names_identity() {
        let manifest = toy_manifest(4);
        match manifest.sample_training_set(10, 0) {
            Err(ManifestError::InsufficientSamples { identity, available, required }) => {
                assert_eq!(identity, "ida");
                assert_eq!((available, required), (4, 10));
            }
            other => panic!("expected InsufficientSamples, got {other:?}"),
        }
    }

    #[test]
    fn train_split_rejects_fakes() {
        let ids = IdentitySet::new(["ida", "idb"]).unwrap();
        let mut fake = SampleRecord::fake("f.png", "ida", "idb");
        fake.split = Split::Train;
        assert!(matches!(
            DatasetManifest::new(vec![fake], ids),
            Err(ManifestError::FakeInTrainSplit(_))
        ));
    }

    #[test]
    fn parse_serialize_idempotent() {
        let manifest = toy_manifest(3);
        let once = manifest.serialize();
        let reparsed = DatasetManifest::parse(&once).unwrap();
        assert_eq!(reparsed.serialize(), once);
        assert_eq!(reparsed, manifest);
    }
}
