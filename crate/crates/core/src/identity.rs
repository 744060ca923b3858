//! The closed set of identities a detector protects.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IdentityError {
    #[error("duplicate identity label `{0}`")]
    DuplicateLabel(String),
    #[error("identity set must contain at least one label")]
    Empty,
    #[error("identity label `{0}` contains a reserved character (comma, newline or leading '#')")]
    InvalidLabel(String),
}

/// Ordered set of K distinct identity labels. The index↔label mapping is a
/// bijection and survives serialization unchanged.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct IdentitySet {
    labels: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl IdentitySet {
    pub fn new<I, S>(labels: I) -> Result<Self, IdentityError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let labels: Vec<String> = labels.into_iter().map(Into::into).collect();
        if labels.is_empty() {
            return Err(IdentityError::Empty);
        }
        let mut index = HashMap::with_capacity(labels.len());
        for (i, label) in labels.iter().enumerate() {
            if label.is_empty() || label.contains(',') || label.contains('\n') || label.starts_with('#') {
                return Err(IdentityError::InvalidLabel(label.clone()));
            }
            if index.insert(label.clone(), i).is_some() {
                return Err(IdentityError::DuplicateLabel(label.clone()));
            }
        }
        Ok(Self { labels, index })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn label(&self, index: usize) -> Option<&str> {
        self.labels.get(index).map(String::as_str)
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.index.get(label).copied()
    }

    pub fn contains(&self, label: &str) -> bool {
        self.index.contains_key(label)
    }

    /// Splits the set into `groups` contiguous disjoint subsets that together
    /// cover every label. Used by the subset-split detector.
    pub fn partition(&self, groups: usize) -> Vec<IdentitySet> {
        assert!(groups >= 1 && groups <= self.len(), "invalid group count");
        let per = self.len().div_ceil(groups);
        self.labels
            .chunks(per)
            .map(|chunk| IdentitySet::new(chunk.iter().cloned()).expect("subset of valid set"))
            .collect()
    }
}

impl TryFrom<Vec<String>> for IdentitySet {
    type Error = IdentityError;
    fn try_from(labels: Vec<String>) -> Result<Self, Self::Error> {
        IdentitySet::new(labels)
    }
}

impl From<IdentitySet> for Vec<String> {
    fn from(set: IdentitySet) -> Self {
        set.labels
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bijection_is_stable() {
        let set = IdentitySet::new(["b", "a", "c"]).unwrap();
        assert_eq!(set.index_of("a"), Some(1));
        assert_eq!(set.label(1), Some("a"));
        for i in 0..set.len() {
            assert_eq!(set.index_of(set.label(i).unwrap()), Some(i));
        }
    }

    #[test]
    fn rejects_duplicates_and_empty() {
        assert!(matches!(
            IdentitySet::new(["a", "a"]),
            Err(IdentityError::DuplicateLabel(_))
        ));
        assert!(matches!(IdentitySet::new(Vec::<String>::new()), Err(IdentityError::Empty)));
    }

    #[test]
    fn partition_covers_all_labels_disjointly() {
        let set = IdentitySet::new((0..10).map(|i| format!("id{i}"))).unwrap();
        let parts = set.partition(2);
        assert_eq!(parts.len(), 2);
        let total: usize = parts.iter().map(IdentitySet::len).sum();
        assert_eq!(total, 10);
        for label in set.labels() {
            assert_eq!(parts.iter().filter(|p| p.contains(label)).count(), 1);
        }
    }
}
