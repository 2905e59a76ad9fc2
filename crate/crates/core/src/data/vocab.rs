use std::cmp::Ordering;
use std::collections::HashMap;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

use super::ItemIndex;

/// Bijection between retained external item ids and dense indices `1..=|V|`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Vocabulary {
    ids: Vec<String>,
    counts: Vec<u64>,
    index: HashMap<String, ItemIndex>,
}

/// `|V|` plus a content hash over the ordered external ids.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabularyDigest {
    pub size: usize,
    pub sha256: String,
}

/// Orders external ids numerically when both parse as integers, else lexically.
pub fn external_id_cmp(a: &str, b: &str) -> Ordering {
    match (a.parse::<i128>(), b.parse::<i128>()) {
        (Ok(x), Ok(y)) => x.cmp(&y).then_with(|| a.cmp(b)),
        _ => a.cmp(b),
    }
}

impl Vocabulary {
    /// Builds a vocabulary from `(external id, frequency)` pairs. Indices are
    /// assigned by descending frequency, ties broken by ascending external id.
    pub fn from_counts(mut entries: Vec<(String, u64)>) -> Self {
        entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| external_id_cmp(&a.0, &b.0)));
        let mut v = Vocabulary::default();
        for (id, count) in entries {
            v.push(id, count);
        }
        v
    }

    /// Builds a vocabulary keeping the given id order (index = position + 1).
    pub fn from_ordered(ids: Vec<String>, counts: Vec<u64>) -> Self {
        assert_eq!(ids.len(), counts.len());
        let mut v = Vocabulary::default();
        for (id, c) in ids.into_iter().zip(counts) {
            v.push(id, c);
        }
        v
    }

    fn push(&mut self, id: String, count: u64) {
        let idx = (self.ids.len() + 1) as ItemIndex;
        let prev = self.index.insert(id.clone(), idx);
        assert!(prev.is_none(), "duplicate external id {id}");
        self.ids.push(id);
        self.counts.push(count);
    }

    /// Number of real items `|V|` (padding excluded).
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn index_of(&self, external: &str) -> Option<ItemIndex> {
        self.index.get(external).copied()
    }

    pub fn external_id(&self, index: ItemIndex) -> Option<&str> {
        if index == 0 {
            return None;
        }
        self.ids.get(index as usize - 1).map(String::as_str)
    }

    pub fn frequency(&self, index: ItemIndex) -> Option<u64> {
        if index == 0 {
            return None;
        }
        self.counts.get(index as usize - 1).copied()
    }

    /// External ids in index order (position `i` holds index `i + 1`).
    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn digest(&self) -> VocabularyDigest {
        let mut h = Sha256::new();
        for id in &self.ids {
            h.update((id.len() as u64).to_le_bytes());
            h.update(id.as_bytes());
        }
        let sha256 = h.finalize().iter().map(|b| format!("{b:02x}")).collect();
        VocabularyDigest { size: self.ids.len(), sha256 }
    }
}

#[derive(Serialize, Deserialize)]
struct VocabularyRepr {
    ids: Vec<String>,
    counts: Vec<u64>,
}

impl Serialize for Vocabulary {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        VocabularyRepr { ids: self.ids.clone(), counts: self.counts.clone() }.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Vocabulary {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let repr = VocabularyRepr::deserialize(d)?;
        if repr.ids.len() != repr.counts.len() {
            return Err(serde::de::Error::custom("ids and counts differ in length"));
        }
        let mut seen = std::collections::HashSet::new();
        if !repr.ids.iter().all(|id| seen.insert(id.as_str())) {
            return Err(serde::de::Error::custom("duplicate external id"));
        }
        Ok(Vocabulary::from_ordered(repr.ids, repr.counts))
    }
}
