use rustc_hash::FxHashMap;

use crate::error::{Error, Result};

/// Insertion-ordered bijection between opaque hash strings and dense ids
/// `0..len`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IdDictionary {
    keys: Vec<Box<str>>,
    index: FxHashMap<Box<str>, u32>,
}

impl IdDictionary {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns the id for `hash`, assigning the next unused id on first sight.
    pub fn intern(&mut self, hash: &str) -> Result<u32> {
        if hash.is_empty() {
            return Err(Error::MalformedRow("empty identifier".into()));
        }
        if let Some(&id) = self.index.get(hash) {
            return Ok(id);
        }
        let id = u32::try_from(self.keys.len()).map_err(|_| Error::Consistency("more than 2^32 identifiers".into()))?;
        let key: Box<str> = hash.into();
        self.keys.push(key.clone());
        self.index.insert(key, id);
        Ok(id)
    }

    pub fn get(&self, hash: &str) -> Option<u32> {
        self.index.get(hash).copied()
    }

    pub fn key(&self, id: u32) -> Option<&str> {
        self.keys.get(id as usize).map(|k| &**k)
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    /// Hashes in id order.
    pub fn keys(&self) -> impl ExactSizeIterator<Item = &str> {
        self.keys.iter().map(|k| &**k)
    }

    /// Rebuilds a dictionary from hashes listed in id order.
    pub fn from_keys<I, S>(keys: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut dict = Self::new();
        for (expected, key) in keys.into_iter().enumerate() {
            let id = dict.intern(key.as_ref())?;
            if id as usize != expected {
                return Err(Error::Format(format!("duplicate dictionary key {:?}", key.as_ref())));
            }
        }
        Ok(dict)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn first_seen_gets_next_id() {
        let mut d = IdDictionary::new();
        assert_eq!(d.intern("ab3f91").unwrap(), 0);
        assert_eq!(d.intern("ab3f91").unwrap(), 0);
        assert_eq!(d.intern("9c2e07").unwrap(), 1);
        assert_eq!(d.key(1), Some("9c2e07"));
        assert_eq!(d.len(), 2);
    }

    #[test]
    fn empty_hash_is_malformed() {
        assert!(matches!(IdDictionary::new().intern(""), Err(Error::MalformedRow(_))));
    }

    #[test]
    fn from_keys_rejects_duplicates() {
        assert!(IdDictionary::from_keys(["a", "b", "a"]).is_err());
        let d = IdDictionary::from_keys(["a", "b"]).unwrap();
        assert_eq!(d.get("b"), Some(1));
    }

    proptest! {
        #[test]
        fn interning_is_injective_and_dense(keys in prop::collection::vec("[a-f0-9]{1,6}", 0..200)) {
            let mut d = IdDictionary::new();
            let ids: Vec<u32> = keys.iter().map(|k| d.intern(k).unwrap()).collect();
            for (k, id) in keys.iter().zip(&ids) {
                prop_assert_eq!(d.key(*id), Some(k.as_str()));
            }
            let mut distinct: Vec<&String> = keys.iter().collect();
            distinct.sort();
            distinct.dedup();
            prop_assert_eq!(d.len(), distinct.len());
            prop_assert!(ids.iter().all(|&id| (id as usize) < d.len()));
        }
    }
}
