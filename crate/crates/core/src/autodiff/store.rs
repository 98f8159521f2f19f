//! Named parameter storage with trainability flags and content checksums.

use std::collections::BTreeMap;

use ndarray::ArrayD;
use sha2::{Digest, Sha256};

use crate::err::{Error, Result};
use crate::scalar::Scalar;

/// Handle to one parameter tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

struct Entry<S: Scalar> {
    name: String,
    value: ArrayD<S>,
    trainable: bool,
}

/// Ordered collection of named parameters.
///
/// Registration order is the canonical order for optimizers, checkpoints and
/// checksums, so training and serialization stay deterministic.
pub struct ParamStore<S: Scalar> {
    entries: Vec<Entry<S>>,
    by_name: BTreeMap<String, usize>,
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new(), by_name: BTreeMap::new() }
    }

    pub fn register(&mut self, name: impl Into<String>, value: ArrayD<S>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::invalid(format!("parameter '{name}' registered twice")));
        }
        let idx = self.entries.len();
        self.by_name.insert(name.clone(), idx);
        self.entries.push(Entry { name, value, trainable: true });
        Ok(ParamId(idx))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<S> {
        &self.entries[id.0].value
    }

    pub fn set_value(&mut self, id: ParamId, value: ArrayD<S>) -> Result<()> {
        let cur = &mut self.entries[id.0];
        if cur.value.shape() != value.shape() {
            return Err(Error::invalid(format!(
                "parameter '{}' has shape {:?}, refusing {:?}",
                cur.name,
                cur.value.shape(),
                value.shape()
            )));
        }
        cur.value = value;
        Ok(())
    }

    pub fn trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn set_trainable(&mut self, id: ParamId, flag: bool) {
        self.entries[id.0].trainable = flag;
    }

    /// Applies `decide` to every parameter name; `Some(flag)` updates the
    /// trainability, `None` leaves it alone. Returns how many changed.
    pub fn set_trainable_where(&mut self, decide: impl Fn(&str) -> Option<bool>) -> usize {
        let mut changed = 0;
        for e in &mut self.entries {
            if let Some(flag) = decide(&e.name) {
                if e.trainable != flag {
                    changed += 1;
                }
                e.trainable = flag;
            }
        }
        changed
    }

    pub fn set_trainable_prefix(&mut self, prefix: &str, flag: bool) -> usize {
        self.set_trainable_where(|n| n.starts_with(prefix).then_some(flag))
    }

    /// All ids in registration order.
    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn num_trainable_scalars(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.value.len()).sum()
    }

    /// SHA-256 over names, shapes and little-endian values of all parameters
    /// whose name starts with `prefix`, in registration order. Used to prove
    /// that frozen subsystems did not move between training stages.
    pub fn checksum_prefix(&self, prefix: &str) -> [u8; 32] {
        let mut hasher = Sha256::new();
        for e in &self.entries {
            if !e.name.starts_with(prefix) {
                continue;
            }
            hasher.update(e.name.as_bytes());
            hasher.update([0u8]);
            for d in e.value.shape() {
                hasher.update((*d as u64).to_le_bytes());
            }
            let mut buf = Vec::with_capacity(e.value.len() * S::BYTES);
            for v in e.value.iter() {
                v.write_le(&mut buf);
            }
            hasher.update(&buf);
        }
        hasher.finalize().into()
    }

    /// Name/value pairs in registration order, for serialization.
    pub fn export(&self) -> Vec<(String, ArrayD<S>)> {
        self.entries.iter().map(|e| (e.name.clone(), e.value.clone())).collect()
    }

    /// Overwrites values by name. With `strict`, every store entry must be
    /// present in `blobs` and vice versa.
    pub fn import(&mut self, blobs: &BTreeMap<String, ArrayD<S>>, strict: bool) -> Result<usize> {
        if strict {
            for name in blobs.keys() {
                if !self.by_name.contains_key(name) {
                    return Err(Error::format(format!("checkpoint has unknown parameter '{name}'")));
                }
            }
        }
        let mut loaded = 0;
        for i in 0..self.entries.len() {
            let name = self.entries[i].name.clone();
            match blobs.get(&name) {
                Some(v) => {
                    self.set_value(ParamId(i), v.clone())?;
                    loaded += 1;
                }
                None if strict => {
                    return Err(Error::format(format!("checkpoint misses parameter '{name}'")));
                }
                None => {}
            }
        }
        Ok(loaded)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    fn arr(vals: &[f32]) -> ArrayD<f32> {
        ArrayD::from_shape_vec(IxDyn(&[vals.len()]), vals.to_vec()).unwrap()
    }

    #[test]
    fn registration_and_lookup() {
        let mut ps = ParamStore::<f32>::new();
        let a = ps.register("enc.w", arr(&[1.0, 2.0])).unwrap();
        let b = ps.register("dec.w", arr(&[3.0])).unwrap();
        assert!(ps.register("enc.w", arr(&[0.0])).is_err());
        assert_eq!(ps.id("enc.w"), Some(a));
        assert_eq!(ps.name(b), "dec.w");
        assert_eq!(ps.num_scalars(), 3);
    }

    #[test]
    fn trainability_filters() {
        let mut ps = ParamStore::<f32>::new();
        ps.register("enc.w", arr(&[1.0])).unwrap();
        ps.register("enc.lora_a", arr(&[1.0, 1.0])).unwrap();
        ps.register("dec.w", arr(&[1.0])).unwrap();
        ps.set_trainable_prefix("enc.", false);
        assert_eq!(ps.num_trainable_scalars(), 1);
        ps.set_trainable_where(|n| n.contains("lora").then_some(true));
        assert_eq!(ps.num_trainable_scalars(), 3);
    }

    #[test]
    fn checksum_tracks_content_and_ignores_other_prefixes() {
        let mut ps = ParamStore::<f64>::new();
        let a = ps.register("frozen.w", ArrayD::from_elem(IxDyn(&[2, 2]), 0.5)).unwrap();
        let b = ps.register("live.w", ArrayD::from_elem(IxDyn(&[2]), 1.0)).unwrap();
        let before = ps.checksum_prefix("frozen.");
        ps.set_value(b, ArrayD::from_elem(IxDyn(&[2]), -1.0)).unwrap();
        assert_eq!(before, ps.checksum_prefix("frozen."));
        ps.set_value(a, ArrayD::from_elem(IxDyn(&[2, 2]), 0.25)).unwrap();
        assert_ne!(before, ps.checksum_prefix("frozen."));
    }

    #[test]
    fn export_import_roundtrip() {
        let mut ps = ParamStore::<f32>::new();
        ps.register("a", arr(&[1.0, 2.0])).unwrap();
        ps.register("b", arr(&[3.0])).unwrap();
        let blobs: BTreeMap<_, _> = ps.export().into_iter().collect();
        let mut other = ParamStore::<f32>::new();
        other.register("a", arr(&[0.0, 0.0])).unwrap();
        other.register("b", arr(&[0.0])).unwrap();
        assert_eq!(other.import(&blobs, true).unwrap(), 2);
        assert_eq!(other.value(other.id("a").unwrap()), ps.value(ps.id("a").unwrap()));
        let mut missing = ParamStore::<f32>::new();
        missing.register("a", arr(&[0.0, 0.0])).unwrap();
        missing.register("c", arr(&[0.0])).unwrap();
        assert!(missing.import(&blobs, true).is_err());
        assert_eq!(missing.import(&blobs, false).unwrap(), 1);
    }
}
