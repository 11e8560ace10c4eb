use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use crate::error::{config_err, FameError, Result};
use crate::ften;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum AttnKind {
    SelfAttn,
    Cross,
}

impl AttnKind {
    pub fn prefix(self) -> &'static str {
        match self {
            AttnKind::SelfAttn => "self",
            AttnKind::Cross => "cross",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CacheKey {
    pub timestep: usize,
    pub layer: usize,
    pub frame: usize,
    pub kind: AttnKind,
}

impl CacheKey {
    pub fn new(timestep: usize, layer: usize, frame: usize, kind: AttnKind) -> Self {
        Self {
            timestep,
            layer,
            frame,
            kind,
        }
    }

    pub fn file_name(&self) -> String {
        format!(
            "{}_t{}_l{}_f{}.ften",
            self.kind.prefix(),
            self.timestep,
            self.layer,
            self.frame
        )
    }

    fn parse_file_name(name: &str) -> Option<Self> {
        let stem = name.strip_suffix(".ften")?;
        let (kind, rest) = if let Some(r) = stem.strip_prefix("self_t") {
            (AttnKind::SelfAttn, r)
        } else {
            (AttnKind::Cross, stem.strip_prefix("cross_t")?)
        };
        let (t, rest) = rest.split_once("_l")?;
        let (l, f) = rest.split_once("_f")?;
        Some(Self::new(t.parse().ok()?, l.parse().ok()?, f.parse().ok()?, kind))
    }
}

impl fmt::Display for CacheKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} t={} layer={} frame={}",
            self.kind.prefix(),
            self.timestep,
            self.layer,
            self.frame
        )
    }
}

/// Raw pre-modulation logits `Q Kᵀ` and the row-stochastic attention map
/// that was actually applied.
#[derive(Debug, Clone, PartialEq)]
pub struct CacheRecord {
    pub raw: Tensor,
    pub map: Tensor,
}

/// Append-only attention store ordered by (timestep, layer, frame, kind).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AttentionCache {
    records: BTreeMap<CacheKey, CacheRecord>,
}

impl AttentionCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, key: CacheKey, record: CacheRecord) -> Result<()> {
        if record.raw.shape() != record.map.shape() {
            return Err(config_err!("cache record {key}: raw and map shapes differ"));
        }
        if self.records.contains_key(&key) {
            return Err(config_err!("cache slot {key} already filled"));
        }
        self.records.insert(key, record);
        Ok(())
    }

    pub fn get(&self, key: &CacheKey) -> Option<&CacheRecord> {
        self.records.get(key)
    }

    pub fn require(&self, key: &CacheKey) -> Result<&CacheRecord> {
        self.get(key)
            .ok_or_else(|| config_err!("attention cache has no record for {key}"))
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&CacheKey, &CacheRecord)> {
        self.records.iter()
    }

    pub fn keys(&self) -> impl Iterator<Item = &CacheKey> {
        self.records.keys()
    }

    pub(crate) fn extend(&mut self, other: AttentionCache) -> Result<()> {
        for (k, r) in other.records {
            self.insert(k, r)?;
        }
        Ok(())
    }

    /// One FTEN file per map, named by [`CacheKey::file_name`], plus a
    /// `raw/` subdirectory holding the logits under the same names.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join("raw"))?;
        for (k, r) in &self.records {
            ften::write(dir.join(k.file_name()), &r.map)?;
            ften::write(dir.join("raw").join(k.file_name()), &r.raw)?;
        }
        Ok(())
    }

    pub fn read_dir(dir: &Path) -> Result<Self> {
        let mut cache = Self::new();
        let mut names: Vec<String> = fs::read_dir(dir)?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().is_file())
            .filter_map(|e| e.file_name().into_string().ok())
            .collect();
        names.sort();
        for name in names {
            let Some(key) = CacheKey::parse_file_name(&name) else {
                continue;
            };
            let map = ften::read(dir.join(&name))?;
            let raw_path = dir.join("raw").join(&name);
            let raw = ften::read(&raw_path).map_err(|e| match e {
                FameError::Io(io) => FameError::Io(std::io::Error::new(
                    io.kind(),
                    format!("{}: {io}", raw_path.display()),
                )),
                other => other,
            })?;
            cache.insert(key, CacheRecord { raw, map })?;
        }
        Ok(cache)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec() -> CacheRecord {
        CacheRecord {
            raw: Tensor::zeros(&[2, 2]),
            map: Tensor::filled(&[2, 2], 0.5),
        }
    }

    #[test]
    fn ordering_and_duplicates() {
        let mut c = AttentionCache::new();
        c.insert(CacheKey::new(2, 0, 0, AttnKind::Cross), rec()).unwrap();
        c.insert(CacheKey::new(1, 0, 1, AttnKind::SelfAttn), rec()).unwrap();
        c.insert(CacheKey::new(2, 0, 0, AttnKind::SelfAttn), rec()).unwrap();
        let keys: Vec<_> = c.keys().copied().collect();
        assert_eq!(keys[0].timestep, 1);
        assert_eq!(keys[1].kind, AttnKind::SelfAttn);
        assert_eq!(keys[2].kind, AttnKind::Cross);
        assert!(c.insert(CacheKey::new(2, 0, 0, AttnKind::Cross), rec()).is_err());
        assert!(c.require(&CacheKey::new(9, 0, 0, AttnKind::Cross)).is_err());
    }

    #[test]
    fn file_names_round_trip() {
        let k = CacheKey::new(12, 0, 3, AttnKind::Cross);
        assert_eq!(k.file_name(), "cross_t12_l0_f3.ften");
        assert_eq!(CacheKey::parse_file_name(&k.file_name()), Some(k));
        let s = CacheKey::new(0, 1, 0, AttnKind::SelfAttn);
        assert_eq!(s.file_name(), "self_t0_l1_f0.ften");
        assert_eq!(CacheKey::parse_file_name(&s.file_name()), Some(s));
        assert_eq!(CacheKey::parse_file_name("manifest.json"), None);
    }

    #[test]
    fn directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = AttentionCache::new();
        c.insert(CacheKey::new(1, 0, 0, AttnKind::SelfAttn), rec()).unwrap();
        c.insert(CacheKey::new(1, 0, 0, AttnKind::Cross), rec()).unwrap();
        c.write_dir(dir.path()).unwrap();
        assert!(dir.path().join("self_t1_l0_f0.ften").exists());
        assert_eq!(AttentionCache::read_dir(dir.path()).unwrap(), c);
    }
}
