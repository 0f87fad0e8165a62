//! Provenance block embedded in every artifact.

use serde::{Deserialize, Serialize};

use crate::oodgen::SplitSpec;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    /// Hash of the effective configuration that produced the artifact.
    pub config_hash: String,
    #[serde(with = "crate::provenance::seed_format")]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<SplitSpec>,
}

impl Provenance {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("provenance serializes")
    }

    /// The TOML block with every line prefixed by `prefix` (for comment
    /// headers in text formats).
    pub fn commented(&self, prefix: &str) -> String {
        self.to_toml()
            .lines()
            .map(|l| format!("{prefix}{l}\n"))
            .collect()
    }
}

/// Serde adapter for `u64` seeds in TOML, whose integers stop at `i64::MAX`:
/// larger seeds are written as decimal strings, and both forms are read.
pub mod seed_format {
    use serde::de::{self, Visitor};
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(seed: &u64, s: S) -> Result<S::Ok, S::Error> {
        match i64::try_from(*seed) {
            Ok(v) => s.serialize_i64(v),
            Err(_) => s.serialize_str(&seed.to_string()),
        }
    }

    struct SeedVisitor;

    impl Visitor<'_> for SeedVisitor {
        type Value = u64;

        fn expecting(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
            f.write_str("a non-negative integer seed")
        }

        fn visit_i64<E: de::Error>(self, v: i64) -> Result<u64, E> {
            u64::try_from(v).map_err(|_| E::custom(format!("negative seed {v}")))
        }

        fn visit_u64<E: de::Error>(self, v: u64) -> Result<u64, E> {
            Ok(v)
        }

        fn visit_str<E: de::Error>(self, v: &str) -> Result<u64, E> {
            v.parse().map_err(|_| E::custom(format!("invalid seed '{v}'")))
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u64, D::Error> {
        d.deserialize_any(SeedVisitor)
    }
}
