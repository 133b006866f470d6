//! Parameter checkpoints: one JSON object mapping each parameter name to `{shape, data}`.
//!
//! Floats are written in shortest round-trip form, so a save/load cycle is bit-exact.

use std::collections::BTreeMap;
use std::path::Path;

use regat_core::{ParamStore, Tensor};
use serde::{Deserialize, Serialize};

use crate::data::{read_json, write_json};
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    shape: Vec<usize>,
    data: Vec<f64>,
}

pub fn save(path: &Path, params: &ParamStore) -> Result<()> {
    let doc: BTreeMap<&str, Entry> = params
        .iter()
        .map(|(name, t)| {
            (
                name.as_str(),
                Entry {
                    shape: t.shape().to_vec(),
                    data: t.data().to_vec(),
                },
            )
        })
        .collect();
    write_json(path, &doc)
}

pub fn load(path: &Path) -> Result<ParamStore> {
    let doc: BTreeMap<String, Entry> = read_json(path)?;
    doc.into_iter()
        .map(|(name, e)| {
            let t = Tensor::new(e.shape, e.data)
                .map_err(|err| Error::Validation(format!("{}: parameter `{name}`: {err}", path.display())))?;
            if !t.all_finite() {
                return Err(Error::Validation(format!("{}: parameter `{name}` holds non-finite values", path.display())));
            }
            Ok((name, t))
        })
        .collect()
}

/// Checks that `loaded` has exactly the names and shapes of `expected`.
pub fn check_compatible(loaded: &ParamStore, expected: &ParamStore) -> Result<()> {
    for (name, t) in expected.iter() {
        match loaded.get(name) {
            None => return Err(Error::Validation(format!("checkpoint lacks parameter `{name}`"))),
            Some(l) if l.shape() != t.shape() => {
                return Err(Error::Validation(format!(
                    "checkpoint parameter `{name}` has shape {:?}, config expects {:?}",
                    l.shape(),
                    t.shape()
                )))
            }
            Some(_) => {}
        }
    }
    if let Some((extra, _)) = loaded.iter().find(|(n, _)| !expected.contains(n)) {
        return Err(Error::Validation(format!("checkpoint has unexpected parameter `{extra}`")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use regat_core::config::ModelConfig;
    use regat_core::graph::RelationKind;
    use regat_core::model::init_params;

    #[test]
    fn round_trip_is_bit_exact() {
        let cfg = ModelConfig::toy(RelationKind::Spatial, 10, 16, 8);
        let mut p = init_params(&cfg, 3).unwrap();
        p.get_mut("cls.1.b").unwrap().data_mut()[0] = 0.1 + 0.2;
        p.get_mut("cls.1.b").unwrap().data_mut()[1] = f64::MIN_POSITIVE / 3.0;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        save(&path, &p).unwrap();
        let q = load(&path).unwrap();
        for (name, t) in p.iter() {
            let bits = |t: &Tensor| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(t), bits(q.get(name).unwrap()), "{name}");
        }
        check_compatible(&q, &p).unwrap();
    }

    #[test]
    fn incompatible_checkpoints_are_named() {
        let a = init_params(&ModelConfig::toy(RelationKind::Spatial, 10, 16, 8), 0).unwrap();
        let b = init_params(&ModelConfig::toy(RelationKind::Spatial, 10, 16, 9), 0).unwrap();
        let e = check_compatible(&a, &b).unwrap_err();
        assert!(e.to_string().contains("cls.1"), "{e}");
        let c = init_params(&ModelConfig::toy(RelationKind::Implicit, 10, 16, 8), 0).unwrap();
        assert!(check_compatible(&a, &c).is_err());
    }
}
