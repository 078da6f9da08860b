//! Binary checkpoints.
//!
//! Layout: `b"AFSM"`, version `u16`, SHA-256 of the canonical detector config
//! JSON, then sections `{u32 name length, name, u64 count, count x f64}` until
//! end of file. All integers and reals are little-endian. The config itself
//! is stored next to the checkpoint as JSON (`<stem>.json`).

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::fsio;

use super::model::{DetectorConfig, ToyDetector};
use super::optim::{AdamConfig, OptimState};

pub const MAGIC: &[u8; 4] = b"AFSM";
pub const VERSION: u16 = 1;

/// Path of the config sidecar for a checkpoint path.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

fn push_section(out: &mut Vec<u8>, name: &str, values: &[f64]) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(values.len() as u64).to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_checkpoint(model: &ToyDetector, optim: Option<&OptimState>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&model.config().digest());
    for (name, values) in model.param_sections() {
        push_section(&mut out, &name, values);
    }
    if let Some(o) = optim {
        let AdamConfig { beta1, beta2, eps } = o.config;
        push_section(&mut out, "optim.adam", &[beta1, beta2, eps]);
        push_section(&mut out, "optim.t", &[o.t as f64]);
        push_section(&mut out, "optim.m", &o.m);
        push_section(&mut out, "optim.v", &o.v);
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Parse {
                context: "checkpoint".into(),
                message: format!("truncated at byte {}", self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

fn parse_sections(r: &mut Reader<'_>) -> Result<Vec<(String, Vec<f64>)>> {
    let mut sections = Vec::new();
    while !r.done() {
        let len = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes")) as usize;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|e| Error::Parse {
            context: "checkpoint section name".into(),
            message: e.to_string(),
        })?;
        let count = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes")) as usize;
        let raw = r.take(count.checked_mul(8).ok_or_else(|| Error::Parse {
            context: format!("checkpoint section {name}"),
            message: "element count overflows".into(),
        })?)?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        sections.push((name, values));
    }
    Ok(sections)
}

/// Restore a model (and optimizer state, when present) built from `config`.
pub fn decode_checkpoint(bytes: &[u8], config: &DetectorConfig) -> Result<(ToyDetector, Option<OptimState>)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4).ok() != Some(MAGIC.as_slice()) {
        return Err(Error::Incompatible("missing AFSM magic".into()));
    }
    let version = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes"));
    if version != VERSION {
        return Err(Error::Version {
            expected: VERSION as u32,
            found: version as u32,
        });
    }
    let digest = r.take(32)?;
    if digest != config.digest() {
        return Err(Error::Incompatible("config digest does not match".into()));
    }
    let sections = parse_sections(&mut r)?;
    let find = |name: &str| sections.iter().find(|(n, _)| n == name).map(|(_, v)| v);

    let mut model = ToyDetector::new(config.clone())?;
    let mut flat = Vec::with_capacity(model.param_count());
    for (name, expected) in model.param_sections() {
        let v = find(&name).ok_or_else(|| Error::Incompatible(format!("missing section {name}")))?;
        if v.len() != expected.len() {
            return Err(Error::Incompatible(format!(
                "section {name} has {} values, model expects {}",
                v.len(),
                expected.len()
            )));
        }
        flat.extend_from_slice(v);
    }
    model.set_params(&flat)?;

    let optim = match (find("optim.adam"), find("optim.t"), find("optim.m"), find("optim.v")) {
        (Some(adam), Some(t), Some(m), Some(v)) => {
            let n = flat.len();
            if adam.len() != 3 || t.len() != 1 || m.len() != n || v.len() != n {
                return Err(Error::Incompatible("optimizer sections do not match the model".into()));
            }
            Some(OptimState {
                m: m.clone(),
                v: v.clone(),
                t: t[0] as u64,
                config: AdamConfig {
                    beta1: adam[0],
                    beta2: adam[1],
                    eps: adam[2],
                },
            })
        }
        (None, None, None, None) => None,
        _ => return Err(Error::Incompatible("incomplete optimizer state".into())),
    };
    Ok((model, optim))
}

/// Write the checkpoint and its config sidecar.
pub fn save_checkpoint(path: impl AsRef<Path>, model: &ToyDetector, optim: Option<&OptimState>) -> Result<()> {
    let path = path.as_ref();
    let config = serde_json::to_string_pretty(model.config()).expect("config serializes");
    fsio::write_atomic(sidecar_path(path), config.as_bytes())?;
    fsio::write_atomic(path, &encode_checkpoint(model, optim))
}

pub fn read_sidecar(path: &Path) -> Result<DetectorConfig> {
    let side = sidecar_path(path);
    let text = fsio::read(&side)?;
    let de = &mut serde_json::Deserializer::from_slice(&text);
    serde_path_to_error::deserialize(de).map_err(|e| Error::Parse {
        context: format!("{}: field `{}`", side.display(), e.path()),
        message: e.inner().to_string(),
    })
}

/// Load using the config sidecar.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(ToyDetector, Option<OptimState>)> {
    let path = path.as_ref();
    let config = read_sidecar(path)?;
    decode_checkpoint(&fsio::read(path)?, &config)
}

/// Load into an expected architecture; a different one is an incompatibility.
pub fn load_checkpoint_as(path: impl AsRef<Path>, config: &DetectorConfig) -> Result<(ToyDetector, Option<OptimState>)> {
    decode_checkpoint(&fsio::read(path.as_ref())?, config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::afsm::{normalize_weights, Variant};

    fn model(variant: Variant) -> ToyDetector {
        ToyDetector::new(DetectorConfig {
            variant,
            head_init_spread: 0.1,
            init_seed: 9,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let m = model(Variant::V2);
        let mut o = OptimState::new(m.param_count(), AdamConfig::default());
        o.t = 17;
        o.m.iter_mut().enumerate().for_each(|(i, v)| *v = i as f64 / 3.0);
        o.v.iter_mut().enumerate().for_each(|(i, v)| *v = (i as f64).sqrt());
        save_checkpoint(&path, &m, Some(&o)).unwrap();
        assert!(dir.path().join("model.json").exists());
        let (m2, o2) = load_checkpoint(&path).unwrap();
        assert_eq!(m2, m);
        assert_eq!(o2, Some(o));
        let bits = |p: &[f64]| p.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&m2.params()), bits(&m.params()));
    }

    #[test]
    fn mismatched_architecture_is_incompatible() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&path, &model(Variant::V1), None).unwrap();
        let other = DetectorConfig {
            num_classes: 3,
            ..model(Variant::V1).config().clone()
        };
        assert!(matches!(load_checkpoint_as(&path, &other), Err(Error::Incompatible(_))));
        std::fs::write(sidecar_path(&path), serde_json::to_string(&other).unwrap()).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Incompatible(_))));
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let m = model(Variant::V1);
        let bytes = encode_checkpoint(&m, None);
        assert!(matches!(
            decode_checkpoint(&bytes[..bytes.len() - 3], m.config()),
            Err(Error::Parse { .. })
        ));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(decode_checkpoint(&bad, m.config()), Err(Error::Version { found: 9, .. })));
        assert!(matches!(decode_checkpoint(b"NOPE", m.config()), Err(Error::Incompatible(_))));
    }

    #[test]
    fn stored_beta_reproduces_alpha() {
        let m = model(Variant::V1);
        let (back, _) = decode_checkpoint(&encode_checkpoint(&m, None), m.config()).unwrap();
        let crate::afsm::WeightGenerator::V1 { beta, levels, channels } = &back.generator else {
            panic!("expected V1");
        };
        let rows: Vec<Vec<f64>> = beta.chunks(*channels).map(|c| c.to_vec()).collect();
        assert_eq!(rows.len(), *levels);
        let w = normalize_weights(rows).unwrap();
        assert!(w.alpha.iter().flatten().all(|a| (a - 1.0 / 3.0).abs() < 1e-15));
    }
}
