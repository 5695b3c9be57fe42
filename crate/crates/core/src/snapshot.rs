//! Weight snapshots: a text manifest followed by a raw little-endian blob.
//!
//! Layout of a snapshot file:
//!
//! ```text
//! inpaint-snapshot 1
//! <count>
//! <name> <dim0> <dim1> ...      (count manifest lines)
//! <values>                       (all tensors back to back, f64 LE)
//! ```
//!
//! Loading matches entries to model parameters by name and requires shapes
//! to agree exactly; a missing, extra, or reshaped parameter is an error
//! rather than a silent partial restore. Only model parameters are stored —
//! optimizer moments are not. A reloaded model therefore reproduces the
//! next step's loss exactly (the loss is evaluated before any further
//! update touches the weights), while a longer resumed run will drift from
//! an uninterrupted one once fresh moment estimates kick in.

use std::collections::HashMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::Error;
use crate::model::Model;
use crate::tensor::Tensor;
use crate::Result;

const MAGIC: &str = "inpaint-snapshot 1";

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source,
    }
}

fn corrupt(detail: impl Into<String>) -> Error {
    Error::Snapshot {
        detail: detail.into(),
    }
}

// ── Raw entries ─────────────────────────────────────────────────────────────

/// Decoded snapshot contents, independent of any model.
#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub entries: Vec<(String, Vec<usize>, Vec<f64>)>,
}

impl Snapshot {
    pub fn from_model(model: &Model) -> Snapshot {
        let entries = model
            .params()
            .into_iter()
            .map(|(name, _, t)| (name, t.shape().to_vec(), t.data().to_vec()))
            .collect();
        Snapshot { entries }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut manifest = format!("{MAGIC}\n{}\n", self.entries.len());
        for (name, shape, _) in &self.entries {
            manifest.push_str(name);
            for d in shape {
                manifest.push(' ');
                manifest.push_str(&d.to_string());
            }
            manifest.push('\n');
        }
        let mut file = fs::File::create(path).map_err(|e| io_err(path, e))?;
        file.write_all(manifest.as_bytes())
            .map_err(|e| io_err(path, e))?;
        for (_, _, values) in &self.entries {
            for v in values {
                file.write_all(&v.to_le_bytes())
                    .map_err(|e| io_err(path, e))?;
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Snapshot> {
        let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
        let mut lines = Vec::new();
        let mut cursor = 0usize;
        // Pull the text header off the front; everything after the last
        // manifest line is blob.
        let take_line = |cursor: &mut usize| -> Result<String> {
            let start = *cursor;
            let rel = bytes[start..]
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| corrupt("unterminated header line"))?;
            *cursor = start + rel + 1;
            String::from_utf8(bytes[start..start + rel].to_vec())
                .map_err(|_| corrupt("header is not valid utf-8"))
        };
        let magic = take_line(&mut cursor)?;
        if magic != MAGIC {
            return Err(corrupt(format!("unrecognized header {magic:?}")));
        }
        let count: usize = take_line(&mut cursor)?
            .parse()
            .map_err(|_| corrupt("entry count is not a number"))?;
        for _ in 0..count {
            lines.push(take_line(&mut cursor)?);
        }
        let mut entries = Vec::with_capacity(count);
        let mut blob = &bytes[cursor..];
        for line in &lines {
            let mut parts = line.split_whitespace();
            let name = parts
                .next()
                .ok_or_else(|| corrupt("manifest line without a name"))?
                .to_string();
            let shape = parts
                .map(|p| {
                    p.parse::<usize>()
                        .map_err(|_| corrupt(format!("bad dimension {p:?} for {name}")))
                })
                .collect::<Result<Vec<usize>>>()?;
            let numel: usize = shape.iter().product();
            let need = numel * 8;
            if blob.len() < need {
                return Err(corrupt(format!(
                    "blob truncated: {name} needs {need} bytes, {} left",
                    blob.len()
                )));
            }
            let mut values = Vec::with_capacity(numel);
            let mut buf = [0u8; 8];
            let mut rd = &blob[..need];
            for _ in 0..numel {
                rd.read_exact(&mut buf).expect("length checked above");
                values.push(f64::from_le_bytes(buf));
            }
            blob = &blob[need..];
            entries.push((name, shape, values));
        }
        if !blob.is_empty() {
            return Err(corrupt(format!(
                "{} trailing bytes after the blob",
                blob.len()
            )));
        }
        Ok(Snapshot { entries })
    }

    /// Write the stored values into the model's parameters. Every stored
    /// entry must match a parameter by name and shape, and every parameter
    /// must be covered.
    pub fn apply(&self, model: &mut Model) -> Result<()> {
        let mut pending: HashMap<&str, (&Vec<usize>, &Vec<f64>)> = self
            .entries
            .iter()
            .map(|(n, s, v)| (n.as_str(), (s, v)))
            .collect();
        if pending.len() != self.entries.len() {
            return Err(corrupt("duplicate parameter name in snapshot"));
        }
        let mut failure: Option<Error> = None;
        model.visit_params_mut(&mut |name, _, t| {
            if failure.is_some() {
                return;
            }
            match pending.remove(name.as_str()) {
                None => {
                    failure = Some(corrupt(format!("snapshot is missing parameter {name}")));
                }
                Some((shape, values)) => {
                    if shape.as_slice() != t.shape() {
                        failure = Some(corrupt(format!(
                            "shape mismatch for {name}: snapshot {shape:?}, model {:?}",
                            t.shape()
                        )));
                        return;
                    }
                    *t = Tensor::new(shape.clone(), values.clone())
                        .expect("shape/value agreement checked");
                }
            }
        });
        if let Some(err) = failure {
            return Err(err);
        }
        if let Some(name) = pending.keys().next() {
            return Err(corrupt(format!("snapshot has extra parameter {name}")));
        }
        Ok(())
    }
}

/// Save every trainable parameter of `model` to `path`.
pub fn save_model(path: &Path, model: &Model) -> Result<()> {
    Snapshot::from_model(model).save(path)
}

/// Restore `model` from `path`, failing on any name or shape mismatch.
pub fn load_model(path: &Path, model: &mut Model) -> Result<()> {
    Snapshot::load(path)?.apply(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;

    fn tiny_config(seed: u64) -> RunConfig {
        RunConfig {
            height: 16,
            width: 16,
            patch: 2,
            d_e: 8,
            d_d: 8,
            heads: 2,
            enc_layers: 1,
            dec_layers: 1,
            backbone_stages: 2,
            seed,
            ..RunConfig::default()
        }
    }

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("inpaint-snapshot-tests");
        fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn round_trip_restores_every_value_bitwise() {
        let model = Model::new(&tiny_config(3)).unwrap();
        let path = tmp("round_trip.bin");
        save_model(&path, &model).unwrap();
        // A differently seeded model has different weights everywhere.
        let mut other = Model::new(&tiny_config(4)).unwrap();
        let before = other.params();
        let reference = model.params();
        assert!(
            before
                .iter()
                .zip(&reference)
                .any(|((_, _, a), (_, _, b))| a.data() != b.data()),
            "seeds 3 and 4 should disagree somewhere"
        );
        load_model(&path, &mut other).unwrap();
        for ((name, _, a), (_, _, b)) in other.params().iter().zip(&reference) {
            let a_bits: Vec<u64> = a.data().iter().map(|v| v.to_bits()).collect();
            let b_bits: Vec<u64> = b.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(a_bits, b_bits, "{name} not restored bitwise");
        }
    }

    #[test]
    fn missing_parameter_is_rejected() {
        let model = Model::new(&tiny_config(5)).unwrap();
        let mut snap = Snapshot::from_model(&model);
        snap.entries.retain(|(n, _, _)| n != "head/bias");
        let path = tmp("missing.bin");
        snap.save(&path).unwrap();
        let mut target = Model::new(&tiny_config(5)).unwrap();
        let err = load_model(&path, &mut target).unwrap_err();
        assert!(
            err.to_string().contains("missing parameter head/bias"),
            "{err}"
        );
    }

    #[test]
    fn extra_parameter_is_rejected() {
        let model = Model::new(&tiny_config(6)).unwrap();
        let mut snap = Snapshot::from_model(&model);
        snap.entries
            .push(("stowaway".into(), vec![2], vec![1.0, 2.0]));
        let path = tmp("extra.bin");
        snap.save(&path).unwrap();
        let mut target = Model::new(&tiny_config(6)).unwrap();
        let err = load_model(&path, &mut target).unwrap_err();
        assert!(
            err.to_string().contains("extra parameter stowaway"),
            "{err}"
        );
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let model = Model::new(&tiny_config(7)).unwrap();
        let mut snap = Snapshot::from_model(&model);
        for (name, shape, values) in &mut snap.entries {
            if name == "head/bias" {
                shape.push(1);
                values.push(0.0); // keep numel consistent with the new shape
                *values = vec![0.0; shape.iter().product()];
            }
        }
        let path = tmp("reshaped.bin");
        snap.save(&path).unwrap();
        let mut target = Model::new(&tiny_config(7)).unwrap();
        let err = load_model(&path, &mut target).unwrap_err();
        assert!(
            err.to_string().contains("shape mismatch for head/bias"),
            "{err}"
        );
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let model = Model::new(&tiny_config(8)).unwrap();
        let path = tmp("truncated.bin");
        save_model(&path, &model).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 9);
        fs::write(&path, bytes).unwrap();
        let err = Snapshot::load(&path).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
    }

    #[test]
    fn foreign_file_is_rejected() {
        let path = tmp("foreign.bin");
        fs::write(&path, b"definitely not a snapshot\n").unwrap();
        let err = Snapshot::load(&path).unwrap_err();
        assert!(err.to_string().contains("unrecognized header"), "{err}");
    }

    #[test]
    fn special_values_survive_the_blob() {
        let entries = vec![(
            "weird".to_string(),
            vec![4usize],
            vec![f64::MIN_POSITIVE, -0.0, 1e300, 5e-324],
        )];
        let snap = Snapshot { entries };
        let path = tmp("special.bin");
        snap.save(&path).unwrap();
        let back = Snapshot::load(&path).unwrap();
        let (_, _, values) = &back.entries[0];
        for (a, b) in values.iter().zip(&snap.entries[0].2) {
            assert_eq!(a.to_bits(), b.to_bits(), "value altered in transit");
        }
    }
}
