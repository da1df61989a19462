//! Binary checkpoint container: a JSON header followed by named tensors with
//! little-endian f64 payloads.
//!
//! Layout: magic `FMCK`, version byte, `u32` header length, header JSON,
//! `u32` tensor count, then per tensor a `u16` name length, the UTF-8 name,
//! a `u8` rank, `u64` dims and the row-major data.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::federation::GlobalCheckpoint;
use crate::models::{GateInput, GatingParams, ModelParams, ModelSpec, SplitModel};
use crate::numerics::Tensor;
use crate::personalization::{Algorithm, Personal, PersonalizedClient};

pub const MAGIC: &[u8; 4] = b"FMCK";
pub const VERSION: u8 = 1;

pub fn encode(header: &serde_json::Value, tensors: &[(String, &Tensor)]) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(header).map_err(|e| Error::Schema(e.to_string()))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        let bytes = name.as_bytes();
        if bytes.len() > u16::MAX as usize {
            return Err(Error::Input(format!("tensor name too long: {name}")));
        }
        out.extend_from_slice(&(bytes.len() as u16).to_le_bytes());
        out.extend_from_slice(bytes);
        out.push(t.ndim() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.bytes.len() as u64,
                message: format!("truncated while reading {what}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn err(&self, message: impl Into<String>) -> Error {
        Error::Format {
            offset: self.pos as u64,
            message: message.into(),
        }
    }
}

pub fn decode(bytes: &[u8]) -> Result<(serde_json::Value, Vec<(String, Tensor)>)> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4, "magic")? != MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: "not a checkpoint (bad magic)".into(),
        });
    }
    let version = c.u8("version")?;
    if version != VERSION {
        return Err(Error::Format {
            offset: 4,
            message: format!("unsupported checkpoint version {version}"),
        });
    }
    let len = c.u32("header length")? as usize;
    let start = c.pos;
    let header = serde_json::from_slice(c.take(len, "header")?).map_err(|e| Error::Format {
        offset: start as u64,
        message: format!("bad header: {e}"),
    })?;
    let count = c.u32("tensor count")?;
    let mut tensors = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let n = c.u16("name length")? as usize;
        let name_at = c.pos;
        let name = std::str::from_utf8(c.take(n, "name")?)
            .map_err(|_| Error::Format {
                offset: name_at as u64,
                message: "tensor name is not UTF-8".into(),
            })?
            .to_string();
        let rank = c.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u64("dimension")? as usize);
        }
        let len = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&l| l.checked_mul(8).is_some_and(|b| b <= bytes.len()))
            .ok_or_else(|| c.err(format!("implausible shape {shape:?} for `{name}`")))?;
        let raw = c.take(len * 8, "tensor data")?;
        let data = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| c.err(format!("`{name}`: {e}")))?;
        tensors.push((name, t));
    }
    if c.pos != bytes.len() {
        return Err(c.err("trailing bytes after last tensor"));
    }
    Ok((header, tensors))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes `bytes` and returns their SHA-256.
pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<String> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(bytes))
}

fn read(path: &Path) -> Result<(serde_json::Value, Vec<(String, Tensor)>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Format { offset, message } => Error::Format {
            offset,
            message: format!("{}: {message}", path.display()),
        },
        other => other,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct GlobalHeader {
    kind: String,
    spec: ModelSpec,
    seed: u64,
    round: usize,
    accuracy: f64,
}

pub fn encode_global(ckpt: &GlobalCheckpoint, seed: u64) -> Result<Vec<u8>> {
    let header = GlobalHeader {
        kind: "global".into(),
        spec: ckpt.params.spec().clone(),
        seed,
        round: ckpt.round,
        accuracy: ckpt.accuracy,
    };
    let named: Vec<(String, &Tensor)> = ckpt
        .params
        .names()
        .iter()
        .cloned()
        .zip(ckpt.params.tensors())
        .collect();
    encode(&serde_json::to_value(header).expect("header"), &named)
}

pub fn save_global(path: &Path, ckpt: &GlobalCheckpoint, seed: u64) -> Result<String> {
    write_bytes(path, &encode_global(ckpt, seed)?)
}

pub fn load_global(path: &Path) -> Result<GlobalCheckpoint> {
    let (header, tensors) = read(path)?;
    let header: GlobalHeader = serde_json::from_value(header)
        .map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?;
    if header.kind != "global" {
        return Err(Error::Schema(format!(
            "{}: expected a global checkpoint, found `{}`",
            path.display(),
            header.kind
        )));
    }
    let params = params_from_named(header.spec, tensors)?;
    Ok(GlobalCheckpoint {
        round: header.round,
        params,
        accuracy: header.accuracy,
    })
}

fn params_from_named(spec: ModelSpec, tensors: Vec<(String, Tensor)>) -> Result<ModelParams> {
    let (names, tensors): (Vec<String>, Vec<Tensor>) = tensors.into_iter().unzip();
    let params = ModelParams::from_tensors(spec, tensors)?;
    if params.names() != names.as_slice() {
        return Err(Error::Schema(format!(
            "tensor names {names:?} do not match the model layout {:?}",
            params.names()
        )));
    }
    Ok(params)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PersonalHeader {
    kind: String,
    algorithm: Algorithm,
    client_id: usize,
    spec: ModelSpec,
    mean_gate: Option<f64>,
    gate_input: Option<GateInput>,
}

const PERSONAL: &str = "personal.";
const GATE_W: &str = "gate.weight";
const GATE_B: &str = "gate.bias";

fn classifier_names(global: &SplitModel) -> Result<Vec<String>> {
    let merged = global.merge()?;
    Ok(merged.names()[global.extractor.len()..].to_vec())
}

/// Serializes the client-owned state; the global model is stored separately.
pub fn encode_personalized(client: &PersonalizedClient) -> Result<Vec<u8>> {
    let header = PersonalHeader {
        kind: "personalized".into(),
        algorithm: client.algorithm,
        client_id: client.client_id,
        spec: client.spec().clone(),
        mean_gate: client.mean_gate,
        gate_input: client.gate.as_ref().map(|g| g.input_mode),
    };
    let mut named: Vec<(String, &Tensor)> = match &client.personal {
        Personal::Full(m) => m
            .names()
            .iter()
            .map(|n| format!("{PERSONAL}{n}"))
            .zip(m.tensors())
            .collect(),
        Personal::Classifier(c) => classifier_names(&client.global)?
            .into_iter()
            .map(|n| format!("{PERSONAL}{n}"))
            .zip(c.iter())
            .collect(),
    };
    if let Some(g) = &client.gate {
        named.push((GATE_W.into(), &g.weights));
        named.push((GATE_B.into(), &g.bias));
    }
    encode(&serde_json::to_value(header).expect("header"), &named)
}

/// Rebuilds a personalized client on top of `global`.
pub fn load_personalized(path: &Path, global: Arc<SplitModel>) -> Result<PersonalizedClient> {
    let (header, tensors) = read(path)?;
    let header: PersonalHeader = serde_json::from_value(header)
        .map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?;
    if header.kind != "personalized" {
        return Err(Error::Schema(format!("{}: not a personalized artifact", path.display())));
    }
    if header.spec != global.spec {
        return Err(Error::Schema(format!(
            "{}: artifact model {} does not match global model {}",
            path.display(),
            header.spec.id(),
            global.spec.id()
        )));
    }
    let mut personal = Vec::new();
    let (mut gw, mut gb) = (None, None);
    for (name, t) in tensors {
        if let Some(rest) = name.strip_prefix(PERSONAL) {
            personal.push((rest.to_string(), t));
        } else if name == GATE_W {
            gw = Some(t);
        } else if name == GATE_B {
            gb = Some(t);
        } else {
            return Err(Error::Schema(format!("{}: unexpected tensor `{name}`", path.display())));
        }
    }
    let personal = match header.algorithm {
        Algorithm::Local | Algorithm::PflFt => Personal::Full(params_from_named(header.spec, personal)?),
        _ => {
            let expected = classifier_names(&global)?;
            let names: Vec<&String> = personal.iter().map(|(n, _)| n).collect();
            if names.len() != expected.len() || names.iter().zip(&expected).any(|(a, b)| *a != b) {
                return Err(Error::Schema(format!(
                    "{}: classifier tensors {names:?} do not match {expected:?}",
                    path.display()
                )));
            }
            let tensors: Vec<Tensor> = personal.into_iter().map(|(_, t)| t).collect();
            for (t, g) in tensors.iter().zip(&global.classifier) {
                t.ensure_same_shape(g, "classifier tensor")?;
            }
            Personal::Classifier(tensors)
        }
    };
    let gate = match (header.gate_input, gw, gb) {
        (Some(mode), Some(weights), Some(bias)) => Some(GatingParams {
            weights,
            bias,
            input_mode: mode,
        }),
        (None, None, None) => None,
        _ => {
            return Err(Error::Schema(format!("{}: incomplete gate", path.display())));
        }
    };
    if let Some(g) = &gate {
        if g.weights.shape() != [g.input_mode.dim(&global.spec), 1] || g.bias.shape() != [1] {
            return Err(Error::Schema(format!(
                "{}: gate shapes {:?}/{:?} do not fit {:?} input",
                path.display(),
                g.weights.shape(),
                g.bias.shape(),
                g.input_mode
            )));
        }
    }
    if gate.is_some() != header.algorithm.uses_gate() {
        return Err(Error::Schema(format!(
            "{}: gate presence does not match algorithm {}",
            path.display(),
            header.algorithm
        )));
    }
    Ok(PersonalizedClient {
        client_id: header.client_id,
        algorithm: header.algorithm,
        global,
        personal,
        gate,
        mean_gate: header.mean_gate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_bits() {
        let t = Tensor::new(vec![2, 2], vec![1.0, -0.0, f64::MIN_POSITIVE, 1e300]).unwrap();
        let header = serde_json::json!({"kind": "test"});
        let bytes = encode(&header, &[("a".into(), &t)]).unwrap();
        let (h, back) = decode(&bytes).unwrap();
        assert_eq!(h, header);
        assert_eq!(back[0].0, "a");
        let bits: Vec<u64> = back[0].1.data().iter().map(|v| v.to_bits()).collect();
        let want: Vec<u64> = t.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits, want);
    }

    #[test]
    fn corrupt_inputs_are_format_errors() {
        let t = Tensor::zeros(&[3]);
        let bytes = encode(&serde_json::json!({}), &[("x".into(), &t)]).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(Error::Format { offset: 0, .. })));
        let cut = &bytes[..bytes.len() - 3];
        assert!(matches!(decode(cut), Err(Error::Format { .. })));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(decode(&extra), Err(Error::Format { .. })));
    }
}
