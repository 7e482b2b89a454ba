//! Checkpoint files: an 8-byte magic, a little-endian u64 manifest length, a
//! JSON manifest, then raw little-endian f32 arrays. See `docs/checkpoint.md`.

use std::fs;
use std::path::Path;
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde_json::{json, Map, Value};

use crate::error::{Error, Result};
use crate::imaging::write_atomic;
use crate::model::{ArchSpec, Layout, ModelParams, Params};
use crate::optim::{Adam, AdamConfig};
use crate::training::TrainState;

pub const MAGIC: &[u8; 8] = b"LRCKPT01";
pub const FORMAT_VERSION: u64 = 1;

fn fmt_err(field: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Format { field: field.into(), message: message.into() }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex32(s: &str) -> Option<[u8; 32]> {
    if s.len() != 64 {
        return None;
    }
    let mut out = [0u8; 32];
    for (i, o) in out.iter_mut().enumerate() {
        *o = u8::from_str_radix(s.get(2 * i..2 * i + 2)?, 16).ok()?;
    }
    Some(out)
}

/// Serializes a training state to bytes.
pub fn encode_checkpoint(state: &TrainState) -> Vec<u8> {
    let layout = &state.params.weights.layout;
    let groups: [(&str, &Params<f32>); 3] =
        [("", &state.params.weights), ("adam.m.", &state.optimizer.m), ("adam.v.", &state.optimizer.v)];
    let mut arrays = Vec::new();
    let mut offset = 0usize;
    for (prefix, params) in groups {
        for (entry, data) in layout.entries.iter().zip(&params.arrays) {
            arrays.push(json!({
                "name": format!("{prefix}{}", entry.name),
                "shape": entry.shape,
                "dtype": "f32le",
                "offset": offset,
                "len": data.len(),
            }));
            offset += data.len() * 4;
        }
    }
    let created = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    let manifest = json!({
        "format_version": FORMAT_VERSION,
        "arch": state.params.arch(),
        "step": state.step,
        "epoch": state.epoch,
        "created_unix": created,
        "tool_version": env!("CARGO_PKG_VERSION"),
        "optimizer": {
            "t": state.optimizer.t,
            "learning_rate": state.optimizer.config.learning_rate,
            "beta1": state.optimizer.config.beta1,
            "beta2": state.optimizer.config.beta2,
            "eps": state.optimizer.config.eps,
        },
        "rng": {
            "seed": hex(&state.rng.get_seed()),
            "word_pos": state.rng.get_word_pos().to_string(),
            "stream": state.rng.get_stream(),
        },
        "arrays": arrays,
    });
    let manifest = serde_json::to_vec(&manifest).expect("manifest is plain JSON");
    let mut out = Vec::with_capacity(16 + manifest.len() + offset);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest);
    for (_, params) in groups {
        for v in params.arrays.iter().flatten() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Writes atomically: a temporary sibling file is renamed over `path`.
pub fn save_checkpoint(state: &TrainState, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &encode_checkpoint(state))
}

struct Manifest<'a> {
    root: &'a Map<String, Value>,
}

impl<'a> Manifest<'a> {
    fn get(&self, field: &str) -> Result<&'a Value> {
        self.root.get(field).ok_or_else(|| fmt_err(field, "missing"))
    }

    fn u64(&self, field: &str) -> Result<u64> {
        self.get(field)?.as_u64().ok_or_else(|| fmt_err(field, "expected an unsigned integer"))
    }
}

fn sub_u64(obj: &Value, parent: &str, key: &str) -> Result<u64> {
    obj.get(key).and_then(Value::as_u64).ok_or_else(|| fmt_err(format!("{parent}.{key}"), "expected an unsigned integer"))
}

fn sub_f64(obj: &Value, parent: &str, key: &str) -> Result<f64> {
    obj.get(key).and_then(Value::as_f64).ok_or_else(|| fmt_err(format!("{parent}.{key}"), "expected a number"))
}

fn sub_str<'a>(obj: &'a Value, parent: &str, key: &str) -> Result<&'a str> {
    obj.get(key).and_then(Value::as_str).ok_or_else(|| fmt_err(format!("{parent}.{key}"), "expected a string"))
}

/// Array payloads by name, located by the manifest.
struct Payload<'a> {
    entries: Vec<(String, Vec<usize>, &'a [u8])>,
}

impl Payload<'_> {
    fn take(&self, name: &str, shape: &[usize]) -> Result<Option<Vec<f32>>> {
        let Some((_, s, bytes)) = self.entries.iter().find(|(n, _, _)| n == name) else {
            return Ok(None);
        };
        if s.as_slice() != shape {
            return Err(fmt_err(format!("arrays[{name}].shape"), format!("expected {shape:?}, found {s:?}")));
        }
        Ok(Some(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect()))
    }
}

fn parse_payload<'a>(arrays: &Value, data: &'a [u8]) -> Result<Payload<'a>> {
    let list = arrays.as_array().ok_or_else(|| fmt_err("arrays", "expected a list"))?;
    let mut entries = Vec::with_capacity(list.len());
    for (i, a) in list.iter().enumerate() {
        let field = format!("arrays[{i}]");
        let name = sub_str(a, &field, "name")?.to_string();
        let dtype = sub_str(a, &field, "dtype")?;
        if dtype != "f32le" {
            return Err(fmt_err(format!("{field}.dtype"), format!("unsupported dtype {dtype}")));
        }
        let shape: Vec<usize> = a
            .get("shape")
            .and_then(Value::as_array)
            .and_then(|s| s.iter().map(|d| d.as_u64().map(|d| d as usize)).collect())
            .ok_or_else(|| fmt_err(format!("{field}.shape"), "expected a list of integers"))?;
        let offset = sub_u64(a, &field, "offset")? as usize;
        let len = sub_u64(a, &field, "len")? as usize;
        if shape.iter().product::<usize>() != len {
            return Err(fmt_err(format!("{field}.len"), "does not match shape"));
        }
        let end = len.checked_mul(4).and_then(|b| b.checked_add(offset)).filter(|&e| e <= data.len());
        let Some(end) = end else {
            return Err(fmt_err(format!("{field}.offset"), "array extends past the end of the file"));
        };
        entries.push((name, shape, &data[offset..end]));
    }
    Ok(Payload { entries })
}

fn parse_arch(v: &Value) -> Result<ArchSpec> {
    let arch: ArchSpec = serde_json::from_value(v.clone()).map_err(|e| fmt_err("arch", e.to_string()))?;
    arch.validate().map_err(|e| fmt_err("arch", e.to_string()))?;
    Ok(arch)
}

/// Parses checkpoint bytes. Weights are required; optimizer moments and rng
/// state fall back to fresh values when absent.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<TrainState> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(fmt_err("magic", "not a checkpoint file"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let manifest_end = 16usize.checked_add(len).filter(|&e| e <= bytes.len());
    let Some(manifest_end) = manifest_end else {
        return Err(fmt_err("manifest_length", "manifest extends past the end of the file"));
    };
    let value: Value =
        serde_json::from_slice(&bytes[16..manifest_end]).map_err(|e| fmt_err("manifest", e.to_string()))?;
    let root = value.as_object().ok_or_else(|| fmt_err("manifest", "expected a JSON object"))?;
    let m = Manifest { root };

    let version = m.u64("format_version")?;
    if version != FORMAT_VERSION {
        return Err(fmt_err("format_version", format!("unsupported version {version}")));
    }
    let arch = parse_arch(m.get("arch")?)?;
    let step = m.u64("step")?;
    let epoch = m.u64("epoch")?;
    let layout = Arc::new(Layout::new(arch)?);
    let payload = parse_payload(m.get("arrays")?, &bytes[manifest_end..])?;

    let load = |prefix: &str| -> Result<Option<Params<f32>>> {
        let mut params = Params::<f32>::zeros(layout.clone());
        for (entry, slot) in layout.entries.iter().zip(params.arrays.iter_mut()) {
            match payload.take(&format!("{prefix}{}", entry.name), &entry.shape)? {
                Some(data) => *slot = data,
                None if prefix.is_empty() => {
                    return Err(fmt_err("arrays", format!("missing array {}", entry.name)));
                }
                None => return Ok(None),
            }
        }
        Ok(Some(params))
    };
    let weights = load("")?.expect("weights are required");
    if !weights.is_finite() {
        return Err(Error::Integrity("checkpoint weights contain non-finite values".into()));
    }

    let mut optimizer = Adam::new(AdamConfig::default(), &weights);
    if let Some(opt) = root.get("optimizer") {
        optimizer.t = sub_u64(opt, "optimizer", "t")?;
        optimizer.config = AdamConfig {
            learning_rate: sub_f64(opt, "optimizer", "learning_rate")?,
            beta1: sub_f64(opt, "optimizer", "beta1")?,
            beta2: sub_f64(opt, "optimizer", "beta2")?,
            eps: sub_f64(opt, "optimizer", "eps")?,
        };
    }
    if let (Some(mm), Some(vv)) = (load("adam.m.")?, load("adam.v.")?) {
        optimizer.m = mm;
        optimizer.v = vv;
    }

    let rng = match root.get("rng") {
        None => ChaCha8Rng::seed_from_u64(0),
        Some(r) => {
            let seed = unhex32(sub_str(r, "rng", "seed")?).ok_or_else(|| fmt_err("rng.seed", "expected 64 hex digits"))?;
            let word_pos: u128 = sub_str(r, "rng", "word_pos")?
                .parse()
                .map_err(|_| fmt_err("rng.word_pos", "expected a decimal integer"))?;
            let mut rng = ChaCha8Rng::from_seed(seed);
            rng.set_stream(sub_u64(r, "rng", "stream")?);
            rng.set_word_pos(word_pos);
            rng
        }
    };

    Ok(TrainState { params: ModelParams { weights, step }, optimizer, step, epoch, rng })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<TrainState> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes).map_err(|e| match e {
        Error::Format { field, message } => {
            Error::Format { field, message: format!("{message} (in {})", path.display()) }
        }
        other => other,
    })
}

/// Loads only the model weights from a checkpoint.
pub fn load_model(path: impl AsRef<Path>) -> Result<ModelParams> {
    Ok(load_checkpoint(path)?.params)
}

/// Wraps bare weights in a fresh training state so they can be saved.
pub fn save_model(params: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    let mut state = TrainState::new(params.arch(), 0, AdamConfig::default())?;
    state.params = params.clone();
    state.step = params.step;
    save_checkpoint(&state, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    fn state() -> TrainState {
        let arch = ArchSpec { depth: 2, base_channels: 2, latent_dim: 6, luminance_dim: 2 };
        let mut s = TrainState::new(arch, 4, AdamConfig::with_lr(3e-4)).unwrap();
        for (i, v) in s.optimizer.m.arrays.iter_mut().flatten().enumerate() {
            *v = i as f32 * 0.5;
        }
        for (i, v) in s.optimizer.v.arrays.iter_mut().flatten().enumerate() {
            *v = 1.0 / (1.0 + i as f32);
        }
        s.optimizer.t = 17;
        s.step = 17;
        s.epoch = 3;
        s.params.step = 17;
        for _ in 0..5 {
            s.rng.next_u32();
        }
        s
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let s = state();
        save_checkpoint(&s, &path).unwrap();
        let mut back = load_checkpoint(&path).unwrap();
        assert_eq!(back.params.checksum(), s.params.checksum());
        assert_eq!(back, s);
        let mut orig = s.rng.clone();
        assert_eq!(back.rng.next_u64(), orig.next_u64());
        // No temporary files are left behind.
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }

    #[test]
    fn model_only_save() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let s = state();
        save_model(&s.params, &path).unwrap();
        assert_eq!(load_model(&path).unwrap(), s.params);
    }

    fn corrupt_manifest(edit: impl FnOnce(&mut Map<String, Value>)) -> Result<TrainState> {
        let bytes = encode_checkpoint(&state());
        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let mut v: Value = serde_json::from_slice(&bytes[16..16 + len]).unwrap();
        edit(v.as_object_mut().unwrap());
        let manifest = serde_json::to_vec(&v).unwrap();
        let mut out = MAGIC.to_vec();
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        out.extend_from_slice(&bytes[16 + len..]);
        decode_checkpoint(&out)
    }

    fn field_of(r: Result<TrainState>) -> String {
        match r {
            Err(Error::Format { field, .. }) => field,
            other => panic!("expected a format error, got {other:?}"),
        }
    }

    #[test]
    fn corrupt_manifests_name_the_field() {
        assert_eq!(field_of(corrupt_manifest(|m| { m.remove("step"); })), "step");
        assert_eq!(field_of(corrupt_manifest(|m| { m.insert("arch".into(), json!({"depth": 2})); })), "arch");
        assert_eq!(field_of(corrupt_manifest(|m| { m.insert("format_version".into(), json!(9)); })), "format_version");
        assert_eq!(
            field_of(corrupt_manifest(|m| { m["rng"]["seed"] = json!("zz"); })),
            "rng.seed"
        );
        assert_eq!(
            field_of(corrupt_manifest(|m| { m["arrays"][0]["offset"] = json!(1u64 << 40); })),
            "arrays[0].offset"
        );
        assert_eq!(
            field_of(corrupt_manifest(|m| { m["arrays"][1]["dtype"] = json!("f16"); })),
            "arrays[1].dtype"
        );
        assert_eq!(field_of(decode_checkpoint(b"garbage garbage garbage")), "magic");
        let mut bytes = encode_checkpoint(&state());
        bytes[16] = b'!';
        assert_eq!(field_of(decode_checkpoint(&bytes)), "manifest");
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let bytes = encode_checkpoint(&state());
        let r = decode_checkpoint(&bytes[..bytes.len() - 4]);
        assert!(field_of(r).starts_with("arrays["));
    }

    #[test]
    fn missing_file_is_not_found() {
        let r = load_checkpoint("/nonexistent/x.ckpt");
        assert!(matches!(r, Err(Error::NotFound { .. })));
    }
}
