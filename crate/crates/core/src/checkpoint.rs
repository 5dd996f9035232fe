//! Binary checkpoint format.
//!
//! ```text
//! 0   8 bytes  magic "FVCKPT\0\0"
//! 8   u32 LE   format version
//! 12  u32 LE   header length L
//! 16  L bytes  UTF-8 header: spec lines, meta lines, one `tensor` line per parameter
//! 16+L         little-endian f32 values, tensors back to back
//! ```
//!
//! Manifest lines read `tensor <name> <d0>x<d1>... <offset>` where the offset
//! counts bytes from the start of the float blob. The header alone is enough
//! to inspect a checkpoint.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::data::write_locked;
use crate::error::{Error, Result};
use crate::model::{NetworkSpec, NetworkState};
use crate::tensor::Tensor;
use crate::trainer::TrainStatus;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"FVCKPT\0\0";
pub const CHECKPOINT_VERSION: u32 = 1;
const PREFIX_LEN: usize = 16;

/// A network plus the training metadata needed to resume population work.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub state: NetworkState<f32>,
    pub status: TrainStatus,
    /// Plateau-window mean loss, when the network was scored.
    pub fitness: Option<f64>,
}

impl Checkpoint {
    pub fn new(state: NetworkState<f32>, status: TrainStatus, fitness: Option<f64>) -> Self {
        Self { state, status, fitness }
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.state.loss_history.last().copied()
    }
}

fn render_header(ck: &Checkpoint) -> String {
    let s = &ck.state;
    let mut h = s.spec.render();
    let opt = |v: Option<f64>| v.map_or_else(|| "none".to_string(), |v| v.to_string());
    let history: Vec<String> = s.loss_history.iter().map(f64::to_string).collect();
    let _ = writeln!(h, "meta.seed = {}", s.seed);
    let _ = writeln!(h, "meta.epochs = {}", s.epoch);
    let _ = writeln!(h, "meta.final_loss = {}", opt(ck.final_loss()));
    let _ = writeln!(h, "meta.fitness = {}", opt(ck.fitness));
    let _ = writeln!(h, "meta.status = {}", ck.status);
    let _ = writeln!(h, "meta.loss_history = {}", history.join(","));
    let mut offset = 0usize;
    for (name, t) in &s.params {
        let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        let _ = writeln!(h, "tensor {name} {} {offset}", dims.join("x"));
        offset += t.len() * 4;
    }
    h
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    ck.state.check_params()?;
    if let Some((name, _)) = ck.state.params.iter().find(|(_, t)| !t.all_finite()) {
        return Err(Error::input(format!("refusing to save non-finite tensor `{name}`")));
    }
    let header = render_header(ck);
    let header_len = u32::try_from(header.len()).map_err(|_| Error::input("checkpoint header too large"))?;
    let floats: usize = ck.state.params.values().map(Tensor::len).sum();
    let mut out = Vec::with_capacity(PREFIX_LEN + header.len() + floats * 4);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&header_len.to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for t in ck.state.params.values() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

fn u32_at(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::format(at as u64, "file truncated"))
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 8 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::format(0, "not a checkpoint (bad magic)"));
    }
    let version = u32_at(bytes, 8)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(8, format!("unsupported checkpoint version {version}")));
    }
    let header_len = u32_at(bytes, 12)? as usize;
    let blob_start = PREFIX_LEN
        .checked_add(header_len)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| Error::format(12, format!("header length {header_len} runs past end of file")))?;
    let header = std::str::from_utf8(&bytes[PREFIX_LEN..blob_start])
        .map_err(|e| Error::format((PREFIX_LEN + e.valid_up_to()) as u64, "header is not UTF-8"))?;

    // header errors are reported at the byte where the offending line starts
    let mut line_at = PREFIX_LEN;
    let mut meta = BTreeMap::new();
    let mut manifest = Vec::new();
    for line in header.split_inclusive('\n') {
        let here = line_at as u64;
        line_at += line.len();
        let line = line.trim_end();
        if let Some(rest) = line.strip_prefix("tensor ") {
            let parts: Vec<&str> = rest.split_whitespace().collect();
            let [name, dims, offset] = parts.as_slice() else {
                return Err(Error::format(here, format!("bad manifest line `{line}`")));
            };
            let shape = dims
                .split('x')
                .map(str::parse::<usize>)
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| Error::format(here, format!("bad tensor shape `{dims}`")))?;
            let offset = offset
                .parse()
                .map_err(|_| Error::format(here, format!("bad tensor offset `{offset}`")))?;
            manifest.push((
                here,
                ManifestEntry {
                    name: name.to_string(),
                    shape,
                    offset,
                },
            ));
        } else if let Some((k, v)) = line.split_once('=') {
            if let Some(key) = k.trim().strip_prefix("meta.") {
                meta.insert(key.to_string(), (here, v.trim().to_string()));
            }
        }
    }
    let spec = NetworkSpec::parse(header).map_err(|e| Error::format(PREFIX_LEN as u64, format!("bad network spec: {e}")))?;

    let get = |key: &str| {
        meta.get(key)
            .ok_or_else(|| Error::format(PREFIX_LEN as u64, format!("missing meta.{key}")))
    };
    fn parse_meta<V: std::str::FromStr>(entry: &(u64, String), key: &str) -> Result<V> {
        entry
            .1
            .parse()
            .map_err(|_| Error::format(entry.0, format!("bad meta.{key} `{}`", entry.1)))
    }
    let opt_f64 = |key: &str| -> Result<Option<f64>> {
        let e = get(key)?;
        if e.1 == "none" {
            Ok(None)
        } else {
            parse_meta(e, key).map(Some)
        }
    };
    let seed: u64 = parse_meta(get("seed")?, "seed")?;
    let epoch: usize = parse_meta(get("epochs")?, "epochs")?;
    let status: TrainStatus = parse_meta(get("status")?, "status")?;
    let fitness = opt_f64("fitness")?;
    let history_entry = get("loss_history")?;
    let loss_history = if history_entry.1.is_empty() {
        Vec::new()
    } else {
        history_entry
            .1
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| Error::format(history_entry.0, "bad meta.loss_history"))?
    };

    let expected = spec.params()?;
    if manifest.len() != expected.len() {
        return Err(Error::format(
            PREFIX_LEN as u64,
            format!("manifest lists {} tensors but the spec needs {}", manifest.len(), expected.len()),
        ));
    }
    let blob = &bytes[blob_start..];
    let mut params = BTreeMap::new();
    let mut cursor = 0usize;
    for ((here, entry), info) in manifest.iter().zip(&expected) {
        if entry.name != info.name || entry.shape != info.shape {
            return Err(Error::format(
                *here,
                format!(
                    "tensor `{}` {:?} does not match the spec's `{}` {:?}",
                    entry.name, entry.shape, info.name, info.shape
                ),
            ));
        }
        if entry.offset != cursor {
            return Err(Error::format(*here, format!("tensor `{}` offset {} should be {cursor}", entry.name, entry.offset)));
        }
        let n: usize = entry.shape.iter().product();
        let end = cursor + n * 4;
        if end > blob.len() {
            return Err(Error::format((blob_start + blob.len()) as u64, format!("tensor `{}` truncated", entry.name)));
        }
        let mut data = Vec::with_capacity(n);
        for (i, chunk) in blob[cursor..end].chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes(chunk.try_into().unwrap());
            if !v.is_finite() {
                return Err(Error::format(
                    (blob_start + cursor + 4 * i) as u64,
                    format!("non-finite value in tensor `{}`", entry.name),
                ));
            }
            data.push(v);
        }
        params.insert(entry.name.clone(), Tensor::new(entry.shape.clone(), data)?);
        cursor = end;
    }
    if cursor != blob.len() {
        return Err(Error::format((blob_start + cursor) as u64, "trailing bytes after the last tensor"));
    }
    let state = NetworkState {
        spec,
        params,
        epoch,
        seed,
        loss_history,
    };
    state.check_params()?;
    Ok(Checkpoint { state, status, fitness })
}

pub fn save_checkpoint(path: impl AsRef<Path>, ck: &Checkpoint) -> Result<()> {
    write_locked(path.as_ref(), &encode_checkpoint(ck)?)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path)?)
}
