//! Single-file checkpoints: a text header naming every parameter blob,
//! followed by raw little-endian data. The blob region starts with the
//! run-config snapshot; each parameter stores values then both Adam
//! moments. Saving is deterministic, so save, load, save again is
//! byte-identical.

use std::collections::HashMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::optim::Parameter;
use crate::scalar::Scalar;

const MAGIC: &str = "DTGRMCKPT 1";
const END_HEADER: &str = "end_header\n";

fn render_shape(shape: &[usize]) -> String {
    shape
        .iter()
        .map(usize::to_string)
        .collect::<Vec<_>>()
        .join("x")
}

fn parse_shape(text: &str) -> Result<Vec<usize>> {
    text.split('x')
        .map(|d| {
            d.parse::<usize>()
                .map_err(|_| Error::Checkpoint(format!("bad shape token {text:?}")))
        })
        .collect()
}

pub fn save<T: Scalar>(
    path: &Path,
    params: &[&Parameter<T>],
    epoch: usize,
    config: &RunConfig,
) -> Result<()> {
    let config_text = config.to_toml();
    let mut blob: Vec<u8> = config_text.as_bytes().to_vec();
    let mut param_lines = String::new();
    for p in params {
        assert!(
            !p.name().chars().any(char::is_whitespace),
            "parameter names must not contain whitespace"
        );
        let shape = p.shape();
        assert!(!shape.is_empty(), "{}: scalar parameters unsupported", p.name());
        let offset = blob.len();
        let (m, v, step) = p.optimizer_state();
        for &x in p.values().iter() {
            x.write_le(&mut blob);
        }
        for &x in m {
            x.write_le(&mut blob);
        }
        for &x in v {
            x.write_le(&mut blob);
        }
        param_lines.push_str(&format!(
            "param {} {} {} {}\n",
            p.name(),
            offset,
            step,
            render_shape(&shape)
        ));
    }
    let checksum = Sha256::digest(&blob);
    let mut out = String::new();
    out.push_str(MAGIC);
    out.push('\n');
    out.push_str(&format!("dtype {}\n", T::DTYPE));
    out.push_str(&format!("epoch {epoch}\n"));
    out.push_str(&format!("config_bytes {}\n", config_text.len()));
    out.push_str(&format!("blob_sha256 {checksum:x}\n"));
    out.push_str(&param_lines);
    out.push_str(END_HEADER);
    let mut bytes = out.into_bytes();
    bytes.extend_from_slice(&blob);
    std::fs::write(path, bytes)?;
    Ok(())
}

struct ParamEntry {
    offset: usize,
    step: u64,
    shape: Vec<usize>,
}

struct Parsed {
    dtype: String,
    epoch: usize,
    config_bytes: usize,
    entries: Vec<(String, ParamEntry)>,
    blob: Vec<u8>,
}

fn parse_file(path: &Path) -> Result<Parsed> {
    let bytes = std::fs::read(path)?;
    let split = bytes
        .windows(END_HEADER.len())
        .position(|w| w == END_HEADER.as_bytes())
        .ok_or_else(|| Error::Checkpoint("missing end_header marker".into()))?;
    let header = std::str::from_utf8(&bytes[..split])
        .map_err(|_| Error::Checkpoint("header is not utf-8".into()))?;
    let blob = bytes[split + END_HEADER.len()..].to_vec();

    let mut lines = header.lines();
    if lines.next() != Some(MAGIC) {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let mut dtype = None;
    let mut epoch = None;
    let mut config_bytes = None;
    let mut checksum = None;
    let mut entries = Vec::new();
    for line in lines {
        let mut tok = line.split_whitespace();
        match tok.next() {
            Some("dtype") => dtype = tok.next().map(str::to_string),
            Some("epoch") => {
                epoch = Some(tok.next().and_then(|t| t.parse().ok()).ok_or_else(|| {
                    Error::Checkpoint("bad epoch line".into())
                })?)
            }
            Some("config_bytes") => {
                config_bytes =
                    Some(tok.next().and_then(|t| t.parse().ok()).ok_or_else(|| {
                        Error::Checkpoint("bad config_bytes line".into())
                    })?)
            }
            Some("blob_sha256") => checksum = tok.next().map(str::to_string),
            Some("param") => {
                let name = tok
                    .next()
                    .ok_or_else(|| Error::Checkpoint("param line missing name".into()))?;
                let offset = tok
                    .next()
                    .and_then(|t| t.parse().ok())
                    .ok_or_else(|| Error::Checkpoint(format!("{name}: bad offset")))?;
                let step = tok
                    .next()
                    .and_then(|t| t.parse().ok())
                    .ok_or_else(|| Error::Checkpoint(format!("{name}: bad step")))?;
                let shape = parse_shape(
                    tok.next()
                        .ok_or_else(|| Error::Checkpoint(format!("{name}: missing shape")))?,
                )?;
                entries.push((name.to_string(), ParamEntry { offset, step, shape }));
            }
            Some(other) => {
                return Err(Error::Checkpoint(format!("unknown header line {other:?}")))
            }
            None => {}
        }
    }
    let checksum = checksum.ok_or_else(|| Error::Checkpoint("missing checksum".into()))?;
    let actual = format!("{:x}", Sha256::digest(&blob));
    if actual != checksum {
        return Err(Error::Checkpoint("checksum mismatch, file corrupted".into()));
    }
    Ok(Parsed {
        dtype: dtype.ok_or_else(|| Error::Checkpoint("missing dtype".into()))?,
        epoch: epoch.ok_or_else(|| Error::Checkpoint("missing epoch".into()))?,
        config_bytes: config_bytes
            .ok_or_else(|| Error::Checkpoint("missing config_bytes".into()))?,
        entries,
        blob,
    })
}

/// Precision recorded in a checkpoint, for binary dispatch: 32 or 64.
pub fn peek_precision(path: &Path) -> Result<u32> {
    match parse_file(path)?.dtype.as_str() {
        "f32" => Ok(32),
        "f64" => Ok(64),
        other => Err(Error::Checkpoint(format!("unknown dtype {other:?}"))),
    }
}

/// Epoch and embedded config, without touching any parameter data.
pub fn peek_config(path: &Path) -> Result<(RunConfig, usize)> {
    let parsed = parse_file(path)?;
    if parsed.config_bytes > parsed.blob.len() {
        return Err(Error::Checkpoint("config snapshot truncated".into()));
    }
    let text = std::str::from_utf8(&parsed.blob[..parsed.config_bytes])
        .map_err(|_| Error::Checkpoint("config snapshot is not utf-8".into()))?;
    Ok((RunConfig::from_toml(text)?, parsed.epoch))
}

#[derive(Debug)]
pub struct LoadedCheckpoint {
    pub epoch: usize,
    pub config: RunConfig,
}

/// Restores every parameter's values and optimizer state in place. The
/// checkpoint must cover exactly the given parameter set at the same
/// shapes and dtype.
pub fn load<T: Scalar>(path: &Path, params: Vec<&mut Parameter<T>>) -> Result<LoadedCheckpoint> {
    let parsed = parse_file(path)?;
    if parsed.dtype != T::DTYPE {
        return Err(Error::Checkpoint(format!(
            "precision mismatch: checkpoint holds {}, expected {}",
            parsed.dtype,
            T::DTYPE
        )));
    }
    if parsed.config_bytes > parsed.blob.len() {
        return Err(Error::Checkpoint("config snapshot truncated".into()));
    }
    let config_text = std::str::from_utf8(&parsed.blob[..parsed.config_bytes])
        .map_err(|_| Error::Checkpoint("config snapshot is not utf-8".into()))?;
    let config = RunConfig::from_toml(config_text)?;

    let mut by_name: HashMap<&str, &ParamEntry> = parsed
        .entries
        .iter()
        .map(|(n, e)| (n.as_str(), e))
        .collect();
    if by_name.len() != parsed.entries.len() {
        return Err(Error::Checkpoint("duplicate parameter name".into()));
    }
    if by_name.len() != params.len() {
        return Err(Error::Checkpoint(format!(
            "parameter count mismatch: checkpoint holds {}, model has {}",
            by_name.len(),
            params.len()
        )));
    }
    for p in params {
        let entry = by_name.remove(p.name()).ok_or_else(|| {
            Error::Checkpoint(format!("checkpoint is missing parameter {}", p.name()))
        })?;
        if entry.shape != p.shape() {
            return Err(Error::Checkpoint(format!(
                "{}: shape mismatch (checkpoint {:?}, model {:?})",
                p.name(),
                entry.shape,
                p.shape()
            )));
        }
        let n = p.numel();
        let needed = 3 * n * T::WIDTH;
        let end = entry.offset.checked_add(needed).filter(|&e| e <= parsed.blob.len());
        let end = end.ok_or_else(|| {
            Error::Checkpoint(format!("{}: blob out of bounds", p.name()))
        })?;
        let region = &parsed.blob[entry.offset..end];
        let read_run = |run: usize| -> Vec<T> {
            (0..n)
                .map(|i| T::read_le(&region[(run * n + i) * T::WIDTH..]))
                .collect()
        };
        let values = read_run(0);
        let m = read_run(1);
        let v = read_run(2);
        p.load_state(values, m, v, entry.step);
    }
    Ok(LoadedCheckpoint {
        epoch: parsed.epoch,
        config,
    })
}
