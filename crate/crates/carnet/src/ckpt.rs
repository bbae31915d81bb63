//! Checkpoints: a text manifest (format version, config echo, one line per
//! parameter with shape/dtype/offset/sha256) followed by the raw little-endian
//! payload. Saves are byte-deterministic, loads verify every checksum.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use sha2::{Digest, Sha256};

use crate::tensor::{Dtype, Elem, PTensor, Params};

const MAGIC: &str = "CARNET1";

fn to_bytes<E: Elem>(data: &[E]) -> Vec<u8> {
    let mut out = Vec::with_capacity(data.len() * E::DTYPE.size_bytes());
    for v in data {
        out.extend(v.to_le_bytes_vec());
    }
    out
}

fn sha_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    format!("{:x}", h.finalize())
}

/// Write `params` plus config echo lines to `path`.
pub fn save<E: Elem>(path: &Path, params: &Params<E>, config: &[(String, String)]) -> Result<()> {
    let mut manifest = String::new();
    manifest.push_str(MAGIC);
    manifest.push('\n');
    for (k, v) in config {
        manifest.push_str(&format!("cfg {k} = {v}\n"));
    }
    let mut payload = Vec::new();
    for (name, t) in params.iter() {
        let bytes = to_bytes(&t.data);
        let shape = t
            .shape
            .iter()
            .map(|d| d.to_string())
            .collect::<Vec<_>>()
            .join("x");
        let shape = if shape.is_empty() { "scalar".into() } else { shape };
        manifest.push_str(&format!(
            "param {name} {} {shape} {} {} {}\n",
            E::DTYPE.name(),
            payload.len(),
            bytes.len(),
            sha_hex(&bytes),
        ));
        payload.extend(bytes);
    }
    manifest.push_str(&format!("payload {}\n", payload.len()));
    let mut out = manifest.into_bytes();
    out.extend(payload);
    fs::write(path, out).with_context(|| format!("writing checkpoint {}", path.display()))?;
    Ok(())
}

/// Load a checkpoint saved by [`save`] with the same element type.
pub fn load<E: Elem>(path: &Path) -> Result<(Params<E>, Vec<(String, String)>)> {
    let bytes =
        fs::read(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
    // the manifest ends at the "payload <n>" line
    let mut pos = 0;
    let mut lines: Vec<(usize, &str)> = Vec::new();
    loop {
        let end = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .context("unterminated checkpoint manifest")?;
        let line = std::str::from_utf8(&bytes[pos..pos + end]).context("manifest not UTF-8")?;
        pos += end + 1;
        lines.push((pos, line));
        if line.starts_with("payload ") {
            break;
        }
    }
    let (payload_start, payload_line) = *lines.last().unwrap();
    let payload_len: usize = payload_line["payload ".len()..]
        .trim()
        .parse()
        .context("payload length")?;
    if bytes.len() != payload_start + payload_len {
        bail!(
            "truncated checkpoint: payload {} of {} bytes",
            bytes.len().saturating_sub(payload_start),
            payload_len
        );
    }
    let payload = &bytes[payload_start..];

    if lines[0].1 != MAGIC {
        bail!("unsupported checkpoint version '{}', want {MAGIC}", lines[0].1);
    }
    let mut config = Vec::new();
    let mut params = Params::new();
    for &(_, line) in &lines[1..lines.len() - 1] {
        if let Some(rest) = line.strip_prefix("cfg ") {
            let (k, v) = rest.split_once(" = ").context("malformed config line")?;
            config.push((k.to_string(), v.to_string()));
            continue;
        }
        let rest = line
            .strip_prefix("param ")
            .with_context(|| format!("unexpected manifest line '{line}'"))?;
        let f: Vec<&str> = rest.split(' ').collect();
        if f.len() != 6 {
            bail!("malformed param line '{line}'");
        }
        let (name, dtype, shape_s, off_s, len_s, sum) = (f[0], f[1], f[2], f[3], f[4], f[5]);
        let dtype = Dtype::parse(dtype).with_context(|| format!("dtype '{dtype}'"))?;
        if dtype != E::DTYPE {
            bail!(
                "parameter '{name}' stored as {} but loading as {}",
                dtype.name(),
                E::DTYPE.name()
            );
        }
        let shape: Vec<usize> = if shape_s == "scalar" {
            vec![]
        } else {
            shape_s
                .split('x')
                .map(|d| d.parse().context("shape dim"))
                .collect::<Result<_>>()?
        };
        let off: usize = off_s.parse()?;
        let len: usize = len_s.parse()?;
        if off + len > payload.len() {
            bail!("parameter '{name}' extends past the payload");
        }
        let chunk = &payload[off..off + len];
        if sha_hex(chunk) != sum {
            bail!("checksum mismatch for parameter '{name}'");
        }
        let esz = E::DTYPE.size_bytes();
        let data: Vec<E> = chunk.chunks_exact(esz).map(E::from_le_slice).collect();
        if data.len() != shape.iter().product::<usize>() {
            bail!("parameter '{name}': {} values for shape {shape:?}", data.len());
        }
        params.insert(name, PTensor::new(shape, data));
    }
    Ok((params, config))
}

/// Check that `loaded` provides every tensor of `reference` with matching
/// shape, naming both shapes on mismatch.
pub fn check_compatible<E: Elem>(loaded: &Params<E>, reference: &Params<E>) -> Result<()> {
    for (name, t) in reference.iter() {
        match loaded.get(name) {
            None => bail!("checkpoint is missing parameter '{name}'"),
            Some(l) if l.shape != t.shape => bail!(
                "parameter '{name}': checkpoint shape {:?} vs model shape {:?}",
                l.shape,
                t.shape
            ),
            _ => {}
        }
    }
    Ok(())
}
