//! Corpus and checkpoint file formats.
//!
//! Corpus files are UTF-8 text:
//!
//! ```text
//! cdcd-corpus v1
//! K=16 L=16 classes=4
//! 2<TAB>3 3 14 0 ...
//! ```
//!
//! Checkpoints are a text manifest followed by one little-endian `f64` blob
//! whose SHA-256 digest is recorded in the manifest.

use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::data::Dataset;
use crate::denoiser::{DenoiserConfig, Params};
use crate::diffusion::TokenSequence;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const CORPUS_MAGIC: &str = "cdcd-corpus v1";
const CKPT_MAGIC: &str = "cdcd-ckpt v1";

fn parse_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse { line, msg: msg.into() }
}

pub fn write_corpus(data: &Dataset) -> String {
    let mut s = format!(
        "{CORPUS_MAGIC}\nK={} L={} classes={}\n",
        data.codebook, data.seq_len, data.classes
    );
    for item in &data.items {
        let toks: Vec<String> = item.tokens.iter().map(|t| t.to_string()).collect();
        let _ = writeln!(s, "{}\t{}", item.class.unwrap_or(0), toks.join(" "));
    }
    s
}

fn header_field(part: Option<&str>, key: &str, line: usize) -> Result<usize> {
    let part = part.ok_or_else(|| parse_err(line, format!("missing {key}=")))?;
    let value = part
        .strip_prefix(key)
        .and_then(|r| r.strip_prefix('='))
        .ok_or_else(|| parse_err(line, format!("expected {key}=<int>, found '{part}'")))?;
    value
        .parse()
        .map_err(|_| parse_err(line, format!("{key} value '{value}' is not an integer")))
}

pub fn read_corpus(text: &str) -> Result<Dataset> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    match lines.next() {
        Some((_, l)) if l == CORPUS_MAGIC => {}
        Some((n, l)) => return Err(parse_err(n, format!("expected '{CORPUS_MAGIC}', found '{l}'"))),
        None => return Err(parse_err(1, "empty corpus file")),
    }
    let (n, header) = lines.next().ok_or_else(|| parse_err(2, "missing size header"))?;
    let mut parts = header.split_whitespace();
    let k = header_field(parts.next(), "K", n)?;
    let len = header_field(parts.next(), "L", n)?;
    let classes = header_field(parts.next(), "classes", n)?;
    if parts.next().is_some() {
        return Err(parse_err(n, "trailing fields in size header"));
    }
    let mut items = Vec::new();
    for (n, line) in lines {
        let (class, toks) = line
            .split_once('\t')
            .ok_or_else(|| parse_err(n, "expected '<class><TAB><tokens>'"))?;
        let class: usize = class
            .parse()
            .map_err(|_| parse_err(n, format!("class '{class}' is not an integer")))?;
        if class >= classes {
            return Err(parse_err(n, format!("class {class} >= {classes}")));
        }
        let tokens = toks
            .split(' ')
            .map(|t| {
                let v: usize = t.parse().map_err(|_| parse_err(n, format!("token '{t}' is not an integer")))?;
                if v >= k {
                    return Err(parse_err(n, format!("token {v} >= K={k}")));
                }
                Ok(v)
            })
            .collect::<Result<Vec<_>>>()?;
        if tokens.len() != len {
            return Err(parse_err(n, format!("{} tokens, expected L={len}", tokens.len())));
        }
        items.push(TokenSequence::new(tokens, Some(class)));
    }
    Dataset::new(k, len, classes, items)
}

/// Write through a temporary file and rename, so readers never see a
/// partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("partial");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn save_corpus(path: &Path, data: &Dataset) -> Result<()> {
    write_atomic(path, write_corpus(data).as_bytes())
}

pub fn load_corpus(path: &Path) -> Result<Dataset> {
    read_corpus(&std::fs::read_to_string(path)?)
}

fn model_line(c: &DenoiserConfig) -> String {
    format!(
        "model codebook={} states={} seq_len={} steps={} classes={} width={} blocks={} heads={} ff_mult={} seed={}",
        c.codebook, c.states, c.seq_len, c.steps, c.classes, c.width, c.blocks, c.heads, c.ff_mult, c.seed
    )
}

fn parse_model_line(line: &str) -> Result<DenoiserConfig> {
    let bad = || Error::Checkpoint(format!("malformed model line '{line}'"));
    let rest = line.strip_prefix("model ").ok_or_else(bad)?;
    let mut kv = std::collections::BTreeMap::new();
    for part in rest.split(' ') {
        let (k, v) = part.split_once('=').ok_or_else(bad)?;
        kv.insert(k, v);
    }
    let get = |k: &str| -> Result<u64> { kv.get(k).and_then(|v| v.parse().ok()).ok_or_else(bad) };
    Ok(DenoiserConfig {
        codebook: get("codebook")? as usize,
        states: get("states")? as usize,
        seq_len: get("seq_len")? as usize,
        steps: get("steps")? as usize,
        classes: get("classes")? as usize,
        width: get("width")? as usize,
        blocks: get("blocks")? as usize,
        heads: get("heads")? as usize,
        ff_mult: get("ff_mult")? as usize,
        seed: get("seed")?,
    })
}

/// Serialise parameters together with the run configuration snapshot.
pub fn encode_checkpoint(params: &Params, snapshot: &str) -> Vec<u8> {
    let mut blob = Vec::with_capacity(params.scalar_count() * 8);
    let mut manifest = format!("{CKPT_MAGIC}\n");
    let snap: Vec<&str> = snapshot.lines().collect();
    let _ = writeln!(manifest, "config {}", snap.len());
    for l in &snap {
        let _ = writeln!(manifest, "{l}");
    }
    let _ = writeln!(manifest, "{}", model_line(params.config()));
    let _ = writeln!(manifest, "tensors {}", params.len());
    for (name, t) in params.names().iter().zip(params.tensors()) {
        let offset = blob.len();
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        let shape: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        let shape = if shape.is_empty() { "scalar".to_string() } else { shape.join("x") };
        let _ = writeln!(manifest, "tensor {name} {shape} {offset} {}", blob.len() - offset);
    }
    let _ = writeln!(manifest, "sha256 {}", hex::encode(Sha256::digest(&blob)));
    let _ = writeln!(manifest, "blob {}", blob.len());
    let mut out = manifest.into_bytes();
    out.extend_from_slice(&blob);
    out
}

/// Inverse of [`encode_checkpoint`]: parameters and the config snapshot.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<(Params, String)> {
    let mut pos = 0usize;
    let mut next_line = || -> Result<&str> {
        let end = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Checkpoint("manifest ends early".into()))?;
        let line = std::str::from_utf8(&bytes[pos..pos + end])
            .map_err(|_| Error::Checkpoint("manifest is not UTF-8".into()))?;
        pos += end + 1;
        Ok(line)
    };
    let magic = next_line()?;
    if magic != CKPT_MAGIC {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version '{magic}'")));
    }
    let count = |line: &str, key: &str| -> Result<usize> {
        line.strip_prefix(key)
            .and_then(|r| r.strip_prefix(' '))
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Checkpoint(format!("expected '{key} <n>', found '{line}'")))
    };
    let n_cfg = count(next_line()?, "config")?;
    let mut snapshot = String::new();
    for _ in 0..n_cfg {
        snapshot.push_str(next_line()?);
        snapshot.push('\n');
    }
    let model = parse_model_line(next_line()?)?;
    let n_tensors = count(next_line()?, "tensors")?;
    let mut entries = Vec::with_capacity(n_tensors);
    for _ in 0..n_tensors {
        let line = next_line()?;
        let f: Vec<&str> = line.split(' ').collect();
        if f.len() != 5 || f[0] != "tensor" {
            return Err(Error::Checkpoint(format!("malformed tensor line '{line}'")));
        }
        let shape: Vec<usize> = if f[2] == "scalar" {
            vec![]
        } else {
            f[2].split('x')
                .map(|d| d.parse().map_err(|_| Error::Checkpoint(format!("bad shape '{}'", f[2]))))
                .collect::<Result<_>>()?
        };
        let offset: usize = f[3].parse().map_err(|_| Error::Checkpoint(format!("bad offset '{}'", f[3])))?;
        let length: usize = f[4].parse().map_err(|_| Error::Checkpoint(format!("bad length '{}'", f[4])))?;
        entries.push((f[1].to_string(), shape, offset, length));
    }
    let digest_line = next_line()?;
    let digest = digest_line
        .strip_prefix("sha256 ")
        .ok_or_else(|| Error::Checkpoint("missing digest".into()))?
        .to_string();
    let blob_len = count(next_line()?, "blob")?;
    let blob = &bytes[pos..];
    if blob.len() != blob_len || hex::encode(Sha256::digest(blob)) != digest {
        return Err(Error::Checkpoint(format!(
            "digest mismatch: blob has {} bytes, manifest declares {blob_len}",
            blob.len()
        )));
    }
    let mut named = Vec::with_capacity(entries.len());
    for (name, shape, offset, length) in entries {
        let n: usize = shape.iter().product();
        if length != n * 8 || offset.checked_add(length).map_or(true, |e| e > blob.len()) {
            return Err(Error::Checkpoint(format!("tensor '{name}' lies outside the blob")));
        }
        let data = blob[offset..offset + length]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        named.push((name, Tensor::new(shape, data)?));
    }
    let params = Params::from_tensors(model, named).map_err(|e| Error::Checkpoint(e.to_string()))?;
    Ok((params, snapshot))
}

pub fn save_checkpoint(path: &Path, params: &Params, snapshot: &str) -> Result<()> {
    write_atomic(path, &encode_checkpoint(params, snapshot))
}

pub fn load_checkpoint(path: &Path) -> Result<(Params, String)> {
    decode_checkpoint(&std::fs::read(path)?)
}

/// Hex SHA-256 of a byte string, used to compare artifacts.
pub fn digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_world, sample_dataset};
    use crate::denoiser::init_params;
    use crate::diffusion::ScheduleConfig;
    use crate::rng::RngStream;

    fn params() -> Params {
        let sc = ScheduleConfig::default();
        let mut dc = DenoiserConfig::new(&sc, 5, 3);
        dc.width = 8;
        dc.blocks = 1;
        dc.seed = 11;
        let mut p = init_params(&dc).unwrap();
        // non-trivial values in every tensor, including awkward floats
        for (i, t) in p.tensors_mut().iter_mut().enumerate() {
            for (j, v) in t.data_mut().iter_mut().enumerate() {
                *v += (i * 31 + j) as f64 * 1e-3 + f64::EPSILON;
            }
        }
        p
    }

    #[test]
    fn corpus_round_trip() {
        let w = make_world(3, 7, 9, 0.5, 1).unwrap();
        let d = sample_dataset(&w, 50, &RngStream::new(2));
        let text = write_corpus(&d);
        assert_eq!(read_corpus(&text).unwrap(), d);
    }

    #[test]
    fn empty_corpus_is_header_only() {
        let d = Dataset::new(4, 3, 2, vec![]).unwrap();
        let text = write_corpus(&d);
        assert_eq!(text.lines().count(), 2);
        assert_eq!(read_corpus(&text).unwrap(), d);
    }

    #[test]
    fn corpus_errors_carry_line_numbers() {
        let bad_token = "cdcd-corpus v1\nK=4 L=2 classes=2\n0\t1 2\n1\t3 4\n";
        assert!(matches!(read_corpus(bad_token), Err(Error::Parse { line: 4, .. })));
        let bad_class = "cdcd-corpus v1\nK=4 L=2 classes=2\n2\t1 2\n";
        assert!(matches!(read_corpus(bad_class), Err(Error::Parse { line: 3, .. })));
        let short = "cdcd-corpus v1\nK=4 L=2 classes=2\n0\t1\n";
        assert!(matches!(read_corpus(short), Err(Error::Parse { line: 3, .. })));
        assert!(matches!(read_corpus("cdcd-corpus v2\n"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(read_corpus("cdcd-corpus v1\nK=4 classes=2\n"), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let p = params();
        let snap = "a=1\nb.c=two\n";
        let bytes = encode_checkpoint(&p, snap);
        let (q, s) = decode_checkpoint(&bytes).unwrap();
        assert_eq!(s, snap);
        assert_eq!(q.names(), p.names());
        for (a, b) in p.tensors().iter().zip(q.tensors()) {
            assert_eq!(a.shape(), b.shape());
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert_eq!(encode_checkpoint(&q, &s), bytes);
    }

    #[test]
    fn manifest_lists_every_tensor() {
        let p = params();
        let bytes = encode_checkpoint(&p, "");
        let text = String::from_utf8_lossy(&bytes);
        assert_eq!(text.lines().filter(|l| l.starts_with("tensor ")).count(), p.len());
    }

    #[test]
    fn truncated_or_corrupt_blob_rejected() {
        let bytes = encode_checkpoint(&params(), "x=1\n");
        let cut = &bytes[..bytes.len() - 5];
        assert!(matches!(decode_checkpoint(cut), Err(Error::Checkpoint(_))));
        let mut flipped = bytes.clone();
        let last = flipped.len() - 1;
        flipped[last] ^= 1;
        assert!(matches!(decode_checkpoint(&flipped), Err(Error::Checkpoint(_))));
        let mut version = bytes;
        version[10] = b'9';
        assert!(matches!(decode_checkpoint(&version), Err(Error::Checkpoint(_))));
    }
}
