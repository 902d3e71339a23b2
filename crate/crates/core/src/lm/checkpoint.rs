//! Single-file checkpoint container.
//!
//! Layout: a UTF-8 manifest (magic line, `key: value` lines, one
//! `tensor: <name> <shape> <offset> <len>` line per tensor), a line that is
//! exactly `blob`, then the concatenated little-endian f32 payloads. Offsets
//! are byte positions inside the blob and must tile it exactly. Round-trips
//! are bit-exact because no value ever leaves f32.

use std::collections::BTreeMap;
use std::path::Path;

use crate::lm::{LmConfig, LmParams, Vocab};
use crate::numkit::Tensor;
use crate::{Error, Result};

const MAGIC: &str = "rudder-container v1";

#[derive(Debug)]
pub(crate) struct Container {
    pub kv: Vec<(String, String)>,
    pub tensors: Vec<(String, Vec<usize>, Vec<f32>)>,
}

impl Container {
    pub fn get(&self, key: &str) -> Result<&str> {
        self.kv
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::Checkpoint(format!("missing manifest key {key}")))
    }

    pub fn get_u64(&self, key: &str) -> Result<u64> {
        self.get(key)?
            .parse()
            .map_err(|_| Error::Checkpoint(format!("manifest key {key} is not an integer")))
    }
}

fn shape_str(shape: &[usize]) -> String {
    shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
}

fn parse_shape(s: &str) -> Result<Vec<usize>> {
    s.split('x')
        .map(|d| d.parse().map_err(|_| Error::Checkpoint(format!("bad shape {s}"))))
        .collect()
}

pub(crate) fn write_container(path: &Path, c: &Container) -> Result<()> {
    let mut manifest = String::new();
    manifest.push_str(MAGIC);
    manifest.push('\n');
    for (k, v) in &c.kv {
        if k.contains(['\n', ':']) || v.contains('\n') {
            return Err(Error::Checkpoint(format!("manifest entry {k} contains a delimiter")));
        }
        manifest.push_str(&format!("{k}: {v}\n"));
    }
    let mut offset = 0usize;
    for (name, shape, data) in &c.tensors {
        if name.contains([' ', '\n']) {
            return Err(Error::Checkpoint(format!("tensor name {name:?} contains a delimiter")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Checkpoint(format!("tensor {name}: shape/data mismatch")));
        }
        let len = 4 * data.len();
        manifest.push_str(&format!("tensor: {name} {} {offset} {len}\n", shape_str(shape)));
        offset += len;
    }
    manifest.push_str("blob\n");

    let mut bytes = manifest.into_bytes();
    bytes.reserve(offset);
    for (_, _, data) in &c.tensors {
        for x in data {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

pub(crate) fn read_container(path: &Path) -> Result<Container> {
    let bytes = std::fs::read(path)?;
    // The manifest ends at the first line that is exactly `blob`.
    let marker: &[u8] = b"blob\n";
    let mut split = None;
    let mut line_start = 0usize;
    while line_start < bytes.len() {
        if bytes[line_start..].starts_with(marker) {
            split = Some(line_start);
            break;
        }
        match bytes[line_start..].iter().position(|&b| b == b'\n') {
            Some(nl) => line_start += nl + 1,
            None => break,
        }
    }
    let split = split.ok_or_else(|| Error::Checkpoint("no blob marker".into()))?;
    let manifest = std::str::from_utf8(&bytes[..split])
        .map_err(|_| Error::Checkpoint("manifest is not UTF-8".into()))?;
    let blob = &bytes[split + marker.len()..];

    let mut lines = manifest.lines();
    if lines.next() != Some(MAGIC) {
        return Err(Error::Checkpoint("bad magic line".into()));
    }
    let mut kv = Vec::new();
    let mut specs: Vec<(String, Vec<usize>, usize, usize)> = Vec::new();
    for line in lines {
        let (key, value) = line
            .split_once(": ")
            .ok_or_else(|| Error::Checkpoint(format!("unparseable manifest line {line:?}")))?;
        if key == "tensor" {
            let parts: Vec<&str> = value.split(' ').collect();
            let [name, shape, offset, len] = parts[..] else {
                return Err(Error::Checkpoint(format!("bad tensor line {line:?}")));
            };
            let shape = parse_shape(shape)?;
            let offset: usize =
                offset.parse().map_err(|_| Error::Checkpoint("bad tensor offset".into()))?;
            let len: usize =
                len.parse().map_err(|_| Error::Checkpoint("bad tensor length".into()))?;
            specs.push((name.to_string(), shape, offset, len));
        } else {
            kv.push((key.to_string(), value.to_string()));
        }
    }

    let mut expected_offset = 0usize;
    let mut tensors = Vec::with_capacity(specs.len());
    for (name, shape, offset, len) in specs {
        let n: usize = shape.iter().product();
        if offset != expected_offset || len != 4 * n {
            return Err(Error::Checkpoint(format!("tensor {name}: offsets do not tile the blob")));
        }
        expected_offset += len;
        let end = offset + len;
        if end > blob.len() {
            return Err(Error::Checkpoint(format!("tensor {name}: blob truncated")));
        }
        let data: Vec<f32> = blob[offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tensors.push((name, shape, data));
    }
    if expected_offset != blob.len() {
        return Err(Error::Checkpoint(format!(
            "blob has {} bytes, manifest accounts for {expected_offset}",
            blob.len()
        )));
    }
    Ok(Container { kv, tensors })
}

pub fn save_model(path: &Path, params: &LmParams, vocab: &Vocab) -> Result<()> {
    let c = &params.config;
    let kv = vec![
        ("format".to_string(), "lm".to_string()),
        ("vocab".to_string(), vocab.content_chars().to_string()),
        ("vocab_size".to_string(), c.vocab_size.to_string()),
        ("context_length".to_string(), c.context_length.to_string()),
        ("n_layers".to_string(), c.n_layers.to_string()),
        ("d_model".to_string(), c.d_model.to_string()),
        ("n_heads".to_string(), c.n_heads.to_string()),
        ("d_ff".to_string(), c.d_ff.to_string()),
        ("seed".to_string(), c.seed.to_string()),
        ("trainable".to_string(), if params.trainable() { "1" } else { "0" }.to_string()),
    ];
    let tensors = params
        .tensors()
        .iter()
        .map(|(k, t)| (k.clone(), t.shape().to_vec(), t.data().to_vec()))
        .collect();
    write_container(path, &Container { kv, tensors })
}

pub fn load_model(path: &Path) -> Result<(LmParams, Vocab)> {
    let c = read_container(path)?;
    if c.get("format")? != "lm" {
        return Err(Error::Checkpoint(format!("not a model checkpoint: format {}", c.get("format")?)));
    }
    let cfg = LmConfig {
        vocab_size: c.get_u64("vocab_size")? as usize,
        context_length: c.get_u64("context_length")? as usize,
        n_layers: c.get_u64("n_layers")? as usize,
        d_model: c.get_u64("d_model")? as usize,
        n_heads: c.get_u64("n_heads")? as usize,
        d_ff: c.get_u64("d_ff")? as usize,
        seed: c.get_u64("seed")?,
    };
    let vocab = Vocab::new(c.get("vocab")?)?;
    if vocab.size() != cfg.vocab_size {
        return Err(Error::Checkpoint(format!(
            "vocab has {} symbols, config says {}",
            vocab.size(),
            cfg.vocab_size
        )));
    }
    let trainable = match c.get("trainable")? {
        "1" => true,
        "0" => false,
        other => return Err(Error::Checkpoint(format!("bad trainable flag {other:?}"))),
    };
    let mut tensors = BTreeMap::new();
    for (name, shape, data) in c.tensors {
        tensors.insert(name, Tensor::new(shape, data)?);
    }
    let params = LmParams::from_parts(cfg, tensors, trainable)?;
    Ok((params, vocab))
}
