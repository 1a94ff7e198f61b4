//! On-disk trace layout.
//!
//! ```text
//! <root>/manifest.json
//! <root>/records/<example_id>/meta.json
//! <root>/records/<example_id>/attn_greedy.bin
//! <root>/records/<example_id>/attn_sample_<n>.bin
//! ```
//!
//! Every `.bin` blob starts with a 32-byte little-endian header
//! (`RPPL`, version, L, h, T, dtype, 8 reserved bytes) followed by
//! `L·h·T·T` row-major `f32` values.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{
    is_valid_example_id, AttentionStack, AuxSignals, DisplayTokens, GenerationTrace,
    SampledGeneration, TraceDataset,
};
use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"RPPL";
pub const FORMAT_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 32;
const DTYPE_F32: u32 = 0;

const MANIFEST_FILE: &str = "manifest.json";
const RECORDS_DIR: &str = "records";
const META_FILE: &str = "meta.json";
const GREEDY_BLOB: &str = "attn_greedy.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub dataset: String,
    pub model: String,
    pub n_samples: usize,
    pub temperature: f64,
    pub top_k: u32,
    pub top_p: f64,
    pub format_version: u32,
    /// Record order. When absent, record directories are read in
    /// lexicographic order.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub records: Option<Vec<String>>,
}

impl Manifest {
    /// Manifest with the sampling settings used for the published runs.
    pub fn new(dataset: impl Into<String>, model: impl Into<String>, n_samples: usize) -> Self {
        Self {
            dataset: dataset.into(),
            model: model.into(),
            n_samples,
            temperature: 1.0,
            top_k: 50,
            top_p: 0.99,
            format_version: FORMAT_VERSION,
            records: None,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported format_version {}",
                self.format_version
            )));
        }
        if self.n_samples < 2 {
            return Err(Error::Format(format!(
                "n_samples = {} but at least two sampled generations are required",
                self.n_samples
            )));
        }
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(Error::Format(format!(
                "invalid temperature {}",
                self.temperature
            )));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::Format(format!("invalid top_p {}", self.top_p)));
        }
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct RecordMeta {
    example_id: String,
    input_len: usize,
    greedy_tokens: Vec<u32>,
    greedy_logprobs: Vec<f64>,
    #[serde(default)]
    greedy_text: String,
    samples: Vec<SampledGeneration>,
    #[serde(default)]
    aux: AuxSignals,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    slice: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    display: Option<DisplayTokens>,
}

pub fn encode_attention(stack: &AttentionStack) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + stack.values().len() * 4);
    out.extend_from_slice(&MAGIC);
    for field in [
        FORMAT_VERSION,
        dim_u32(stack.layers()),
        dim_u32(stack.heads()),
        dim_u32(stack.seq_len()),
        DTYPE_F32,
    ] {
        out.extend_from_slice(&field.to_le_bytes());
    }
    out.extend_from_slice(&0u64.to_le_bytes());
    for v in stack.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn dim_u32(d: usize) -> u32 {
    u32::try_from(d).expect("attention dimension exceeds u32")
}

pub fn decode_attention(bytes: &[u8]) -> Result<AttentionStack> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format(format!(
            "attention blob is {} bytes, shorter than the header",
            bytes.len()
        )));
    }
    if bytes[0..4] != MAGIC {
        return Err(Error::Format("bad magic, expected `RPPL`".into()));
    }
    let word = |i: usize| {
        let off = 4 + 4 * i;
        u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap())
    };
    let (version, layers, heads, seq_len, dtype) = (word(0), word(1), word(2), word(3), word(4));
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported blob version {version}")));
    }
    if dtype != DTYPE_F32 {
        return Err(Error::Format(format!("unsupported dtype code {dtype}")));
    }
    let count = (layers as usize)
        .checked_mul(heads as usize)
        .and_then(|x| x.checked_mul(seq_len as usize))
        .and_then(|x| x.checked_mul(seq_len as usize))
        .ok_or_else(|| Error::Format("attention shape overflows".into()))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != count * 4 {
        return Err(Error::Format(format!(
            "payload is {} bytes, header implies {}",
            payload.len(),
            count * 4
        )));
    }
    let values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    AttentionStack::new(layers as usize, heads as usize, seq_len as usize, values)
}

pub fn read_attention(path: &Path) -> Result<AttentionStack> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_attention(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn write_attention(path: &Path, stack: &AttentionStack) -> Result<()> {
    fs::write(path, encode_attention(stack)).map_err(|e| Error::io(path, e))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Lazily reads records from a dataset directory. Each yielded trace has
/// passed [`GenerationTrace::validate`] and the manifest sample-count check.
#[derive(Debug, Clone)]
pub struct DatasetReader {
    root: PathBuf,
    manifest: Manifest,
    ids: Vec<String>,
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<DatasetReader> {
    let root = path.as_ref().to_path_buf();
    let manifest: Manifest = read_json(&root.join(MANIFEST_FILE))?;
    manifest.validate()?;
    let ids = match &manifest.records {
        Some(ids) => ids.clone(),
        None => {
            let dir = root.join(RECORDS_DIR);
            let mut ids = Vec::new();
            if dir.exists() {
                for entry in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
                    let entry = entry.map_err(|e| Error::io(&dir, e))?;
                    if entry.path().is_dir() {
                        ids.push(entry.file_name().to_string_lossy().into_owned());
                    }
                }
            }
            ids.sort();
            ids
        }
    };
    if let Some(bad) = ids.iter().find(|id| !is_valid_example_id(id)) {
        return Err(Error::Format(format!(
            "invalid example id `{bad}` in manifest"
        )));
    }
    Ok(DatasetReader {
        root,
        manifest,
        ids,
    })
}

impl DatasetReader {
    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Directory holding one record's metadata and attention blobs.
    pub fn record_dir(&self, example_id: &str) -> PathBuf {
        self.root.join(RECORDS_DIR).join(example_id)
    }

    pub fn load(&self, example_id: &str) -> Result<GenerationTrace> {
        let dir = self.record_dir(example_id);
        let meta: RecordMeta = read_json(&dir.join(META_FILE))?;
        if meta.example_id != example_id {
            return Err(Error::Format(format!(
                "record directory `{example_id}` holds example `{}`",
                meta.example_id
            )));
        }
        if meta.samples.len() != self.manifest.n_samples {
            return Err(Error::Format(format!(
                "{example_id}: manifest declares {} samples, record has {}",
                self.manifest.n_samples,
                meta.samples.len()
            )));
        }
        let attn = (0..meta.samples.len())
            .map(|n| read_attention(&dir.join(format!("attn_sample_{n}.bin"))))
            .collect::<Result<Vec<_>>>()?;
        let greedy_attn = read_attention(&dir.join(GREEDY_BLOB))?;
        let trace = GenerationTrace {
            example_id: meta.example_id,
            input_len: meta.input_len,
            greedy_tokens: meta.greedy_tokens,
            greedy_logprobs: meta.greedy_logprobs,
            greedy_text: meta.greedy_text,
            samples: meta.samples,
            attn,
            greedy_attn,
            aux: meta.aux,
            slice: meta.slice,
            display: meta.display,
        };
        trace.validate()?;
        Ok(trace)
    }

    pub fn records(&self) -> impl Iterator<Item = Result<GenerationTrace>> + '_ {
        self.ids.iter().map(move |id| self.load(id))
    }

    pub fn load_all(&self) -> Result<TraceDataset> {
        Ok(TraceDataset {
            manifest: self.manifest.clone(),
            records: self.records().collect::<Result<_>>()?,
        })
    }
}

pub fn write_dataset(ds: &TraceDataset, path: impl AsRef<Path>) -> Result<()> {
    let root = path.as_ref();
    let records_dir = root.join(RECORDS_DIR);
    fs::create_dir_all(&records_dir).map_err(|e| Error::io(&records_dir, e))?;
    let mut manifest = ds.manifest.clone();
    manifest.records = Some(ds.records.iter().map(|r| r.example_id.clone()).collect());
    write_json(&root.join(MANIFEST_FILE), &manifest)?;
    for record in &ds.records {
        if !is_valid_example_id(&record.example_id) {
            return Err(Error::Format(format!(
                "invalid example id `{}`",
                record.example_id
            )));
        }
        let dir = records_dir.join(&record.example_id);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let meta = RecordMeta {
            example_id: record.example_id.clone(),
            input_len: record.input_len,
            greedy_tokens: record.greedy_tokens.clone(),
            greedy_logprobs: record.greedy_logprobs.clone(),
            greedy_text: record.greedy_text.clone(),
            samples: record.samples.clone(),
            aux: record.aux.clone(),
            slice: record.slice.clone(),
            display: record.display.clone(),
        };
        write_json(&dir.join(META_FILE), &meta)?;
        for (n, stack) in record.attn.iter().enumerate() {
            write_attention(&dir.join(format!("attn_sample_{n}.bin")), stack)?;
        }
        write_attention(&dir.join(GREEDY_BLOB), &record.greedy_attn)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::make_synthetic_trace;

    #[test]
    fn header_layout_is_exact() {
        let stack = AttentionStack::new(2, 3, 1, vec![1.0; 6]).unwrap();
        let bytes = encode_attention(&stack);
        assert_eq!(&bytes[0..4], b"RPPL");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(bytes[16..20].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[20..24].try_into().unwrap()), 0);
        assert_eq!(&bytes[24..32], &[0u8; 8]);
        assert_eq!(bytes.len(), 32 + 6 * 4);
        assert_eq!(&bytes[32..36], &1.0f32.to_le_bytes());
    }

    #[test]
    fn bad_magic_is_format_error() {
        let stack = AttentionStack::new(1, 1, 1, vec![1.0]).unwrap();
        let mut bytes = encode_attention(&stack);
        bytes[0] = b'X';
        assert!(matches!(decode_attention(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn bad_version_and_dtype_are_format_errors() {
        let stack = AttentionStack::new(1, 1, 1, vec![1.0]).unwrap();
        let mut bytes = encode_attention(&stack);
        bytes[4] = 9;
        assert!(matches!(decode_attention(&bytes), Err(Error::Format(_))));
        let mut bytes = encode_attention(&stack);
        bytes[20] = 1;
        assert!(matches!(decode_attention(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn truncated_payload_is_format_error() {
        let stack = AttentionStack::new(1, 1, 2, vec![1.0, 0.0, 0.5, 0.5]).unwrap();
        let bytes = encode_attention(&stack);
        assert!(matches!(
            decode_attention(&bytes[..bytes.len() - 1]),
            Err(Error::Format(_))
        ));
        assert!(matches!(
            decode_attention(&bytes[..10]),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn empty_dataset_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let ds = TraceDataset {
            manifest: Manifest::new("empty", "none", 10),
            records: vec![],
        };
        write_dataset(&ds, dir.path()).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert!(back.is_empty());
        assert_eq!(back.manifest().n_samples, 10);
    }

    #[test]
    fn manifest_with_one_sample_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let ds = TraceDataset {
            manifest: Manifest::new("d", "m", 1),
            records: vec![],
        };
        write_dataset(&ds, dir.path()).unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(Error::Format(_))));
    }

    #[test]
    fn records_without_order_are_read_sorted() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = make_synthetic_trace(1, 2, &[2, 2], 0.0);
        a.example_id = "b".into();
        let mut b = make_synthetic_trace(2, 2, &[2, 2], 0.0);
        b.example_id = "a".into();
        let ds = TraceDataset {
            manifest: Manifest::new("d", "m", 2),
            records: vec![a, b],
        };
        write_dataset(&ds, dir.path()).unwrap();
        let mut manifest: Manifest = read_json(&dir.path().join(MANIFEST_FILE)).unwrap();
        manifest.records = None;
        write_json(&dir.path().join(MANIFEST_FILE), &manifest).unwrap();
        let reader = read_dataset(dir.path()).unwrap();
        assert_eq!(reader.ids(), ["a", "b"]);
    }
}
