//! Persistence for representation traces and analysis outputs.
//!
//! # MITC layout
//!
//! All integers are little-endian `u32`, all matrix entries little-endian
//! IEEE-754 `f32`, row-major, with no padding:
//!
//! | field            | size                                   |
//! |------------------|----------------------------------------|
//! | magic `MITC`     | 4                                      |
//! | version (= 1)    | 4                                      |
//! | T, d, m, V       | 4 each                                 |
//! | flags            | 4 (bit0 token ids, bit1 string table)  |
//! | step matrix      | 4·T·d                                  |
//! | gold matrix      | 4·m·d                                  |
//! | token ids        | 4·T, when bit0 is set                  |
//! | string table     | count, then (len, UTF-8 bytes) entries |
//! | CRC-32           | 4, over every preceding byte           |
//!
//! Free-form metadata and the gold pooling mode live in an optional JSON
//! sidecar next to the binary file (same basename, `.json` extension).

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::{Error, Result};
use crate::hsic::MiSequence;
use crate::trajectory::PeakReport;

pub const MAGIC: [u8; 4] = *b"MITC";
pub const VERSION: u32 = 1;
pub const FLAG_TOKEN_IDS: u32 = 1;
pub const FLAG_STRING_TABLE: u32 = 1 << 1;
const HEADER_LEN: usize = 28;

/// Named failures when decoding a binary container (traces or weights).
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("bad magic {found:02x?}, expected {expected:?}")]
    BadMagic { expected: &'static str, found: Vec<u8> },

    #[error("unsupported version {0}")]
    UnsupportedVersion(u32),

    #[error("truncated input: expected at least {expected} bytes, got {actual}")]
    Truncated { expected: u64, actual: u64 },

    #[error("checksum mismatch: expected {expected:#010x}, computed {actual:#010x}")]
    Checksum { expected: u32, actual: u32 },

    #[error("{extra} trailing bytes after the checksum")]
    TrailingBytes { extra: u64 },

    #[error("malformed input: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GoldPooling {
    #[default]
    LastToken,
    Mean,
}

/// Per-step last-layer representations of one generation plus the gold answer.
#[derive(Debug, Clone, PartialEq)]
pub struct RepresentationTrace {
    steps: Vec<f32>,
    gold: Vec<f32>,
    t: usize,
    m: usize,
    d: usize,
    pub vocab_size: u32,
    pub gold_pooling: GoldPooling,
    pub token_ids: Option<Vec<u32>>,
    pub token_strings: Option<Vec<String>>,
    pub metadata: BTreeMap<String, String>,
}

impl RepresentationTrace {
    pub fn new(steps: Vec<f32>, t: usize, gold: Vec<f32>, m: usize, d: usize) -> Result<Self> {
        let trace = Self {
            steps,
            gold,
            t,
            m,
            d,
            vocab_size: 0,
            gold_pooling: GoldPooling::default(),
            token_ids: None,
            token_strings: None,
            metadata: BTreeMap::new(),
        };
        trace.validate()?;
        Ok(trace)
    }

    pub fn with_token_ids(mut self, ids: Vec<u32>) -> Result<Self> {
        self.token_ids = Some(ids);
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.t == 0 || self.m == 0 || self.d == 0 {
            return Err(Error::InvalidInput(format!(
                "trace dimensions must be positive (T={}, m={}, d={})",
                self.t, self.m, self.d
            )));
        }
        if self.steps.len() != self.t * self.d || self.gold.len() != self.m * self.d {
            return Err(Error::Shape(format!(
                "matrix sizes {} and {} do not match T={}, m={}, d={}",
                self.steps.len(),
                self.gold.len(),
                self.t,
                self.m,
                self.d
            )));
        }
        if self.steps.iter().chain(&self.gold).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("trace contains non-finite values".into()));
        }
        if let Some(ids) = &self.token_ids {
            if ids.len() != self.t {
                return Err(Error::InvalidInput(format!(
                    "token id count {} does not match T={}",
                    ids.len(),
                    self.t
                )));
            }
            if self.vocab_size > 0 {
                if let Some(bad) = ids.iter().find(|&&id| id >= self.vocab_size) {
                    return Err(Error::InvalidInput(format!(
                        "token id {bad} outside vocabulary of {}",
                        self.vocab_size
                    )));
                }
            }
        }
        Ok(())
    }

    /// Number of generated steps `T`.
    pub fn steps(&self) -> usize {
        self.t
    }

    pub fn gold_rows(&self) -> usize {
        self.m
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn step_row(&self, t: usize) -> &[f32] {
        &self.steps[t * self.d..(t + 1) * self.d]
    }

    pub fn gold_row(&self, j: usize) -> &[f32] {
        &self.gold[j * self.d..(j + 1) * self.d]
    }

    pub fn step_matrix(&self) -> &[f32] {
        &self.steps
    }

    pub fn gold_matrix(&self) -> &[f32] {
        &self.gold
    }

    pub fn flags(&self) -> u32 {
        let mut flags = 0;
        if self.token_ids.is_some() {
            flags |= FLAG_TOKEN_IDS;
        }
        if self.token_strings.is_some() {
            flags |= FLAG_STRING_TABLE;
        }
        flags
    }

    /// The single gold vector `h_y` under this trace's pooling mode.
    pub fn pooled_gold(&self) -> Vec<f64> {
        match self.gold_pooling {
            GoldPooling::LastToken => self.gold_row(self.m - 1).iter().map(|&v| v as f64).collect(),
            GoldPooling::Mean => {
                let mut acc = vec![0.0f64; self.d];
                for row in self.gold.chunks_exact(self.d) {
                    for (a, &v) in acc.iter_mut().zip(row) {
                        *a += v as f64;
                    }
                }
                let inv = 1.0 / self.m as f64;
                acc.iter_mut().for_each(|a| *a *= inv);
                acc
            }
        }
    }

    /// Exact encoded size in bytes.
    pub fn encoded_len(&self) -> usize {
        let mut len = HEADER_LEN + 4 * (self.steps.len() + self.gold.len()) + 4;
        if let Some(ids) = &self.token_ids {
            len += 4 * ids.len();
        }
        if let Some(strings) = &self.token_strings {
            len += 4 + strings.iter().map(|s| 4 + s.len()).sum::<usize>();
        }
        len
    }
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::InvalidInput(format!("{what} = {v} does not fit in u32")))
}

/// Serializes a trace to MITC bytes.
pub fn encode_trace(trace: &RepresentationTrace) -> Result<Vec<u8>> {
    trace.validate()?;
    let mut buf = Vec::with_capacity(trace.encoded_len());
    buf.extend_from_slice(&MAGIC);
    put_u32(&mut buf, VERSION);
    put_u32(&mut buf, to_u32(trace.t, "T")?);
    put_u32(&mut buf, to_u32(trace.d, "d")?);
    put_u32(&mut buf, to_u32(trace.m, "m")?);
    put_u32(&mut buf, trace.vocab_size);
    put_u32(&mut buf, trace.flags());
    for v in trace.steps.iter().chain(&trace.gold) {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(ids) = &trace.token_ids {
        ids.iter().for_each(|&id| put_u32(&mut buf, id));
    }
    if let Some(strings) = &trace.token_strings {
        put_u32(&mut buf, to_u32(strings.len(), "string count")?);
        for s in strings {
            put_u32(&mut buf, to_u32(s.len(), "string length")?);
            buf.extend_from_slice(s.as_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    put_u32(&mut buf, crc);
    Ok(buf)
}

/// Writes MITC bytes to `dest`, returning the byte count. Nothing is written
/// if the trace is invalid.
pub fn write_trace<W: Write>(trace: &RepresentationTrace, mut dest: W) -> Result<usize> {
    let bytes = encode_trace(trace)?;
    dest.write_all(&bytes)?;
    Ok(bytes.len())
}

pub(crate) struct Cursor<'a> {
    pub data: &'a [u8],
    pub pos: usize,
}

impl<'a> Cursor<'a> {
    pub fn need(&self, n: u64) -> std::result::Result<(), ParseError> {
        let expected = (self.pos as u64).saturating_add(n);
        if expected > self.data.len() as u64 {
            Err(ParseError::Truncated {
                expected: expected.saturating_add(4),
                actual: self.data.len() as u64,
            })
        } else {
            Ok(())
        }
    }

    pub fn u32(&mut self) -> std::result::Result<u32, ParseError> {
        self.need(4)?;
        let v = u32::from_le_bytes(self.data[self.pos..self.pos + 4].try_into().unwrap());
        self.pos += 4;
        Ok(v)
    }

    pub fn bytes(&mut self, n: u64) -> std::result::Result<&'a [u8], ParseError> {
        self.need(n)?;
        let s = &self.data[self.pos..self.pos + n as usize];
        self.pos += n as usize;
        Ok(s)
    }
}

pub(crate) fn f32s(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect()
}

/// Decodes MITC bytes. Framing (magic, version, sizes, checksum) is
/// validated before any payload is interpreted.
pub fn decode_trace(data: &[u8]) -> std::result::Result<RepresentationTrace, ParseError> {
    if data.len() < 4 || data[..4] != MAGIC {
        return Err(ParseError::BadMagic {
            expected: "MITC",
            found: data[..data.len().min(4)].to_vec(),
        });
    }
    let mut cur = Cursor { data, pos: 4 };
    let version = cur.u32()?;
    if version != VERSION {
        return Err(ParseError::UnsupportedVersion(version));
    }
    let t = cur.u32()? as u64;
    let d = cur.u32()? as u64;
    let m = cur.u32()? as u64;
    let vocab_size = cur.u32()?;
    let flags = cur.u32()?;
    if flags & !(FLAG_TOKEN_IDS | FLAG_STRING_TABLE) != 0 {
        return Err(ParseError::Malformed(format!("unknown flag bits {flags:#x}")));
    }
    if t == 0 || d == 0 || m == 0 {
        return Err(ParseError::Malformed(format!(
            "dimensions must be positive (T={t}, d={d}, m={m})"
        )));
    }
    let matrix_bytes = |rows: u64| {
        rows.checked_mul(d)
            .and_then(|v| v.checked_mul(4))
            .ok_or_else(|| ParseError::Malformed(format!("matrix of {rows} x {d} overflows")))
    };
    let step_bytes = cur.bytes(matrix_bytes(t)?)?;
    let gold_bytes = cur.bytes(matrix_bytes(m)?)?;
    let id_bytes = if flags & FLAG_TOKEN_IDS != 0 {
        Some(cur.bytes(4 * t)?)
    } else {
        None
    };
    let mut string_slices = None;
    if flags & FLAG_STRING_TABLE != 0 {
        let count = cur.u32()? as u64;
        // Every entry carries at least its 4-byte length.
        cur.need(4 * count)?;
        let mut entries = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let len = cur.u32()? as u64;
            entries.push(cur.bytes(len)?);
        }
        string_slices = Some(entries);
    }
    let body_end = cur.pos;
    let expected_total = body_end as u64 + 4;
    let actual_total = data.len() as u64;
    if actual_total < expected_total {
        return Err(ParseError::Truncated {
            expected: expected_total,
            actual: actual_total,
        });
    }
    if actual_total > expected_total {
        return Err(ParseError::TrailingBytes {
            extra: actual_total - expected_total,
        });
    }
    let stored = u32::from_le_bytes(data[body_end..].try_into().unwrap());
    let computed = crc32fast::hash(&data[..body_end]);
    if stored != computed {
        return Err(ParseError::Checksum {
            expected: stored,
            actual: computed,
        });
    }

    let steps = f32s(step_bytes);
    let gold = f32s(gold_bytes);
    if steps.iter().chain(&gold).any(|v| !v.is_finite()) {
        return Err(ParseError::Malformed("non-finite matrix entry".into()));
    }
    let token_ids = id_bytes.map(|b| {
        b.chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect::<Vec<_>>()
    });
    if let (Some(ids), true) = (&token_ids, vocab_size > 0) {
        if let Some(bad) = ids.iter().find(|&&id| id >= vocab_size) {
            return Err(ParseError::Malformed(format!(
                "token id {bad} outside vocabulary of {vocab_size}"
            )));
        }
    }
    let token_strings = match string_slices {
        Some(entries) => Some(
            entries
                .into_iter()
                .enumerate()
                .map(|(i, b)| {
                    String::from_utf8(b.to_vec())
                        .map_err(|_| ParseError::Malformed(format!("string table entry {i} is not UTF-8")))
                })
                .collect::<std::result::Result<Vec<_>, _>>()?,
        ),
        None => None,
    };
    Ok(RepresentationTrace {
        steps,
        gold,
        t: t as usize,
        m: m as usize,
        d: d as usize,
        vocab_size,
        gold_pooling: GoldPooling::default(),
        token_ids,
        token_strings,
        metadata: BTreeMap::new(),
    })
}

/// Reads a whole MITC stream.
pub fn read_trace<R: std::io::Read>(mut source: R) -> Result<RepresentationTrace> {
    let mut data = Vec::new();
    source.read_to_end(&mut data)?;
    Ok(decode_trace(&data)?)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    #[serde(default)]
    pub gold_pooling: GoldPooling,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Writes the binary trace and, when it carries metadata or a non-default
/// pooling mode, the JSON sidecar.
pub fn write_trace_file(trace: &RepresentationTrace, path: &Path) -> Result<usize> {
    let bytes = encode_trace(trace)?;
    fs::write(path, &bytes)?;
    if !trace.metadata.is_empty() || trace.gold_pooling != GoldPooling::default() {
        let sidecar = Sidecar {
            gold_pooling: trace.gold_pooling,
            metadata: trace.metadata.clone(),
        };
        let json = serde_json::to_string_pretty(&sidecar).map_err(|e| Error::InvalidInput(e.to_string()))?;
        fs::write(sidecar_path(path), json + "\n")?;
    }
    Ok(bytes.len())
}

/// Reads a binary trace plus its sidecar, if one exists.
pub fn read_trace_file(path: &Path) -> Result<RepresentationTrace> {
    let data = fs::read(path)?;
    let mut trace = decode_trace(&data)?;
    let side = sidecar_path(path);
    if side != path && side.exists() {
        let text = fs::read_to_string(&side)?;
        let sidecar: Sidecar =
            serde_json::from_str(&text).map_err(|e| Error::InvalidInput(format!("{}: {e}", side.display())))?;
        trace.gold_pooling = sidecar.gold_pooling;
        trace.metadata = sidecar.metadata;
    }
    Ok(trace)
}

/// Renders the per-step CSV (`step,mi,is_peak`).
pub fn render_mi_csv(mi: &MiSequence, report: &PeakReport) -> Result<String> {
    if let Some(&bad) = report.indices.iter().find(|&&i| i >= mi.values.len()) {
        return Err(Error::Shape(format!(
            "peak index {bad} outside a sequence of length {}",
            mi.values.len()
        )));
    }
    let mut out = String::from("step,mi,is_peak\n");
    let mut peaks = report.indices.iter().peekable();
    for (t, v) in mi.values.iter().enumerate() {
        let is_peak = peaks.next_if(|&&i| i == t).is_some();
        out.push_str(&format!("{t},{v:.8e},{}\n", u8::from(is_peak)));
    }
    Ok(out)
}

pub fn export_mi_csv<W: Write>(mi: &MiSequence, report: &PeakReport, mut dest: W) -> Result<usize> {
    let text = render_mi_csv(mi, report)?;
    dest.write_all(text.as_bytes())?;
    Ok(text.len())
}
