//! Synthetic decode traces and their on-disk formats.
//!
//! Queries follow a unit-sphere random walk whose step size is the `drift`
//! knob: `q_{t+1} = normalize((1 - drift) q_t + drift g_t)` with `g_t` an
//! independent standard-normal direction. Drift 0 copies the query bitwise,
//! so adjacent-query cosine is exactly 1; drift 1 draws independent
//! queries. Keys and values are independent normal draws per token.
//!
//! The canonical file format is binary and round-trips bit-exactly:
//!
//! ```text
//! magic "KVFT" | version u16 | head_dim u32 | prefill_len u32 |
//! decode_len u32 | seed u64 | drift f64 | key_scale f64 | value_scale f64 |
//! payload: prefill (k, v) pairs then steps (q, k, v), little-endian f64
//! ```
//!
//! A JSON-lines form (`record`-tagged lines) is accepted for hand-written
//! fixtures; the binary form is what [`save_trace`] emits.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::VecF;

pub const TRACE_MAGIC: [u8; 4] = *b"KVFT";
pub const TRACE_VERSION: u16 = 1;

/// Trace provenance: the generator inputs needed to reproduce it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceMeta {
    pub seed: u64,
    /// Query random-walk step size in `[0, 1]`.
    pub drift: f64,
    pub key_scale: f64,
    pub value_scale: f64,
}

/// One decode step: the query plus the new token's key and value.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeStep {
    pub query: VecF<f64>,
    pub key: VecF<f64>,
    pub value: VecF<f64>,
}

/// Prompt key/values followed by per-step (query, key, value) triples.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeTrace {
    pub head_dim: usize,
    pub prefill: Vec<(VecF<f64>, VecF<f64>)>,
    pub steps: Vec<DecodeStep>,
    pub meta: TraceMeta,
}

impl DecodeTrace {
    pub fn prefill_len(&self) -> usize {
        self.prefill.len()
    }

    pub fn decode_len(&self) -> usize {
        self.steps.len()
    }

    /// Mean cosine similarity of adjacent queries; `None` for single-step
    /// traces.
    pub fn mean_adjacent_query_cosine(&self) -> Option<f64> {
        if self.steps.len() < 2 {
            return None;
        }
        let mut sum = 0.0;
        for pair in self.steps.windows(2) {
            sum += crate::numerics::cosine_similarity(&pair[0].query, &pair[1].query)
                .expect("trace queries are nonzero");
        }
        Some(sum / (self.steps.len() - 1) as f64)
    }
}

fn normal_vec(rng: &mut ChaCha8Rng, d: usize, scale: f64) -> VecF<f64> {
    VecF::from_wide_slice(
        &(0..d)
            .map(|_| {
                let x: f64 = StandardNormal.sample(rng);
                x * scale
            })
            .collect::<Vec<_>>(),
    )
}

fn unit_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 {
            return v.iter().map(|x| x / norm).collect();
        }
    }
}

/// Generates a trace with unit key/value scales.
pub fn generate_trace(
    head_dim: usize,
    prefill_len: usize,
    decode_len: usize,
    drift: f64,
    seed: u64,
) -> Result<DecodeTrace> {
    generate_trace_scaled(head_dim, prefill_len, decode_len, drift, seed, 1.0, 1.0)
}

/// Generates a trace; keys and values are `N(0, scale^2)` per component.
pub fn generate_trace_scaled(
    head_dim: usize,
    prefill_len: usize,
    decode_len: usize,
    drift: f64,
    seed: u64,
    key_scale: f64,
    value_scale: f64,
) -> Result<DecodeTrace> {
    if !(0.0..=1.0).contains(&drift) {
        return Err(Error::Config(format!("drift must be in [0, 1], got {drift}")));
    }
    if head_dim < 1 || prefill_len < 1 || decode_len < 1 {
        return Err(Error::Config(
            "head_dim, prefill_len, and decode_len must be >= 1".into(),
        ));
    }
    if !(key_scale.is_finite() && value_scale.is_finite()) || key_scale <= 0.0 || value_scale <= 0.0
    {
        return Err(Error::Config("scales must be positive and finite".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let prefill: Vec<(VecF<f64>, VecF<f64>)> = (0..prefill_len)
        .map(|_| {
            (
                normal_vec(&mut rng, head_dim, key_scale),
                normal_vec(&mut rng, head_dim, value_scale),
            )
        })
        .collect();

    let mut q = unit_vec(&mut rng, head_dim);
    let mut steps = Vec::with_capacity(decode_len);
    for _ in 0..decode_len {
        let key = normal_vec(&mut rng, head_dim, key_scale);
        let value = normal_vec(&mut rng, head_dim, value_scale);
        steps.push(DecodeStep { query: VecF::from_wide_slice(&q), key, value });
        q = crate::oracle::drift_query(&mut rng, &q, drift);
    }

    Ok(DecodeTrace {
        head_dim,
        prefill,
        steps,
        meta: TraceMeta { seed, drift, key_scale, value_scale },
    })
}

// ---------------------------------------------------------------------------
// Binary form
// ---------------------------------------------------------------------------

struct CountingReader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> CountingReader<R> {
    fn read_exact_at(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        let at = self.offset;
        self.inner.read_exact(buf).map_err(|e| {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                Error::Parse { offset: at, message: format!("truncated while reading {what}") }
            } else {
                Error::Io(e)
            }
        })?;
        self.offset += buf.len() as u64;
        Ok(())
    }

    fn read_u16(&mut self, what: &str) -> Result<u16> {
        let mut b = [0u8; 2];
        self.read_exact_at(&mut b, what)?;
        Ok(u16::from_le_bytes(b))
    }

    fn read_u32(&mut self, what: &str) -> Result<u32> {
        let mut b = [0u8; 4];
        self.read_exact_at(&mut b, what)?;
        Ok(u32::from_le_bytes(b))
    }

    fn read_u64(&mut self, what: &str) -> Result<u64> {
        let mut b = [0u8; 8];
        self.read_exact_at(&mut b, what)?;
        Ok(u64::from_le_bytes(b))
    }

    fn read_f64(&mut self, what: &str) -> Result<f64> {
        let mut b = [0u8; 8];
        self.read_exact_at(&mut b, what)?;
        Ok(f64::from_le_bytes(b))
    }

    fn read_vec(&mut self, d: usize, what: &str) -> Result<Vec<f64>> {
        let mut bytes = vec![0u8; d * 8];
        let at = self.offset;
        self.read_exact_at(&mut bytes, what)?;
        let out: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if out.iter().any(|x| !x.is_finite()) {
            return Err(Error::Parse {
                offset: at,
                message: format!("non-finite float in {what}"),
            });
        }
        Ok(out)
    }
}

/// Writes the binary form.
pub fn write_trace<W: Write>(trace: &DecodeTrace, mut w: W) -> Result<()> {
    w.write_all(&TRACE_MAGIC)?;
    w.write_all(&TRACE_VERSION.to_le_bytes())?;
    w.write_all(&(trace.head_dim as u32).to_le_bytes())?;
    w.write_all(&(trace.prefill.len() as u32).to_le_bytes())?;
    w.write_all(&(trace.steps.len() as u32).to_le_bytes())?;
    w.write_all(&trace.meta.seed.to_le_bytes())?;
    w.write_all(&trace.meta.drift.to_le_bytes())?;
    w.write_all(&trace.meta.key_scale.to_le_bytes())?;
    w.write_all(&trace.meta.value_scale.to_le_bytes())?;

    let mut put = |v: &VecF<f64>| -> Result<()> {
        for &x in v.as_slice() {
            w.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    };
    for (k, v) in &trace.prefill {
        put(k)?;
        put(v)?;
    }
    for step in &trace.steps {
        put(&step.query)?;
        put(&step.key)?;
        put(&step.value)?;
    }
    Ok(())
}

/// Reads the binary form, failing with a byte offset on malformed input.
pub fn read_trace<R: Read>(r: R) -> Result<DecodeTrace> {
    let mut r = CountingReader { inner: r, offset: 0 };

    let mut magic = [0u8; 4];
    r.read_exact_at(&mut magic, "magic")?;
    if magic != TRACE_MAGIC {
        return Err(Error::Parse { offset: 0, message: "bad magic, expected KVFT".into() });
    }
    let version = r.read_u16("version")?;
    if version != TRACE_VERSION {
        return Err(Error::Parse {
            offset: 4,
            message: format!("unsupported version {version}, expected {TRACE_VERSION}"),
        });
    }
    let head_dim = r.read_u32("head_dim")? as usize;
    let prefill_len = r.read_u32("prefill_len")? as usize;
    let decode_len = r.read_u32("decode_len")? as usize;
    if head_dim == 0 {
        return Err(Error::Schema("head_dim must be positive".into()));
    }
    if decode_len == 0 {
        return Err(Error::Schema("trace must contain at least one decode step".into()));
    }
    let meta = TraceMeta {
        seed: r.read_u64("seed")?,
        drift: r.read_f64("drift")?,
        key_scale: r.read_f64("key_scale")?,
        value_scale: r.read_f64("value_scale")?,
    };
    if !(0.0..=1.0).contains(&meta.drift) {
        return Err(Error::Schema(format!("drift {} outside [0, 1]", meta.drift)));
    }

    let mut prefill = Vec::with_capacity(prefill_len);
    for i in 0..prefill_len {
        let k = r.read_vec(head_dim, &format!("prefill key {i}"))?;
        let v = r.read_vec(head_dim, &format!("prefill value {i}"))?;
        prefill.push((VecF::from_wide_slice(&k), VecF::from_wide_slice(&v)));
    }
    let mut steps = Vec::with_capacity(decode_len);
    for i in 0..decode_len {
        let q = r.read_vec(head_dim, &format!("step {i} query"))?;
        let k = r.read_vec(head_dim, &format!("step {i} key"))?;
        let v = r.read_vec(head_dim, &format!("step {i} value"))?;
        steps.push(DecodeStep {
            query: VecF::from_wide_slice(&q),
            key: VecF::from_wide_slice(&k),
            value: VecF::from_wide_slice(&v),
        });
    }

    let mut trailing = [0u8; 1];
    match r.inner.read(&mut trailing) {
        Ok(0) => {}
        Ok(_) => {
            return Err(Error::Parse {
                offset: r.offset,
                message: "trailing bytes after payload".into(),
            })
        }
        Err(e) => return Err(Error::Io(e)),
    }

    Ok(DecodeTrace { head_dim, prefill, steps, meta })
}

// ---------------------------------------------------------------------------
// JSON-lines form (fixtures)
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum TraceLine {
    Header {
        head_dim: usize,
        seed: u64,
        drift: f64,
        key_scale: f64,
        value_scale: f64,
    },
    Prefill {
        k: Vec<f64>,
        v: Vec<f64>,
    },
    Step {
        q: Vec<f64>,
        k: Vec<f64>,
        v: Vec<f64>,
    },
}

fn parse_jsonl(text: &str) -> Result<DecodeTrace> {
    let mut head: Option<(usize, TraceMeta)> = None;
    let mut prefill = Vec::new();
    let mut steps = Vec::new();

    let check = |name: &str, xs: &[f64], d: usize| -> Result<()> {
        if xs.len() != d {
            return Err(Error::Schema(format!("{name} has dimension {}, expected {d}", xs.len())));
        }
        if xs.iter().any(|x| !x.is_finite()) {
            return Err(Error::Schema(format!("{name} contains a non-finite value")));
        }
        Ok(())
    };

    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed: TraceLine = serde_json::from_str(line).map_err(|e| Error::Parse {
            offset: lineno as u64,
            message: format!("line {}: {e}", lineno + 1),
        })?;
        match parsed {
            TraceLine::Header { head_dim, seed, drift, key_scale, value_scale } => {
                if head.is_some() {
                    return Err(Error::Schema("duplicate header line".into()));
                }
                if head_dim == 0 {
                    return Err(Error::Schema("head_dim must be positive".into()));
                }
                head = Some((head_dim, TraceMeta { seed, drift, key_scale, value_scale }));
            }
            TraceLine::Prefill { k, v } => {
                let (d, _) = head.ok_or_else(|| Error::Schema("header line must come first".into()))?;
                check("prefill key", &k, d)?;
                check("prefill value", &v, d)?;
                prefill.push((VecF::from_wide_slice(&k), VecF::from_wide_slice(&v)));
            }
            TraceLine::Step { q, k, v } => {
                let (d, _) = head.ok_or_else(|| Error::Schema("header line must come first".into()))?;
                check("step query", &q, d)?;
                check("step key", &k, d)?;
                check("step value", &v, d)?;
                steps.push(DecodeStep {
                    query: VecF::from_wide_slice(&q),
                    key: VecF::from_wide_slice(&k),
                    value: VecF::from_wide_slice(&v),
                });
            }
        }
    }

    let (head_dim, meta) = head.ok_or_else(|| Error::Schema("missing header line".into()))?;
    if steps.is_empty() {
        return Err(Error::Schema("trace must contain at least one decode step".into()));
    }
    Ok(DecodeTrace { head_dim, prefill, steps, meta })
}

/// Saves the binary form to `path`.
pub fn save_trace(trace: &DecodeTrace, path: &Path) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    write_trace(trace, &mut w)?;
    w.flush()?;
    Ok(())
}

/// Loads a trace, sniffing between the binary and JSON-lines forms.
pub fn load_trace(path: &Path) -> Result<DecodeTrace> {
    let file = File::open(path)?;
    let mut reader = BufReader::new(file);
    let mut head = [0u8; 4];
    let n = reader.read(&mut head)?;
    if n >= 4 && head == TRACE_MAGIC {
        let rest = head.chain(reader);
        return read_trace(rest);
    }
    if n > 0 && (head[0] == b'{' || head[0].is_ascii_whitespace()) {
        let mut text = String::new();
        String::from_utf8(head[..n].to_vec())
            .map_err(|_| Error::Parse { offset: 0, message: "not UTF-8".into() })?
            .clone_into(&mut text);
        reader.read_to_string(&mut text).map_err(|_| Error::Parse {
            offset: n as u64,
            message: "not UTF-8".into(),
        })?;
        return parse_jsonl(&text);
    }
    Err(Error::Parse { offset: 0, message: "unrecognized trace format".into() })
}
