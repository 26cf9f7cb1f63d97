//! File formats: binary tensor files, named-tensor checkpoints, plain-text
//! key=value files, versioned CSV, and content hashing.
//!
//! All binary payloads are little-endian f64. Every reader validates magic,
//! declared sizes, and payload length before touching the data, and every
//! writer goes through a temp file + rename so partially written artifacts
//! never shadow good ones.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::models::ParamEntry;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Magic prefix of scene texture files.
pub const SCENE_MAGIC: &[u8; 7] = b"EADSCN1";
/// Magic prefix of adversarial patch files.
pub const PATCH_MAGIC: &[u8; 7] = b"EADPCH1";
/// Magic first line of checkpoint files.
pub const CKPT_MAGIC: &str = "EADCKP1";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::io(path, e)
}

/// Write bytes atomically: temp file in the same directory, then rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp-write");
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))?;
    Ok(())
}

// ---- binary tensor files (scenes, patches) -------------------------------

/// Serialize one tensor: 7-byte magic, u32 rank, u32 per dimension, then the
/// data as little-endian f64.
pub fn write_tensor_file(path: &Path, magic: &[u8; 7], t: &Tensor) -> Result<()> {
    let mut buf = Vec::with_capacity(7 + 4 + 4 * t.shape().len() + 8 * t.len());
    buf.extend_from_slice(magic);
    buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    write_atomic(path, &buf)
}

/// Read a tensor file written by [`write_tensor_file`], checking the magic
/// and that the payload length matches the declared shape exactly.
pub fn read_tensor_file(path: &Path, magic: &[u8; 7]) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let fail = |msg: String| Error::format(path, msg);
    if bytes.len() < 11 || &bytes[..7] != magic {
        return Err(fail(format!(
            "missing {} magic",
            String::from_utf8_lossy(magic)
        )));
    }
    let rank = u32::from_le_bytes(bytes[7..11].try_into().unwrap()) as usize;
    if rank > 8 {
        return Err(fail(format!("implausible rank {rank}")));
    }
    let head = 11 + 4 * rank;
    if bytes.len() < head {
        return Err(fail("truncated dimension header".into()));
    }
    let mut shape = Vec::with_capacity(rank);
    for i in 0..rank {
        let off = 11 + 4 * i;
        shape.push(u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize);
    }
    let n: usize = shape.iter().product();
    if bytes.len() != head + 8 * n {
        return Err(fail(format!(
            "payload is {} bytes, shape {shape:?} needs {}",
            bytes.len() - head,
            8 * n
        )));
    }
    let data: Vec<f64> = bytes[head..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::from_vec(shape, data)
        .map_err(|e| Error::format(path, format!("invalid tensor payload: {e}")))
}

// ---- checkpoints ----------------------------------------------------------

/// Write named parameter tensors: a plain-text manifest of
/// `name shape byte-offset` lines, then all arrays concatenated as
/// little-endian f64. Round-trips bit-exactly.
pub fn write_checkpoint(path: &Path, entries: &[ParamEntry]) -> Result<()> {
    let mut manifest = format!("{CKPT_MAGIC}\n{}\n", entries.len());
    let mut offset = 0usize;
    for e in entries {
        let shape =
            e.shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x");
        manifest.push_str(&format!("{} {} {}\n", e.name, shape, offset));
        offset += 8 * e.data.len();
    }
    let mut buf = manifest.into_bytes();
    buf.reserve(offset);
    for e in entries {
        for &v in &e.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    write_atomic(path, &buf)
}

/// Read a checkpoint written by [`write_checkpoint`].
pub fn read_checkpoint(path: &Path) -> Result<Vec<ParamEntry>> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let fail = |msg: String| Error::format(path, msg);

    // the manifest is the first (2 + count) text lines; find its byte end
    let mut lines: Vec<&str> = Vec::new();
    let mut pos = 0;
    while lines.len() < 2 {
        let rest = &bytes[pos..];
        let nl = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| fail("truncated manifest".into()))?;
        lines.push(
            std::str::from_utf8(&rest[..nl]).map_err(|_| fail("manifest is not UTF-8".into()))?,
        );
        pos += nl + 1;
    }
    if lines[0] != CKPT_MAGIC {
        return Err(fail(format!("missing {CKPT_MAGIC} magic")));
    }
    let count: usize =
        lines[1].parse().map_err(|_| fail(format!("bad tensor count {:?}", lines[1])))?;
    if count > 10_000 {
        return Err(fail(format!("implausible tensor count {count}")));
    }
    let mut manifest = Vec::with_capacity(count);
    for _ in 0..count {
        let rest = &bytes[pos..];
        let nl = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| fail("truncated manifest".into()))?;
        let line =
            std::str::from_utf8(&rest[..nl]).map_err(|_| fail("manifest is not UTF-8".into()))?;
        pos += nl + 1;
        let mut parts = line.split(' ');
        let (name, shape_s, off_s) = match (parts.next(), parts.next(), parts.next(), parts.next())
        {
            (Some(a), Some(b), Some(c), None) => (a, b, c),
            _ => return Err(fail(format!("bad manifest line {line:?}"))),
        };
        let shape: Vec<usize> = shape_s
            .split('x')
            .map(|d| d.parse().map_err(|_| fail(format!("bad shape {shape_s:?}"))))
            .collect::<Result<_>>()?;
        let offset: usize =
            off_s.parse().map_err(|_| fail(format!("bad offset {off_s:?}")))?;
        manifest.push((name.to_string(), shape, offset));
    }
    let payload = &bytes[pos..];
    let mut entries = Vec::with_capacity(count);
    for (name, shape, offset) in manifest {
        let n: usize = shape.iter().product();
        let end = offset
            .checked_add(8 * n)
            .filter(|&e| e <= payload.len())
            .ok_or_else(|| fail(format!("tensor {name} overruns payload")))?;
        let data: Vec<f64> = payload[offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        entries.push(ParamEntry { name, shape, data });
    }
    Ok(entries)
}

// ---- key=value files ------------------------------------------------------

/// Ordered key=value pairs read from a plain-text file. `#` starts a
/// comment; blank lines are skipped; duplicate keys are rejected.
#[derive(Clone, Debug, Default)]
pub struct KvMap {
    pairs: Vec<(String, String)>,
}

impl KvMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> std::result::Result<Self, String> {
        let mut pairs: Vec<(String, String)> = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(format!("line {}: expected key = value, got {raw:?}", lineno + 1));
            };
            let k = k.trim().to_string();
            let v = v.trim().to_string();
            if k.is_empty() {
                return Err(format!("line {}: empty key", lineno + 1));
            }
            if pairs.iter().any(|(ek, _)| *ek == k) {
                return Err(format!("line {}: duplicate key {k}", lineno + 1));
            }
            pairs.push((k, v));
        }
        Ok(KvMap { pairs })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::parse(&text).map_err(|msg| Error::ConfigFile { path: path.into(), msg })
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        match self.pairs.iter_mut().find(|(k, _)| k == key) {
            Some((_, v)) => *v = value.to_string(),
            None => self.pairs.push((key.to_string(), value.to_string())),
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.pairs.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.pairs.iter().map(|(k, _)| k.as_str())
    }

    pub fn parse_field<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.get(key) {
            None => Ok(None),
            Some(v) => v.parse::<T>().map(Some).map_err(|_| {
                Error::config(format!("key {key}: cannot parse {v:?}"))
            }),
        }
    }

    /// Error if any present key is outside the allowed set — typos in
    /// configs must fail loudly, not silently fall back to defaults.
    pub fn reject_unknown(&self, allowed: &[&str]) -> Result<()> {
        for (k, _) in &self.pairs {
            if !allowed.contains(&k.as_str()) {
                return Err(Error::config(format!(
                    "unknown config key {k:?} (allowed: {})",
                    allowed.join(", ")
                )));
            }
        }
        Ok(())
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.pairs {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(v);
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.render().as_bytes())
    }
}

// ---- versioned CSV --------------------------------------------------------

/// Current major version of every CSV this crate writes.
pub const CSV_SCHEMA_VERSION: u32 = 1;

/// CSV writer that stamps a `schema_version` comment line and the header,
/// then appends rows. Values containing commas are rejected (the schemas
/// here never need quoting).
pub struct CsvFile {
    file: fs::File,
    path: PathBuf,
    columns: usize,
}

impl CsvFile {
    pub fn create(path: &Path, header: &[&str]) -> Result<Self> {
        let mut file = fs::File::create(path).map_err(io_err(path))?;
        write!(file, "# schema_version = {CSV_SCHEMA_VERSION}\n{}\n", header.join(","))
            .map_err(io_err(path))?;
        Ok(CsvFile { file, path: path.to_path_buf(), columns: header.len() })
    }

    pub fn row(&mut self, values: &[String]) -> Result<()> {
        assert_eq!(values.len(), self.columns, "csv row arity");
        for v in values {
            assert!(!v.contains(',') && !v.contains('\n'), "csv value needs quoting: {v:?}");
        }
        writeln!(self.file, "{}", values.join(",")).map_err(io_err(&self.path))
    }

    pub fn finish(mut self) -> Result<()> {
        self.file.flush().map_err(io_err(&self.path))
    }
}

/// Parsed CSV: header plus string rows. Rejects missing or unknown-major
/// `schema_version` stamps.
pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let fail = |msg: String| Error::format(path, msg);
    let mut lines = text.lines();
    let version_line = lines.next().ok_or_else(|| fail("empty file".into()))?;
    let version: u32 = version_line
        .strip_prefix("# schema_version =")
        .map(str::trim)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| fail(format!("missing schema_version stamp, got {version_line:?}")))?;
    if version != CSV_SCHEMA_VERSION {
        return Err(fail(format!(
            "schema_version {version} unsupported (reader understands {CSV_SCHEMA_VERSION})"
        )));
    }
    let header: Vec<String> =
        lines.next().ok_or_else(|| fail("missing header".into()))?.split(',').map(String::from).collect();
    let mut rows = Vec::new();
    for line in lines {
        if line.is_empty() {
            continue;
        }
        let row: Vec<String> = line.split(',').map(String::from).collect();
        if row.len() != header.len() {
            return Err(fail(format!("row arity {} vs header {}", row.len(), header.len())));
        }
        rows.push(row);
    }
    Ok((header, rows))
}

// ---- hashing ---------------------------------------------------------------

/// Exact decimal round-trip formatting for f64: the shortest representation
/// that parses back to the same bits.
pub fn fmt_f64(v: f64) -> String {
    let s = format!("{v}");
    debug_assert_eq!(s.parse::<f64>().unwrap().to_bits(), v.to_bits());
    s
}

/// Lowercase hex SHA-256 of a byte slice.
pub fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    let digest = Sha256::digest(bytes);
    let mut s = String::with_capacity(64);
    for b in digest {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

/// Lowercase hex SHA-256 of a file's contents.
pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    Ok(sha256_hex(&bytes))
}
