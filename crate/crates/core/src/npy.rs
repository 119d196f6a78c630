//! Reader/writer for the NPY v1.0 array format and NPZ (zip-of-NPY)
//! archives, the on-disk carrier for depth fields.
//!
//! Scope is deliberately narrow: little-endian float32/float64, C order,
//! rank 2 or 3. Writing emits NPY v1.0 with the preamble padded to a
//! multiple of 64 bytes; reading accepts v1.0 and v2.0 headers with
//! arbitrary key order and whitespace. NPZ archives are plain ZIP files
//! whose members are stored uncompressed with zeroed timestamps, so equal
//! inputs produce byte-identical archives.

use thiserror::Error;

const MAGIC: &[u8; 6] = b"\x93NUMPY";
const PREAMBLE_ALIGN: usize = 64;
const V1_HEADER_LIMIT: usize = 65535;

#[derive(Debug, Error)]
pub enum NpyError {
    #[error("not an NPY stream (bad magic)")]
    BadMagic,
    #[error("unsupported NPY version {0}.{1}")]
    UnsupportedVersion(u8, u8),
    #[error("unsupported dtype {0:?}; only little-endian f4/f8 are accepted")]
    UnsupportedDtype(String),
    #[error("fortran_order=True arrays are not supported")]
    FortranOrderUnsupported,
    #[error("unsupported array rank {0}; only rank 2 or 3 is accepted")]
    UnsupportedRank(usize),
    #[error("malformed NPY header: {0}")]
    MalformedHeader(String),
    #[error("payload size mismatch: expected {expected} bytes, got {got}")]
    TruncatedPayload { expected: usize, got: usize },
    #[error("NPY v1.0 header would exceed {V1_HEADER_LIMIT} bytes")]
    HeaderTooLong,
    #[error("duplicate archive entry name {0:?}")]
    DuplicateEntry(String),
    #[error("not a ZIP archive")]
    NotAZip,
    #[error("archive entry {name:?}: {message}")]
    Entry { name: String, message: String },
}

/// Element type of a stored array.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    Float32LE,
    Float64LE,
}

impl Dtype {
    pub fn descr(&self) -> &'static str {
        match self {
            Dtype::Float32LE => "<f4",
            Dtype::Float64LE => "<f8",
        }
    }

    pub fn size(&self) -> usize {
        match self {
            Dtype::Float32LE => 4,
            Dtype::Float64LE => 8,
        }
    }

    fn from_descr(descr: &str) -> Result<Self, NpyError> {
        match descr {
            "<f4" => Ok(Dtype::Float32LE),
            "<f8" => Ok(Dtype::Float64LE),
            other => Err(NpyError::UnsupportedDtype(other.to_string())),
        }
    }
}

/// One named array: dtype, shape, and the raw little-endian buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct ArrayRecord {
    pub name: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub data: Vec<u8>,
}

impl ArrayRecord {
    pub fn new(
        name: impl Into<String>,
        dtype: Dtype,
        shape: Vec<usize>,
        data: Vec<u8>,
    ) -> Result<Self, NpyError> {
        if shape.len() < 2 || shape.len() > 3 {
            return Err(NpyError::UnsupportedRank(shape.len()));
        }
        let expected = dtype.size() * shape.iter().product::<usize>();
        if data.len() != expected {
            return Err(NpyError::TruncatedPayload {
                expected,
                got: data.len(),
            });
        }
        Ok(Self {
            name: name.into(),
            dtype,
            shape,
            data,
        })
    }

    /// Builds a rank-2 float32 record from f64 values (the in-memory depth
    /// representation), narrowing each element.
    pub fn from_f64_grid(
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        values: &[f64],
    ) -> Result<Self, NpyError> {
        let mut data = Vec::with_capacity(values.len() * 4);
        for v in values {
            data.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        Self::new(name, Dtype::Float32LE, vec![rows, cols], data)
    }

    /// Decodes the payload into f64 values regardless of stored precision.
    pub fn to_f64_values(&self) -> Vec<f64> {
        match self.dtype {
            Dtype::Float32LE => self
                .data
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect(),
            Dtype::Float64LE => self
                .data
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
                .collect(),
        }
    }

    pub fn element_count(&self) -> usize {
        self.shape.iter().product()
    }
}

fn shape_text(shape: &[usize]) -> String {
    let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
    format!("({})", dims.join(", "))
}

/// Encodes one record as NPY v1.0 bytes.
pub fn write_npy(record: &ArrayRecord) -> Result<Vec<u8>, NpyError> {
    if record.shape.len() < 2 || record.shape.len() > 3 {
        return Err(NpyError::UnsupportedRank(record.shape.len()));
    }
    let expected = record.dtype.size() * record.element_count();
    if record.data.len() != expected {
        return Err(NpyError::TruncatedPayload {
            expected,
            got: record.data.len(),
        });
    }
    let dict = format!(
        "{{'descr': '{}', 'fortran_order': False, 'shape': {}, }}",
        record.dtype.descr(),
        shape_text(&record.shape)
    );
    // magic + version + u16 length prefix, then the dict padded with spaces
    // and terminated by newline so the whole preamble is 64-byte aligned.
    let prefix_len = MAGIC.len() + 2 + 2;
    let unpadded = prefix_len + dict.len() + 1;
    let total = unpadded.div_ceil(PREAMBLE_ALIGN) * PREAMBLE_ALIGN;
    let header_len = total - prefix_len;
    if header_len > V1_HEADER_LIMIT {
        return Err(NpyError::HeaderTooLong);
    }
    let mut out = Vec::with_capacity(total + record.data.len());
    out.extend_from_slice(MAGIC);
    out.push(1);
    out.push(0);
    out.extend_from_slice(&(header_len as u16).to_le_bytes());
    out.extend_from_slice(dict.as_bytes());
    out.resize(total - 1, b' ');
    out.push(b'\n');
    out.extend_from_slice(&record.data);
    Ok(out)
}

/// Minimal parser for the header dict literal: handles arbitrary key order,
/// whitespace, single or double quotes, and a trailing comma.
fn parse_header_dict(text: &str) -> Result<(String, bool, Vec<usize>), NpyError> {
    let trimmed = text.trim();
    let inner = trimmed
        .strip_prefix('{')
        .and_then(|s| s.rfind('}').map(|i| &s[..i]))
        .ok_or_else(|| NpyError::MalformedHeader("missing braces".into()))?;

    let mut descr: Option<String> = None;
    let mut fortran: Option<bool> = None;
    let mut shape: Option<Vec<usize>> = None;

    // Split on top-level commas (commas inside parentheses belong to the
    // shape tuple).
    let mut depth = 0usize;
    let mut start = 0usize;
    let mut parts: Vec<&str> = Vec::new();
    for (i, ch) in inner.char_indices() {
        match ch {
            '(' | '[' => depth += 1,
            ')' | ']' => depth = depth.saturating_sub(1),
            ',' if depth == 0 => {
                parts.push(&inner[start..i]);
                start = i + 1;
            }
            _ => {}
        }
    }
    parts.push(&inner[start..]);

    for part in parts {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        let (key, value) = part
            .split_once(':')
            .ok_or_else(|| NpyError::MalformedHeader(format!("expected key: value in {part:?}")))?;
        let key = key.trim().trim_matches(|c| c == '\'' || c == '"');
        let value = value.trim();
        match key {
            "descr" => {
                descr = Some(value.trim_matches(|c| c == '\'' || c == '"').to_string());
            }
            "fortran_order" => {
                fortran = Some(match value {
                    "False" => false,
                    "True" => true,
                    other => {
                        return Err(NpyError::MalformedHeader(format!(
                            "bad fortran_order value {other:?}"
                        )))
                    }
                });
            }
            "shape" => {
                let tuple = value
                    .strip_prefix('(')
                    .and_then(|s| s.strip_suffix(')'))
                    .ok_or_else(|| {
                        NpyError::MalformedHeader(format!("shape is not a tuple: {value:?}"))
                    })?;
                let mut dims = Vec::new();
                for d in tuple.split(',') {
                    let d = d.trim();
                    if d.is_empty() {
                        continue; // trailing comma
                    }
                    dims.push(d.parse::<usize>().map_err(|_| {
                        NpyError::MalformedHeader(format!("bad shape dimension {d:?}"))
                    })?);
                }
                shape = Some(dims);
            }
            _ => {} // tolerate unknown keys
        }
    }

    let descr = descr.ok_or_else(|| NpyError::MalformedHeader("missing descr".into()))?;
    let fortran = fortran.ok_or_else(|| NpyError::MalformedHeader("missing fortran_order".into()))?;
    let shape = shape.ok_or_else(|| NpyError::MalformedHeader("missing shape".into()))?;
    Ok((descr, fortran, shape))
}

/// Decodes an NPY v1.0 or v2.0 stream. The record name is left empty; NPZ
/// reading fills it from the member filename.
pub fn read_npy(bytes: &[u8]) -> Result<ArrayRecord, NpyError> {
    if bytes.len() < 8 || &bytes[..6] != MAGIC {
        return Err(NpyError::BadMagic);
    }
    let (major, minor) = (bytes[6], bytes[7]);
    let (header_len, header_start) = match (major, minor) {
        (1, 0) => {
            if bytes.len() < 10 {
                return Err(NpyError::MalformedHeader("truncated length field".into()));
            }
            (u16::from_le_bytes([bytes[8], bytes[9]]) as usize, 10)
        }
        (2, 0) => {
            if bytes.len() < 12 {
                return Err(NpyError::MalformedHeader("truncated length field".into()));
            }
            (
                u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize,
                12,
            )
        }
        (a, b) => return Err(NpyError::UnsupportedVersion(a, b)),
    };
    let payload_start = header_start + header_len;
    if bytes.len() < payload_start {
        return Err(NpyError::MalformedHeader("truncated header".into()));
    }
    let header_text = std::str::from_utf8(&bytes[header_start..payload_start])
        .map_err(|_| NpyError::MalformedHeader("header is not valid UTF-8".into()))?;
    let (descr, fortran, shape) = parse_header_dict(header_text)?;
    if fortran {
        return Err(NpyError::FortranOrderUnsupported);
    }
    let dtype = Dtype::from_descr(&descr)?;
    if shape.len() < 2 || shape.len() > 3 {
        return Err(NpyError::UnsupportedRank(shape.len()));
    }
    let expected = dtype.size() * shape.iter().product::<usize>();
    let payload = &bytes[payload_start..];
    if payload.len() != expected {
        return Err(NpyError::TruncatedPayload {
            expected,
            got: payload.len(),
        });
    }
    Ok(ArrayRecord {
        name: String::new(),
        dtype,
        shape,
        data: payload.to_vec(),
    })
}

// --- ZIP layer -------------------------------------------------------------

const LOCAL_SIG: u32 = 0x0403_4b50;
const CENTRAL_SIG: u32 = 0x0201_4b50;
const EOCD_SIG: u32 = 0x0605_4b50;

fn crc32(data: &[u8]) -> u32 {
    // Standard reflected CRC-32 (polynomial 0xEDB88320).
    let mut table = [0u32; 256];
    for (i, entry) in table.iter_mut().enumerate() {
        let mut c = i as u32;
        for _ in 0..8 {
            c = if c & 1 != 0 { 0xEDB8_8320 ^ (c >> 1) } else { c >> 1 };
        }
        *entry = c;
    }
    let mut crc = 0xFFFF_FFFFu32;
    for &b in data {
        crc = table[((crc ^ b as u32) & 0xFF) as usize] ^ (crc >> 8);
    }
    crc ^ 0xFFFF_FFFF
}

fn push_u16(out: &mut Vec<u8>, v: u16) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn push_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn read_u16(bytes: &[u8], at: usize) -> Option<u16> {
    bytes.get(at..at + 2).map(|s| u16::from_le_bytes([s[0], s[1]]))
}

fn read_u32(bytes: &[u8], at: usize) -> Option<u32> {
    bytes
        .get(at..at + 4)
        .map(|s| u32::from_le_bytes([s[0], s[1], s[2], s[3]]))
}

/// Encodes records as a ZIP archive of `<name>.npy` members, stored
/// uncompressed with zeroed timestamps so output bytes depend only on the
/// input records.
pub fn write_npz(records: &[ArrayRecord]) -> Result<Vec<u8>, NpyError> {
    let mut seen = std::collections::HashSet::new();
    for r in records {
        if !seen.insert(r.name.as_str()) {
            return Err(NpyError::DuplicateEntry(r.name.clone()));
        }
    }

    let mut out = Vec::new();
    let mut central = Vec::new();
    for record in records {
        let member_name = format!("{}.npy", record.name);
        let payload = write_npy(record)?;
        let crc = crc32(&payload);
        let offset = out.len() as u32;

        push_u32(&mut out, LOCAL_SIG);
        push_u16(&mut out, 20); // version needed
        push_u16(&mut out, 0); // flags
        push_u16(&mut out, 0); // method: stored
        push_u16(&mut out, 0); // mod time (zeroed)
        push_u16(&mut out, 0); // mod date (zeroed)
        push_u32(&mut out, crc);
        push_u32(&mut out, payload.len() as u32);
        push_u32(&mut out, payload.len() as u32);
        push_u16(&mut out, member_name.len() as u16);
        push_u16(&mut out, 0); // extra length
        out.extend_from_slice(member_name.as_bytes());
        out.extend_from_slice(&payload);

        push_u32(&mut central, CENTRAL_SIG);
        push_u16(&mut central, 20); // version made by
        push_u16(&mut central, 20); // version needed
        push_u16(&mut central, 0);
        push_u16(&mut central, 0);
        push_u16(&mut central, 0);
        push_u16(&mut central, 0);
        push_u32(&mut central, crc);
        push_u32(&mut central, payload.len() as u32);
        push_u32(&mut central, payload.len() as u32);
        push_u16(&mut central, member_name.len() as u16);
        push_u16(&mut central, 0); // extra
        push_u16(&mut central, 0); // comment
        push_u16(&mut central, 0); // disk number
        push_u16(&mut central, 0); // internal attrs
        push_u32(&mut central, 0); // external attrs
        push_u32(&mut central, offset);
        central.extend_from_slice(member_name.as_bytes());
    }

    let central_offset = out.len() as u32;
    out.extend_from_slice(&central);
    push_u32(&mut out, EOCD_SIG);
    push_u16(&mut out, 0);
    push_u16(&mut out, 0);
    push_u16(&mut out, records.len() as u16);
    push_u16(&mut out, records.len() as u16);
    push_u32(&mut out, central.len() as u32);
    push_u32(&mut out, central_offset);
    push_u16(&mut out, 0); // comment length
    Ok(out)
}

struct CentralEntry {
    name: String,
    method: u16,
    compressed_size: usize,
    local_offset: usize,
}

fn find_eocd(bytes: &[u8]) -> Option<usize> {
    // EOCD is at least 22 bytes; scan back past an optional comment.
    if bytes.len() < 22 {
        return None;
    }
    let floor = bytes.len().saturating_sub(22 + 65535);
    (floor..=bytes.len() - 22)
        .rev()
        .find(|&i| read_u32(bytes, i) == Some(EOCD_SIG))
}

fn parse_central_directory(bytes: &[u8]) -> Result<Vec<CentralEntry>, NpyError> {
    let eocd = find_eocd(bytes).ok_or(NpyError::NotAZip)?;
    let entry_count = read_u16(bytes, eocd + 10).ok_or(NpyError::NotAZip)? as usize;
    let central_offset = read_u32(bytes, eocd + 16).ok_or(NpyError::NotAZip)? as usize;

    let mut entries = Vec::with_capacity(entry_count);
    let mut at = central_offset;
    for _ in 0..entry_count {
        if read_u32(bytes, at) != Some(CENTRAL_SIG) {
            return Err(NpyError::NotAZip);
        }
        let method = read_u16(bytes, at + 10).ok_or(NpyError::NotAZip)?;
        let compressed_size = read_u32(bytes, at + 20).ok_or(NpyError::NotAZip)? as usize;
        let name_len = read_u16(bytes, at + 28).ok_or(NpyError::NotAZip)? as usize;
        let extra_len = read_u16(bytes, at + 30).ok_or(NpyError::NotAZip)? as usize;
        let comment_len = read_u16(bytes, at + 32).ok_or(NpyError::NotAZip)? as usize;
        let local_offset = read_u32(bytes, at + 42).ok_or(NpyError::NotAZip)? as usize;
        let name_bytes = bytes
            .get(at + 46..at + 46 + name_len)
            .ok_or(NpyError::NotAZip)?;
        let name = String::from_utf8(name_bytes.to_vec())
            .map_err(|_| NpyError::NotAZip)?;
        entries.push(CentralEntry {
            name,
            method,
            compressed_size,
            local_offset,
        });
        at += 46 + name_len + extra_len + comment_len;
    }
    Ok(entries)
}

fn member_payload<'a>(bytes: &'a [u8], entry: &CentralEntry) -> Result<&'a [u8], NpyError> {
    let at = entry.local_offset;
    if read_u32(bytes, at) != Some(LOCAL_SIG) {
        return Err(NpyError::NotAZip);
    }
    let name_len = read_u16(bytes, at + 26).ok_or(NpyError::NotAZip)? as usize;
    let extra_len = read_u16(bytes, at + 28).ok_or(NpyError::NotAZip)? as usize;
    let data_start = at + 30 + name_len + extra_len;
    bytes
        .get(data_start..data_start + entry.compressed_size)
        .ok_or(NpyError::NotAZip)
}

/// Decodes an NPZ archive, preserving entry order. Any member that is not a
/// well-formed supported NPY array is reported with its entry name.
pub fn read_npz(bytes: &[u8]) -> Result<Vec<ArrayRecord>, NpyError> {
    let entries = parse_central_directory(bytes)?;
    let mut records = Vec::with_capacity(entries.len());
    let mut seen = std::collections::HashSet::new();
    for entry in &entries {
        let array_name = entry
            .name
            .strip_suffix(".npy")
            .ok_or_else(|| NpyError::Entry {
                name: entry.name.clone(),
                message: "member is not an .npy file".into(),
            })?
            .to_string();
        if entry.method != 0 {
            return Err(NpyError::Entry {
                name: entry.name.clone(),
                message: format!("unsupported compression method {}", entry.method),
            });
        }
        if !seen.insert(array_name.clone()) {
            return Err(NpyError::DuplicateEntry(array_name));
        }
        let payload = member_payload(bytes, entry)?;
        let mut record = read_npy(payload).map_err(|e| NpyError::Entry {
            name: entry.name.clone(),
            message: e.to_string(),
        })?;
        record.name = array_name;
        records.push(record);
    }
    Ok(records)
}

/// Convenience lookup of one named entry in NPZ bytes.
pub fn read_npz_entry(bytes: &[u8], name: &str) -> Result<ArrayRecord, NpyError> {
    let records = read_npz(bytes)?;
    records
        .into_iter()
        .find(|r| r.name == name)
        .ok_or_else(|| NpyError::Entry {
            name: name.to_string(),
            message: "entry not found in archive".into(),
        })
}
