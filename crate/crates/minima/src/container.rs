//! The MNMA binary tensor container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! header   magic "MNMA" | u32 version | u32 entry count | u64 metadata offset | u64 metadata length
//! index    per entry: u16 name length | UTF-8 name | u8 dtype (0 f32, 1 f64) | u8 ndim | ndim × u64 dims | u64 payload offset
//! payload  raw scalars, each block starting on a 64-byte boundary
//! metadata optional JSON document (length 0 when absent)
//! ```
//!
//! The writer is canonical: blocks follow the index in entry order, padding
//! is zero-filled, every block (including empty ones) advances the cursor by
//! at least one alignment unit so offsets are strictly increasing, and the
//! file ends right after the last block when there is no metadata.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"MNMA";
pub const VERSION: u32 = 1;
pub const ALIGN: u64 = 64;
pub const HEADER_LEN: u64 = 28;

#[derive(Clone, Debug, PartialEq)]
pub enum Data {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl Data {
    pub fn len(&self) -> usize {
        match self {
            Data::F32(v) => v.len(),
            Data::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype_code(&self) -> u8 {
        match self {
            Data::F32(_) => 0,
            Data::F64(_) => 1,
        }
    }

    fn elem_size(&self) -> u64 {
        match self {
            Data::F32(_) => 4,
            Data::F64(_) => 8,
        }
    }

    pub fn to_f64(&self) -> Vec<f64> {
        match self {
            Data::F32(v) => v.iter().map(|&x| x as f64).collect(),
            Data::F64(v) => v.clone(),
        }
    }

    /// Bitwise comparison (distinguishes NaN payloads and signed zeros).
    pub fn bit_eq(&self, other: &Data) -> bool {
        match (self, other) {
            (Data::F32(a), Data::F32(b)) => a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()),
            (Data::F64(a), Data::F64(b)) => a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()),
            _ => false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RawEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Data,
}

impl RawEntry {
    pub fn f64(name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Self {
        Self { name: name.into(), shape, data: Data::F64(data) }
    }

    pub fn f32(name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Self {
        Self { name: name.into(), shape, data: Data::F32(data) }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    pub entries: Vec<RawEntry>,
    /// Raw metadata bytes, kept verbatim.
    pub metadata: Option<Vec<u8>>,
}

/// Location of one entry inside an encoded file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IndexEntry {
    pub name: String,
    pub dtype: u8,
    pub shape: Vec<u64>,
    pub offset: u64,
    pub byte_len: u64,
}

fn align_up(x: u64) -> u64 {
    x.div_ceil(ALIGN) * ALIGN
}

impl Container {
    pub fn get(&self, name: &str) -> Option<&RawEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn metadata_json<T: serde::de::DeserializeOwned>(&self) -> Result<Option<T>> {
        match &self.metadata {
            Some(bytes) => Ok(Some(serde_json::from_slice(bytes)?)),
            None => Ok(None),
        }
    }

    fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.name.as_str()) {
                return Err(Error::DuplicateEntry(e.name.clone()));
            }
            if e.name.len() > u16::MAX as usize {
                return Err(Error::Format(format!("entry name of {} bytes is too long", e.name.len())));
            }
            if e.shape.len() > u8::MAX as usize {
                return Err(Error::Format(format!("entry '{}' has {} dims", e.name, e.shape.len())));
            }
            let count = e.shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            if count != Some(e.data.len()) {
                return Err(Error::Format(format!(
                    "entry '{}' has shape {:?} but {} values",
                    e.name,
                    e.shape,
                    e.data.len()
                )));
            }
        }
        if self.entries.len() > u32::MAX as usize {
            return Err(Error::Format("too many entries".into()));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let index_len: u64 = self
            .entries
            .iter()
            .map(|e| 2 + e.name.len() as u64 + 2 + 8 * e.shape.len() as u64 + 8)
            .sum();
        let mut offsets = Vec::with_capacity(self.entries.len());
        let mut cursor = align_up(HEADER_LEN + index_len);
        let mut payload_end = HEADER_LEN + index_len;
        for e in &self.entries {
            offsets.push(cursor);
            let bytes = e.data.len() as u64 * e.data.elem_size();
            payload_end = cursor + bytes;
            cursor = align_up(cursor + bytes.max(1));
        }
        let meta = self.metadata.as_deref().unwrap_or(&[]);
        let (meta_off, meta_len) = if meta.is_empty() { (0, 0) } else { (cursor, meta.len() as u64) };
        if meta.is_empty() {
            cursor = payload_end;
        }

        let mut out = Vec::with_capacity((cursor + meta_len) as usize);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta_off.to_le_bytes());
        out.extend_from_slice(&meta_len.to_le_bytes());
        for (e, off) in self.entries.iter().zip(&offsets) {
            out.extend_from_slice(&(e.name.len() as u16).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(e.data.dtype_code());
            out.push(e.shape.len() as u8);
            for &d in &e.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&off.to_le_bytes());
        }
        for (e, &off) in self.entries.iter().zip(&offsets) {
            out.resize(off as usize, 0);
            match &e.data {
                Data::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                Data::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        out.resize(cursor as usize, 0);
        out.extend_from_slice(meta);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (index, meta) = read_index(bytes)?;
        let mut entries = Vec::with_capacity(index.len());
        for ie in index {
            let raw = &bytes[ie.offset as usize..(ie.offset + ie.byte_len) as usize];
            let data = match ie.dtype {
                0 => Data::F32(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()),
                _ => Data::F64(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()),
            };
            let shape = ie.shape.iter().map(|&d| d as usize).collect();
            entries.push(RawEntry { name: ie.name, shape, data });
        }
        let metadata = meta.map(|(off, len)| bytes[off as usize..(off + len) as usize].to_vec());
        Ok(Self { entries, metadata })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_input(path)?)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Truncation {
                what: what.into(),
                needed: (self.pos + n) as u64,
                len: self.bytes.len() as u64,
            }),
        }
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Metadata `(offset, length)`.
pub type MetadataSpan = (u64, u64);

/// Parses and validates the header and index. Returns the entries and the
/// metadata `(offset, length)` if present.
pub fn read_index(bytes: &[u8]) -> Result<(Vec<IndexEntry>, Option<MetadataSpan>)> {
    let len = bytes.len() as u64;
    let mut c = Cursor { bytes, pos: 0 };
    let magic = c.take(4, "header")?;
    if magic != MAGIC {
        return Err(Error::Format(format!("bad magic {:02x?}", magic)));
    }
    let version = c.u32("header")?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {}", version)));
    }
    let count = c.u32("header")?;
    let meta_off = c.u64("header")?;
    let meta_len = c.u64("header")?;

    let mut index = Vec::with_capacity(count.min(1 << 16) as usize);
    let mut names = HashSet::new();
    for i in 0..count {
        let what = format!("index entry {}", i);
        let name_len = c.u16(&what)? as usize;
        let name = std::str::from_utf8(c.take(name_len, &what)?)
            .map_err(|_| Error::Format(format!("entry {} name is not UTF-8", i)))?
            .to_string();
        let dtype = c.u8(&what)?;
        let elem = match dtype {
            0 => 4u64,
            1 => 8,
            d => return Err(Error::Format(format!("entry '{}' has unknown dtype {}", name, d))),
        };
        let ndim = c.u8(&what)?;
        let mut shape = Vec::with_capacity(ndim as usize);
        for _ in 0..ndim {
            shape.push(c.u64(&what)?);
        }
        let offset = c.u64(&what)?;
        let byte_len = shape
            .iter()
            .try_fold(elem, |a, &d| a.checked_mul(d))
            .filter(|&b| usize::try_from(b).is_ok())
            .ok_or_else(|| Error::Format(format!("entry '{}' size overflows", name)))?;
        if !names.insert(name.clone()) {
            return Err(Error::DuplicateEntry(name));
        }
        index.push(IndexEntry { name, dtype, shape, offset, byte_len });
    }

    let mut floor = c.pos as u64;
    let mut prev: Option<u64> = None;
    for e in &index {
        if e.offset % ALIGN != 0 {
            return Err(Error::Format(format!("entry '{}' offset {} is not {}-byte aligned", e.name, e.offset, ALIGN)));
        }
        if prev.is_some_and(|p| e.offset <= p) || e.offset < floor {
            return Err(Error::Format(format!("entry '{}' offset {} overlaps preceding data", e.name, e.offset)));
        }
        let end = e.offset.checked_add(e.byte_len).ok_or_else(|| Error::Format("offset overflow".into()))?;
        if end > len {
            return Err(Error::Truncation { what: format!("payload of '{}'", e.name), needed: end, len });
        }
        prev = Some(e.offset);
        floor = end;
    }
    let meta = if meta_len == 0 {
        None
    } else {
        if meta_off < floor {
            return Err(Error::Format(format!("metadata offset {} overlaps payload", meta_off)));
        }
        let end = meta_off.checked_add(meta_len).ok_or_else(|| Error::Format("metadata overflow".into()))?;
        if end > len {
            return Err(Error::Truncation { what: "metadata".into(), needed: end, len });
        }
        Some((meta_off, meta_len))
    };
    Ok((index, meta))
}

/// Reads a stage input; a missing file is a usage error.
pub fn read_input(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| {
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::MissingInput { path: path.to_path_buf(), source }
        } else {
            Error::Io(source)
        }
    })
}

/// Writes via a temporary file in the target directory and renames it into
/// place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Container {
        Container {
            entries: vec![
                RawEntry::f64("a", vec![2, 3], (0..6).map(|i| i as f64 * 0.5).collect()),
                RawEntry::f32("b", vec![5], vec![1.0, -2.0, 3.5, f32::MIN_POSITIVE, -0.0]),
                RawEntry::f64("c.scalar", vec![], vec![core::f64::consts::PI]),
            ],
            metadata: Some(br#"{"k":1}"#.to_vec()),
        }
    }

    #[test]
    fn round_trip_three_entries() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        let back = Container::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn offsets_are_aligned_and_increasing() {
        let bytes = sample().to_bytes().unwrap();
        let (index, meta) = read_index(&bytes).unwrap();
        let offs: Vec<u64> = index.iter().map(|e| e.offset).collect();
        assert!(offs.iter().all(|o| o % 64 == 0));
        assert!(offs.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(offs[0], 128);
        assert_eq!(meta, Some((320, 7)));
        assert_eq!(&bytes[0..4], b"MNMA");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 3);
    }

    #[test]
    fn flipped_magic_is_format_error() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[0] ^= 0xff;
        assert!(matches!(Container::from_bytes(&bytes), Err(Error::Format(_))));
        let mut bytes = sample().to_bytes().unwrap();
        bytes[4] = 2;
        assert!(matches!(Container::from_bytes(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn truncation_is_reported() {
        let c = Container { metadata: None, ..sample() };
        let bytes = c.to_bytes().unwrap();
        for cut in [3, 20, 40, 130, bytes.len() - 1] {
            assert!(
                matches!(Container::from_bytes(&bytes[..cut]), Err(Error::Truncation { .. })),
                "cut at {cut}"
            );
        }
    }

    #[test]
    fn duplicates_rejected_on_both_sides() {
        let mut c = sample();
        c.entries[1].name = "a".into();
        assert!(matches!(c.to_bytes(), Err(Error::DuplicateEntry(n)) if n == "a"));

        let mut bytes = sample().to_bytes().unwrap();
        // Rename "b" to "a" in the index.
        let pos = bytes.iter().position(|&b| b == b'b').unwrap();
        bytes[pos] = b'a';
        assert!(matches!(Container::from_bytes(&bytes), Err(Error::DuplicateEntry(_))));
    }

    #[test]
    fn misaligned_offset_rejected() {
        let mut bytes = sample().to_bytes().unwrap();
        // Offset of entry "a" sits right after its single dim pair.
        let off_pos = 28 + 2 + 1 + 1 + 1 + 16;
        bytes[off_pos] += 8;
        assert!(matches!(Container::from_bytes(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let c = Container {
            entries: vec![RawEntry::f64("x", vec![2, 2], vec![0.0; 3])],
            metadata: None,
        };
        assert!(matches!(c.to_bytes(), Err(Error::Format(_))));
    }

    #[test]
    fn empty_entries_keep_offsets_increasing() {
        let c = Container {
            entries: vec![
                RawEntry::f32("e0", vec![0, 4], vec![]),
                RawEntry::f32("e1", vec![3, 0], vec![]),
                RawEntry::f64("e2", vec![1], vec![1.0]),
            ],
            metadata: None,
        };
        let bytes = c.to_bytes().unwrap();
        assert_eq!(Container::from_bytes(&bytes).unwrap(), c);
    }

    #[test]
    fn atomic_write_replaces_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.mnma");
        std::fs::write(&p, b"junk").unwrap();
        sample().write(&p).unwrap();
        assert_eq!(Container::read(&p).unwrap(), sample());
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }

    #[test]
    fn missing_input_is_usage_error() {
        let err = Container::read(Path::new("/nonexistent/model.mnma")).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }
}
