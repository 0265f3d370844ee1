//! Named-tensor archive files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "HLOARCH\0"
//! version  u32      currently 1
//! count    u32      number of entries
//! table    count x { name_len u32, name utf-8, width u8 (4|8), ndim u8, dims u64 x ndim }
//! payload  each entry's elements in table order, row-major, IEEE-754 LE
//! ```
//!
//! Entries are kept sorted by name, so two archives with equal contents
//! serialize to identical bytes.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use crate::error::{validate, Error, Result};

pub const MAGIC: &[u8; 8] = b"HLOARCH\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum ElementWidth {
    #[default]
    #[serde(rename = "4")]
    Four,
    #[serde(rename = "8")]
    Eight,
}

impl ElementWidth {
    pub fn bytes(self) -> usize {
        match self {
            ElementWidth::Four => 4,
            ElementWidth::Eight => 8,
        }
    }

    pub fn from_bytes(n: u64) -> Result<Self> {
        match n {
            4 => Ok(ElementWidth::Four),
            8 => Ok(ElementWidth::Eight),
            other => Err(Error::Validation(format!("unsupported element width {other}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn width(&self) -> ElementWidth {
        match self {
            TensorData::F32(_) => ElementWidth::Four,
            TensorData::F64(_) => ElementWidth::Eight,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub shape: Vec<usize>,
    pub data: TensorData,
}

impl NamedTensor {
    pub fn new(shape: Vec<usize>, data: TensorData) -> Result<Self> {
        let expected: usize = shape.iter().product();
        validate(expected == data.len(), || {
            format!("shape {:?} needs {expected} elements, got {}", shape, data.len())
        })?;
        Ok(Self { shape, data })
    }

    pub fn from_array(a: &ArrayD<f64>, width: ElementWidth) -> Self {
        let flat = a.iter().copied();
        let data = match width {
            ElementWidth::Four => TensorData::F32(flat.map(|v| v as f32).collect()),
            ElementWidth::Eight => TensorData::F64(flat.collect()),
        };
        Self {
            shape: a.shape().to_vec(),
            data,
        }
    }

    pub fn to_array(&self) -> ArrayD<f64> {
        let flat: Vec<f64> = match &self.data {
            TensorData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::F64(v) => v.clone(),
        };
        ArrayD::from_shape_vec(IxDyn(&self.shape), flat).expect("shape validated at construction")
    }

    pub fn byte_len(&self) -> usize {
        self.data.len() * self.data.width().bytes()
    }

    /// Equality on raw bit patterns (NaN-safe).
    pub fn bit_eq(&self, other: &Self) -> bool {
        if self.shape != other.shape {
            return false;
        }
        match (&self.data, &other.data) {
            (TensorData::F32(a), TensorData::F32(b)) => a.iter().map(|x| x.to_bits()).eq(b.iter().map(|x| x.to_bits())),
            (TensorData::F64(a), TensorData::F64(b)) => a.iter().map(|x| x.to_bits()).eq(b.iter().map(|x| x.to_bits())),
            _ => false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TensorArchive {
    entries: BTreeMap<String, NamedTensor>,
}

impl TensorArchive {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds an archive from a list that may contain duplicate names; any
    /// duplicate is a validation error.
    pub fn from_entries(entries: impl IntoIterator<Item = (String, NamedTensor)>) -> Result<Self> {
        let mut a = Self::new();
        for (name, t) in entries {
            a.insert(name, t)?;
        }
        Ok(a)
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: NamedTensor) -> Result<()> {
        let name = name.into();
        validate(!name.is_empty(), || "tensor names must be non-empty".into())?;
        validate(name.len() <= u32::MAX as usize, || "tensor name too long".into())?;
        validate(tensor.shape.len() <= u8::MAX as usize, || format!("{name}: too many dimensions"))?;
        validate(!self.entries.contains_key(&name), || format!("duplicate tensor name {name:?}"))?;
        self.entries.insert(name, tensor);
        Ok(())
    }

    pub fn insert_array(&mut self, name: impl Into<String>, a: &ArrayD<f64>, width: ElementWidth) -> Result<()> {
        self.insert(name, NamedTensor::from_array(a, width))
    }

    pub fn insert_scalars(&mut self, name: impl Into<String>, values: &[f64], width: ElementWidth) -> Result<()> {
        let a = ArrayD::from_shape_vec(IxDyn(&[values.len()]), values.to_vec()).unwrap();
        self.insert_array(name, &a, width)
    }

    /// Stores UTF-8 text as a 1-D width-4 array of byte values (exact in f32).
    pub fn insert_str(&mut self, name: impl Into<String>, text: &str) -> Result<()> {
        let data: Vec<f32> = text.bytes().map(f32::from).collect();
        self.insert(name, NamedTensor::new(vec![data.len()], TensorData::F32(data))?)
    }

    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.entries.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn array(&self, name: &str) -> Result<ArrayD<f64>> {
        self.get(name)
            .map(NamedTensor::to_array)
            .ok_or_else(|| Error::MissingWeights(vec![name.to_string()]))
    }

    pub fn scalars(&self, name: &str) -> Result<Vec<f64>> {
        Ok(self.array(name)?.iter().copied().collect())
    }

    pub fn get_str(&self, name: &str) -> Result<String> {
        let bytes: Vec<u8> = self
            .scalars(name)?
            .into_iter()
            .map(|v| {
                if (0.0..=255.0).contains(&v) && v.fract() == 0.0 {
                    Ok(v as u8)
                } else {
                    Err(Error::Validation(format!("{name}: not a text entry")))
                }
            })
            .collect::<Result<_>>()?;
        String::from_utf8(bytes).map_err(|_| Error::Validation(format!("{name}: invalid utf-8")))
    }

    pub fn remove(&mut self, name: &str) -> Option<NamedTensor> {
        self.entries.remove(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &NamedTensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Bitwise equality of every entry.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(other.entries.iter())
                .all(|((ka, a), (kb, b))| ka == kb && a.bit_eq(b))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.data.width().bytes() as u8);
            out.push(t.shape.len() as u8);
            for &d in &t.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
        }
        for t in self.entries.values() {
            match &t.data {
                TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let corrupt = |reason: &str| Error::CorruptHeader {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        let mut cur = Cursor { bytes, pos: 0 };
        let magic = cur.take(8).ok_or_else(|| corrupt("file shorter than magic"))?;
        if magic != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = cur.u32().ok_or_else(|| corrupt("missing version"))?;
        if version != VERSION {
            return Err(corrupt(&format!("unsupported version {version}")));
        }
        let count = cur.u32().ok_or_else(|| corrupt("missing entry count"))? as usize;
        let mut table = Vec::with_capacity(count.min(1 << 16));
        for i in 0..count {
            let name_len = cur.u32().ok_or_else(|| corrupt(&format!("entry {i}: header ends early")))? as usize;
            let name = cur
                .take(name_len)
                .ok_or_else(|| corrupt(&format!("entry {i}: header ends early")))?;
            let name = std::str::from_utf8(name)
                .map_err(|_| corrupt(&format!("entry {i}: name is not utf-8")))?
                .to_string();
            let width = cur.u8().ok_or_else(|| corrupt(&format!("entry {name}: header ends early")))?;
            let width = ElementWidth::from_bytes(width as u64)
                .map_err(|_| corrupt(&format!("entry {name}: invalid element width {width}")))?;
            let ndim = cur.u8().ok_or_else(|| corrupt(&format!("entry {name}: header ends early")))? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                let d = cur.u64().ok_or_else(|| corrupt(&format!("entry {name}: header ends early")))?;
                shape.push(usize::try_from(d).map_err(|_| corrupt(&format!("entry {name}: dimension too large")))?);
            }
            let elems = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .and_then(|n| n.checked_mul(width.bytes()).map(|b| (n, b)))
                .ok_or_else(|| corrupt(&format!("entry {name}: size overflows")))?;
            table.push((name, width, shape, elems));
        }
        let expected: u64 = table.iter().map(|t| t.3 .1 as u64).sum();
        let found = (bytes.len() - cur.pos) as u64;
        if found < expected {
            return Err(Error::Truncated {
                path: path.to_path_buf(),
                expected,
                found,
            });
        }
        if found > expected {
            return Err(corrupt(&format!("{} trailing bytes after payload", found - expected)));
        }
        let mut archive = TensorArchive::new();
        for (name, width, shape, (n, nbytes)) in table {
            let raw = cur.take(nbytes).expect("payload length checked");
            let data = match width {
                ElementWidth::Four => TensorData::F32(
                    raw.chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                ElementWidth::Eight => TensorData::F64(
                    raw.chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
            };
            debug_assert_eq!(data.len(), n);
            archive
                .insert(name.clone(), NamedTensor { shape, data })
                .map_err(|_| corrupt(&format!("duplicate entry {name:?}")))?;
        }
        Ok(archive)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }
    fn u8(&mut self) -> Option<u8> {
        self.take(1).map(|b| b[0])
    }
    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }
    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }
}

pub fn save_archive(path: impl AsRef<Path>, entries: &TensorArchive) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&entries.to_bytes()).map_err(|e| Error::io(path, e))?;
    f.sync_all().map_err(|e| Error::io(path, e))
}

pub fn load_archive(path: impl AsRef<Path>) -> Result<TensorArchive> {
    let path = path.as_ref();
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(Error::MissingFile(path.to_path_buf())),
        Err(e) => return Err(Error::io(path, e)),
    };
    TensorArchive::from_bytes(&bytes, path)
}
