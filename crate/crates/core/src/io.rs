//! `.vpv.json` volume files and landmark CSV.
//!
//! A volume is a small JSON header next to a raw little-endian payload:
//! f32 for intensities, soft masks and fields (three planar channels), u8
//! for binary masks. The header's `data` entry is relative to the header's
//! directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{BinaryMask, DisplacementField, GridInfo, Landmark, LandmarkSet, ScalarVolume, SoftMask, Space};

pub const HEADER_SUFFIX: &str = ".vpv.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    U8,
}

impl Dtype {
    fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::U8 => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub dtype: Dtype,
    pub channels: usize,
    pub layout: String,
    pub order: String,
    pub endian: String,
    pub data: String,
}

/// Anything that can be read back from a `.vpv.json` file.
#[derive(Debug, Clone, PartialEq)]
pub enum VolumeData {
    Scalar(ScalarVolume),
    Field(DisplacementField),
    Binary(BinaryMask),
}

impl VolumeData {
    pub fn grid(&self) -> &GridInfo {
        match self {
            VolumeData::Scalar(v) => v.grid(),
            VolumeData::Field(f) => f.grid(),
            VolumeData::Binary(m) => m.grid(),
        }
    }
}

/// Borrowed view of an object to write.
#[derive(Debug, Clone, Copy)]
pub enum VolumeRef<'a> {
    Scalar(&'a ScalarVolume),
    Soft(&'a SoftMask),
    Field(&'a DisplacementField),
    Binary(&'a BinaryMask),
}

impl<'a> From<&'a ScalarVolume> for VolumeRef<'a> {
    fn from(v: &'a ScalarVolume) -> Self {
        VolumeRef::Scalar(v)
    }
}
impl<'a> From<&'a SoftMask> for VolumeRef<'a> {
    fn from(v: &'a SoftMask) -> Self {
        VolumeRef::Soft(v)
    }
}
impl<'a> From<&'a DisplacementField> for VolumeRef<'a> {
    fn from(v: &'a DisplacementField) -> Self {
        VolumeRef::Field(v)
    }
}
impl<'a> From<&'a BinaryMask> for VolumeRef<'a> {
    fn from(v: &'a BinaryMask) -> Self {
        VolumeRef::Binary(v)
    }
}

/// `dir/name.vpv.json` -> `name.raw`.
fn raw_name(header_path: &Path) -> String {
    let file = header_path.file_name().and_then(|f| f.to_str()).unwrap_or("volume");
    let stem = file.strip_suffix(HEADER_SUFFIX).or_else(|| file.strip_suffix(".json")).unwrap_or(file);
    format!("{stem}.raw")
}

pub fn encode_payload(obj: VolumeRef<'_>) -> (Header, Vec<u8>) {
    let (grid, dtype, channels, bytes) = match obj {
        VolumeRef::Scalar(v) => (*v.grid(), Dtype::F32, 1, f32_bytes(&[v.data()])),
        VolumeRef::Soft(m) => (*m.grid(), Dtype::F32, 1, f32_bytes(&[m.data()])),
        VolumeRef::Field(f) => {
            let c = f.components();
            (*f.grid(), Dtype::F32, 3, f32_bytes(&[&c[0], &c[1], &c[2]]))
        }
        VolumeRef::Binary(m) => (*m.grid(), Dtype::U8, 1, m.data().to_vec()),
    };
    let header = Header {
        dims: grid.dims(),
        spacing_mm: grid.spacing_mm(),
        dtype,
        channels,
        layout: "planar".into(),
        order: "x-fastest".into(),
        endian: "little".into(),
        data: String::new(),
    };
    (header, bytes)
}

fn f32_bytes(planes: &[&[f64]]) -> Vec<u8> {
    let mut out = Vec::with_capacity(planes.iter().map(|p| p.len() * 4).sum());
    for p in planes {
        for &v in p.iter() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn write_volume<'a>(obj: impl Into<VolumeRef<'a>>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (mut header, bytes) = encode_payload(obj.into());
    header.data = raw_name(path);
    let raw_path = path.with_file_name(&header.data);
    let mut json = serde_json::to_string_pretty(&header)?;
    json.push('\n');
    fs::write(&raw_path, &bytes).map_err(|e| Error::io(&raw_path, e))?;
    fs::write(path, json).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_header(path: impl AsRef<Path>) -> Result<Header> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let header: Header =
        serde_json::from_str(&text).map_err(|e| Error::Header { path: path.to_path_buf(), msg: e.to_string() })?;
    let bad = |msg: String| Error::Header { path: path.to_path_buf(), msg };
    if header.layout != "planar" {
        return Err(bad(format!("unsupported layout {:?}", header.layout)));
    }
    if header.order != "x-fastest" {
        return Err(bad(format!("unsupported order {:?}", header.order)));
    }
    if header.endian != "little" {
        return Err(bad(format!("unsupported endian {:?}", header.endian)));
    }
    match (header.dtype, header.channels) {
        (Dtype::F32, 1) | (Dtype::F32, 3) | (Dtype::U8, 1) => {}
        (d, c) => return Err(bad(format!("unsupported dtype/channels {d:?}/{c}"))),
    }
    Ok(header)
}

fn raw_path(header_path: &Path, header: &Header) -> PathBuf {
    header_path.parent().unwrap_or(Path::new(".")).join(&header.data)
}

/// Decodes a header plus its raw payload.
pub fn decode(header: &Header, bytes: &[u8]) -> Result<VolumeData> {
    let grid = GridInfo::new(header.dims, header.spacing_mm)?;
    let n = grid.len();
    let expected = n * header.channels * header.dtype.size();
    if bytes.len() != expected {
        return Err(Error::PayloadSize { expected, found: bytes.len() });
    }
    match header.dtype {
        Dtype::U8 => Ok(VolumeData::Binary(BinaryMask::new(grid, bytes.to_vec())?)),
        Dtype::F32 => {
            let vals: Vec<f64> =
                bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64).collect();
            if let Some(i) = vals.iter().position(|v| v.is_nan()) {
                return Err(Error::InvalidData(format!("NaN in payload at element {i}")));
            }
            if header.channels == 3 {
                let comps = [vals[..n].to_vec(), vals[n..2 * n].to_vec(), vals[2 * n..].to_vec()];
                Ok(VolumeData::Field(DisplacementField::new(grid, comps)?))
            } else {
                Ok(VolumeData::Scalar(ScalarVolume::new(grid, vals)?))
            }
        }
    }
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<VolumeData> {
    let path = path.as_ref();
    let header = read_header(path)?;
    let raw = raw_path(path, &header);
    let bytes = fs::read(&raw).map_err(|e| Error::io(&raw, e))?;
    decode(&header, &bytes)
}

fn wrong_kind(path: &Path, want: &str) -> Error {
    Error::Header { path: path.to_path_buf(), msg: format!("expected {want}") }
}

pub fn read_scalar(path: impl AsRef<Path>) -> Result<ScalarVolume> {
    match read_volume(path.as_ref())? {
        VolumeData::Scalar(v) => Ok(v),
        _ => Err(wrong_kind(path.as_ref(), "f32 single-channel volume")),
    }
}

pub fn read_field(path: impl AsRef<Path>) -> Result<DisplacementField> {
    match read_volume(path.as_ref())? {
        VolumeData::Field(f) => Ok(f),
        _ => Err(wrong_kind(path.as_ref(), "f32 three-channel field")),
    }
}

pub fn read_binary(path: impl AsRef<Path>) -> Result<BinaryMask> {
    match read_volume(path.as_ref())? {
        VolumeData::Binary(m) => Ok(m),
        _ => Err(wrong_kind(path.as_ref(), "u8 binary mask")),
    }
}

/// Reads a soft mask; a u8 binary mask is accepted and promoted.
pub fn read_soft(path: impl AsRef<Path>) -> Result<SoftMask> {
    match read_volume(path.as_ref())? {
        VolumeData::Scalar(v) => {
            let g = *v.grid();
            SoftMask::new(g, v.into_data())
        }
        VolumeData::Binary(m) => Ok(SoftMask::from_binary(&m)),
        VolumeData::Field(_) => Err(wrong_kind(path.as_ref(), "soft mask")),
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct LandmarkRow {
    id: String,
    space: Space,
    x: f64,
    y: f64,
    z: f64,
}

pub fn read_landmarks(path: impl AsRef<Path>, grid: &GridInfo) -> Result<LandmarkSet> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let mut entries = Vec::new();
    for row in rdr.deserialize() {
        let row: LandmarkRow = row?;
        entries.push(Landmark { id: row.id, space: row.space, position: [row.x, row.y, row.z] });
    }
    LandmarkSet::from_entries(entries, grid)
}

pub fn write_landmarks(set: &LandmarkSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    for p in set.pairs() {
        for (space, pos) in [(Space::Fixed, p.fixed), (Space::Moving, p.moving)] {
            w.serialize(LandmarkRow { id: p.id.clone(), space, x: pos[0], y: pos[1], z: pos[2] })?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}
