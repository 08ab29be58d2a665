//! Self-describing tensor container and dataset manifest.
//!
//! A tensor file is a single line of UTF-8 JSON (dims, dtype, endianness,
//! format version plus free-form metadata), a newline, then the raw
//! little-endian payload in row-major order with the innermost axis last.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{CoreError, Result};
use crate::tensor::{DType, DiffractionStack, Pitch, PotentialVolume, Real, Stack4, Vol};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    dims: Vec<usize>,
    dtype: DType,
    endianness: String,
    #[serde(flatten)]
    meta: BTreeMap<String, Value>,
}

/// Raw payload of a tensor file, preserving the stored dtype.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn all_finite(&self) -> bool {
        match self {
            TensorData::F32(v) => v.iter().all(|x| x.is_finite()),
            TensorData::F64(v) => v.iter().all(|x| x.is_finite()),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        match self {
            TensorData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::F64(v) => v.clone(),
        }
    }
}

/// Write a tensor with arbitrary metadata keys merged into the header line.
pub fn write_tensor(
    path: &Path,
    dims: &[usize],
    data: &TensorData,
    metadata: &BTreeMap<String, Value>,
) -> Result<()> {
    let n: usize = dims.iter().product();
    if n != data.len() {
        return Err(CoreError::ShapeMismatch(format!(
            "dims {:?} imply {} elements, payload has {}",
            dims,
            n,
            data.len()
        )));
    }
    if !data.all_finite() {
        return Err(CoreError::NonFinite(format!("tensor payload for {}", path.display())));
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        dims: dims.to_vec(),
        dtype: data.dtype(),
        endianness: "LE".into(),
        meta: metadata.clone(),
    };
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    match data {
        TensorData::F32(v) => {
            for x in v {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        TensorData::F64(v) => {
            for x in v {
                w.write_all(&x.to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Read back a tensor file: dims, payload (stored dtype preserved), metadata.
pub fn read_tensor(path: &Path) -> Result<(Vec<usize>, TensorData, BTreeMap<String, Value>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut line = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        match r.read(&mut byte)? {
            0 => {
                return Err(CoreError::MalformedFile {
                    path: path.display().to_string(),
                    reason: "missing header newline".into(),
                })
            }
            _ => {
                if byte[0] == b'\n' {
                    break;
                }
                line.push(byte[0]);
                if line.len() > 1 << 20 {
                    return Err(CoreError::MalformedFile {
                        path: path.display().to_string(),
                        reason: "header exceeds 1 MiB".into(),
                    });
                }
            }
        }
    }
    let header: Header =
        serde_json::from_slice(&line).map_err(|e| CoreError::MalformedFile {
            path: path.display().to_string(),
            reason: format!("header parse: {e}"),
        })?;
    if header.format_version != FORMAT_VERSION {
        return Err(CoreError::UnsupportedVersion(header.format_version));
    }
    if header.endianness != "LE" {
        return Err(CoreError::MalformedFile {
            path: path.display().to_string(),
            reason: format!("unsupported endianness {:?}", header.endianness),
        });
    }
    let n: usize = header.dims.iter().product();
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    let expected = n * header.dtype.size_bytes();
    if payload.len() != expected {
        return Err(CoreError::MalformedFile {
            path: path.display().to_string(),
            reason: format!("payload length {} != expected {}", payload.len(), expected),
        });
    }
    let data = match header.dtype {
        DType::F32 => TensorData::F32(
            payload.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect(),
        ),
        DType::F64 => TensorData::F64(
            payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
                .collect(),
        ),
    };
    Ok((header.dims, data, header.meta))
}

fn vec_to_tensor_data<T: Real>(data: &[T]) -> TensorData {
    match T::DTYPE {
        DType::F32 => TensorData::F32(data.iter().map(|v| v.f64() as f32).collect()),
        DType::F64 => TensorData::F64(data.iter().map(|v| v.f64()).collect()),
    }
}

fn tensor_data_to_vec<T: Real>(data: &TensorData) -> Vec<T> {
    match data {
        TensorData::F32(v) => v.iter().map(|&x| T::of(x as f64)).collect(),
        TensorData::F64(v) => v.iter().map(|&x| T::of(x)).collect(),
    }
}

/// Write a potential volume; pitch and rescale factor ride in the header.
pub fn write_volume<T: Real>(path: &Path, v: &PotentialVolume<T>) -> Result<()> {
    let mut meta = BTreeMap::new();
    meta.insert("pitch".into(), serde_json::to_value([v.pitch.dz, v.pitch.dy, v.pitch.dx])?);
    meta.insert("rescale_factor".into(), serde_json::to_value(v.rescale_factor)?);
    meta.insert("kind".into(), Value::String("potential_volume".into()));
    write_tensor(path, &[v.vol.d, v.vol.h, v.vol.w], &vec_to_tensor_data(&v.vol.data), &meta)
}

/// Read a potential volume, converting the payload to `T` if the stored
/// dtype differs.
pub fn read_volume<T: Real>(path: &Path) -> Result<PotentialVolume<T>> {
    let (dims, data, meta) = read_tensor(path)?;
    if dims.len() != 3 {
        return Err(CoreError::MalformedFile {
            path: path.display().to_string(),
            reason: format!("expected 3 dims for a volume, got {:?}", dims),
        });
    }
    let pitch = match meta.get("pitch") {
        Some(v) => {
            let p: [f64; 3] = serde_json::from_value(v.clone())?;
            Pitch::new(p[0], p[1], p[2])?
        }
        None => Pitch::reference(),
    };
    let rescale_factor =
        meta.get("rescale_factor").and_then(Value::as_f64).unwrap_or(1.0);
    let vol = Vol::from_vec(dims[0], dims[1], dims[2], tensor_data_to_vec::<T>(&data))?;
    Ok(PotentialVolume { vol, pitch, rescale_factor })
}

/// Write a diffraction stack; scan step and detector pitch ride in the header.
pub fn write_stack<T: Real>(path: &Path, s: &DiffractionStack<T>) -> Result<()> {
    let mut meta = BTreeMap::new();
    meta.insert("scan_step".into(), serde_json::to_value(s.scan_step)?);
    meta.insert("detector_pitch".into(), serde_json::to_value(s.detector_pitch)?);
    meta.insert("kind".into(), Value::String("diffraction_stack".into()));
    let st = &s.stack;
    write_tensor(path, &[st.ny, st.nx, st.ky, st.kx], &vec_to_tensor_data(&st.data), &meta)
}

pub fn read_stack<T: Real>(path: &Path) -> Result<DiffractionStack<T>> {
    let (dims, data, meta) = read_tensor(path)?;
    if dims.len() != 4 {
        return Err(CoreError::MalformedFile {
            path: path.display().to_string(),
            reason: format!("expected 4 dims for a stack, got {:?}", dims),
        });
    }
    let scan_step = meta.get("scan_step").and_then(Value::as_f64).unwrap_or(0.0);
    let detector_pitch = meta.get("detector_pitch").and_then(Value::as_f64).unwrap_or(0.0);
    let stack = Stack4 {
        ny: dims[0],
        nx: dims[1],
        ky: dims[2],
        kx: dims[3],
        data: tensor_data_to_vec::<T>(&data),
    };
    DiffractionStack::new(stack, scan_step, detector_pitch)
}

/// Dataset split tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// One dataset entry: a rendered volume plus optional simulated measurements.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub volume: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diffraction: Option<PathBuf>,
    pub split: Split,
    #[serde(default)]
    pub provenance: BTreeMap<String, Value>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Result<Self> {
        let m = DatasetManifest { format_version: FORMAT_VERSION, entries };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for e in &self.entries {
            if !seen.insert(&e.volume) {
                return Err(CoreError::InvalidArgument(format!(
                    "duplicate volume path {}",
                    e.volume.display()
                )));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(f, self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = BufReader::new(File::open(path)?);
        let m: DatasetManifest = serde_json::from_reader(f)?;
        if m.format_version != FORMAT_VERSION {
            return Err(CoreError::UnsupportedVersion(m.format_version));
        }
        m.validate()?;
        Ok(m)
    }

    pub fn split_entries(&self, split: Split) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.split == split).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn row_major_payload_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.tns");
        let data = TensorData::F32(vec![0.0, 1.0, 2.0, 3.0]);
        write_tensor(&path, &[2, 2], &data, &BTreeMap::new()).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let nl = bytes.iter().position(|&b| b == b'\n').unwrap();
        let payload = &bytes[nl + 1..];
        for (i, chunk) in payload.chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
            assert_eq!(v, i as f32);
        }
    }

    #[test]
    fn header_records_dims() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.tns");
        let v = PotentialVolume::<f32>::zeros(8, 64, 64, Pitch::reference());
        write_volume(&path, &v).unwrap();
        let (dims, _, meta) = read_tensor(&path).unwrap();
        assert_eq!(dims, vec![8, 64, 64]);
        let p: [f64; 3] = serde_json::from_value(meta["pitch"].clone()).unwrap();
        assert_eq!(p, [1.6, 0.2, 0.2]);
    }

    #[test]
    fn truncated_payload_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.tns");
        let data = TensorData::F64(vec![1.0; 10]);
        write_tensor(&path, &[10], &data, &BTreeMap::new()).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        match read_tensor(&path) {
            Err(CoreError::MalformedFile { reason, .. }) => {
                assert!(reason.contains("payload length"))
            }
            other => panic!("expected payload error, got {other:?}"),
        }
    }

    #[test]
    fn dtype_preserved() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.tns");
        write_tensor(&path, &[3], &TensorData::F64(vec![1.0, 2.0, 3.0]), &BTreeMap::new())
            .unwrap();
        let (_, data, _) = read_tensor(&path).unwrap();
        assert_eq!(data.dtype(), DType::F64);
    }

    #[test]
    fn non_finite_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.tns");
        let res =
            write_tensor(&path, &[1], &TensorData::F32(vec![f32::NAN]), &BTreeMap::new());
        assert!(matches!(res, Err(CoreError::NonFinite(_))));
    }

    #[test]
    fn unknown_format_version_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.tns");
        std::fs::write(
            &path,
            b"{\"format_version\":99,\"dims\":[1],\"dtype\":\"f32\",\"endianness\":\"LE\"}\n\0\0\0\0",
        )
        .unwrap();
        assert!(matches!(read_tensor(&path), Err(CoreError::UnsupportedVersion(99))));
    }

    #[test]
    fn manifest_roundtrip_and_duplicate_detection() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        let entries = vec![
            ManifestEntry {
                volume: "a.tns".into(),
                diffraction: Some("a_meas.tns".into()),
                split: Split::Train,
                provenance: BTreeMap::new(),
            },
            ManifestEntry {
                volume: "b.tns".into(),
                diffraction: None,
                split: Split::Test,
                provenance: BTreeMap::new(),
            },
        ];
        let m = DatasetManifest::new(entries.clone()).unwrap();
        m.save(&path).unwrap();
        let back = DatasetManifest::load(&path).unwrap();
        assert_eq!(back.entries.len(), 2);
        assert_eq!(back.split_entries(Split::Test).len(), 1);

        let mut dup = entries;
        dup.push(ManifestEntry {
            volume: "a.tns".into(),
            diffraction: None,
            split: Split::Val,
            provenance: BTreeMap::new(),
        });
        assert!(DatasetManifest::new(dup).is_err());
    }
}
