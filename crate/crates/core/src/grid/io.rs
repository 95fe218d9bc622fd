//! MetaImage (.mhd + .raw) readers and writers.
//!
//! Scalar volumes are stored as little-endian f32, label maps as
//! little-endian u16, displacement fields as three interleaved f32
//! components per voxel. The header keys honored are NDims, DimSize,
//! ElementSpacing, ElementNumberOfChannels, ElementType and
//! ElementDataFile; unknown keys are ignored.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::grid::{Dims, DisplacementField, LabelVolume, Volume};

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

struct Header {
    dims: Dims,
    spacing: [f64; 3],
    element_type: String,
    channels: usize,
    data_path: PathBuf,
}

fn header_err(path: &Path, field: &'static str, reason: impl Into<String>) -> Error {
    Error::Header {
        path: path.to_path_buf(),
        field,
        reason: reason.into(),
    }
}

fn parse_header(path: &Path) -> Result<Header> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut dims: Option<Vec<usize>> = None;
    let mut spacing = [1.0; 3];
    let mut ndims: Option<usize> = None;
    let mut element_type: Option<String> = None;
    let mut channels = 1usize;
    let mut data_file: Option<String> = None;

    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            continue;
        };
        let key = key.trim();
        let value = value.trim();
        match key {
            "NDims" => {
                ndims = Some(
                    value
                        .parse()
                        .map_err(|_| header_err(path, "NDims", format!("unparsable: {value}")))?,
                );
            }
            "DimSize" => {
                let parts: Vec<usize> = value
                    .split_whitespace()
                    .map(|t| t.parse())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| header_err(path, "DimSize", format!("unparsable: {value}")))?;
                dims = Some(parts);
            }
            "ElementSpacing" => {
                let parts: Vec<f64> = value
                    .split_whitespace()
                    .map(|t| t.parse())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| {
                        header_err(path, "ElementSpacing", format!("unparsable: {value}"))
                    })?;
                if parts.len() != 3 {
                    return Err(header_err(path, "ElementSpacing", "expected 3 values"));
                }
                spacing = [parts[0], parts[1], parts[2]];
            }
            "ElementNumberOfChannels" => {
                channels = value.parse().map_err(|_| {
                    header_err(path, "ElementNumberOfChannels", format!("unparsable: {value}"))
                })?;
            }
            "ElementType" => element_type = Some(value.to_string()),
            "ElementByteOrderMSB" | "BinaryDataByteOrderMSB" => {
                if value.eq_ignore_ascii_case("true") {
                    return Err(header_err(path, "ElementByteOrderMSB", "big endian unsupported"));
                }
            }
            "ElementDataFile" => {
                if value.eq_ignore_ascii_case("LOCAL") {
                    return Err(header_err(path, "ElementDataFile", "inline payload unsupported"));
                }
                data_file = Some(value.to_string());
            }
            _ => {}
        }
    }

    if ndims != Some(3) {
        return Err(header_err(path, "NDims", "must be 3"));
    }
    let dims = dims.ok_or_else(|| header_err(path, "DimSize", "missing"))?;
    if dims.len() != 3 {
        return Err(header_err(path, "DimSize", "expected 3 values"));
    }
    let element_type = element_type.ok_or_else(|| header_err(path, "ElementType", "missing"))?;
    let data_file = data_file.ok_or_else(|| header_err(path, "ElementDataFile", "missing"))?;
    let data_path = match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => dir.join(&data_file),
        _ => PathBuf::from(&data_file),
    };
    Ok(Header {
        dims: Dims::new(dims[0], dims[1], dims[2]),
        spacing,
        element_type,
        channels,
        data_path,
    })
}

fn read_payload(header_path: &Path, header: &Header, elem_bytes: usize, count: usize) -> Result<Vec<u8>> {
    let bytes = fs::read(&header.data_path).map_err(|e| io_err(&header.data_path, e))?;
    let expected = (count * elem_bytes) as u64;
    if bytes.len() as u64 != expected {
        return Err(Error::PayloadSize {
            path: header_path.to_path_buf(),
            expected,
            actual: bytes.len() as u64,
        });
    }
    Ok(bytes)
}

fn write_header(
    path: &Path,
    dims: Dims,
    spacing: [f64; 3],
    channels: usize,
    element_type: &str,
    raw_name: &str,
) -> Result<()> {
    let mut text = String::new();
    text.push_str("ObjectType = Image\n");
    text.push_str("NDims = 3\n");
    text.push_str(&format!("DimSize = {} {} {}\n", dims.nx, dims.ny, dims.nz));
    text.push_str(&format!(
        "ElementSpacing = {} {} {}\n",
        spacing[0], spacing[1], spacing[2]
    ));
    if channels != 1 {
        text.push_str(&format!("ElementNumberOfChannels = {channels}\n"));
    }
    text.push_str(&format!("ElementType = {element_type}\n"));
    text.push_str("ElementByteOrderMSB = False\n");
    text.push_str(&format!("ElementDataFile = {raw_name}\n"));
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn raw_path_for(path: &Path) -> (PathBuf, String) {
    let raw = path.with_extension("raw");
    let name = raw
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "data.raw".to_string());
    (raw, name)
}

fn write_raw(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut file = fs::File::create(path).map_err(|e| io_err(path, e))?;
    file.write_all(bytes).map_err(|e| io_err(path, e))
}

/// Write a scalar volume as MET_FLOAT. Intensities are narrowed to f32.
pub fn save_volume(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (raw, raw_name) = raw_path_for(path);
    let mut bytes = Vec::with_capacity(v.data().len() * 4);
    for &x in v.data() {
        bytes.extend_from_slice(&(x as f32).to_le_bytes());
    }
    write_header(path, v.dims(), v.spacing(), 1, "MET_FLOAT", &raw_name)?;
    write_raw(&raw, &bytes)
}

pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let header = parse_header(path)?;
    if header.element_type != "MET_FLOAT" {
        return Err(header_err(
            path,
            "ElementType",
            format!("expected MET_FLOAT, got {}", header.element_type),
        ));
    }
    if header.channels != 1 {
        return Err(header_err(path, "ElementNumberOfChannels", "expected 1"));
    }
    let n = header.dims.len();
    let bytes = read_payload(path, &header, 4, n)?;
    let data: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Volume::with_spacing(header.dims, header.spacing, data)
}

/// Write a displacement field as MET_FLOAT with 3 interleaved components.
pub fn save_field(f: &DisplacementField, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (raw, raw_name) = raw_path_for(path);
    let mut bytes = Vec::with_capacity(f.vectors().len() * 12);
    for v in f.vectors() {
        for &c in v {
            bytes.extend_from_slice(&(c as f32).to_le_bytes());
        }
    }
    write_header(path, f.dims(), [1.0; 3], 3, "MET_FLOAT", &raw_name)?;
    write_raw(&raw, &bytes)
}

pub fn load_field(path: impl AsRef<Path>) -> Result<DisplacementField> {
    let path = path.as_ref();
    let header = parse_header(path)?;
    if header.element_type != "MET_FLOAT" {
        return Err(header_err(
            path,
            "ElementType",
            format!("expected MET_FLOAT, got {}", header.element_type),
        ));
    }
    if header.channels != 3 {
        return Err(header_err(path, "ElementNumberOfChannels", "expected 3"));
    }
    let n = header.dims.len();
    let bytes = read_payload(path, &header, 4, n * 3)?;
    let mut vectors = Vec::with_capacity(n);
    for c in bytes.chunks_exact(12) {
        vectors.push([
            f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64,
            f32::from_le_bytes([c[4], c[5], c[6], c[7]]) as f64,
            f32::from_le_bytes([c[8], c[9], c[10], c[11]]) as f64,
        ]);
    }
    DisplacementField::new(header.dims, vectors)
}

/// Write a label map as MET_USHORT.
pub fn save_labels(l: &LabelVolume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (raw, raw_name) = raw_path_for(path);
    let mut bytes = Vec::with_capacity(l.labels().len() * 2);
    for &v in l.labels() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    write_header(path, l.dims(), [1.0; 3], 1, "MET_USHORT", &raw_name)?;
    write_raw(&raw, &bytes)
}

pub fn load_labels(path: impl AsRef<Path>) -> Result<LabelVolume> {
    let path = path.as_ref();
    let header = parse_header(path)?;
    if header.element_type != "MET_USHORT" {
        return Err(header_err(
            path,
            "ElementType",
            format!("expected MET_USHORT, got {}", header.element_type),
        ));
    }
    let n = header.dims.len();
    let bytes = read_payload(path, &header, 2, n)?;
    let labels: Vec<u16> = bytes
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]))
        .collect();
    LabelVolume::new(header.dims, labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::SplitMix64;
    use std::fs;

    #[test]
    fn constant_volume_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("const.mhd");
        let dims = Dims::new(4, 4, 4);
        let v = Volume::new(dims, vec![0.5; 64]).unwrap();
        save_volume(&v, &path).unwrap();
        let back = load_volume(&path).unwrap();
        assert_eq!(back.dims(), dims);
        assert!(back.data().iter().all(|&x| x == 0.5));
    }

    #[test]
    fn payload_size_mismatch_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("short.mhd");
        let v = Volume::new(Dims::new(4, 4, 4), vec![0.5; 64]).unwrap();
        save_volume(&v, &path).unwrap();
        // truncate the payload to 63 floats
        let raw = dir.path().join("short.raw");
        let bytes = fs::read(&raw).unwrap();
        fs::write(&raw, &bytes[..63 * 4]).unwrap();
        match load_volume(&path) {
            Err(Error::PayloadSize { expected, actual, .. }) => {
                assert_eq!(expected, 256);
                assert_eq!(actual, 252);
            }
            other => panic!("expected PayloadSize, got {other:?}"),
        }
    }

    #[test]
    fn f32_payload_round_trips_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rand.mhd");
        let dims = Dims::new(4, 4, 4);
        let mut rng = SplitMix64::new(11);
        let data: Vec<f64> = (0..dims.len()).map(|_| rng.next_f64() * 3.0 - 1.0).collect();
        let v = Volume::new(dims, data).unwrap();
        save_volume(&v, &path).unwrap();
        let first = fs::read(dir.path().join("rand.raw")).unwrap();
        let loaded = load_volume(&path).unwrap();
        let path2 = dir.path().join("rand2.mhd");
        save_volume(&loaded, &path2).unwrap();
        let second = fs::read(dir.path().join("rand2.raw")).unwrap();
        assert_eq!(first, second);
    }

    #[test]
    fn zero_field_payload_is_all_zero_floats() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("zero.mhd");
        let f = DisplacementField::zeros(Dims::new(4, 4, 4)).unwrap();
        save_field(&f, &path).unwrap();
        let bytes = fs::read(dir.path().join("zero.raw")).unwrap();
        assert_eq!(bytes.len(), 192 * 4);
        assert!(bytes.iter().all(|&b| b == 0));
        let back = load_field(&path).unwrap();
        assert_eq!(back, f);
    }

    #[test]
    fn field_round_trip_matches_after_f32_rounding() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("field.mhd");
        let dims = Dims::new(3, 4, 2);
        let mut rng = SplitMix64::new(7);
        let vectors: Vec<[f64; 3]> = (0..dims.len())
            .map(|_| {
                [
                    rng.next_f64() * 2.0 - 1.0,
                    rng.next_f64() * 2.0 - 1.0,
                    rng.next_f64() * 2.0 - 1.0,
                ]
            })
            .collect();
        let f = DisplacementField::new(dims, vectors).unwrap();
        save_field(&f, &path).unwrap();
        let back = load_field(&path).unwrap();
        for (a, b) in f.vectors().iter().zip(back.vectors()) {
            for c in 0..3 {
                assert_eq!(a[c] as f32 as f64, b[c]);
            }
        }
    }

    #[test]
    fn unwritable_path_is_io_error() {
        let v = Volume::new(Dims::new(2, 2, 2), vec![0.0; 8]).unwrap();
        match save_volume(&v, "/nonexistent-dir-for-sure/x.mhd") {
            Err(Error::Io { .. }) => {}
            other => panic!("expected Io error, got {other:?}"),
        }
    }

    #[test]
    fn labels_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labels.mhd");
        let dims = Dims::new(3, 3, 3);
        let labels: Vec<u16> = (0..27).map(|i| (i % 5) as u16).collect();
        let l = LabelVolume::new(dims, labels).unwrap();
        save_labels(&l, &path).unwrap();
        assert_eq!(load_labels(&path).unwrap(), l);
    }

    #[test]
    fn non_finite_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nan.mhd");
        let v = Volume::new(Dims::new(2, 2, 2), vec![1.0; 8]).unwrap();
        save_volume(&v, &path).unwrap();
        let raw = dir.path().join("nan.raw");
        let mut bytes = fs::read(&raw).unwrap();
        bytes[4..8].copy_from_slice(&f32::NAN.to_le_bytes());
        fs::write(&raw, &bytes).unwrap();
        match load_volume(&path) {
            Err(Error::NonFinite { index, .. }) => assert_eq!(index, 1),
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn missing_file_is_io_error() {
        match load_volume("/definitely/not/here.mhd") {
            Err(Error::Io { .. }) => {}
            other => panic!("expected Io error, got {other:?}"),
        }
    }
}
