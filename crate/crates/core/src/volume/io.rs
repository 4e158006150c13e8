//! Volume file formats: NIfTI-1 (`.nii`), MetaImage (`.mha`/`.mhd`) and a
//! raw escape hatch (`.raw`: little-endian float32 + JSON sidecar).
//!
//! Little-endian files only; data is written as float32 (volumes) or uint8
//! (binary masks). On formats without an intensity-semantics field the
//! normalized flag is inferred: a volume whose values all lie in `[0, 1]` is
//! treated as normalized, anything else as HU.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::num::Scalar;
use crate::volume::VolumeGrid;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum StoredType {
    U8,
    I16,
    I32,
    F32,
    F64,
}

impl StoredType {
    fn width(self) -> usize {
        match self {
            StoredType::U8 => 1,
            StoredType::I16 => 2,
            StoredType::I32 => 4,
            StoredType::F32 => 4,
            StoredType::F64 => 8,
        }
    }
}

struct RawImage {
    dims: [usize; 3],
    spacing: [f64; 3],
    origin: [f64; 3],
    values: Vec<f64>,
    /// Explicit HU flag when the format carries one (raw sidecar).
    hu: Option<bool>,
}

fn malformed(path: &Path, reason: impl Into<String>) -> Error {
    Error::MalformedFile {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Format {
    Nifti,
    Meta,
    Raw,
}

fn detect_format(path: &Path) -> Result<Format> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("nii") => Ok(Format::Nifti),
        Some("mha") | Some("mhd") => Ok(Format::Meta),
        Some("raw") | Some("f32") => Ok(Format::Raw),
        _ => Err(Error::UnsupportedFormat(path.to_path_buf())),
    }
}

/// Reads a volume from NIfTI-1, MetaImage or raw format.
pub fn read_volume<F: Scalar>(path: impl AsRef<Path>) -> Result<VolumeGrid<F>> {
    let path = path.as_ref();
    let img = match detect_format(path)? {
        Format::Nifti => read_nifti(path)?,
        Format::Meta => read_meta(path)?,
        Format::Raw => read_raw(path)?,
    };
    let normalized = match img.hu {
        Some(hu) => !hu,
        None => img.values.iter().all(|&v| (0.0..=1.0).contains(&v)),
    };
    let (nx, ny, nz) = (img.dims[0], img.dims[1], img.dims[2]);
    let data = Array3::from_shape_vec((nz, ny, nx), img.values.iter().map(|&v| F::of_f64(v)).collect())
        .map_err(|e| malformed(path, format!("data does not match dims: {e}")))?;
    VolumeGrid::new(data, img.spacing, img.origin, normalized)
}

/// Writes a volume as float32 in the format implied by the extension.
pub fn write_volume<F: Scalar>(path: impl AsRef<Path>, v: &VolumeGrid<F>) -> Result<()> {
    let path = path.as_ref();
    let dims = v.dims();
    let values: Vec<f32> = v.data().iter().map(|&x| x.into_f64() as f32).collect();
    match detect_format(path)? {
        Format::Nifti => write_nifti(path, dims, v.spacing_mm(), v.origin_mm(), Payload::F32(&values)),
        Format::Meta => write_meta(path, dims, v.spacing_mm(), v.origin_mm(), Payload::F32(&values)),
        Format::Raw => write_raw(path, dims, v.spacing_mm(), v.origin_mm(), &values, !v.normalized()),
    }
}

/// Reads a binary mask (nonzero voxels are foreground).
pub fn read_mask(path: impl AsRef<Path>) -> Result<(Array3<bool>, [f64; 3], [f64; 3])> {
    let path = path.as_ref();
    let img = match detect_format(path)? {
        Format::Nifti => read_nifti(path)?,
        Format::Meta => read_meta(path)?,
        Format::Raw => read_raw(path)?,
    };
    let (nx, ny, nz) = (img.dims[0], img.dims[1], img.dims[2]);
    let data = Array3::from_shape_vec((nz, ny, nx), img.values.iter().map(|&v| v != 0.0).collect())
        .map_err(|e| malformed(path, format!("data does not match dims: {e}")))?;
    Ok((data, img.spacing, img.origin))
}

/// Writes a binary mask as uint8.
pub fn write_mask(
    path: impl AsRef<Path>,
    mask: &Array3<bool>,
    spacing: [f64; 3],
    origin: [f64; 3],
) -> Result<()> {
    let path = path.as_ref();
    let s = mask.shape();
    let dims = [s[2], s[1], s[0]];
    let bytes: Vec<u8> = mask.iter().map(|&b| u8::from(b)).collect();
    match detect_format(path)? {
        Format::Nifti => write_nifti(path, dims, spacing, origin, Payload::U8(&bytes)),
        Format::Meta => write_meta(path, dims, spacing, origin, Payload::U8(&bytes)),
        Format::Raw => Err(Error::UnsupportedFormat(path.to_path_buf())),
    }
}

enum Payload<'a> {
    F32(&'a [f32]),
    U8(&'a [u8]),
}

impl Payload<'_> {
    fn nifti_datatype(&self) -> i16 {
        match self {
            Payload::F32(_) => 16,
            Payload::U8(_) => 2,
        }
    }

    fn bitpix(&self) -> i16 {
        match self {
            Payload::F32(_) => 32,
            Payload::U8(_) => 8,
        }
    }

    fn met_type(&self) -> &'static str {
        match self {
            Payload::F32(_) => "MET_FLOAT",
            Payload::U8(_) => "MET_UCHAR",
        }
    }

    fn to_bytes(&self) -> Vec<u8> {
        match self {
            Payload::F32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            Payload::U8(v) => v.to_vec(),
        }
    }
}

// ---------------------------------------------------------------------------
// NIfTI-1
// ---------------------------------------------------------------------------

const NIFTI_HEADER_LEN: usize = 348;
const NIFTI_VOX_OFFSET: usize = 352;

fn read_i16(b: &[u8], at: usize) -> i16 {
    i16::from_le_bytes([b[at], b[at + 1]])
}

fn read_i32(b: &[u8], at: usize) -> i32 {
    i32::from_le_bytes(b[at..at + 4].try_into().unwrap())
}

fn read_f32_at(b: &[u8], at: usize) -> f32 {
    f32::from_le_bytes(b[at..at + 4].try_into().unwrap())
}

fn read_nifti(path: &Path) -> Result<RawImage> {
    let bytes = fs::read(path)?;
    if bytes.len() < NIFTI_VOX_OFFSET {
        return Err(malformed(path, "file shorter than NIfTI-1 header"));
    }
    if read_i32(&bytes, 0) != NIFTI_HEADER_LEN as i32 {
        return Err(malformed(path, "not a little-endian NIfTI-1 file"));
    }
    let magic = &bytes[344..348];
    if magic != b"n+1\0" && magic != b"ni1\0" {
        return Err(malformed(path, "bad NIfTI magic"));
    }
    let ndim = read_i16(&bytes, 40);
    if !(1..=4).contains(&ndim) {
        return Err(malformed(path, format!("unsupported ndim {ndim}")));
    }
    let mut dims = [1usize; 3];
    for a in 0..(ndim.min(3) as usize) {
        let d = read_i16(&bytes, 42 + 2 * a);
        if d < 1 {
            return Err(malformed(path, format!("bad dim[{}] = {d}", a + 1)));
        }
        dims[a] = d as usize;
    }
    if ndim == 4 && read_i16(&bytes, 48) != 1 {
        return Err(malformed(path, "4D NIfTI with more than one frame is unsupported"));
    }
    let datatype = read_i16(&bytes, 70);
    let stored = match datatype {
        2 => StoredType::U8,
        4 => StoredType::I16,
        8 => StoredType::I32,
        16 => StoredType::F32,
        64 => StoredType::F64,
        other => return Err(malformed(path, format!("unsupported NIfTI datatype {other}"))),
    };
    let mut spacing = [0f64; 3];
    for a in 0..3 {
        spacing[a] = read_f32_at(&bytes, 76 + 4 * (a + 1)) as f64;
    }
    let vox_offset = read_f32_at(&bytes, 108) as usize;
    let scl_slope = read_f32_at(&bytes, 112) as f64;
    let scl_inter = read_f32_at(&bytes, 116) as f64;
    let sform_code = read_i16(&bytes, 254);
    let mut origin = [0f64; 3];
    if sform_code > 0 {
        origin = [
            read_f32_at(&bytes, 280 + 12) as f64,
            read_f32_at(&bytes, 296 + 12) as f64,
            read_f32_at(&bytes, 312 + 12) as f64,
        ];
    } else if read_i16(&bytes, 252) > 0 {
        origin = [
            read_f32_at(&bytes, 268) as f64,
            read_f32_at(&bytes, 272) as f64,
            read_f32_at(&bytes, 276) as f64,
        ];
    }

    let n = dims[0] * dims[1] * dims[2];
    let need = vox_offset + n * stored.width();
    if bytes.len() < need {
        return Err(malformed(path, format!("expected {need} bytes, found {}", bytes.len())));
    }
    let mut values = decode_values(&bytes[vox_offset..need], stored);
    if scl_slope != 0.0 && (scl_slope != 1.0 || scl_inter != 0.0) {
        for v in &mut values {
            *v = *v * scl_slope + scl_inter;
        }
    }
    Ok(RawImage {
        dims,
        spacing,
        origin,
        values,
        hu: None,
    })
}

fn decode_values(bytes: &[u8], stored: StoredType) -> Vec<f64> {
    let w = stored.width();
    bytes
        .chunks_exact(w)
        .map(|c| match stored {
            StoredType::U8 => c[0] as f64,
            StoredType::I16 => i16::from_le_bytes([c[0], c[1]]) as f64,
            StoredType::I32 => i32::from_le_bytes(c.try_into().unwrap()) as f64,
            StoredType::F32 => f32::from_le_bytes(c.try_into().unwrap()) as f64,
            StoredType::F64 => f64::from_le_bytes(c.try_into().unwrap()),
        })
        .collect()
}

fn write_nifti(
    path: &Path,
    dims: [usize; 3],
    spacing: [f64; 3],
    origin: [f64; 3],
    payload: Payload<'_>,
) -> Result<()> {
    let mut h = vec![0u8; NIFTI_VOX_OFFSET];
    h[0..4].copy_from_slice(&(NIFTI_HEADER_LEN as i32).to_le_bytes());
    // dim[0..3]
    h[40..42].copy_from_slice(&3i16.to_le_bytes());
    for a in 0..3 {
        let d = i16::try_from(dims[a])
            .map_err(|_| Error::InvalidMetadata(format!("dim {} too large for NIfTI-1", dims[a])))?;
        h[42 + 2 * a..44 + 2 * a].copy_from_slice(&d.to_le_bytes());
    }
    for a in 3..7 {
        h[42 + 2 * a..44 + 2 * a].copy_from_slice(&1i16.to_le_bytes());
    }
    h[70..72].copy_from_slice(&payload.nifti_datatype().to_le_bytes());
    h[72..74].copy_from_slice(&payload.bitpix().to_le_bytes());
    // pixdim: qfac 1, then spacing
    h[76..80].copy_from_slice(&1f32.to_le_bytes());
    for a in 0..3 {
        h[80 + 4 * a..84 + 4 * a].copy_from_slice(&(spacing[a] as f32).to_le_bytes());
    }
    h[108..112].copy_from_slice(&(NIFTI_VOX_OFFSET as f32).to_le_bytes());
    h[112..116].copy_from_slice(&1f32.to_le_bytes()); // scl_slope
    h[254..256].copy_from_slice(&1i16.to_le_bytes()); // sform_code
    // srow: axis-aligned spacing with origin translation
    let rows = [
        [spacing[0] as f32, 0.0, 0.0, origin[0] as f32],
        [0.0, spacing[1] as f32, 0.0, origin[1] as f32],
        [0.0, 0.0, spacing[2] as f32, origin[2] as f32],
    ];
    for (r, row) in rows.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            let at = 280 + 16 * r + 4 * c;
            h[at..at + 4].copy_from_slice(&v.to_le_bytes());
        }
    }
    h[344..348].copy_from_slice(b"n+1\0");
    // bytes 348..352 stay zero: no header extensions

    let mut f = fs::File::create(path)?;
    f.write_all(&h)?;
    f.write_all(&payload.to_bytes())?;
    Ok(())
}

// ---------------------------------------------------------------------------
// MetaImage
// ---------------------------------------------------------------------------

fn read_meta(path: &Path) -> Result<RawImage> {
    let bytes = fs::read(path)?;
    // Header is ASCII lines up to and including ElementDataFile.
    let mut dims = None;
    let mut spacing = [1.0f64; 3];
    let mut origin = [0.0f64; 3];
    let mut elem_type = None;
    let mut data_start = None;
    let mut data_file: Option<String> = None;
    let mut pos = 0usize;
    while pos < bytes.len() {
        let nl = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .map(|i| pos + i)
            .unwrap_or(bytes.len());
        let line = std::str::from_utf8(&bytes[pos..nl])
            .map_err(|_| malformed(path, "non-ASCII header line"))?
            .trim();
        pos = nl + 1;
        let Some((key, value)) = line.split_once('=') else {
            continue;
        };
        let (key, value) = (key.trim(), value.trim());
        match key {
            "NDims" => {
                if value != "3" {
                    return Err(malformed(path, format!("NDims {value} unsupported")));
                }
            }
            "BinaryDataByteOrderMSB" | "ElementByteOrderMSB" => {
                if value.eq_ignore_ascii_case("true") {
                    return Err(malformed(path, "big-endian MetaImage unsupported"));
                }
            }
            "CompressedData" => {
                if value.eq_ignore_ascii_case("true") {
                    return Err(malformed(path, "compressed MetaImage unsupported"));
                }
            }
            "DimSize" => {
                let parts = parse_triplet(value).ok_or_else(|| malformed(path, "bad DimSize"))?;
                dims = Some([parts[0] as usize, parts[1] as usize, parts[2] as usize]);
            }
            "ElementSpacing" => {
                spacing = parse_triplet(value).ok_or_else(|| malformed(path, "bad ElementSpacing"))?;
            }
            "Offset" | "Position" => {
                origin = parse_triplet(value).ok_or_else(|| malformed(path, "bad Offset"))?;
            }
            "ElementType" => {
                elem_type = Some(match value {
                    "MET_UCHAR" => StoredType::U8,
                    "MET_SHORT" => StoredType::I16,
                    "MET_INT" => StoredType::I32,
                    "MET_FLOAT" => StoredType::F32,
                    "MET_DOUBLE" => StoredType::F64,
                    other => return Err(malformed(path, format!("unsupported ElementType {other}"))),
                });
            }
            "ElementDataFile" => {
                if value == "LOCAL" {
                    data_start = Some(pos);
                } else {
                    data_file = Some(value.to_string());
                }
                break;
            }
            _ => {}
        }
    }
    let dims = dims.ok_or_else(|| malformed(path, "missing DimSize"))?;
    let stored = elem_type.ok_or_else(|| malformed(path, "missing ElementType"))?;
    let n = dims[0] * dims[1] * dims[2];
    let data = match (data_start, data_file) {
        (Some(start), None) => bytes[start..].to_vec(),
        (None, Some(file)) => {
            let data_path = path.parent().unwrap_or(Path::new(".")).join(file);
            fs::read(&data_path)?
        }
        _ => return Err(malformed(path, "missing ElementDataFile")),
    };
    if data.len() < n * stored.width() {
        return Err(malformed(path, "truncated MetaImage data"));
    }
    Ok(RawImage {
        dims,
        spacing,
        origin,
        values: decode_values(&data[..n * stored.width()], stored),
        hu: None,
    })
}

fn parse_triplet(s: &str) -> Option<[f64; 3]> {
    let mut it = s.split_whitespace().map(|t| t.parse::<f64>().ok());
    let a = it.next()??;
    let b = it.next()??;
    let c = it.next()??;
    Some([a, b, c])
}

fn write_meta(
    path: &Path,
    dims: [usize; 3],
    spacing: [f64; 3],
    origin: [f64; 3],
    payload: Payload<'_>,
) -> Result<()> {
    let local = path.extension().and_then(|e| e.to_str()) == Some("mha");
    let data_file = if local {
        "LOCAL".to_string()
    } else {
        let mut raw = path.to_path_buf();
        raw.set_extension("raw");
        raw.file_name().unwrap().to_string_lossy().into_owned()
    };
    let header = format!(
        "ObjectType = Image\nNDims = 3\nBinaryData = True\nBinaryDataByteOrderMSB = False\nCompressedData = False\nTransformMatrix = 1 0 0 0 1 0 0 0 1\nOffset = {} {} {}\nElementSpacing = {} {} {}\nDimSize = {} {} {}\nElementType = {}\nElementDataFile = {}\n",
        origin[0], origin[1], origin[2],
        spacing[0], spacing[1], spacing[2],
        dims[0], dims[1], dims[2],
        payload.met_type(),
        data_file,
    );
    let mut f = fs::File::create(path)?;
    f.write_all(header.as_bytes())?;
    if local {
        f.write_all(&payload.to_bytes())?;
    } else {
        let mut raw = path.to_path_buf();
        raw.set_extension("raw");
        fs::File::create(raw)?.write_all(&payload.to_bytes())?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Raw + JSON sidecar
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct RawSidecar {
    dims: [usize; 3],
    spacing_mm: [f64; 3],
    origin_mm: [f64; 3],
    hu: bool,
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".json");
    PathBuf::from(s)
}

fn read_raw(path: &Path) -> Result<RawImage> {
    let sidecar: RawSidecar = serde_json::from_reader(fs::File::open(sidecar_path(path))?)?;
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let n = sidecar.dims[0] * sidecar.dims[1] * sidecar.dims[2];
    if bytes.len() != n * 4 {
        return Err(malformed(path, format!("expected {} bytes, found {}", n * 4, bytes.len())));
    }
    Ok(RawImage {
        dims: sidecar.dims,
        spacing: sidecar.spacing_mm,
        origin: sidecar.origin_mm,
        values: decode_values(&bytes, StoredType::F32),
        hu: Some(sidecar.hu),
    })
}

fn write_raw(
    path: &Path,
    dims: [usize; 3],
    spacing: [f64; 3],
    origin: [f64; 3],
    values: &[f32],
    hu: bool,
) -> Result<()> {
    let sidecar = RawSidecar {
        dims,
        spacing_mm: spacing,
        origin_mm: origin,
        hu,
    };
    serde_json::to_writer_pretty(fs::File::create(sidecar_path(path))?, &sidecar)?;
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::File::create(path)?.write_all(&bytes)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use tempfile::tempdir;

    use crate::seeding::rng_for;

    fn sample_volume() -> VolumeGrid<f32> {
        let mut rng = rng_for(11, "io", &[]);
        let data = Array3::from_shape_fn((5, 6, 7), |_| rng.gen_range(-1000.0f32..600.0));
        VolumeGrid::new(data, [0.7, 1.1, 2.5], [-3.0, 4.0, 12.5], false).unwrap()
    }

    #[test]
    fn nifti_round_trip() {
        let dir = tempdir().unwrap();
        let v = sample_volume();
        let p = dir.path().join("vol.nii");
        write_volume(&p, &v).unwrap();
        let r: VolumeGrid<f32> = read_volume(&p).unwrap();
        assert_eq!(r.dims(), v.dims());
        assert_eq!(r.data(), v.data());
        assert!(!r.normalized());
        for a in 0..3 {
            assert!((r.spacing_mm()[a] - v.spacing_mm()[a]).abs() < 1e-6);
            assert!((r.origin_mm()[a] - v.origin_mm()[a]).abs() < 1e-5);
        }
    }

    #[test]
    fn meta_round_trip_local_and_split() {
        let dir = tempdir().unwrap();
        let v = sample_volume();
        for name in ["vol.mha", "vol.mhd"] {
            let p = dir.path().join(name);
            write_volume(&p, &v).unwrap();
            let r: VolumeGrid<f32> = read_volume(&p).unwrap();
            assert_eq!(r.data(), v.data());
            assert_eq!(r.dims(), v.dims());
        }
    }

    #[test]
    fn raw_round_trip_preserves_hu_flag() {
        let dir = tempdir().unwrap();
        let v = sample_volume();
        let p = dir.path().join("vol.raw");
        write_volume(&p, &v).unwrap();
        let r: VolumeGrid<f32> = read_volume(&p).unwrap();
        assert_eq!(r.data(), v.data());
        assert!(!r.normalized());
        assert_eq!(r.spacing_mm(), v.spacing_mm());
    }

    #[test]
    fn mask_round_trip() {
        let dir = tempdir().unwrap();
        let mut rng = rng_for(12, "io-mask", &[]);
        let mask = Array3::from_shape_fn((4, 5, 6), |_| rng.gen_bool(0.3));
        let p = dir.path().join("mask.nii");
        write_mask(&p, &mask, [1.0; 3], [0.0; 3]).unwrap();
        let (r, spacing, _) = read_mask(&p).unwrap();
        assert_eq!(r, mask);
        assert_eq!(spacing, [1.0; 3]);
    }

    #[test]
    fn normalized_heuristic_applies_to_unit_range() {
        let dir = tempdir().unwrap();
        let data = Array3::from_shape_fn((3, 3, 3), |(z, y, x)| ((x + y + z) as f32) / 10.0);
        let v = VolumeGrid::new(data, [1.0; 3], [0.0; 3], true).unwrap();
        let p = dir.path().join("norm.nii");
        write_volume(&p, &v).unwrap();
        let r: VolumeGrid<f32> = read_volume(&p).unwrap();
        assert!(r.normalized());
    }

    #[test]
    fn unknown_extension_is_rejected() {
        assert!(matches!(
            read_volume::<f32>("vol.dcm"),
            Err(Error::UnsupportedFormat(_))
        ));
    }

    #[test]
    fn truncated_nifti_is_rejected() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("bad.nii");
        fs::write(&p, [0u8; 100]).unwrap();
        assert!(matches!(
            read_volume::<f32>(&p),
            Err(Error::MalformedFile { .. })
        ));
    }
}
