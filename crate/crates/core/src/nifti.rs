//! Minimal NIfTI-1 reader and writer for single-frame 3D volumes.
//!
//! Reads `.nii` and gzip-compressed `.nii.gz` (detected from the stream, not
//! the extension) in either byte order. Writes little-endian single-file
//! NIfTI, gzip-compressed when the path ends in `.gz`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Cursor, Read, Write};
use std::path::Path;

use byteorder::{BigEndian, ByteOrder, LittleEndian};
use flate2::read::MultiGzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use crate::error::{Error, Result};
use crate::volume::{BinaryMask, Geometry, Grid3, ProbabilityVolume, ScalarVolume};

const HEADER_SIZE: usize = 348;
const VOX_OFFSET: usize = 352;

/// NIfTI datatype codes this module understands.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Datatype {
    U8,
    I8,
    I16,
    U16,
    I32,
    F32,
    F64,
}

impl Datatype {
    fn from_code(code: i16) -> Result<Self> {
        Ok(match code {
            2 => Datatype::U8,
            256 => Datatype::I8,
            4 => Datatype::I16,
            512 => Datatype::U16,
            8 => Datatype::I32,
            16 => Datatype::F32,
            64 => Datatype::F64,
            other => return Err(Error::UnsupportedType(other)),
        })
    }

    fn code(self) -> i16 {
        match self {
            Datatype::U8 => 2,
            Datatype::I8 => 256,
            Datatype::I16 => 4,
            Datatype::U16 => 512,
            Datatype::I32 => 8,
            Datatype::F32 => 16,
            Datatype::F64 => 64,
        }
    }

    fn size(self) -> usize {
        match self {
            Datatype::U8 | Datatype::I8 => 1,
            Datatype::I16 | Datatype::U16 => 2,
            Datatype::I32 | Datatype::F32 => 4,
            Datatype::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Endian {
    Little,
    Big,
}

/// The header fields the pipeline uses.
#[derive(Debug, Clone, PartialEq)]
pub struct NiftiHeader {
    pub dims: (usize, usize, usize),
    pub datatype: Datatype,
    pub vox_offset: usize,
    pub scl_slope: f32,
    pub scl_inter: f32,
    pub geometry: Geometry,
}

struct HeaderReader<'a> {
    buf: &'a [u8],
    endian: Endian,
}

impl HeaderReader<'_> {
    fn i16(&self, off: usize) -> i16 {
        match self.endian {
            Endian::Little => LittleEndian::read_i16(&self.buf[off..]),
            Endian::Big => BigEndian::read_i16(&self.buf[off..]),
        }
    }

    fn f32(&self, off: usize) -> f32 {
        match self.endian {
            Endian::Little => LittleEndian::read_f32(&self.buf[off..]),
            Endian::Big => BigEndian::read_f32(&self.buf[off..]),
        }
    }
}

fn parse_header(buf: &[u8]) -> Result<(NiftiHeader, Endian)> {
    if buf.len() < HEADER_SIZE {
        return Err(Error::Format {
            field: "sizeof_hdr",
            reason: format!("file holds only {} bytes", buf.len()),
        });
    }
    let endian = match (LittleEndian::read_i32(buf), BigEndian::read_i32(buf)) {
        (348, _) => Endian::Little,
        (_, 348) => Endian::Big,
        (v, _) => {
            return Err(Error::Format {
                field: "sizeof_hdr",
                reason: format!("expected 348, found {v}"),
            })
        }
    };
    let magic = &buf[344..348];
    if magic != b"n+1\0" && magic != b"ni1\0" {
        return Err(Error::Format {
            field: "magic",
            reason: format!("expected \"n+1\\0\" or \"ni1\\0\", found {magic:?}"),
        });
    }
    if magic == b"ni1\0" {
        return Err(Error::Format {
            field: "magic",
            reason: "two-file (.hdr/.img) NIfTI is not supported".into(),
        });
    }
    let r = HeaderReader { buf, endian };

    let ndim = r.i16(40);
    if !(1..=7).contains(&ndim) {
        return Err(Error::Format {
            field: "dim",
            reason: format!("dim[0] = {ndim} is outside 1..=7"),
        });
    }
    let mut dim = [1usize; 7];
    for (i, d) in dim.iter_mut().enumerate().take(ndim as usize) {
        let v = r.i16(42 + 2 * i);
        if v < 1 {
            return Err(Error::Format {
                field: "dim",
                reason: format!("dim[{}] = {v} is not positive", i + 1),
            });
        }
        *d = v as usize;
    }
    let non_unit = dim.iter().filter(|&&d| d > 1).count();
    if non_unit > 3 || dim[3..].iter().any(|&d| d > 1) {
        return Err(Error::Dimensionality(non_unit));
    }

    let datatype = Datatype::from_code(r.i16(70))?;
    let vox_offset = r.f32(108);
    if !(vox_offset >= HEADER_SIZE as f32) || vox_offset.fract() != 0.0 {
        return Err(Error::Format {
            field: "vox_offset",
            reason: format!("{vox_offset} is not a valid data offset"),
        });
    }
    let pixdim = |i: usize| {
        let v = r.f32(76 + 4 * i).abs();
        if v > 0.0 && v.is_finite() {
            v
        } else {
            1.0
        }
    };
    let qfac = if r.f32(76) < 0.0 { -1.0 } else { 1.0 };
    let mut srow = [[0.0f32; 4]; 3];
    for (row, values) in srow.iter_mut().enumerate() {
        for (col, v) in values.iter_mut().enumerate() {
            *v = r.f32(280 + 16 * row + 4 * col);
        }
    }
    let geometry = Geometry {
        voxel_size: (pixdim(1), pixdim(2), pixdim(3)),
        qform_code: r.i16(252),
        sform_code: r.i16(254),
        qfac,
        quatern: [r.f32(256), r.f32(260), r.f32(264)],
        qoffset: [r.f32(268), r.f32(272), r.f32(276)],
        srow,
    };

    Ok((
        NiftiHeader {
            dims: (dim[0], dim[1], dim[2]),
            datatype,
            vox_offset: vox_offset as usize,
            scl_slope: r.f32(112),
            scl_inter: r.f32(116),
            geometry,
        },
        endian,
    ))
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let mut raw = Vec::new();
    reader
        .read_to_end(&mut raw)
        .map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        MultiGzDecoder::new(Cursor::new(raw))
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn decode_values(bytes: &[u8], datatype: Datatype, endian: Endian, n: usize) -> Vec<f64> {
    fn decode<B: ByteOrder>(bytes: &[u8], datatype: Datatype, n: usize) -> Vec<f64> {
        let size = datatype.size();
        (0..n)
            .map(|i| {
                let b = &bytes[i * size..];
                match datatype {
                    Datatype::U8 => b[0] as f64,
                    Datatype::I8 => b[0] as i8 as f64,
                    Datatype::I16 => B::read_i16(b) as f64,
                    Datatype::U16 => B::read_u16(b) as f64,
                    Datatype::I32 => B::read_i32(b) as f64,
                    Datatype::F32 => B::read_f32(b) as f64,
                    Datatype::F64 => B::read_f64(b),
                }
            })
            .collect()
    }
    match endian {
        Endian::Little => decode::<LittleEndian>(bytes, datatype, n),
        Endian::Big => decode::<BigEndian>(bytes, datatype, n),
    }
}

/// Reads only the header of a NIfTI-1 file.
pub fn read_header(path: impl AsRef<Path>) -> Result<NiftiHeader> {
    let bytes = read_all(path.as_ref())?;
    Ok(parse_header(&bytes)?.0)
}

/// Loads a volume with raw (scaled, un-normalized) intensities.
pub fn load_volume(path: impl AsRef<Path>) -> Result<ScalarVolume> {
    let path = path.as_ref();
    let bytes = read_all(path)?;
    let (header, endian) = parse_header(&bytes)?;
    let (x, y, z) = header.dims;
    let n = x * y * z;
    let needed = header.vox_offset + n * header.datatype.size();
    if bytes.len() < needed {
        return Err(Error::Format {
            field: "dim",
            reason: format!(
                "header describes {needed} bytes but the file holds {}",
                bytes.len()
            ),
        });
    }
    let mut values = decode_values(&bytes[header.vox_offset..], header.datatype, endian, n);
    let (slope, inter) = (header.scl_slope as f64, header.scl_inter as f64);
    if slope != 0.0 && slope.is_finite() && inter.is_finite() {
        for v in &mut values {
            *v = *v * slope + inter;
        }
    }
    let data: Vec<f32> = values.into_iter().map(|v| v as f32).collect();
    let grid = Grid3::from_vec(header.dims, data)?;
    Ok(ScalarVolume::new(grid, header.geometry))
}

/// Loads a file as a mask; any nonzero voxel is foreground.
pub fn load_mask(path: impl AsRef<Path>) -> Result<BinaryMask> {
    let vol = load_volume(path)?;
    Ok(BinaryMask::from_nonzero(&vol.grid))
}

fn encode_header(dims: (usize, usize, usize), datatype: Datatype, geometry: &Geometry) -> Result<Vec<u8>> {
    for (axis, d) in [dims.0, dims.1, dims.2].into_iter().enumerate() {
        if d == 0 || d > i16::MAX as usize {
            return Err(Error::Shape(format!(
                "axis {axis} extent {d} cannot be stored in a NIfTI-1 header"
            )));
        }
    }
    let mut h = vec![0u8; VOX_OFFSET];
    LittleEndian::write_i32(&mut h[0..], HEADER_SIZE as i32);
    h[38] = b'r';
    let dim = [3i16, dims.0 as i16, dims.1 as i16, dims.2 as i16, 1, 1, 1, 1];
    for (i, d) in dim.iter().enumerate() {
        LittleEndian::write_i16(&mut h[40 + 2 * i..], *d);
    }
    LittleEndian::write_i16(&mut h[70..], datatype.code());
    LittleEndian::write_i16(&mut h[72..], (datatype.size() * 8) as i16);
    let (dx, dy, dz) = geometry.voxel_size;
    let pixdim = [geometry.qfac, dx, dy, dz, 1.0, 1.0, 1.0, 1.0];
    for (i, p) in pixdim.iter().enumerate() {
        LittleEndian::write_f32(&mut h[76 + 4 * i..], *p);
    }
    LittleEndian::write_f32(&mut h[108..], VOX_OFFSET as f32);
    LittleEndian::write_f32(&mut h[112..], 1.0);
    LittleEndian::write_f32(&mut h[116..], 0.0);
    // xyzt_units: mm
    h[123] = 2;
    LittleEndian::write_i16(&mut h[252..], geometry.qform_code);
    LittleEndian::write_i16(&mut h[254..], geometry.sform_code);
    for (i, q) in geometry.quatern.iter().chain(&geometry.qoffset).enumerate() {
        LittleEndian::write_f32(&mut h[256 + 4 * i..], *q);
    }
    for (row, values) in geometry.srow.iter().enumerate() {
        for (col, v) in values.iter().enumerate() {
            LittleEndian::write_f32(&mut h[280 + 16 * row + 4 * col..], *v);
        }
    }
    h[344..348].copy_from_slice(b"n+1\0");
    Ok(h)
}

fn write_file(path: &Path, header: &[u8], payload: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let is_gz = path
        .file_name()
        .and_then(|n| n.to_str())
        .is_some_and(|n| n.ends_with(".gz"));
    let result = if is_gz {
        let mut enc = GzEncoder::new(BufWriter::new(file), Compression::default());
        enc.write_all(header)
            .and_then(|_| enc.write_all(payload))
            .and_then(|_| enc.finish())
            .and_then(|mut w| w.flush())
    } else {
        let mut w = BufWriter::new(file);
        w.write_all(header)
            .and_then(|_| w.write_all(payload))
            .and_then(|_| w.flush())
    };
    result.map_err(|e| Error::io(path, e))
}

/// Writes a mask as unsigned 8-bit, copying geometry from `source`.
pub fn save_mask(mask: &BinaryMask, source: &ScalarVolume, path: impl AsRef<Path>) -> Result<()> {
    if mask.dims() != source.dims() {
        return Err(Error::Shape(format!(
            "mask dims {:?} differ from source dims {:?}",
            mask.dims(),
            source.dims()
        )));
    }
    let header = encode_header(mask.dims(), Datatype::U8, &source.geometry)?;
    write_file(path.as_ref(), &header, mask.grid.as_slice())
}

/// Writes a float32 volume with the given geometry.
pub fn save_float_volume(
    grid: &Grid3<f32>,
    geometry: &Geometry,
    path: impl AsRef<Path>,
) -> Result<()> {
    let header = encode_header(grid.dims(), Datatype::F32, geometry)?;
    let mut payload = vec![0u8; grid.len() * 4];
    LittleEndian::write_f32_into(grid.as_slice(), &mut payload);
    write_file(path.as_ref(), &header, &payload)
}

pub fn save_volume(vol: &ScalarVolume, path: impl AsRef<Path>) -> Result<()> {
    save_float_volume(&vol.grid, &vol.geometry, path)
}

/// Exports a heatmap in the geometry of its source volume.
pub fn save_heatmap(
    heatmap: &ProbabilityVolume,
    source: &ScalarVolume,
    path: impl AsRef<Path>,
) -> Result<()> {
    if heatmap.dims() != source.dims() {
        return Err(Error::Shape(format!(
            "heatmap dims {:?} differ from source dims {:?}",
            heatmap.dims(),
            source.dims()
        )));
    }
    save_float_volume(&heatmap.grid, &source.geometry, path)
}

/// Writes int16 data with an explicit scale, mainly for building fixtures.
pub fn save_i16_volume(
    grid: &Grid3<i16>,
    geometry: &Geometry,
    scl_slope: f32,
    scl_inter: f32,
    path: impl AsRef<Path>,
) -> Result<()> {
    let mut header = encode_header(grid.dims(), Datatype::I16, geometry)?;
    LittleEndian::write_f32(&mut header[112..], scl_slope);
    LittleEndian::write_f32(&mut header[116..], scl_inter);
    let mut payload = vec![0u8; grid.len() * 2];
    LittleEndian::write_i16_into(grid.as_slice(), &mut payload);
    write_file(path.as_ref(), &header, &payload)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> Grid3<i16> {
        Grid3::from_fn((5, 4, 3), |x, y, z| (x as i16 * 20 + y as i16 * 7 + z as i16 * 11) - 100)
    }

    #[test]
    fn int16_readback_records_source_range() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vol.nii");
        let mut g = fixture();
        g.set(0, 0, 0, -100);
        g.set(4, 3, 2, 300);
        save_i16_volume(&g, &Geometry::default(), 0.0, 0.0, &path).unwrap();
        let vol = load_volume(&path).unwrap();
        assert_eq!(vol.dims(), (5, 4, 3));
        assert_eq!(vol.source_range, (-100.0, 300.0));
        assert_eq!(vol.grid.get(1, 2, 1), g.get(1, 2, 1) as f32);
    }

    #[test]
    fn gzip_matches_plain() {
        let dir = tempfile::tempdir().unwrap();
        let plain = dir.path().join("vol.nii");
        save_i16_volume(&fixture(), &Geometry::default(), 0.0, 0.0, &plain).unwrap();
        let gz = dir.path().join("vol.nii.gz");
        let bytes = std::fs::read(&plain).unwrap();
        let mut enc = GzEncoder::new(File::create(&gz).unwrap(), Compression::best());
        enc.write_all(&bytes).unwrap();
        enc.finish().unwrap();
        assert_eq!(load_volume(&plain).unwrap(), load_volume(&gz).unwrap());
    }

    #[test]
    fn scale_slope_and_intercept_applied() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scaled.nii");
        save_i16_volume(&fixture(), &Geometry::default(), 2.0, 5.0, &path).unwrap();
        let vol = load_volume(&path).unwrap();
        assert_eq!(vol.grid.get(2, 1, 0), fixture().get(2, 1, 0) as f32 * 2.0 + 5.0);
    }

    #[test]
    fn bad_magic_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.nii");
        save_i16_volume(&fixture(), &Geometry::default(), 0.0, 0.0, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[344..348].copy_from_slice(b"XXXX");
        std::fs::write(&path, bytes).unwrap();
        match load_volume(&path) {
            Err(Error::Format { field, .. }) => assert_eq!(field, "magic"),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn big_endian_header_detected() {
        // Hand-build a big-endian float32 file of dims (2,1,1).
        let mut h = vec![0u8; VOX_OFFSET + 8];
        BigEndian::write_i32(&mut h[0..], 348);
        for (i, d) in [3i16, 2, 1, 1, 1, 1, 1, 1].iter().enumerate() {
            BigEndian::write_i16(&mut h[40 + 2 * i..], *d);
        }
        BigEndian::write_i16(&mut h[70..], 16);
        BigEndian::write_f32(&mut h[108..], VOX_OFFSET as f32);
        h[344..348].copy_from_slice(b"n+1\0");
        BigEndian::write_f32(&mut h[VOX_OFFSET..], 1.5);
        BigEndian::write_f32(&mut h[VOX_OFFSET + 4..], -2.0);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("be.nii");
        std::fs::write(&path, h).unwrap();
        let vol = load_volume(&path).unwrap();
        assert_eq!(vol.grid.as_slice(), &[1.5, -2.0]);
    }

    #[test]
    fn unsupported_datatype_and_dimensionality() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.nii");
        save_i16_volume(&fixture(), &Geometry::default(), 0.0, 0.0, &path).unwrap();
        let orig = std::fs::read(&path).unwrap();

        let mut bytes = orig.clone();
        LittleEndian::write_i16(&mut bytes[70..], 32); // complex64
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_volume(&path), Err(Error::UnsupportedType(32))));

        let mut bytes = orig;
        LittleEndian::write_i16(&mut bytes[40..], 4);
        LittleEndian::write_i16(&mut bytes[48..], 2);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_volume(&path), Err(Error::Dimensionality(4))));
    }

    #[test]
    fn mask_round_trip_and_geometry_copy() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mask.nii.gz");
        let mut geometry = Geometry::with_voxel_size((0.5, 1.0, 2.0));
        geometry.srow[0][3] = -12.5;
        let source = ScalarVolume::new(Grid3::zeros((6, 5, 4)), geometry.clone());
        let mask = BinaryMask::new(Grid3::from_fn((6, 5, 4), |x, y, z| ((x + y * z) % 3 == 0) as u8)).unwrap();
        save_mask(&mask, &source, &path).unwrap();
        assert_eq!(load_mask(&path).unwrap(), mask);
        let header = read_header(&path).unwrap();
        assert_eq!(header.datatype, Datatype::U8);
        assert_eq!(header.geometry, geometry);
    }

    #[test]
    fn empty_mask_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.nii");
        let source = ScalarVolume::new(Grid3::zeros((32, 32, 32)), Geometry::default());
        save_mask(&BinaryMask::empty((32, 32, 32)), &source, &path).unwrap();
        assert_eq!(load_mask(&path).unwrap().count(), 0);
    }

    #[test]
    fn mismatched_mask_dims_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let source = ScalarVolume::new(Grid3::zeros((4, 4, 4)), Geometry::default());
        let err = save_mask(&BinaryMask::empty((4, 4, 5)), &source, dir.path().join("m.nii"));
        assert!(matches!(err, Err(Error::Shape(_))));
    }

    #[test]
    fn float_volume_round_trip_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.nii");
        let grid = Grid3::from_fn((7, 3, 2), |x, y, z| (x as f32).sin() * 0.3 + y as f32 - z as f32 * 1e-3);
        save_float_volume(&grid, &Geometry::default(), &path).unwrap();
        assert_eq!(load_volume(&path).unwrap().grid, grid);
    }
}
