//! Minimal NIfTI-1 reader/writer for the interchange formats this crate
//! needs: scalar volumes (float32/float64), label masks (uint8), and
//! uncertainty maps (uint8), optionally gzip-compressed.
//!
//! Only little-endian single-file `.nii` / `.nii.gz` with magic `n+1` is
//! supported. On disk the first spatial axis is the fastest-varying one;
//! in memory we keep `(D, H, W)` with `W` fastest, so axes are permuted on
//! the way in and out. File axis `x` maps to `D`, `y` to `H`, `z` to `W`.

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::volume::{LabelMask, MultiModalVolume};
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use ndarray::{Array3, Array4, ArrayView3};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const HEADER_SIZE: usize = 348;
const VOX_OFFSET: f32 = 352.0;

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_INT32: i16 = 8;
const DT_FLOAT32: i16 = 16;
const DT_FLOAT64: i16 = 64;

/// Scalars that have a native NIfTI datatype code.
pub trait NiftiScalar: Real {
    const DTYPE: i16;
    const BITPIX: i16;
}

impl NiftiScalar for f32 {
    const DTYPE: i16 = DT_FLOAT32;
    const BITPIX: i16 = 32;
}

impl NiftiScalar for f64 {
    const DTYPE: i16 = DT_FLOAT64;
    const BITPIX: i16 = 64;
}

struct Header {
    dim: [i16; 8],
    datatype: i16,
    pixdim: [f32; 8],
    scl_slope: f32,
    scl_inter: f32,
}

fn open_reader(path: &Path) -> Result<Box<dyn Read>> {
    let file = File::open(path)?;
    let buf = BufReader::new(file);
    if path.extension().is_some_and(|e| e == "gz") {
        Ok(Box::new(GzDecoder::new(buf)))
    } else {
        Ok(Box::new(buf))
    }
}

fn open_writer(path: &Path) -> Result<Box<dyn Write>> {
    let file = File::create(path)?;
    let buf = BufWriter::new(file);
    if path.extension().is_some_and(|e| e == "gz") {
        Ok(Box::new(GzEncoder::new(buf, Compression::fast())))
    } else {
        Ok(Box::new(buf))
    }
}

fn read_header<R: Read>(r: &mut R) -> Result<Header> {
    let mut raw = [0u8; HEADER_SIZE];
    r.read_exact(&mut raw)?;
    let mut c = &raw[..];
    let sizeof_hdr = c.read_i32::<LittleEndian>()?;
    if sizeof_hdr != HEADER_SIZE as i32 {
        return Err(Error::MalformedFile(format!(
            "sizeof_hdr = {sizeof_hdr}, expected 348 (big-endian files unsupported)"
        )));
    }
    if &raw[344..347] != b"n+1" {
        return Err(Error::MalformedFile("bad magic, expected n+1".into()));
    }
    let mut c = &raw[40..];
    let mut dim = [0i16; 8];
    for d in dim.iter_mut() {
        *d = c.read_i16::<LittleEndian>()?;
    }
    let mut c = &raw[70..];
    let datatype = c.read_i16::<LittleEndian>()?;
    let mut c = &raw[76..];
    let mut pixdim = [0f32; 8];
    for p in pixdim.iter_mut() {
        *p = c.read_f32::<LittleEndian>()?;
    }
    let mut c = &raw[108..];
    let vox_offset = c.read_f32::<LittleEndian>()?;
    let scl_slope = c.read_f32::<LittleEndian>()?;
    let scl_inter = c.read_f32::<LittleEndian>()?;
    if !(1..=4).contains(&dim[0]) {
        return Err(Error::MalformedFile(format!("unsupported ndim {}", dim[0])));
    }
    // Skip whatever sits between the header and the data blob.
    let skip = (vox_offset as usize).saturating_sub(HEADER_SIZE);
    std::io::copy(&mut r.take(skip as u64), &mut std::io::sink())?;
    Ok(Header {
        dim,
        datatype,
        pixdim,
        scl_slope,
        scl_inter,
    })
}

fn write_header<W: Write>(w: &mut W, dim: &[usize], pixdim: &[f32], datatype: i16, bitpix: i16) -> Result<()> {
    let mut raw = vec![0u8; HEADER_SIZE + 4]; // header + extension flag
    {
        let mut c = &mut raw[0..4];
        c.write_i32::<LittleEndian>(HEADER_SIZE as i32)?;
    }
    {
        let mut c = &mut raw[40..56];
        c.write_i16::<LittleEndian>(dim.len() as i16)?;
        for i in 0..7 {
            c.write_i16::<LittleEndian>(*dim.get(i).unwrap_or(&1) as i16)?;
        }
    }
    {
        let mut c = &mut raw[70..74];
        c.write_i16::<LittleEndian>(datatype)?;
        c.write_i16::<LittleEndian>(bitpix)?;
    }
    {
        let mut c = &mut raw[76..112];
        c.write_f32::<LittleEndian>(1.0)?; // qfac
        for i in 0..7 {
            c.write_f32::<LittleEndian>(*pixdim.get(i).unwrap_or(&1.0))?;
        }
        c.write_f32::<LittleEndian>(VOX_OFFSET)?;
    }
    {
        let mut c = &mut raw[112..120];
        c.write_f32::<LittleEndian>(1.0)?; // scl_slope
        c.write_f32::<LittleEndian>(0.0)?; // scl_inter
    }
    raw[344..348].copy_from_slice(b"n+1\0");
    w.write_all(&raw)?;
    Ok(())
}

/// Reads the raw voxel stream as f64, in file order.
fn read_values<R: Read>(r: &mut R, n: usize, datatype: i16) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(n);
    match datatype {
        DT_UINT8 => {
            let mut buf = vec![0u8; n];
            r.read_exact(&mut buf)?;
            out.extend(buf.iter().map(|&v| v as f64));
        }
        DT_INT16 => {
            for _ in 0..n {
                out.push(r.read_i16::<LittleEndian>()? as f64);
            }
        }
        DT_INT32 => {
            for _ in 0..n {
                out.push(r.read_i32::<LittleEndian>()? as f64);
            }
        }
        DT_FLOAT32 => {
            for _ in 0..n {
                out.push(r.read_f32::<LittleEndian>()? as f64);
            }
        }
        DT_FLOAT64 => {
            for _ in 0..n {
                out.push(r.read_f64::<LittleEndian>()?);
            }
        }
        other => {
            return Err(Error::MalformedFile(format!("unsupported datatype {other}")));
        }
    }
    Ok(out)
}

fn header_shape(h: &Header) -> ([usize; 3], usize, [f64; 3]) {
    let nx = h.dim[1].max(1) as usize;
    let ny = h.dim[2].max(1) as usize;
    let nz = h.dim[3].max(1) as usize;
    let nt = if h.dim[0] >= 4 { h.dim[4].max(1) as usize } else { 1 };
    let spacing = [h.pixdim[1] as f64, h.pixdim[2] as f64, h.pixdim[3] as f64];
    ([nx, ny, nz], nt, spacing)
}

/// Loads a scalar volume. 3D files come back as a single-channel volume;
/// 4D files map the fourth dimension to channels.
pub fn load_scalar_volume<T: Real>(path: &Path) -> Result<MultiModalVolume<T>> {
    let mut r = open_reader(path)?;
    let h = read_header(&mut r)?;
    let ([nx, ny, nz], nt, spacing) = header_shape(&h);
    let mut values = read_values(&mut r, nx * ny * nz * nt, h.datatype)?;
    let slope = if h.scl_slope == 0.0 { 1.0 } else { h.scl_slope as f64 };
    if slope != 1.0 || h.scl_inter != 0.0 {
        for v in values.iter_mut() {
            *v = *v * slope + h.scl_inter as f64;
        }
    }
    // File order is x-fastest: shape (t, z, y, x) in C order.
    let arr = Array4::from_shape_vec((nt, nz, ny, nx), values)
        .map_err(|e| Error::MalformedFile(e.to_string()))?;
    let arr = arr.permuted_axes([0, 3, 2, 1]); // (C, D, H, W) = (t, x, y, z)
    let data = arr.mapv(|v| T::from_f64_c(v));
    let data = data.as_standard_layout().to_owned();
    let names = (0..nt).map(|i| format!("ch{i}")).collect();
    MultiModalVolume::new(data, spacing, names)
}

/// Loads an integer label mask and validates it against `{0, 1, 2, 4}`.
pub fn load_label_mask(path: &Path) -> Result<LabelMask> {
    let mut r = open_reader(path)?;
    let h = read_header(&mut r)?;
    let ([nx, ny, nz], nt, spacing) = header_shape(&h);
    if nt != 1 {
        return Err(Error::MalformedFile("label mask must be 3D".into()));
    }
    if !(h.scl_slope == 0.0 || h.scl_slope == 1.0) || h.scl_inter != 0.0 {
        return Err(Error::MalformedFile("scaled label data unsupported".into()));
    }
    let values = read_values(&mut r, nx * ny * nz, h.datatype)?;
    let mut bytes = Vec::with_capacity(values.len());
    for v in values {
        if v.fract() != 0.0 || !(0.0..=255.0).contains(&v) {
            return Err(Error::InvalidLabels(v as i64));
        }
        bytes.push(v as u8);
    }
    let arr = Array3::from_shape_vec((nz, ny, nx), bytes)
        .map_err(|e| Error::MalformedFile(e.to_string()))?;
    let arr = arr.permuted_axes([2, 1, 0]).as_standard_layout().to_owned();
    LabelMask::new(arr, spacing)
}

/// Loads a uint8 map (e.g. an exported uncertainty score map).
pub fn load_u8_volume(path: &Path) -> Result<(Array3<u8>, [f64; 3])> {
    let mut r = open_reader(path)?;
    let h = read_header(&mut r)?;
    let ([nx, ny, nz], nt, spacing) = header_shape(&h);
    if nt != 1 {
        return Err(Error::MalformedFile("expected a 3D file".into()));
    }
    let values = read_values(&mut r, nx * ny * nz, h.datatype)?;
    let bytes: Vec<u8> = values.iter().map(|&v| v as u8).collect();
    let arr = Array3::from_shape_vec((nz, ny, nx), bytes)
        .map_err(|e| Error::MalformedFile(e.to_string()))?;
    Ok((arr.permuted_axes([2, 1, 0]).as_standard_layout().to_owned(), spacing))
}

fn write_values<W: Write, T: NiftiScalar>(w: &mut W, values: impl Iterator<Item = T>) -> Result<()> {
    match T::DTYPE {
        DT_FLOAT32 => {
            for v in values {
                w.write_f32::<LittleEndian>(v.to_f64_c() as f32)?;
            }
        }
        DT_FLOAT64 => {
            for v in values {
                w.write_f64::<LittleEndian>(v.to_f64_c())?;
            }
        }
        _ => unreachable!(),
    }
    Ok(())
}

/// Saves a scalar volume; single-channel volumes are written as 3D files.
pub fn save_scalar_volume<T: NiftiScalar>(vol: &MultiModalVolume<T>, path: &Path) -> Result<()> {
    let mut w = open_writer(path)?;
    let [d, h_, wd] = vol.spatial_shape();
    let c = vol.channels();
    let pix = [
        vol.spacing[0] as f32,
        vol.spacing[1] as f32,
        vol.spacing[2] as f32,
    ];
    if c == 1 {
        write_header(&mut w, &[d, h_, wd], &pix, T::DTYPE, T::BITPIX)?;
    } else {
        write_header(&mut w, &[d, h_, wd, c], &[pix[0], pix[1], pix[2], 1.0], T::DTYPE, T::BITPIX)?;
    }
    // File order (t, z, y, x) with x fastest.
    let view = vol.data.view().permuted_axes([0, 3, 2, 1]);
    write_values(&mut w, view.iter().copied())?;
    w.flush()?;
    Ok(())
}

fn save_u8_impl(data: ArrayView3<u8>, spacing: [f64; 3], path: &Path) -> Result<()> {
    let mut w = open_writer(path)?;
    let s = data.shape();
    let pix = [spacing[0] as f32, spacing[1] as f32, spacing[2] as f32];
    write_header(&mut w, &[s[0], s[1], s[2]], &pix, DT_UINT8, 8)?;
    let view = data.permuted_axes([2, 1, 0]);
    for &v in view.iter() {
        w.write_all(&[v])?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_label_mask(mask: &LabelMask, path: &Path) -> Result<()> {
    save_u8_impl(mask.data.view(), mask.spacing, path)
}

/// Uncertainty maps are exported as unsigned 8-bit; `[0, 100]` fits.
pub fn save_u8_volume(data: &Array3<u8>, spacing: [f64; 3], path: &Path) -> Result<()> {
    save_u8_impl(data.view(), spacing, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array3, Array4};
    use tempfile::tempdir;

    #[test]
    fn scalar_round_trip_bit_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("vol.nii.gz");
        let data = Array4::from_shape_fn((2, 3, 4, 5), |(c, d, h, w)| {
            (c * 1000 + d * 100 + h * 10 + w) as f32 * 0.37 - 3.0
        });
        let vol = MultiModalVolume::new(
            data,
            [1.5, 2.0, 0.5],
            (0..2).map(|i| format!("ch{i}")).collect(),
        )
        .unwrap();
        save_scalar_volume(&vol, &path).unwrap();
        let back = load_scalar_volume::<f32>(&path).unwrap();
        assert_eq!(back.data, vol.data);
        for i in 0..3 {
            assert!((back.spacing[i] - vol.spacing[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn label_round_trip_and_validation() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("seg.nii");
        let data = Array3::from_shape_fn((3, 4, 5), |(d, h, w)| [0u8, 1, 2, 4][(d + h + w) % 4]);
        let mask = LabelMask::new(data, [1.0, 1.0, 1.0]).unwrap();
        save_label_mask(&mask, &path).unwrap();
        let back = load_label_mask(&path).unwrap();
        assert_eq!(back.data, mask.data);
    }

    #[test]
    fn label_value_3_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.nii");
        // Write label 3 through the u8 writer, then try to load as labels.
        let data = Array3::from_elem((2, 2, 2), 3u8);
        save_u8_volume(&data, [1.0; 3], &path).unwrap();
        assert!(matches!(load_label_mask(&path), Err(Error::InvalidLabels(3))));
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("junk.nii");
        std::fs::write(&path, vec![0u8; 400]).unwrap();
        assert!(matches!(
            load_scalar_volume::<f32>(&path),
            Err(Error::MalformedFile(_))
        ));
    }

    #[test]
    fn unwritable_path_is_io_error() {
        let mask = LabelMask::new(Array3::zeros((2, 2, 2)), [1.0; 3]).unwrap();
        let res = save_label_mask(&mask, Path::new("/nonexistent-dir/x.nii"));
        assert!(matches!(res, Err(Error::Io(_))));
    }

    #[test]
    fn u8_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("unc.nii.gz");
        let data = Array3::from_shape_fn((4, 4, 4), |(d, h, w)| ((d * 16 + h * 4 + w) % 101) as u8);
        save_u8_volume(&data, [1.0; 3], &path).unwrap();
        let (back, _) = load_u8_volume(&path).unwrap();
        assert_eq!(back, data);
    }
}
