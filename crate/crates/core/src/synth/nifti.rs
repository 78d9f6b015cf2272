//! Minimal NIfTI-1 single-file (`.nii`, `.nii.gz`) reader and writer.
//!
//! Files store `x` fastest; volumes here store `z` fastest, so reading and
//! writing transposes. Only scalar 3D payloads are supported (a 4D file
//! with one time point is accepted).

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use crate::error::{Error, Result};
use crate::volume::{linear_index, voxel_count, LabelMap, Shape3, Volume};

const HEADER_SIZE: usize = 348;
const VOX_OFFSET: usize = 352;

/// Options for [`ingest_nifti`].
#[derive(Clone, Debug, Default)]
pub struct IngestOptions {
    /// Zero-pad (centered) to this shape after normalization.
    pub pad_to: Option<Shape3>,
}

fn is_gz(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "gz")
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    if !path.exists() {
        return Err(Error::FileNotFound(path.to_path_buf()));
    }
    let raw = fs::read(path)?;
    if is_gz(path) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice()).read_to_end(&mut out).map_err(|e| Error::MalformedHeader {
            path: path.to_path_buf(),
            reason: format!("gzip stream: {e}"),
        })?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    little: bool,
}

impl Reader<'_> {
    fn arr<const N: usize>(&self, off: usize) -> [u8; N] {
        self.bytes[off..off + N].try_into().unwrap()
    }
    fn i16(&self, off: usize) -> i16 {
        let b = self.arr::<2>(off);
        if self.little { i16::from_le_bytes(b) } else { i16::from_be_bytes(b) }
    }
    fn i32(&self, off: usize) -> i32 {
        let b = self.arr::<4>(off);
        if self.little { i32::from_le_bytes(b) } else { i32::from_be_bytes(b) }
    }
    fn f32(&self, off: usize) -> f32 {
        let b = self.arr::<4>(off);
        if self.little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) }
    }
}

/// Header fields this reader uses.
#[derive(Clone, Debug, PartialEq)]
pub struct NiftiHeader {
    pub shape: Shape3,
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
    pub datatype: i16,
    pub scale: Option<(f32, f32)>,
}

fn malformed(path: &Path, reason: impl Into<String>) -> Error {
    Error::MalformedHeader { path: path.to_path_buf(), reason: reason.into() }
}

fn unsupported(path: &Path, reason: impl Into<String>) -> Error {
    Error::UnsupportedPayload { path: path.to_path_buf(), reason: reason.into() }
}

fn parse(path: &Path, bytes: &[u8]) -> Result<(NiftiHeader, Vec<f64>)> {
    if bytes.len() < HEADER_SIZE {
        return Err(malformed(path, format!("{} bytes is shorter than a header", bytes.len())));
    }
    let little = if i32::from_le_bytes(bytes[0..4].try_into().unwrap()) == HEADER_SIZE as i32 {
        true
    } else if i32::from_be_bytes(bytes[0..4].try_into().unwrap()) == HEADER_SIZE as i32 {
        false
    } else {
        return Err(malformed(path, "sizeof_hdr is not 348"));
    };
    let r = Reader { bytes, little };
    let magic = &bytes[344..348];
    if magic != b"n+1\0" {
        return Err(malformed(path, format!("magic {magic:?} is not a single-file NIfTI-1 header")));
    }
    let ndim = r.i16(40);
    if !(1..=7).contains(&ndim) {
        return Err(malformed(path, format!("dim[0] = {ndim}")));
    }
    let dims: Vec<i64> = (1..=7).map(|i| r.i16(40 + 2 * i) as i64).collect();
    let extra: i64 = dims[3..ndim as usize].iter().map(|&d| d.max(1)).product();
    if ndim < 3 || extra != 1 {
        return Err(unsupported(path, format!("expected a single-channel 3D volume, got {ndim} dims {:?}", &dims[..ndim as usize])));
    }
    if dims[..3].iter().any(|&d| d < 1) {
        return Err(malformed(path, format!("non-positive extent in {:?}", &dims[..3])));
    }
    let shape = [dims[0] as usize, dims[1] as usize, dims[2] as usize];
    let pix: Vec<f64> = (1..=3).map(|i| r.f32(76 + 4 * i) as f64).collect();
    let spacing = [pix[0].abs(), pix[1].abs(), pix[2].abs()];
    if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
        return Err(malformed(path, format!("voxel spacing {spacing:?}")));
    }
    let origin = if r.i16(254) > 0 {
        [r.f32(280 + 12) as f64, r.f32(296 + 12) as f64, r.f32(312 + 12) as f64]
    } else {
        [r.f32(268) as f64, r.f32(272) as f64, r.f32(276) as f64]
    };
    let datatype = r.i16(70);
    let offset = r.f32(108);
    if !(offset >= HEADER_SIZE as f32) || offset.fract() != 0.0 {
        return Err(malformed(path, format!("vox_offset {offset}")));
    }
    let offset = offset as usize;
    let (slope, inter) = (r.f32(112), r.f32(116));
    let scale = (slope != 0.0 && slope.is_finite() && !(slope == 1.0 && inter == 0.0)).then_some((slope, inter));
    let width = match datatype {
        2 | 256 => 1,
        4 | 512 => 2,
        8 | 16 | 768 => 4,
        64 => 8,
        other => return Err(unsupported(path, format!("datatype code {other}"))),
    };
    let n = voxel_count(shape);
    let payload = bytes.get(offset..offset + n * width).ok_or_else(|| unsupported(path, format!("payload truncated: need {} bytes after offset {offset}", n * width)))?;
    let pr = Reader { bytes: payload, little };
    let value = |i: usize| -> f64 {
        let o = i * width;
        match datatype {
            2 => payload[o] as f64,
            256 => payload[o] as i8 as f64,
            4 => pr.i16(o) as f64,
            512 => pr.i16(o) as u16 as f64,
            8 => pr.i32(o) as f64,
            768 => pr.i32(o) as u32 as f64,
            16 => pr.f32(o) as f64,
            _ => {
                let b: [u8; 8] = payload[o..o + 8].try_into().unwrap();
                if little { f64::from_le_bytes(b) } else { f64::from_be_bytes(b) }
            }
        }
    };
    // File order has x fastest.
    let mut data = vec![0f64; n];
    let mut i = 0;
    for z in 0..shape[2] {
        for y in 0..shape[1] {
            for x in 0..shape[0] {
                let mut v = value(i);
                if let Some((s, b)) = scale {
                    v = v * s as f64 + b as f64;
                }
                data[linear_index(shape, x, y, z)] = v;
                i += 1;
            }
        }
    }
    Ok((NiftiHeader { shape, spacing, origin, datatype, scale }, data))
}

/// Reads a volume as stored (scaled by `scl_slope`/`scl_inter` when set).
pub fn read_nifti(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let bytes = read_bytes(path)?;
    let (h, data) = parse(path, &bytes)?;
    Volume::with_geometry(h.shape, h.spacing, h.origin, data.into_iter().map(|v| v as f32).collect())
}

/// Reads an integer label volume. Values must lie in `0..=255`.
pub fn read_nifti_labels(path: impl AsRef<Path>) -> Result<LabelMap> {
    let path = path.as_ref();
    let bytes = read_bytes(path)?;
    let (h, data) = parse(path, &bytes)?;
    let labels = data
        .iter()
        .map(|&v| {
            if v.fract() == 0.0 && (0.0..=255.0).contains(&v) {
                Ok(v as u8)
            } else {
                Err(unsupported(path, format!("label value {v} is not an integer in 0..=255")))
            }
        })
        .collect::<Result<Vec<u8>>>()?;
    LabelMap::new(h.shape, labels)
}

fn header_bytes(shape: Shape3, spacing: [f64; 3], origin: [f64; 3], datatype: i16, bitpix: i16) -> Vec<u8> {
    let mut h = vec![0u8; VOX_OFFSET];
    let put = |h: &mut Vec<u8>, off: usize, b: &[u8]| h[off..off + b.len()].copy_from_slice(b);
    put(&mut h, 0, &(HEADER_SIZE as i32).to_le_bytes());
    let dims: [i16; 8] = [3, shape[0] as i16, shape[1] as i16, shape[2] as i16, 1, 1, 1, 1];
    for (i, d) in dims.iter().enumerate() {
        put(&mut h, 40 + 2 * i, &d.to_le_bytes());
    }
    put(&mut h, 70, &datatype.to_le_bytes());
    put(&mut h, 72, &bitpix.to_le_bytes());
    let pix = [1.0f32, spacing[0] as f32, spacing[1] as f32, spacing[2] as f32, 1.0, 1.0, 1.0, 1.0];
    for (i, p) in pix.iter().enumerate() {
        put(&mut h, 76 + 4 * i, &p.to_le_bytes());
    }
    put(&mut h, 108, &(VOX_OFFSET as f32).to_le_bytes());
    put(&mut h, 112, &1.0f32.to_le_bytes());
    // xyzt_units: millimetres.
    h[123] = 2;
    put(&mut h, 252, &1i16.to_le_bytes());
    put(&mut h, 254, &1i16.to_le_bytes());
    for a in 0..3 {
        put(&mut h, 268 + 4 * a, &(origin[a] as f32).to_le_bytes());
        let mut row = [0f32; 4];
        row[a] = spacing[a] as f32;
        row[3] = origin[a] as f32;
        for (j, v) in row.iter().enumerate() {
            put(&mut h, 280 + 16 * a + 4 * j, &v.to_le_bytes());
        }
    }
    put(&mut h, 344, b"n+1\0");
    h
}

fn write_bytes(path: &Path, mut bytes: Vec<u8>, payload: impl Fn(&mut Vec<u8>)) -> Result<()> {
    payload(&mut bytes);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    if is_gz(path) {
        // mtime stays 0 so identical volumes give identical files.
        let mut enc = GzEncoder::new(Vec::new(), Compression::default());
        enc.write_all(&bytes)?;
        fs::write(path, enc.finish()?)?;
    } else {
        fs::write(path, bytes)?;
    }
    Ok(())
}

fn file_order(shape: Shape3) -> impl Iterator<Item = usize> {
    (0..shape[2]).flat_map(move |z| (0..shape[1]).flat_map(move |y| (0..shape[0]).map(move |x| linear_index(shape, x, y, z))))
}

/// Writes a float32 NIfTI-1 file (gzip-compressed when the name ends in `.gz`).
pub fn write_nifti(path: impl AsRef<Path>, v: &Volume) -> Result<()> {
    let shape = v.shape();
    let header = header_bytes(shape, v.spacing(), v.origin(), 16, 32);
    write_bytes(path.as_ref(), header, |b| {
        for i in file_order(shape) {
            b.extend_from_slice(&v.data()[i].to_le_bytes());
        }
    })
}

/// Writes a uint8 label volume.
pub fn write_nifti_labels(path: impl AsRef<Path>, m: &LabelMap, spacing: [f64; 3]) -> Result<()> {
    let shape = m.shape();
    let header = header_bytes(shape, spacing, [0.0; 3], 2, 8);
    write_bytes(path.as_ref(), header, |b| {
        for i in file_order(shape) {
            b.push(m.data()[i]);
        }
    })
}

/// Zero-pads `v` symmetrically (extra voxel at the high end) to `target`.
pub fn pad_to(v: &Volume, target: Shape3) -> Result<Volume> {
    let s = v.shape();
    if (0..3).any(|a| target[a] < s[a]) {
        return Err(Error::Domain(format!("cannot pad {s:?} to smaller shape {target:?}")));
    }
    let lo = [(target[0] - s[0]) / 2, (target[1] - s[1]) / 2, (target[2] - s[2]) / 2];
    let mut data = vec![0f32; voxel_count(target)];
    for x in 0..s[0] {
        for y in 0..s[1] {
            for z in 0..s[2] {
                data[linear_index(target, x + lo[0], y + lo[1], z + lo[2])] = v.get(x, y, z);
            }
        }
    }
    let sp = v.spacing();
    let o = v.origin();
    let origin = [o[0] - lo[0] as f64 * sp[0], o[1] - lo[1] as f64 * sp[1], o[2] - lo[2] as f64 * sp[2]];
    Volume::with_geometry(target, sp, origin, data)
}

/// Reads, z-scores and optionally pads a volume.
pub fn ingest_nifti(path: impl AsRef<Path>, opts: &IngestOptions) -> Result<Volume> {
    let v = read_nifti(path)?.zscore().0;
    match opts.pad_to {
        Some(t) => pad_to(&v, t),
        None => Ok(v),
    }
}

/// `<dir>/<stem>.nii.gz`
pub fn nifti_path(dir: &Path, stem: &str) -> PathBuf {
    dir.join(format!("{stem}.nii.gz"))
}

/// File stem with `.nii` / `.nii.gz` removed, or `None` for other files.
pub fn nifti_stem(path: &Path) -> Option<String> {
    let name = path.file_name()?.to_str()?;
    name.strip_suffix(".nii.gz").or_else(|| name.strip_suffix(".nii")).map(str::to_owned)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: Shape3) -> Volume {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let data = (0..voxel_count(shape)).map(|_| rng.gen_range(-100.0f32..100.0)).collect();
        Volume::with_geometry(shape, [1.0, 1.0, 5.0], [3.0, -2.0, 0.5], data).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let v = random([5, 4, 3]);
        for name in ["a.nii", "a.nii.gz"] {
            let p = dir.path().join(name);
            write_nifti(&p, &v).unwrap();
            let r = read_nifti(&p).unwrap();
            assert_eq!(r, v);
        }
    }

    #[test]
    fn spacing_comes_from_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.nii");
        write_nifti(&p, &random([4, 4, 4])).unwrap();
        assert_eq!(ingest_nifti(&p, &IngestOptions::default()).unwrap().spacing(), [1.0, 1.0, 5.0]);
    }

    #[test]
    fn constant_volume_normalizes_to_zeros() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.nii.gz");
        write_nifti(&p, &Volume::filled([6, 5, 4], 7.0).unwrap()).unwrap();
        let v = ingest_nifti(&p, &IngestOptions { pad_to: Some([8, 8, 8]) }).unwrap();
        assert_eq!(v.shape(), [8, 8, 8]);
        assert!(v.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn padding_centers_data() {
        let v = Volume::filled([2, 2, 2], 1.0).unwrap();
        let p = pad_to(&v, [4, 5, 2]).unwrap();
        assert_eq!(p.get(1, 1, 0), 1.0);
        assert_eq!(p.get(2, 2, 1), 1.0);
        assert_eq!(p.get(0, 0, 0), 0.0);
        assert_eq!(p.get(1, 3, 0), 0.0);
        assert!(pad_to(&v, [1, 2, 2]).is_err());
    }

    #[test]
    fn labels_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = LabelMap::from_fn([3, 4, 5], |x, y, z| ((x + y + z) % 3) as u8).unwrap();
        let p = dir.path().join("seg.nii.gz");
        write_nifti_labels(&p, &m, [1.0; 3]).unwrap();
        assert_eq!(read_nifti_labels(&p).unwrap(), m);
    }

    #[test]
    fn errors_are_distinct() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(read_nifti(dir.path().join("none.nii")), Err(Error::FileNotFound(_))));

        let bad = dir.path().join("bad.nii");
        fs::write(&bad, vec![0u8; 400]).unwrap();
        assert!(matches!(read_nifti(&bad), Err(Error::MalformedHeader { .. })));

        let four_d = dir.path().join("4d.nii");
        let mut h = header_bytes([2, 2, 2], [1.0; 3], [0.0; 3], 16, 32);
        h[40..42].copy_from_slice(&4i16.to_le_bytes());
        h[48..50].copy_from_slice(&3i16.to_le_bytes());
        h.extend(vec![0u8; 8 * 3 * 4]);
        fs::write(&four_d, h).unwrap();
        assert!(matches!(read_nifti(&four_d), Err(Error::UnsupportedPayload { .. })));
    }

    #[test]
    fn reads_big_endian_int16_with_scaling() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("be.nii");
        let mut h = vec![0u8; VOX_OFFSET];
        h[0..4].copy_from_slice(&348i32.to_be_bytes());
        for (i, d) in [3i16, 2, 1, 1, 1, 1, 1, 1].iter().enumerate() {
            h[40 + 2 * i..42 + 2 * i].copy_from_slice(&d.to_be_bytes());
        }
        h[70..72].copy_from_slice(&4i16.to_be_bytes());
        for i in 0..8 {
            h[76 + 4 * i..80 + 4 * i].copy_from_slice(&1f32.to_be_bytes());
        }
        h[108..112].copy_from_slice(&352f32.to_be_bytes());
        h[112..116].copy_from_slice(&2f32.to_be_bytes());
        h[116..120].copy_from_slice(&1f32.to_be_bytes());
        h[344..348].copy_from_slice(b"n+1\0");
        h.extend_from_slice(&(-3i16).to_be_bytes());
        h.extend_from_slice(&5i16.to_be_bytes());
        fs::write(&p, h).unwrap();
        let v = read_nifti(&p).unwrap();
        assert_eq!(v.shape(), [2, 1, 1]);
        assert_eq!(v.data(), &[-5.0, 11.0]);
    }

    #[test]
    fn stems() {
        assert_eq!(nifti_stem(Path::new("/a/sub-01_t1.nii.gz")).as_deref(), Some("sub-01_t1"));
        assert_eq!(nifti_stem(Path::new("x.nii")).as_deref(), Some("x"));
        assert_eq!(nifti_stem(Path::new("x.csv")), None);
    }
}
