//! MRC2014 reader and writer.
//!
//! Only the fields needed for volumes and particle stacks are interpreted.
//! Extended headers are skipped, never parsed. Files are always written
//! little-endian in MODE 2 (float32); MODEs 0, 1, 2 and 6 are accepted on read
//! and converted to `f32`.

use std::fs::File;
use std::io::{BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;

use byteorder::{BigEndian, ByteOrder, LittleEndian, WriteBytesExt};
use ndarray::{Array3, Axis};

use crate::map::{DensityMap, ImageStack};
use crate::{Error, Result};

pub const HEADER_LEN: usize = 1024;
const MAGIC: &[u8; 4] = b"MAP ";
const STAMP_LE: [u8; 4] = [0x44, 0x44, 0x00, 0x00];
const NVERSION: i32 = 20140;
/// Relative tolerance when comparing per-axis voxel sizes stored as f32.
const ISOTROPY_TOL: f64 = 1e-4;

/// Anything stored in an MRC file.
#[derive(Clone, Debug, PartialEq)]
pub enum MrcData {
    Volume(DensityMap),
    Stack(ImageStack),
}

impl From<DensityMap> for MrcData {
    fn from(map: DensityMap) -> Self {
        MrcData::Volume(map)
    }
}

impl From<ImageStack> for MrcData {
    fn from(stack: ImageStack) -> Self {
        MrcData::Stack(stack)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Endian {
    Little,
    Big,
}

/// The interpreted subset of the 1024-byte header.
#[derive(Clone, Debug, PartialEq)]
pub struct MrcHeader {
    pub nx: i32,
    pub ny: i32,
    pub nz: i32,
    pub mode: i32,
    pub mx: i32,
    pub my: i32,
    pub mz: i32,
    /// Cell dimensions in Å.
    pub cell: [f32; 3],
    pub mapc: i32,
    pub mapr: i32,
    pub maps: i32,
    pub dmin: f32,
    pub dmax: f32,
    pub dmean: f32,
    pub ispg: i32,
    pub nsymbt: i32,
    pub origin: [f32; 3],
    pub rms: f32,
    pub machine_stamp: [u8; 4],
    endian: Endian,
}

impl MrcHeader {
    fn word(bytes: &[u8], word: usize) -> &[u8] {
        let start = (word - 1) * 4;
        &bytes[start..start + 4]
    }

    /// Parses the header, validating the "MAP " identifier at word 53.
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Format(format!(
                "header is {} bytes, expected {HEADER_LEN}",
                bytes.len()
            )));
        }
        if Self::word(bytes, 53) != MAGIC {
            return Err(Error::Format(format!(
                "missing \"MAP \" identifier at word 53 (found {:?})",
                String::from_utf8_lossy(Self::word(bytes, 53))
            )));
        }
        let mut stamp = [0u8; 4];
        stamp.copy_from_slice(Self::word(bytes, 54));
        let endian = match stamp[0] {
            0x11 => Endian::Big,
            // 0x44 is the MRC2014 stamp; some writers leave it zeroed.
            _ => Endian::Little,
        };
        let int = |w: usize| match endian {
            Endian::Little => LittleEndian::read_i32(Self::word(bytes, w)),
            Endian::Big => BigEndian::read_i32(Self::word(bytes, w)),
        };
        let float = |w: usize| match endian {
            Endian::Little => LittleEndian::read_f32(Self::word(bytes, w)),
            Endian::Big => BigEndian::read_f32(Self::word(bytes, w)),
        };
        Ok(MrcHeader {
            nx: int(1),
            ny: int(2),
            nz: int(3),
            mode: int(4),
            mx: int(8),
            my: int(9),
            mz: int(10),
            cell: [float(11), float(12), float(13)],
            mapc: int(17),
            mapr: int(18),
            maps: int(19),
            dmin: float(20),
            dmax: float(21),
            dmean: float(22),
            ispg: int(23),
            nsymbt: int(24),
            origin: [float(50), float(51), float(52)],
            rms: float(55),
            machine_stamp: stamp,
            endian,
        })
    }

    fn bytes_per_value(&self) -> Result<usize> {
        match self.mode {
            0 => Ok(1),
            1 | 6 => Ok(2),
            2 => Ok(4),
            m => Err(Error::UnsupportedMode(m)),
        }
    }

    fn grid(&self) -> Result<[usize; 3]> {
        let dims = [self.nx, self.ny, self.nz];
        if dims.iter().any(|&d| d <= 0) {
            return Err(Error::Format(format!(
                "non-positive grid dimensions {dims:?}"
            )));
        }
        Ok(dims.map(|d| d as usize))
    }

    /// Declared byte length of the data section.
    pub fn data_len(&self) -> Result<u64> {
        let [nx, ny, nz] = self.grid()?;
        let bpv = self.bytes_per_value()? as u64;
        (nx as u64)
            .checked_mul(ny as u64)
            .and_then(|n| n.checked_mul(nz as u64))
            .and_then(|n| n.checked_mul(bpv))
            .ok_or_else(|| Error::Format("grid dimensions overflow".into()))
    }

    fn data_offset(&self) -> Result<u64> {
        if self.nsymbt < 0 {
            return Err(Error::Format(format!("negative NSYMBT {}", self.nsymbt)));
        }
        Ok(HEADER_LEN as u64 + self.nsymbt as u64)
    }

    /// Maps storage order (column, row, section) to the x/y/z axis indices.
    fn axis_order(&self) -> Result<[usize; 3]> {
        let order = [self.mapc, self.mapr, self.maps];
        if order == [0, 0, 0] {
            return Ok([0, 1, 2]);
        }
        let mut seen = [false; 3];
        let mut out = [0usize; 3];
        for (slot, &axis) in order.iter().enumerate() {
            if !(1..=3).contains(&axis) || seen[(axis - 1) as usize] {
                return Err(Error::Format(format!(
                    "MAPC/MAPR/MAPS {order:?} is not a permutation of 1,2,3"
                )));
            }
            seen[(axis - 1) as usize] = true;
            out[slot] = (axis - 1) as usize;
        }
        Ok(out)
    }
}

/// Reads an MRC2014 file as a volume or an image stack (ISPG = 0).
pub fn read_mrc(path: impl AsRef<Path>) -> Result<MrcData> {
    let path = path.as_ref();
    let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
    let file_len = file.metadata().map_err(|e| Error::io(path, e))?.len();
    let mut head = [0u8; HEADER_LEN];
    file.read_exact(&mut head).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => {
            Error::Format(format!("file is {file_len} bytes, shorter than the header"))
        }
        _ => Error::io(path, e),
    })?;
    let header = MrcHeader::parse(&head)?;
    let offset = header.data_offset()?;
    let data_len = header.data_len()?;
    if file_len < offset + data_len {
        return Err(Error::Corrupt(format!(
            "data section truncated: header declares {data_len} bytes at offset {offset}, file has {file_len} bytes"
        )));
    }
    file.seek(SeekFrom::Start(offset))
        .map_err(|e| Error::io(path, e))?;
    let mut raw = Vec::with_capacity(data_len as usize);
    file.take(data_len)
        .read_to_end(&mut raw)
        .map_err(|e| Error::io(path, e))?;
    if raw.len() as u64 != data_len {
        return Err(Error::Corrupt("data section shorter than declared".into()));
    }
    decode_data(&header, &raw)
}

/// Decodes a complete in-memory MRC file.
pub fn decode(bytes: &[u8]) -> Result<MrcData> {
    let header = MrcHeader::parse(bytes)?;
    let offset = header.data_offset()?;
    let data_len = header.data_len()?;
    let end = offset
        .checked_add(data_len)
        .filter(|&end| end <= bytes.len() as u64)
        .ok_or_else(|| {
            Error::Corrupt(format!(
                "data section truncated: header declares {data_len} bytes at offset {offset}, buffer has {} bytes",
                bytes.len()
            ))
        })?;
    decode_data(&header, &bytes[offset as usize..end as usize])
}

fn decode_data(header: &MrcHeader, raw: &[u8]) -> Result<MrcData> {
    let [nc, nr, ns] = header.grid()?;
    let values = convert_values(header, raw)?;
    // Storage order is sections, rows, columns.
    let stored =
        Array3::from_shape_vec((ns, nr, nc), values).map_err(|e| Error::Corrupt(e.to_string()))?;

    // Permute to canonical [z, y, x]. `order[slot]` is the spatial axis
    // (0 = x) stored at slot (0 = column). Array axis for slot s is 2 - s.
    let order = header.axis_order()?;
    let mut perm = [0usize; 3];
    for (slot, &axis) in order.iter().enumerate() {
        perm[2 - axis] = 2 - slot;
    }
    let voxels = if perm == [0, 1, 2] {
        stored
    } else {
        stored.permuted_axes(perm).as_standard_layout().into_owned()
    };
    let (nz, ny, nx) = voxels.dim();

    let sampling = {
        let m = [header.mx, header.my, header.mz];
        let n = [nx, ny, nz];
        [0, 1, 2].map(|i| if m[i] > 0 { m[i] as f64 } else { n[i] as f64 })
    };
    let spacing = [0, 1, 2].map(|i| header.cell[i] as f64 / sampling[i]);
    let is_stack = header.ispg == 0;
    let axes = if is_stack { 2 } else { 3 };
    let voxel_size = isotropic_size(&spacing[..axes])?;

    if voxels.iter().any(|v| !v.is_finite()) {
        return Err(Error::Corrupt(
            "data section contains non-finite values".into(),
        ));
    }

    if is_stack {
        let images = voxels
            .axis_iter(Axis(0))
            .map(|plane| plane.to_owned())
            .collect();
        Ok(MrcData::Stack(ImageStack::new(images, voxel_size)?))
    } else {
        let map = DensityMap {
            voxels,
            voxel_size,
            origin: header.origin.map(|v| v as f64),
        };
        map.validate()?;
        Ok(MrcData::Volume(map))
    }
}

fn isotropic_size(spacing: &[f64]) -> Result<f64> {
    // Unset cells (all zero) fall back to 1 Å.
    if spacing.iter().all(|&s| s == 0.0) {
        return Ok(1.0);
    }
    let first = spacing[0];
    if !(first > 0.0 && first.is_finite()) {
        return Err(Error::Format(format!("invalid voxel size {spacing:?}")));
    }
    if spacing
        .iter()
        .any(|&s| ((s - first) / first).abs() > ISOTROPY_TOL)
    {
        return Err(Error::Format(format!(
            "non-isotropic voxel size {spacing:?} is not supported"
        )));
    }
    Ok(first)
}

fn convert_values(header: &MrcHeader, raw: &[u8]) -> Result<Vec<f32>> {
    let big = header.endian == Endian::Big;
    let values = match header.mode {
        0 => raw.iter().map(|&b| b as i8 as f32).collect(),
        1 => raw
            .chunks_exact(2)
            .map(|c| {
                (if big {
                    BigEndian::read_i16(c)
                } else {
                    LittleEndian::read_i16(c)
                }) as f32
            })
            .collect(),
        6 => raw
            .chunks_exact(2)
            .map(|c| {
                (if big {
                    BigEndian::read_u16(c)
                } else {
                    LittleEndian::read_u16(c)
                }) as f32
            })
            .collect(),
        2 => raw
            .chunks_exact(4)
            .map(|c| {
                if big {
                    BigEndian::read_f32(c)
                } else {
                    LittleEndian::read_f32(c)
                }
            })
            .collect(),
        m => return Err(Error::UnsupportedMode(m)),
    };
    Ok(values)
}

struct Layout<'a> {
    grid: [usize; 3],
    sampling: [usize; 3],
    spacing: f64,
    ispg: i32,
    origin: [f64; 3],
    data: Box<dyn Iterator<Item = f32> + 'a>,
    count: usize,
}

fn layout(data: &MrcData) -> Result<Layout<'_>> {
    match data {
        MrcData::Volume(map) => {
            map.validate()?;
            let (nx, ny, nz) = map.shape();
            Ok(Layout {
                grid: [nx, ny, nz],
                sampling: [nx, ny, nz],
                spacing: map.voxel_size,
                ispg: 1,
                origin: map.origin,
                data: Box::new(map.voxels.iter().copied()),
                count: nx * ny * nz,
            })
        }
        MrcData::Stack(stack) => {
            stack.validate()?;
            let (ny, nx) = stack.image_dim().unwrap_or((0, 0));
            if stack.is_empty() {
                return Err(Error::Precondition("cannot write an empty stack".into()));
            }
            Ok(Layout {
                grid: [nx, ny, stack.len()],
                sampling: [nx, ny, 1],
                spacing: stack.pixel_size,
                ispg: 0,
                origin: [0.0; 3],
                data: Box::new(stack.images.iter().flat_map(|im| im.iter().copied())),
                count: nx * ny * stack.len(),
            })
        }
    }
}

/// Encodes little-endian MRC2014, MODE 2.
pub fn encode(data: &MrcData) -> Result<Vec<u8>> {
    let layout = layout(data)?;
    let values: Vec<f32> = layout.data.collect();
    debug_assert_eq!(values.len(), layout.count);

    let (mut min, mut max, mut sum) = (f64::INFINITY, f64::NEG_INFINITY, 0.0f64);
    for &v in &values {
        let v = v as f64;
        min = min.min(v);
        max = max.max(v);
        sum += v;
    }
    let mean = sum / values.len() as f64;
    let var = values
        .iter()
        .map(|&v| (v as f64 - mean).powi(2))
        .sum::<f64>()
        / values.len() as f64;

    let mut out = Vec::with_capacity(HEADER_LEN + values.len() * 4);
    let mut w = |v: i32| out.write_i32::<LittleEndian>(v).expect("vec write");
    for n in layout.grid {
        w(n as i32);
    }
    w(2); // MODE
    for _ in 0..3 {
        w(0); // NXSTART..NZSTART
    }
    for m in layout.sampling {
        w(m as i32);
    }
    let mut header = out;
    for m in layout.sampling {
        header
            .write_f32::<LittleEndian>((m as f64 * layout.spacing) as f32)
            .expect("vec write");
    }
    for _ in 0..3 {
        header.write_f32::<LittleEndian>(90.0).expect("vec write");
    }
    for axis in 1..=3 {
        header.write_i32::<LittleEndian>(axis).expect("vec write");
    }
    for stat in [min, max, mean] {
        header
            .write_f32::<LittleEndian>(stat as f32)
            .expect("vec write");
    }
    header
        .write_i32::<LittleEndian>(layout.ispg)
        .expect("vec write");
    header.write_i32::<LittleEndian>(0).expect("vec write"); // NSYMBT
                                                             // Words 25..49: EXTRA; NVERSION lives at word 28.
    header.resize(HEADER_LEN - 4 * (256 - 49), 0);
    LittleEndian::write_i32(&mut header[27 * 4..28 * 4], NVERSION);
    for o in layout.origin {
        header
            .write_f32::<LittleEndian>(o as f32)
            .expect("vec write");
    }
    header.extend_from_slice(MAGIC);
    header.extend_from_slice(&STAMP_LE);
    header
        .write_f32::<LittleEndian>(var.sqrt() as f32)
        .expect("vec write");
    header.write_i32::<LittleEndian>(0).expect("vec write"); // NLABL
    header.resize(HEADER_LEN, 0);

    for v in values {
        header.write_f32::<LittleEndian>(v).expect("vec write");
    }
    Ok(header)
}

/// Writes `data` to `path` as little-endian MRC2014, MODE 2.
pub fn write_mrc(data: &MrcData, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(data)?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut writer = BufWriter::new(file);
    writer
        .write_all(&bytes)
        .and_then(|_| writer.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn write_volume(map: &DensityMap, path: impl AsRef<Path>) -> Result<()> {
    write_mrc(&MrcData::Volume(map.clone()), path)
}

pub fn write_stack(stack: &ImageStack, path: impl AsRef<Path>) -> Result<()> {
    write_mrc(&MrcData::Stack(stack.clone()), path)
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<DensityMap> {
    match read_mrc(path.as_ref())? {
        MrcData::Volume(map) => Ok(map),
        MrcData::Stack(_) => Err(Error::Format(format!(
            "{} holds an image stack, expected a volume",
            path.as_ref().display()
        ))),
    }
}

pub fn read_stack(path: impl AsRef<Path>) -> Result<ImageStack> {
    match read_mrc(path.as_ref())? {
        MrcData::Stack(stack) => Ok(stack),
        MrcData::Volume(_) => Err(Error::Format(format!(
            "{} holds a volume, expected an image stack (ISPG = 0)",
            path.as_ref().display()
        ))),
    }
}

/// Reads and parses only the header of `path`.
pub fn read_header(path: impl AsRef<Path>) -> Result<MrcHeader> {
    let path = path.as_ref();
    let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut head = [0u8; HEADER_LEN];
    file.read_exact(&mut head)
        .map_err(|_| Error::Format("file is shorter than the header".into()))?;
    MrcHeader::parse(&head)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn ramp_volume(nx: usize, ny: usize, nz: usize) -> DensityMap {
        let voxels = Array3::from_shape_fn((nz, ny, nx), |(z, y, x)| {
            (x + 10 * y + 100 * z) as f32 * 0.25 - 3.0
        });
        DensityMap::new(voxels, 1.7).unwrap()
    }

    #[test]
    fn zero_volume_roundtrip() {
        let map = DensityMap::new(Array3::zeros((4, 4, 4)), 1.0).unwrap();
        let back = decode(&encode(&map.clone().into()).unwrap()).unwrap();
        assert_eq!(back, MrcData::Volume(map));
    }

    #[test]
    fn header_statistics_for_small_ramp() {
        let voxels = Array3::from_shape_fn((2, 2, 2), |(z, y, x)| (4 * z + 2 * y + x) as f32);
        let map = DensityMap::new(voxels, 1.0).unwrap();
        let bytes = encode(&map.into()).unwrap();
        let header = MrcHeader::parse(&bytes).unwrap();
        assert_eq!((header.dmin, header.dmax, header.dmean), (0.0, 7.0, 3.5));
        assert_eq!(header.mode, 2);
        assert_eq!(header.machine_stamp, STAMP_LE);
        assert_eq!(&bytes[208..212], b"MAP ");
    }

    #[test]
    fn stack_shape_in_header() {
        let images = (0..5)
            .map(|i| Array2::from_elem((16, 16), i as f32))
            .collect();
        let stack = ImageStack::new(images, 2.0).unwrap();
        let header = MrcHeader::parse(&encode(&stack.into()).unwrap()).unwrap();
        assert_eq!((header.nx, header.ny, header.nz), (16, 16, 5));
        assert_eq!(header.ispg, 0);
        assert_eq!(header.cell, [32.0, 32.0, 2.0]);
    }

    #[test]
    fn rejects_bad_magic() {
        let mut bytes = encode(&ramp_volume(3, 3, 3).into()).unwrap();
        bytes[208..212].copy_from_slice(b"XXXX");
        assert!(matches!(decode(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn rejects_unsupported_mode() {
        let mut bytes = encode(&ramp_volume(3, 3, 3).into()).unwrap();
        LittleEndian::write_i32(&mut bytes[12..16], 4);
        assert!(matches!(decode(&bytes), Err(Error::UnsupportedMode(4))));
    }

    #[test]
    fn rejects_truncated_data() {
        let bytes = encode(&ramp_volume(3, 3, 3).into()).unwrap();
        let cut = &bytes[..bytes.len() - 1];
        assert!(matches!(decode(cut), Err(Error::Corrupt(_))));
        assert!(matches!(decode(&bytes[..100]), Err(Error::Format(_))));
    }

    #[test]
    fn oversized_header_dims_do_not_allocate() {
        let mut bytes = encode(&ramp_volume(3, 3, 3).into()).unwrap();
        LittleEndian::write_i32(&mut bytes[0..4], 100_000);
        LittleEndian::write_i32(&mut bytes[4..8], 100_000);
        assert!(matches!(decode(&bytes), Err(Error::Corrupt(_))));
    }

    #[test]
    fn rejects_anisotropic_cells() {
        let mut bytes = encode(&ramp_volume(3, 3, 3).into()).unwrap();
        LittleEndian::write_f32(&mut bytes[44..48], 9.0);
        assert!(matches!(decode(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn permuted_axes_are_normalized() {
        let map = ramp_volume(2, 3, 4);
        let bytes = encode(&map.clone().into()).unwrap();
        // Re-store with sections along x, columns along z: MAPC=3, MAPR=2, MAPS=1.
        let mut swapped = bytes[..HEADER_LEN].to_vec();
        LittleEndian::write_i32(&mut swapped[0..4], 4);
        LittleEndian::write_i32(&mut swapped[8..12], 2);
        LittleEndian::write_i32(&mut swapped[64..68], 3);
        LittleEndian::write_i32(&mut swapped[72..76], 1);
        for x in 0..2 {
            for y in 0..3 {
                for z in 0..4 {
                    swapped
                        .write_f32::<LittleEndian>(map.voxels[[z, y, x]])
                        .unwrap();
                }
            }
        }
        match decode(&swapped).unwrap() {
            MrcData::Volume(back) => assert_eq!(back.voxels, map.voxels),
            other => panic!("expected volume, got {other:?}"),
        }
    }

    #[test]
    fn integer_modes_convert() {
        let mut bytes = encode(&ramp_volume(2, 2, 1).into()).unwrap();
        bytes.truncate(HEADER_LEN);
        LittleEndian::write_i32(&mut bytes[12..16], 1);
        for v in [-2i16, 7, 300, -32768] {
            bytes.write_i16::<LittleEndian>(v).unwrap();
        }
        let MrcData::Volume(map) = decode(&bytes).unwrap() else {
            panic!("expected volume")
        };
        assert_eq!(
            map.voxels.iter().copied().collect::<Vec<_>>(),
            vec![-2.0, 7.0, 300.0, -32768.0]
        );
    }
}
