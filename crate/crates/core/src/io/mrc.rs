//! MRC2014 maps and image stacks, mode 2 (float32), little-endian only.

use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::volume::DensityVolume;

pub const HEADER_LEN: usize = 1024;
const MODE_FLOAT32: i32 = 2;

/// A decoded MRC file. The raw 1024-byte header is kept so fields this
/// crate does not interpret survive a read/write cycle.
#[derive(Clone, Debug, PartialEq)]
pub struct MrcFile {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
    /// Cell dimensions in Å.
    pub cella: [f32; 3],
    pub extended: Vec<u8>,
    pub data: Vec<f32>,
    header: Vec<u8>,
}

impl MrcFile {
    pub fn new(nx: usize, ny: usize, nz: usize, cella: [f32; 3], data: Vec<f32>) -> Result<Self> {
        if data.len() != nx * ny * nz {
            return Err(Error::InvalidArgument(format!(
                "{} values for a {nx}x{ny}x{nz} map",
                data.len()
            )));
        }
        let mut header = vec![0u8; HEADER_LEN];
        header[208..212].copy_from_slice(b"MAP ");
        header[212..216].copy_from_slice(&[0x44, 0x44, 0, 0]);
        {
            let mut w = Cursor::new(&mut header[..]);
            // mapc, mapr, maps
            w.set_position(64);
            for v in [1i32, 2, 3] {
                w.write_i32::<LittleEndian>(v).expect("in bounds");
            }
            // EXTTYP blank, NVERSION
            w.set_position(108);
            w.write_i32::<LittleEndian>(20140).expect("in bounds");
        }
        Ok(Self {
            nx,
            ny,
            nz,
            cella,
            extended: Vec::new(),
            data,
            header,
        })
    }

    /// Voxel size along x in Å.
    pub fn voxel_size(&self) -> f64 {
        self.cella[0] as f64 / self.nx as f64
    }

    pub fn from_volume(v: &DensityVolume) -> Self {
        let n = v.n();
        let c = (n as f64 * v.voxel_size()) as f32;
        let data = v.data().iter().map(|&x| x as f32).collect();
        Self::new(n, n, n, [c, c, c], data).expect("cube")
    }

    pub fn to_volume(&self) -> Result<DensityVolume> {
        if self.nx != self.ny || self.ny != self.nz {
            return Err(Error::InvalidArgument(format!(
                "map is {}x{}x{}, not a cube",
                self.nx, self.ny, self.nz
            )));
        }
        DensityVolume::from_vec(self.nx, self.voxel_size(), self.data.iter().map(|&x| x as f64).collect())
    }

    fn encode(&self) -> Vec<u8> {
        let mut h = self.header.clone();
        let (min, max, mean, rms) = stats(&self.data);
        {
            let mut w = Cursor::new(&mut h[..]);
            for v in [self.nx, self.ny, self.nz] {
                w.write_i32::<LittleEndian>(v as i32).expect("in bounds");
            }
            w.write_i32::<LittleEndian>(MODE_FLOAT32).expect("in bounds");
            // nxstart, nystart, nzstart stay as read
            w.set_position(28);
            for v in [self.nx, self.ny, self.nz] {
                w.write_i32::<LittleEndian>(v as i32).expect("in bounds");
            }
            for v in self.cella {
                w.write_f32::<LittleEndian>(v).expect("in bounds");
            }
            for _ in 0..3 {
                w.write_f32::<LittleEndian>(90.0).expect("in bounds");
            }
            w.set_position(76);
            for v in [min, max, mean] {
                w.write_f32::<LittleEndian>(v).expect("in bounds");
            }
            // stacks use space group 0, volumes 1
            w.write_i32::<LittleEndian>(i32::from(self.nz == self.nx && self.nx == self.ny)).expect("in bounds");
            w.write_i32::<LittleEndian>(self.extended.len() as i32).expect("in bounds");
            w.set_position(216);
            w.write_f32::<LittleEndian>(rms).expect("in bounds");
        }
        h[208..212].copy_from_slice(b"MAP ");
        h[212..216].copy_from_slice(&[0x44, 0x44, 0, 0]);
        let mut out = Vec::with_capacity(HEADER_LEN + self.extended.len() + 4 * self.data.len());
        out.extend_from_slice(&h);
        out.extend_from_slice(&self.extended);
        for &v in &self.data {
            out.write_f32::<LittleEndian>(v).expect("vec write");
        }
        out
    }

    fn decode(path: &Path, bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::format(
                path,
                format!("truncated header: expected at least {HEADER_LEN} bytes, found {}", bytes.len()),
            ));
        }
        let stamp = &bytes[212..214];
        if stamp[0] == 0x11 {
            return Err(Error::format(path, "big-endian MRC files are not supported"));
        }
        let mut r = Cursor::new(bytes);
        let mut dims = [0i32; 4];
        for d in dims.iter_mut() {
            *d = r.read_i32::<LittleEndian>().expect("header length checked");
        }
        let [nx, ny, nz, mode] = dims;
        if nx <= 0 || ny <= 0 || nz <= 0 {
            return Err(Error::format(path, format!("invalid dimensions {nx}x{ny}x{nz}")));
        }
        if mode != MODE_FLOAT32 {
            return Err(Error::format(path, format!("unsupported mode {mode}; only mode 2 (float32) is read")));
        }
        r.set_position(40);
        let mut cella = [0f32; 3];
        for c in cella.iter_mut() {
            *c = r.read_f32::<LittleEndian>().expect("header length checked");
        }
        r.set_position(92);
        let nsymbt = r.read_i32::<LittleEndian>().expect("header length checked");
        if nsymbt < 0 {
            return Err(Error::format(path, format!("negative extended header size {nsymbt}")));
        }
        let (nx, ny, nz, nsymbt) = (nx as usize, ny as usize, nz as usize, nsymbt as usize);
        let expected = HEADER_LEN + nsymbt + 4 * nx * ny * nz;
        if bytes.len() != expected {
            return Err(Error::format(
                path,
                format!(
                    "expected {expected} bytes for a {nx}x{ny}x{nz} map with {nsymbt} extended header bytes, found {}",
                    bytes.len()
                ),
            ));
        }
        let extended = bytes[HEADER_LEN..HEADER_LEN + nsymbt].to_vec();
        let mut data = vec![0f32; nx * ny * nz];
        let mut body = &bytes[HEADER_LEN + nsymbt..];
        body.read_f32_into::<LittleEndian>(&mut data).expect("length checked");
        Ok(Self {
            nx,
            ny,
            nz,
            cella,
            extended,
            data,
            header: bytes[..HEADER_LEN].to_vec(),
        })
    }
}

fn stats(data: &[f32]) -> (f32, f32, f32, f32) {
    if data.is_empty() {
        return (0.0, 0.0, 0.0, 0.0);
    }
    let min = data.iter().copied().fold(f32::INFINITY, f32::min);
    let max = data.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mean = data.iter().map(|&v| v as f64).sum::<f64>() / data.len() as f64;
    let var = data.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / data.len() as f64;
    (min, max, mean as f32, var.sqrt() as f32)
}

pub fn read_mrc(path: impl AsRef<Path>) -> Result<MrcFile> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    MrcFile::decode(path, &bytes)
}

pub fn write_mrc(path: impl AsRef<Path>, mrc: &MrcFile) -> Result<()> {
    let path = path.as_ref();
    fs::File::create(path)
        .and_then(|mut f| f.write_all(&mrc.encode()))
        .map_err(|e| Error::io(path, e))
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<DensityVolume> {
    read_mrc(path)?.to_volume()
}

pub fn write_volume(path: impl AsRef<Path>, v: &DensityVolume) -> Result<()> {
    write_mrc(path, &MrcFile::from_volume(v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.mrc");
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data: Vec<f32> = (0..32 * 32 * 32).map(|_| rng.random_range(-3.0..3.0)).collect();
        let m = MrcFile::new(32, 32, 32, [64.0, 64.0, 64.0], data.clone()).unwrap();
        write_mrc(&p, &m).unwrap();
        let back = read_mrc(&p).unwrap();
        assert_eq!(back.nx, 32);
        assert_eq!(back.voxel_size(), 2.0);
        assert!(back.data.iter().zip(&data).all(|(a, b)| a.to_bits() == b.to_bits()));
        // and again: the re-encoded file is byte-identical
        let p2 = dir.path().join("v2.mrc");
        write_mrc(&p2, &back).unwrap();
        assert_eq!(fs::read(&p).unwrap(), fs::read(&p2).unwrap());
    }

    #[test]
    fn extended_header_survives() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.mrc");
        let mut m = MrcFile::new(2, 2, 2, [2.0; 3], vec![1.0; 8]).unwrap();
        m.extended = (0..=255u8).collect();
        write_mrc(&p, &m).unwrap();
        let back = read_mrc(&p).unwrap();
        assert_eq!(back.extended, m.extended);
        assert_eq!(back.data, m.data);
    }

    #[test]
    fn truncated_file_reports_sizes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.mrc");
        let m = MrcFile::new(4, 4, 4, [4.0; 3], vec![0.5; 64]).unwrap();
        write_mrc(&p, &m).unwrap();
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 10]).unwrap();
        let msg = read_mrc(&p).unwrap_err().to_string();
        assert!(msg.contains("expected 1280 bytes"), "{msg}");
        assert!(msg.contains("found 1270"), "{msg}");
        fs::write(&p, &bytes[..100]).unwrap();
        assert!(read_mrc(&p).unwrap_err().to_string().contains("found 100"));
    }

    #[test]
    fn rejects_other_modes_and_big_endian() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.mrc");
        let m = MrcFile::new(2, 2, 2, [2.0; 3], vec![1.0; 8]).unwrap();
        let mut bytes = m.encode();
        bytes[12] = 1;
        fs::write(&p, &bytes).unwrap();
        assert!(read_mrc(&p).unwrap_err().to_string().contains("unsupported mode 1"));
        let mut bytes = m.encode();
        bytes[212] = 0x11;
        bytes[213] = 0x11;
        fs::write(&p, &bytes).unwrap();
        assert!(read_mrc(&p).unwrap_err().to_string().contains("big-endian"));
    }

    #[test]
    fn volume_conversion_keeps_voxel_size() {
        let v = DensityVolume::from_fn(8, 1.5, |x, y, z| x + 2.0 * y - z).unwrap();
        let m = MrcFile::from_volume(&v);
        assert_eq!(m.voxel_size(), 1.5);
        assert_eq!(m.to_volume().unwrap(), v);
    }
}
