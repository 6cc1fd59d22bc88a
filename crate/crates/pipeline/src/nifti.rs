//! Single-file NIfTI-1 (`.nii`), little-endian, `uint8` and `float32`
//! voxels, three or four dimensions. The fourth dimension maps to volume
//! channels. Spatial placement comes from the s-form, then the q-form, then
//! the voxel sizes.

use std::path::Path;

use photovol::eval::LabelVolume;
use photovol::linalg::Mat4;
use photovol::scalar::Real;
use photovol::volume::{Grid3, Volume};

use crate::error::{self, PipelineError, Result};

const HEADER_SIZE: usize = 348;
const VOX_OFFSET: usize = 352;
const DT_UINT8: i16 = 2;
const DT_FLOAT32: i16 = 16;

#[derive(Debug, Clone, PartialEq)]
pub enum NiftiData {
    U8(Vec<u8>),
    F32(Vec<f32>),
}

impl NiftiData {
    pub fn len(&self) -> usize {
        match self {
            NiftiData::U8(v) => v.len(),
            NiftiData::F32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn value(&self, i: usize) -> f64 {
        match self {
            NiftiData::U8(v) => v[i] as f64,
            NiftiData::F32(v) => v[i] as f64,
        }
    }
}

/// Image in file order: x fastest, then y, z, and the fourth axis.
#[derive(Debug, Clone, PartialEq)]
pub struct Nifti {
    /// `[nx, ny, nz, nt]`; `nt` is 1 for a 3D image.
    pub dims: [usize; 4],
    pub affine: Mat4,
    pub data: NiftiData,
}

fn rd_i16(b: &[u8], at: usize) -> i16 {
    i16::from_le_bytes([b[at], b[at + 1]])
}

fn rd_i32(b: &[u8], at: usize) -> i32 {
    i32::from_le_bytes(b[at..at + 4].try_into().unwrap())
}

fn rd_f32(b: &[u8], at: usize) -> f32 {
    f32::from_le_bytes(b[at..at + 4].try_into().unwrap())
}

fn put_i16(b: &mut [u8], at: usize, v: i16) {
    b[at..at + 2].copy_from_slice(&v.to_le_bytes());
}

fn put_i32(b: &mut [u8], at: usize, v: i32) {
    b[at..at + 4].copy_from_slice(&v.to_le_bytes());
}

fn put_f32(b: &mut [u8], at: usize, v: f32) {
    b[at..at + 4].copy_from_slice(&v.to_le_bytes());
}

/// Rotation from the q-form quaternion `(b, c, d)` with `a` implied.
fn quaternion_affine(q: [f64; 3], offset: [f64; 3], pixdim: [f64; 3], qfac: f64) -> Mat4 {
    let [b, c, d] = q;
    let a = (1.0 - (b * b + c * c + d * d)).max(0.0).sqrt();
    let r = [
        [
            a * a + b * b - c * c - d * d,
            2.0 * (b * c - a * d),
            2.0 * (b * d + a * c),
        ],
        [
            2.0 * (b * c + a * d),
            a * a + c * c - b * b - d * d,
            2.0 * (c * d - a * b),
        ],
        [
            2.0 * (b * d - a * c),
            2.0 * (c * d + a * b),
            a * a + d * d - c * c - b * b,
        ],
    ];
    let s = [pixdim[0], pixdim[1], pixdim[2] * qfac];
    let mut m = [[0.0; 4]; 4];
    for i in 0..3 {
        for j in 0..3 {
            m[i][j] = r[i][j] * s[j];
        }
        m[i][3] = offset[i];
    }
    m[3][3] = 1.0;
    m
}

impl Nifti {
    pub fn parse(bytes: &[u8], path: &Path) -> Result<Nifti> {
        if bytes.len() < HEADER_SIZE {
            return Err(PipelineError::format(path, "shorter than a NIfTI-1 header"));
        }
        let size = rd_i32(bytes, 0);
        if size != HEADER_SIZE as i32 {
            if size.swap_bytes() == HEADER_SIZE as i32 {
                return Err(PipelineError::Unsupported(format!(
                    "{}: big-endian NIfTI",
                    path.display()
                )));
            }
            return Err(PipelineError::format(
                path,
                format!("header size {size} is not 348"),
            ));
        }
        if &bytes[344..348] != b"n+1\0" {
            let magic = String::from_utf8_lossy(&bytes[344..347]).into_owned();
            return Err(PipelineError::format(
                path,
                format!("magic {magic:?} is not \"n+1\" (only single-file NIfTI-1 is read)"),
            ));
        }
        let ndim = rd_i16(bytes, 40);
        if !(1..=7).contains(&ndim) {
            return Err(PipelineError::format(path, format!("dim[0] = {ndim}")));
        }
        let mut dims = [1usize; 4];
        for a in 0..ndim as usize {
            let n = rd_i16(bytes, 42 + 2 * a);
            if n < 1 {
                return Err(PipelineError::format(path, format!("dim[{}] = {n}", a + 1)));
            }
            if let Some(d) = dims.get_mut(a) {
                *d = n as usize;
            } else if n != 1 {
                return Err(PipelineError::Unsupported(format!(
                    "{}: more than four dimensions",
                    path.display()
                )));
            }
        }
        let datatype = rd_i16(bytes, 70);
        let width = match datatype {
            DT_UINT8 => 1,
            DT_FLOAT32 => 4,
            other => {
                return Err(PipelineError::Unsupported(format!(
                    "{}: datatype {other} (only uint8 and float32)",
                    path.display()
                )))
            }
        };
        let slope = rd_f32(bytes, 112);
        let inter = rd_f32(bytes, 116);
        if !(slope == 0.0 || slope == 1.0) || inter != 0.0 {
            return Err(PipelineError::Unsupported(format!(
                "{}: intensity scaling slope {slope} intercept {inter}",
                path.display()
            )));
        }
        let offset = rd_f32(bytes, 108);
        if offset.is_nan() || offset < HEADER_SIZE as f32 || offset.fract() != 0.0 {
            return Err(PipelineError::format(path, format!("vox_offset {offset}")));
        }
        let offset = offset as usize;
        let n: usize = dims.iter().product();
        let body = bytes
            .get(offset..offset + n * width)
            .ok_or_else(|| PipelineError::format(path, "file ends before the voxel data"))?;
        let data = match datatype {
            DT_UINT8 => NiftiData::U8(body.to_vec()),
            _ => NiftiData::F32(
                body.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
        };

        let pixdim: Vec<f64> = (0..8).map(|i| rd_f32(bytes, 76 + 4 * i) as f64).collect();
        let sform_code = rd_i16(bytes, 254);
        let qform_code = rd_i16(bytes, 252);
        let affine = if sform_code > 0 {
            let mut m = [[0.0; 4]; 4];
            for (r, row) in m.iter_mut().take(3).enumerate() {
                for (c, v) in row.iter_mut().enumerate() {
                    *v = rd_f32(bytes, 280 + 16 * r + 4 * c) as f64;
                }
            }
            m[3][3] = 1.0;
            m
        } else if qform_code > 0 {
            let q = [256, 260, 264].map(|at| rd_f32(bytes, at) as f64);
            let o = [268, 272, 276].map(|at| rd_f32(bytes, at) as f64);
            let qfac = if pixdim[0] < 0.0 { -1.0 } else { 1.0 };
            quaternion_affine(q, o, [pixdim[1], pixdim[2], pixdim[3]], qfac)
        } else {
            let mut m = [[0.0; 4]; 4];
            for a in 0..3 {
                m[a][a] = if pixdim[a + 1] > 0.0 {
                    pixdim[a + 1]
                } else {
                    1.0
                };
            }
            m[3][3] = 1.0;
            m
        };
        Ok(Nifti { dims, affine, data })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut h = vec![0u8; VOX_OFFSET];
        put_i32(&mut h, 0, HEADER_SIZE as i32);
        h[38] = b'r'; // regular
        let ndim = if self.dims[3] > 1 { 4 } else { 3 };
        put_i16(&mut h, 40, ndim);
        for a in 0..7 {
            let n = if a < 4 { self.dims[a] } else { 1 };
            put_i16(&mut h, 42 + 2 * a, n as i16);
        }
        let (dt, bitpix) = match self.data {
            NiftiData::U8(_) => (DT_UINT8, 8),
            NiftiData::F32(_) => (DT_FLOAT32, 32),
        };
        put_i16(&mut h, 70, dt);
        put_i16(&mut h, 72, bitpix);
        put_f32(&mut h, 76, 1.0);
        for a in 0..3 {
            let col = (0..3)
                .map(|r| self.affine[r][a] * self.affine[r][a])
                .sum::<f64>()
                .sqrt();
            put_f32(&mut h, 80 + 4 * a, col as f32);
        }
        put_f32(&mut h, 92, 1.0);
        put_f32(&mut h, 108, VOX_OFFSET as f32);
        put_f32(&mut h, 112, 1.0);
        h[123] = 2; // millimetres
        put_i16(&mut h, 254, 1);
        for r in 0..3 {
            for c in 0..4 {
                put_f32(&mut h, 280 + 16 * r + 4 * c, self.affine[r][c] as f32);
            }
        }
        h[344..348].copy_from_slice(b"n+1\0");
        match &self.data {
            NiftiData::U8(v) => h.extend_from_slice(v),
            NiftiData::F32(v) => v.iter().for_each(|x| h.extend_from_slice(&x.to_le_bytes())),
        }
        h
    }

    pub fn read(path: &Path) -> Result<Nifti> {
        Nifti::parse(&error::read(path)?, path)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        error::write(path, &self.to_bytes())
    }

    pub fn grid(&self) -> Result<Grid3> {
        Ok(Grid3::new(
            [self.dims[0], self.dims[1], self.dims[2]],
            self.affine,
        )?)
    }

    /// Volume with the fourth axis as channels.
    pub fn to_volume<T: Real>(&self) -> Result<Volume<T>> {
        let grid = self.grid()?;
        let [nx, ny, nz, nt] = self.dims;
        let plane = nx * ny * nz;
        let mut data = Vec::with_capacity(plane * nt);
        for v in 0..plane {
            for t in 0..nt {
                data.push(T::of(self.data.value(t * plane + v)));
            }
        }
        Ok(Volume::new(grid, nt, data)?)
    }

    pub fn from_volume<T: Real>(v: &Volume<T>) -> Nifti {
        let [nx, ny, nz] = v.dims();
        let ch = v.channels();
        let plane = nx * ny * nz;
        let src = v.data();
        let mut out = vec![0f32; plane * ch];
        for t in 0..ch {
            for i in 0..plane {
                out[t * plane + i] = src[i * ch + t].as_f64() as f32;
            }
        }
        Nifti {
            dims: [nx, ny, nz, ch],
            affine: *v.grid_to_world(),
            data: NiftiData::F32(out),
        }
    }

    pub fn from_labels(l: &LabelVolume) -> Result<Nifti> {
        let data = l
            .labels
            .iter()
            .map(|&v| {
                u8::try_from(v).map_err(|_| {
                    PipelineError::Unsupported(format!("label {v} does not fit uint8"))
                })
            })
            .collect::<Result<Vec<u8>>>()?;
        let [nx, ny, nz] = l.grid.dims;
        Ok(Nifti {
            dims: [nx, ny, nz, 1],
            affine: l.grid.grid_to_world,
            data: NiftiData::U8(data),
        })
    }

    pub fn to_labels(&self) -> Result<LabelVolume> {
        if self.dims[3] != 1 {
            return Err(PipelineError::Unsupported("label maps must be 3D".into()));
        }
        let labels = (0..self.data.len())
            .map(|i| {
                let v = self.data.value(i);
                if v >= 0.0 && v <= u16::MAX as f64 && v.fract() == 0.0 {
                    Ok(v as u16)
                } else {
                    Err(PipelineError::Unsupported(format!(
                        "label value {v} is not a small non-negative integer"
                    )))
                }
            })
            .collect::<Result<Vec<u16>>>()?;
        Ok(LabelVolume::new(self.grid()?, labels)?)
    }
}

pub fn read_volume<T: Real>(path: &Path) -> Result<Volume<T>> {
    Nifti::read(path)?.to_volume()
}

pub fn write_volume<T: Real>(path: &Path, v: &Volume<T>) -> Result<()> {
    Nifti::from_volume(v).write(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Nifti {
        let affine = [
            [0.5, 0.0, 0.0, -10.0],
            [0.0, 0.5, 0.0, 3.25],
            [0.0, 0.0, 4.0, 7.0],
            [0.0, 0.0, 0.0, 1.0],
        ];
        Nifti {
            dims: [3, 2, 2, 2],
            affine,
            data: NiftiData::F32((0..24).map(|v| v as f32 * 0.37 - 1.0).collect()),
        }
    }

    #[test]
    fn header_fields() {
        let b = sample().to_bytes();
        assert_eq!(b.len(), 352 + 24 * 4);
        assert_eq!(rd_i32(&b, 0), 348);
        assert_eq!(rd_i16(&b, 40), 4);
        assert_eq!(rd_i16(&b, 48), 2);
        assert_eq!(rd_f32(&b, 84), 0.5);
        assert_eq!(rd_f32(&b, 88), 4.0);
        assert_eq!(&b[344..348], b"n+1\0");
    }

    #[test]
    fn parse_inverts_to_bytes() {
        let n = sample();
        assert_eq!(Nifti::parse(&n.to_bytes(), Path::new("x")).unwrap(), n);
    }

    #[test]
    fn volume_channels_follow_the_fourth_axis() {
        let n = sample();
        let v: Volume<f32> = n.to_volume().unwrap();
        assert_eq!(v.channels(), 2);
        assert_eq!(v.get(1, 0, 0, 1), n.data.value(12 + 1) as f32);
        assert_eq!(Nifti::from_volume(&v), n);
    }

    #[test]
    fn rejects_bad_magic_and_datatypes() {
        let mut b = sample().to_bytes();
        b[345] = b'i';
        assert!(matches!(
            Nifti::parse(&b, Path::new("x")),
            Err(PipelineError::Format { .. })
        ));
        let mut b = sample().to_bytes();
        put_i16(&mut b, 70, 64);
        assert!(matches!(
            Nifti::parse(&b, Path::new("x")),
            Err(PipelineError::Unsupported(_))
        ));
        let mut b = sample().to_bytes();
        b[0..4].copy_from_slice(&348i32.to_be_bytes());
        assert!(matches!(
            Nifti::parse(&b, Path::new("x")),
            Err(PipelineError::Unsupported(_))
        ));
    }

    #[test]
    fn qform_fallback() {
        let mut b = sample().to_bytes();
        put_i16(&mut b, 254, 0);
        put_i16(&mut b, 252, 1);
        // 180° about z: (b, c, d) = (0, 0, 1)
        put_f32(&mut b, 264, 1.0);
        put_f32(&mut b, 268, 5.0);
        let n = Nifti::parse(&b, Path::new("x")).unwrap();
        assert_eq!(n.affine[0][0], -0.5);
        assert_eq!(n.affine[1][1], -0.5);
        assert_eq!(n.affine[2][2], 4.0);
        assert_eq!(n.affine[0][3], 5.0);
    }

    #[test]
    fn labels_round_trip_as_uint8() {
        let g = Grid3::centered([2, 2, 1], [1.0; 3]).unwrap();
        let l = LabelVolume::new(g, vec![0, 3, 255, 7]).unwrap();
        let n = Nifti::from_labels(&l).unwrap();
        assert!(matches!(n.data, NiftiData::U8(_)));
        let back = Nifti::parse(&n.to_bytes(), Path::new("x"))
            .unwrap()
            .to_labels()
            .unwrap();
        assert_eq!(back.labels, l.labels);
        assert!(Nifti::from_labels(&LabelVolume::new(g, vec![0, 300, 0, 0]).unwrap()).is_err());
    }
}
