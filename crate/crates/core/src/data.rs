//! Toy datasets and the IDX image container.

use crate::ndiff::Mat;
use crate::random::standard_normal;
use crate::{Error, Result};
use byteorder::{BigEndian, ReadBytesExt, WriteBytesExt};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::io::{Cursor, Read};
use std::path::Path;

/// Magic number of an unsigned-byte IDX tensor of rank 3 (images).
pub const IDX_IMAGES: u32 = 0x0000_0803;
/// Magic number of an unsigned-byte IDX tensor of rank 1 (labels).
pub const IDX_LABELS: u32 = 0x0000_0801;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    GmmRing,
    Checkerboard,
    Gaussian,
    Images,
    Labels,
}

/// A batch of samples, one per row.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Mat,
    pub kind: DatasetKind,
    /// Image side lengths for [`DatasetKind::Images`].
    pub image_shape: Option<(usize, usize)>,
}

impl Dataset {
    pub fn new(samples: Mat, kind: DatasetKind) -> Result<Self> {
        crate::error::ensure_finite(samples.iter(), || format!("{kind:?} samples"))?;
        Ok(Self {
            samples,
            kind,
            image_shape: None,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.samples.ncols()
    }

    /// Per-dimension sample mean.
    pub fn mean(&self) -> Vec<f64> {
        let n = self.len().max(1) as f64;
        (0..self.dim())
            .map(|j| self.samples.column(j).sum() / n)
            .collect()
    }

    /// Pooled standard deviation: the square root of the per-dimension
    /// variance averaged over dimensions.
    pub fn pooled_std(&self) -> f64 {
        let n = self.len();
        if n < 2 {
            return 0.0;
        }
        let mean = self.mean();
        let total: f64 = self
            .samples
            .rows()
            .into_iter()
            .map(|r| r.iter().zip(&mean).map(|(x, m)| (x - m).powi(2)).sum::<f64>())
            .sum();
        (total / ((n - 1) * self.dim()) as f64).sqrt()
    }

    /// Mean Euclidean distance to the dataset mean: the error of a
    /// reconstruction that ignores its input.
    pub fn mean_baseline_l2(&self) -> f64 {
        let mean = self.mean();
        let n = self.len().max(1) as f64;
        self.samples
            .rows()
            .into_iter()
            .map(|r| {
                r.iter()
                    .zip(&mean)
                    .map(|(x, m)| (x - m).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .sum::<f64>()
            / n
    }

    /// Splits off the last `n_test` rows.
    pub fn split(&self, n_test: usize) -> Result<(Dataset, Dataset)> {
        if n_test >= self.len() {
            return Err(Error::Config(format!(
                "cannot hold out {n_test} of {} samples",
                self.len()
            )));
        }
        let cut = self.len() - n_test;
        let part = |a: usize, b: usize| Dataset {
            samples: self.samples.slice(ndarray::s![a..b, ..]).to_owned(),
            kind: self.kind,
            image_shape: self.image_shape,
        };
        Ok((part(0, cut), part(cut, self.len())))
    }

    /// Rows `start..start + n`, wrapping around.
    pub fn batch(&self, start: usize, n: usize) -> Mat {
        let len = self.len();
        Mat::from_shape_fn((n, self.dim()), |(i, j)| {
            self.samples[[(start + i) % len, j]]
        })
    }
}

/// Equal-weight mixture of `modes` isotropic 2D Gaussians with centers on a
/// circle of the given radius.
pub fn gmm_ring<R: Rng + ?Sized>(
    n: usize,
    modes: usize,
    radius: f64,
    std: f64,
    rng: &mut R,
) -> Result<Dataset> {
    if modes == 0 {
        return Err(Error::Config("a mixture needs at least one mode".into()));
    }
    if !(std > 0.0) || !(radius >= 0.0) {
        return Err(Error::Config(format!(
            "mixture needs std > 0 and radius >= 0, got std {std}, radius {radius}"
        )));
    }
    let eps = standard_normal(rng, n, 2);
    let mut x = Mat::zeros((n, 2));
    for i in 0..n {
        let m = rng.random_range(0..modes);
        let angle = 2.0 * PI * m as f64 / modes as f64;
        x[[i, 0]] = radius * angle.cos() + std * eps[[i, 0]];
        x[[i, 1]] = radius * angle.sin() + std * eps[[i, 1]];
    }
    Dataset::new(x, DatasetKind::GmmRing)
}

/// Uniform over the cells of a `squares × squares` board centered at the
/// origin whose integer corner coordinates have an even sum.
pub fn checkerboard<R: Rng + ?Sized>(n: usize, squares: usize, rng: &mut R) -> Result<Dataset> {
    if squares < 2 {
        return Err(Error::Config(format!(
            "a checkerboard needs at least 2 squares per side, got {squares}"
        )));
    }
    let half = squares as i64 / 2;
    let lo = -half;
    let cells: Vec<(i64, i64)> = (lo..lo + squares as i64)
        .flat_map(|i| (lo..lo + squares as i64).map(move |j| (i, j)))
        .filter(|(i, j)| (i + j).rem_euclid(2) == 0)
        .collect();
    let mut x = Mat::zeros((n, 2));
    for i in 0..n {
        let (cx, cy) = cells[rng.random_range(0..cells.len())];
        x[[i, 0]] = cx as f64 + rng.random::<f64>();
        x[[i, 1]] = cy as f64 + rng.random::<f64>();
    }
    Dataset::new(x, DatasetKind::Checkerboard)
}

/// `n` draws of `N(0, I_dim)`.
pub fn gaussian<R: Rng + ?Sized>(n: usize, dim: usize, rng: &mut R) -> Result<Dataset> {
    if dim == 0 {
        return Err(Error::Config("dimension must be positive".into()));
    }
    Dataset::new(standard_normal(rng, n, dim), DatasetKind::Gaussian)
}

/// A raw unsigned-byte IDX tensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxTensor {
    pub dims: Vec<u32>,
    pub data: Vec<u8>,
}

impl IdxTensor {
    pub fn magic(&self) -> u32 {
        0x0800 | self.dims.len() as u32
    }
}

/// Parses an unsigned-byte IDX tensor of rank 1 or 3.
pub fn idx_decode(bytes: &[u8]) -> Result<IdxTensor> {
    let mut cur = Cursor::new(bytes);
    let magic = cur
        .read_u32::<BigEndian>()
        .map_err(|_| Error::Format(format!("IDX header truncated at {} bytes", bytes.len())))?;
    let rank = match magic {
        IDX_IMAGES => 3,
        IDX_LABELS => 1,
        other => {
            return Err(Error::Format(format!(
                "bad IDX magic: expected 0x{IDX_IMAGES:08x} or 0x{IDX_LABELS:08x}, got 0x{other:08x}"
            )))
        }
    };
    let mut dims = Vec::with_capacity(rank);
    for k in 0..rank {
        dims.push(cur.read_u32::<BigEndian>().map_err(|_| {
            Error::Format(format!("IDX header truncated while reading dimension {k}"))
        })?);
    }
    let expected: usize = dims.iter().map(|&d| d as usize).product();
    let mut data = Vec::with_capacity(expected);
    cur.read_to_end(&mut data)?;
    if data.len() != expected {
        return Err(Error::Format(format!(
            "IDX payload length: expected {expected} bytes for dims {dims:?}, got {}",
            data.len()
        )));
    }
    Ok(IdxTensor { dims, data })
}

pub fn idx_encode(t: &IdxTensor) -> Result<Vec<u8>> {
    let expected: usize = t.dims.iter().map(|&d| d as usize).product();
    if !(t.dims.len() == 1 || t.dims.len() == 3) || expected != t.data.len() {
        return Err(Error::Format(format!(
            "IDX tensor with dims {:?} cannot hold {} bytes",
            t.dims,
            t.data.len()
        )));
    }
    let mut out = Vec::with_capacity(4 + 4 * t.dims.len() + t.data.len());
    out.write_u32::<BigEndian>(t.magic())?;
    for &d in &t.dims {
        out.write_u32::<BigEndian>(d)?;
    }
    out.extend_from_slice(&t.data);
    Ok(out)
}

pub fn idx_write(path: &Path, t: &IdxTensor) -> Result<()> {
    std::fs::write(path, idx_encode(t)?)?;
    Ok(())
}

/// Images become rows of pixels scaled to `[0, 1]`; labels become a single
/// column of raw class values.
pub fn idx_to_dataset(t: &IdxTensor) -> Result<Dataset> {
    match t.dims.len() {
        3 => {
            let (n, h, w) = (t.dims[0] as usize, t.dims[1] as usize, t.dims[2] as usize);
            let samples = Mat::from_shape_fn((n, h * w), |(i, j)| {
                f64::from(t.data[i * h * w + j]) / 255.0
            });
            let mut ds = Dataset::new(samples, DatasetKind::Images)?;
            ds.image_shape = Some((h, w));
            Ok(ds)
        }
        _ => {
            let samples = Mat::from_shape_fn((t.data.len(), 1), |(i, _)| f64::from(t.data[i]));
            Dataset::new(samples, DatasetKind::Labels)
        }
    }
}

pub fn idx_load(path: &Path) -> Result<Dataset> {
    let bytes = std::fs::read(path)?;
    idx_to_dataset(&idx_decode(&bytes)?)
}

/// Area-averaging resample of square-pixel images to `(h, w)`.
pub fn resize_images(ds: &Dataset, h: usize, w: usize) -> Result<Dataset> {
    let (sh, sw) = ds
        .image_shape
        .ok_or_else(|| Error::Config("resize needs an image dataset".into()))?;
    if h == 0 || w == 0 {
        return Err(Error::Config("target image size must be positive".into()));
    }
    // fractional overlap of source cell [i, i+1) with target cell [o, o+1)
    // after scaling the source axis to the target length
    let weights = |src: usize, dst: usize| -> Vec<Vec<(usize, f64)>> {
        let scale = dst as f64 / src as f64;
        (0..dst)
            .map(|o| {
                (0..src)
                    .filter_map(|i| {
                        let a = (i as f64 * scale).max(o as f64);
                        let b = ((i + 1) as f64 * scale).min((o + 1) as f64);
                        (b > a).then_some((i, b - a))
                    })
                    .collect()
            })
            .collect()
    };
    let (wy, wx) = (weights(sh, h), weights(sw, w));
    let mut out = Mat::zeros((ds.len(), h * w));
    for n in 0..ds.len() {
        for (oy, ry) in wy.iter().enumerate() {
            for (ox, rx) in wx.iter().enumerate() {
                let mut acc = 0.0;
                for &(iy, fy) in ry {
                    for &(ix, fx) in rx {
                        acc += fy * fx * ds.samples[[n, iy * sw + ix]];
                    }
                }
                out[[n, oy * w + ox]] = acc;
            }
        }
    }
    Ok(Dataset {
        samples: out,
        kind: ds.kind,
        image_shape: Some((h, w)),
    })
}
