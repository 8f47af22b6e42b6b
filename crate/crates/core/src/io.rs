//! Binary file formats for point clouds and range images.
//!
//! Point clouds are bare little-endian `f32` quadruples `(x, y, z, intensity)`,
//! the KITTI `.bin` layout. Range images start with the magic `OLRI`, then
//! `u32` height, width, channels, then row-major channel-fastest `f32` values.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{MaskStack, Point, PointCloud, RangeImage};

pub const RANGE_MAGIC: &[u8; 4] = b"OLRI";

pub fn encode_point_cloud(cloud: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(cloud.len() * 16);
    for p in &cloud.points {
        for v in [p.x, p.y, p.z, p.intensity] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode_point_cloud(bytes: &[u8]) -> Result<PointCloud> {
    if !bytes.len().is_multiple_of(16) {
        return Err(Error::Format(format!(
            "point cloud byte length {} is not a multiple of 16",
            bytes.len()
        )));
    }
    let points = bytes
        .chunks_exact(16)
        .map(|rec| {
            let f = |i: usize| f32::from_le_bytes(rec[4 * i..4 * i + 4].try_into().unwrap()) as f64;
            Point::new(f(0), f(1), f(2), f(3))
        })
        .collect();
    Ok(PointCloud::new(points))
}

pub fn write_point_cloud(path: &Path, cloud: &PointCloud) -> Result<()> {
    fs::write(path, encode_point_cloud(cloud))?;
    Ok(())
}

pub fn read_point_cloud(path: &Path) -> Result<PointCloud> {
    decode_point_cloud(&fs::read(path)?)
}

/// A raw `H×W×C` grid as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct RangeTensor {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

pub fn encode_range_tensor(t: &RangeTensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + t.data.len() * 4);
    out.extend_from_slice(RANGE_MAGIC);
    for d in [t.height, t.width, t.channels] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in &t.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_range_tensor(bytes: &[u8]) -> Result<RangeTensor> {
    let mut r = bytes;
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Format("range image truncated before header".into()))?;
    if &magic != RANGE_MAGIC {
        return Err(Error::Format("range image magic mismatch".into()));
    }
    let mut dims = [0usize; 3];
    for d in &mut dims {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)
            .map_err(|_| Error::Format("range image header truncated".into()))?;
        *d = u32::from_le_bytes(b) as usize;
    }
    let [height, width, channels] = dims;
    let count = height * width * channels;
    if r.len() != count * 4 {
        return Err(Error::Format(format!(
            "range image payload is {} bytes, expected {}",
            r.len(),
            count * 4
        )));
    }
    let data = r
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(RangeTensor {
        height,
        width,
        channels,
        data,
    })
}

impl From<&RangeImage> for RangeTensor {
    fn from(img: &RangeImage) -> Self {
        Self {
            height: img.height,
            width: img.width,
            channels: RangeImage::CHANNELS,
            data: img.data.iter().map(|&v| v as f32).collect(),
        }
    }
}

impl TryFrom<RangeTensor> for RangeImage {
    type Error = Error;

    fn try_from(t: RangeTensor) -> Result<Self> {
        if t.channels != RangeImage::CHANNELS {
            return Err(Error::Format(format!(
                "range image has {} channels, expected 2",
                t.channels
            )));
        }
        Ok(RangeImage {
            height: t.height,
            width: t.width,
            data: t.data.into_iter().map(f64::from).collect(),
        })
    }
}

/// Stores a mask stack as a `C`-channel range tensor of 0/1 values.
pub fn mask_to_tensor(masks: &MaskStack) -> RangeTensor {
    let (h, w, c) = (masks.height, masks.width, masks.channels());
    let mut data = vec![0f32; h * w * c];
    for ch in 0..c {
        for v in 0..h {
            for u in 0..w {
                data[(v * w + u) * c + ch] = masks.get(ch, v, u) as f32;
            }
        }
    }
    RangeTensor {
        height: h,
        width: w,
        channels: c,
        data,
    }
}

pub fn mask_from_tensor(t: &RangeTensor, categories: Vec<String>) -> Result<MaskStack> {
    if categories.len() != t.channels {
        return Err(Error::Format(format!(
            "mask has {} channels but {} categories",
            t.channels,
            categories.len()
        )));
    }
    let mut masks = MaskStack::zeros(t.height, t.width, categories)?;
    for v in 0..t.height {
        for u in 0..t.width {
            for ch in 0..t.channels {
                let value = t.data[(v * t.width + u) * t.channels + ch];
                if value != 0.0 && value != 1.0 {
                    return Err(Error::Format(format!("mask value {value} is not binary")));
                }
                masks.set(ch, v, u, value as u8);
            }
        }
    }
    Ok(masks)
}

pub fn write_range_tensor(path: &Path, t: &RangeTensor) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_range_tensor(t))?;
    Ok(())
}

pub fn read_range_tensor(path: &Path) -> Result<RangeTensor> {
    decode_range_tensor(&fs::read(path)?)
}

pub fn write_range_image(path: &Path, img: &RangeImage) -> Result<()> {
    write_range_tensor(path, &RangeTensor::from(img))
}

pub fn read_range_image(path: &Path) -> Result<RangeImage> {
    read_range_tensor(path)?.try_into()
}
