//! On-disk dataset layout: `header.json` plus one entry per clip, either a raw
//! little-endian `f32` file or a directory of 8-bit PNG frames.

use std::fs;
use std::path::Path;

use image::{GrayImage, Luma};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::Video;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Encoding {
    RawF32,
    Png,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    #[serde(rename = "T")]
    pub t: usize,
    #[serde(rename = "H")]
    pub h: usize,
    #[serde(rename = "W")]
    pub w: usize,
    pub channels: usize,
    pub count: usize,
    pub seed: u64,
    pub encoding: Encoding,
    pub config_hash: String,
    pub clip_seeds: Vec<u64>,
}

fn clip_name(i: usize) -> String {
    format!("clip_{i:05}")
}

/// Writes `videos` under `dir`, creating it if needed.
pub fn write_dataset(dir: &Path, videos: &[Video], seed: u64, encoding: Encoding) -> Result<DatasetHeader> {
    let first = videos
        .first()
        .ok_or_else(|| Error::Precondition("cannot write an empty dataset".into()))?;
    let [c, h, w] = first.frame_shape();
    let t = first.len();
    if let Some(v) = videos.iter().find(|v| v.frames.shape() != first.frames.shape()) {
        return Err(Error::Shape(format!(
            "clip shape {:?} differs from {:?}",
            v.frames.shape(),
            first.frames.shape()
        )));
    }
    if encoding == Encoding::Png && c != 1 {
        return Err(Error::Precondition("PNG clips must be single-channel".into()));
    }
    fs::create_dir_all(dir)?;
    for (i, v) in videos.iter().enumerate() {
        match encoding {
            Encoding::RawF32 => {
                let bytes: Vec<u8> = v.frames.data().iter().flat_map(|x| x.to_le_bytes()).collect();
                fs::write(dir.join(format!("{}.f32", clip_name(i))), bytes)?;
            }
            Encoding::Png => {
                let sub = dir.join(clip_name(i));
                fs::create_dir_all(&sub)?;
                for f in 0..t {
                    let frame = v.frames.index_outer(f);
                    let img = GrayImage::from_fn(w as u32, h as u32, |x, y| {
                        Luma([(frame.data()[y as usize * w + x as usize] * 255.0).round() as u8])
                    });
                    img.save(sub.join(format!("frame_{f:03}.png")))?;
                }
            }
        }
    }
    let header = DatasetHeader {
        t,
        h,
        w,
        channels: c,
        count: videos.len(),
        seed,
        encoding,
        config_hash: first.config_hash.clone(),
        clip_seeds: videos.iter().map(|v| v.seed).collect(),
    };
    fs::write(dir.join("header.json"), serde_json::to_vec_pretty(&header)?)?;
    Ok(header)
}

/// Reads a dataset written by [`write_dataset`].
pub fn read_dataset(dir: &Path) -> Result<(DatasetHeader, Vec<Video>)> {
    let header: DatasetHeader = serde_json::from_slice(&fs::read(dir.join("header.json"))?)?;
    if header.clip_seeds.len() != header.count {
        return Err(Error::Length {
            expected: header.count,
            found: header.clip_seeds.len(),
        });
    }
    let shape = [header.t, header.channels, header.h, header.w];
    let n: usize = shape.iter().product();
    let mut videos = Vec::with_capacity(header.count);
    for (i, &seed) in header.clip_seeds.iter().enumerate() {
        let data: Vec<f32> = match header.encoding {
            Encoding::RawF32 => {
                let bytes = fs::read(dir.join(format!("{}.f32", clip_name(i))))?;
                if bytes.len() != 4 * n {
                    return Err(Error::Length {
                        expected: 4 * n,
                        found: bytes.len(),
                    });
                }
                bytes
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                    .collect()
            }
            Encoding::Png => {
                let mut data = Vec::with_capacity(n);
                for f in 0..header.t {
                    let path = dir.join(clip_name(i)).join(format!("frame_{f:03}.png"));
                    let img = image::open(&path)?.into_luma8();
                    if (img.width() as usize, img.height() as usize) != (header.w, header.h) {
                        return Err(Error::Shape(format!(
                            "{} is {}×{}, header says {}×{}",
                            path.display(),
                            img.height(),
                            img.width(),
                            header.h,
                            header.w
                        )));
                    }
                    data.extend(img.into_raw().into_iter().map(|b| b as f32 / 255.0));
                }
                data
            }
        };
        videos.push(Video::new(Tensor::new(&shape, data)?, seed, header.config_hash.clone())?);
    }
    Ok((header, videos))
}

/// SHA-256 over every clip's frame bytes, in order.
pub fn dataset_hash(videos: &[Video]) -> String {
    let mut h = Sha256::new();
    for v in videos {
        for x in v.frames.data() {
            h.update(x.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}
