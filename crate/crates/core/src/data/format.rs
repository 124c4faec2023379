//! Binary dataset files: a little-endian header followed by one record per
//! sample (segmentation map as `u16`, image as `f32`, both row-major).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Dataset, SyntheticSample};
use crate::error::{Error, Result};
use crate::head::build_multilabel_target;

pub const MAGIC: &[u8; 5] = b"RSEG1";
pub const FORMAT_VERSION: u16 = 1;
const HEADER_LEN: usize = 5 + 2 + 4 + 4 + 2 + 2 + 2;

pub fn write_dataset<W: Write>(dataset: &Dataset, mut out: W) -> Result<()> {
    let narrow = |v: usize, what: &str| {
        u16::try_from(v).map_err(|_| Error::Format(format!("{what} {v} does not fit in 16 bits")))
    };
    let k = u32::try_from(dataset.num_classes).map_err(|_| Error::Format("too many classes".into()))?;
    let n = u32::try_from(dataset.len()).map_err(|_| Error::Format("too many samples".into()))?;
    out.write_all(MAGIC)?;
    out.write_all(&FORMAT_VERSION.to_le_bytes())?;
    out.write_all(&k.to_le_bytes())?;
    out.write_all(&n.to_le_bytes())?;
    out.write_all(&narrow(dataset.channels, "channel count")?.to_le_bytes())?;
    out.write_all(&narrow(dataset.height, "height")?.to_le_bytes())?;
    out.write_all(&narrow(dataset.width, "width")?.to_le_bytes())?;
    let pixels = dataset.pixels();
    let mut buf = Vec::new();
    for (i, s) in dataset.samples.iter().enumerate() {
        if s.seg_map.len() != pixels || s.image.len() != pixels * dataset.channels {
            return Err(Error::Format(format!("sample {i} does not match the dataset extents")));
        }
        buf.clear();
        buf.extend(s.seg_map.iter().flat_map(|v| v.to_le_bytes()));
        buf.extend(s.image.iter().flat_map(|v| v.to_le_bytes()));
        out.write_all(&buf)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_dataset<R: Read>(mut input: R) -> Result<Dataset> {
    let mut header = [0u8; HEADER_LEN];
    input
        .read_exact(&mut header)
        .map_err(|_| Error::Format("truncated header".into()))?;
    if &header[..5] != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let u16_at = |i: usize| u16::from_le_bytes([header[i], header[i + 1]]);
    let u32_at = |i: usize| u32::from_le_bytes([header[i], header[i + 1], header[i + 2], header[i + 3]]);
    let version = u16_at(5);
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let num_classes = u32_at(7) as usize;
    let n = u32_at(11) as usize;
    let channels = u16_at(15) as usize;
    let height = u16_at(17) as usize;
    let width = u16_at(19) as usize;
    if num_classes == 0 || num_classes > u16::MAX as usize {
        return Err(Error::Format(format!("class count {num_classes} out of range")));
    }
    let pixels = height * width;
    let record = pixels * 2 + pixels * channels * 4;
    let ignore = num_classes as u16;

    let mut samples = Vec::with_capacity(n.min(1 << 16));
    let mut buf = vec![0u8; record];
    for i in 0..n {
        input
            .read_exact(&mut buf)
            .map_err(|_| Error::Format(format!("truncated record {i} of {n}")))?;
        let (seg_bytes, img_bytes) = buf.split_at(pixels * 2);
        let seg_map: Vec<u16> = seg_bytes.chunks_exact(2).map(|b| u16::from_le_bytes([b[0], b[1]])).collect();
        let image: Vec<f32> = img_bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let multilabel = build_multilabel_target(&seg_map, num_classes, ignore)
            .map_err(|e| Error::Format(format!("record {i}: {e}")))?;
        samples.push(SyntheticSample {
            image,
            seg_map,
            multilabel,
        });
    }
    let mut extra = [0u8; 1];
    if input.read(&mut extra)? != 0 {
        return Err(Error::Format("trailing bytes after the last record".into()));
    }
    Ok(Dataset {
        num_classes,
        channels,
        height,
        width,
        samples,
    })
}

pub fn write_dataset_file(dataset: &Dataset, path: &Path) -> Result<()> {
    write_dataset(dataset, BufWriter::new(File::create(path)?))
}

pub fn read_dataset_file(path: &Path) -> Result<Dataset> {
    read_dataset(BufReader::new(File::open(path)?))
}

/// Exact byte length of a file holding `n` samples of the given extents.
pub fn file_len(n: usize, channels: usize, height: usize, width: usize) -> usize {
    HEADER_LEN + n * height * width * (2 + 4 * channels)
}
