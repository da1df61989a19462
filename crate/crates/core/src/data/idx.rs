//! IDX container reader/writer (the MNIST-family format).
//!
//! Images use magic `0x00000803` (`n, rows, cols`), or `0x00000804`
//! (`n, channels, rows, cols`) for multi-channel data. Labels use `0x00000801`.
//! All header integers are big-endian `u32`.

use std::path::Path;

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IMAGES4_MAGIC: u32 = 0x0000_0804;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Cursor<'a> {
    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.bytes.len() as u64,
                message: format!(
                    "{} truncated: needed {n} bytes at offset {}, file has {}",
                    self.what,
                    self.pos,
                    self.bytes.len()
                ),
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
}

/// Parses image bytes into `(n, channels, rows, cols, pixels)`.
pub fn parse_images(bytes: &[u8]) -> Result<(usize, usize, usize, usize, Vec<u8>)> {
    let mut c = Cursor { bytes, pos: 0, what: "image file" };
    let magic = c.u32()?;
    let (n, ch) = match magic {
        IMAGES_MAGIC => (c.u32()? as usize, 1),
        IMAGES4_MAGIC => {
            let n = c.u32()? as usize;
            (n, c.u32()? as usize)
        }
        other => {
            return Err(Error::Format {
                offset: 0,
                message: format!("bad image magic {other:#010x}, expected {IMAGES_MAGIC:#010x}"),
            })
        }
    };
    let rows = c.u32()? as usize;
    let cols = c.u32()? as usize;
    let pixels = c.take(n * ch * rows * cols)?.to_vec();
    Ok((n, ch, rows, cols, pixels))
}

pub fn parse_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let mut c = Cursor { bytes, pos: 0, what: "label file" };
    let magic = c.u32()?;
    if magic != LABELS_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: format!("bad label magic {magic:#010x}, expected {LABELS_MAGIC:#010x}"),
        });
    }
    let n = c.u32()? as usize;
    Ok(c.take(n)?.to_vec())
}

/// Reads an image/label IDX pair; pixels are scaled by 1/255.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledDataset> {
    let img = std::fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let lab = std::fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;
    let (n, ch, rows, cols, pixels) = parse_images(&img)?;
    let labels = parse_labels(&lab)?;
    if labels.len() != n {
        return Err(Error::Format {
            offset: 4,
            message: format!(
                "{} holds {n} images but {} holds {} labels",
                images_path.display(),
                labels_path.display(),
                labels.len()
            ),
        });
    }
    if rows != cols || n == 0 {
        return Err(Error::Format {
            offset: 8,
            message: format!("expected a nonempty set of square images, got {n} of {rows}x{cols}"),
        });
    }
    let data = pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
    let features = Tensor::new(vec![n, ch, rows, cols], data)?;
    let labels: Vec<usize> = labels.into_iter().map(usize::from).collect();
    let classes = labels.iter().max().map_or(1, |m| m + 1);
    LabeledDataset::new(features, labels, classes)
}

/// Writes a dataset as an IDX pair, quantizing pixels to `round(255·v)`.
pub fn write_idx(ds: &LabeledDataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    let &[n, ch, rows, cols] = ds.features().shape() else { unreachable!() };
    let mut img = Vec::with_capacity(20 + ds.features().len());
    if ch == 1 {
        img.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
        img.extend_from_slice(&(n as u32).to_be_bytes());
    } else {
        img.extend_from_slice(&IMAGES4_MAGIC.to_be_bytes());
        img.extend_from_slice(&(n as u32).to_be_bytes());
        img.extend_from_slice(&(ch as u32).to_be_bytes());
    }
    img.extend_from_slice(&(rows as u32).to_be_bytes());
    img.extend_from_slice(&(cols as u32).to_be_bytes());
    img.extend(ds.features().data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));

    let mut lab = Vec::with_capacity(8 + n);
    lab.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(n as u32).to_be_bytes());
    for &y in ds.labels() {
        let b = u8::try_from(y).map_err(|_| Error::Input(format!("label {y} does not fit in a byte")))?;
        lab.push(b);
    }
    std::fs::write(images_path, img).map_err(|e| Error::io(images_path, e))?;
    std::fs::write(labels_path, lab).map_err(|e| Error::io(labels_path, e))?;
    Ok(())
}
