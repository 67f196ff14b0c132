//! IDX image/label file loader (the MNIST container format).
//!
//! Both files are big-endian. Images carry magic 0x00000803 followed by
//! count, rows, cols and then raw u8 pixels; labels carry magic 0x00000801
//! followed by count and raw u8 labels. Pixels land in [0, 1] as value/255.

use std::path::Path;

use crate::numerics::Mat;
use crate::{Error, Result};

use super::Dataset;

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

struct IdxReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    file: String,
}

impl<'a> IdxReader<'a> {
    fn new(bytes: &'a [u8], role: &str, path: &Path) -> Self {
        Self {
            bytes,
            pos: 0,
            file: format!("{role} file {}", path.display()),
        }
    }

    fn err(&self, offset: usize, msg: impl Into<String>) -> Error {
        Error::Idx {
            file: self.file.clone(),
            offset,
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err(
                self.bytes.len(),
                format!(
                    "truncated reading {what}: need {n} bytes at offset {}, have {}",
                    self.pos,
                    self.bytes.len() - self.pos
                ),
            ));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u32_be(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Load an IDX image file and its companion label file into one dataset.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let image_bytes = std::fs::read(images_path)?;
    let label_bytes = std::fs::read(labels_path)?;

    let mut ir = IdxReader::new(&image_bytes, "images", images_path);
    let magic = ir.u32_be("magic")?;
    if magic != IMAGE_MAGIC {
        return Err(ir.err(0, format!("bad magic 0x{magic:08x}, expected 0x{IMAGE_MAGIC:08x}")));
    }
    let count = ir.u32_be("image count")? as usize;
    let rows = ir.u32_be("row count")? as usize;
    let cols = ir.u32_be("column count")? as usize;
    let pixels = ir.take(count * rows * cols, "pixel data")?;
    if ir.pos != image_bytes.len() {
        return Err(ir.err(ir.pos, format!("{} trailing bytes", image_bytes.len() - ir.pos)));
    }

    let mut lr = IdxReader::new(&label_bytes, "labels", labels_path);
    let magic = lr.u32_be("magic")?;
    if magic != LABEL_MAGIC {
        return Err(lr.err(0, format!("bad magic 0x{magic:08x}, expected 0x{LABEL_MAGIC:08x}")));
    }
    let label_count = lr.u32_be("label count")? as usize;
    if label_count != count {
        return Err(lr.err(
            4,
            format!("label count {label_count} does not match image count {count}"),
        ));
    }
    let raw_labels = lr.take(count, "label data")?;
    if lr.pos != label_bytes.len() {
        return Err(lr.err(lr.pos, format!("{} trailing bytes", label_bytes.len() - lr.pos)));
    }

    let dim = rows * cols;
    let features = Mat::from_vec(
        count,
        dim,
        pixels.iter().map(|&p| f64::from(p) / 255.0).collect(),
    )?;
    let labels = raw_labels.iter().map(|&l| l as usize).collect();
    Dataset::new(features, labels, "idx")
}
