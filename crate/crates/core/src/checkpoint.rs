//! Binary checkpoint format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! offset 0   magic  b"MCH1"
//! offset 4   u32    feature dim d
//! offset 8   u32    classes C
//! offset 12  u32    sub-centers per class K
//! offset 16  u8     collapsed flag (1 = inference-only, no sigmas)
//! offset 17  f64[]  W, d*C entries, row-major
//!            f64[]  log_sigma, d*C entries, row-major (absent when collapsed)
//!            ----   optional backbone section ----
//!            u32    layer count (>= 1)
//!            per layer: u32 in, u32 out, f64[in*out] weights row-major,
//!                       f64[out] biases
//! ```
//!
//! The file ends exactly there; trailing bytes are rejected. Writes go to a
//! sibling `.tmp` file first and rename into place, so a crash never leaves a
//! half-written checkpoint under the real name.

use std::fs;
use std::path::{Path, PathBuf};

use crate::backbone::{Layer, MlpParams};
use crate::head::{HeadConfig, HeadParams};
use crate::numerics::Mat;
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"MCH1";

/// Everything a saved model contains. `log_sigma` is present exactly when
/// the checkpoint still carries training state; a collapsed checkpoint is the
/// plain linear classifier used at inference.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub sub_centers: usize,
    /// `d x C` class centers.
    pub w: Mat,
    /// `d x C` log-sigmas, `None` once collapsed.
    pub log_sigma: Option<Mat>,
    pub backbone: Option<MlpParams>,
}

impl Checkpoint {
    pub fn from_training_state(
        params: &HeadParams,
        cfg: &HeadConfig,
        backbone: Option<&MlpParams>,
    ) -> Self {
        Self {
            sub_centers: cfg.sub_centers,
            w: params.w.clone(),
            log_sigma: Some(params.log_sigma.clone()),
            backbone: backbone.cloned(),
        }
    }

    /// Drop the sigmas, keeping only what inference needs.
    pub fn collapse(&self) -> Self {
        Self {
            sub_centers: self.sub_centers,
            w: self.w.clone(),
            log_sigma: None,
            backbone: self.backbone.clone(),
        }
    }

    pub fn is_collapsed(&self) -> bool {
        self.log_sigma.is_none()
    }

    pub fn feature_dim(&self) -> usize {
        self.w.rows()
    }

    pub fn num_classes(&self) -> usize {
        self.w.cols()
    }

    /// Rebuild head parameters from a non-collapsed checkpoint.
    pub fn head_params(&self) -> Result<HeadParams> {
        let log_sigma = self.log_sigma.as_ref().ok_or_else(|| {
            Error::InvalidConfig(
                "checkpoint is collapsed and cannot resume training".into(),
            )
        })?;
        HeadParams::from_parts(self.w.clone(), log_sigma.clone())
    }

    fn validate(&self) -> Result<()> {
        if self.w.rows() == 0 || self.w.cols() < 2 {
            return Err(Error::InvalidConfig(format!(
                "checkpoint weights are {}x{}, need at least one dimension and two classes",
                self.w.rows(),
                self.w.cols()
            )));
        }
        if let Some(ls) = &self.log_sigma {
            if ls.rows() != self.w.rows() || ls.cols() != self.w.cols() {
                return Err(Error::InvalidConfig(format!(
                    "log_sigma is {}x{} but W is {}x{}",
                    ls.rows(),
                    ls.cols(),
                    self.w.rows(),
                    self.w.cols()
                )));
            }
        }
        if let Some(bb) = &self.backbone {
            if bb.output_dim() != self.w.rows() {
                return Err(Error::InvalidConfig(format!(
                    "backbone produces {} features but the head expects {}",
                    bb.output_dim(),
                    self.w.rows()
                )));
            }
        }
        Ok(())
    }
}

fn push_u32(buf: &mut Vec<u8>, path: &Path, what: &str, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint {
        path: path.display().to_string(),
        offset: buf.len(),
        msg: format!("{what} {v} does not fit the format's 32-bit field"),
    })?;
    buf.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn push_mat(buf: &mut Vec<u8>, m: &Mat) {
    for v in m.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serialize and atomically write a checkpoint.
pub fn save(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    ckpt.validate()?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    push_u32(&mut buf, path, "feature dim", ckpt.feature_dim())?;
    push_u32(&mut buf, path, "class count", ckpt.num_classes())?;
    push_u32(&mut buf, path, "sub-center count", ckpt.sub_centers)?;
    buf.push(ckpt.is_collapsed() as u8);
    push_mat(&mut buf, &ckpt.w);
    if let Some(ls) = &ckpt.log_sigma {
        push_mat(&mut buf, ls);
    }
    if let Some(bb) = &ckpt.backbone {
        push_u32(&mut buf, path, "layer count", bb.layers.len())?;
        for layer in &bb.layers {
            push_u32(&mut buf, path, "layer input width", layer.in_dim())?;
            push_u32(&mut buf, path, "layer output width", layer.out_dim())?;
            push_mat(&mut buf, &layer.w);
            for b in &layer.b {
                buf.extend_from_slice(&b.to_le_bytes());
            }
        }
    }
    let tmp = sibling_tmp(path);
    fs::write(&tmp, &buf)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn sibling_tmp(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".tmp");
    path.with_file_name(name)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn err(&self, msg: String) -> Error {
        Error::Checkpoint {
            path: self.path.display().to_string(),
            offset: self.pos,
            msg,
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err(format!(
                "file truncated reading {what}: need {n} bytes, {} remain",
                self.bytes.len() - self.pos
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn mat(&mut self, rows: usize, cols: usize, what: &str) -> Result<Mat> {
        let start = self.pos;
        let b = self.take(rows * cols * 8, what)?;
        let mut data = Vec::with_capacity(rows * cols);
        for (i, chunk) in b.chunks_exact(8).enumerate() {
            let v = f64::from_le_bytes(chunk.try_into().expect("chunk of 8"));
            if !v.is_finite() {
                return Err(Error::Checkpoint {
                    path: self.path.display().to_string(),
                    offset: (start + i * 8),
                    msg: format!("{what} contains a non-finite value"),
                });
            }
            data.push(v);
        }
        Mat::from_vec(rows, cols, data).map_err(|e| self.err(e.to_string()))
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

/// Read and validate a checkpoint. Wrong magic, truncation, non-finite
/// values, inconsistent layer widths, and trailing bytes are all rejected
/// with the byte offset of the problem.
pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    let mut cur = Cursor {
        bytes: &bytes,
        pos: 0,
        path,
    };
    let magic = cur.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Checkpoint {
            path: path.display().to_string(),
            offset: 0,
            msg: format!("bad magic {magic:?}, expected {MAGIC:?}"),
        });
    }
    let d = cur.u32("feature dim")? as usize;
    let c = cur.u32("class count")? as usize;
    let k = cur.u32("sub-center count")? as usize;
    if d == 0 || c < 2 {
        return Err(Error::Checkpoint {
            path: path.display().to_string(),
            offset: 4,
            msg: format!("invalid dimensions {d}x{c}"),
        });
    }
    let flag_off = cur.pos;
    let collapsed = match cur.take(1, "collapsed flag")?[0] {
        0 => false,
        1 => true,
        other => {
            return Err(Error::Checkpoint {
                path: path.display().to_string(),
                offset: flag_off,
                msg: format!("collapsed flag must be 0 or 1, got {other}"),
            })
        }
    };
    let w = cur.mat(d, c, "class centers")?;
    let log_sigma = if collapsed {
        None
    } else {
        Some(cur.mat(d, c, "log-sigmas")?)
    };
    let backbone = if cur.done() {
        None
    } else {
        let n_layers = cur.u32("backbone layer count")? as usize;
        if n_layers == 0 {
            return Err(Error::Checkpoint {
                path: path.display().to_string(),
                offset: (cur.pos - 4),
                msg: "backbone section with zero layers".into(),
            });
        }
        let mut layers = Vec::with_capacity(n_layers);
        for li in 0..n_layers {
            let rows = cur.u32("layer input width")? as usize;
            let cols = cur.u32("layer output width")? as usize;
            if rows == 0 || cols == 0 {
                return Err(Error::Checkpoint {
                    path: path.display().to_string(),
                    offset: (cur.pos - 8),
                    msg: format!("layer {li} has zero width ({rows}x{cols})"),
                });
            }
            let w = cur.mat(rows, cols, "layer weights")?;
            let b_start = cur.pos;
            let b_bytes = cur.take(cols * 8, "layer biases")?;
            let mut b = Vec::with_capacity(cols);
            for (i, chunk) in b_bytes.chunks_exact(8).enumerate() {
                let v = f64::from_le_bytes(chunk.try_into().expect("chunk of 8"));
                if !v.is_finite() {
                    return Err(Error::Checkpoint {
                        path: path.display().to_string(),
                        offset: (b_start + i * 8),
                        msg: "layer biases contain a non-finite value".into(),
                    });
                }
                b.push(v);
            }
            layers.push(Layer { w, b });
        }
        let params = MlpParams::from_layers(layers).map_err(|e| Error::Checkpoint {
            path: path.display().to_string(),
            offset: cur.pos,
            msg: e.to_string(),
        })?;
        if params.output_dim() != d {
            return Err(Error::Checkpoint {
                path: path.display().to_string(),
                offset: cur.pos,
                msg: format!(
                    "backbone produces {} features but the head expects {d}",
                    params.output_dim()
                ),
            });
        }
        Some(params)
    };
    if !cur.done() {
        return Err(Error::Checkpoint {
            path: path.display().to_string(),
            offset: cur.pos,
            msg: format!("{} trailing bytes after the checkpoint", bytes.len() - cur.pos),
        });
    }
    Ok(Checkpoint {
        sub_centers: k,
        w,
        log_sigma,
        backbone,
    })
}
