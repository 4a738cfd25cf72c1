//! Image datasets, the FMIC container format, and client partitioning.

mod partition;
mod synth;

pub use partition::{dirichlet_partition, label_entropy, split_tvt, ClientSplit, Partition, DEFAULT_MIN_PER_CLIENT};
pub use synth::{class_template, synth_generate, SynthSpec};

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::Tensor;

pub const FMIC_MAGIC: &[u8; 4] = b"FMIC";
pub const FMIC_VERSION: u8 = 1;
/// Magic, version and five u32 header fields.
pub const FMIC_HEADER_LEN: usize = 4 + 1 + 5 * 4;

/// Labeled u8 images stored sample-major as `N×C×H×W`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub n_classes: usize,
    pub labels: Vec<u8>,
    pub pixels: Vec<u8>,
}

impl Dataset {
    pub fn new(shape: [usize; 3], n_classes: usize, labels: Vec<u8>, pixels: Vec<u8>) -> Result<Self> {
        let ds = Dataset { channels: shape[0], height: shape[1], width: shape[2], n_classes, labels, pixels };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.labels.is_empty() {
            return Err(Error::Validation("dataset has no samples".into()));
        }
        if self.sample_len() == 0 {
            return Err(Error::Validation("image shape has a zero dimension".into()));
        }
        if !(1..=256).contains(&self.n_classes) {
            return Err(Error::Validation(format!("class count {} outside 1..=256", self.n_classes)));
        }
        if let Some((i, &l)) = self.labels.iter().enumerate().find(|(_, &l)| l as usize >= self.n_classes) {
            return Err(Error::Validation(format!("label {l} of sample {i} is not below {}", self.n_classes)));
        }
        if self.pixels.len() != self.labels.len() * self.sample_len() {
            return Err(Error::Validation(format!(
                "{} pixels for {} samples of {} values",
                self.pixels.len(),
                self.labels.len(),
                self.sample_len()
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn sample_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let d = self.sample_len();
        &self.pixels[i * d..(i + 1) * d]
    }

    /// Per-class sample counts.
    pub fn histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.n_classes];
        for &l in &self.labels {
            h[l as usize] += 1;
        }
        h
    }

    /// Selected samples as an `N×(C·H·W)` matrix scaled to `[0, 1]`, with labels.
    pub fn to_tensor(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        if indices.is_empty() {
            return Err(Error::Contract("cannot build a tensor from zero samples".into()));
        }
        let d = self.sample_len();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend(self.image(i).iter().map(|&p| p as f64 / 255.0));
        }
        let labels = indices.iter().map(|&i| self.labels[i] as usize).collect();
        Ok((Tensor::new(vec![indices.len(), d], data)?, labels))
    }

    /// The samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let mut pixels = Vec::with_capacity(indices.len() * self.sample_len());
        for &i in indices {
            pixels.extend_from_slice(self.image(i));
        }
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Dataset::new(self.shape(), self.n_classes, labels, pixels)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(FMIC_HEADER_LEN + self.labels.len() + self.pixels.len());
        buf.extend_from_slice(FMIC_MAGIC);
        buf.push(FMIC_VERSION);
        for v in [self.len(), self.channels, self.height, self.width, self.n_classes] {
            buf.extend_from_slice(&(v as u32).to_le_bytes());
        }
        buf.extend_from_slice(&self.labels);
        buf.extend_from_slice(&self.pixels);
        buf
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let header = read_header(buf)?;
        let n = header.n;
        let body = n
            .checked_mul(1 + header.sample_len())
            .ok_or_else(|| Error::Format { offset: 5, msg: "declared size overflows".into() })?;
        let need = FMIC_HEADER_LEN + body;
        if buf.len() < need {
            let what = if buf.len() < FMIC_HEADER_LEN + n { "labels" } else { "pixels" };
            return Err(Error::Format {
                offset: buf.len(),
                msg: format!("truncated {what}: file has {} bytes, header implies {need}", buf.len()),
            });
        }
        if buf.len() > need {
            return Err(Error::Format { offset: need, msg: format!("{} trailing bytes", buf.len() - need) });
        }
        let labels = buf[FMIC_HEADER_LEN..FMIC_HEADER_LEN + n].to_vec();
        let pixels = buf[FMIC_HEADER_LEN + n..].to_vec();
        Dataset::new([header.channels, header.height, header.width], header.n_classes, labels, pixels)
    }
}

/// Decoded FMIC header fields.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FmicHeader {
    pub n: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub n_classes: usize,
}

impl FmicHeader {
    pub fn sample_len(&self) -> usize {
        self.channels * self.height * self.width
    }
}

pub fn read_header(buf: &[u8]) -> Result<FmicHeader> {
    if buf.len() < 4 || &buf[..4] != FMIC_MAGIC {
        return Err(Error::Format { offset: 0, msg: "bad magic, expected FMIC".into() });
    }
    match buf.get(4) {
        None => return Err(Error::Format { offset: 4, msg: "truncated before version byte".into() }),
        Some(&v) if v != FMIC_VERSION => {
            return Err(Error::Format { offset: 4, msg: format!("unsupported version {v}") })
        }
        _ => {}
    }
    let mut fields = [0usize; 5];
    for (k, f) in fields.iter_mut().enumerate() {
        let at = 5 + 4 * k;
        let bytes = buf
            .get(at..at + 4)
            .ok_or_else(|| Error::Format { offset: buf.len(), msg: "truncated header".into() })?;
        *f = u32::from_le_bytes(bytes.try_into().unwrap()) as usize;
    }
    let [n, channels, height, width, n_classes] = fields;
    if n == 0 {
        return Err(Error::Validation("header declares zero samples".into()));
    }
    if channels == 0 || height == 0 || width == 0 {
        return Err(Error::Validation(format!("header declares empty image shape {channels}×{height}×{width}")));
    }
    Ok(FmicHeader { n, channels, height, width, n_classes })
}

pub fn read_fmic(path: &Path) -> Result<Dataset> {
    Dataset::from_bytes(&fs::read(path)?)
}

pub fn write_fmic(dataset: &Dataset, path: &Path) -> Result<()> {
    fs::write(path, dataset.to_bytes())?;
    Ok(())
}
