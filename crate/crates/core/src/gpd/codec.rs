//! Packet encoding and reconstruction.

use crate::error::{Error, Result};
use crate::gpd::svd::{choose_k, split_rank, split_rank_of, svd, SvdTriple};
use crate::nn::Tensor;

/// Default size at or below which a tensor is always sent raw.
pub const DEFAULT_RAW_THRESHOLD: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CodecConfig {
    /// Variance-explained threshold in `(0, 1]`.
    pub alpha: f64,
    pub raw_threshold: usize,
}

impl CodecConfig {
    pub fn new(alpha: f64, raw_threshold: usize) -> Result<Self> {
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(Error::Config(format!("alpha must lie in (0, 1], got {alpha}")));
        }
        Ok(CodecConfig { alpha, raw_threshold })
    }

    /// Lossless-in-structure settings: every tensor is sent raw.
    pub fn raw() -> Self {
        CodecConfig { alpha: 1.0, raw_threshold: usize::MAX }
    }
}

impl Default for CodecConfig {
    fn default() -> Self {
        CodecConfig { alpha: 0.98, raw_threshold: DEFAULT_RAW_THRESHOLD }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Raw(Vec<f64>),
    /// `g ≈ (U^p S^p V^p) · (U^n S^n V^n)` with stage-one rank `r`.
    Gpd { r: usize, p: SvdTriple, n: SvdTriple },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorRecord {
    pub id: u32,
    pub shape: Vec<usize>,
    pub payload: Payload,
}

impl TensorRecord {
    pub fn full_count(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn transmitted_count(&self) -> usize {
        match &self.payload {
            Payload::Raw(v) => v.len(),
            Payload::Gpd { p, n, .. } => p.scalar_count() + n.scalar_count(),
        }
    }

    pub fn is_gpd(&self) -> bool {
        matches!(self.payload, Payload::Gpd { .. })
    }

    /// The 2-D view used for decomposition: first axis by the rest.
    pub fn matrix_view(&self) -> (usize, usize) {
        matrix_view(&self.shape)
    }
}

fn matrix_view(shape: &[usize]) -> (usize, usize) {
    let p = shape.first().copied().unwrap_or(1);
    (p, shape.iter().skip(1).product())
}

/// One model's parameters as they travel between client and server.
#[derive(Debug, Clone, PartialEq)]
pub struct GpdPacket {
    pub sender: u32,
    pub round: u32,
    pub n_samples: u64,
    pub records: Vec<TensorRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PacketStats {
    pub transmitted: usize,
    pub full: usize,
    pub ratio: f64,
    pub bytes: usize,
}

impl GpdPacket {
    pub fn transmitted(&self) -> usize {
        self.records.iter().map(TensorRecord::transmitted_count).sum()
    }

    pub fn full(&self) -> usize {
        self.records.iter().map(TensorRecord::full_count).sum()
    }

    pub fn stats(&self) -> PacketStats {
        packet_stats(self)
    }
}

pub fn packet_stats(packet: &GpdPacket) -> PacketStats {
    let transmitted = packet.transmitted();
    let full = packet.full();
    let ratio = if full == 0 { 1.0 } else { transmitted as f64 / full as f64 };
    PacketStats { transmitted, full, ratio, bytes: crate::gpd::wire::encoded_len(packet) }
}

/// Encodes one parameter tensor.
pub fn encode_tensor(id: u32, t: &Tensor, cfg: &CodecConfig) -> Result<TensorRecord> {
    if let Some(v) = t.data().iter().find(|v| v.abs() > f32::MAX as f64) {
        return Err(Error::Numeric { tensor: format!("#{id}"), msg: format!("{v} exceeds the f32 wire range") });
    }
    let shape = t.shape().to_vec();
    let raw = || TensorRecord { id, shape: shape.clone(), payload: Payload::Raw(t.data().to_vec()) };
    if t.ndim() <= 1 || t.len() <= cfg.raw_threshold {
        return Ok(raw());
    }
    let (p, q) = matrix_view(&shape);
    if p == 1 || q == 1 {
        return Ok(raw());
    }
    let label = format!("#{id}");
    let g = Tensor::from_parts(vec![p, q], t.data().to_vec());
    let (gp, gn) = split_rank(&g, &label)?;
    let tp = svd(&gp, &format!("{label}/p"))?;
    let tn = svd(&gn, &format!("{label}/n"))?;
    let tp = tp.truncate(choose_k(&tp.s, cfg.alpha));
    let tn = tn.truncate(choose_k(&tn.s, cfg.alpha));
    if tp.scalar_count() + tn.scalar_count() >= t.len() {
        return Ok(raw());
    }
    Ok(TensorRecord { id, shape, payload: Payload::Gpd { r: split_rank_of(p, q), p: tp, n: tn } })
}

/// Encodes a model's parameters in canonical order; record ids are positions.
pub fn encode_model(params: &[Tensor], cfg: &CodecConfig) -> Result<GpdPacket> {
    let records = params
        .iter()
        .enumerate()
        .map(|(i, t)| encode_tensor(i as u32, t, cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(GpdPacket { sender: 0, round: 0, n_samples: 0, records })
}

pub fn decode_record(rec: &TensorRecord) -> Tensor {
    match &rec.payload {
        Payload::Raw(v) => Tensor::from_parts(rec.shape.clone(), v.clone()),
        Payload::Gpd { p, n, .. } => {
            let gp = p.reconstruct();
            let gn = n.reconstruct();
            let g = gp.matmul(&gn).expect("factor shapes validated at construction");
            Tensor::from_parts(rec.shape.clone(), g.into_data())
        }
    }
}

/// Rebuilds parameters, checking the packet against the expected shapes.
pub fn decode_model(packet: &GpdPacket, shapes: &[Vec<usize>]) -> Result<Vec<Tensor>> {
    let protocol = |tensor: u32, msg: String| Error::Protocol { sender: packet.sender, tensor, msg };
    if packet.records.len() != shapes.len() {
        return Err(protocol(
            packet.records.len().min(shapes.len()) as u32,
            format!("packet has {} records, model has {} tensors", packet.records.len(), shapes.len()),
        ));
    }
    let mut out = Vec::with_capacity(shapes.len());
    for (i, (rec, shape)) in packet.records.iter().zip(shapes).enumerate() {
        if rec.id as usize != i {
            return Err(protocol(rec.id, format!("record out of order at position {i}")));
        }
        if &rec.shape != shape {
            return Err(protocol(rec.id, format!("shape {:?} does not match model shape {shape:?}", rec.shape)));
        }
        validate_record(rec).map_err(|msg| protocol(rec.id, msg))?;
        out.push(decode_record(rec));
    }
    Ok(out)
}

/// Checks that a record's payload is consistent with its declared shape.
pub(crate) fn validate_record(rec: &TensorRecord) -> std::result::Result<(), String> {
    match &rec.payload {
        Payload::Raw(v) if v.len() != rec.full_count() => {
            Err(format!("raw payload has {} values, shape needs {}", v.len(), rec.full_count()))
        }
        Payload::Raw(_) => Ok(()),
        Payload::Gpd { r, p, n } => {
            let (rows, cols) = rec.matrix_view();
            let ok = p.u.shape() == [rows, p.rank()]
                && p.v.shape() == [p.rank(), *r]
                && n.u.shape() == [*r, n.rank()]
                && n.v.shape() == [n.rank(), cols];
            if ok {
                Ok(())
            } else {
                Err(format!("factor shapes inconsistent with {rows}x{cols} view and rank {r}"))
            }
        }
    }
}
