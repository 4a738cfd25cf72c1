//! Binary packet format.
//!
//! ```text
//! "GPD1" | u32 sender | u32 round | u64 n_samples | u32 record count | records
//! record: u32 id | u8 mode | u8 ndim | u32 × ndim shape | payload
//!   raw: f32 × count
//!   gpd: u32 r | u32 Kp | Up | Sp | Vp | u32 Kn | Un | Sn | Vn   (all f32)
//! ```
//!
//! Integers and floats are little-endian.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::gpd::codec::{validate_record, GpdPacket, Payload, TensorRecord};
use crate::gpd::svd::SvdTriple;
use crate::nn::Tensor;

pub const MAGIC: &[u8; 4] = b"GPD1";
pub const HEADER_LEN: usize = 24;

const MODE_RAW: u8 = 0;
const MODE_GPD: u8 = 1;

/// Exact serialized size of `packet`.
pub fn encoded_len(packet: &GpdPacket) -> usize {
    HEADER_LEN
        + packet
            .records
            .iter()
            .map(|r| {
                let extra = if r.is_gpd() { 12 } else { 0 };
                6 + 4 * r.shape.len() + extra + 4 * r.transmitted_count()
            })
            .sum::<usize>()
}

pub fn write_packet(packet: &GpdPacket) -> Vec<u8> {
    let mut buf = Vec::with_capacity(encoded_len(packet));
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&packet.sender.to_le_bytes());
    buf.extend_from_slice(&packet.round.to_le_bytes());
    buf.extend_from_slice(&packet.n_samples.to_le_bytes());
    buf.extend_from_slice(&(packet.records.len() as u32).to_le_bytes());
    for rec in &packet.records {
        buf.extend_from_slice(&rec.id.to_le_bytes());
        buf.push(if rec.is_gpd() { MODE_GPD } else { MODE_RAW });
        buf.push(rec.shape.len() as u8);
        for &d in &rec.shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        match &rec.payload {
            Payload::Raw(v) => put_f32s(&mut buf, v),
            Payload::Gpd { r, p, n } => {
                buf.extend_from_slice(&(*r as u32).to_le_bytes());
                put_triple(&mut buf, p);
                put_triple(&mut buf, n);
            }
        }
    }
    buf
}

fn put_f32s(buf: &mut Vec<u8>, values: &[f64]) {
    for &x in values {
        buf.extend_from_slice(&(x as f32).to_le_bytes());
    }
}

fn put_triple(buf: &mut Vec<u8>, t: &SvdTriple) {
    buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    put_f32s(buf, t.u.data());
    put_f32s(buf, &t.s);
    put_f32s(buf, t.v.data());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn fail<T>(&self, msg: impl Into<String>) -> Result<T> {
        Err(Error::Format { offset: self.pos, msg: msg.into() })
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return self.fail(format!(
                "truncated while reading {what}: need {n} bytes, {} left",
                self.buf.len() - self.pos
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f32s(&mut self, count: usize, what: &str) -> Result<Vec<f64>> {
        let start = self.pos;
        let bytes = self.take(count.checked_mul(4).unwrap_or(usize::MAX), what)?;
        let values: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        if let Some(i) = values.iter().position(|x| !x.is_finite()) {
            return Err(Error::Format { offset: start + 4 * i, msg: format!("non-finite value in {what}") });
        }
        Ok(values)
    }

    fn dim(&mut self, what: &str) -> Result<usize> {
        let at = self.pos;
        let d = self.u32(what)? as usize;
        if d == 0 {
            return Err(Error::Format { offset: at, msg: format!("{what} must be positive") });
        }
        Ok(d)
    }

    fn triple(&mut self, rows: usize, cols: usize, what: &str) -> Result<SvdTriple> {
        let k = self.dim(&format!("{what} rank"))?;
        let u = self.f32s(rows * k, &format!("{what} U"))?;
        let s = self.f32s(k, &format!("{what} S"))?;
        let v = self.f32s(k * cols, &format!("{what} V"))?;
        Ok(SvdTriple {
            u: Tensor::from_parts(vec![rows, k], u),
            s,
            v: Tensor::from_parts(vec![k, cols], v),
        })
    }
}

pub fn read_packet(buf: &[u8]) -> Result<GpdPacket> {
    let mut rd = Reader { buf, pos: 0 };
    if rd.take(4, "magic")? != MAGIC {
        return Err(Error::Format { offset: 0, msg: "bad magic, expected GPD1".into() });
    }
    let sender = rd.u32("sender id")?;
    let round = rd.u32("round")?;
    let n_samples = rd.u64("sample count")?;
    let count = rd.u32("record count")? as usize;
    let mut records = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let start = rd.pos;
        let id = rd.u32("tensor id")?;
        let mode = rd.u8("mode")?;
        let ndim = rd.u8("ndim")? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(rd.dim("shape entry")?);
        }
        let payload = match mode {
            MODE_RAW => Payload::Raw(rd.f32s(shape.iter().product(), "raw payload")?),
            MODE_GPD => {
                let p_rows = shape.first().copied().unwrap_or(1);
                let q_cols: usize = shape.iter().skip(1).product();
                let r = rd.dim("rank r")?;
                let p = rd.triple(p_rows, r, "g_p")?;
                let n = rd.triple(r, q_cols, "g_n")?;
                Payload::Gpd { r, p, n }
            }
            other => {
                return Err(Error::Format { offset: start + 4, msg: format!("unknown record mode {other}") })
            }
        };
        let rec = TensorRecord { id, shape, payload };
        validate_record(&rec).map_err(|msg| Error::Format { offset: start, msg })?;
        records.push(rec);
    }
    if rd.pos != buf.len() {
        return rd.fail(format!("{} trailing bytes after last record", buf.len() - rd.pos));
    }
    Ok(GpdPacket { sender, round, n_samples, records })
}

/// Serializes and parses again, applying the wire's 32-bit rounding.
///
/// Fails if a value overflows the 32-bit range.
pub fn through_wire(packet: &GpdPacket) -> Result<GpdPacket> {
    read_packet(&write_packet(packet))
}

pub fn save_packet(packet: &GpdPacket, path: &Path) -> Result<()> {
    fs::write(path, write_packet(packet))?;
    Ok(())
}

pub fn load_packet(path: &Path) -> Result<GpdPacket> {
    read_packet(&fs::read(path)?)
}
