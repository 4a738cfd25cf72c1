use crate::error::{Error, Result};
use crate::gpd::{decode_model, GpdPacket};
use crate::nn::Tensor;

/// Sample-weighted mean of the decoded packets.
///
/// Packets are combined in sender order so the result does not depend on
/// arrival order.
pub fn aggregate(packets: &[GpdPacket], shapes: &[Vec<usize>]) -> Result<Vec<Tensor>> {
    if packets.is_empty() {
        return Err(Error::Contract("aggregation needs at least one packet".into()));
    }
    let mut order: Vec<&GpdPacket> = packets.iter().collect();
    order.sort_by_key(|p| p.sender);
    let total: u64 = order.iter().map(|p| p.n_samples).sum();
    let weight = |p: &GpdPacket| {
        if total == 0 {
            1.0 / order.len() as f64
        } else {
            p.n_samples as f64 / total as f64
        }
    };
    let mut acc: Vec<Tensor> = shapes.iter().map(|s| Tensor::zeros(s)).collect();
    for p in &order {
        let w = weight(p);
        let params = decode_model(p, shapes)?;
        for (a, t) in acc.iter_mut().zip(&params) {
            for (x, y) in a.data_mut().iter_mut().zip(t.data()) {
                *x += w * y;
            }
        }
    }
    Ok(acc)
}
