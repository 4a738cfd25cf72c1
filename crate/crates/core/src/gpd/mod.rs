//! Global parameter decomposition: low-rank packet encoding of model
//! parameters for client/server exchange.

mod codec;
mod svd;
pub mod wire;

pub use codec::{
    decode_model, decode_record, encode_model, encode_tensor, packet_stats, CodecConfig, GpdPacket, PacketStats,
    Payload, TensorRecord, DEFAULT_RAW_THRESHOLD,
};
pub use svd::{choose_k, split_rank, split_rank_of, svd, truncated_svd, SvdTriple};
