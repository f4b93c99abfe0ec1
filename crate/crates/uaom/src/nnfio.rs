//! Flat binary dump of a nearest-neighbour field.
//!
//! Magic `NNF1`, then five little-endian `u32`: `src_h`, `src_w`, `dst_h`,
//! `dst_w`, `patch_radius`; then `src_h * src_w` pairs of `f32` `(qx, qy)`
//! in row-major source order.

use uaom_core::nnf::NNField;

pub const NNF_MAGIC: &[u8; 4] = b"NNF1";

pub fn encode_nnf(field: &NNField) -> Vec<u8> {
    let mut out = Vec::with_capacity(24 + field.mapping.len() * 8);
    out.extend_from_slice(NNF_MAGIC);
    for v in [field.src_h, field.src_w, field.dst_h, field.dst_w, field.patch_radius] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for [qx, qy] in &field.mapping {
        out.extend_from_slice(&qx.to_le_bytes());
        out.extend_from_slice(&qy.to_le_bytes());
    }
    out
}

/// Inverse of [`encode_nnf`]. Costs come back zeroed and marked stale.
pub fn decode_nnf(bytes: &[u8]) -> Option<NNField> {
    if bytes.len() < 24 || &bytes[..4] != NNF_MAGIC {
        return None;
    }
    let u = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let (src_h, src_w, dst_h, dst_w, radius) = (u(0), u(1), u(2), u(3), u(4));
    let n = src_h.checked_mul(src_w)?;
    if bytes.len() != 24 + n * 8 {
        return None;
    }
    let mut field = NNField::constant((src_h, src_w), (dst_h, dst_w), [0.0, 0.0], radius);
    for (i, chunk) in bytes[24..].chunks_exact(8).enumerate() {
        field.mapping[i] = [
            f32::from_le_bytes(chunk[..4].try_into().unwrap()),
            f32::from_le_bytes(chunk[4..].try_into().unwrap()),
        ];
    }
    Some(field)
}
