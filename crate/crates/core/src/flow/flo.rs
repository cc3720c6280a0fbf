//! Middlebury `.flo` files: float32 magic 202021.25, int32 width, int32
//! height, then `width * height` interleaved `(u, v)` float32 pairs in row
//! order. Everything little-endian.

use std::fs;
use std::path::Path;

use super::FlowField;
use crate::error::{Error, Result};

pub const FLO_MAGIC: f32 = 202021.25;

pub fn encode_flo(flow: &FlowField) -> Vec<u8> {
    let n = flow.height() * flow.width();
    let mut out = Vec::with_capacity(12 + 8 * n);
    out.extend_from_slice(&FLO_MAGIC.to_le_bytes());
    out.extend_from_slice(&(flow.width() as i32).to_le_bytes());
    out.extend_from_slice(&(flow.height() as i32).to_le_bytes());
    for (u, v) in flow.u().iter().zip(flow.v()) {
        out.extend_from_slice(&(*u as f32).to_le_bytes());
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

pub fn decode_flo(bytes: &[u8]) -> Result<FlowField> {
    if bytes.len() < 12 {
        return Err(Error::Format("flo file shorter than its header".into()));
    }
    let word = |i: usize| -> [u8; 4] { bytes[i..i + 4].try_into().expect("4 bytes") };
    let magic = f32::from_le_bytes(word(0));
    if magic != FLO_MAGIC {
        return Err(Error::Format(format!("bad flo magic {magic}")));
    }
    let width = i32::from_le_bytes(word(4));
    let height = i32::from_le_bytes(word(8));
    if width <= 0 || height <= 0 {
        return Err(Error::Format(format!("bad flo dimensions {width}x{height}")));
    }
    let (w, h) = (width as usize, height as usize);
    if bytes.len() != 12 + 8 * w * h {
        return Err(Error::Format(format!(
            "flo payload of {} bytes does not match {w}x{h}",
            bytes.len() - 12
        )));
    }
    let mut u = Vec::with_capacity(w * h);
    let mut v = Vec::with_capacity(w * h);
    for pair in bytes[12..].chunks_exact(8) {
        u.push(f32::from_le_bytes(pair[..4].try_into().expect("4 bytes")) as f64);
        v.push(f32::from_le_bytes(pair[4..].try_into().expect("4 bytes")) as f64);
    }
    FlowField::from_components(h, w, u, v)
}

pub fn write_flo(path: &Path, flow: &FlowField) -> Result<()> {
    fs::write(path, encode_flo(flow)).map_err(|e| Error::io(path, e))
}

pub fn read_flo(path: &Path) -> Result<FlowField> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_flo(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_bytes() {
        let bytes = encode_flo(&FlowField::constant(2, 3, 1.5, -0.25));
        assert_eq!(&bytes[..4], &[0x50, 0x49, 0x45, 0x48]); // "PIEH"
        assert_eq!(i32::from_le_bytes(bytes[4..8].try_into().unwrap()), 3);
        assert_eq!(i32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
        assert_eq!(f32::from_le_bytes(bytes[12..16].try_into().unwrap()), 1.5);
        assert_eq!(f32::from_le_bytes(bytes[16..20].try_into().unwrap()), -0.25);
        assert_eq!(bytes.len(), 12 + 6 * 8);
    }

    #[test]
    fn malformed_rejected() {
        let bytes = encode_flo(&FlowField::zeros(2, 2));
        assert!(decode_flo(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = 0;
        assert!(decode_flo(&bad).is_err());
        assert!(decode_flo(&bytes[..8]).is_err());
    }

    proptest! {
        #[test]
        fn f32_representable_flows_round_trip(h in 1usize..5, w in 1usize..5, vals in proptest::collection::vec(-100.0f32..100.0, 32)) {
            let n = h * w;
            let u: Vec<f64> = vals[..n].iter().map(|x| *x as f64).collect();
            let v: Vec<f64> = vals[16..16 + n].iter().map(|x| *x as f64).collect();
            let flow = FlowField::from_components(h, w, u, v).unwrap();
            prop_assert_eq!(decode_flo(&encode_flo(&flow)).unwrap(), flow);
        }
    }
}
