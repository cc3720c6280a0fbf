//! Lossless rearrangement between full resolution and quarter resolution.
//!
//! Each 2x2 block of an `H x W x C` image becomes `4C` channels at
//! `(H/2) x (W/2)`. For input channel `c` the four samples occupy output
//! channels `4c .. 4c + 4` in raster order: top-left, top-right,
//! bottom-left, bottom-right.

use crate::error::{Error, Result};
use crate::image::Image;

/// Tag stored in checkpoints to identify the channel ordering above.
pub const CHANNEL_ORDER_TAG: &str = "s2d-raster-per-channel-v1";

pub fn space_to_depth(image: &Image) -> Result<Image> {
    let (h, w, c) = image.shape();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Dimension(format!(
            "space_to_depth needs even dimensions, got {h}x{w}"
        )));
    }
    let (oh, ow, oc) = (h / 2, w / 2, 4 * c);
    let src = image.data();
    let mut out = vec![0.0; oh * ow * oc];
    for y in 0..oh {
        for x in 0..ow {
            let base = (y * ow + x) * oc;
            for dy in 0..2 {
                for dx in 0..2 {
                    let s = ((2 * y + dy) * w + 2 * x + dx) * c;
                    let k = dy * 2 + dx;
                    for ch in 0..c {
                        out[base + 4 * ch + k] = src[s + ch];
                    }
                }
            }
        }
    }
    Image::from_vec(oh, ow, oc, out)
}

pub fn depth_to_space(tensor: &Image) -> Result<Image> {
    let (h, w, c4) = tensor.shape();
    if c4 % 4 != 0 {
        return Err(Error::Dimension(format!(
            "depth_to_space needs a channel count divisible by 4, got {c4}"
        )));
    }
    let (oh, ow, c) = (2 * h, 2 * w, c4 / 4);
    let src = tensor.data();
    let mut out = vec![0.0; oh * ow * c];
    for y in 0..h {
        for x in 0..w {
            let base = (y * w + x) * c4;
            for dy in 0..2 {
                for dx in 0..2 {
                    let d = ((2 * y + dy) * ow + 2 * x + dx) * c;
                    let k = dy * 2 + dx;
                    for ch in 0..c {
                        out[d + ch] = src[base + 4 * ch + k];
                    }
                }
            }
        }
    }
    Image::from_vec(oh, ow, c, out)
}
