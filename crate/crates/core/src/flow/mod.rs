//! Optical flow and motion compensation.
//!
//! A [`FlowField`] estimated for `(reference, moving)` maps each pixel `p` of
//! the reference to `p + flow(p)` in the moving frame, so warping the moving
//! frame with it yields an image aligned to the reference.

mod block_match;
mod external;
pub mod flo;

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::image::Image;

pub use block_match::BlockMatchFlow;
pub use external::ExternalFlow;

/// Per-pixel displacement `(u, v)` in pixels; `u` is horizontal.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    height: usize,
    width: usize,
    u: Vec<f64>,
    v: Vec<f64>,
}

impl FlowField {
    pub fn zeros(height: usize, width: usize) -> Self {
        FlowField {
            height,
            width,
            u: vec![0.0; height * width],
            v: vec![0.0; height * width],
        }
    }

    pub fn constant(height: usize, width: usize, u: f64, v: f64) -> Self {
        FlowField {
            height,
            width,
            u: vec![u; height * width],
            v: vec![v; height * width],
        }
    }

    pub fn from_components(height: usize, width: usize, u: Vec<f64>, v: Vec<f64>) -> Result<Self> {
        if u.len() != height * width || v.len() != height * width {
            return Err(Error::Dimension(format!(
                "flow components of length {}/{} do not fit {height}x{width}",
                u.len(),
                v.len()
            )));
        }
        Ok(FlowField { height, width, u, v })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn u(&self) -> &[f64] {
        &self.u
    }

    pub fn v(&self) -> &[f64] {
        &self.v
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> (f64, f64) {
        let i = y * self.width + x;
        (self.u[i], self.v[i])
    }

    pub fn max_magnitude(&self) -> f64 {
        self.u
            .iter()
            .zip(&self.v)
            .map(|(u, v)| (u * u + v * v).sqrt())
            .fold(0.0, f64::max)
    }

    fn ensure_matches(&self, frame: &Image) -> Result<()> {
        if (self.height, self.width) != (frame.height(), frame.width()) {
            return Err(Error::Dimension(format!(
                "flow {}x{} does not match frame {}x{}",
                self.height,
                self.width,
                frame.height(),
                frame.width()
            )));
        }
        Ok(())
    }
}

/// Source of optical flow between two frames. Implementations must be
/// usable concurrently on distinct frame pairs.
pub trait FlowBackend: Send + Sync {
    fn name(&self) -> &str;

    fn estimate(&self, reference: &Image, moving: &Image) -> Result<FlowField>;
}

/// Always returns zero flow.
#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityFlow;

impl FlowBackend for IdentityFlow {
    fn name(&self) -> &str {
        "identity"
    }

    fn estimate(&self, reference: &Image, moving: &Image) -> Result<FlowField> {
        reference.ensure_same_shape(moving, "flow estimation")?;
        Ok(FlowField::zeros(reference.height(), reference.width()))
    }
}

/// Resolve a backend identifier: `identity`, `blockmatch`, or
/// `external:<program>` (see [`ExternalFlow`]).
pub fn backend_from_id(id: &str) -> Result<Arc<dyn FlowBackend>> {
    match id {
        "identity" => Ok(Arc::new(IdentityFlow)),
        "blockmatch" => Ok(Arc::new(BlockMatchFlow::default())),
        _ => match id.strip_prefix("external:") {
            Some(program) if !program.is_empty() => Ok(Arc::new(ExternalFlow::new(program))),
            _ => Err(Error::Config(format!("unknown flow backend '{id}'"))),
        },
    }
}

pub fn estimate_flow(reference: &Image, moving: &Image, backend: &dyn FlowBackend) -> Result<FlowField> {
    reference.ensure_same_shape(moving, "flow estimation")?;
    let flow = backend.estimate(reference, moving)?;
    if (flow.height, flow.width) != (reference.height(), reference.width()) {
        return Err(Error::Flow(format!(
            "backend '{}' returned a {}x{} field for {}x{} frames",
            backend.name(),
            flow.height,
            flow.width,
            reference.height(),
            reference.width()
        )));
    }
    Ok(flow)
}

/// `output(p) = frame(p + flow(p))`, bilinear, with edge-clamped coordinates.
pub fn warp(frame: &Image, flow: &FlowField) -> Result<Image> {
    flow.ensure_matches(frame)?;
    let (h, w, c) = frame.shape();
    let mut out = Image::zeros(h, w, c);
    for y in 0..h {
        for x in 0..w {
            let (u, v) = flow.at(y, x);
            let sy = y as f64 + v;
            let sx = x as f64 + u;
            for ch in 0..c {
                out.set(y, x, ch, frame.sample_bilinear(sy, sx, ch));
            }
        }
    }
    Ok(out)
}

/// Align `neighbor` onto `reference`.
pub fn compensate(neighbor: &Image, reference: &Image, backend: &dyn FlowBackend) -> Result<Image> {
    let flow = estimate_flow(reference, neighbor, backend)?;
    warp(neighbor, &flow)
}
