//! Coarse-to-fine block matching on luma pyramids with a gradient-based
//! sub-pixel refinement.
//!
//! At the coarsest level every pixel searches an integer window around zero.
//! Each finer level doubles the upsampled estimate and searches a small
//! window around it. Every level ends with a propagation pass and a 3x3
//! median filter. Candidates are visited in order of distance from the
//! predictor, so on exact ties (flat regions) the predictor wins and frames
//! without texture get zero flow.

use rayon::prelude::*;

use super::{FlowBackend, FlowField};
use crate::error::Result;
use crate::image::Image;

#[derive(Clone, Debug)]
pub struct BlockMatchFlow {
    /// Maximum pyramid levels (including full resolution).
    pub levels: usize,
    /// Matching window half-size; windows are `(2r + 1)^2`.
    pub patch_radius: usize,
    /// Integer search radius at the coarsest level.
    pub coarse_search: i32,
    /// Integer search radius around the predictor at finer levels.
    pub refine_search: i32,
    /// Levels are not built below this size.
    pub min_level_size: usize,
    /// Per-pixel penalty on squared displacement at the coarsest level.
    pub motion_prior: f64,
}

impl Default for BlockMatchFlow {
    fn default() -> Self {
        BlockMatchFlow {
            levels: 4,
            patch_radius: 3,
            coarse_search: 4,
            refine_search: 1,
            min_level_size: 12,
            motion_prior: 1e-5,
        }
    }
}

#[derive(Clone)]
struct Plane {
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl Plane {
    #[inline]
    fn at(&self, y: isize, x: isize) -> f64 {
        let y = y.clamp(0, self.h as isize - 1) as usize;
        let x = x.clamp(0, self.w as isize - 1) as usize;
        self.data[y * self.w + x]
    }

    /// [1 2 1]/4 separable blur, then keep every second sample.
    fn downsample(&self) -> Plane {
        let (h, w) = ((self.h + 1) / 2, (self.w + 1) / 2);
        let mut data = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let (cy, cx) = (2 * y as isize, 2 * x as isize);
                let mut acc = 0.0;
                for (dy, wy) in [(-1, 1.0), (0, 2.0), (1, 1.0)] {
                    for (dx, wx) in [(-1, 1.0), (0, 2.0), (1, 1.0)] {
                        acc += wy * wx * self.at(cy + dy, cx + dx);
                    }
                }
                data.push(acc / 16.0);
            }
        }
        Plane { h, w, data }
    }
}

fn luma_plane(img: &Image) -> Plane {
    let l = img.luma();
    Plane {
        h: l.height(),
        w: l.width(),
        data: l.into_vec(),
    }
}

impl BlockMatchFlow {
    fn pyramid(&self, base: Plane) -> Vec<Plane> {
        let mut levels = vec![base];
        while levels.len() < self.levels.max(1) {
            let last = levels.last().expect("non-empty");
            if last.h.min(last.w) / 2 < self.min_level_size {
                break;
            }
            let next = last.downsample();
            levels.push(next);
        }
        levels
    }

    #[inline]
    fn cost(&self, a: &Plane, b: &Plane, y: usize, x: usize, dy: i32, dx: i32) -> f64 {
        let r = self.patch_radius as isize;
        let (y, x) = (y as isize, x as isize);
        let (iy, ix) = (dy as isize, dx as isize);
        let mut acc = 0.0;
        for qy in -r..=r {
            for qx in -r..=r {
                let d = a.at(y + qy, x + qx) - b.at(y + qy + iy, x + qx + ix);
                acc += d * d;
            }
        }
        acc
    }

    /// Integer search around per-pixel predictors. `prior` adds
    /// `prior * |d|^2` per window pixel to every candidate.
    fn search(&self, a: &Plane, b: &Plane, pred: &[(i32, i32)], range: i32, prior: f64) -> Vec<(i32, i32)> {
        let mut offsets: Vec<(i32, i32)> = (-range..=range)
            .flat_map(|dy| (-range..=range).map(move |dx| (dy, dx)))
            .collect();
        offsets.sort_by_key(|&(dy, dx)| (dy * dy + dx * dx, dy, dx));
        let area = ((2 * self.patch_radius + 1) * (2 * self.patch_radius + 1)) as f64;
        (0..a.h)
            .into_par_iter()
            .flat_map_iter(|y| {
                let offsets = &offsets;
                (0..a.w).map(move |x| {
                    let (py, px) = pred[y * a.w + x];
                    let mut best = (py, px);
                    let mut best_cost = f64::INFINITY;
                    for &(oy, ox) in offsets {
                        let (cy, cx) = (py + oy, px + ox);
                        let penalty = prior * area * f64::from(cy * cy + cx * cx);
                        let c = self.cost(a, b, y, x, cy, cx) + penalty;
                        if c < best_cost {
                            best_cost = c;
                            best = (cy, cx);
                        }
                    }
                    best
                })
            })
            .collect()
    }

    /// Jump-flooding propagation: each pixel adopts the displacement of a
    /// neighbor at distance 16, 8, 4, 2, 1 when it matches strictly better.
    /// Good matches spread across regions where the coarse estimate locked
    /// onto a wrong repetition of the texture.
    fn propagate(&self, a: &Plane, b: &Plane, mut flow: Vec<(i32, i32)>) -> Vec<(i32, i32)> {
        let mut cost: Vec<f64> = (0..a.h * a.w)
            .into_par_iter()
            .map(|i| {
                let (dy, dx) = flow[i];
                self.cost(a, b, i / a.w, i % a.w, dy, dx)
            })
            .collect();
        for step in [16isize, 8, 4, 2, 1] {
            let (prev, prev_cost) = (&flow, &cost);
            let next: Vec<((i32, i32), f64)> = (0..a.h * a.w)
                .into_par_iter()
                .map(|i| {
                    let (y, x) = ((i / a.w) as isize, (i % a.w) as isize);
                    let mut best = (prev[i], prev_cost[i]);
                    for (ny, nx) in [(y - step, x), (y + step, x), (y, x - step), (y, x + step)] {
                        if ny < 0 || nx < 0 || ny >= a.h as isize || nx >= a.w as isize {
                            continue;
                        }
                        let cand = prev[ny as usize * a.w + nx as usize];
                        if cand == best.0 {
                            continue;
                        }
                        let c = self.cost(a, b, y as usize, x as usize, cand.0, cand.1);
                        if c < best.1 {
                            best = (cand, c);
                        }
                    }
                    best
                })
                .collect();
            (flow, cost) = next.into_iter().unzip();
        }
        flow
    }

    /// One Gauss-Newton step on the window SSD around the integer match:
    /// solves the 2x2 normal equations built from the moving frame's
    /// gradients. The correction is clamped to half a pixel.
    fn subpixel(&self, a: &Plane, b: &Plane, flow: &[(i32, i32)]) -> (Vec<f64>, Vec<f64>) {
        let r = self.patch_radius as isize;
        let refined: Vec<(f64, f64)> = (0..a.h)
            .into_par_iter()
            .flat_map_iter(|y| {
                (0..a.w).map(move |x| {
                    let (dy, dx) = flow[y * a.w + x];
                    let (mut gxx, mut gxy, mut gyy, mut bx, mut by) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for qy in -r..=r {
                        for qx in -r..=r {
                            let (py, px) = (y as isize + qy, x as isize + qx);
                            let (my, mx) = (py + dy as isize, px + dx as isize);
                            let ix = 0.5 * (b.at(my, mx + 1) - b.at(my, mx - 1));
                            let iy = 0.5 * (b.at(my + 1, mx) - b.at(my - 1, mx));
                            let it = b.at(my, mx) - a.at(py, px);
                            gxx += ix * ix;
                            gxy += ix * iy;
                            gyy += iy * iy;
                            bx += ix * it;
                            by += iy * it;
                        }
                    }
                    let det = gxx * gyy - gxy * gxy;
                    let trace = gxx + gyy;
                    let (ox, oy) = if trace > 1e-12 && det > 1e-6 * trace * trace {
                        (
                            (-(gyy * bx - gxy * by) / det).clamp(-0.5, 0.5),
                            (-(gxx * by - gxy * bx) / det).clamp(-0.5, 0.5),
                        )
                    } else {
                        (0.0, 0.0)
                    };
                    (dx as f64 + ox, dy as f64 + oy)
                })
            })
            .collect();
        refined.into_iter().unzip()
    }
}

fn median3x3(flow: &[(i32, i32)], h: usize, w: usize) -> Vec<(i32, i32)> {
    let mut out = Vec::with_capacity(flow.len());
    let mut ys = Vec::with_capacity(9);
    let mut xs = Vec::with_capacity(9);
    for y in 0..h {
        for x in 0..w {
            ys.clear();
            xs.clear();
            for ny in y.saturating_sub(1)..(y + 2).min(h) {
                for nx in x.saturating_sub(1)..(x + 2).min(w) {
                    let (dy, dx) = flow[ny * w + nx];
                    ys.push(dy);
                    xs.push(dx);
                }
            }
            ys.sort_unstable();
            xs.sort_unstable();
            out.push((ys[ys.len() / 2], xs[xs.len() / 2]));
        }
    }
    out
}

impl FlowBackend for BlockMatchFlow {
    fn name(&self) -> &str {
        "blockmatch"
    }

    fn estimate(&self, reference: &Image, moving: &Image) -> Result<FlowField> {
        reference.ensure_same_shape(moving, "flow estimation")?;
        let ref_pyr = self.pyramid(luma_plane(reference));
        let mov_pyr = self.pyramid(luma_plane(moving));
        let top = ref_pyr.len() - 1;

        let mut flow: Vec<(i32, i32)> = vec![(0, 0); ref_pyr[top].h * ref_pyr[top].w];
        for level in (0..=top).rev() {
            let (a, b) = (&ref_pyr[level], &mov_pyr[level]);
            let (pred, range) = if level == top {
                (flow, self.coarse_search)
            } else {
                let coarse = &ref_pyr[level + 1];
                let mut up = Vec::with_capacity(a.h * a.w);
                for y in 0..a.h {
                    for x in 0..a.w {
                        let cy = (y / 2).min(coarse.h - 1);
                        let cx = (x / 2).min(coarse.w - 1);
                        let (dy, dx) = flow[cy * coarse.w + cx];
                        up.push((2 * dy, 2 * dx));
                    }
                }
                (up, self.refine_search)
            };
            let prior = if level == top { self.motion_prior } else { 0.0 };
            let found = self.propagate(a, b, self.search(a, b, &pred, range, prior));
            flow = median3x3(&found, a.h, a.w);
        }

        let (u, v) = self.subpixel(&ref_pyr[0], &mov_pyr[0], &flow);
        FlowField::from_components(reference.height(), reference.width(), u, v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::compensate;

    /// Smooth random texture: sum of a few oriented sinusoids.
    fn texture(h: usize, w: usize) -> Image {
        Image::from_fn(h, w, 3, |y, x, c| {
            let (y, x) = (y as f64, x as f64);
            0.5 + 0.15 * (0.31 * x + 0.17 * y).sin()
                + 0.12 * (0.23 * y - 0.41 * x + c as f64).cos()
                + 0.08 * (0.71 * x * 0.5 + 0.53 * y).sin()
        })
    }

    fn shifted(img: &Image, dx: isize, dy: isize) -> Image {
        Image::from_fn(img.height(), img.width(), img.channels(), |y, x, c| {
            img.get_clamped(y as isize - dy, x as isize - dx, c)
        })
    }

    fn median(mut v: Vec<f64>) -> f64 {
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        v[v.len() / 2]
    }

    #[test]
    fn self_match_is_zero() {
        let img = texture(48, 64);
        let flow = BlockMatchFlow::default().estimate(&img, &img).unwrap();
        assert!(flow.max_magnitude() < 0.5, "max {}", flow.max_magnitude());
    }

    #[test]
    fn flat_frames_give_zero_flow() {
        let a = Image::filled(40, 40, 3, 0.3);
        let b = Image::filled(40, 40, 3, 0.7);
        let flow = BlockMatchFlow::default().estimate(&a, &b).unwrap();
        assert_eq!(flow.max_magnitude(), 0.0);
    }

    #[test]
    fn recovers_horizontal_translation() {
        let img = texture(64, 80);
        let moving = shifted(&img, 3, 0);
        let flow = BlockMatchFlow::default().estimate(&img, &moving).unwrap();
        let (mut us, mut vs) = (Vec::new(), Vec::new());
        for y in 8..56 {
            for x in 8..72 {
                let (u, v) = flow.at(y, x);
                us.push(u);
                vs.push(v);
            }
        }
        assert!((median(us) - 3.0).abs() < 0.5);
        assert!(median(vs).abs() < 0.5);
    }

    #[test]
    fn compensation_aligns_shifted_neighbor() {
        let reference = texture(48, 48);
        let neighbor = shifted(&reference, 2, 1);
        let aligned = compensate(&neighbor, &reference, &BlockMatchFlow::default()).unwrap();
        let mut max = 0.0f64;
        for y in 6..42 {
            for x in 6..42 {
                for c in 0..3 {
                    max = max.max((aligned.get(y, x, c) - reference.get(y, x, c)).abs());
                }
            }
        }
        assert!(max < 0.02, "interior max abs error {max}");
    }
}
