//! 3x3 / stride 1 / zero-padding 1 convolution on one `H x W x C` feature map,
//! lowered to a matrix product through an im2col buffer.

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};

use super::KERNEL_SIZE;

const TAPS: usize = KERNEL_SIZE * KERNEL_SIZE;

/// Fill `col` (`h*w x 9*cin`, row per output pixel) with the zero-padded
/// 3x3 neighborhoods of `input`.
pub(crate) fn im2col(input: &[f64], h: usize, w: usize, cin: usize, col: &mut [f64]) {
    let k = TAPS * cin;
    debug_assert_eq!(col.len(), h * w * k);
    for y in 0..h {
        for x in 0..w {
            let row = &mut col[(y * w + x) * k..(y * w + x + 1) * k];
            for ky in 0..KERNEL_SIZE {
                let sy = y as isize + ky as isize - 1;
                for kx in 0..KERNEL_SIZE {
                    let sx = x as isize + kx as isize - 1;
                    let dst = &mut row[(ky * KERNEL_SIZE + kx) * cin..][..cin];
                    if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                        dst.fill(0.0);
                    } else {
                        let s = (sy as usize * w + sx as usize) * cin;
                        dst.copy_from_slice(&input[s..s + cin]);
                    }
                }
            }
        }
    }
}

/// Scatter-add the rows of `col` back onto `grad_input` (adjoint of [`im2col`]).
pub(crate) fn col2im(col: &[f64], h: usize, w: usize, cin: usize, grad_input: &mut [f64]) {
    let k = TAPS * cin;
    grad_input.fill(0.0);
    for y in 0..h {
        for x in 0..w {
            let row = &col[(y * w + x) * k..(y * w + x + 1) * k];
            for ky in 0..KERNEL_SIZE {
                let sy = y as isize + ky as isize - 1;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for kx in 0..KERNEL_SIZE {
                    let sx = x as isize + kx as isize - 1;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let s = (sy as usize * w + sx as usize) * cin;
                    let src = &row[(ky * KERNEL_SIZE + kx) * cin..][..cin];
                    for (g, v) in grad_input[s..s + cin].iter_mut().zip(src) {
                        *g += v;
                    }
                }
            }
        }
    }
}

/// `output (h*w x cout) = im2col(input) * weight^T + bias`
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_forward(
    input: &[f64],
    h: usize,
    w: usize,
    cin: usize,
    weight: &[f64],
    bias: &[f64],
    cout: usize,
    col: &mut Vec<f64>,
    output: &mut [f64],
) {
    let k = TAPS * cin;
    let p = h * w;
    col.resize(p * k, 0.0);
    im2col(input, h, w, cin, col);
    for row in output.chunks_exact_mut(cout) {
        row.copy_from_slice(bias);
    }
    let a = ArrayView2::from_shape((p, k), &col[..]).expect("im2col shape");
    let b = ArrayView2::from_shape((cout, k), weight).expect("weight shape");
    let mut c = ArrayViewMut2::from_shape((p, cout), output).expect("output shape");
    general_mat_mul(1.0, &a, &b.t(), 1.0, &mut c);
}

/// Accumulate weight/bias gradients for one sample and, when requested,
/// write the input gradient.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward(
    input: &[f64],
    h: usize,
    w: usize,
    cin: usize,
    weight: &[f64],
    cout: usize,
    grad_output: &[f64],
    grad_weight: &mut [f64],
    grad_bias: &mut [f64],
    grad_input: Option<&mut [f64]>,
    col: &mut Vec<f64>,
) {
    let k = TAPS * cin;
    let p = h * w;
    col.resize(p * k, 0.0);
    im2col(input, h, w, cin, col);

    for row in grad_output.chunks_exact(cout) {
        for (g, v) in grad_bias.iter_mut().zip(row) {
            *g += v;
        }
    }
    let dy = ArrayView2::from_shape((p, cout), grad_output).expect("grad shape");
    {
        let x = ArrayView2::from_shape((p, k), &col[..]).expect("im2col shape");
        let mut dw = ArrayViewMut2::from_shape((cout, k), grad_weight).expect("weight shape");
        general_mat_mul(1.0, &dy.t(), &x, 1.0, &mut dw);
    }
    if let Some(grad_input) = grad_input {
        let wv = ArrayView2::from_shape((cout, k), weight).expect("weight shape");
        {
            let mut dcol = ArrayViewMut2::from_shape((p, k), &mut col[..]).expect("im2col shape");
            general_mat_mul(1.0, &dy, &wv, 0.0, &mut dcol);
        }
        col2im(col, h, w, cin, grad_input);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct nested-loop convolution.
    fn naive(input: &[f64], h: usize, w: usize, cin: usize, weight: &[f64], bias: &[f64], cout: usize) -> Vec<f64> {
        let mut out = vec![0.0; h * w * cout];
        for y in 0..h {
            for x in 0..w {
                for o in 0..cout {
                    let mut acc = bias[o];
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let sy = y as isize + ky as isize - 1;
                            let sx = x as isize + kx as isize - 1;
                            if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                continue;
                            }
                            for i in 0..cin {
                                acc += weight[o * 9 * cin + (ky * 3 + kx) * cin + i]
                                    * input[(sy as usize * w + sx as usize) * cin + i];
                            }
                        }
                    }
                    out[(y * w + x) * cout + o] = acc;
                }
            }
        }
        out
    }

    fn pseudo(n: usize, salt: u64) -> Vec<f64> {
        (0..n as u64)
            .map(|i| (((i + salt) * 2654435761) % 1000) as f64 / 500.0 - 1.0)
            .collect()
    }

    #[test]
    fn matches_naive_convolution() {
        let (h, w, cin, cout) = (5, 4, 3, 2);
        let input = pseudo(h * w * cin, 1);
        let weight = pseudo(cout * 9 * cin, 2);
        let bias = vec![0.5, -0.25];
        let mut out = vec![0.0; h * w * cout];
        let mut col = Vec::new();
        conv_forward(&input, h, w, cin, &weight, &bias, cout, &mut col, &mut out);
        let expect = naive(&input, h, w, cin, &weight, &bias, cout);
        for (a, b) in out.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), c> == <x, col2im(c)>
        let (h, w, cin) = (4, 3, 2);
        let x = pseudo(h * w * cin, 3);
        let c = pseudo(h * w * 9 * cin, 4);
        let mut col = vec![0.0; c.len()];
        im2col(&x, h, w, cin, &mut col);
        let lhs: f64 = col.iter().zip(&c).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; x.len()];
        col2im(&c, h, w, cin, &mut back);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
