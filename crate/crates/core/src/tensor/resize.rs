//! Bilinear resampling with half-pixel centers (`align_corners = false`).

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
struct Tap {
    lo: usize,
    hi: usize,
    frac: f64,
}

fn taps(input: usize, output: usize) -> Vec<Tap> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            Tap {
                lo,
                hi,
                frac: src - lo as f64,
            }
        })
        .collect()
}

fn check(input: &Tensor, out_h: usize, out_w: usize) -> Result<(usize, usize, usize)> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::Config(format!(
            "bilinear_resize: output dims must be >= 1, got {out_h}x{out_w}"
        )));
    }
    input.chw("bilinear_resize")
}

pub fn bilinear_resize(input: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (c, h, w) = check(input, out_h, out_w)?;
    let ty = taps(h, out_h);
    let tx = taps(w, out_w);
    let x = input.data();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for yt in &ty {
            let r0 = &plane[yt.lo * w..(yt.lo + 1) * w];
            let r1 = &plane[yt.hi * w..(yt.hi + 1) * w];
            for xt in &tx {
                // lerp form keeps constants and identity resizes exact
                let top = r0[xt.lo] + xt.frac * (r0[xt.hi] - r0[xt.lo]);
                let bot = r1[xt.lo] + xt.frac * (r1[xt.hi] - r1[xt.lo]);
                out.push(top + yt.frac * (bot - top));
            }
        }
    }
    Tensor::new(&[c, out_h, out_w], out)
}

/// Adjoint of [`bilinear_resize`]: scatters `grad_out` back onto the input grid.
pub fn bilinear_resize_backward(in_shape: &[usize], grad_out: &Tensor) -> Result<Tensor> {
    let (c, oh, ow) = grad_out.chw("bilinear_resize_backward")?;
    let (h, w) = match in_shape {
        [ic, h, w] if *ic == c => (*h, *w),
        _ => {
            return Err(Error::Dimension {
                op: "bilinear_resize_backward",
                axis: "channels",
                expected: c,
                got: in_shape.first().copied().unwrap_or(0),
            })
        }
    };
    let ty = taps(h, oh);
    let tx = taps(w, ow);
    let g = grad_out.data();
    let mut gx = vec![0.0; c * h * w];
    for ch in 0..c {
        let base = ch * h * w;
        for (oy, yt) in ty.iter().enumerate() {
            for (ox, xt) in tx.iter().enumerate() {
                let gv = g[(ch * oh + oy) * ow + ox];
                let (wy0, wy1) = (1.0 - yt.frac, yt.frac);
                let (wx0, wx1) = (1.0 - xt.frac, xt.frac);
                gx[base + yt.lo * w + xt.lo] += wy0 * wx0 * gv;
                gx[base + yt.lo * w + xt.hi] += wy0 * wx1 * gv;
                gx[base + yt.hi * w + xt.lo] += wy1 * wx0 * gv;
                gx[base + yt.hi * w + xt.hi] += wy1 * wx1 * gv;
            }
        }
    }
    Tensor::new(in_shape, gx)
}
