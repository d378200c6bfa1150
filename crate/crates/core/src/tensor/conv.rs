//! Direct-loop 2D cross-correlation over `[C, H, W]` maps with zero padding.

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

/// Geometry of a square-kernel grouped convolution.
///
/// `groups == in_channels` gives a depthwise convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvSpec {
    /// 3x3 stride-1 convolution that keeps spatial dims.
    pub fn same3x3(in_channels: usize, out_channels: usize, groups: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel_size: 3,
            stride: 1,
            padding: 1,
            groups,
        }
    }

    pub fn pointwise(in_channels: usize, out_channels: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel_size: 1,
            stride: 1,
            padding: 0,
            groups: 1,
        }
    }

    pub fn depthwise3x3(channels: usize) -> Self {
        ConvSpec::same3x3(channels, channels, channels)
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 || self.kernel_size == 0 {
            return Err(Error::Config(format!(
                "conv channels and kernel size must be positive: {self:?}"
            )));
        }
        if self.stride == 0 || self.groups == 0 {
            return Err(Error::Config(format!(
                "conv stride and groups must be >= 1: {self:?}"
            )));
        }
        if self.in_channels % self.groups != 0 || self.out_channels % self.groups != 0 {
            return Err(Error::Config(format!(
                "in_channels {} and out_channels {} must both be divisible by groups {}",
                self.in_channels, self.out_channels, self.groups
            )));
        }
        Ok(())
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [
            self.out_channels,
            self.in_channels / self.groups,
            self.kernel_size,
            self.kernel_size,
        ]
    }

    pub fn fan_in(&self) -> usize {
        self.in_channels / self.groups * self.kernel_size * self.kernel_size
    }

    /// Output extent along one spatial axis, or `None` if it would be empty.
    pub fn output_extent(&self, input: usize) -> Option<usize> {
        let padded = input + 2 * self.padding;
        if padded < self.kernel_size {
            return None;
        }
        Some((padded - self.kernel_size) / self.stride + 1)
    }

    fn check(&self, input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Geometry> {
        self.validate()?;
        let (c, h, w) = input.chw("conv2d")?;
        if c != self.in_channels {
            return Err(Error::Dimension {
                op: "conv2d",
                axis: "input channels",
                expected: self.in_channels,
                got: c,
            });
        }
        let ws = self.weight_shape();
        if weight.rank() != 4 {
            return Err(Error::Dimension {
                op: "conv2d",
                axis: "weight rank",
                expected: 4,
                got: weight.rank(),
            });
        }
        const WEIGHT_AXES: [&str; 4] = [
            "weight out_channels",
            "weight in_channels/groups",
            "weight kernel height",
            "weight kernel width",
        ];
        for (axis, (&want, &got)) in ws.iter().zip(weight.shape()).enumerate() {
            if want != got {
                return Err(Error::Dimension {
                    op: "conv2d",
                    axis: WEIGHT_AXES[axis],
                    expected: want,
                    got,
                });
            }
        }
        if bias.rank() != 1 || bias.len() != self.out_channels {
            return Err(Error::Dimension {
                op: "conv2d",
                axis: "bias length",
                expected: self.out_channels,
                got: bias.len(),
            });
        }
        let oh = self.output_extent(h).ok_or_else(|| {
            Error::Config(format!("conv2d output height is empty for input height {h}"))
        })?;
        let ow = self.output_extent(w).ok_or_else(|| {
            Error::Config(format!("conv2d output width is empty for input width {w}"))
        })?;
        Ok(Geometry { h, w, oh, ow })
    }
}

struct Geometry {
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
}

/// Valid output coordinates `o` with `o*stride + k - pad` inside `[0, extent)`.
#[inline]
fn out_range(k: usize, pad: usize, stride: usize, extent: usize, out: usize) -> (usize, usize) {
    // o*stride + k >= pad  and  o*stride + k - pad < extent
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    let hi_excl = if extent + pad > k {
        ((extent + pad - k - 1) / stride + 1).min(out)
    } else {
        0
    };
    (lo, hi_excl.max(lo))
}

pub fn conv2d(input: &Tensor, spec: &ConvSpec, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let g = spec.check(input, weight, bias)?;
    let (k, s, p) = (spec.kernel_size, spec.stride, spec.padding);
    let cin_g = spec.in_channels / spec.groups;
    let cout_g = spec.out_channels / spec.groups;
    let x = input.data();
    let wt = weight.data();
    let mut out = vec![0.0; spec.out_channels * g.oh * g.ow];

    for co in 0..spec.out_channels {
        let group = co / cout_g;
        let plane = &mut out[co * g.oh * g.ow..(co + 1) * g.oh * g.ow];
        plane.fill(bias[co]);
        for cil in 0..cin_g {
            let ci = group * cin_g + cil;
            let xin = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            for ky in 0..k {
                let (oy0, oy1) = out_range(ky, p, s, g.h, g.oh);
                for kx in 0..k {
                    let wv = wt[((co * cin_g + cil) * k + ky) * k + kx];
                    let (ox0, ox1) = out_range(kx, p, s, g.w, g.ow);
                    for oy in oy0..oy1 {
                        let iy = oy * s + ky - p;
                        let row = &xin[iy * g.w..(iy + 1) * g.w];
                        let orow = &mut plane[oy * g.ow..(oy + 1) * g.ow];
                        for ox in ox0..ox1 {
                            orow[ox] += wv * row[ox * s + kx - p];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[spec.out_channels, g.oh, g.ow], out)
}

/// Gradients of [`conv2d`] with respect to input, weight and bias.
pub fn conv2d_backward(
    input: &Tensor,
    spec: &ConvSpec,
    weight: &Tensor,
    bias: &Tensor,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let g = spec.check(input, weight, bias)?;
    grad_out.expect_same_shape(
        &Tensor::zeros(&[spec.out_channels, g.oh, g.ow]),
        "conv2d_backward",
    )?;
    let (k, s, p) = (spec.kernel_size, spec.stride, spec.padding);
    let cin_g = spec.in_channels / spec.groups;
    let cout_g = spec.out_channels / spec.groups;
    let x = input.data();
    let wt = weight.data();
    let go = grad_out.data();
    let mut gx = vec![0.0; x.len()];
    let mut gw = vec![0.0; wt.len()];
    let mut gb = vec![0.0; spec.out_channels];

    for co in 0..spec.out_channels {
        let group = co / cout_g;
        let gplane = &go[co * g.oh * g.ow..(co + 1) * g.oh * g.ow];
        gb[co] = gplane.iter().sum();
        for cil in 0..cin_g {
            let ci = group * cin_g + cil;
            let base = ci * g.h * g.w;
            for ky in 0..k {
                let (oy0, oy1) = out_range(ky, p, s, g.h, g.oh);
                for kx in 0..k {
                    let widx = ((co * cin_g + cil) * k + ky) * k + kx;
                    let wv = wt[widx];
                    let (ox0, ox1) = out_range(kx, p, s, g.w, g.ow);
                    let mut acc = 0.0;
                    for oy in oy0..oy1 {
                        let iy = oy * s + ky - p;
                        for ox in ox0..ox1 {
                            let ix = ox * s + kx - p;
                            let gv = gplane[oy * g.ow + ox];
                            acc += x[base + iy * g.w + ix] * gv;
                            gx[base + iy * g.w + ix] += wv * gv;
                        }
                    }
                    gw[widx] += acc;
                }
            }
        }
    }
    Ok((
        Tensor::new(input.shape(), gx)?,
        Tensor::new(weight.shape(), gw)?,
        Tensor::new(bias.shape(), gb)?,
    ))
}
