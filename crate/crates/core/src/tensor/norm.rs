//! Group normalization over `[C, H, W]`.

use super::Tensor;
use crate::error::{Error, Result};

/// Default group count: `min(32, C)`, reduced until it divides `C`.
pub fn default_groups(channels: usize) -> usize {
    let mut g = channels.min(32);
    while channels % g != 0 {
        g -= 1;
    }
    g
}

/// Per-group statistics saved by the forward pass.
#[derive(Debug, Clone)]
pub struct GroupStats {
    pub mean: Vec<f64>,
    pub rstd: Vec<f64>,
}

fn check(input: &Tensor, num_groups: usize, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<(usize, usize)> {
    let (c, h, w) = input.chw("group_norm")?;
    if num_groups == 0 || c % num_groups != 0 {
        return Err(Error::Config(format!(
            "group_norm: {c} channels not divisible into {num_groups} groups"
        )));
    }
    if !(eps > 0.0) {
        return Err(Error::Config(format!("group_norm: eps must be > 0, got {eps}")));
    }
    for (t, axis) in [(gamma, "gamma length"), (beta, "beta length")] {
        if t.rank() != 1 || t.len() != c {
            return Err(Error::Dimension {
                op: "group_norm",
                axis,
                expected: c,
                got: t.len(),
            });
        }
    }
    Ok((c / num_groups, h * w))
}

pub fn group_norm_with_stats(
    input: &Tensor,
    num_groups: usize,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<(Tensor, GroupStats)> {
    let (cpg, hw) = check(input, num_groups, gamma, beta, eps)?;
    let x = input.data();
    let n = (cpg * hw) as f64;
    let mut out = vec![0.0; x.len()];
    let mut stats = GroupStats {
        mean: Vec::with_capacity(num_groups),
        rstd: Vec::with_capacity(num_groups),
    };
    for g in 0..num_groups {
        let span = g * cpg * hw..(g + 1) * cpg * hw;
        let xs = &x[span.clone()];
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let rstd = 1.0 / (var + eps).sqrt();
        for cl in 0..cpg {
            let c = g * cpg + cl;
            let (ga, be) = (gamma[c], beta[c]);
            for i in c * hw..(c + 1) * hw {
                out[i] = (x[i] - mean) * rstd * ga + be;
            }
        }
        stats.mean.push(mean);
        stats.rstd.push(rstd);
    }
    Ok((Tensor::new(input.shape(), out)?, stats))
}

pub fn group_norm(input: &Tensor, num_groups: usize, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    group_norm_with_stats(input, num_groups, gamma, beta, eps).map(|(t, _)| t)
}

/// Gradients with respect to input, gamma and beta.
pub fn group_norm_backward(
    input: &Tensor,
    num_groups: usize,
    gamma: &Tensor,
    stats: &GroupStats,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    input.expect_same_shape(grad_out, "group_norm_backward")?;
    let (c, h, w) = input.chw("group_norm_backward")?;
    let hw = h * w;
    let cpg = c / num_groups;
    let n = (cpg * hw) as f64;
    let x = input.data();
    let gy = grad_out.data();
    let mut gx = vec![0.0; x.len()];
    let mut ggamma = vec![0.0; c];
    let mut gbeta = vec![0.0; c];

    for g in 0..num_groups {
        let (mean, rstd) = (stats.mean[g], stats.rstd[g]);
        let mut sum_dxhat = 0.0;
        let mut sum_dxhat_xhat = 0.0;
        for cl in 0..cpg {
            let ch = g * cpg + cl;
            let mut gg = 0.0;
            let mut gb = 0.0;
            for i in ch * hw..(ch + 1) * hw {
                let xhat = (x[i] - mean) * rstd;
                gg += gy[i] * xhat;
                gb += gy[i];
                let dxhat = gy[i] * gamma[ch];
                sum_dxhat += dxhat;
                sum_dxhat_xhat += dxhat * xhat;
            }
            ggamma[ch] = gg;
            gbeta[ch] = gb;
        }
        for cl in 0..cpg {
            let ch = g * cpg + cl;
            for i in ch * hw..(ch + 1) * hw {
                let xhat = (x[i] - mean) * rstd;
                let dxhat = gy[i] * gamma[ch];
                gx[i] = rstd / n * (n * dxhat - sum_dxhat - xhat * sum_dxhat_xhat);
            }
        }
    }
    Ok((
        Tensor::new(input.shape(), gx)?,
        Tensor::new(&[c], ggamma)?,
        Tensor::new(&[c], gbeta)?,
    ))
}
