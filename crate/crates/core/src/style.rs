//! Instance-level style statistics and (de)normalization.
//!
//! The style of a feature map is its per-instance, per-channel mean and
//! standard deviation; the content is what remains after those are divided
//! out. Both the value-level helpers (used to seed the attack) and the
//! graph builders (differentiable, used inside training paths) live here.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{numel, Graph, TensorId};

/// Variance stabilizer added under the square root. Keeps sigma of a
/// constant channel at sqrt(1e-5) instead of 0, so normalized values and the
/// attack's norm-scaled steps stay finite.
pub const STABILIZER: f64 = 1e-5;

/// Per-instance, per-channel (mu, sigma) of a feature map, stored as flat
/// (N, C) rows.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleStats<T> {
    pub mu: Vec<T>,
    pub sigma: Vec<T>,
    pub n: usize,
    pub c: usize,
}

/// Learnable affine parameters of a standalone instance-normalization layer.
/// The backbone itself uses batch normalization; this exists as a utility.
#[derive(Clone, Debug)]
pub struct AffineParams<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

impl<T: Scalar> AffineParams<T> {
    pub fn identity(channels: usize) -> Self {
        AffineParams {
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
        }
    }
}

fn nc_split(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 || numel(shape) == 0 {
        return Err(Error::Invalid(alloc::format!(
            "style ops need a non-empty (N, C, ...) tensor, got {shape:?}"
        )));
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
}

/// Value-level instance statistics: spatial mean and stabilized standard
/// deviation per (instance, channel).
pub fn stats_of<T: Scalar>(x: &[T], shape: &[usize]) -> Result<StyleStats<T>> {
    let (n, c, s) = nc_split(shape)?;
    let inv = T::from_f64(1.0 / s as f64);
    let eps = T::from_f64(STABILIZER);
    let mut mu = vec![T::zero(); n * c];
    let mut sigma = vec![T::zero(); n * c];
    for (i, chunk) in x.chunks_exact(s).enumerate() {
        let mut acc = T::zero();
        for &v in chunk {
            acc += v;
        }
        let m = acc * inv;
        let mut var = T::zero();
        for &v in chunk {
            let d = v - m;
            var += d * d;
        }
        mu[i] = m;
        sigma[i] = (var * inv + eps).sqrt();
    }
    Ok(StyleStats { mu, sigma, n, c })
}

impl<T: Scalar> StyleStats<T> {
    /// Per-instance Euclidean norm over the channel axis; one scalar per
    /// example. Used to scale attack steps proportionally to magnitude.
    pub fn instance_norms(values: &[T], n: usize, c: usize) -> Vec<T> {
        let mut out = vec![T::zero(); n];
        for (o, row) in out.iter_mut().zip(values.chunks_exact(c)) {
            let mut acc = T::zero();
            for &v in row {
                acc += v * v;
            }
            *o = acc.sqrt();
        }
        out
    }
}

/// Differentiable instance statistics: returns graph nodes for mu and sigma,
/// both of shape (N, C). Sigma carries the stabilizer.
pub fn instance_stats<T: Scalar>(g: &mut Graph<T>, x: TensorId) -> Result<(TensorId, TensorId)> {
    nc_split(g.shape(x))?;
    let mu = g.mean_hw(x)?;
    let d = g.sub_nc(x, mu)?;
    let dsq = g.mul(d, d)?;
    let var = g.mean_hw(dsq)?;
    let var_eps = g.add_scalar(var, T::from_f64(STABILIZER));
    let sigma = g.sqrt(var_eps);
    Ok((mu, sigma))
}

/// Differentiable instance normalization: content feature plus the stats it
/// was stripped of.
pub fn instance_normalize<T: Scalar>(
    g: &mut Graph<T>,
    x: TensorId,
) -> Result<(TensorId, TensorId, TensorId)> {
    let (mu, sigma) = instance_stats(g, x)?;
    let d = g.sub_nc(x, mu)?;
    let content = g.div_nc(d, sigma)?;
    Ok((content, mu, sigma))
}

/// Re-applies a style to a content feature: `content * sigma + mu` broadcast
/// over the spatial dims.
pub fn denormalize<T: Scalar>(
    g: &mut Graph<T>,
    content: TensorId,
    mu: TensorId,
    sigma: TensorId,
) -> Result<TensorId> {
    let scaled = g.mul_nc(content, sigma)?;
    g.add_nc(scaled, mu)
}

/// Adaptive instance normalization: the content of `x` restyled with the
/// statistics of `x_style`.
pub fn adain<T: Scalar>(g: &mut Graph<T>, x: TensorId, x_style: TensorId) -> Result<TensorId> {
    let (_, cx, _) = nc_split(g.shape(x))?;
    let (_, cs, _) = nc_split(g.shape(x_style))?;
    if cx != cs {
        return Err(Error::ShapeMismatch {
            op: "adain",
            lhs: g.shape(x).to_vec(),
            rhs: g.shape(x_style).to_vec(),
        });
    }
    let (content, _, _) = instance_normalize(g, x)?;
    let (mu_s, sigma_s) = instance_stats(g, x_style)?;
    denormalize(g, content, mu_s, sigma_s)
}

/// Instance-normalization layer with learnable per-channel scale and shift.
pub fn in_layer<T: Scalar>(
    g: &mut Graph<T>,
    x: TensorId,
    gamma: TensorId,
    beta: TensorId,
) -> Result<TensorId> {
    let (content, _, _) = instance_normalize(g, x)?;
    let scaled = g.mul_c(content, gamma)?;
    g.add_c(scaled, beta)
}
