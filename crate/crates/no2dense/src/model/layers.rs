//! Building blocks: 2-d convolutions over store-registered parameters,
//! batch normalization with tracked running statistics, and the
//! conv-norm-relu block both backbones are assembled from.

use candle_core::{Tensor, Var};
use rand::Rng;

use super::params::{he_normal, ones, zeros, ParamStore};
use crate::error::Result;

pub struct Conv2dLayer {
    weight: Tensor,
    bias: Option<Tensor>,
    padding: usize,
}

impl Conv2dLayer {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        padding: usize,
        bias: bool,
    ) -> Result<Self> {
        let fan_in = in_ch * kernel * kernel;
        let shape = [out_ch, in_ch, kernel, kernel];
        let weight = store.param(
            &format!("{name}.weight"),
            &shape,
            he_normal(rng, &shape, fan_in),
        )?;
        let bias = if bias {
            Some(store.param(&format!("{name}.bias"), &[out_ch], zeros(&[out_ch]))?)
        } else {
            None
        };
        Ok(Conv2dLayer {
            weight,
            bias,
            padding,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.forward_with_padding(x, self.padding)
    }

    /// Forward with an explicit padding override. The interior readout path
    /// runs the same kernel with zero padding on a narrowed slab.
    pub fn forward_with_padding(&self, x: &Tensor, padding: usize) -> Result<Tensor> {
        let y = x.conv2d(&self.weight, padding, 1, 1, 1)?;
        match &self.bias {
            Some(b) => {
                let out_ch = b.dims1()?;
                Ok(y.broadcast_add(&b.reshape((1, out_ch, 1, 1))?)?)
            }
            None => Ok(y),
        }
    }
}

pub struct ConvTranspose2dLayer {
    weight: Tensor,
    bias: Tensor,
}

impl ConvTranspose2dLayer {
    /// 2x2 transposed convolution with stride 2 (doubles spatial dims).
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        in_ch: usize,
        out_ch: usize,
    ) -> Result<Self> {
        let shape = [in_ch, out_ch, 2, 2];
        let weight = store.param(
            &format!("{name}.weight"),
            &shape,
            he_normal(rng, &shape, in_ch * 4),
        )?;
        let bias = store.param(&format!("{name}.bias"), &[out_ch], zeros(&[out_ch]))?;
        Ok(ConvTranspose2dLayer { weight, bias })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv_transpose2d(&self.weight, 0, 0, 2, 1)?;
        let out_ch = self.bias.dims1()?;
        Ok(y.broadcast_add(&self.bias.reshape((1, out_ch, 1, 1))?)?)
    }
}

/// Per-batch channel normalization with tracked running statistics.
///
/// Training mode normalizes with batch statistics and updates the running
/// mean/variance; evaluation mode applies the stored statistics, which makes
/// the forward pass a deterministic per-channel affine map.
pub struct BatchNorm2d {
    gamma: Tensor,
    beta: Tensor,
    running_mean: Var,
    running_var: Var,
    eps: f64,
    momentum: f64,
}

impl BatchNorm2d {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        _rng: &mut R,
        name: &str,
        channels: usize,
    ) -> Result<Self> {
        let gamma = store.param(&format!("{name}.gamma"), &[channels], ones(&[channels]))?;
        let beta = store.param(&format!("{name}.beta"), &[channels], zeros(&[channels]))?;
        let running_mean = store.buffer(&format!("{name}.running_mean"), &[channels], 0.0)?;
        let running_var = store.buffer(&format!("{name}.running_var"), &[channels], 1.0)?;
        Ok(BatchNorm2d {
            gamma,
            beta,
            running_mean,
            running_var,
            eps: 1e-5,
            momentum: 0.1,
        })
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let (_, c, _, _) = x.dims4()?;
        let (mean, var) = if train {
            // flatten to (c, b*h*w) and take per-channel moments
            let xt = x.transpose(0, 1)?.flatten_from(1)?.contiguous()?;
            let n = xt.dims2()?.1 as f64;
            let mean = xt.mean(1)?;
            let centered = xt.broadcast_sub(&mean.reshape((c, 1))?)?;
            let var = centered.sqr()?.mean(1)?;

            let new_mean = self
                .running_mean
                .as_tensor()
                .affine(1.0 - self.momentum, 0.0)?
                .add(&mean.detach().affine(self.momentum, 0.0)?)?;
            self.running_mean.set(&new_mean)?;
            // running variance tracks the unbiased estimate
            let unbias = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
            let new_var = self
                .running_var
                .as_tensor()
                .affine(1.0 - self.momentum, 0.0)?
                .add(&var.detach().affine(self.momentum * unbias, 0.0)?)?;
            self.running_var.set(&new_var)?;
            (mean, var)
        } else {
            (
                self.running_mean.as_tensor().clone(),
                self.running_var.as_tensor().clone(),
            )
        };
        let mean = mean.reshape((1, c, 1, 1))?;
        let std = var.reshape((1, c, 1, 1))?.affine(1.0, self.eps)?.sqrt()?;
        let gamma = self.gamma.reshape((1, c, 1, 1))?;
        let beta = self.beta.reshape((1, c, 1, 1))?;
        Ok(x.broadcast_sub(&mean)?
            .broadcast_div(&std)?
            .broadcast_mul(&gamma)?
            .broadcast_add(&beta)?)
    }
}

/// Two conv-norm-relu stages at a fixed channel width.
pub struct ConvBlock {
    conv1: Conv2dLayer,
    bn1: BatchNorm2d,
    conv2: Conv2dLayer,
    bn2: BatchNorm2d,
}

impl ConvBlock {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        in_ch: usize,
        out_ch: usize,
    ) -> Result<Self> {
        Ok(ConvBlock {
            conv1: Conv2dLayer::new(store, rng, &format!("{name}.conv1"), in_ch, out_ch, 3, 1, false)?,
            bn1: BatchNorm2d::new(store, rng, &format!("{name}.bn1"), out_ch)?,
            conv2: Conv2dLayer::new(store, rng, &format!("{name}.conv2"), out_ch, out_ch, 3, 1, false)?,
            bn2: BatchNorm2d::new(store, rng, &format!("{name}.bn2"), out_ch)?,
        })
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let x = self.bn1.forward(&self.conv1.forward(x)?, train)?.relu()?;
        Ok(self.bn2.forward(&self.conv2.forward(&x)?, train)?.relu()?)
    }
}
