//! Loss terms and small tensor helpers shared by the models.

use candle_core::{Result, Tensor, D};

pub fn leaky_relu(x: &Tensor) -> Result<Tensor> {
    candle_nn::ops::leaky_relu(x, 0.2)
}

/// `log(1 + exp(x))`, stable for large |x|.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    x.relu()? + (x.abs()?.neg()?.exp()? + 1.0)?.log()?
}

/// Non-saturating adversarial loss for logits that should read "real".
pub fn adv_real(logits: &Tensor) -> Result<Tensor> {
    softplus(&logits.neg()?)?.mean_all()
}

/// Non-saturating adversarial loss for logits that should read "fake".
pub fn adv_fake(logits: &Tensor) -> Result<Tensor> {
    softplus(logits)?.mean_all()
}

pub fn bce_with_logits(logits: &Tensor, target: &Tensor) -> Result<Tensor> {
    (softplus(logits)? - (logits * target)?)?.mean_all()
}

/// `1 - (2 |p t| + 1) / (|p| + |t| + 1)` over the whole batch.
pub fn soft_dice_loss(probs: &Tensor, target: &Tensor) -> Result<Tensor> {
    let inter = (probs * target)?.sum_all()?;
    let total = (probs.sum_all()? + target.sum_all()?)?;
    let ratio = ((inter * 2.0)? + 1.0)?.div(&(total + 1.0)?)?;
    ratio.neg()? + 1.0
}

/// Per-sample instance normalisation over the spatial axes (no affine).
pub fn instance_norm(x: &Tensor) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?.mean_keepdim(D::Minus2)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?.mean_keepdim(D::Minus2)?;
    centered.broadcast_div(&(var + 1e-5)?.sqrt()?)
}

/// Gram matrices `[N, C, C]` of `[N, C, H, W]` features, normalised by C·H·W.
pub fn gram(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let f = x.reshape((n, c, h * w))?;
    f.matmul(&f.t()?)? / (c * h * w) as f64
}

/// `a * (1 - t) + b * t` for scalar `t`.
pub fn lerp(a: &Tensor, b: &Tensor, t: f64) -> Result<Tensor> {
    (a * (1.0 - t))? + (b * t)?
}

/// `inside * mask + outside * (1 - mask)` with a broadcast single-channel mask.
pub fn composite(inside: &Tensor, outside: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let keep = (mask.neg()? + 1.0)?;
    inside.broadcast_mul(mask)? + outside.broadcast_mul(&keep)?
}
