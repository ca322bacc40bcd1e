//! Hybrid self-supervised loss: `L = L_ssim + L_rms`.
//!
//! `L_ssim = 1 − mean_i SSIM(∇ŷ_ssim⁽ⁱ⁾, ∇X⁽ⁱ⁾)` with ∇ the Sobel gradient
//! magnitude, and `L_rms = mean_i (σ(ŷ_rms⁽ⁱ⁾) − σ(O(X⁽ⁱ⁾)))²` where σ is
//! the population standard deviation and O the Otsu binarization. The Otsu
//! targets are constants on the tape.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::imageops::{
    binarize, gaussian_window, otsu_threshold, rms_contrast, ssim_window_size, FixedKernel, ImageGray, SSIM_K1,
    SSIM_K2, SSIM_RANGE, SSIM_SIGMA,
};
use crate::tensor::Tensor4;

use super::{item_image, UnetOutputs};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub l_ssim: f32,
    pub l_rms: f32,
    /// Always `l_ssim + l_rms`.
    pub total: f32,
}

#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub l_ssim: Var,
    pub l_rms: Var,
    pub total: Var,
}

impl LossVars {
    pub fn breakdown(&self, tape: &Tape) -> LossBreakdown {
        let get = |v: Var| tape.value(v).data()[0];
        LossBreakdown {
            l_ssim: get(self.l_ssim),
            l_rms: get(self.l_rms),
            total: get(self.total),
        }
    }
}

fn check_single_channel(op: &'static str, tape: &Tape, a: Var, b: Var) -> Result<()> {
    let (sa, sb) = (tape.value(a).shape(), tape.value(b).shape());
    if sa != sb || sa.c != 1 {
        return Err(Error::dim(op, sa, sb));
    }
    Ok(())
}

/// Sobel gradient magnitude of a single-channel batch, zero padded.
pub fn gradient_magnitude_var(tape: &mut Tape, x: Var) -> Result<Var> {
    let mut w = Vec::with_capacity(18);
    for k in [FixedKernel::SobelX, FixedKernel::SobelY] {
        w.extend(k.weights().iter().flatten());
    }
    let w = tape.constant(Tensor4::from_vec([2, 1, 3, 3], w)?);
    let g = tape.conv2d(x, w, None, 1, 1)?;
    Ok(tape.channel_norm(g))
}

/// Per-item mean SSIM of two single-channel batches, shape (n, 1, 1, 1).
pub fn ssim_var(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    check_single_channel("ssim", tape, a, b)?;
    let s = tape.value(a).shape();
    let size = ssim_window_size(s.h, s.w);
    let win: Vec<f32> = gaussian_window(size, SSIM_SIGMA).into_iter().map(|v| v as f32).collect();
    let win = tape.constant(Tensor4::from_vec([1, 1, size, size], win)?);
    let c1 = (SSIM_K1 * SSIM_RANGE).powi(2) as f32;
    let c2 = (SSIM_K2 * SSIM_RANGE).powi(2) as f32;

    let blur = |tape: &mut Tape, v: Var| tape.conv2d(v, win, None, 1, 0);
    let mu_a = blur(tape, a)?;
    let mu_b = blur(tape, b)?;
    let aa = tape.mul(a, a)?;
    let bb = tape.mul(b, b)?;
    let ab = tape.mul(a, b)?;
    let e_aa = blur(tape, aa)?;
    let e_bb = blur(tape, bb)?;
    let e_ab = blur(tape, ab)?;

    let mu_ab = tape.mul(mu_a, mu_b)?;
    let mu_a2 = tape.square(mu_a);
    let mu_b2 = tape.square(mu_b);
    let var_a = tape.sub(e_aa, mu_a2)?;
    let var_b = tape.sub(e_bb, mu_b2)?;
    let cov = tape.sub(e_ab, mu_ab)?;

    let lum_num = tape.mul_scalar(mu_ab, 2.0);
    let lum_num = tape.add_scalar(lum_num, c1);
    let cs_num = tape.mul_scalar(cov, 2.0);
    let cs_num = tape.add_scalar(cs_num, c2);
    let lum_den = tape.add(mu_a2, mu_b2)?;
    let lum_den = tape.add_scalar(lum_den, c1);
    let cs_den = tape.add(var_a, var_b)?;
    let cs_den = tape.add_scalar(cs_den, c2);

    let num = tape.mul(lum_num, cs_num)?;
    let den = tape.mul(lum_den, cs_den)?;
    let map = tape.div(num, den)?;
    Ok(tape.mean_per_item(map))
}

pub fn loss_ssim_var(tape: &mut Tape, y_ssim: Var, x: Var) -> Result<Var> {
    check_single_channel("loss_ssim", tape, y_ssim, x)?;
    let gy = gradient_magnitude_var(tape, y_ssim)?;
    let gx = gradient_magnitude_var(tape, x)?;
    let s = ssim_var(tape, gy, gx)?;
    let m = tape.mean(s);
    let neg = tape.mul_scalar(m, -1.0);
    Ok(tape.add_scalar(neg, 1.0))
}

/// RMS contrast of the Otsu binarization; 0 when the image is too flat to
/// threshold.
pub fn rms_target(x: &ImageGray) -> f32 {
    match otsu_threshold(x) {
        Ok(t) => rms_contrast(&binarize(x, t).to_gray()) as f32,
        Err(_) => 0.0,
    }
}

fn rms_targets(x: &Tensor4) -> Result<Tensor4> {
    let s = x.shape();
    let targets = (0..s.n)
        .map(|n| item_image(x, n).map(|img| rms_target(&img)))
        .collect::<Result<Vec<_>>>()?;
    Tensor4::from_vec([s.n, 1, 1, 1], targets)
}

/// `targets` holds one RMS target per batch item, shape (n, 1, 1, 1).
pub fn loss_rms_var(tape: &mut Tape, y_rms: Var, targets: &Tensor4) -> Result<Var> {
    let n = tape.value(y_rms).shape().n;
    if targets.len() != n {
        return Err(Error::dim("loss_rms", tape.value(y_rms).shape(), targets.shape()));
    }
    let sd = tape.std_per_item(y_rms);
    let t = tape.constant(targets.clone().reshape([n, 1, 1, 1])?);
    let d = tape.sub(sd, t)?;
    let sq = tape.square(d);
    Ok(tape.mean(sq))
}

pub fn hybrid_loss_var(tape: &mut Tape, y_ssim: Var, y_rms: Var, x: Var) -> Result<LossVars> {
    check_single_channel("hybrid_loss", tape, y_rms, x)?;
    let targets = rms_targets(tape.value(x))?;
    let l_ssim = loss_ssim_var(tape, y_ssim, x)?;
    let l_rms = loss_rms_var(tape, y_rms, &targets)?;
    let total = tape.add(l_ssim, l_rms)?;
    Ok(LossVars { l_ssim, l_rms, total })
}

pub fn loss_ssim(y_ssim: &Tensor4, x: &Tensor4) -> Result<f32> {
    let mut tape = Tape::inference();
    let (y, xv) = (tape.constant(y_ssim.clone()), tape.constant(x.clone()));
    let l = loss_ssim_var(&mut tape, y, xv)?;
    Ok(tape.value(l).data()[0])
}

pub fn loss_rms(y_rms: &Tensor4, x: &Tensor4) -> Result<f32> {
    if y_rms.shape() != x.shape() {
        return Err(Error::dim("loss_rms", y_rms.shape(), x.shape()));
    }
    let targets = rms_targets(x)?;
    let mut tape = Tape::inference();
    let y = tape.constant(y_rms.clone());
    let l = loss_rms_var(&mut tape, y, &targets)?;
    Ok(tape.value(l).data()[0])
}

pub fn hybrid_loss(out: &UnetOutputs, x: &Tensor4) -> Result<LossBreakdown> {
    let mut tape = Tape::inference();
    let ys = tape.constant(out.y_ssim.clone());
    let yr = tape.constant(out.y_rms.clone());
    let xv = tape.constant(x.clone());
    Ok(hybrid_loss_var(&mut tape, ys, yr, xv)?.breakdown(&tape))
}
