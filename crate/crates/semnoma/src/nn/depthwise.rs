//! Direct depthwise 2-D convolution (stride 1, odd kernel, same padding) as a
//! candle custom op with an analytic backward pass.
//!
//! The forward loops are shift-accumulate over rows so the inner loop is a
//! contiguous axpy the compiler vectorizes. The input gradient reuses the
//! forward kernel with spatially flipped weights (exact for stride 1 and
//! pad = (k-1)/2); the weight gradient is a second direct kernel.

use crate::error::{Error, Result};
use candle_core::{CpuStorage, CustomOp2, Layout, Shape, Tensor};

/// Depthwise convolution of `x` (B,C,H,W) with `weight` (C,K,K), stride 1,
/// padding (K-1)/2, optional per-channel bias. Differentiable in both `x`
/// and `weight`.
pub fn depthwise_conv(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (_, c, _, _) = x.dims4().map_err(|_| {
        Error::shape(format!("depthwise_conv expects a 4-D input, got {:?}", x.dims()))
    })?;
    let (wc, kh, kw) = weight.dims3().map_err(candle_core::Error::from)?;
    if wc != c || kh != kw || kh % 2 == 0 {
        return Err(Error::shape(format!(
            "depthwise weight must be (C,{kh},{kh}) with odd K matching C={c}, got {:?}",
            weight.dims()
        )));
    }
    let y = x
        .contiguous()?
        .apply_op2(&weight.contiguous()?, DepthwiseConv { k: kh })?;
    match bias {
        Some(b) => Ok(y.broadcast_add(&b.reshape((1, c, 1, 1))?)?),
        None => Ok(y),
    }
}

#[derive(Debug, Clone, Copy)]
struct DepthwiseConv {
    k: usize,
}

fn f32_slice<'a>(s: &'a CpuStorage, l: &Layout, what: &str) -> candle_core::Result<&'a [f32]> {
    let (start, end) = l.contiguous_offsets().ok_or_else(|| {
        candle_core::Error::Msg(format!("depthwise-conv: {what} must be contiguous"))
    })?;
    match s {
        CpuStorage::F32(v) => Ok(&v[start..end]),
        _ => Err(candle_core::Error::Msg(format!(
            "depthwise-conv: {what} must be f32"
        ))),
    }
}

impl CustomOp2 for DepthwiseConv {
    fn name(&self) -> &'static str {
        "depthwise-conv"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let xs = f32_slice(s1, l1, "input")?;
        let ws = f32_slice(s2, l2, "weight")?;
        let (bsz, ch, h, w) = l1.shape().dims4()?;
        let k = self.k;
        let pad = (k - 1) / 2;
        let mut out = vec![0f32; bsz * ch * h * w];
        for b in 0..bsz {
            for c in 0..ch {
                let xp = &xs[(b * ch + c) * h * w..][..h * w];
                let op = &mut out[(b * ch + c) * h * w..][..h * w];
                let wc = &ws[c * k * k..][..k * k];
                accumulate_shifted(op, xp, wc, h, w, k, pad);
            }
        }
        Ok((CpuStorage::F32(out), l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        weight: &Tensor,
        _res: &Tensor,
        grad_res: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let (c, k, _) = weight.dims3()?;
        // d/dx: correlate the output gradient with the flipped kernel.
        let wd = weight.flatten_all()?.to_vec1::<f32>()?;
        let mut flipped = vec![0f32; wd.len()];
        for ci in 0..c {
            for i in 0..k * k {
                flipped[ci * k * k + i] = wd[ci * k * k + (k * k - 1 - i)];
            }
        }
        let wf = Tensor::from_vec(flipped, (c, k, k), weight.device())?;
        let grad = grad_res.contiguous()?;
        let dx = grad.apply_op2(&wf, DepthwiseConv { k })?;
        let dw = x.contiguous()?.apply_op2(&grad, DepthwiseWeightGrad { k })?;
        Ok((Some(dx), Some(dw)))
    }
}

/// out[y,x] += w[dy,dx] * in[y+dy-pad, x+dx-pad] over the valid region.
fn accumulate_shifted(out: &mut [f32], inp: &[f32], wc: &[f32], h: usize, w: usize, k: usize, pad: usize) {
    for dy in 0..k {
        let sy = dy as isize - pad as isize;
        for dx in 0..k {
            let sx = dx as isize - pad as isize;
            let wv = wc[dy * k + dx];
            let y0 = (-sy).max(0) as usize;
            let y1 = ((h as isize - sy).min(h as isize)).max(0) as usize;
            let x0 = (-sx).max(0) as usize;
            let x1 = ((w as isize - sx).min(w as isize)).max(0) as usize;
            if x0 >= x1 {
                continue;
            }
            for y in y0..y1 {
                let iy = (y as isize + sy) as usize;
                let orow = &mut out[y * w + x0..y * w + x1];
                let irow = &inp[iy * w + (x0 as isize + sx) as usize..][..x1 - x0];
                for (o, i) in orow.iter_mut().zip(irow) {
                    *o += wv * i;
                }
            }
        }
    }
}

/// (x, grad) -> dW, with dW[c,dy,dx] = sum_{b,y,x} grad[b,c,y,x] * xpad[b,c,y+dy-pad,x+dx-pad].
#[derive(Debug, Clone, Copy)]
struct DepthwiseWeightGrad {
    k: usize,
}

impl CustomOp2 for DepthwiseWeightGrad {
    fn name(&self) -> &'static str {
        "depthwise-weight-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let xs = f32_slice(s1, l1, "input")?;
        let gs = f32_slice(s2, l2, "grad")?;
        let (bsz, ch, h, w) = l1.shape().dims4()?;
        let k = self.k;
        let pad = (k - 1) / 2;
        let mut dw = vec![0f32; ch * k * k];
        for b in 0..bsz {
            for c in 0..ch {
                let xp = &xs[(b * ch + c) * h * w..][..h * w];
                let gp = &gs[(b * ch + c) * h * w..][..h * w];
                let wc = &mut dw[c * k * k..][..k * k];
                for dy in 0..k {
                    let sy = dy as isize - pad as isize;
                    for dx in 0..k {
                        let sx = dx as isize - pad as isize;
                        let y0 = (-sy).max(0) as usize;
                        let y1 = ((h as isize - sy).min(h as isize)).max(0) as usize;
                        let x0 = (-sx).max(0) as usize;
                        let x1 = ((w as isize - sx).min(w as isize)).max(0) as usize;
                        if x0 >= x1 {
                            continue;
                        }
                        let mut acc = 0f32;
                        for y in y0..y1 {
                            let iy = (y as isize + sy) as usize;
                            let grow = &gp[y * w + x0..y * w + x1];
                            let irow = &xp[iy * w + (x0 as isize + sx) as usize..][..x1 - x0];
                            for (g, i) in grow.iter().zip(irow) {
                                acc += g * i;
                            }
                        }
                        wc[dy * k + dx] += acc;
                    }
                }
            }
        }
        Ok((CpuStorage::F32(dw), Shape::from_dims(&[ch, k, k])))
    }
}
