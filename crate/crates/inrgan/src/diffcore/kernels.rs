//! Dense compute kernels behind the graph primitives.
//!
//! All kernels are deterministic: parallel variants partition work into
//! disjoint output slices and keep a fixed accumulation order inside each
//! slice, so results are bit-identical to sequential evaluation.

use super::array::{NdArray, Scalar};
use crate::error::{Error, Result};
use rayon::prelude::*;

/// Output extent of a convolution axis, or None when the input is undersized.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Valid output range `[lo, hi)` such that `ow*stride + koff` lands in `[0, in_extent)`.
#[inline]
fn valid_range(out_extent: usize, stride: usize, koff: isize, in_extent: usize) -> (usize, usize) {
    let lo = if koff < 0 {
        (((-koff) as usize) + stride - 1) / stride
    } else {
        0
    };
    let upper = in_extent as isize - koff;
    if upper <= 0 {
        return (0, 0);
    }
    let hi = ((upper as usize) + stride - 1) / stride;
    (lo.min(out_extent), hi.min(out_extent))
}

/// 2-D convolution forward. x: [B,C,H,W], w: [O,C,KH,KW], bias: [O] -> [B,O,OH,OW].
pub fn conv2d_forward<F: Scalar>(
    x: &NdArray<F>,
    w: &NdArray<F>,
    bias: &NdArray<F>,
    stride: usize,
    pad: usize,
) -> Result<NdArray<F>> {
    let (b, c, h, wd) = dims4(x, "conv2d input")?;
    let (o, cw, kh, kw) = dims4(w, "conv2d weight")?;
    if cw != c {
        return Err(Error::shape("conv2d", format!("weight channels {} != input {}", cw, c)));
    }
    let oh = conv_out_extent(h, kh, stride, pad)
        .ok_or_else(|| Error::shape("conv2d", format!("input {}x{} undersized for kernel {}", h, wd, kh)))?;
    let ow = conv_out_extent(wd, kw, stride, pad)
        .ok_or_else(|| Error::shape("conv2d", format!("input {}x{} undersized for kernel {}", h, wd, kw)))?;
    if oh == 0 || ow == 0 {
        return Err(Error::shape("conv2d", "empty output extent".to_string()));
    }

    let mut out = NdArray::<F>::zeros(vec![b, o, oh, ow]);
    let xd = x.data();
    let wdata = w.data();
    let bd = bias.data();
    let plane = oh * ow;

    out.data_mut()
        .par_chunks_mut(plane)
        .enumerate()
        .for_each(|(idx, oplane)| {
            let bi = idx / o;
            let oi = idx % o;
            oplane.fill(bd[oi]);
            for ci in 0..c {
                let xplane = &xd[(bi * c + ci) * h * wd..(bi * c + ci + 1) * h * wd];
                let wbase = ((oi * c + ci) * kh) * kw;
                for khi in 0..kh {
                    let wrow = &wdata[wbase + khi * kw..wbase + (khi + 1) * kw];
                    for ohi in 0..oh {
                        let ih = (ohi * stride + khi) as isize - pad as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let xrow = &xplane[ih as usize * wd..(ih as usize + 1) * wd];
                        let orow = &mut oplane[ohi * ow..(ohi + 1) * ow];
                        for (kwi, &wv) in wrow.iter().enumerate() {
                            let koff = kwi as isize - pad as isize;
                            let (lo, hi) = valid_range(ow, stride, koff, wd);
                            if lo >= hi {
                                continue;
                            }
                            if stride == 1 {
                                let src = &xrow[(lo as isize + koff) as usize..(hi as isize + koff) as usize];
                                for (ov, &xv) in orow[lo..hi].iter_mut().zip(src) {
                                    *ov = *ov + wv * xv;
                                }
                            } else {
                                for owi in lo..hi {
                                    let iw = (owi * stride) as isize + koff;
                                    orow[owi] = orow[owi] + wv * xrow[iw as usize];
                                }
                            }
                        }
                    }
                }
            }
        });
    Ok(out)
}

/// Gradients of conv2d w.r.t. (input, weight, bias). Any of the three may be skipped.
pub fn conv2d_backward<F: Scalar>(
    x: &NdArray<F>,
    w: &NdArray<F>,
    grad_out: &NdArray<F>,
    stride: usize,
    pad: usize,
    need_x: bool,
    need_w: bool,
    need_b: bool,
) -> Result<(Option<NdArray<F>>, Option<NdArray<F>>, Option<NdArray<F>>)> {
    let (b, c, h, wd) = dims4(x, "conv2d input")?;
    let (o, _, kh, kw) = dims4(w, "conv2d weight")?;
    let (gb, go, oh, ow) = dims4(grad_out, "conv2d grad")?;
    debug_assert_eq!((gb, go), (b, o));
    let xd = x.data();
    let wdata = w.data();
    let gd = grad_out.data();

    let grad_x = if need_x {
        let mut gx = NdArray::<F>::zeros(vec![b, c, h, wd]);
        gx.data_mut()
            .par_chunks_mut(h * wd)
            .enumerate()
            .for_each(|(idx, xplane)| {
                let bi = idx / c;
                let ci = idx % c;
                for oi in 0..o {
                    let gplane = &gd[(bi * o + oi) * oh * ow..(bi * o + oi + 1) * oh * ow];
                    let wbase = ((oi * c + ci) * kh) * kw;
                    for khi in 0..kh {
                        let wrow = &wdata[wbase + khi * kw..wbase + (khi + 1) * kw];
                        for ohi in 0..oh {
                            let ih = (ohi * stride + khi) as isize - pad as isize;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            let grow = &gplane[ohi * ow..(ohi + 1) * ow];
                            let xrow = &mut xplane[ih as usize * wd..(ih as usize + 1) * wd];
                            for (kwi, &wv) in wrow.iter().enumerate() {
                                let koff = kwi as isize - pad as isize;
                                let (lo, hi) = valid_range(ow, stride, koff, wd);
                                if lo >= hi {
                                    continue;
                                }
                                if stride == 1 {
                                    let dst = &mut xrow[(lo as isize + koff) as usize..(hi as isize + koff) as usize];
                                    for (xv, &gv) in dst.iter_mut().zip(&grow[lo..hi]) {
                                        *xv = *xv + wv * gv;
                                    }
                                } else {
                                    for owi in lo..hi {
                                        let iw = (owi * stride) as isize + koff;
                                        xrow[iw as usize] = xrow[iw as usize] + wv * grow[owi];
                                    }
                                }
                            }
                        }
                    }
                }
            });
        Some(gx)
    } else {
        None
    };

    let grad_w = if need_w {
        let mut gw = NdArray::<F>::zeros(vec![o, c, kh, kw]);
        gw.data_mut()
            .par_chunks_mut(c * kh * kw)
            .enumerate()
            .for_each(|(oi, wslice)| {
                for bi in 0..b {
                    let gplane = &gd[(bi * o + oi) * oh * ow..(bi * o + oi + 1) * oh * ow];
                    for ci in 0..c {
                        let xplane = &xd[(bi * c + ci) * h * wd..(bi * c + ci + 1) * h * wd];
                        for khi in 0..kh {
                            for ohi in 0..oh {
                                let ih = (ohi * stride + khi) as isize - pad as isize;
                                if ih < 0 || ih >= h as isize {
                                    continue;
                                }
                                let xrow = &xplane[ih as usize * wd..(ih as usize + 1) * wd];
                                let grow = &gplane[ohi * ow..(ohi + 1) * ow];
                                for kwi in 0..kw {
                                    let koff = kwi as isize - pad as isize;
                                    let (lo, hi) = valid_range(ow, stride, koff, wd);
                                    if lo >= hi {
                                        continue;
                                    }
                                    let acc = if stride == 1 {
                                        let src = &xrow[(lo as isize + koff) as usize..(hi as isize + koff) as usize];
                                        grow[lo..hi]
                                            .iter()
                                            .zip(src)
                                            .map(|(&g, &x)| g * x)
                                            .sum::<F>()
                                    } else {
                                        let mut s = F::zero();
                                        for owi in lo..hi {
                                            let iw = (owi * stride) as isize + koff;
                                            s = s + grow[owi] * xrow[iw as usize];
                                        }
                                        s
                                    };
                                    let wi = ci * kh * kw + khi * kw + kwi;
                                    wslice[wi] = wslice[wi] + acc;
                                }
                            }
                        }
                    }
                }
            });
        Some(gw)
    } else {
        None
    };

    let grad_b = if need_b {
        let mut db = NdArray::<F>::zeros(vec![o]);
        for oi in 0..o {
            let mut s = F::zero();
            for bi in 0..b {
                let gplane = &gd[(bi * o + oi) * oh * ow..(bi * o + oi + 1) * oh * ow];
                for &g in gplane {
                    s = s + g;
                }
            }
            db.data_mut()[oi] = s;
        }
        Some(db)
    } else {
        None
    };

    Ok((grad_x, grad_w, grad_b))
}

/// Affine map forward. x: [B,I], w: [O,I] (row per output), bias: [O] -> [B,O].
pub fn linear_forward<F: Scalar>(
    x: &NdArray<F>,
    w: &NdArray<F>,
    bias: &NdArray<F>,
) -> Result<NdArray<F>> {
    let (b, i) = dims2(x, "linear input")?;
    let (o, iw) = dims2(w, "linear weight")?;
    if iw != i {
        return Err(Error::shape("linear", format!("weight expects {} inputs, got {}", iw, i)));
    }
    let mut out = NdArray::<F>::zeros(vec![b, o]);
    let xd = x.data();
    let wd = w.data();
    let bd = bias.data();
    for bi in 0..b {
        let xrow = &xd[bi * i..(bi + 1) * i];
        let orow = &mut out.data_mut()[bi * o..(bi + 1) * o];
        for oi in 0..o {
            let wrow = &wd[oi * i..(oi + 1) * i];
            let dot = wrow.iter().zip(xrow).map(|(&a, &b)| a * b).sum::<F>();
            orow[oi] = bd[oi] + dot;
        }
    }
    Ok(out)
}

pub fn linear_backward<F: Scalar>(
    x: &NdArray<F>,
    w: &NdArray<F>,
    grad_out: &NdArray<F>,
    need_x: bool,
    need_w: bool,
    need_b: bool,
) -> Result<(Option<NdArray<F>>, Option<NdArray<F>>, Option<NdArray<F>>)> {
    let (b, i) = dims2(x, "linear input")?;
    let (o, _) = dims2(w, "linear weight")?;
    let gd = grad_out.data();
    let xd = x.data();
    let wd = w.data();

    let grad_x = need_x.then(|| {
        let mut gx = NdArray::<F>::zeros(vec![b, i]);
        for bi in 0..b {
            let grow = &gd[bi * o..(bi + 1) * o];
            let xrow = &mut gx.data_mut()[bi * i..(bi + 1) * i];
            for oi in 0..o {
                let g = grow[oi];
                let wrow = &wd[oi * i..(oi + 1) * i];
                for (xv, &wv) in xrow.iter_mut().zip(wrow) {
                    *xv = *xv + g * wv;
                }
            }
        }
        gx
    });

    let grad_w = need_w.then(|| {
        let mut gw = NdArray::<F>::zeros(vec![o, i]);
        for bi in 0..b {
            let grow = &gd[bi * o..(bi + 1) * o];
            let xrow = &xd[bi * i..(bi + 1) * i];
            for oi in 0..o {
                let g = grow[oi];
                let wrow = &mut gw.data_mut()[oi * i..(oi + 1) * i];
                for (wv, &xv) in wrow.iter_mut().zip(xrow) {
                    *wv = *wv + g * xv;
                }
            }
        }
        gw
    });

    let grad_b = need_b.then(|| {
        let mut db = NdArray::<F>::zeros(vec![o]);
        for bi in 0..b {
            let grow = &gd[bi * o..(bi + 1) * o];
            for (bv, &g) in db.data_mut().iter_mut().zip(grow) {
                *bv = *bv + g;
            }
        }
        db
    });

    Ok((grad_x, grad_w, grad_b))
}

/// Strided (nearest) downsampling: keeps the top-left sample of each k x k block.
pub fn downsample_forward<F: Scalar>(x: &NdArray<F>, factor: usize) -> Result<NdArray<F>> {
    let (b, c, h, w) = dims4(x, "downsample input")?;
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::shape(
            "downsample",
            format!("extent {}x{} not divisible by factor {}", h, w, factor),
        ));
    }
    let (oh, ow) = (h / factor, w / factor);
    let mut out = NdArray::<F>::zeros(vec![b, c, oh, ow]);
    let xd = x.data();
    let od = out.data_mut();
    for p in 0..b * c {
        let xplane = &xd[p * h * w..(p + 1) * h * w];
        let oplane = &mut od[p * oh * ow..(p + 1) * oh * ow];
        for ohi in 0..oh {
            for owi in 0..ow {
                oplane[ohi * ow + owi] = xplane[(ohi * factor) * w + owi * factor];
            }
        }
    }
    Ok(out)
}

pub fn downsample_backward<F: Scalar>(
    x_shape: &[usize],
    grad_out: &NdArray<F>,
    factor: usize,
) -> Result<NdArray<F>> {
    let (b, c, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let (oh, ow) = (h / factor, w / factor);
    let mut gx = NdArray::<F>::zeros(vec![b, c, h, w]);
    let gd = grad_out.data();
    let gxd = gx.data_mut();
    for p in 0..b * c {
        let gplane = &gd[p * oh * ow..(p + 1) * oh * ow];
        let xplane = &mut gxd[p * h * w..(p + 1) * h * w];
        for ohi in 0..oh {
            for owi in 0..ow {
                xplane[(ohi * factor) * w + owi * factor] = gplane[ohi * ow + owi];
            }
        }
    }
    Ok(gx)
}

/// Channel concatenation of [B,C_i,H,W] arrays along axis 1.
pub fn concat_channels_forward<F: Scalar>(inputs: &[&NdArray<F>]) -> Result<NdArray<F>> {
    let (b, _, h, w) = dims4(inputs[0], "concat input")?;
    let mut total_c = 0;
    for inp in inputs {
        let (bi, ci, hi, wi) = dims4(inp, "concat input")?;
        if (bi, hi, wi) != (b, h, w) {
            return Err(Error::shape("concat", "inputs disagree on batch or spatial extents".into()));
        }
        total_c += ci;
    }
    let mut out = NdArray::<F>::zeros(vec![b, total_c, h, w]);
    let plane = h * w;
    let od = out.data_mut();
    for bi in 0..b {
        let mut coff = 0;
        for inp in inputs {
            let ci = inp.shape()[1];
            let src = &inp.data()[bi * ci * plane..(bi + 1) * ci * plane];
            let dst = &mut od[(bi * total_c + coff) * plane..(bi * total_c + coff + ci) * plane];
            dst.copy_from_slice(src);
            coff += ci;
        }
    }
    Ok(out)
}

/// Splits the concat gradient back into per-input gradients (only where needed).
pub fn concat_channels_backward<F: Scalar>(
    input_shapes: &[&[usize]],
    grad_out: &NdArray<F>,
    needs: &[bool],
) -> Vec<Option<NdArray<F>>> {
    let b = input_shapes[0][0];
    let (h, w) = (input_shapes[0][2], input_shapes[0][3]);
    let total_c: usize = input_shapes.iter().map(|s| s[1]).sum();
    let plane = h * w;
    let gd = grad_out.data();
    let mut outs = Vec::with_capacity(input_shapes.len());
    let mut coff = 0;
    for (k, shape) in input_shapes.iter().enumerate() {
        let ci = shape[1];
        if needs[k] {
            let mut g = NdArray::<F>::zeros(shape.to_vec());
            for bi in 0..b {
                let src = &gd[(bi * total_c + coff) * plane..(bi * total_c + coff + ci) * plane];
                let dst = &mut g.data_mut()[bi * ci * plane..(bi + 1) * ci * plane];
                dst.copy_from_slice(src);
            }
            outs.push(Some(g));
        } else {
            outs.push(None);
        }
        coff += ci;
    }
    outs
}

fn dims2<F: Scalar>(a: &NdArray<F>, what: &str) -> Result<(usize, usize)> {
    let s = a.shape();
    if s.len() != 2 {
        return Err(Error::shape(what, format!("expected rank 2, got {:?}", s)));
    }
    Ok((s[0], s[1]))
}

pub(crate) fn dims4<F: Scalar>(a: &NdArray<F>, what: &str) -> Result<(usize, usize, usize, usize)> {
    let s = a.shape();
    if s.len() != 4 {
        return Err(Error::shape(what, format!("expected rank 4, got {:?}", s)));
    }
    Ok((s[0], s[1], s[2], s[3]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_kernel_preserves_image() {
        // 3x3 one-hot center kernel, pad 1: convolution acts as identity.
        let x = NdArray::<f64>::new(vec![1, 1, 4, 5], (0..20).map(|v| v as f64 * 0.1).collect()).unwrap();
        let mut w = NdArray::<f64>::zeros(vec![1, 1, 3, 3]);
        w.data_mut()[4] = 1.0;
        let b = NdArray::<f64>::zeros(vec![1]);
        let y = conv2d_forward(&x, &w, &b, 1, 1).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn stride_two_halves_extent() {
        let x = NdArray::<f32>::zeros(vec![2, 3, 8, 6]);
        let w = NdArray::<f32>::zeros(vec![4, 3, 4, 4]);
        let b = NdArray::<f32>::zeros(vec![4]);
        let y = conv2d_forward(&x, &w, &b, 2, 1).unwrap();
        assert_eq!(y.shape(), &[2, 4, 4, 3]);
    }

    #[test]
    fn undersized_input_is_an_error() {
        let x = NdArray::<f32>::zeros(vec![1, 1, 2, 2]);
        let w = NdArray::<f32>::zeros(vec![1, 1, 5, 5]);
        let b = NdArray::<f32>::zeros(vec![1]);
        assert!(conv2d_forward(&x, &w, &b, 1, 1).is_err());
    }

    #[test]
    fn linear_identity_weight_passes_input_through() {
        let x = NdArray::<f64>::new(vec![2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.5, 4.0]).unwrap();
        let mut w = NdArray::<f64>::zeros(vec![3, 3]);
        for i in 0..3 {
            w.data_mut()[i * 3 + i] = 1.0;
        }
        let b = NdArray::<f64>::zeros(vec![3]);
        let y = linear_forward(&x, &w, &b).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn downsample_picks_block_corners() {
        let x = NdArray::<f64>::new(vec![1, 1, 4, 4], (0..16).map(|v| v as f64).collect()).unwrap();
        let y = downsample_forward(&x, 2).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.data(), &[0.0, 2.0, 8.0, 10.0]);
    }

    #[test]
    fn concat_then_split_roundtrips() {
        let a = NdArray::<f64>::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = NdArray::<f64>::new(vec![1, 2, 2, 2], (0..8).map(|v| v as f64).collect()).unwrap();
        let y = concat_channels_forward(&[&a, &b]).unwrap();
        assert_eq!(y.shape(), &[1, 3, 2, 2]);
        let parts = concat_channels_backward(&[a.shape(), b.shape()], &y, &[true, true]);
        assert_eq!(parts[0].as_ref().unwrap().data(), a.data());
        assert_eq!(parts[1].as_ref().unwrap().data(), b.data());
    }
}
