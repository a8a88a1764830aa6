//! Differentiable layers with explicit backward passes.
//!
//! Every forward function returns its output together with a context
//! value holding whatever the backward pass needs. Contexts are consumed
//! by `backward`, so each forward is differentiated at most once.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// Axis-aligned box; `x0`/`y0` inclusive, `x1`/`y1` exclusive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Roi {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Roi {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Roi { x0, y0, x1, y1 }
    }

    pub fn full(width: usize, height: usize) -> Self {
        Roi::new(0.0, 0.0, width as f64, height as f64)
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn validate(&self, width: usize, height: usize) -> Result<()> {
        let ok = [self.x0, self.y0, self.x1, self.y1]
            .iter()
            .all(|v| v.is_finite())
            && 0.0 <= self.x0
            && self.x0 < self.x1
            && self.x1 <= width as f64
            && 0.0 <= self.y0
            && self.y0 < self.y1
            && self.y1 <= height as f64;
        if ok {
            Ok(())
        } else {
            Err(Error::Validation(format!(
                "roi {self:?} outside {width}x{height}"
            )))
        }
    }

    /// Maps an image-space box onto a feature map with the given
    /// cumulative stride: floor the start, ceil the end, keep at least
    /// one cell, clamp to the map.
    pub fn to_feature(&self, stride: usize, fw: usize, fh: usize) -> Roi {
        let s = stride as f64;
        let map = |lo: f64, hi: f64, n: usize| {
            let n = n as f64;
            let mut a = (lo / s).floor().clamp(0.0, n - 1.0);
            let mut b = (hi / s).ceil().clamp(0.0, n);
            if b <= a {
                b = (a + 1.0).min(n);
                a = b - 1.0;
            }
            (a, b)
        };
        let (x0, x1) = map(self.x0, self.x1, fw);
        let (y0, y1) = map(self.y0, self.y1, fh);
        Roi { x0, y0, x1, y1 }
    }
}

fn dims3(t: &Tensor, what: &str) -> Result<(usize, usize, usize)> {
    match *t.dims() {
        [c, h, w] => Ok((c, h, w)),
        ref d => shape_err(format!("{what} must be C x H x W, got {d:?}")),
    }
}

// ---------------------------------------------------------------------------
// conv2d

#[derive(Debug)]
pub struct Conv2dCtx {
    input: Tensor,
    stride: usize,
}

#[derive(Debug, Clone)]
pub struct ConvGrads {
    pub input: Tensor,
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Square-kernel convolution. Kernels larger than one use same padding
/// (`k / 2`), so the output is `ceil(H / stride) x ceil(W / stride)`.
pub fn conv2d(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
) -> Result<(Tensor, Conv2dCtx)> {
    let (cin, h, w) = dims3(input, "conv input")?;
    let (cout, wcin, k) = match *weight.dims() {
        [o, i, kh, kw] if kh == kw => (o, i, kh),
        ref d => return shape_err(format!("conv weight must be O x I x k x k, got {d:?}")),
    };
    if wcin != cin {
        return shape_err(format!(
            "conv input has {cin} channels but weight {:?} expects {wcin}",
            weight.dims()
        ));
    }
    if bias.dims() != [cout] {
        return shape_err(format!("conv bias {:?} vs {cout} outputs", bias.dims()));
    }
    if k % 2 == 0 {
        return Err(Error::Config(format!("conv kernel size {k} must be odd")));
    }
    if stride == 0 {
        return Err(Error::Config("conv stride must be positive".into()));
    }
    if h < k || w < k {
        return shape_err(format!("conv input {h}x{w} smaller than kernel {k}"));
    }
    let pad = k / 2;
    let (oh, ow) = (h.div_ceil(stride), w.div_ceil(stride));
    let x = input.data();
    let wt = weight.data();
    let mut out = vec![0.0; cout * oh * ow];
    for co in 0..cout {
        let b = bias.data()[co];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut s = b;
                for ci in 0..cin {
                    let wbase = (co * cin + ci) * k * k;
                    let xbase = ci * h * w;
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let row = xbase + iy as usize * w;
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            s += wt[wbase + ky * k + kx] * x[row + ix as usize];
                        }
                    }
                }
                out[(co * oh + oy) * ow + ox] = s;
            }
        }
    }
    let out = Tensor::new(vec![cout, oh, ow], out)?;
    Ok((
        out,
        Conv2dCtx {
            input: input.clone(),
            stride,
        },
    ))
}

impl Conv2dCtx {
    pub fn backward(self, weight: &Tensor, grad_out: &Tensor) -> Result<ConvGrads> {
        let (cin, h, w) = dims3(&self.input, "conv input")?;
        let (cout, k) = (weight.dims()[0], weight.dims()[2]);
        let stride = self.stride;
        let pad = k / 2;
        let (oh, ow) = (h.div_ceil(stride), w.div_ceil(stride));
        if grad_out.dims() != [cout, oh, ow] {
            return shape_err(format!(
                "conv grad {:?} vs output {:?}",
                grad_out.dims(),
                [cout, oh, ow]
            ));
        }
        let x = self.input.data();
        let wt = weight.data();
        let g = grad_out.data();
        let mut gx = vec![0.0; x.len()];
        let mut gw = vec![0.0; wt.len()];
        let mut gb = vec![0.0; cout];
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let go = g[(co * oh + oy) * ow + ox];
                    if go == 0.0 {
                        continue;
                    }
                    gb[co] += go;
                    for ci in 0..cin {
                        let wbase = (co * cin + ci) * k * k;
                        let xbase = ci * h * w;
                        for ky in 0..k {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let row = xbase + iy as usize * w;
                            for kx in 0..k {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let xi = row + ix as usize;
                                let wi = wbase + ky * k + kx;
                                gw[wi] += go * x[xi];
                                gx[xi] += go * wt[wi];
                            }
                        }
                    }
                }
            }
        }
        Ok(ConvGrads {
            input: Tensor::new(self.input.dims().to_vec(), gx)?,
            weight: Tensor::new(weight.dims().to_vec(), gw)?,
            bias: Tensor::new(vec![cout], gb)?,
        })
    }
}

// ---------------------------------------------------------------------------
// fully connected

#[derive(Debug)]
pub struct FcCtx {
    input: Tensor,
}

#[derive(Debug, Clone)]
pub struct FcGrads {
    pub input: Tensor,
    pub weight: Tensor,
    pub bias: Tensor,
}

/// `weight . input + bias`; multi-axis inputs are flattened row-major.
pub fn fully_connected(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<(Tensor, FcCtx)> {
    let (out_n, in_n) = match *weight.dims() {
        [o, i] => (o, i),
        ref d => return shape_err(format!("fc weight must be rank 2, got {d:?}")),
    };
    if input.len() != in_n {
        return shape_err(format!(
            "fc input of {} values vs weight {:?}",
            input.len(),
            weight.dims()
        ));
    }
    if bias.dims() != [out_n] {
        return shape_err(format!("fc bias {:?} vs {out_n} outputs", bias.dims()));
    }
    let x = input.data();
    let out: Vec<f64> = weight
        .data()
        .chunks_exact(in_n)
        .zip(bias.data())
        .map(|(row, b)| b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>())
        .collect();
    Ok((
        Tensor::new(vec![out_n], out)?,
        FcCtx {
            input: input.clone(),
        },
    ))
}

impl FcCtx {
    pub fn backward(self, weight: &Tensor, grad_out: &Tensor) -> Result<FcGrads> {
        let (out_n, in_n) = (weight.dims()[0], weight.dims()[1]);
        if grad_out.len() != out_n {
            return shape_err(format!("fc grad of {} vs {out_n} outputs", grad_out.len()));
        }
        let x = self.input.data();
        let g = grad_out.data();
        let mut gx = vec![0.0; in_n];
        let mut gw = vec![0.0; out_n * in_n];
        for (o, &go) in g.iter().enumerate() {
            if go == 0.0 {
                continue;
            }
            let row = &weight.data()[o * in_n..(o + 1) * in_n];
            let grow = &mut gw[o * in_n..(o + 1) * in_n];
            for i in 0..in_n {
                grow[i] = go * x[i];
                gx[i] += go * row[i];
            }
        }
        Ok(FcGrads {
            input: Tensor::new(self.input.dims().to_vec(), gx)?,
            weight: Tensor::new(weight.dims().to_vec(), gw)?,
            bias: Tensor::new(vec![out_n], g.to_vec())?,
        })
    }
}

// ---------------------------------------------------------------------------
// activations

#[derive(Debug)]
pub struct ReluCtx {
    pre: Tensor,
}

pub fn relu(input: &Tensor) -> (Tensor, ReluCtx) {
    let out = Tensor::new(
        input.dims().to_vec(),
        input.data().iter().map(|&v| v.max(0.0)).collect(),
    )
    .expect("relu preserves shape and finiteness");
    (out, ReluCtx { pre: input.clone() })
}

impl ReluCtx {
    pub fn backward(self, grad_out: &Tensor) -> Result<Tensor> {
        if grad_out.dims() != self.pre.dims() {
            return shape_err("relu grad shape");
        }
        let data = self
            .pre
            .data()
            .iter()
            .zip(grad_out.data())
            .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
            .collect();
        Tensor::new(self.pre.dims().to_vec(), data)
    }
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug)]
pub struct SigmoidCtx {
    out: Tensor,
}

pub fn sigmoid(input: &Tensor) -> (Tensor, SigmoidCtx) {
    let out = Tensor::new(
        input.dims().to_vec(),
        input.data().iter().map(|&v| sigmoid_scalar(v)).collect(),
    )
    .expect("sigmoid preserves shape and finiteness");
    (out.clone(), SigmoidCtx { out })
}

impl SigmoidCtx {
    pub fn backward(self, grad_out: &Tensor) -> Result<Tensor> {
        if grad_out.dims() != self.out.dims() {
            return shape_err("sigmoid grad shape");
        }
        let data = self
            .out
            .data()
            .iter()
            .zip(grad_out.data())
            .map(|(&s, &g)| g * s * (1.0 - s))
            .collect();
        Tensor::new(self.out.dims().to_vec(), data)
    }
}

// ---------------------------------------------------------------------------
// ROI max pooling

#[derive(Debug)]
pub struct RoiPoolCtx {
    in_dims: Vec<usize>,
    /// Flat input index that won each output cell.
    argmax: Vec<usize>,
}

/// Integer bin edges along one axis of the ROI.
fn bin_edges(lo: f64, hi: f64, bins: usize, n: usize) -> Vec<(usize, usize)> {
    let size = (hi - lo) / bins as f64;
    (0..bins)
        .map(|i| {
            let s = (lo + i as f64 * size).floor().clamp(0.0, n as f64) as usize;
            let e = (lo + (i + 1) as f64 * size).ceil().clamp(0.0, n as f64) as usize;
            if e <= s {
                let s = s.min(n - 1);
                (s, s + 1)
            } else {
                (s, e)
            }
        })
        .collect()
}

/// Adaptive max pooling of `roi` (feature coordinates) into an
/// `out_h x out_w` grid per channel.
pub fn roi_max_pool(
    fmap: &Tensor,
    roi: &Roi,
    out_h: usize,
    out_w: usize,
) -> Result<(Tensor, RoiPoolCtx)> {
    let (c, h, w) = dims3(fmap, "roi pool input")?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::Config("roi output size must be positive".into()));
    }
    let x0 = roi.x0.max(0.0);
    let y0 = roi.y0.max(0.0);
    let x1 = roi.x1.min(w as f64);
    let y1 = roi.y1.min(h as f64);
    if !(x1 > x0 && y1 > y0) {
        return Err(Error::Validation(format!(
            "degenerate roi {roi:?} on {h}x{w} map"
        )));
    }
    let ybins = bin_edges(y0, y1, out_h, h);
    let xbins = bin_edges(x0, x1, out_w, w);
    let data = fmap.data();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    let mut argmax = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let base = ch * h * w;
        for &(ys, ye) in &ybins {
            for &(xs, xe) in &xbins {
                let mut best = base + ys * w + xs;
                for yy in ys..ye {
                    for xx in xs..xe {
                        let idx = base + yy * w + xx;
                        if data[idx] > data[best] {
                            best = idx;
                        }
                    }
                }
                out.push(data[best]);
                argmax.push(best);
            }
        }
    }
    Ok((
        Tensor::new(vec![c, out_h, out_w], out)?,
        RoiPoolCtx {
            in_dims: fmap.dims().to_vec(),
            argmax,
        },
    ))
}

impl RoiPoolCtx {
    /// Scatters each output gradient onto the input cell that won it.
    pub fn backward(self, grad_out: &Tensor) -> Result<Tensor> {
        let mut g = Tensor::zeros(&self.in_dims);
        self.backward_into(grad_out, &mut g)?;
        Ok(g)
    }

    /// Accumulating form of [`RoiPoolCtx::backward`].
    pub fn backward_into(self, grad_out: &Tensor, acc: &mut Tensor) -> Result<()> {
        if grad_out.len() != self.argmax.len() || acc.dims() != self.in_dims.as_slice() {
            return shape_err("roi pool grad shape");
        }
        let dst = acc.data_mut();
        for (&idx, &go) in self.argmax.iter().zip(grad_out.data()) {
            dst[idx] += go;
        }
        Ok(())
    }

    pub fn argmax(&self) -> &[usize] {
        &self.argmax
    }
}

// ---------------------------------------------------------------------------
// channel concat and fusion

pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (ca, h, w) = dims3(a, "concat lhs")?;
    let (cb, hb, wb) = dims3(b, "concat rhs")?;
    if (h, w) != (hb, wb) {
        return shape_err(format!("concat {:?} with {:?}", a.dims(), b.dims()));
    }
    let mut data = Vec::with_capacity(a.len() + b.len());
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Tensor::new(vec![ca + cb, h, w], data)
}

fn split_channels(t: &Tensor, first: usize) -> Result<(Tensor, Tensor)> {
    let (c, h, w) = dims3(t, "split input")?;
    let cut = first * h * w;
    Ok((
        Tensor::new(vec![first, h, w], t.data()[..cut].to_vec())?,
        Tensor::new(vec![c - first, h, w], t.data()[cut..].to_vec())?,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FusionKind {
    /// Stack box and image features, then reduce `2C -> C`.
    Fusion1,
    /// Reduce each feature `C -> C/2`, then stack.
    Fusion2,
}

/// 1x1 reduction kernels of a fusion combiner.
#[derive(Debug, Clone)]
pub enum FusionParams<'a> {
    Fusion1 {
        weight: &'a Tensor,
        bias: &'a Tensor,
    },
    Fusion2 {
        box_weight: &'a Tensor,
        box_bias: &'a Tensor,
        img_weight: &'a Tensor,
        img_bias: &'a Tensor,
    },
}

impl FusionParams<'_> {
    pub fn kind(&self) -> FusionKind {
        match self {
            FusionParams::Fusion1 { .. } => FusionKind::Fusion1,
            FusionParams::Fusion2 { .. } => FusionKind::Fusion2,
        }
    }
}

#[derive(Debug)]
pub enum FusionCtx {
    Fusion1 {
        conv: Conv2dCtx,
        relu: ReluCtx,
        box_channels: usize,
    },
    Fusion2 {
        box_conv: Conv2dCtx,
        box_relu: ReluCtx,
        img_conv: Conv2dCtx,
        img_relu: ReluCtx,
        half: usize,
    },
}

#[derive(Debug, Clone)]
pub struct FusionGrads {
    pub box_feat: Tensor,
    pub img_feat: Tensor,
    /// Parameter gradients in the order of the `FusionParams` fields.
    pub params: Vec<Tensor>,
}

/// Shapes of the reduction kernels for `channels` backbone channels.
pub fn fusion_param_dims(kind: FusionKind, channels: usize) -> Result<Vec<Vec<usize>>> {
    match kind {
        FusionKind::Fusion1 => Ok(vec![vec![channels, 2 * channels, 1, 1], vec![channels]]),
        FusionKind::Fusion2 => {
            if !channels.is_multiple_of(2) {
                return Err(Error::Config(format!(
                    "Fusion2 needs an even channel count, got {channels}"
                )));
            }
            let half = channels / 2;
            Ok(vec![
                vec![half, channels, 1, 1],
                vec![half],
                vec![half, channels, 1, 1],
                vec![half],
            ])
        }
    }
}

/// Early fusion of the person-box and full-image ROI features. The output
/// always has the input channel count. Reductions are followed by relu.
pub fn fusion_combine(
    box_feat: &Tensor,
    img_feat: &Tensor,
    params: &FusionParams<'_>,
) -> Result<(Tensor, FusionCtx)> {
    if box_feat.dims() != img_feat.dims() {
        return shape_err(format!(
            "fusion box {:?} vs image {:?}",
            box_feat.dims(),
            img_feat.dims()
        ));
    }
    let (c, _, _) = dims3(box_feat, "fusion input")?;
    match *params {
        FusionParams::Fusion1 { weight, bias } => {
            if weight.dims() != [c, 2 * c, 1, 1] {
                return shape_err(format!(
                    "Fusion1 kernel {:?} for {c} channels",
                    weight.dims()
                ));
            }
            let stacked = concat_channels(box_feat, img_feat)?;
            let (z, conv) = conv2d(&stacked, weight, bias, 1)?;
            let (out, relu) = relu(&z);
            Ok((
                out,
                FusionCtx::Fusion1 {
                    conv,
                    relu,
                    box_channels: c,
                },
            ))
        }
        FusionParams::Fusion2 {
            box_weight,
            box_bias,
            img_weight,
            img_bias,
        } => {
            if c % 2 != 0 {
                return Err(Error::Config(format!(
                    "Fusion2 needs an even channel count, got {c}"
                )));
            }
            let (zb, box_conv) = conv2d(box_feat, box_weight, box_bias, 1)?;
            let (zi, img_conv) = conv2d(img_feat, img_weight, img_bias, 1)?;
            if zb.dims()[0] != c / 2 || zi.dims()[0] != c / 2 {
                return shape_err(format!("Fusion2 kernels must reduce {c} -> {}", c / 2));
            }
            let (rb, box_relu) = relu(&zb);
            let (ri, img_relu) = relu(&zi);
            Ok((
                concat_channels(&rb, &ri)?,
                FusionCtx::Fusion2 {
                    box_conv,
                    box_relu,
                    img_conv,
                    img_relu,
                    half: c / 2,
                },
            ))
        }
    }
}

impl FusionCtx {
    pub fn backward(self, params: &FusionParams<'_>, grad_out: &Tensor) -> Result<FusionGrads> {
        match (self, params) {
            (
                FusionCtx::Fusion1 {
                    conv,
                    relu,
                    box_channels,
                },
                FusionParams::Fusion1 { weight, .. },
            ) => {
                let gz = relu.backward(grad_out)?;
                let g = conv.backward(weight, &gz)?;
                let (gb, gi) = split_channels(&g.input, box_channels)?;
                Ok(FusionGrads {
                    box_feat: gb,
                    img_feat: gi,
                    params: vec![g.weight, g.bias],
                })
            }
            (
                FusionCtx::Fusion2 {
                    box_conv,
                    box_relu,
                    img_conv,
                    img_relu,
                    half,
                },
                FusionParams::Fusion2 {
                    box_weight,
                    img_weight,
                    ..
                },
            ) => {
                let (g_box, g_img) = split_channels(grad_out, half)?;
                let gb = box_conv.backward(box_weight, &box_relu.backward(&g_box)?)?;
                let gi = img_conv.backward(img_weight, &img_relu.backward(&g_img)?)?;
                Ok(FusionGrads {
                    box_feat: gb.input,
                    img_feat: gi.input,
                    params: vec![gb.weight, gb.bias, gi.weight, gi.bias],
                })
            }
            _ => Err(Error::Config("fusion context and params disagree".into())),
        }
    }
}
