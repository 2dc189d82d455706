//! Direct 2-D convolution kernels.
//!
//! The real-valued kernels serve both the exact forward pass and every
//! backward pass. The quantized kernel routes each `activation × weight`
//! product through a multiplier table; zero-point cross terms are exact.

use std::cell::Cell;

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{shape_err, Result};
use crate::mult::{calibrate, quantize, MultiplierSpec, QuantParams, QuantScheme};

thread_local! {
    static LUT_LOOKUPS: Cell<u64> = const { Cell::new(0) };
}

/// Number of table lookups performed by quantized convolutions on this thread.
pub fn lut_lookups() -> u64 {
    LUT_LOOKUPS.with(Cell::get)
}

pub fn reset_lut_lookups() {
    LUT_LOOKUPS.with(|c| c.set(0));
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl Default for ConvGeometry {
    fn default() -> Self {
        ConvGeometry {
            stride: 1,
            padding: 0,
            dilation: 1,
            groups: 1,
        }
    }
}

impl ConvGeometry {
    pub fn new(stride: usize, padding: usize, dilation: usize, groups: usize) -> Self {
        ConvGeometry {
            stride,
            padding,
            dilation,
            groups,
        }
    }
}

/// Output extent of one spatial axis.
pub fn conv_out_len(
    input: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    dilation: usize,
) -> Result<usize> {
    if stride == 0 || dilation == 0 {
        return Err(shape_err!("stride and dilation must be >= 1"));
    }
    let span = dilation * (kernel.max(1) - 1) + 1;
    let padded = input + 2 * padding;
    if kernel == 0 || padded < span {
        return Err(shape_err!(
            "kernel span {span} exceeds padded input {padded}"
        ));
    }
    Ok((padded - span) / stride + 1)
}

/// Validated dimensions of one convolution.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvDims {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub oc: usize,
    pub kh: usize,
    pub kw: usize,
    pub oh: usize,
    pub ow: usize,
    pub geom: ConvGeometry,
}

impl ConvDims {
    pub fn new(x_shape: &[usize], w_shape: &[usize], geom: ConvGeometry) -> Result<Self> {
        let [n, c, h, w] = match *x_shape {
            [n, c, h, w] => [n, c, h, w],
            _ => return Err(shape_err!("conv input must be rank 4, got {x_shape:?}")),
        };
        let [oc, icg, kh, kw] = match *w_shape {
            [a, b, c, d] => [a, b, c, d],
            _ => return Err(shape_err!("conv weight must be rank 4, got {w_shape:?}")),
        };
        let g = geom.groups;
        if g == 0 || c % g != 0 || oc % g != 0 {
            return Err(shape_err!(
                "groups {g} must divide input channels {c} and output channels {oc}"
            ));
        }
        if icg != c / g {
            return Err(shape_err!(
                "weight expects {icg} input channels per group, input provides {}",
                c / g
            ));
        }
        let oh = conv_out_len(h, kh, geom.stride, geom.padding, geom.dilation)?;
        let ow = conv_out_len(w, kw, geom.stride, geom.padding, geom.dilation)?;
        Ok(ConvDims {
            n,
            c,
            h,
            w,
            oc,
            kh,
            kw,
            oh,
            ow,
            geom,
        })
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.n, self.oc, self.oh, self.ow]
    }

    fn icg(&self) -> usize {
        self.c / self.geom.groups
    }

    fn ocg(&self) -> usize {
        self.oc / self.geom.groups
    }

    /// Multiply-accumulates per forward pass (padded taps included).
    pub fn macs(&self) -> u64 {
        (self.n * self.oc * self.oh * self.ow * self.icg() * self.kh * self.kw) as u64
    }
}

/// Range of output indices whose input index `o * stride + offset` lies in
/// `[0, in_len)`.
#[inline]
fn valid_range(out_len: usize, in_len: usize, offset: isize, stride: usize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if offset >= 0 {
        0
    } else {
        (-offset + s - 1) / s
    };
    let last = in_len as isize - 1 - offset;
    if last < 0 {
        return (0, 0);
    }
    let hi = ((last / s) + 1).min(out_len as isize);
    let lo = lo.min(hi);
    (lo as usize, hi as usize)
}

/// Column matrices of one group: row `(icl, ki, kj)` holds the input value
/// under that tap for every output position of every image, laid out as
/// `[K, n·oh·ow]` with `K = icg·kh·kw`. Padded taps are zero.
struct Columns {
    k: usize,
    np: usize,
}

impl Columns {
    fn of(d: &ConvDims) -> Self {
        Columns {
            k: d.icg() * d.kh * d.kw,
            np: d.n * d.oh * d.ow,
        }
    }
}

/// One output row under one tap: column-matrix row, image, input channel,
/// output and input row, valid output columns and horizontal input offset.
struct TapRow {
    row: usize,
    b: usize,
    ic: usize,
    oh: usize,
    ih: usize,
    lo: usize,
    hi: usize,
    off_w: isize,
}

#[inline]
fn for_each_tap_row(d: &ConvDims, grp: usize, mut f: impl FnMut(TapRow)) {
    let g = d.geom;
    for icl in 0..d.icg() {
        let ic = grp * d.icg() + icl;
        for ki in 0..d.kh {
            let off_h = (ki * g.dilation) as isize - g.padding as isize;
            let (oh_lo, oh_hi) = valid_range(d.oh, d.h, off_h, g.stride);
            for kj in 0..d.kw {
                let off_w = (kj * g.dilation) as isize - g.padding as isize;
                let (ow_lo, ow_hi) = valid_range(d.ow, d.w, off_w, g.stride);
                if ow_lo == ow_hi {
                    continue;
                }
                let row = (icl * d.kh + ki) * d.kw + kj;
                for b in 0..d.n {
                    for oh in oh_lo..oh_hi {
                        let ih = ((oh * g.stride) as isize + off_h) as usize;
                        f(TapRow {
                            row,
                            b,
                            ic,
                            oh,
                            ih,
                            lo: ow_lo,
                            hi: ow_hi,
                            off_w,
                        });
                    }
                }
            }
        }
    }
}

/// Fills the valid entries of `col`. Padded entries are never written, so a
/// zeroed buffer can be reused across groups.
fn im2col(x: &[f64], d: &ConvDims, grp: usize, cols: &Columns, col: &mut [f64]) {
    let s = d.geom.stride;
    let plane = d.oh * d.ow;
    for_each_tap_row(
        d,
        grp,
        |TapRow {
             row,
             b,
             ic,
             oh,
             ih,
             lo,
             hi,
             off_w,
         }| {
            let src = &x[((b * d.c + ic) * d.h + ih) * d.w..][..d.w];
            let dst = &mut col[row * cols.np + b * plane + oh * d.ow..][..d.ow];
            if s == 1 {
                let start = (lo as isize + off_w) as usize;
                dst[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
            } else {
                for ow in lo..hi {
                    dst[ow] = src[((ow * s) as isize + off_w) as usize];
                }
            }
        },
    );
}

/// Adds the column gradient back onto the input gradient.
fn col2im(dcol: &[f64], d: &ConvDims, grp: usize, cols: &Columns, dx: &mut [f64]) {
    let s = d.geom.stride;
    let plane = d.oh * d.ow;
    for_each_tap_row(
        d,
        grp,
        |TapRow {
             row,
             b,
             ic,
             oh,
             ih,
             lo,
             hi,
             off_w,
         }| {
            let src = &dcol[row * cols.np + b * plane + oh * d.ow..][..d.ow];
            let dst = &mut dx[((b * d.c + ic) * d.h + ih) * d.w..][..d.w];
            if s == 1 {
                let start = (lo as isize + off_w) as usize;
                axpy(&mut dst[start..start + hi - lo], 1.0, &src[lo..hi]);
            } else {
                for ow in lo..hi {
                    dst[((ow * s) as isize + off_w) as usize] += src[ow];
                }
            }
        },
    );
}

/// Copies the output channels of one group from `[n, oc, p]` into `[ocg, n·p]`.
fn gather_group(y: &[f64], d: &ConvDims, grp: usize, out: &mut [f64]) {
    let plane = d.oh * d.ow;
    let np = d.n * plane;
    for o in 0..d.ocg() {
        let oc = grp * d.ocg() + o;
        for b in 0..d.n {
            out[o * np + b * plane..][..plane]
                .copy_from_slice(&y[(b * d.oc + oc) * plane..][..plane]);
        }
    }
}

/// Inverse of [`gather_group`].
fn scatter_group(src: &[f64], d: &ConvDims, grp: usize, y: &mut [f64]) {
    let plane = d.oh * d.ow;
    let np = d.n * plane;
    for o in 0..d.ocg() {
        let oc = grp * d.ocg() + o;
        for b in 0..d.n {
            y[(b * d.oc + oc) * plane..][..plane]
                .copy_from_slice(&src[o * np + b * plane..][..plane]);
        }
    }
}

#[inline]
fn scaled_copy(out: &mut [f64], a: f64, x: &[f64]) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o = a * v;
    }
}

#[inline]
fn axpy(out: &mut [f64], a: f64, x: &[f64]) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o += a * v;
    }
}

/// Dot product with four partial sums.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub fn conv2d_forward(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    geom: ConvGeometry,
) -> Result<Tensor> {
    let d = ConvDims::new(x.shape(), w.shape(), geom)?;
    check_bias(bias, d.oc)?;
    let cols = Columns::of(&d);
    let wd = w.data();
    let mut out = vec![0.0; d.n * d.oc * d.oh * d.ow];
    let mut col = vec![0.0; cols.k * cols.np];
    let mut yg = vec![0.0; d.ocg() * cols.np];
    for grp in 0..geom.groups {
        im2col(x.data(), &d, grp, &cols, &mut col);
        for o in 0..d.ocg() {
            let oc = grp * d.ocg() + o;
            let dst = &mut yg[o * cols.np..][..cols.np];
            for (k, &wv) in wd[oc * cols.k..][..cols.k].iter().enumerate() {
                let src = &col[k * cols.np..][..cols.np];
                if k == 0 {
                    scaled_copy(dst, wv, src);
                } else {
                    axpy(dst, wv, src);
                }
            }
        }
        scatter_group(&yg, &d, grp, &mut out);
    }
    if let Some(bias) = bias {
        add_bias(&mut out, bias.data(), d.oc, d.oh * d.ow);
    }
    Tensor::new(d.out_shape(), out)
}

pub fn conv2d_backward_input(
    dy: &Tensor,
    w: &Tensor,
    x_shape: &[usize],
    geom: ConvGeometry,
) -> Result<Tensor> {
    let d = ConvDims::new(x_shape, w.shape(), geom)?;
    let cols = Columns::of(&d);
    let wd = w.data();
    let mut dx = vec![0.0; d.n * d.c * d.h * d.w];
    let mut dyg = vec![0.0; d.ocg() * cols.np];
    let mut dcol = vec![0.0; cols.k * cols.np];
    for grp in 0..geom.groups {
        gather_group(dy.data(), &d, grp, &mut dyg);
        for o in 0..d.ocg() {
            let oc = grp * d.ocg() + o;
            let src = &dyg[o * cols.np..][..cols.np];
            for (k, &wv) in wd[oc * cols.k..][..cols.k].iter().enumerate() {
                let dst = &mut dcol[k * cols.np..][..cols.np];
                if o == 0 {
                    scaled_copy(dst, wv, src);
                } else {
                    axpy(dst, wv, src);
                }
            }
        }
        col2im(&dcol, &d, grp, &cols, &mut dx);
    }
    Tensor::new(x_shape.to_vec(), dx)
}

pub fn conv2d_backward_weight(
    dy: &Tensor,
    x: &Tensor,
    w_shape: &[usize],
    geom: ConvGeometry,
) -> Result<Tensor> {
    let d = ConvDims::new(x.shape(), w_shape, geom)?;
    let cols = Columns::of(&d);
    let mut dw = vec![0.0; w_shape.iter().product()];
    let mut col = vec![0.0; cols.k * cols.np];
    let mut dyg = vec![0.0; d.ocg() * cols.np];
    for grp in 0..geom.groups {
        im2col(x.data(), &d, grp, &cols, &mut col);
        gather_group(dy.data(), &d, grp, &mut dyg);
        for o in 0..d.ocg() {
            let oc = grp * d.ocg() + o;
            let g = &dyg[o * cols.np..][..cols.np];
            for (k, slot) in dw[oc * cols.k..][..cols.k].iter_mut().enumerate() {
                *slot = dot(g, &col[k * cols.np..][..cols.np]);
            }
        }
    }
    Tensor::new(w_shape.to_vec(), dw)
}

/// Gradient of the bias: sum of `dy` over batch and spatial positions.
pub fn conv2d_backward_bias(dy: &Tensor) -> Result<Tensor> {
    let [n, oc, oh, ow] = dy.dims4()?;
    let mut db = vec![0.0; oc];
    for b in 0..n {
        for (c, slot) in db.iter_mut().enumerate() {
            *slot += dy.data()[(b * oc + c) * oh * ow..][..oh * ow]
                .iter()
                .sum::<f64>();
        }
    }
    Tensor::new([oc], db)
}

/// Result of a table-emulated convolution.
#[derive(Debug, Clone)]
pub struct QuantConvOutput {
    pub output: Tensor,
    pub input_q: QuantParams,
    pub weight_q: QuantParams,
    pub lookups: u64,
}

/// Convolution whose products `â·ŵ` are read from `m`'s table.
///
/// Input and weights are calibrated per tensor. Each output accumulates
/// `Σ [LUT(â, ŵ) − z_a·ŵ − z_w·â + z_a·z_w]` in an `i64` and is rescaled by
/// `s_a·s_w`; padded taps carry the code of real zero, `z_a`.
pub fn conv2d_quant(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    geom: ConvGeometry,
    m: &MultiplierSpec,
    scheme: QuantScheme,
) -> Result<QuantConvOutput> {
    let d = ConvDims::new(x.shape(), w.shape(), geom)?;
    check_bias(bias, d.oc)?;
    let input_q = calibrate(x.data(), scheme)?;
    let weight_q = calibrate(w.data(), scheme)?;
    let za = input_q.zero_point() as i32;
    let zw = weight_q.zero_point() as i32;

    let p = geom.padding;
    let (hp, wp) = (d.h + 2 * p, d.w + 2 * p);
    let mut xq = vec![za as u8; d.n * d.c * hp * wp];
    for plane in 0..d.n * d.c {
        let src = &x.data()[plane * d.h * d.w..][..d.h * d.w];
        let dst = &mut xq[plane * hp * wp..][..hp * wp];
        for i in 0..d.h {
            for j in 0..d.w {
                dst[(i + p) * wp + j + p] = quantize(src[i * d.w + j], &input_q);
            }
        }
    }
    let wq: Vec<u8> = w.data().iter().map(|&v| quantize(v, &weight_q)).collect();

    let (s, dil) = (geom.stride, geom.dilation);
    let (icg, ocg) = (d.icg(), d.ocg());
    let plane_out = d.oh * d.ow;
    let mut acc = vec![0i64; d.n * d.oc * plane_out];
    let mut corrected = [0i32; 256];
    let mut lookups = 0u64;
    for grp in 0..geom.groups {
        for oc in grp * ocg..(grp + 1) * ocg {
            for icl in 0..icg {
                let ic = grp * icg + icl;
                for ki in 0..d.kh {
                    for kj in 0..d.kw {
                        let wcode = wq[((oc * icg + icl) * d.kh + ki) * d.kw + kj];
                        let column = m.weight_column(wcode);
                        let wv = wcode as i32;
                        let cross = za * zw - za * wv;
                        for (a, slot) in corrected.iter_mut().enumerate() {
                            *slot = column[a] as i32 + cross - zw * a as i32;
                        }
                        for b in 0..d.n {
                            let plane = &xq[(b * d.c + ic) * hp * wp..][..hp * wp];
                            let out = &mut acc[(b * d.oc + oc) * plane_out..][..plane_out];
                            for oh in 0..d.oh {
                                let row = &plane[(oh * s + ki * dil) * wp + kj * dil..];
                                let out_row = &mut out[oh * d.ow..][..d.ow];
                                for (ow, o) in out_row.iter_mut().enumerate() {
                                    *o += corrected[row[ow * s] as usize] as i64;
                                    lookups += 1;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    LUT_LOOKUPS.with(|c| c.set(c.get() + lookups));

    let scale = input_q.scale() * weight_q.scale();
    let mut out: Vec<f64> = acc.iter().map(|&v| scale * v as f64).collect();
    if let Some(bias) = bias {
        add_bias(&mut out, bias.data(), d.oc, plane_out);
    }
    Ok(QuantConvOutput {
        output: Tensor::new(d.out_shape(), out)?,
        input_q,
        weight_q,
        lookups,
    })
}

fn check_bias(bias: Option<&Tensor>, oc: usize) -> Result<()> {
    match bias {
        Some(b) if b.numel() != oc => Err(shape_err!(
            "bias has {} values for {oc} output channels",
            b.numel()
        )),
        _ => Ok(()),
    }
}

fn add_bias(out: &mut [f64], bias: &[f64], oc: usize, plane: usize) {
    for (i, chunk) in out.chunks_mut(plane).enumerate() {
        let b = bias[i % oc];
        for v in chunk {
            *v += b;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mult::{build_builtin_multiplier, BuiltinKind};

    /// Textbook 7-loop convolution with explicit bounds checks.
    fn naive(x: &Tensor, w: &Tensor, geom: ConvGeometry) -> Tensor {
        let [n, c, h, wd] = x.dims4().unwrap();
        let [oc, icg, kh, kw] = w.dims4().unwrap();
        let oh = conv_out_len(h, kh, geom.stride, geom.padding, geom.dilation).unwrap();
        let ow = conv_out_len(wd, kw, geom.stride, geom.padding, geom.dilation).unwrap();
        let ocg = oc / geom.groups;
        let mut out = Tensor::zeros([n, oc, oh, ow]);
        for b in 0..n {
            for o in 0..oc {
                let grp = o / ocg;
                for i in 0..oh {
                    for j in 0..ow {
                        let mut acc = 0.0;
                        for q in 0..icg {
                            let ic = grp * icg + q;
                            for a in 0..kh {
                                for e in 0..kw {
                                    let ih = (i * geom.stride + a * geom.dilation) as isize
                                        - geom.padding as isize;
                                    let iw = (j * geom.stride + e * geom.dilation) as isize
                                        - geom.padding as isize;
                                    if ih < 0 || iw < 0 || ih >= h as isize || iw >= wd as isize {
                                        continue;
                                    }
                                    acc += w.data()[((o * icg + q) * kh + a) * kw + e]
                                        * x.data()
                                            [((b * c + ic) * h + ih as usize) * wd + iw as usize];
                                }
                            }
                        }
                        out.data_mut()[((b * oc + o) * oh + i) * ow + j] = acc;
                    }
                }
            }
        }
        out
    }

    fn ramp(shape: [usize; 4], k: f64) -> Tensor {
        Tensor::from_fn(shape, |i| ((i as f64 * k).sin() * 3.0).round() / 3.0)
    }

    #[test]
    fn matches_naive_convolution() {
        let cases = [
            ([2, 4, 7, 6], [4, 2, 3, 3], ConvGeometry::new(1, 1, 1, 2)),
            ([1, 3, 9, 9], [5, 3, 5, 5], ConvGeometry::new(2, 2, 1, 1)),
            ([1, 4, 8, 8], [4, 1, 3, 3], ConvGeometry::new(2, 2, 2, 4)),
            ([2, 2, 5, 5], [2, 2, 1, 1], ConvGeometry::new(2, 0, 1, 1)),
            ([1, 3, 6, 6], [3, 1, 5, 5], ConvGeometry::new(1, 4, 2, 3)),
        ];
        for (xs, ws, g) in cases {
            let x = ramp(xs, 0.37);
            let w = ramp(ws, 0.91);
            let fast = conv2d_forward(&x, &w, None, g).unwrap();
            let slow = naive(&x, &w, g);
            assert_eq!(fast.shape(), slow.shape());
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() < 1e-12, "{xs:?} {ws:?} {g:?}");
            }
        }
    }

    #[test]
    fn single_pixel_example() {
        let x = Tensor::new([1, 1, 1, 1], vec![3.0]).unwrap();
        let w = Tensor::new([1, 1, 1, 1], vec![2.0]).unwrap();
        let y = conv2d_forward(&x, &w, None, ConvGeometry::default()).unwrap();
        assert_eq!(y.data(), &[6.0]);

        let m = build_builtin_multiplier(BuiltinKind::Exact);
        let q = conv2d_quant(
            &x,
            &w,
            None,
            ConvGeometry::default(),
            &m,
            QuantScheme::Asymmetric,
        )
        .unwrap();
        assert_eq!(q.output.data(), &[6.0]);
        assert_eq!(q.lookups, 1);
    }

    #[test]
    fn same_padding_shape_and_lookup_count() {
        let x = ramp([1, 3, 16, 16], 0.1);
        let w = ramp([8, 3, 3, 3], 0.7);
        let g = ConvGeometry::new(1, 1, 1, 1);
        let d = ConvDims::new(x.shape(), w.shape(), g).unwrap();
        assert_eq!(d.out_shape(), [1, 8, 16, 16]);
        assert_eq!(d.macs(), 55296);
        let m = build_builtin_multiplier(BuiltinKind::Exact);
        reset_lut_lookups();
        let q = conv2d_quant(&x, &w, None, g, &m, QuantScheme::Asymmetric).unwrap();
        assert_eq!(q.lookups, 55296);
        assert_eq!(lut_lookups(), 55296);
    }

    #[test]
    fn depthwise_mac_count() {
        let d = ConvDims::new(
            &[1, 8, 16, 16],
            &[8, 1, 3, 3],
            ConvGeometry::new(1, 1, 1, 8),
        )
        .unwrap();
        assert_eq!(d.macs(), 18432);
    }

    #[test]
    fn shape_errors() {
        let x = Tensor::zeros([1, 3, 4, 4]);
        assert!(conv2d_forward(
            &x,
            &Tensor::zeros([2, 2, 3, 3]),
            None,
            ConvGeometry::default()
        )
        .is_err());
        assert!(conv2d_forward(
            &x,
            &Tensor::zeros([2, 3, 3, 3]),
            None,
            ConvGeometry::new(0, 1, 1, 1)
        )
        .is_err());
        assert!(conv2d_forward(
            &x,
            &Tensor::zeros([2, 3, 3, 3]),
            None,
            ConvGeometry::new(1, 1, 0, 1)
        )
        .is_err());
        assert!(conv2d_forward(
            &x,
            &Tensor::zeros([2, 3, 5, 5]),
            None,
            ConvGeometry::default()
        )
        .is_err());
        assert!(conv2d_forward(
            &x,
            &Tensor::zeros([2, 3, 1, 1]),
            Some(&Tensor::zeros([3])),
            ConvGeometry::default()
        )
        .is_err());
        assert!(conv2d_forward(
            &x,
            &Tensor::zeros([4, 1, 1, 1]),
            None,
            ConvGeometry::new(1, 0, 1, 2)
        )
        .is_err());
    }

    #[test]
    fn valid_range_edges() {
        // out 4, in 4, offset -1, stride 1: first output reads index -1
        assert_eq!(valid_range(4, 4, -1, 1), (1, 4));
        assert_eq!(valid_range(4, 4, 1, 1), (0, 3));
        assert_eq!(valid_range(2, 4, -2, 2), (1, 2));
        assert_eq!(valid_range(3, 2, 5, 1), (0, 0));
    }
}
