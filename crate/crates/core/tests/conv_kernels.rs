//! Property tests of the convolution kernels over random geometries.

use axnas::tensor::{
    conv2d_backward_input, conv2d_backward_weight, conv2d_forward, conv_out_len, ConvGeometry,
    Tensor,
};
use proptest::prelude::*;

#[derive(Debug, Clone)]
struct Case {
    x: Tensor,
    w: Tensor,
    dy: Tensor,
    geom: ConvGeometry,
}

fn values(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0f64..2.0, n)
}

fn case() -> impl Strategy<Value = Case> {
    (
        1usize..=2,
        1usize..=3,
        1usize..=3,
        1usize..=5,
        1usize..=2,
        1usize..=2,
        0usize..=3,
        3usize..=9,
        3usize..=9,
        any::<bool>(),
    )
        .prop_filter_map(
            "output would be empty",
            |(n, groups, per_group, k, stride, dil, pad, h, w, depthwise)| {
                let (c, oc, groups) = if depthwise {
                    (groups * per_group, groups * per_group, groups * per_group)
                } else {
                    (groups * per_group, groups * 2, groups)
                };
                let oh = conv_out_len(h, k, stride, pad, dil).ok()?;
                let ow = conv_out_len(w, k, stride, pad, dil).ok()?;
                Some((n, c, oc, groups, k, stride, dil, pad, h, w, oh, ow))
            },
        )
        .prop_flat_map(|(n, c, oc, groups, k, stride, dil, pad, h, w, oh, ow)| {
            (
                values(n * c * h * w),
                values(oc * (c / groups) * k * k),
                values(n * oc * oh * ow),
            )
                .prop_map(move |(xd, wd, dyd)| Case {
                    x: Tensor::new([n, c, h, w], xd).unwrap(),
                    w: Tensor::new([oc, c / groups, k, k], wd).unwrap(),
                    dy: Tensor::new([n, oc, oh, ow], dyd).unwrap(),
                    geom: ConvGeometry::new(stride, pad, dil, groups),
                })
        })
}

fn naive(x: &Tensor, w: &Tensor, g: ConvGeometry) -> Vec<f64> {
    let [n, c, h, wd] = x.dims4().unwrap();
    let [oc, icg, kh, kw] = w.dims4().unwrap();
    let oh = conv_out_len(h, kh, g.stride, g.padding, g.dilation).unwrap();
    let ow = conv_out_len(wd, kw, g.stride, g.padding, g.dilation).unwrap();
    let ocg = oc / g.groups;
    let mut out = vec![0.0; n * oc * oh * ow];
    for b in 0..n {
        for o in 0..oc {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = 0.0;
                    for q in 0..icg {
                        let ic = (o / ocg) * icg + q;
                        for a in 0..kh {
                            for e in 0..kw {
                                let y =
                                    (i * g.stride + a * g.dilation) as isize - g.padding as isize;
                                let z =
                                    (j * g.stride + e * g.dilation) as isize - g.padding as isize;
                                if (0..h as isize).contains(&y) && (0..wd as isize).contains(&z) {
                                    acc += w.data()[((o * icg + q) * kh + a) * kw + e]
                                        * x.data()
                                            [((b * c + ic) * h + y as usize) * wd + z as usize];
                                }
                            }
                        }
                    }
                    out[((b * oc + o) * oh + i) * ow + j] = acc;
                }
            }
        }
    }
    out
}

fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn forward_matches_direct_summation(c in case()) {
        let fast = conv2d_forward(&c.x, &c.w, None, c.geom).unwrap();
        let slow = naive(&c.x, &c.w, c.geom);
        for (a, b) in fast.data().iter().zip(&slow) {
            prop_assert!((a - b).abs() <= 1e-10 * (1.0 + b.abs()));
        }
    }

    /// `<dy, conv(x, w)>` equals `<conv_inputᵀ(dy), x>` and `<conv_weightᵀ(dy, x), w>`.
    #[test]
    fn backward_kernels_are_adjoint(c in case()) {
        let y = conv2d_forward(&c.x, &c.w, None, c.geom).unwrap();
        let reference = dot(&c.dy, &y);
        let dx = conv2d_backward_input(&c.dy, &c.w, c.x.shape(), c.geom).unwrap();
        let dw = conv2d_backward_weight(&c.dy, &c.x, c.w.shape(), c.geom).unwrap();
        let scale = 1.0 + reference.abs();
        prop_assert!((dot(&dx, &c.x) - reference).abs() <= 1e-9 * scale);
        prop_assert!((dot(&dw, &c.w) - reference).abs() <= 1e-9 * scale);
    }
}
