//! Affine conversion between real values and unsigned 8-bit codes.
//!
//! All rounding is half-away-from-zero (`f64::round`).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MIN_RANGE: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantScheme {
    #[default]
    Asymmetric,
    /// Non-negative data only; the zero point is pinned to 0.
    SymmetricUnsigned,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    scale: f64,
    zero_point: u8,
    scheme: QuantScheme,
}

impl QuantParams {
    pub fn new(scale: f64, zero_point: u8, scheme: QuantScheme) -> Result<Self> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::Quant(format!("scale must be positive, got {scale}")));
        }
        if scheme == QuantScheme::SymmetricUnsigned && zero_point != 0 {
            return Err(Error::Quant(format!(
                "symmetric_unsigned requires zero_point 0, got {zero_point}"
            )));
        }
        Ok(QuantParams {
            scale,
            zero_point,
            scheme,
        })
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn zero_point(&self) -> u8 {
        self.zero_point
    }

    pub fn scheme(&self) -> QuantScheme {
        self.scheme
    }
}

/// Per-tensor min/max calibration.
pub fn calibrate(values: &[f64], scheme: QuantScheme) -> Result<QuantParams> {
    if values.is_empty() {
        return Err(Error::Quant("cannot calibrate an empty tensor".into()));
    }
    let (mut min, mut max) = (f64::INFINITY, f64::NEG_INFINITY);
    for (i, &v) in values.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::Quant(format!("non-finite value {v} at index {i}")));
        }
        min = min.min(v);
        max = max.max(v);
    }
    match scheme {
        QuantScheme::Asymmetric => {
            // The range always contains 0 so that real zero (padding, ReLU
            // floor) has an exact code and the zero point fits in [0, 255].
            let (min, max) = (min.min(0.0), max.max(0.0));
            let scale = if max == min {
                MIN_RANGE / 255.0
            } else {
                (max - min) / 255.0
            };
            let zero_point = (-min / scale).round().clamp(0.0, 255.0) as u8;
            QuantParams::new(scale, zero_point, scheme)
        }
        QuantScheme::SymmetricUnsigned => {
            if min < 0.0 {
                return Err(Error::Quant(format!(
                    "symmetric_unsigned calibration saw negative value {min}"
                )));
            }
            let scale = if max == 0.0 { MIN_RANGE } else { max } / 255.0;
            QuantParams::new(scale, 0, scheme)
        }
    }
}

#[inline]
pub fn quantize(x: f64, q: &QuantParams) -> u8 {
    ((x / q.scale).round() + q.zero_point as f64).clamp(0.0, 255.0) as u8
}

#[inline]
pub fn dequantize(v: u8, q: &QuantParams) -> f64 {
    q.scale * (v as f64 - q.zero_point as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn unit_scale_calibration() {
        let q = calibrate(&[0.0, 255.0], QuantScheme::Asymmetric).unwrap();
        assert_eq!(q.scale(), 1.0);
        assert_eq!(q.zero_point(), 0);
    }

    #[test]
    fn symmetric_range_rounds_half_up() {
        let q = calibrate(&[-1.0, 1.0], QuantScheme::Asymmetric).unwrap();
        assert_eq!(q.scale(), 2.0 / 255.0);
        assert_eq!(q.zero_point(), 128);
    }

    #[test]
    fn symmetric_unsigned_calibration() {
        let q = calibrate(&[0.0, 0.5], QuantScheme::SymmetricUnsigned).unwrap();
        assert_eq!(q.scale(), 0.5 / 255.0);
        assert_eq!(q.zero_point(), 0);
        let z = calibrate(&[0.0, 0.0], QuantScheme::SymmetricUnsigned).unwrap();
        assert_eq!(z.scale(), 1e-8 / 255.0);
    }

    #[test]
    fn calibration_errors() {
        assert!(calibrate(&[], QuantScheme::Asymmetric).is_err());
        assert!(calibrate(&[1.0, f64::NAN], QuantScheme::Asymmetric).is_err());
        assert!(calibrate(&[1.0, f64::INFINITY], QuantScheme::Asymmetric).is_err());
        assert!(calibrate(&[-0.1, 1.0], QuantScheme::SymmetricUnsigned).is_err());
        assert!(QuantParams::new(0.0, 0, QuantScheme::Asymmetric).is_err());
        assert!(QuantParams::new(1.0, 3, QuantScheme::SymmetricUnsigned).is_err());
    }

    #[test]
    fn constant_tensors_round_trip() {
        for v in [0.0, 2.5, -3.0] {
            // A positive constant gets scale |v|/255 and zero point 0; a
            // negative one gets zero point 255.
            let q = calibrate(&[v, v, v], QuantScheme::Asymmetric).unwrap();
            assert!(q.scale() > 0.0);
            assert!((dequantize(quantize(v, &q), &q) - v).abs() < 1e-12);
        }
    }

    #[test]
    fn range_excluding_zero_is_widened() {
        let q = calibrate(&[500.0, 600.0], QuantScheme::Asymmetric).unwrap();
        assert_eq!(q.scale(), 600.0 / 255.0);
        assert_eq!(q.zero_point(), 0);
        let q = calibrate(&[-6.0, -2.0], QuantScheme::Asymmetric).unwrap();
        assert_eq!(q.zero_point(), 255);
    }

    #[test]
    fn quantize_examples() {
        let q = QuantParams::new(1.0, 0, QuantScheme::Asymmetric).unwrap();
        assert_eq!(quantize(1.0, &q), 1);
        assert_eq!(quantize(300.0, &q), 255);
        assert_eq!(quantize(-4.0, &q), 0);
        assert_eq!(dequantize(255, &q), 255.0);

        let q = calibrate(&[-1.0, 1.0], QuantScheme::Asymmetric).unwrap();
        assert_eq!(quantize(-1.0, &q), 0);
        assert_eq!(dequantize(q.zero_point(), &q), 0.0);
    }

    proptest! {
        #[test]
        fn round_trip_within_half_step(
            lo in -1000.0f64..1000.0,
            width in 1e-3f64..1000.0,
            t in 0.0f64..=1.0,
            asym in any::<bool>(),
        ) {
            let (lo, scheme) = if asym {
                (lo, QuantScheme::Asymmetric)
            } else {
                (lo.abs(), QuantScheme::SymmetricUnsigned)
            };
            let hi = lo + width;
            let q = calibrate(&[lo, hi], scheme).unwrap();
            let x = lo + t * width;
            let err = (dequantize(quantize(x, &q), &q) - x).abs();
            prop_assert!(err <= q.scale() / 2.0 + 1e-12, "err {} scale {}", err, q.scale());
        }
    }
}
