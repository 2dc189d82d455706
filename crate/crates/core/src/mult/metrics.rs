use serde::{Deserialize, Serialize};

use super::MultiplierSpec;

/// Error statistics of a multiplier over all 65536 operand pairs, in percent.
///
/// MAE and WCE are normalized by 65535; MRE averages `|err| / exact` over the
/// pairs whose exact product is non-zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorMetrics {
    pub mre_pct: f64,
    pub ep_pct: f64,
    pub mae_pct: f64,
    pub wce_pct: f64,
}

impl ErrorMetrics {
    pub fn is_zero(&self) -> bool {
        self.mre_pct == 0.0 && self.ep_pct == 0.0 && self.mae_pct == 0.0 && self.wce_pct == 0.0
    }
}

pub fn compute_error_metrics(m: &MultiplierSpec) -> ErrorMetrics {
    let mut wrong = 0u64;
    let mut abs_sum = 0u64;
    let mut worst = 0u64;
    let mut rel_sum = 0.0f64;
    let mut nonzero = 0u64;
    for (idx, &approx) in m.table().iter().enumerate() {
        let exact = ((idx >> 8) * (idx & 0xff)) as i64;
        let err = (approx as i64 - exact).unsigned_abs();
        if err != 0 {
            wrong += 1;
        }
        abs_sum += err;
        worst = worst.max(err);
        if exact != 0 {
            nonzero += 1;
            rel_sum += err as f64 / exact as f64;
        }
    }
    let pairs = m.table().len() as f64;
    ErrorMetrics {
        mre_pct: 100.0 * rel_sum / nonzero as f64,
        ep_pct: 100.0 * wrong as f64 / pairs,
        mae_pct: 100.0 * (abs_sum as f64 / pairs) / 65535.0,
        wce_pct: 100.0 * worst as f64 / 65535.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mult::{build_builtin_multiplier, BuiltinKind, MultiplierSource, TABLE_LEN};

    #[test]
    fn exact_multiplier_is_error_free() {
        let m = build_builtin_multiplier(BuiltinKind::Exact);
        assert!(compute_error_metrics(&m).is_zero());
    }

    #[test]
    fn single_perturbed_entry() {
        let mut table: Vec<u16> = (0..TABLE_LEN)
            .map(|i| ((i >> 8) * (i & 0xff)) as u16)
            .collect();
        table[(7 << 8) | 9] += 1;
        let m = MultiplierSpec::new("p", table, 1.0, MultiplierSource::Imported).unwrap();
        let e = compute_error_metrics(&m);
        assert_eq!(e.ep_pct, 100.0 / 65536.0);
        assert_eq!(e.wce_pct, 100.0 / 65535.0);
        assert!(e.mae_pct <= e.wce_pct);
        assert!(e.mre_pct > 0.0);
    }

    #[test]
    fn error_at_zero_product_counts_except_in_mre() {
        let mut table: Vec<u16> = (0..TABLE_LEN)
            .map(|i| ((i >> 8) * (i & 0xff)) as u16)
            .collect();
        table[5] = 3;
        let m = MultiplierSpec::new("p", table, 1.0, MultiplierSource::Imported).unwrap();
        let e = compute_error_metrics(&m);
        assert_eq!(e.mre_pct, 0.0);
        assert!(e.ep_pct > 0.0);
    }

    #[test]
    fn truncation_degrades_monotonically() {
        let metrics: Vec<_> = (1..=4)
            .map(|k| compute_error_metrics(&build_builtin_multiplier(BuiltinKind::Trunc(k))))
            .collect();
        for w in metrics.windows(2) {
            assert!(w[1].mre_pct > w[0].mre_pct);
            assert!(w[1].wce_pct > w[0].wce_pct);
        }
        for e in &metrics {
            assert!(e.mae_pct <= e.wce_pct);
        }
    }
}
