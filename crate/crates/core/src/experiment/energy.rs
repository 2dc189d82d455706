//! Energy accounting from operation counts and multiplier energies.
//!
//! Approximable MACs are priced at the multiplier's energy per operation.
//! Every other operation is priced at the 32-bit floating-point rate, taken
//! as `fp32_factor` times the exact 8-bit multiplier's energy.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mult::MultiplierSpec;

/// Energy ratio of a 32-bit floating-point operation to an 8-bit integer
/// multiplication.
pub const DEFAULT_FP32_FACTOR: f64 = 18.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub approx_macs: u64,
    pub exact_flops: u64,
    pub energy_approx_units: f64,
    pub energy_exact_units: f64,
    pub total: f64,
    pub savings_vs_fp32_pct: f64,
    pub savings_vs_exact8_pct: f64,
    pub approx_fraction_pct: f64,
}

fn savings(total: f64, reference: f64) -> f64 {
    if reference > 0.0 {
        100.0 * (1.0 - total / reference)
    } else {
        0.0
    }
}

pub fn energy_report(
    approx_macs: u64,
    exact_flops: u64,
    multiplier: &MultiplierSpec,
    exact8: &MultiplierSpec,
    fp32_factor: f64,
) -> Result<EnergyReport> {
    if !(fp32_factor.is_finite() && fp32_factor > 0.0) {
        return Err(Error::Config(format!(
            "fp32 factor must be positive, got {fp32_factor}"
        )));
    }
    let e_fp32 = fp32_factor * exact8.energy_per_op();
    let (a, e) = (approx_macs as f64, exact_flops as f64);
    let energy_approx_units = a * multiplier.energy_per_op();
    let energy_exact_units = e * e_fp32;
    let total = energy_approx_units + energy_exact_units;
    let all_fp32 = (a + e) * e_fp32;
    let all_exact8 = a * exact8.energy_per_op() + energy_exact_units;
    let ops = a + e;
    Ok(EnergyReport {
        approx_macs,
        exact_flops,
        energy_approx_units,
        energy_exact_units,
        total,
        savings_vs_fp32_pct: savings(total, all_fp32),
        savings_vs_exact8_pct: savings(total, all_exact8),
        approx_fraction_pct: if ops > 0.0 { 100.0 * a / ops } else { 0.0 },
    })
}
