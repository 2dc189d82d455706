//! 8×8-bit unsigned multipliers emulated through 65536-entry product tables.
//!
//! A multiplier is addressed by concatenating the two quantized operands into a
//! 16-bit index, `(a << 8) | b`. Builtin tables (the exact product and a family
//! of operand-truncating multipliers) keep the crate self-contained; tables of
//! real approximate circuits can be imported with [`load_multiplier`].

mod io;
mod metrics;
mod quant;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub use io::{load_multiplier, save_binary, save_text, BINARY_MAGIC};
pub use metrics::{compute_error_metrics, ErrorMetrics};
pub use quant::{calibrate, dequantize, quantize, QuantParams, QuantScheme};

/// Number of entries in a product table.
pub const TABLE_LEN: usize = 1 << 16;

/// Energy of the exact 8-bit multiplier (mul8u_1JFF), arbitrary consistent units.
pub const EXACT8_ENERGY: f64 = 0.391;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MultiplierSource {
    Builtin,
    Imported,
}

/// Builtin multiplier families.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BuiltinKind {
    Exact,
    /// Zeroes the low `k` bits of both operands before multiplying (`1 ≤ k ≤ 4`).
    Trunc(u8),
}

impl BuiltinKind {
    pub fn name(self) -> String {
        match self {
            BuiltinKind::Exact => "exact".to_string(),
            BuiltinKind::Trunc(k) => format!("trunc_{k}"),
        }
    }
}

impl fmt::Display for BuiltinKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl FromStr for BuiltinKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" | "mul8u_1JFF" | "1JFF" => Ok(BuiltinKind::Exact),
            _ => {
                let k = s
                    .strip_prefix("trunc_")
                    .and_then(|k| k.parse::<u8>().ok())
                    .filter(|k| (1..=4).contains(k))
                    .ok_or_else(|| {
                        Error::Multiplier(format!("unknown builtin multiplier `{s}`"))
                    })?;
                Ok(BuiltinKind::Trunc(k))
            }
        }
    }
}

/// An unsigned 8×8-bit multiplier described by its full product table.
#[derive(Clone)]
pub struct MultiplierSpec {
    name: String,
    table: Box<[u16]>,
    // b-major copy of `table`: `by_weight[(b << 8) | a] == table[(a << 8) | b]`.
    // Convolution kernels hold the weight operand fixed and sweep activations.
    by_weight: Box<[u16]>,
    energy_per_op: f64,
    source: MultiplierSource,
}

impl fmt::Debug for MultiplierSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MultiplierSpec")
            .field("name", &self.name)
            .field("energy_per_op", &self.energy_per_op)
            .field("source", &self.source)
            .finish_non_exhaustive()
    }
}

impl PartialEq for MultiplierSpec {
    fn eq(&self, other: &Self) -> bool {
        self.name == other.name
            && self.table == other.table
            && self.energy_per_op == other.energy_per_op
            && self.source == other.source
    }
}

impl MultiplierSpec {
    pub fn new(
        name: impl Into<String>,
        table: Vec<u16>,
        energy_per_op: f64,
        source: MultiplierSource,
    ) -> Result<Self> {
        let name = name.into();
        if table.len() != TABLE_LEN {
            return Err(Error::Multiplier(format!(
                "table for `{name}` has {} entries, expected {TABLE_LEN}",
                table.len()
            )));
        }
        if !(energy_per_op.is_finite() && energy_per_op > 0.0) {
            return Err(Error::Multiplier(format!(
                "energy_per_op for `{name}` must be positive, got {energy_per_op}"
            )));
        }
        let mut by_weight = vec![0u16; TABLE_LEN];
        for a in 0..256 {
            for b in 0..256 {
                by_weight[(b << 8) | a] = table[(a << 8) | b];
            }
        }
        Ok(MultiplierSpec {
            name,
            table: table.into_boxed_slice(),
            by_weight: by_weight.into_boxed_slice(),
            energy_per_op,
            source,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn table(&self) -> &[u16] {
        &self.table
    }

    pub fn energy_per_op(&self) -> f64 {
        self.energy_per_op
    }

    pub fn source(&self) -> MultiplierSource {
        self.source
    }

    /// Returns a copy with a different energy figure (e.g. when a table is
    /// re-labelled with a published energy value).
    pub fn with_energy(&self, energy_per_op: f64) -> Result<Self> {
        Self::new(
            self.name.clone(),
            self.table.to_vec(),
            energy_per_op,
            self.source,
        )
    }

    /// The 256 products `a × weight` for every activation code `a`.
    #[inline]
    pub fn weight_column(&self, weight: u8) -> &[u16] {
        let start = (weight as usize) << 8;
        &self.by_weight[start..start + 256]
    }

    pub fn is_exact(&self) -> bool {
        self.table
            .iter()
            .enumerate()
            .all(|(i, &p)| p as usize == (i >> 8) * (i & 0xff))
    }

    /// SHA-256 over the little-endian table bytes, hex encoded.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for p in self.table.iter() {
            hasher.update(p.to_le_bytes());
        }
        hex::encode(hasher.finalize())
    }
}

/// Looks up the emulated product of two quantized operands.
#[inline]
pub fn approx_multiply(a: u8, b: u8, m: &MultiplierSpec) -> u16 {
    m.table[((a as usize) << 8) | b as usize]
}

pub fn build_builtin_multiplier(kind: BuiltinKind) -> MultiplierSpec {
    let (mask, energy) = match kind {
        BuiltinKind::Exact => (0xffusize, EXACT8_ENERGY),
        BuiltinKind::Trunc(k) => {
            assert!((1..=4).contains(&k), "trunc_k requires 1 <= k <= 4");
            // Placeholder energy scaling; no circuit backs these tables.
            (
                !((1usize << k) - 1) & 0xff,
                EXACT8_ENERGY * (1.0 - 0.05 * k as f64),
            )
        }
    };
    let table = (0..TABLE_LEN)
        .map(|i| (((i >> 8) & mask) * ((i & 0xff) & mask)) as u16)
        .collect();
    MultiplierSpec::new(kind.name(), table, energy, MultiplierSource::Builtin)
        .expect("builtin tables are well formed")
}

/// A published reference row for one of the EvoApproxLib multipliers used in
/// the search experiments. Percentages as listed; energy in the same
/// arbitrary units as [`EXACT8_ENERGY`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ReferenceMultiplier {
    pub name: &'static str,
    pub mre_pct: f64,
    pub ep_pct: f64,
    pub mae_pct: f64,
    pub wce_pct: f64,
    pub energy: f64,
}

pub const REFERENCE_MULTIPLIERS: [ReferenceMultiplier; 4] = [
    ReferenceMultiplier {
        name: "mul8u_1JFF",
        mre_pct: 0.0,
        ep_pct: 0.0,
        mae_pct: 0.0,
        wce_pct: 0.0,
        energy: 0.391,
    },
    ReferenceMultiplier {
        name: "mul8u_2AC",
        mre_pct: 1.25,
        ep_pct: 98.12,
        mae_pct: 0.04,
        wce_pct: 0.12,
        energy: 0.311,
    },
    ReferenceMultiplier {
        name: "mul8u_NGR",
        mre_pct: 1.90,
        ep_pct: 96.37,
        mae_pct: 0.07,
        wce_pct: 0.25,
        energy: 0.276,
    },
    ReferenceMultiplier {
        name: "mul8u_DM1",
        mre_pct: 4.73,
        ep_pct: 98.16,
        mae_pct: 0.20,
        wce_pct: 0.89,
        energy: 0.195,
    },
];

/// Finds a reference row by full (`mul8u_NGR`) or short (`NGR`) name.
pub fn reference_multiplier(name: &str) -> Option<&'static ReferenceMultiplier> {
    REFERENCE_MULTIPLIERS
        .iter()
        .find(|r| r.name == name || r.name.strip_prefix("mul8u_") == Some(name))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_products() {
        let m = build_builtin_multiplier(BuiltinKind::Exact);
        assert_eq!(approx_multiply(3, 5, &m), 15);
        assert_eq!(approx_multiply(255, 255, &m), 65025);
        assert_eq!(approx_multiply(200, 100, &m), 20000);
        assert!(m.is_exact());
        assert_eq!(m.energy_per_op(), 0.391);
    }

    #[test]
    fn exact_table_is_exhaustively_correct() {
        let m = build_builtin_multiplier(BuiltinKind::Exact);
        for a in 0..=255u8 {
            for b in 0..=255u8 {
                assert_eq!(approx_multiply(a, b, &m) as u32, a as u32 * b as u32);
            }
        }
    }

    #[test]
    fn truncated_products() {
        let m = build_builtin_multiplier(BuiltinKind::Trunc(2));
        assert_eq!(approx_multiply(7, 7, &m), 16);
        assert_eq!(approx_multiply(3, 3, &m), 0);
        assert!((m.energy_per_op() - 0.391 * 0.9).abs() < 1e-15);
        assert!(!m.is_exact());
    }

    #[test]
    fn address_is_operand_concatenation() {
        let mut table = vec![0u16; TABLE_LEN];
        table[258] = 4242;
        let m = MultiplierSpec::new("probe", table, 1.0, MultiplierSource::Imported).unwrap();
        assert_eq!(approx_multiply(1, 2, &m), 4242);
        assert_eq!(m.weight_column(2)[1], 4242);
    }

    #[test]
    fn rejects_bad_tables() {
        assert!(MultiplierSpec::new("x", vec![0; 10], 1.0, MultiplierSource::Imported).is_err());
        assert!(
            MultiplierSpec::new("x", vec![0; TABLE_LEN], 0.0, MultiplierSource::Imported).is_err()
        );
    }

    #[test]
    fn builtin_names_parse() {
        assert_eq!("exact".parse::<BuiltinKind>().unwrap(), BuiltinKind::Exact);
        assert_eq!(
            "trunc_3".parse::<BuiltinKind>().unwrap(),
            BuiltinKind::Trunc(3)
        );
        assert!("trunc_5".parse::<BuiltinKind>().is_err());
        assert!("bogus".parse::<BuiltinKind>().is_err());
    }

    #[test]
    fn reference_lookup() {
        assert_eq!(reference_multiplier("NGR").unwrap().energy, 0.276);
        assert_eq!(reference_multiplier("mul8u_DM1").unwrap().mre_pct, 4.73);
        assert!(reference_multiplier("nope").is_none());
    }
}
