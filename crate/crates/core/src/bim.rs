//! Bit-split inner-product module and the tiled matrix-vector kernel.
//!
//! A BIM holds `M = 2m` sign-configurable 8x4 multipliers. In W4 mode
//! every multiplier handles one product; in W8 mode a pair of
//! multipliers fuses for one 8x8 product by splitting the 8-bit weight
//! into a signed high nibble and an unsigned low nibble. The two
//! variants differ only in where the `<< 4` on the high-nibble partial
//! sums happens: after the high adder tree (Type A) or per product
//! before a shared tree (Type B). Both must produce identical values.

use crate::error::{Error, Result};
use crate::qnum::{requantize_sum, QTensor, RequantMul, Scale8};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub enum BimVariant {
    TypeA,
    TypeB,
}

/// Multiplier array geometry: an even count of 8x4 multipliers, half
/// of which pair up for 8x8 products.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub struct BimConfig {
    pub multipliers: usize,
    pub variant: BimVariant,
}

impl BimConfig {
    pub fn new(multipliers: usize, variant: BimVariant) -> Result<Self> {
        if multipliers < 2 || !multipliers.is_multiple_of(2) {
            return Err(Error::invalid(format!(
                "BIM multiplier count must be even and >= 2, got {multipliers}"
            )));
        }
        Ok(BimConfig {
            multipliers,
            variant,
        })
    }

    /// Fused pair count m = M/2.
    pub fn pairs(&self) -> usize {
        self.multipliers / 2
    }

    /// Elements consumed per cycle for a weight mode.
    pub fn lane_capacity(&self, mode: WeightMode) -> usize {
        match mode {
            WeightMode::W4 => self.multipliers,
            WeightMode::W8 => self.pairs(),
        }
    }
}

impl Default for BimConfig {
    fn default() -> Self {
        BimConfig {
            multipliers: 16,
            variant: BimVariant::TypeA,
        }
    }
}

/// Accelerator geometry shared by the functional kernels and the cycle
/// model.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct HwConfig {
    pub num_pus: usize,
    pub pes_per_pu: usize,
    pub bim: BimConfig,
    pub clock_mhz: f64,
    pub bandwidth_bytes_per_cycle: f64,
}

impl HwConfig {
    pub fn new(num_pus: usize, pes_per_pu: usize, bim: BimConfig) -> Result<Self> {
        if num_pus < 1 || pes_per_pu < 1 {
            return Err(Error::invalid("PU and PE counts must be >= 1"));
        }
        Ok(HwConfig {
            num_pus,
            pes_per_pu,
            bim,
            clock_mhz: 214.0,
            bandwidth_bytes_per_cycle: 16.0,
        })
    }

    /// Output rows processed in parallel across all PEs.
    pub fn parallel_rows(&self) -> usize {
        self.num_pus * self.pes_per_pu
    }

    pub fn total_multipliers(&self) -> usize {
        self.num_pus * self.pes_per_pu * self.bim.multipliers
    }
}

impl Default for HwConfig {
    fn default() -> Self {
        HwConfig {
            num_pus: 12,
            pes_per_pu: 8,
            bim: BimConfig::default(),
            clock_mhz: 214.0,
            bandwidth_bytes_per_cycle: 16.0,
        }
    }
}

/// Weight bitwidth handled by the array in a given pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightMode {
    W4,
    W8,
}

/// Signed/unsigned nibble decomposition of an 8-bit value:
/// `hi * 16 + lo` reconstructs the input exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NibbleSplit {
    pub hi: i8,
    pub lo: u8,
}

/// Arithmetic-floor high nibble, non-negative low nibble.
pub fn split8(b: i8) -> NibbleSplit {
    let v = b as i32;
    NibbleSplit {
        hi: v.div_euclid(16) as i8,
        lo: v.rem_euclid(16) as u8,
    }
}

fn check_a(a: &[i32], a_unsigned: bool) -> Result<()> {
    let (lo, hi) = if a_unsigned { (0, 255) } else { (-128, 127) };
    if a.iter().any(|&v| v < lo || v > hi) {
        return Err(Error::invalid(format!(
            "activation operand outside 8-bit {} range",
            if a_unsigned { "unsigned" } else { "signed" }
        )));
    }
    Ok(())
}

/// One BIM pass: the exact inner product of up to a lane-capacity worth
/// of operands. `a` is the 8-bit operand (the per-multiplier sign
/// signal makes it signed or unsigned); `w` holds 4-bit weights in W4
/// mode and 8-bit weights (consuming a multiplier pair each) in W8.
pub fn bim_dot(
    a: &[i32],
    w: &[i32],
    mode: WeightMode,
    a_unsigned: bool,
    cfg: &BimConfig,
) -> Result<i32> {
    let (hi_tree, lo_tree) = bim_dot_trees(a, w, mode, a_unsigned, cfg)?;
    Ok(match cfg.variant {
        // Shift once at the high tree's output.
        BimVariant::TypeA => (hi_tree << 4) + lo_tree,
        BimVariant::TypeB => {
            // Shift already applied per product; trees carry disjoint
            // halves and are simply added.
            hi_tree + lo_tree
        }
    })
}

/// Per-tree partial sums before the variant's final combine. Exposed
/// for the sign-handling property tests.
pub fn bim_dot_trees(
    a: &[i32],
    w: &[i32],
    mode: WeightMode,
    a_unsigned: bool,
    cfg: &BimConfig,
) -> Result<(i32, i32)> {
    if a.len() != w.len() {
        return Err(Error::invalid(format!(
            "operand length mismatch: {} vs {}",
            a.len(),
            w.len()
        )));
    }
    check_a(a, a_unsigned)?;
    match mode {
        WeightMode::W4 => {
            if a.len() > cfg.multipliers {
                return Err(Error::invalid(format!(
                    "W4 length {} exceeds multiplier count {}; caller must tile",
                    a.len(),
                    cfg.multipliers
                )));
            }
            if w.iter().any(|&v| !(-8..=7).contains(&v)) {
                return Err(Error::invalid("W4 weight outside [-8, 7]"));
            }
            // No split: the two m-wide trees each sum half the lanes and
            // the shift-add logic is bypassed in both variants.
            let m = cfg.pairs().min(a.len());
            let first: i32 = a[..m].iter().zip(&w[..m]).map(|(&x, &y)| x * y).sum();
            let second: i32 = a[m..].iter().zip(&w[m..]).map(|(&x, &y)| x * y).sum();
            match cfg.variant {
                BimVariant::TypeA => Ok((0, first + second)),
                BimVariant::TypeB => Ok((first, second)),
            }
        }
        WeightMode::W8 => {
            if a.len() > cfg.pairs() {
                return Err(Error::invalid(format!(
                    "W8 length {} exceeds pair count {}; caller must tile",
                    a.len(),
                    cfg.pairs()
                )));
            }
            if w.iter().any(|&v| !(-128..=127).contains(&v)) {
                return Err(Error::invalid("W8 weight outside [-128, 127]"));
            }
            // Each 8-bit weight splits across a multiplier pair: the hi
            // lane is signed x signed, the lo lane signed x unsigned.
            let mut hi_tree = 0i32;
            let mut lo_tree = 0i32;
            for (&x, &wv) in a.iter().zip(w) {
                let s = split8(wv as i8);
                let hi_prod = x * s.hi as i32;
                let lo_prod = x * s.lo as i32;
                match cfg.variant {
                    BimVariant::TypeA => {
                        // Input rearrangement routes hi products to the
                        // hi tree; one shared shift after the tree.
                        hi_tree += hi_prod;
                        lo_tree += lo_prod;
                    }
                    BimVariant::TypeB => {
                        hi_tree += hi_prod << 4;
                        lo_tree += lo_prod;
                    }
                }
            }
            Ok((hi_tree, lo_tree))
        }
    }
}

/// Matrix-vector product through the PE array. The accumulation is
/// exact (held widened, saturated to the 32-bit rails only at the end
/// so the result cannot depend on tile order); `saturated` flags any
/// row that hit the rails.
#[derive(Debug, Clone, PartialEq)]
pub struct MatvecOut {
    pub acc: Vec<i32>,
    pub cycles: u64,
    pub saturated: bool,
}

pub(crate) fn matvec_mode(bits: u8) -> Result<WeightMode> {
    match bits {
        4 => Ok(WeightMode::W4),
        8 => Ok(WeightMode::W8),
        other => Err(Error::invalid(format!(
            "no weight mode for {other}-bit storage"
        ))),
    }
}

/// Slice-level kernel shared by the public wrapper and the encoder.
pub(crate) fn pe_matvec_raw(
    w_data: &[i32],
    rows: usize,
    cols: usize,
    mode: WeightMode,
    x: &[i32],
    x_unsigned: bool,
    hw: &HwConfig,
) -> Result<MatvecOut> {
    if x.len() != cols {
        return Err(Error::invalid(format!(
            "input length {} does not match weight columns {cols}",
            x.len()
        )));
    }
    let lane = hw.bim.lane_capacity(mode);
    let mut acc = Vec::with_capacity(rows);
    let mut saturated = false;
    for r in 0..rows {
        let wr = &w_data[r * cols..(r + 1) * cols];
        let mut sum = 0i64;
        let mut c = 0;
        while c < cols {
            let end = (c + lane).min(cols);
            sum += bim_dot(&x[c..end], &wr[c..end], mode, x_unsigned, &hw.bim)? as i64;
            c = end;
        }
        let v = if sum > i32::MAX as i64 {
            saturated = true;
            i32::MAX
        } else if sum < i32::MIN as i64 {
            saturated = true;
            i32::MIN
        } else {
            sum as i32
        };
        acc.push(v);
    }
    let row_passes = rows.div_ceil(hw.parallel_rows()) as u64;
    let col_chunks = cols.div_ceil(lane) as u64;
    Ok(MatvecOut {
        acc,
        cycles: row_passes * col_chunks,
        saturated,
    })
}

/// `result[r] = sum_c w[r, c] * x[c]` exactly, plus the cycle count the
/// PE array would spend. The weight mode comes from the tensor's
/// storage bitwidth; `x` must be 8-bit.
pub fn pe_matvec(wq: &QTensor, x: &QTensor, hw: &HwConfig) -> Result<MatvecOut> {
    if x.bits != 8 {
        return Err(Error::invalid("pe_matvec input must be 8-bit"));
    }
    let mode = matvec_mode(wq.bits)?;
    pe_matvec_raw(&wq.data, wq.rows(), wq.cols(), mode, &x.data, !x.signed, hw)
}

/// Matrix-vector product followed by per-row requantization to an
/// activation tensor. Functionally identical to the sequential
/// composition; the overlap of quantization with the next tile's
/// accumulation is a cycle-model concern only.
pub fn pe_matvec_requant(
    wq: &QTensor,
    x: &QTensor,
    bias: Option<&QTensor>,
    rm: &RequantMul,
    hw: &HwConfig,
    out_bits: u8,
    out_scale: Scale8,
) -> Result<QTensor> {
    let out = pe_matvec(wq, x, hw)?;
    let rows = wq.rows();
    if let Some(b) = bias {
        if b.len() != rows {
            return Err(Error::invalid(format!(
                "bias length {} does not match output rows {rows}",
                b.len()
            )));
        }
    }
    let data: Vec<i32> = out
        .acc
        .iter()
        .enumerate()
        .map(|(r, &acc)| {
            let b = bias.map_or(0i64, |b| b.data[r] as i64);
            requantize_sum(acc as i64 + b, rm, out_bits, true)
        })
        .collect();
    QTensor::new(data, out_bits, true, vec![rows], out_scale)
}
