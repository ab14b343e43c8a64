//! Dataflow planning and the cycle-level latency model.
//!
//! Every encoder layer decomposes into twelve stages. Matmul stages
//! with resident weights split into sub-stages of `tile_rows` output
//! rows; the weight double buffer loads tile t+1 during tile t's
//! compute, so only the first tile's transfer is exposed. QK^T and AV
//! read their "weights" (K and the attention matrix) from the
//! intermediate buffer and transfer nothing.
//!
//! Cycle formulas are idealized — `max(compute, transfer)` per
//! sub-stage plus the prologue — so the model is judged on ratios and
//! trends, not absolute milliseconds.

use crate::bim::{HwConfig, WeightMode};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use serde::Serialize;

/// Weight double-buffer budget per half, bytes.
pub const WEIGHT_BUDGET_BYTES: u64 = 512 * 1024;

/// SIMD lanes of the softmax/LN/GELU special-function cores.
pub const SIMD_WIDTH: usize = 16;

/// Pipeline depth of the LUT lookup path.
pub const LUT_PIPELINE_DEPTH: u64 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum StageKind {
    Matmul,
    Softmax,
    LayerNorm,
    Gelu,
}

#[derive(Debug, Clone, Serialize)]
pub struct SubStage {
    pub rows: usize,
    pub weight_bytes: u64,
}

/// One per-layer stage: geometry for the cycle formulas plus its MAC
/// and weight-byte totals.
#[derive(Debug, Clone, Serialize)]
pub struct Stage {
    pub name: String,
    pub kind: StageKind,
    #[serde(skip)]
    pub mode: Option<WeightMode>,
    pub out_rows: usize,
    pub in_dim: usize,
    pub n_vec: usize,
    pub mac_count: u64,
    pub weight_bytes: u64,
    pub sub_stages: Vec<SubStage>,
}

/// Stage decomposition of one encoder layer, shared by all layers.
#[derive(Debug, Clone, Serialize)]
pub struct DataflowPlan {
    pub config: ModelConfig,
    pub stages: Vec<Stage>,
    pub simd_width: usize,
    pub lut_depth: u64,
    pub weight_budget: u64,
}

impl DataflowPlan {
    /// Exact MAC count across all matmul stages of the full model.
    pub fn total_macs(&self) -> u64 {
        self.stages.iter().map(|s| s.mac_count).sum::<u64>() * self.config.num_layers as u64
    }
}

fn weight_mode(w_bits: u8) -> WeightMode {
    if w_bits <= 4 {
        WeightMode::W4
    } else {
        WeightMode::W8
    }
}

fn bytes_per_row(in_dim: usize, mode: WeightMode, with_bias: bool) -> u64 {
    let wb = match mode {
        WeightMode::W4 => in_dim.div_ceil(2) as u64,
        WeightMode::W8 => in_dim as u64,
    };
    wb + if with_bias { 4 } else { 0 }
}

fn split_tiles(out_rows: usize, tile: usize, bytes_row: u64) -> Vec<SubStage> {
    let mut subs = Vec::new();
    let mut r = 0;
    while r < out_rows {
        let rows = tile.min(out_rows - r);
        subs.push(SubStage {
            rows,
            weight_bytes: rows as u64 * bytes_row,
        });
        r += rows;
    }
    subs
}

/// Build the per-layer stage list with the default weight-buffer
/// budget. `tile_rows` of `None` picks the default policy: one full
/// PE-array pass per sub-stage, capped by the budget; an explicit tile
/// that does not fit the budget is a planning error.
pub fn plan_dataflow(
    mc: &ModelConfig,
    hw: &HwConfig,
    tile_rows: Option<usize>,
) -> Result<DataflowPlan> {
    plan_dataflow_with_budget(mc, hw, tile_rows, WEIGHT_BUDGET_BYTES)
}

/// [`plan_dataflow`] with an explicit per-half weight-buffer budget.
pub fn plan_dataflow_with_budget(
    mc: &ModelConfig,
    hw: &HwConfig,
    tile_rows: Option<usize>,
    budget: u64,
) -> Result<DataflowPlan> {
    mc.validate()?;
    let (h, f, seq, heads, d) = (mc.hidden, mc.ffn_dim, mc.seq_len, mc.heads, mc.head_dim);
    let mode = weight_mode(mc.w_bits);
    let np = hw.parallel_rows();

    let tile_for = |out_rows: usize, bytes_row: u64| -> Result<usize> {
        let budget_rows = (budget / bytes_row.max(1)) as usize;
        match tile_rows {
            Some(t) => {
                if t == 0 {
                    return Err(Error::Planning("tile_rows must be positive".into()));
                }
                let need = t.min(out_rows) as u64 * bytes_row;
                if need > budget {
                    return Err(Error::Planning(format!(
                        "tile of {} rows needs {need} weight-buffer bytes per half, budget is {budget}",
                        t.min(out_rows)
                    )));
                }
                Ok(t.min(out_rows))
            }
            None => {
                if budget_rows == 0 {
                    return Err(Error::Planning(format!(
                        "one weight row of {bytes_row} bytes exceeds the {budget}-byte buffer half"
                    )));
                }
                Ok(np.min(budget_rows).min(out_rows).max(1))
            }
        }
    };

    let mut stages = Vec::new();
    let matmul = |name: &str,
                  kind_mode: WeightMode,
                  out_rows: usize,
                  in_dim: usize,
                  n_vec: usize,
                  resident: bool|
     -> Result<Stage> {
        let bytes_row = if resident {
            bytes_per_row(in_dim, kind_mode, true)
        } else {
            0
        };
        let subs = if resident {
            split_tiles(out_rows, tile_for(out_rows, bytes_row)?, bytes_row)
        } else {
            vec![SubStage {
                rows: out_rows,
                weight_bytes: 0,
            }]
        };
        Ok(Stage {
            name: name.into(),
            kind: StageKind::Matmul,
            mode: Some(kind_mode),
            out_rows,
            in_dim,
            n_vec,
            mac_count: (out_rows * in_dim * n_vec) as u64,
            weight_bytes: subs.iter().map(|s| s.weight_bytes).sum(),
            sub_stages: subs,
        })
    };

    stages.push(matmul("Q-proj", mode, h, h, seq, true)?);
    stages.push(matmul("K-proj", mode, h, h, seq, true)?);
    stages.push(matmul("V-proj", mode, h, h, seq, true)?);
    // K held stationary per head; one pass per query vector per head.
    stages.push(matmul("QK^T", WeightMode::W8, seq, d, seq * heads, false)?);
    stages.push(Stage {
        name: "softmax".into(),
        kind: StageKind::Softmax,
        mode: None,
        out_rows: seq * heads,
        in_dim: seq,
        n_vec: 1,
        mac_count: 0,
        weight_bytes: 0,
        sub_stages: vec![],
    });
    // Attention matrix stationary, V columns streamed.
    stages.push(matmul("AV", WeightMode::W8, seq, seq, h, false)?);
    stages.push(matmul("O-proj", mode, h, h, seq, true)?);
    let ln_stage = |name: &str| Stage {
        name: name.into(),
        kind: StageKind::LayerNorm,
        mode: None,
        out_rows: seq,
        in_dim: h,
        n_vec: 1,
        mac_count: 0,
        weight_bytes: 2 * h as u64,
        sub_stages: vec![SubStage {
            rows: seq,
            weight_bytes: 2 * h as u64,
        }],
    };
    stages.push(ln_stage("LN1"));
    stages.push(matmul("FFN1", mode, f, h, seq, true)?);
    stages.push(Stage {
        name: "GELU".into(),
        kind: StageKind::Gelu,
        mode: None,
        out_rows: seq,
        in_dim: f,
        n_vec: 1,
        mac_count: 0,
        weight_bytes: 0,
        sub_stages: vec![],
    });
    stages.push(matmul("FFN2", mode, h, f, seq, true)?);
    stages.push(ln_stage("LN2"));

    Ok(DataflowPlan {
        config: *mc,
        stages,
        simd_width: SIMD_WIDTH,
        lut_depth: LUT_PIPELINE_DEPTH,
        weight_budget: budget,
    })
}

/// Per-stage cycle totals, aggregated over all layers.
#[derive(Debug, Clone, Serialize)]
pub struct StagePerf {
    pub name: String,
    pub compute_cycles: u64,
    pub transfer_cycles: u64,
    pub overlapped_cycles: u64,
    pub latency_cycles: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct PerfReport {
    pub stages: Vec<StagePerf>,
    pub io_cycles: u64,
    pub total_cycles: u64,
    pub latency_ms: f64,
    pub fps: f64,
    pub hw: HwConfig,
    pub model: ModelConfig,
}

fn transfer_cycles(bytes: u64, bw: f64) -> u64 {
    if bytes == 0 {
        return 0;
    }
    if !bw.is_finite() {
        return 0;
    }
    (bytes as f64 / bw).ceil() as u64
}

/// Cycle estimate for a plan on a hardware configuration.
pub fn estimate_latency(plan: &DataflowPlan, hw: &HwConfig) -> PerfReport {
    let mc = &plan.config;
    let np = hw.parallel_rows() as u64;
    let bw = hw.bandwidth_bytes_per_cycle;
    let simd = plan.simd_width as u64;
    let ceil = |a: u64, b: u64| a.div_ceil(b);

    let mut stages = Vec::with_capacity(plan.stages.len());
    let mut total: u64 = 0;
    for st in &plan.stages {
        let (mut compute, mut transfer, mut overlapped, mut latency) = (0u64, 0u64, 0u64, 0u64);
        match st.kind {
            StageKind::Matmul => {
                let lane = hw
                    .bim
                    .lane_capacity(st.mode.expect("matmul stage has a mode"))
                    as u64;
                let inner = ceil(st.in_dim as u64, lane) * st.n_vec as u64;
                for (idx, sub) in st.sub_stages.iter().enumerate() {
                    let c = ceil(sub.rows as u64, np) * inner;
                    let t = transfer_cycles(sub.weight_bytes, bw);
                    compute += c;
                    transfer += t;
                    if idx == 0 {
                        // Prologue: the first tile's load is exposed.
                        latency += t + c.max(t);
                        overlapped += c.min(t);
                    } else {
                        latency += c.max(t);
                        overlapped += c.min(t);
                    }
                }
            }
            StageKind::Softmax => {
                compute = st.out_rows as u64 * (ceil(st.in_dim as u64, simd) + plan.lut_depth);
                latency = compute;
            }
            StageKind::LayerNorm => {
                // Three passes over the vector plus pipeline fill.
                compute = st.out_rows as u64 * (4 * ceil(st.in_dim as u64, simd));
                transfer = transfer_cycles(st.weight_bytes, bw);
                latency = transfer + compute.max(transfer);
                overlapped = compute.min(transfer);
            }
            StageKind::Gelu => {
                compute = st.out_rows as u64 * ceil(st.in_dim as u64, simd);
                latency = compute;
            }
        }
        let layers = mc.num_layers as u64;
        total += latency * layers;
        stages.push(StagePerf {
            name: st.name.clone(),
            compute_cycles: compute * layers,
            transfer_cycles: transfer * layers,
            overlapped_cycles: overlapped * layers,
            latency_cycles: latency * layers,
        });
    }

    // Host I/O and the one-time parameter-buffer load (LUT contents).
    let input_bytes = (mc.seq_len * mc.hidden) as u64;
    let drain_bytes = (mc.hidden * 4) as u64;
    let lut_bytes = mc.num_layers as u64 * 512;
    let io_cycles = transfer_cycles(input_bytes + drain_bytes + lut_bytes, bw);
    total += io_cycles;

    let latency_ms = total as f64 / (hw.clock_mhz * 1e3);
    PerfReport {
        stages,
        io_cycles,
        total_cycles: total,
        latency_ms,
        fps: 1000.0 / latency_ms,
        hw: *hw,
        model: *mc,
    }
}

/// Multiplier and modeled buffer tallies.
#[derive(Debug, Clone, Serialize)]
pub struct ResourceSummary {
    pub multipliers_8x4: usize,
    pub weight_buffer_bytes: u64,
    pub psum_buffer_bytes: u64,
    pub intermediate_buffer_bytes: u64,
}

pub fn resource_summary(hw: &HwConfig, plan: &DataflowPlan) -> ResourceSummary {
    let mc = &plan.config;
    let max_sub = plan
        .stages
        .iter()
        .flat_map(|s| s.sub_stages.iter().map(|t| t.weight_bytes))
        .max()
        .unwrap_or(0);
    let max_tile_rows = plan
        .stages
        .iter()
        .flat_map(|s| s.sub_stages.iter().map(|t| t.rows))
        .max()
        .unwrap_or(0) as u64;
    ResourceSummary {
        multipliers_8x4: hw.total_multipliers(),
        weight_buffer_bytes: 2 * max_sub,
        psum_buffer_bytes: 2 * max_tile_rows * 4,
        intermediate_buffer_bytes: (mc.seq_len * mc.hidden + mc.seq_len * mc.seq_len * mc.heads)
            as u64,
    }
}

impl PerfReport {
    /// Human-readable table.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<10} {:>14} {:>14} {:>14} {:>14}\n",
            "stage", "compute", "transfer", "overlapped", "latency"
        ));
        for s in &self.stages {
            out.push_str(&format!(
                "{:<10} {:>14} {:>14} {:>14} {:>14}\n",
                s.name, s.compute_cycles, s.transfer_cycles, s.overlapped_cycles, s.latency_cycles
            ));
        }
        out.push_str(&format!("{:<10} {:>14}\n", "host-io", self.io_cycles));
        out.push_str(&format!(
            "total_cycles = {}\nlatency_ms = {:.4}\nfps = {:.4}\n",
            self.total_cycles, self.latency_ms, self.fps
        ));
        out
    }

    /// Machine-readable form (stable field names).
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("PerfReport serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bim::{BimConfig, BimVariant};

    fn hw(pus: usize, pes: usize, m: usize) -> HwConfig {
        let mut h = HwConfig::new(pus, pes, BimConfig::new(m, BimVariant::TypeA).unwrap()).unwrap();
        h.clock_mhz = 214.0;
        h.bandwidth_bytes_per_cycle = 16.0;
        h
    }

    #[test]
    fn substage_counts_match_tiling() {
        let mc = ModelConfig::bert_base();
        let h = hw(12, 8, 16);
        // No tiling: one sub-stage per 768x768 projection (budget wide
        // enough for the FFN2 tile too).
        let plan = plan_dataflow_with_budget(&mc, &h, Some(768), 2 << 20).unwrap();
        let qproj = &plan.stages[0];
        assert_eq!(qproj.sub_stages.len(), 1);
        assert!(plan
            .stages
            .iter()
            .filter(|s| s.name.ends_with("-proj"))
            .all(|s| s.sub_stages.len() == 1));

        let plan = plan_dataflow(&mc, &h, Some(64)).unwrap();
        assert_eq!(plan.stages[0].sub_stages.len(), 12);

        let plan = plan_dataflow(&mc, &h, Some(100)).unwrap();
        let ffn1 = plan.stages.iter().find(|s| s.name == "FFN1").unwrap();
        assert_eq!(ffn1.sub_stages.len(), 31);
        assert_eq!(ffn1.sub_stages.last().unwrap().rows, 72);
    }

    #[test]
    fn oversized_tile_is_planning_error() {
        let mc = ModelConfig::bert_base();
        let h = hw(12, 8, 16);
        // FFN2 rows are 1540 bytes each; 512 KiB holds 340 of them.
        let err = plan_dataflow(&mc, &h, Some(400)).unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("weight-buffer"), "{msg}");
        assert!(msg.contains("524288"), "{msg}");
    }

    #[test]
    fn work_conservation() {
        let mc = ModelConfig::bert_base();
        let h = hw(12, 8, 16);
        let plan = plan_dataflow(&mc, &h, None).unwrap();
        let per_layer = 4 * mc.seq_len * mc.hidden * mc.hidden
            + 2 * mc.seq_len * mc.seq_len * mc.hidden
            + 2 * mc.seq_len * mc.hidden * mc.ffn_dim;
        assert_eq!(plan.total_macs(), (per_layer * mc.num_layers) as u64);
    }

    #[test]
    fn doubling_m_halves_matmul_compute() {
        let mc = ModelConfig::bert_base();
        let mut h16 = hw(12, 8, 16);
        let mut h32 = hw(12, 8, 32);
        h16.bandwidth_bytes_per_cycle = f64::INFINITY;
        h32.bandwidth_bytes_per_cycle = f64::INFINITY;
        let p16 = plan_dataflow(&mc, &h16, None).unwrap();
        let p32 = plan_dataflow(&mc, &h32, None).unwrap();
        let r16 = estimate_latency(&p16, &h16);
        let r32 = estimate_latency(&p32, &h32);
        for (a, b) in r16.stages.iter().zip(&r32.stages) {
            if [
                "Q-proj", "K-proj", "V-proj", "QK^T", "AV", "O-proj", "FFN1", "FFN2",
            ]
            .contains(&a.name.as_str())
            {
                assert_eq!(a.compute_cycles, 2 * b.compute_cycles, "{}", a.name);
                assert_eq!(b.transfer_cycles, 0);
            }
        }
    }

    #[test]
    fn infinite_bandwidth_removes_transfer() {
        let mc = ModelConfig::bert_base();
        let mut h = hw(12, 8, 16);
        h.bandwidth_bytes_per_cycle = f64::INFINITY;
        let plan = plan_dataflow(&mc, &h, None).unwrap();
        let rep = estimate_latency(&plan, &h);
        assert_eq!(rep.io_cycles, 0);
        let compute: u64 = rep.stages.iter().map(|s| s.compute_cycles).sum();
        assert_eq!(rep.total_cycles, compute);
        for s in &rep.stages {
            assert_eq!(s.transfer_cycles, 0);
        }
    }

    #[test]
    fn paper_config_ratio_in_band() {
        let mc = ModelConfig::bert_base();
        let h8 = hw(12, 8, 16);
        let h16 = hw(12, 16, 16);
        let r8 = estimate_latency(&plan_dataflow(&mc, &h8, None).unwrap(), &h8);
        let r16 = estimate_latency(&plan_dataflow(&mc, &h16, None).unwrap(), &h16);
        let ratio = r8.latency_ms / r16.latency_ms;
        assert!((1.6..=2.05).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn latency_monotone_in_resources() {
        let mc = ModelConfig::bert_base();
        let base = estimate_latency(
            &plan_dataflow(&mc, &hw(12, 8, 16), None).unwrap(),
            &hw(12, 8, 16),
        );
        for h in [hw(12, 16, 16), hw(12, 8, 32), hw(24, 8, 16)] {
            let rep = estimate_latency(&plan_dataflow(&mc, &h, None).unwrap(), &h);
            assert!(rep.total_cycles <= base.total_cycles);
        }
        let mut hbw = hw(12, 8, 16);
        hbw.bandwidth_bytes_per_cycle = 32.0;
        let rep = estimate_latency(&plan_dataflow(&mc, &hbw, None).unwrap(), &hbw);
        assert!(rep.total_cycles <= base.total_cycles);
    }

    #[test]
    fn overlap_bound_holds_with_ample_bandwidth() {
        let mc = ModelConfig::bert_base();
        let mut h = hw(12, 8, 16);
        h.bandwidth_bytes_per_cycle = 1024.0;
        let plan = plan_dataflow(&mc, &h, None).unwrap();
        let np = h.parallel_rows() as u64;
        for st in &plan.stages {
            if st.kind != StageKind::Matmul {
                continue;
            }
            let lane = h.bim.lane_capacity(st.mode.unwrap()) as u64;
            let inner = (st.in_dim as u64).div_ceil(lane) * st.n_vec as u64;
            for sub in st.sub_stages.iter().skip(1) {
                let c = (sub.rows as u64).div_ceil(np) * inner;
                let t = transfer_cycles(sub.weight_bytes, h.bandwidth_bytes_per_cycle);
                assert!(t <= c, "{}: transfer {t} > compute {c}", st.name);
            }
        }
    }

    #[test]
    fn resource_summary_multiplier_counts() {
        let mc = ModelConfig::bert_base();
        let plan = plan_dataflow(&mc, &hw(12, 8, 16), None).unwrap();
        assert_eq!(
            resource_summary(&hw(12, 8, 16), &plan).multipliers_8x4,
            1536
        );
        assert_eq!(
            resource_summary(&hw(12, 16, 16), &plan).multipliers_8x4,
            3072
        );
        assert_eq!(resource_summary(&hw(1, 1, 2), &plan).multipliers_8x4, 2);
    }

    #[test]
    fn fps_is_inverse_latency() {
        let mc = ModelConfig::bert_base();
        let h = hw(12, 8, 16);
        let rep = estimate_latency(&plan_dataflow(&mc, &h, None).unwrap(), &h);
        assert!((rep.fps - 1000.0 / rep.latency_ms).abs() < 1e-9);
    }
}
