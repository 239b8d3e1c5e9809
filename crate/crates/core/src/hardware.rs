//! Silicon area and throughput estimates for a quantized network.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::engine::{Binding, ModelState, Tensor, DEFAULT_SEED};
use crate::error::{Error, Result};
use crate::freezing::{make_freeze_plan, FreezeScheme};
use crate::quant::{build_qgraph, QGraph, QOp};
use crate::topology::{graph_macs, unroll_repeats, Core, ExecGraph, NetworkSpec, Op, ParamKind, Role};

/// Area of the reference design after calibration, mm^2.
pub const TARGET_AREA_MM2: f64 = 4.0;
pub const BASELINE_AREA_MM2: f64 = 15.0;
pub const BASELINE_UTILIZATION: f64 = 0.4;
/// Frame rate of the reference design at 640x480 with no repetition.
pub const TARGET_FPS: f64 = 200.0;
pub const VGA: (usize, usize) = (640, 480);
/// Bits per stored trainable value.
pub const WEIGHT_BITS: f64 = 8.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Baseline {
    pub area_mm2: f64,
    pub utilization: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostParams {
    pub a_adder: f64,
    pub a_mult: f64,
    pub a_sram_bit: f64,
    pub a_fixed_overhead: f64,
    /// Control and line buffers as a share of compute area.
    pub overhead_fraction: f64,
    pub clock_hz: f64,
    pub reload_bw_bits_per_s: f64,
    pub baseline: Baseline,
    pub pipeline_utilization: f64,
}

impl Default for CostParams {
    /// Relative unit costs before calibration: a multiplier is 20 adders, an
    /// SRAM bit 0.6 adders.
    fn default() -> Self {
        Self {
            a_adder: 1.0,
            a_mult: 20.0,
            a_sram_bit: 0.6,
            a_fixed_overhead: 0.0,
            overhead_fraction: 0.15,
            clock_hz: TARGET_FPS * (VGA.0 * VGA.1) as f64,
            reload_bw_bits_per_s: 1e9,
            baseline: Baseline {
                area_mm2: BASELINE_AREA_MM2,
                utilization: BASELINE_UTILIZATION,
            },
            pipeline_utilization: 1.0,
        }
    }
}

impl CostParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.a_adder,
            self.a_mult,
            self.a_sram_bit,
            self.clock_hz,
            self.reload_bw_bits_per_s,
            self.baseline.area_mm2,
        ]
        .iter()
        .all(|&v| v > 0.0 && v.is_finite());
        let util = |u: f64| u > 0.0 && u <= 1.0;
        if !positive
            || !(self.a_fixed_overhead >= 0.0)
            || !(self.overhead_fraction >= 0.0)
            || !util(self.baseline.utilization)
            || !util(self.pipeline_utilization)
        {
            return Err(Error::InvalidArgument(format!("invalid cost parameters {self:?}")));
        }
        Ok(())
    }

    /// Area saved, at worst, by turning one trainable weight into a frozen
    /// scaler: the worst 8-bit CSD code has 4 digits, i.e. 3 adders. The
    /// weaker 7-adder margin is what gets asserted.
    pub fn freeze_margin(&self) -> f64 {
        self.a_mult + WEIGHT_BITS * self.a_sram_bit - 7.0 * self.a_adder
    }

    fn scaled(&self, k: f64) -> Self {
        Self {
            a_adder: self.a_adder * k,
            a_mult: self.a_mult * k,
            a_sram_bit: self.a_sram_bit * k,
            a_fixed_overhead: self.a_fixed_overhead * k,
            ..*self
        }
    }
}

/// Hardware units of one layer (tail repetitions share hardware, so only the
/// first repetition is counted; the head is not part of the backbone block).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerArea {
    pub layer: String,
    pub role: Role,
    pub scalers: usize,
    pub adders: usize,
    pub pruned: usize,
    pub multipliers: usize,
    pub mm2: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnitCensus {
    pub scalers: usize,
    pub adders: usize,
    pub pruned: usize,
    pub trainable_weights: usize,
    pub bn_units: usize,
    pub alpha_units: usize,
}

impl UnitCensus {
    pub fn trainable_units(&self) -> usize {
        self.trainable_weights + self.bn_units + self.alpha_units
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AreaReport {
    pub frozen_scaler_mm2: f64,
    pub trainable_mult_mm2: f64,
    pub sram_mm2: f64,
    pub overhead_mm2: f64,
    pub total_mm2: f64,
    pub reduction_factor: f64,
    pub census: UnitCensus,
    pub layers: Vec<LayerArea>,
}

impl AreaReport {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["layer", "role", "scalers", "adders", "pruned", "multipliers", "mm2"])?;
        for l in &self.layers {
            let role = match l.role {
                Role::Core(c) => c.tag().to_string(),
                Role::Head => "head".into(),
            };
            w.write_record(&[
                l.layer.clone(),
                role,
                l.scalers.to_string(),
                l.adders.to_string(),
                l.pruned.to_string(),
                l.multipliers.to_string(),
                l.mm2.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn counted(role: Role, rep: usize) -> bool {
    rep == 0 && role != Role::Head
}

pub fn census(qg: &QGraph) -> (UnitCensus, Vec<LayerArea>) {
    let mut c = UnitCensus::default();
    let mut layers = Vec::new();
    for l in qg.layers.iter().filter(|l| counted(l.role, l.rep)) {
        match &l.op {
            QOp::Conv { weights, bn, .. } => {
                let adders = weights.adder_count();
                c.scalers += weights.frozen.len();
                c.adders += adders;
                c.pruned += weights.pruned;
                c.trainable_weights += weights.trainable.len();
                if let Some(bn) = bn {
                    c.bn_units += 2 * bn.scale.len();
                }
                layers.push(LayerArea {
                    layer: l.name.clone(),
                    role: l.role,
                    scalers: weights.frozen.len(),
                    adders,
                    pruned: weights.pruned,
                    multipliers: weights.trainable.len() + bn.as_ref().map_or(0, |b| 2 * b.scale.len()),
                    mm2: 0.0,
                });
            }
            QOp::Blend { alpha, .. } => {
                c.alpha_units += alpha.len();
                layers.push(LayerArea {
                    layer: l.name.clone(),
                    role: l.role,
                    scalers: 0,
                    adders: 0,
                    pruned: 0,
                    multipliers: alpha.len(),
                    mm2: 0.0,
                });
            }
            _ => {}
        }
    }
    (c, layers)
}

/// Frozen scalers cost their CSD adders, every trainable unit (conv weight,
/// folded BN scale or shift, alpha) a multiplier plus 8 SRAM bits.
pub fn estimate_area(qg: &QGraph, params: &CostParams) -> Result<AreaReport> {
    params.validate()?;
    let (census, mut layers) = census(qg);
    let frozen = census.adders as f64 * params.a_adder;
    let units = census.trainable_units() as f64;
    let mult = units * params.a_mult;
    let sram = units * WEIGHT_BITS * params.a_sram_bit;
    let overhead = params.a_fixed_overhead + params.overhead_fraction * (frozen + mult + sram);
    let unit_cost = params.a_mult + WEIGHT_BITS * params.a_sram_bit;
    for l in &mut layers {
        l.mm2 = l.adders as f64 * params.a_adder + l.multipliers as f64 * unit_cost;
    }
    let total = frozen + mult + sram + overhead;
    Ok(AreaReport {
        frozen_scaler_mm2: frozen,
        trainable_mult_mm2: mult,
        sram_mm2: sram,
        overhead_mm2: overhead,
        total_mm2: total,
        reduction_factor: params.baseline.area_mm2 / total,
        census,
        layers,
    })
}

/// Scale all area unit costs by one factor so the model's total hits `target`.
pub fn calibrate_cost_params(qg: &QGraph, params: &CostParams, target_mm2: f64) -> Result<CostParams> {
    if !(target_mm2 > 0.0) {
        return Err(Error::InvalidArgument("target area must be positive".into()));
    }
    let total = estimate_area(qg, params)?.total_mm2;
    if !(total > 0.0) {
        return Err(Error::DegenerateCost("the network has no area to calibrate".into()));
    }
    Ok(params.scaled(target_mm2 / total))
}

/// Quantized reference backbone (seed-1234 init, core partition) used to pin
/// the unit costs.
pub fn reference_qgraph(spec: &NetworkSpec) -> Result<QGraph> {
    let graph = unroll_repeats(spec, 1)?;
    let state = ModelState::init(&graph, DEFAULT_SEED);
    let plan = make_freeze_plan(&graph, FreezeScheme::CorePartition, DEFAULT_SEED)?;
    // activation exponents do not affect area, so a small frame suffices
    let input = graph.slot_shapes[graph.input];
    let probe = Tensor::filled(1, input.channels, 32, 32, 0.5);
    build_qgraph(&graph, &state, &plan, Binding::joint(Core::Trainable1), &[probe])
}

/// Default costs calibrated so the reference backbone measures 4 mm^2.
pub fn calibrated_default() -> Result<CostParams> {
    calibrate_cost_params(
        &reference_qgraph(&NetworkSpec::default_backbone())?,
        &CostParams::default(),
        TARGET_AREA_MM2,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThroughputReport {
    pub width: usize,
    pub height: usize,
    pub repeats: usize,
    pub fps: f64,
    pub frame_seconds: f64,
    pub reload_seconds: f64,
    pub tail_fraction: f64,
}

/// Share of per-frame work done in the repeatable tail, from MAC counts of
/// the single-pass graph.
pub fn tail_fraction(graph: &ExecGraph) -> f64 {
    let all = graph_macs(graph, |n| n.role != Role::Head);
    let tail = graph_macs(graph, |n| n.tail && n.rep == 0 && n.role != Role::Head);
    if all == 0 {
        0.0
    } else {
        tail as f64 / all as f64
    }
}

/// Trainable values reloaded per extra tail pass: trainable-core conv
/// weights, BN affine of every core and the alpha logits of the tail.
pub fn tail_trainable_units(graph: &ExecGraph) -> usize {
    let mut seen = vec![false; graph.params.len()];
    let mut units = 0;
    for node in graph.nodes.iter().filter(|n| n.tail && n.rep == 0) {
        let ids: Vec<usize> = match &node.op {
            Op::Depthwise { weight, .. } | Op::Pointwise { weight, .. } | Op::StemConv { weight, .. } => {
                vec![*weight]
            }
            Op::BatchNorm { bn, .. } => {
                let b = &graph.batch_norms[*bn];
                vec![b.gamma, b.beta]
            }
            Op::Blend { logits, .. } => vec![*logits],
            _ => vec![],
        };
        for id in ids {
            let d = &graph.params[id];
            let trainable = match d.kind {
                k if k.is_backbone_conv() => d.role != Role::Core(Core::Frozen),
                ParamKind::BnGamma | ParamKind::BnBeta | ParamKind::AlphaLogit => true,
                _ => false,
            };
            if trainable && !seen[id] {
                seen[id] = true;
                units += d.numel();
            }
        }
    }
    units
}

/// Pipeline at one pixel per cycle: the tail adds `tail_fraction` of a frame
/// per extra pass, plus the time to reload its trainable weights.
pub fn estimate_fps(spec: &NetworkSpec, r: usize, (width, height): (usize, usize), params: &CostParams) -> Result<ThroughputReport> {
    if r == 0 {
        return Err(Error::ZeroRepeat);
    }
    if width == 0 || height == 0 {
        return Err(Error::InvalidArgument("resolution must be non-empty".into()));
    }
    params.validate()?;
    let graph = unroll_repeats(spec, 1)?;
    let tf = tail_fraction(&graph);
    let extra = (r - 1) as f64;
    let reload_seconds = extra * tail_trainable_units(&graph) as f64 * WEIGHT_BITS / params.reload_bw_bits_per_s;
    let cycles = (width * height) as f64 * (1.0 + extra * tf) + reload_seconds * params.clock_hz;
    let fps = params.clock_hz / cycles;
    Ok(ThroughputReport {
        width,
        height,
        repeats: r,
        fps,
        frame_seconds: 1.0 / fps,
        reload_seconds,
        tail_fraction: tf,
    })
}

/// Clock that gives `fps` at `width x height` with no repetition.
pub fn calibrate_clock(fps: f64, (width, height): (usize, usize)) -> f64 {
    fps * (width * height) as f64
}

pub fn write_fps_csv<W: Write>(reports: &[ThroughputReport], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["repeats", "width", "height", "fps", "reload_seconds", "tail_fraction"])?;
    for r in reports {
        w.write_record(&[
            r.repeats.to_string(),
            r.width.to_string(),
            r.height.to_string(),
            r.fps.to_string(),
            r.reload_seconds.to_string(),
            r.tail_fraction.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaselineComparison {
    pub area_reduction: f64,
    pub effective_throughput_ratio: f64,
}

pub fn compare_baseline(report: &AreaReport, params: &CostParams) -> BaselineComparison {
    BaselineComparison {
        area_reduction: params.baseline.area_mm2 / report.total_mm2,
        effective_throughput_ratio: params.pipeline_utilization / params.baseline.utilization,
    }
}
