//! Cluster, model, and schedule configuration, plus the layer-allocation
//! policies that turn them into pipeline stages.
//!
//! Two allocation families are supported. Round-robin allocation gives
//! every GPU a consecutive share of both encoder and decoder layers;
//! execution alternates one encode phase with `n_d` decode iterations.
//! Workload-aware allocation dedicates each GPU to encoding or decoding,
//! splitting the cluster either by estimated compute time or to equalize
//! per-GPU memory; the two sides then run decoupled. For decoder-only
//! models the workload-aware split stores two copies of the stack, one
//! per side, which the memory accounting reflects.
//!
//! Batch sizes are tied together through the output-length distribution:
//! the encoder admits exactly the expected number of per-phase
//! completions, keeping batch sizes consistent across repeated phases.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use libm::round;

use crate::cost_model::{
    activation_headroom_bytes, kv_cache_bytes, Phase, ProfileTable,
};
use crate::seqdist::{completion_distribution, expected_completion_fraction, LengthPmf};
use crate::{Error, Result};

/// Transformer shape. `n_encoder_layers == 0` means decoder-only: the
/// decoder stack also performs input encoding.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub n_encoder_layers: u32,
    pub n_decoder_layers: u32,
    pub hidden_size: u32,
    pub n_heads: u32,
    pub bytes_per_param: u32,
    pub params_total: f64,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_encoder_layers == 0 && self.n_decoder_layers == 0 {
            return Err(Error::InvalidParameter(
                "model needs at least one layer".into(),
            ));
        }
        if self.n_heads == 0 || self.hidden_size == 0 || self.hidden_size % self.n_heads != 0 {
            return Err(Error::InvalidParameter(
                "hidden_size must be a positive multiple of n_heads".into(),
            ));
        }
        if self.bytes_per_param == 0 || !(self.params_total > 0.0) {
            return Err(Error::InvalidParameter(
                "bytes_per_param and params_total must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn is_decoder_only(&self) -> bool {
        self.n_encoder_layers == 0
    }

    pub fn total_layers(&self) -> u32 {
        self.n_encoder_layers + self.n_decoder_layers
    }

    /// Parameter bytes attributed to one layer, treating encoder and
    /// decoder layers as equally sized.
    pub fn per_layer_param_bytes(&self) -> f64 {
        self.params_total * self.bytes_per_param as f64 / self.total_layers() as f64
    }
}

/// Homogeneous GPU cluster.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterSpec {
    pub n_gpus: u32,
    pub mem_per_gpu: f64,
    pub gpus_per_node: u32,
}

impl ClusterSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_gpus < 1 || self.gpus_per_node < 1 {
            return Err(Error::InvalidParameter("cluster needs at least one GPU".into()));
        }
        if !(self.mem_per_gpu > 0.0) {
            return Err(Error::InvalidParameter("mem_per_gpu must be positive".into()));
        }
        Ok(())
    }
}

/// Tensor parallelism applied to a leading subset of the pipeline.
///
/// `applied_gpus` GPUs (a multiple of `degree`, taken from the front of
/// the pipeline) are grouped into stages of `degree` GPUs each; the rest
/// remain single-GPU stages. `applied_gpus == 0` is a pure pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PartialTpSpec {
    pub degree: u32,
    pub applied_gpus: u32,
}

impl PartialTpSpec {
    pub fn none() -> Self {
        PartialTpSpec {
            degree: 1,
            applied_gpus: 0,
        }
    }

    pub fn validate(&self, n_gpus: u32) -> Result<()> {
        if self.degree < 1 {
            return Err(Error::InvalidParameter("tp degree must be >= 1".into()));
        }
        if self.applied_gpus % self.degree != 0 {
            return Err(Error::InvalidParameter(format!(
                "applied_gpus {} not a multiple of degree {}",
                self.applied_gpus, self.degree
            )));
        }
        if self.applied_gpus > n_gpus {
            return Err(Error::InvalidParameter(format!(
                "applied_gpus {} exceeds cluster size {n_gpus}",
                self.applied_gpus
            )));
        }
        Ok(())
    }

    pub fn groups(&self) -> u32 {
        if self.degree <= 1 {
            0
        } else {
            self.applied_gpus / self.degree
        }
    }
}

/// Which scheduling family a configuration belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    Rra,
    WaaCompute,
    WaaMemory,
}

impl Strategy {
    pub fn is_waa(self) -> bool {
        matches!(self, Strategy::WaaCompute | Strategy::WaaMemory)
    }

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Rra => "rra",
            Strategy::WaaCompute => "waa-c",
            Strategy::WaaMemory => "waa-m",
        }
    }
}

/// One pipeline stage: a GPU (or tensor-parallel group of GPUs) and the
/// consecutive physical layer spans it holds.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Stage {
    pub first_gpu: u32,
    pub tp_degree: u32,
    pub encoder_start: u32,
    pub encoder_layers: u32,
    pub decoder_start: u32,
    pub decoder_layers: u32,
}

impl Stage {
    pub fn gpus(&self) -> impl Iterator<Item = u32> {
        self.first_gpu..self.first_gpu + self.tp_degree
    }

    /// Physical layers resident on this stage.
    pub fn resident_layers(&self) -> u32 {
        self.encoder_layers + self.decoder_layers
    }

    /// Layers executed when this stage runs the encode phase. For
    /// decoder-only models the decoder stack does the encoding.
    pub fn encode_role_layers(&self, model: &ModelSpec) -> u32 {
        if model.is_decoder_only() {
            self.decoder_layers
        } else {
            self.encoder_layers
        }
    }
}

/// GPU-to-layer assignment, as pipeline stages.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Allocation {
    /// Every stage holds both encoder and decoder shares; one pipeline.
    Rra { stages: Vec<Stage> },
    /// Disjoint encode and decode pipelines.
    Waa {
        encode_stages: Vec<Stage>,
        decode_stages: Vec<Stage>,
    },
}

impl Allocation {
    pub fn all_stages(&self) -> Vec<&Stage> {
        match self {
            Allocation::Rra { stages } => stages.iter().collect(),
            Allocation::Waa {
                encode_stages,
                decode_stages,
            } => encode_stages.iter().chain(decode_stages.iter()).collect(),
        }
    }

    /// Per-GPU view: `(phase, first_layer, layer_count)` spans.
    pub fn gpu_assignments(&self, n_gpus: u32) -> Vec<Vec<(Phase, u32, u32)>> {
        let mut per_gpu = alloc::vec![Vec::new(); n_gpus as usize];
        let mut push = |stage: &Stage, phase: Phase, start: u32, count: u32| {
            if count == 0 {
                return;
            }
            for gpu in stage.gpus() {
                per_gpu[gpu as usize].push((phase, start, count));
            }
        };
        for stage in self.all_stages() {
            push(stage, Phase::Encode, stage.encoder_start, stage.encoder_layers);
            push(stage, Phase::Decode, stage.decoder_start, stage.decoder_layers);
        }
        per_gpu
    }
}

/// A fully specified execution plan.
#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleConfig {
    pub strategy: Strategy,
    /// Encoder batch size.
    pub b_e: u32,
    /// Decoder batch size (derived from `b_e` or vice versa).
    pub b_d: u32,
    /// Decode iterations per phase. Always 1 for workload-aware plans,
    /// where every iteration is followed by an encoder handover.
    pub n_d: u32,
    /// Decoder micro-batch size; divides `b_d`. Equal to `b_d` when
    /// micro-batching is off (and always for round-robin plans).
    pub b_m: u32,
    pub tp: PartialTpSpec,
    pub allocation: Allocation,
}

impl ScheduleConfig {
    /// Number of decoder micro-batches per iteration.
    pub fn micro_count(&self) -> u32 {
        self.b_d / self.b_m
    }

    pub fn validate(&self) -> Result<()> {
        if self.b_e < 1 || self.b_d < 1 || self.n_d < 1 || self.b_m < 1 {
            return Err(Error::InvalidParameter(
                "batch sizes and n_d must be >= 1".into(),
            ));
        }
        if self.b_d % self.b_m != 0 {
            return Err(Error::InvalidParameter(format!(
                "micro-batch size {} does not divide decode batch {}",
                self.b_m, self.b_d
            )));
        }
        match (&self.allocation, self.strategy) {
            (Allocation::Rra { .. }, Strategy::Rra) => Ok(()),
            (Allocation::Waa { .. }, s) if s.is_waa() => {
                if self.n_d != 1 {
                    return Err(Error::InvalidParameter(
                        "workload-aware plans decode one iteration per handover".into(),
                    ));
                }
                Ok(())
            }
            _ => Err(Error::InvalidParameter(
                "allocation kind does not match strategy".into(),
            )),
        }
    }
}

/// Label on a simulated timeline interval: which cycle and decode
/// iteration it belongs to, and which micro-batch (0-based; encode
/// phases use the micro index, whole-batch work uses 0).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IterTag {
    pub iteration: u32,
    pub micro: u32,
}

/// One busy interval on one GPU.
#[derive(Debug, Clone, PartialEq)]
pub struct TimelineInterval {
    pub gpu: u32,
    pub start: f64,
    pub end: f64,
    pub phase: Phase,
    pub batch: f64,
    pub tag: IterTag,
}

/// Simulated steady-state performance of a schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct Estimate {
    /// Completed sequences per second.
    pub throughput: f64,
    /// Worst-case seconds to generate a sequence of the target length,
    /// including the worst admission offset (a query may just miss an
    /// encode phase). This is the number compared against a latency
    /// bound.
    pub latency: f64,
    /// Same target length measured from the start of the encode phase
    /// that admits the query; directly comparable to per-query latencies
    /// measured by the event simulator.
    pub latency_admit: f64,
    /// One steady-state cycle of per-GPU busy intervals.
    pub timeline: Vec<TimelineInterval>,
}

/// Evenly distributes `total` items over `slots`, remainder one-per-slot
/// from the front.
fn distribute(total: u32, slots: u32) -> Vec<u32> {
    let base = total / slots;
    let extra = total % slots;
    (0..slots)
        .map(|i| base + u32::from(i < extra))
        .collect()
}

/// Stage slots for a pipeline of `n_gpus` GPUs under partial tensor
/// parallelism: TP groups first, then single-GPU stages.
fn stage_slots(n_gpus: u32, tp: PartialTpSpec) -> Result<Vec<(u32, u32)>> {
    tp.validate(n_gpus)?;
    let mut slots = Vec::new();
    let mut gpu = 0;
    for _ in 0..tp.groups() {
        slots.push((gpu, tp.degree));
        gpu += tp.degree;
    }
    while gpu < n_gpus {
        slots.push((gpu, 1));
        gpu += 1;
    }
    if slots.is_empty() {
        return Err(Error::Infeasible("no pipeline stages".into()));
    }
    Ok(slots)
}

fn stages_for_slots(
    slots: &[(u32, u32)],
    enc_total: u32,
    dec_total: u32,
) -> Vec<Stage> {
    let n = slots.len() as u32;
    let enc = distribute(enc_total, n);
    let dec = distribute(dec_total, n);
    let mut enc_start = 0;
    let mut dec_start = 0;
    slots
        .iter()
        .zip(enc.iter().zip(dec.iter()))
        .map(|(&(first_gpu, tp_degree), (&e, &d))| {
            let stage = Stage {
                first_gpu,
                tp_degree,
                encoder_start: enc_start,
                encoder_layers: e,
                decoder_start: dec_start,
                decoder_layers: d,
            };
            enc_start += e;
            dec_start += d;
            stage
        })
        .collect()
}

/// Round-robin allocation: every GPU receives consecutive shares of both
/// the encoder and the decoder stack, as equal as possible (per-GPU
/// counts differ by at most one per phase).
pub fn rra_allocate(model: &ModelSpec, cluster: &ClusterSpec) -> Result<Allocation> {
    rra_allocate_tp(model, cluster, PartialTpSpec::none())
}

/// Round-robin allocation over tensor-parallel stage slots.
pub fn rra_allocate_tp(
    model: &ModelSpec,
    cluster: &ClusterSpec,
    tp: PartialTpSpec,
) -> Result<Allocation> {
    model.validate()?;
    cluster.validate()?;
    let slots = stage_slots(cluster.n_gpus, tp)?;
    Ok(Allocation::Rra {
        stages: stages_for_slots(&slots, model.n_encoder_layers, model.n_decoder_layers),
    })
}

/// Splits `n` GPUs between encoding and decoding proportionally to their
/// estimated compute times, keeping at least one GPU per side.
pub fn waa_allocate_compute(c_e: f64, c_d: f64, n: u32) -> Result<(u32, u32)> {
    if !(c_e > 0.0) || !(c_d > 0.0) {
        return Err(Error::InvalidParameter(
            "stage time estimates must be positive".into(),
        ));
    }
    if n < 2 {
        return Err(Error::Infeasible(
            "workload-aware allocation needs at least two pipeline stages".into(),
        ));
    }
    let raw = round(n as f64 * c_e / (c_e + c_d)) as i64;
    let n_enc = raw.clamp(1, n as i64 - 1) as u32;
    Ok((n_enc, n - n_enc))
}

/// Splits `n` GPUs to equalize peak per-GPU memory between the sides.
///
/// `mem_e_per_gpu` and `mem_d_per_gpu` map an assigned GPU count to that
/// side's peak per-GPU bytes. All `n - 1` splits are enumerated; among
/// those fitting `budget` the imbalance `|mem_e - mem_d|` is minimized,
/// ties resolved toward more decoder GPUs.
pub fn waa_allocate_memory(
    mem_e_per_gpu: impl Fn(u32) -> f64,
    mem_d_per_gpu: impl Fn(u32) -> f64,
    n: u32,
    budget: f64,
) -> Result<(u32, u32)> {
    if n < 2 {
        return Err(Error::Infeasible(
            "workload-aware allocation needs at least two pipeline stages".into(),
        ));
    }
    let mut best: Option<(f64, u32)> = None;
    let mut report = String::new();
    for n_enc in 1..n {
        let e = mem_e_per_gpu(n_enc);
        let d = mem_d_per_gpu(n - n_enc);
        let peak = e.max(d);
        if peak > budget {
            report.push_str(&format!(
                "split {n_enc}+{}: peak {:.3e} B over budget {budget:.3e} B; ",
                n - n_enc,
                peak
            ));
            continue;
        }
        let imbalance = (e - d).abs();
        // strict < keeps the earlier (smaller n_enc = more decoders)
        // split on ties
        let better = match best {
            None => true,
            Some((bi, _)) => imbalance < bi,
        };
        if better {
            best = Some((imbalance, n_enc));
        }
    }
    match best {
        Some((_, n_enc)) => Ok((n_enc, n - n_enc)),
        None => Err(Error::Infeasible(format!(
            "no encoder/decoder split fits per-GPU memory: {report}"
        ))),
    }
}

/// Ties the encoder batch to the expected number of per-phase
/// completions of a decode batch of `b_d`.
pub fn derive_rra_batches(b_d: u32, pd: &LengthPmf, n_d: u32) -> (u32, u32) {
    let pc = completion_distribution(pd, n_d);
    let frac = expected_completion_fraction(&pc);
    let b_e = (round(b_d as f64 * frac) as i64).max(1) as u32;
    (b_e, b_d)
}

/// Decode batch that keeps batch sizes consistent when every iteration
/// is followed by a handover: queries live for their output length, so
/// the steady-state population is `b_e` times the mean output length.
pub fn derive_waa_batches(b_e: u32, pd: &LengthPmf) -> u32 {
    let s_d = round(pd.mean()).max(1.0) as u32;
    (b_e * s_d).max(1)
}

/// Largest micro-batch count that divides `b_d` and does not exceed the
/// requested count.
pub fn effective_micro_count(b_d: u32, requested: u32) -> u32 {
    let requested = requested.clamp(1, b_d);
    (1..=requested).rev().find(|m| b_d % m == 0).unwrap_or(1)
}

/// Per-GPU memory accounting for a schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct GpuMemory {
    pub gpu: u32,
    pub model_bytes: f64,
    pub kv_bytes: f64,
    pub activation_bytes: f64,
    pub fits: bool,
}

impl GpuMemory {
    pub fn total(&self) -> f64 {
        self.model_bytes + self.kv_bytes + self.activation_bytes
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryReport {
    pub per_gpu: Vec<GpuMemory>,
    pub budget: f64,
    pub feasible: bool,
}

impl fmt::Display for MemoryReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let worst = self
            .per_gpu
            .iter()
            .map(GpuMemory::total)
            .fold(0.0f64, f64::max);
        write!(
            f,
            "{} of {} GPUs over budget (peak {:.3e} B, budget {:.3e} B)",
            self.per_gpu.iter().filter(|g| !g.fits).count(),
            self.per_gpu.len(),
            worst,
            self.budget
        )
    }
}

/// Checks worst-case per-GPU memory for a schedule: model shard bytes,
/// key/value cache at `b_d x max_context`, and activation headroom.
/// Returns a report rather than an error; infeasibility is a result.
pub fn memory_check(
    config: &ScheduleConfig,
    model: &ModelSpec,
    cluster: &ClusterSpec,
    _table: &ProfileTable,
    max_context: u32,
) -> MemoryReport {
    let per_layer = model.per_layer_param_bytes();
    let mut per_gpu: Vec<GpuMemory> = (0..cluster.n_gpus)
        .map(|gpu| GpuMemory {
            gpu,
            model_bytes: 0.0,
            kv_bytes: 0.0,
            activation_bytes: 0.0,
            fits: true,
        })
        .collect();

    let mut add = |stage: &Stage, kv: f64, act: f64| {
        let share = 1.0 / stage.tp_degree as f64;
        for gpu in stage.gpus() {
            let slot = &mut per_gpu[gpu as usize];
            slot.model_bytes += stage.resident_layers() as f64 * per_layer * share;
            slot.kv_bytes += kv * share;
            slot.activation_bytes += act * share;
        }
    };

    let ctx = max_context as f64;
    match &config.allocation {
        Allocation::Rra { stages } => {
            for stage in stages {
                let kv = kv_cache_bytes(model, stage.decoder_layers as f64, ctx, config.b_d as f64);
                let act = activation_headroom_bytes(model, config.b_e.max(config.b_d) as f64, 1.0);
                add(stage, kv, act);
            }
        }
        Allocation::Waa {
            encode_stages,
            decode_stages,
        } => {
            for stage in encode_stages {
                // transient cache for the batch being encoded, shipped
                // to the decode side on completion
                let kv =
                    kv_cache_bytes(model, stage.resident_layers() as f64, ctx, config.b_e as f64);
                let act = activation_headroom_bytes(model, config.b_e as f64, 1.0);
                add(stage, kv, act);
            }
            for stage in decode_stages {
                let kv = kv_cache_bytes(model, stage.decoder_layers as f64, ctx, config.b_d as f64);
                let act = activation_headroom_bytes(model, config.b_d as f64, 1.0);
                add(stage, kv, act);
            }
        }
    }

    for slot in &mut per_gpu {
        slot.fits = slot.total() <= cluster.mem_per_gpu;
    }
    let feasible = per_gpu.iter().all(|g| g.fits);
    MemoryReport {
        per_gpu,
        budget: cluster.mem_per_gpu,
        feasible,
    }
}

/// Builds a round-robin plan from a desired decode batch size.
pub fn build_rra_config(
    model: &ModelSpec,
    cluster: &ClusterSpec,
    pd: &LengthPmf,
    b_d: u32,
    n_d: u32,
    tp: PartialTpSpec,
) -> Result<ScheduleConfig> {
    if b_d < 1 || n_d < 1 {
        return Err(Error::InvalidParameter("b_d and n_d must be >= 1".into()));
    }
    let allocation = rra_allocate_tp(model, cluster, tp)?;
    let (b_e, b_d) = derive_rra_batches(b_d, pd, n_d);
    Ok(ScheduleConfig {
        strategy: Strategy::Rra,
        b_e,
        b_d,
        n_d,
        b_m: b_d,
        tp,
        allocation,
    })
}

/// Builds a workload-aware plan from an encoder batch size. Tensor
/// parallelism, when applied, groups decoder-side GPUs (the
/// latency-critical pipeline).
pub fn build_waa_config(
    strategy: Strategy,
    model: &ModelSpec,
    cluster: &ClusterSpec,
    table: &ProfileTable,
    pe: &LengthPmf,
    pd: &LengthPmf,
    b_e: u32,
    micro_batches: u32,
    tp: PartialTpSpec,
) -> Result<ScheduleConfig> {
    if !strategy.is_waa() {
        return Err(Error::InvalidParameter(
            "build_waa_config needs a workload-aware strategy".into(),
        ));
    }
    if b_e < 1 {
        return Err(Error::InvalidParameter("b_e must be >= 1".into()));
    }
    model.validate()?;
    cluster.validate()?;
    let n = cluster.n_gpus;
    let b_d = derive_waa_batches(b_e, pd);

    let enc_layers_total = if model.is_decoder_only() {
        model.n_decoder_layers
    } else {
        model.n_encoder_layers
    };
    let mean_in = pe.mean();
    // mean cached tokens seen by a decode step in steady state
    let mean_ctx = mean_in + mean_decode_age(pd);

    let (n_enc, n_dec) = match strategy {
        Strategy::WaaCompute => {
            let c_e = enc_layers_total as f64
                * table.layer_time(Phase::Encode, 1, b_e as f64, mean_in)?;
            let c_d = model.n_decoder_layers as f64
                * table.layer_time(Phase::Decode, 1, b_d as f64, mean_ctx)?;
            waa_allocate_compute(c_e, c_d, n)?
        }
        Strategy::WaaMemory => {
            let per_layer = model.per_layer_param_bytes();
            let max_ctx = (pe.max_len() + pd.max_len()) as f64;
            let mem_e = |gpus: u32| {
                let layers = enc_layers_total.div_ceil(gpus) as f64;
                layers * per_layer
                    + kv_cache_bytes(model, layers, max_ctx, b_e as f64)
                    + activation_headroom_bytes(model, b_e as f64, 1.0)
            };
            let mem_d = |gpus: u32| {
                let layers = model.n_decoder_layers.div_ceil(gpus) as f64;
                layers * per_layer
                    + kv_cache_bytes(model, layers, max_ctx, b_d as f64)
                    + activation_headroom_bytes(model, b_d as f64, 1.0)
            };
            waa_allocate_memory(mem_e, mem_d, n, cluster.mem_per_gpu)?
        }
        Strategy::Rra => unreachable!(),
    };

    if tp.applied_gpus > n_dec {
        return Err(Error::Infeasible(format!(
            "tensor parallelism over {} GPUs exceeds the {} decoder GPUs",
            tp.applied_gpus, n_dec
        )));
    }
    let encode_slots: Vec<(u32, u32)> = (0..n_enc).map(|g| (g, 1)).collect();
    let decode_slots: Vec<(u32, u32)> = stage_slots(n_dec, tp)?
        .into_iter()
        .map(|(first, deg)| (first + n_enc, deg))
        .collect();

    let (enc_phys_e, enc_phys_d) = if model.is_decoder_only() {
        (0, model.n_decoder_layers)
    } else {
        (model.n_encoder_layers, 0)
    };
    let encode_stages = stages_for_slots(&encode_slots, enc_phys_e, enc_phys_d);
    let decode_stages = stages_for_slots(&decode_slots, 0, model.n_decoder_layers);

    let m = effective_micro_count(b_d, micro_batches);
    Ok(ScheduleConfig {
        strategy,
        b_e,
        b_d,
        n_d: 1,
        b_m: b_d / m,
        tp,
        allocation: Allocation::Waa {
            encode_stages,
            decode_stages,
        },
    })
}

/// Mean age (tokens already generated) of an active query under the
/// length-biased steady-state distribution: a query of total length `S`
/// is observed at each of its `S` ages with equal weight.
pub fn mean_decode_age(pd: &LengthPmf) -> f64 {
    // E[S(S+1)/2] / E[S]
    let num = pd.expect(|s| s as f64 * (s as f64 + 1.0) / 2.0);
    num / pd.mean()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost_model::test_fixtures::{
        decoder_only_model, synth_table, test_model,
    };
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn cluster(n: u32) -> ClusterSpec {
        ClusterSpec {
            n_gpus: n,
            mem_per_gpu: 8.0e9,
            gpus_per_node: n,
        }
    }

    #[test]
    fn rra_even_split() {
        let alloc = rra_allocate(&test_model(), &cluster(4)).unwrap();
        let Allocation::Rra { stages } = &alloc else {
            panic!()
        };
        assert_eq!(stages.len(), 4);
        for (i, s) in stages.iter().enumerate() {
            assert_eq!(s.encoder_layers, 2);
            assert_eq!(s.decoder_layers, 2);
            assert_eq!(s.encoder_start, 2 * i as u32);
            assert_eq!(s.decoder_start, 2 * i as u32);
        }
    }

    #[test]
    fn rra_decoder_only() {
        let mut model = decoder_only_model();
        model.n_decoder_layers = 40;
        let alloc = rra_allocate(&model, &cluster(4)).unwrap();
        let Allocation::Rra { stages } = &alloc else {
            panic!()
        };
        for s in stages {
            assert_eq!(s.encoder_layers, 0);
            assert_eq!(s.decoder_layers, 10);
        }
    }

    #[test]
    fn rra_remainder_balanced() {
        let mut model = test_model();
        model.n_encoder_layers = 7;
        model.n_decoder_layers = 7;
        let alloc = rra_allocate(&model, &cluster(4)).unwrap();
        let Allocation::Rra { stages } = &alloc else {
            panic!()
        };
        let encs: Vec<u32> = stages.iter().map(|s| s.encoder_layers).collect();
        let decs: Vec<u32> = stages.iter().map(|s| s.decoder_layers).collect();
        assert_eq!(encs.iter().sum::<u32>(), 7);
        assert_eq!(decs.iter().sum::<u32>(), 7);
        assert!(encs.iter().max().unwrap() - encs.iter().min().unwrap() <= 1);
        assert!(decs.iter().max().unwrap() - decs.iter().min().unwrap() <= 1);
    }

    #[test]
    fn waa_compute_examples() {
        assert_eq!(waa_allocate_compute(1.0, 3.0, 4).unwrap(), (1, 3));
        assert_eq!(waa_allocate_compute(2.0, 2.0, 4).unwrap(), (2, 2));
        assert_eq!(waa_allocate_compute(100.0, 1.0, 4).unwrap(), (3, 1));
        assert!(matches!(
            waa_allocate_compute(1.0, 1.0, 1),
            Err(Error::Infeasible(_))
        ));
    }

    #[test]
    fn waa_memory_examples() {
        // symmetric memory behaves like symmetric compute
        let f = |g: u32| 100.0 / g as f64;
        assert_eq!(waa_allocate_memory(f, f, 4, 1e9).unwrap(), (2, 2));
        // two GPUs leave only one split
        assert_eq!(waa_allocate_memory(f, f, 2, 1e9).unwrap(), (1, 1));
        // heavy decoder cache pulls GPUs toward decoding
        let mem_e = |g: u32| 10.0 / g as f64;
        let mem_d = |g: u32| 300.0 / g as f64;
        let (n_enc, n_dec) = waa_allocate_memory(mem_e, mem_d, 8, 1e9).unwrap();
        // exhaustive check of the imbalance objective
        let best = (1..8u32)
            .min_by(|&a, &b| {
                let ia = (mem_e(a) - mem_d(8 - a)).abs();
                let ib = (mem_e(b) - mem_d(8 - b)).abs();
                ia.partial_cmp(&ib).unwrap()
            })
            .unwrap();
        assert_eq!(n_enc, best);
        assert!(n_dec > 8 - waa_allocate_compute(10.0, 300.0, 8).unwrap().0 - 1);
        // nothing fits: infeasibility report
        assert!(matches!(
            waa_allocate_memory(f, f, 4, 10.0),
            Err(Error::Infeasible(_))
        ));
    }

    #[test]
    fn derive_rra_examples() {
        let pd = LengthPmf::from_entries(&[(10, 1.0)], 10).unwrap();
        assert_eq!(derive_rra_batches(30, &pd, 4), (10, 30));

        let pd = LengthPmf::from_entries(&[(2, 0.5), (4, 0.5)], 4).unwrap();
        assert_eq!(derive_rra_batches(16, &pd, 4), (16, 16));

        let pd = LengthPmf::from_entries(&[(12, 1.0)], 12).unwrap();
        assert_eq!(derive_rra_batches(1, &pd, 4), (1, 1));
    }

    #[test]
    fn derive_waa_examples() {
        let pd = LengthPmf::from_entries(&[(32, 1.0)], 32).unwrap();
        assert_eq!(derive_waa_batches(4, &pd), 128);
        let pd = LengthPmf::from_entries(&[(1, 1.0)], 1).unwrap();
        assert_eq!(derive_waa_batches(1, &pd), 1);
        let pd = LengthPmf::from_entries(&[(2, 0.5), (4, 0.5)], 4).unwrap();
        assert_eq!(derive_waa_batches(10, &pd), 30);
    }

    #[test]
    fn effective_micro_count_divisors() {
        assert_eq!(effective_micro_count(12, 5), 4);
        assert_eq!(effective_micro_count(12, 6), 6);
        assert_eq!(effective_micro_count(7, 3), 1);
        assert_eq!(effective_micro_count(8, 100), 8);
    }

    fn waa_fixture(model: &ModelSpec, n: u32) -> ScheduleConfig {
        let table = synth_table();
        let pe = LengthPmf::truncated_normal(64.0, 16.0, 128).unwrap();
        let pd = LengthPmf::truncated_normal(16.0, 4.0, 32).unwrap();
        build_waa_config(
            super::Strategy::WaaCompute,
            model,
            &cluster(n),
            &table,
            &pe,
            &pd,
            2,
            1,
            PartialTpSpec::none(),
        )
        .unwrap()
    }

    #[test]
    fn waa_decoder_only_doubles_model_bytes() {
        let table = synth_table();
        let model = decoder_only_model();
        let waa = waa_fixture(&model, 4);
        let rra = build_rra_config(
            &model,
            &cluster(4),
            &LengthPmf::truncated_normal(16.0, 4.0, 32).unwrap(),
            32,
            4,
            PartialTpSpec::none(),
        )
        .unwrap();
        let sum = |cfg: &ScheduleConfig| {
            memory_check(cfg, &model, &cluster(4), &table, 160)
                .per_gpu
                .iter()
                .map(|g| g.model_bytes)
                .sum::<f64>()
        };
        assert_relative_eq!(sum(&waa), 2.0 * sum(&rra), epsilon = 1e-6);
    }

    #[test]
    fn kv_scaling_in_memory_check() {
        let table = synth_table();
        let model = test_model();
        let pd = LengthPmf::truncated_normal(16.0, 4.0, 32).unwrap();
        let mk = |b_d: u32, ctx: u32| {
            let cfg = build_rra_config(
                &model,
                &cluster(4),
                &pd,
                b_d,
                4,
                PartialTpSpec::none(),
            )
            .unwrap();
            memory_check(&cfg, &model, &cluster(4), &table, ctx)
                .per_gpu
                .iter()
                .map(|g| g.kv_bytes)
                .sum::<f64>()
        };
        assert_relative_eq!(mk(32, 0), 0.0);
        assert_relative_eq!(mk(64, 256), 2.0 * mk(32, 256), epsilon = 1e-9);
    }

    #[test]
    fn memory_check_monotone() {
        let table = synth_table();
        let model = decoder_only_model();
        let pd = LengthPmf::truncated_normal(16.0, 4.0, 32).unwrap();
        let tight = ClusterSpec {
            n_gpus: 4,
            mem_per_gpu: 2.0e9,
            gpus_per_node: 4,
        };
        let feasible_at = |b_d: u32, ctx: u32| {
            let cfg =
                build_rra_config(&model, &tight, &pd, b_d, 4, PartialTpSpec::none()).unwrap();
            memory_check(&cfg, &model, &tight, &table, ctx).feasible
        };
        let mut last = true;
        for b_d in [8, 64, 256, 1024, 4096] {
            let now = feasible_at(b_d, 512);
            assert!(now <= last, "feasibility regained at b_d={b_d}");
            last = now;
        }
        let mut last = true;
        for ctx in [64, 256, 1024, 4096, 16384] {
            let now = feasible_at(256, ctx);
            assert!(now <= last, "feasibility regained at ctx={ctx}");
            last = now;
        }
    }

    #[test]
    fn waa_tp_groups_decoder_side() {
        let table = synth_table();
        let model = test_model();
        let pe = LengthPmf::truncated_normal(64.0, 16.0, 128).unwrap();
        let pd = LengthPmf::truncated_normal(16.0, 4.0, 32).unwrap();
        let cfg = build_waa_config(
            super::Strategy::WaaCompute,
            &model,
            &cluster(6),
            &table,
            &pe,
            &pd,
            2,
            1,
            PartialTpSpec {
                degree: 2,
                applied_gpus: 2,
            },
        )
        .unwrap();
        let Allocation::Waa { decode_stages, .. } = &cfg.allocation else {
            panic!()
        };
        assert_eq!(decode_stages[0].tp_degree, 2);
        assert!(decode_stages[1..].iter().all(|s| s.tp_degree == 1));
        // layers covered exactly once
        let total: u32 = decode_stages.iter().map(|s| s.decoder_layers).sum();
        assert_eq!(total, model.n_decoder_layers);
    }

    #[test]
    fn schedule_validate_catches_mismatches() {
        let model = test_model();
        let pd = LengthPmf::truncated_normal(16.0, 4.0, 32).unwrap();
        let mut cfg =
            build_rra_config(&model, &cluster(4), &pd, 32, 4, PartialTpSpec::none()).unwrap();
        cfg.validate().unwrap();
        cfg.b_m = 3; // does not divide 32
        assert!(cfg.validate().is_err());
    }

    proptest! {
        #[test]
        fn rra_covers_every_layer_once(
            e in 0u32..40,
            d in 1u32..40,
            n in 1u32..12,
        ) {
            let model = ModelSpec {
                n_encoder_layers: e,
                n_decoder_layers: d,
                hidden_size: 64,
                n_heads: 4,
                bytes_per_param: 2,
                params_total: 1.0e6,
            };
            let alloc = rra_allocate(&model, &cluster(n)).unwrap();
            let Allocation::Rra { stages } = &alloc else { panic!() };
            let mut enc_covered = 0u32;
            let mut dec_covered = 0u32;
            for s in stages {
                prop_assert_eq!(s.encoder_start, enc_covered);
                prop_assert_eq!(s.decoder_start, dec_covered);
                enc_covered += s.encoder_layers;
                dec_covered += s.decoder_layers;
            }
            prop_assert_eq!(enc_covered, e);
            prop_assert_eq!(dec_covered, d);
            let counts: Vec<u32> = stages.iter().map(|s| s.decoder_layers).collect();
            prop_assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
        }

        #[test]
        fn waa_compute_mirror(
            c_e in 0.1f64..100.0,
            c_d in 0.1f64..100.0,
            n in 2u32..32,
        ) {
            // skip exact .5 rounding boundaries, where the mirrored
            // splits legitimately disagree
            let frac = n as f64 * c_e / (c_e + c_d);
            prop_assume!((frac - round(frac)).abs() > 1e-9 || (frac - libm::floor(frac) - 0.5).abs() > 1e-6);
            let (a_enc, _) = waa_allocate_compute(c_e, c_d, n).unwrap();
            let (_, b_dec) = waa_allocate_compute(c_d, c_e, n).unwrap();
            prop_assert_eq!(a_enc, b_dec);
        }
    }
}
