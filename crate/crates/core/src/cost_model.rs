//! Profile tables and the synthetic roofline generator behind them.
//!
//! A [`ProfileTable`] answers "how long does one encoder/decoder layer
//! take" for a phase, tensor-parallel degree, batch size, and context
//! size. Attention-kernel times are profiled on a (batch, context) grid
//! and bilinearly interpolated; the rest of the layer is profiled against
//! total input size (batch x tokens) and linearly interpolated. Tensor-
//! and pipeline-parallel synchronization overheads are kept as separate
//! curves over message bytes, since the two do not interfere.
//!
//! Queries outside the profiled hull are errors: extrapolated kernel
//! times are the dominant source of estimation error, so callers clip
//! their search ranges to the hull instead.
//!
//! [`ProfileTable::synth`] fills a table from an analytic roofline model
//! so the rest of the toolkit can run without GPU measurements; tables
//! measured on real hardware load through the same validation path.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::schedule::ModelSpec;
use crate::{Error, Result};

/// Which half of inference a kernel belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Phase {
    /// Processing all input tokens of a batch at once.
    Encode,
    /// One autoregressive step emitting one token per active query.
    Decode,
}

impl Phase {
    pub const BOTH: [Phase; 2] = [Phase::Encode, Phase::Decode];

    pub fn name(self) -> &'static str {
        match self {
            Phase::Encode => "encode",
            Phase::Decode => "decode",
        }
    }
}

/// Hardware parameters for the synthetic roofline generator.
#[derive(Debug, Clone, PartialEq)]
pub struct CostParams {
    pub flops_per_sec_per_gpu: f64,
    pub bytes_per_sec_hbm: f64,
    pub tp_link_bytes_per_sec: f64,
    pub tp_latency_sec: f64,
    pub pp_link_bytes_per_sec: f64,
    pub pp_latency_sec: f64,
    pub kernel_launch_overhead_sec: f64,
}

impl CostParams {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("flops_per_sec_per_gpu", self.flops_per_sec_per_gpu),
            ("bytes_per_sec_hbm", self.bytes_per_sec_hbm),
            ("tp_link_bytes_per_sec", self.tp_link_bytes_per_sec),
            ("tp_latency_sec", self.tp_latency_sec),
            ("pp_link_bytes_per_sec", self.pp_link_bytes_per_sec),
            ("pp_latency_sec", self.pp_latency_sec),
            (
                "kernel_launch_overhead_sec",
                self.kernel_launch_overhead_sec,
            ),
        ];
        for (name, v) in fields {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidParameter(format!(
                    "cost param {name} must be strictly positive, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Sweep specification for [`ProfileTable::synth`].
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub batches: Vec<u32>,
    pub contexts: Vec<u32>,
    pub tp_degrees: Vec<u32>,
}

impl GridSpec {
    fn validate(&self) -> Result<()> {
        for (name, axis) in [("batches", &self.batches), ("contexts", &self.contexts)] {
            if axis.is_empty() {
                return Err(Error::InvalidParameter(format!("empty {name} grid")));
            }
            if !axis.windows(2).all(|w| w[0] < w[1]) {
                return Err(Error::InvalidParameter(format!(
                    "{name} grid must be strictly increasing"
                )));
            }
        }
        if self.tp_degrees.is_empty() || self.tp_degrees[0] < 1 {
            return Err(Error::InvalidParameter(
                "tp_degrees must contain at least degree 1".into(),
            ));
        }
        Ok(())
    }
}

/// Times on a 2-D (batch, context) grid, row-major by batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Surface {
    pub batches: Vec<f64>,
    pub contexts: Vec<f64>,
    pub times: Vec<f64>,
}

/// Times on a 1-D grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Curve {
    pub xs: Vec<f64>,
    pub times: Vec<f64>,
}

/// Model dimensions and synchronization structure carried with a table.
#[derive(Debug, Clone, PartialEq)]
pub struct ProfileMeta {
    pub model: ModelSpec,
    /// All-reduce count per encoder layer under tensor parallelism.
    pub syncs_per_encoder_layer: u32,
    /// All-reduce count per decoder layer under tensor parallelism.
    pub syncs_per_decoder_layer: u32,
    /// When true, per-layer sync time overlaps compute (max instead of
    /// sum). Defaults to false: overheads add.
    pub overlap_sync: bool,
}

impl ProfileMeta {
    pub fn new(model: ModelSpec) -> Self {
        ProfileMeta {
            model,
            syncs_per_encoder_layer: 2,
            syncs_per_decoder_layer: 3,
            overlap_sync: false,
        }
    }

    fn syncs_for(&self, phase: Phase) -> u32 {
        match phase {
            Phase::Encode => self.syncs_per_encoder_layer,
            Phase::Decode => self.syncs_per_decoder_layer,
        }
    }
}

/// Per-layer execution-time measurements plus synchronization overheads.
#[derive(Debug, Clone, PartialEq)]
pub struct ProfileTable {
    attn: BTreeMap<(Phase, u32), Surface>,
    ffn: BTreeMap<(Phase, u32), Curve>,
    tp_sync: BTreeMap<u32, Curve>,
    pp_sync: Curve,
    meta: ProfileMeta,
}

fn interp1(xs: &[f64], ys: &[f64], x: f64, axis: &'static str) -> Result<f64> {
    let (lo, hi) = (xs[0], xs[xs.len() - 1]);
    if x < lo - 1e-9 || x > hi + 1e-9 {
        return Err(Error::OutOfRange {
            axis,
            value: x,
            lo,
            hi,
        });
    }
    let x = x.clamp(lo, hi);
    let i = match xs.iter().position(|&v| v >= x) {
        Some(0) => return Ok(ys[0]),
        Some(i) => i,
        None => return Ok(ys[ys.len() - 1]),
    };
    let (x0, x1) = (xs[i - 1], xs[i]);
    let t = (x - x0) / (x1 - x0);
    Ok(ys[i - 1] * (1.0 - t) + ys[i] * t)
}

fn interp2(surface: &Surface, batch: f64, context: f64) -> Result<f64> {
    let nb = surface.batches.len();
    let nc = surface.contexts.len();
    // interpolate along context on the two bracketing batch rows, then
    // along batch: standard bilinear
    let row = |bi: usize| -> Result<f64> {
        let ys = &surface.times[bi * nc..(bi + 1) * nc];
        interp1(&surface.contexts, ys, context, "context")
    };
    let (blo, bhi) = (surface.batches[0], surface.batches[nb - 1]);
    if batch < blo - 1e-9 || batch > bhi + 1e-9 {
        return Err(Error::OutOfRange {
            axis: "batch",
            value: batch,
            lo: blo,
            hi: bhi,
        });
    }
    let batch = batch.clamp(blo, bhi);
    let i = match surface.batches.iter().position(|&v| v >= batch) {
        Some(0) => return row(0),
        Some(i) => i,
        None => return row(nb - 1),
    };
    let (b0, b1) = (surface.batches[i - 1], surface.batches[i]);
    let t = (batch - b0) / (b1 - b0);
    Ok(row(i - 1)? * (1.0 - t) + row(i)? * t)
}

/// Roofline kernel-time model used only by the generator; loaded tables
/// may come from anywhere.
struct Roofline<'a> {
    model: &'a ModelSpec,
    params: &'a CostParams,
}

impl Roofline<'_> {
    fn kernel(&self, flops: f64, bytes: f64, tp: u32) -> f64 {
        let compute = flops / self.params.flops_per_sec_per_gpu;
        let memory = bytes / self.params.bytes_per_sec_hbm;
        compute.max(memory) / tp as f64 + self.params.kernel_launch_overhead_sec
    }

    /// Attention kernel: work scales with batch x context x hidden, and
    /// the key/value cache read dominates its memory traffic.
    fn attn_time(&self, tp: u32, batch: f64, context: f64) -> f64 {
        let h = self.model.hidden_size as f64;
        let bpp = self.model.bytes_per_param as f64;
        let flops = 4.0 * batch * context * h;
        let bytes = 2.0 * batch * context * h * bpp;
        self.kernel(flops, bytes, tp)
    }

    /// Remainder of the layer (projections + feed-forward): compute
    /// scales with input size x hidden^2, memory with streaming the
    /// layer weights plus activations.
    fn ffn_time(&self, tp: u32, input_size: f64) -> f64 {
        let h = self.model.hidden_size as f64;
        let bpp = self.model.bytes_per_param as f64;
        let flops = 24.0 * input_size * h * h;
        let bytes = 12.0 * h * h * bpp + 2.0 * input_size * h * bpp;
        self.kernel(flops, bytes, tp)
    }

    /// Ring all-reduce across `tp` shards.
    fn tp_sync_time(&self, tp: u32, bytes: f64) -> f64 {
        if tp <= 1 {
            return 0.0;
        }
        let traffic = bytes * 2.0 * (tp as f64 - 1.0) / tp as f64;
        self.params.tp_latency_sec + traffic / self.params.tp_link_bytes_per_sec
    }

    fn pp_sync_time(&self, bytes: f64) -> f64 {
        self.params.pp_latency_sec + bytes / self.params.pp_link_bytes_per_sec
    }
}

fn geometric_axis(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if hi <= lo {
        return alloc::vec![lo];
    }
    let ratio = libm::pow(hi / lo, 1.0 / (n as f64 - 1.0));
    let mut axis: Vec<f64> = (0..n).map(|i| lo * libm::pow(ratio, i as f64)).collect();
    axis[0] = lo;
    let last = axis.len() - 1;
    axis[last] = hi;
    axis
}

impl ProfileTable {
    /// Populates a table on the full grid from the analytic roofline
    /// model. Deterministic in its inputs.
    pub fn synth(model: &ModelSpec, params: &CostParams, grid: &GridSpec) -> Result<ProfileTable> {
        model.validate()?;
        params.validate()?;
        grid.validate()?;
        let roof = Roofline { model, params };
        let h = model.hidden_size as f64;
        let bpp = model.bytes_per_param as f64;

        let batches: Vec<f64> = grid.batches.iter().map(|&b| b as f64).collect();
        let contexts: Vec<f64> = grid.contexts.iter().map(|&c| c as f64).collect();

        // input-size axis covering both decode (batch x 1) and encode
        // (batch x context) queries
        let mut sizes: Vec<f64> = Vec::new();
        for &b in &batches {
            sizes.push(b);
            for &c in &contexts {
                sizes.push(b * c);
            }
        }
        sizes.sort_by(|a, b| a.partial_cmp(b).unwrap());
        sizes.dedup();

        // message-size axis spanning every activation slab the
        // simulators can ask for
        let bytes_lo = (batches[0] * h * bpp).min(1.0);
        let bytes_hi = batches[batches.len() - 1] * contexts[contexts.len() - 1] * h * bpp;
        let bytes_axis = geometric_axis(bytes_lo, bytes_hi, 9);

        let mut attn = BTreeMap::new();
        let mut ffn = BTreeMap::new();
        let mut tp_sync = BTreeMap::new();
        for &tp in &grid.tp_degrees {
            for phase in Phase::BOTH {
                let mut times = Vec::with_capacity(batches.len() * contexts.len());
                for &b in &batches {
                    for &c in &contexts {
                        times.push(roof.attn_time(tp, b, c));
                    }
                }
                attn.insert(
                    (phase, tp),
                    Surface {
                        batches: batches.clone(),
                        contexts: contexts.clone(),
                        times,
                    },
                );
                ffn.insert(
                    (phase, tp),
                    Curve {
                        xs: sizes.clone(),
                        times: sizes.iter().map(|&s| roof.ffn_time(tp, s)).collect(),
                    },
                );
            }
            if tp > 1 {
                tp_sync.insert(
                    tp,
                    Curve {
                        xs: bytes_axis.clone(),
                        times: bytes_axis
                            .iter()
                            .map(|&b| roof.tp_sync_time(tp, b))
                            .collect(),
                    },
                );
            }
        }
        let pp_sync = Curve {
            xs: bytes_axis.clone(),
            times: bytes_axis.iter().map(|&b| roof.pp_sync_time(b)).collect(),
        };

        let (table, warnings) = ProfileTable::from_parts(
            attn,
            ffn,
            tp_sync,
            pp_sync,
            ProfileMeta::new(model.clone()),
        )?;
        debug_assert!(warnings.is_empty(), "synthetic table must be monotone");
        Ok(table)
    }

    /// Validates parts into a table. Hard invariants (positive times,
    /// strictly increasing axes, matching dimensions, both phases per
    /// degree) are errors; non-monotone measured times only warn, since
    /// real profiles contain noise.
    pub fn from_parts(
        attn: BTreeMap<(Phase, u32), Surface>,
        ffn: BTreeMap<(Phase, u32), Curve>,
        tp_sync: BTreeMap<u32, Curve>,
        pp_sync: Curve,
        meta: ProfileMeta,
    ) -> Result<(ProfileTable, Vec<String>)> {
        let mut warnings = Vec::new();
        if attn.is_empty() {
            return Err(Error::InvalidTable("no attention entries".into()));
        }
        fn check_axis(axis: &[f64], what: &str) -> Result<()> {
            if axis.is_empty() {
                return Err(Error::InvalidTable(format!("{what}: empty axis")));
            }
            if !axis.windows(2).all(|w| w[0] < w[1]) {
                return Err(Error::InvalidTable(format!(
                    "{what}: axis must be strictly increasing"
                )));
            }
            Ok(())
        }
        fn check_times(times: &[f64], what: &str) -> Result<()> {
            if times.iter().any(|&t| !(t > 0.0) || !t.is_finite()) {
                return Err(Error::InvalidTable(format!(
                    "{what}: all times must be finite and > 0"
                )));
            }
            Ok(())
        }

        for (&(phase, tp), s) in &attn {
            let what = format!("attn[{}, tp={tp}]", phase.name());
            check_axis(&s.batches, &what)?;
            check_axis(&s.contexts, &what)?;
            if s.times.len() != s.batches.len() * s.contexts.len() {
                return Err(Error::InvalidTable(format!(
                    "{what}: expected {} times, got {}",
                    s.batches.len() * s.contexts.len(),
                    s.times.len()
                )));
            }
            check_times(&s.times, &what)?;
            if !ffn.contains_key(&(phase, tp)) {
                return Err(Error::InvalidTable(format!("{what}: missing ffn curve")));
            }
            let nc = s.contexts.len();
            let monotone = (0..s.batches.len()).all(|bi| {
                s.times[bi * nc..(bi + 1) * nc]
                    .windows(2)
                    .all(|w| w[0] <= w[1])
            }) && (0..nc).all(|ci| {
                (1..s.batches.len())
                    .all(|bi| s.times[(bi - 1) * nc + ci] <= s.times[bi * nc + ci])
            });
            if !monotone {
                warnings.push(format!("{what}: times not monotone in batch/context"));
            }
        }
        for (&(phase, tp), c) in &ffn {
            let what = format!("ffn[{}, tp={tp}]", phase.name());
            check_axis(&c.xs, &what)?;
            if c.times.len() != c.xs.len() {
                return Err(Error::InvalidTable(format!("{what}: length mismatch")));
            }
            check_times(&c.times, &what)?;
            if !c.times.windows(2).all(|w| w[0] <= w[1]) {
                warnings.push(format!("{what}: times not monotone in input size"));
            }
            if !attn.contains_key(&(phase, tp)) {
                return Err(Error::InvalidTable(format!(
                    "{what}: missing attention surface"
                )));
            }
        }
        for (&tp, c) in &tp_sync {
            let what = format!("tp_sync[{tp}]");
            check_axis(&c.xs, &what)?;
            if c.times.len() != c.xs.len() {
                return Err(Error::InvalidTable(format!("{what}: length mismatch")));
            }
            check_times(&c.times, &what)?;
        }
        check_axis(&pp_sync.xs, "pp_sync")?;
        if pp_sync.times.len() != pp_sync.xs.len() {
            return Err(Error::InvalidTable("pp_sync: length mismatch".into()));
        }
        check_times(&pp_sync.times, "pp_sync")?;
        for &(phase, tp) in attn.keys() {
            let other = match phase {
                Phase::Encode => Phase::Decode,
                Phase::Decode => Phase::Encode,
            };
            if !attn.contains_key(&(other, tp)) {
                return Err(Error::InvalidTable(format!(
                    "tp={tp} profiled for {} only",
                    phase.name()
                )));
            }
            if tp > 1 && !tp_sync.contains_key(&tp) {
                return Err(Error::InvalidTable(format!(
                    "tp={tp} has no synchronization curve"
                )));
            }
        }

        Ok((
            ProfileTable {
                attn,
                ffn,
                tp_sync,
                pp_sync,
                meta,
            },
            warnings,
        ))
    }

    pub fn meta(&self) -> &ProfileMeta {
        &self.meta
    }

    /// Tensor-parallel degrees present in the table, ascending.
    pub fn tp_degrees(&self) -> Vec<u32> {
        let mut degrees: Vec<u32> = self
            .attn
            .keys()
            .filter(|&&(phase, _)| phase == Phase::Encode)
            .map(|&(_, tp)| tp)
            .collect();
        degrees.sort_unstable();
        degrees
    }

    /// Inclusive batch hull common to every profiled surface.
    pub fn batch_hull(&self) -> (f64, f64) {
        let mut lo = f64::MIN;
        let mut hi = f64::MAX;
        for s in self.attn.values() {
            lo = lo.max(s.batches[0]);
            hi = hi.min(s.batches[s.batches.len() - 1]);
        }
        (lo, hi)
    }

    /// Inclusive context hull common to every profiled surface.
    pub fn context_hull(&self) -> (f64, f64) {
        let mut lo = f64::MIN;
        let mut hi = f64::MAX;
        for s in self.attn.values() {
            lo = lo.max(s.contexts[0]);
            hi = hi.min(s.contexts[s.contexts.len() - 1]);
        }
        (lo, hi)
    }

    pub fn attn_parts(&self) -> &BTreeMap<(Phase, u32), Surface> {
        &self.attn
    }

    pub fn ffn_parts(&self) -> &BTreeMap<(Phase, u32), Curve> {
        &self.ffn
    }

    pub fn tp_sync_parts(&self) -> &BTreeMap<u32, Curve> {
        &self.tp_sync
    }

    pub fn pp_sync_parts(&self) -> &Curve {
        &self.pp_sync
    }

    fn activation_bytes(&self, phase: Phase, batch: f64, context: f64) -> f64 {
        let tokens_new = match phase {
            Phase::Encode => context,
            Phase::Decode => 1.0,
        };
        batch
            * tokens_new
            * self.meta.model.hidden_size as f64
            * self.meta.model.bytes_per_param as f64
    }

    /// One layer's execution time: interpolated attention + interpolated
    /// remainder + the degree's per-layer all-reduce overheads.
    pub fn layer_time(&self, phase: Phase, tp: u32, batch: f64, context: f64) -> Result<f64> {
        let surface = self
            .attn
            .get(&(phase, tp))
            .ok_or(Error::UnknownTpDegree(tp))?;
        let attn = interp2(surface, batch, context)?;
        let curve = self
            .ffn
            .get(&(phase, tp))
            .ok_or(Error::UnknownTpDegree(tp))?;
        let input_size = match phase {
            Phase::Encode => batch * context,
            Phase::Decode => batch,
        };
        let ffn = interp1(&curve.xs, &curve.times, input_size, "input_size")?;
        let sync = if tp > 1 {
            let curve = self.tp_sync.get(&tp).ok_or(Error::UnknownTpDegree(tp))?;
            let bytes = self.activation_bytes(phase, batch, context);
            let one = interp1(&curve.xs, &curve.times, bytes, "tp_sync_bytes")?;
            self.meta.syncs_for(phase) as f64 * one
        } else {
            0.0
        };
        let compute = attn + ffn;
        Ok(if self.meta.overlap_sync {
            compute.max(sync)
        } else {
            compute + sync
        })
    }

    /// A pipeline stage holding `layers` consecutive layers: per-layer
    /// times plus one activation handoff to the next stage.
    pub fn stage_time(
        &self,
        layers: u32,
        phase: Phase,
        tp: u32,
        batch: f64,
        context: f64,
    ) -> Result<f64> {
        let per_layer = if layers > 0 {
            self.layer_time(phase, tp, batch, context)?
        } else {
            0.0
        };
        let bytes = self.activation_bytes(phase, batch, context);
        let pp = interp1(
            &self.pp_sync.xs,
            &self.pp_sync.times,
            bytes,
            "pp_sync_bytes",
        )?;
        Ok(layers as f64 * per_layer + pp)
    }
}

/// Worst-case key/value cache footprint in bytes: K and V entries for
/// every cached token of every query, on this GPU's share of layers.
pub fn kv_cache_bytes(model: &ModelSpec, layers_on_gpu: f64, tokens: f64, batch: f64) -> f64 {
    2.0 * layers_on_gpu
        * model.hidden_size as f64
        * model.bytes_per_param as f64
        * tokens
        * batch
}

/// Transient activation allowance used in memory accounting: a pair of
/// activation slabs for the largest batch in flight.
pub fn activation_headroom_bytes(model: &ModelSpec, batch: f64, tokens: f64) -> f64 {
    2.0 * batch * tokens * model.hidden_size as f64 * model.bytes_per_param as f64
}
