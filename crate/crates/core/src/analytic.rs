//! Expected-value execution-timeline simulator.
//!
//! Given a schedule, a profile table, and the two length distributions,
//! this module constructs one steady-state cycle of the execution and
//! reads throughput and latency off it. Batch sizes inside a decode
//! phase shrink as queries complete; the expected per-iteration batch
//! and the expected cached-context per query come from the completion
//! distribution and the length-biased age of in-flight queries.
//!
//! Round-robin plans alternate a pipelined encode phase (micro-batched
//! to pipeline depth) with `n_d` whole-batch decode traversals.
//! Workload-aware plans run the encode and decode pipelines decoupled;
//! the decode batch moves in micro-batches whose iterations overlap: a
//! micro-batch starts its next iteration once the first decode stage is
//! free and its previous iteration has fully drained.

use alloc::vec::Vec;

use crate::cost_model::{Phase, ProfileTable};
use crate::schedule::{
    memory_check, Allocation, ClusterSpec, Estimate, IterTag, ModelSpec, ScheduleConfig, Stage,
    Strategy, TimelineInterval,
};
use crate::seqdist::{completion_distribution, LengthPmf, PhaseCompletionPmf};
use crate::{Error, Result};

/// Expected per-iteration workloads of one decode phase.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationPlan {
    /// Expected active batch at iteration `u` (index 0 = iteration 1).
    /// Non-increasing; starts at `b_d`.
    pub batches: Vec<f64>,
    /// Expected cached tokens per active query at iteration `u`
    /// (input context plus length-biased age).
    pub contexts: Vec<f64>,
    /// Expected encode workload per phase: `b_e x mean input length`.
    pub encode_workload: f64,
}

/// Expected batch and context per decode iteration.
///
/// Queries completing at iteration `u` still participate at `u`, so the
/// batch at `u` is `b_d` minus completions strictly before `u`. The
/// context of an active query at `u` mixes its possible ages
/// `u, u + n_d, u + 2 n_d, ...`, weighted by survival.
pub fn plan_rra_iterations(
    b_d: u32,
    pc: &PhaseCompletionPmf,
    pd: &LengthPmf,
    pe: &LengthPmf,
) -> IterationPlan {
    let n_d = pc.n_d();
    let b_e = (libm::round(b_d as f64 * pc.total()) as i64).max(1) as f64;
    let mean_in = pe.mean();
    let mut batches = Vec::with_capacity(n_d as usize);
    let mut contexts = Vec::with_capacity(n_d as usize);
    for u in 1..=n_d {
        batches.push(b_d as f64 * (1.0 - pc.mass_before(u)));
        contexts.push(mean_in + mean_age_at(pd, u, n_d));
    }
    IterationPlan {
        batches,
        contexts,
        encode_workload: b_e * mean_in,
    }
}

/// Expected age (tokens generated so far, inclusive) of a query active
/// at iteration `u` of a phase: ages `u + j n_d` weighted by survival.
fn mean_age_at(pd: &LengthPmf, u: u32, n_d: u32) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    let mut age = u;
    while age <= pd.max_support() {
        let s = pd.survival(age);
        num += age as f64 * s;
        den += s;
        age += n_d;
    }
    if den > 0.0 {
        num / den
    } else {
        u as f64
    }
}

fn clamp_batch(table: &ProfileTable, batch: f64) -> f64 {
    // fractional expected batches below the profiled minimum are costed
    // at the minimum; exceeding the hull stays an error in stage_time
    let (lo, _) = table.batch_hull();
    batch.max(lo)
}

fn encode_role_layers(stage: &Stage, model: &ModelSpec) -> u32 {
    stage.encode_role_layers(model)
}

struct RraTiming {
    encode_span: f64,
    iter_times: Vec<f64>,
    cycle: f64,
    timeline: Vec<TimelineInterval>,
}

fn rra_timing(
    config: &ScheduleConfig,
    model: &ModelSpec,
    table: &ProfileTable,
    pe: &LengthPmf,
    pd: &LengthPmf,
) -> Result<RraTiming> {
    let Allocation::Rra { stages } = &config.allocation else {
        return Err(Error::InvalidParameter(
            "round-robin simulation needs a round-robin allocation".into(),
        ));
    };
    let pc = completion_distribution(pd, config.n_d);
    let plan = plan_rra_iterations(config.b_d, &pc, pd, pe);
    let mean_in = pe.mean();
    let depth = stages.len() as u32;
    let mut timeline = Vec::new();

    // encode phase: b_e split into up-to-depth micro-batches filling the
    // pipeline
    let micro_count = depth.min(config.b_e);
    let micro_sizes: Vec<u32> = {
        let base = config.b_e / micro_count;
        let extra = config.b_e % micro_count;
        (0..micro_count)
            .map(|i| base + u32::from(i < extra))
            .collect()
    };
    let mut stage_finish = alloc::vec![0.0f64; stages.len()];
    let mut encode_span = 0.0f64;
    for (m, &size) in micro_sizes.iter().enumerate() {
        let mut prev_finish = 0.0f64;
        for (s, stage) in stages.iter().enumerate() {
            let t = table.stage_time(
                encode_role_layers(stage, model),
                Phase::Encode,
                stage.tp_degree,
                clamp_batch(table, size as f64),
                mean_in,
            )?;
            let start = prev_finish.max(stage_finish[s]);
            let end = start + t;
            stage_finish[s] = end;
            prev_finish = end;
            for gpu in stage.gpus() {
                timeline.push(TimelineInterval {
                    gpu,
                    start,
                    end,
                    phase: Phase::Encode,
                    batch: size as f64,
                    tag: IterTag {
                        iteration: 0,
                        micro: m as u32,
                    },
                });
            }
        }
        encode_span = encode_span.max(prev_finish);
    }

    // decode phase: n_d whole-batch traversals
    let mut clock = encode_span;
    let mut iter_times = Vec::with_capacity(plan.batches.len());
    for (u, (&b_u, &ctx_u)) in plan.batches.iter().zip(plan.contexts.iter()).enumerate() {
        let mut iter_time = 0.0;
        if b_u > 1e-9 {
            for stage in stages.iter() {
                let t = table.stage_time(
                    stage.decoder_layers,
                    Phase::Decode,
                    stage.tp_degree,
                    clamp_batch(table, b_u),
                    ctx_u,
                )?;
                let start = clock + iter_time;
                let end = start + t;
                for gpu in stage.gpus() {
                    timeline.push(TimelineInterval {
                        gpu,
                        start,
                        end,
                        phase: Phase::Decode,
                        batch: b_u,
                        tag: IterTag {
                            iteration: u as u32 + 1,
                            micro: 0,
                        },
                    });
                }
                iter_time += t;
            }
        }
        iter_times.push(iter_time);
        clock += iter_time;
    }

    Ok(RraTiming {
        encode_span,
        cycle: clock,
        iter_times,
        timeline,
    })
}

/// One micro-batch pipeline interval: stage, micro index, iteration
/// index, start, end.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MicroInterval {
    pub stage: u32,
    pub micro: u32,
    pub iteration: u32,
    pub start: f64,
    pub end: f64,
}

/// Result of pushing `m_count` micro-batches through a stage pipeline
/// for a number of overlapped iterations.
#[derive(Debug, Clone, PartialEq)]
pub struct MicroPipelineSchedule {
    pub intervals: Vec<MicroInterval>,
    /// Finish time of the last micro-batch of each iteration.
    pub iteration_finish: Vec<f64>,
    pub makespan: f64,
}

/// Schedules micro-batch iterations over pipeline stages.
///
/// All micro-batches become ready at `ready_at`. A micro-batch enters
/// the first stage when that stage is free and its own previous
/// iteration has drained from the last stage; inside an iteration it
/// advances to the next stage as soon as both it and the stage are
/// ready. `stage_times[s]` is the service time of one micro-batch at
/// stage `s`.
pub fn schedule_micro_pipeline(
    stage_times: &[f64],
    m_count: u32,
    iterations: u32,
    ready_at: f64,
) -> MicroPipelineSchedule {
    let mut stage_free = alloc::vec![0.0f64; stage_times.len()];
    let mut drained = alloc::vec![ready_at; m_count as usize];
    let mut intervals = Vec::new();
    let mut iteration_finish = Vec::with_capacity(iterations as usize);
    for iter in 0..iterations {
        for m in 0..m_count as usize {
            let mut t = drained[m];
            for (s, &service) in stage_times.iter().enumerate() {
                let start = t.max(stage_free[s]);
                let end = start + service;
                stage_free[s] = end;
                intervals.push(MicroInterval {
                    stage: s as u32,
                    micro: m as u32,
                    iteration: iter,
                    start,
                    end,
                });
                t = end;
            }
            drained[m] = t;
        }
        iteration_finish.push(drained[m_count as usize - 1]);
    }
    let makespan = iteration_finish.last().copied().unwrap_or(ready_at);
    MicroPipelineSchedule {
        intervals,
        iteration_finish,
        makespan,
    }
}

struct WaaTiming {
    enc_traversal: f64,
    period: f64,
    timeline: Vec<TimelineInterval>,
}

fn waa_timing(
    config: &ScheduleConfig,
    model: &ModelSpec,
    table: &ProfileTable,
    pe: &LengthPmf,
    pd: &LengthPmf,
) -> Result<WaaTiming> {
    let Allocation::Waa {
        encode_stages,
        decode_stages,
    } = &config.allocation
    else {
        return Err(Error::InvalidParameter(
            "workload-aware simulation needs a workload-aware allocation".into(),
        ));
    };
    let mean_in = pe.mean();
    let mean_ctx = mean_in + crate::schedule::mean_decode_age(pd);
    let m_count = config.micro_count();

    let mut enc_times = Vec::with_capacity(encode_stages.len());
    for stage in encode_stages {
        enc_times.push(table.stage_time(
            encode_role_layers(stage, model),
            Phase::Encode,
            stage.tp_degree,
            clamp_batch(table, config.b_e as f64),
            mean_in,
        )?);
    }
    let enc_traversal: f64 = enc_times.iter().sum();
    let enc_period = enc_times.iter().copied().fold(0.0f64, f64::max);

    let mut dec_times = Vec::with_capacity(decode_stages.len());
    for stage in decode_stages {
        dec_times.push(table.stage_time(
            stage.decoder_layers,
            Phase::Decode,
            stage.tp_degree,
            clamp_batch(table, config.b_m as f64),
            mean_ctx,
        )?);
    }

    // steady-state token interval read off the pipeline after it settles
    let warm = m_count + dec_times.len() as u32 + 4;
    let sched = schedule_micro_pipeline(&dec_times, m_count, warm, enc_traversal);
    let n = sched.iteration_finish.len();
    let dec_period = if n >= 2 {
        sched.iteration_finish[n - 1] - sched.iteration_finish[n - 2]
    } else {
        sched.iteration_finish[0] - enc_traversal
    };
    let period = dec_period.max(enc_period);

    // timeline: one encode traversal plus the pipeline's first two
    // decode iterations
    let mut timeline = Vec::new();
    let mut t = 0.0;
    for (s, (stage, &dt)) in encode_stages.iter().zip(enc_times.iter()).enumerate() {
        for gpu in stage.gpus() {
            timeline.push(TimelineInterval {
                gpu,
                start: t,
                end: t + dt,
                phase: Phase::Encode,
                batch: config.b_e as f64,
                tag: IterTag {
                    iteration: 0,
                    micro: s as u32,
                },
            });
        }
        t += dt;
    }
    for iv in sched.intervals.iter().filter(|iv| iv.iteration < 2) {
        let stage = &decode_stages[iv.stage as usize];
        for gpu in stage.gpus() {
            timeline.push(TimelineInterval {
                gpu,
                start: iv.start,
                end: iv.end,
                phase: Phase::Decode,
                batch: config.b_m as f64,
                tag: IterTag {
                    iteration: iv.iteration + 1,
                    micro: iv.micro,
                },
            });
        }
    }

    Ok(WaaTiming {
        enc_traversal,
        period,
        timeline,
    })
}

fn check_memory(
    config: &ScheduleConfig,
    model: &ModelSpec,
    cluster: &ClusterSpec,
    table: &ProfileTable,
    pe: &LengthPmf,
    pd: &LengthPmf,
) -> Result<()> {
    let max_context = pe.max_len() + pd.max_len();
    let report = memory_check(config, model, cluster, table, max_context);
    if report.feasible {
        Ok(())
    } else {
        Err(Error::MemoryExceeded(report))
    }
}

/// Simulates a round-robin schedule: one encode phase then `n_d` decode
/// traversals per cycle. Throughput is admissions per cycle; latency is
/// the worst case for a query of `target_len` tokens.
pub fn simulate_rra(
    config: &ScheduleConfig,
    model: &ModelSpec,
    cluster: &ClusterSpec,
    table: &ProfileTable,
    pe: &LengthPmf,
    pd: &LengthPmf,
    target_len: u32,
) -> Result<Estimate> {
    config.validate()?;
    if config.strategy != Strategy::Rra {
        return Err(Error::InvalidParameter("not a round-robin schedule".into()));
    }
    check_memory(config, model, cluster, table, pe, pd)?;
    let timing = rra_timing(config, model, table, pe, pd)?;
    let throughput = config.b_e as f64 / timing.cycle;
    let (latency, latency_admit) = rra_latencies(&timing, config.n_d, target_len);
    Ok(Estimate {
        throughput,
        latency,
        latency_admit,
        timeline: timing.timeline,
    })
}

fn rra_latencies(timing: &RraTiming, n_d: u32, target_len: u32) -> (f64, f64) {
    let phases = target_len.div_ceil(n_d);
    // worst case: the query just misses an encode phase and waits one
    // full cycle before the phase that admits it
    let latency = timing.cycle + phases as f64 * timing.cycle;
    // from admission: full cycles except the last, then encode plus the
    // decode iterations up to its completion index
    let u_star = 1 + (target_len - 1) % n_d;
    let tail: f64 = timing.iter_times[..u_star as usize].iter().sum();
    let latency_admit = (phases - 1) as f64 * timing.cycle + timing.encode_span + tail;
    (latency, latency_admit)
}

/// Simulates a workload-aware schedule: decoupled encode/decode
/// pipelines with overlapped decode micro-batches. Throughput is `b_e`
/// admissions per steady-state iteration period.
pub fn simulate_waa(
    config: &ScheduleConfig,
    model: &ModelSpec,
    cluster: &ClusterSpec,
    table: &ProfileTable,
    pe: &LengthPmf,
    pd: &LengthPmf,
    target_len: u32,
) -> Result<Estimate> {
    config.validate()?;
    if !config.strategy.is_waa() {
        return Err(Error::InvalidParameter(
            "not a workload-aware schedule".into(),
        ));
    }
    check_memory(config, model, cluster, table, pe, pd)?;
    let timing = waa_timing(config, model, table, pe, pd)?;
    let throughput = config.b_e as f64 / timing.period;
    let latency = waa_latency(&timing, target_len);
    Ok(Estimate {
        throughput,
        latency,
        latency_admit: latency,
        timeline: timing.timeline,
    })
}

fn waa_latency(timing: &WaaTiming, target_len: u32) -> f64 {
    // encode traversal, worst-case handover wait of one iteration
    // period, then one period per generated token
    timing.enc_traversal + (1 + target_len) as f64 * timing.period
}

/// Dispatches on strategy.
pub fn simulate(
    config: &ScheduleConfig,
    model: &ModelSpec,
    cluster: &ClusterSpec,
    table: &ProfileTable,
    pe: &LengthPmf,
    pd: &LengthPmf,
    target_len: u32,
) -> Result<Estimate> {
    match config.strategy {
        Strategy::Rra => simulate_rra(config, model, cluster, table, pe, pd, target_len),
        _ => simulate_waa(config, model, cluster, table, pe, pd, target_len),
    }
}

/// Worst-case seconds to generate a sequence of `s_target` tokens under
/// the schedule, including the worst admission offset.
pub fn latency_for_length(
    config: &ScheduleConfig,
    model: &ModelSpec,
    cluster: &ClusterSpec,
    table: &ProfileTable,
    pe: &LengthPmf,
    pd: &LengthPmf,
    s_target: u32,
) -> Result<f64> {
    if s_target < 1 {
        return Err(Error::InvalidParameter("s_target must be >= 1".into()));
    }
    Ok(simulate(config, model, cluster, table, pe, pd, s_target)?.latency)
}
