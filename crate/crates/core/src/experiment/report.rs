//! Summaries of one or more metrics files.

use std::collections::BTreeMap;
use std::fmt::Write;

use crate::experiment::metrics::MetricsRow;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Spread {
    pub min: f64,
    pub mean: f64,
    pub max: f64,
}

impl Spread {
    fn of(values: impl Iterator<Item = f64>) -> Spread {
        let (mut min, mut max, mut sum, mut n) = (f64::INFINITY, f64::NEG_INFINITY, 0.0, 0usize);
        for v in values {
            min = min.min(v);
            max = max.max(v);
            sum += v;
            n += 1;
        }
        Spread { min, mean: sum / n.max(1) as f64, max }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhaseSummary {
    pub phase: u64,
    pub rounds: usize,
    pub memory: Spread,
    pub compute: Spread,
    pub comm: Spread,
    /// Mean loss over the phase's finite round losses.
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub label: String,
    pub phases: Vec<PhaseSummary>,
    pub memory: Spread,
    pub compute: Spread,
    pub comm: Spread,
    pub losses: Vec<(u64, f32)>,
}

impl RunSummary {
    pub fn new(label: impl Into<String>, rows: &[MetricsRow]) -> Self {
        let mut by_phase: BTreeMap<u64, Vec<&MetricsRow>> = BTreeMap::new();
        for r in rows {
            by_phase.entry(r.phase).or_default().push(r);
        }
        let phases = by_phase
            .into_iter()
            .map(|(phase, rs)| {
                let finite: Vec<f64> = rs.iter().map(|r| f64::from(r.loss_mean)).filter(|l| l.is_finite()).collect();
                PhaseSummary {
                    phase,
                    rounds: rs.len(),
                    memory: Spread::of(rs.iter().map(|r| r.mem_frac)),
                    compute: Spread::of(rs.iter().map(|r| r.compute_frac)),
                    comm: Spread::of(rs.iter().map(|r| r.comm_frac)),
                    loss: finite.iter().sum::<f64>() / finite.len().max(1) as f64,
                }
            })
            .collect();
        RunSummary {
            label: label.into(),
            phases,
            memory: Spread::of(rows.iter().map(|r| r.mem_frac)),
            compute: Spread::of(rows.iter().map(|r| r.compute_frac)),
            comm: Spread::of(rows.iter().map(|r| r.comm_frac)),
            losses: rows.iter().map(|r| (r.round, r.loss_mean)).collect(),
        }
    }

    /// End-to-end runs train every layer every round, so all their
    /// fractions are exactly one.
    pub fn is_end_to_end(&self) -> bool {
        [self.memory, self.compute, self.comm].iter().all(|s| s.min == 1.0 && s.max == 1.0)
    }
}

pub const FRACTIONS_CSV_HEADER: &str =
    "run,phase,rounds,mem_min,mem_mean,mem_max,compute_min,compute_mean,compute_max,comm_min,comm_mean,comm_max";

pub fn fractions_csv(runs: &[RunSummary]) -> String {
    let mut out = String::from(FRACTIONS_CSV_HEADER);
    out.push('\n');
    for run in runs {
        for p in &run.phases {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{}",
                run.label,
                p.phase,
                p.rounds,
                p.memory.min,
                p.memory.mean,
                p.memory.max,
                p.compute.min,
                p.compute.mean,
                p.compute.max,
                p.comm.min,
                p.comm.mean,
                p.comm.max
            );
        }
    }
    out
}

/// Number of points printed per loss curve.
const CURVE_POINTS: usize = 12;

pub fn render_text(runs: &[RunSummary]) -> String {
    let mut out = String::new();
    for run in runs {
        let _ = writeln!(out, "== {} ==", run.label);
        let _ = writeln!(
            out,
            "phase rounds   mem min/mean/max        compute min/mean/max    comm min/mean/max       loss"
        );
        for p in &run.phases {
            let _ = writeln!(
                out,
                "{:>5} {:>6}   {:.3}/{:.3}/{:.3}     {:.3}/{:.3}/{:.3}     {:.3}/{:.3}/{:.3}     {:.4}",
                p.phase,
                p.rounds,
                p.memory.min,
                p.memory.mean,
                p.memory.max,
                p.compute.min,
                p.compute.mean,
                p.compute.max,
                p.comm.min,
                p.comm.mean,
                p.comm.max,
                p.loss
            );
        }
        let stride = run.losses.len().div_ceil(CURVE_POINTS).max(1);
        let curve: Vec<String> = run
            .losses
            .iter()
            .enumerate()
            .filter(|(i, _)| i % stride == 0 || *i + 1 == run.losses.len())
            .map(|(_, (round, loss))| format!("{round}:{loss:.3}"))
            .collect();
        let _ = writeln!(out, "loss by round: {}", curve.join(" "));
        out.push('\n');
    }
    let _ = writeln!(out, "run                      kind        max mem  max compute  max comm");
    for run in runs {
        let _ = writeln!(
            out,
            "{:<24} {:<10} {:>8.3} {:>12.3} {:>9.3}",
            run.label,
            if run.is_end_to_end() { "end2end" } else { "layerwise" },
            run.memory.max,
            run.compute.max,
            run.comm.max
        );
    }
    out
}
