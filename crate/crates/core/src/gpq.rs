//! Gradual query pruning: the score ledger, prune events and the
//! prune-while-fine-tuning loop.

use crate::detector::{Detector, Prediction, QueryBank, Scene};
use crate::error::{Error, Result};
use crate::optim::{TrainConfig, Trainer};
use std::fmt::Write as _;
use std::str::FromStr;

/// Which queries a prune event removes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Criterion {
    /// Lowest mean classification score (the default).
    LowestScore,
    /// Highest mean classification score.
    HighestScore,
    /// Highest mean matching cost.
    AssignerCost,
}

impl Criterion {
    pub fn as_str(self) -> &'static str {
        match self {
            Criterion::LowestScore => "lowest-score",
            Criterion::HighestScore => "highest-score",
            Criterion::AssignerCost => "assigner-cost",
        }
    }
}

impl FromStr for Criterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lowest-score" | "lowest" => Ok(Criterion::LowestScore),
            "highest-score" | "highest" => Ok(Criterion::HighestScore),
            "assigner-cost" | "cost" => Ok(Criterion::AssignerCost),
            _ => Err(Error::config("criterion", format!("unknown criterion `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PruneSchedule {
    pub total_iterations: usize,
    pub initial_queries: usize,
    pub final_queries: usize,
    pub interval: usize,
    pub per_event_k: usize,
    pub criterion: Criterion,
    pub one_shot: bool,
}

impl PruneSchedule {
    pub fn new(total_iterations: usize, initial_queries: usize, final_queries: usize, interval: usize) -> Self {
        PruneSchedule {
            total_iterations,
            initial_queries,
            final_queries,
            interval,
            per_event_k: 1,
            criterion: Criterion::LowestScore,
            one_shot: false,
        }
    }

    /// Schedule whose events all fall within the first quarter of `T`.
    pub fn with_budget(total_iterations: usize, initial_queries: usize, final_queries: usize) -> Result<Self> {
        let mut s = PruneSchedule::new(total_iterations, initial_queries, final_queries, 1);
        let events = s.num_events().max(1);
        s.interval = (total_iterations / 4 / events).max(1);
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.final_queries == 0 {
            return Err(Error::config("final_queries", "must be >= 1"));
        }
        if self.final_queries >= self.initial_queries {
            return Err(Error::config("final_queries", "must be below initial_queries"));
        }
        if self.interval == 0 {
            return Err(Error::config("interval", "must be >= 1"));
        }
        if self.per_event_k == 0 {
            return Err(Error::config("per_event_k", "must be >= 1"));
        }
        if self.num_events() * self.interval > self.total_iterations {
            return Err(Error::config(
                "total_iterations",
                format!(
                    "{} prune events every {} iterations do not fit in {}",
                    self.num_events(),
                    self.interval,
                    self.total_iterations
                ),
            ));
        }
        Ok(())
    }

    pub fn num_events(&self) -> usize {
        let gap = self.initial_queries.saturating_sub(self.final_queries);
        if self.one_shot {
            usize::from(gap > 0)
        } else {
            gap.div_ceil(self.per_event_k.max(1))
        }
    }

    /// Iterations at which events fire, assuming every event succeeds.
    pub fn event_iterations(&self) -> Vec<usize> {
        (1..=self.num_events()).map(|e| e * self.interval).collect()
    }
}

/// Per-query statistics since the last prune event, indexed by position in
/// the alive set.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreLedger {
    counts: Vec<u64>,
    sums: Vec<f64>,
}

impl ScoreLedger {
    pub fn new(num_alive: usize) -> Self {
        ScoreLedger {
            counts: vec![0; num_alive],
            sums: vec![0.0; num_alive],
        }
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn is_recorded(&self) -> bool {
        self.counts.iter().any(|&c| c > 0)
    }

    /// Adds one iteration: for each query, the maximum score over classes
    /// averaged over the samples of the batch.
    pub fn record_scores(&mut self, batch: &[Prediction]) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        if let Some(p) = batch.iter().find(|p| p.num_queries() != self.len()) {
            return Err(Error::shape(
                "record_scores",
                format!("prediction has {} rows, ledger tracks {} queries", p.num_queries(), self.len()),
            ));
        }
        let n = batch.len() as f64;
        for q in 0..self.len() {
            let mean = batch
                .iter()
                .map(|p| p.scores.row(q).iter().fold(f64::NEG_INFINITY, |a, &v| a.max(f64::from(v))))
                .sum::<f64>()
                / n;
            self.sums[q] += mean;
            self.counts[q] += 1;
        }
        Ok(())
    }

    /// Adds one iteration of matching costs. Unmatched queries are charged
    /// the worst matched cost of the batch.
    pub fn record_costs(&mut self, batch: &[Vec<Option<f64>>]) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        if batch.iter().any(|c| c.len() != self.len()) {
            return Err(Error::shape("record_costs", "cost rows do not match the ledger"));
        }
        let penalty = batch
            .iter()
            .flatten()
            .flatten()
            .fold(f64::NEG_INFINITY, |a, &c| a.max(c));
        let penalty = if penalty.is_finite() { penalty } else { 0.0 };
        let n = batch.len() as f64;
        for q in 0..self.len() {
            let mean = batch.iter().map(|c| c[q].unwrap_or(penalty)).sum::<f64>() / n;
            self.sums[q] += mean;
            self.counts[q] += 1;
        }
        Ok(())
    }

    /// Mean recorded value per query (0 for never-recorded queries).
    pub fn means(&self) -> Vec<f64> {
        self.sums
            .iter()
            .zip(&self.counts)
            .map(|(&s, &c)| if c == 0 { 0.0 } else { s / c as f64 })
            .collect()
    }

    pub fn reset(&mut self, num_alive: usize) {
        *self = ScoreLedger::new(num_alive);
    }
}

/// Positions of the `k` queries a criterion removes, given ledger means.
/// Ties go to the lower position.
pub fn select_for_removal(means: &[f64], criterion: Criterion, k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..means.len()).collect();
    order.sort_by(|&a, &b| {
        let by_value = match criterion {
            Criterion::LowestScore => means[a].total_cmp(&means[b]),
            Criterion::HighestScore | Criterion::AssignerCost => means[b].total_cmp(&means[a]),
        };
        by_value.then(a.cmp(&b))
    });
    order.truncate(k);
    order.sort_unstable();
    order
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruneEvent {
    pub iteration: usize,
    /// Original indices of the removed queries, ascending.
    pub removed: Vec<usize>,
    /// Ledger mean of each removed query.
    pub scores: Vec<f64>,
    /// Positions in the alive set just before the event.
    pub positions: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruneReport {
    pub events: Vec<PruneEvent>,
    pub final_alive: Vec<usize>,
}

impl PruneReport {
    /// One `iteration,removed_index,ledger_score` line per removed query.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,removed_index,ledger_score\n");
        for e in &self.events {
            for (idx, s) in e.removed.iter().zip(&e.scores) {
                writeln!(out, "{},{},{}", e.iteration, idx, s).unwrap();
            }
        }
        out
    }

    /// Parses [`PruneReport::to_csv`] output back into
    /// `(iteration, removed_index, ledger_score)` records.
    pub fn parse_csv(text: &str) -> Result<Vec<(usize, usize, f64)>> {
        let mut out = Vec::new();
        for (n, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |reason: String| Error::Parse { line: n + 1, reason };
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 3 {
                return Err(bad(format!("expected 3 fields, got {}", f.len())));
            }
            out.push((
                f[0].parse().map_err(|e| bad(format!("iteration: {e}")))?,
                f[1].parse().map_err(|e| bad(format!("removed_index: {e}")))?,
                f[2].parse().map_err(|e| bad(format!("ledger_score: {e}")))?,
            ));
        }
        Ok(out)
    }
}

/// Fires a prune event at iteration `t` when `t` is a multiple of the
/// interval and more than `final_queries` remain. Resets the ledger after
/// an event.
pub fn prune_step(
    bank: &mut QueryBank,
    ledger: &mut ScoreLedger,
    sched: &PruneSchedule,
    t: usize,
) -> Result<Option<PruneEvent>> {
    if t == 0 || !t.is_multiple_of(sched.interval) || bank.len() <= sched.final_queries {
        return Ok(None);
    }
    if ledger.len() != bank.len() {
        return Err(Error::shape("prune_step", "ledger does not match the alive set"));
    }
    if !ledger.is_recorded() {
        return Err(Error::EmptyLedger(t));
    }
    let excess = bank.len() - sched.final_queries;
    let k = if sched.one_shot { excess } else { sched.per_event_k.min(excess) };
    let means = ledger.means();
    let positions = select_for_removal(&means, sched.criterion, k);
    let scores = positions.iter().map(|&p| means[p]).collect();
    let removed = bank.remove_positions(&positions)?;
    ledger.reset(bank.len());
    Ok(Some(PruneEvent {
        iteration: t,
        removed,
        scores,
        positions,
    }))
}

/// Trains `model` for `sched.total_iterations` steps, recording scores and
/// pruning per `sched`. The model may come from a checkpoint or be freshly
/// initialized (pruning during training).
pub fn finetune(
    mut model: Detector,
    dataset: &[Scene],
    sched: &PruneSchedule,
    train: TrainConfig,
) -> Result<(Detector, PruneReport)> {
    sched.validate()?;
    if model.num_queries() != sched.initial_queries {
        return Err(Error::config(
            "initial_queries",
            format!("schedule expects {}, model has {}", sched.initial_queries, model.num_queries()),
        ));
    }
    let train = TrainConfig {
        iterations: sched.total_iterations,
        ..train
    };
    let mut trainer = Trainer::new(train, dataset.len())?;
    let mut ledger = ScoreLedger::new(model.num_queries());
    let mut events = Vec::new();
    for t in 1..=sched.total_iterations {
        let out = trainer.step(&mut model, dataset, t)?;
        if model.num_queries() <= sched.final_queries {
            continue;
        }
        match sched.criterion {
            Criterion::AssignerCost => ledger.record_costs(&out.final_costs)?,
            _ => ledger.record_scores(&out.final_predictions)?,
        }
        if let Some(e) = prune_step(&mut model.bank, &mut ledger, sched, t)? {
            trainer.optimizer.remove_ref_rows(&e.positions);
            events.push(e);
        }
    }
    let report = PruneReport {
        events,
        final_alive: model.bank.alive().to_vec(),
    };
    Ok((model, report))
}
