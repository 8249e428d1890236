//! Cross-device federated training loop.
//!
//! Training is split into `L + 1` phases of `rounds_per_layer` rounds. In
//! phase `p` layer `p` and its projection head are the only trainable
//! parameters; layers `0..p` are frozen. With depth dropout some frozen
//! blocks are left out of the round entirely; the stem never is.
//! Clients upload deltas for the trainable parameters only and the server
//! applies their example-weighted mean.

use std::collections::BTreeSet;
use std::ops::Range;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, ParamId, Tape};
use crate::data::{Dataset, Partition};
use crate::encoder::{head_param_names, layer_param_names, KeptSet, LayeredEncoder};
use crate::error::{Error, Result};
use crate::resources::{self, ClientWork, ResourceFractions, ResourceSample, BYTES_PER_WORD};
use crate::rng::{derive_seed, stream_rng, Stream};
use crate::ssl::{self, AugmentConfig};
use crate::tensor::{meter, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrainingMode {
    #[serde(rename = "layerwise")]
    LayerWise,
    #[serde(rename = "layerwise-dropout")]
    LayerWiseDropout,
    #[serde(rename = "end2end")]
    EndToEnd,
}

impl std::str::FromStr for TrainingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "layerwise" => Ok(TrainingMode::LayerWise),
            "layerwise-dropout" => Ok(TrainingMode::LayerWiseDropout),
            "end2end" => Ok(TrainingMode::EndToEnd),
            other => Err(Error::config("mode", format!("unknown mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for TrainingMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TrainingMode::LayerWise => "layerwise",
            TrainingMode::LayerWiseDropout => "layerwise-dropout",
            TrainingMode::EndToEnd => "end2end",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FedConfig {
    pub num_clients: usize,
    pub clients_per_round: usize,
    pub rounds_per_layer: usize,
    pub batch_size: usize,
    pub local_steps: usize,
    pub client_lr: f32,
    pub server_lr: f32,
    /// Maximum layers (stem included) a client materializes; 0 disables.
    pub budget: usize,
    /// Fraction of droppable frozen blocks removed when `budget` is 0.
    pub drop_rate: f32,
    pub seed: u64,
    #[serde(default = "default_temperature")]
    pub temperature: f32,
}

fn default_temperature() -> f32 {
    ssl::DEFAULT_TEMPERATURE
}

impl FedConfig {
    /// 125 clients, 32 per round, batch 16, client learning rate 1e-3.
    pub fn cross_device() -> Self {
        FedConfig {
            num_clients: 125,
            clients_per_round: 32,
            rounds_per_layer: 4000,
            batch_size: 16,
            local_steps: 4,
            client_lr: 1e-3,
            server_lr: 1.0,
            budget: 0,
            drop_rate: 0.5,
            seed: 0,
            temperature: ssl::DEFAULT_TEMPERATURE,
        }
    }

    pub fn validate(&self, num_blocks: usize) -> Result<()> {
        let fail = |field: &str, msg: String| Err(Error::config(field, msg));
        if self.num_clients == 0 {
            return fail("num_clients", "must be positive".into());
        }
        if self.clients_per_round == 0 || self.clients_per_round > self.num_clients {
            return fail(
                "clients_per_round",
                format!("{} is outside [1, {}]", self.clients_per_round, self.num_clients),
            );
        }
        if self.rounds_per_layer == 0 {
            return fail("rounds_per_layer", "must be at least 1".into());
        }
        if self.batch_size < 2 {
            return fail("batch_size", "contrastive batches need at least 2 examples".into());
        }
        if self.budget != 0 && !(2..=num_blocks + 1).contains(&self.budget) {
            return fail(
                "budget",
                format!(
                    "{} must be 0 or within [2, {}] to fit the stem and the active layer",
                    self.budget,
                    num_blocks + 1
                ),
            );
        }
        if !(0.0..=1.0).contains(&self.drop_rate) {
            return fail("drop_rate", format!("{} is outside [0, 1]", self.drop_rate));
        }
        if !(self.client_lr >= 0.0) || !self.client_lr.is_finite() {
            return fail("client_lr", format!("{} is not a finite non-negative rate", self.client_lr));
        }
        if !self.server_lr.is_finite() {
            return fail("server_lr", format!("{} is not finite", self.server_lr));
        }
        if !(self.temperature > 0.0) {
            return fail("temperature", format!("{} must be positive", self.temperature));
        }
        Ok(())
    }

    pub fn work(&self) -> ClientWork {
        ClientWork { batch_size: self.batch_size, local_steps: self.local_steps }
    }

    pub fn total_rounds(&self, num_blocks: usize) -> usize {
        (num_blocks + 1) * self.rounds_per_layer
    }
}

/// Active layer for `round`: phases advance every `rounds_per_layer` rounds
/// and stay at the last layer once every layer has had its turn.
pub fn schedule_phase(round: usize, rounds_per_layer: usize, num_blocks: usize) -> usize {
    (round / rounds_per_layer.max(1)).min(num_blocks)
}

/// Number of frozen blocks to drop in `phase`.
pub fn planned_drops(phase: usize, budget: usize, drop_rate: f32) -> usize {
    let candidates = phase.saturating_sub(1);
    if budget > 0 {
        (phase + 1).saturating_sub(budget)
    } else {
        (f64::from(drop_rate) * candidates as f64).round() as usize
    }
}

/// Kept layers for `phase`: the stem and the active layer always stay, and
/// the required number of frozen blocks `1..phase` is dropped uniformly at
/// random without replacement.
pub fn plan_dropout<R: Rng>(phase: usize, budget: usize, drop_rate: f32, rng: &mut R) -> Result<KeptSet> {
    let candidates = phase.saturating_sub(1);
    let drops = planned_drops(phase, budget, drop_rate);
    if drops > candidates {
        return Err(Error::Infeasible(format!(
            "phase {phase} must drop {drops} layers but only {candidates} frozen blocks are droppable (budget {budget})"
        )));
    }
    let dropped: BTreeSet<usize> = index::sample(rng, candidates, drops).into_iter().map(|i| i + 1).collect();
    KeptSet::new((0..=phase).filter(|l| !dropped.contains(l)).collect())
}

/// Decisions for one communication round, shared by all its clients.
#[derive(Clone, Debug, PartialEq)]
pub struct RoundPlan {
    pub round: usize,
    /// Active layer; the representation is tapped here.
    pub phase: usize,
    pub kept: KeptSet,
    pub trainable: Vec<usize>,
    /// Layer whose projection head is trained and uploaded.
    pub head: usize,
    pub clients: Vec<usize>,
    pub client_seeds: Vec<u64>,
}

impl RoundPlan {
    pub fn layerwise(round: usize, phase: usize, kept: KeptSet) -> Self {
        RoundPlan {
            round,
            phase,
            kept,
            trainable: vec![phase],
            head: phase,
            clients: Vec::new(),
            client_seeds: Vec::new(),
        }
    }

    pub fn end_to_end(round: usize, num_blocks: usize) -> Self {
        RoundPlan {
            round,
            phase: num_blocks,
            kept: KeptSet::prefix(num_blocks),
            trainable: (0..=num_blocks).collect(),
            head: num_blocks,
            clients: Vec::new(),
            client_seeds: Vec::new(),
        }
    }

    /// Parameters clients must upload for this plan, sorted.
    pub fn trainable_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self
            .trainable
            .iter()
            .flat_map(|&l| layer_param_names(l).iter().map(move |&n| ParamId::new(l, n)))
            .chain(head_param_names().iter().map(|&n| ParamId::new(self.head, n)))
            .collect();
        ids.sort();
        ids
    }
}

#[derive(Clone, Debug)]
pub struct ClientUpdate {
    pub client: usize,
    pub deltas: Gradients,
    pub num_examples: usize,
    /// The shard was smaller than a batch, so examples were drawn with
    /// replacement.
    pub resampled: bool,
    pub loss: f32,
    pub resources: ResourceSample,
}

/// Draws one local batch from `shard`.
pub fn sample_batch<R: Rng>(shard: &[usize], batch_size: usize, rng: &mut R) -> (Vec<usize>, bool) {
    if shard.len() >= batch_size {
        let picks = index::sample(rng, shard.len(), batch_size);
        (picks.into_iter().map(|i| shard[i]).collect(), false)
    } else {
        ((0..batch_size).map(|_| shard[rng.random_range(0..shard.len())]).collect(), true)
    }
}

/// Seed of the private stream client `client` uses in `round`.
pub fn client_seed(seed: u64, round: usize, client: usize, aug: &AugmentConfig) -> u64 {
    derive_seed(seed, Stream::Client, &[round as u64, client as u64, aug.stream_id])
}

/// Local training on one client: downloads the kept layers, runs
/// `local_steps` SGD steps of NT-Xent on two-view batches and returns the
/// trainable parameters' change.
pub fn client_train(
    snapshot: &LayeredEncoder,
    plan: &RoundPlan,
    slot: usize,
    shard: &[usize],
    data: &Dataset,
    cfg: &FedConfig,
    aug: &AugmentConfig,
) -> Result<ClientUpdate> {
    if shard.is_empty() {
        return Err(Error::Validation(format!("client {} has an empty shard", plan.clients[slot])));
    }
    let window = meter::Window::start();
    let mut local = snapshot.restrict(&plan.kept, &[plan.head])?;
    let bytes_down = BYTES_PER_WORD * local.num_params() as u64;
    local.set_trainable_layers(&plan.trainable, Some(plan.head))?;
    let trainable = local.trainable_ids();

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(plan.client_seeds[slot]);
    let mut flops = crate::autodiff::FlopCount::default();
    let mut resampled = false;
    let mut loss_sum = 0.0f64;
    for _ in 0..cfg.local_steps {
        let (indices, again) = sample_batch(shard, cfg.batch_size, &mut rng);
        resampled |= again;
        let images = data.gather(&indices);
        let views = ssl::make_views(&images, aug, &mut rng)?;
        drop(images);
        let stacked = views.into_stacked();

        let mut tape = Tape::new();
        let rep = local.forward_on(&mut tape, &stacked, &plan.kept, plan.phase)?;
        drop(stacked);
        let z = local.project_on(&mut tape, plan.head, &rep)?;
        drop(rep);
        let loss = ssl::nt_xent_stacked(&mut tape, &z, cfg.temperature)?;
        drop(z);
        let grads = tape.backward(&loss)?;
        loss_sum += f64::from(loss.value().item());
        flops.forward += tape.flops().forward;
        flops.backward += tape.flops().backward;
        drop((tape, loss));
        for (id, g) in grads {
            let p = local.param_mut(id).expect("gradient for a materialized parameter");
            for (w, g) in p.value.data_mut().iter_mut().zip(g.data()) {
                *w -= cfg.client_lr * g;
            }
        }
    }

    let mut deltas = Gradients::new();
    for id in trainable {
        let now = &local.param(id).expect("trainable parameter").value;
        let before = &snapshot.param(id).ok_or_else(|| Error::Usage(format!("snapshot lacks {id}")))?.value;
        deltas.insert(id, now.zip_map(before, |a, b| a - b)?);
    }
    let bytes_up = BYTES_PER_WORD * deltas.values().map(|t| t.numel() as u64).sum::<u64>();
    let peak_memory_words = window.peak_words();
    Ok(ClientUpdate {
        client: plan.clients[slot],
        deltas,
        num_examples: cfg.local_steps * cfg.batch_size,
        resampled,
        loss: if cfg.local_steps == 0 { 0.0 } else { (loss_sum / cfg.local_steps as f64) as f32 },
        resources: ResourceSample {
            bytes_down,
            bytes_up,
            flops_forward: flops.forward,
            flops_backward: flops.backward,
            peak_memory_words,
        },
    })
}

/// Example-weighted mean of the client deltas scaled by `server_lr`.
/// Returns `None` when there is nothing to apply.
pub fn aggregate(updates: &[ClientUpdate], server_lr: f32) -> Result<Option<Gradients>> {
    let Some(first) = updates.first() else {
        return Ok(None);
    };
    let keys: Vec<ParamId> = first.deltas.keys().copied().collect();
    for u in &updates[1..] {
        if !u.deltas.keys().copied().eq(keys.iter().copied()) {
            return Err(Error::Protocol(format!(
                "client {} uploaded a different parameter set than client {}",
                u.client, first.client
            )));
        }
    }
    let total: f64 = updates.iter().map(|u| u.num_examples as f64).sum();
    if total == 0.0 {
        return Ok(None);
    }
    let mut applied = Gradients::new();
    for id in keys {
        let shape = first.deltas[&id].shape().to_vec();
        let mut acc = vec![0.0f64; first.deltas[&id].numel()];
        for u in updates {
            let d = &u.deltas[&id];
            if d.shape() != shape.as_slice() {
                return Err(Error::Protocol(format!("client {} sent {id} with shape {:?}", u.client, d.shape())));
            }
            let w = u.num_examples as f64;
            for (a, v) in acc.iter_mut().zip(d.data()) {
                *a += w * f64::from(*v);
            }
        }
        let scale = f64::from(server_lr) / total;
        applied.insert(id, Tensor::new(shape, acc.into_iter().map(|a| (a * scale) as f32).collect())?);
    }
    Ok(Some(applied))
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundLog {
    pub round: usize,
    pub phase: usize,
    pub kept: KeptSet,
    pub participants: usize,
    pub failed: usize,
    pub loss_mean: f32,
    /// Per-client maximum over this round's participants.
    pub resources: ResourceSample,
    pub fractions: ResourceFractions,
}

/// Everything a run needs besides the model.
pub struct Simulation<'a> {
    pub cfg: &'a FedConfig,
    pub aug: &'a AugmentConfig,
    pub mode: TrainingMode,
    pub data: &'a Dataset,
    pub partition: &'a Partition,
    pool: rayon::ThreadPool,
}

impl<'a> Simulation<'a> {
    /// `workers == 0` uses one worker per core. Results never depend on it.
    pub fn new(
        cfg: &'a FedConfig,
        aug: &'a AugmentConfig,
        mode: TrainingMode,
        data: &'a Dataset,
        partition: &'a Partition,
        num_blocks: usize,
        workers: usize,
    ) -> Result<Self> {
        cfg.validate(num_blocks)?;
        aug.validate()?;
        if partition.num_clients() != cfg.num_clients {
            return Err(Error::config(
                "num_clients",
                format!("partition has {} shards for {} clients", partition.num_clients(), cfg.num_clients),
            ));
        }
        if mode == TrainingMode::LayerWiseDropout {
            for phase in 0..=num_blocks {
                let (drops, candidates) = (planned_drops(phase, cfg.budget, cfg.drop_rate), phase.saturating_sub(1));
                if drops > candidates {
                    return Err(Error::Infeasible(format!(
                        "phase {phase} needs {drops} drops from {candidates} candidates"
                    )));
                }
            }
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| Error::Usage(format!("cannot start worker pool: {e}")))?;
        Ok(Simulation { cfg, aug, mode, data, partition, pool })
    }

    pub fn plan(&self, round: usize, num_blocks: usize) -> Result<RoundPlan> {
        let cfg = self.cfg;
        let mut plan = match self.mode {
            TrainingMode::EndToEnd => RoundPlan::end_to_end(round, num_blocks),
            TrainingMode::LayerWise => {
                let phase = schedule_phase(round, cfg.rounds_per_layer, num_blocks);
                RoundPlan::layerwise(round, phase, KeptSet::prefix(phase))
            }
            TrainingMode::LayerWiseDropout => {
                let phase = schedule_phase(round, cfg.rounds_per_layer, num_blocks);
                let mut rng = stream_rng(cfg.seed, Stream::Dropout, &[round as u64]);
                let kept = plan_dropout(phase, cfg.budget, cfg.drop_rate, &mut rng)?;
                RoundPlan::layerwise(round, phase, kept)
            }
        };
        let mut rng = stream_rng(cfg.seed, Stream::ClientSampling, &[round as u64]);
        let mut clients = index::sample(&mut rng, cfg.num_clients, cfg.clients_per_round).into_vec();
        clients.sort_unstable();
        plan.client_seeds = clients.iter().map(|&c| client_seed(cfg.seed, round, c, self.aug)).collect();
        plan.clients = clients;
        Ok(plan)
    }

    pub fn run_round(&self, encoder: &mut LayeredEncoder, round: usize) -> Result<RoundLog> {
        let num_blocks = encoder.num_blocks();
        let plan = self.plan(round, num_blocks)?;
        let snapshot: &LayeredEncoder = encoder;
        let outcomes: Vec<Result<ClientUpdate>> = self.pool.install(|| {
            plan.clients
                .par_iter()
                .enumerate()
                .map(|(slot, &client)| {
                    client_train(snapshot, &plan, slot, self.partition.shard(client), self.data, self.cfg, self.aug)
                })
                .collect()
        });
        let mut updates = Vec::with_capacity(outcomes.len());
        let mut failed = 0;
        for outcome in outcomes {
            match outcome {
                Ok(u) => updates.push(u),
                Err(Error::NonFinite(op)) => {
                    log::warn!("round {round}: client dropped after non-finite values in {op}");
                    failed += 1;
                }
                Err(e) => return Err(e),
            }
        }
        let expected = plan.trainable_ids();
        if let Some(u) = updates.iter().find(|u| !u.deltas.keys().copied().eq(expected.iter().copied())) {
            return Err(Error::Protocol(format!("client {} uploaded parameters outside the trainable set", u.client)));
        }
        match aggregate(&updates, self.cfg.server_lr)? {
            Some(applied) => encoder.apply_delta(&applied)?,
            None => log::warn!("round {round}: no valid client updates, round skipped"),
        }
        let resources = updates.iter().map(|u| u.resources).fold(ResourceSample::default(), ResourceSample::max);
        let loss_mean = if updates.is_empty() {
            f32::NAN
        } else {
            (updates.iter().map(|u| f64::from(u.loss)).sum::<f64>() / updates.len() as f64) as f32
        };
        Ok(RoundLog {
            round,
            phase: plan.phase,
            kept: plan.kept.clone(),
            participants: updates.len(),
            failed,
            loss_mean,
            resources,
            fractions: resources::fractions(&plan, encoder.config(), self.cfg.work()),
        })
    }

    /// Runs `rounds`, calling `on_round` after each one is applied.
    pub fn run(
        &self,
        encoder: &mut LayeredEncoder,
        rounds: Range<usize>,
        mut on_round: impl FnMut(&RoundLog, &LayeredEncoder) -> Result<()>,
    ) -> Result<Vec<RoundLog>> {
        let mut logs = Vec::with_capacity(rounds.len());
        for round in rounds {
            let log = self.run_round(encoder, round)?;
            on_round(&log, encoder)?;
            logs.push(log);
        }
        Ok(logs)
    }
}

/// Full schedule: `(L + 1) · rounds_per_layer` rounds.
pub fn run_pretraining(
    cfg: &FedConfig,
    aug: &AugmentConfig,
    mode: TrainingMode,
    data: &Dataset,
    partition: &Partition,
    mut encoder: LayeredEncoder,
    workers: usize,
) -> Result<(LayeredEncoder, Vec<RoundLog>)> {
    let num_blocks = encoder.num_blocks();
    let sim = Simulation::new(cfg, aug, mode, data, partition, num_blocks, workers)?;
    let logs = sim.run(&mut encoder, 0..cfg.total_rounds(num_blocks), |_, _| Ok(()))?;
    Ok((encoder, logs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn phase_schedule_boundaries() {
        assert_eq!(schedule_phase(0, 4000, 12), 0);
        assert_eq!(schedule_phase(3999, 4000, 12), 0);
        assert_eq!(schedule_phase(4000, 4000, 12), 1);
        assert_eq!(schedule_phase(49, 10, 5), 4);
        assert_eq!(schedule_phase(50, 10, 5), 5);
        assert_eq!(schedule_phase(10_000, 10, 5), 5);
    }

    #[test]
    fn budget_slack_keeps_everything() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for phase in 0..5 {
            let kept = plan_dropout(phase, 6, 0.0, &mut rng).unwrap();
            assert_eq!(kept, KeptSet::prefix(phase));
        }
    }

    #[test]
    fn budget_of_one_is_infeasible() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(plan_dropout(3, 1, 0.0, &mut rng), Err(Error::Infeasible(_))));
    }

    #[test]
    fn drop_rate_rounds_candidate_count() {
        assert_eq!(planned_drops(11, 0, 0.5), 5);
        assert_eq!(planned_drops(1, 0, 1.0), 0);
        assert_eq!(planned_drops(4, 0, 0.5), 2);
    }

    fn update(client: usize, n: usize, value: f32) -> ClientUpdate {
        let mut deltas = Gradients::new();
        deltas.insert(ParamId::new(1, "ln1.g"), Tensor::scalar(value));
        ClientUpdate {
            client,
            deltas,
            num_examples: n,
            resampled: false,
            loss: 0.0,
            resources: ResourceSample::default(),
        }
    }

    #[test]
    fn aggregate_weighted_mean() {
        let applied = aggregate(&[update(0, 1, 6.0), update(1, 2, 3.0), update(2, 3, 1.0)], 1.0).unwrap().unwrap();
        assert_eq!(applied[&ParamId::new(1, "ln1.g")].item(), 2.5);
    }

    #[test]
    fn aggregate_symmetric_and_identical() {
        let zero = aggregate(&[update(0, 4, 0.75), update(1, 4, -0.75)], 1.0).unwrap().unwrap();
        assert_eq!(zero[&ParamId::new(1, "ln1.g")].item(), 0.0);
        let same = aggregate(&[update(0, 4, 0.75), update(1, 9, 0.75)], 1.0).unwrap().unwrap();
        assert_eq!(same[&ParamId::new(1, "ln1.g")].item(), 0.75);
        assert!(aggregate(&[], 1.0).unwrap().is_none());
    }

    #[test]
    fn aggregate_rejects_mismatched_keys() {
        let mut other = update(1, 1, 1.0);
        other.deltas.insert(ParamId::new(2, "ln1.g"), Tensor::scalar(1.0));
        assert!(matches!(aggregate(&[update(0, 1, 1.0), other], 1.0), Err(Error::Protocol(_))));
    }
}
