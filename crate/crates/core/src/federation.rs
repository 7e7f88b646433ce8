//! The server/client round loop.
//!
//! Each round the server samples clients, broadcasts `θ`, collects one
//! [`ClientUpdate`] per participating client and folds them into `θ` in
//! ascending client-id order. Local training may run in parallel; aggregation
//! never depends on the schedule.

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::cost::{inference_flops, CostInputs, CostReport, LinkRates, RoundCost, BYTES_PER_PARAM};
use crate::error::{Error, Result};
use crate::metrics::{argmax_rows, evaluate};
use crate::partition::PartitionSpec;
use crate::rng::{derive_seed, stream, tag};
use crate::tensor::Tensor;
use crate::trainer::{build_trainer, Objective, TrainerKind};

pub use crate::cost::Mode;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// `sample_count / Σ sample_count`.
    SampleCount,
    /// `1 / #updates`.
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FederationConfig {
    /// Total clients `n`.
    pub clients: usize,
    /// Clients sampled per round `m`; defaults to `n`.
    #[serde(default)]
    pub clients_per_round: Option<usize>,
    pub rounds: usize,
    #[serde(default = "defaults::local_epochs")]
    pub local_epochs: usize,
    #[serde(default = "defaults::local_batch")]
    pub local_batch: usize,
    #[serde(default = "defaults::lr")]
    pub lr: f32,
    #[serde(default = "defaults::mode")]
    pub mode: Mode,
    #[serde(default = "defaults::trainer")]
    pub trainer: TrainerKind,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "defaults::weighting")]
    pub weighting: Weighting,
    /// Probability that a selected client drops out of a round.
    #[serde(default)]
    pub dropout: f64,
    #[serde(default = "defaults::eval_interval")]
    pub eval_interval: usize,
    /// Logit temperature; defaults to the backbone's `1 / logit_scale`, or 1.
    #[serde(default)]
    pub temperature: Option<f32>,
    #[serde(default = "defaults::prompt_len")]
    pub prompt_len: usize,
    #[serde(default)]
    pub link: LinkRates,
}

mod defaults {
    use super::*;

    pub fn local_epochs() -> usize {
        1
    }
    pub fn local_batch() -> usize {
        32
    }
    pub fn lr() -> f32 {
        0.001
    }
    pub fn mode() -> Mode {
        Mode::FedAvg
    }
    pub fn trainer() -> TrainerKind {
        TrainerKind::PromptFl
    }
    pub fn weighting() -> Weighting {
        Weighting::SampleCount
    }
    pub fn eval_interval() -> usize {
        1
    }
    pub fn prompt_len() -> usize {
        16
    }
}

impl FederationConfig {
    /// Defaults everywhere except the client count, round count and seed.
    pub fn new(clients: usize, rounds: usize, seed: u64) -> Self {
        Self {
            clients,
            clients_per_round: None,
            rounds,
            local_epochs: defaults::local_epochs(),
            local_batch: defaults::local_batch(),
            lr: defaults::lr(),
            mode: defaults::mode(),
            trainer: defaults::trainer(),
            seed,
            weighting: defaults::weighting(),
            dropout: 0.0,
            eval_interval: defaults::eval_interval(),
            temperature: None,
            prompt_len: defaults::prompt_len(),
            link: LinkRates::default(),
        }
    }

    pub fn per_round(&self) -> usize {
        self.clients_per_round.unwrap_or(self.clients)
    }

    pub fn validate(&self) -> Result<()> {
        self.check().map_err(|(field, msg)| Error::config(format!("{field}: {msg}")))
    }

    /// Like [`validate`](Self::validate) but names the offending field separately.
    pub fn check(&self) -> std::result::Result<(), (&'static str, String)> {
        let m = self.per_round();
        if self.clients == 0 {
            return Err(("clients", "need at least one client".into()));
        }
        if m == 0 || m > self.clients {
            return Err((
                "clients_per_round",
                format!("need 1 <= clients_per_round ({m}) <= clients ({})", self.clients),
            ));
        }
        if self.local_epochs == 0 {
            return Err(("local_epochs", "must be positive".into()));
        }
        if self.local_batch == 0 {
            return Err(("local_batch", "must be positive".into()));
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(("lr", format!("must be a non-negative number, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(("dropout", format!("must lie in [0, 1), got {}", self.dropout)));
        }
        if self.eval_interval == 0 {
            return Err(("eval_interval", "must be positive".into()));
        }
        if let Some(t) = self.temperature {
            if !(t.is_finite() && t > 0.0) {
                return Err(("temperature", format!("must be positive, got {t}")));
            }
        }
        if self.trainer == TrainerKind::PromptFl && self.prompt_len == 0 {
            return Err(("prompt_len", "must be positive".into()));
        }
        Ok(())
    }

    pub fn temperature_for(&self, backbone: &Backbone) -> f32 {
        self.temperature.unwrap_or_else(|| backbone.logit_scale().map_or(1.0, |s| 1.0 / s))
    }

    /// Closed-form accounting inputs matching this configuration.
    pub fn cost_inputs(&self, backbone_params: u64, trainable_params: u64, seqlen: u64) -> CostInputs {
        CostInputs {
            trainer: self.trainer,
            mode: self.mode,
            rounds: self.rounds as u64,
            clients: self.clients as u64,
            clients_per_round: self.per_round() as u64,
            local_epochs: self.local_epochs as u64,
            local_batch: self.local_batch as u64,
            seqlen,
            backbone_params,
            trainable_params,
            link: self.link,
        }
    }
}

/// The server's view between rounds.
#[derive(Debug, Clone, PartialEq)]
pub struct ServerState {
    pub round: usize,
    pub theta: Tensor,
    pub seed: u64,
}

/// Everything a client sends back. Never carries features or labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub client_id: usize,
    /// Gradient under FedSGD, `θ_local − θ_g` under FedAVG.
    pub payload: Tensor,
    pub sample_count: usize,
    pub payload_bytes: u64,
}

/// Training loss observed locally; stays in the simulator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalStats {
    pub loss: f32,
}

/// A client's private data.
#[derive(Debug, Clone, PartialEq)]
pub struct Shard {
    pub features: Tensor,
    pub labels: Vec<u32>,
}

impl Shard {
    pub fn from_rows(backbone: &Backbone, rows: &[usize]) -> Result<Self> {
        let images = backbone.images();
        let labels = rows
            .iter()
            .map(|&r| images.labels().get(r).copied().ok_or_else(|| Error::dim(format!("row {r} out of range"))))
            .collect::<Result<Vec<_>>>()?;
        let features =
            if rows.is_empty() { Tensor::zeros(&[0, images.dim()]) } else { images.features().gather_rows(rows)? };
        Ok(Self { features, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn batch(&self, idx: &[usize]) -> Result<(Tensor, Vec<u32>)> {
        Ok((self.features.gather_rows(idx)?, idx.iter().map(|&i| self.labels[i]).collect()))
    }
}

/// Uniform sample of `m` of `n` clients without replacement, ascending.
pub fn select_clients(n: usize, m: usize, seed: u64, round: usize) -> Result<Vec<usize>> {
    if m > n {
        return Err(Error::config(format!("cannot select {m} of {n} clients")));
    }
    let mut rng = stream(seed, &[tag("select"), round as u64]);
    let mut ids = rand::seq::index::sample(&mut rng, n, m).into_vec();
    ids.sort_unstable();
    Ok(ids)
}

/// The indices of the single FedSGD batch a client draws in `round`, ascending.
pub fn sgd_batch(shard_len: usize, batch: usize, seed: u64, round: usize, client: usize) -> Vec<usize> {
    let mut rng = stream(seed, &[tag("batch"), round as u64, client as u64]);
    let mut idx = rand::seq::index::sample(&mut rng, shard_len, batch.min(shard_len)).into_vec();
    idx.sort_unstable();
    idx
}

/// Runs one client's local computation from `theta`.
pub fn local_train(
    objective: &dyn Objective,
    shard: &Shard,
    theta: &Tensor,
    config: &FederationConfig,
    client_id: usize,
    round: usize,
) -> Result<(ClientUpdate, LocalStats)> {
    if shard.is_empty() {
        return Err(Error::Empty(format!("client {client_id} has no training samples")));
    }
    let (payload, loss) = match config.mode {
        Mode::FedSgd => {
            let idx = sgd_batch(shard.len(), config.local_batch, config.seed, round, client_id);
            let (x, y) = shard.batch(&idx)?;
            let (loss, grad) = objective.loss_and_grad(theta, &x, &y)?;
            (grad, loss)
        }
        Mode::FedAvg => {
            let mut local = theta.clone();
            let mut loss_sum = 0.0f32;
            let mut batches = 0usize;
            for epoch in 0..config.local_epochs {
                let mut rng = stream(config.seed, &[tag("epoch"), round as u64, client_id as u64, epoch as u64]);
                let mut order: Vec<usize> = (0..shard.len()).collect();
                rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
                for chunk in order.chunks(config.local_batch) {
                    let mut idx = chunk.to_vec();
                    idx.sort_unstable();
                    let (x, y) = shard.batch(&idx)?;
                    let (loss, grad) = objective.loss_and_grad(&local, &x, &y)?;
                    local.scaled_add(-config.lr, &grad)?;
                    loss_sum += loss;
                    batches += 1;
                }
            }
            (local.sub(theta)?, loss_sum / batches as f32)
        }
    };
    let payload_bytes = payload.len() as u64 * BYTES_PER_PARAM;
    Ok((ClientUpdate { client_id, payload, sample_count: shard.len(), payload_bytes }, LocalStats { loss }))
}

/// Weighted mean of the payloads, folded in ascending client-id order.
pub fn mean_payload(updates: &[ClientUpdate], weighting: Weighting) -> Result<Tensor> {
    let mut sorted: Vec<&ClientUpdate> = updates.iter().collect();
    sorted.sort_by_key(|u| u.client_id);
    let first = sorted.first().ok_or_else(|| Error::Empty("no client updates to aggregate".into()))?;
    let shape = first.payload.shape().to_vec();
    if let Some(u) = sorted.iter().find(|u| u.payload.shape() != shape.as_slice()) {
        return Err(Error::dim(format!(
            "client {} sent payload {:?}, expected {shape:?}",
            u.client_id,
            u.payload.shape()
        )));
    }
    if let Some(u) = sorted.iter().find(|u| u.sample_count == 0) {
        return Err(Error::Data(format!("client {} reported zero samples", u.client_id)));
    }
    let total: usize = sorted.iter().map(|u| u.sample_count).sum();
    let mut acc = Tensor::zeros(&shape);
    for u in &sorted {
        let w = match weighting {
            Weighting::SampleCount => u.sample_count as f32 / total as f32,
            Weighting::Uniform => 1.0 / sorted.len() as f32,
        };
        acc.scaled_add(w, &u.payload)?;
    }
    Ok(acc)
}

/// Applies one round of updates to `theta`.
pub fn aggregate(
    updates: &[ClientUpdate],
    theta: &Tensor,
    mode: Mode,
    lr: f32,
    weighting: Weighting,
) -> Result<Tensor> {
    let mean = mean_payload(updates, weighting)?;
    if mean.shape() != theta.shape() {
        return Err(Error::dim(format!("payload {:?} does not match θ {:?}", mean.shape(), theta.shape())));
    }
    let mut next = theta.clone();
    match mode {
        Mode::FedSgd => next.scaled_add(-lr, &mean)?,
        Mode::FedAvg => next.add_assign(&mean)?,
    }
    Ok(next)
}

/// One line of the metrics CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub round: usize,
    pub train_loss: f64,
    pub test_accuracy: f64,
    pub test_macro_f1: f64,
    pub test_weighted_f1: f64,
    pub bytes_up_round: u64,
    pub bytes_down_round: u64,
    pub cumulative_bytes: u64,
    pub flops_round: f64,
}

/// Round log entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum RoundEvent {
    Selected { round: usize, clients: Vec<usize> },
    Dropped { round: usize, client: usize },
    Skipped { round: usize, client: usize, reason: String },
    Failed { round: usize, reason: String },
    Aggregated { round: usize, participants: usize, train_loss: f64 },
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub rows: Vec<MetricsRow>,
    pub events: Vec<RoundEvent>,
    pub state: ServerState,
    pub cost: CostReport,
    /// Closed-form cost of the same configuration with full participation.
    pub predicted_cost: CostReport,
}

impl RunOutput {
    pub fn metrics_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        if self.rows.is_empty() {
            w.write_record(METRICS_COLUMNS)?;
        }
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.into_inner().map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn events_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.events {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        Ok(out)
    }
}

pub const METRICS_COLUMNS: [&str; 9] = [
    "round",
    "train_loss",
    "test_accuracy",
    "test_macro_f1",
    "test_weighted_f1",
    "bytes_up_round",
    "bytes_down_round",
    "cumulative_bytes",
    "flops_round",
];

/// Runs `config.rounds` rounds of federated training and evaluates on `test_rows`.
///
/// `partition` holds row indices into the backbone's feature table.
pub fn run(
    config: &FederationConfig,
    backbone: &Backbone,
    partition: &PartitionSpec,
    test_rows: &[usize],
) -> Result<RunOutput> {
    config.validate()?;
    if partition.n_clients != config.clients || partition.assignment.len() != config.clients {
        return Err(Error::config(format!(
            "partition covers {} clients, configuration has {}",
            partition.assignment.len(),
            config.clients
        )));
    }
    let setup = build_trainer(
        config.trainer,
        backbone,
        config.prompt_len,
        config.temperature_for(backbone),
        derive_seed(config.seed, &[tag("init")]),
    )?;
    let objective = setup.objective.as_ref();
    let shards =
        partition.assignment.iter().map(|rows| Shard::from_rows(backbone, rows)).collect::<Result<Vec<_>>>()?;
    let test = Shard::from_rows(backbone, test_rows)?;
    let classes = backbone.classes();

    let inputs = config.cost_inputs(
        backbone.parameter_count(),
        objective.parameter_count() as u64,
        objective.sequence_len() as u64,
    );
    let predicted_cost = crate::cost::federation_cost(&inputs)?;

    let mut state = ServerState { round: 0, theta: setup.initial, seed: config.seed };
    let mut rows = Vec::new();
    let mut events = Vec::new();
    let mut round_costs = Vec::new();
    let mut cumulative = 0u64;
    let m = config.per_round();

    for t in 1..=config.rounds {
        let selected = select_clients(config.clients, m, config.seed, t)?;
        events.push(RoundEvent::Selected { round: t, clients: selected.clone() });
        let mut active = Vec::with_capacity(selected.len());
        let mut drop_rng = stream(config.seed, &[tag("dropout"), t as u64]);
        for &c in &selected {
            if config.dropout > 0.0 && drop_rng.random_bool(config.dropout) {
                events.push(RoundEvent::Dropped { round: t, client: c });
            } else if shards[c].is_empty() {
                events.push(RoundEvent::Skipped { round: t, client: c, reason: "empty shard".into() });
            } else {
                active.push(c);
            }
        }

        let theta = &state.theta;
        let results: Vec<Result<(ClientUpdate, LocalStats)>> =
            active.par_iter().map(|&c| local_train(objective, &shards[c], theta, config, c, t)).collect();
        let mut updates = Vec::with_capacity(results.len());
        let mut stats = Vec::with_capacity(results.len());
        for (c, r) in active.iter().zip(results) {
            match r {
                Ok((u, s)) => {
                    updates.push(u);
                    stats.push(s);
                }
                Err(e) => events.push(RoundEvent::Skipped { round: t, client: *c, reason: e.to_string() }),
            }
        }

        let once = if t == 1 { inputs.one_time_download() } else { 0 };
        let down = once + updates.len() as u64 * objective.parameter_count() as u64 * BYTES_PER_PARAM;
        let up: u64 = updates.iter().map(|u| u.payload_bytes).sum();
        let participants = updates.len() as f64;
        let round_cost = RoundCost {
            round: t as u64,
            download_bytes: down,
            upload_bytes: up,
            train_flops: participants * inputs.client_train_flops(),
            frozen_flops: participants * inputs.client_frozen_flops(),
            transfer_seconds: config.link.seconds(down, up)?,
        };
        cumulative += down + up;

        let train_loss = if updates.is_empty() {
            events.push(RoundEvent::Failed { round: t, reason: "no client updates".into() });
            f64::NAN
        } else {
            state.theta = aggregate(&updates, &state.theta, config.mode, config.lr, config.weighting)?;
            let total: usize = updates.iter().map(|u| u.sample_count).sum();
            let loss = updates.iter().zip(&stats).map(|(u, s)| f64::from(s.loss) * u.sample_count as f64).sum::<f64>()
                / total as f64;
            events.push(RoundEvent::Aggregated { round: t, participants: updates.len(), train_loss: loss });
            loss
        };
        state.round = t;

        if t % config.eval_interval == 0 || t == config.rounds {
            let eval = if test.is_empty() {
                crate::metrics::Evaluation { accuracy: 0.0, macro_f1: 0.0, weighted_f1: 0.0 }
            } else {
                let probs = objective.predict(&state.theta, &test.features)?;
                evaluate(&argmax_rows(&probs), &test.labels, classes)?
            };
            rows.push(MetricsRow {
                round: t,
                train_loss,
                test_accuracy: eval.accuracy,
                test_macro_f1: eval.macro_f1,
                test_weighted_f1: eval.weighted_f1,
                bytes_up_round: up,
                bytes_down_round: down,
                cumulative_bytes: cumulative,
                flops_round: round_cost.train_flops,
            });
        }
        round_costs.push(round_cost);
    }

    let mut cost = CostReport::from_rounds(
        config.trainer,
        config.link,
        round_costs,
        if config.rounds == 0 { 0 } else { inputs.one_time_download() },
        inference_flops(inputs.model_params() as f64, inputs.seqlen as f64),
        inputs.model_params() * BYTES_PER_PARAM,
    );
    if config.rounds == 0 {
        cost.one_time_download_bytes = predicted_cost.one_time_download_bytes;
        cost.download_bytes = predicted_cost.download_bytes;
        cost.transfer_seconds = predicted_cost.transfer_seconds;
    }
    Ok(RunOutput { rows, events, state, cost, predicted_cost })
}

/// Accuracy, macro F1 and weighted F1 of `theta` on `rows`.
pub fn evaluate_parameters(
    objective: &dyn Objective,
    theta: &Tensor,
    backbone: &Backbone,
    rows: &[usize],
) -> Result<crate::metrics::Evaluation> {
    let data = Shard::from_rows(backbone, rows)?;
    let probs = objective.predict(theta, &data.features)?;
    evaluate(&argmax_rows(&probs), &data.labels, backbone.classes())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn update(id: usize, values: &[f32], count: usize) -> ClientUpdate {
        ClientUpdate {
            client_id: id,
            payload: Tensor::vector(values).unwrap(),
            sample_count: count,
            payload_bytes: 4 * values.len() as u64,
        }
    }

    #[test]
    fn weighted_mean_example() {
        let ups = [update(0, &[1.0, 3.0], 1), update(1, &[3.0, 5.0], 3)];
        let mean = mean_payload(&ups, Weighting::SampleCount).unwrap();
        assert_eq!(mean.data(), &[2.5, 4.5]);
    }

    #[test]
    fn aggregation_ignores_update_order() {
        let a = [update(2, &[0.1, 0.7], 5), update(0, &[0.3, -0.2], 2), update(1, &[1.1, 0.05], 9)];
        let b = [a[1].clone(), a[2].clone(), a[0].clone()];
        let theta = Tensor::vector(&[0.5, 0.5]).unwrap();
        let x = aggregate(&a, &theta, Mode::FedAvg, 0.1, Weighting::SampleCount).unwrap();
        let y = aggregate(&b, &theta, Mode::FedAvg, 0.1, Weighting::SampleCount).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn empty_aggregation_fails() {
        let theta = Tensor::vector(&[0.0]).unwrap();
        assert!(matches!(aggregate(&[], &theta, Mode::FedSgd, 0.1, Weighting::Uniform), Err(Error::Empty(_))));
    }

    #[test]
    fn fedsgd_applies_learning_rate() {
        let theta = Tensor::vector(&[1.0, 1.0]).unwrap();
        let next = aggregate(&[update(0, &[2.0, -4.0], 3)], &theta, Mode::FedSgd, 0.5, Weighting::SampleCount).unwrap();
        assert_eq!(next.data(), &[0.0, 3.0]);
    }

    #[test]
    fn selection() {
        assert_eq!(select_clients(5, 5, 1, 3).unwrap(), vec![0, 1, 2, 3, 4]);
        assert_eq!(select_clients(10, 1, 7, 2).unwrap(), select_clients(10, 1, 7, 2).unwrap());
        assert!(matches!(select_clients(3, 4, 0, 1), Err(Error::Config(_))));
        let s = select_clients(20, 6, 3, 9).unwrap();
        assert!(s.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn config_validation() {
        let mut c = FederationConfig::new(4, 10, 0);
        assert!(c.validate().is_ok());
        c.clients_per_round = Some(5);
        assert!(c.validate().is_err());
        c.clients_per_round = None;
        c.dropout = 1.0;
        assert!(c.validate().is_err());
    }
}
