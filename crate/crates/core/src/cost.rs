//! Closed-form communication, compute and storage accounting.
//!
//! Units are decimal (1 MB = 1e6 bytes, 1 Mbps = 1e6 bit/s) and every
//! parameter is stored in full precision, 4 bytes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trainer::TrainerKind;

pub const BYTES_PER_PARAM: u64 = 4;

/// `2 · 3 · params · epochs · batch · seqlen`: forward plus a backward pass
/// costing twice the forward, per token.
pub fn training_flops(params: f64, epochs: f64, batch: f64, seqlen: f64) -> f64 {
    6.0 * params * epochs * batch * seqlen
}

/// `2 · params · seqlen` for one forward pass.
pub fn inference_flops(params: f64, seqlen: f64) -> f64 {
    2.0 * params * seqlen
}

pub fn transfer_seconds(bytes: f64, rate_bps: f64) -> Result<f64> {
    if rate_bps.is_nan() || rate_bps <= 0.0 {
        return Err(Error::config(format!("link rate must be positive, got {rate_bps}")));
    }
    Ok(bytes * 8.0 / rate_bps)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkRates {
    #[serde(default = "default_down")]
    pub down_bps: f64,
    #[serde(default = "default_up")]
    pub up_bps: f64,
}

fn default_down() -> f64 {
    54e6
}

fn default_up() -> f64 {
    12e6
}

impl Default for LinkRates {
    fn default() -> Self {
        Self { down_bps: default_down(), up_bps: default_up() }
    }
}

impl LinkRates {
    /// Download time plus upload time.
    pub fn seconds(&self, down_bytes: u64, up_bytes: u64) -> Result<f64> {
        Ok(transfer_seconds(down_bytes as f64, self.down_bps)? + transfer_seconds(up_bytes as f64, self.up_bps)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// One batch per round, clients send gradients.
    FedSgd,
    /// Several local epochs per round, clients send parameter deltas.
    FedAvg,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::FedSgd => "fedsgd",
            Mode::FedAvg => "fedavg",
        }
    }
}

/// Everything the closed-form accounting depends on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostInputs {
    pub trainer: TrainerKind,
    pub mode: Mode,
    pub rounds: u64,
    pub clients: u64,
    pub clients_per_round: u64,
    pub local_epochs: u64,
    pub local_batch: u64,
    pub seqlen: u64,
    /// Parameters of the shipped backbone.
    pub backbone_params: u64,
    /// Entries of the federated parameter vector.
    pub trainable_params: u64,
    #[serde(default)]
    pub link: LinkRates,
}

impl CostInputs {
    /// One device, 150M-parameter backbone, 100 rounds, batch 32, one epoch, 196 tokens.
    pub fn promptfl_device_preset() -> Self {
        Self {
            trainer: TrainerKind::PromptFl,
            mode: Mode::FedAvg,
            rounds: 100,
            clients: 1,
            clients_per_round: 1,
            local_epochs: 1,
            local_batch: 32,
            seqlen: 196,
            backbone_params: 150_000_000,
            trainable_params: 16 * 512,
            link: LinkRates::default(),
        }
    }

    /// One device training a 100M-parameter model for 100 rounds.
    pub fn fl_device_preset() -> Self {
        Self {
            trainer: TrainerKind::Finetune,
            backbone_params: 100_000_000,
            trainable_params: 100_000_000,
            ..Self::promptfl_device_preset()
        }
    }

    fn epochs(&self) -> u64 {
        match self.mode {
            Mode::FedSgd => 1,
            Mode::FedAvg => self.local_epochs,
        }
    }

    /// Payload bytes one client sends (and receives) per round.
    pub fn payload_bytes(&self) -> u64 {
        self.trainable_params * BYTES_PER_PARAM
    }

    /// Parameters a device holds to run inference.
    pub fn model_params(&self) -> u64 {
        match self.trainer {
            TrainerKind::PromptFl => self.backbone_params + self.trainable_params,
            TrainerKind::Finetune | TrainerKind::Scratch => self.trainable_params,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.clients == 0 || self.clients_per_round == 0 || self.clients_per_round > self.clients {
            return Err(Error::config(format!(
                "need 1 <= clients_per_round ({}) <= clients ({})",
                self.clients_per_round, self.clients
            )));
        }
        if self.local_epochs == 0 || self.local_batch == 0 || self.seqlen == 0 {
            return Err(Error::config("local_epochs, local_batch and seqlen must be positive"));
        }
        if self.trainable_params == 0 {
            return Err(Error::config("trainable_params must be positive"));
        }
        Ok(())
    }

    /// Trainable-parameter training FLOPs for one client and one round.
    pub fn client_train_flops(&self) -> f64 {
        training_flops(self.trainable_params as f64, self.epochs() as f64, self.local_batch as f64, self.seqlen as f64)
    }

    /// FLOPs of pushing the client's batches through the frozen backbone
    /// (forward and backward) for one round. Zero for full-model trainers.
    pub fn client_frozen_flops(&self) -> f64 {
        match self.trainer {
            TrainerKind::PromptFl => training_flops(
                self.backbone_params as f64,
                self.epochs() as f64,
                self.local_batch as f64,
                self.seqlen as f64,
            ),
            _ => 0.0,
        }
    }

    /// Bytes every client downloads before round 1.
    pub fn one_time_download(&self) -> u64 {
        match self.trainer {
            TrainerKind::PromptFl => self.clients * self.backbone_params * BYTES_PER_PARAM,
            _ => 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoundCost {
    pub round: u64,
    pub download_bytes: u64,
    pub upload_bytes: u64,
    pub train_flops: f64,
    pub frozen_flops: f64,
    pub transfer_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub trainer: TrainerKind,
    pub link: LinkRates,
    pub rounds: Vec<RoundCost>,
    /// Backbone shipped to clients before training, included in `download_bytes`.
    pub one_time_download_bytes: u64,
    pub download_bytes: u64,
    pub upload_bytes: u64,
    pub transfer_seconds: f64,
    /// FLOPs spent on trainable parameters.
    pub train_flops: f64,
    /// FLOPs spent passing data through frozen weights.
    pub frozen_flops: f64,
    /// One forward pass of the deployed model on one input.
    pub inference_flops: f64,
    pub storage_bytes: u64,
}

impl CostReport {
    /// Totals a list of per-round costs.
    pub fn from_rounds(
        trainer: TrainerKind,
        link: LinkRates,
        rounds: Vec<RoundCost>,
        one_time_download_bytes: u64,
        inference_flops: f64,
        storage_bytes: u64,
    ) -> Self {
        let mut r = Self {
            trainer,
            link,
            one_time_download_bytes,
            download_bytes: 0,
            upload_bytes: 0,
            transfer_seconds: 0.0,
            train_flops: 0.0,
            frozen_flops: 0.0,
            inference_flops,
            storage_bytes,
            rounds: Vec::new(),
        };
        for c in &rounds {
            r.download_bytes += c.download_bytes;
            r.upload_bytes += c.upload_bytes;
            r.transfer_seconds += c.transfer_seconds;
            r.train_flops += c.train_flops;
            r.frozen_flops += c.frozen_flops;
        }
        r.rounds = rounds;
        r
    }

    pub fn total_bytes(&self) -> u64 {
        self.download_bytes + self.upload_bytes
    }

    /// Human-readable summary table.
    pub fn summary(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("trainer            {}\n", self.trainer.name()));
        s.push_str(&format!("rounds             {}\n", self.rounds.len()));
        s.push_str(&format!(
            "download           {} (one-time {}, {:.1} s)\n",
            human_bytes(self.download_bytes),
            human_bytes(self.one_time_download_bytes),
            self.one_time_download_bytes as f64 * 8.0 / self.link.down_bps
        ));
        s.push_str(&format!("upload             {}\n", human_bytes(self.upload_bytes)));
        s.push_str(&format!(
            "transfer time      {:.1} s ({:.2} min, {:.2} h) at {:.0}/{:.0} Mbps down/up\n",
            self.transfer_seconds,
            self.transfer_seconds / 60.0,
            self.transfer_seconds / 3600.0,
            self.link.down_bps / 1e6,
            self.link.up_bps / 1e6
        ));
        s.push_str(&format!("trainable flops    {:.4e}\n", self.train_flops));
        s.push_str(&format!("frozen-pass flops  {:.4e}\n", self.frozen_flops));
        s.push_str(&format!("inference flops    {:.4e}\n", self.inference_flops));
        s.push_str(&format!("storage            {}\n", human_bytes(self.storage_bytes)));
        s
    }
}

fn human_bytes(b: u64) -> String {
    let v = b as f64;
    if v >= 1e9 {
        format!("{:.2} GB", v / 1e9)
    } else if v >= 1e6 {
        format!("{:.2} MB", v / 1e6)
    } else if v >= 1e3 {
        format!("{:.2} kB", v / 1e3)
    } else {
        format!("{b} B")
    }
}

/// Closed-form cost of a run in which every selected client participates.
///
/// Each round the `m` selected clients download and upload one payload each.
/// Under PromptFL every one of the `n` clients also downloads the backbone
/// once; that traffic is booked on round 1.
pub fn federation_cost(inputs: &CostInputs) -> Result<CostReport> {
    inputs.validate()?;
    let m = inputs.clients_per_round;
    let payload = inputs.payload_bytes();
    let mut rounds = Vec::with_capacity(inputs.rounds as usize);
    for t in 1..=inputs.rounds {
        let once = if t == 1 { inputs.one_time_download() } else { 0 };
        let down = once + m * payload;
        let up = m * payload;
        rounds.push(RoundCost {
            round: t,
            download_bytes: down,
            upload_bytes: up,
            train_flops: m as f64 * inputs.client_train_flops(),
            frozen_flops: m as f64 * inputs.client_frozen_flops(),
            transfer_seconds: inputs.link.seconds(down, up)?,
        });
    }
    let mut report = CostReport::from_rounds(
        inputs.trainer,
        inputs.link,
        rounds,
        inputs.one_time_download(),
        inference_flops(inputs.model_params() as f64, inputs.seqlen as f64),
        inputs.model_params() * BYTES_PER_PARAM,
    );
    if inputs.rounds == 0 && inputs.one_time_download() > 0 {
        let once = inputs.one_time_download();
        report.download_bytes = once;
        report.transfer_seconds = inputs.link.seconds(once, 0)?;
    }
    Ok(report)
}
