//! The federated round loop, baselines and ablations.

mod aggregate;
mod dp;

pub use aggregate::aggregate;
pub use dp::add_dp_noise;

use std::fmt;
use std::fs;
use std::path::PathBuf;
use std::str::FromStr;

use log::{debug, info, warn};
use rand::seq::index;
use rayon::prelude::*;

use crate::data::{dirichlet_partition, read_fmic, split_tvt, synth_generate, Dataset, SynthSpec};
use crate::distill::{local_update, local_update_single, DistillVariant, LocalUpdateConfig, LossBundle};
use crate::error::{Error, Result};
use crate::gpd::{encode_model, wire, CodecConfig, GpdPacket};
use crate::models::{forward_values, init_models, ClientModels, ModelConfig, ModelKind};
use crate::nn::Tensor;
use crate::rng::{derive_seed, stream, tag};

pub const SPLIT_RATIOS: (f64, f64, f64) = (0.7, 0.2, 0.1);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    FedMic,
    FedAvg,
    Local,
    /// Auxiliary matrix replaced by the identity.
    FedMicA,
    /// Representation distillation term removed.
    FedMicB,
    /// Parameters exchanged uncompressed.
    FedMicC,
}

impl Mode {
    pub const ALL: [Mode; 6] = [Mode::FedMic, Mode::FedAvg, Mode::Local, Mode::FedMicA, Mode::FedMicB, Mode::FedMicC];

    pub fn name(self) -> &'static str {
        match self {
            Mode::FedMic => "fedmic",
            Mode::FedAvg => "fedavg",
            Mode::Local => "local",
            Mode::FedMicA => "fedmic_a",
            Mode::FedMicB => "fedmic_b",
            Mode::FedMicC => "fedmic_c",
        }
    }

    /// Whether clients train a teacher/student pair.
    pub fn is_dual(self) -> bool {
        !matches!(self, Mode::FedAvg | Mode::Local)
    }

    pub fn communicates(self) -> bool {
        self != Mode::Local
    }

    /// Whether packets are low-rank encoded (otherwise sent raw).
    pub fn compresses(self) -> bool {
        matches!(self, Mode::FedMic | Mode::FedMicA | Mode::FedMicB)
    }

    pub fn variant(self) -> DistillVariant {
        match self {
            Mode::FedMicA => DistillVariant::IdentityAux,
            Mode::FedMicB => DistillVariant::NoRepTerm,
            _ => DistillVariant::Full,
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown mode `{s}` (expected one of fedmic, fedavg, local, fedmic_a, fedmic_b, fedmic_c)"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synth(SynthSpec),
    File(PathBuf),
}

impl DataSource {
    pub fn load(&self) -> Result<Dataset> {
        match self {
            DataSource::Synth(spec) => synth_generate(spec),
            DataSource::File(path) => read_fmic(path),
        }
    }
}

/// Everything needed to run one seeded experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub mode: Mode,
    pub n_clients: usize,
    /// Fraction of clients sampled per round.
    pub ratio: f64,
    pub rounds: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub alpha: f64,
    /// Standard deviation of upload noise; 0 disables it.
    pub tau: f64,
    /// Dirichlet concentration of the label split.
    pub lambda: f64,
    pub seed: u64,
    pub model: ModelKind,
    /// Hidden widths (MLP) or conv channels (CNN); `None` uses the default.
    pub hidden: Option<Vec<usize>>,
    pub rep_dim: Option<usize>,
    pub raw_threshold: usize,
    pub data: DataSource,
    pub min_per_client: usize,
    pub train_aux: bool,
    pub swap_kl: bool,
    pub parallel: bool,
    /// Clients that fail whenever they are sampled.
    pub fail: Vec<usize>,
    pub dump_packets: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            mode: Mode::FedMic,
            n_clients: 20,
            ratio: 0.1,
            rounds: 50,
            epochs: 5,
            batch: 32,
            lr: 1e-3,
            alpha: 0.98,
            tau: 0.0,
            lambda: 0.1,
            seed: 0,
            model: ModelKind::Mlp,
            hidden: None,
            rep_dim: None,
            raw_threshold: crate::gpd::DEFAULT_RAW_THRESHOLD,
            data: DataSource::Synth(SynthSpec::default()),
            min_per_client: crate::data::DEFAULT_MIN_PER_CLIENT,
            train_aux: true,
            swap_kl: false,
            parallel: true,
            fail: Vec::new(),
            dump_packets: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.n_clients < 2 {
            return bad(format!("n_clients must be at least 2, got {}", self.n_clients));
        }
        if !(self.ratio > 0.0 && self.ratio <= 1.0) {
            return bad(format!("ratio must lie in (0, 1], got {}", self.ratio));
        }
        if self.rounds == 0 || self.epochs == 0 || self.batch == 0 {
            return bad("rounds, epochs and batch must be at least 1".into());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be finite and non-negative, got {}", self.lr));
        }
        CodecConfig::new(self.alpha, self.raw_threshold)?;
        if !(self.tau >= 0.0 && self.tau.is_finite()) {
            return bad(format!("tau must be finite and non-negative, got {}", self.tau));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be positive, got {}", self.lambda));
        }
        if let Some(&k) = self.fail.iter().find(|&&k| k >= self.n_clients) {
            return bad(format!("failing client {k} does not exist"));
        }
        Ok(())
    }

    pub fn codec(&self) -> CodecConfig {
        if self.mode.compresses() {
            CodecConfig { alpha: self.alpha, raw_threshold: self.raw_threshold }
        } else {
            CodecConfig::raw()
        }
    }

    pub fn local_config(&self) -> LocalUpdateConfig {
        LocalUpdateConfig {
            epochs: self.epochs,
            batch_size: self.batch,
            learning_rate: self.lr,
            train_aux: self.train_aux,
            swap_kl: self.swap_kl,
            variant: self.mode.variant(),
            ..Default::default()
        }
    }

    pub fn model_config(&self, input: [usize; 3], n_classes: usize) -> ModelConfig {
        let base = match self.model {
            ModelKind::Mlp => ModelConfig::default_mlp(input, n_classes),
            ModelKind::Cnn => ModelConfig::default_cnn(input, n_classes),
        };
        ModelConfig {
            hidden: self.hidden.clone().unwrap_or(base.hidden),
            rep_dim: self.rep_dim.unwrap_or(base.rep_dim),
            ..base
        }
    }

    pub fn sample_count(&self) -> usize {
        ((self.ratio * self.n_clients as f64).round() as usize).clamp(1, self.n_clients)
    }
}

/// Uniform sample without replacement of `max(1, round(ratio·n))` ids,
/// returned in ascending order.
pub fn sample_clients(n_clients: usize, ratio: f64, seed: u64, round: usize) -> Vec<usize> {
    let k = ((ratio * n_clients as f64).round() as usize).clamp(1, n_clients);
    let mut rng = stream(&[seed, tag::SAMPLING, round as u64]);
    let mut ids = index::sample(&mut rng, n_clients, k).into_vec();
    ids.sort_unstable();
    ids
}

/// Argmax accuracy; ties go to the lowest class index.
pub fn evaluate(cfg: &ModelConfig, params: &[Tensor], x: &Tensor, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::Contract("evaluation on an empty split".into()));
    }
    let (_, logits) = forward_values(cfg, params, x)?;
    Ok(accuracy(&logits, labels))
}

pub fn accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    let correct = labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| {
            let row = logits.row(i);
            let best = row.iter().enumerate().fold(0, |b, (j, &v)| if v > row[b] { j } else { b });
            best == y
        })
        .count();
    correct as f64 / labels.len() as f64
}

/// Per-client record for one round.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientMetrics {
    pub client_id: usize,
    /// Mean loss bundle of the client's local update, if it trained.
    pub losses: Option<LossBundle>,
    pub test_acc: f64,
    pub upload_bytes: usize,
    pub download_bytes: usize,
    /// Transmitted/full scalars of the client's upload, if any.
    pub upload_ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundMetrics {
    /// 1-based round index.
    pub round: usize,
    pub sampled: Vec<usize>,
    pub clients: Vec<ClientMetrics>,
    pub weighted_acc: f64,
    pub upload_bytes: usize,
    pub download_bytes: usize,
    pub transmitted: usize,
    pub full: usize,
    /// `transmitted / full` over all packets moved this round; 0 without traffic.
    pub comm_ratio: f64,
}

impl RoundMetrics {
    /// Mean over the clients that trained this round.
    pub fn mean_losses(&self) -> Option<LossBundle> {
        let trained: Vec<LossBundle> = self.clients.iter().filter_map(|c| c.losses).collect();
        (!trained.is_empty()).then(|| LossBundle::mean(&trained))
    }
}

struct ClientState {
    id: usize,
    models: ClientModels,
    /// Student right after its latest local update.
    personal: Option<Vec<Tensor>>,
    x_train: Tensor,
    y_train: Vec<usize>,
    x_test: Tensor,
    y_test: Vec<usize>,
}

impl ClientState {
    fn n_train(&self) -> u64 {
        self.y_train.len() as u64
    }
}

/// A running experiment: dataset, partition and every client's state.
pub struct Simulation {
    cfg: RunConfig,
    model: ModelConfig,
    clients: Vec<ClientState>,
    next_round: usize,
}

struct Upload {
    bytes: Vec<u8>,
    losses: LossBundle,
}

impl Simulation {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let ds = cfg.data.load()?;
        let part = dirichlet_partition(&ds.labels, ds.n_classes, cfg.n_clients, cfg.lambda, cfg.seed, cfg.min_per_client)?;
        let part = split_tvt(&part, &ds.labels, SPLIT_RATIOS, cfg.seed)?;
        let model = cfg.model_config(ds.shape(), ds.n_classes);
        model.validate()?;
        if let Some(dir) = &cfg.dump_packets {
            fs::create_dir_all(dir)?;
        }
        let mut clients = Vec::with_capacity(cfg.n_clients);
        for (id, split) in part.clients.iter().enumerate() {
            let (x_train, y_train) = ds.to_tensor(&split.train)?;
            let (x_test, y_test) = ds.to_tensor(&split.test)?;
            let models = init_models(&model, derive_seed(&[cfg.seed, tag::CLIENT, id as u64]))?;
            clients.push(ClientState { id, models, personal: None, x_train, y_train, x_test, y_test });
        }
        info!(
            "{}: {} clients, {} samples, model with {} parameters",
            cfg.mode,
            cfg.n_clients,
            ds.len(),
            model.n_params()
        );
        Ok(Simulation { cfg: cfg.clone(), model, clients, next_round: 1 })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn model_config(&self) -> &ModelConfig {
        &self.model
    }

    pub fn client_models(&self, id: usize) -> &ClientModels {
        &self.clients[id].models
    }

    pub fn client_train_size(&self, id: usize) -> usize {
        self.clients[id].y_train.len()
    }

    /// Parameters used to score client `id` under the run's mode.
    pub fn eval_params(&self, id: usize) -> &[Tensor] {
        let c = &self.clients[id];
        match (self.cfg.mode.is_dual(), &c.personal) {
            (true, Some(p)) => p,
            _ => &c.models.student,
        }
    }

    fn train_and_pack(&self, c: &mut ClientState, round: usize) -> Result<Upload> {
        let cfg = &self.cfg;
        let lcfg = cfg.local_config();
        let mut rng = stream(&[cfg.seed, tag::LOCAL_UPDATE, c.id as u64, round as u64]);
        let history = if cfg.mode.is_dual() {
            let h = local_update(&mut c.models, &c.x_train, &c.y_train, &lcfg, &mut rng)?;
            c.personal = Some(c.models.student.clone());
            h
        } else {
            let m = &mut c.models;
            local_update_single(&mut m.student, &mut m.opt_student, &self.model, &c.x_train, &c.y_train, &lcfg, &mut rng)?
        };
        let losses = LossBundle::mean(&history);
        if !cfg.mode.communicates() {
            return Ok(Upload { bytes: Vec::new(), losses });
        }
        let mut packet = encode_model(&c.models.student, &cfg.codec())?;
        packet.sender = c.id as u32;
        packet.round = round as u32;
        packet.n_samples = c.n_train();
        let mut noise_rng = stream(&[cfg.seed, tag::DP_NOISE, c.id as u64, round as u64]);
        let packet = add_dp_noise(&packet, cfg.tau, &mut noise_rng);
        Ok(Upload { bytes: wire::write_packet(&packet), losses })
    }

    /// Executes the next round and returns its metrics.
    pub fn run_round(&mut self) -> Result<RoundMetrics> {
        let round = self.next_round;
        let cfg = self.cfg.clone();
        let sampled = sample_clients(cfg.n_clients, cfg.ratio, cfg.seed, round);
        let active: Vec<usize> = sampled
            .iter()
            .copied()
            .filter(|k| {
                let failed = cfg.fail.contains(k);
                if failed {
                    warn!("round {round}: client {k} failed and is skipped");
                }
                !failed
            })
            .collect();

        let mut taken: Vec<ClientState> = Vec::with_capacity(active.len());
        let mut rest = Vec::with_capacity(self.clients.len());
        for c in self.clients.drain(..) {
            if active.contains(&c.id) {
                taken.push(c);
            } else {
                rest.push(c);
            }
        }
        let this = &*self;
        let work = |c: &mut ClientState| this.train_and_pack(c, round);
        let results: Vec<Result<Upload>> = if cfg.parallel {
            taken.par_iter_mut().map(work).collect()
        } else {
            taken.iter_mut().map(work).collect()
        };
        self.clients = rest;
        self.clients.extend(taken);
        self.clients.sort_by_key(|c| c.id);
        let uploads = results.into_iter().collect::<Result<Vec<_>>>()?;

        let mut up_bytes = vec![0usize; cfg.n_clients];
        let mut up_ratio = vec![None; cfg.n_clients];
        let mut losses = vec![None; cfg.n_clients];
        let mut transmitted = 0;
        let mut full = 0;
        let mut packets: Vec<GpdPacket> = Vec::with_capacity(uploads.len());
        for (&k, up) in active.iter().zip(&uploads) {
            losses[k] = Some(up.losses);
            if up.bytes.is_empty() {
                continue;
            }
            let packet = wire::read_packet(&up.bytes)?;
            let stats = packet.stats();
            up_bytes[k] = up.bytes.len();
            up_ratio[k] = Some(stats.ratio);
            transmitted += stats.transmitted;
            full += stats.full;
            if let Some(dir) = &cfg.dump_packets {
                fs::write(dir.join(format!("round{round:03}_client{k:03}_up.gpd")), &up.bytes)?;
            }
            packets.push(packet);
        }

        let mut down_each = 0;
        if !packets.is_empty() {
            let global = aggregate(&packets, &self.model.param_shapes())?;
            let mut packet = encode_model(&global, &cfg.codec())?;
            packet.sender = u32::MAX;
            packet.round = round as u32;
            packet.n_samples = packets.iter().map(|p| p.n_samples).sum();
            let bytes = wire::write_packet(&packet);
            if let Some(dir) = &cfg.dump_packets {
                fs::write(dir.join(format!("round{round:03}_global_down.gpd")), &bytes)?;
            }
            let received = wire::read_packet(&bytes)?;
            let stats = received.stats();
            let params = crate::gpd::decode_model(&received, &self.model.param_shapes())?;
            for c in &mut self.clients {
                c.models.student = params.clone();
            }
            down_each = bytes.len();
            transmitted += stats.transmitted * cfg.n_clients;
            full += stats.full * cfg.n_clients;
            debug!("round {round}: broadcast {} bytes to {} clients", bytes.len(), cfg.n_clients);
        }

        let this = &*self;
        let score = |c: &ClientState| evaluate(&this.model, this.eval_params(c.id), &c.x_test, &c.y_test);
        let accs = if cfg.parallel {
            self.clients.par_iter().map(score).collect::<Result<Vec<f64>>>()?
        } else {
            self.clients.iter().map(score).collect::<Result<Vec<f64>>>()?
        };
        let weights: Vec<f64> = self.clients.iter().map(|c| c.n_train() as f64).collect();
        let total_w: f64 = weights.iter().sum();
        let weighted_acc = accs.iter().zip(&weights).map(|(a, w)| a * w).sum::<f64>() / total_w;

        let clients = (0..cfg.n_clients)
            .map(|k| ClientMetrics {
                client_id: k,
                losses: losses[k],
                test_acc: accs[k],
                upload_bytes: up_bytes[k],
                download_bytes: down_each,
                upload_ratio: up_ratio[k],
            })
            .collect();
        let metrics = RoundMetrics {
            round,
            sampled,
            clients,
            weighted_acc,
            upload_bytes: up_bytes.iter().sum(),
            download_bytes: down_each * cfg.n_clients,
            transmitted,
            full,
            comm_ratio: if full == 0 { 0.0 } else { transmitted as f64 / full as f64 },
        };
        info!("{} round {round}: weighted acc {:.4}, comm ratio {:.4}", cfg.mode, weighted_acc, metrics.comm_ratio);
        self.next_round += 1;
        Ok(metrics)
    }
}

/// Runs every round of a seeded experiment.
pub fn run_experiment(cfg: &RunConfig) -> Result<Vec<RoundMetrics>> {
    let mut sim = Simulation::new(cfg)?;
    (0..cfg.rounds).map(|_| sim.run_round()).collect()
}

#[cfg(test)]
mod tests;
