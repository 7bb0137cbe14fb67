//! Round-based federated transfer learning between one server and N clients.
//!
//! The server first trains a fresh Combo-NN on its own data. Each round then
//! deploys value copies of the global weights to every client, lets each
//! client produce new weights from its local share, and replaces the global
//! weights with the sample-count weighted average of the client results.
//!
//! Two client behaviours are supported:
//!
//! * [`RoundMode::FedSgd`]: one full-batch gradient of the client's mean loss
//!   at the global weights, applied as a single SGD step.
//! * [`RoundMode::FedAvg`]: `local_epochs` of seeded mini-batch SGD starting
//!   from the deployed weights.
//!
//! Client work is independent and may run on the rayon pool; results are
//! always combined in client order, so serial and parallel runs are
//! bit-identical.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset_io::Dataset;
use crate::metrics::{self, MetricsError, MetricsReport};
use crate::neuralnet::{
    self, Batch, ComboNetConfig, GradientSet, ModelWeights, NetError, TrainParams,
};
use crate::seed;

#[derive(Debug, Error, PartialEq)]
pub enum FederationError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("client {0} has no local data")]
    EmptyClientData(usize),
    #[error("server has no bootstrap data")]
    EmptyServerData,
    #[error("client list does not match the server registry")]
    RegistryMismatch,
    #[error("weighted average needs at least one entry")]
    NoEntries,
    #[error("weighted average entry {0} has a zero sample count")]
    ZeroSampleCount(usize),
    #[error("invalid round config: {0}")]
    InvalidConfig(String),
}

pub type Result<T> = std::result::Result<T, FederationError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum RoundMode {
    FedSgd,
    #[default]
    FedAvg,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoundConfig {
    pub mode: RoundMode,
    pub learning_rate: f64,
    /// Local epochs per round in fedavg mode; ignored by fedsgd.
    pub local_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Run client work on the rayon pool.
    pub parallel: bool,
}

impl Default for RoundConfig {
    fn default() -> Self {
        Self {
            mode: RoundMode::FedAvg,
            learning_rate: 0.05,
            local_epochs: 5,
            batch_size: 32,
            seed: 0,
            parallel: true,
        }
    }
}

impl RoundConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(FederationError::InvalidConfig(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.mode == RoundMode::FedAvg && self.batch_size == 0 {
            return Err(FederationError::InvalidConfig(
                "batch_size must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientState {
    pub client_id: usize,
    pub local_data: Dataset,
    pub current_weights: ModelWeights,
}

impl ClientState {
    pub fn n_samples(&self) -> usize {
        self.local_data.n_samples()
    }
}

/// One client per share, ids `0..N`, all starting from `initial`.
pub fn make_clients(shares: Vec<Dataset>, initial: &ModelWeights) -> Vec<ClientState> {
    shares
        .into_iter()
        .enumerate()
        .map(|(client_id, local_data)| ClientState {
            client_id,
            local_data,
            current_weights: initial.clone(),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServerState {
    pub global_weights: ModelWeights,
    pub round: usize,
    pub registry: Vec<usize>,
    pub total_samples: usize,
}

impl ServerState {
    pub fn register_clients(&mut self, clients: &[ClientState]) {
        self.registry = clients.iter().map(|c| c.client_id).collect();
        self.total_samples = clients.iter().map(ClientState::n_samples).sum();
    }
}

#[derive(Debug, Clone)]
pub struct BootstrapOutcome {
    pub server: ServerState,
    pub epoch_losses: Vec<f64>,
}

/// Initialises a fresh network and trains it on the server's own data.
pub fn bootstrap_server(
    config: &ComboNetConfig,
    server_data: &Dataset,
    params: &TrainParams,
) -> Result<BootstrapOutcome> {
    if server_data.is_empty() {
        return Err(FederationError::EmptyServerData);
    }
    let fresh = neuralnet::init_model(config)?;
    let trained = neuralnet::train_epochs(config, &fresh, server_data, params)?;
    Ok(BootstrapOutcome {
        server: ServerState {
            global_weights: trained.weights,
            round: 0,
            registry: Vec::new(),
            total_samples: 0,
        },
        epoch_losses: trained.epoch_losses,
    })
}

/// Hands every registered client its own copy of the global weights.
pub fn deploy_to_clients(
    server: &ServerState,
    clients: &[ClientState],
) -> Result<Vec<ClientState>> {
    if clients.len() != server.registry.len()
        || clients
            .iter()
            .zip(&server.registry)
            .any(|(c, &id)| c.client_id != id)
    {
        return Err(FederationError::RegistryMismatch);
    }
    clients
        .iter()
        .map(|c| {
            c.current_weights.check_congruent(&server.global_weights)?;
            Ok(ClientState {
                current_weights: server.global_weights.clone(),
                ..c.clone()
            })
        })
        .collect()
}

fn non_empty(client: &ClientState) -> Result<()> {
    if client.local_data.is_empty() {
        Err(FederationError::EmptyClientData(client.client_id))
    } else {
        Ok(())
    }
}

/// Mean loss over all of the client's samples at its current weights.
pub fn client_local_loss(config: &ComboNetConfig, client: &ClientState) -> Result<f64> {
    non_empty(client)?;
    Ok(neuralnet::evaluate_loss(
        config,
        &client.current_weights,
        Batch::from_dataset(&client.local_data),
    )?)
}

/// Full-batch mean gradient of the client's loss at its current weights.
pub fn client_gradient(config: &ComboNetConfig, client: &ClientState) -> Result<GradientSet> {
    non_empty(client)?;
    let (_, grads) = neuralnet::loss_and_gradient(
        config,
        &client.current_weights,
        Batch::from_dataset(&client.local_data),
    )?;
    Ok(grads)
}

/// One gradient step from the server weights with a client's gradient.
pub fn client_sgd_update(
    server_weights: &ModelWeights,
    grad: &GradientSet,
    lr: f64,
) -> Result<ModelWeights> {
    Ok(neuralnet::sgd_step(server_weights, grad, lr)?)
}

/// Shuffle seed for a client's local training in a given round.
pub fn client_stream_seed(global_seed: u64, client_id: usize, round: usize) -> u64 {
    seed::derive(
        global_seed,
        &[seed::stream::CLIENT_TRAIN, client_id as u64, round as u64],
    )
}

/// Retrains the deployed weights on the client's local data.
pub fn client_local_train(
    config: &ComboNetConfig,
    client: &ClientState,
    cfg: &RoundConfig,
    round: usize,
) -> Result<ModelWeights> {
    non_empty(client)?;
    let params = TrainParams {
        epochs: cfg.local_epochs,
        batch_size: cfg.batch_size,
        learning_rate: cfg.learning_rate,
        shuffle_seed: client_stream_seed(cfg.seed, client.client_id, round),
    };
    Ok(
        neuralnet::train_epochs(config, &client.current_weights, &client.local_data, &params)?
            .weights,
    )
}

#[derive(Debug, Clone, Copy)]
pub struct WeightedEntry<'a> {
    pub weights: &'a ModelWeights,
    pub n_samples: usize,
}

/// Per-parameter `sum_i (n_i / n) * w_i`, accumulated in entry order.
pub fn federated_weighted_average(entries: &[WeightedEntry<'_>]) -> Result<ModelWeights> {
    let first = entries.first().ok_or(FederationError::NoEntries)?;
    if let Some(i) = entries.iter().position(|e| e.n_samples == 0) {
        return Err(FederationError::ZeroSampleCount(i));
    }
    for e in &entries[1..] {
        first.weights.check_congruent(e.weights)?;
    }
    let n: usize = entries.iter().map(|e| e.n_samples).sum();
    let mut avg = first.weights.clone();
    avg.values_mut().for_each(|v| *v = 0.0);
    for e in entries {
        let coef = e.n_samples as f64 / n as f64;
        for (a, &w) in avg.values_mut().zip(e.weights.values()) {
            *a += coef * w;
        }
    }
    Ok(avg)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Bootstrap,
    Round,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientLog {
    pub client_id: usize,
    pub n_samples: usize,
    /// Mean local loss at the deployed global weights.
    pub loss: f64,
    /// Accuracy of the client's updated model on its own data.
    pub local_accuracy: f64,
    /// Accuracy of the client's updated model on the held-out data.
    pub eval_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundLog {
    pub phase: Phase,
    pub round: usize,
    pub clients: Vec<ClientLog>,
    pub server: MetricsReport,
    /// Max-abs change of the global weights in this round.
    pub weight_delta: Option<f64>,
}

pub fn evaluate_weights(
    config: &ComboNetConfig,
    weights: &ModelWeights,
    data: &Dataset,
) -> Result<MetricsReport> {
    let predicted = neuralnet::predict_classes(config, weights, data.features())?;
    Ok(metrics::evaluate(
        data.labels(),
        &predicted,
        config.n_classes,
    )?)
}

fn accuracy(config: &ComboNetConfig, weights: &ModelWeights, data: &Dataset) -> Result<f64> {
    let predicted = neuralnet::predict_classes(config, weights, data.features())?;
    let hits = predicted
        .iter()
        .zip(data.labels())
        .filter(|(p, t)| p == t)
        .count();
    Ok(hits as f64 / data.n_samples().max(1) as f64)
}

#[derive(Debug, Clone)]
pub struct RoundOutcome {
    pub server: ServerState,
    /// Clients holding their own post-round local models.
    pub clients: Vec<ClientState>,
    pub log: RoundLog,
}

fn client_work(
    config: &ComboNetConfig,
    client: &ClientState,
    global: &ModelWeights,
    cfg: &RoundConfig,
    round: usize,
    eval_data: &Dataset,
) -> Result<(ModelWeights, ClientLog)> {
    let loss = client_local_loss(config, client)?;
    let weights = match cfg.mode {
        RoundMode::FedSgd => {
            let g = client_gradient(config, client)?;
            client_sgd_update(global, &g, cfg.learning_rate)?
        }
        RoundMode::FedAvg => client_local_train(config, client, cfg, round)?,
    };
    let log = ClientLog {
        client_id: client.client_id,
        n_samples: client.n_samples(),
        loss,
        local_accuracy: accuracy(config, &weights, &client.local_data)?,
        eval_accuracy: accuracy(config, &weights, eval_data)?,
    };
    Ok((weights, log))
}

/// Deploy, local work, weighted average, evaluate. The inputs are never
/// modified, so a failed round leaves the caller's state untouched.
pub fn run_round(
    config: &ComboNetConfig,
    server: &ServerState,
    clients: &[ClientState],
    cfg: &RoundConfig,
    eval_data: &Dataset,
) -> Result<RoundOutcome> {
    cfg.validate()?;
    let deployed = deploy_to_clients(server, clients)?;
    let round = server.round + 1;
    let global = &server.global_weights;
    let work = |c: &ClientState| client_work(config, c, global, cfg, round, eval_data);
    let results: Vec<(ModelWeights, ClientLog)> = if cfg.parallel {
        deployed.par_iter().map(work).collect::<Result<_>>()?
    } else {
        deployed.iter().map(work).collect::<Result<_>>()?
    };

    let entries: Vec<WeightedEntry<'_>> = results
        .iter()
        .map(|(w, log)| WeightedEntry {
            weights: w,
            n_samples: log.n_samples,
        })
        .collect();
    let averaged = federated_weighted_average(&entries)?;
    let weight_delta = averaged.max_abs_diff(global)?;
    let report = evaluate_weights(config, &averaged, eval_data)?;

    let (local_models, client_logs): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    let clients = deployed
        .into_iter()
        .zip(local_models)
        .map(|(c, w)| ClientState {
            current_weights: w,
            ..c
        })
        .collect();
    Ok(RoundOutcome {
        server: ServerState {
            global_weights: averaged,
            round,
            ..server.clone()
        },
        clients,
        log: RoundLog {
            phase: Phase::Round,
            round,
            clients: client_logs,
            server: report,
            weight_delta: Some(weight_delta),
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub net: ComboNetConfig,
    pub bootstrap: TrainParams,
    pub round: RoundConfig,
    pub rounds: usize,
    /// Stop once a round moves no global parameter by more than this.
    pub tolerance: f64,
}

#[derive(Debug, Clone)]
pub struct SimulationOutcome {
    /// Bootstrap evaluation first, then one entry per completed round.
    pub logs: Vec<RoundLog>,
    pub bootstrap_losses: Vec<f64>,
    pub final_weights: ModelWeights,
    pub final_clients: Vec<ClientState>,
}

/// Bootstrap on the server data, then up to `rounds` rounds with the given
/// client shares, evaluating the global model on `eval_data` throughout.
pub fn run_simulation(
    cfg: &SimulationConfig,
    server_data: &Dataset,
    client_shares: Vec<Dataset>,
    eval_data: &Dataset,
) -> Result<SimulationOutcome> {
    cfg.round.validate()?;
    let boot = bootstrap_server(&cfg.net, server_data, &cfg.bootstrap)?;
    let mut server = boot.server;
    let mut clients = make_clients(client_shares, &server.global_weights);
    server.register_clients(&clients);

    let mut logs = vec![RoundLog {
        phase: Phase::Bootstrap,
        round: 0,
        clients: Vec::new(),
        server: evaluate_weights(&cfg.net, &server.global_weights, eval_data)?,
        weight_delta: None,
    }];
    for _ in 0..cfg.rounds {
        let out = run_round(&cfg.net, &server, &clients, &cfg.round, eval_data)?;
        let delta = out.log.weight_delta.unwrap_or(f64::INFINITY);
        log::info!(
            "round {}: server {} (delta {:.3e})",
            out.log.round,
            out.log.server.percent_summary(),
            delta
        );
        server = out.server;
        clients = out.clients;
        logs.push(out.log);
        if delta < cfg.tolerance {
            break;
        }
    }
    Ok(SimulationOutcome {
        logs,
        bootstrap_losses: boot.epoch_losses,
        final_weights: server.global_weights,
        final_clients: clients,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset_io::{gaussian_blobs, BlobSpec};
    use crate::neuralnet::{init_model, Pooling};

    fn net(d: usize, c: usize) -> ComboNetConfig {
        ComboNetConfig {
            input_dim: d,
            stem_channels: 3,
            residual_blocks: 1,
            kernel_size: 3,
            dense_hidden: vec![6],
            n_classes: c,
            pooling: Pooling::Flatten,
            init_seed: 2,
        }
    }

    fn data(n: usize, seed: u64) -> Dataset {
        gaussian_blobs(&BlobSpec {
            n_samples: n,
            n_features: 4,
            n_classes: 3,
            center_box: 2.0,
            cluster_std: 0.5,
            seed,
        })
        .unwrap()
    }

    fn server_with(weights: ModelWeights, clients: &[ClientState]) -> ServerState {
        let mut s = ServerState {
            global_weights: weights,
            round: 0,
            registry: Vec::new(),
            total_samples: 0,
        };
        s.register_clients(clients);
        s
    }

    fn scalar(v: f64) -> ModelWeights {
        ModelWeights {
            fingerprint: 1,
            blocks: vec![neuralnet::ParamBlock {
                layer_id: "w".into(),
                kind: neuralnet::LayerKind::Dense,
                shape: vec![1, 1],
                weight: vec![v],
                bias: vec![],
            }],
        }
    }

    #[test]
    fn weighted_average_scalar_case() {
        let (a, b) = (scalar(0.0), scalar(1.0));
        let avg = federated_weighted_average(&[
            WeightedEntry {
                weights: &a,
                n_samples: 1,
            },
            WeightedEntry {
                weights: &b,
                n_samples: 3,
            },
        ])
        .unwrap();
        assert_eq!(avg.blocks[0].weight[0], 0.75);
    }

    #[test]
    fn weighted_average_edge_cases() {
        let a = scalar(0.3);
        let single = federated_weighted_average(&[WeightedEntry {
            weights: &a,
            n_samples: 7,
        }])
        .unwrap();
        assert_eq!(single, a);
        assert_eq!(
            federated_weighted_average(&[]),
            Err(FederationError::NoEntries)
        );
        assert_eq!(
            federated_weighted_average(&[WeightedEntry {
                weights: &a,
                n_samples: 0
            }]),
            Err(FederationError::ZeroSampleCount(0))
        );
        let c = net(4, 3);
        let w = init_model(&c).unwrap();
        assert!(matches!(
            federated_weighted_average(&[
                WeightedEntry {
                    weights: &a,
                    n_samples: 1
                },
                WeightedEntry {
                    weights: &w,
                    n_samples: 1
                },
            ]),
            Err(FederationError::Net(_))
        ));
    }

    #[test]
    fn deploy_copies_global_weights() {
        let c = net(4, 3);
        let w = init_model(&c).unwrap();
        let clients = make_clients(
            vec![data(30, 1), data(30, 2)],
            &init_model(&ComboNetConfig {
                init_seed: 9,
                ..c.clone()
            })
            .unwrap(),
        );
        let server = server_with(w.clone(), &clients);
        let mut deployed = deploy_to_clients(&server, &clients).unwrap();
        let bytes: Vec<Vec<u8>> = deployed
            .iter()
            .map(|c| neuralnet::serialize_weights(&c.current_weights))
            .collect();
        assert_eq!(bytes[0], neuralnet::serialize_weights(&w));
        assert_eq!(bytes[0], bytes[1]);

        deployed[0].current_weights.blocks[0].weight[0] += 1.0;
        assert_eq!(deployed[1].current_weights, w);
        assert_eq!(server.global_weights, w);

        let empty = server_with(w.clone(), &[]);
        assert!(deploy_to_clients(&empty, &[]).unwrap().is_empty());
        assert_eq!(
            deploy_to_clients(&empty, &clients),
            Err(FederationError::RegistryMismatch)
        );
    }

    #[test]
    fn zero_model_loss_is_ln_c() {
        let c = net(4, 3);
        let mut w = init_model(&c).unwrap();
        w.values_mut().for_each(|v| *v = 0.0);
        let client = &make_clients(vec![data(21, 4)], &w)[0];
        let loss = client_local_loss(&c, client).unwrap();
        assert!((loss - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn local_loss_recombines_from_halves() {
        let c = net(4, 3);
        let w = init_model(&c).unwrap();
        let d = data(30, 5);
        let first: Vec<usize> = (0..12).collect();
        let second: Vec<usize> = (12..30).collect();
        let whole = client_local_loss(&c, &make_clients(vec![d.clone()], &w)[0]).unwrap();
        let a = client_local_loss(&c, &make_clients(vec![d.subset(&first)], &w)[0]).unwrap();
        let b = client_local_loss(&c, &make_clients(vec![d.subset(&second)], &w)[0]).unwrap();
        assert!((whole - (12.0 * a + 18.0 * b) / 30.0).abs() < 1e-10);
    }

    #[test]
    fn symmetric_instance_is_stationary() {
        let c = net(4, 3);
        let mut w = init_model(&c).unwrap();
        w.values_mut().for_each(|v| *v = 0.0);
        let d = Dataset::new(
            vec![0.0; 4 * 6],
            4,
            vec![0, 1, 2, 0, 1, 2],
            (0..4)
                .map(|j| crate::dataset_io::FeatureMeta::numeric(format!("f{j}")))
                .collect(),
            vec!["a".into(), "b".into(), "c".into()],
        )
        .unwrap();
        let g = client_gradient(&c, &make_clients(vec![d], &w)[0]).unwrap();
        assert!(g.values().all(|v| v.abs() < 1e-10));
        assert_eq!(g.sample_count, 6);
    }

    #[test]
    fn half_steps_compose() {
        let c = net(4, 3);
        let w = init_model(&c).unwrap();
        let client = &make_clients(vec![data(20, 6)], &w)[0];
        let g = client_gradient(&c, client).unwrap();
        let once = client_sgd_update(&w, &g, 0.2).unwrap();
        let twice = client_sgd_update(&client_sgd_update(&w, &g, 0.1).unwrap(), &g, 0.1).unwrap();
        assert!(once.max_abs_diff(&twice).unwrap() < 1e-12);
        assert_eq!(once, neuralnet::sgd_step(&w, &g, 0.2).unwrap());
    }

    #[test]
    fn local_training_zero_epochs_and_determinism() {
        let c = net(4, 3);
        let w = init_model(&c).unwrap();
        let client = &make_clients(vec![data(40, 7)], &w)[0];
        let mut cfg = RoundConfig {
            local_epochs: 0,
            ..RoundConfig::default()
        };
        assert_eq!(client_local_train(&c, client, &cfg, 1).unwrap(), w);
        cfg.local_epochs = 3;
        let a = client_local_train(&c, client, &cfg, 1).unwrap();
        assert_eq!(a, client_local_train(&c, client, &cfg, 1).unwrap());
        assert_ne!(a, client_local_train(&c, client, &cfg, 2).unwrap());
        let before = client_local_loss(&c, client).unwrap();
        let trained = ClientState {
            current_weights: a,
            ..client.clone()
        };
        assert!(client_local_loss(&c, &trained).unwrap() <= before);
    }

    #[test]
    fn empty_client_rejected() {
        let c = net(4, 3);
        let w = init_model(&c).unwrap();
        let d = data(10, 1);
        let client = &make_clients(vec![d.subset(&[])], &w)[0];
        assert_eq!(
            client_local_loss(&c, client),
            Err(FederationError::EmptyClientData(0))
        );
        assert_eq!(
            client_gradient(&c, client).unwrap_err(),
            FederationError::EmptyClientData(0)
        );
    }

    #[test]
    fn round_increments_and_failure_is_atomic() {
        let c = net(4, 3);
        let w = init_model(&c).unwrap();
        let clients = make_clients(vec![data(30, 1), data(30, 2)], &w);
        let server = server_with(w.clone(), &clients);
        let eval = data(30, 3);
        let cfg = RoundConfig {
            local_epochs: 1,
            ..RoundConfig::default()
        };
        let out = run_round(&c, &server, &clients, &cfg, &eval).unwrap();
        assert_eq!(out.server.round, 1);
        assert_eq!(out.log.clients.len(), 2);

        let mut broken = clients.clone();
        broken[1].local_data = broken[1].local_data.subset(&[]);
        let before = server.clone();
        assert!(run_round(&c, &server, &broken, &cfg, &eval).is_err());
        assert_eq!(server, before);
    }

    #[test]
    fn simulation_without_rounds_logs_bootstrap_only() {
        let c = net(4, 3);
        let cfg = SimulationConfig {
            net: c.clone(),
            bootstrap: TrainParams {
                epochs: 0,
                ..TrainParams::default()
            },
            round: RoundConfig::default(),
            rounds: 0,
            tolerance: 1e-6,
        };
        let out = run_simulation(&cfg, &data(20, 1), vec![data(20, 2)], &data(20, 3)).unwrap();
        assert_eq!(out.logs.len(), 1);
        assert_eq!(out.logs[0].phase, Phase::Bootstrap);
        assert_eq!(out.final_weights, init_model(&c).unwrap());
    }
}
