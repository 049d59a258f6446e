//! Client updates, server aggregation, and the round loop.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{record_round, MetricsRecord, RoundEval};
use crate::model::{
    backward, forward, sgd_step, softmax_cross_entropy, ActivationQuant, ForwardOptions, LrSchedule, Model,
    ModelSpec, SgdOptions, Weights,
};
use crate::rotation::{optimize_rotation, RotationPair, DEFAULT_ROTATION_ITERS};
use crate::runtime::{materialize_binary, post_training_binarize, PtbScaling, XnorModel};
use crate::surrogate::{adjust_with_coefficients, fuse_weights, MixParams, SurrogateSchedule, T_MAX, T_MIN};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    FedBnn,
    FedAvg,
}

/// Where the server's `(α, β)` for the auxiliary model come from.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ServerMixRule {
    /// Sample-weighted mean of the participating clients' values.
    ClientMean,
    Fixed { alpha: f64, beta: f64 },
}

/// How the auxiliary evaluation model is formed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuxAggregation {
    /// Aggregate first, then mix at the server.
    Server,
    /// Mix per client, then aggregate.
    PerClient,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FedConfig {
    #[serde(skip)]
    pub method: Method,
    pub rounds: usize,
    pub clients_per_round: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub lr: LrSchedule,
    pub rotation_iters: usize,
    /// Base-10 exponents bounding the surrogate sharpness schedule.
    pub t_min: f64,
    pub t_max: f64,
    pub mix_init: MixParams,
    pub act_quant: ActivationQuant,
    pub server_mix: ServerMixRule,
    #[serde(skip)]
    pub aux_aggregation: AuxAggregation,
    /// Fixes `β = 1` and `λ = 1`: no alignment term, no fusion.
    #[serde(skip)]
    pub ablate_beta_lambda: bool,
    /// Keep each client's mixing scalars between the rounds it joins.
    pub stateful_clients: bool,
    pub ptb_scaling: PtbScaling,
    pub eval_batch_size: usize,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for FedConfig {
    fn default() -> Self {
        Self {
            method: Method::FedBnn,
            rounds: 500,
            clients_per_round: 10,
            local_epochs: 5,
            batch_size: 64,
            lr: LrSchedule::default(),
            rotation_iters: DEFAULT_ROTATION_ITERS,
            t_min: T_MIN,
            t_max: T_MAX,
            mix_init: MixParams::default(),
            act_quant: ActivationQuant::Surrogate,
            server_mix: ServerMixRule::ClientMean,
            aux_aggregation: AuxAggregation::Server,
            ablate_beta_lambda: false,
            stateful_clients: false,
            ptb_scaling: PtbScaling::L2Norm,
            eval_batch_size: 256,
            seed: 0,
        }
    }
}

impl FedConfig {
    pub fn validate(&self, n_clients: usize) -> Result<()> {
        let check = |ok: bool, key: &str, reason: String| if ok { Ok(()) } else { Err(Error::config(key, reason)) };
        check(self.rounds >= 1, "federation.rounds", "must be at least 1".into())?;
        check(
            (1..=n_clients).contains(&self.clients_per_round),
            "federation.clients_per_round",
            format!("must be in 1..={n_clients}"),
        )?;
        check(self.batch_size >= 1, "federation.batch_size", "must be at least 1".into())?;
        check(self.eval_batch_size >= 1, "federation.eval_batch_size", "must be at least 1".into())?;
        check(
            self.lr.base > 0.0 && self.lr.base.is_finite(),
            "federation.lr.base",
            "must be positive".into(),
        )?;
        check(self.local_epochs >= 1, "federation.local_epochs", "must be at least 1".into())?;
        check(self.rotation_iters >= 1, "federation.rotation_iters", "must be at least 1".into())?;
        check(
            self.t_min.is_finite() && self.t_max.is_finite() && self.t_min <= self.t_max,
            "federation.t_min",
            "surrogate exponents must be finite with t_min <= t_max".into(),
        )?;
        if let ServerMixRule::Fixed { alpha, beta } = self.server_mix {
            check(
                (0.0..=1.0).contains(&alpha) && (0.0..=1.0).contains(&beta),
                "federation.server_mix",
                "alpha and beta must lie in [0, 1]".into(),
            )?;
        }
        Ok(())
    }

    fn lambda_one(&self) -> bool {
        self.method == Method::FedBnn && self.ablate_beta_lambda
    }

    /// Client-side mixing scalars at the start of a round.
    fn initial_mix(&self) -> MixParams {
        let mut m = self.mix_init;
        if self.ablate_beta_lambda {
            m.gamma = std::f64::consts::FRAC_PI_2;
        }
        m
    }
}

/// SplitMix64 finalizer, used to derive independent stream seeds.
fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for the stream identified by `parts` under `base`.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(splitmix(base), |acc, &p| splitmix(acc ^ splitmix(p)))
}

const STREAM_INIT: u64 = 1;
const STREAM_SAMPLE: u64 = 2;
const STREAM_CLIENT: u64 = 3;

/// Everything a client sends back after local training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientUpdatePacket {
    pub client: usize,
    pub w: Weights,
    /// One entry per trainable layer; `Some` for binarized layers.
    pub rot: Vec<Option<RotationPair>>,
    pub mix: Vec<MixParams>,
    pub n_samples: usize,
    pub train_loss: f64,
}

/// A client's view of the data.
#[derive(Clone, Copy, Debug)]
pub struct ClientData<'a> {
    pub data: &'a Dataset,
    pub indices: &'a [usize],
}

/// Local training of one client from the broadcast weights.
///
/// Returns `None` for a client without data.
#[allow(clippy::too_many_arguments)]
pub fn client_update(
    k: usize,
    spec: &ModelSpec,
    client: ClientData,
    w_server: &Weights,
    mix: Option<&[MixParams]>,
    round: usize,
    cfg: &FedConfig,
) -> Result<Option<ClientUpdatePacket>> {
    if client.indices.is_empty() {
        return Ok(None);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[STREAM_CLIENT, round as u64, k as u64]));
    // The template's initial values are overwritten by the broadcast.
    let mut model = Model::init(spec.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
    model.load_weights(w_server)?;
    model.reset_client_state(cfg.initial_mix());
    if let Some(mix) = mix {
        for (l, m) in model.layers.iter_mut().zip(mix) {
            l.mix = *m;
        }
    }
    let fedbnn = cfg.method == Method::FedBnn;
    let lambda_one = cfg.lambda_one();
    let schedule = SurrogateSchedule {
        t_min: cfg.t_min,
        t_max: cfg.t_max,
        ..SurrogateSchedule::new(cfg.rounds, cfg.local_epochs.max(1))
    };
    let mut sgd = SgdOptions::new(cfg.lr.lr(round));
    sgd.clip_binarized = fedbnn;
    sgd.freeze_omega = lambda_one;
    sgd.freeze_gamma = fedbnn && cfg.ablate_beta_lambda;

    let mut order = client.indices.to_vec();
    let mut epoch_loss = 0.0;
    for epoch in 0..cfg.local_epochs {
        let tk = schedule.tk(round, epoch)?;
        if fedbnn {
            for (j, layer) in model.layers.iter_mut().enumerate() {
                let Some(rot) = &layer.rot else { continue };
                let fused = if lambda_one {
                    layer.w.clone()
                } else {
                    fuse_weights(&layer.w, &w_server.layers[j].w, layer.mix.omega)?
                };
                let wbar = rot.shape().matricize(&fused)?;
                layer.rot = Some(optimize_rotation(&wbar, rot, cfg.rotation_iters)?.rot);
            }
            model.version += 1;
        }
        order.shuffle(&mut rng);
        let (mut loss_sum, mut seen) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let (x, y) = client.data.batch(chunk);
            let mut opts = if fedbnn {
                ForwardOptions::fedbnn(w_server, tk, true)
            } else {
                ForwardOptions::real(true)
            };
            opts.act_quant = cfg.act_quant;
            opts.lambda_one = lambda_one;
            let (logits, cache) = forward(&model, &x, &opts)?;
            let (loss, grad) = softmax_cross_entropy(&logits, &y)?;
            let grads = backward(&model, &cache, &grad, &opts)?;
            sgd_step(&mut model, &grads, &sgd)?;
            loss_sum += loss * chunk.len() as f64;
            seen += chunk.len();
        }
        epoch_loss = loss_sum / seen as f64;
    }
    Ok(Some(ClientUpdatePacket {
        client: k,
        w: model.weights(),
        rot: model.layers.iter().map(|l| l.rot.clone()).collect(),
        mix: model.layers.iter().map(|l| l.mix).collect(),
        n_samples: client.indices.len(),
        train_loss: epoch_loss,
    }))
}

fn weights_of(packets: &[ClientUpdatePacket]) -> Result<(usize, Vec<f64>)> {
    let total: usize = packets.iter().map(|p| p.n_samples).sum();
    if packets.is_empty() || total == 0 {
        return Err(Error::Protocol("aggregation needs at least one non-empty packet".into()));
    }
    Ok((total, packets.iter().map(|p| p.n_samples as f64 / total as f64).collect()))
}

/// `Σ (N_k / N) w_k` over every tensor, batch-norm state included.
pub fn aggregate_real(packets: &[ClientUpdatePacket]) -> Result<Weights> {
    let (_, p) = weights_of(packets)?;
    let terms: Vec<(&Weights, f64)> = packets.iter().zip(&p).map(|(pk, &c)| (&pk.w, c)).collect();
    Weights::linear_combination(&terms)
}

fn rotation_of(packet: &ClientUpdatePacket, j: usize) -> Result<&RotationPair> {
    packet
        .rot
        .get(j)
        .and_then(Option::as_ref)
        .ok_or_else(|| Error::Protocol(format!("client {} sent no rotation for layer {j}", packet.client)))
}

/// Like [`aggregate_real`], but binarized layers are averaged in each
/// client's rotated space, `Σ (N_k / N) R_kᵀ w_k`.
pub fn aggregate_rotated(packets: &[ClientUpdatePacket], binarized: &[bool]) -> Result<Weights> {
    let (_, p) = weights_of(packets)?;
    let mut out = aggregate_real(packets)?;
    for (j, _) in binarized.iter().enumerate().filter(|(_, b)| **b) {
        let mut acc = Tensor::zeros(out.layers[j].w.shape());
        for (pk, &c) in packets.iter().zip(&p) {
            acc.axpy(c, &rotation_of(pk, j)?.rotate_flat(&pk.w.layers[j].w)?)?;
        }
        out.layers[j].w = acc;
    }
    Ok(out)
}

/// `w~ = w_next + αβ (w_rot − w_next) + α(1−β)(w_prev − w_next)` on binarized
/// layers; other layers and batch-norm state come from `w_next`.
pub fn server_auxiliary(
    w_next: &Weights,
    w_rot_next: &Weights,
    w_prev: &Weights,
    server_mix: &[(f64, f64)],
    binarized: &[bool],
) -> Result<Weights> {
    let mut out = w_next.clone();
    for (j, _) in binarized.iter().enumerate().filter(|(_, b)| **b) {
        let (a, b) = server_mix[j];
        out.layers[j].w = adjust_with_coefficients(
            &w_next.layers[j].w,
            &w_rot_next.layers[j].w,
            &w_prev.layers[j].w,
            a,
            b,
        )?;
    }
    Ok(out)
}

/// Per-client `w~_k` from each client's own `(α_k, β_k)` and rotation,
/// then the sample-weighted mean.
pub fn aggregate_client_auxiliary(
    packets: &[ClientUpdatePacket],
    w_prev: &Weights,
    binarized: &[bool],
) -> Result<Weights> {
    let (_, p) = weights_of(packets)?;
    let mut out = aggregate_real(packets)?;
    for (j, _) in binarized.iter().enumerate().filter(|(_, b)| **b) {
        let mut acc = Tensor::zeros(out.layers[j].w.shape());
        for (pk, &c) in packets.iter().zip(&p) {
            let w = &pk.w.layers[j].w;
            let rotated = rotation_of(pk, j)?.rotate_flat(w)?;
            let m = &pk.mix[j];
            let tilde = adjust_with_coefficients(w, &rotated, &w_prev.layers[j].w, m.alpha(), m.beta())?;
            acc.axpy(c, &tilde)?;
        }
        out.layers[j].w = acc;
    }
    Ok(out)
}

/// Per-layer server `(α, β)`: sample-weighted client means, or fixed values.
pub fn server_mix(packets: &[ClientUpdatePacket], rule: ServerMixRule, n_layers: usize) -> Result<Vec<(f64, f64)>> {
    match rule {
        ServerMixRule::Fixed { alpha, beta } => Ok(vec![(alpha, beta); n_layers]),
        ServerMixRule::ClientMean => {
            let (_, p) = weights_of(packets)?;
            Ok((0..n_layers)
                .map(|j| {
                    packets.iter().zip(&p).fold((0.0, 0.0), |(a, b), (pk, &c)| {
                        (a + c * pk.mix[j].alpha(), b + c * pk.mix[j].beta())
                    })
                })
                .collect())
        }
    }
}

/// `k` distinct clients out of `n`, in ascending order.
pub fn sample_clients(n: usize, k: usize, seed: u64, round: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[STREAM_SAMPLE, round as u64]));
    let mut chosen = rand::seq::index::sample(&mut rng, n, k.min(n)).into_vec();
    chosen.sort_unstable();
    chosen
}

/// `(accuracy, mean loss)` over a dataset.
pub fn evaluate(model: &Model, ds: &Dataset, opts: &ForwardOptions, batch: usize) -> Result<(f64, f64)> {
    if ds.is_empty() {
        return Err(Error::Domain("evaluation on an empty dataset".into()));
    }
    let idx: Vec<usize> = (0..ds.len()).collect();
    let (mut correct, mut loss) = (0usize, 0.0);
    for chunk in idx.chunks(batch) {
        let (x, y) = ds.batch(chunk);
        let (logits, _) = forward(model, &x, opts)?;
        correct += crate::model::accuracy(&logits, &y);
        loss += softmax_cross_entropy(&logits, &y)?.0 * chunk.len() as f64;
    }
    Ok((correct as f64 / ds.len() as f64, loss / ds.len() as f64))
}

/// Accuracy of a compiled XNOR model.
pub fn evaluate_xnor(model: &XnorModel, ds: &Dataset, batch: usize) -> Result<f64> {
    let idx: Vec<usize> = (0..ds.len()).collect();
    let mut correct = 0;
    for chunk in idx.chunks(batch) {
        let (x, y) = ds.batch(chunk);
        correct += crate::model::accuracy(&model.forward(&x)?, &y);
    }
    Ok(correct as f64 / ds.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ServerState {
    pub round: usize,
    pub w_broadcast: Weights,
    pub w_prev: Weights,
    /// Best model by binarized validation accuracy (the auxiliary model for FedBNN).
    pub best_binary: Option<Weights>,
    pub best_val_acc: f64,
    pub best_round: usize,
    /// Best real-valued model by real validation accuracy (FedAvg only).
    pub best_real: Option<Weights>,
    pub best_val_acc_real: f64,
    pub best_round_real: usize,
    pub server_mix: Vec<(f64, f64)>,
}

/// The datasets one federation runs on.
#[derive(Clone, Copy, Debug)]
pub struct FedData<'a> {
    pub train: &'a Dataset,
    pub parts: &'a [Vec<usize>],
    pub val: &'a Dataset,
    pub test: &'a Dataset,
}

/// Bookkeeping for broadcast-purity checks.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BroadcastLog {
    /// Weights handed to clients at each round.
    pub received: Vec<Weights>,
    /// `aggregate_real` output of each round.
    pub aggregated: Vec<Weights>,
    /// Evaluation model of each round.
    pub auxiliary: Vec<Weights>,
}

#[derive(Clone, Debug)]
pub struct FedOutcome {
    pub records: Vec<MetricsRecord>,
    pub state: ServerState,
    /// Test accuracy of the selected model through the XNOR runtime.
    pub test_acc_binary: f64,
    /// Float-path test accuracy of the selected model in its deployed form.
    pub test_acc_clean: f64,
    pub purity_checks: usize,
    pub log: Option<BroadcastLog>,
    pub initial: Weights,
    /// The selected binary model, compiled for the XNOR runtime.
    pub deployed: XnorModel,
}

/// The model a client would use for binary inference from `weights`.
fn binary_model(spec: &ModelSpec, weights: &Weights, method: Method, scaling: PtbScaling) -> Result<Model> {
    let mut m = Model::init(spec.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
    m.load_weights(weights)?;
    Ok(match method {
        Method::FedBnn => materialize_binary(&m, None, false)?,
        Method::FedAvg => post_training_binarize(&m, scaling),
    })
}

fn real_model(spec: &ModelSpec, weights: &Weights) -> Result<Model> {
    let mut m = Model::init(spec.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
    m.load_weights(weights)?;
    Ok(m)
}

/// Runs the full round loop and evaluates the selected model on the test set.
///
/// Set `keep_log` to retain every broadcast and aggregate (memory grows with rounds).
pub fn run_federation(
    cfg: &FedConfig,
    spec: &ModelSpec,
    data: FedData,
    keep_log: bool,
    mut on_round: impl FnMut(&MetricsRecord),
) -> Result<FedOutcome> {
    let n_clients = data.parts.len();
    cfg.validate(n_clients)?;
    spec.validate()?;
    if data.train.sample_shape() != spec.input {
        return Err(Error::config(
            "model",
            format!("model input {:?} does not match data {:?}", spec.input, data.train.sample_shape()),
        ));
    }
    let init = Model::init(spec.clone(), &mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[STREAM_INIT])))?;
    let binarized: Vec<bool> = init.layers.iter().map(|l| l.binarize).collect();
    let fedbnn = cfg.method == Method::FedBnn;
    let n_layers = binarized.len();

    let mut state = ServerState {
        round: 0,
        w_broadcast: init.weights(),
        w_prev: init.weights(),
        best_binary: None,
        best_val_acc: f64::NEG_INFINITY,
        best_round: 0,
        best_real: None,
        best_val_acc_real: f64::NEG_INFINITY,
        best_round_real: 0,
        server_mix: vec![(0.0, 0.0); n_layers],
    };
    let mut last_aggregate = state.w_broadcast.clone();
    let mut persisted: BTreeMap<usize, Vec<MixParams>> = BTreeMap::new();
    let mut log = keep_log.then(BroadcastLog::default);
    let mut records = Vec::with_capacity(cfg.rounds);
    let mut purity_checks = 0;

    for round in 0..cfg.rounds {
        // Clients only ever see the previous real aggregate.
        if state.w_broadcast != last_aggregate {
            return Err(Error::Protocol(format!("round {round}: broadcast is not the real aggregate")));
        }
        purity_checks += 1;
        let chosen = sample_clients(n_clients, cfg.clients_per_round, cfg.seed, round);
        let broadcast = &state.w_broadcast;
        let results: Vec<Result<Option<ClientUpdatePacket>>> = chosen
            .par_iter()
            .map(|&k| {
                let warm = if cfg.stateful_clients { persisted.get(&k).map(Vec::as_slice) } else { None };
                client_update(
                    k,
                    spec,
                    ClientData {
                        data: data.train,
                        indices: &data.parts[k],
                    },
                    broadcast,
                    warm,
                    round,
                    cfg,
                )
            })
            .collect();
        let mut packets = Vec::with_capacity(results.len());
        for r in results {
            if let Some(p) = r? {
                packets.push(p);
            }
        }
        if packets.is_empty() {
            return Err(Error::Protocol(format!("round {round}: every sampled client was empty")));
        }
        if cfg.stateful_clients {
            for p in &packets {
                persisted.insert(p.client, p.mix.clone());
            }
        }

        let w_next = aggregate_real(&packets)?;
        let selection = if fedbnn {
            state.server_mix = server_mix(&packets, cfg.server_mix, n_layers)?;
            match cfg.aux_aggregation {
                AuxAggregation::Server => {
                    let w_rot = aggregate_rotated(&packets, &binarized)?;
                    server_auxiliary(&w_next, &w_rot, broadcast, &state.server_mix, &binarized)?
                }
                AuxAggregation::PerClient => aggregate_client_auxiliary(&packets, broadcast, &binarized)?,
            }
        } else {
            w_next.clone()
        };

        let real = real_model(spec, &w_next)?;
        let (val_acc_real, loss_real) = evaluate(&real, data.val, &ForwardOptions::real(false), cfg.eval_batch_size)?;
        let bin = binary_model(spec, &selection, cfg.method, cfg.ptb_scaling)?;
        let (val_acc_binary, loss_binary) = evaluate(&bin, data.val, &ForwardOptions::binary(), cfg.eval_batch_size)?;
        let eval = RoundEval {
            val_acc_real,
            val_acc_binary,
            val_loss: if fedbnn { loss_binary } else { loss_real },
        };

        let total: usize = packets.iter().map(|p| p.n_samples).sum();
        let train_loss = packets.iter().map(|p| p.train_loss * p.n_samples as f64).sum::<f64>() / total as f64;
        let mixes: Vec<(&[MixParams], usize)> = packets.iter().map(|p| (p.mix.as_slice(), p.n_samples)).collect();
        let prior = state.best_binary.is_some().then_some(state.best_val_acc);
        let record = record_round(
            round,
            &mixes,
            if fedbnn { &binarized } else { &[] },
            cfg.lambda_one(),
            &eval,
            train_loss,
            cfg.lr.lr(round),
            prior,
        );
        if record.best_so_far {
            state.best_binary = Some(selection.clone());
            state.best_val_acc = val_acc_binary;
            state.best_round = round;
        }
        if !fedbnn && (state.best_real.is_none() || val_acc_real > state.best_val_acc_real) {
            state.best_real = Some(w_next.clone());
            state.best_val_acc_real = val_acc_real;
            state.best_round_real = round;
        }
        on_round(&record);
        records.push(record);

        if let Some(log) = &mut log {
            log.received.push(broadcast.clone());
            log.aggregated.push(w_next.clone());
            log.auxiliary.push(selection);
        }
        state.w_prev = std::mem::replace(&mut state.w_broadcast, w_next.clone());
        last_aggregate = w_next;
        state.round = round + 1;
    }

    let best = state.best_binary.as_ref().expect("at least one round ran");
    let bin = binary_model(spec, best, cfg.method, cfg.ptb_scaling)?;
    let deployed = XnorModel::compile(&bin)?;
    let test_acc_binary = evaluate_xnor(&deployed, data.test, cfg.eval_batch_size)?;
    records[state.best_round].test_acc_binary = Some(test_acc_binary);
    let test_acc_clean = if fedbnn {
        evaluate(&bin, data.test, &ForwardOptions::binary(), cfg.eval_batch_size)?.0
    } else {
        let real = real_model(spec, state.best_real.as_ref().expect("at least one round ran"))?;
        evaluate(&real, data.test, &ForwardOptions::real(false), cfg.eval_batch_size)?.0
    };
    Ok(FedOutcome {
        records,
        state,
        test_acc_binary,
        test_acc_clean,
        purity_checks,
        log,
        initial: init.weights(),
        deployed,
    })
}
