//! Experiment configuration, data preparation, and run artifacts.
//!
//! A config is a versioned TOML document. Every table is optional and
//! defaults to the FMNIST/CNN4 profile (100 clients, 10 per round, 500
//! rounds, 5 local epochs, batch 64, lr 0.1). Environment variables named
//! `FEDBNN_<TABLE>__<KEY>` override entries before validation, e.g.
//! `FEDBNN_FEDERATION__ROUNDS=40` or `FEDBNN_FEDERATION__LR__BASE=0.05`.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cost::{
    bits_to_megabytes, count_flops, count_memory_bits, rotation_overhead, CostMode, FlopCount, RotationOverhead,
};
use crate::data::{
    kl_from_uniform, load_idx, partition, partition_manifest, split_val_test, Dataset, PartitionScheme, PartitionSpec,
    SyntheticSpec,
};
use crate::error::{Error, Result};
use crate::federation::{derive_seed, run_federation, AuxAggregation, FedConfig, FedData, FedOutcome, Method};
use crate::metrics::{write_csv, MetricsRecord};
use crate::model::{build_cnn4, ModelSpec};
use crate::runtime::write_packed_model;

pub const CONFIG_VERSION: u32 = 1;
pub const ENV_PREFIX: &str = "FEDBNN_";

const STREAM_DATA: u64 = 0xda7a;
const STREAM_SPLIT: u64 = 0x5917;
const STREAM_PARTITION: u64 = 0x9a27;
const STREAM_SUBSET: u64 = 0x5b5e;

/// Training method, including the ablation variants.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExperimentMethod {
    #[default]
    #[serde(rename = "fedbnn")]
    FedBnn,
    #[serde(rename = "fedavg")]
    FedAvg,
    /// FedBNN with `β = 1` and `λ = 1`.
    #[serde(rename = "fedbnn_beta1_lambda1")]
    FedBnnBeta1Lambda1,
    /// FedBNN with the auxiliary model mixed per client before aggregation.
    #[serde(rename = "fedbnn_client_aux")]
    FedBnnClientAux,
}

impl ExperimentMethod {
    pub const ALL: [ExperimentMethod; 4] = [
        ExperimentMethod::FedBnn,
        ExperimentMethod::FedAvg,
        ExperimentMethod::FedBnnBeta1Lambda1,
        ExperimentMethod::FedBnnClientAux,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExperimentMethod::FedBnn => "fedbnn",
            ExperimentMethod::FedAvg => "fedavg",
            ExperimentMethod::FedBnnBeta1Lambda1 => "fedbnn_beta1_lambda1",
            ExperimentMethod::FedBnnClientAux => "fedbnn_client_aux",
        }
    }
}

impl fmt::Display for ExperimentMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ExperimentMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| {
            let names: Vec<_> = Self::ALL.iter().map(|m| m.name()).collect();
            Error::config("method", format!("unknown method `{s}`, expected one of {}", names.join(", ")))
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    /// Class-prototype images (see [`SyntheticSpec`]).
    #[default]
    Synthetic,
    /// FMNIST-style IDX files in `dir`.
    Idx,
}

/// Where samples come from.
///
/// For `idx`, `dir` must hold `train-images-idx3-ubyte`,
/// `train-labels-idx1-ubyte`, `t10k-images-idx3-ubyte` and
/// `t10k-labels-idx1-ubyte`; `n_train` and `n_held_out` draw seeded subsets
/// of the train and t10k files. The held-out set is halved into validation
/// and test sets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub source: DataSource,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    pub n_train: usize,
    pub n_held_out: usize,
    /// Synthetic only.
    pub n_classes: usize,
    pub image_size: usize,
    pub noise: f64,
    pub blobs: usize,
    pub jitter: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        let s = SyntheticSpec::fmnist_like(0, 0);
        Self {
            source: DataSource::Synthetic,
            dir: None,
            n_train: 2000,
            n_held_out: 1000,
            n_classes: s.n_classes,
            image_size: s.image_size,
            noise: s.noise,
            blobs: s.blobs,
            jitter: s.jitter,
        }
    }
}

pub const IDX_FILES: [&str; 4] = [
    "train-images-idx3-ubyte",
    "train-labels-idx1-ubyte",
    "t10k-images-idx3-ubyte",
    "t10k-labels-idx1-ubyte",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PartitionConfig {
    pub scheme: PartitionScheme,
    pub n_clients: usize,
    pub dirichlet_alpha: f64,
    pub labels_per_client: usize,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        let s = PartitionSpec::new(PartitionScheme::Iid, 100, 0);
        Self {
            scheme: s.scheme,
            n_clients: s.n_clients,
            dirichlet_alpha: s.dirichlet_alpha,
            labels_per_client: s.labels_per_client,
        }
    }
}

impl PartitionConfig {
    pub fn spec(&self, seed: u64) -> PartitionSpec {
        PartitionSpec {
            scheme: self.scheme,
            n_clients: self.n_clients,
            dirichlet_alpha: self.dirichlet_alpha,
            labels_per_client: self.labels_per_client,
            seed,
        }
    }
}

/// CNN4 with channel widths `w, 2w, 2w, 4w`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub width: usize,
    /// Binarize the first and last layers too.
    pub binarize_all: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            width: 32,
            binarize_all: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub version: u32,
    pub method: ExperimentMethod,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub dataset: DatasetConfig,
    pub partition: PartitionConfig,
    pub model: ModelConfig,
    pub federation: FedConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            method: ExperimentMethod::default(),
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            dataset: DatasetConfig::default(),
            partition: PartitionConfig::default(),
            model: ModelConfig::default(),
            federation: FedConfig::default(),
        }
    }
}

/// Parses an override value as a TOML literal, falling back to a bare string.
fn env_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn apply_overrides<I, K, V>(table: &mut toml::Table, env: I) -> Result<()>
where
    I: IntoIterator<Item = (K, V)>,
    K: AsRef<str>,
    V: AsRef<str>,
{
    let mut vars: Vec<(String, String)> = env
        .into_iter()
        .filter_map(|(k, v)| {
            let key = k.as_ref().strip_prefix(ENV_PREFIX)?.to_ascii_lowercase();
            Some((key, v.as_ref().to_string()))
        })
        .collect();
    vars.sort();
    for (key, raw) in vars {
        let path: Vec<&str> = key.split("__").collect();
        let dotted = path.join(".");
        if path.iter().any(|p| p.is_empty()) {
            return Err(Error::config(dotted, "malformed environment override"));
        }
        let (last, parents) = path.split_last().expect("split yields at least one part");
        let mut cur = &mut *table;
        for p in parents {
            let entry = cur
                .entry(p.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            cur = entry
                .as_table_mut()
                .ok_or_else(|| Error::config(dotted.clone(), format!("`{p}` is not a table")))?;
        }
        cur.insert(last.to_string(), env_value(&raw));
    }
    Ok(())
}

impl ExperimentConfig {
    /// Parses `text`, applies `FEDBNN_` overrides from `env`, and validates.
    pub fn from_toml_str<I, K, V>(text: &str, env: I) -> Result<Self>
    where
        I: IntoIterator<Item = (K, V)>,
        K: AsRef<str>,
        V: AsRef<str>,
    {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::config("<document>", e.message().to_string()))?;
        apply_overrides(&mut table, env)?;
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(toml::Value::Table(table)).map_err(|e| {
            let key = e.path().to_string();
            let reason = e.inner().to_string();
            let reason = reason.lines().next().unwrap_or_default().to_string();
            Error::config(if key == "." { "<document>".to_string() } else { key }, reason)
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::config(
                "version",
                format!("unsupported version {}, expected {CONFIG_VERSION}", self.version),
            ));
        }
        if self.model.width == 0 {
            return Err(Error::config("model.width", "must be at least 1"));
        }
        let d = &self.dataset;
        if d.n_train == 0 {
            return Err(Error::config("dataset.n_train", "must be at least 1"));
        }
        if d.n_held_out < 2 {
            return Err(Error::config("dataset.n_held_out", "must be at least 2"));
        }
        match d.source {
            DataSource::Idx => {
                if d.dir.is_none() {
                    return Err(Error::config("dataset.dir", "required when source = \"idx\""));
                }
            }
            DataSource::Synthetic => {
                if d.n_classes < 2 {
                    return Err(Error::config("dataset.n_classes", "must be at least 2"));
                }
                if d.image_size < 4 {
                    return Err(Error::config("dataset.image_size", "must be at least 4"));
                }
                if !(d.noise >= 0.0 && d.noise.is_finite()) {
                    return Err(Error::config("dataset.noise", "must be non-negative and finite"));
                }
                if d.blobs == 0 {
                    return Err(Error::config("dataset.blobs", "must be at least 1"));
                }
                self.partition.spec(0).validate(d.n_classes)?;
            }
        }
        self.fed_config().validate(self.partition.n_clients)
    }

    /// The federation settings with the method variant and seed applied.
    pub fn fed_config(&self) -> FedConfig {
        let mut f = self.federation.clone();
        f.seed = self.seed;
        f.method = if self.method == ExperimentMethod::FedAvg {
            Method::FedAvg
        } else {
            Method::FedBnn
        };
        f.ablate_beta_lambda = self.method == ExperimentMethod::FedBnnBeta1Lambda1;
        f.aux_aggregation = if self.method == ExperimentMethod::FedBnnClientAux {
            AuxAggregation::PerClient
        } else {
            AuxAggregation::Server
        };
        f
    }
}

/// Reads and validates a config file; `env` supplies `FEDBNN_` overrides.
pub fn parse_config<I, K, V>(path: impl AsRef<Path>, env: I) -> Result<ExperimentConfig>
where
    I: IntoIterator<Item = (K, V)>,
    K: AsRef<str>,
    V: AsRef<str>,
{
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    ExperimentConfig::from_toml_str(&text, env)
}

/// Datasets, partition, and architecture for one run.
#[derive(Clone, Debug)]
pub struct ExperimentData {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    pub parts: Vec<Vec<usize>>,
    pub spec: ModelSpec,
}

fn seeded_subset(ds: &Dataset, n: usize, seed: u64, key: &str) -> Result<Dataset> {
    if n > ds.len() {
        return Err(Error::config(key, format!("asks for {n} samples, the file has {}", ds.len())));
    }
    let mut idx: Vec<usize> = (0..ds.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx.truncate(n);
    idx.sort_unstable();
    Ok(ds.subset(&idx))
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<ExperimentData> {
    let d = &cfg.dataset;
    let (train, held) = match d.source {
        DataSource::Synthetic => {
            let spec = SyntheticSpec {
                n: d.n_train + d.n_held_out,
                n_classes: d.n_classes,
                image_size: d.image_size,
                noise: d.noise,
                blobs: d.blobs,
                jitter: d.jitter,
                seed: derive_seed(cfg.seed, &[STREAM_DATA]),
            };
            let all = spec.generate()?;
            let train: Vec<usize> = (0..d.n_train).collect();
            let held: Vec<usize> = (d.n_train..all.len()).collect();
            (all.subset(&train), all.subset(&held))
        }
        DataSource::Idx => {
            let dir = d.dir.as_ref().expect("validated");
            let f = |name: &str| dir.join(name);
            let train = load_idx(f(IDX_FILES[0]), f(IDX_FILES[1]))?;
            let held = load_idx(f(IDX_FILES[2]), f(IDX_FILES[3]))?;
            (
                seeded_subset(&train, d.n_train, derive_seed(cfg.seed, &[STREAM_SUBSET, 0]), "dataset.n_train")?,
                seeded_subset(&held, d.n_held_out, derive_seed(cfg.seed, &[STREAM_SUBSET, 1]), "dataset.n_held_out")?,
            )
        }
    };
    let (val, test) = split_val_test(&held, derive_seed(cfg.seed, &[STREAM_SPLIT]))?;
    let parts = partition(&train, &cfg.partition.spec(derive_seed(cfg.seed, &[STREAM_PARTITION])))?;
    let [c, h, w] = train.sample_shape();
    let mut spec = build_cnn4(c, train.n_classes, cfg.model.width).with_input_size(h, w)?;
    if cfg.model.binarize_all {
        spec = spec.binarize_all();
    }
    Ok(ExperimentData {
        train,
        val,
        test,
        parts,
        spec,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopSummary {
    pub real: FlopCount,
    pub binary: FlopCount,
    pub real_flops: f64,
    pub binary_flops: f64,
    pub ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemorySummary {
    pub real_bits: u64,
    pub binary_bits: u64,
    pub real_mb: f64,
    pub binary_mb: f64,
    pub ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionSummary {
    pub scheme: PartitionScheme,
    pub n_clients: usize,
    pub min_size: usize,
    pub max_size: usize,
    pub max_labels_per_client: usize,
    pub mean_kl_from_uniform: f64,
}

impl PartitionSummary {
    pub fn new(train: &Dataset, parts: &[Vec<usize>], scheme: PartitionScheme) -> Self {
        let hists: Vec<Vec<usize>> = parts.iter().map(|p| train.class_histogram(p)).collect();
        let non_empty: Vec<&Vec<usize>> = hists.iter().filter(|h| h.iter().any(|&c| c > 0)).collect();
        Self {
            scheme,
            n_clients: parts.len(),
            min_size: parts.iter().map(Vec::len).min().unwrap_or(0),
            max_size: parts.iter().map(Vec::len).max().unwrap_or(0),
            max_labels_per_client: hists
                .iter()
                .map(|h| h.iter().filter(|&&c| c > 0).count())
                .max()
                .unwrap_or(0),
            mean_kl_from_uniform: if non_empty.is_empty() {
                0.0
            } else {
                non_empty.iter().map(|h| kl_from_uniform(h)).sum::<f64>() / non_empty.len() as f64
            },
        }
    }
}

/// Summary written to `report.json`. Contains no timings, so identical
/// inputs give identical bytes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub method: ExperimentMethod,
    pub seed: u64,
    /// Selected model on the test set through the XNOR runtime.
    pub test_acc_binary: f64,
    /// FedBNN: the same model on the float path. FedAvg: the best real model.
    pub test_acc_clean: f64,
    pub best_round: usize,
    pub best_val_acc_binary: f64,
    pub rounds: usize,
    pub purity_checks: usize,
    pub n_params: usize,
    pub flops: FlopSummary,
    pub memory: MemorySummary,
    pub rotation_overhead: RotationOverhead,
    pub deployed_weight_bytes: usize,
    pub partition: PartitionSummary,
    pub config: ExperimentConfig,
}

impl RunReport {
    pub fn new(cfg: &ExperimentConfig, data: &ExperimentData, outcome: &FedOutcome) -> Result<Self> {
        let spec = &data.spec;
        let real = count_flops(spec, CostMode::Real)?;
        let binary = count_flops(spec, CostMode::Binary)?;
        let real_bits = count_memory_bits(spec, CostMode::Real)?;
        let binary_bits = count_memory_bits(spec, CostMode::Binary)?;
        Ok(Self {
            method: cfg.method,
            seed: cfg.seed,
            test_acc_binary: outcome.test_acc_binary,
            test_acc_clean: outcome.test_acc_clean,
            best_round: outcome.state.best_round,
            best_val_acc_binary: outcome.state.best_val_acc,
            rounds: outcome.records.len(),
            purity_checks: outcome.purity_checks,
            n_params: spec.count_params(),
            flops: FlopSummary {
                real,
                binary,
                real_flops: real.flops(),
                binary_flops: binary.flops(),
                ratio: real.ratio_to(&binary),
            },
            memory: MemorySummary {
                real_bits,
                binary_bits,
                real_mb: bits_to_megabytes(real_bits),
                binary_mb: bits_to_megabytes(binary_bits),
                ratio: real_bits as f64 / binary_bits as f64,
            },
            rotation_overhead: rotation_overhead(spec),
            deployed_weight_bytes: outcome.deployed.weight_bytes(),
            partition: PartitionSummary::new(&data.train, &data.parts, cfg.partition.scheme),
            config: cfg.clone(),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self).map_err(|e| Error::Serde(e.to_string()))?;
        s.push('\n');
        Ok(s)
    }
}

/// Everything a finished run produced.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub report: RunReport,
    pub outcome: FedOutcome,
    pub data: ExperimentData,
}

/// Prepares data and runs the federation; `on_round` sees each record.
pub fn run(cfg: &ExperimentConfig, on_round: impl FnMut(&MetricsRecord)) -> Result<RunOutput> {
    cfg.validate()?;
    let data = prepare(cfg)?;
    let outcome = run_federation(
        &cfg.fed_config(),
        &data.spec,
        FedData {
            train: &data.train,
            parts: &data.parts,
            val: &data.val,
            test: &data.test,
        },
        false,
        on_round,
    )?;
    let report = RunReport::new(cfg, &data, &outcome)?;
    Ok(RunOutput { report, outcome, data })
}

/// File names written by [`write_artifacts`].
pub const ARTIFACTS: [&str; 6] = [
    "config.toml",
    "partition.json",
    "rounds.csv",
    "layers.csv",
    "report.json",
    "model.fbnn",
];

/// Writes the resolved config, partition manifest, metrics CSVs, report,
/// and packed binary model into `dir`.
pub fn write_artifacts(out: &RunOutput, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write = |name: &str, text: String| {
        let p = dir.join(name);
        std::fs::write(&p, text).map_err(|e| Error::io(p, e))
    };
    write(ARTIFACTS[0], out.report.config.to_toml_string()?)?;
    let mut manifest = partition_manifest(&out.data.parts);
    manifest.push('\n');
    write(ARTIFACTS[1], manifest)?;
    write_csv(&out.outcome.records, dir)?;
    write(ARTIFACTS[4], out.report.to_json()?)?;
    write_packed_model(&out.outcome.deployed, dir.join(ARTIFACTS[5]))
}

/// Distinct labels held by each client.
pub fn labels_per_client(train: &Dataset, parts: &[Vec<usize>]) -> Vec<usize> {
    parts
        .iter()
        .map(|p| p.iter().map(|&i| train.labels[i]).collect::<BTreeSet<_>>().len())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const NO_ENV: [(&str, &str); 0] = [];

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = ExperimentConfig::from_toml_str("", NO_ENV).unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        let f = cfg.fed_config();
        assert_eq!(f.lr.base, 0.1);
        assert_eq!(f.batch_size, 64);
        assert_eq!(f.clients_per_round, 10);
        assert_eq!(f.local_epochs, 5);
        assert_eq!(f.rounds, 500);
        assert_eq!(cfg.partition.n_clients, 100);
        assert_eq!(f.t_min, -2.0);
        assert_eq!(f.t_max, 1.0);
    }

    #[test]
    fn too_many_clients_per_round() {
        let err = ExperimentConfig::from_toml_str(
            "[partition]\nn_clients = 5\n[federation]\nclients_per_round = 6\n",
            NO_ENV,
        )
        .unwrap_err();
        match err {
            Error::Config { key, .. } => assert_eq!(key, "federation.clients_per_round"),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn unknown_keys_name_their_path() {
        for (text, want) in [
            ("[federation]\nroundz = 3\n", "federation.roundz"),
            ("[federation.lr]\nbase = 0.1\nwarmup = 3\n", "federation.lr.warmup"),
            ("bogus = 1\n", "bogus"),
            ("[dataset]\nnoise = \"loud\"\n", "dataset.noise"),
        ] {
            let err = ExperimentConfig::from_toml_str(text, NO_ENV).unwrap_err();
            assert!(err.is_config(), "{err}");
            let Error::Config { key, reason } = err else { unreachable!() };
            assert_eq!(key, want, "{reason}");
        }
    }

    #[test]
    fn constraint_violations() {
        for (text, key) in [
            ("version = 2\n", "version"),
            ("[federation]\nlocal_epochs = 0\n", "federation.local_epochs"),
            ("[federation.lr]\nbase = 0.0\n", "federation.lr.base"),
            ("[dataset]\nsource = \"idx\"\n", "dataset.dir"),
            ("[model]\nwidth = 0\n", "model.width"),
            ("[partition]\nscheme = \"label_count\"\nlabels_per_client = 11\n", "partition.labels_per_client"),
        ] {
            match ExperimentConfig::from_toml_str(text, NO_ENV) {
                Err(Error::Config { key: k, .. }) => assert_eq!(k, key, "{text}"),
                other => panic!("{text}: {other:?}"),
            }
        }
    }

    #[test]
    fn round_trip() {
        let text = "method = \"fedbnn_beta1_lambda1\"\nseed = 9\n[federation]\nrounds = 7\n\
                    [federation.server_mix]\nkind = \"fixed\"\nalpha = 0.5\nbeta = 0.25\n\
                    [partition]\nscheme = \"dirichlet\"\nn_clients = 20\n";
        let cfg = ExperimentConfig::from_toml_str(text, NO_ENV).unwrap();
        let again = ExperimentConfig::from_toml_str(&cfg.to_toml_string().unwrap(), NO_ENV).unwrap();
        assert_eq!(cfg, again);
        assert!(again.fed_config().ablate_beta_lambda);
        assert_eq!(again.fed_config().seed, 9);
    }

    #[test]
    fn env_overrides() {
        let env = [
            ("FEDBNN_FEDERATION__ROUNDS", "12"),
            ("FEDBNN_FEDERATION__LR__BASE", "0.05"),
            ("FEDBNN_METHOD", "fedavg"),
            ("FEDBNN_OUTPUT_DIR", "/tmp/x"),
            ("PATH", "/usr/bin"),
        ];
        let cfg = ExperimentConfig::from_toml_str("[federation]\nrounds = 3\n", env).unwrap();
        assert_eq!(cfg.federation.rounds, 12);
        assert_eq!(cfg.federation.lr.base, 0.05);
        assert_eq!(cfg.method, ExperimentMethod::FedAvg);
        assert_eq!(cfg.output_dir, PathBuf::from("/tmp/x"));

        let err = ExperimentConfig::from_toml_str("", [("FEDBNN_FEDERATION__NOPE", "1")]).unwrap_err();
        assert!(matches!(err, Error::Config { ref key, .. } if key == "federation.nope"), "{err}");
        let err = ExperimentConfig::from_toml_str("seed = 1\n", [("FEDBNN_SEED__X", "1")]).unwrap_err();
        assert!(matches!(err, Error::Config { ref key, .. } if key == "seed.x"), "{err}");
    }

    #[test]
    fn method_names() {
        for m in ExperimentMethod::ALL {
            assert_eq!(m.name().parse::<ExperimentMethod>().unwrap(), m);
        }
        assert!("fedprox".parse::<ExperimentMethod>().unwrap_err().is_config());
    }

    fn tiny() -> ExperimentConfig {
        let text = "seed = 3\n[dataset]\nn_train = 60\nn_held_out = 20\nn_classes = 3\nimage_size = 8\n\
                    [partition]\nn_clients = 3\n[model]\nwidth = 2\n\
                    [federation]\nrounds = 2\nclients_per_round = 2\nlocal_epochs = 1\nbatch_size = 16\n";
        ExperimentConfig::from_toml_str(text, NO_ENV).unwrap()
    }

    #[test]
    fn prepare_shapes() {
        let d = prepare(&tiny()).unwrap();
        assert_eq!(d.train.len(), 60);
        assert_eq!(d.val.len() + d.test.len(), 20);
        assert_eq!(d.parts.len(), 3);
        assert_eq!(d.spec.input, [1, 8, 8]);
        assert_eq!(d.parts.iter().map(Vec::len).sum::<usize>(), 60);
    }

    #[test]
    fn artifacts_are_written() {
        let dir = tempfile::tempdir().unwrap();
        let out = run(&tiny(), |_| {}).unwrap();
        write_artifacts(&out, dir.path()).unwrap();
        for name in ARTIFACTS {
            assert!(dir.path().join(name).is_file(), "{name}");
        }
        let echoed = parse_config(dir.path().join("config.toml"), NO_ENV).unwrap();
        assert_eq!(echoed, tiny());
        assert_eq!(out.report.rounds, 2);
        assert_eq!(out.report.purity_checks, 2);
        let back = crate::runtime::read_packed_model(dir.path().join("model.fbnn")).unwrap();
        assert_eq!(back, out.outcome.deployed);
    }

    #[test]
    fn missing_idx_dir_is_io_error() {
        let mut cfg = tiny();
        cfg.dataset.source = DataSource::Idx;
        cfg.dataset.dir = Some(PathBuf::from("/nonexistent/fmnist"));
        let err = prepare(&cfg).unwrap_err();
        assert!(matches!(err, Error::Io { .. }), "{err}");
    }

    #[test]
    fn idx_source_reads_files() {
        let dir = tempfile::tempdir().unwrap();
        let ds = crate::data::synthetic_dataset(40, 4, 1).unwrap();
        crate::data::write_idx(&ds, dir.path().join(IDX_FILES[0]), dir.path().join(IDX_FILES[1])).unwrap();
        crate::data::write_idx(&ds, dir.path().join(IDX_FILES[2]), dir.path().join(IDX_FILES[3])).unwrap();
        let mut cfg = tiny();
        cfg.dataset.source = DataSource::Idx;
        cfg.dataset.dir = Some(dir.path().to_path_buf());
        cfg.dataset.n_train = 30;
        cfg.dataset.n_held_out = 10;
        let d = prepare(&cfg).unwrap();
        assert_eq!(d.train.len(), 30);
        assert_eq!(d.train.n_classes, 4);
        cfg.dataset.n_train = 41;
        assert!(prepare(&cfg).unwrap_err().is_config());
    }
}
