//! Flat key-value run configuration.
//!
//! One TOML file with flat sections per module; every key is validated
//! against the schema below and unknown sections or keys are rejected
//! by name. `--set section.key=value` overrides single keys and
//! `--seed N` overrides `run.seed`. The `IDP_OUT_ROOT` environment
//! variable is honored only as the root for a relative `run.outdir`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use idp_core::dataset::SynthSpec;
use idp_core::linalg::Similarity;
use idp_core::seqmodel::{EncoderKind, ModelShape, TrainOptions};
use idp_core::transfer::{DeploymentMode, TextProjectionKind};

#[derive(Clone, Debug)]
pub struct RunSection {
    pub seed: u64,
    pub outdir: PathBuf,
}

#[derive(Clone, Debug, Default)]
pub struct DataSection {
    /// Pre-training interaction TSVs (merged). Empty = use synth outputs.
    pub pretrain: Vec<PathBuf>,
    /// Downstream interaction TSV. None = use the last synth domain.
    pub downstream: Option<PathBuf>,
    pub min_interactions: usize,
    pub filter_pretrain: bool,
    pub filter_downstream: bool,
}

#[derive(Clone, Debug)]
pub struct SeqSection {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub backend: EncoderKind,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub patience: usize,
}

impl SeqSection {
    pub fn shape(&self) -> ModelShape {
        ModelShape {
            dim: self.dim,
            layers: self.layers,
            heads: self.heads,
            max_len: self.max_len,
            dropout: self.dropout,
            kind: self.backend,
        }
    }

    pub fn train_options(&self, seed: u64) -> TrainOptions {
        TrainOptions {
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            max_epochs: self.max_epochs,
            patience: self.patience,
            seed,
        }
    }
}

impl Default for SeqSection {
    fn default() -> Self {
        SeqSection {
            dim: 64,
            layers: 2,
            heads: 2,
            max_len: 50,
            dropout: 0.2,
            backend: EncoderKind::CausalAttention,
            batch_size: 256,
            learning_rate: 1e-3,
            max_epochs: 200,
            patience: 20,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CdimSection {
    pub adapter_dim: usize,
    pub dropout: f64,
    pub temperature: f64,
    pub positives: usize,
    pub similarity: Similarity,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub holdout_fraction: f64,
    /// "text" or "fused" (text + image vectors).
    pub modality: String,
}

impl Default for CdimSection {
    fn default() -> Self {
        CdimSection {
            adapter_dim: 64,
            dropout: 0.1,
            temperature: 0.05,
            positives: 10,
            similarity: Similarity::Cosine,
            batch_size: 128,
            learning_rate: 1e-3,
            max_epochs: 200,
            patience: 20,
            holdout_fraction: 0.1,
            modality: "text".into(),
        }
    }
}

impl CdimSection {
    pub fn hyper(&self) -> idp_core::cdim::CdimHyper {
        idp_core::cdim::CdimHyper {
            adapter_dim: self.adapter_dim,
            dropout: self.dropout,
            temperature: self.temperature,
            positives: self.positives,
            similarity: self.similarity,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            max_epochs: self.max_epochs,
            patience: self.patience,
            holdout_fraction: self.holdout_fraction,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MatcherBackend {
    Auto,
    Exact,
    Ann,
}

#[derive(Clone, Debug)]
pub struct MatcherSection {
    pub m: usize,
    pub backend: MatcherBackend,
    /// Exact path is the default up to this source-catalog size.
    pub exact_threshold: usize,
    pub ann_max_degree: usize,
    pub ann_ef_construction: usize,
    pub ann_ef_search: usize,
}

impl Default for MatcherSection {
    fn default() -> Self {
        MatcherSection {
            m: 10,
            backend: MatcherBackend::Auto,
            exact_threshold: 50_000,
            ann_max_degree: 16,
            ann_ef_construction: 200,
            ann_ef_search: 100,
        }
    }
}

impl MatcherSection {
    pub fn ann_params(&self) -> idp_core::matcher::HnswParams {
        idp_core::matcher::HnswParams {
            max_degree: self.ann_max_degree,
            ef_construction: self.ann_ef_construction,
            ef_search: self.ann_ef_search,
        }
    }

    pub fn resolve_backend(&self, num_sources: usize) -> MatcherBackend {
        match self.backend {
            MatcherBackend::Auto => {
                if num_sources <= self.exact_threshold {
                    MatcherBackend::Exact
                } else {
                    MatcherBackend::Ann
                }
            }
            other => other,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TransferSection {
    pub mode: DeploymentMode,
    pub use_text: bool,
    pub text_projection: TextProjectionKind,
    pub retrain_backend: EncoderKind,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub patience: usize,
}

impl Default for TransferSection {
    fn default() -> Self {
        TransferSection {
            mode: DeploymentMode::ZeroShot,
            use_text: false,
            text_projection: TextProjectionKind::Pca,
            retrain_backend: EncoderKind::CausalAttention,
            batch_size: 256,
            learning_rate: 1e-3,
            max_epochs: 200,
            patience: 20,
        }
    }
}

impl TransferSection {
    pub fn train_options(&self, seed: u64) -> TrainOptions {
        TrainOptions {
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            max_epochs: self.max_epochs,
            patience: self.patience,
            seed,
        }
    }
}

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub run: RunSection,
    pub data: DataSection,
    /// domain tag -> text vector TSV.
    pub vectors: BTreeMap<String, PathBuf>,
    /// domain tag -> image vector TSV (fused modality only).
    pub image_vectors: BTreeMap<String, PathBuf>,
    pub synth: SynthSpec,
    pub seqmodel: SeqSection,
    pub cdim: CdimSection,
    pub matcher: MatcherSection,
    pub transfer: TransferSection,
}

fn want_str(section: &str, key: &str, v: &toml::Value) -> Result<String> {
    v.as_str()
        .map(str::to_string)
        .ok_or_else(|| anyhow!("config key {section}.{key}: expected a string"))
}

fn want_bool(section: &str, key: &str, v: &toml::Value) -> Result<bool> {
    v.as_bool()
        .ok_or_else(|| anyhow!("config key {section}.{key}: expected a bool"))
}

fn want_usize(section: &str, key: &str, v: &toml::Value) -> Result<usize> {
    v.as_integer()
        .filter(|&i| i >= 0)
        .map(|i| i as usize)
        .ok_or_else(|| anyhow!("config key {section}.{key}: expected a nonnegative integer"))
}

fn want_f64(section: &str, key: &str, v: &toml::Value) -> Result<f64> {
    match v {
        toml::Value::Float(f) => Ok(*f),
        toml::Value::Integer(i) => Ok(*i as f64),
        _ => bail!("config key {section}.{key}: expected a number"),
    }
}

impl RunConfig {
    /// Parse a TOML file, apply `--set` overrides, validate against the
    /// schema (unknown sections or keys are errors naming the key).
    pub fn load(path: &Path, sets: &[String], seed_override: Option<u64>) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        let mut table: toml::Table = text
            .parse()
            .with_context(|| format!("cannot parse config {}", path.display()))?;
        for set in sets {
            apply_set(&mut table, set)?;
        }
        let mut cfg = Self::from_table(table)?;
        if let Some(seed) = seed_override {
            cfg.run.seed = seed;
        }
        if let Ok(root) = std::env::var("IDP_OUT_ROOT") {
            if cfg.run.outdir.is_relative() {
                cfg.run.outdir = PathBuf::from(root).join(&cfg.run.outdir);
            }
        }
        Ok(cfg)
    }

    pub fn from_table(table: toml::Table) -> Result<RunConfig> {
        let mut run_seed = 42u64;
        let mut outdir: Option<PathBuf> = None;
        let mut data = DataSection {
            min_interactions: 5,
            filter_pretrain: true,
            filter_downstream: false,
            ..DataSection::default()
        };
        let mut vectors = BTreeMap::new();
        let mut image_vectors = BTreeMap::new();
        let mut synth = SynthSpec::s1();
        let mut seq = SeqSection::default();
        let mut cdim = CdimSection::default();
        let mut matcher = MatcherSection::default();
        let mut transfer = TransferSection::default();

        for (section, value) in &table {
            let sub = value
                .as_table()
                .ok_or_else(|| anyhow!("config section [{section}] must be a flat table"))?;
            match section.as_str() {
                "run" => {
                    for (key, v) in sub {
                        match key.as_str() {
                            "seed" => {
                                run_seed = v
                                    .as_integer()
                                    .filter(|&i| i >= 0)
                                    .ok_or_else(|| anyhow!("config key run.seed: expected a nonnegative integer"))?
                                    as u64
                            }
                            "outdir" => outdir = Some(PathBuf::from(want_str(section, key, v)?)),
                            _ => bail!("unknown config key run.{key}"),
                        }
                    }
                }
                "data" => {
                    for (key, v) in sub {
                        match key.as_str() {
                            "pretrain" => {
                                data.pretrain = want_str(section, key, v)?
                                    .split(',')
                                    .filter(|s| !s.is_empty())
                                    .map(PathBuf::from)
                                    .collect()
                            }
                            "downstream" => {
                                data.downstream = Some(PathBuf::from(want_str(section, key, v)?))
                            }
                            "min_interactions" => data.min_interactions = want_usize(section, key, v)?,
                            "filter_pretrain" => data.filter_pretrain = want_bool(section, key, v)?,
                            "filter_downstream" => {
                                data.filter_downstream = want_bool(section, key, v)?
                            }
                            _ => bail!("unknown config key data.{key}"),
                        }
                    }
                }
                "vectors" => {
                    for (key, v) in sub {
                        vectors.insert(key.clone(), PathBuf::from(want_str(section, key, v)?));
                    }
                }
                "image_vectors" => {
                    for (key, v) in sub {
                        image_vectors.insert(key.clone(), PathBuf::from(want_str(section, key, v)?));
                    }
                }
                "synth" => {
                    for (key, v) in sub {
                        match key.as_str() {
                            "domains" => synth.domains = want_usize(section, key, v)?,
                            "clusters" => synth.clusters = want_usize(section, key, v)?,
                            "items_per_domain" => synth.items_per_domain = want_usize(section, key, v)?,
                            "users_per_domain" => synth.users_per_domain = want_usize(section, key, v)?,
                            "seq_len" => synth.seq_len = want_usize(section, key, v)?,
                            "concentration" => synth.concentration = want_f64(section, key, v)?,
                            "vector_dim" => synth.vector_dim = want_usize(section, key, v)?,
                            "noise" => synth.noise = want_f64(section, key, v)?,
                            _ => bail!("unknown config key synth.{key}"),
                        }
                    }
                }
                "seqmodel" => {
                    for (key, v) in sub {
                        match key.as_str() {
                            "dim" => seq.dim = want_usize(section, key, v)?,
                            "layers" => seq.layers = want_usize(section, key, v)?,
                            "heads" => seq.heads = want_usize(section, key, v)?,
                            "max_len" => seq.max_len = want_usize(section, key, v)?,
                            "dropout" => seq.dropout = want_f64(section, key, v)?,
                            "backend" => seq.backend = EncoderKind::parse(&want_str(section, key, v)?)?,
                            "batch_size" => seq.batch_size = want_usize(section, key, v)?,
                            "learning_rate" => seq.learning_rate = want_f64(section, key, v)?,
                            "max_epochs" => seq.max_epochs = want_usize(section, key, v)?,
                            "patience" => seq.patience = want_usize(section, key, v)?,
                            _ => bail!("unknown config key seqmodel.{key}"),
                        }
                    }
                }
                "cdim" => {
                    for (key, v) in sub {
                        match key.as_str() {
                            "adapter_dim" => cdim.adapter_dim = want_usize(section, key, v)?,
                            "dropout" => cdim.dropout = want_f64(section, key, v)?,
                            "temperature" => cdim.temperature = want_f64(section, key, v)?,
                            "positives" => cdim.positives = want_usize(section, key, v)?,
                            "similarity" => cdim.similarity = Similarity::parse(&want_str(section, key, v)?)?,
                            "batch_size" => cdim.batch_size = want_usize(section, key, v)?,
                            "learning_rate" => cdim.learning_rate = want_f64(section, key, v)?,
                            "max_epochs" => cdim.max_epochs = want_usize(section, key, v)?,
                            "patience" => cdim.patience = want_usize(section, key, v)?,
                            "holdout_fraction" => cdim.holdout_fraction = want_f64(section, key, v)?,
                            "modality" => {
                                let m = want_str(section, key, v)?;
                                if m != "text" && m != "fused" {
                                    bail!("config key cdim.modality: expected \"text\" or \"fused\", got {m:?}");
                                }
                                cdim.modality = m;
                            }
                            _ => bail!("unknown config key cdim.{key}"),
                        }
                    }
                }
                "matcher" => {
                    for (key, v) in sub {
                        match key.as_str() {
                            "m" => matcher.m = want_usize(section, key, v)?,
                            "backend" => {
                                matcher.backend = match want_str(section, key, v)?.as_str() {
                                    "auto" => MatcherBackend::Auto,
                                    "exact" => MatcherBackend::Exact,
                                    "ann" => MatcherBackend::Ann,
                                    other => bail!(
                                        "config key matcher.backend: expected auto|exact|ann, got {other:?}"
                                    ),
                                }
                            }
                            "exact_threshold" => matcher.exact_threshold = want_usize(section, key, v)?,
                            "ann_max_degree" => matcher.ann_max_degree = want_usize(section, key, v)?,
                            "ann_ef_construction" => {
                                matcher.ann_ef_construction = want_usize(section, key, v)?
                            }
                            "ann_ef_search" => matcher.ann_ef_search = want_usize(section, key, v)?,
                            _ => bail!("unknown config key matcher.{key}"),
                        }
                    }
                }
                "transfer" => {
                    for (key, v) in sub {
                        match key.as_str() {
                            "mode" => transfer.mode = DeploymentMode::parse(&want_str(section, key, v)?)?,
                            "use_text" => transfer.use_text = want_bool(section, key, v)?,
                            "text_projection" => {
                                transfer.text_projection =
                                    TextProjectionKind::parse(&want_str(section, key, v)?)?
                            }
                            "retrain_backend" => {
                                transfer.retrain_backend =
                                    EncoderKind::parse(&want_str(section, key, v)?)?
                            }
                            "batch_size" => transfer.batch_size = want_usize(section, key, v)?,
                            "learning_rate" => transfer.learning_rate = want_f64(section, key, v)?,
                            "max_epochs" => transfer.max_epochs = want_usize(section, key, v)?,
                            "patience" => transfer.patience = want_usize(section, key, v)?,
                            _ => bail!("unknown config key transfer.{key}"),
                        }
                    }
                }
                other => bail!("unknown config section [{other}]"),
            }
        }

        let outdir = outdir.ok_or_else(|| anyhow!("config key run.outdir is required"))?;
        Ok(RunConfig {
            run: RunSection {
                seed: run_seed,
                outdir,
            },
            data,
            vectors,
            image_vectors,
            synth,
            seqmodel: seq,
            cdim,
            matcher,
            transfer,
        })
    }
}

/// Apply one `section.key=value` override onto the raw TOML table.
fn apply_set(table: &mut toml::Table, set: &str) -> Result<()> {
    let (path, raw_value) = set
        .split_once('=')
        .ok_or_else(|| anyhow!("--set expects section.key=value, got {set:?}"))?;
    let (section, key) = path
        .split_once('.')
        .ok_or_else(|| anyhow!("--set expects section.key=value, got {set:?}"))?;
    // try native TOML scalars first, fall back to a string
    let value: toml::Value = raw_value
        .parse::<i64>()
        .map(toml::Value::Integer)
        .or_else(|_| raw_value.parse::<f64>().map(toml::Value::Float))
        .or_else(|_| raw_value.parse::<bool>().map(toml::Value::Boolean))
        .unwrap_or_else(|_| toml::Value::String(raw_value.to_string()));
    let entry = table
        .entry(section.to_string())
        .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    let sub = entry
        .as_table_mut()
        .ok_or_else(|| anyhow!("config section [{section}] must be a table"))?;
    sub.insert(key.to_string(), value);
    Ok(())
}
