//! Stage implementations for the training pipeline:
//! pretrain -> mine_positives -> tune_cdim -> build_index ->
//! gen_embeddings -> deploy -> eval, plus the synthetic-corpus
//! generator. Every stage is idempotent given identical inputs and
//! seed, writes its artifacts under `<outdir>/<stage>/`, and records
//! content digests in the manifest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use idp_core::cdim::{
    encode_all, mine_behavior_positives, tune_cdim, AdapterParams, BehaviorPositives, Modality,
    TextVectorStore,
};
use idp_core::ckpt::{digest_file, Checkpoint};
use idp_core::dataset::{split_leave_one_out, synthesize, InteractionStore, LeaveOneOutSplit};
use idp_core::eval::{build_report, rank_users, EvalReport, EvalTarget, ReportFormat};
use idp_core::linalg::Matrix;
use idp_core::matcher::{
    aggregation_weights, AnnIndex, Fallback, GeneratedEmbeddings, Neighbor, NeighborAssignment,
    RowProvenance,
};
use idp_core::seqmodel::{pretrain, Scorer, SeqModelParams};
use idp_core::transfer::{deploy, fit_pca, pca_text_table, DeployOptions, TextProjectionKind};

use crate::config::{MatcherBackend, RunConfig};
use crate::manifest::{PipelineManifest, StageRecord};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Synth,
    Pretrain,
    MinePositives,
    TuneCdim,
    BuildIndex,
    GenEmbeddings,
    Deploy,
    Eval,
}

impl Stage {
    pub fn name(&self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::Pretrain => "pretrain",
            Stage::MinePositives => "mine_positives",
            Stage::TuneCdim => "tune_cdim",
            Stage::BuildIndex => "build_index",
            Stage::GenEmbeddings => "gen_embeddings",
            Stage::Deploy => "deploy",
            Stage::Eval => "eval",
        }
    }

    /// The seven DAG stages run by `pipeline`, in dependency order.
    pub const DAG: [Stage; 7] = [
        Stage::Pretrain,
        Stage::MinePositives,
        Stage::TuneCdim,
        Stage::BuildIndex,
        Stage::GenEmbeddings,
        Stage::Deploy,
        Stage::Eval,
    ];
}

pub struct Pipeline {
    pub cfg: RunConfig,
}

impl Pipeline {
    pub fn new(cfg: RunConfig) -> Pipeline {
        Pipeline { cfg }
    }

    pub fn outdir(&self) -> &Path {
        &self.cfg.run.outdir
    }

    fn stage_dir(&self, stage: Stage) -> PathBuf {
        self.outdir().join(stage.name())
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.outdir().join("manifest.json")
    }

    // artifact paths
    pub fn model_ckpt(&self) -> PathBuf {
        self.stage_dir(Stage::Pretrain).join("model.ckpt")
    }

    pub fn pretrain_report(&self) -> PathBuf {
        self.stage_dir(Stage::Pretrain).join("report.tsv")
    }

    pub fn positives_tsv(&self) -> PathBuf {
        self.stage_dir(Stage::MinePositives).join("positives.tsv")
    }

    pub fn adapter_ckpt(&self) -> PathBuf {
        self.stage_dir(Stage::TuneCdim).join("adapter.ckpt")
    }

    pub fn index_file(&self) -> PathBuf {
        self.stage_dir(Stage::BuildIndex).join("index.ann")
    }

    pub fn generated_ckpt(&self) -> PathBuf {
        self.stage_dir(Stage::GenEmbeddings).join("generated.ckpt")
    }

    pub fn assignment_tsv(&self) -> PathBuf {
        self.stage_dir(Stage::GenEmbeddings).join("assignment.tsv")
    }

    pub fn provenance_tsv(&self) -> PathBuf {
        self.stage_dir(Stage::GenEmbeddings).join("provenance.tsv")
    }

    pub fn deployed_ckpt(&self) -> PathBuf {
        self.stage_dir(Stage::Deploy).join("deployed.ckpt")
    }

    pub fn deploy_report(&self) -> PathBuf {
        self.stage_dir(Stage::Deploy).join("train_report.tsv")
    }

    pub fn eval_report(&self) -> PathBuf {
        self.stage_dir(Stage::Eval).join("report.tsv")
    }

    fn require_artifact(&self, path: &Path, producer: Stage) -> Result<()> {
        if !path.exists() {
            bail!(
                "missing artifact {} from stage \"{}\"; run `idp {}` first",
                path.display(),
                producer.name(),
                producer.name()
            );
        }
        Ok(())
    }

    /// Pre-training interaction TSVs: explicit [data] paths, or the
    /// synth outputs (all domains but the last).
    fn pretrain_paths(&self) -> Result<Vec<PathBuf>> {
        if !self.cfg.data.pretrain.is_empty() {
            return Ok(self.cfg.data.pretrain.clone());
        }
        let n = self.cfg.synth.domains;
        if n < 2 {
            bail!("synth corpus needs >= 2 domains to provide pre-training and downstream data");
        }
        let paths: Vec<PathBuf> = (0..n - 1)
            .map(|d| self.stage_dir(Stage::Synth).join(format!("domain_{d}.tsv")))
            .collect();
        for p in &paths {
            self.require_artifact(p, Stage::Synth)?;
        }
        Ok(paths)
    }

    fn downstream_path(&self) -> Result<PathBuf> {
        if let Some(p) = &self.cfg.data.downstream {
            return Ok(p.clone());
        }
        let d = self.cfg.synth.domains - 1;
        let p = self.stage_dir(Stage::Synth).join(format!("domain_{d}.tsv"));
        self.require_artifact(&p, Stage::Synth)?;
        Ok(p)
    }

    /// Vector files for a store's domains: explicit [vectors] entries,
    /// or the synth outputs for synth-tagged domains.
    fn vector_files_for(&self, store: &InteractionStore, image: bool) -> Result<Vec<(String, PathBuf)>> {
        let configured = if image {
            &self.cfg.image_vectors
        } else {
            &self.cfg.vectors
        };
        let mut out = Vec::new();
        for tag in store.domains() {
            if let Some(p) = configured.get(tag) {
                out.push((tag.clone(), p.clone()));
                continue;
            }
            if image {
                bail!("no [image_vectors] entry for domain {tag:?} (cdim.modality = \"fused\")");
            }
            // synth naming convention: domain_<i> -> domain_<i>_vectors.tsv
            if let Some(i) = tag.strip_prefix("domain_") {
                let p = self
                    .stage_dir(Stage::Synth)
                    .join(format!("domain_{i}_vectors.tsv"));
                if p.exists() {
                    out.push((tag.clone(), p));
                    continue;
                }
            }
            bail!("no [vectors] entry for domain {tag:?}");
        }
        Ok(out)
    }

    pub fn load_pretrain_store(&self) -> Result<InteractionStore> {
        let paths = self.pretrain_paths()?;
        let mut stores = Vec::new();
        for p in &paths {
            stores.push(InteractionStore::ingest_tsv(p)?);
        }
        let merged = InteractionStore::merge_domains(&stores)?;
        if self.cfg.data.filter_pretrain {
            Ok(merged.filter_min_interactions(self.cfg.data.min_interactions)?)
        } else {
            Ok(merged)
        }
    }

    pub fn load_downstream_store(&self) -> Result<InteractionStore> {
        let store = InteractionStore::ingest_tsv(self.downstream_path()?)?;
        if self.cfg.data.filter_downstream {
            Ok(store.filter_min_interactions(self.cfg.data.min_interactions)?)
        } else {
            Ok(store)
        }
    }

    pub fn pretrain_split(&self, store: &InteractionStore) -> Result<LeaveOneOutSplit> {
        Ok(split_leave_one_out(store, self.cfg.run.seed)?)
    }

    pub fn downstream_split(&self, store: &InteractionStore) -> Result<LeaveOneOutSplit> {
        Ok(split_leave_one_out(store, self.cfg.run.seed)?)
    }

    pub fn load_text_vectors(&self, store: &InteractionStore) -> Result<TextVectorStore> {
        let files = self.vector_files_for(store, false)?;
        let (text, _) = TextVectorStore::from_files(store, &files, Modality::Text)?;
        if self.cfg.cdim.modality == "fused" {
            let image_files = self.vector_files_for(store, true)?;
            let (image, _) = TextVectorStore::from_files(store, &image_files, Modality::Image)?;
            let (fused, _missing) = TextVectorStore::fused(&text, &image)?;
            Ok(fused)
        } else {
            Ok(text)
        }
    }

    fn record_stage(
        &self,
        stage: Stage,
        inputs: BTreeMap<String, String>,
        outputs: BTreeMap<String, String>,
        started: Instant,
    ) -> Result<StageRecord> {
        let record = StageRecord {
            stage: stage.name().to_string(),
            seed: self.cfg.run.seed,
            inputs,
            outputs,
            wall_clock_secs: started.elapsed().as_secs_f64(),
        };
        let mut manifest = PipelineManifest::load(&self.manifest_path())?;
        manifest.record(record.clone());
        std::fs::create_dir_all(self.outdir())?;
        manifest.save(&self.manifest_path())?;
        Ok(record)
    }

    fn digest_into(map: &mut BTreeMap<String, String>, name: &str, path: &Path) -> Result<()> {
        map.insert(name.to_string(), digest_file(path)?);
        Ok(())
    }

    pub fn run_stage(&self, stage: Stage) -> Result<StageRecord> {
        log::info!("stage {} starting", stage.name());
        match stage {
            Stage::Synth => self.cmd_synth(),
            Stage::Pretrain => self.cmd_pretrain(),
            Stage::MinePositives => self.cmd_mine_positives(),
            Stage::TuneCdim => self.cmd_tune_cdim(),
            Stage::BuildIndex => self.cmd_build_index(),
            Stage::GenEmbeddings => self.cmd_gen_embeddings(),
            Stage::Deploy => self.cmd_deploy(),
            Stage::Eval => self.cmd_eval(),
        }
    }

    /// Run the seven DAG stages in order.
    pub fn run_all(&self) -> Result<Vec<StageRecord>> {
        Stage::DAG.iter().map(|&s| self.run_stage(s)).collect()
    }

    pub fn cmd_synth(&self) -> Result<StageRecord> {
        let started = Instant::now();
        let corpus = synthesize(&self.cfg.synth, self.cfg.run.seed)?;
        let dir = self.stage_dir(Stage::Synth);
        let paths = corpus.write_to(&dir)?;
        let mut outputs = BTreeMap::new();
        for (inter, vec) in &paths {
            Self::digest_into(&mut outputs, inter.file_name().unwrap().to_str().unwrap(), inter)?;
            Self::digest_into(&mut outputs, vec.file_name().unwrap().to_str().unwrap(), vec)?;
        }
        self.record_stage(Stage::Synth, BTreeMap::new(), outputs, started)
    }

    pub fn cmd_pretrain(&self) -> Result<StageRecord> {
        let started = Instant::now();
        let mut inputs = BTreeMap::new();
        for p in self.pretrain_paths()? {
            Self::digest_into(&mut inputs, p.file_name().unwrap().to_str().unwrap(), &p)?;
        }
        let store = self.load_pretrain_store()?;
        let split = self.pretrain_split(&store)?;
        let (params, report) = pretrain(
            store.num_items(),
            &split,
            self.cfg.seqmodel.shape(),
            &self.cfg.seqmodel.train_options(self.cfg.run.seed),
        )?;
        if report.diverged {
            log::warn!("pretraining diverged; checkpoint holds the last finite parameters");
        }
        let dir = self.stage_dir(Stage::Pretrain);
        std::fs::create_dir_all(&dir)?;
        params.save(self.model_ckpt())?;

        // test metrics of the pre-trained model on its own split
        let scorer = Scorer::id_only(&params);
        let ranked = rank_users(&scorer, &split, EvalTarget::Test)?;
        let mut meta = BTreeMap::new();
        meta.insert("stage".into(), "pretrain".into());
        meta.insert("seed".into(), self.cfg.run.seed.to_string());
        meta.insert("epochs_run".into(), report.epochs_run.to_string());
        meta.insert(
            "best_epoch".into(),
            report.best_epoch.map_or("none".into(), |e| e.to_string()),
        );
        meta.insert("users".into(), ranked.users.len().to_string());
        meta.insert("checkpoint".into(), digest_file(self.model_ckpt())?);
        let eval_report = build_report(&ranked, meta)?;
        eval_report.write(self.pretrain_report(), ReportFormat::Tsv)?;

        let mut outputs = BTreeMap::new();
        Self::digest_into(&mut outputs, "model.ckpt", &self.model_ckpt())?;
        Self::digest_into(&mut outputs, "report.tsv", &self.pretrain_report())?;
        self.record_stage(Stage::Pretrain, inputs, outputs, started)
    }

    pub fn cmd_mine_positives(&self) -> Result<StageRecord> {
        let started = Instant::now();
        self.require_artifact(&self.model_ckpt(), Stage::Pretrain)?;
        let mut inputs = BTreeMap::new();
        Self::digest_into(&mut inputs, "model.ckpt", &self.model_ckpt())?;
        let params = SeqModelParams::load(self.model_ckpt())?;
        let positives = mine_behavior_positives(
            &params.item_embeddings,
            self.cfg.cdim.positives,
            self.cfg.cdim.similarity,
        )?;
        let dir = self.stage_dir(Stage::MinePositives);
        std::fs::create_dir_all(&dir)?;
        let mut out = String::new();
        use std::fmt::Write as _;
        for (item, list) in positives.lists.iter().enumerate() {
            let joined: Vec<String> = list.iter().map(|p| p.to_string()).collect();
            let _ = writeln!(out, "{item}\t{}", joined.join(","));
        }
        std::fs::write(self.positives_tsv(), out)?;
        let mut outputs = BTreeMap::new();
        Self::digest_into(&mut outputs, "positives.tsv", &self.positives_tsv())?;
        self.record_stage(Stage::MinePositives, inputs, outputs, started)
    }

    pub fn load_positives(&self) -> Result<BehaviorPositives> {
        let path = self.positives_tsv();
        let text = std::fs::read_to_string(&path)
            .with_context(|| format!("cannot read {}", path.display()))?;
        let mut lists = Vec::new();
        let mut k = 0usize;
        for line in text.lines() {
            let (_, rest) = line
                .split_once('\t')
                .ok_or_else(|| anyhow!("bad positives line {line:?}"))?;
            let list: Vec<u32> = rest
                .split(',')
                .filter(|s| !s.is_empty())
                .map(|s| s.parse::<u32>().map_err(|_| anyhow!("bad positive id {s:?}")))
                .collect::<Result<_>>()?;
            k = k.max(list.len());
            lists.push(list);
        }
        Ok(BehaviorPositives { k, lists })
    }

    pub fn cmd_tune_cdim(&self) -> Result<StageRecord> {
        let started = Instant::now();
        self.require_artifact(&self.positives_tsv(), Stage::MinePositives)?;
        let mut inputs = BTreeMap::new();
        Self::digest_into(&mut inputs, "positives.tsv", &self.positives_tsv())?;
        let store = self.load_pretrain_store()?;
        let vectors = self.load_text_vectors(&store)?;
        for (tag, path) in self.vector_files_for(&store, false)? {
            Self::digest_into(&mut inputs, &format!("vectors.{tag}"), &path)?;
        }
        let positives = self.load_positives()?;
        let (adapter, report) = tune_cdim(&vectors, &positives, &self.cfg.cdim.hyper(), self.cfg.run.seed)?;
        if report.diverged {
            log::warn!("cdim tuning diverged; checkpoint holds the last finite adapter");
        }
        let dir = self.stage_dir(Stage::TuneCdim);
        std::fs::create_dir_all(&dir)?;
        adapter.save(self.adapter_ckpt())?;
        let mut outputs = BTreeMap::new();
        Self::digest_into(&mut outputs, "adapter.ckpt", &self.adapter_ckpt())?;
        self.record_stage(Stage::TuneCdim, inputs, outputs, started)
    }

    pub fn cmd_build_index(&self) -> Result<StageRecord> {
        let started = Instant::now();
        self.require_artifact(&self.adapter_ckpt(), Stage::TuneCdim)?;
        let mut inputs = BTreeMap::new();
        Self::digest_into(&mut inputs, "adapter.ckpt", &self.adapter_ckpt())?;
        let store = self.load_pretrain_store()?;
        let vectors = self.load_text_vectors(&store)?;
        let adapter = AdapterParams::load(self.adapter_ckpt())?;
        let (adapted, present) = encode_all(&adapter, &vectors)?;
        if present.iter().any(|p| !p) {
            bail!("every pre-training item needs a vector to build the index");
        }
        let index = AnnIndex::build(
            &adapted,
            self.cfg.matcher.ann_params(),
            self.cfg.cdim.similarity,
            self.cfg.run.seed,
        )?;
        let dir = self.stage_dir(Stage::BuildIndex);
        std::fs::create_dir_all(&dir)?;
        index.write_to(self.index_file())?;
        let mut outputs = BTreeMap::new();
        Self::digest_into(&mut outputs, "index.ann", &self.index_file())?;
        self.record_stage(Stage::BuildIndex, inputs, outputs, started)
    }

    pub fn cmd_gen_embeddings(&self) -> Result<StageRecord> {
        let started = Instant::now();
        self.require_artifact(&self.adapter_ckpt(), Stage::TuneCdim)?;
        self.require_artifact(&self.model_ckpt(), Stage::Pretrain)?;
        let mut inputs = BTreeMap::new();
        Self::digest_into(&mut inputs, "adapter.ckpt", &self.adapter_ckpt())?;
        Self::digest_into(&mut inputs, "model.ckpt", &self.model_ckpt())?;

        let source_store = self.load_pretrain_store()?;
        let source_vectors = self.load_text_vectors(&source_store)?;
        let target_store = self.load_downstream_store()?;
        let target_vectors = self.load_text_vectors(&target_store)?;
        let adapter = AdapterParams::load(self.adapter_ckpt())?;
        let model = SeqModelParams::load(self.model_ckpt())?;

        let backend = self.cfg.matcher.resolve_backend(source_store.num_items());
        let generated = match backend {
            MatcherBackend::Exact | MatcherBackend::Auto => idp_core::matcher::generate_cross_domain(
                &source_vectors,
                &model.item_embeddings,
                &target_vectors,
                &adapter,
                self.cfg.matcher.m,
                self.cfg.cdim.similarity,
            )?,
            MatcherBackend::Ann => {
                self.require_artifact(&self.index_file(), Stage::BuildIndex)?;
                Self::digest_into(&mut inputs, "index.ann", &self.index_file())?;
                let index = AnnIndex::read_from(self.index_file())?;
                generate_cross_domain_ann(
                    &index,
                    &model.item_embeddings,
                    &target_vectors,
                    &adapter,
                    self.cfg.matcher.m,
                )?
            }
        };

        let dir = self.stage_dir(Stage::GenEmbeddings);
        std::fs::create_dir_all(&dir)?;
        let mut ck = Checkpoint::new();
        ck.push_matrix("E_T", &generated.embeddings);
        ck.write_to(self.generated_ckpt())?;
        let assignment = NeighborAssignment {
            rows: generated
                .provenance
                .iter()
                .map(|p| (p.target, p.neighbors.clone()))
                .collect(),
        };
        assignment.write_tsv(self.assignment_tsv())?;
        generated.write_provenance_tsv(self.provenance_tsv())?;

        let mut outputs = BTreeMap::new();
        Self::digest_into(&mut outputs, "generated.ckpt", &self.generated_ckpt())?;
        Self::digest_into(&mut outputs, "assignment.tsv", &self.assignment_tsv())?;
        Self::digest_into(&mut outputs, "provenance.tsv", &self.provenance_tsv())?;
        self.record_stage(Stage::GenEmbeddings, inputs, outputs, started)
    }

    pub fn cmd_deploy(&self) -> Result<StageRecord> {
        let started = Instant::now();
        self.require_artifact(&self.generated_ckpt(), Stage::GenEmbeddings)?;
        self.require_artifact(&self.model_ckpt(), Stage::Pretrain)?;
        let mut inputs = BTreeMap::new();
        Self::digest_into(&mut inputs, "generated.ckpt", &self.generated_ckpt())?;
        Self::digest_into(&mut inputs, "model.ckpt", &self.model_ckpt())?;

        let pretrained = SeqModelParams::load(self.model_ckpt())?;
        let generated = Checkpoint::read_from(self.generated_ckpt())?;
        let target_store = self.load_downstream_store()?;
        let split = self.downstream_split(&target_store)?;
        let e_t = generated.require_matrix("E_T", split.num_items, pretrained.shape.dim)?;

        let text = if self.cfg.transfer.use_text {
            Some(self.load_text_vectors(&target_store)?)
        } else {
            None
        };
        let opts = DeployOptions {
            mode: self.cfg.transfer.mode,
            use_text: self.cfg.transfer.use_text,
            text_projection: self.cfg.transfer.text_projection,
            retrain_kind: self.cfg.transfer.retrain_backend,
            train: self.cfg.transfer.train_options(self.cfg.run.seed),
        };
        let (deployed, train_report) = deploy(&pretrained, &e_t, &split, text.as_ref(), &opts)?;
        let dir = self.stage_dir(Stage::Deploy);
        std::fs::create_dir_all(&dir)?;
        deployed.save(self.deployed_ckpt())?;

        let mut summary = String::new();
        use std::fmt::Write as _;
        let _ = writeln!(summary, "# stage=deploy");
        let _ = writeln!(summary, "# mode={}", self.cfg.transfer.mode.name());
        let _ = writeln!(summary, "# seed={}", self.cfg.run.seed);
        match &train_report {
            Some(r) => {
                let _ = writeln!(summary, "epochs_run\t{}", r.epochs_run);
                let _ = writeln!(
                    summary,
                    "best_epoch\t{}",
                    r.best_epoch.map_or("none".to_string(), |e| e.to_string())
                );
                let _ = writeln!(summary, "best_valid_ndcg5\t{:.6}", r.best_valid_ndcg);
                let _ = writeln!(summary, "diverged\t{}", r.diverged);
            }
            None => {
                let _ = writeln!(summary, "epochs_run\t0");
            }
        }
        std::fs::write(self.deploy_report(), summary)?;

        let mut outputs = BTreeMap::new();
        Self::digest_into(&mut outputs, "deployed.ckpt", &self.deployed_ckpt())?;
        Self::digest_into(&mut outputs, "train_report.tsv", &self.deploy_report())?;
        self.record_stage(Stage::Deploy, inputs, outputs, started)
    }

    pub fn cmd_eval(&self) -> Result<StageRecord> {
        let started = Instant::now();
        self.require_artifact(&self.deployed_ckpt(), Stage::Deploy)?;
        let mut inputs = BTreeMap::new();
        Self::digest_into(&mut inputs, "deployed.ckpt", &self.deployed_ckpt())?;

        let report = self.evaluate_deployed()?;
        let dir = self.stage_dir(Stage::Eval);
        std::fs::create_dir_all(&dir)?;
        report.write(self.eval_report(), ReportFormat::Tsv)?;

        let mut outputs = BTreeMap::new();
        Self::digest_into(&mut outputs, "report.tsv", &self.eval_report())?;
        self.record_stage(Stage::Eval, inputs, outputs, started)
    }

    /// Rank the downstream test targets under the deployed model and the
    /// configured input composition.
    pub fn evaluate_deployed(&self) -> Result<EvalReport> {
        let deployed = SeqModelParams::load(self.deployed_ckpt())?;
        let target_store = self.load_downstream_store()?;
        let split = self.downstream_split(&target_store)?;

        let text_table = self.text_table_for(&deployed, &target_store)?;
        let scorer = Scorer {
            params: &deployed,
            text_add: text_table.as_ref(),
        };
        let ranked = rank_users(&scorer, &split, EvalTarget::Test)?;
        let mut meta = BTreeMap::new();
        meta.insert("stage".into(), "eval".into());
        meta.insert("mode".into(), self.cfg.transfer.mode.name().to_string());
        meta.insert("seed".into(), self.cfg.run.seed.to_string());
        meta.insert("use_text".into(), self.cfg.transfer.use_text.to_string());
        meta.insert("users".into(), ranked.users.len().to_string());
        meta.insert("checkpoint".into(), digest_file(self.deployed_ckpt())?);
        Ok(build_report(&ranked, meta)?)
    }

    /// The additive text table for composed scoring, when enabled: a
    /// learned projection if the deployed model carries one, else a PCA
    /// fit on the pre-training vectors.
    pub fn text_table_for(
        &self,
        deployed: &SeqModelParams,
        target_store: &InteractionStore,
    ) -> Result<Option<Matrix>> {
        if !self.cfg.transfer.use_text {
            return Ok(None);
        }
        let target_vectors = self.load_text_vectors(target_store)?;
        match (&deployed.text_proj, self.cfg.transfer.text_projection) {
            (Some(_), _) => {
                let dense = target_vectors.dense();
                let inputs = idp_core::seqmodel::TextTrainInputs {
                    raw: &dense.0,
                    present: &dense.1,
                };
                Ok(Some(idp_core::seqmodel::learned_text_table(deployed, &inputs)))
            }
            (None, TextProjectionKind::Pca) => {
                let source_store = self.load_pretrain_store()?;
                let source_vectors = self.load_text_vectors(&source_store)?;
                let (dense_src, present) = source_vectors.dense();
                let rows: Vec<Vec<f64>> = (0..dense_src.rows())
                    .filter(|&i| present[i])
                    .map(|i| dense_src.row(i).to_vec())
                    .collect();
                let pca = fit_pca(&Matrix::from_rows(&rows), deployed.shape.dim)?;
                let (table, _missing) = pca_text_table(&pca, &target_vectors, deployed.shape.dim)?;
                Ok(Some(table))
            }
            (None, TextProjectionKind::Learned) => bail!(
                "transfer.text_projection = \"learned\" but the deployed checkpoint has no text projection (train with finetune-all or retrain-encoder)"
            ),
        }
    }
}

/// Cross-domain generation through a frozen approximate index.
pub fn generate_cross_domain_ann(
    index: &AnnIndex,
    source_embeddings: &Matrix,
    target_vectors: &TextVectorStore,
    adapter: &AdapterParams,
    m: usize,
) -> Result<GeneratedEmbeddings> {
    let d = source_embeddings.cols();
    let n_targets = target_vectors.num_items();
    let mut targets = Vec::with_capacity(n_targets);
    let mut embeddings = Matrix::zeros(n_targets, d);
    let mut provenance = Vec::with_capacity(n_targets);
    let mut missing = 0usize;
    for v in 0..n_targets as u32 {
        targets.push(v);
        match target_vectors.get(v) {
            Some(raw) => {
                let adapted =
                    idp_core::cdim::encode(adapter, raw, idp_core::cdim::EncodeMode::Infer, None)?;
                let neighbors: Vec<Neighbor> = index.search(&adapted, m)?;
                let (weights, fallback) = aggregation_weights(&neighbors);
                let row = embeddings.row_mut(v as usize);
                for (n, &w) in neighbors.iter().zip(&weights) {
                    let src = source_embeddings.row(n.source as usize);
                    for (r, &s) in row.iter_mut().zip(src) {
                        *r += w * s;
                    }
                }
                provenance.push(RowProvenance {
                    target: v,
                    neighbors,
                    weights,
                    fallback,
                });
            }
            None => {
                missing += 1;
                provenance.push(RowProvenance {
                    target: v,
                    neighbors: Vec::new(),
                    weights: Vec::new(),
                    fallback: Fallback::MissingVector,
                });
            }
        }
    }
    if missing > 0 {
        log::warn!("{missing} target items lack vectors; their generated rows are zero");
    }
    Ok(GeneratedEmbeddings {
        targets,
        embeddings,
        provenance,
    })
}
