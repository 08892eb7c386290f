//! File-backed stages over a workspace directory. Each stage reads the
//! artifacts of earlier stages, writes its own, and records a manifest of
//! input and output digests plus a hash of its configuration. A stage whose
//! manifest still matches is skipped unless forced.

use std::collections::BTreeMap;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::claims::{self, parse_code_roles, CodeRoles, PatientRecord, Vocabulary};
use crate::cohort::Split;
use crate::eval::{self, html, FprPoint, Scored};
use crate::features::{DesignMatrix, FeatureVocabulary};
use crate::fingerprint::sha256_hex;
use crate::glm::{GlmError, GridResult, LinearModel, ThresholdRule};
use crate::hapi::{write_inference_csv, HapiConfig, Identifier};
use crate::risk::{GroupModels, HistoryGroup, RiskTriage};
use crate::synth::{self, GeneratorConfig, GroundTruth};
use crate::workflow::{self, Cohorts, EvalPatient, FeatureSet, WorkflowError};

pub mod paths {
    pub const VOCABULARY: &str = "claims/vocabulary.csv";
    pub const CLAIMS: &str = "claims/claims.csv";
    pub const PATIENTS: &str = "claims/patients.csv";
    pub const GROUND_TRUTH: &str = "claims/ground_truth.csv";

    pub const ROLES: &str = "cohort/code_roles.toml";
    pub const COHORTS: &str = "cohort/cohorts.json";
    pub const ID_SPLITS: &str = "cohort/identification_splits.csv";
    pub const RISK_SPLITS: &str = "cohort/risk_splits.csv";

    pub const ID_VOCAB: &str = "features/id_vocabulary.json";
    pub const ID_TRAIN: &str = "features/id_train.txt";
    pub const ID_VAL: &str = "features/id_val.txt";
    pub const ID_TEST: &str = "features/id_test.txt";
    pub const RISK_VOCAB: &str = "features/risk_vocabulary.json";
    pub const RISK_TRAIN: &str = "features/risk_train.txt";
    pub const RISK_VAL: &str = "features/risk_val.txt";
    pub const RISK_TEST: &str = "features/risk_test.txt";
    pub const RISK_TRAIN_GROUPS: &str = "features/risk_train_groups.csv";

    pub const ID_MODEL: &str = "models/id_model.json";
    pub const ID_HAPI: &str = "models/id_hapi.json";
    pub const RISK_LASSO: &str = "models/risk_lasso.json";
    pub const RISK_ELASTIC_NET: &str = "models/risk_elastic_net.json";
    pub const RISK_GROUPS: &str = "models/risk_groups.json";

    pub const ID_REPORTS: &str = "reports/id";
    pub const RISK_REPORTS: &str = "reports/risk";
    pub const FAIRNESS_REPORTS: &str = "reports/fairness";
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Synth,
    Cohort,
    Features,
    TrainId,
    TrainRisk,
    EvalId,
    EvalRisk,
    EvalFairness,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::Cohort => "cohort",
            Stage::Features => "features",
            Stage::TrainId => "train_id",
            Stage::TrainRisk => "train_risk",
            Stage::EvalId => "eval_id",
            Stage::EvalRisk => "eval_risk",
            Stage::EvalFairness => "eval_fairness",
        }
    }

    /// Command that produces this stage's artifacts.
    pub fn command(self) -> &'static str {
        match self {
            Stage::Synth => "synth generate",
            Stage::Cohort => "cohort build",
            Stage::Features => "features extract",
            Stage::TrainId => "train id",
            Stage::TrainRisk => "train risk",
            Stage::EvalId => "eval id",
            Stage::EvalRisk => "eval risk",
            Stage::EvalFairness => "eval fairness",
        }
    }

    fn producing(path: &str) -> Option<Stage> {
        let p = path.replace('\\', "/");
        if p.starts_with("claims/") {
            Some(Stage::Synth)
        } else if p.starts_with("cohort/") {
            Some(Stage::Cohort)
        } else if p.starts_with("features/") {
            Some(Stage::Features)
        } else if p.starts_with("models/id_") {
            Some(Stage::TrainId)
        } else if p.starts_with("models/risk_") {
            Some(Stage::TrainRisk)
        } else {
            None
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("missing artifact `{path}` needed by `{stage}`; run `{producer}` first")]
    MissingArtifact {
        stage: &'static str,
        path: String,
        producer: &'static str,
    },
    #[error("fingerprint mismatch: `{artifact}` has {found} but `{reference}` has {expected}")]
    Fingerprint {
        artifact: String,
        found: String,
        reference: String,
        expected: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error(transparent)]
    Claims(#[from] claims::ClaimsError),
    #[error(transparent)]
    Synth(#[from] synth::SynthError),
    #[error(transparent)]
    Workflow(#[from] WorkflowError),
    #[error(transparent)]
    Model(#[from] GlmError),
    #[error(transparent)]
    Hapi(#[from] crate::hapi::HapiError),
}

pub type Result<T> = std::result::Result<T, PipelineError>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactDigest {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: Stage,
    pub seed: Option<u64>,
    pub config_hash: String,
    pub config: serde_json::Value,
    pub inputs: Vec<ArtifactDigest>,
    pub outputs: Vec<ArtifactDigest>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Ran,
    UpToDate,
}

#[derive(Debug, Clone)]
pub struct StageReport {
    pub status: StageStatus,
    pub manifest: Manifest,
}

/// A directory holding every stage's artifacts and manifests.
#[derive(Debug, Clone)]
pub struct Workspace {
    pub root: PathBuf,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn digest(path: &str, bytes: &[u8]) -> ArtifactDigest {
    ArtifactDigest {
        path: path.to_string(),
        sha256: sha256_hex(bytes),
        bytes: bytes.len() as u64,
    }
}

type Outputs = BTreeMap<String, Vec<u8>>;

impl Workspace {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Workspace { root: root.into() }
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn manifest_path(&self, stage: Stage) -> PathBuf {
        self.root
            .join("manifests")
            .join(format!("{}.json", stage.as_str()))
    }

    pub fn manifest(&self, stage: Stage) -> Option<Manifest> {
        let text = fs::read_to_string(self.manifest_path(stage)).ok()?;
        serde_json::from_str(&text).ok()
    }

    pub fn exists(&self, rel: &str) -> bool {
        self.path(rel).is_file()
    }

    fn read_input(&self, stage: Stage, rel: &str) -> Result<Vec<u8>> {
        let p = self.path(rel);
        match fs::read(&p) {
            Ok(b) => Ok(b),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(self.missing(stage, rel)),
            Err(e) => Err(io_err(&p)(e)),
        }
    }

    fn missing(&self, stage: Stage, rel: &str) -> PipelineError {
        PipelineError::MissingArtifact {
            stage: stage.command(),
            path: rel.to_string(),
            producer: Stage::producing(rel).map_or("the producing stage", Stage::command),
        }
    }

    fn read_text(&self, stage: Stage, rel: &str) -> Result<String> {
        String::from_utf8(self.read_input(stage, rel)?).map_err(|e| PipelineError::Parse {
            path: rel.to_string(),
            message: e.to_string(),
        })
    }

    fn read_json<T: serde::de::DeserializeOwned>(&self, stage: Stage, rel: &str) -> Result<T> {
        serde_json::from_slice(&self.read_input(stage, rel)?).map_err(|e| PipelineError::Parse {
            path: rel.to_string(),
            message: e.to_string(),
        })
    }

    /// Runs `body` unless the stored manifest matches the current inputs,
    /// configuration and outputs.
    fn run_stage<C: Serialize>(
        &self,
        stage: Stage,
        inputs: &[&str],
        config: &C,
        seed: Option<u64>,
        force: bool,
        body: impl FnOnce() -> Result<Outputs>,
    ) -> Result<StageReport> {
        let mut input_digests = Vec::new();
        for rel in inputs {
            input_digests.push(digest(rel, &self.read_input(stage, rel)?));
        }
        let config = serde_json::to_value(config).expect("stage configs serialize");
        let config_hash = sha256_hex(config.to_string().as_bytes());

        if !force {
            if let Some(m) = self.manifest(stage) {
                let current = m.config_hash == config_hash
                    && m.inputs == input_digests
                    && m.outputs.iter().all(|o| {
                        fs::read(self.path(&o.path)).is_ok_and(|b| sha256_hex(&b) == o.sha256)
                    });
                if current {
                    return Ok(StageReport {
                        status: StageStatus::UpToDate,
                        manifest: m,
                    });
                }
            }
        }

        let outputs = body()?;
        let mut output_digests = Vec::new();
        for (rel, bytes) in &outputs {
            let p = self.path(rel);
            if let Some(dir) = p.parent() {
                fs::create_dir_all(dir).map_err(io_err(dir))?;
            }
            fs::write(&p, bytes).map_err(io_err(&p))?;
            output_digests.push(digest(rel, bytes));
        }
        let manifest = Manifest {
            stage,
            seed,
            config_hash,
            config,
            inputs: input_digests,
            outputs: output_digests,
        };
        let mp = self.manifest_path(stage);
        fs::create_dir_all(mp.parent().expect("manifest dir")).map_err(io_err(&mp))?;
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        fs::write(&mp, text + "\n").map_err(io_err(&mp))?;
        Ok(StageReport {
            status: StageStatus::Ran,
            manifest,
        })
    }

    // ------------------------------------------------------------ loaders

    pub fn load_vocabulary(&self) -> Result<Vocabulary> {
        Ok(claims::read_vocabulary(
            &self.read_input(Stage::Cohort, paths::VOCABULARY)?[..],
        )?)
    }

    /// Claims joined with demographics, ordered by patient id.
    pub fn load_records(&self) -> Result<(Vocabulary, Vec<PatientRecord>)> {
        let vocab = self.load_vocabulary()?;
        let mut load =
            claims::read_claims(&self.read_input(Stage::Cohort, paths::CLAIMS)?[..], &vocab)?;
        if self.exists(paths::PATIENTS) {
            let demo =
                claims::read_patients(&self.read_input(Stage::Cohort, paths::PATIENTS)?[..])?;
            load.attach_demographics(&demo);
        }
        Ok((vocab, load.records))
    }

    pub fn load_roles(&self) -> Result<CodeRoles> {
        Ok(parse_code_roles(
            &self.read_text(Stage::Features, paths::ROLES)?,
        )?)
    }

    pub fn load_cohorts(&self) -> Result<Cohorts> {
        self.read_json(Stage::Features, paths::COHORTS)
    }

    pub fn load_ground_truth(&self) -> Result<Option<GroundTruth>> {
        if !self.exists(paths::GROUND_TRUTH) {
            return Ok(None);
        }
        let bytes = self.read_input(Stage::EvalId, paths::GROUND_TRUTH)?;
        Ok(Some(GroundTruth::read(&bytes[..])?))
    }

    fn load_feature_vocab(&self, stage: Stage, rel: &str) -> Result<FeatureVocabulary> {
        self.read_json(stage, rel)
    }

    fn load_matrix(
        &self,
        stage: Stage,
        rel: &str,
        vocab_rel: &str,
        vocab: &FeatureVocabulary,
    ) -> Result<DesignMatrix> {
        let bytes = self.read_input(stage, rel)?;
        let m =
            DesignMatrix::read(BufReader::new(&bytes[..])).map_err(|e| PipelineError::Parse {
                path: rel.to_string(),
                message: e.to_string(),
            })?;
        check_fingerprint(rel, &m.fingerprint, vocab_rel, vocab.fingerprint())?;
        Ok(m)
    }

    fn load_model(
        &self,
        stage: Stage,
        rel: &str,
        vocab_rel: &str,
        vocab: &FeatureVocabulary,
    ) -> Result<(LinearModel, Option<GridResult>)> {
        let (m, grid) = LinearModel::from_json(&self.read_text(stage, rel)?)?;
        check_fingerprint(rel, &m.fingerprint, vocab_rel, vocab.fingerprint())?;
        Ok((m, grid))
    }

    fn load_features(&self, stage: Stage, risk: bool) -> Result<FeatureSet> {
        let (v, tr, va, te) = if risk {
            (
                paths::RISK_VOCAB,
                paths::RISK_TRAIN,
                paths::RISK_VAL,
                paths::RISK_TEST,
            )
        } else {
            (
                paths::ID_VOCAB,
                paths::ID_TRAIN,
                paths::ID_VAL,
                paths::ID_TEST,
            )
        };
        let vocab = self.load_feature_vocab(stage, v)?;
        let (concepts, roles) = (self.load_vocabulary()?, self.load_roles()?);
        let filter = if risk {
            workflow::risk_filter(&concepts, &roles)
        } else {
            workflow::identification_filter(&concepts, &roles)
        };
        Ok(FeatureSet {
            train: self.load_matrix(stage, tr, v, &vocab)?,
            val: self.load_matrix(stage, va, v, &vocab)?,
            test: self.load_matrix(stage, te, v, &vocab)?,
            vocab,
            filter,
        })
    }

    /// The trained identifier with its HAPI settings.
    pub fn load_identifier(&self) -> Result<Identifier> {
        let vocab = self.load_feature_vocab(Stage::EvalId, paths::ID_VOCAB)?;
        let (model, _) =
            self.load_model(Stage::EvalId, paths::ID_MODEL, paths::ID_VOCAB, &vocab)?;
        let config: HapiConfig = self.read_json(Stage::EvalId, paths::ID_HAPI)?;
        let roles = self.load_roles()?;
        let filter = workflow::identification_filter(&self.load_vocabulary()?, &roles);
        Ok(Identifier::new(model, vocab, filter, roles, config)?)
    }

    /// Risk triage plus the elastic-net comparison model.
    pub fn load_triage(&self) -> Result<(RiskTriage, LinearModel)> {
        let stage = Stage::EvalRisk;
        let vocab = self.load_feature_vocab(stage, paths::RISK_VOCAB)?;
        let (lasso, _) = self.load_model(stage, paths::RISK_LASSO, paths::RISK_VOCAB, &vocab)?;
        let (en, _) = self.load_model(stage, paths::RISK_ELASTIC_NET, paths::RISK_VOCAB, &vocab)?;
        let groups: GroupModels = self.read_json(stage, paths::RISK_GROUPS)?;
        for m in groups.models.iter().flatten() {
            check_fingerprint(
                paths::RISK_GROUPS,
                &m.fingerprint,
                paths::RISK_VOCAB,
                vocab.fingerprint(),
            )?;
        }
        let roles = self.load_roles()?;
        let filter = workflow::risk_filter(&self.load_vocabulary()?, &roles);
        Ok((RiskTriage::new(lasso, groups, vocab, filter, roles)?, en))
    }

    // ------------------------------------------------------------- stages

    pub fn synth(&self, config: &GeneratorConfig, force: bool) -> Result<StageReport> {
        config.validate()?;
        self.run_stage(Stage::Synth, &[], config, Some(config.seed), force, || {
            let corpus = synth::generate(config)?;
            let mut out = Outputs::new();
            let mut buf = Vec::new();
            claims::write_vocabulary(&corpus.vocabulary, &mut buf)?;
            out.insert(paths::VOCABULARY.into(), std::mem::take(&mut buf));
            claims::write_claims(&corpus.records, &corpus.vocabulary, &mut buf)?;
            out.insert(paths::CLAIMS.into(), std::mem::take(&mut buf));
            claims::write_patients(&corpus.records, &mut buf)?;
            out.insert(paths::PATIENTS.into(), std::mem::take(&mut buf));
            corpus
                .truth
                .write(&mut buf)
                .map_err(|e| PipelineError::Parse {
                    path: paths::GROUND_TRUTH.into(),
                    message: e.to_string(),
                })?;
            out.insert(paths::GROUND_TRUTH.into(), buf);
            Ok(out)
        })
    }

    pub fn cohort(&self, options: &CohortOptions, force: bool) -> Result<StageReport> {
        let roles_text = match &options.roles {
            Some(p) => fs::read_to_string(p).map_err(io_err(p))?,
            None => CodeRoles::default_config_text().to_string(),
        };
        let roles = parse_code_roles(&roles_text)?;
        let config = CohortStageConfig {
            seed: options.seed,
            roles_sha256: sha256_hex(roles_text.as_bytes()),
        };
        let mut inputs = vec![paths::VOCABULARY, paths::CLAIMS];
        if self.exists(paths::PATIENTS) {
            inputs.push(paths::PATIENTS);
        }
        self.run_stage(
            Stage::Cohort,
            &inputs,
            &config,
            Some(options.seed),
            force,
            || {
                let (_, records) = self.load_records()?;
                let cohorts = workflow::build_cohorts(&records, &roles, options.seed)?;
                let mut out = Outputs::new();
                out.insert(paths::ROLES.into(), roles_text.clone().into_bytes());
                out.insert(paths::COHORTS.into(), json_bytes(&cohorts));
                for (rel, splits) in [
                    (paths::ID_SPLITS, &cohorts.identification.splits),
                    (paths::RISK_SPLITS, &cohorts.risk.splits),
                ] {
                    let mut buf = Vec::new();
                    splits
                        .write_membership(&mut buf)
                        .map_err(|e| PipelineError::Parse {
                            path: rel.into(),
                            message: e.to_string(),
                        })?;
                    out.insert(rel.into(), buf);
                }
                Ok(out)
            },
        )
    }

    pub fn features(&self, options: &FeatureOptions, force: bool) -> Result<StageReport> {
        let inputs = [
            paths::VOCABULARY,
            paths::CLAIMS,
            paths::ROLES,
            paths::COHORTS,
        ];
        let inputs: Vec<&str> = inputs
            .into_iter()
            .chain(self.exists(paths::PATIENTS).then_some(paths::PATIENTS))
            .collect();
        self.run_stage(
            Stage::Features,
            &inputs,
            options,
            Some(options.seed),
            force,
            || {
                let (vocab, records) = self.load_records()?;
                let roles = self.load_roles()?;
                let cohorts = self.load_cohorts()?;
                let id = workflow::identification_features(
                    &records,
                    &vocab,
                    &roles,
                    &cohorts.identification,
                )?;
                let risk = workflow::risk_features(
                    &records,
                    &vocab,
                    &roles,
                    &cohorts.risk,
                    options.risk_cutoffs_per_episode,
                    options.seed,
                )?;
                let groups =
                    workflow::row_history_groups(&risk.train, &records, &cohorts.risk, &roles)?;
                let mut out = Outputs::new();
                for (set, v, files) in [
                    (
                        &id,
                        paths::ID_VOCAB,
                        [paths::ID_TRAIN, paths::ID_VAL, paths::ID_TEST],
                    ),
                    (
                        &risk,
                        paths::RISK_VOCAB,
                        [paths::RISK_TRAIN, paths::RISK_VAL, paths::RISK_TEST],
                    ),
                ] {
                    out.insert(v.into(), json_bytes(&set.vocab));
                    for (rel, split) in
                        files
                            .into_iter()
                            .zip([Split::Train, Split::Val, Split::Test])
                    {
                        let mut buf = Vec::new();
                        set.split(split)
                            .write(&mut buf, file_name(v))
                            .map_err(io_err(Path::new(rel)))?;
                        out.insert(rel.into(), buf);
                    }
                }
                let mut buf = String::from("row,patient_id,history_group\n");
                for (i, (row, g)) in risk.train.rows.iter().zip(&groups).enumerate() {
                    buf.push_str(&format!("{i},{},{}\n", row.patient_id, g.as_str()));
                }
                out.insert(paths::RISK_TRAIN_GROUPS.into(), buf.into_bytes());
                Ok(out)
            },
        )
    }

    pub fn train_id(&self, options: &TrainIdOptions, force: bool) -> Result<StageReport> {
        let inputs = [
            paths::VOCABULARY,
            paths::ROLES,
            paths::ID_VOCAB,
            paths::ID_TRAIN,
            paths::ID_VAL,
        ];
        self.run_stage(Stage::TrainId, &inputs, options, None, force, || {
            let features = self.load_features(Stage::TrainId, false)?;
            let t = workflow::train_identification(
                &features,
                &crate::glm::identification_grid(),
                options.threshold_rule,
            )?;
            let tau = t.model.threshold.expect("threshold selected");
            let hapi = HapiConfig {
                tau,
                ..options.hapi
            };
            hapi.validate()?;
            let mut out = Outputs::new();
            out.insert(
                paths::ID_MODEL.into(),
                (t.model.to_json(Some(&t.grid)) + "\n").into_bytes(),
            );
            out.insert(paths::ID_HAPI.into(), json_bytes(&hapi));
            Ok(out)
        })
    }

    pub fn train_risk(&self, force: bool) -> Result<StageReport> {
        let inputs = [
            paths::VOCABULARY,
            paths::ROLES,
            paths::RISK_VOCAB,
            paths::RISK_TRAIN,
            paths::RISK_VAL,
            paths::RISK_TRAIN_GROUPS,
        ];
        self.run_stage(Stage::TrainRisk, &inputs, &(), None, force, || {
            let features = self.load_features(Stage::TrainRisk, true)?;
            let groups = self.load_train_groups(features.train.len())?;
            let t = workflow::train_risk(&features, &groups)?;
            let mut out = Outputs::new();
            out.insert(
                paths::RISK_LASSO.into(),
                (t.lasso.to_json(Some(&t.lasso_grid)) + "\n").into_bytes(),
            );
            out.insert(
                paths::RISK_ELASTIC_NET.into(),
                (t.elastic_net.to_json(Some(&t.elastic_net_grid)) + "\n").into_bytes(),
            );
            out.insert(paths::RISK_GROUPS.into(), json_bytes(&t.groups));
            Ok(out)
        })
    }

    fn load_train_groups(&self, expected: usize) -> Result<Vec<HistoryGroup>> {
        let text = self.read_text(Stage::TrainRisk, paths::RISK_TRAIN_GROUPS)?;
        let bad = |message: String| PipelineError::Parse {
            path: paths::RISK_TRAIN_GROUPS.into(),
            message,
        };
        let groups = text
            .lines()
            .skip(1)
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                l.rsplit(',')
                    .next()
                    .unwrap_or("")
                    .parse::<HistoryGroup>()
                    .map_err(|e| bad(e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        if groups.len() != expected {
            return Err(bad(format!(
                "{} groups for {expected} training rows",
                groups.len()
            )));
        }
        Ok(groups)
    }

    pub fn eval_id(&self, options: &EvalIdOptions, force: bool) -> Result<StageReport> {
        let mut inputs = vec![
            paths::VOCABULARY,
            paths::CLAIMS,
            paths::ROLES,
            paths::COHORTS,
            paths::ID_VOCAB,
            paths::ID_MODEL,
            paths::ID_HAPI,
        ];
        for p in [paths::PATIENTS, paths::GROUND_TRUTH] {
            if self.exists(p) {
                inputs.push(p);
            }
        }
        self.run_stage(Stage::EvalId, &inputs, options, None, force, || {
            let (_, records) = self.load_records()?;
            let cohorts = self.load_cohorts()?;
            let truth = self.load_ground_truth()?;
            let identifier = self.load_identifier()?;
            let by_id = workflow::index_records(&records);
            let patients = cohorts
                .identification
                .splits
                .members(Split::Test)
                .into_iter()
                .map(|pid| {
                    let record = by_id.get(&pid).ok_or_else(|| {
                        WorkflowError::Missing(format!("cohort patient {pid} has no record"))
                    })?;
                    let (true_start, true_end) = match &truth {
                        Some(t) => t.get(&pid).map_or((None, None), |r| (r.t_start, r.t_end)),
                        None => cohorts
                            .identification
                            .episodes
                            .get(&pid)
                            .map_or((None, None), |e| (Some(e.t_start), Some(e.t_end))),
                    };
                    Ok(EvalPatient {
                        record,
                        true_start,
                        true_end,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let taus = options
                .taus
                .clone()
                .unwrap_or_else(|| workflow::tau_sweep(identifier.config.tau));
            let e = workflow::evaluate_identification(
                &identifier,
                &patients,
                &workflow::default_week_grid(),
                &taus,
            );
            id_reports(
                &e.delays,
                &e.sweep,
                &e.timelines,
                options.histogram_bin_days,
                identifier.config.tau,
            )
        })
    }

    pub fn eval_risk(&self, force: bool) -> Result<StageReport> {
        let mut inputs = vec![
            paths::VOCABULARY,
            paths::CLAIMS,
            paths::ROLES,
            paths::COHORTS,
            paths::RISK_VOCAB,
            paths::RISK_TEST,
            paths::RISK_LASSO,
            paths::RISK_ELASTIC_NET,
            paths::RISK_GROUPS,
        ];
        if self.exists(paths::PATIENTS) {
            inputs.push(paths::PATIENTS);
        }
        self.run_stage(Stage::EvalRisk, &inputs, &(), None, force, || {
            let (_, records) = self.load_records()?;
            let cohorts = self.load_cohorts()?;
            let (triage, en) = self.load_triage()?;
            let vocab = &triage.vocab;
            let test =
                self.load_matrix(Stage::EvalRisk, paths::RISK_TEST, paths::RISK_VOCAB, vocab)?;
            let features = FeatureSet {
                train: test.clone_header(),
                val: test.clone_header(),
                test,
                vocab: triage.vocab.clone(),
                filter: triage.filter.clone(),
            };
            let e = workflow::evaluate_risk(
                &triage,
                &en,
                &features,
                &records,
                &cohorts.risk,
                &workflow::default_week_grid(),
            )?;
            risk_reports(&e)
        })
    }

    pub fn eval_fairness(&self, options: &FairnessOptions, force: bool) -> Result<StageReport> {
        let inputs = [
            paths::VOCABULARY,
            paths::CLAIMS,
            paths::PATIENTS,
            paths::RISK_VOCAB,
            paths::RISK_TEST,
            paths::RISK_LASSO,
        ];
        self.run_stage(Stage::EvalFairness, &inputs, options, None, force, || {
            let (_, records) = self.load_records()?;
            let vocab = self.load_feature_vocab(Stage::EvalFairness, paths::RISK_VOCAB)?;
            let (lasso, _) = self.load_model(
                Stage::EvalFairness,
                paths::RISK_LASSO,
                paths::RISK_VOCAB,
                &vocab,
            )?;
            let test = self.load_matrix(
                Stage::EvalFairness,
                paths::RISK_TEST,
                paths::RISK_VOCAB,
                &vocab,
            )?;
            let scored: Vec<Scored> = test
                .rows
                .iter()
                .map(|r| workflow::scored_row(&lasso, r))
                .collect();
            let report =
                workflow::fairness(&scored, &records, lasso.n_classes, options.min_group_size);
            fairness_reports(&report)
        })
    }

    /// Every stage in order.
    pub fn run_all(&self, config: &GeneratorConfig, force: bool) -> Result<Vec<StageReport>> {
        Ok(vec![
            self.synth(config, force)?,
            self.cohort(
                &CohortOptions {
                    seed: config.seed,
                    roles: None,
                },
                force,
            )?,
            self.features(&FeatureOptions::new(config.seed), force)?,
            self.train_id(&TrainIdOptions::default(), force)?,
            self.train_risk(force)?,
            self.eval_id(&EvalIdOptions::default(), force)?,
            self.eval_risk(force)?,
            self.eval_fairness(&FairnessOptions::default(), force)?,
        ])
    }
}

fn check_fingerprint(artifact: &str, found: &str, reference: &str, expected: &str) -> Result<()> {
    if found == expected {
        Ok(())
    } else {
        Err(PipelineError::Fingerprint {
            artifact: artifact.to_string(),
            found: found.to_string(),
            reference: reference.to_string(),
            expected: expected.to_string(),
        })
    }
}

fn json_bytes<T: Serialize>(v: &T) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(v).expect("artifact serializes");
    s.push('\n');
    s.into_bytes()
}

fn file_name(rel: &str) -> &str {
    rel.rsplit('/').next().unwrap_or(rel)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortOptions {
    pub seed: u64,
    /// Code-role TOML; the built-in roles when absent.
    pub roles: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CohortStageConfig {
    seed: u64,
    roles_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureOptions {
    pub seed: u64,
    pub risk_cutoffs_per_episode: usize,
}

impl FeatureOptions {
    pub fn new(seed: u64) -> Self {
        FeatureOptions {
            seed,
            risk_cutoffs_per_episode: workflow::RISK_CUTOFFS_PER_EPISODE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct TrainIdOptions {
    pub threshold_rule: ThresholdRule,
    /// Smoothing and confirmation settings; `tau` is replaced by the
    /// selected threshold.
    pub hapi: HapiConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalIdOptions {
    /// Thresholds for the false-positive sweep; five around the trained
    /// threshold when absent.
    pub taus: Option<Vec<f64>>,
    pub histogram_bin_days: i64,
}

impl Default for EvalIdOptions {
    fn default() -> Self {
        EvalIdOptions {
            taus: None,
            histogram_bin_days: 14,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FairnessOptions {
    pub min_group_size: usize,
}

impl Default for FairnessOptions {
    fn default() -> Self {
        FairnessOptions {
            min_group_size: workflow::DEFAULT_MIN_GROUP_SIZE,
        }
    }
}

// ------------------------------------------------------------- reports

fn csv_bytes(f: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) -> Vec<u8> {
    let mut buf = Vec::new();
    f(&mut buf).expect("writing to memory");
    buf
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |v| format!("{v:.3}"))
}

fn id_reports(
    delays: &eval::DelayStats,
    sweep: &[FprPoint],
    timelines: &[crate::hapi::PatientTimeline],
    bin_days: i64,
    tau: f64,
) -> Result<Outputs> {
    let dir = paths::ID_REPORTS;
    let mut out = Outputs::new();
    out.insert(
        format!("{dir}/summary.csv"),
        csv_bytes(|w| delays.write_summary_csv(w)),
    );
    out.insert(
        format!("{dir}/delays.csv"),
        csv_bytes(|w| delays.write_delays_csv(w)),
    );
    out.insert(
        format!("{dir}/delay_histogram.csv"),
        csv_bytes(|w| delays.write_histogram_csv(w, bin_days)),
    );
    out.insert(
        format!("{dir}/fpr_sweep.csv"),
        csv_bytes(|w| eval::write_fpr_sweep_csv(sweep, w)),
    );
    out.insert(
        format!("{dir}/inference.csv"),
        csv_bytes(|w| write_inference_csv(timelines, w)),
    );

    let hist = delays.histogram(bin_days);
    let cats: Vec<String> = hist.iter().map(|h| format!("{}", h.0)).collect();
    let summary = html::table(
        &["measure", "value"],
        &[
            vec!["tau".into(), format!("{tau:.4}")],
            vec!["pregnant patients".into(), delays.n_pregnant.to_string()],
            vec![
                "fraction detected earlier".into(),
                format!("{:.3}", delays.fraction_earlier),
            ],
            vec![
                "mean HAPI delay, earlier subset (days)".into(),
                fmt_opt(delays.earlier_mean_hapi),
            ],
            vec![
                "mean anchor delay, earlier subset (days)".into(),
                fmt_opt(delays.earlier_mean_anchor),
            ],
            vec!["never-pregnant patients".into(), delays.n_never.to_string()],
            vec!["false-positive rate".into(), fmt_opt(delays.fpr)],
        ],
    );
    let sweep_rows: Vec<Vec<String>> = sweep
        .iter()
        .map(|p| {
            vec![
                format!("{:.3}", p.tau),
                p.false_positives.to_string(),
                p.n_never.to_string(),
                format!("{:.4}", p.fpr),
                format!("{:.3}", p.fraction_earlier),
            ]
        })
        .collect();
    let page = html::page(
        "Pregnancy identification",
        &[
            ("Summary".into(), summary),
            (
                "Detection delay".into(),
                html::bar_chart(
                    "Days from true start to detection",
                    &cats,
                    &[
                        ("HAPI", hist.iter().map(|h| h.1 as f64).collect()),
                        ("anchor codes", hist.iter().map(|h| h.2 as f64).collect()),
                    ],
                ),
            ),
            (
                "False positives by threshold".into(),
                html::table(
                    &[
                        "tau",
                        "false positives",
                        "never pregnant",
                        "FPR",
                        "fraction earlier",
                    ],
                    &sweep_rows,
                ),
            ),
        ],
    );
    out.insert(format!("{dir}/report.html"), page.into_bytes());
    Ok(out)
}

fn scored_csv(scored: &[Scored]) -> Vec<u8> {
    let mut s = String::from("patient_id,label,p_none,p_ght,p_gdb,predicted\n");
    for r in scored {
        let p = |i: usize| r.probabilities.get(i).copied().unwrap_or(0.0);
        s.push_str(&format!(
            "{},{},{:.6},{:.6},{:.6},{}\n",
            r.patient_id,
            r.label,
            p(0),
            p(1),
            p(2),
            r.predicted
        ));
    }
    s.into_bytes()
}

fn risk_reports(e: &workflow::RiskEval) -> Result<Outputs> {
    let dir = paths::RISK_REPORTS;
    let mut out = Outputs::new();
    out.insert(format!("{dir}/predictions.csv"), scored_csv(&e.test));
    out.insert(
        format!("{dir}/trend.csv"),
        csv_bytes(|w| e.trend.write_csv(w)),
    );
    out.insert(
        format!("{dir}/earliest_alerts.csv"),
        csv_bytes(|w| e.alerts.write_csv(w)),
    );
    out.insert(
        format!("{dir}/metrics.json"),
        json_bytes(&serde_json::json!({
            "lasso": e.lasso,
            "elastic_net": e.elastic_net,
            "comparison": e.comparison,
            "trend_auc_slope": e.trend.auc_slope,
        })),
    );

    let metric_row = |m: &workflow::ModelMetrics| {
        vec![
            m.name.clone(),
            m.accuracy.map_or("n/a".into(), |a| {
                format!("{:.3} [{:.3}, {:.3}]", a.value, a.ci.low, a.ci.high)
            }),
            m.auc.as_ref().map_or("n/a".into(), |a| {
                format!("{:.3} [{:.3}, {:.3}]", a.auc, a.ci_low, a.ci_high)
            }),
        ]
    };
    let labels: Vec<String> = e
        .trend
        .periods
        .iter()
        .map(|p| p.period.as_str().to_string())
        .collect();
    let points: Vec<Option<(f64, f64, f64)>> = e
        .trend
        .periods
        .iter()
        .map(|p| p.auc.as_ref().map(|a| (a.auc, a.ci_low, a.ci_high)))
        .collect();
    let buckets: Vec<String> = eval::AlertBucket::ALL
        .iter()
        .map(|b| b.as_str().to_string())
        .collect();
    let page = html::page(
        "Complication risk",
        &[
            (
                "Test metrics".into(),
                html::table(
                    &["model", "accuracy", "macro AUC"],
                    &[metric_row(&e.lasso), metric_row(&e.elastic_net)],
                ),
            ),
            (
                "Paired comparison".into(),
                html::table(
                    &[
                        "lasso only correct",
                        "elastic net only correct",
                        "statistic",
                        "p",
                    ],
                    &[vec![
                        e.comparison.b.to_string(),
                        e.comparison.c.to_string(),
                        fmt_opt(e.comparison.test.map(|t| t.statistic)),
                        fmt_opt(e.comparison.test.map(|t| t.p_value)),
                    ]],
                ),
            ),
            (
                "AUC over the pregnancy".into(),
                html::line_with_intervals("Macro AUC by period", &labels, &points),
            ),
            (
                "Earliest alert".into(),
                html::bar_chart(
                    "Complicated patients by earliest alert",
                    &buckets,
                    &[(
                        "patients",
                        e.alerts.counts.iter().map(|&c| c as f64).collect(),
                    )],
                ),
            ),
        ],
    );
    out.insert(format!("{dir}/report.html"), page.into_bytes());
    Ok(out)
}

fn fairness_reports(report: &eval::SubgroupReport) -> Result<Outputs> {
    let dir = paths::FAIRNESS_REPORTS;
    let mut out = Outputs::new();
    out.insert(
        format!("{dir}/subgroups.csv"),
        csv_bytes(|w| report.write_csv(w)),
    );
    let rows: Vec<Vec<String>> = report
        .rows
        .iter()
        .map(|r| {
            vec![
                r.group.clone(),
                r.n.to_string(),
                fmt_opt(r.accuracy.map(|a| a.value)),
                fmt_opt(r.auc.as_ref().map(|a| a.auc)),
                format!("{:.3}", r.base_rate),
                fmt_opt(r.tpr),
                if r.small_sample {
                    "yes".into()
                } else {
                    String::new()
                },
            ]
        })
        .collect();
    let cats: Vec<String> = report.rows.iter().map(|r| r.group.clone()).collect();
    let page = html::page(
        "Subgroup audit",
        &[
            (
                "By race".into(),
                html::table(
                    &[
                        "group",
                        "n",
                        "accuracy",
                        "AUC",
                        "base rate",
                        "TPR",
                        "small sample",
                    ],
                    &rows,
                ),
            ),
            (
                "Accuracy and AUC".into(),
                html::bar_chart(
                    "Accuracy and AUC by group",
                    &cats,
                    &[
                        (
                            "accuracy",
                            report
                                .rows
                                .iter()
                                .map(|r| r.accuracy.map_or(0.0, |a| a.value))
                                .collect(),
                        ),
                        (
                            "AUC",
                            report
                                .rows
                                .iter()
                                .map(|r| r.auc.as_ref().map_or(0.0, |a| a.auc))
                                .collect(),
                        ),
                    ],
                ),
            ),
        ],
    );
    out.insert(format!("{dir}/report.html"), page.into_bytes());
    Ok(out)
}
