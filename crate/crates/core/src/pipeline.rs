//! End-to-end runs: validate → textualize → encode → split → train → eval,
//! plus the ablation grid over gating, textualization and single modalities.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::checkpoint;
use crate::embedding::{
    content_hash, key_hex, pool_eligibility, truncate_record, CacheEncoder, EmbeddingCache,
    EmbeddingError, Encoder, StubEncoder, TokenCaps,
};
use crate::metrics::{apply_temperature, evaluate, fit_temperature, tune_threshold, EvalReport};
use crate::ontology::{load_ontology, OntologyTable};
use crate::schema::{PhaseSet, TrialRecord};
use crate::smoe::{GateMode, Modality, ModelConfig, SMoEModel, UtilizationNorm};
use crate::textualize::{
    append_audit, assemble_prompt, linearize, load_processed, render_offline, textualize_remote,
    upsert_processed, FixtureClient, HttpClient, LlmClient, NarrativePair,
};
use crate::training::{
    history_csv, predict, stratified_split, train, Dataset, EpochRecord, Split, SplitSpec,
    TrainConfig,
};
use crate::validate::{SynonymTable, ValidationReport, Validator, ValidatorConfig, Verdict};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Config,
    Validate,
    Textualize,
    Encode,
    Split,
    Train,
    Eval,
    Report,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Config => "config",
            Stage::Validate => "validate",
            Stage::Textualize => "textualize",
            Stage::Encode => "encode",
            Stage::Split => "split",
            Stage::Train => "train",
            Stage::Eval => "eval",
            Stage::Report => "report",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error)]
#[error("{stage}: {message}")]
pub struct PipelineError {
    pub stage: Stage,
    pub message: String,
}

fn fail<E: fmt::Display>(stage: Stage) -> impl Fn(E) -> PipelineError {
    move |e| PipelineError {
        stage,
        message: e.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextualizeConfig {
    /// `offline` (deterministic renderer), `fixture` (recorded responses) or `http`.
    pub client: String,
    /// Narratives from an earlier `textualize` run; when set, no client is called.
    pub processed: Option<PathBuf>,
    pub responses: Option<PathBuf>,
    pub endpoint: Option<String>,
    pub model: Option<String>,
}

impl Default for TextualizeConfig {
    fn default() -> Self {
        TextualizeConfig {
            client: "offline".into(),
            processed: None,
            responses: None,
            endpoint: None,
            model: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncodeConfig {
    /// `stub` or `cache`.
    pub encoder: String,
    /// With `stub`, vectors are also written here; with `cache`, they are read from here.
    pub cache: Option<PathBuf>,
    pub embed_dim: usize,
    pub caps: TokenCaps,
}

impl Default for EncodeConfig {
    fn default() -> Self {
        EncodeConfig {
            encoder: "stub".into(),
            cache: None,
            embed_dim: 768,
            caps: TokenCaps::default(),
        }
    }
}

/// Model hyperparameters; gate mode and modalities are top-level run settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelBlock {
    pub shared_dim: usize,
    pub experts: usize,
    pub top_k: usize,
    pub hidden_dim: usize,
    pub expert_out: usize,
    pub utilization_norm: UtilizationNorm,
}

impl Default for ModelBlock {
    fn default() -> Self {
        let m = ModelConfig::default();
        ModelBlock {
            shared_dim: m.shared_dim,
            experts: m.experts,
            top_k: m.top_k,
            hidden_dim: m.hidden_dim,
            expert_out: m.expert_out,
            utilization_norm: m.utilization_norm,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions {
            train: 0.8,
            val: 0.1,
            test: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Fit a temperature on the validation split and apply it to test logits.
    pub calibrate: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { calibrate: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub input: PathBuf,
    pub ontology_dir: PathBuf,
    pub synonyms: Option<PathBuf>,
    pub output_dir: PathBuf,
    /// When off, the generated narratives (summary, description) are left out.
    pub textualization: bool,
    pub gate_mode: GateMode,
    pub modalities: Vec<Modality>,
    pub validate: ValidatorConfig,
    pub textualize: TextualizeConfig,
    pub encode: EncodeConfig,
    pub model: ModelBlock,
    pub train: TrainConfig,
    pub split: SplitFractions,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            input: PathBuf::from("corpus.jsonl"),
            ontology_dir: PathBuf::from("ontology"),
            synonyms: None,
            output_dir: PathBuf::from("out"),
            textualization: true,
            gate_mode: GateMode::DrugDisease,
            modalities: Modality::ALL.to_vec(),
            validate: ValidatorConfig::default(),
            textualize: TextualizeConfig::default(),
            encode: EncodeConfig::default(),
            model: ModelBlock::default(),
            train: TrainConfig::default(),
            split: SplitFractions::default(),
            eval: EvalConfig::default(),
        }
    }
}

pub const ENV_PREFIX: &str = "TRIALMOE_";

/// Replaces top-level scalar entries with `TRIALMOE_<KEY>` values from `env`.
pub fn apply_env_overrides(
    value: &mut Value,
    env: &dyn Fn(&str) -> Option<String>,
) -> Result<(), String> {
    let defaults = serde_json::to_value(RunConfig::default()).expect("default config serializes");
    let obj = value
        .as_object_mut()
        .ok_or("config must be a JSON object")?;
    for (key, default) in defaults.as_object().unwrap() {
        let current = obj.get(key).unwrap_or(default);
        if current.is_object() || current.is_array() {
            continue;
        }
        let Some(raw) = env(&format!("{ENV_PREFIX}{}", key.to_ascii_uppercase())) else {
            continue;
        };
        let parsed = match current {
            Value::Number(_) | Value::Bool(_) => serde_json::from_str(&raw)
                .map_err(|e| format!("{ENV_PREFIX}{}: {e}", key.to_ascii_uppercase()))?,
            _ => Value::String(raw),
        };
        obj.insert(key.clone(), parsed);
    }
    Ok(())
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl RunConfig {
    /// Parses config JSON, applies environment overrides and resolves relative
    /// paths against `base_dir`.
    pub fn from_json(
        text: &str,
        base_dir: &Path,
        env: &dyn Fn(&str) -> Option<String>,
    ) -> Result<Self, PipelineError> {
        let mut value: Value = serde_json::from_str(text).map_err(fail(Stage::Config))?;
        apply_env_overrides(&mut value, env).map_err(fail(Stage::Config))?;
        let mut cfg: RunConfig = serde_json::from_value(value).map_err(fail(Stage::Config))?;
        resolve(base_dir, &mut cfg.input);
        resolve(base_dir, &mut cfg.ontology_dir);
        resolve(base_dir, &mut cfg.output_dir);
        for p in [
            &mut cfg.synonyms,
            &mut cfg.textualize.processed,
            &mut cfg.textualize.responses,
            &mut cfg.encode.cache,
        ]
        .into_iter()
        .flatten()
        {
            resolve(base_dir, p);
        }
        cfg.check()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path).map_err(|e| PipelineError {
            stage: Stage::Config,
            message: format!("{}: {e}", path.display()),
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_json(&text, base, &|k| std::env::var(k).ok())
    }

    pub fn check(&self) -> Result<(), PipelineError> {
        let err = |m: &str| {
            Err(PipelineError {
                stage: Stage::Config,
                message: m.to_string(),
            })
        };
        if self.modalities.is_empty() {
            return err("modality subset is empty");
        }
        if !["offline", "fixture", "http"].contains(&self.textualize.client.as_str()) {
            return err("textualize.client must be offline, fixture or http");
        }
        if !["stub", "cache"].contains(&self.encode.encoder.as_str()) {
            return err("encode.encoder must be stub or cache");
        }
        self.model_config()
            .normalized()
            .map_err(fail(Stage::Config))?;
        self.train_config().check().map_err(fail(Stage::Config))?;
        Ok(())
    }

    /// Active modalities; narrative modalities drop out without textualization.
    pub fn active_modalities(&self) -> Vec<Modality> {
        let mut m: Vec<Modality> = self
            .modalities
            .iter()
            .copied()
            .filter(|m| {
                self.textualization || !matches!(m, Modality::Summary | Modality::Description)
            })
            .collect();
        m.sort();
        m.dedup();
        m
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            embed_dim: self.encode.embed_dim,
            shared_dim: self.model.shared_dim,
            experts: self.model.experts,
            top_k: self.model.top_k,
            hidden_dim: self.model.hidden_dim,
            expert_out: self.model.expert_out,
            gate_mode: self.gate_mode,
            modalities: self.active_modalities(),
            utilization_norm: self.model.utilization_norm,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn split_spec(&self) -> SplitSpec {
        SplitSpec {
            train: self.split.train,
            val: self.split.val,
            test: self.split.test,
            seed: self.seed,
        }
    }
}

/// Reads JSONL; unparsable lines become `null` (rejected by the validator).
pub fn read_jsonl(path: &Path) -> Result<Vec<Value>, std::io::Error> {
    Ok(fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).unwrap_or(Value::Null))
        .collect())
}

pub fn load_resources(config: &RunConfig) -> Result<(OntologyTable, SynonymTable), PipelineError> {
    let ontology = load_ontology(&config.ontology_dir).map_err(fail(Stage::Config))?;
    let synonyms = match &config.synonyms {
        Some(p) => SynonymTable::load(p).map_err(fail(Stage::Config))?,
        None => {
            SynonymTable::from_pairs(Vec::<(String, String)>::new()).map_err(fail(Stage::Config))?
        }
    };
    Ok((ontology, synonyms))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ValidationSummary {
    pub total: usize,
    pub accepted: usize,
    pub repaired: usize,
    pub rejected: usize,
    pub reasons: BTreeMap<String, usize>,
}

pub fn summarize(reports: &[ValidationReport]) -> ValidationSummary {
    let mut s = ValidationSummary {
        total: reports.len(),
        ..Default::default()
    };
    for r in reports {
        match r.verdict {
            Verdict::Accept => s.accepted += 1,
            Verdict::AcceptRepaired => {
                s.accepted += 1;
                s.repaired += 1;
            }
            Verdict::Reject => s.rejected += 1,
        }
        for code in &r.reason_codes {
            *s.reasons.entry(code.clone()).or_default() += 1;
        }
    }
    s
}

pub fn validation_jsonl(reports: &[ValidationReport]) -> String {
    reports
        .iter()
        .map(|r| format!("{}\n", serde_json::to_string(r).expect("report serializes")))
        .collect()
}

fn make_client(config: &TextualizeConfig) -> Result<Option<Box<dyn LlmClient>>, PipelineError> {
    match config.client.as_str() {
        "offline" => Ok(None),
        "fixture" => {
            let path = config.responses.as_ref().ok_or_else(|| PipelineError {
                stage: Stage::Textualize,
                message: "fixture client needs textualize.responses".into(),
            })?;
            Ok(Some(Box::new(
                FixtureClient::from_jsonl(path).map_err(fail(Stage::Textualize))?,
            )))
        }
        _ => {
            let endpoint = config
                .endpoint
                .clone()
                .unwrap_or_else(|| "http://localhost:8000/v1/chat/completions".into());
            let model = config.model.clone().unwrap_or_else(|| "default".into());
            Ok(Some(Box::new(HttpClient::new(endpoint, model))))
        }
    }
}

/// Fills the narrative slots of `records`. Offline rendering is
/// deterministic; remote exchanges are appended to `raw_log` when given.
/// A record whose remote call fails keeps empty narratives (zero inputs).
pub fn textualize_records(
    records: &mut [TrialRecord],
    config: &TextualizeConfig,
    raw_log: Option<&Path>,
) -> Result<Vec<(String, NarrativePair)>, PipelineError> {
    if let Some(path) = &config.processed {
        let mut known = load_processed(path).map_err(fail(Stage::Textualize))?;
        let mut out = Vec::new();
        for r in records.iter_mut() {
            let pair = known.remove(&r.nct_id);
            r.brief_summary = pair.as_ref().map(|p| p.brief_summary.clone());
            r.text_description = pair.as_ref().map(|p| p.text_description.clone());
            out.extend(pair.map(|p| (r.nct_id.clone(), p)));
        }
        return Ok(out);
    }
    let client = make_client(config)?;
    let mut out = Vec::with_capacity(records.len());
    for r in records.iter_mut() {
        let pair = match &client {
            None => render_offline(r),
            Some(c) => {
                let bundle = assemble_prompt(&linearize(r)).map_err(fail(Stage::Textualize))?;
                let (audit, result) = textualize_remote(&r.nct_id, &bundle, c.as_ref());
                if let (Some(entry), Some(path)) = (&audit, raw_log) {
                    append_audit(path, entry).map_err(fail(Stage::Textualize))?;
                }
                match result {
                    Ok(p) => p,
                    Err(e) => {
                        log::warn!("{}: textualization failed: {e}", r.nct_id);
                        r.brief_summary = None;
                        r.text_description = None;
                        continue;
                    }
                }
            }
        };
        r.brief_summary = Some(pair.brief_summary.clone());
        r.text_description = Some(pair.text_description.clone());
        out.push((r.nct_id.clone(), pair));
    }
    Ok(out)
}

/// Text fed to the encoder for each modality; `None` marks a missing input.
/// SMILES are encoded in canonical form when the validator produced one.
pub fn modality_texts(record: &TrialRecord, caps: &TokenCaps) -> Vec<(Modality, Option<String>)> {
    let non_empty = |s: String| if s.trim().is_empty() { None } else { Some(s) };
    let mut diseases = record.diseases.join("; ");
    if !record.icd_codes.is_empty() {
        let codes: Vec<&str> = record.icd_codes.iter().map(|c| c.as_str()).collect();
        diseases = format!("{diseases} | {}", codes.join(", "));
    }
    let raw: Vec<(Modality, Option<String>)> = vec![
        (
            Modality::Smiles,
            non_empty(
                record
                    .smiles
                    .iter()
                    .map(|s| s.canonical.as_deref().unwrap_or(&s.raw))
                    .collect::<Vec<_>>()
                    .join(" "),
            ),
        ),
        (Modality::Criteria, non_empty(record.criteria.clone())),
        (Modality::Diseases, non_empty(diseases)),
        (Modality::Drugs, non_empty(record.drugs.join("; "))),
        (
            Modality::Summary,
            record.brief_summary.clone().and_then(non_empty),
        ),
        (
            Modality::Description,
            record.text_description.clone().and_then(non_empty),
        ),
        (
            Modality::Enrollment,
            record.enrollment.map(|n| format!("enrollment: {n}")),
        ),
    ];
    let segments: Vec<_> = raw
        .iter()
        .map(|(m, t)| (m.segment(), t.clone().unwrap_or_default()))
        .collect();
    let capped = truncate_record(&segments, caps);
    raw.into_iter()
        .zip(capped)
        .map(|((m, t), c)| (m, t.map(|_| c)))
        .collect()
}

fn l2_normalized(v: Vec<f32>) -> Vec<f64> {
    let n = v.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    if n == 0.0 {
        return vec![0.0; v.len()];
    }
    v.iter().map(|x| *x as f64 / n).collect()
}

/// Normalizes every encoder output to unit length, so cached vectors from
/// external encoders land on the same scale as the stub.
struct UnitNorm<'a>(&'a dyn Encoder);

impl Encoder for UnitNorm<'_> {
    fn name(&self) -> &str {
        self.0.name()
    }

    fn dim(&self) -> usize {
        self.0.dim()
    }

    fn encode(&self, modality: &str, text: &str) -> Result<Vec<f32>, EmbeddingError> {
        Ok(l2_normalized(self.0.encode(modality, text)?)
            .into_iter()
            .map(|x| x as f32)
            .collect())
    }
}

/// Wraps an encoder and records every vector it produces.
pub struct Recording<'a> {
    inner: &'a dyn Encoder,
    cache: std::cell::RefCell<EmbeddingCache>,
}

impl<'a> Recording<'a> {
    pub fn new(inner: &'a dyn Encoder, cache: EmbeddingCache) -> Self {
        Recording {
            inner,
            cache: std::cell::RefCell::new(cache),
        }
    }

    pub fn into_cache(self) -> EmbeddingCache {
        self.cache.into_inner()
    }
}

impl Encoder for Recording<'_> {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn encode(&self, modality: &str, text: &str) -> Result<Vec<f32>, EmbeddingError> {
        if let Some(v) = self.cache.borrow().get(modality, text) {
            return Ok(v.to_vec());
        }
        let v = self.inner.encode(modality, text)?;
        self.cache.borrow_mut().put(modality, text, &v)?;
        Ok(v)
    }
}

pub fn make_encoder(config: &EncodeConfig) -> Result<Box<dyn Encoder>, PipelineError> {
    match config.encoder.as_str() {
        "stub" => Ok(Box::new(StubEncoder::new(config.embed_dim))),
        _ => {
            let path = config.cache.as_ref().ok_or_else(|| PipelineError {
                stage: Stage::Encode,
                message: "cache encoder needs encode.cache".into(),
            })?;
            let cache =
                EmbeddingCache::open(path, config.embed_dim).map_err(fail(Stage::Encode))?;
            Ok(Box::new(CacheEncoder::new(cache)))
        }
    }
}

/// Encodes every modality of every record (zeros for missing inputs).
pub fn encode_records(
    records: &[TrialRecord],
    encoder: &dyn Encoder,
    caps: &TokenCaps,
) -> Result<Dataset, PipelineError> {
    let e = encoder.dim();
    let enc = UnitNorm(encoder);
    let mut inputs: Vec<Array2<f64>> = Modality::ALL
        .iter()
        .map(|m| Array2::zeros((records.len(), m.input_dim(e))))
        .collect();
    for (i, r) in records.iter().enumerate() {
        for (slot, (m, text)) in modality_texts(r, caps).into_iter().enumerate() {
            let Some(text) = text else { continue };
            let v = if m == Modality::Criteria {
                pool_eligibility(&text, &enc)
            } else {
                enc.encode(m.name(), &text)
                    .map(|v| v.into_iter().map(f64::from).collect())
            }
            .map_err(fail(Stage::Encode))?;
            inputs[slot].row_mut(i).assign(&Array1::from(v));
        }
    }
    let labels = records
        .iter()
        .map(|r| r.label.unwrap_or(0) as f64)
        .collect();
    Ok(Dataset {
        modalities: Modality::ALL.to_vec(),
        inputs,
        labels,
    })
}

/// Validated, textualized and encoded records ready for training.
pub struct Prepared {
    pub records: Vec<TrialRecord>,
    pub reports: Vec<ValidationReport>,
    pub narratives: Vec<(String, NarrativePair)>,
    pub data: Dataset,
    pub phases: Vec<PhaseSet>,
    pub cache: Option<EmbeddingCache>,
}

type Staged = (
    Vec<TrialRecord>,
    Vec<ValidationReport>,
    Vec<(String, NarrativePair)>,
);

/// Validation and textualization: accepted labeled records with narratives filled.
pub fn prepare_records(
    config: &RunConfig,
    raw_log: Option<&Path>,
) -> Result<Staged, PipelineError> {
    let (ontology, synonyms) = load_resources(config)?;
    let values = read_jsonl(&config.input).map_err(|e| PipelineError {
        stage: Stage::Validate,
        message: format!("{}: {e}", config.input.display()),
    })?;
    let validator = Validator {
        ontology: &ontology,
        synonyms: &synonyms,
        config: config.validate,
    };
    let reports: Vec<ValidationReport> =
        values.iter().map(|v| validator.validate_value(v)).collect();
    let mut records: Vec<TrialRecord> = reports.iter().filter_map(|r| r.record.clone()).collect();
    let unlabeled = records.iter().filter(|r| r.label.is_none()).count();
    if unlabeled > 0 {
        log::warn!("dropping {unlabeled} accepted records without a label");
        records.retain(|r| r.label.is_some());
    }
    if records.is_empty() {
        return Err(PipelineError {
            stage: Stage::Validate,
            message: "no accepted labeled records".into(),
        });
    }

    let narratives = if config.textualization {
        textualize_records(&mut records, &config.textualize, raw_log)?
    } else {
        Vec::new()
    };
    Ok((records, reports, narratives))
}

/// One lookup the encoder will be asked for.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodeRequest {
    pub modality: String,
    pub text: String,
    /// Hex of the 16-byte cache key.
    pub key: String,
}

struct RequestLog {
    dim: usize,
    seen: std::cell::RefCell<(std::collections::HashSet<String>, Vec<EncodeRequest>)>,
}

impl Encoder for RequestLog {
    fn name(&self) -> &str {
        "request-log"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, modality: &str, text: &str) -> Result<Vec<f32>, EmbeddingError> {
        let key = key_hex(&content_hash(modality, text));
        let mut seen = self.seen.borrow_mut();
        if seen.0.insert(key.clone()) {
            seen.1.push(EncodeRequest {
                modality: modality.to_string(),
                text: text.to_string(),
                key,
            });
        }
        // any nonzero vector: it is normalized downstream
        let mut v = vec![0.0; self.dim];
        v[0] = 1.0;
        Ok(v)
    }
}

/// Every distinct (modality, text) the encode stage looks up, in first-use
/// order. An external encoder that fills these keys makes `encoder: cache`
/// runs complete.
pub fn encode_requests(config: &RunConfig) -> Result<Vec<EncodeRequest>, PipelineError> {
    let cfg = RunConfig {
        textualization: true,
        ..config.clone()
    };
    let (records, _, _) = prepare_records(&cfg, None)?;
    let log = RequestLog {
        dim: config.encode.embed_dim,
        seen: Default::default(),
    };
    encode_records(&records, &log, &config.encode.caps)?;
    Ok(log.seen.into_inner().1)
}

/// Runs the data stages. With a stub encoder and a configured cache path,
/// the produced vectors are collected into a cache (not yet flushed).
pub fn prepare(config: &RunConfig, raw_log: Option<&Path>) -> Result<Prepared, PipelineError> {
    let (records, reports, narratives) = prepare_records(config, raw_log)?;
    let encoder = make_encoder(&config.encode)?;
    let (data, cache) = match (&config.encode.cache, config.encode.encoder.as_str()) {
        (Some(path), "stub") => {
            let existing =
                EmbeddingCache::open(path, config.encode.embed_dim).map_err(fail(Stage::Encode))?;
            let rec = Recording::new(encoder.as_ref(), existing);
            let data = encode_records(&records, &rec, &config.encode.caps)?;
            (data, Some(rec.into_cache()))
        }
        _ => (
            encode_records(&records, encoder.as_ref(), &config.encode.caps)?,
            None,
        ),
    };
    let phases = records.iter().map(|r| r.phase).collect();
    Ok(Prepared {
        records,
        reports,
        narratives,
        data,
        phases,
        cache,
    })
}

/// One configuration of the ablation grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Variant {
    pub name: String,
    pub gate_mode: GateMode,
    pub textualization: bool,
    pub modalities: Vec<Modality>,
}

impl Variant {
    pub fn apply(&self, base: &RunConfig) -> RunConfig {
        RunConfig {
            gate_mode: self.gate_mode,
            textualization: self.textualization,
            modalities: self.modalities.clone(),
            ..base.clone()
        }
    }
}

/// Full model, all-modality gate, no generated narratives, then one run per modality.
pub fn grid_variants(base: &RunConfig) -> Vec<Variant> {
    let mut out = vec![
        Variant {
            name: "full".into(),
            gate_mode: base.gate_mode,
            textualization: true,
            modalities: base.modalities.clone(),
        },
        Variant {
            name: "alt_gate".into(),
            gate_mode: GateMode::All,
            textualization: true,
            modalities: base.modalities.clone(),
        },
        Variant {
            name: "no_nl".into(),
            gate_mode: base.gate_mode,
            textualization: false,
            modalities: base.modalities.clone(),
        },
    ];
    for m in Modality::ALL {
        out.push(Variant {
            name: format!("only_{m}"),
            gate_mode: base.gate_mode,
            textualization: true,
            modalities: vec![m],
        });
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub variant: String,
    pub gate_mode: String,
    pub modalities: Vec<Modality>,
    pub textualization: bool,
    pub seed: u64,
    pub split_hash: String,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub val_auc: Option<f64>,
    pub validation: ValidationSummary,
    pub test: EvalReport,
}

pub struct RunOutcome {
    pub report: RunReport,
    pub model: SMoEModel,
    pub history: Vec<EpochRecord>,
    pub temperature: Option<f64>,
    pub tuned_threshold: f64,
}

fn labels_u8(data: &Dataset, rows: &[usize]) -> Vec<u8> {
    rows.iter()
        .map(|&i| (data.labels[i] >= 0.5) as u8)
        .collect()
}

/// Trains and evaluates one configuration on prepared data and a fixed split.
pub fn run_variant(
    name: &str,
    config: &RunConfig,
    prepared: &Prepared,
    split: &Split,
) -> Result<RunOutcome, PipelineError> {
    let model_cfg = config.model_config();
    let outcome = train(
        &model_cfg,
        &prepared.data,
        &split.train,
        &split.val,
        &config.train_config(),
    )
    .map_err(fail(Stage::Train))?;
    let model = outcome.model;

    let val_logits = predict(&model, &prepared.data, &split.val)
        .map_err(fail(Stage::Eval))?
        .to_vec();
    let val_labels = labels_u8(&prepared.data, &split.val);
    let temperature = if config.eval.calibrate {
        fit_temperature(&val_logits, &val_labels).ok()
    } else {
        None
    };
    let t = temperature.unwrap_or(1.0);
    let (tuned_threshold, _) = tune_threshold(&apply_temperature(&val_logits, t), &val_labels);

    let test_logits = predict(&model, &prepared.data, &split.test)
        .map_err(fail(Stage::Eval))?
        .to_vec();
    let test_labels = labels_u8(&prepared.data, &split.test);
    let test_phases: Vec<PhaseSet> = split.test.iter().map(|&i| prepared.phases[i]).collect();
    let test = evaluate(&test_logits, &test_labels, &test_phases, t, tuned_threshold);

    let best = outcome.best_epoch;
    let report = RunReport {
        variant: name.to_string(),
        gate_mode: config.gate_mode.as_str().to_string(),
        modalities: model.config.modalities.clone(),
        textualization: config.textualization,
        seed: config.seed,
        split_hash: split.hash(),
        n_train: split.train.len(),
        n_val: split.val.len(),
        n_test: split.test.len(),
        best_epoch: best,
        epochs_run: outcome.history.len(),
        val_auc: outcome
            .history
            .get(best.wrapping_sub(1))
            .and_then(|h| h.val_auc),
        validation: summarize(&prepared.reports),
        test,
    };
    Ok(RunOutcome {
        report,
        model,
        history: outcome.history,
        temperature,
        tuned_threshold,
    })
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), PipelineError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(fail(Stage::Report))?;
    }
    fs::write(path, contents).map_err(|e| PipelineError {
        stage: Stage::Report,
        message: format!("{}: {e}", path.display()),
    })
}

pub fn report_json(report: &RunReport) -> String {
    let mut s = serde_json::to_string_pretty(report).expect("report serializes");
    s.push('\n');
    s
}

#[derive(Debug, Clone)]
pub struct Artifacts {
    pub validation: PathBuf,
    pub processed: Option<PathBuf>,
    pub cache: Option<PathBuf>,
    pub checkpoint: PathBuf,
    pub history: PathBuf,
    pub report: PathBuf,
}

fn write_data_artifacts(
    config: &RunConfig,
    prepared: &Prepared,
) -> Result<(PathBuf, Option<PathBuf>, Option<PathBuf>), PipelineError> {
    let out = &config.output_dir;
    let validation = out.join("validation.jsonl");
    write(&validation, validation_jsonl(&prepared.reports))?;
    let processed = if prepared.narratives.is_empty() {
        None
    } else {
        let p = out.join("processed.jsonl");
        if p.exists() {
            fs::remove_file(&p).map_err(fail(Stage::Report))?;
        }
        upsert_processed(&p, &prepared.narratives).map_err(fail(Stage::Report))?;
        Some(p)
    };
    let cache = match &prepared.cache {
        Some(c) => {
            c.flush().map_err(fail(Stage::Encode))?;
            config.encode.cache.clone()
        }
        None => None,
    };
    Ok((validation, processed, cache))
}

fn raw_log_path(config: &RunConfig) -> Option<PathBuf> {
    (config.textualize.client != "offline").then(|| config.output_dir.join("raw_responses.jsonl"))
}

/// Runs every stage for the configured variant and writes its artifacts.
pub fn run_pipeline(config: &RunConfig) -> Result<Artifacts, PipelineError> {
    fs::create_dir_all(&config.output_dir).map_err(fail(Stage::Report))?;
    let raw_log = raw_log_path(config);
    let prepared = prepare(config, raw_log.as_deref())?;
    let (validation, processed, cache) = write_data_artifacts(config, &prepared)?;
    let split =
        stratified_split(&prepared.phases, &config.split_spec()).map_err(fail(Stage::Split))?;
    let run = run_variant("full", config, &prepared, &split)?;
    let out = &config.output_dir;
    let checkpoint_path = out.join("model.ckpt");
    checkpoint::save(
        &checkpoint_path,
        &run.model,
        run.temperature,
        Some(run.tuned_threshold),
    )
    .map_err(fail(Stage::Report))?;
    let history = out.join("history.csv");
    write(&history, history_csv(&run.history))?;
    let report = out.join("report.json");
    write(&report, report_json(&run.report))?;
    Ok(Artifacts {
        validation,
        processed,
        cache,
        checkpoint: checkpoint_path,
        history,
        report,
    })
}

pub fn grid_csv(reports: &[RunReport]) -> String {
    let opt = |v: Option<f64>| v.map_or_else(|| "nan".to_string(), |x| format!("{x:.6}"));
    let mut out = String::from(
        "variant,gate_mode,textualization,modalities,split_hash,best_epoch,val_auc,test_auc,test_ap,test_f1,test_f1_tuned,test_ece,test_nll,temperature\n",
    );
    for r in reports {
        let mods: Vec<&str> = r.modalities.iter().map(|m| m.name()).collect();
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            r.variant,
            r.gate_mode,
            r.textualization,
            mods.join("+"),
            r.split_hash,
            r.best_epoch,
            opt(r.val_auc),
            opt(r.test.overall.auc_roc),
            opt(r.test.overall.average_precision),
            r.test.overall.f1,
            r.test.overall.f1_tuned,
            r.test.overall.ece,
            r.test.overall.nll,
            r.test.temperature,
        ));
    }
    out
}

/// Runs all grid variants on one shared preparation and split; writes
/// `ablation.csv` and one JSON report per variant under `ablation/`.
pub fn ablation_grid(base: &RunConfig) -> Result<Vec<RunReport>, PipelineError> {
    fs::create_dir_all(&base.output_dir).map_err(fail(Stage::Report))?;
    let raw_log = raw_log_path(base);
    // narratives are always produced; the no_nl variant just leaves them out
    let prep_cfg = RunConfig {
        textualization: true,
        ..base.clone()
    };
    let prepared = prepare(&prep_cfg, raw_log.as_deref())?;
    write_data_artifacts(&prep_cfg, &prepared)?;
    let split =
        stratified_split(&prepared.phases, &base.split_spec()).map_err(fail(Stage::Split))?;
    let mut reports = Vec::new();
    for v in grid_variants(base) {
        log::info!("ablation variant {}", v.name);
        let cfg = v.apply(base);
        let run = run_variant(&v.name, &cfg, &prepared, &split)?;
        write(
            &base
                .output_dir
                .join("ablation")
                .join(format!("{}.json", v.name)),
            report_json(&run.report),
        )?;
        reports.push(run.report);
    }
    write(&base.output_dir.join("ablation.csv"), grid_csv(&reports))?;
    Ok(reports)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalRows {
    /// The held-out test split implied by the config seed.
    Test,
    /// Every accepted labeled record.
    All,
}

/// Scores a trained model. With `calibrate`, temperature and tuned threshold
/// are refitted on the validation split; otherwise the checkpoint's values
/// are used.
pub fn evaluate_checkpoint(
    config: &RunConfig,
    model: &SMoEModel,
    header: &checkpoint::Header,
    rows: EvalRows,
    calibrate: bool,
) -> Result<EvalReport, PipelineError> {
    let cfg = RunConfig {
        textualization: true,
        encode: EncodeConfig {
            embed_dim: model.config.embed_dim,
            ..config.encode.clone()
        },
        ..config.clone()
    };
    let prepared = prepare(&cfg, None)?;
    let n = prepared.data.labels.len();
    let split = if calibrate || rows == EvalRows::Test {
        Some(stratified_split(&prepared.phases, &cfg.split_spec()).map_err(fail(Stage::Split))?)
    } else {
        None
    };
    let (t, threshold) = match (&split, calibrate) {
        (Some(s), true) => {
            let logits = predict(model, &prepared.data, &s.val)
                .map_err(fail(Stage::Eval))?
                .to_vec();
            let labels = labels_u8(&prepared.data, &s.val);
            let t = fit_temperature(&logits, &labels).map_err(fail(Stage::Eval))?;
            (t, tune_threshold(&apply_temperature(&logits, t), &labels).0)
        }
        _ => (
            header.temperature.unwrap_or(1.0),
            header.tuned_threshold.unwrap_or(0.5),
        ),
    };
    let eval_rows: Vec<usize> = match (rows, &split) {
        (EvalRows::Test, Some(s)) => s.test.clone(),
        _ => (0..n).collect(),
    };
    let logits = predict(model, &prepared.data, &eval_rows)
        .map_err(fail(Stage::Eval))?
        .to_vec();
    let labels = labels_u8(&prepared.data, &eval_rows);
    let phases: Vec<PhaseSet> = eval_rows.iter().map(|&i| prepared.phases[i]).collect();
    Ok(evaluate(&logits, &labels, &phases, t, threshold))
}
