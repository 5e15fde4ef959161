//! Slot linearization, prompt assembly and narrative generation.
//!
//! The offline renderer fills fixed sentence templates and is fully
//! deterministic. Remote generation goes through [`LlmClient`]; responses must
//! carry the two artifacts as `(A)` / `(B)` sections.

use std::collections::HashMap;
use std::fs::{self, OpenOptions};
use std::io::{self, BufRead, Write};
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::eligibility::split_eligibility;
use crate::schema::{slot_order, Comparator, TrialRecord};
use crate::text::{count_terminators, inline, take_tokens, token_count};

pub const SCHEMA_PREFIX: &str = "You are a clinical-trial annotation assistant. You are given normalized clinical-trial fields as key:value slots in the following fixed order:\n\
phase; diseases (ICD-10/MeSH); drugs; smiles; icdcode; criteria (Inclusion/Exclusion).\n\
Use the values as facts; do not invent or infer missing data.\n\
Use preferred ICD/MeSH labels and include UMLS CUI when available in parentheses.\n\
Keep units and numerics unchanged; normalize spelling; no citations in the output.";

pub const INSTRUCTION_SUFFIX: &str = "Style: factual, concise, no speculation. Keep slot order semantics in your wording.\n\
If a value is missing or out of vocabulary, write 'unknown'.\n\
Emit two artifacts:\n\
(A) brief_summary: exactly one sentence summarizing phase(s), indication, intervention, comparator (if present), and primary endpoint.\n\
(B) text_description: a short paragraph (3\u{2013}5 sentences) covering population, design (randomization/blinding/arms), comparator, primary endpoint, and key eligibility themes.\n\
Do not copy eligibility criteria verbatim; summarize key inclusion and exclusion themes in a deterministic manner while preserving all numeric thresholds, units, and logical constraints (e.g., inequalities, temporal windows). Use ICD/MeSH preferred labels and UMLS CUI when provided.\n\
Decoding: temperature=0; no sampling.";

pub const UNKNOWN: &str = "unknown";

#[derive(Debug, Error)]
pub enum TextualizeError {
    #[error("cannot assemble a prompt from an empty slot list")]
    EmptySlots,
    #[error("LLM client unavailable: {0}")]
    ClientUnavailable(String),
    #[error("response lacks one of the two artifacts")]
    MalformedResponse(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SlotList(pub Vec<(String, String)>);

impl SlotList {
    pub fn get(&self, name: &str) -> Option<&str> {
        self.0
            .iter()
            .find(|(k, _)| k == name)
            .map(|(_, v)| v.as_str())
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// `name: value;` lines.
    pub fn render(&self) -> String {
        self.0
            .iter()
            .map(|(k, v)| format!("{k}: {v};"))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptBundle {
    pub schema_prefix: String,
    pub slots: SlotList,
    pub instruction_suffix: String,
}

impl PromptBundle {
    pub fn text(&self) -> String {
        format!(
            "{}\n{}\n{}",
            self.schema_prefix,
            self.slots.render(),
            self.instruction_suffix
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NarrativePair {
    pub brief_summary: String,
    pub text_description: String,
}

/// Python-style string literal, as the slot values of list fields are written.
fn py_str(s: &str) -> String {
    let quote = if s.contains('\'') && !s.contains('"') {
        '"'
    } else {
        '\''
    };
    let mut out = String::with_capacity(s.len() + 2);
    out.push(quote);
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            '\t' => out.push_str("\\t"),
            c if c == quote => {
                out.push('\\');
                out.push(c);
            }
            c => out.push(c),
        }
    }
    out.push(quote);
    out
}

fn py_list<S: AsRef<str>>(items: &[S]) -> String {
    if items.is_empty() {
        return UNKNOWN.to_string();
    }
    format!(
        "[{}]",
        items
            .iter()
            .map(|s| py_str(s.as_ref()))
            .collect::<Vec<_>>()
            .join(", ")
    )
}

fn escape_newlines(s: &str) -> String {
    s.replace('\r', "\\r").replace('\n', "\\n")
}

fn or_unknown<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string())
        .unwrap_or_else(|| UNKNOWN.to_string())
}

/// One `(slot, value)` pair per slot in [`slot_order`]; absent values are `unknown`.
pub fn linearize(record: &TrialRecord) -> SlotList {
    let entries = slot_order()
        .iter()
        .map(|&slot| {
            let value = match slot {
                "phase" => record.phase.to_tokens(),
                "diseases" => py_list(&record.diseases),
                "drugs" => py_list(&record.drugs),
                "smiles" if record.smiles.is_empty() => UNKNOWN.to_string(),
                "smiles" => {
                    let raws: Vec<&str> = record.smiles.iter().map(|s| s.raw.as_str()).collect();
                    format!("[{}]", raws.join(", "))
                }
                "icdcode" => py_list(
                    &record
                        .icd_codes
                        .iter()
                        .map(|c| c.as_str())
                        .collect::<Vec<_>>(),
                ),
                "criteria" if record.criteria.trim().is_empty() => UNKNOWN.to_string(),
                "criteria" => escape_newlines(&record.criteria),
                "enrollment" => or_unknown(record.enrollment),
                "arms" => or_unknown(record.arms),
                "randomization" => or_unknown(record.randomization),
                "blinding" => or_unknown(record.blinding.map(|b| b.as_str())),
                "comparator" => or_unknown(record.comparator.map(|c| c.as_str())),
                "primary_endpoint" => match record.primary_endpoint.as_deref().map(str::trim) {
                    Some(e) if !e.is_empty() => escape_newlines(e),
                    _ => UNKNOWN.to_string(),
                },
                other => unreachable!("slot {other} has no renderer"),
            };
            (slot.to_string(), value)
        })
        .collect();
    SlotList(entries)
}

pub fn assemble_prompt(slots: &SlotList) -> Result<PromptBundle, TextualizeError> {
    if slots.is_empty() {
        return Err(TextualizeError::EmptySlots);
    }
    Ok(PromptBundle {
        schema_prefix: SCHEMA_PREFIX.to_string(),
        slots: slots.clone(),
        instruction_suffix: INSTRUCTION_SUFFIX.to_string(),
    })
}

#[derive(Debug, Clone, Copy)]
pub struct NarrativeCaps {
    pub summary_tokens: usize,
    pub description_tokens: usize,
}

impl Default for NarrativeCaps {
    fn default() -> Self {
        NarrativeCaps {
            summary_tokens: 64,
            description_tokens: 256,
        }
    }
}

fn join_names(items: &[String], limit: usize) -> String {
    let cleaned: Vec<String> = items
        .iter()
        .map(|s| inline(s))
        .filter(|s| !s.is_empty())
        .collect();
    if cleaned.is_empty() {
        return UNKNOWN.to_string();
    }
    let shown = &cleaned[..cleaned.len().min(limit.max(1))];
    let mut text = match shown.len() {
        1 => shown[0].clone(),
        n => format!("{} and {}", shown[..n - 1].join(", "), shown[n - 1]),
    };
    if shown.len() < cleaned.len() {
        text.push_str(" and others");
    }
    text
}

fn comparator_phrase(c: Option<Comparator>) -> &'static str {
    match c {
        Some(Comparator::Placebo) => "placebo",
        Some(Comparator::StandardOfCare) => "standard of care",
        Some(Comparator::Active) => "an active comparator",
        Some(Comparator::None) => "no comparator",
        None => UNKNOWN,
    }
}

fn design_phrase(record: &TrialRecord) -> String {
    let mut parts = Vec::new();
    match record.randomization {
        Some(true) => parts.push("randomized".to_string()),
        Some(false) => parts.push("non-randomized".to_string()),
        None => {}
    }
    if let Some(b) = record.blinding {
        parts.push(format!("{}-blind", b.as_str()).replace("open-blind", "open-label"));
    }
    if let Some(a) = record.arms {
        parts.push(format!("{a}-arm"));
    }
    if parts.is_empty() {
        UNKNOWN.to_string()
    } else {
        parts.join(" ")
    }
}

fn with_article(phrase: &str) -> String {
    let vowel = phrase.chars().next().is_some_and(|c| "aeiou".contains(c));
    format!("{} {phrase}", if vowel { "an" } else { "a" })
}

fn endpoint_phrase(record: &TrialRecord) -> String {
    record
        .primary_endpoint
        .as_deref()
        .map(inline)
        .filter(|e| !e.is_empty())
        .unwrap_or_else(|| UNKNOWN.to_string())
}

fn summary_sentence(record: &TrialRecord, list_limit: usize) -> String {
    let phases: Vec<&str> = record.phase.iter().map(|p| p.token()).collect();
    format!(
        "This {} trial evaluates {} in {} using {} design, compared with {}, with primary endpoint {}.",
        phases.join("/"),
        join_names(&record.drugs, list_limit),
        join_names(&record.diseases, list_limit),
        with_article(&design_phrase(record)),
        comparator_phrase(record.comparator),
        endpoint_phrase(record),
    )
}

fn fit_sentence(sentence: String, cap: usize) -> String {
    if token_count(&sentence) <= cap {
        return sentence;
    }
    let mut cut = take_tokens(&sentence, cap);
    cut = inline(cut.trim_end_matches([',', ';']));
    cut.push('.');
    cut
}

fn is_numeric_token(t: &str) -> bool {
    t.chars().any(|c| c.is_ascii_digit())
}

/// Short theme for one criterion: its first words, extended through the last
/// numeric token (plus a following unit word) so thresholds survive intact.
fn theme(sentence: &str) -> String {
    const HEAD: usize = 6;
    const LIMIT: usize = 16;
    let stripped: String = sentence
        .chars()
        .filter(|c| !matches!(c, '(' | ')' | '[' | ']' | '{' | '}'))
        .collect();
    let tokens: Vec<&str> = stripped.split_whitespace().collect();
    let mut end = tokens.len().min(HEAD);
    if let Some(last_num) = tokens.iter().take(LIMIT).rposition(|t| is_numeric_token(t)) {
        if last_num + 1 >= end {
            end = (last_num + 2).min(tokens.len()).min(LIMIT);
        }
    }
    inline(tokens[..end].join(" ").trim_end_matches([',', ';', ':']))
}

fn themes_sentence(label: &str, sentences: &[String]) -> Option<String> {
    let themes: Vec<String> = sentences
        .iter()
        .map(|s| theme(s))
        .filter(|t| !t.is_empty())
        .collect();
    if themes.is_empty() {
        return None;
    }
    Some(format!("Key {label} themes: {}.", themes.join("; ")))
}

/// Deterministic template narratives.
pub fn render_offline(record: &TrialRecord) -> NarrativePair {
    render_offline_with(record, NarrativeCaps::default())
}

pub fn render_offline_with(record: &TrialRecord, caps: NarrativeCaps) -> NarrativePair {
    let mut summary = summary_sentence(record, usize::MAX);
    for limit in [3, 2, 1] {
        if token_count(&summary) <= caps.summary_tokens {
            break;
        }
        summary = summary_sentence(record, limit);
    }
    let summary = fit_sentence(summary, caps.summary_tokens);

    let diseases = join_names(&record.diseases, 3);
    let drugs = join_names(&record.drugs, 3);
    let mut fixed = vec![
        format!(
            "The study enrolls {} participants with {}.",
            or_unknown(record.enrollment),
            diseases
        ),
        format!(
            "The design is {}, with {} arms, evaluating {}.",
            design_phrase(record),
            or_unknown(record.arms),
            drugs
        ),
        format!(
            "The comparator is {} and the primary endpoint is {}.",
            comparator_phrase(record.comparator),
            endpoint_phrase(record)
        ),
    ];
    let (inclusion, exclusion) = split_eligibility(&record.criteria);
    let mut optional: Vec<(String, Vec<String>)> = vec![
        ("inclusion".into(), inclusion),
        ("exclusion".into(), exclusion),
    ];

    let budget = caps.description_tokens;
    let fixed_tokens: usize = fixed.iter().map(|s| token_count(s)).sum();
    if fixed_tokens > budget {
        let per = (budget / fixed.len()).max(4);
        fixed = fixed.into_iter().map(|s| fit_sentence(s, per)).collect();
    }
    let mut sentences = fixed;
    let mut used: usize = sentences.iter().map(|s| token_count(s)).sum();
    for (label, items) in optional.iter_mut() {
        // drop trailing criteria until the theme sentence fits
        while !items.is_empty() {
            match themes_sentence(label, items) {
                Some(s) if used + token_count(&s) <= budget => {
                    used += token_count(&s);
                    sentences.push(s);
                    break;
                }
                _ => {
                    items.pop();
                }
            }
        }
    }
    NarrativePair {
        brief_summary: summary,
        text_description: sentences.join(" "),
    }
}

/// Serializes a pair in the two-section response layout.
pub fn format_response(pair: &NarrativePair) -> String {
    format!(
        "(A) brief_summary: {}\n(B) text_description: {}",
        pair.brief_summary, pair.text_description
    )
}

fn strip_label<'a>(section: &'a str, label: &str) -> &'a str {
    let s = section.trim().trim_start_matches(['*', '_', ' ']);
    let lower = s.to_lowercase();
    let plain = label.replace('_', " ");
    for l in [label, plain.as_str()] {
        if lower.starts_with(l) {
            let rest = s[l.len()..].trim_start_matches(['*', '_', ' ']);
            return rest.strip_prefix(':').unwrap_or(rest).trim();
        }
    }
    s
}

/// Extracts the `(A)` and `(B)` artifacts from a model response.
pub fn parse_response(raw: &str) -> Result<NarrativePair, TextualizeError> {
    let malformed = || TextualizeError::MalformedResponse(raw.to_string());
    let a = raw.find("(A)").ok_or_else(malformed)?;
    let b = raw[a..].find("(B)").map(|i| i + a).ok_or_else(malformed)?;
    let summary = strip_label(&raw[a + 3..b], "brief_summary");
    let description = strip_label(&raw[b + 3..], "text_description");
    if summary.is_empty() || description.is_empty() {
        return Err(malformed());
    }
    Ok(NarrativePair {
        brief_summary: summary.split_whitespace().collect::<Vec<_>>().join(" "),
        text_description: description.split_whitespace().collect::<Vec<_>>().join(" "),
    })
}

pub struct LlmRequest<'a> {
    pub nct_id: &'a str,
    pub prompt: &'a str,
}

pub trait LlmClient {
    /// Sampling temperature the client decodes with; remote textualization requires 0.
    fn temperature(&self) -> f64 {
        0.0
    }

    fn complete(&self, request: &LlmRequest<'_>) -> Result<String, TextualizeError>;
}

/// Replays recorded responses keyed by trial id.
#[derive(Debug, Clone, Default)]
pub struct FixtureClient {
    responses: HashMap<String, String>,
}

impl FixtureClient {
    pub fn new(responses: HashMap<String, String>) -> Self {
        FixtureClient { responses }
    }

    /// Reads JSONL rows `{"nct_id": ..., "response": ...}`.
    pub fn from_jsonl(path: &Path) -> Result<Self, TextualizeError> {
        let text = fs::read_to_string(path)?;
        let mut responses = HashMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let v: Value = serde_json::from_str(line).map_err(io::Error::other)?;
            if let (Some(id), Some(resp)) = (v["nct_id"].as_str(), v["response"].as_str()) {
                responses.insert(id.to_string(), resp.to_string());
            }
        }
        Ok(FixtureClient { responses })
    }
}

impl LlmClient for FixtureClient {
    fn complete(&self, request: &LlmRequest<'_>) -> Result<String, TextualizeError> {
        self.responses.get(request.nct_id).cloned().ok_or_else(|| {
            TextualizeError::ClientUnavailable(format!(
                "no recorded response for {}",
                request.nct_id
            ))
        })
    }
}

/// OpenAI-compatible chat-completions endpoint. The bearer token, if any, is
/// read from `TRIALMOE_LLM_API_KEY`.
#[derive(Debug, Clone)]
pub struct HttpClient {
    pub endpoint: String,
    pub model: String,
    pub timeout: Duration,
}

impl HttpClient {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        HttpClient {
            endpoint: endpoint.into(),
            model: model.into(),
            timeout: Duration::from_secs(60),
        }
    }
}

impl LlmClient for HttpClient {
    fn complete(&self, request: &LlmRequest<'_>) -> Result<String, TextualizeError> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(self.timeout))
            .build()
            .into();
        let body = json!({
            "model": self.model,
            "temperature": 0,
            "messages": [{"role": "user", "content": request.prompt}],
        });
        let mut req = agent.post(&self.endpoint);
        if let Ok(key) = std::env::var("TRIALMOE_LLM_API_KEY") {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let unavailable = |e: ureq::Error| TextualizeError::ClientUnavailable(e.to_string());
        let mut resp = req.send_json(&body).map_err(unavailable)?;
        let v: Value = resp.body_mut().read_json().map_err(unavailable)?;
        v["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| TextualizeError::MalformedResponse(v.to_string()))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AuditEntry {
    pub nct_id: String,
    pub prompt: String,
    pub response: String,
    pub timestamp: String,
}

/// Sends the prompt and parses the reply. The raw exchange is returned for
/// auditing whether or not parsing succeeds.
pub fn textualize_remote(
    nct_id: &str,
    bundle: &PromptBundle,
    client: &dyn LlmClient,
) -> (Option<AuditEntry>, Result<NarrativePair, TextualizeError>) {
    if client.temperature() != 0.0 {
        return (
            None,
            Err(TextualizeError::ClientUnavailable(
                "client must decode at temperature 0".into(),
            )),
        );
    }
    let prompt = bundle.text();
    let response = match client.complete(&LlmRequest {
        nct_id,
        prompt: &prompt,
    }) {
        Ok(r) => r,
        Err(e) => return (None, Err(e)),
    };
    let entry = AuditEntry {
        nct_id: nct_id.to_string(),
        prompt,
        timestamp: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true),
        response: response.clone(),
    };
    (Some(entry), parse_response(&response))
}

pub fn append_audit(raw_log_path: &Path, entry: &AuditEntry) -> Result<(), TextualizeError> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(raw_log_path)?;
    let line = serde_json::to_string(entry).map_err(io::Error::other)?;
    writeln!(f, "{line}")?;
    Ok(())
}

/// Writes the processed row for `nct_id`, replacing any earlier row with the
/// same id, and appends the raw exchange to the audit log.
pub fn persist_artifacts(
    nct_id: &str,
    pair: &NarrativePair,
    audit: &AuditEntry,
    raw_log_path: &Path,
    processed_path: &Path,
) -> Result<(), TextualizeError> {
    append_audit(raw_log_path, audit)?;
    upsert_processed(processed_path, &[(nct_id.to_string(), pair.clone())])
}

/// Inserts or replaces processed rows keyed by trial id; existing row order is kept.
pub fn upsert_processed(
    processed_path: &Path,
    rows: &[(String, NarrativePair)],
) -> Result<(), TextualizeError> {
    let mut order: Vec<String> = Vec::new();
    let mut table: HashMap<String, Value> = HashMap::new();
    if processed_path.exists() {
        let f = fs::File::open(processed_path)?;
        for line in io::BufReader::new(f).lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let v: Value = serde_json::from_str(&line).map_err(io::Error::other)?;
            let id = v["nct_id"].as_str().unwrap_or_default().to_string();
            if !table.contains_key(&id) {
                order.push(id.clone());
            }
            table.insert(id, v);
        }
    }
    for (id, pair) in rows {
        if !table.contains_key(id) {
            order.push(id.clone());
        }
        table.insert(
            id.clone(),
            json!({"nct_id": id, "brief_summary": pair.brief_summary, "text_description": pair.text_description}),
        );
    }
    let mut out = String::new();
    for id in &order {
        out.push_str(&table[id].to_string());
        out.push('\n');
    }
    let tmp = processed_path.with_extension("tmp");
    fs::write(&tmp, out)?;
    fs::rename(&tmp, processed_path)?;
    Ok(())
}

/// Reads processed rows into a map keyed by trial id.
pub fn load_processed(path: &Path) -> Result<HashMap<String, NarrativePair>, TextualizeError> {
    let mut out = HashMap::new();
    for line in fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
    {
        let v: Value = serde_json::from_str(line).map_err(io::Error::other)?;
        if let (Some(id), Ok(pair)) = (
            v["nct_id"].as_str(),
            serde_json::from_value::<NarrativePair>(v.clone()),
        ) {
            out.insert(id.to_string(), pair);
        }
    }
    Ok(out)
}

/// Sentence count of a narrative, as used for the description contract.
pub fn sentence_count(text: &str) -> usize {
    count_terminators(text)
}
