//! Record quality control: conformance, cross-field consistency,
//! normalization, SMILES canonicalization and repair-or-reject.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs;
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::ontology::{fold, Concept, OntologyTable};
use crate::schema::{
    coerce_u64, normalize_slot_names, parse_phase_value, parse_record, string_list, Comparator,
    Phase, PhaseSet, PhaseTokenError, TrialRecord,
};
use crate::smiles::{canonical_smiles, SmilesError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Pass,
    Repaired,
    Fail,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckResult {
    pub rule_id: String,
    pub status: Status,
    pub detail: String,
}

impl CheckResult {
    fn new(rule_id: &str, status: Status, detail: impl Into<String>) -> Self {
        CheckResult {
            rule_id: rule_id.to_string(),
            status,
            detail: detail.into(),
        }
    }

    fn pass(rule_id: &str, detail: impl Into<String>) -> Self {
        Self::new(rule_id, Status::Pass, detail)
    }

    fn fail(rule_id: &str, detail: impl Into<String>) -> Self {
        Self::new(rule_id, Status::Fail, detail)
    }

    fn repaired(rule_id: &str, detail: impl Into<String>) -> Self {
        Self::new(rule_id, Status::Repaired, detail)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Accept,
    AcceptRepaired,
    Reject,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub record_id: String,
    pub checks: Vec<CheckResult>,
    pub verdict: Verdict,
    pub reason_codes: Vec<String>,
    /// The repaired record when the verdict is not `Reject`.
    #[serde(skip)]
    pub record: Option<TrialRecord>,
}

impl ValidationReport {
    pub fn repairs(&self) -> usize {
        self.checks
            .iter()
            .filter(|c| c.status == Status::Repaired)
            .count()
    }

    pub fn accepted(&self) -> bool {
        self.verdict != Verdict::Reject
    }
}

#[derive(Debug, Error)]
pub enum SynonymError {
    #[error("failed to read synonym table: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {0}: expected `surface<TAB>preferred`")]
    Malformed(usize),
    #[error("preferred label `{0}` is itself mapped to a different label")]
    NotFixedPoint(String),
}

/// Case-folded surface form to preferred label.
#[derive(Debug, Clone, Default)]
pub struct SynonymTable {
    map: HashMap<String, String>,
}

impl SynonymTable {
    pub fn from_pairs<I, S, T>(pairs: I) -> Result<Self, SynonymError>
    where
        I: IntoIterator<Item = (S, T)>,
        S: AsRef<str>,
        T: AsRef<str>,
    {
        let mut map = HashMap::new();
        for (surface, preferred) in pairs {
            map.insert(
                fold(surface.as_ref()),
                preferred.as_ref().trim().to_string(),
            );
        }
        let preferred: Vec<String> = map.values().cloned().collect();
        for p in preferred {
            match map.get(&fold(&p)) {
                Some(existing) if *existing != p => return Err(SynonymError::NotFixedPoint(p)),
                Some(_) => {}
                None => {
                    map.insert(fold(&p), p);
                }
            }
        }
        Ok(SynonymTable { map })
    }

    /// Reads a two-column TSV; `#` lines are comments.
    pub fn load(path: &Path) -> Result<Self, SynonymError> {
        let text = fs::read_to_string(path)?;
        let mut pairs = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let mut cols = line.split('\t');
            match (cols.next(), cols.next(), cols.next()) {
                (Some(s), Some(p), None) if !s.trim().is_empty() && !p.trim().is_empty() => {
                    pairs.push((s, p))
                }
                _ => return Err(SynonymError::Malformed(i + 1)),
            }
        }
        Self::from_pairs(pairs)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn preferred(&self, surface: &str) -> Option<&str> {
        self.map.get(&fold(surface)).map(String::as_str)
    }

    /// The surface form and every form sharing its preferred label.
    fn equivalents(&self, surface: &str) -> Vec<String> {
        let mut out = vec![surface.to_string()];
        if let Some(p) = self.preferred(surface) {
            out.push(p.to_string());
            let key = fold(p);
            for (s, q) in &self.map {
                if fold(q) == key {
                    out.push(s.clone());
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValidatorConfig {
    pub min_p3_enrollment: u64,
    pub icd_overlap_ratio: f64,
}

impl Default for ValidatorConfig {
    fn default() -> Self {
        ValidatorConfig {
            min_p3_enrollment: 50,
            icd_overlap_ratio: 0.5,
        }
    }
}

fn present(raw: &Map<String, Value>, key: &str) -> bool {
    match raw.get(key) {
        None | Some(Value::Null) => false,
        Some(Value::String(s)) => !s.trim().is_empty(),
        Some(_) => true,
    }
}

/// Conformance rules evaluated on raw (slot-normalized) values, with the
/// single-slot repairs they imply applied to `raw`.
pub fn check_conformance(raw: &mut Map<String, Value>) -> Vec<CheckResult> {
    let mut out = Vec::new();

    if let Some(v) = raw.get("phase").filter(|v| !v.is_null()).cloned() {
        match parse_phase_value(&v) {
            Some(set) => {
                let canonical = set.to_tokens();
                if v.as_str() == Some(canonical.as_str()) {
                    out.push(CheckResult::pass("phase_legal", canonical));
                } else {
                    out.push(CheckResult::repaired(
                        "phase_legal",
                        format!("{v} -> {canonical}"),
                    ));
                    raw.insert("phase".into(), Value::String(canonical));
                }
            }
            None => {
                let why = match v.as_str().map(PhaseSet::parse) {
                    Some(Err(PhaseTokenError::Excluded)) => "phase IV is outside the value space",
                    _ => "unrecognized phase token",
                };
                out.push(CheckResult::fail("phase_legal", format!("{v}: {why}")));
            }
        }
    }

    match raw.get("enrollment").filter(|v| !v.is_null()).cloned() {
        None => out.push(CheckResult::pass("enrollment_integer", "absent")),
        Some(Value::Number(n)) if n.is_u64() => {
            out.push(CheckResult::pass("enrollment_integer", n.to_string()))
        }
        Some(v) => match coerce_u64(&v) {
            Some(n) => {
                out.push(CheckResult::repaired(
                    "enrollment_integer",
                    format!("{v} -> {n}"),
                ));
                raw.insert("enrollment".into(), Value::from(n));
            }
            None => out.push(CheckResult::fail(
                "enrollment_integer",
                format!("{v} is not a non-negative integer"),
            )),
        },
    }

    if let Some(v) = raw.get("arms").filter(|v| !v.is_null()).cloned() {
        if !matches!(v, Value::Number(ref n) if n.is_u64()) {
            if let Some(n) = coerce_u64(&v) {
                out.push(CheckResult::repaired("arms_integer", format!("{v} -> {n}")));
                raw.insert("arms".into(), Value::from(n));
            }
        }
    }

    let comparator = raw
        .get("comparator")
        .and_then(Value::as_str)
        .and_then(Comparator::parse);
    let arms = raw.get("arms").and_then(coerce_u64);
    out.push(match (comparator, arms) {
        (Some(c), Some(a)) if c != Comparator::None && a < 2 => CheckResult::fail(
            "arm_comparator_agreement",
            format!("{a} arm(s) with comparator {}", c.as_str()),
        ),
        (Some(c), None) if c != Comparator::None => {
            CheckResult::pass("arm_comparator_agreement", "arm count unknown")
        }
        _ => CheckResult::pass("arm_comparator_agreement", ""),
    });

    let design_given = ["arms", "comparator", "randomization"]
        .iter()
        .any(|k| present(raw, k));
    out.push(if design_given && !present(raw, "primary_endpoint") {
        CheckResult::fail(
            "endpoint_present",
            "design slots given without a primary endpoint",
        )
    } else {
        CheckResult::pass("endpoint_present", "")
    });

    for slot in ["diseases", "drugs", "icdcode"] {
        let Some(list) = raw.get(slot).and_then(string_list) else {
            continue;
        };
        let mut seen = HashSet::new();
        let deduped: Vec<String> = list
            .iter()
            .filter(|s| seen.insert(fold(s)))
            .cloned()
            .collect();
        if deduped.len() < list.len() {
            out.push(CheckResult::repaired(
                &format!("{slot}_unique"),
                format!("dropped {} duplicate(s)", list.len() - deduped.len()),
            ));
            raw.insert(slot.into(), Value::from(deduped));
        }
    }
    out
}

const STOPWORDS: &[&str] = &[
    "of",
    "and",
    "the",
    "in",
    "with",
    "without",
    "or",
    "to",
    "for",
    "a",
    "an",
    "by",
    "on",
    "nos",
    "unspecified",
];

fn content_tokens(text: &str) -> BTreeSet<String> {
    fold(text)
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty() && !STOPWORDS.contains(t))
        .map(str::to_string)
        .collect()
}

/// Jaccard overlap of content tokens.
pub fn token_overlap(a: &str, b: &str) -> f64 {
    let (x, y) = (content_tokens(a), content_tokens(b));
    if x.is_empty() || y.is_empty() {
        return 0.0;
    }
    let inter = x.intersection(&y).count();
    inter as f64 / (x.len() + y.len() - inter) as f64
}

fn concept_and_ancestors<'a>(
    ontology: &'a OntologyTable,
    concept: &'a Concept,
) -> Vec<&'a Concept> {
    let mut out = vec![concept];
    out.extend(ontology.ancestors(&concept.code).unwrap_or_default());
    out
}

/// Rules relating two or more slots, plus ontology coherence.
pub fn check_cross_field(
    record: &TrialRecord,
    ontology: &OntologyTable,
    synonyms: &SynonymTable,
    config: &ValidatorConfig,
) -> Vec<CheckResult> {
    let mut out = Vec::new();
    if record.phase.contains(Phase::III) {
        out.push(match record.enrollment {
            Some(n) if n < config.min_p3_enrollment => CheckResult::fail(
                "phase3_min_enrollment",
                format!("enrollment {n} below {}", config.min_p3_enrollment),
            ),
            Some(n) => CheckResult::pass("phase3_min_enrollment", n.to_string()),
            None => CheckResult::pass("phase3_min_enrollment", "enrollment unknown"),
        });
    }

    // disease side: synonym classes, grounded concepts and their ancestors
    let mut disease_labels: Vec<String> = Vec::new();
    let mut disease_cuis: HashSet<String> = HashSet::new();
    for d in &record.diseases {
        for form in synonyms.equivalents(d) {
            for concept in ontology.ground_all(&form) {
                for c in concept_and_ancestors(ontology, concept) {
                    disease_labels.extend(c.labels().map(str::to_string));
                    disease_cuis.extend(c.cui.clone());
                }
            }
            disease_labels.push(form);
        }
    }

    for code in &record.icd_codes {
        let Some(concept) = ontology.get(code.as_str()) else {
            out.push(CheckResult::pass(
                "icd_coherence",
                format!("{}: unverified", code.as_str()),
            ));
            continue;
        };
        let chain = concept_and_ancestors(ontology, concept);
        let cui_hit = chain
            .iter()
            .find_map(|c| c.cui.as_ref().filter(|cui| disease_cuis.contains(*cui)));
        if let Some(cui) = cui_hit {
            out.push(CheckResult::pass(
                "icd_coherence",
                format!("{}: shared concept {cui}", code.as_str()),
            ));
            continue;
        }
        let best = chain
            .iter()
            .flat_map(|c| c.labels())
            .flat_map(|label| {
                disease_labels
                    .iter()
                    .map(move |d| (token_overlap(label, d), label))
            })
            .max_by(|a, b| a.0.total_cmp(&b.0));
        out.push(match best {
            Some((score, label)) if score >= config.icd_overlap_ratio => CheckResult::pass(
                "icd_coherence",
                format!("{}: matches `{label}` ({score:.2})", code.as_str()),
            ),
            _ => CheckResult::fail(
                "icd_coherence",
                format!(
                    "{}: no label of the code or its ancestors matches a disease",
                    code.as_str()
                ),
            ),
        });
    }
    out
}

fn unit_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?P<num>[0-9](?:[0-9.,]*[0-9])?)(?P<sp>\s*)(?P<unit>yrs|yr|wks|wk|mos|kgs|Kg|KG|mgs|MG|ml|ML|cc)\b")
            .unwrap()
    })
}

fn canonical_unit(unit: &str) -> &'static str {
    match unit {
        "yr" | "yrs" => "years",
        "wk" | "wks" => "weeks",
        "mos" => "months",
        "kgs" | "Kg" | "KG" => "kg",
        "mgs" | "MG" => "mg",
        _ => "mL",
    }
}

/// Unit spelling in criteria and synonym replacement of disease/drug names.
pub fn normalize_units_and_spelling(
    record: &TrialRecord,
    synonyms: &SynonymTable,
) -> (TrialRecord, Vec<CheckResult>) {
    let mut r = record.clone();
    let mut repairs = Vec::new();

    let mut changes: Vec<String> = Vec::new();
    let criteria = unit_regex().replace_all(&record.criteria, |caps: &regex::Captures<'_>| {
        let unit = &caps["unit"];
        let canon = canonical_unit(unit);
        changes.push(format!("{unit} -> {canon}"));
        format!("{}{}{}", &caps["num"], &caps["sp"], canon)
    });
    if !changes.is_empty() {
        r.criteria = criteria.into_owned();
        changes.dedup();
        repairs.push(CheckResult::repaired(
            "unit_normalization",
            changes.join(", "),
        ));
    }

    for (slot, list) in [("diseases", &mut r.diseases), ("drugs", &mut r.drugs)] {
        let mut replaced = Vec::new();
        for item in list.iter_mut() {
            if let Some(p) = synonyms.preferred(item) {
                if p != item.as_str() {
                    replaced.push(format!("{item} -> {p}"));
                    *item = p.to_string();
                }
            }
        }
        if !replaced.is_empty() {
            let mut seen = HashSet::new();
            list.retain(|s| seen.insert(fold(s)));
            repairs.push(CheckResult::repaired(
                &format!("{slot}_synonyms"),
                replaced.join(", "),
            ));
        }
    }
    (r, repairs)
}

/// Canonical SMILES for every parseable entry. Unsupported features leave the
/// canonical form absent without failing the record.
pub fn canonicalize_smiles(record: &mut TrialRecord) -> Vec<CheckResult> {
    let mut out = Vec::new();
    for s in &mut record.smiles {
        match canonical_smiles(&s.raw) {
            Ok(c) => {
                out.push(CheckResult::pass("smiles_canonical", c.clone()));
                s.canonical = Some(c);
            }
            Err(SmilesError::UnsupportedFeature(t)) => {
                s.canonical = None;
                out.push(CheckResult::pass(
                    "smiles_canonical",
                    format!("unsupported feature `{t}`; canonical form left absent"),
                ));
            }
            Err(e) => {
                s.canonical = None;
                out.push(CheckResult::fail(
                    "smiles_invalid",
                    format!("{}: {e}", s.raw),
                ));
            }
        }
    }
    out
}

/// Final verdict: any remaining failure rejects, with one reason code per
/// failing rule.
pub fn repair_or_reject(
    record_id: &str,
    checks: Vec<CheckResult>,
    record: Option<TrialRecord>,
) -> ValidationReport {
    let mut reason_codes: Vec<String> = Vec::new();
    for c in checks.iter().filter(|c| c.status == Status::Fail) {
        if !reason_codes.contains(&c.rule_id) {
            reason_codes.push(c.rule_id.clone());
        }
    }
    let verdict = if !reason_codes.is_empty() {
        Verdict::Reject
    } else if checks.iter().any(|c| c.status == Status::Repaired) {
        Verdict::AcceptRepaired
    } else {
        Verdict::Accept
    };
    ValidationReport {
        record_id: record_id.to_string(),
        checks,
        verdict,
        record: if verdict == Verdict::Reject {
            None
        } else {
            record
        },
        reason_codes,
    }
}

pub struct Validator<'a> {
    pub ontology: &'a OntologyTable,
    pub synonyms: &'a SynonymTable,
    pub config: ValidatorConfig,
}

impl Validator<'_> {
    /// Validates one raw JSON record.
    pub fn validate_value(&self, value: &Value) -> ValidationReport {
        let Some(obj) = value.as_object() else {
            return repair_or_reject(
                "",
                vec![CheckResult::fail(
                    "not_an_object",
                    "record is not a JSON object",
                )],
                None,
            );
        };
        let mut raw = normalize_slot_names(obj);
        let record_id = match raw.get("nct_id") {
            Some(Value::String(s)) => s.trim().to_string(),
            Some(Value::Number(n)) => n.to_string(),
            _ => String::new(),
        };
        let mut checks = check_conformance(&mut raw);
        if checks.iter().any(|c| c.status == Status::Fail) {
            return repair_or_reject(&record_id, checks, None);
        }
        let record = match parse_record(&Value::Object(raw)) {
            Ok(r) => r,
            Err(e) => {
                checks.push(CheckResult::fail(&e.reason_code(), e.to_string()));
                return repair_or_reject(&record_id, checks, None);
            }
        };
        checks.extend(check_cross_field(
            &record,
            self.ontology,
            self.synonyms,
            &self.config,
        ));
        let (mut record, repairs) = normalize_units_and_spelling(&record, self.synonyms);
        checks.extend(repairs);
        checks.extend(canonicalize_smiles(&mut record));
        repair_or_reject(&record_id, checks, Some(record))
    }

    pub fn validate_record(&self, record: &TrialRecord) -> ValidationReport {
        self.validate_value(&record.to_json())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overlap_examples() {
        assert_eq!(token_overlap("Lung Neoplasms", "lung neoplasms"), 1.0);
        assert_eq!(token_overlap("a b", ""), 0.0);
        assert!((token_overlap("lung cancer", "lung neoplasm") - 1.0 / 3.0).abs() < 1e-12);
    }
}
