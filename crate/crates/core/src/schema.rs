//! Canonical trial record, slot ordering and controlled value spaces.
//!
//! Records arrive as JSON objects (one per JSONL line). Slot names are matched
//! case-insensitively; unknown fields are ignored.

use std::fmt;

use regex::Regex;
use serde_json::{Map, Value};
use std::sync::OnceLock;
use thiserror::Error;

/// The six slots that open every linearized record, in prompt order.
pub const CORE_SLOTS: [&str; 6] = [
    "phase", "diseases", "drugs", "smiles", "icdcode", "criteria",
];

/// Protocol design slots appended after the core slots.
pub const EXTENDED_SLOTS: [&str; 6] = [
    "enrollment",
    "arms",
    "randomization",
    "blinding",
    "comparator",
    "primary_endpoint",
];

const SLOT_ORDER: [&str; 12] = [
    "phase",
    "diseases",
    "drugs",
    "smiles",
    "icdcode",
    "criteria",
    "enrollment",
    "arms",
    "randomization",
    "blinding",
    "comparator",
    "primary_endpoint",
];

/// Fixed global slot order used by linearization.
pub fn slot_order() -> &'static [&'static str] {
    &SLOT_ORDER
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SchemaError {
    #[error("record is not a JSON object")]
    NotAnObject,
    #[error("missing required slot `{0}`")]
    MissingRequiredSlot(String),
    #[error("slot `{0}` holds a value that cannot be coerced")]
    TypeMismatch(String),
}

impl SchemaError {
    /// Stable snake_case reason code.
    pub fn reason_code(&self) -> String {
        match self {
            SchemaError::NotAnObject => "not_an_object".to_string(),
            SchemaError::MissingRequiredSlot(s) => format!("missing_{s}"),
            SchemaError::TypeMismatch(s) => format!("type_mismatch_{s}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Phase {
    I,
    II,
    III,
}

impl Phase {
    pub const ALL: [Phase; 3] = [Phase::I, Phase::II, Phase::III];

    pub fn token(self) -> &'static str {
        match self {
            Phase::I => "PHASE1",
            Phase::II => "PHASE2",
            Phase::III => "PHASE3",
        }
    }

    pub fn roman(self) -> &'static str {
        match self {
            Phase::I => "I",
            Phase::II => "II",
            Phase::III => "III",
        }
    }

    pub fn bit(self) -> u8 {
        match self {
            Phase::I => 1,
            Phase::II => 2,
            Phase::III => 4,
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PhaseTokenError {
    /// Phase IV and other post-marketing labels.
    Excluded,
    Unrecognized,
    Empty,
}

/// Non-empty subset of {I, II, III}.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct PhaseSet(u8);

impl PhaseSet {
    pub fn single(phase: Phase) -> Self {
        PhaseSet(phase.bit())
    }

    pub fn from_phases<I: IntoIterator<Item = Phase>>(phases: I) -> Option<Self> {
        let bits = phases.into_iter().fold(0u8, |acc, p| acc | p.bit());
        (bits != 0).then_some(PhaseSet(bits))
    }

    pub fn contains(&self, phase: Phase) -> bool {
        self.0 & phase.bit() != 0
    }

    pub fn iter(&self) -> impl Iterator<Item = Phase> + '_ {
        Phase::ALL.into_iter().filter(|p| self.contains(*p))
    }

    /// Lowest phase in the set; used as the stratification key.
    pub fn primary(&self) -> Phase {
        self.iter().next().expect("phase set is never empty")
    }

    /// Parses phase labels such as `PHASE1, PHASE2`, `Phase 1/Phase 2` or `II`.
    pub fn parse(text: &str) -> Result<Self, PhaseTokenError> {
        let upper = text.to_uppercase();
        let mut phases = Vec::new();
        for raw in upper.split([',', '/', ';', '|', '&', '+']) {
            let token: String = raw
                .chars()
                .filter(|c| !c.is_whitespace() && *c != '_')
                .collect();
            if token.is_empty() {
                continue;
            }
            let rest = token.strip_prefix("PHASE").unwrap_or(&token);
            let phase = match rest {
                "1" | "I" => Phase::I,
                "2" | "II" => Phase::II,
                "3" | "III" => Phase::III,
                "4" | "IV" => return Err(PhaseTokenError::Excluded),
                _ => return Err(PhaseTokenError::Unrecognized),
            };
            phases.push(phase);
        }
        PhaseSet::from_phases(phases).ok_or(PhaseTokenError::Empty)
    }

    /// Canonical serialization, e.g. `PHASE1, PHASE2`.
    pub fn to_tokens(&self) -> String {
        self.iter().map(Phase::token).collect::<Vec<_>>().join(", ")
    }
}

impl fmt::Debug for PhaseSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.iter()).finish()
    }
}

impl fmt::Display for PhaseSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_tokens())
    }
}

fn icd_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^[A-Z][0-9]{2}(\.?[0-9A-Z]{1,4})?$").unwrap())
}

/// ICD-10 code: a letter, two digits and optional subdivision characters.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct IcdCode {
    code: String,
}

impl IcdCode {
    pub fn parse(text: &str) -> Option<Self> {
        let code = text.trim().to_uppercase();
        icd_regex().is_match(&code).then_some(IcdCode { code })
    }

    pub fn as_str(&self) -> &str {
        &self.code
    }

    /// Dotless form used for table lookups (`D68.61` and `D6861` share a key).
    pub fn key(&self) -> String {
        self.code.replace('.', "")
    }

    /// Structural tree parent: the code with its last subdivision character removed.
    pub fn tree_parent(&self) -> Option<IcdCode> {
        let key = self.key();
        if key.len() <= 3 {
            return None;
        }
        IcdCode::parse(&key[..key.len() - 1])
    }
}

impl fmt::Display for IcdCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.code)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SmilesString {
    pub raw: String,
    pub canonical: Option<String>,
}

impl SmilesString {
    pub fn new(raw: impl Into<String>) -> Self {
        SmilesString {
            raw: raw.into(),
            canonical: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Blinding {
    Open,
    Single,
    Double,
}

impl Blinding {
    pub fn as_str(self) -> &'static str {
        match self {
            Blinding::Open => "open",
            Blinding::Single => "single",
            Blinding::Double => "double",
        }
    }

    pub fn parse(text: &str) -> Option<Self> {
        let t = normalize_enum_text(text);
        match t.as_str() {
            "open" | "open_label" | "none" | "none_open_label" => Some(Blinding::Open),
            "single" | "single_blind" => Some(Blinding::Single),
            "double" | "double_blind" => Some(Blinding::Double),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Comparator {
    Placebo,
    StandardOfCare,
    Active,
    None,
}

impl Comparator {
    pub fn as_str(self) -> &'static str {
        match self {
            Comparator::Placebo => "placebo",
            Comparator::StandardOfCare => "standard_of_care",
            Comparator::Active => "active",
            Comparator::None => "none",
        }
    }

    pub fn parse(text: &str) -> Option<Self> {
        let t = normalize_enum_text(text);
        match t.as_str() {
            "placebo" => Some(Comparator::Placebo),
            "standard_of_care" | "soc" => Some(Comparator::StandardOfCare),
            "active" | "active_control" => Some(Comparator::Active),
            "none" | "no_comparator" => Some(Comparator::None),
            _ => None,
        }
    }
}

fn normalize_enum_text(text: &str) -> String {
    let mut out = String::new();
    for c in text.trim().to_lowercase().chars() {
        if c.is_alphanumeric() {
            out.push(c);
        } else if !out.ends_with('_') && !out.is_empty() {
            out.push('_');
        }
    }
    out.trim_end_matches('_').to_string()
}

/// One trial-phase instance.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialRecord {
    pub nct_id: String,
    pub phase: PhaseSet,
    pub diseases: Vec<String>,
    pub icd_codes: Vec<IcdCode>,
    pub drugs: Vec<String>,
    pub smiles: Vec<SmilesString>,
    pub enrollment: Option<u64>,
    pub arms: Option<u32>,
    pub randomization: Option<bool>,
    pub blinding: Option<Blinding>,
    pub comparator: Option<Comparator>,
    pub primary_endpoint: Option<String>,
    pub criteria: String,
    pub brief_summary: Option<String>,
    pub text_description: Option<String>,
    pub label: Option<u8>,
}

impl TrialRecord {
    /// Minimal record with the required slots filled.
    pub fn new(nct_id: impl Into<String>, phase: PhaseSet) -> Self {
        TrialRecord {
            nct_id: nct_id.into(),
            phase,
            diseases: Vec::new(),
            icd_codes: Vec::new(),
            drugs: Vec::new(),
            smiles: Vec::new(),
            enrollment: None,
            arms: None,
            randomization: None,
            blinding: None,
            comparator: None,
            primary_endpoint: None,
            criteria: String::new(),
            brief_summary: None,
            text_description: None,
            label: None,
        }
    }

    /// Canonical JSON form; `parse_record(&r.to_json())` reproduces `r`.
    pub fn to_json(&self) -> Value {
        let mut m = Map::new();
        m.insert("nct_id".into(), Value::from(self.nct_id.clone()));
        m.insert("phase".into(), Value::from(self.phase.to_tokens()));
        m.insert("diseases".into(), Value::from(self.diseases.clone()));
        m.insert("drugs".into(), Value::from(self.drugs.clone()));
        m.insert(
            "smiles".into(),
            Value::from(
                self.smiles
                    .iter()
                    .map(|s| s.raw.clone())
                    .collect::<Vec<_>>(),
            ),
        );
        if self.smiles.iter().any(|s| s.canonical.is_some()) {
            m.insert(
                "smiles_canonical".into(),
                Value::Array(
                    self.smiles
                        .iter()
                        .map(|s| s.canonical.clone().map(Value::from).unwrap_or(Value::Null))
                        .collect(),
                ),
            );
        }
        m.insert(
            "icdcode".into(),
            Value::from(
                self.icd_codes
                    .iter()
                    .map(|c| c.as_str().to_string())
                    .collect::<Vec<_>>(),
            ),
        );
        m.insert("criteria".into(), Value::from(self.criteria.clone()));
        if let Some(v) = self.enrollment {
            m.insert("enrollment".into(), Value::from(v));
        }
        if let Some(v) = self.arms {
            m.insert("arms".into(), Value::from(v));
        }
        if let Some(v) = self.randomization {
            m.insert("randomization".into(), Value::from(v));
        }
        if let Some(v) = self.blinding {
            m.insert("blinding".into(), Value::from(v.as_str()));
        }
        if let Some(v) = self.comparator {
            m.insert("comparator".into(), Value::from(v.as_str()));
        }
        if let Some(v) = &self.primary_endpoint {
            m.insert("primary_endpoint".into(), Value::from(v.clone()));
        }
        if let Some(v) = &self.brief_summary {
            m.insert("brief_summary".into(), Value::from(v.clone()));
        }
        if let Some(v) = &self.text_description {
            m.insert("text_description".into(), Value::from(v.clone()));
        }
        if let Some(v) = self.label {
            m.insert("label".into(), Value::from(v));
        }
        Value::Object(m)
    }
}

const ALIASES: [(&str, &str); 5] = [
    ("nctid", "nct_id"),
    ("icd_codes", "icdcode"),
    ("icdcodes", "icdcode"),
    ("icd_code", "icdcode"),
    ("eligibility_criteria", "criteria"),
];

/// Lowercases slot names and resolves aliases. An exact lowercase key wins
/// over a case-folded duplicate.
pub fn normalize_slot_names(obj: &Map<String, Value>) -> Map<String, Value> {
    let mut out = Map::new();
    for (k, v) in obj {
        let lower = k.to_lowercase();
        let name = ALIASES
            .iter()
            .find(|(a, _)| *a == lower)
            .map(|(_, canonical)| canonical.to_string())
            .unwrap_or(lower);
        if *k == name || !out.contains_key(&name) {
            out.insert(name, v.clone());
        }
    }
    out
}

/// Parses one JSON object into a [`TrialRecord`].
pub fn parse_record(value: &Value) -> Result<TrialRecord, SchemaError> {
    let obj = value.as_object().ok_or(SchemaError::NotAnObject)?;
    let slots = normalize_slot_names(obj);
    let get = |name: &str| slots.get(name).filter(|v| !v.is_null());
    let required =
        |name: &str| get(name).ok_or_else(|| SchemaError::MissingRequiredSlot(name.to_string()));
    let mismatch = |name: &str| SchemaError::TypeMismatch(name.to_string());

    let nct_id = match required("nct_id")? {
        Value::String(s) if !s.trim().is_empty() => s.trim().to_string(),
        Value::Number(n) => n.to_string(),
        _ => return Err(mismatch("nct_id")),
    };
    let phase = parse_phase_value(required("phase")?).ok_or_else(|| mismatch("phase"))?;
    let diseases = string_list(required("diseases")?).ok_or_else(|| mismatch("diseases"))?;
    let drugs = string_list(required("drugs")?).ok_or_else(|| mismatch("drugs"))?;
    let criteria = match required("criteria")? {
        Value::String(s) => s.clone(),
        _ => return Err(mismatch("criteria")),
    };

    let mut smiles: Vec<SmilesString> = match get("smiles") {
        Some(v) => string_list(v)
            .ok_or_else(|| mismatch("smiles"))?
            .into_iter()
            .map(SmilesString::new)
            .collect(),
        None => Vec::new(),
    };
    if let Some(Value::Array(canon)) = get("smiles_canonical") {
        for (s, c) in smiles.iter_mut().zip(canon) {
            s.canonical = c.as_str().map(str::to_string);
        }
    }
    let icd_codes = match get("icdcode") {
        Some(v) => string_list(v)
            .ok_or_else(|| mismatch("icdcode"))?
            .iter()
            .map(|c| IcdCode::parse(c).ok_or_else(|| mismatch("icdcode")))
            .collect::<Result<Vec<_>, _>>()?,
        None => Vec::new(),
    };

    let enrollment = get("enrollment")
        .map(|v| coerce_u64(v).ok_or_else(|| mismatch("enrollment")))
        .transpose()?;
    let arms = get("arms")
        .map(|v| {
            coerce_u64(v)
                .filter(|n| *n >= 1 && *n <= u32::MAX as u64)
                .map(|n| n as u32)
                .ok_or_else(|| mismatch("arms"))
        })
        .transpose()?;
    let randomization = get("randomization")
        .map(|v| coerce_bool(v).ok_or_else(|| mismatch("randomization")))
        .transpose()?;
    let blinding = get("blinding")
        .map(|v| {
            v.as_str()
                .and_then(Blinding::parse)
                .ok_or_else(|| mismatch("blinding"))
        })
        .transpose()?;
    let comparator = get("comparator")
        .map(|v| {
            v.as_str()
                .and_then(Comparator::parse)
                .ok_or_else(|| mismatch("comparator"))
        })
        .transpose()?;
    let primary_endpoint = optional_string(get("primary_endpoint"), "primary_endpoint")?;
    let brief_summary = optional_string(get("brief_summary"), "brief_summary")?;
    let text_description = optional_string(get("text_description"), "text_description")?;
    let label = get("label")
        .map(|v| match coerce_bool(v) {
            Some(b) => Ok(b as u8),
            None => Err(mismatch("label")),
        })
        .transpose()?;

    Ok(TrialRecord {
        nct_id,
        phase,
        diseases,
        icd_codes,
        drugs,
        smiles,
        enrollment,
        arms,
        randomization,
        blinding,
        comparator,
        primary_endpoint,
        criteria,
        brief_summary,
        text_description,
        label,
    })
}

fn optional_string(v: Option<&Value>, name: &str) -> Result<Option<String>, SchemaError> {
    match v {
        None => Ok(None),
        Some(Value::String(s)) => Ok(Some(s.clone())),
        Some(_) => Err(SchemaError::TypeMismatch(name.to_string())),
    }
}

pub fn parse_phase_value(v: &Value) -> Option<PhaseSet> {
    match v {
        Value::String(s) => PhaseSet::parse(s).ok(),
        Value::Array(items) => {
            let mut phases = Vec::new();
            for item in items {
                phases.extend(PhaseSet::parse(item.as_str()?).ok()?.iter());
            }
            PhaseSet::from_phases(phases)
        }
        Value::Number(n) => PhaseSet::parse(&n.to_string()).ok(),
        _ => None,
    }
}

/// Accepts a JSON array of strings, a single string, or a Python-style
/// list literal such as `['a', 'b']`.
pub fn string_list(v: &Value) -> Option<Vec<String>> {
    match v {
        Value::Array(items) => items
            .iter()
            .map(|i| i.as_str().map(str::to_string))
            .collect(),
        Value::String(s) => {
            let t = s.trim();
            if t.starts_with('[') && t.ends_with(']') {
                parse_list_literal(&t[1..t.len() - 1])
            } else {
                Some(vec![s.clone()])
            }
        }
        _ => None,
    }
}

fn parse_list_literal(body: &str) -> Option<Vec<String>> {
    let mut items = Vec::new();
    let mut chars = body.chars().peekable();
    loop {
        while chars.peek().is_some_and(|c| c.is_whitespace() || *c == ',') {
            chars.next();
        }
        let Some(&c) = chars.peek() else { break };
        if c == '\'' || c == '"' {
            chars.next();
            let mut item = String::new();
            loop {
                match chars.next()? {
                    '\\' => item.push(chars.next()?),
                    q if q == c => break,
                    other => item.push(other),
                }
            }
            items.push(item);
        } else {
            let mut item = String::new();
            while let Some(&ch) = chars.peek() {
                if ch == ',' {
                    break;
                }
                item.push(ch);
                chars.next();
            }
            items.push(item.trim().to_string());
        }
    }
    Some(items)
}

pub fn coerce_u64(v: &Value) -> Option<u64> {
    match v {
        Value::Number(n) => n.as_u64().or_else(|| {
            n.as_f64()
                .filter(|f| f.is_finite() && *f >= 0.0 && f.fract() == 0.0)
                .map(|f| f as u64)
        }),
        Value::String(s) => s.trim().parse::<u64>().ok(),
        _ => None,
    }
}

pub fn coerce_bool(v: &Value) -> Option<bool> {
    match v {
        Value::Bool(b) => Some(*b),
        Value::Number(n) => match n.as_u64() {
            Some(0) => Some(false),
            Some(1) => Some(true),
            _ => None,
        },
        Value::String(s) => match s.trim().to_lowercase().as_str() {
            "true" | "yes" | "1" | "randomized" => Some(true),
            "false" | "no" | "0" | "non-randomized" => Some(false),
            _ => None,
        },
        _ => None,
    }
}
