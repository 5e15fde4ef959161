mod common;

use common::records::{fixtures_dir, ibs_record};
use proptest::prelude::*;
use serde_json::{json, Value};
use trialmoe::ontology::{load_ontology, OntologyTable};
use trialmoe::schema::{parse_record, IcdCode};
use trialmoe::validate::*;

fn ontology() -> OntologyTable {
    load_ontology(&fixtures_dir().join("ontology")).unwrap()
}

fn synonyms() -> SynonymTable {
    SynonymTable::load(&fixtures_dir().join("synonyms.tsv")).unwrap()
}

fn validate(v: &Value) -> ValidationReport {
    let (o, s) = (ontology(), synonyms());
    Validator {
        ontology: &o,
        synonyms: &s,
        config: ValidatorConfig::default(),
    }
    .validate_value(v)
}

fn base() -> Value {
    json!({
        "nct_id": "NCT00000042",
        "phase": "PHASE1, PHASE2",
        "diseases": ["non–small cell lung cancer"],
        "icdcode": ["C34"],
        "drugs": ["cisplatin"],
        "criteria": "Inclusion Criteria: * Age 18-75 years",
        "enrollment": 120,
        "arms": 2,
        "comparator": "placebo",
        "primary_endpoint": "PFS"
    })
}

fn with(mut v: Value, key: &str, value: Value) -> Value {
    v[key] = value;
    v
}

#[test]
fn ibs_fixture_passes() {
    let report = validate(&ibs_record().to_json());
    assert_eq!(report.verdict, Verdict::Accept, "{:?}", report.checks);
    assert!(report
        .checks
        .iter()
        .any(|c| c.rule_id == "icd_coherence" && c.detail.contains("unverified")));
    assert!(report
        .checks
        .iter()
        .any(|c| c.rule_id == "smiles_canonical" && c.detail.contains("unsupported")));
}

#[test]
fn consistent_record_all_pass() {
    let mut raw = base().as_object().unwrap().clone();
    let checks = check_conformance(&mut raw);
    assert!(
        checks.iter().all(|c| c.status == Status::Pass),
        "{checks:?}"
    );
    let report = validate(&base());
    assert_eq!(report.verdict, Verdict::Accept, "{:?}", report.checks);
    assert!(report.reason_codes.is_empty());
}

#[test]
fn phase3_small_enrollment_rejected() {
    let v = with(
        with(base(), "phase", json!("PHASE3")),
        "enrollment",
        json!(5),
    );
    let report = validate(&v);
    assert_eq!(report.verdict, Verdict::Reject);
    assert_eq!(report.reason_codes, ["phase3_min_enrollment"]);
    let v = with(
        with(base(), "phase", json!("PHASE1")),
        "enrollment",
        json!(5),
    );
    assert_eq!(validate(&v).verdict, Verdict::Accept);
}

#[test]
fn single_arm_with_placebo_rejected() {
    let report = validate(&with(base(), "arms", json!(1)));
    assert_eq!(report.verdict, Verdict::Reject);
    assert_eq!(report.reason_codes, ["arm_comparator_agreement"]);
}

#[test]
fn enrollment_rules() {
    let report = validate(&with(base(), "enrollment", json!("many")));
    assert_eq!(report.reason_codes, ["enrollment_integer"]);
    let report = validate(&with(base(), "enrollment", json!("120")));
    assert_eq!(report.verdict, Verdict::AcceptRepaired);
    assert_eq!(report.record.unwrap().enrollment, Some(120));
}

#[test]
fn phase_four_and_missing_slots_rejected() {
    assert_eq!(
        validate(&with(base(), "phase", json!("PHASE4"))).reason_codes,
        ["phase_legal"]
    );
    let mut v = base();
    v.as_object_mut().unwrap().remove("drugs");
    assert_eq!(validate(&v).reason_codes, ["missing_drugs"]);
    assert_eq!(validate(&json!({})).reason_codes, ["missing_nct_id"]);
}

#[test]
fn endpoint_required_with_design_slots() {
    let mut v = base();
    v.as_object_mut().unwrap().remove("primary_endpoint");
    assert_eq!(validate(&v).reason_codes, ["endpoint_present"]);
}

#[test]
fn lung_code_matches_via_ancestor_labels() {
    let r = parse_record(&base()).unwrap();
    let checks = check_cross_field(&r, &ontology(), &synonyms(), &ValidatorConfig::default());
    let icd = checks
        .iter()
        .find(|c| c.rule_id == "icd_coherence")
        .unwrap();
    assert_eq!(icd.status, Status::Pass, "{icd:?}");

    let mut wrong = r.clone();
    wrong.icd_codes = vec![IcdCode::parse("K58").unwrap()];
    let checks = check_cross_field(
        &wrong,
        &ontology(),
        &synonyms(),
        &ValidatorConfig::default(),
    );
    assert!(checks
        .iter()
        .any(|c| c.rule_id == "icd_coherence" && c.status == Status::Fail));
}

#[test]
fn nsclc_synonym_and_units() {
    let mut r = parse_record(&base()).unwrap();
    r.diseases = vec!["NSCLC".into()];
    r.criteria = "Adults 18–75 yr with ECOG 0-1.".into();
    let (out, repairs) = normalize_units_and_spelling(&r, &synonyms());
    assert_eq!(out.diseases, ["non\u{2013}small cell lung cancer"]);
    assert_eq!(out.criteria, "Adults 18–75 years with ECOG 0-1.");
    assert_eq!(repairs.len(), 2);
    assert!(repairs.iter().all(|c| c.status == Status::Repaired));

    let mut plain = parse_record(&base()).unwrap();
    plain.diseases = vec!["NSCLC".into()];
    let (same, repairs) = normalize_units_and_spelling(&plain, &SynonymTable::default());
    assert_eq!(same, plain);
    assert!(repairs.is_empty());
}

#[test]
fn duplicate_entries_dropped() {
    let v = with(
        base(),
        "drugs",
        json!(["cisplatin", "Cisplatin", "pemetrexed"]),
    );
    let report = validate(&v);
    assert_eq!(report.verdict, Verdict::AcceptRepaired);
    assert_eq!(report.record.unwrap().drugs, ["cisplatin", "pemetrexed"]);
}

#[test]
fn invalid_smiles_rejected() {
    let report = validate(&with(base(), "smiles", json!(["C1CC"])));
    assert_eq!(report.reason_codes, ["smiles_invalid"]);
    let report = validate(&with(base(), "smiles", json!(["OCC"])));
    assert_eq!(
        report.record.unwrap().smiles[0].canonical.as_deref(),
        Some("CCO")
    );
}

#[test]
fn synonym_table_requires_fixed_points() {
    assert!(matches!(
        SynonymTable::from_pairs([("a", "b"), ("b", "c")]),
        Err(SynonymError::NotFixedPoint(_))
    ));
    let t = synonyms();
    assert_eq!(
        t.preferred("nsclc"),
        Some("non\u{2013}small cell lung cancer")
    );
    assert_eq!(
        t.preferred("non\u{2013}small cell lung cancer"),
        Some("non\u{2013}small cell lung cancer")
    );
}

fn raw_record() -> impl Strategy<Value = Value> {
    (
        prop::sample::select(vec!["PHASE1", "phase 2", "II/III", "PHASE3", "1", "Phase1, Phase2", "PHASE4"]),
        prop::sample::subsequence(vec!["NSCLC", "IBS", "hypertension", "Irritable Bowel Syndrome", "COPD"], 1..3),
        prop::sample::select(vec![json!(["C34"]), json!(["K58", "K58"]), json!(["I10"]), json!([]), json!(["D6861"])]),
        prop::sample::select(vec![json!(["aspirin"]), json!(["aspirin", "Aspirin"]), json!("['metformin']")]),
        prop::sample::select(vec![json!(10), json!(80), json!("200"), json!(null), json!(12.0)]),
        prop::sample::select(vec![json!(null), json!(1), json!(2), json!("3")]),
        prop::sample::select(vec![json!(null), json!("placebo"), json!("none"), json!("Standard of Care")]),
        prop::sample::select(vec![json!(null), json!("overall survival")]),
        prop::sample::select(vec!["Adults 18-65 yr, weight > 50 kgs.", "Exclusion Criteria: * Pregnancy", ""]),
        prop::sample::select(vec![json!(null), json!(["CCO", "c1ccccc1"]), json!(["F/C=C/F"])]),
    )
        .prop_map(|(phase, diseases, icd, drugs, enrollment, arms, comparator, endpoint, criteria, smiles)| {
            json!({
                "NCT_ID": "NCT0000X", "Phase": phase, "diseases": diseases, "icdcode": icd, "drugs": drugs,
                "enrollment": enrollment, "arms": arms, "comparator": comparator, "primary_endpoint": endpoint,
                "criteria": criteria, "smiles": smiles
            })
        })
}

proptest! {
    #[test]
    fn accepted_records_revalidate_clean(v in raw_record()) {
        let first = validate(&v);
        prop_assert_eq!(first.verdict == Verdict::Reject, !first.reason_codes.is_empty());
        if let Some(r) = &first.record {
            let second = validate(&r.to_json());
            prop_assert_eq!(second.verdict, Verdict::Accept, "{:?}", second.checks);
            prop_assert_eq!(second.repairs(), 0);
            prop_assert_eq!(second.record.as_ref(), Some(r));
        }
        prop_assert_eq!(validate(&v), first);
    }

    #[test]
    fn adding_a_synonym_never_breaks_a_pass(
        v in raw_record(),
        surface in prop::sample::select(vec!["lung cancer", "bowel disorder", "COPD", "HTN", "IBS-D"]),
        preferred in prop::sample::select(vec!["Lung Neoplasms", "Irritable bowel syndrome", "Essential (primary) hypertension", "asthma"]),
    ) {
        let o = ontology();
        let small = synonyms();
        let mut pairs: Vec<(String, String)> = std::fs::read_to_string(fixtures_dir().join("synonyms.tsv")).unwrap()
            .lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty())
            .map(|l| { let mut c = l.split('\t'); (c.next().unwrap().to_string(), c.next().unwrap().to_string()) })
            .collect();
        pairs.push((surface.to_string(), preferred.to_string()));
        let Ok(big) = SynonymTable::from_pairs(pairs) else { return Ok(()) };
        let config = ValidatorConfig::default();
        let before = Validator { ontology: &o, synonyms: &small, config }.validate_value(&v);
        let after = Validator { ontology: &o, synonyms: &big, config }.validate_value(&v);
        let passed: Vec<&str> = before.checks.iter().filter(|c| c.status == Status::Pass).map(|c| c.rule_id.as_str()).collect();
        for c in after.checks.iter().filter(|c| c.status == Status::Fail) {
            prop_assert!(!passed.contains(&c.rule_id.as_str()) || before.checks.iter().any(|b| b.rule_id == c.rule_id && b.status == Status::Fail),
                "{} turned from pass to fail", c.rule_id);
        }
    }
}
