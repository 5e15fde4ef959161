//! Proptest strategies for trial records.

use proptest::collection::vec;
use proptest::prelude::*;
use trialmoe::schema::{Blinding, Comparator, IcdCode, Phase, PhaseSet, SmilesString, TrialRecord};

pub fn fixtures_dir() -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

pub fn ibs_record() -> TrialRecord {
    let text = std::fs::read_to_string(fixtures_dir().join("ibs_record.json")).unwrap();
    trialmoe::schema::parse_record(&serde_json::from_str(&text).unwrap()).unwrap()
}

fn phrase() -> impl Strategy<Value = String> {
    prop::sample::select(vec![
        "lung cancer",
        "Type 2 Diabetes",
        "NSCLC (stage IV",
        "hypertension.",
        "chronic obstructive pulmonary disease",
        "e.g. asthma",
        "Crohn's disease",
        "HIV infection? yes",
        "metformin 500 mg",
        "drug-X [batch 2]",
    ])
    .prop_map(str::to_string)
}

fn criteria() -> impl Strategy<Value = String> {
    vec(
        prop::sample::select(vec![
            "Inclusion Criteria:",
            "Exclusion Criteria:",
            "* Age 18-75 years",
            "* eGFR < 30 mL/min",
            "* HbA1c between 7.0% and 10.5%",
            "* Pregnancy",
            "Patients with prior chemotherapy (within 6 months).",
            "Exclude smokers.",
            "\n",
            "* BMI >= 30 kg/m2, stable for 3 months",
        ]),
        0..12,
    )
    .prop_map(|parts| parts.join(" "))
}

pub fn record() -> impl Strategy<Value = TrialRecord> {
    (
        (1u8..8, vec(phrase(), 1..4), vec(phrase(), 1..4), criteria()),
        (
            prop::option::of(0u64..100_000),
            prop::option::of(1u32..6),
            prop::option::of(any::<bool>()),
            prop::option::of(prop::sample::select(vec![
                Blinding::Open,
                Blinding::Single,
                Blinding::Double,
            ])),
            prop::option::of(prop::sample::select(vec![
                Comparator::Placebo,
                Comparator::StandardOfCare,
                Comparator::Active,
                Comparator::None,
            ])),
            prop::option::of(phrase()),
        ),
    )
        .prop_map(
            |(
                (bits, diseases, drugs, criteria),
                (enrollment, arms, randomization, blinding, comparator, endpoint),
            )| {
                let phases = Phase::ALL.into_iter().filter(|p| bits & p.bit() != 0);
                let mut r = TrialRecord::new("NCT01234567", PhaseSet::from_phases(phases).unwrap());
                r.diseases = diseases;
                r.drugs = drugs;
                r.criteria = criteria;
                r.icd_codes = vec![IcdCode::parse("C34").unwrap()];
                r.smiles = vec![SmilesString::new("CCO")];
                r.enrollment = enrollment;
                r.arms = arms;
                r.randomization = randomization;
                r.blinding = blinding;
                r.comparator = comparator;
                r.primary_endpoint = endpoint;
                r
            },
        )
}
