//! Seeded generator for the bundled demo corpus.
//!
//! Records span all three phases. Outcome labels follow a planted
//! drug-class × disease-class interaction with some label noise, and a few
//! records are deliberately broken or in need of repair so every validator
//! path is exercised.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

/// (intervention, SMILES, class)
const DRUGS: &[(&str, &str, u8)] = &[
    ("aspirin", "CC(=O)Oc1ccccc1C(=O)O", 0),
    ("ibuprofen", "CC(C)Cc1ccc(cc1)C(C)C(=O)O", 0),
    ("paracetamol", "CC(=O)Nc1ccc(O)cc1", 0),
    ("naproxen", "COc1ccc2cc(ccc2c1)C(C)C(=O)O", 0),
    ("metformin", "CN(C)C(=N)N=C(N)N", 1),
    ("caffeine", "Cn1cnc2c1c(=O)n(C)c(=O)n2C", 1),
    ("lidocaine", "CCN(CC)CC(=O)Nc1c(C)cccc1C", 1),
    ("nicotine", "CN1CCCC1c1cccnc1", 1),
];

/// (condition, ICD-10 code, class)
const DISEASES: &[(&str, &str, u8)] = &[
    ("Irritable Bowel Syndrome", "K58", 0),
    ("Type 2 diabetes mellitus", "E11", 0),
    ("Hypertension", "I10", 0),
    ("Asthma", "J45", 0),
    ("Ulcerative colitis", "K51", 0),
    ("Malignant neoplasm of breast", "C50", 1),
    ("Lung Neoplasms", "C34", 1),
    ("Alzheimer disease", "G30", 1),
    ("Crohn disease", "K50", 1),
    ("Depressive episode", "F32", 1),
];

const INCLUSION: &[&str] = &[
    "Adults aged {a} to {b} years",
    "Diagnosis confirmed at least {m} months before screening",
    "Stable background therapy for {w} weeks",
    "Able to provide written informed consent",
    "Body mass index between {a} and {b} kg/m2",
    "Willing to complete a daily symptom diary",
];

const EXCLUSION: &[&str] = &[
    "Pregnancy or breastfeeding",
    "Prior surgery within {m} months",
    "Active infection requiring systemic treatment",
    "Participation in another interventional study within {w} weeks",
    "Known hypersensitivity to the study drug",
    "Severe hepatic or renal impairment",
];

const ENDPOINTS: &[&str] = &[
    "change in symptom score at week {w}",
    "overall response rate at {m} months",
    "incidence of adverse events",
    "maximum tolerated dose",
    "time to relapse",
];

fn fill(template: &str, rng: &mut ChaCha8Rng) -> String {
    let a = rng.random_range(18..30);
    template
        .replace("{a}", &a.to_string())
        .replace("{b}", &(a + rng.random_range(20..50)).to_string())
        .replace("{m}", &rng.random_range(2..13).to_string())
        .replace("{w}", &rng.random_range(2..25).to_string())
}

fn criteria(rng: &mut ChaCha8Rng) -> String {
    let pick = |pool: &[&str], rng: &mut ChaCha8Rng| {
        let n = rng.random_range(2..=4);
        let mut items: Vec<String> = pool.choose_multiple(rng, n).map(|t| fill(t, rng)).collect();
        items.iter_mut().for_each(|s| s.insert_str(0, "* "));
        items.join("\n")
    };
    let inc = pick(INCLUSION, rng);
    let exc = pick(EXCLUSION, rng);
    format!("Inclusion Criteria:\n{inc}\nExclusion Criteria:\n{exc}")
}

/// One well-formed record.
fn record(i: usize, phase: &str, rng: &mut ChaCha8Rng) -> Value {
    let (drug, smiles, drug_class) = *DRUGS.choose(rng).unwrap();
    let (disease, icd, disease_class) = *DISEASES.choose(rng).unwrap();
    let noisy = rng.random::<f64>() < 0.15;
    let label = (drug_class ^ disease_class) ^ noisy as u8;
    let enrollment = match phase {
        "PHASE1" => rng.random_range(12..80),
        "PHASE2" => rng.random_range(40..300),
        _ => rng.random_range(150..1200),
    };
    let placebo = rng.random_bool(0.6);
    let arms = if placebo {
        rng.random_range(2..4)
    } else {
        rng.random_range(1..4)
    };
    let comparator = if placebo {
        "placebo"
    } else if arms == 1 {
        "none"
    } else {
        "active"
    };
    let blinding = *["open", "single", "double"].choose(rng).unwrap();
    json!({
        "nct_id": format!("NCT9{i:07}"),
        "phase": phase,
        "diseases": [disease],
        "icdcode": [icd],
        "drugs": [drug],
        "smiles": [smiles],
        "criteria": criteria(rng),
        "enrollment": enrollment,
        "arms": arms,
        "randomization": arms > 1,
        "blinding": blinding,
        "comparator": comparator,
        "primary_endpoint": fill(ENDPOINTS.choose(rng).unwrap(), rng),
        "label": label,
    })
}

/// Damages record `v` in one of several ways chosen by `kind`.
fn corrupt(v: &mut Value, kind: usize) {
    let o = v.as_object_mut().unwrap();
    match kind % 8 {
        0 => {
            o.insert("phase".into(), json!("PHASE3"));
            o.insert("enrollment".into(), json!(5));
        }
        1 => {
            o.insert("arms".into(), json!(1));
            o.insert("comparator".into(), json!("placebo"));
        }
        2 => {
            o.remove("criteria");
        }
        3 => {
            o.insert("smiles".into(), json!(["C1CC(=O"]));
        }
        // the rest are repairable
        4 => {
            let d = o["drugs"][0].clone();
            o.insert("drugs".into(), json!([d.clone(), d]));
        }
        5 => {
            o.insert("diseases".into(), json!(["IBS"]));
            o.insert("icdcode".into(), json!(["K58"]));
        }
        6 => {
            let c = o["criteria"].as_str().unwrap().replace("years", "yrs");
            o.insert("criteria".into(), json!(c));
            o.insert("enrollment".into(), json!(o["enrollment"].to_string()));
        }
        _ => {
            o.insert("phase".into(), json!("Phase 2"));
        }
    }
}

/// `n` records: phases cycle I, II, III; every 12th record is damaged.
pub fn generate_corpus(n: usize, seed: u64) -> Vec<Value> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let phase = ["PHASE1", "PHASE2", "PHASE3"][i % 3];
            let mut v = record(i, phase, &mut rng);
            if i % 12 == 11 {
                corrupt(&mut v, i / 12);
            }
            v
        })
        .collect()
}

pub fn to_jsonl(records: &[Value]) -> String {
    records.iter().map(|v| format!("{v}\n")).collect()
}
