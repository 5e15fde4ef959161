mod common;

use common::molgen::{isomorphic, random_graph, random_order};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trialmoe::smiles::{canonical_smiles, canonicalize, parse_smiles, write_smiles, SmilesError};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn reordered_emission_gives_same_canonical(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_graph(&mut rng, 10);
        let expected = canonicalize(&g);
        for _ in 0..3 {
            let order = random_order(&mut rng, g.atoms.len());
            let text = write_smiles(&g, &order);
            let reparsed = parse_smiles(&text).map_err(|e| TestCaseError::fail(format!("{text}: {e}")))?;
            prop_assert!(isomorphic(&g, &reparsed), "writer not faithful: {}", text);
            prop_assert_eq!(canonicalize(&reparsed), expected.clone(), "from {}", text);
        }
    }

    #[test]
    fn canonical_equality_matches_isomorphism(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_graph(&mut rng, 4);
        let b = random_graph(&mut rng, 4);
        prop_assert_eq!(canonicalize(&a) == canonicalize(&b), isomorphic(&a, &b));
    }

    #[test]
    fn canonical_is_idempotent(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_graph(&mut rng, 10);
        let c = canonicalize(&g);
        prop_assert_eq!(canonical_smiles(&c).unwrap(), c);
    }

    #[test]
    fn parser_never_panics(s in "[CNOSPBFIclnosp\\[\\]()=#+@/\\\\%0-9.:H*-]{0,40}") {
        if let Ok(g) = parse_smiles(&s) {
            let c = canonicalize(&g);
            prop_assert_eq!(canonical_smiles(&c).unwrap(), c);
        }
    }
}

#[test]
fn random_bytes_never_panic() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let alphabet = b"CNOSPBFIclnosp[]()=#+-@/\\%0123456789.:H* \n\xff";
    for _ in 0..10_000 {
        let len = rng.random_range(0..32);
        let bytes: Vec<u8> = (0..len)
            .map(|_| {
                if rng.random_bool(0.9) {
                    alphabet[rng.random_range(0..alphabet.len())]
                } else {
                    rng.random()
                }
            })
            .collect();
        let s = String::from_utf8_lossy(&bytes);
        match parse_smiles(&s) {
            Ok(g) => {
                canonicalize(&g);
            }
            Err(SmilesError::SyntaxError(p)) => assert!(p <= s.len()),
            Err(_) => {}
        }
    }
}

#[test]
fn kekule_benzene_spellings_agree() {
    let a = parse_smiles("C1=CC=CC=C1").unwrap();
    let b = parse_smiles("C=1C=CC=CC1").unwrap();
    assert!(isomorphic(&a, &b));
    assert_eq!(canonicalize(&a), canonicalize(&b));
    let c = parse_smiles("OCC").unwrap();
    let d = parse_smiles("CCO").unwrap();
    assert!(isomorphic(&c, &d));
    assert_eq!(canonicalize(&c), canonicalize(&d));
}
