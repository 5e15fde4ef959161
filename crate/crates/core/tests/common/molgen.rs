//! Random small molecular graphs and a brute-force isomorphism oracle.

use rand::seq::SliceRandom;
use rand::{Rng, RngCore};
use trialmoe::smiles::{Atom, Bond, BondOrder, MolecularGraph};

struct Kind {
    element: u8,
    charge: i8,
    cap: u32,
}

const KINDS: [Kind; 9] = [
    Kind {
        element: 6,
        charge: 0,
        cap: 4,
    },
    Kind {
        element: 6,
        charge: 0,
        cap: 4,
    },
    Kind {
        element: 6,
        charge: 0,
        cap: 4,
    },
    Kind {
        element: 7,
        charge: 0,
        cap: 3,
    },
    Kind {
        element: 8,
        charge: 0,
        cap: 2,
    },
    Kind {
        element: 16,
        charge: 0,
        cap: 2,
    },
    Kind {
        element: 17,
        charge: 0,
        cap: 1,
    },
    Kind {
        element: 7,
        charge: 1,
        cap: 4,
    },
    Kind {
        element: 8,
        charge: -1,
        cap: 1,
    },
];

fn order_of(v: u32) -> BondOrder {
    match v {
        1 => BondOrder::Single,
        2 => BondOrder::Double,
        _ => BondOrder::Triple,
    }
}

/// Random graph with at most `max_atoms` atoms that the parser accepts.
pub fn random_graph(rng: &mut impl RngCore, max_atoms: usize) -> MolecularGraph {
    let mut atoms: Vec<Atom> = Vec::new();
    let mut caps: Vec<u32> = Vec::new();
    let mut used: Vec<u32> = Vec::new();
    let mut bonds: Vec<Bond> = Vec::new();

    if max_atoms >= 5 && rng.random_bool(0.3) {
        let size = rng.random_range(5..=max_atoms.min(6));
        for i in 0..size {
            let nitrogen = i > 0 && rng.random_bool(0.2);
            atoms.push(Atom {
                element: if nitrogen { 7 } else { 6 },
                charge: 0,
                hydrogens: 0,
                aromatic: true,
            });
            caps.push(if nitrogen { 3 } else { 4 });
            used.push(3);
        }
        for i in 0..size {
            bonds.push(Bond {
                a: i,
                b: (i + 1) % size,
                order: BondOrder::Aromatic,
            });
        }
    }
    let n = rng.random_range(atoms.len().max(1)..=max_atoms.max(1));
    while atoms.len() < n {
        let k = &KINDS[rng.random_range(0..KINDS.len())];
        let idx = atoms.len();
        atoms.push(Atom {
            element: k.element,
            charge: k.charge,
            hydrogens: 0,
            aromatic: false,
        });
        caps.push(k.cap);
        used.push(0);
        let open: Vec<usize> = (0..idx).filter(|&j| used[j] < caps[j]).collect();
        if !open.is_empty() && rng.random_bool(0.92) {
            let j = open[rng.random_range(0..open.len())];
            let room = (caps[j] - used[j]).min(caps[idx] - used[idx]).min(3);
            if room > 0 {
                let v = if rng.random_bool(0.7) {
                    1
                } else {
                    rng.random_range(1..=room)
                };
                bonds.push(Bond {
                    a: j,
                    b: idx,
                    order: order_of(v),
                });
                used[j] += v;
                used[idx] += v;
            }
        }
    }
    for _ in 0..rng.random_range(0..3) {
        let a = rng.random_range(0..n);
        let b = rng.random_range(0..n);
        let exists = bonds
            .iter()
            .any(|x| (x.a == a && x.b == b) || (x.a == b && x.b == a));
        if a == b || exists || atoms[a].aromatic || atoms[b].aromatic {
            continue;
        }
        if used[a] < caps[a] && used[b] < caps[b] {
            bonds.push(Bond {
                a,
                b,
                order: BondOrder::Single,
            });
            used[a] += 1;
            used[b] += 1;
        }
    }
    for i in 0..n {
        let mut h = caps[i] - used[i];
        if h > 0 && !atoms[i].aromatic && rng.random_bool(0.1) {
            h -= 1;
        }
        atoms[i].hydrogens = h as u8;
    }
    MolecularGraph {
        atoms,
        bonds,
        ring_closures: Vec::new(),
    }
}

/// A random total order over the atoms, for non-canonical emission.
pub fn random_order(rng: &mut impl RngCore, n: usize) -> Vec<u32> {
    let mut order: Vec<u32> = (0..n as u32).collect();
    order.shuffle(rng);
    order
}

/// Exhaustive backtracking isomorphism test on labeled graphs.
pub fn isomorphic(g: &MolecularGraph, h: &MolecularGraph) -> bool {
    let n = g.atoms.len();
    if n != h.atoms.len() || g.bonds.len() != h.bonds.len() {
        return false;
    }
    let matrix = |m: &MolecularGraph| {
        let mut a = vec![vec![None; n]; n];
        for b in &m.bonds {
            a[b.a][b.b] = Some(b.order);
            a[b.b][b.a] = Some(b.order);
        }
        a
    };
    let (ga, ha) = (matrix(g), matrix(h));
    let mut map = vec![usize::MAX; n];
    let mut taken = vec![false; n];
    fn extend(
        i: usize,
        g: &MolecularGraph,
        h: &MolecularGraph,
        ga: &[Vec<Option<BondOrder>>],
        ha: &[Vec<Option<BondOrder>>],
        map: &mut Vec<usize>,
        taken: &mut Vec<bool>,
    ) -> bool {
        let n = g.atoms.len();
        if i == n {
            return true;
        }
        for j in 0..n {
            if taken[j] || g.atoms[i] != h.atoms[j] {
                continue;
            }
            if (0..i).any(|p| ga[i][p] != ha[j][map[p]]) {
                continue;
            }
            map[i] = j;
            taken[j] = true;
            if extend(i + 1, g, h, ga, ha, map, taken) {
                return true;
            }
            taken[j] = false;
        }
        false
    }
    extend(0, g, h, &ga, &ha, &mut map, &mut taken)
}
