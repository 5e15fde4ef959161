//! SMILES subset parser and canonical writer.
//!
//! Supported: organic-subset atoms, bracket atoms with charge and explicit H,
//! ring-bond digits and `%nn`, branches, bond symbols `- = # :`, lowercase
//! aromatic atoms and `.` fragments. Stereo marks and isotopes are rejected.
//!
//! Canonical ranks come from Morgan-style refinement. Ties that survive
//! refinement are resolved by individualizing each tied atom in turn and keeping
//! the lexicographically smallest emitted string, so the result does not depend
//! on input atom order.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SmilesError {
    #[error("syntax error at position {0}")]
    SyntaxError(usize),
    #[error("ring bond {0} is never closed")]
    UnclosedRing(u32),
    #[error("valence exceeded at atom {0}")]
    ValenceError(usize),
    #[error("unsupported feature `{0}`")]
    UnsupportedFeature(String),
    #[error("aromatic atom {0} is not in a ring")]
    AromaticOutsideRing(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BondOrder {
    Single,
    Double,
    Triple,
    Aromatic,
}

impl BondOrder {
    fn valence(self) -> u32 {
        match self {
            BondOrder::Single | BondOrder::Aromatic => 1,
            BondOrder::Double => 2,
            BondOrder::Triple => 3,
        }
    }

    fn code(self) -> u8 {
        match self {
            BondOrder::Single => 1,
            BondOrder::Double => 2,
            BondOrder::Triple => 3,
            BondOrder::Aromatic => 4,
        }
    }
}

const ELEMENTS: [&str; 92] = [
    "H", "He", "Li", "Be", "B", "C", "N", "O", "F", "Ne", "Na", "Mg", "Al", "Si", "P", "S", "Cl",
    "Ar", "K", "Ca", "Sc", "Ti", "V", "Cr", "Mn", "Fe", "Co", "Ni", "Cu", "Zn", "Ga", "Ge", "As",
    "Se", "Br", "Kr", "Rb", "Sr", "Y", "Zr", "Nb", "Mo", "Tc", "Ru", "Rh", "Pd", "Ag", "Cd", "In",
    "Sn", "Sb", "Te", "I", "Xe", "Cs", "Ba", "La", "Ce", "Pr", "Nd", "Pm", "Sm", "Eu", "Gd", "Tb",
    "Dy", "Ho", "Er", "Tm", "Yb", "Lu", "Hf", "Ta", "W", "Re", "Os", "Ir", "Pt", "Au", "Hg", "Tl",
    "Pb", "Bi", "Po", "At", "Rn", "Fr", "Ra", "Ac", "Th", "Pa", "U",
];

/// Atomic number for a symbol such as `"Cl"`.
pub fn element_number(symbol: &str) -> Option<u8> {
    ELEMENTS
        .iter()
        .position(|s| *s == symbol)
        .map(|i| i as u8 + 1)
}

pub fn element_symbol(z: u8) -> &'static str {
    ELEMENTS[z as usize - 1]
}

const ORGANIC: [u8; 10] = [5, 6, 7, 8, 15, 16, 9, 17, 35, 53];
const AROMATIC_ORGANIC: [u8; 6] = [5, 6, 7, 8, 15, 16];
const AROMATIC_BRACKET: [u8; 8] = [5, 6, 7, 8, 15, 16, 33, 34];

fn default_valences(z: u8) -> Option<&'static [u32]> {
    Some(match z {
        1 => &[1],
        5 => &[3],
        6 | 14 => &[4],
        7 | 15 | 33 => &[3, 5],
        8 => &[2],
        16 | 34 => &[2, 4, 6],
        9 | 17 | 35 | 53 => &[1],
        _ => return None,
    })
}

/// Implicit hydrogen count for an organic-subset atom given its bond valence sum.
/// Aromatic atoms reserve one unit for the π system when there is room at
/// the lowest valence and never climb to a higher one (`c(=O)`, `n(C)` get 0).
fn implicit_hydrogens(z: u8, aromatic: bool, bond_sum: u32) -> Option<u8> {
    let valences = default_valences(z)?;
    if aromatic {
        if bond_sum > *valences.last()? {
            return None;
        }
        return Some(valences[0].saturating_sub(bond_sum + 1) as u8);
    }
    valences
        .iter()
        .find(|&&v| v >= bond_sum)
        .map(|v| (v - bond_sum) as u8)
}

/// Largest valence a bracket atom may carry given its charge; `None` when the
/// element has no valence table.
fn max_bracket_valence(z: u8, charge: i8) -> Option<i32> {
    let base = *default_valences(z)?.last()? as i32;
    let c = charge as i32;
    let v = match z {
        1 => base - c.abs(),
        5 => base - c,
        6 | 14 => base - c.abs(),
        _ => base + c,
    };
    Some(v.max(0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Atom {
    pub element: u8,
    pub charge: i8,
    /// Total attached hydrogens (implicit or bracket-explicit).
    pub hydrogens: u8,
    pub aromatic: bool,
}

impl Atom {
    pub fn symbol(&self) -> &'static str {
        element_symbol(self.element)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Bond {
    pub a: usize,
    pub b: usize,
    pub order: BondOrder,
}

#[derive(Debug, Clone, Default)]
pub struct MolecularGraph {
    pub atoms: Vec<Atom>,
    pub bonds: Vec<Bond>,
    /// Indices into `bonds` of bonds created by ring-closure digits.
    pub ring_closures: Vec<usize>,
}

impl MolecularGraph {
    /// Adjacency lists of `(neighbor, bond order)`.
    pub fn adjacency(&self) -> Vec<Vec<(usize, BondOrder)>> {
        let mut adj = vec![Vec::new(); self.atoms.len()];
        for b in &self.bonds {
            adj[b.a].push((b.b, b.order));
            adj[b.b].push((b.a, b.order));
        }
        adj
    }

    pub fn bond_between(&self, a: usize, b: usize) -> Option<BondOrder> {
        self.bonds
            .iter()
            .find(|x| (x.a == a && x.b == b) || (x.a == b && x.b == a))
            .map(|x| x.order)
    }

    fn bond_sums(&self) -> Vec<u32> {
        let mut sums = vec![0u32; self.atoms.len()];
        for b in &self.bonds {
            sums[b.a] += b.order.valence();
            sums[b.b] += b.order.valence();
        }
        sums
    }

    /// Connected components as sorted atom index lists.
    pub fn components(&self) -> Vec<Vec<usize>> {
        let adj = self.adjacency();
        let mut seen = vec![false; self.atoms.len()];
        let mut out = Vec::new();
        for start in 0..self.atoms.len() {
            if seen[start] {
                continue;
            }
            seen[start] = true;
            let mut stack = vec![start];
            let mut comp = Vec::new();
            while let Some(u) = stack.pop() {
                comp.push(u);
                for &(v, _) in &adj[u] {
                    if !seen[v] {
                        seen[v] = true;
                        stack.push(v);
                    }
                }
            }
            comp.sort_unstable();
            out.push(comp);
        }
        out
    }

    /// Marks atoms that lie on at least one cycle (incident to a non-bridge bond).
    fn ring_atoms(&self) -> Vec<bool> {
        let n = self.atoms.len();
        let adj: Vec<Vec<(usize, usize)>> = {
            let mut adj = vec![Vec::new(); n];
            for (i, b) in self.bonds.iter().enumerate() {
                adj[b.a].push((b.b, i));
                adj[b.b].push((b.a, i));
            }
            adj
        };
        let mut disc = vec![usize::MAX; n];
        let mut low = vec![0usize; n];
        let mut bridge = vec![false; self.bonds.len()];
        let mut time = 0;
        for root in 0..n {
            if disc[root] != usize::MAX {
                continue;
            }
            // iterative Tarjan: (node, parent bond, next adjacency index)
            let mut stack = vec![(root, usize::MAX, 0usize)];
            disc[root] = time;
            low[root] = time;
            time += 1;
            while let Some(&mut (u, pbond, ref mut idx)) = stack.last_mut() {
                if *idx < adj[u].len() {
                    let (v, bi) = adj[u][*idx];
                    *idx += 1;
                    if bi == pbond {
                        continue;
                    }
                    if disc[v] == usize::MAX {
                        disc[v] = time;
                        low[v] = time;
                        time += 1;
                        stack.push((v, bi, 0));
                    } else {
                        low[u] = low[u].min(disc[v]);
                    }
                } else {
                    stack.pop();
                    if let Some(&(p, _, _)) = stack.last() {
                        low[p] = low[p].min(low[u]);
                        if low[u] > disc[p] {
                            bridge[pbond] = true;
                        }
                    }
                }
            }
        }
        let mut ring = vec![false; n];
        for (i, b) in self.bonds.iter().enumerate() {
            if !bridge[i] {
                ring[b.a] = true;
                ring[b.b] = true;
            }
        }
        ring
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum BondSym {
    Single,
    Double,
    Triple,
    Aromatic,
}

impl BondSym {
    fn order(self) -> BondOrder {
        match self {
            BondSym::Single => BondOrder::Single,
            BondSym::Double => BondOrder::Double,
            BondSym::Triple => BondOrder::Triple,
            BondSym::Aromatic => BondOrder::Aromatic,
        }
    }
}

struct ParsedAtom {
    atom: Atom,
    /// Bracket atoms carry explicit H counts; organic atoms get implicit H later.
    bracket: bool,
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
    atoms: Vec<ParsedAtom>,
    bonds: Vec<Bond>,
    ring_closures: Vec<usize>,
}

impl<'a> Parser<'a> {
    fn peek(&self) -> Option<u8> {
        self.src.get(self.pos).copied()
    }

    fn add_bond(
        &mut self,
        a: usize,
        b: usize,
        sym: Option<BondSym>,
        at: usize,
    ) -> Result<usize, SmilesError> {
        if a == b
            || self
                .bonds
                .iter()
                .any(|x| (x.a == a && x.b == b) || (x.a == b && x.b == a))
        {
            return Err(SmilesError::SyntaxError(at));
        }
        let order = match sym {
            Some(s) => s.order(),
            None if self.atoms[a].atom.aromatic && self.atoms[b].atom.aromatic => {
                BondOrder::Aromatic
            }
            None => BondOrder::Single,
        };
        self.bonds.push(Bond { a, b, order });
        Ok(self.bonds.len() - 1)
    }

    fn parse_number(&mut self) -> Option<u32> {
        let start = self.pos;
        while self.peek().is_some_and(|c| c.is_ascii_digit()) {
            self.pos += 1;
        }
        if start == self.pos {
            return None;
        }
        std::str::from_utf8(&self.src[start..self.pos])
            .ok()?
            .parse()
            .ok()
    }

    fn parse_bracket(&mut self) -> Result<ParsedAtom, SmilesError> {
        let open = self.pos;
        self.pos += 1;
        if self.peek().is_some_and(|c| c.is_ascii_digit()) {
            return Err(SmilesError::UnsupportedFeature("isotope".into()));
        }
        let (element, aromatic) = self
            .parse_bracket_symbol()
            .ok_or(SmilesError::SyntaxError(self.pos))?;
        if self.peek() == Some(b'@') {
            return Err(SmilesError::UnsupportedFeature("@".into()));
        }
        let mut hydrogens = 0u8;
        if self.peek() == Some(b'H') {
            self.pos += 1;
            hydrogens = match self.parse_number() {
                Some(n) if n <= 9 => n as u8,
                Some(_) => return Err(SmilesError::SyntaxError(self.pos)),
                None => 1,
            };
        }
        let mut charge: i32 = 0;
        if let Some(sign @ (b'+' | b'-')) = self.peek() {
            let s = if sign == b'+' { 1 } else { -1 };
            self.pos += 1;
            if let Some(n) = self.parse_number() {
                if n > 15 {
                    return Err(SmilesError::SyntaxError(self.pos));
                }
                charge = s * n as i32;
            } else {
                charge = s;
                while self.peek() == Some(sign) {
                    self.pos += 1;
                    charge += s;
                    if charge.abs() > 15 {
                        return Err(SmilesError::SyntaxError(self.pos));
                    }
                }
            }
        }
        if self.peek() == Some(b':') {
            // atom class: accepted and ignored
            self.pos += 1;
            self.parse_number()
                .ok_or(SmilesError::SyntaxError(self.pos))?;
        }
        if self.peek() != Some(b']') {
            return Err(SmilesError::SyntaxError(self.pos.max(open)));
        }
        self.pos += 1;
        Ok(ParsedAtom {
            atom: Atom {
                element,
                charge: charge as i8,
                hydrogens,
                aromatic,
            },
            bracket: true,
        })
    }

    fn parse_bracket_symbol(&mut self) -> Option<(u8, bool)> {
        let c = self.peek()?;
        if c.is_ascii_lowercase() {
            for (sym, z) in [("se", 34u8), ("as", 33u8)] {
                if self.src[self.pos..].starts_with(sym.as_bytes()) {
                    self.pos += 2;
                    return Some((z, true));
                }
            }
            let z = element_number(&(c as char).to_ascii_uppercase().to_string())?;
            if !AROMATIC_BRACKET.contains(&z) {
                return None;
            }
            self.pos += 1;
            return Some((z, true));
        }
        if !c.is_ascii_uppercase() {
            return None;
        }
        if let Some(&next) = self.src.get(self.pos + 1) {
            if next.is_ascii_lowercase() {
                let two = format!("{}{}", c as char, next as char);
                if let Some(z) = element_number(&two) {
                    self.pos += 2;
                    return Some((z, false));
                }
            }
        }
        let z = element_number(&(c as char).to_string())?;
        self.pos += 1;
        Some((z, false))
    }

    fn parse_organic(&mut self) -> Option<ParsedAtom> {
        let c = self.peek()?;
        let next = self.src.get(self.pos + 1).copied();
        let (z, aromatic, len) = match (c, next) {
            (b'C', Some(b'l')) => (17, false, 2),
            (b'B', Some(b'r')) => (35, false, 2),
            (b'B', _) => (5, false, 1),
            (b'C', _) => (6, false, 1),
            (b'N', _) => (7, false, 1),
            (b'O', _) => (8, false, 1),
            (b'P', _) => (15, false, 1),
            (b'S', _) => (16, false, 1),
            (b'F', _) => (9, false, 1),
            (b'I', _) => (53, false, 1),
            (b'b', _) => (5, true, 1),
            (b'c', _) => (6, true, 1),
            (b'n', _) => (7, true, 1),
            (b'o', _) => (8, true, 1),
            (b'p', _) => (15, true, 1),
            (b's', _) => (16, true, 1),
            _ => return None,
        };
        self.pos += len;
        Some(ParsedAtom {
            atom: Atom {
                element: z,
                charge: 0,
                hydrogens: 0,
                aromatic,
            },
            bracket: false,
        })
    }

    fn run(mut self) -> Result<MolecularGraph, SmilesError> {
        if self.src.is_empty() {
            return Err(SmilesError::SyntaxError(0));
        }
        let mut prev: Option<usize> = None;
        let mut pending: Option<(BondSym, usize)> = None;
        let mut branches: Vec<Option<usize>> = Vec::new();
        // ring number -> (atom, bond symbol, position)
        let mut rings: BTreeMap<u32, (usize, Option<BondSym>, usize)> = BTreeMap::new();
        let mut expect_atom = true;

        while let Some(c) = self.peek() {
            let at = self.pos;
            match c {
                b'(' => {
                    if prev.is_none() || pending.is_some() || self.src.get(at + 1) == Some(&b')') {
                        return Err(SmilesError::SyntaxError(at));
                    }
                    branches.push(prev);
                    self.pos += 1;
                }
                b')' => {
                    if pending.is_some() || expect_atom {
                        return Err(SmilesError::SyntaxError(at));
                    }
                    prev = branches.pop().ok_or(SmilesError::SyntaxError(at))?;
                    self.pos += 1;
                }
                b'-' | b'=' | b'#' | b':' => {
                    if prev.is_none() || pending.is_some() {
                        return Err(SmilesError::SyntaxError(at));
                    }
                    let sym = match c {
                        b'-' => BondSym::Single,
                        b'=' => BondSym::Double,
                        b'#' => BondSym::Triple,
                        _ => BondSym::Aromatic,
                    };
                    pending = Some((sym, at));
                    self.pos += 1;
                }
                b'/' | b'\\' => {
                    return Err(SmilesError::UnsupportedFeature((c as char).to_string()))
                }
                b'.' => {
                    if prev.is_none() || pending.is_some() {
                        return Err(SmilesError::SyntaxError(at));
                    }
                    prev = None;
                    expect_atom = true;
                    self.pos += 1;
                }
                b'0'..=b'9' | b'%' => {
                    let atom = prev.ok_or(SmilesError::SyntaxError(at))?;
                    let number = if c == b'%' {
                        self.pos += 1;
                        let d = self
                            .src
                            .get(self.pos..self.pos + 2)
                            .ok_or(SmilesError::SyntaxError(at))?;
                        if !d.iter().all(u8::is_ascii_digit) {
                            return Err(SmilesError::SyntaxError(at));
                        }
                        self.pos += 2;
                        ((d[0] - b'0') * 10 + (d[1] - b'0')) as u32
                    } else {
                        self.pos += 1;
                        (c - b'0') as u32
                    };
                    let sym = pending.take().map(|(s, _)| s);
                    match rings.remove(&number) {
                        Some((other, other_sym, _)) => {
                            let sym = match (sym, other_sym) {
                                (Some(a), Some(b)) if a != b => {
                                    return Err(SmilesError::SyntaxError(at))
                                }
                                (a, b) => a.or(b),
                            };
                            let bi = self.add_bond(other, atom, sym, at)?;
                            self.ring_closures.push(bi);
                        }
                        None => {
                            rings.insert(number, (atom, sym, at));
                        }
                    }
                }
                b'[' | b'A'..=b'Z' | b'a'..=b'z' | b'*' => {
                    if c == b'*' {
                        return Err(SmilesError::UnsupportedFeature("*".into()));
                    }
                    let parsed = if c == b'[' {
                        self.parse_bracket()?
                    } else {
                        self.parse_organic().ok_or(SmilesError::SyntaxError(at))?
                    };
                    self.atoms.push(parsed);
                    let idx = self.atoms.len() - 1;
                    if let Some(p) = prev {
                        let sym = pending.take().map(|(s, _)| s);
                        self.add_bond(p, idx, sym, at)?;
                    } else if pending.is_some() {
                        return Err(SmilesError::SyntaxError(at));
                    }
                    prev = Some(idx);
                    expect_atom = false;
                }
                _ => return Err(SmilesError::SyntaxError(at)),
            }
            if c == b'(' {
                expect_atom = true;
            }
        }
        let end = self.src.len();
        if let Some((_, at)) = pending {
            return Err(SmilesError::SyntaxError(at));
        }
        if !branches.is_empty() || expect_atom {
            return Err(SmilesError::SyntaxError(end));
        }
        if let Some((&digit, _)) = rings.iter().next() {
            return Err(SmilesError::UnclosedRing(digit));
        }

        let mut graph = MolecularGraph {
            atoms: self.atoms.iter().map(|a| a.atom).collect(),
            bonds: self.bonds,
            ring_closures: self.ring_closures,
        };
        let sums = graph.bond_sums();
        for (i, parsed) in self.atoms.iter().enumerate() {
            let atom = &mut graph.atoms[i];
            if parsed.bracket {
                if let Some(max) = max_bracket_valence(atom.element, atom.charge) {
                    let used = sums[i] + atom.hydrogens as u32 + atom.aromatic as u32;
                    if used as i32 > max {
                        return Err(SmilesError::ValenceError(i));
                    }
                }
            } else {
                atom.hydrogens = implicit_hydrogens(atom.element, atom.aromatic, sums[i])
                    .ok_or(SmilesError::ValenceError(i))?;
            }
        }
        let ring = graph.ring_atoms();
        if let Some(i) = (0..graph.atoms.len()).find(|&i| graph.atoms[i].aromatic && !ring[i]) {
            return Err(SmilesError::AromaticOutsideRing(i));
        }
        Ok(graph)
    }
}

/// Parses a SMILES string into a molecular graph.
pub fn parse_smiles(s: &str) -> Result<MolecularGraph, SmilesError> {
    Parser {
        src: s.as_bytes(),
        pos: 0,
        atoms: Vec::new(),
        bonds: Vec::new(),
        ring_closures: Vec::new(),
    }
    .run()
}

/// Dense ranks (0-based) of `keys`, equal keys sharing a rank.
fn dense_ranks<K: Ord + Clone>(keys: &[K]) -> Vec<u32> {
    let mut sorted: Vec<K> = keys.to_vec();
    sorted.sort();
    sorted.dedup();
    keys.iter()
        .map(|k| sorted.binary_search(k).unwrap() as u32)
        .collect()
}

fn class_count(ranks: &[u32]) -> usize {
    let mut r = ranks.to_vec();
    r.sort_unstable();
    r.dedup();
    r.len()
}

/// Iterative neighborhood refinement until the partition stops splitting.
fn refine(ranks: &mut Vec<u32>, adj: &[Vec<(usize, BondOrder)>]) {
    let mut classes = class_count(ranks);
    loop {
        let keys: Vec<(u32, Vec<(u32, u8)>)> = (0..ranks.len())
            .map(|i| {
                let mut nb: Vec<(u32, u8)> =
                    adj[i].iter().map(|&(j, o)| (ranks[j], o.code())).collect();
                nb.sort_unstable();
                (ranks[i], nb)
            })
            .collect();
        let next = dense_ranks(&keys);
        let next_classes = class_count(&next);
        *ranks = next;
        if next_classes == classes {
            break;
        }
        classes = next_classes;
    }
}

fn initial_ranks(graph: &MolecularGraph, adj: &[Vec<(usize, BondOrder)>]) -> Vec<u32> {
    let keys: Vec<(u8, usize, i8, u8, bool)> = graph
        .atoms
        .iter()
        .enumerate()
        .map(|(i, a)| (a.element, adj[i].len(), a.charge, a.hydrogens, a.aromatic))
        .collect();
    dense_ranks(&keys)
}

/// Upper bound on explored leaves of the tie-breaking search per fragment.
/// Beyond it only the lowest-index candidate of each tied class is explored.
const LEAF_BUDGET: usize = 2048;

struct CanonSearch<'g> {
    graph: &'g MolecularGraph,
    adj: Vec<Vec<(usize, BondOrder)>>,
    atoms: Vec<usize>,
    best: Option<String>,
    leaves: usize,
}

impl CanonSearch<'_> {
    fn search(&mut self, ranks: Vec<u32>) {
        // target cell: lowest rank shared by two or more atoms of this fragment
        let mut counts: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for &a in &self.atoms {
            counts.entry(ranks[a]).or_default().push(a);
        }
        let cell = counts.into_values().find(|members| members.len() > 1);
        let Some(cell) = cell else {
            self.leaves += 1;
            let s = emit(self.graph, &self.adj, &self.atoms, &ranks);
            if self.best.as_ref().is_none_or(|b| s < *b) {
                self.best = Some(s);
            }
            return;
        };
        for (n, &chosen) in cell.iter().enumerate() {
            if n > 0 && self.leaves >= LEAF_BUDGET {
                break;
            }
            let mut next: Vec<u32> = ranks.iter().map(|r| r * 2 + 1).collect();
            next[chosen] -= 1;
            let mut next = dense_ranks(&next);
            refine(&mut next, &self.adj);
            self.search(next);
        }
    }
}

/// Canonical SMILES for a parsed graph.
pub fn canonicalize(graph: &MolecularGraph) -> String {
    let adj = graph.adjacency();
    let mut ranks = initial_ranks(graph, &adj);
    refine(&mut ranks, &adj);
    let mut parts: Vec<String> = graph
        .components()
        .into_iter()
        .map(|atoms| {
            let mut search = CanonSearch {
                graph,
                adj: adj.clone(),
                atoms,
                best: None,
                leaves: 0,
            };
            search.search(ranks.clone());
            search.best.unwrap_or_default()
        })
        .collect();
    parts.sort();
    parts.join(".")
}

/// Parses and canonicalizes in one step.
pub fn canonical_smiles(s: &str) -> Result<String, SmilesError> {
    parse_smiles(s).map(|g| canonicalize(&g))
}

/// Writes SMILES for `graph` using `order` as the traversal priority (lower
/// first). Any total order yields a valid SMILES for the same graph; the
/// canonical writer passes canonical ranks.
pub fn write_smiles(graph: &MolecularGraph, order: &[u32]) -> String {
    let adj = graph.adjacency();
    let mut parts = Vec::new();
    let mut comps = graph.components();
    comps.sort_by_key(|c| c.iter().map(|&a| order[a]).min());
    for atoms in comps {
        parts.push(emit(graph, &adj, &atoms, order));
    }
    parts.join(".")
}

fn atom_text(graph: &MolecularGraph, adj: &[Vec<(usize, BondOrder)>], i: usize) -> String {
    let atom = graph.atoms[i];
    let sum: u32 = adj[i].iter().map(|(_, o)| o.valence()).sum();
    let symbol = if atom.aromatic {
        atom.symbol().to_lowercase()
    } else {
        atom.symbol().to_string()
    };
    let organic = if atom.aromatic {
        AROMATIC_ORGANIC.contains(&atom.element)
    } else {
        ORGANIC.contains(&atom.element)
    };
    if organic
        && atom.charge == 0
        && implicit_hydrogens(atom.element, atom.aromatic, sum) == Some(atom.hydrogens)
    {
        return symbol;
    }
    let mut s = format!("[{symbol}");
    match atom.hydrogens {
        0 => {}
        1 => s.push('H'),
        h => {
            let _ = write!(s, "H{h}");
        }
    }
    match atom.charge {
        0 => {}
        1 => s.push('+'),
        -1 => s.push('-'),
        c if c > 0 => {
            let _ = write!(s, "+{c}");
        }
        c => {
            let _ = write!(s, "-{}", -c);
        }
    }
    s.push(']');
    s
}

fn bond_text(graph: &MolecularGraph, a: usize, b: usize, order: BondOrder) -> &'static str {
    let both_aromatic = graph.atoms[a].aromatic && graph.atoms[b].aromatic;
    match order {
        BondOrder::Single if both_aromatic => "-",
        BondOrder::Single => "",
        BondOrder::Double => "=",
        BondOrder::Triple => "#",
        BondOrder::Aromatic if both_aromatic => "",
        BondOrder::Aromatic => ":",
    }
}

/// Emits one connected fragment, starting from its lowest-ranked atom.
fn emit(
    graph: &MolecularGraph,
    adj: &[Vec<(usize, BondOrder)>],
    atoms: &[usize],
    ranks: &[u32],
) -> String {
    let n = graph.atoms.len();
    let Some(&start) = atoms.iter().min_by_key(|&&a| (ranks[a], a)) else {
        return String::new();
    };
    let sorted_neighbors = |u: usize| {
        let mut nb = adj[u].clone();
        nb.sort_by_key(|&(v, _)| (ranks[v], v));
        nb
    };

    // pass 1: spanning tree and ring-closure bonds
    let mut visited = vec![false; n];
    let mut children: Vec<Vec<(usize, BondOrder)>> = vec![Vec::new(); n];
    let mut ring_open: Vec<Vec<(usize, BondOrder)>> = vec![Vec::new(); n];
    let mut ring_close: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut stack: Vec<(usize, Option<usize>, Vec<(usize, BondOrder)>, usize)> = Vec::new();
    visited[start] = true;
    stack.push((start, None, sorted_neighbors(start), 0));
    let mut depth_of = vec![0usize; n];
    while let Some((u, parent, nb, idx)) = stack.last_mut() {
        let u = *u;
        let parent = *parent;
        if *idx >= nb.len() {
            stack.pop();
            continue;
        }
        let (v, order) = nb[*idx];
        *idx += 1;
        if Some(v) == parent {
            continue;
        }
        if visited[v] {
            // back edge to an ancestor still on the stack; record once
            if depth_of[v] < depth_of[u] && !ring_open[v].iter().any(|&(w, _)| w == u) {
                ring_open[v].push((u, order));
                ring_close[u].push(v);
            }
            continue;
        }
        visited[v] = true;
        depth_of[v] = depth_of[u] + 1;
        children[u].push((v, order));
        let nbv = sorted_neighbors(v);
        stack.push((v, Some(u), nbv, 0));
    }

    // pass 2: emission with ring digit allocation
    let mut out = String::new();
    let mut digits_in_use: Vec<bool> = vec![false; 100];
    let mut open_digit: std::collections::HashMap<(usize, usize), usize> =
        std::collections::HashMap::new();
    enum Step {
        Atom(usize, Option<(usize, BondOrder)>),
        Text(&'static str),
    }
    let mut work = vec![Step::Atom(start, None)];
    while let Some(step) = work.pop() {
        let (u, via) = match step {
            Step::Text(t) => {
                out.push_str(t);
                continue;
            }
            Step::Atom(u, via) => (u, via),
        };
        if let Some((p, order)) = via {
            out.push_str(bond_text(graph, p, u, order));
        }
        out.push_str(&atom_text(graph, adj, u));
        let mut closes = ring_close[u].clone();
        closes.sort_by_key(|&v| (ranks[v], v));
        for v in closes {
            let d = open_digit
                .remove(&(v, u))
                .expect("ring opened before close");
            digits_in_use[d] = false;
            push_digit(&mut out, d);
        }
        let mut opens = ring_open[u].clone();
        opens.sort_by_key(|&(v, _)| (ranks[v], v));
        for (v, order) in opens {
            let d = (1..100)
                .find(|&d| !digits_in_use[d])
                .expect("fewer than 100 open rings");
            digits_in_use[d] = true;
            open_digit.insert((u, v), d);
            out.push_str(bond_text(graph, u, v, order));
            push_digit(&mut out, d);
        }
        let kids = &children[u];
        // push in reverse so the first child is emitted first; all but the last are branches
        for (i, &(v, order)) in kids.iter().enumerate().rev() {
            let last = i + 1 == kids.len();
            if !last {
                work.push(Step::Text(")"));
            }
            work.push(Step::Atom(v, Some((u, order))));
            if !last {
                work.push(Step::Text("("));
            }
        }
    }
    out
}

fn push_digit(out: &mut String, d: usize) {
    if d < 10 {
        out.push((b'0' + d as u8) as char);
    } else {
        let _ = write!(out, "%{d:02}");
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn benzene_kekule() {
        let g = parse_smiles("C1=CC=CC=C1").unwrap();
        assert_eq!(g.atoms.len(), 6);
        assert_eq!(g.bonds.len(), 6);
        assert!(g.atoms.iter().all(|a| a.element == 6 && a.hydrogens == 1));
        let doubles = g
            .bonds
            .iter()
            .filter(|b| b.order == BondOrder::Double)
            .count();
        assert_eq!(doubles, 3);
        let adj = g.adjacency();
        for (i, nb) in adj.iter().enumerate() {
            let orders: Vec<_> = nb.iter().map(|x| x.1).collect();
            assert!(
                orders.contains(&BondOrder::Single) && orders.contains(&BondOrder::Double),
                "atom {i}"
            );
        }
    }

    #[test]
    fn aromatic_hydrogens() {
        // caffeine: carbonyl carbons and methylated nitrogens carry no H
        let g = parse_smiles("Cn1cnc2c1c(=O)n(C)c(=O)n2C").unwrap();
        let h: Vec<u8> = g
            .atoms
            .iter()
            .filter(|a| a.aromatic)
            .map(|a| a.hydrogens)
            .collect();
        assert_eq!(h, vec![0, 1, 0, 0, 0, 0, 0, 0, 0]);
        assert_eq!(parse_smiles("c1ccsc1").unwrap().atoms[3].hydrogens, 0);
    }

    #[test]
    fn error_cases() {
        assert_eq!(
            parse_smiles("C1CC").unwrap_err(),
            SmilesError::UnclosedRing(1)
        );
        assert_eq!(
            parse_smiles("C(C)(C)(C)(C)C").unwrap_err(),
            SmilesError::ValenceError(0)
        );
        assert_eq!(
            parse_smiles("C[C@H](O)N").unwrap_err(),
            SmilesError::UnsupportedFeature("@".into())
        );
        assert_eq!(
            parse_smiles("F/C=C/F").unwrap_err(),
            SmilesError::UnsupportedFeature("/".into())
        );
        assert_eq!(
            parse_smiles("[13CH4]").unwrap_err(),
            SmilesError::UnsupportedFeature("isotope".into())
        );
        assert!(matches!(
            parse_smiles("C(").unwrap_err(),
            SmilesError::SyntaxError(_)
        ));
        assert!(matches!(
            parse_smiles("C)").unwrap_err(),
            SmilesError::SyntaxError(_)
        ));
        assert!(matches!(
            parse_smiles("").unwrap_err(),
            SmilesError::SyntaxError(0)
        ));
        assert!(matches!(
            parse_smiles("C==C").unwrap_err(),
            SmilesError::SyntaxError(_)
        ));
        assert!(matches!(
            parse_smiles("C11").unwrap_err(),
            SmilesError::SyntaxError(_)
        ));
        assert_eq!(
            parse_smiles("cc").unwrap_err(),
            SmilesError::AromaticOutsideRing(0)
        );
    }

    #[test]
    fn bracket_atoms() {
        let g = parse_smiles("[NH4+]").unwrap();
        assert_eq!(
            g.atoms[0],
            Atom {
                element: 7,
                charge: 1,
                hydrogens: 4,
                aromatic: false
            }
        );
        let g = parse_smiles("C[O-]").unwrap();
        assert_eq!(g.atoms[1].charge, -1);
        assert!(parse_smiles("[CH5]").is_err());
        let g = parse_smiles("c1cc[nH]c1").unwrap();
        assert_eq!(g.atoms[3].hydrogens, 1);
        assert_eq!(parse_smiles("[Fe+2]").unwrap().atoms[0].charge, 2);
        assert_eq!(parse_smiles("[Cu++]").unwrap().atoms[0].charge, 2);
    }

    #[test]
    fn percent_ring_numbers() {
        let g = parse_smiles("C%10CCC%10").unwrap();
        assert_eq!(g.bonds.len(), 4);
        assert_eq!(g.ring_closures.len(), 1);
    }

    #[test]
    fn canonical_examples() {
        assert_eq!(canonical_smiles("C").unwrap(), "C");
        assert_eq!(
            canonical_smiles("OCC").unwrap(),
            canonical_smiles("CCO").unwrap()
        );
        assert_eq!(
            canonical_smiles("C1=CC=CC=C1").unwrap(),
            canonical_smiles("C=1C=CC=CC1").unwrap()
        );
        assert_eq!(canonical_smiles("c1ccccc1").unwrap(), "c1ccccc1");
        assert_ne!(
            canonical_smiles("CCO").unwrap(),
            canonical_smiles("COC").unwrap()
        );
    }

    #[test]
    fn canonical_is_idempotent_on_samples() {
        for s in [
            "CC(=O)Oc1ccccc1C(=O)O",
            "CN1C=NC2=C1C(=O)N(C(=O)N2C)C",
            "C1CC2CCC1CC2",
            "[NH4+].[Cl-]",
            "c1ccc2ccccc2c1",
            "OC(=O)C(N)CC1=CC=CC=C1",
            "C#N",
            "c1ccccc1-c1ccccc1",
        ] {
            let c = canonical_smiles(s).unwrap();
            assert_eq!(canonical_smiles(&c).unwrap(), c, "{s}");
        }
    }

    #[test]
    fn writer_with_any_order_round_trips() {
        let g = parse_smiles("CC(C)C1CCC(C)CC1O").unwrap();
        let reversed: Vec<u32> = (0..g.atoms.len() as u32).rev().collect();
        let s = write_smiles(&g, &reversed);
        assert_eq!(canonical_smiles(&s).unwrap(), canonicalize(&g));
    }
}
