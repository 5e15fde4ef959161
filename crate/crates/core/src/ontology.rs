//! Disease concept tables (ICD-10, MeSH) with UMLS CUI crosswalks.
//!
//! Each `*.tsv` file in an ontology directory is one vocabulary. Columns:
//! `code  label  parent  cui  synonyms`, where `parent` and `synonyms` hold
//! `|`-separated lists. Lines starting with `#` and a leading header row are
//! skipped.

use std::collections::{HashMap, HashSet, VecDeque};
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum OntologyError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{file}:{line}: expected 5 tab-separated columns")]
    Malformed { file: String, line: usize },
    #[error("duplicate concept code {0}")]
    DuplicateCode(String),
    #[error("parent cycle detected: {}", .0.join(" -> "))]
    CycleDetected(Vec<String>),
    #[error("concept {code} references missing parent {parent}")]
    DanglingParent { code: String, parent: String },
    #[error("unknown concept code {0}")]
    UnknownCode(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Concept {
    pub code: String,
    pub vocabulary: String,
    pub preferred_label: String,
    pub parents: Vec<String>,
    pub cui: Option<String>,
    pub synonyms: Vec<String>,
}

impl Concept {
    /// Preferred label followed by synonyms.
    pub fn labels(&self) -> impl Iterator<Item = &str> {
        std::iter::once(self.preferred_label.as_str())
            .chain(self.synonyms.iter().map(String::as_str))
    }
}

/// Case-folds and normalizes dash variants and whitespace for exact matching.
pub fn fold(text: &str) -> String {
    let mapped: String = text
        .chars()
        .map(|c| match c {
            '\u{2010}'..='\u{2015}' | '\u{2212}' => '-',
            '\u{2018}' | '\u{2019}' => '\'',
            other => other,
        })
        .collect::<String>()
        .to_lowercase();
    mapped.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn code_key(code: &str) -> String {
    code.trim().to_uppercase().replace('.', "")
}

#[derive(Debug, Clone, Default)]
pub struct OntologyTable {
    concepts: Vec<Concept>,
    by_code: HashMap<String, usize>,
    by_label: HashMap<String, Vec<usize>>,
}

impl OntologyTable {
    /// Builds a table from concepts, checking parent links and acyclicity.
    pub fn from_concepts(concepts: Vec<Concept>) -> Result<Self, OntologyError> {
        let mut by_code = HashMap::new();
        for (i, c) in concepts.iter().enumerate() {
            if by_code.insert(code_key(&c.code), i).is_some() {
                return Err(OntologyError::DuplicateCode(c.code.clone()));
            }
        }
        for c in &concepts {
            for p in &c.parents {
                if !by_code.contains_key(&code_key(p)) {
                    return Err(OntologyError::DanglingParent {
                        code: c.code.clone(),
                        parent: p.clone(),
                    });
                }
            }
        }
        let mut by_label: HashMap<String, Vec<usize>> = HashMap::new();
        for (i, c) in concepts.iter().enumerate() {
            let mut seen = HashSet::new();
            for label in c.labels() {
                let key = fold(label);
                if seen.insert(key.clone()) {
                    by_label.entry(key).or_default().push(i);
                }
            }
        }
        let table = OntologyTable {
            concepts,
            by_code,
            by_label,
        };
        table.check_acyclic()?;
        Ok(table)
    }

    fn parent_indices(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        self.concepts[i]
            .parents
            .iter()
            .map(|p| self.by_code[&code_key(p)])
    }

    fn check_acyclic(&self) -> Result<(), OntologyError> {
        // 0 = unvisited, 1 = on stack, 2 = done
        let mut state = vec![0u8; self.concepts.len()];
        for root in 0..self.concepts.len() {
            if state[root] != 0 {
                continue;
            }
            let mut stack: Vec<(usize, Vec<usize>)> =
                vec![(root, self.parent_indices(root).collect())];
            state[root] = 1;
            while let Some((node, pending)) = stack.last_mut() {
                let node = *node;
                let next = pending.pop();
                match next {
                    Some(next) if state[next] == 1 => {
                        let start = stack.iter().position(|(n, _)| *n == next).unwrap();
                        let mut chain: Vec<String> = stack[start..]
                            .iter()
                            .map(|(n, _)| self.concepts[*n].code.clone())
                            .collect();
                        chain.push(self.concepts[next].code.clone());
                        return Err(OntologyError::CycleDetected(chain));
                    }
                    Some(next) if state[next] == 0 => {
                        state[next] = 1;
                        let parents = self.parent_indices(next).collect();
                        stack.push((next, parents));
                    }
                    Some(_) => {}
                    None => {
                        state[node] = 2;
                        stack.pop();
                    }
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.concepts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.concepts.is_empty()
    }

    pub fn concepts(&self) -> &[Concept] {
        &self.concepts
    }

    /// Lookup by code; dots and case are ignored (`c34.9` finds `C34.9`).
    pub fn get(&self, code: &str) -> Option<&Concept> {
        self.by_code
            .get(&code_key(code))
            .map(|&i| &self.concepts[i])
    }

    /// Transitive parents, nearest first (breadth-first, deduplicated).
    pub fn ancestors(&self, code: &str) -> Result<Vec<&Concept>, OntologyError> {
        let start = *self
            .by_code
            .get(&code_key(code))
            .ok_or_else(|| OntologyError::UnknownCode(code.to_string()))?;
        let mut seen = HashSet::from([start]);
        let mut queue: VecDeque<usize> = self.parent_indices(start).collect();
        let mut out = Vec::new();
        while let Some(i) = queue.pop_front() {
            if !seen.insert(i) {
                continue;
            }
            out.push(&self.concepts[i]);
            queue.extend(self.parent_indices(i));
        }
        Ok(out)
    }

    /// Exact case-folded match on a preferred label or synonym. When several
    /// vocabularies match, the first loaded concept wins; see [`Self::is_conflicted`].
    pub fn ground(&self, term: &str) -> Option<&Concept> {
        self.ground_all(term).into_iter().next()
    }

    pub fn ground_all(&self, term: &str) -> Vec<&Concept> {
        self.by_label
            .get(&fold(term))
            .map(|ids| ids.iter().map(|&i| &self.concepts[i]).collect())
            .unwrap_or_default()
    }

    /// True when a term grounds to concepts that disagree on their CUI.
    pub fn is_conflicted(&self, term: &str) -> bool {
        let cuis: HashSet<Option<&str>> = self
            .ground_all(term)
            .iter()
            .map(|c| c.cui.as_deref())
            .collect();
        cuis.len() > 1
    }

    /// All concepts sharing a UMLS CUI.
    pub fn crosswalk(&self, cui: &str) -> Vec<&Concept> {
        self.concepts
            .iter()
            .filter(|c| c.cui.as_deref() == Some(cui))
            .collect()
    }
}

fn split_list(field: &str) -> Vec<String> {
    field
        .split('|')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect()
}

/// Parses one vocabulary file's contents.
pub fn parse_tsv(vocabulary: &str, file: &str, text: &str) -> Result<Vec<Concept>, OntologyError> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 5 {
            return Err(OntologyError::Malformed {
                file: file.to_string(),
                line: lineno + 1,
            });
        }
        if lineno == 0 && cols[0].eq_ignore_ascii_case("code") {
            continue;
        }
        let cui = cols[3].trim();
        out.push(Concept {
            code: cols[0].trim().to_string(),
            vocabulary: vocabulary.to_string(),
            preferred_label: cols[1].trim().to_string(),
            parents: split_list(cols[2]),
            cui: (!cui.is_empty()).then(|| cui.to_string()),
            synonyms: split_list(cols[4]),
        });
    }
    Ok(out)
}

/// Loads every `*.tsv` in `dir` (sorted by file name) into one table.
pub fn load_ontology(dir: &Path) -> Result<OntologyTable, OntologyError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| OntologyError::Io { path, source }
    };
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "tsv"))
        .collect();
    files.sort();
    let mut concepts = Vec::new();
    for path in files {
        let text = fs::read_to_string(&path).map_err(io(&path))?;
        let vocabulary = path
            .file_stem()
            .unwrap_or_default()
            .to_string_lossy()
            .to_string();
        let file = path
            .file_name()
            .unwrap_or_default()
            .to_string_lossy()
            .to_string();
        concepts.extend(parse_tsv(&vocabulary, &file, &text)?);
    }
    OntologyTable::from_concepts(concepts)
}
