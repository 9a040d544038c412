//! Code vocabularies and window-bounded featurization.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use chrono::Datelike;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::cohort::{CohortExample, ObservationWindow};
use crate::datamodel::{Dataset, Event, Gender, Person};
use crate::error::{Error, Result};

pub const DEMOGRAPHIC_DIM: usize = 4;

/// Namespaced codes with dense indices in lexicographic order.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    entries: Vec<String>,
    index: HashMap<String, u32>,
    pub provenance: String,
}

impl PartialEq for Vocabulary {
    fn eq(&self, other: &Self) -> bool {
        self.entries == other.entries
    }
}

impl Vocabulary {
    pub fn from_entries(mut entries: Vec<String>, provenance: &str) -> Self {
        entries.sort();
        entries.dedup();
        let index = entries
            .iter()
            .enumerate()
            .map(|(i, e)| (e.clone(), i as u32))
            .collect();
        Vocabulary {
            entries,
            index,
            provenance: provenance.to_string(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[String] {
        &self.entries
    }

    pub fn index_of(&self, code: &str) -> Option<u32> {
        self.index.get(code).copied()
    }

    /// SHA-256 over the newline-joined entries, truncated to 64 bits.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Sha256::new();
        for e in &self.entries {
            h.update(e.as_bytes());
            h.update(b"\n");
        }
        let digest = h.finalize();
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = crate::datamodel::create(path)?;
        for e in &self.entries {
            writeln!(w, "{e}").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut entries = Vec::new();
        for (i, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.is_empty() {
                continue;
            }
            if entries.last().is_some_and(|prev: &String| prev >= &line) {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: i as u64 + 1,
                    msg: "vocabulary entries must be strictly increasing".into(),
                });
            }
            entries.push(line);
        }
        Ok(Self::from_entries(entries, &format!("file {}", path.display())))
    }
}

/// All namespaced codes seen inside any training example's window.
pub fn build_vocabulary(train: &[&CohortExample], d: &Dataset) -> Result<Vocabulary> {
    if train.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    let seen = train
        .par_iter()
        .fold(
            || vec![false; d.codes().len()],
            |mut seen, ex| {
                for e in window_events(d.person_events(ex.person), &ex.window) {
                    seen[e.code.0 as usize] = true;
                }
                seen
            },
        )
        .reduce(
            || vec![false; d.codes().len()],
            |mut a, b| {
                a.iter_mut().zip(b).for_each(|(x, y)| *x |= y);
                a
            },
        );
    let entries = d
        .codes()
        .iter()
        .filter(|(id, _)| seen[id.0 as usize])
        .map(|(id, _)| d.codes().namespaced(id).to_string())
        .collect();
    Ok(Vocabulary::from_entries(entries, "train split"))
}

pub fn intersect_vocabularies(a: &Vocabulary, b: &Vocabulary) -> Result<Vocabulary> {
    let entries: Vec<String> = a
        .entries
        .iter()
        .filter(|e| b.index.contains_key(*e))
        .cloned()
        .collect();
    if entries.is_empty() {
        return Err(Error::EmptyIntersection);
    }
    Ok(Vocabulary::from_entries(entries, "intersection"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    /// Sorted, deduplicated vocabulary indices.
    pub code_indices: Vec<u32>,
    /// `[age_norm, gender_F, gender_M, gender_U]`.
    pub demographics: [f64; DEMOGRAPHIC_DIM],
}

pub fn demographics(person: &Person, window: &ObservationWindow) -> [f64; DEMOGRAPHIC_DIM] {
    let age = f64::from(window.end.year() - person.birth_year) / 100.0;
    let g = |x: Gender| if person.gender == x { 1.0 } else { 0.0 };
    [age, g(Gender::F), g(Gender::M), g(Gender::U)]
}

fn window_events<'a>(events: &'a [Event], w: &ObservationWindow) -> impl Iterator<Item = &'a Event> {
    let lo = events.partition_point(|e| e.date < w.start);
    let end = w.end;
    events[lo..].iter().take_while(move |e| e.date <= end)
}

/// Featurizes examples of one dataset against one vocabulary. Codes outside
/// the vocabulary, or masked out, are skipped.
#[derive(Debug, Clone)]
pub struct Featurizer<'a> {
    d: &'a Dataset,
    code_to_index: Vec<Option<u32>>,
}

impl<'a> Featurizer<'a> {
    pub fn new(d: &'a Dataset, v: &Vocabulary) -> Self {
        let code_to_index = d
            .codes()
            .iter()
            .map(|(id, _)| v.index_of(d.codes().namespaced(id)))
            .collect();
        Featurizer { d, code_to_index }
    }

    /// Like [`Featurizer::new`] but only codes also present in `allowed`
    /// produce indices (into `v`).
    pub fn restricted(d: &'a Dataset, v: &Vocabulary, allowed: &Vocabulary) -> Self {
        let mut f = Self::new(d, v);
        for (slot, (id, _)) in f.code_to_index.iter_mut().zip(d.codes().iter()) {
            if allowed.index_of(d.codes().namespaced(id)).is_none() {
                *slot = None;
            }
        }
        f
    }

    pub fn featurize_events(&self, person: &Person, events: &[Event], window: &ObservationWindow) -> FeatureVector {
        let mut code_indices: Vec<u32> = window_events(events, window)
            .filter_map(|e| self.code_to_index[e.code.0 as usize])
            .collect();
        code_indices.sort_unstable();
        code_indices.dedup();
        FeatureVector {
            code_indices,
            demographics: demographics(person, window),
        }
    }

    pub fn featurize(&self, ex: &CohortExample) -> FeatureVector {
        self.featurize_events(self.d.person(ex.person), self.d.person_events(ex.person), &ex.window)
    }

    pub fn featurize_all(&self, examples: &[&CohortExample]) -> Vec<FeatureVector> {
        examples.par_iter().map(|ex| self.featurize(ex)).collect()
    }
}

/// Single-example convenience over [`Featurizer`].
pub fn featurize(ex: &CohortExample, d: &Dataset, v: &Vocabulary) -> Result<FeatureVector> {
    if d.persons().index_of(&ex.person_id) != Some(ex.person) {
        return Err(Error::Config(format!("unknown person {:?} in example", ex.person_id)));
    }
    Ok(Featurizer::new(d, v).featurize(ex))
}
