//! Core clinical record types and the CSV ingestion layer.
//!
//! A [`Dataset`] keeps persons sorted by id and events in one flat vector
//! sorted by `(person, date, code)`. Codes are interned into a [`CodeTable`]
//! whose ids follow the lexicographic order of the namespaced code strings,
//! so two datasets holding the same records compare equal field by field.

use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PERSONS_HEADER: [&str; 6] = [
    "person_id",
    "birth_year",
    "gender",
    "enroll_start",
    "enroll_end",
    "source",
];
pub const EVENTS_HEADER: [&str; 5] = ["person_id", "date", "kind", "system", "code"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Gender {
    F,
    M,
    U,
}

impl FromStr for Gender {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "F" => Ok(Gender::F),
            "M" => Ok(Gender::M),
            "U" => Ok(Gender::U),
            other => Err(format!("unknown gender token {other:?}")),
        }
    }
}

impl fmt::Display for Gender {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Gender::F => "F",
            Gender::M => "M",
            Gender::U => "U",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Source {
    Claims,
    Ehr,
}

impl FromStr for Source {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "CLAIMS" => Ok(Source::Claims),
            "EHR" => Ok(Source::Ehr),
            other => Err(format!("unknown source token {other:?}")),
        }
    }
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Source::Claims => "CLAIMS",
            Source::Ehr => "EHR",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EventKind {
    Dx,
    Rx,
}

impl FromStr for EventKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "dx" => Ok(EventKind::Dx),
            "rx" => Ok(EventKind::Rx),
            other => Err(format!("unknown event kind {other:?}")),
        }
    }
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EventKind::Dx => "dx",
            EventKind::Rx => "rx",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CodeSystem {
    #[serde(rename = "ICD9")]
    Icd9,
    #[serde(rename = "ICD10")]
    Icd10,
    #[serde(rename = "NDC")]
    Ndc,
}

impl CodeSystem {
    /// The only event kind a code of this system may appear under.
    pub fn kind(self) -> EventKind {
        match self {
            CodeSystem::Icd9 | CodeSystem::Icd10 => EventKind::Dx,
            CodeSystem::Ndc => EventKind::Rx,
        }
    }
}

impl FromStr for CodeSystem {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "ICD9" => Ok(CodeSystem::Icd9),
            "ICD10" => Ok(CodeSystem::Icd10),
            "NDC" => Ok(CodeSystem::Ndc),
            other => Err(format!("unknown code system {other:?}")),
        }
    }
}

impl fmt::Display for CodeSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CodeSystem::Icd9 => "ICD9",
            CodeSystem::Icd10 => "ICD10",
            CodeSystem::Ndc => "NDC",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Person {
    pub person_id: String,
    pub birth_year: i32,
    pub gender: Gender,
    pub enroll_start: NaiveDate,
    pub enroll_end: NaiveDate,
    pub source: Source,
}

impl Person {
    pub fn covers(&self, start: NaiveDate, end: NaiveDate) -> bool {
        self.enroll_start <= start && end <= self.enroll_end
    }
}

/// One event row as it appears in `events.csv`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClinicalEvent {
    pub person_id: String,
    pub date: NaiveDate,
    pub kind: EventKind,
    pub system: CodeSystem,
    pub code: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Code {
    pub system: CodeSystem,
    pub code: String,
}

impl Code {
    pub fn new(system: CodeSystem, code: impl Into<String>) -> Self {
        Code {
            system,
            code: code.into(),
        }
    }

    pub fn kind(&self) -> EventKind {
        self.system.kind()
    }

    /// `dx:<system>:<code>` or `rx:NDC:<code>`.
    pub fn namespaced(&self) -> String {
        format!("{}:{}:{}", self.kind(), self.system, self.code)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CodeId(pub u32);

/// Interned codes, ordered by namespaced string.
#[derive(Debug, Clone, Default)]
pub struct CodeTable {
    codes: Vec<Code>,
    keys: Vec<String>,
    lookup: HashMap<Code, CodeId>,
}

impl PartialEq for CodeTable {
    fn eq(&self, other: &Self) -> bool {
        self.codes == other.codes
    }
}

impl CodeTable {
    /// Builds a canonical table and returns the permutation from the input
    /// order to canonical ids.
    pub fn from_codes(codes: Vec<Code>) -> (CodeTable, Vec<CodeId>) {
        let keys: Vec<String> = codes.iter().map(Code::namespaced).collect();
        let mut order: Vec<usize> = (0..codes.len()).collect();
        order.sort_by(|&a, &b| keys[a].cmp(&keys[b]));
        let mut remap = vec![CodeId(0); codes.len()];
        let mut table = CodeTable::default();
        for (new, &old) in order.iter().enumerate() {
            remap[old] = CodeId(new as u32);
            table.codes.push(codes[old].clone());
            table.keys.push(keys[old].clone());
            table.lookup.insert(codes[old].clone(), CodeId(new as u32));
        }
        (table, remap)
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn get(&self, id: CodeId) -> &Code {
        &self.codes[id.0 as usize]
    }

    pub fn namespaced(&self, id: CodeId) -> &str {
        &self.keys[id.0 as usize]
    }

    pub fn id_of(&self, code: &Code) -> Option<CodeId> {
        self.lookup.get(code).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (CodeId, &Code)> {
        self.codes
            .iter()
            .enumerate()
            .map(|(i, c)| (CodeId(i as u32), c))
    }
}

/// Compact event stored inside a [`Dataset`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Event {
    pub person: u32,
    pub date: NaiveDate,
    pub code: CodeId,
}

/// Persons sorted by `person_id` with an id index.
#[derive(Debug, Clone, Default)]
pub struct PersonTable {
    persons: Vec<Person>,
    index: HashMap<String, u32>,
}

impl PartialEq for PersonTable {
    fn eq(&self, other: &Self) -> bool {
        self.persons == other.persons
    }
}

impl PersonTable {
    pub fn new(mut persons: Vec<Person>) -> Result<Self> {
        persons.sort_by(|a, b| a.person_id.cmp(&b.person_id));
        if let Some(w) = persons.windows(2).find(|w| w[0].person_id == w[1].person_id) {
            return Err(Error::DuplicatePerson(w[0].person_id.clone()));
        }
        Ok(Self::from_sorted_unchecked(persons))
    }

    fn from_sorted_unchecked(persons: Vec<Person>) -> Self {
        let index = persons
            .iter()
            .enumerate()
            .map(|(i, p)| (p.person_id.clone(), i as u32))
            .collect();
        PersonTable { persons, index }
    }

    pub fn len(&self) -> usize {
        self.persons.len()
    }

    pub fn is_empty(&self) -> bool {
        self.persons.is_empty()
    }

    pub fn get(&self, idx: u32) -> &Person {
        &self.persons[idx as usize]
    }

    pub fn index_of(&self, person_id: &str) -> Option<u32> {
        self.index.get(person_id).copied()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Person> {
        self.persons.iter()
    }

    pub fn as_slice(&self) -> &[Person] {
        &self.persons
    }
}

/// Interned, sorted events produced by [`load_events`].
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EventTable {
    pub codes: CodeTable,
    pub events: Vec<Event>,
}

/// Accumulates events keyed by code, then canonicalizes ids and order.
#[derive(Debug, Default)]
pub struct EventTableBuilder {
    codes: Vec<Code>,
    lookup: HashMap<Code, u32>,
    events: Vec<Event>,
}

impl EventTableBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn intern(&mut self, code: Code) -> CodeId {
        if let Some(&id) = self.lookup.get(&code) {
            return CodeId(id);
        }
        let id = self.codes.len() as u32;
        self.lookup.insert(code.clone(), id);
        self.codes.push(code);
        CodeId(id)
    }

    /// `code` must come from [`EventTableBuilder::intern`] on this builder.
    pub fn push(&mut self, person: u32, date: NaiveDate, code: CodeId) {
        self.events.push(Event { person, date, code });
    }

    pub fn finish(self) -> EventTable {
        let (codes, remap) = CodeTable::from_codes(self.codes);
        let mut events = self.events;
        for e in &mut events {
            e.code = remap[e.code.0 as usize];
        }
        events.sort_unstable();
        EventTable { codes, events }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub source: Source,
    persons: PersonTable,
    codes: CodeTable,
    events: Vec<Event>,
    offsets: Vec<usize>,
}

fn person_offsets(n_persons: usize, events: &[Event]) -> Vec<usize> {
    (0..=n_persons as u32)
        .map(|p| events.partition_point(|e| e.person < p))
        .collect()
}

impl Dataset {
    pub fn new(source: Source, persons: PersonTable, table: EventTable) -> Self {
        let offsets = person_offsets(persons.len(), &table.events);
        Dataset {
            source,
            persons,
            codes: table.codes,
            events: table.events,
            offsets,
        }
    }

    /// Assembles a dataset without checking any invariant. Intended for
    /// [`validate_dataset`] tests and mutation experiments.
    pub fn from_parts_unchecked(
        source: Source,
        persons: Vec<Person>,
        codes: CodeTable,
        events: Vec<Event>,
    ) -> Self {
        let offsets = person_offsets(persons.len(), &events);
        Dataset {
            source,
            persons: PersonTable::from_sorted_unchecked(persons),
            codes,
            events,
            offsets,
        }
    }

    pub fn persons(&self) -> &PersonTable {
        &self.persons
    }

    pub fn person(&self, idx: u32) -> &Person {
        self.persons.get(idx)
    }

    pub fn codes(&self) -> &CodeTable {
        &self.codes
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    /// Events of one person, in date order.
    pub fn person_events(&self, idx: u32) -> &[Event] {
        let i = idx as usize;
        &self.events[self.offsets[i]..self.offsets[i + 1]]
    }

    pub fn record(&self, e: &Event) -> ClinicalEvent {
        let code = self.codes.get(e.code);
        ClinicalEvent {
            person_id: self.persons.get(e.person).person_id.clone(),
            date: e.date,
            kind: code.kind(),
            system: code.system,
            code: code.code.clone(),
        }
    }

    pub fn into_parts(self) -> (Source, Vec<Person>, CodeTable, Vec<Event>) {
        (self.source, self.persons.persons, self.codes, self.events)
    }
}

fn reader(path: &Path) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(file))
}

fn parse_err(path: &Path, line: u64, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

/// Reads the header record and checks it matches `expected` exactly.
fn check_header<R: std::io::Read>(
    rdr: &mut csv::Reader<R>,
    path: &Path,
    expected: &[&str],
) -> Result<bool> {
    let mut rec = csv::StringRecord::new();
    let more = rdr
        .read_record(&mut rec)
        .map_err(|e| parse_err(path, 1, e.to_string()))?;
    if !more {
        return Err(parse_err(path, 1, "missing header row"));
    }
    if rec.iter().ne(expected.iter().copied()) {
        return Err(parse_err(
            path,
            1,
            format!("expected header {:?}", expected.join(",")),
        ));
    }
    Ok(true)
}

fn field<'r, T: FromStr>(
    rec: &'r csv::StringRecord,
    i: usize,
    name: &str,
    path: &Path,
    line: u64,
) -> Result<T> {
    let raw = &rec[i];
    raw.parse::<T>()
        .map_err(|_| parse_err(path, line, format!("cannot parse {name} from {raw:?}")))
}

pub fn parse_date(s: &str) -> Option<NaiveDate> {
    NaiveDate::parse_from_str(s, "%Y-%m-%d").ok()
}

fn date_field(rec: &csv::StringRecord, i: usize, name: &str, path: &Path, line: u64) -> Result<NaiveDate> {
    parse_date(&rec[i])
        .ok_or_else(|| parse_err(path, line, format!("cannot parse {name} from {:?}", &rec[i])))
}

fn token<T: FromStr<Err = String>>(rec: &csv::StringRecord, i: usize, path: &Path, line: u64) -> Result<T> {
    rec[i].parse::<T>().map_err(|m| parse_err(path, line, m))
}

/// Loads `persons.csv`.
pub fn load_persons(path: impl AsRef<Path>) -> Result<PersonTable> {
    let path = path.as_ref();
    let mut rdr = reader(path)?;
    check_header(&mut rdr, path, &PERSONS_HEADER)?;
    let mut persons = Vec::new();
    let mut rec = csv::StringRecord::new();
    loop {
        let more = rdr
            .read_record(&mut rec)
            .map_err(|e| parse_err(path, 0, e.to_string()))?;
        if !more {
            break;
        }
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != PERSONS_HEADER.len() {
            return Err(parse_err(
                path,
                line,
                format!("expected {} columns, found {}", PERSONS_HEADER.len(), rec.len()),
            ));
        }
        persons.push(Person {
            person_id: rec[0].to_string(),
            birth_year: field(&rec, 1, "birth_year", path, line)?,
            gender: token(&rec, 2, path, line)?,
            enroll_start: date_field(&rec, 3, "enroll_start", path, line)?,
            enroll_end: date_field(&rec, 4, "enroll_end", path, line)?,
            source: token(&rec, 5, path, line)?,
        });
    }
    PersonTable::new(persons)
}

/// Loads `events.csv` against an already loaded person table. The result is
/// sorted by `(person_id, date, code)`.
pub fn load_events(path: impl AsRef<Path>, persons: &PersonTable) -> Result<EventTable> {
    let path = path.as_ref();
    let mut rdr = reader(path)?;
    check_header(&mut rdr, path, &EVENTS_HEADER)?;
    let mut builder = EventTableBuilder::new();
    let mut rec = csv::StringRecord::new();
    loop {
        let more = rdr
            .read_record(&mut rec)
            .map_err(|e| parse_err(path, 0, e.to_string()))?;
        if !more {
            break;
        }
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != EVENTS_HEADER.len() {
            return Err(parse_err(
                path,
                line,
                format!("expected {} columns, found {}", EVENTS_HEADER.len(), rec.len()),
            ));
        }
        let Some(pidx) = persons.index_of(&rec[0]) else {
            return Err(Error::UnknownPerson {
                line,
                person_id: rec[0].to_string(),
            });
        };
        let date = date_field(&rec, 1, "date", path, line)?;
        let kind: EventKind = token(&rec, 2, path, line)?;
        let system: CodeSystem = token(&rec, 3, path, line)?;
        if system.kind() != kind {
            return Err(Error::KindSystemMismatch {
                line,
                kind: kind.to_string(),
                system: system.to_string(),
            });
        }
        let person = persons.get(pidx);
        if date < person.enroll_start || date > person.enroll_end {
            return Err(Error::OutsideEnrollment {
                person_id: person.person_id.clone(),
                date,
                start: person.enroll_start,
                end: person.enroll_end,
            });
        }
        let code = builder.intern(Code::new(system, &rec[4]));
        builder.push(pidx, date, code);
    }
    Ok(builder.finish())
}

/// Loads both tables. The dataset source is taken from the person rows,
/// which must agree; an empty person table defaults to `fallback`.
pub fn load_dataset(
    persons_path: impl AsRef<Path>,
    events_path: impl AsRef<Path>,
    fallback: Source,
) -> Result<Dataset> {
    let persons = load_persons(persons_path.as_ref())?;
    let source = match persons.iter().next() {
        None => fallback,
        Some(first) => {
            if let Some(p) = persons.iter().find(|p| p.source != first.source) {
                return Err(parse_err(
                    persons_path.as_ref(),
                    0,
                    format!(
                        "mixed sources in one dataset: {} has {} but {} has {}",
                        first.person_id, first.source, p.person_id, p.source
                    ),
                ));
            }
            first.source
        }
    };
    let events = load_events(events_path, &persons)?;
    Ok(Dataset::new(source, persons, events))
}

pub fn write_persons(path: impl AsRef<Path>, persons: &[Person]) -> Result<()> {
    let path = path.as_ref();
    let mut w = create(path)?;
    let io = |e| Error::io(path, e);
    writeln!(w, "{}", PERSONS_HEADER.join(",")).map_err(io)?;
    for p in persons {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            p.person_id, p.birth_year, p.gender, p.enroll_start, p.enroll_end, p.source
        )
        .map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn write_events(path: impl AsRef<Path>, d: &Dataset) -> Result<()> {
    let path = path.as_ref();
    let mut w = create(path)?;
    let io = |e| Error::io(path, e);
    writeln!(w, "{}", EVENTS_HEADER.join(",")).map_err(io)?;
    for e in d.events() {
        let code = d.codes().get(e.code);
        writeln!(
            w,
            "{},{},{},{},{}",
            d.person(e.person).person_id,
            e.date,
            code.kind(),
            code.system,
            code.code
        )
        .map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn write_dataset(dir: impl AsRef<Path>, d: &Dataset) -> Result<()> {
    let dir = dir.as_ref();
    write_persons(dir.join("persons.csv"), d.persons().as_slice())?;
    write_events(dir.join("events.csv"), d)
}

pub(crate) fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub persons: usize,
    pub events: usize,
    pub dx_events: usize,
    pub rx_events: usize,
    pub violations: Vec<String>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks every dataset invariant and lists the violations found.
pub fn validate_dataset(d: &Dataset) -> ValidationReport {
    let mut violations = Vec::new();
    let persons = d.persons().as_slice();
    for w in persons.windows(2) {
        if w[0].person_id >= w[1].person_id {
            violations.push(format!(
                "person table not strictly ordered at {:?} / {:?} (duplicate or unsorted id)",
                w[0].person_id, w[1].person_id
            ));
        }
    }
    for p in persons {
        if p.enroll_start > p.enroll_end {
            violations.push(format!(
                "person {}: enroll_start {} after enroll_end {}",
                p.person_id, p.enroll_start, p.enroll_end
            ));
        }
        if p.birth_year > p.enroll_end.year() {
            violations.push(format!(
                "person {}: birth_year {} after enrollment end year {}",
                p.person_id,
                p.birth_year,
                p.enroll_end.year()
            ));
        }
        if p.source != d.source {
            violations.push(format!(
                "person {}: source {} differs from dataset source {}",
                p.person_id, p.source, d.source
            ));
        }
    }
    let (mut dx, mut rx) = (0, 0);
    let mut prev: Option<&Event> = None;
    for (i, e) in d.events().iter().enumerate() {
        if (e.code.0 as usize) >= d.codes().len() {
            violations.push(format!("event {i}: unknown code id {}", e.code.0));
            continue;
        }
        match d.codes().get(e.code).kind() {
            EventKind::Dx => dx += 1,
            EventKind::Rx => rx += 1,
        }
        if (e.person as usize) >= persons.len() {
            violations.push(format!("event {i}: unknown person index {}", e.person));
            continue;
        }
        if let Some(p) = prev {
            if (p.person, p.date) > (e.person, e.date) {
                violations.push(format!("event {i}: not sorted by (person_id, date)"));
            }
        }
        prev = Some(e);
        let person = &persons[e.person as usize];
        if e.date < person.enroll_start || e.date > person.enroll_end {
            violations.push(format!(
                "event {i}: person {} dated {} outside enrollment {}..={}",
                person.person_id, e.date, person.enroll_start, person.enroll_end
            ));
        }
    }
    ValidationReport {
        persons: persons.len(),
        events: d.events().len(),
        dx_events: dx,
        rx_events: rx,
        violations,
    }
}
