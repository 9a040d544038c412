//! ICD→Phecode mapping and the named Phecode sets used for case definitions
//! and the rule-based benchmarks.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use crate::datamodel::{ClinicalEvent, CodeSystem, CodeTable, EventKind};
use crate::error::{Error, Result};

pub const MAP_HEADER: [&str; 3] = ["icd_version", "icd_code", "phecode"];

/// Curated mapping for the psychiatric, substance and a handful of common
/// somatic codes. Shipped with the crate.
pub const CURATED_MAP_CSV: &str = include_str!("../data/phecode_map.csv");

/// A Phecode held as integer part plus hundredths, so `300.10` and `300.1`
/// are the same code.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Phecode {
    integer: u16,
    hundredths: u8,
}

impl Phecode {
    pub fn new(integer: u16, hundredths: u8) -> Option<Self> {
        (integer <= 9999 && hundredths < 100).then_some(Phecode {
            integer,
            hundredths,
        })
    }

    pub fn integer(self) -> u16 {
        self.integer
    }
}

impl FromStr for Phecode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidPhecode(s.to_string());
        let (int, frac) = match s.split_once('.') {
            Some((i, f)) => (i, Some(f)),
            None => (s, None),
        };
        let digits = |t: &str, max: usize| {
            !t.is_empty() && t.len() <= max && t.bytes().all(|b| b.is_ascii_digit())
        };
        if !digits(int, 4) {
            return Err(bad());
        }
        let integer: u16 = int.parse().map_err(|_| bad())?;
        let hundredths = match frac {
            None => 0,
            Some(f) if digits(f, 2) => {
                let v: u8 = f.parse().map_err(|_| bad())?;
                if f.len() == 1 {
                    v * 10
                } else {
                    v
                }
            }
            Some(_) => return Err(bad()),
        };
        Ok(Phecode {
            integer,
            hundredths,
        })
    }
}

impl fmt::Display for Phecode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.hundredths {
            0 => write!(f, "{}", self.integer),
            h if h % 10 == 0 => write!(f, "{}.{}", self.integer, h / 10),
            h => write!(f, "{}.{:02}", self.integer, h),
        }
    }
}

/// Convenience for literals known to be valid.
pub fn pc(s: &str) -> Phecode {
    s.parse().expect("valid phecode literal")
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PhecodeMap {
    entries: HashMap<(CodeSystem, String), Phecode>,
}

impl PhecodeMap {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Adds an entry; an identical duplicate is a no-op, a conflicting one
    /// is an error.
    pub fn insert(&mut self, system: CodeSystem, code: &str, phecode: Phecode) -> Result<()> {
        if system == CodeSystem::Ndc {
            return Err(Error::Config(format!(
                "phecode map entries must use ICD9 or ICD10, got NDC for {code:?}"
            )));
        }
        match self.entries.get(&(system, code.to_string())) {
            Some(&existing) if existing != phecode => Err(Error::PhecodeConflict {
                version: system.to_string(),
                code: code.to_string(),
                first: existing.to_string(),
                second: phecode.to_string(),
            }),
            Some(_) => Ok(()),
            None => {
                self.entries.insert((system, code.to_string()), phecode);
                Ok(())
            }
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (CodeSystem, &str, Phecode)> {
        self.entries.iter().map(|((s, c), p)| (*s, c.as_str(), *p))
    }

    pub fn get(&self, system: CodeSystem, code: &str) -> Option<Phecode> {
        self.entries.get(&(system, code.to_string())).copied()
    }

    /// Phecode for a diagnosis event; medications never map.
    pub fn map_event(&self, e: &ClinicalEvent) -> Option<Phecode> {
        match e.kind {
            EventKind::Rx => None,
            EventKind::Dx => self.get(e.system, &e.code),
        }
    }

    /// Per-code lookup table for a dataset's interned codes.
    pub fn resolve(&self, codes: &CodeTable) -> ResolvedPhecodes {
        ResolvedPhecodes(
            codes
                .iter()
                .map(|(_, c)| match c.kind() {
                    EventKind::Rx => None,
                    EventKind::Dx => self.get(c.system, &c.code),
                })
                .collect(),
        )
    }

    pub fn parse_str(body: &str, origin: &Path) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .flexible(true)
            .from_reader(body.as_bytes());
        let mut map = PhecodeMap::default();
        let mut rec = csv::StringRecord::new();
        let parse_err = |line: u64, msg: String| Error::Parse {
            path: origin.to_path_buf(),
            line,
            msg,
        };
        let mut first = true;
        loop {
            let more = rdr
                .read_record(&mut rec)
                .map_err(|e| parse_err(0, e.to_string()))?;
            if !more {
                break;
            }
            let line = rec.position().map_or(0, |p| p.line());
            if first {
                first = false;
                if rec.iter().ne(MAP_HEADER.iter().copied()) {
                    return Err(parse_err(line, format!("expected header {:?}", MAP_HEADER.join(","))));
                }
                continue;
            }
            if rec.len() != 3 {
                return Err(parse_err(line, format!("expected 3 columns, found {}", rec.len())));
            }
            let system = match &rec[0] {
                "ICD9" => CodeSystem::Icd9,
                "ICD10" => CodeSystem::Icd10,
                other => return Err(parse_err(line, format!("unknown icd_version {other:?}"))),
            };
            let phecode: Phecode = rec[2].parse()?;
            map.insert(system, &rec[1], phecode)?;
        }
        if first {
            return Err(parse_err(1, "missing header row".into()));
        }
        Ok(map)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut rows: Vec<_> = self.entries.iter().collect();
        rows.sort();
        let mut w = crate::datamodel::create(path)?;
        let io = |e| Error::io(path, e);
        writeln!(w, "{}", MAP_HEADER.join(",")).map_err(io)?;
        for ((system, code), p) in rows {
            writeln!(w, "{system},{code},{p}").map_err(io)?;
        }
        w.flush().map_err(io)
    }
}

/// Reads a `phecode_map.csv` file.
pub fn parse_phecode_map(path: impl AsRef<Path>) -> Result<PhecodeMap> {
    let path = path.as_ref();
    let body = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    PhecodeMap::parse_str(&body, path)
}

pub fn curated_map() -> PhecodeMap {
    PhecodeMap::parse_str(CURATED_MAP_CSV, Path::new("<curated>")).expect("curated map is valid")
}

/// Phecode per interned code id.
#[derive(Debug, Clone)]
pub struct ResolvedPhecodes(Vec<Option<Phecode>>);

impl ResolvedPhecodes {
    pub fn get(&self, id: crate::datamodel::CodeId) -> Option<Phecode> {
        self.0[id.0 as usize]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MatchMode {
    Exact(BTreeSet<Phecode>),
    /// Inclusive bounds on the integer part.
    IntegerRange { lo: u16, hi: u16 },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PhecodeSet {
    pub name: String,
    pub mode: MatchMode,
    excluded: BTreeSet<Phecode>,
    excluded_ranges: Vec<(u16, u16)>,
}

impl PhecodeSet {
    pub fn exact(name: &str, members: impl IntoIterator<Item = Phecode>) -> Self {
        let members: BTreeSet<Phecode> = members.into_iter().collect();
        assert!(!members.is_empty(), "exact phecode sets are non-empty");
        PhecodeSet {
            name: name.to_string(),
            mode: MatchMode::Exact(members),
            excluded: BTreeSet::new(),
            excluded_ranges: Vec::new(),
        }
    }

    pub fn integer_range(name: &str, lo: u16, hi: u16) -> Self {
        assert!(lo <= hi);
        PhecodeSet {
            name: name.to_string(),
            mode: MatchMode::IntegerRange { lo, hi },
            excluded: BTreeSet::new(),
            excluded_ranges: Vec::new(),
        }
    }

    pub fn contains(&self, p: Phecode) -> bool {
        let hit = match &self.mode {
            MatchMode::Exact(m) => m.contains(&p),
            MatchMode::IntegerRange { lo, hi } => (*lo..=*hi).contains(&p.integer),
        };
        hit && !self.excluded.contains(&p)
            && !self
                .excluded_ranges
                .iter()
                .any(|(lo, hi)| (*lo..=*hi).contains(&p.integer))
    }

    /// Set difference `self \ other`.
    pub fn without(&self, other: &PhecodeSet) -> PhecodeSet {
        let mut out = self.clone();
        out.name = format!("{} minus {}", self.name, other.name);
        match &other.mode {
            MatchMode::Exact(m) => {
                for p in m.iter().filter(|p| other.contains(**p)) {
                    out.excluded.insert(*p);
                }
            }
            MatchMode::IntegerRange { lo, hi } => {
                // Ranges are only ever subtracted whole.
                out.excluded_ranges.push((*lo, *hi));
            }
        }
        if let MatchMode::Exact(m) = &mut out.mode {
            let excluded = out.excluded.clone();
            let ranges = out.excluded_ranges.clone();
            m.retain(|p| {
                !excluded.contains(p) && !ranges.iter().any(|(lo, hi)| (*lo..=*hi).contains(&p.integer))
            });
        }
        out
    }

    /// Members of an exact set (empty for range sets).
    pub fn members(&self) -> Vec<Phecode> {
        match &self.mode {
            MatchMode::Exact(m) => m.iter().copied().filter(|p| self.contains(*p)).collect(),
            MatchMode::IntegerRange { .. } => Vec::new(),
        }
    }
}

/// Schizophrenia / schizoaffective (295.1), psychosis (295.3), bipolar (296.1).
pub fn smi_set() -> PhecodeSet {
    PhecodeSet::exact("SMI", ["295.1", "295.3", "296.1"].map(pc))
}

/// Phecodes 295 through 307 (all children), excluding the SMI codes.
pub fn psych_category_set() -> PhecodeSet {
    let mut s = PhecodeSet::integer_range("psych 295-307", 295, 307).without(&smi_set());
    s.name = "psych 295-307 excluding SMI".into();
    s
}

/// Distinct Phecodes of the DSM-IV Axis I diagnosis list.
pub fn axis1_set() -> PhecodeSet {
    PhecodeSet::exact(
        "Axis I",
        [
            "296.2", "300.1", "300.12", "300.13", "300.3", "300.4", "300.9", "304", "305.2", "312",
            "313.1", "316", "317",
        ]
        .map(pc),
    )
}

/// Substance addiction (316), alcohol (317), tobacco (318).
pub fn substance_set() -> PhecodeSet {
    PhecodeSet::exact("substance", ["316", "317", "318"].map(pc))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::parse_date;

    #[test]
    fn phecode_format() {
        assert_eq!(pc("295.1").to_string(), "295.1");
        assert_eq!(pc("300.12").to_string(), "300.12");
        assert_eq!(pc("316").to_string(), "316");
        assert_eq!(pc("300.10"), pc("300.1"));
        assert_eq!(pc("008.5").to_string(), "8.5");
        for bad in ["", "abc", "12345", "1.234", "1.", ".5", "-1", "29 5"] {
            assert!(bad.parse::<Phecode>().is_err(), "{bad}");
        }
    }

    fn parse(body: &str) -> Result<PhecodeMap> {
        PhecodeMap::parse_str(body, Path::new("t.csv"))
    }

    #[test]
    fn parses_rows_and_collapses_identical_duplicates() {
        let m = parse("icd_version,icd_code,phecode\nICD10,F20.0,295.1\nICD9,295.30,295.1\nICD9,295.30,295.1\n")
            .unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m.get(CodeSystem::Icd10, "F20.0"), Some(pc("295.1")));
    }

    #[test]
    fn conflicting_duplicate_rejected() {
        let err = parse("icd_version,icd_code,phecode\nICD9,295.30,295.1\nICD9,295.30,296.1\n").unwrap_err();
        match err {
            Error::PhecodeConflict { version, code, .. } => {
                assert_eq!(version, "ICD9");
                assert_eq!(code, "295.30");
            }
            other => panic!("{other}"),
        }
    }

    #[test]
    fn malformed_phecode_rejected() {
        assert!(matches!(
            parse("icd_version,icd_code,phecode\nICD10,F20.0,29x\n"),
            Err(Error::InvalidPhecode(_))
        ));
        assert!(parse("icd_version,icd_code,phecode\nNDC,1,295.1\n").is_err());
        assert!(parse("a,b,c\n").is_err());
    }

    fn ev(kind: EventKind, system: CodeSystem, code: &str) -> ClinicalEvent {
        ClinicalEvent {
            person_id: "p1".into(),
            date: parse_date("2012-01-01").unwrap(),
            kind,
            system,
            code: code.into(),
        }
    }

    #[test]
    fn map_event_cases() {
        let m = parse("icd_version,icd_code,phecode\nICD10,F20.0,295.1\n").unwrap();
        assert_eq!(m.map_event(&ev(EventKind::Dx, CodeSystem::Icd10, "F20.0")), Some(pc("295.1")));
        assert_eq!(m.map_event(&ev(EventKind::Rx, CodeSystem::Ndc, "12345-678")), None);
        assert_eq!(m.map_event(&ev(EventKind::Dx, CodeSystem::Icd10, "Z00.0")), None);
        // Version matters.
        assert_eq!(m.map_event(&ev(EventKind::Dx, CodeSystem::Icd9, "F20.0")), None);
    }

    #[test]
    fn named_sets() {
        let smi = smi_set();
        assert!(smi.contains(pc("295.1")));
        assert!(smi.contains(pc("296.1")));
        assert!(smi.contains(pc("295.3")));
        assert!(!smi.contains(pc("300.1")));
        assert_eq!(smi.members().len(), 3);

        let psych = psych_category_set();
        assert!(psych.contains(pc("300.4")));
        assert!(psych.contains(pc("295")));
        assert!(psych.contains(pc("307.4")));
        assert!(!psych.contains(pc("295.1")));
        assert!(!psych.contains(pc("308")));

        let axis = axis1_set();
        assert!(axis.contains(pc("313.1")));
        assert!(axis.contains(pc("316")));
        assert!(!axis.contains(pc("318")));
        assert_eq!(axis.members().len(), 13);

        let sub = substance_set();
        assert!(sub.contains(pc("317")));
        assert!(sub.contains(pc("318")));
        assert!(!sub.contains(pc("295.1")));
    }

    #[test]
    fn set_relations() {
        let (smi, axis, sub) = (smi_set(), axis1_set(), substance_set());
        assert!(smi.members().iter().all(|p| !axis.contains(*p)));
        assert!(sub.members().iter().all(|p| !smi.contains(*p)));
        let both: Vec<Phecode> = axis.members().into_iter().filter(|p| sub.contains(*p)).collect();
        assert_eq!(both, vec![pc("316"), pc("317")]);
        let axis_no_sub = axis.without(&sub);
        assert!(!axis_no_sub.contains(pc("316")));
        assert!(axis_no_sub.contains(pc("313.1")));
    }

    #[test]
    fn psych_never_contains_smi_exhaustive() {
        let psych = psych_category_set();
        let smi = smi_set();
        for i in 0..=999u16 {
            for h in 0..100u8 {
                let p = Phecode::new(i, h).unwrap();
                assert!(!(psych.contains(p) && smi.contains(p)));
            }
        }
    }

    #[test]
    fn curated_map_covers_sets() {
        let m = curated_map();
        let phecodes: BTreeSet<Phecode> = m.entries.values().copied().collect();
        for p in smi_set().members().into_iter().chain(axis1_set().members()).chain(substance_set().members()) {
            assert!(phecodes.contains(&p), "{p} missing from curated map");
        }
    }
}
