//! Case-control and use-case cohort construction.
//!
//! The all-age cohort pairs each SMI case with up to `k` matched controls.
//! A case's observation window is the 12 months ending `gap_days` before the
//! first SMI diagnosis; its controls inherit the exact same calendar window.
//! Use-case cohorts (18th birthday, first substance diagnosis) are not
//! matched and keep their natural prevalence.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use chrono::{Days, Months, NaiveDate};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datamodel::{Dataset, Event, EventKind, Gender};
use crate::error::{Error, Result};
use crate::phecode::{smi_set, substance_set, PhecodeMap, PhecodeSet, ResolvedPhecodes};
use crate::rng;

pub const GAP_MIN_DAYS: u32 = 14;
pub const GAP_MAX_DAYS: u32 = 365;
pub const DEFAULT_MAX_CONTROLS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CohortKind {
    #[serde(rename = "ALL_AGE")]
    AllAge,
    #[serde(rename = "AGE18")]
    Age18,
    #[serde(rename = "SUBSTANCE")]
    Substance,
}

impl fmt::Display for CohortKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CohortKind::AllAge => "ALL_AGE",
            CohortKind::Age18 => "AGE18",
            CohortKind::Substance => "SUBSTANCE",
        })
    }
}

impl FromStr for CohortKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "ALL_AGE" => Ok(CohortKind::AllAge),
            "AGE18" => Ok(CohortKind::Age18),
            "SUBSTANCE" => Ok(CohortKind::Substance),
            other => Err(format!("unknown cohort kind {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ObservationWindow {
    pub start: NaiveDate,
    pub end: NaiveDate,
    /// Only set for all-age cases.
    pub gap_days: Option<u32>,
}

impl ObservationWindow {
    /// The 12-month window ending on `end` (inclusive).
    pub fn ending_at(end: NaiveDate) -> Self {
        ObservationWindow {
            start: twelve_months_before(end) + Days::new(1),
            end,
            gap_days: None,
        }
    }

    pub fn contains(&self, d: NaiveDate) -> bool {
        self.start <= d && d <= self.end
    }

    pub fn len_days(&self) -> i64 {
        (self.end - self.start).num_days() + 1
    }
}

/// Same day-of-month twelve months earlier, clamped to month end.
pub fn twelve_months_before(d: NaiveDate) -> NaiveDate {
    d.checked_sub_months(Months::new(12)).expect("date in range")
}

pub fn twelve_months_after(d: NaiveDate) -> NaiveDate {
    d.checked_add_months(Months::new(12)).expect("date in range")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CohortExample {
    pub person: u32,
    pub person_id: String,
    pub label: u8,
    pub window: ObservationWindow,
    pub match_group: u32,
    pub cohort_kind: CohortKind,
    pub index_date: NaiveDate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct MatchKey {
    pub birth_year: i32,
    pub gender: Gender,
    pub pre_window_dx_count: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Case {
    pub person: u32,
    pub onset: NaiveDate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CaseWindow {
    pub case: Case,
    pub window: ObservationWindow,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct CohortStats {
    pub persons: usize,
    pub cases_found: usize,
    pub cases_dropped_enrollment: usize,
    pub cases_dropped_no_dx: usize,
    pub cases_without_controls: usize,
    pub excluded_use_case_persons: usize,
    pub groups: usize,
    pub examples: usize,
    pub positives: usize,
}

#[derive(Debug, Clone)]
pub struct Cohort {
    pub kind: CohortKind,
    pub examples: Vec<CohortExample>,
    pub stats: CohortStats,
}

impl Cohort {
    pub fn prevalence(&self) -> f64 {
        let pos = self.examples.iter().filter(|e| e.label == 1).count();
        pos as f64 / self.examples.len().max(1) as f64
    }
}

/// Per-dataset helpers shared by the cohort builders.
struct Scan<'a> {
    d: &'a Dataset,
    phe: ResolvedPhecodes,
    smi: PhecodeSet,
}

impl<'a> Scan<'a> {
    fn new(d: &'a Dataset, m: &PhecodeMap) -> Self {
        Scan {
            d,
            phe: m.resolve(d.codes()),
            smi: smi_set(),
        }
    }

    fn in_set(&self, e: &Event, set: &PhecodeSet) -> bool {
        self.phe.get(e.code).is_some_and(|p| set.contains(p))
    }

    fn is_smi(&self, e: &Event) -> bool {
        self.in_set(e, &self.smi)
    }

    fn first_smi(&self, person: u32) -> Option<NaiveDate> {
        self.d
            .person_events(person)
            .iter()
            .find(|e| self.is_smi(e))
            .map(|e| e.date)
    }

    fn is_dx(&self, e: &Event) -> bool {
        self.d.codes().get(e.code).kind() == EventKind::Dx
    }

    fn dx_before(&self, person: u32, date: NaiveDate) -> u32 {
        self.d
            .person_events(person)
            .iter()
            .take_while(|e| e.date < date)
            .filter(|e| self.is_dx(e))
            .count() as u32
    }

    fn any_in(&self, person: u32, w: &ObservationWindow, pred: impl Fn(&Event) -> bool) -> bool {
        let ev = self.d.person_events(person);
        let lo = ev.partition_point(|e| e.date < w.start);
        ev[lo..].iter().take_while(|e| e.date <= w.end).any(pred)
    }

    fn has_dx_in(&self, person: u32, w: &ObservationWindow) -> bool {
        self.any_in(person, w, |e| self.is_dx(e))
    }
}

/// Persons with at least one SMI-mapped event, with the date of the first.
pub fn find_cases(d: &Dataset, m: &PhecodeMap) -> Vec<Case> {
    let scan = Scan::new(d, m);
    (0..d.persons().len() as u32)
        .into_par_iter()
        .filter_map(|p| scan.first_smi(p).map(|onset| Case { person: p, onset }))
        .collect()
}

/// Uniform integer gap length in `[14, 365]` days, keyed by person.
pub fn sample_gap(seed: u64, person_id: &str) -> u32 {
    rng::stream(seed, "gap", person_id).random_range(GAP_MIN_DAYS..=GAP_MAX_DAYS)
}

/// Places each case's window `gap` days before onset. Cases whose window
/// would start before enrollment are dropped; the drop count is returned.
pub fn build_case_windows(cases: &[Case], d: &Dataset, seed: u64) -> (Vec<CaseWindow>, usize) {
    let mut out = Vec::with_capacity(cases.len());
    let mut dropped = 0;
    for case in cases {
        let person = d.person(case.person);
        let gap = sample_gap(seed, &person.person_id);
        let end = case.onset - Days::new(u64::from(gap));
        let mut window = ObservationWindow::ending_at(end);
        window.gap_days = Some(gap);
        if window.start < person.enroll_start {
            dropped += 1;
            continue;
        }
        out.push(CaseWindow { case: *case, window });
    }
    (out, dropped)
}

/// Matches up to `k` controls per case within exact (birth_year, gender)
/// strata, nearest pre-window diagnosis count first. Persons in `exclude`
/// are never used. Match groups are numbered in case order.
pub fn match_controls(
    case_windows: &[CaseWindow],
    d: &Dataset,
    m: &PhecodeMap,
    k: usize,
    seed: u64,
    exclude: &HashSet<u32>,
) -> Vec<CohortExample> {
    let scan = Scan::new(d, m);
    let case_persons: HashSet<u32> = case_windows.iter().map(|c| c.case.person).collect();

    // Control pools by stratum: never-SMI persons only.
    let mut pools: BTreeMap<(i32, Gender), Vec<u32>> = BTreeMap::new();
    for p in 0..d.persons().len() as u32 {
        if exclude.contains(&p) || case_persons.contains(&p) || scan.first_smi(p).is_some() {
            continue;
        }
        let person = d.person(p);
        pools.entry((person.birth_year, person.gender)).or_default().push(p);
    }

    let mut strata: BTreeMap<(i32, Gender), Vec<usize>> = BTreeMap::new();
    for (i, cw) in case_windows.iter().enumerate() {
        let person = d.person(cw.case.person);
        strata.entry((person.birth_year, person.gender)).or_default().push(i);
    }

    let strata: Vec<_> = strata.into_iter().collect();
    let matched: Vec<Vec<(usize, Vec<u32>)>> = strata
        .par_iter()
        .map(|(key, idxs)| {
            let pool = pools.get(key).map(Vec::as_slice).unwrap_or(&[]);
            let mut used = vec![false; pool.len()];
            let mut order: Vec<(u32, &str, usize)> = idxs
                .iter()
                .map(|&i| {
                    let cw = &case_windows[i];
                    (
                        scan.dx_before(cw.case.person, cw.window.start),
                        d.person(cw.case.person).person_id.as_str(),
                        i,
                    )
                })
                .collect();
            // Greedy in descending case count, then person id.
            order.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(b.1)));
            let mut out = Vec::with_capacity(order.len());
            for (case_count, _, i) in order {
                let w = &case_windows[i].window;
                let mut ranked: Vec<(u32, u64, usize)> = pool
                    .iter()
                    .enumerate()
                    .filter(|(j, _)| !used[*j])
                    .filter(|(_, &c)| d.person(c).covers(w.start, w.end) && scan.has_dx_in(c, w))
                    .map(|(j, &c)| {
                        let n = scan.dx_before(c, w.start);
                        let tie = rng::keyed(seed, "match", &d.person(c).person_id);
                        (n.abs_diff(case_count), tie, j)
                    })
                    .collect();
                ranked.sort_unstable();
                let chosen: Vec<u32> = ranked
                    .into_iter()
                    .take(k)
                    .map(|(_, _, j)| {
                        used[j] = true;
                        pool[j]
                    })
                    .collect();
                out.push((i, chosen));
            }
            out
        })
        .collect();

    let mut by_case: Vec<Vec<u32>> = vec![Vec::new(); case_windows.len()];
    for (i, controls) in matched.into_iter().flatten() {
        by_case[i] = controls;
    }

    let mut examples = Vec::new();
    for (g, (cw, controls)) in case_windows.iter().zip(by_case).enumerate() {
        let g = g as u32;
        examples.push(CohortExample {
            person: cw.case.person,
            person_id: d.person(cw.case.person).person_id.clone(),
            label: 1,
            window: cw.window,
            match_group: g,
            cohort_kind: CohortKind::AllAge,
            index_date: cw.case.onset,
        });
        for c in controls {
            examples.push(CohortExample {
                person: c,
                person_id: d.person(c).person_id.clone(),
                label: 0,
                window: ObservationWindow {
                    gap_days: None,
                    ..cw.window
                },
                match_group: g,
                cohort_kind: CohortKind::AllAge,
                index_date: cw.case.onset,
            });
        }
    }
    examples
}

/// Birthday convention for a year-of-birth-only schema: July 1st.
pub fn eighteenth_birthday(birth_year: i32) -> NaiveDate {
    NaiveDate::from_ymd_opt(birth_year + 18, 7, 1).expect("valid birthday")
}

/// Persons observed for 12 months on each side of their 18th birthday.
/// Label is any SMI diagnosis in the 12 months starting on the birthday.
pub fn build_age18_cohort(d: &Dataset, m: &PhecodeMap) -> Vec<CohortExample> {
    build_age18_with(d, m, eighteenth_birthday)
}

pub fn build_age18_with(
    d: &Dataset,
    m: &PhecodeMap,
    birthday: impl Fn(i32) -> NaiveDate + Sync,
) -> Vec<CohortExample> {
    let scan = Scan::new(d, m);
    let picked: Vec<Option<CohortExample>> = (0..d.persons().len() as u32)
        .into_par_iter()
        .map(|p| {
            let person = d.person(p);
            let bday = birthday(person.birth_year);
            let window = ObservationWindow {
                start: twelve_months_before(bday),
                end: bday - Days::new(1),
                gap_days: None,
            };
            let outcome_end = twelve_months_after(bday) - Days::new(1);
            if !person.covers(window.start, outcome_end) {
                return None;
            }
            if !scan.any_in(p, &window, |_| true) {
                return None;
            }
            let first_smi = scan.first_smi(p);
            if first_smi.is_some_and(|o| o < bday) {
                return None;
            }
            let label = u8::from(first_smi.is_some_and(|o| o <= outcome_end));
            Some(CohortExample {
                person: p,
                person_id: person.person_id.clone(),
                label,
                window,
                match_group: 0,
                cohort_kind: CohortKind::Age18,
                index_date: bday,
            })
        })
        .collect();
    number_singletons(picked)
}

/// Persons anchored at their first substance-related diagnosis. The window
/// is the 12 months ending on (and including) that date; the label is any
/// SMI diagnosis in the following 12 months.
pub fn build_substance_cohort(d: &Dataset, m: &PhecodeMap) -> Vec<CohortExample> {
    let scan = Scan::new(d, m);
    let substance = substance_set();
    let picked: Vec<Option<CohortExample>> = (0..d.persons().len() as u32)
        .into_par_iter()
        .map(|p| {
            let person = d.person(p);
            let index = d
                .person_events(p)
                .iter()
                .find(|e| scan.in_set(e, &substance))?
                .date;
            let window = ObservationWindow::ending_at(index);
            let outcome_end = twelve_months_after(index);
            if !person.covers(window.start, outcome_end) {
                return None;
            }
            let first_smi = scan.first_smi(p);
            if first_smi.is_some_and(|o| o <= index) {
                return None;
            }
            let label = u8::from(first_smi.is_some_and(|o| o <= outcome_end));
            Some(CohortExample {
                person: p,
                person_id: person.person_id.clone(),
                label,
                window,
                match_group: 0,
                cohort_kind: CohortKind::Substance,
                index_date: index,
            })
        })
        .collect();
    number_singletons(picked)
}

fn number_singletons(picked: Vec<Option<CohortExample>>) -> Vec<CohortExample> {
    picked
        .into_iter()
        .flatten()
        .enumerate()
        .map(|(g, mut ex)| {
            ex.match_group = g as u32;
            ex
        })
        .collect()
}

/// Builds a cohort of the requested kind. The all-age cohort excludes every
/// person who belongs to either use-case cohort.
pub fn build_cohort(kind: CohortKind, d: &Dataset, m: &PhecodeMap, k: usize, seed: u64) -> Result<Cohort> {
    let mut stats = CohortStats {
        persons: d.persons().len(),
        ..Default::default()
    };
    let examples = match kind {
        CohortKind::Age18 => build_age18_cohort(d, m),
        CohortKind::Substance => build_substance_cohort(d, m),
        CohortKind::AllAge => {
            let exclude: HashSet<u32> = build_age18_cohort(d, m)
                .into_iter()
                .chain(build_substance_cohort(d, m))
                .map(|e| e.person)
                .collect();
            stats.excluded_use_case_persons = exclude.len();
            let cases: Vec<Case> = find_cases(d, m)
                .into_iter()
                .filter(|c| !exclude.contains(&c.person))
                .collect();
            stats.cases_found = cases.len();
            let (windows, dropped) = build_case_windows(&cases, d, rng::derive_seed(seed, "gap"));
            stats.cases_dropped_enrollment = dropped;
            let scan = Scan::new(d, m);
            let windows: Vec<CaseWindow> = windows
                .into_iter()
                .filter(|cw| scan.has_dx_in(cw.case.person, &cw.window))
                .collect();
            stats.cases_dropped_no_dx = stats.cases_found - dropped - windows.len();
            let examples = match_controls(&windows, d, m, k, rng::derive_seed(seed, "match"), &exclude);
            let mut group_sizes = vec![0usize; windows.len()];
            for e in &examples {
                group_sizes[e.match_group as usize] += 1;
            }
            stats.cases_without_controls = group_sizes.iter().filter(|&&n| n == 1).count();
            examples
        }
    };
    if examples.is_empty() {
        return Err(Error::EmptyCohort(kind.to_string()));
    }
    stats.examples = examples.len();
    stats.positives = examples.iter().filter(|e| e.label == 1).count();
    stats.groups = examples.iter().map(|e| e.match_group).collect::<HashSet<_>>().len();
    Ok(Cohort { kind, examples, stats })
}

pub const COHORT_HEADER: &str = "person_id,label,cohort_kind,match_group,window_start,window_end,gap_days,index_date";

pub fn write_cohort(path: impl AsRef<Path>, cohort: &Cohort) -> Result<()> {
    let path = path.as_ref();
    let mut w = crate::datamodel::create(path)?;
    let io = |e| Error::io(path, e);
    writeln!(w, "{COHORT_HEADER}").map_err(io)?;
    for e in &cohort.examples {
        let gap = e.window.gap_days.map(|g| g.to_string()).unwrap_or_default();
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            e.person_id, e.label, e.cohort_kind, e.match_group, e.window.start, e.window.end, gap, e.index_date
        )
        .map_err(io)?;
    }
    w.flush().map_err(io)
}
