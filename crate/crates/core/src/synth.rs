//! Seeded synthetic populations with a known risk mechanism.
//!
//! Every person owns a small set of latent conditions (codes) drawn from a
//! source-specific frequency profile. Weighted conditions shift a logistic
//! risk score; the score sets an annual onset hazard over the part of
//! enrollment that follows a one-year exposure period. Diagnoses and fills
//! are then emitted as Poisson processes from each condition's acquisition
//! date, and SMI diagnoses start exactly at onset.

use std::collections::{BTreeMap, HashSet};
use std::io::Write;
use std::path::Path;

use chrono::{Datelike, Days, Months, NaiveDate};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp, Poisson};
use rayon::prelude::*;

use crate::datamodel::{
    write_dataset, Code, CodeId, CodeSystem, Dataset, EventTableBuilder, Gender, Person, PersonTable, Source,
};
use crate::error::{Error, Result};
use crate::eval::{auc, ScoredSet};
use crate::phecode::{axis1_set, curated_map, smi_set, Phecode, PhecodeMap};
use crate::rng;

/// Years of age per unit of the age coefficient.
const AGE_SCALE: f64 = 10.0;
const AGE_CENTER: f64 = 40.0;
const EXPOSURE_DAYS: u64 = 365;
const MIN_ENROLL_MONTHS: u32 = 24;
const MAX_ENROLL_MONTHS: u32 = 96;
const DAYS_PER_YEAR: f64 = 365.25;
/// Mean number of SMI follow-up diagnoses per year after onset.
const SMI_FOLLOWUP_RATE: f64 = 2.0;
/// Unweighted conditions are present only in a fraction of enrollment.
const LATE_ACQUISITION_PROB: f64 = 0.4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VocabConfig {
    /// Diagnosis codes common to every source, curated anchors included.
    pub shared_dx: usize,
    /// Diagnosis codes only this source emits.
    pub specific_dx: usize,
    /// Medication codes, common to every source.
    pub rx: usize,
}

impl Default for VocabConfig {
    fn default() -> Self {
        VocabConfig {
            shared_dx: 500,
            specific_dx: 400,
            rx: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_persons: usize,
    pub source: Source,
    pub vocab: VocabConfig,
    /// Explicit log-odds per namespaced code (`dx:ICD10:F41.1`). Codes not
    /// listed use the built-in planted weight times `signal_scale`.
    pub risk_weights: BTreeMap<String, f64>,
    pub signal_scale: f64,
    pub base_logit: f64,
    pub smi_annual_rate_cap: f64,
    /// Mean events per person per year.
    pub event_rate: f64,
    /// Mean number of latent conditions per person beyond the first.
    pub conditions_per_person: f64,
    /// Log-scale spread of per-source code frequency shifts.
    pub frequency_tilt: f64,
    /// Logit change per decade of age.
    pub age_effect: f64,
    pub male_effect: f64,
    pub year_range: (i32, i32),
    pub seed: u64,
}

impl SynthConfig {
    pub fn new(source: Source, n_persons: usize, seed: u64) -> Self {
        SynthConfig {
            n_persons,
            source,
            vocab: VocabConfig::default(),
            risk_weights: BTreeMap::new(),
            signal_scale: 1.0,
            base_logit: -5.8,
            smi_annual_rate_cap: 0.5,
            event_rate: match source {
                Source::Claims => 20.0,
                Source::Ehr => 26.0,
            },
            conditions_per_person: 12.0,
            frequency_tilt: 0.6,
            age_effect: -0.3,
            male_effect: 0.2,
            year_range: (2008, 2019),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::SynthConfig(m));
        if self.n_persons == 0 {
            return bad("n_persons must be at least 1".into());
        }
        if !(self.event_rate > 0.0 && self.event_rate.is_finite()) {
            return bad(format!("event_rate must be positive, got {}", self.event_rate));
        }
        if self.year_range.0 > self.year_range.1 {
            return bad(format!(
                "year_range min {} exceeds max {}",
                self.year_range.0, self.year_range.1
            ));
        }
        if NaiveDate::from_ymd_opt(self.year_range.0 - 100, 1, 1).is_none()
            || NaiveDate::from_ymd_opt(self.year_range.1 + 1, 1, 1).is_none()
        {
            return bad("year_range out of supported calendar".into());
        }
        if !(self.smi_annual_rate_cap > 0.0 && self.smi_annual_rate_cap < 1.0) {
            return bad(format!(
                "smi_annual_rate_cap must lie in (0, 1), got {}",
                self.smi_annual_rate_cap
            ));
        }
        if self.base_logit.is_nan() || self.base_logit == f64::INFINITY {
            return bad("base_logit must be finite or -inf".into());
        }
        for (name, v) in [
            ("signal_scale", self.signal_scale),
            ("frequency_tilt", self.frequency_tilt),
            ("age_effect", self.age_effect),
            ("male_effect", self.male_effect),
        ] {
            if !v.is_finite() {
                return bad(format!("{name} must be finite"));
            }
        }
        if !(self.conditions_per_person >= 0.0 && self.conditions_per_person.is_finite()) {
            return bad("conditions_per_person must be non-negative".into());
        }
        let curated = curated_dx_codes().len();
        if self.vocab.shared_dx < curated {
            return bad(format!(
                "vocab.shared_dx must be at least {curated} (the curated anchors)"
            ));
        }
        if let Some((k, w)) = self.risk_weights.iter().find(|(_, w)| !w.is_finite()) {
            return bad(format!("risk weight for {k} is not finite: {w}"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tier {
    Smi,
    Anchor,
    SharedDx,
    SpecificDx,
    Rx,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UniverseCode {
    pub code: Code,
    pub phecode: Option<Phecode>,
    pub tier: Tier,
    /// Relative draw frequency before the source tilt.
    pub frequency: f64,
    /// Built-in log-odds contribution at `signal_scale = 1`.
    pub planted_weight: f64,
}

/// All codes a source can emit.
#[derive(Debug, Clone, PartialEq)]
pub struct CodeUniverse {
    pub source: Source,
    pub codes: Vec<UniverseCode>,
}

fn curated_dx_codes() -> Vec<(Code, Phecode)> {
    let map = curated_map();
    let mut out: Vec<(Code, Phecode)> = map
        .iter()
        .map(|(system, code, p)| (Code::new(system, code), p))
        .collect();
    out.sort_by_key(|(c, _)| c.namespaced());
    out
}

fn zipf(rank: usize) -> f64 {
    (1.0 + rank as f64 / 25.0).powf(-0.9)
}

/// Deterministic non-psychiatric Phecode for a synthetic code.
fn synthetic_phecode(code: &str) -> Phecode {
    let h = rng::hash_str(code);
    // 8..=989 skipping the psychiatric block 290..=319.
    let mut integer = 8 + (h % 952) as u16;
    if integer >= 290 {
        integer += 30;
    }
    Phecode::new(integer, ((h >> 32) % 10) as u8 * 10).expect("in range")
}

fn shared_dx_code(i: usize) -> String {
    let letters = ['R', 'S', 'T', 'U', 'V'];
    format!("{}{:02}.{}", letters[i / 1000 % letters.len()], i % 1000 / 10, i % 10)
}

fn claims_dx_code(i: usize) -> String {
    format!("{}.{}", 460 + i / 10, i % 10)
}

fn ehr_dx_code(i: usize) -> String {
    let letters = ['H', 'L', 'W', 'Y'];
    format!("{}{:02}.{}{}", letters[i / 1000 % letters.len()], i % 1000 / 10, i % 10, 7)
}

fn rx_code(i: usize) -> String {
    format!("{:05}-{:04}-{:02}", 50000 + i, (i * 37) % 10000, i % 100)
}

fn specific_codes(source: Source, n: usize) -> Vec<Code> {
    (0..n)
        .map(|i| match source {
            Source::Claims => Code::new(CodeSystem::Icd9, claims_dx_code(i)),
            Source::Ehr => Code::new(CodeSystem::Icd10, ehr_dx_code(i)),
        })
        .collect()
}

/// Builds the code universe for one source. Shared codes depend only on the
/// vocabulary counts, so two sources with the same counts overlap in exactly
/// `shared_dx + rx` codes.
pub fn build_universe(source: Source, vocab: &VocabConfig) -> CodeUniverse {
    let smi = smi_set();
    let axis1 = axis1_set();
    let mut codes = Vec::new();
    let curated = curated_dx_codes();
    let n_curated = curated.len();
    for (code, p) in curated {
        let psych = (295..=318).contains(&p.integer());
        let (tier, frequency, planted_weight) = if smi.contains(p) {
            (Tier::Smi, 0.0, 0.0)
        } else if axis1.contains(p) {
            (Tier::Anchor, 0.12, 1.5)
        } else if psych {
            (Tier::Anchor, 0.12, 0.9)
        } else {
            (Tier::Anchor, 3.0, 0.0)
        };
        codes.push(UniverseCode {
            code,
            phecode: Some(p),
            tier,
            frequency,
            planted_weight,
        });
    }
    for i in 0..vocab.shared_dx.saturating_sub(n_curated) {
        let code = shared_dx_code(i);
        let planted_weight = match (i % 10, i % 23) {
            (3, _) => 1.05 + 0.3 * (i / 10 % 3) as f64,
            (_, 7) => -0.75,
            _ => 0.0,
        };
        codes.push(UniverseCode {
            phecode: Some(synthetic_phecode(&code)),
            code: Code::new(CodeSystem::Icd10, code),
            tier: Tier::SharedDx,
            frequency: zipf(i),
            planted_weight,
        });
    }
    for (i, code) in specific_codes(source, vocab.specific_dx).into_iter().enumerate() {
        codes.push(UniverseCode {
            phecode: Some(synthetic_phecode(&code.code)),
            code,
            tier: Tier::SpecificDx,
            frequency: zipf(i),
            planted_weight: if i % 10 == 5 { 1.35 } else { 0.0 },
        });
    }
    for i in 0..vocab.rx {
        codes.push(UniverseCode {
            code: Code::new(CodeSystem::Ndc, rx_code(i)),
            phecode: None,
            tier: Tier::Rx,
            frequency: zipf(i),
            planted_weight: if i % 8 == 2 { 1.05 } else { 0.0 },
        });
    }
    CodeUniverse { source, codes }
}

/// Curated entries plus the synthetic diagnosis codes of both sources.
pub fn synthetic_phecode_map(vocab: &VocabConfig) -> PhecodeMap {
    let mut map = curated_map();
    for source in [Source::Claims, Source::Ehr] {
        for uc in build_universe(source, vocab).codes {
            if let (Some(p), true) = (uc.phecode, uc.code.system != CodeSystem::Ndc) {
                map.insert(uc.code.system, &uc.code.code, p).expect("synthetic codes are unique");
            }
        }
    }
    map
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthEntry {
    pub person_id: String,
    pub latent_logit: f64,
    pub onset: Option<NaiveDate>,
}

/// Latent risk and realized onset per person, ordered like the persons.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GroundTruth {
    pub entries: Vec<GroundTruthEntry>,
}

impl GroundTruth {
    pub fn logits(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.latent_logit).collect()
    }

    pub fn labels(&self) -> Vec<bool> {
        self.entries.iter().map(|e| e.onset.is_some()).collect()
    }

    pub fn n_onsets(&self) -> usize {
        self.entries.iter().filter(|e| e.onset.is_some()).count()
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = crate::datamodel::create(path)?;
        let io = |e| Error::io(path, e);
        writeln!(w, "person_id,latent_logit,onset_date").map_err(io)?;
        for e in &self.entries {
            let onset = e.onset.map(|d| d.to_string()).unwrap_or_default();
            writeln!(w, "{},{},{}", e.person_id, e.latent_logit, onset).map_err(io)?;
        }
        w.flush().map_err(io)
    }
}

/// AUC of the latent logits against the given per-person labels.
pub fn ground_truth_auc(gt: &GroundTruth, labels: &[bool]) -> Result<f64> {
    if labels.len() != gt.entries.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} labels for {} persons",
            labels.len(),
            gt.entries.len()
        )));
    }
    auc(&ScoredSet::new(gt.logits(), labels.to_vec())?)
}

/// Demographics, enrollment and latent conditions of one person.
#[derive(Debug, Clone, PartialEq)]
pub struct Profile {
    pub birth_year: i32,
    pub gender: Gender,
    pub enroll_start: NaiveDate,
    pub enroll_end: NaiveDate,
    /// `(universe index, acquisition date)`, sorted by index.
    pub conditions: Vec<(u32, NaiveDate)>,
}

/// Precomputed sampling tables for one configuration.
pub struct Generator {
    cfg: SynthConfig,
    universe: CodeUniverse,
    weights: Vec<f64>,
    condition_dist: Option<WeightedIndex<f64>>,
    smi_codes: Vec<u32>,
    per_code_rate: f64,
}

fn random_date(r: &mut ChaCha8Rng, lo: NaiveDate, hi: NaiveDate) -> NaiveDate {
    let span = (hi - lo).num_days().max(0) as u64;
    lo + Days::new(r.random_range(0..=span))
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

impl Generator {
    pub fn new(cfg: &SynthConfig) -> Result<Self> {
        cfg.validate()?;
        let universe = build_universe(cfg.source, &cfg.vocab);
        let known: HashSet<String> = universe.codes.iter().map(|c| c.code.namespaced()).collect();
        if let Some(k) = cfg.risk_weights.keys().find(|k| !known.contains(*k)) {
            return Err(Error::SynthConfig(format!("risk weight for unknown code {k}")));
        }
        let weights: Vec<f64> = universe
            .codes
            .iter()
            .map(|c| match cfg.risk_weights.get(&c.code.namespaced()) {
                Some(&w) => w,
                None => c.planted_weight * cfg.signal_scale,
            })
            .collect();
        let source_label = cfg.source.to_string();
        let draw_weights: Vec<f64> = universe
            .codes
            .iter()
            .map(|c| {
                if c.tier == Tier::Smi {
                    return 0.0;
                }
                let u = rng::keyed(0, &source_label, &c.code.namespaced()) as f64 / u64::MAX as f64;
                c.frequency * (cfg.frequency_tilt * (2.0 * u - 1.0)).exp()
            })
            .collect();
        let condition_dist = WeightedIndex::new(&draw_weights).ok();
        let smi_codes = universe
            .codes
            .iter()
            .enumerate()
            .filter(|(_, c)| c.tier == Tier::Smi)
            .map(|(i, _)| i as u32)
            .collect();
        Ok(Generator {
            per_code_rate: cfg.event_rate / (cfg.conditions_per_person + 1.0),
            cfg: cfg.clone(),
            universe,
            weights,
            condition_dist,
            smi_codes,
        })
    }

    pub fn universe(&self) -> &CodeUniverse {
        &self.universe
    }

    /// Effective log-odds weight per universe code.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn person_id(&self, i: usize) -> String {
        let prefix = match self.cfg.source {
            Source::Claims => 'C',
            Source::Ehr => 'E',
        };
        format!("{prefix}{:07}", i + 1)
    }

    pub fn sample_profile(&self, r: &mut ChaCha8Rng) -> Profile {
        let (y0, y1) = self.cfg.year_range;
        let first = NaiveDate::from_ymd_opt(y0, 1, 1).expect("valid");
        let last = NaiveDate::from_ymd_opt(y1, 12, 31).expect("valid");
        let months = r.random_range(MIN_ENROLL_MONTHS..=MAX_ENROLL_MONTHS);
        let latest_start = (last - Months::new(MIN_ENROLL_MONTHS)).max(first);
        let enroll_start = random_date(r, first, latest_start);
        let enroll_end = (enroll_start + Months::new(months) - Days::new(1)).min(last);
        let birth_year = r.random_range(y0 - 68..=y1 - 13);
        let g: f64 = r.random();
        let gender = if g < 0.52 {
            Gender::F
        } else if g < 0.99 {
            Gender::M
        } else {
            Gender::U
        };

        let mut conditions: Vec<(u32, NaiveDate)> = Vec::new();
        if let Some(dist) = &self.condition_dist {
            let extra = if self.cfg.conditions_per_person > 0.0 {
                Poisson::new(self.cfg.conditions_per_person).expect("positive mean").sample(r) as usize
            } else {
                0
            };
            let exposure_end = (enroll_start + Days::new(EXPOSURE_DAYS - 1)).min(enroll_end);
            let mut seen = HashSet::new();
            for _ in 0..=extra {
                let idx = dist.sample(r) as u32;
                if !seen.insert(idx) {
                    continue;
                }
                // Weighted conditions are present before any onset can occur.
                let acquired = if self.weights[idx as usize] != 0.0 || !r.random_bool(LATE_ACQUISITION_PROB) {
                    random_date(r, enroll_start, exposure_end)
                } else {
                    random_date(r, enroll_start, enroll_end)
                };
                conditions.push((idx, acquired));
            }
            conditions.sort_unstable();
        }
        Profile {
            birth_year,
            gender,
            enroll_start,
            enroll_end,
            conditions,
        }
    }

    pub fn latent_logit(&self, p: &Profile) -> f64 {
        let codes: f64 = p.conditions.iter().map(|&(i, _)| self.weights[i as usize]).sum();
        let age = f64::from(p.enroll_start.year() - p.birth_year);
        let male = if p.gender == Gender::M { self.cfg.male_effect } else { 0.0 };
        self.cfg.base_logit + codes + self.cfg.age_effect * (age - AGE_CENTER) / AGE_SCALE + male
    }

    /// First and last day on which onset may fall, if any.
    pub fn onset_span(p: &Profile) -> Option<(NaiveDate, NaiveDate)> {
        let lo = p.enroll_start + Days::new(EXPOSURE_DAYS);
        (lo <= p.enroll_end).then_some((lo, p.enroll_end))
    }

    pub fn onset_probability(&self, p: &Profile, logit: f64) -> f64 {
        match Self::onset_span(p) {
            None => 0.0,
            Some((lo, hi)) => {
                let years = ((hi - lo).num_days() + 1) as f64 / DAYS_PER_YEAR;
                let hazard = self.cfg.smi_annual_rate_cap * sigmoid(logit);
                1.0 - (1.0 - hazard).powf(years)
            }
        }
    }

    fn poisson_dates(&self, r: &mut ChaCha8Rng, from: NaiveDate, to: NaiveDate, per_year: f64, out: &mut Vec<NaiveDate>) {
        let gap = Exp::new(per_year / DAYS_PER_YEAR).expect("positive rate");
        let mut t = 0.0f64;
        let horizon = (to - from).num_days() as f64 + 1.0;
        loop {
            t += gap.sample(r);
            if t >= horizon {
                break;
            }
            out.push(from + Days::new(t as u64));
        }
    }

    /// One person: record, latent logit, onset, and `(universe index, date)` events.
    pub fn generate_person(&self, i: usize) -> (Person, GroundTruthEntry, Vec<(u32, NaiveDate)>) {
        let person_id = self.person_id(i);
        let mut r = rng::stream(self.cfg.seed, "person", &person_id);
        let profile = self.sample_profile(&mut r);
        let logit = self.latent_logit(&profile);
        let p_onset = self.onset_probability(&profile, logit);
        let onset = if p_onset > 0.0 && r.random::<f64>() < p_onset {
            Self::onset_span(&profile).map(|(lo, hi)| random_date(&mut r, lo, hi))
        } else {
            None
        };

        let mut events = Vec::new();
        let mut dates = Vec::new();
        for &(idx, acquired) in &profile.conditions {
            dates.clear();
            self.poisson_dates(&mut r, acquired, profile.enroll_end, self.per_code_rate, &mut dates);
            events.extend(dates.iter().map(|&d| (idx, d)));
        }
        if let Some(onset) = onset {
            let smi = self.smi_codes[r.random_range(0..self.smi_codes.len())];
            events.push((smi, onset));
            dates.clear();
            self.poisson_dates(&mut r, onset, profile.enroll_end, SMI_FOLLOWUP_RATE, &mut dates);
            events.extend(dates.iter().map(|&d| (smi, d)));
        }

        let person = Person {
            person_id: person_id.clone(),
            birth_year: profile.birth_year,
            gender: profile.gender,
            enroll_start: profile.enroll_start,
            enroll_end: profile.enroll_end,
            source: self.cfg.source,
        };
        let truth = GroundTruthEntry {
            person_id,
            latent_logit: logit,
            onset,
        };
        (person, truth, events)
    }
}

/// Generates a full population. Output depends only on `cfg`.
pub fn generate_population(cfg: &SynthConfig) -> Result<(Dataset, GroundTruth)> {
    let generator = Generator::new(cfg)?;
    let people: Vec<_> = (0..cfg.n_persons)
        .into_par_iter()
        .map(|i| generator.generate_person(i))
        .collect();

    let mut builder = EventTableBuilder::new();
    let mut interned: Vec<Option<CodeId>> = vec![None; generator.universe.codes.len()];
    let mut persons = Vec::with_capacity(people.len());
    let mut truth = Vec::with_capacity(people.len());
    for (p, (person, gt, events)) in people.into_iter().enumerate() {
        for (idx, date) in events {
            let id = *interned[idx as usize]
                .get_or_insert_with(|| builder.intern(generator.universe.codes[idx as usize].code.clone()));
            builder.push(p as u32, date, id);
        }
        persons.push(person);
        truth.push(gt);
    }
    let table = PersonTable::new(persons)?;
    Ok((
        Dataset::new(cfg.source, table, builder.finish()),
        GroundTruth { entries: truth },
    ))
}

/// Writes persons.csv, events.csv, ground_truth.csv and phecode_map.csv.
pub fn write_population(dir: impl AsRef<Path>, d: &Dataset, gt: &GroundTruth, vocab: &VocabConfig) -> Result<()> {
    let dir = dir.as_ref();
    write_dataset(dir, d)?;
    gt.write(dir.join("ground_truth.csv"))?;
    synthetic_phecode_map(vocab).write(dir.join("phecode_map.csv"))
}
