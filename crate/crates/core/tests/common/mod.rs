//! Independent oracles and fixtures shared by the integration and
//! acceptance tests.
#![allow(dead_code)]

use std::collections::{BTreeMap, HashMap, HashSet};

use chrono::{Days, NaiveDate};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use smirisk::cohort::{twelve_months_before, Cohort, CohortExample, CohortKind, ObservationWindow};
use smirisk::datamodel::{
    parse_date, Code, CodeId, CodeSystem, Dataset, Event, EventTableBuilder, Gender, Person, PersonTable, Source,
};
use smirisk::eval::{auc, tpr_at_fpr, youden_threshold, BenchmarkRules, Method, ScoredSet};
use smirisk::features::{FeatureVector, Featurizer, Vocabulary, DEMOGRAPHIC_DIM};
use smirisk::nnet::{backward, Model, ModelParams};
use smirisk::phecode::{smi_set, PhecodeMap};
use smirisk::pipeline::{SplitAssignment, SplitPart};
use smirisk::synth::{generate_population, synthetic_phecode_map, GroundTruth, SynthConfig};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn date(s: &str) -> NaiveDate {
    parse_date(s).expect("valid date literal")
}

pub struct Population {
    pub dataset: Dataset,
    pub truth: GroundTruth,
    pub phecodes: PhecodeMap,
}

pub fn population(cfg: &SynthConfig) -> Population {
    let (dataset, truth) = generate_population(cfg).expect("valid config");
    Population {
        dataset,
        truth,
        phecodes: synthetic_phecode_map(&cfg.vocab),
    }
}

pub fn claims(n: usize, seed: u64) -> Population {
    population(&SynthConfig::new(Source::Claims, n, seed))
}

// ---------------------------------------------------------------------------
// Network gradient oracle

/// Straightforward forward pass: returns the logit and the ReLU on/off
/// pattern of both hidden layers.
pub fn reference_forward(p: &ModelParams, x: &FeatureVector) -> (f64, Vec<bool>) {
    let d = p.dim;
    let mut input = vec![0.0; d + DEMOGRAPHIC_DIM];
    if !x.code_indices.is_empty() {
        for &c in &x.code_indices {
            for k in 0..d {
                input[k] += p.embeddings[c as usize * d + k];
            }
        }
        for v in input.iter_mut().take(d) {
            *v /= x.code_indices.len() as f64;
        }
    }
    input[d..].copy_from_slice(&x.demographics);
    let mut pattern = Vec::with_capacity(p.h1 + p.h2);
    let mut a1 = vec![0.0; p.h1];
    for j in 0..p.h1 {
        let mut z = p.b1[j];
        for (i, xi) in input.iter().enumerate() {
            z += xi * p.w1[i * p.h1 + j];
        }
        pattern.push(z > 0.0);
        a1[j] = z.max(0.0);
    }
    let mut a2 = vec![0.0; p.h2];
    for j in 0..p.h2 {
        let mut z = p.b2[j];
        for (i, ai) in a1.iter().enumerate() {
            z += ai * p.w2[i * p.h2 + j];
        }
        pattern.push(z > 0.0);
        a2[j] = z.max(0.0);
    }
    let logit = p.b_out + a2.iter().zip(&p.w_out).map(|(a, w)| a * w).sum::<f64>();
    (logit, pattern)
}

pub fn reference_loss(p: &ModelParams, xs: &[FeatureVector], ys: &[bool]) -> (f64, Vec<bool>) {
    let mut total = 0.0;
    let mut patterns = Vec::new();
    for (x, &y) in xs.iter().zip(ys) {
        let (z, pat) = reference_forward(p, x);
        // log(1 + e^z) - y z, evaluated stably.
        total += z.max(0.0) + (-z.abs()).exp().ln_1p() - if y { z } else { 0.0 };
        patterns.extend(pat);
    }
    (total / xs.len() as f64, patterns)
}

fn coordinate(p: &mut ModelParams, flat: usize) -> &mut f64 {
    let mut k = flat;
    for s in p.slices_mut() {
        if k < s.len() {
            return &mut s[k];
        }
        k -= s.len();
    }
    panic!("coordinate {flat} out of range");
}

pub struct GradientReport {
    pub models: usize,
    pub coordinates_checked: usize,
    pub coordinates_skipped: usize,
    pub max_relative_error: f64,
}

/// Denominator floor for the relative error so that coordinates with
/// (near-)zero gradient compare on an absolute scale.
pub const GRADIENT_FLOOR: f64 = 1e-6;
pub const FD_STEP: f64 = 1e-5;

pub fn random_tiny_model(r: &mut ChaCha8Rng) -> (ModelParams, Vec<FeatureVector>, Vec<bool>) {
    let v = r.random_range(1..=8);
    let d = r.random_range(1..=4);
    let h1 = r.random_range(1..=4);
    let h2 = r.random_range(1..=4);
    let mut p = ModelParams::zeros(v, d, h1, h2);
    for s in p.slices_mut() {
        for x in s.iter_mut() {
            *x = r.random_range(-1.0..1.0);
        }
    }
    let batch = r.random_range(1..=4);
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for _ in 0..batch {
        let mut codes: Vec<u32> = (0..v as u32).filter(|_| r.random_bool(0.5)).collect();
        codes.sort_unstable();
        let mut demo = [0.0; DEMOGRAPHIC_DIM];
        demo[0] = r.random_range(0.0..0.9);
        demo[1 + r.random_range(0..3)] = 1.0;
        xs.push(FeatureVector {
            code_indices: codes,
            demographics: demo,
        });
        ys.push(r.random_bool(0.5));
    }
    (p, xs, ys)
}

/// Compares analytic gradients with central differences of an independent
/// loss implementation. Coordinates whose perturbation flips any ReLU are
/// skipped.
pub fn gradient_oracle(n_models: usize, seed: u64) -> GradientReport {
    let mut r = rng(seed);
    let mut report = GradientReport {
        models: n_models,
        coordinates_checked: 0,
        coordinates_skipped: 0,
        max_relative_error: 0.0,
    };
    for _ in 0..n_models {
        let (p, xs, ys) = random_tiny_model(&mut r);
        let refs: Vec<&FeatureVector> = xs.iter().collect();
        let (_, g) = backward(&p, &refs, &ys).expect("valid batch");
        let (_, base_pattern) = reference_loss(&p, &xs, &ys);
        let analytic: Vec<f64> = g.slices().iter().flat_map(|s| s.iter().copied()).collect();
        for (k, &a) in analytic.iter().enumerate() {
            let mut plus = p.clone();
            *coordinate(&mut plus, k) += FD_STEP;
            let mut minus = p.clone();
            *coordinate(&mut minus, k) -= FD_STEP;
            let (lp, pp) = reference_loss(&plus, &xs, &ys);
            let (lm, pm) = reference_loss(&minus, &xs, &ys);
            if pp != base_pattern || pm != base_pattern {
                report.coordinates_skipped += 1;
                continue;
            }
            let numeric = (lp - lm) / (2.0 * FD_STEP);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRADIENT_FLOOR);
            report.max_relative_error = report.max_relative_error.max(rel);
            report.coordinates_checked += 1;
        }
    }
    report
}

// ---------------------------------------------------------------------------
// Ranking oracles

/// Random scored set on a dyadic grid (exact arithmetic under the test
/// transforms), with heavy ties half of the time.
pub fn random_scored(r: &mut ChaCha8Rng, max_n: usize) -> (Vec<f64>, Vec<bool>) {
    let n = r.random_range(2..=max_n);
    let coarse = r.random_bool(0.5);
    let scores: Vec<f64> = (0..n)
        .map(|_| {
            if coarse {
                f64::from(r.random_range(-40..=40)) / 16.0
            } else {
                f64::from(r.random_range(-2000..=2000)) / 1024.0
            }
        })
        .collect();
    let pos_rate = r.random_range(0.05..0.95);
    let mut labels: Vec<bool> = (0..n).map(|_| r.random_bool(pos_rate)).collect();
    labels[0] = true;
    labels[1] = false;
    (scores, labels)
}

pub fn brute_force_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut num = 0.0;
    let mut pairs = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        if !labels[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] {
                continue;
            }
            pairs += 1.0;
            if si > sj {
                num += 1.0;
            } else if si == sj {
                num += 0.5;
            }
        }
    }
    num / pairs
}

pub fn auc_oracle(n_sets: usize, seed: u64) -> Result<f64, String> {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for k in 0..n_sets {
        let (scores, labels) = random_scored(&mut r, 500);
        let got = auc(&ScoredSet::new(scores.clone(), labels.clone()).unwrap()).unwrap();
        let want = brute_force_auc(&scores, &labels);
        worst = worst.max((got - want).abs());
        if (got - want).abs() > 1e-12 {
            return Err(format!("set {k}: auc {got} vs brute force {want}"));
        }
        let transforms: [(&str, fn(f64) -> f64); 3] = [
            ("affine", |x| 3.0 * x + 7.0),
            ("exp", f64::exp),
            ("cubic", |x| x * x * x + x),
        ];
        for (name, f) in transforms {
            let mapped = auc(&ScoredSet::new(scores.iter().map(|&s| f(s)).collect(), labels.clone()).unwrap()).unwrap();
            if mapped != got {
                return Err(format!("set {k}: {name} transform changed auc {got} -> {mapped}"));
            }
        }
        let flipped = auc(&ScoredSet::new(
            scores.iter().map(|s| -s).collect(),
            labels.iter().map(|l| !l).collect(),
        )
        .unwrap())
        .unwrap();
        if flipped != got {
            return Err(format!("set {k}: negate-and-swap changed auc {got} -> {flipped}"));
        }
    }
    Ok(worst)
}

/// Exhaustive scan over every observed score as threshold; predictions are
/// `score >= t`. Ties in J go to the larger threshold.
pub fn exhaustive_youden(scores: &[f64], labels: &[bool]) -> (f64, i128, f64, f64) {
    let p = labels.iter().filter(|&&l| l).count() as i128;
    let n = labels.len() as i128 - p;
    let mut best: Option<(i128, f64, f64, f64)> = None;
    for &t in scores {
        let tp = scores.iter().zip(labels).filter(|(s, l)| **l && **s >= t).count() as i128;
        let fp = scores.iter().zip(labels).filter(|(s, l)| !**l && **s >= t).count() as i128;
        let j = tp * n - fp * p;
        let better = match best {
            None => true,
            Some((bj, bt, ..)) => j > bj || (j == bj && t > bt),
        };
        if better {
            best = Some((j, t, tp as f64 / p as f64, (n - fp) as f64 / n as f64));
        }
    }
    let (j, t, sens, spec) = best.unwrap();
    (t, j, sens, spec)
}

pub fn youden_oracle(n_sets: usize, seed: u64) -> Result<(), String> {
    let mut r = rng(seed);
    for k in 0..n_sets {
        let (scores, labels) = random_scored(&mut r, 500);
        let s = ScoredSet::new(scores.clone(), labels.clone()).unwrap();
        let got = youden_threshold(&s).unwrap();
        let (t, _, sens, spec) = exhaustive_youden(&scores, &labels);
        if got.threshold != t || got.sensitivity != sens || got.specificity != spec {
            return Err(format!(
                "set {k}: got t={} sens={} spec={}, scan t={t} sens={sens} spec={spec}",
                got.threshold, got.sensitivity, got.specificity
            ));
        }
        let c = smirisk::eval::confusion_at(&s, got.threshold).unwrap();
        if c.sensitivity != got.sensitivity || c.specificity != got.specificity {
            return Err(format!("set {k}: confusion_at disagrees with reported operating point"));
        }
    }
    Ok(())
}

/// Best sensitivity of `scores` at the false-positive rate of a binary rule.
pub fn model_tpr_at_rule_fpr(scores: &ScoredSet, rule_specificity: f64) -> f64 {
    tpr_at_fpr(scores, 1.0 - rule_specificity).unwrap()
}

// ---------------------------------------------------------------------------
// Cohort invariants

/// Every violation of the all-age cohort contract, as readable strings.
pub fn cohort_violations(d: &Dataset, m: &PhecodeMap, cohort: &Cohort, split: Option<&SplitAssignment>) -> Vec<String> {
    let mut v = Vec::new();
    let phe = m.resolve(d.codes());
    let smi = smi_set();
    let has_smi = |p: u32| {
        d.person_events(p)
            .iter()
            .any(|e| phe.get(e.code).is_some_and(|x| smi.contains(x)))
    };
    let first_smi = |p: u32| {
        d.person_events(p)
            .iter()
            .find(|e| phe.get(e.code).is_some_and(|x| smi.contains(x)))
            .map(|e| e.date)
    };

    let mut groups: BTreeMap<u32, Vec<&CohortExample>> = BTreeMap::new();
    let mut seen = HashSet::new();
    for e in &cohort.examples {
        groups.entry(e.match_group).or_default().push(e);
        if !seen.insert(e.person) {
            v.push(format!("{} appears more than once", e.person_id));
        }
    }
    for (g, members) in &groups {
        let cases: Vec<_> = members.iter().filter(|e| e.label == 1).collect();
        if cases.len() != 1 {
            v.push(format!("group {g} has {} cases", cases.len()));
            continue;
        }
        let case = cases[0];
        let cp = d.person(case.person);
        match case.window.gap_days {
            Some(gap) if (14..=365).contains(&gap) => {
                if case.window.end + Days::new(u64::from(gap)) != case.index_date {
                    v.push(format!("{}: window end + gap != onset", case.person_id));
                }
            }
            other => v.push(format!("{}: gap {other:?} out of range", case.person_id)),
        }
        if first_smi(case.person) != Some(case.index_date) {
            v.push(format!("{}: index date is not the first SMI date", case.person_id));
        }
        if case.window.start != twelve_months_before(case.window.end) + Days::new(1) {
            v.push(format!("{}: window is not 12 months", case.person_id));
        }
        if !cp.covers(case.window.start, case.window.end) {
            v.push(format!("{}: window outside enrollment", case.person_id));
        }
        if members.len() > 11 {
            v.push(format!("group {g} has {} controls", members.len() - 1));
        }
        for c in members.iter().filter(|e| e.label == 0) {
            let p = d.person(c.person);
            if (c.window.start, c.window.end) != (case.window.start, case.window.end) {
                v.push(format!("{}: control window differs from case", c.person_id));
            }
            if (p.birth_year, p.gender) != (cp.birth_year, cp.gender) {
                v.push(format!("{}: control demographics differ from case", c.person_id));
            }
            if has_smi(c.person) {
                v.push(format!("{}: control has an SMI diagnosis", c.person_id));
            }
            if !p.covers(c.window.start, c.window.end) {
                v.push(format!("{}: control window outside enrollment", c.person_id));
            }
        }
    }
    if cohort.prevalence() < 1.0 / 11.0 {
        v.push(format!("prevalence {} below 1/11", cohort.prevalence()));
    }
    if let Some(split) = split {
        let mut part_of_group: HashMap<u32, SplitPart> = HashMap::new();
        for part in SplitPart::ALL {
            for e in split.examples(cohort, part) {
                if let Some(prev) = part_of_group.insert(e.match_group, part) {
                    if prev != part {
                        v.push(format!("group {} straddles {prev} and {part}", e.match_group));
                    }
                }
            }
        }
        if part_of_group.len() != groups.len() {
            v.push("some groups are not assigned to a split".into());
        }
    }
    v
}

// ---------------------------------------------------------------------------
// Temporal leakage

pub struct LeakageReport {
    pub examples: usize,
    pub mutated_events: usize,
    pub violations: Vec<String>,
}

/// Randomly deletes, shifts, recodes and inserts events dated after each
/// example's window end, then checks that features, benchmark predictions
/// and model scores are unchanged.
pub fn leakage_mutations(
    d: &Dataset,
    m: &PhecodeMap,
    examples: &[&CohortExample],
    model: &Model,
    vocab: &Vocabulary,
    n: usize,
    seed: u64,
) -> LeakageReport {
    let mut r = rng(seed);
    let featurizer = Featurizer::new(d, vocab);
    let phe = m.resolve(d.codes());
    let rules = BenchmarkRules::new(false);
    let n_codes = d.codes().len() as u32;
    let mut picked: Vec<&CohortExample> = examples.to_vec();
    picked.shuffle(&mut r);
    picked.truncate(n);
    let mut report = LeakageReport {
        examples: picked.len(),
        mutated_events: 0,
        violations: Vec::new(),
    };
    for ex in picked {
        let person = d.person(ex.person);
        let original = d.person_events(ex.person);
        let w: &ObservationWindow = &ex.window;
        let observe = |events: &[Event]| {
            let fv = featurizer.featurize_events(person, events, w);
            let score = model.predict(&fv).unwrap().to_bits();
            let b1 = rules.predict_events(Method::Bench1, events, w, &phe);
            let b2 = rules.predict_events(Method::Bench2, events, w, &phe);
            (fv, score, b1, b2)
        };
        let before = observe(original);

        let mut mutated: Vec<Event> = Vec::with_capacity(original.len() + 4);
        for e in original {
            if e.date <= w.end {
                mutated.push(*e);
                continue;
            }
            report.mutated_events += 1;
            match r.random_range(0..3) {
                0 => {}
                1 => mutated.push(Event {
                    date: e.date + Days::new(r.random_range(1..400)),
                    ..*e
                }),
                _ => mutated.push(Event {
                    code: CodeId(r.random_range(0..n_codes)),
                    ..*e
                }),
            }
        }
        for k in 0..r.random_range(1..=3) {
            let offset = if k == 0 { 1 } else { r.random_range(1..500) };
            mutated.push(Event {
                person: ex.person,
                date: w.end + Days::new(offset),
                code: CodeId(r.random_range(0..n_codes)),
            });
            report.mutated_events += 1;
        }
        mutated.sort_by_key(|e| (e.date, e.code));
        if observe(&mutated) != before {
            report.violations.push(format!("{}: output changed after post-window mutation", ex.person_id));
        }
    }
    report
}

// ---------------------------------------------------------------------------
// Benchmark fixture

pub struct BenchFixture {
    pub dataset: Dataset,
    pub phecodes: PhecodeMap,
    pub examples: Vec<CohortExample>,
    pub bench1: Vec<u8>,
    pub bench2: Vec<u8>,
    pub bench1_substance: Vec<u8>,
    pub bench2_substance: Vec<u8>,
}

/// Twelve persons sharing the window 2013-07-01..=2014-06-30, each with one
/// rule branch, and the predictions worked out by hand.
pub fn bench_fixture() -> BenchFixture {
    let in_window = "2014-01-15";
    let rows: [(&str, &[(&str, CodeSystem, &str)]); 12] = [
        // Axis I anxiety (300.1): psych range and Axis I.
        ("p01", &[(in_window, CodeSystem::Icd10, "F41.1")]),
        // Somatoform (300.8): psych range only.
        ("p02", &[(in_window, CodeSystem::Icd10, "F45.1")]),
        // Only an SMI code: excluded from both triggers.
        ("p03", &[(in_window, CodeSystem::Icd10, "F20.0")]),
        // Alcohol (317): Axis I, outside 295..=307.
        ("p04", &[(in_window, CodeSystem::Icd10, "F10.20")]),
        // Opioid (316): Axis I, outside 295..=307.
        ("p05", &[(in_window, CodeSystem::Icd10, "F11.20")]),
        // Tobacco (318): neither.
        ("p06", &[(in_window, CodeSystem::Icd10, "F17.210")]),
        // Axis I code the day after the window.
        ("p07", &[("2014-07-01", CodeSystem::Icd10, "F41.1")]),
        // Axis I code the day before the window.
        ("p08", &[("2013-06-30", CodeSystem::Icd10, "F41.1")]),
        // Axis I code on the first window day (ICD-9).
        ("p09", &[("2013-07-01", CodeSystem::Icd9, "300.00")]),
        // Axis I code on the last window day.
        ("p10", &[("2014-06-30", CodeSystem::Icd10, "F90.0")]),
        // Non-psychiatric diagnosis and a medication.
        ("p11", &[(in_window, CodeSystem::Icd10, "I10"), (in_window, CodeSystem::Ndc, "00093-7214-01")]),
        // Alcohol plus a non-Axis-I psych code (306).
        ("p12", &[(in_window, CodeSystem::Icd10, "F10.20"), (in_window, CodeSystem::Icd10, "F48.9")]),
    ];
    let persons: Vec<Person> = rows
        .iter()
        .map(|(id, _)| Person {
            person_id: id.to_string(),
            birth_year: 1980,
            gender: Gender::F,
            enroll_start: date("2010-01-01"),
            enroll_end: date("2016-12-31"),
            source: Source::Claims,
        })
        .collect();
    let table = PersonTable::new(persons).unwrap();
    let mut b = EventTableBuilder::new();
    for (id, events) in &rows {
        let p = table.index_of(id).unwrap();
        for (day, system, code) in events.iter() {
            let c = b.intern(Code::new(*system, *code));
            b.push(p, date(day), c);
        }
    }
    let dataset = Dataset::new(Source::Claims, table, b.finish());
    let window = ObservationWindow {
        start: date("2013-07-01"),
        end: date("2014-06-30"),
        gap_days: None,
    };
    let examples = rows
        .iter()
        .enumerate()
        .map(|(g, (id, _))| CohortExample {
            person: dataset.persons().index_of(id).unwrap(),
            person_id: id.to_string(),
            label: 0,
            window,
            match_group: g as u32,
            cohort_kind: CohortKind::Substance,
            index_date: window.end,
        })
        .collect();
    BenchFixture {
        dataset,
        phecodes: smirisk::phecode::curated_map(),
        examples,
        bench1: vec![1, 1, 0, 0, 0, 0, 0, 0, 1, 0, 0, 1],
        bench2: vec![1, 0, 0, 1, 1, 0, 0, 0, 1, 1, 0, 1],
        bench1_substance: vec![1, 1, 0, 0, 0, 0, 0, 0, 1, 0, 0, 1],
        bench2_substance: vec![1, 0, 0, 0, 0, 0, 0, 0, 1, 1, 0, 0],
    }
}

pub fn bench_predictions(f: &BenchFixture, method: Method, exclude_substance: bool) -> Vec<u8> {
    let rules = BenchmarkRules::new(exclude_substance);
    let phe = f.phecodes.resolve(f.dataset.codes());
    f.examples
        .iter()
        .map(|ex| rules.predict(method, ex, &f.dataset, &phe))
        .collect()
}

/// Wall-clock helper.
pub fn timed<T>(f: impl FnOnce() -> T) -> (T, std::time::Duration) {
    let t = std::time::Instant::now();
    let out = f();
    (out, t.elapsed())
}
