//! Exact-span entity scoring, breakdowns, approximate randomization and
//! learning curves.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Document, LabelSet};
use crate::error::{Error, Result};
use crate::heads::HeadConfig;
use crate::model::{Tagger, Vocabularies};
use crate::numerics::{derive_rng, TrainingConfig};
use crate::training::{split_dev, stable_hash, train_stage};

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Entity {
    pub doc_id: String,
    pub start: usize,
    pub end: usize,
    pub phi_type: String,
}

/// Unique `(document, start, end, type)` tuples plus each document's note
/// type.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EntitySet {
    entities: BTreeSet<Entity>,
    note_types: BTreeMap<String, String>,
}

impl EntitySet {
    pub fn from_documents(docs: &[Document]) -> Self {
        let mut set = EntitySet::default();
        for doc in docs {
            set.add_document(&doc.id, &doc.note_type);
            for a in &doc.annotations {
                set.insert(Entity { doc_id: doc.id.clone(), start: a.start, end: a.end, phi_type: a.phi_type.clone() });
            }
        }
        set
    }

    pub fn add_document(&mut self, doc_id: &str, note_type: &str) {
        self.note_types.insert(doc_id.to_string(), note_type.to_string());
    }

    pub fn insert(&mut self, e: Entity) -> bool {
        self.entities.insert(e)
    }

    pub fn len(&self) -> usize {
        self.entities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Entity> {
        self.entities.iter()
    }

    pub fn contains(&self, e: &Entity) -> bool {
        self.entities.contains(e)
    }

    pub fn note_type(&self, doc_id: &str) -> Option<&str> {
        self.note_types.get(doc_id).map(String::as_str)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl Counts {
    fn add(&mut self, other: Counts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }

    /// `2tp / (2tp + fp + fn)`, which equals the harmonic mean of precision
    /// and recall and is 0 when nothing was found or expected.
    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            0.0
        } else {
            (2 * self.tp) as f64 / denom as f64
        }
    }
}

/// Counts with derived precision, recall and F1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl From<Counts> for Prf {
    fn from(c: Counts) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(c.tp, c.tp + c.fp);
        let recall = ratio(c.tp, c.tp + c.fn_);
        let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
        Prf { tp: c.tp, fp: c.fp, fn_: c.fn_, precision, recall, f1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub overall: Prf,
    pub by_phi_type: BTreeMap<String, Prf>,
    pub by_note_type: BTreeMap<String, Prf>,
}

pub fn entity_prf(gold: &EntitySet, pred: &EntitySet) -> MetricsReport {
    let mut total = Counts::default();
    let mut by_type: BTreeMap<String, Counts> = BTreeMap::new();
    let mut by_note: BTreeMap<String, Counts> = BTreeMap::new();
    let note_of = |e: &Entity| {
        gold.note_type(&e.doc_id)
            .or_else(|| pred.note_type(&e.doc_id))
            .unwrap_or("unknown")
            .to_string()
    };
    let mut bump = |e: &Entity, c: Counts| {
        total.add(c);
        by_type.entry(e.phi_type.clone()).or_default().add(c);
        by_note.entry(note_of(e)).or_default().add(c);
    };
    for e in gold.iter() {
        if pred.contains(e) {
            bump(e, Counts { tp: 1, ..Default::default() });
        } else {
            bump(e, Counts { fn_: 1, ..Default::default() });
        }
    }
    for e in pred.iter().filter(|e| !gold.contains(e)) {
        bump(e, Counts { fp: 1, ..Default::default() });
    }
    MetricsReport {
        overall: total.into(),
        by_phi_type: by_type.into_iter().map(|(k, c)| (k, c.into())).collect(),
        by_note_type: by_note.into_iter().map(|(k, c)| (k, c.into())).collect(),
    }
}

fn check_same_documents(gold: &[Document], others: &[&[Document]]) -> Result<()> {
    let ids: BTreeSet<&str> = gold.iter().map(|d| d.id.as_str()).collect();
    if ids.len() != gold.len() {
        return Err(Error::DocumentMismatch("duplicate document ids in gold corpus".into()));
    }
    for other in others {
        let theirs: BTreeSet<&str> = other.iter().map(|d| d.id.as_str()).collect();
        if theirs != ids || theirs.len() != other.len() {
            let missing = ids.symmetric_difference(&theirs).next().copied().unwrap_or("duplicate id");
            return Err(Error::DocumentMismatch(format!("document {missing} is not in both corpora")));
        }
    }
    Ok(())
}

/// Scores predicted documents against gold documents with the same ids.
pub fn evaluate_documents(gold: &[Document], pred: &[Document]) -> Result<MetricsReport> {
    check_same_documents(gold, &[pred])?;
    Ok(entity_prf(&EntitySet::from_documents(gold), &EntitySet::from_documents(pred)))
}

impl MetricsReport {
    fn rows(&self) -> Vec<(&str, &str, &Prf)> {
        let mut rows = vec![("overall", "all", &self.overall)];
        rows.extend(self.by_phi_type.iter().map(|(k, v)| ("phi_type", k.as_str(), v)));
        rows.extend(self.by_note_type.iter().map(|(k, v)| ("note_type", k.as_str(), v)));
        rows
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["scope", "key", "tp", "fp", "fn", "precision", "recall", "f1"]).unwrap();
        for (scope, key, p) in self.rows() {
            w.write_record([
                scope.to_string(),
                key.to_string(),
                p.tp.to_string(),
                p.fp.to_string(),
                p.fn_.to_string(),
                format!("{:.6}", p.precision),
                format!("{:.6}", p.recall),
                format!("{:.6}", p.f1),
            ])
            .unwrap();
        }
        String::from_utf8(w.into_inner().unwrap()).unwrap()
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{:<10} {:<16} {:>6} {:>6} {:>6} {:>7} {:>7} {:>7}", "scope", "key", "tp", "fp", "fn", "P", "R", "F1").unwrap();
        for (scope, key, p) in self.rows() {
            writeln!(
                out,
                "{:<10} {:<16} {:>6} {:>6} {:>6} {:>7.2} {:>7.2} {:>7.2}",
                scope,
                key,
                p.tp,
                p.fp,
                p.fn_,
                100.0 * p.precision,
                100.0 * p.recall,
                100.0 * p.f1
            )
            .unwrap();
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignificanceResult {
    pub f1_a: f64,
    pub f1_b: f64,
    pub observed_delta: f64,
    pub n_shuffles: usize,
    pub p_value: f64,
    pub seed: u64,
}

fn doc_counts(gold: &Document, pred: &Document) -> Counts {
    let g: BTreeSet<(usize, usize, &str)> = gold.annotations.iter().map(|a| (a.start, a.end, a.phi_type.as_str())).collect();
    let p: BTreeSet<(usize, usize, &str)> = pred.annotations.iter().map(|a| (a.start, a.end, a.phi_type.as_str())).collect();
    let tp = g.intersection(&p).count();
    Counts { tp, fp: p.len() - tp, fn_: g.len() - tp }
}

/// Two-sided paired approximate randomization on the F1 difference.
///
/// Each shuffle swaps the two systems' outputs per document with
/// probability ½, drawing from its own stream derived from `(seed, index)`,
/// so serial and parallel runs agree exactly.
pub fn approx_randomization(
    gold: &[Document],
    preds_a: &[Document],
    preds_b: &[Document],
    n_shuffles: usize,
    seed: u64,
    parallel: bool,
) -> Result<SignificanceResult> {
    check_same_documents(gold, &[preds_a, preds_b])?;
    let by_id = |docs: &[Document]| docs.iter().map(|d| (d.id.clone(), d.clone())).collect::<HashMap<_, _>>();
    let (a_map, b_map) = (by_id(preds_a), by_id(preds_b));
    let pairs: Vec<(Counts, Counts)> = gold
        .iter()
        .map(|g| (doc_counts(g, &a_map[&g.id]), doc_counts(g, &b_map[&g.id])))
        .collect();
    let (mut sum_a, mut sum_b) = (Counts::default(), Counts::default());
    for (a, b) in &pairs {
        sum_a.add(*a);
        sum_b.add(*b);
    }
    let observed = sum_a.f1() - sum_b.f1();
    let shuffle = |i: usize| -> bool {
        let mut rng = derive_rng(seed, i as u64);
        let (mut sa, mut sb) = (Counts::default(), Counts::default());
        for (a, b) in &pairs {
            if rng.gen::<bool>() {
                sa.add(*b);
                sb.add(*a);
            } else {
                sa.add(*a);
                sb.add(*b);
            }
        }
        (sa.f1() - sb.f1()).abs() >= observed.abs()
    };
    let hits = if parallel {
        (0..n_shuffles).into_par_iter().filter(|&i| shuffle(i)).count()
    } else {
        (0..n_shuffles).filter(|&i| shuffle(i)).count()
    };
    Ok(SignificanceResult {
        f1_a: sum_a.f1(),
        f1_b: sum_b.f1(),
        observed_delta: observed,
        n_shuffles,
        p_value: (hits + 1) as f64 / (n_shuffles + 1) as f64,
        seed,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearningCurvePoint {
    pub strategy: String,
    pub size: usize,
    pub seed: u64,
    pub overall_f1: f64,
    pub by_note_type: BTreeMap<String, f64>,
}

/// Where each curve point's model starts.
#[derive(Debug, Clone)]
pub enum CurveStart<'a> {
    /// Fine-tune a copy of this model at every point.
    FineTune(&'a Tagger),
    /// Train a freshly initialized model (seeded per curve seed).
    Scratch {
        config: TrainingConfig,
        head: HeadConfig,
        labels: LabelSet,
        vocab: Vocabularies,
        domains: Vec<String>,
    },
}

impl CurveStart<'_> {
    pub fn strategy(&self) -> &'static str {
        match self {
            CurveStart::FineTune(_) => "fine_tuned",
            CurveStart::Scratch { .. } => "baseline",
        }
    }

    fn model(&self, seed: u64) -> Result<Tagger> {
        match self {
            CurveStart::FineTune(t) => Ok((*t).clone()),
            CurveStart::Scratch { config, head, labels, vocab, domains } => {
                let config = TrainingConfig { seed, ..config.clone() };
                Tagger::new(config, *head, labels.clone(), vocab.clone(), domains.clone())
            }
        }
    }
}

/// Per-note-type sample sizes for a total of `n`: an even share each, with
/// the remainder going to the first types in sorted order.
pub fn per_type_quota(note_types: &[String], n: usize) -> Vec<usize> {
    let m = note_types.len();
    (0..m).map(|i| n / m + usize::from(i < n % m)).collect()
}

/// Nested training subsets for one seed, one per increment.
pub fn nested_subsets(pool: &[Document], increments: &[usize], seed: u64) -> Result<Vec<Vec<Document>>> {
    if increments.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Evaluation("increments must be strictly increasing".into()));
    }
    let mut groups: BTreeMap<&str, Vec<&Document>> = BTreeMap::new();
    for d in pool {
        groups.entry(d.note_type.as_str()).or_default().push(d);
    }
    let types: Vec<String> = groups.keys().map(|s| s.to_string()).collect();
    for (name, docs) in groups.iter_mut() {
        docs.shuffle(&mut derive_rng(seed, 0xC0_0000 ^ stable_hash(name)));
    }
    increments
        .iter()
        .map(|&n| {
            if n > pool.len() {
                return Err(Error::Evaluation(format!("increment {n} exceeds the {} available documents", pool.len())));
            }
            let quota = per_type_quota(&types, n);
            let mut subset = Vec::with_capacity(n);
            for (ty, q) in types.iter().zip(quota) {
                let docs = &groups[ty.as_str()];
                if q > docs.len() {
                    return Err(Error::Evaluation(format!(
                        "increment {n} needs {q} {ty} notes but only {} exist",
                        docs.len()
                    )));
                }
                subset.extend(docs[..q].iter().map(|d| (*d).clone()));
            }
            Ok(subset)
        })
        .collect()
}

/// Trains (or fine-tunes) on nested per-note-type samples of `pool` and
/// scores each model on `test`.
pub fn learning_curve(
    start: &CurveStart<'_>,
    pool: &[Document],
    test: &[Document],
    increments: &[usize],
    seeds: &[u64],
) -> Result<Vec<LearningCurvePoint>> {
    let mut points = Vec::new();
    for &seed in seeds {
        let subsets = nested_subsets(pool, increments, seed)?;
        for (&size, subset) in increments.iter().zip(&subsets) {
            let mut tagger = start.model(seed)?;
            if size > 0 {
                tagger.extend_vocabulary(subset)?;
                let mut subset = subset.clone();
                for d in &mut subset {
                    d.domain_id = tagger.domain_id(&d.domain).unwrap_or(0);
                }
                let (train, dev) = split_dev(&subset, tagger.config.dev_fraction, seed)?;
                train_stage(&mut tagger, &train, &dev, 0, seed)?;
            }
            let report = evaluate_documents(test, &tagger.predict_documents(test)?)?;
            points.push(LearningCurvePoint {
                strategy: start.strategy().to_string(),
                size,
                seed,
                overall_f1: report.overall.f1,
                by_note_type: report.by_note_type.iter().map(|(k, v)| (k.clone(), v.f1)).collect(),
            });
        }
    }
    Ok(points)
}

/// Rows `strategy,size,seed,note_type,f1`, with `all` for the overall score.
pub fn curve_csv(points: &[LearningCurvePoint]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["strategy", "size", "seed", "note_type", "f1"]).unwrap();
    for p in points {
        let mut row = |key: &str, f1: f64| {
            w.write_record([p.strategy.clone(), p.size.to_string(), p.seed.to_string(), key.to_string(), format!("{f1:.6}")])
                .unwrap();
        };
        row("all", p.overall_f1);
        for (k, v) in &p.by_note_type {
            row(k, *v);
        }
    }
    String::from_utf8(w.into_inner().unwrap()).unwrap()
}

/// Mean overall F1 per `(strategy, size)` across seeds.
pub fn curve_means(points: &[LearningCurvePoint]) -> BTreeMap<(String, usize), f64> {
    let mut acc: BTreeMap<(String, usize), (f64, usize)> = BTreeMap::new();
    for p in points {
        let e = acc.entry((p.strategy.clone(), p.size)).or_default();
        e.0 += p.overall_f1;
        e.1 += 1;
    }
    acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
}
