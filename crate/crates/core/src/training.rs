//! Training plans and the sequential, fine-tuning, concurrent and
//! in-domain strategies.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::{load_corpus, Document, LabelSet};
use crate::error::{Error, Result};
use crate::evaluation::evaluate_documents;
use crate::heads::HeadConfig;
use crate::model::{Example, StageRecord, Tagger, Vocabularies};
use crate::network::load_word_vectors;
use crate::numerics::{derive_rng, sgd_step, TrainingConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Sequential,
    FineTuning,
    Concurrent,
    InDomain,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Sequential => "sequential",
            Strategy::FineTuning => "fine_tuning",
            Strategy::Concurrent => "concurrent",
            Strategy::InDomain => "in_domain",
        })
    }
}

/// A named set of documents.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub name: String,
    pub documents: Vec<Document>,
}

#[derive(Debug, Clone)]
pub struct Stage {
    pub corpora: Vec<Corpus>,
    pub in_domain: bool,
}

#[derive(Debug, Clone)]
pub struct TrainingPlan {
    pub strategy: Strategy,
    pub stages: Vec<Stage>,
    pub head: HeadConfig,
    pub config: TrainingConfig,
    pub labels: LabelSet,
    pub word_vectors: Option<PathBuf>,
}

impl TrainingPlan {
    pub fn seed(&self) -> u64 {
        self.config.seed
    }

    /// Domain names in first-appearance order across all stages.
    pub fn domains(&self) -> Vec<String> {
        let mut seen = Vec::<String>::new();
        for doc in self.documents() {
            if !seen.contains(&doc.domain) {
                seen.push(doc.domain.clone());
            }
        }
        seen
    }

    pub fn documents(&self) -> impl Iterator<Item = &Document> {
        self.stages.iter().flat_map(|s| s.corpora.iter()).flat_map(|c| c.documents.iter())
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        self.head.validate()?;
        let bad = |m: String| Err(Error::InvalidPlan(m));
        if self.stages.is_empty() {
            return bad("plan has no stages".into());
        }
        if let Some(i) = self.stages.iter().position(|s| s.corpora.is_empty()) {
            return bad(format!("stage {} has no corpora", i + 1));
        }
        let single_corpus = self.stages.iter().all(|s| s.corpora.len() == 1);
        match self.strategy {
            Strategy::Sequential | Strategy::FineTuning => {
                if self.stages.len() < 2 {
                    return bad(format!("{} needs at least two stages", self.strategy));
                }
                if !single_corpus {
                    return bad(format!("{} stages take exactly one corpus each", self.strategy));
                }
            }
            Strategy::Concurrent => {
                if self.stages.len() != 1 || self.stages[0].corpora.len() < 2 {
                    return bad("concurrent takes one stage with at least two corpora".into());
                }
            }
            Strategy::InDomain => {
                if self.stages.len() != 1 || !single_corpus {
                    return bad("in_domain takes one stage with one corpus".into());
                }
            }
        }
        let flagged: Vec<usize> = self.stages.iter().enumerate().filter(|(_, s)| s.in_domain).map(|(i, _)| i).collect();
        if self.strategy == Strategy::FineTuning && flagged != [self.stages.len() - 1] {
            return bad("fine_tuning must flag exactly its final stage as in-domain".into());
        }
        if self.strategy != Strategy::FineTuning && self.strategy != Strategy::InDomain && !flagged.is_empty() {
            return bad(format!("{} stages cannot be flagged in-domain", self.strategy));
        }
        for stage in &self.stages {
            for c in &stage.corpora {
                if c.documents.is_empty() {
                    return Err(Error::EmptyData(format!("corpus {} has no documents", c.name)));
                }
            }
        }
        let n_domains = self.domains().len();
        if self.head.needs_domains() && n_domains < 2 {
            return bad(format!(
                "{} head requires at least two domains in the training data, found {n_domains}",
                self.head.name()
            ));
        }
        Ok(())
    }
}

/// Word and character vocabularies over every document of every stage.
pub fn build_vocab(plan: &TrainingPlan) -> Result<Vocabularies> {
    let v = Vocabularies::build(plan.documents());
    if v.words.is_empty() {
        return Err(Error::EmptyData("training corpora contain no tokens".into()));
    }
    Ok(v)
}

/// FNV-1a, used to derive stable RNG streams from names.
pub fn stable_hash(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Seeded `(train, dev)` split holding out `fraction` of the documents
/// (at least one).
pub fn split_dev(docs: &[Document], fraction: f64, seed: u64) -> Result<(Vec<Document>, Vec<Document>)> {
    if docs.len() < 2 {
        return Err(Error::EmptyData(format!(
            "dev split needs at least two documents, corpus has {}",
            docs.len()
        )));
    }
    let n_dev = ((docs.len() as f64 * fraction).round() as usize).clamp(1, docs.len() - 1);
    let key = docs.iter().map(|d| d.id.as_str()).collect::<Vec<_>>().join("\u{1f}");
    let mut order: Vec<usize> = (0..docs.len()).collect();
    order.shuffle(&mut derive_rng(seed, 0xDE_0000 ^ stable_hash(&key)));
    let dev_ids: BTreeSet<usize> = order[..n_dev].iter().copied().collect();
    let mut train = Vec::with_capacity(docs.len() - n_dev);
    let mut dev = Vec::with_capacity(n_dev);
    for (i, d) in docs.iter().enumerate() {
        if dev_ids.contains(&i) {
            dev.push(d.clone());
        } else {
            train.push(d.clone());
        }
    }
    Ok((train, dev))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub stage: usize,
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_f1: f64,
    pub since_improvement: usize,
    pub wall_secs: f64,
}

impl EpochLog {
    pub const HEADER: &'static str = "stage\tepoch\ttrain_loss\tdev_f1\tpatience\twall_time_s";

    pub fn line(&self) -> String {
        format!(
            "{}\t{}\t{:.6}\t{:.6}\t{}\t{:.3}",
            self.stage, self.epoch, self.train_loss, self.dev_f1, self.since_improvement, self.wall_secs
        )
    }
}

#[derive(Debug, Clone)]
pub struct StageOutcome {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_dev_f1: f64,
}

/// Runs one stage with dev-set early stopping and leaves `tagger` at its
/// best dev epoch.
pub fn train_stage(tagger: &mut Tagger, train: &[Document], dev: &[Document], stage: usize, seed: u64) -> Result<StageOutcome> {
    if dev.is_empty() {
        return Err(Error::EmptyData("dev split is empty".into()));
    }
    train_stage_with(tagger, train, stage, seed, &mut |t: &Tagger| {
        Ok(evaluate_documents(dev, &t.predict_documents(dev)?)?.overall.f1)
    })
}

/// [`train_stage`] with a caller-supplied dev score.
pub fn train_stage_with(
    tagger: &mut Tagger,
    train: &[Document],
    stage: usize,
    seed: u64,
    dev_score: &mut dyn FnMut(&Tagger) -> Result<f64>,
) -> Result<StageOutcome> {
    let mut examples: Vec<Example> = Vec::new();
    for doc in train {
        examples.extend(tagger.examples(doc)?);
    }
    if examples.is_empty() {
        return Err(Error::EmptyData(format!("stage {stage} has no training sentences")));
    }
    let config = tagger.config.clone();
    let mut order_rng = derive_rng(seed, 0x5A_0000 + stage as u64);
    let mut dropout_rng = derive_rng(seed, 0xD0_0000 + stage as u64);
    let started = Instant::now();
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut best = (f64::NEG_INFINITY, 0usize, tagger.store.snapshot());
    let mut since = 0;
    let mut epochs = Vec::new();
    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut order_rng);
        let mut total = 0.0;
        for &i in &order {
            let rng = (config.dropout > 0.0).then_some(&mut dropout_rng);
            total += tagger.loss_and_grad(&examples[i], rng)?;
            tagger.store.clip_grad_norm(config.grad_clip);
            sgd_step(&mut tagger.store, config.lr)?;
        }
        let f1 = dev_score(tagger)?;
        if f1 > best.0 {
            best = (f1, epoch, tagger.store.snapshot());
            since = 0;
        } else {
            since += 1;
        }
        let entry = EpochLog {
            stage,
            epoch,
            train_loss: total / examples.len() as f64,
            dev_f1: f1,
            since_improvement: since,
            wall_secs: started.elapsed().as_secs_f64(),
        };
        log::info!("{}", entry.line());
        epochs.push(entry);
        if since > config.patience {
            break;
        }
    }
    tagger.store.restore(&best.2);
    Ok(StageOutcome { epochs, best_epoch: best.1, best_dev_f1: best.0 })
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub tagger: Tagger,
    pub log: Vec<EpochLog>,
}

/// Assigns plan-wide domain ids to every document.
fn with_domain_ids(docs: &[Document], domains: &[String]) -> Vec<Document> {
    docs.iter()
        .map(|d| Document { domain_id: domains.iter().position(|x| *x == d.domain).unwrap_or(0), ..d.clone() })
        .collect()
}

pub fn new_tagger(plan: &TrainingPlan) -> Result<Tagger> {
    plan.validate()?;
    let vocab = build_vocab(plan)?;
    let mut tagger = Tagger::new(plan.config.clone(), plan.head, plan.labels.clone(), vocab, plan.domains())?;
    if let Some(path) = &plan.word_vectors {
        let vectors = load_word_vectors(path, plan.config.word_emb_dim)?;
        let hits = tagger.arch.network.load_pretrained(&mut tagger.store, &tagger.vocab.words, &vectors);
        log::info!("loaded {hits} pretrained word vectors");
    }
    Ok(tagger)
}

/// Executes a validated plan from a fresh model.
pub fn run_plan(plan: &TrainingPlan) -> Result<RunOutput> {
    let tagger = new_tagger(plan)?;
    continue_plan(tagger, plan)
}

/// Executes `plan`'s stages starting from an existing model.
pub fn continue_plan(mut tagger: Tagger, plan: &TrainingPlan) -> Result<RunOutput> {
    plan.validate()?;
    tagger.extend_vocabulary(plan.documents())?;
    let seed = plan.seed();
    let mut log = Vec::new();
    for (index, stage) in plan.stages.iter().enumerate() {
        let (mut train, mut dev) = (Vec::new(), Vec::new());
        for corpus in &stage.corpora {
            let docs = with_domain_ids(&corpus.documents, &tagger.domains);
            let (t, d) = split_dev(&docs, plan.config.dev_fraction, seed)?;
            train.extend(t);
            dev.extend(d);
        }
        if stage.corpora.len() > 1 {
            train.shuffle(&mut derive_rng(seed, 0x1E_0000 + index as u64));
        }
        let outcome = train_stage(&mut tagger, &train, &dev, index + 1, seed)?;
        tagger.history.push(StageRecord {
            stage: index + 1,
            strategy: plan.strategy.to_string(),
            corpora: stage.corpora.iter().map(|c| c.name.clone()).collect(),
            in_domain: stage.in_domain,
            epochs: outcome.epochs.len(),
            best_epoch: outcome.best_epoch,
            best_dev_f1: outcome.best_dev_f1,
        });
        log.extend(outcome.epochs);
    }
    Ok(RunOutput { tagger, log })
}

/// Every ordering of a sequential plan's stages. Fine-tuning plans keep
/// their in-domain stage last.
pub fn sequential_orders(plan: &TrainingPlan) -> Vec<TrainingPlan> {
    let fixed_last = plan.strategy == Strategy::FineTuning;
    let movable = if fixed_last { plan.stages.len() - 1 } else { plan.stages.len() };
    if !matches!(plan.strategy, Strategy::Sequential | Strategy::FineTuning) || movable < 2 {
        return vec![plan.clone()];
    }
    let mut out = Vec::new();
    for perm in permutations(movable) {
        let mut stages: Vec<Stage> = perm.iter().map(|&i| plan.stages[i].clone()).collect();
        if fixed_last {
            stages.push(plan.stages[movable].clone());
        }
        out.push(TrainingPlan { stages, ..plan.clone() });
    }
    out
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out.sort();
    out
}

/// On-disk plan. Corpus paths are relative to the plan file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanFile {
    pub strategy: Strategy,
    #[serde(default)]
    pub head: HeadConfig,
    #[serde(default)]
    pub config: TrainingConfig,
    pub seed: Option<u64>,
    pub word_vectors: Option<PathBuf>,
    pub labels: Option<Vec<String>>,
    pub stages: Vec<StageFile>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageFile {
    pub corpora: Vec<PathBuf>,
    #[serde(default)]
    pub in_domain: bool,
}

impl PlanFile {
    pub fn from_toml(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut value: toml::Value = toml::from_str(text).map_err(|e| Error::InvalidPlan(e.to_string()))?;
        apply_overrides(&mut value, overrides)?;
        value.try_into().map_err(|e: toml::de::Error| Error::InvalidPlan(e.to_string()))
    }

    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, overrides)
    }

    /// Loads every corpus and builds the plan. A fine-tuning plan with no
    /// flagged stage has its final stage flagged.
    pub fn resolve(&self, base: &Path) -> Result<TrainingPlan> {
        let mut stages = Vec::with_capacity(self.stages.len());
        for s in &self.stages {
            let mut corpora = Vec::with_capacity(s.corpora.len());
            for p in &s.corpora {
                let path = base.join(p);
                corpora.push(Corpus { name: p.display().to_string(), documents: load_corpus(&path)? });
            }
            stages.push(Stage { corpora, in_domain: s.in_domain });
        }
        if self.strategy == Strategy::FineTuning && !stages.iter().any(|s| s.in_domain) {
            if let Some(last) = stages.last_mut() {
                last.in_domain = true;
            }
        }
        let mut config = self.config.clone();
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        Ok(TrainingPlan {
            strategy: self.strategy,
            stages,
            head: self.head,
            config,
            labels: match &self.labels {
                Some(l) => LabelSet::new(l.iter().cloned()),
                None => LabelSet::harmonized(),
            },
            word_vectors: self.word_vectors.as_ref().map(|p| base.join(p)),
        })
    }
}

/// Applies `a.b.c=value` overrides to a TOML document. Values parse as TOML
/// literals, falling back to plain strings. Unknown keys surface when the
/// document is deserialized into a strict type.
pub fn apply_overrides(value: &mut toml::Value, overrides: &[(String, String)]) -> Result<()> {
    for (key, raw) in overrides {
        let parsed = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.clone()));
        let parts: Vec<&str> = key.split('.').collect();
        if parts.iter().any(|p| p.is_empty()) {
            return Err(Error::InvalidConfig(format!("malformed override key {key:?}")));
        }
        let mut cur = &mut *value;
        for part in &parts[..parts.len() - 1] {
            let table = cur
                .as_table_mut()
                .ok_or_else(|| Error::InvalidConfig(format!("override {key}: {part} is not a table")))?;
            cur = table.entry(part.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        }
        let table = cur
            .as_table_mut()
            .ok_or_else(|| Error::InvalidConfig(format!("override {key}: parent is not a table")))?;
        table.insert(parts[parts.len() - 1].to_string(), parsed);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc(id: &str, domain: &str, text: &str) -> Document {
        let mut d = Document {
            id: id.into(),
            note_type: "n".into(),
            domain: domain.into(),
            domain_id: 0,
            text: text.into(),
            annotations: vec![],
        };
        d.validate().unwrap();
        d
    }

    fn corpus(name: &str, domain: &str, n: usize) -> Corpus {
        Corpus { name: name.into(), documents: (0..n).map(|i| doc(&format!("{name}{i}"), domain, "a b")).collect() }
    }

    fn plan(strategy: Strategy, stages: Vec<Vec<Corpus>>) -> TrainingPlan {
        TrainingPlan {
            strategy,
            stages: stages.into_iter().map(|corpora| Stage { corpora, in_domain: false }).collect(),
            head: HeadConfig::Plain,
            config: TrainingConfig::default(),
            labels: LabelSet::harmonized(),
            word_vectors: None,
        }
    }

    #[test]
    fn plan_shape_rules() {
        assert!(plan(Strategy::Sequential, vec![vec![corpus("a", "A", 3)]]).validate().is_err());
        plan(Strategy::Sequential, vec![vec![corpus("a", "A", 3)], vec![corpus("b", "B", 3)]]).validate().unwrap();
        assert!(plan(Strategy::Concurrent, vec![vec![corpus("a", "A", 3)]]).validate().is_err());
        plan(Strategy::Concurrent, vec![vec![corpus("a", "A", 3), corpus("b", "B", 3)]]).validate().unwrap();
        plan(Strategy::InDomain, vec![vec![corpus("a", "A", 3)]]).validate().unwrap();

        let mut ft = plan(Strategy::FineTuning, vec![vec![corpus("a", "A", 3)], vec![corpus("b", "B", 3)]]);
        assert!(ft.validate().is_err());
        ft.stages[1].in_domain = true;
        ft.validate().unwrap();
    }

    #[test]
    fn domain_heads_need_two_domains() {
        let mut p = plan(Strategy::InDomain, vec![vec![corpus("a", "A", 3)]]);
        p.head = HeadConfig::csd();
        let err = p.validate().unwrap_err().to_string();
        assert!(err.contains("at least two domains"), "{err}");
        p.head = HeadConfig::jdl();
        assert!(p.validate().is_err());
    }

    #[test]
    fn vocab_union_is_order_independent() {
        let a = Corpus { name: "a".into(), documents: vec![doc("a0", "A", "a b"), doc("a1", "A", "b c")] };
        let b = Corpus { name: "b".into(), documents: vec![doc("b0", "B", "c d E")] };
        let ab = build_vocab(&plan(Strategy::Sequential, vec![vec![a.clone()], vec![b.clone()]])).unwrap();
        let ba = build_vocab(&plan(Strategy::Sequential, vec![vec![b], vec![a.clone()]])).unwrap();
        assert_eq!(ab.words.items()[2..], ["a", "b", "c", "d", "e"]);
        let set = |v: &Vocabularies| v.words.items().iter().cloned().collect::<BTreeSet<_>>();
        assert_eq!(set(&ab), set(&ba));
        assert_eq!(ab.words.id("zebra"), crate::network::OOV);
        let one = build_vocab(&plan(Strategy::InDomain, vec![vec![Corpus { name: "x".into(), documents: vec![doc("x", "A", "a b"), doc("y", "A", "b c")] }]])).unwrap();
        assert_eq!(one.words.items(), ["<pad>", "<oov>", "a", "b", "c"]);
    }

    #[test]
    fn dev_split_sizes_and_determinism() {
        let docs = corpus("a", "A", 25).documents;
        let (t, d) = split_dev(&docs, 0.1, 4).unwrap();
        assert_eq!((t.len(), d.len()), (22, 3));
        let (t2, d2) = split_dev(&docs, 0.1, 4).unwrap();
        assert_eq!(t, t2);
        assert_eq!(d, d2);
        let (_, d) = split_dev(&docs[..3], 0.1, 4).unwrap();
        assert_eq!(d.len(), 1);
        assert!(split_dev(&docs[..1], 0.1, 4).is_err());
    }

    #[test]
    fn orders_enumerated() {
        let p = plan(Strategy::Sequential, vec![vec![corpus("a", "A", 2)], vec![corpus("b", "B", 2)], vec![corpus("c", "C", 2)]]);
        let orders = sequential_orders(&p);
        assert_eq!(orders.len(), 6);
        let mut ft = p.clone();
        ft.strategy = Strategy::FineTuning;
        ft.stages[2].in_domain = true;
        let orders = sequential_orders(&ft);
        assert_eq!(orders.len(), 2);
        assert!(orders.iter().all(|o| o.stages[2].corpora[0].name == "c"));
    }

    #[test]
    fn overrides_and_unknown_keys() {
        let text = "strategy = \"in_domain\"\n[[stages]]\ncorpora = [\"a.jsonl\"]\n";
        let over = vec![("config.max_epochs".to_string(), "7".to_string()), ("head.kind".to_string(), "jdl".to_string())];
        let p = PlanFile::from_toml(text, &over).unwrap();
        assert_eq!(p.config.max_epochs, 7);
        assert_eq!(p.head, HeadConfig::jdl());
        let err = PlanFile::from_toml(text, &[("config.bogus".into(), "1".into())]).unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
        assert!(PlanFile::from_toml(text, &[("nonsense".into(), "1".into())]).is_err());
    }
}
