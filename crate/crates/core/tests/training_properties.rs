use deid_core::corpus::{Annotation, Document, LabelSet};
use deid_core::heads::HeadConfig;
use deid_core::numerics::{finite_diff_check, sgd_step, ParameterStore, TrainingConfig};
use deid_core::training::{
    new_tagger, run_plan, split_dev, train_stage, train_stage_with, Corpus, Stage, Strategy, TrainingPlan,
};
use proptest::prelude::*;

fn corpus(name: &str, n: usize, annotated: bool) -> Corpus {
    let texts = [
        ("Jane Doe was admitted on 03/04.", vec![Annotation::new(0, 8, "Patient"), Annotation::new(25, 30, "Date")]),
        ("Seen by Dr. Wu at Mercy.", vec![Annotation::new(12, 14, "Doctor"), Annotation::new(18, 23, "Hospital")]),
        ("No acute distress today.", vec![]),
    ];
    let documents = (0..n)
        .map(|i| {
            let (text, anns) = &texts[i % texts.len()];
            let mut d = Document {
                id: format!("{name}-{i}"),
                note_type: "progress".into(),
                domain: name.into(),
                domain_id: 0,
                text: text.to_string(),
                annotations: if annotated { anns.clone() } else { vec![] },
            };
            d.validate().unwrap();
            d
        })
        .collect();
    Corpus { name: name.into(), documents }
}

fn config() -> TrainingConfig {
    TrainingConfig { char_emb_dim: 3, char_hidden: 3, word_emb_dim: 5, token_hidden: 4, max_epochs: 3, lr: 0.05, ..TrainingConfig::default() }
}

fn plan(strategy: Strategy, stages: Vec<Vec<Corpus>>, head: HeadConfig) -> TrainingPlan {
    let last = stages.len() - 1;
    TrainingPlan {
        strategy,
        stages: stages
            .into_iter()
            .enumerate()
            .map(|(i, corpora)| Stage { corpora, in_domain: strategy == Strategy::FineTuning && i == last })
            .collect(),
        head,
        config: config(),
        labels: LabelSet::harmonized(),
        word_vectors: None,
    }
}

#[test]
fn equal_seeds_give_bit_identical_models() {
    for head in [HeadConfig::Plain, HeadConfig::csd(), HeadConfig::jdl()] {
        let p = plan(Strategy::Concurrent, vec![vec![corpus("a", 6, true), corpus("b", 6, true)]], head);
        let (x, y) = (run_plan(&p).unwrap(), run_plan(&p).unwrap());
        assert_eq!(x.tagger.store, y.tagger.store, "{}", head.name());
        assert_eq!(x.tagger.history, y.tagger.history);

        let mut other = p.clone();
        other.config.seed += 1;
        assert_ne!(run_plan(&other).unwrap().tagger.store, x.tagger.store);
    }
}

#[test]
fn in_domain_plan_is_one_stage_on_the_split() {
    let p = plan(Strategy::InDomain, vec![vec![corpus("a", 8, true)]], HeadConfig::Plain);
    let out = run_plan(&p).unwrap();
    let mut manual = new_tagger(&p).unwrap();
    let (train, dev) = split_dev(&p.stages[0].corpora[0].documents, 0.1, 42).unwrap();
    assert_eq!((train.len(), dev.len()), (7, 1));
    let outcome = train_stage(&mut manual, &train, &dev, 1, 42).unwrap();
    assert_eq!(manual.store, out.tagger.store);
    assert_eq!(outcome.epochs.len(), out.log.len());
    assert_eq!(out.tagger.history.len(), 1);
}

#[test]
fn early_stopping_restores_the_best_epoch() {
    let p = plan(Strategy::InDomain, vec![vec![corpus("a", 6, true)]], HeadConfig::Plain);
    let mut tagger = new_tagger(&p).unwrap();
    tagger.config.patience = 1;
    tagger.config.max_epochs = 10;
    let docs = p.stages[0].corpora[0].documents.clone();
    let scores = [0.9, 0.2, 0.1, 0.05];
    let mut calls = 0;
    let mut after_first = None;
    let outcome = train_stage_with(&mut tagger, &docs, 1, 7, &mut |t| {
        if calls == 0 {
            after_first = Some(t.store.clone());
        }
        calls += 1;
        Ok(scores[calls - 1])
    })
    .unwrap();
    assert_eq!(outcome.best_epoch, 1);
    assert_eq!(outcome.best_dev_f1, 0.9);
    assert_eq!(outcome.epochs.len(), 3);
    assert_eq!(outcome.epochs.iter().map(|e| e.since_improvement).collect::<Vec<_>>(), vec![0, 1, 2]);
    let best = after_first.unwrap();
    for (a, b) in tagger.store.iter().zip(best.iter()) {
        assert_eq!(a.values, b.values, "{}", a.name);
    }
}

#[test]
fn later_stages_do_not_affect_earlier_ones() {
    let b = corpus("b", 6, true);
    let b_unlabeled = corpus("b", 6, false);
    let one = run_plan(&plan(Strategy::Sequential, vec![vec![corpus("a", 6, true)], vec![b]], HeadConfig::Plain)).unwrap();
    let two = run_plan(&plan(Strategy::Sequential, vec![vec![corpus("a", 6, true)], vec![b_unlabeled]], HeadConfig::Plain)).unwrap();
    assert_eq!(one.tagger.history[0], two.tagger.history[0]);
    let stage_one = |log: &[deid_core::training::EpochLog]| {
        log.iter().filter(|e| e.stage == 1).map(|e| (e.epoch, e.train_loss, e.dev_f1)).collect::<Vec<_>>()
    };
    assert_eq!(stage_one(&one.log), stage_one(&two.log));
    assert_ne!(one.tagger.store, two.tagger.store);
}

#[test]
fn fine_tuning_records_each_stage() {
    let out = run_plan(&plan(Strategy::FineTuning, vec![vec![corpus("a", 6, true)], vec![corpus("b", 6, true)]], HeadConfig::Plain)).unwrap();
    let stages: Vec<(usize, bool)> = out.tagger.history.iter().map(|r| (r.stage, r.in_domain)).collect();
    assert_eq!(stages, vec![(1, false), (2, true)]);
    assert!(out.log.iter().any(|e| e.stage == 2));
}

#[test]
fn domain_heads_train_over_the_declared_domains() {
    for head in [HeadConfig::csd(), HeadConfig::jdl()] {
        let p = plan(Strategy::Concurrent, vec![vec![corpus("a", 4, true), corpus("b", 4, true)]], head);
        let out = run_plan(&p).unwrap();
        assert_eq!(out.tagger.domains, vec!["a", "b"]);
        let single = plan(Strategy::InDomain, vec![vec![corpus("a", 4, true)]], head);
        assert!(run_plan(&single).unwrap_err().to_string().contains("at least two domains"));
    }
}

fn two_param_store(reverse: bool, a: &[f64], b: &[f64]) -> ParameterStore {
    let mut s = ParameterStore::new(0);
    let items = [("a", a), ("b", b)];
    let order: Vec<_> = if reverse { items.iter().rev().collect() } else { items.iter().collect() };
    for (name, v) in order {
        s.add(name, &[v.len()], v.to_vec()).unwrap();
    }
    s
}

/// `Σ a_i² · b_0 + sin(b_1)` with a deliberate error in the gradient of `a`.
fn loss(s: &mut ParameterStore) -> f64 {
    let (ia, ib) = (s.id("a").unwrap(), s.id("b").unwrap());
    let a = s.get(ia).values.clone();
    let b = s.get(ib).values.clone();
    let sq: f64 = a.iter().map(|x| x * x).sum();
    for (g, x) in s.get_mut(ia).grad.iter_mut().zip(&a) {
        *g += 2.0 * x * b[0] * 1.001;
    }
    s.get_mut(ib).grad[0] += sq;
    s.get_mut(ib).grad[1] += b[1].cos();
    sq * b[0] + b[1].sin()
}

proptest! {
    #[test]
    fn sgd_with_zero_rate_keeps_values(values in prop::collection::vec(-10.0..10.0f64, 1..20), grads in prop::collection::vec(-10.0..10.0f64, 20)) {
        let mut s = ParameterStore::new(0);
        let id = s.add("w", &[values.len()], values.clone()).unwrap();
        s.get_mut(id).grad.copy_from_slice(&grads[..values.len()]);
        sgd_step(&mut s, 0.0).unwrap();
        prop_assert_eq!(&s.get(id).values, &values);
        prop_assert!(s.get(id).grad.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn finite_difference_check_ignores_parameter_order(
        a in prop::collection::vec(0.5..2.0f64, 1..5),
        b in prop::collection::vec(0.5..2.0f64, 2..3),
    ) {
        let x = finite_diff_check(&mut two_param_store(false, &a, &b), 1e-6, loss);
        let y = finite_diff_check(&mut two_param_store(true, &a, &b), 1e-6, loss);
        prop_assert!((x - y).abs() < 1e-9, "{x} vs {y}");
        prop_assert!(x > 1e-4);
    }
}
