use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{decode_bio, encode_bio, Annotation, Document, LabelSet, Sentence, TagId};
use crate::error::Result;
use crate::heads::{Architecture, HeadConfig};
use crate::network::{featurize, word_key, DropoutRng, Network, TokenFeatures, Vocabulary};
use crate::numerics::{derive_rng, ParameterStore, TrainingConfig};

/// Summary of one completed training stage, embedded in checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: usize,
    pub strategy: String,
    pub corpora: Vec<String>,
    pub in_domain: bool,
    pub epochs: usize,
    pub best_epoch: usize,
    pub best_dev_f1: f64,
}

/// Word and character vocabularies.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Vocabularies {
    pub words: Vocabulary,
    pub chars: Vocabulary,
}

impl Vocabularies {
    /// First-occurrence vocabularies over every token of `docs`.
    pub fn build<'a>(docs: impl IntoIterator<Item = &'a Document>) -> Self {
        let mut v = Vocabularies::default();
        for doc in docs {
            v.extend(doc);
        }
        v
    }

    pub fn extend(&mut self, doc: &Document) {
        for sentence in doc.plain_sentences() {
            for token in &sentence.tokens {
                self.words.insert(&word_key(&token.surface));
                for c in token.surface.chars() {
                    self.chars.insert(c.encode_utf8(&mut [0; 4]));
                }
            }
        }
    }
}

/// A complete tagger: parameters, layout, vocabularies and metadata.
#[derive(Debug, Clone)]
pub struct Tagger {
    pub store: ParameterStore,
    pub arch: Architecture,
    pub config: TrainingConfig,
    pub head: HeadConfig,
    pub labels: LabelSet,
    pub vocab: Vocabularies,
    /// Domain names indexed by domain id.
    pub domains: Vec<String>,
    pub history: Vec<StageRecord>,
}

/// One training sentence in model-ready form.
#[derive(Debug, Clone)]
pub struct Example {
    pub tokens: Vec<TokenFeatures>,
    pub tags: Vec<TagId>,
    pub domain_id: usize,
}

impl Tagger {
    pub fn new(
        config: TrainingConfig,
        head: HeadConfig,
        labels: LabelSet,
        vocab: Vocabularies,
        domains: Vec<String>,
    ) -> Result<Self> {
        config.validate()?;
        let mut store = ParameterStore::new(config.seed);
        let mut rng = derive_rng(config.seed, 0x1417);
        let network = Network::init(&mut store, &config, &labels, vocab.words.len(), vocab.chars.len(), &mut rng)?;
        let arch = Architecture::init(&mut store, network, &head, domains.len(), &mut rng)?;
        Ok(Tagger { store, arch, config, head, labels, vocab, domains, history: Vec::new() })
    }

    /// Adds the unseen words and characters of `docs` to the vocabularies,
    /// with freshly initialized embedding rows. Returns the number of new
    /// words.
    pub fn extend_vocabulary<'a>(&mut self, docs: impl IntoIterator<Item = &'a Document>) -> Result<usize> {
        let (words, chars) = (self.vocab.words.len(), self.vocab.chars.len());
        for doc in docs {
            self.vocab.extend(doc);
        }
        let mut rng = derive_rng(self.config.seed, 0x1418 ^ ((words as u64) << 20) ^ chars as u64);
        let net = &self.arch.network;
        self.store.grow_rows(net.word_emb, self.vocab.words.len() - words, &mut rng)?;
        self.store.grow_rows(net.char_emb, self.vocab.chars.len() - chars, &mut rng)?;
        Ok(self.vocab.words.len() - words)
    }

    pub fn featurize(&self, sentence: &Sentence) -> Vec<TokenFeatures> {
        featurize(sentence, &self.vocab.words, &self.vocab.chars)
    }

    /// Tagged sentences of a gold document.
    pub fn examples(&self, doc: &Document) -> Result<Vec<Example>> {
        doc.sentences()
            .into_iter()
            .map(|s| {
                Ok(Example {
                    tags: encode_bio(&s, &doc.annotations, &self.labels, &doc.id)?,
                    tokens: self.featurize(&s),
                    domain_id: s.domain_id,
                })
            })
            .collect()
    }

    pub fn loss_and_grad(&mut self, example: &Example, rng: DropoutRng<'_>) -> Result<f64> {
        self.arch.loss_and_grad(&mut self.store, &example.tokens, &example.tags, example.domain_id, rng)
    }

    pub fn predict_sentence(&self, sentence: &Sentence) -> Result<Vec<TagId>> {
        self.arch.predict(&self.store, &self.featurize(sentence))
    }

    /// Predicted annotations for a document, ignoring its gold annotations.
    pub fn predict_annotations(&self, doc: &Document) -> Result<Vec<Annotation>> {
        let mut out = Vec::new();
        for sentence in doc.plain_sentences() {
            let tags = self.predict_sentence(&sentence)?;
            out.extend(decode_bio(&tags, &sentence, &self.labels));
        }
        Ok(out)
    }

    /// Copies of `docs` with annotations replaced by predictions, in input
    /// order.
    pub fn predict_documents(&self, docs: &[Document]) -> Result<Vec<Document>> {
        docs.par_iter()
            .map(|doc| {
                let annotations = self.predict_annotations(doc)?;
                Ok(Document { annotations, ..doc.clone() })
            })
            .collect()
    }

    pub fn domain_id(&self, name: &str) -> Option<usize> {
        self.domains.iter().position(|d| d == name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Annotation;

    fn doc(text: &str, anns: Vec<Annotation>) -> Document {
        let mut d = Document {
            id: "d".into(),
            note_type: "n".into(),
            domain: "x".into(),
            domain_id: 0,
            text: text.into(),
            annotations: anns,
        };
        d.validate().unwrap();
        d
    }

    #[test]
    fn vocab_first_occurrence_and_case() {
        let v = Vocabularies::build([&doc("a b\nB c", vec![])]);
        assert_eq!(v.words.items()[2..], ["a", "b", "c"]);
        assert_eq!(v.chars.items()[2..], ["a", "b", "B", "c"]);
    }

    #[test]
    fn empty_document_predicts_nothing() {
        let config = TrainingConfig { word_emb_dim: 4, char_emb_dim: 3, char_hidden: 2, token_hidden: 3, ..Default::default() };
        let d = doc("Jane Doe", vec![Annotation::new(0, 8, "Patient")]);
        let t = Tagger::new(config, HeadConfig::Plain, LabelSet::harmonized(), Vocabularies::build([&d]), vec!["x".into()]).unwrap();
        let empty = doc("", vec![]);
        assert!(t.predict_annotations(&empty).unwrap().is_empty());
        let ex = t.examples(&d).unwrap();
        assert_eq!(ex[0].tags, vec![1, 2]);
    }

    #[test]
    fn extending_vocabulary_keeps_old_rows() {
        let config = TrainingConfig { word_emb_dim: 4, char_emb_dim: 3, char_hidden: 2, token_hidden: 3, ..Default::default() };
        let d = doc("Jane Doe", vec![]);
        let mut t = Tagger::new(config, HeadConfig::Plain, LabelSet::harmonized(), Vocabularies::build([&d]), vec!["x".into()]).unwrap();
        let before = t.store.clone();
        let added = t.extend_vocabulary([&doc("Jane Roe", vec![])]).unwrap();
        assert_eq!(added, 1);
        let words = t.store.get(t.arch.network.word_emb);
        assert_eq!(words.shape, vec![5, 4]);
        assert_eq!(words.values[..16], before.get(t.arch.network.word_emb).values[..]);
        assert_eq!(t.store.get(t.arch.network.char_emb).shape[0], t.vocab.chars.len());
        assert_eq!(t.extend_vocabulary([&d]).unwrap(), 0);
        let sentence = &doc("Roe", vec![]).plain_sentences()[0];
        assert_eq!(t.featurize(sentence)[0].word, 4);
    }
}
