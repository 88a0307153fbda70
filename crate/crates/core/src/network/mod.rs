//! Character and word embeddings, the two BiLSTM stacks, the emission layer
//! and the CRF.

pub mod crf;
pub mod linalg;
pub mod lstm;
pub mod vocab;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use crf::{crf_log_likelihood, crf_loss_and_grad, crf_viterbi, structural_mask, CrfParams, IMPOSSIBLE};
pub use lstm::{BiLstm, BiLstmTrace, Lstm};
pub use vocab::{load_word_vectors, word_key, Vocabulary, OOV, PAD};

use crate::corpus::{LabelSet, Sentence};
use crate::error::Result;
use crate::numerics::{dropout_mask, Mode, ParamId, ParameterStore, TrainingConfig};
use linalg::{matvec_add, matvec_t_add, outer_add};

/// Vocabulary ids for one token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenFeatures {
    pub word: usize,
    pub chars: Vec<usize>,
}

pub fn featurize(sentence: &Sentence, words: &Vocabulary, chars: &Vocabulary) -> Vec<TokenFeatures> {
    sentence
        .tokens
        .iter()
        .map(|t| TokenFeatures {
            word: words.id(&word_key(&t.surface)),
            chars: t.surface.chars().map(|c| chars.id(c.encode_utf8(&mut [0; 4]))).collect(),
        })
        .collect()
}

/// Dropout source for one forward pass. `None` disables dropout.
pub type DropoutRng<'a> = Option<&'a mut ChaCha8Rng>;

/// Layout of the shared network inside a [`ParameterStore`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Network {
    pub char_emb: ParamId,
    pub word_emb: ParamId,
    pub char_lstm: BiLstm,
    pub token_lstm: BiLstm,
    pub emission_w: ParamId,
    pub emission_b: ParamId,
    pub crf: CrfParams,
    pub char_dim: usize,
    pub word_dim: usize,
    pub dropout: f64,
}

/// Everything the backward pass needs from one forward pass.
#[derive(Debug, Clone)]
pub struct TrunkTrace {
    char_inputs: Vec<Vec<Vec<f64>>>,
    char_traces: Vec<BiLstmTrace>,
    reps: Vec<Vec<f64>>,
    rep_masks: Vec<Vec<f64>>,
    token_trace: BiLstmTrace,
    out_masks: Vec<Vec<f64>>,
    /// Token-BiLSTM outputs after dropout.
    pub hidden: Vec<Vec<f64>>,
}

impl Network {
    pub fn init(
        store: &mut ParameterStore,
        config: &TrainingConfig,
        labels: &LabelSet,
        n_words: usize,
        n_chars: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let n = labels.num_tags();
        let char_emb = store.glorot("char_embeddings", n_chars, config.char_emb_dim, rng)?;
        let word_emb = store.glorot("word_embeddings", n_words, config.word_emb_dim, rng)?;
        let char_lstm = BiLstm::init(store, "char_lstm", config.char_emb_dim, config.char_hidden, rng)?;
        let token_lstm = BiLstm::init(store, "token_lstm", config.token_input_dim(), config.token_hidden, rng)?;
        let emission_w = store.glorot("emission.w", n, config.hidden_dim(), rng)?;
        let emission_b = store.zeros("emission.b", &[n])?;
        let transitions = store.glorot("crf.transitions", n + 2, n + 2, rng)?;
        let pinned = structural_mask(labels);
        for (v, &p) in store.get_mut(transitions).values.iter_mut().zip(&pinned) {
            if p {
                *v = IMPOSSIBLE;
            }
        }
        Ok(Network {
            char_emb,
            word_emb,
            char_lstm,
            token_lstm,
            emission_w,
            emission_b,
            crf: CrfParams { transitions, num_tags: n, pinned },
            char_dim: config.char_emb_dim,
            word_dim: config.word_emb_dim,
            dropout: config.dropout,
        })
    }

    pub fn num_tags(&self) -> usize {
        self.crf.num_tags
    }

    pub fn hidden_dim(&self) -> usize {
        2 * self.token_lstm.hidden()
    }

    fn char_inputs(&self, store: &ParameterStore, chars: &[usize]) -> Vec<Vec<f64>> {
        let table = store.get(self.char_emb);
        chars.iter().map(|&c| table.row(c).to_vec()).collect()
    }

    /// Final forward and final backward char-LSTM states of one token.
    pub fn char_summary(&self, store: &ParameterStore, chars: &[usize]) -> Vec<f64> {
        let xs = self.char_inputs(store, chars);
        self.char_lstm.forward(store, &xs).summary()
    }

    /// `[word embedding; char summary]`, before dropout.
    pub fn token_representation(&self, store: &ParameterStore, token: &TokenFeatures) -> Vec<f64> {
        let mut rep = store.get(self.word_emb).row(token.word).to_vec();
        rep.extend(self.char_summary(store, &token.chars));
        rep
    }

    pub fn forward(&self, store: &ParameterStore, tokens: &[TokenFeatures], mut rng: DropoutRng<'_>) -> TrunkTrace {
        let mut char_inputs = Vec::with_capacity(tokens.len());
        let mut char_traces = Vec::with_capacity(tokens.len());
        let mut reps = Vec::with_capacity(tokens.len());
        let mut rep_masks = Vec::with_capacity(tokens.len());
        let words = store.get(self.word_emb);
        for token in tokens {
            let xs = self.char_inputs(store, &token.chars);
            let trace = self.char_lstm.forward(store, &xs);
            let mut rep = words.row(token.word).to_vec();
            rep.extend(trace.summary());
            let mask = self.mask(rep.len(), rng.as_deref_mut());
            rep.iter_mut().zip(&mask).for_each(|(v, m)| *v *= m);
            char_inputs.push(xs);
            char_traces.push(trace);
            reps.push(rep);
            rep_masks.push(mask);
        }
        let token_trace = self.token_lstm.forward(store, &reps);
        let mut hidden = token_trace.outputs();
        let mut out_masks = Vec::with_capacity(hidden.len());
        for h in &mut hidden {
            let mask = self.mask(h.len(), rng.as_deref_mut());
            h.iter_mut().zip(&mask).for_each(|(v, m)| *v *= m);
            out_masks.push(mask);
        }
        TrunkTrace { char_inputs, char_traces, reps, rep_masks, token_trace, out_masks, hidden }
    }

    fn mask(&self, n: usize, rng: Option<&mut ChaCha8Rng>) -> Vec<f64> {
        match rng {
            Some(rng) => dropout_mask(n, self.dropout, rng, Mode::Train),
            None => vec![1.0; n],
        }
    }

    /// Backpropagates from the (post-dropout) hidden vectors to every
    /// trunk parameter.
    pub fn backward(&self, store: &mut ParameterStore, tokens: &[TokenFeatures], trace: &TrunkTrace, d_hidden: &[Vec<f64>]) {
        let d_out: Vec<Vec<f64>> = d_hidden
            .iter()
            .zip(&trace.out_masks)
            .map(|(d, m)| d.iter().zip(m).map(|(a, b)| a * b).collect())
            .collect();
        let d_reps = self.token_lstm.backward(store, &trace.reps, &trace.token_trace, &d_out);
        let wd = self.word_dim;
        let cd = self.char_dim;
        for (t, token) in tokens.iter().enumerate() {
            let d: Vec<f64> = d_reps[t].iter().zip(&trace.rep_masks[t]).map(|(a, b)| a * b).collect();
            let words = store.get_mut(self.word_emb);
            let row = &mut words.grad[token.word * wd..(token.word + 1) * wd];
            row.iter_mut().zip(&d[..wd]).for_each(|(g, v)| *g += v);
            let d_chars = self.char_lstm.backward_summary(store, &trace.char_inputs[t], &trace.char_traces[t], &d[wd..]);
            let table = store.get_mut(self.char_emb);
            for (&c, dc) in token.chars.iter().zip(d_chars) {
                table.grad[c * cd..(c + 1) * cd].iter_mut().zip(dc).for_each(|(g, v)| *g += v);
            }
        }
    }

    /// `W·h + b` per token under the given weight matrix.
    pub fn affine_emissions(&self, store: &ParameterStore, w: &[f64], hidden: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let n = self.num_tags();
        let b = &store.get(self.emission_b).values;
        hidden
            .iter()
            .map(|h| {
                let mut e = b.clone();
                matvec_add(w, n, h.len(), h, &mut e);
                e
            })
            .collect()
    }

    pub fn emissions(&self, store: &ParameterStore, hidden: &[Vec<f64>]) -> Vec<Vec<f64>> {
        self.affine_emissions(store, &store.get(self.emission_w).values, hidden)
    }

    /// Accumulates `scale·dE` into the emission bias gradient and returns
    /// `Σ_t dE_t h_tᵀ` (unscaled) for the caller to distribute.
    pub fn emission_outer(&self, hidden: &[Vec<f64>], d_em: &[Vec<f64>]) -> Vec<f64> {
        let n = self.num_tags();
        let hd = self.hidden_dim();
        let mut g = vec![0.0; n * hd];
        for (h, d) in hidden.iter().zip(d_em) {
            outer_add(&mut g, n, hd, d, h);
        }
        g
    }

    pub fn add_bias_grad(&self, store: &mut ParameterStore, d_em: &[Vec<f64>], scale: f64) {
        let gb = &mut store.get_mut(self.emission_b).grad;
        for d in d_em {
            gb.iter_mut().zip(d).for_each(|(g, v)| *g += scale * v);
        }
    }

    /// `d_hidden[t] += scale · wᵀ dE_t`
    pub fn add_hidden_grad(&self, w: &[f64], d_em: &[Vec<f64>], scale: f64, d_hidden: &mut [Vec<f64>]) {
        let n = self.num_tags();
        let hd = self.hidden_dim();
        for (d, dh) in d_em.iter().zip(d_hidden.iter_mut()) {
            let scaled: Vec<f64> = d.iter().map(|v| scale * v).collect();
            matvec_t_add(w, n, hd, &scaled, dh);
        }
    }

    /// Adds `scale·d_tr` to the transition gradient, skipping pinned entries.
    pub fn add_transition_grad(&self, store: &mut ParameterStore, d_tr: &[f64], scale: f64) {
        let g = &mut store.get_mut(self.crf.transitions).grad;
        for ((acc, v), &pinned) in g.iter_mut().zip(d_tr).zip(&self.crf.pinned) {
            if !pinned {
                *acc += scale * v;
            }
        }
    }

    pub fn transitions<'a>(&self, store: &'a ParameterStore) -> &'a [f64] {
        &store.get(self.crf.transitions).values
    }

    /// Emissions from the shared layer followed by Viterbi.
    pub fn predict(&self, store: &ParameterStore, tokens: &[TokenFeatures]) -> Result<Vec<usize>> {
        let trace = self.forward(store, tokens, None);
        let em = self.emissions(store, &trace.hidden);
        Ok(crf_viterbi(&em, self.transitions(store), self.num_tags())?.0)
    }

    /// Copies pretrained vectors into the word table for every known word.
    /// Returns how many rows were set.
    pub fn load_pretrained(
        &self,
        store: &mut ParameterStore,
        words: &Vocabulary,
        vectors: &std::collections::HashMap<String, Vec<f64>>,
    ) -> usize {
        let wd = self.word_dim;
        let table = store.get_mut(self.word_emb);
        let mut hits = 0;
        for (i, w) in words.items().iter().enumerate().skip(2) {
            if let Some(v) = vectors.get(w) {
                table.values[i * wd..(i + 1) * wd].copy_from_slice(v);
                hits += 1;
            }
        }
        hits
    }
}
