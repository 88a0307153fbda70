//! Linear-chain CRF over `n` tags with virtual start and end states.
//!
//! Transitions are an `(n + 2) × (n + 2)` row-major matrix where entry
//! `[i, j]` scores moving from tag `i` to tag `j`; row `n` is the start
//! state and column `n + 1` the end state.

use serde::{Deserialize, Serialize};

use super::linalg::log_sum_exp;
use crate::corpus::{LabelSet, OUTSIDE};
use crate::error::{Error, Result};
use crate::numerics::ParamId;

/// Score given to structurally impossible transitions.
pub const IMPOSSIBLE: f64 = -1e4;

#[inline]
pub fn start_state(n: usize) -> usize {
    n
}

#[inline]
pub fn end_state(n: usize) -> usize {
    n + 1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CrfParams {
    pub transitions: ParamId,
    pub num_tags: usize,
    /// Entries held at [`IMPOSSIBLE`]; they never receive gradient.
    pub pinned: Vec<bool>,
}

/// Transitions a BIO tagger can never take: into `I-X` from anything but
/// `B-X`/`I-X`, into the start state, and out of the end state.
pub fn structural_mask(labels: &LabelSet) -> Vec<bool> {
    let n = labels.num_tags();
    let size = n + 2;
    let mut mask = vec![false; size * size];
    for from in 0..size {
        for to in 0..size {
            let illegal = if to == start_state(n) || from == end_state(n) {
                true
            } else if to < n {
                match labels.decompose(to) {
                    Some((ty, false)) => match labels.decompose(from) {
                        Some((from_ty, _)) if from < n => from_ty != ty,
                        _ => true, // O, start
                    },
                    _ => false,
                }
            } else {
                false
            };
            mask[from * size + to] = illegal;
        }
    }
    mask
}

fn check(emissions: &[Vec<f64>], trans: &[f64], n: usize) -> Result<()> {
    if emissions.is_empty() {
        return Err(Error::LengthMismatch { what: "emissions", got: 0, expected: 1 });
    }
    if trans.len() != (n + 2) * (n + 2) {
        return Err(Error::LengthMismatch {
            what: "transitions",
            got: trans.len(),
            expected: (n + 2) * (n + 2),
        });
    }
    for e in emissions {
        if e.len() != n {
            return Err(Error::LengthMismatch { what: "emission vector", got: e.len(), expected: n });
        }
    }
    Ok(())
}

/// Unnormalized log-score of one tag path, including start and end moves.
pub fn sequence_score(emissions: &[Vec<f64>], tags: &[usize], trans: &[f64], n: usize) -> f64 {
    let size = n + 2;
    let mut score = trans[start_state(n) * size + tags[0]];
    for (t, &tag) in tags.iter().enumerate() {
        score += emissions[t][tag];
        if t > 0 {
            score += trans[tags[t - 1] * size + tag];
        }
    }
    score + trans[tags[tags.len() - 1] * size + end_state(n)]
}

fn forward_lattice(emissions: &[Vec<f64>], trans: &[f64], n: usize) -> Vec<Vec<f64>> {
    let size = n + 2;
    let mut alpha = Vec::with_capacity(emissions.len());
    alpha.push((0..n).map(|j| trans[start_state(n) * size + j] + emissions[0][j]).collect::<Vec<_>>());
    for e in &emissions[1..] {
        let prev = alpha.last().unwrap();
        let next = (0..n)
            .map(|j| e[j] + log_sum_exp((0..n).map(|i| prev[i] + trans[i * size + j])))
            .collect();
        alpha.push(next);
    }
    alpha
}

pub fn log_partition(emissions: &[Vec<f64>], trans: &[f64], n: usize) -> Result<f64> {
    check(emissions, trans, n)?;
    let size = n + 2;
    let alpha = forward_lattice(emissions, trans, n);
    let last = alpha.last().unwrap();
    Ok(log_sum_exp((0..n).map(|j| last[j] + trans[j * size + end_state(n)])))
}

/// Negative log-likelihood `logZ − score(tags)`.
pub fn crf_log_likelihood(emissions: &[Vec<f64>], tags: &[usize], trans: &[f64], n: usize) -> Result<f64> {
    check(emissions, trans, n)?;
    if tags.len() != emissions.len() {
        return Err(Error::LengthMismatch { what: "tags", got: tags.len(), expected: emissions.len() });
    }
    Ok(log_partition(emissions, trans, n)? - sequence_score(emissions, tags, trans, n))
}

/// Loss together with its gradient w.r.t. emissions and transitions, from
/// forward-backward marginals.
pub fn crf_loss_and_grad(
    emissions: &[Vec<f64>],
    tags: &[usize],
    trans: &[f64],
    n: usize,
) -> Result<(f64, Vec<Vec<f64>>, Vec<f64>)> {
    check(emissions, trans, n)?;
    let len = emissions.len();
    if tags.len() != len {
        return Err(Error::LengthMismatch { what: "tags", got: tags.len(), expected: len });
    }
    let size = n + 2;
    let (s, e) = (start_state(n), end_state(n));
    let alpha = forward_lattice(emissions, trans, n);
    let log_z = log_sum_exp((0..n).map(|j| alpha[len - 1][j] + trans[j * size + e]));

    let mut beta = vec![vec![0.0; n]; len];
    for j in 0..n {
        beta[len - 1][j] = trans[j * size + e];
    }
    for t in (0..len - 1).rev() {
        for i in 0..n {
            beta[t][i] = log_sum_exp(
                (0..n).map(|j| trans[i * size + j] + emissions[t + 1][j] + beta[t + 1][j]),
            );
        }
    }

    let mut d_em = vec![vec![0.0; n]; len];
    let mut d_tr = vec![0.0; size * size];
    for t in 0..len {
        for j in 0..n {
            d_em[t][j] = (alpha[t][j] + beta[t][j] - log_z).exp();
        }
        d_em[t][tags[t]] -= 1.0;
    }
    for j in 0..n {
        d_tr[s * size + j] += (alpha[0][j] + beta[0][j] - log_z).exp();
        d_tr[j * size + e] += (alpha[len - 1][j] + beta[len - 1][j] - log_z).exp();
    }
    for t in 0..len - 1 {
        for i in 0..n {
            for j in 0..n {
                d_tr[i * size + j] +=
                    (alpha[t][i] + trans[i * size + j] + emissions[t + 1][j] + beta[t + 1][j] - log_z).exp();
            }
        }
    }
    d_tr[s * size + tags[0]] -= 1.0;
    d_tr[tags[len - 1] * size + e] -= 1.0;
    for w in tags.windows(2) {
        d_tr[w[0] * size + w[1]] -= 1.0;
    }

    let loss = log_z - sequence_score(emissions, tags, trans, n);
    Ok((loss, d_em, d_tr))
}

/// Best path and its score. Ties go to the lowest tag index.
pub fn crf_viterbi(emissions: &[Vec<f64>], trans: &[f64], n: usize) -> Result<(Vec<usize>, f64)> {
    check(emissions, trans, n)?;
    let size = n + 2;
    let len = emissions.len();
    let mut delta: Vec<f64> = (0..n).map(|j| trans[start_state(n) * size + j] + emissions[0][j]).collect();
    let mut back: Vec<Vec<usize>> = Vec::with_capacity(len);
    for em in &emissions[1..] {
        let mut next = vec![0.0; n];
        let mut ptr = vec![0usize; n];
        for j in 0..n {
            let mut best = OUTSIDE;
            let mut best_score = f64::NEG_INFINITY;
            for i in 0..n {
                let v = delta[i] + trans[i * size + j];
                if v > best_score {
                    best_score = v;
                    best = i;
                }
            }
            next[j] = best_score + em[j];
            ptr[j] = best;
        }
        delta = next;
        back.push(ptr);
    }
    let mut last = 0;
    let mut best_score = f64::NEG_INFINITY;
    for j in 0..n {
        let v = delta[j] + trans[j * size + end_state(n)];
        if v > best_score {
            best_score = v;
            last = j;
        }
    }
    let mut path = vec![last];
    for ptr in back.iter().rev() {
        path.push(ptr[*path.last().unwrap()]);
    }
    path.reverse();
    Ok((path, best_score))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn all_paths(n: usize, len: usize) -> Vec<Vec<usize>> {
        let mut out = vec![vec![]];
        for _ in 0..len {
            out = out
                .into_iter()
                .flat_map(|p| (0..n).map(move |j| [p.clone(), vec![j]].concat()))
                .collect();
        }
        out
    }

    #[test]
    fn uniform_single_step_loss_is_log_n() {
        let em = vec![vec![0.0; 3]];
        let tr = vec![0.0; 25];
        for tag in 0..3 {
            let loss = crf_log_likelihood(&em, &[tag], &tr, 3).unwrap();
            assert!((loss - 3f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn two_step_matches_enumeration() {
        // small integer scores, 2 tags
        let em = vec![vec![1.0, 2.0], vec![0.0, 3.0]];
        let mut tr = vec![0.0; 16];
        tr[0 * 4 + 1] = 1.0; // tag0 → tag1
        tr[1 * 4 + 0] = -1.0;
        tr[2 * 4 + 0] = 2.0; // start → tag0
        tr[1 * 4 + 3] = 1.0; // tag1 → end
        let scores: Vec<f64> = all_paths(2, 2).iter().map(|p| sequence_score(&em, p, &tr, 2)).collect();
        // hand-expanded path scores for [00, 01, 10, 11]
        assert_eq!(scores, vec![3.0, 8.0, 1.0, 6.0]);
        let z: f64 = scores.iter().map(|s| s.exp()).sum();
        let expected = -(scores[1].exp() / z).ln();
        let loss = crf_log_likelihood(&em, &[0, 1], &tr, 2).unwrap();
        assert!((loss - expected).abs() < 1e-12);
    }

    #[test]
    fn equal_scores_pick_lowest_index() {
        let (path, _) = crf_viterbi(&vec![vec![0.0; 4]; 3], &vec![0.0; 36], 4).unwrap();
        assert_eq!(path, vec![0, 0, 0]);
    }

    #[test]
    fn length_mismatch_rejected() {
        let em = vec![vec![0.0; 3]; 2];
        assert!(crf_log_likelihood(&em, &[0], &vec![0.0; 25], 3).is_err());
        assert!(crf_log_likelihood(&[], &[], &vec![0.0; 25], 3).is_err());
    }

    #[test]
    fn mask_blocks_bio_violations() {
        let labels = LabelSet::new(["A", "B"]);
        let n = labels.num_tags(); // O, B-A, I-A, B-B, I-B
        let size = n + 2;
        let m = structural_mask(&labels);
        let at = |f: usize, t: usize| m[f * size + t];
        assert!(at(0, 2), "O → I-A");
        assert!(at(start_state(n), 2), "start → I-A");
        assert!(at(1, 4), "B-A → I-B");
        assert!(at(2, 4), "I-A → I-B");
        assert!(!at(1, 2) && !at(2, 2), "B-A/I-A → I-A");
        assert!(!at(0, 1) && !at(2, 3) && !at(4, 0));
        assert!(!at(start_state(n), 1) && !at(2, end_state(n)));
        assert!(at(0, start_state(n)) && at(end_state(n), 0));
    }
}
