//! Reconstruction-quality scoring (ROUGE-1/2/L F-scores as percentages) and
//! classifier-utility scoring (Matthews correlation coefficient).

use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("reference sequence is empty")]
    EmptyReference,
    #[error("prediction/truth length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("batch sizes differ: {0} references vs {1} candidates")]
    BatchMismatch(usize, usize),
}

/// F-scores as percentages in [0, 100].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RougeScores {
    pub r1: f64,
    pub r2: f64,
    pub rl: f64,
}

impl RougeScores {
    pub const PERFECT: RougeScores = RougeScores { r1: 100.0, r2: 100.0, rl: 100.0 };
}

fn f1(overlap: usize, cand_total: usize, ref_total: usize) -> f64 {
    if overlap == 0 {
        return 0.0;
    }
    let p = overlap as f64 / cand_total as f64;
    let r = overlap as f64 / ref_total as f64;
    100.0 * 2.0 * p * r / (p + r)
}

/// Clipped multiset overlap of n-grams.
fn ngram_overlap(reference: &[u32], candidate: &[u32], n: usize) -> (usize, usize, usize) {
    let grams = |seq: &[u32]| -> HashMap<Vec<u32>, usize> {
        let mut m = HashMap::new();
        if seq.len() >= n {
            for w in seq.windows(n) {
                *m.entry(w.to_vec()).or_insert(0) += 1;
            }
        }
        m
    };
    let r = grams(reference);
    let c = grams(candidate);
    let overlap: usize =
        c.iter().map(|(g, &cnt)| cnt.min(r.get(g).copied().unwrap_or(0))).sum();
    let cand_total = c.values().sum();
    let ref_total = r.values().sum();
    (overlap, cand_total, ref_total)
}

/// Longest-common-subsequence length by the standard dynamic program.
pub fn lcs_len(a: &[u32], b: &[u32]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for &x in a {
        for (j, &y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-1/2 (clipped n-gram multiset F1) and ROUGE-L (LCS F1) for one
/// reference/candidate pair, as percentages. Identical sequences score 100
/// on all three, including single-token sequences that have no bigrams.
pub fn rouge(reference: &[u32], candidate: &[u32]) -> Result<RougeScores, MetricError> {
    if reference.is_empty() {
        return Err(MetricError::EmptyReference);
    }
    if reference == candidate {
        return Ok(RougeScores::PERFECT);
    }
    let (o1, c1, r1tot) = ngram_overlap(reference, candidate, 1);
    let r1 = f1(o1, c1.max(1), r1tot);
    let (o2, c2, r2tot) = ngram_overlap(reference, candidate, 2);
    let r2 = if c2 == 0 || r2tot == 0 { 0.0 } else { f1(o2, c2, r2tot) };
    let l = lcs_len(reference, candidate);
    let rl = if candidate.is_empty() { 0.0 } else { f1(l, candidate.len(), reference.len()) };
    Ok(RougeScores { r1, r2, rl })
}

/// Token-level edit (Levenshtein) distance; used to pair batch
/// reconstructions with references.
pub fn edit_distance(a: &[u32], b: &[u32]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for (i, &x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, &y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Assignment of candidates to references minimizing total edit distance,
/// found exhaustively (batches are small). Returns `perm` with
/// `perm[reference_index] = candidate_index`.
pub fn best_assignment(references: &[Vec<u32>], candidates: &[Vec<u32>]) -> Result<Vec<usize>, MetricError> {
    let b = references.len();
    if b != candidates.len() {
        return Err(MetricError::BatchMismatch(b, candidates.len()));
    }
    let dist: Vec<Vec<usize>> = references
        .iter()
        .map(|r| candidates.iter().map(|c| edit_distance(r, c)).collect())
        .collect();
    let mut best: Option<(usize, Vec<usize>)> = None;
    let mut perm: Vec<usize> = (0..b).collect();
    permute(&mut perm, 0, &mut |p| {
        let total: usize = p.iter().enumerate().map(|(i, &j)| dist[i][j]).sum();
        match &best {
            Some((t, _)) if *t <= total => {}
            _ => best = Some((total, p.to_vec())),
        }
    });
    Ok(best.expect("non-empty batch").1)
}

fn permute(items: &mut [usize], k: usize, visit: &mut impl FnMut(&[usize])) {
    if k == items.len() {
        visit(items);
        return;
    }
    for i in k..items.len() {
        items.swap(k, i);
        permute(items, k + 1, visit);
        items.swap(k, i);
    }
}

/// Raw overlap counts behind the three F-scores. Summing counts over many
/// pairs and then scoring yields the micro-average; scoring each pair and
/// averaging yields the macro-average.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RougeCounts {
    pub unigram: (usize, usize, usize),
    pub bigram: (usize, usize, usize),
    pub lcs: usize,
    pub cand_len: usize,
    pub ref_len: usize,
}

impl RougeCounts {
    pub fn add(&mut self, other: &RougeCounts) {
        let acc = |a: &mut (usize, usize, usize), b: (usize, usize, usize)| {
            a.0 += b.0;
            a.1 += b.1;
            a.2 += b.2;
        };
        acc(&mut self.unigram, other.unigram);
        acc(&mut self.bigram, other.bigram);
        self.lcs += other.lcs;
        self.cand_len += other.cand_len;
        self.ref_len += other.ref_len;
    }

    pub fn scores(&self) -> RougeScores {
        let score = |(o, ct, rt): (usize, usize, usize)| {
            if ct == 0 || rt == 0 { 0.0 } else { f1(o, ct, rt) }
        };
        RougeScores {
            r1: score(self.unigram),
            r2: score(self.bigram),
            rl: f1(self.lcs, self.cand_len.max(1), self.ref_len.max(1)),
        }
    }
}

/// Overlap counts for one reference/candidate pair.
pub fn rouge_counts(reference: &[u32], candidate: &[u32]) -> Result<RougeCounts, MetricError> {
    if reference.is_empty() {
        return Err(MetricError::EmptyReference);
    }
    Ok(RougeCounts {
        unigram: ngram_overlap(reference, candidate, 1),
        bigram: ngram_overlap(reference, candidate, 2),
        lcs: lcs_len(reference, candidate),
        cand_len: candidate.len(),
        ref_len: reference.len(),
    })
}

/// Micro-averaged ROUGE over a batch: candidates are first assigned to
/// references by minimum total edit distance, then n-gram overlaps and LCS
/// lengths are pooled before computing F1.
pub fn rouge_batch(
    references: &[Vec<u32>],
    candidates: &[Vec<u32>],
) -> Result<RougeScores, MetricError> {
    let perm = best_assignment(references, candidates)?;
    let mut pooled = RougeCounts::default();
    for (i, &j) in perm.iter().enumerate() {
        pooled.add(&rouge_counts(&references[i], &candidates[j])?);
    }
    Ok(pooled.scores())
}

/// Matthews correlation coefficient over binary labels; 0 when any
/// confusion-matrix marginal is zero (the coefficient is undefined there).
pub fn mcc(predictions: &[u8], truths: &[u8]) -> Result<f64, MetricError> {
    if predictions.len() != truths.len() || predictions.is_empty() {
        return Err(MetricError::LengthMismatch(predictions.len(), truths.len()));
    }
    let (mut tp, mut tn, mut fp, mut fn_) = (0f64, 0f64, 0f64, 0f64);
    for (&p, &t) in predictions.iter().zip(truths) {
        match (p != 0, t != 0) {
            (true, true) => tp += 1.0,
            (false, false) => tn += 1.0,
            (true, false) => fp += 1.0,
            (false, true) => fn_ += 1.0,
        }
    }
    let denom = (tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_);
    if denom == 0.0 {
        return Ok(0.0);
    }
    Ok((tp * tn - fp * fn_) / denom.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identical_sequences_score_100_everywhere() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for _ in 0..200 {
            let n = rng.gen_range(1..12);
            let seq: Vec<u32> = (0..n).map(|_| rng.gen_range(0..20)).collect();
            assert_eq!(rouge(&seq, &seq).unwrap(), RougeScores::PERFECT);
        }
    }

    #[test]
    fn swapped_tail_bigram_case() {
        // a b c d vs a b d c: bigrams {ab,bc,cd} vs {ab,bd,dc} share one of
        // three each → F1 = 1/3.
        let r = [1u32, 2, 3, 4];
        let c = [1u32, 2, 4, 3];
        let s = rouge(&r, &c).unwrap();
        assert!((s.r2 - 100.0 / 3.0).abs() < 1e-12);
        assert!((s.r1 - 100.0).abs() < 1e-12);
    }

    #[test]
    fn swapped_middle_lcs_case() {
        // a b c d vs a c b d: LCS length 3 → P = R = 3/4 → F1 = 75%.
        let r = [1u32, 2, 3, 4];
        let c = [1u32, 3, 2, 4];
        let s = rouge(&r, &c).unwrap();
        assert!((s.rl - 75.0).abs() < 1e-12);
    }

    #[test]
    fn unigram_is_permutation_invariant_but_higher_orders_are_not() {
        let r = [5u32, 6, 7, 8];
        let c1 = [8u32, 7, 6, 5];
        let s = rouge(&r, &c1).unwrap();
        assert!((s.r1 - 100.0).abs() < 1e-12);
        assert!(s.r2 < 100.0);
        assert!(s.rl < 100.0);
    }

    #[test]
    fn disjoint_sequences_score_zero() {
        let s = rouge(&[1, 2, 3], &[4, 5, 6]).unwrap();
        assert_eq!((s.r1, s.r2, s.rl), (0.0, 0.0, 0.0));
    }

    #[test]
    fn empty_reference_rejected_and_single_token_has_no_bigrams() {
        assert!(rouge(&[], &[1]).is_err());
        // Different single tokens: no bigrams on either side → R-2 = 0.
        let s = rouge(&[1], &[2]).unwrap();
        assert_eq!(s.r2, 0.0);
        // Identical single tokens are a perfect reconstruction.
        assert_eq!(rouge(&[1], &[1]).unwrap(), RougeScores::PERFECT);
    }

    /// Brute-force oracle: count shared unigrams/bigrams by sorting and
    /// two-pointer matching, then compare with the HashMap implementation.
    #[test]
    fn ngram_overlap_matches_brute_force_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let brute = |a: &[u32], b: &[u32], n: usize| -> usize {
            let grams = |s: &[u32]| -> Vec<Vec<u32>> {
                if s.len() < n {
                    vec![]
                } else {
                    let mut g: Vec<Vec<u32>> = s.windows(n).map(|w| w.to_vec()).collect();
                    g.sort();
                    g
                }
            };
            let (ga, gb) = (grams(a), grams(b));
            let (mut i, mut j, mut shared) = (0, 0, 0);
            while i < ga.len() && j < gb.len() {
                match ga[i].cmp(&gb[j]) {
                    std::cmp::Ordering::Less => i += 1,
                    std::cmp::Ordering::Greater => j += 1,
                    std::cmp::Ordering::Equal => {
                        shared += 1;
                        i += 1;
                        j += 1;
                    }
                }
            }
            shared
        };
        for _ in 0..200 {
            let len_a = rng.gen_range(1..10);
            let len_b = rng.gen_range(1..10);
            let a: Vec<u32> = (0..len_a).map(|_| rng.gen_range(0..5)).collect();
            let b: Vec<u32> = (0..len_b).map(|_| rng.gen_range(0..5)).collect();
            for n in 1..=2 {
                let (o, _, _) = ngram_overlap(&a, &b, n);
                assert_eq!(o, brute(&a, &b, n), "a={a:?} b={b:?} n={n}");
            }
        }
    }

    /// LCS oracle: exponential recursive definition on short sequences.
    #[test]
    fn lcs_matches_recursive_oracle() {
        fn slow(a: &[u32], b: &[u32]) -> usize {
            match (a.split_last(), b.split_last()) {
                (Some((xa, ra)), Some((xb, rb))) => {
                    if xa == xb {
                        slow(ra, rb) + 1
                    } else {
                        slow(ra, b).max(slow(a, rb))
                    }
                }
                _ => 0,
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        for _ in 0..200 {
            let la = rng.gen_range(0..8);
            let lb = rng.gen_range(0..8);
            let a: Vec<u32> = (0..la).map(|_| rng.gen_range(0..4)).collect();
            let b: Vec<u32> = (0..lb).map(|_| rng.gen_range(0..4)).collect();
            assert_eq!(lcs_len(&a, &b), slow(&a, &b));
        }
    }

    #[test]
    fn scores_stay_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        for _ in 0..200 {
            let la = rng.gen_range(1..10);
            let lb = rng.gen_range(1..10);
            let a: Vec<u32> = (0..la).map(|_| rng.gen_range(0..6)).collect();
            let b: Vec<u32> = (0..lb).map(|_| rng.gen_range(0..6)).collect();
            let s = rouge(&a, &b).unwrap();
            for v in [s.r1, s.r2, s.rl] {
                assert!((0.0..=100.0).contains(&v));
            }
        }
    }

    #[test]
    fn assignment_picks_the_identity_for_matching_pairs() {
        let refs = vec![vec![1u32, 2, 3], vec![7, 8, 9, 10]];
        // Candidates given in swapped order: assignment must un-swap them.
        let cands = vec![vec![7u32, 8, 9], vec![1, 2, 3]];
        let perm = best_assignment(&refs, &cands).unwrap();
        assert_eq!(perm, vec![1, 0]);
    }

    #[test]
    fn batch_rouge_pools_counts_micro_style() {
        let refs = vec![vec![1u32, 2], vec![3, 4]];
        let cands = vec![vec![1u32, 2], vec![5, 6]];
        // Pair 1 perfect, pair 2 disjoint: pooled unigram overlap 2 of 4.
        let s = rouge_batch(&refs, &cands).unwrap();
        assert!((s.r1 - 50.0).abs() < 1e-12);
    }

    #[test]
    fn pooled_counts_reproduce_single_pair_scores() {
        let mut rng = ChaCha8Rng::seed_from_u64(46);
        for _ in 0..100 {
            let la = rng.gen_range(1..9);
            let lb = rng.gen_range(1..9);
            let a: Vec<u32> = (0..la).map(|_| rng.gen_range(0..6)).collect();
            let b: Vec<u32> = (0..lb).map(|_| rng.gen_range(0..6)).collect();
            let direct = rouge(&a, &b).unwrap();
            let via_counts = rouge_counts(&a, &b).unwrap().scores();
            // The shortcut for identical sequences must agree with the
            // counts path wherever both are defined (no-bigram cases give
            // R-2 = 0 either way only when the pair differs).
            if a != b {
                assert!((direct.r1 - via_counts.r1).abs() < 1e-12);
                assert!((direct.r2 - via_counts.r2).abs() < 1e-12);
                assert!((direct.rl - via_counts.rl).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mcc_identities() {
        assert_eq!(mcc(&[1, 0, 1, 0], &[1, 0, 1, 0]).unwrap(), 1.0);
        assert_eq!(mcc(&[0, 1, 0, 1], &[1, 0, 1, 0]).unwrap(), -1.0);
        // TP=TN=FP=FN=1 → numerator 0.
        assert_eq!(mcc(&[1, 0, 1, 0], &[1, 0, 0, 1]).unwrap(), 0.0);
        // All-positive predictions: a zero marginal → defined as 0.
        assert_eq!(mcc(&[1, 1, 1], &[1, 0, 1]).unwrap(), 0.0);
        assert!(mcc(&[1], &[1, 0]).is_err());
    }

    /// Direct confusion-matrix formula on random label vectors.
    #[test]
    fn mcc_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(45);
        for _ in 0..200 {
            let n = rng.gen_range(1..30);
            let p: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2)).collect();
            let t: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2)).collect();
            let (mut tp, mut tn, mut fp, mut fn_) = (0i64, 0i64, 0i64, 0i64);
            for (a, b) in p.iter().zip(&t) {
                match (a, b) {
                    (1, 1) => tp += 1,
                    (0, 0) => tn += 1,
                    (1, 0) => fp += 1,
                    _ => fn_ += 1,
                }
            }
            let denom = ((tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_)) as f64;
            let expect =
                if denom == 0.0 { 0.0 } else { (tp * tn - fp * fn_) as f64 / denom.sqrt() };
            let got = mcc(&p, &t).unwrap();
            assert!((got - expect).abs() < 1e-12);
            assert!((-1.0..=1.0).contains(&got));
        }
    }
}
