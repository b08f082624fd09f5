//! Discrete sequence transformations. Each proposal is a permutation of the
//! token positions — the row multiset is preserved by construction — drawn
//! with uniformly random positions.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::AttackError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TransformKind {
    /// Exchange the tokens at two random positions (possibly equal).
    Swap,
    /// Remove one token and reinsert it directly after another position.
    MoveToken,
    /// Remove a contiguous block and reinsert it at a random offset.
    MoveSubseq,
    /// Rotate: move a random prefix to the end.
    MovePrefix,
}

pub const ALL_TRANSFORMS: [TransformKind; 4] =
    [TransformKind::Swap, TransformKind::MoveToken, TransformKind::MoveSubseq, TransformKind::MovePrefix];

/// Draws one transformation of `n` positions. Returns `perm` where
/// `perm[new_position] = old_position`; applying it to the rows yields the
/// transformed sequence. Sequences shorter than two tokens cannot be
/// transformed.
pub fn sample_permutation<R: Rng>(
    kind: TransformKind,
    n: usize,
    rng: &mut R,
) -> Result<Vec<usize>, AttackError> {
    if n < 2 {
        return Err(AttackError::SequenceTooShort(n));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    match kind {
        TransformKind::Swap => {
            let i = rng.gen_range(0..n);
            let j = rng.gen_range(0..n);
            perm.swap(i, j);
        }
        TransformKind::MoveToken => {
            // Token at i is placed directly after the token originally at
            // position j (before itself when j < i, at its own place when
            // j == i).
            let i = rng.gen_range(0..n);
            let j = rng.gen_range(0..n);
            let tok = perm.remove(i);
            let insert_at = match j.cmp(&i) {
                std::cmp::Ordering::Less => j + 1,
                std::cmp::Ordering::Greater => j,
                std::cmp::Ordering::Equal => i,
            };
            perm.insert(insert_at, tok);
        }
        TransformKind::MoveSubseq => {
            let i = rng.gen_range(0..n);
            let j = rng.gen_range(i..n);
            let block: Vec<usize> = perm.drain(i..=j).collect();
            let k = rng.gen_range(0..=perm.len());
            for (off, &p) in block.iter().enumerate() {
                perm.insert(k + off, p);
            }
        }
        TransformKind::MovePrefix => {
            // Prefix of length i moves to the end; i = n is the identity.
            let i = rng.gen_range(1..=n);
            perm.rotate_left(i % n);
        }
    }
    Ok(perm)
}

/// Applies a position permutation to flat rows of width `d`.
pub fn permute_rows(data: &[f64], d: usize, perm: &[usize]) -> Vec<f64> {
    let mut out = Vec::with_capacity(data.len());
    for &src in perm {
        out.extend_from_slice(&data[src * d..(src + 1) * d]);
    }
    out
}
