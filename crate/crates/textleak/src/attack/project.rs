//! Projection of continuous embedding rows onto vocabulary tokens by cosine
//! similarity against the word-embedding table.

use crate::tensor::Tensor;

use super::AttackError;

/// Nearest vocabulary token for each row of `rows` (flat, width `d`) under
/// cosine similarity against `w_embed` ([V, d]). Ties break toward the lowest
/// token id; an all-zero input row is an error naming the position; an
/// all-zero vocabulary row scores -1 and is never selected.
pub fn project_rows(rows: &[f64], d: usize, w_embed: &Tensor) -> Result<Vec<u32>, AttackError> {
    let (v, dv) = w_embed.dims2();
    assert_eq!(d, dv, "embedding width mismatch");
    assert_eq!(rows.len() % d, 0, "rows not a multiple of width");
    let n = rows.len() / d;

    let vocab_norms: Vec<f64> = (0..v)
        .map(|j| w_embed.data[j * d..(j + 1) * d].iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();

    let mut ids = Vec::with_capacity(n);
    for i in 0..n {
        let row = &rows[i * d..(i + 1) * d];
        let row_norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if row_norm == 0.0 {
            return Err(AttackError::ZeroRow(i));
        }
        let mut best_id = 0u32;
        let mut best_score = f64::NEG_INFINITY;
        for j in 0..v {
            let score = if vocab_norms[j] == 0.0 {
                -1.0
            } else {
                let dot: f64 =
                    row.iter().zip(&w_embed.data[j * d..(j + 1) * d]).map(|(a, b)| a * b).sum();
                dot / (row_norm * vocab_norms[j])
            };
            // Strictly-greater keeps the lowest id on exact ties.
            if score > best_score {
                best_score = score;
                best_id = j as u32;
            }
        }
        ids.push(best_id);
    }
    Ok(ids)
}
