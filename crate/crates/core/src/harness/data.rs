//! Batch assembly shared by training and evaluation.

use crate::decoders::CondInputs;
use crate::numerics::{CounterRng, Real, Result, Tensor};

/// The synthetic corpus has a single language.
pub const LANG_ID: usize = 0;

/// Right-pad frame-major `T_i × channels` rows into `[B, T_max, channels]`.
pub fn pad_rows<S: Real>(rows: &[&[f64]], channels: usize) -> Result<(Tensor<S>, Vec<usize>)> {
    let lengths: Vec<usize> = rows.iter().map(|r| r.len() / channels).collect();
    let t_max = lengths.iter().copied().max().unwrap_or(0);
    let mut v = vec![S::zero(); rows.len() * t_max * channels];
    for (b, r) in rows.iter().enumerate() {
        let base = b * t_max * channels;
        for (i, x) in r.iter().take(lengths[b] * channels).enumerate() {
            v[base + i] = S::lit(*x);
        }
    }
    Ok((Tensor::new(&[rows.len(), t_max, channels], v)?, lengths))
}

/// Per-frame loss weights over `[B, T_max]`: 1 on valid frames not flagged
/// in `excluded`, 0 elsewhere.
pub fn frame_weights<S: Real>(lengths: &[usize], t_max: usize, excluded: Option<&[Vec<bool>]>) -> Vec<S> {
    let mut w = vec![S::zero(); lengths.len() * t_max];
    for (b, &len) in lengths.iter().enumerate() {
        for j in 0..len {
            let skip = excluded.is_some_and(|e| e[b].get(j).copied().unwrap_or(false));
            if !skip {
                w[b * t_max + j] = S::one();
            }
        }
    }
    w
}

pub fn cond_inputs<S: Real>(
    symbols: Vec<Vec<usize>>,
    styles: &[&[f64]],
    prompts: &[&[f64]],
    n_mel: usize,
) -> Result<CondInputs<S>> {
    let style_dim = styles.first().map_or(0, |s| s.len());
    let flat: Vec<f64> = styles.iter().flat_map(|s| s.iter().copied()).collect();
    let (prompt, prompt_lengths) = pad_rows(prompts, n_mel)?;
    Ok(CondInputs {
        lang: vec![LANG_ID; symbols.len()],
        symbols,
        style: Tensor::from_f64(&[styles.len(), style_dim], &flat)?,
        prompt,
        prompt_lengths,
    })
}

/// Draws batches of similar length: an anchor position in length order,
/// then members from a window around it.
#[derive(Debug, Clone)]
pub struct LengthBuckets {
    order: Vec<usize>,
    window: usize,
}

impl LengthBuckets {
    pub fn new(lengths: &[usize], window: usize) -> Self {
        let mut order: Vec<usize> = (0..lengths.len()).collect();
        order.sort_by_key(|&i| lengths[i]);
        Self {
            order,
            window: window.max(1),
        }
    }

    pub fn draw(&self, rng: &mut CounterRng, batch: usize) -> Vec<usize> {
        let n = self.order.len();
        let w = self.window.min(n);
        let anchor = rng.range_inclusive(0, n - 1);
        let lo = anchor.saturating_sub(w / 2).min(n - w);
        (0..batch).map(|_| self.order[rng.range_inclusive(lo, lo + w - 1)]).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn padding_and_weights() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0];
        let (t, lens) = pad_rows::<f64>(&[&a, &b], 2).unwrap();
        assert_eq!(t.shape(), &[2, 2, 2]);
        assert_eq!(t.to_vec(), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 0.0, 0.0]);
        let w: Vec<f64> = frame_weights(&lens, 2, Some(&[vec![true, false], vec![false]]));
        assert_eq!(w, vec![0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn buckets_stay_in_window() {
        let lengths: Vec<usize> = (0..100).rev().collect();
        let buckets = LengthBuckets::new(&lengths, 10);
        let mut rng = CounterRng::new(4);
        for _ in 0..50 {
            let idx = buckets.draw(&mut rng, 8);
            let ls: Vec<usize> = idx.iter().map(|&i| lengths[i]).collect();
            assert!(ls.iter().max().unwrap() - ls.iter().min().unwrap() < 10);
        }
    }
}
