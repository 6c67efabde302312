//! Structured (heads, FFW rows) and unstructured (single weight) magnitude
//! pruning. Everything is expressed through the model's masks.

use std::cmp::Ordering;

use ndarray::{s, Array2};

use crate::error::{Error, Result};
use crate::model::{Real, TransformerModel};

fn l1<'a, T: Real + 'a>(it: impl IntoIterator<Item = &'a T>) -> f64 {
    it.into_iter().map(|v| v.as_f64().abs()).sum()
}

/// `score(a) < score(b)`, ties to the lower index.
fn by_score(scores: &[f64]) -> impl Fn(&usize, &usize) -> Ordering + '_ {
    |&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b))
}

/// L1 score of every head: its Q, K, V row slices and biases plus its O
/// column slice. `n_layers x n_heads`.
pub fn head_scores<T: Real>(m: &TransformerModel<T>) -> Array2<f64> {
    let cfg = &m.config;
    let hd = cfg.head_dim();
    Array2::from_shape_fn((cfg.n_layers, cfg.n_heads), |(l, h)| {
        let b = &m.weights.blocks[l];
        let span = h * hd..(h + 1) * hd;
        let qkv: f64 = [&b.q, &b.k, &b.v]
            .iter()
            .map(|lin| l1(lin.weight.slice(s![span.clone(), ..])) + l1(lin.bias.slice(s![span.clone()])))
            .sum();
        qkv + l1(b.o.weight.slice(s![.., span.clone()]))
    })
}

/// Masks the `per_layer` lowest-scoring unpruned heads of every layer.
/// Returns the removed head indices per layer, ascending.
pub fn prune_heads<T: Real>(m: &mut TransformerModel<T>, per_layer: usize) -> Result<Vec<Vec<usize>>> {
    for (l, row) in m.masks.heads.outer_iter().enumerate() {
        let left = row.iter().filter(|&&k| k).count();
        if per_layer > left {
            return Err(Error::OverPruning(format!(
                "layer {l} has {left} heads left, asked to remove {per_layer}"
            )));
        }
    }
    let scores = head_scores(m);
    let hd = m.config.head_dim();
    let mut removed = Vec::with_capacity(m.config.n_layers);
    for l in 0..m.config.n_layers {
        let row: Vec<f64> = scores.row(l).to_vec();
        let mut live: Vec<usize> = (0..m.config.n_heads).filter(|&h| m.masks.heads[[l, h]]).collect();
        live.sort_by(by_score(&row));
        let mut gone = live[..per_layer].to_vec();
        gone.sort_unstable();
        for &h in &gone {
            m.masks.drop_head(l, h, hd);
        }
        removed.push(gone);
    }
    m.apply_masks();
    Ok(removed)
}

/// `‖FFW1 row i‖₁ + ‖FFW2 column i‖₁` for every layer and hidden unit.
pub fn row_scores<T: Real>(m: &TransformerModel<T>) -> Array2<f64> {
    let cfg = &m.config;
    Array2::from_shape_fn((cfg.n_layers, cfg.ffw_dim), |(l, i)| {
        let b = &m.weights.blocks[l];
        l1(b.ffw1.weight.row(i)) + l1(b.ffw2.weight.column(i))
    })
}

/// Masks the `n` lowest-scoring unpruned FFW rows of every layer. At least
/// one row must survive in each layer.
pub fn prune_rows<T: Real>(m: &mut TransformerModel<T>, n: usize) -> Result<Vec<Vec<usize>>> {
    for (l, row) in m.masks.rows.outer_iter().enumerate() {
        let left = row.iter().filter(|&&k| k).count();
        if n >= left {
            return Err(Error::OverPruning(format!("layer {l} has {left} rows left, asked to remove {n}")));
        }
    }
    let scores = row_scores(m);
    let mut removed = Vec::with_capacity(m.config.n_layers);
    for l in 0..m.config.n_layers {
        let row: Vec<f64> = scores.row(l).to_vec();
        let mut live: Vec<usize> = (0..m.config.ffw_dim).filter(|&i| m.masks.rows[[l, i]]).collect();
        live.sort_by(by_score(&row));
        let mut gone = live[..n].to_vec();
        gone.sort_unstable();
        for &i in &gone {
            m.masks.drop_row(l, i);
        }
        removed.push(gone);
    }
    m.apply_masks();
    Ok(removed)
}

/// Entries pruned by one weight event when `kept` remain: `fraction` of
/// them rounded to the nearest integer, at least one.
pub fn weight_event_size(kept: usize, fraction: f64) -> usize {
    ((fraction * kept as f64).round() as usize).clamp(1.min(kept), kept)
}

/// Masks the `fraction` of currently kept block-linear weights and biases
/// with the smallest magnitude, under one global threshold. Entries are
/// indexed block by block in `q, k, v, o, ffw1, ffw2` order, weight
/// row-major before bias; ties go to the lower index. Returns the removed
/// indices per layer (local to the layer's index space), ascending.
pub fn weight_prune_event<T: Real>(m: &mut TransformerModel<T>, fraction: f64) -> Result<Vec<Vec<usize>>> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidParams(format!("prune fraction {fraction} outside (0, 1)")));
    }
    // (|value|, layer, index within layer)
    let mut pool: Vec<(f64, usize, usize)> = Vec::with_capacity(m.masks.kept_prunable());
    for (l, (block, bm)) in m.weights.blocks.iter().zip(&m.masks.blocks).enumerate() {
        let mut idx = 0;
        for (lin, mask) in block.linears().into_iter().zip(bm.iter()) {
            let entries = lin
                .weight
                .iter()
                .zip(mask.weight.iter())
                .chain(lin.bias.iter().zip(mask.bias.iter()));
            for (v, &keep) in entries {
                if keep {
                    pool.push((v.as_f64().abs(), l, idx));
                }
                idx += 1;
            }
        }
    }
    let n = weight_event_size(pool.len(), fraction);
    let mut removed = vec![Vec::new(); m.config.n_layers];
    if n == 0 {
        return Ok(removed);
    }
    let cmp = |a: &(f64, usize, usize), b: &(f64, usize, usize)| a.0.total_cmp(&b.0).then((a.1, a.2).cmp(&(b.1, b.2)));
    if n < pool.len() {
        pool.select_nth_unstable_by(n - 1, cmp);
    }
    for &(_, l, i) in &pool[..n] {
        removed[l].push(i);
    }
    for (l, gone) in removed.iter_mut().enumerate() {
        gone.sort_unstable();
        mask_local_entries(&mut m.masks.blocks[l], gone);
    }
    m.apply_masks();
    Ok(removed)
}

/// Clears the layer-local indices `sorted` in a block's linear masks.
pub(crate) fn mask_local_entries(bm: &mut crate::model::BlockMasks, sorted: &[usize]) {
    let mut offset = 0;
    let mut it = sorted.iter().peekable();
    for mask in bm.iter_mut() {
        let nw = mask.weight.len();
        let nb = mask.bias.len();
        let cols = mask.weight.ncols();
        while let Some(&&i) = it.peek() {
            if i >= offset + nw + nb {
                break;
            }
            let local = i - offset;
            if local < nw {
                mask.weight[[local / cols, local % cols]] = false;
            } else {
                mask.bias[local - nw] = false;
            }
            it.next();
        }
        offset += nw + nb;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, ModelConfig, Positional};

    fn toy(n_layers: usize, n_heads: usize, ffw: usize) -> ModelConfig {
        ModelConfig {
            n_layers,
            hidden_dim: 2 * n_heads,
            ffw_dim: ffw,
            n_heads,
            n_clusters: 3,
            input_dim: 3,
            positional: Positional::Sinusoidal,
        }
    }

    #[test]
    fn zero_removal_is_identity() {
        let mut m = init_model::<f64>(&toy(2, 4, 8), 1).unwrap();
        let before = m.clone();
        assert_eq!(prune_heads(&mut m, 0).unwrap(), vec![Vec::<usize>::new(); 2]);
        assert_eq!(m, before);
    }

    #[test]
    fn hand_set_heads() {
        // 2 layers x 4 heads, head_dim 2; head h of layer l gets magnitude
        // set so the weakest heads are known in advance.
        let mut m = init_model::<f64>(&toy(2, 4, 8), 1).unwrap();
        let mags = [[3.0, 1.0, 2.0, 4.0], [0.5, 0.5, 9.0, 0.1]];
        for (l, row) in mags.iter().enumerate() {
            let b = &mut m.weights.blocks[l];
            for (h, &g) in row.iter().enumerate() {
                for lin in [&mut b.q, &mut b.k, &mut b.v] {
                    lin.weight.slice_mut(s![2 * h..2 * h + 2, ..]).fill(g);
                    lin.bias.slice_mut(s![2 * h..2 * h + 2]).fill(0.0);
                }
                b.o.weight.slice_mut(s![.., 2 * h..2 * h + 2]).fill(g);
            }
        }
        let removed = prune_heads(&mut m, 2).unwrap();
        // layer 1 ties 0.5/0.5 but 0.1 is smaller; then lower index wins
        assert_eq!(removed, vec![vec![1, 2], vec![0, 3]]);
        assert_eq!(m.masks.remaining_heads(), 4);
        assert!(prune_heads(&mut m, 3).is_err());
    }

    #[test]
    fn hand_set_rows() {
        let mut m = init_model::<f64>(&toy(1, 2, 5), 2).unwrap();
        let b = &mut m.weights.blocks[0];
        for (i, g) in [5.0, 1.0, 3.0, 1.0, 2.0].into_iter().enumerate() {
            b.ffw1.weight.row_mut(i).fill(g);
            b.ffw2.weight.column_mut(i).fill(g);
        }
        assert_eq!(prune_rows(&mut m, 2).unwrap(), vec![vec![1, 3]]);
        // masked rows are not candidates again
        assert_eq!(prune_rows(&mut m, 1).unwrap(), vec![vec![4]]);
        assert!(prune_rows(&mut m, 2).is_err());
        assert_eq!(m.masks.remaining_rows(), 2);
    }

    #[test]
    fn weight_event_takes_smallest_magnitudes() {
        let mut m = init_model::<f64>(&toy(1, 1, 1), 3).unwrap();
        // d_m 2, ffw 1: prunable = 4 * (4 + 2) + (2 + 1) + (2 + 2) = 31
        assert_eq!(m.masks.total_prunable(), 31);
        let mut v = 1.0;
        for lin in m.weights.blocks[0].linears_mut() {
            for w in lin.weight.iter_mut().chain(lin.bias.iter_mut()) {
                *w = if (v as usize).is_multiple_of(2) { -v } else { v };
                v += 1.0;
            }
        }
        let removed = weight_prune_event(&mut m, 0.5).unwrap();
        assert_eq!(removed[0], (0..16).collect::<Vec<_>>());
        assert_eq!(m.masks.kept_prunable(), 15);
        assert_eq!(m.weights.blocks[0].q.weight[[0, 0]], 0.0);
        assert!(weight_prune_event(&mut m, 1.0).is_err());
    }

    #[test]
    fn two_twenty_percent_events_compose() {
        let mut m = init_model::<f64>(&toy(2, 2, 24), 5).unwrap();
        let total = m.masks.total_prunable();
        assert_eq!(total % 25, 0, "{total}");
        weight_prune_event(&mut m, 0.2).unwrap();
        weight_prune_event(&mut m, 0.2).unwrap();
        assert!((m.sparsity() - 0.36).abs() < 1e-12, "{}", m.sparsity());
    }
}
