//! Speech embedding association test.
//!
//! Each stimulus is reduced to one vector (time-mean per layer, then mean
//! across layers). The association score of a target vector `w` is
//! `mean_a cos(w, a) - mean_b cos(w, b)`, and the effect size is the
//! difference of mean scores between the two target groups divided by the
//! sample standard deviation of the scores over both groups.

use std::collections::HashSet;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSequence {
    /// One `n_frames x dim` matrix per recorded representation level.
    pub layers: Vec<Array2<f64>>,
    pub stimulus_id: String,
    pub group_label: String,
}

impl EmbeddingSequence {
    pub fn new(layers: Vec<Array2<f64>>, stimulus_id: impl Into<String>, group_label: impl Into<String>) -> Result<Self> {
        let stimulus_id = stimulus_id.into();
        if let Some(first) = layers.first() {
            let shape = first.dim();
            if let Some(bad) = layers.iter().find(|l| l.dim() != shape) {
                return Err(Error::DimensionMismatch {
                    expected: shape.1,
                    got: bad.ncols(),
                    context: "layers of one stimulus must share shape",
                });
            }
        }
        if layers.iter().any(|l| l.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite(format!("embedding of {stimulus_id}")));
        }
        Ok(Self {
            layers,
            stimulus_id,
            group_label: group_label.into(),
        })
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.ncols())
    }
}

/// How per-layer time-means are combined into one stimulus vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Element-wise mean of the per-layer time-means.
    #[default]
    LayerMean,
    /// Per-layer time-means concatenated.
    Concatenate,
    /// Effect size is the mean of the per-layer effect sizes.
    PerLayerMeanD,
}

fn time_mean(layer: &Array2<f64>, id: &str) -> Result<Array1<f64>> {
    if layer.nrows() == 0 {
        return Err(Error::EmptySequence(id.to_string()));
    }
    Ok(layer.mean_axis(Axis(0)).expect("non-empty"))
}

pub fn layer_means(e: &EmbeddingSequence) -> Result<Vec<Array1<f64>>> {
    if e.layers.is_empty() {
        return Err(Error::EmptySequence(e.stimulus_id.clone()));
    }
    e.layers.iter().map(|l| time_mean(l, &e.stimulus_id)).collect()
}

pub fn aggregate_embedding(e: &EmbeddingSequence) -> Result<Array1<f64>> {
    let means = layer_means(e)?;
    let mut acc = Array1::zeros(means[0].len());
    for m in &means {
        acc += m;
    }
    Ok(acc / means.len() as f64)
}

fn aggregate_with(e: &EmbeddingSequence, how: Aggregation) -> Result<Array1<f64>> {
    match how {
        Aggregation::LayerMean | Aggregation::PerLayerMeanD => aggregate_embedding(e),
        Aggregation::Concatenate => {
            let means = layer_means(e)?;
            Ok(means.iter().flat_map(|m| m.iter().copied()).collect())
        }
    }
}

fn cosine(u: ArrayView1<f64>, v: ArrayView1<f64>) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::DimensionMismatch {
            expected: u.len(),
            got: v.len(),
            context: "cosine operands",
        });
    }
    let nu = u.dot(&u).sqrt();
    let nv = v.dot(&v).sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok(u.dot(&v) / (nu * nv))
}

pub fn association_score(w: ArrayView1<f64>, a: &[Array1<f64>], b: &[Array1<f64>]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyInput("attribute sets must be non-empty".into()));
    }
    let mean_cos = |set: &[Array1<f64>]| -> Result<f64> {
        let mut sum = 0.0;
        for v in set {
            sum += cosine(w, v.view())?;
        }
        Ok(sum / set.len() as f64)
    };
    Ok(mean_cos(a)? - mean_cos(b)?)
}

/// Mean difference over sample standard deviation, with the first `n_x`
/// scores belonging to X.
fn d_from_scores(scores: &[f64], n_x: usize) -> Result<f64> {
    let n = scores.len();
    if n < 2 || n_x == 0 || n_x == n {
        return Err(Error::InsufficientTargets(n));
    }
    let sd = sample_sd(scores);
    if !(sd > 0.0) || !sd.is_finite() {
        return Err(Error::DegenerateScores);
    }
    let mean_x = scores[..n_x].iter().sum::<f64>() / n_x as f64;
    let mean_y = scores[n_x..].iter().sum::<f64>() / (n - n_x) as f64;
    Ok((mean_x - mean_y) / sd)
}

fn sample_sd(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (v.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

fn target_scores(x: &[Array1<f64>], y: &[Array1<f64>], a: &[Array1<f64>], b: &[Array1<f64>]) -> Result<Vec<f64>> {
    x.iter().chain(y).map(|w| association_score(w.view(), a, b)).collect()
}

/// Effect size on already-aggregated vectors.
pub fn effect_size_vectors(x: &[Array1<f64>], y: &[Array1<f64>], a: &[Array1<f64>], b: &[Array1<f64>]) -> Result<f64> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::InsufficientTargets(x.len() + y.len()));
    }
    let scores = target_scores(x, y, a, b)?;
    d_from_scores(&scores, x.len())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Magnitude {
    Negligible,
    Small,
    Medium,
    Large,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BiasLabel {
    Reverse,
    Negligible,
    Small,
    Medium,
    Large,
}

impl BiasLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            BiasLabel::Reverse => "reverse",
            BiasLabel::Negligible => "negligible",
            BiasLabel::Small => "small",
            BiasLabel::Medium => "medium",
            BiasLabel::Large => "large",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Classification {
    pub magnitude: Magnitude,
    /// `d < -0.20`.
    pub reverse: bool,
}

impl Classification {
    pub fn label(&self) -> BiasLabel {
        if self.reverse {
            return BiasLabel::Reverse;
        }
        match self.magnitude {
            Magnitude::Negligible => BiasLabel::Negligible,
            Magnitude::Small => BiasLabel::Small,
            Magnitude::Medium => BiasLabel::Medium,
            Magnitude::Large => BiasLabel::Large,
        }
    }
}

impl std::fmt::Display for Classification {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let mag = match self.magnitude {
            Magnitude::Negligible => "negligible",
            Magnitude::Small => "small",
            Magnitude::Medium => "medium",
            Magnitude::Large => "large",
        };
        if self.reverse {
            write!(f, "reverse ({mag})")
        } else {
            f.write_str(mag)
        }
    }
}

pub const SMALL_THRESHOLD: f64 = 0.20;
pub const MEDIUM_THRESHOLD: f64 = 0.50;
pub const LARGE_THRESHOLD: f64 = 0.80;

/// Thresholds are strict: a value must be larger than 0.20 / 0.50 / 0.80 to
/// reach the next class.
pub fn classify_bias(d: f64) -> Result<Classification> {
    if !d.is_finite() {
        return Err(Error::NonFinite(format!("effect size {d}")));
    }
    let m = d.abs();
    let magnitude = if m > LARGE_THRESHOLD {
        Magnitude::Large
    } else if m > MEDIUM_THRESHOLD {
        Magnitude::Medium
    } else if m > SMALL_THRESHOLD {
        Magnitude::Small
    } else {
        Magnitude::Negligible
    };
    Ok(Classification {
        magnitude,
        reverse: d < -SMALL_THRESHOLD,
    })
}

/// Target sets X, Y and attribute sets A, B for one bias category.
#[derive(Debug, Clone)]
pub struct BiasTest {
    pub category: String,
    pub x: Vec<EmbeddingSequence>,
    pub y: Vec<EmbeddingSequence>,
    pub a: Vec<EmbeddingSequence>,
    pub b: Vec<EmbeddingSequence>,
}

impl BiasTest {
    pub fn new(
        category: impl Into<String>,
        x: Vec<EmbeddingSequence>,
        y: Vec<EmbeddingSequence>,
        a: Vec<EmbeddingSequence>,
        b: Vec<EmbeddingSequence>,
    ) -> Result<Self> {
        let category = category.into();
        if x.is_empty() || y.is_empty() {
            return Err(Error::InsufficientTargets(x.len() + y.len()));
        }
        if a.is_empty() || b.is_empty() {
            return Err(Error::EmptyInput(format!("{category}: attribute sets must be non-empty")));
        }
        let mut seen = HashSet::new();
        for e in x.iter().chain(&y).chain(&a).chain(&b) {
            if !seen.insert(e.stimulus_id.as_str()) {
                return Err(Error::InvalidParams(format!(
                    "{category}: stimulus {} appears in more than one role",
                    e.stimulus_id
                )));
            }
        }
        if x.len() != y.len() {
            log::warn!("{category}: unbalanced targets |X|={} |Y|={}", x.len(), y.len());
        }
        if a.len() < 2 || b.len() < 2 {
            log::warn!("{category}: fewer than two stimuli in an attribute set");
        }
        Ok(Self { category, x, y, a, b })
    }

    pub fn n_targets(&self) -> usize {
        self.x.len() + self.y.len()
    }

    /// Same test with X and Y exchanged.
    pub fn swap_targets(&self) -> Self {
        Self {
            category: self.category.clone(),
            x: self.y.clone(),
            y: self.x.clone(),
            a: self.a.clone(),
            b: self.b.clone(),
        }
    }

    /// Same test with A and B exchanged.
    pub fn swap_attributes(&self) -> Self {
        Self {
            category: self.category.clone(),
            x: self.x.clone(),
            y: self.y.clone(),
            a: self.b.clone(),
            b: self.a.clone(),
        }
    }

    fn vectors(&self, how: Aggregation) -> Result<[Vec<Array1<f64>>; 4]> {
        let agg = |set: &[EmbeddingSequence]| -> Result<Vec<Array1<f64>>> { set.iter().map(|e| aggregate_with(e, how)).collect() };
        Ok([agg(&self.x)?, agg(&self.y)?, agg(&self.a)?, agg(&self.b)?])
    }

    fn layer_vectors(&self, layer: usize) -> Result<[Vec<Array1<f64>>; 4]> {
        let pick = |set: &[EmbeddingSequence]| -> Result<Vec<Array1<f64>>> {
            set.iter()
                .map(|e| {
                    let l = e.layers.get(layer).ok_or(Error::DimensionMismatch {
                        expected: layer + 1,
                        got: e.n_layers(),
                        context: "layer count",
                    })?;
                    time_mean(l, &e.stimulus_id)
                })
                .collect()
        };
        Ok([pick(&self.x)?, pick(&self.y)?, pick(&self.a)?, pick(&self.b)?])
    }

    fn common_layer_count(&self) -> usize {
        self.x
            .iter()
            .chain(&self.y)
            .chain(&self.a)
            .chain(&self.b)
            .map(EmbeddingSequence::n_layers)
            .min()
            .unwrap_or(0)
    }

    /// Same test with every layer shifted by minus the mean, over all
    /// stimuli in all four sets, of the per-stimulus time means. Removes the
    /// component shared by every embedding, which otherwise dominates the
    /// cosines of uncentered features such as MFCC.
    pub fn centered(&self) -> Result<Self> {
        let n_layers = self.common_layer_count();
        let all = || self.x.iter().chain(&self.y).chain(&self.a).chain(&self.b);
        let n = all().count() as f64;
        let mut means = Vec::with_capacity(n_layers);
        for layer in 0..n_layers {
            let [x, y, a, b] = self.layer_vectors(layer)?;
            let mut sum = Array1::<f64>::zeros(x[0].len());
            for v in x.iter().chain(&y).chain(&a).chain(&b) {
                sum += v;
            }
            means.push(sum / n);
        }
        let shift = |set: &[EmbeddingSequence]| -> Result<Vec<EmbeddingSequence>> {
            set.iter()
                .map(|e| {
                    let layers = e.layers[..n_layers]
                        .iter()
                        .zip(&means)
                        .map(|(l, mu)| l - &mu.view().insert_axis(ndarray::Axis(0)))
                        .collect();
                    EmbeddingSequence::new(layers, e.stimulus_id.clone(), e.group_label.clone())
                })
                .collect()
        };
        Ok(Self {
            category: self.category.clone(),
            x: shift(&self.x)?,
            y: shift(&self.y)?,
            a: shift(&self.a)?,
            b: shift(&self.b)?,
        })
    }

    /// Association score of every target, X first.
    pub fn target_scores(&self, how: Aggregation) -> Result<Vec<f64>> {
        let [x, y, a, b] = self.vectors(how)?;
        target_scores(&x, &y, &a, &b)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectSizeReport {
    pub category: String,
    pub d_aggregate: f64,
    pub d_per_layer: Vec<f64>,
    pub classification: Classification,
    pub label: BiasLabel,
    pub aggregation: Aggregation,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub p_value: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub n_permutations: Option<usize>,
}

pub fn effect_size(t: &BiasTest) -> Result<EffectSizeReport> {
    effect_size_with(t, Aggregation::LayerMean)
}

pub fn effect_size_with(t: &BiasTest, how: Aggregation) -> Result<EffectSizeReport> {
    let n_layers = t.common_layer_count();
    let mut d_per_layer = Vec::with_capacity(n_layers);
    for layer in 0..n_layers {
        let [x, y, a, b] = t.layer_vectors(layer)?;
        d_per_layer.push(effect_size_vectors(&x, &y, &a, &b)?);
    }
    let d_aggregate = match how {
        Aggregation::PerLayerMeanD => {
            if d_per_layer.is_empty() {
                return Err(Error::EmptySequence(t.category.clone()));
            }
            d_per_layer.iter().sum::<f64>() / d_per_layer.len() as f64
        }
        _ => {
            let [x, y, a, b] = t.vectors(how)?;
            effect_size_vectors(&x, &y, &a, &b)?
        }
    };
    let classification = classify_bias(d_aggregate)?;
    Ok(EffectSizeReport {
        category: t.category.clone(),
        d_aggregate,
        d_per_layer,
        classification,
        label: classification.label(),
        aggregation: how,
        p_value: None,
        n_permutations: None,
    })
}

/// Largest target count for which all equal-size partitions are enumerated.
pub const ENUMERATION_LIMIT: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PermutationResult {
    pub p_value: f64,
    /// Partitions evaluated (all of them when enumerated).
    pub n_permutations: usize,
    pub enumerated: bool,
}

/// One-sided permutation test of `d` over re-partitions of X ∪ Y into sets
/// of the original sizes. Up to [`ENUMERATION_LIMIT`] targets every
/// partition is visited; above it `n_perm` random partitions are drawn and
/// the p-value is add-one smoothed.
pub fn permutation_test(t: &BiasTest, n_perm: usize, seed: u64) -> Result<PermutationResult> {
    let scores = t.target_scores(Aggregation::LayerMean)?;
    permutation_test_scores(&scores, t.x.len(), n_perm, seed)
}

pub fn permutation_test_scores(scores: &[f64], n_x: usize, n_perm: usize, seed: u64) -> Result<PermutationResult> {
    if n_perm == 0 {
        return Err(Error::InvalidParams("n_perm must be at least 1".into()));
    }
    d_from_scores(scores, n_x)?;
    let n = scores.len();
    let sd = sample_sd(scores);
    let total: f64 = scores.iter().sum();
    // d of a partition depends only on the sum over its X members
    let d_of = |x_idx: &[usize]| -> f64 {
        let sum_x: f64 = x_idx.iter().map(|&i| scores[i]).sum();
        let mean_x = sum_x / n_x as f64;
        let mean_y = (total - sum_x) / (n - n_x) as f64;
        (mean_x - mean_y) / sd
    };
    let first: Vec<usize> = (0..n_x).collect();
    let d_ref = d_of(&first);
    let tol = 1e-12 * d_ref.abs().max(1.0);

    if n <= ENUMERATION_LIMIT {
        let mut idx = first;
        let mut hits = 0usize;
        let mut count = 0usize;
        loop {
            count += 1;
            if d_of(&idx) >= d_ref - tol {
                hits += 1;
            }
            if !next_combination(&mut idx, n) {
                break;
            }
        }
        return Ok(PermutationResult {
            p_value: hits as f64 / count as f64,
            n_permutations: count,
            enumerated: true,
        });
    }

    let mut rng = rng::stream(seed, "perm");
    let mut pool: Vec<usize> = (0..n).collect();
    let mut hits = 0usize;
    for _ in 0..n_perm {
        pool.shuffle(&mut rng);
        let mut x_idx = pool[..n_x].to_vec();
        x_idx.sort_unstable();
        if d_of(&x_idx) >= d_ref - tol {
            hits += 1;
        }
    }
    Ok(PermutationResult {
        p_value: (1 + hits) as f64 / (1 + n_perm) as f64,
        n_permutations: n_perm,
        enumerated: false,
    })
}

/// Advances `idx` (strictly increasing, values `< n`) to the next
/// lexicographic k-combination.
fn next_combination(idx: &mut [usize], n: usize) -> bool {
    let k = idx.len();
    let mut i = k;
    while i > 0 {
        i -= 1;
        if idx[i] < n - k + i {
            idx[i] += 1;
            for j in i + 1..k {
                idx[j] = idx[j - 1] + 1;
            }
            return true;
        }
    }
    false
}

/// Effect size plus permutation p-value.
pub fn evaluate(t: &BiasTest, n_perm: usize, seed: u64) -> Result<EffectSizeReport> {
    let mut report = effect_size(t)?;
    if n_perm > 0 {
        let perm = permutation_test(t, n_perm, seed)?;
        report.p_value = Some(perm.p_value);
        report.n_permutations = Some(perm.n_permutations);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};

    fn seq(id: &str, layers: Vec<Array2<f64>>) -> EmbeddingSequence {
        EmbeddingSequence::new(layers, id, "g").unwrap()
    }

    fn single(id: &str, v: &[f64]) -> EmbeddingSequence {
        seq(id, vec![Array2::from_shape_vec((1, v.len()), v.to_vec()).unwrap()])
    }

    #[test]
    fn aggregate_constant_and_two_layers() {
        let v = [0.5, -1.0, 2.0];
        let e = seq("a", vec![Array2::from_shape_fn((4, 3), |(_, j)| v[j])]);
        assert_eq!(aggregate_embedding(&e).unwrap(), array![0.5, -1.0, 2.0]);
        let e = seq("b", vec![array![[1.0, 0.0], [3.0, 2.0]], array![[0.0, 4.0], [0.0, 4.0]]]);
        // time means (2,1) and (0,4)
        assert_eq!(aggregate_embedding(&e).unwrap(), array![1.0, 2.5]);
    }

    #[test]
    fn aggregate_matches_double_loop() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let layers: Vec<Array2<f64>> = (0..3)
            .map(|_| Array2::from_shape_fn((7, 5), |_| rng.random_range(-2.0..2.0)))
            .collect();
        let e = seq("r", layers.clone());
        let got = aggregate_embedding(&e).unwrap();
        for j in 0..5 {
            let mut outer = 0.0;
            for l in &layers {
                let mut inner = 0.0;
                for t in 0..7 {
                    inner += l[[t, j]];
                }
                outer += inner / 7.0;
            }
            assert!((got[j] - outer / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_sequence_errors() {
        let e = seq("e", vec![Array2::zeros((0, 3))]);
        assert!(matches!(aggregate_embedding(&e), Err(Error::EmptySequence(_))));
        let e = seq("e2", vec![]);
        assert!(matches!(aggregate_embedding(&e), Err(Error::EmptySequence(_))));
    }

    #[test]
    fn association_basic_cases() {
        let w = array![1.0, 0.0];
        let s = association_score(w.view(), &[array![1.0, 0.0]], &[array![0.0, 1.0]]).unwrap();
        assert_eq!(s, 1.0);
        let set = vec![array![0.3, 0.7], array![-1.0, 0.2]];
        let s = association_score(array![0.4, -0.9].view(), &set, &set).unwrap();
        assert_eq!(s, 0.0);
        let err = association_score(array![0.0, 0.0].view(), &set, &set).unwrap_err();
        assert!(matches!(err, Error::ZeroVector));
    }

    #[test]
    fn association_matches_pairwise_loop() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let mut draw = || Array1::from_shape_fn(8, |_| rng.random_range(-1.0..1.0));
        let w = draw();
        let a: Vec<_> = (0..6).map(|_| draw()).collect();
        let b: Vec<_> = (0..6).map(|_| draw()).collect();
        let cos = |u: &Array1<f64>, v: &Array1<f64>| {
            let mut dot = 0.0;
            let mut nu = 0.0;
            let mut nv = 0.0;
            for i in 0..u.len() {
                dot += u[i] * v[i];
                nu += u[i] * u[i];
                nv += v[i] * v[i];
            }
            dot / (nu.sqrt() * nv.sqrt())
        };
        let oracle = a.iter().map(|x| cos(&w, x)).sum::<f64>() / 6.0 - b.iter().map(|x| cos(&w, x)).sum::<f64>() / 6.0;
        let got = association_score(w.view(), &a, &b).unwrap();
        assert!((got - oracle).abs() < 1e-12);
        assert!((-2.0..=2.0).contains(&got));
    }

    #[test]
    fn hand_case_is_root_two() {
        let d = effect_size_vectors(&[array![1.0, 0.0]], &[array![0.0, 1.0]], &[array![1.0, 0.0]], &[array![0.0, 1.0]]).unwrap();
        assert!((d - std::f64::consts::SQRT_2).abs() < 1e-12);
    }

    #[test]
    fn identical_target_sets_give_zero() {
        let x = vec![array![1.0, 0.2], array![0.1, 1.0], array![0.5, 0.5]];
        let a = vec![array![1.0, 0.0], array![0.9, 0.1]];
        let b = vec![array![0.0, 1.0], array![0.2, 0.8]];
        let d = effect_size_vectors(&x, &x, &a, &b).unwrap();
        assert_eq!(d, 0.0);
    }

    #[test]
    fn degenerate_and_insufficient() {
        let a = vec![array![1.0, 0.0]];
        let b = vec![array![0.0, 1.0]];
        let same = vec![array![1.0, 1.0]];
        assert!(matches!(effect_size_vectors(&same, &same, &a, &b), Err(Error::DegenerateScores)));
        assert!(matches!(
            effect_size_vectors(&same, &[], &a, &b),
            Err(Error::InsufficientTargets(1))
        ));
    }

    #[test]
    fn classification_boundaries() {
        let label = |d: f64| classify_bias(d).unwrap().label();
        assert_eq!(label(1.21), BiasLabel::Large);
        assert_eq!(label(0.50), BiasLabel::Small);
        assert_eq!(label(0.80), BiasLabel::Medium);
        assert_eq!(label(0.20), BiasLabel::Negligible);
        assert_eq!(label(-0.20), BiasLabel::Negligible);
        let c = classify_bias(-0.32).unwrap();
        assert_eq!(c.label(), BiasLabel::Reverse);
        assert_eq!(c.magnitude, Magnitude::Small);
        assert_eq!(c.to_string(), "reverse (small)");
        assert!(classify_bias(f64::NAN).is_err());
        assert!(classify_bias(f64::INFINITY).is_err());
    }

    #[test]
    fn roles_must_be_disjoint() {
        let err = BiasTest::new(
            "g",
            vec![single("s1", &[1.0, 0.0])],
            vec![single("s1", &[0.0, 1.0])],
            vec![single("a", &[1.0, 0.0])],
            vec![single("b", &[0.0, 1.0])],
        )
        .unwrap_err();
        assert!(matches!(err, Error::InvalidParams(_)));
    }

    #[test]
    fn two_targets_enumerate_two_partitions() {
        let t = BiasTest::new(
            "g",
            vec![single("x", &[1.0, 0.3])],
            vec![single("y", &[0.2, 1.0])],
            vec![single("a", &[1.0, 0.0]), single("a2", &[0.8, 0.1])],
            vec![single("b", &[0.0, 1.0]), single("b2", &[0.1, 0.9])],
        )
        .unwrap();
        let r = permutation_test(&t, 100, 0).unwrap();
        assert!(r.enumerated);
        assert_eq!(r.n_permutations, 2);
        assert!(r.p_value >= 0.5);
        let r = permutation_test(&t.swap_targets(), 100, 0).unwrap();
        assert!(r.p_value >= 0.5);
    }

    #[test]
    fn enumeration_counts_binomial() {
        let scores = [0.1, 0.5, -0.2, 0.9, 0.3, -0.7, 0.05, 0.4];
        let r = permutation_test_scores(&scores, 4, 10, 0).unwrap();
        assert_eq!(r.n_permutations, 70);
        let mut idx = vec![0, 1, 2];
        let mut n = 1;
        while next_combination(&mut idx, 6) {
            n += 1;
        }
        assert_eq!(n, 20);
    }

    #[test]
    fn sampled_test_is_deterministic() {
        let scores: Vec<f64> = (0..30).map(|i| ((i * 37) % 11) as f64 / 10.0).collect();
        let a = permutation_test_scores(&scores, 15, 200, 9).unwrap();
        let b = permutation_test_scores(&scores, 15, 200, 9).unwrap();
        assert_eq!(a, b);
        assert!(!a.enumerated);
        assert!(a.p_value > 0.0 && a.p_value <= 1.0);
        assert!(permutation_test_scores(&scores, 15, 0, 9).is_err());
    }

    #[test]
    fn report_serializes() {
        let t = BiasTest::new(
            "Gender",
            vec![single("x", &[1.0, 0.3]), single("x2", &[0.9, 0.2])],
            vec![single("y", &[0.2, 1.0]), single("y2", &[0.1, 0.7])],
            vec![single("a", &[1.0, 0.0]), single("a2", &[0.8, 0.1])],
            vec![single("b", &[0.0, 1.0]), single("b2", &[0.1, 0.9])],
        )
        .unwrap();
        let r = evaluate(&t, 50, 1).unwrap();
        assert_eq!(r.n_permutations, Some(6));
        let json = serde_json::to_string(&r).unwrap();
        let back: EffectSizeReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
        assert_eq!(r.d_per_layer.len(), 1);
        assert!((r.d_per_layer[0] - r.d_aggregate).abs() < 1e-12);
    }
}
