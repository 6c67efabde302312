//! Convolution-free masked-prediction speech encoder.
//!
//! Log-mel frames are projected to the hidden size, masked frames are
//! replaced with a learned embedding, a positional term is added, and a stack
//! of pre-norm transformer blocks follows. Every block output, plus the
//! projection output, is a representation level for bias evaluation. A
//! prediction head over k-means acoustic units sits on top for pretraining.
//!
//! Weight tensors follow the `(out, in)` layout, so "row i of FFW1" and
//! "column i of FFW2" both belong to hidden unit `i`.

mod checkpoint;
pub(crate) mod forward;
mod kmeans;
mod masking;
pub(crate) mod train;

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::{Array1, Array2, Array3, ArrayViewD, ArrayViewMutD};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use forward::{backward, forward, forward_cached, head_backward, head_forward, ForwardCache, LmHeadCache};
pub use kmeans::{fit_cluster_targets, ClusterModel};
pub use masking::{sample_mask, MaskParams};
pub use train::{adam_step, cross_entropy, masked_prediction_loss, pretrain_step, AdamConfig, BatchSampler, TrainState, Utterance};

/// Floating-point type the model computes in.
pub trait Real:
    num_traits::Float
    + num_traits::FromPrimitive
    + ndarray::LinalgScalar
    + ndarray::ScalarOperand
    + Debug
    + Send
    + Sync
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + 'static
{
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite cast")
    }
}

impl Real for f32 {}
impl Real for f64 {}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Positional {
    /// Fixed additive sinusoidal encoding.
    Sinusoidal,
    /// Grouped temporal convolution followed by GELU, added residually.
    Conv { kernel: usize, groups: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub hidden_dim: usize,
    pub ffw_dim: usize,
    pub n_heads: usize,
    pub n_clusters: usize,
    pub input_dim: usize,
    pub positional: Positional,
}

impl ModelConfig {
    /// 3 layers, 640 hidden, 2048 feed-forward, 8 heads.
    pub fn small() -> Self {
        Self::preset(3, 640, 2048, 8)
    }

    /// 12 layers, 384 hidden, 768 feed-forward, 8 heads.
    pub fn slim() -> Self {
        Self::preset(12, 384, 768, 8)
    }

    /// 12 layers, 768 hidden, 3072 feed-forward, 12 heads.
    pub fn base() -> Self {
        Self::preset(12, 768, 3072, 12)
    }

    fn preset(n_layers: usize, hidden_dim: usize, ffw_dim: usize, n_heads: usize) -> Self {
        Self {
            n_layers,
            hidden_dim,
            ffw_dim,
            n_heads,
            n_clusters: 64,
            input_dim: 80,
            positional: Positional::Conv { kernel: 128, groups: 16 },
        }
    }

    /// Desk-scale model for the end-to-end experiments.
    pub fn tiny() -> Self {
        Self {
            n_layers: 4,
            hidden_dim: 32,
            ffw_dim: 96,
            n_heads: 4,
            n_clusters: 64,
            input_dim: 80,
            positional: Positional::Conv { kernel: 16, groups: 4 },
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "small" => Ok(Self::small()),
            "slim" => Ok(Self::slim()),
            "base" => Ok(Self::base()),
            "tiny" => Ok(Self::tiny()),
            other => Err(Error::InvalidConfig(format!("unknown model config {other:?}"))),
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("n_layers", self.n_layers),
            ("hidden_dim", self.hidden_dim),
            ("ffw_dim", self.ffw_dim),
            ("n_heads", self.n_heads),
            ("n_clusters", self.n_clusters),
            ("input_dim", self.input_dim),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidConfig(format!("{name} must be positive")));
        }
        if !self.hidden_dim.is_multiple_of(self.n_heads) {
            return Err(Error::InvalidConfig(format!(
                "hidden_dim {} not divisible by n_heads {}",
                self.hidden_dim, self.n_heads
            )));
        }
        if let Positional::Conv { kernel, groups } = self.positional {
            if kernel == 0 || groups == 0 || !self.hidden_dim.is_multiple_of(groups) {
                return Err(Error::InvalidConfig(format!(
                    "positional conv kernel {kernel} / groups {groups} invalid for hidden_dim {}",
                    self.hidden_dim
                )));
            }
        }
        Ok(())
    }

    /// Trainable parameters, computed from the shapes alone.
    pub fn parameter_count(&self) -> usize {
        let d = self.hidden_dim;
        let f = self.ffw_dim;
        let linear = |i: usize, o: usize| i * o + o;
        let block = 4 * linear(d, d) + linear(d, f) + linear(f, d) + 4 * d;
        let pos = match self.positional {
            Positional::Sinusoidal => 0,
            Positional::Conv { kernel, groups } => d * (d / groups) * kernel + d,
        };
        linear(self.input_dim, d) + d + pos + self.n_layers * block + 2 * d + linear(d, self.n_clusters)
    }

    /// Parameters eligible for unstructured pruning: weights and biases of
    /// the linear layers inside transformer blocks.
    pub fn prunable_count(&self) -> usize {
        let d = self.hidden_dim;
        let f = self.ffw_dim;
        self.n_layers * (4 * (d * d + d) + (d * f + f) + (f * d + d))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    /// `(out, in)`.
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: Real> Linear<T> {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Array2::zeros((output, input)),
            bias: Array1::zeros(output),
        }
    }

    pub fn output_dim(&self) -> usize {
        self.weight.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm<T> {
    pub gamma: Array1<T>,
    pub beta: Array1<T>,
}

impl<T: Real> LayerNorm<T> {
    fn identity(dim: usize) -> Self {
        Self {
            gamma: Array1::ones(dim),
            beta: Array1::zeros(dim),
        }
    }

    fn zeros(dim: usize) -> Self {
        Self {
            gamma: Array1::zeros(dim),
            beta: Array1::zeros(dim),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosConv<T> {
    /// `(hidden, hidden / groups, kernel)`.
    pub weight: Array3<T>,
    pub bias: Array1<T>,
    pub groups: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block<T> {
    pub ln1: LayerNorm<T>,
    pub q: Linear<T>,
    pub k: Linear<T>,
    pub v: Linear<T>,
    pub o: Linear<T>,
    pub ln2: LayerNorm<T>,
    pub ffw1: Linear<T>,
    pub ffw2: Linear<T>,
}

impl<T: Real> Block<T> {
    pub fn linears(&self) -> [&Linear<T>; 6] {
        [&self.q, &self.k, &self.v, &self.o, &self.ffw1, &self.ffw2]
    }

    pub fn linears_mut(&mut self) -> [&mut Linear<T>; 6] {
        [&mut self.q, &mut self.k, &mut self.v, &mut self.o, &mut self.ffw1, &mut self.ffw2]
    }
}

/// Every trainable tensor of the encoder. Also used for gradients and Adam
/// moments, which share the layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights<T> {
    pub input_proj: Linear<T>,
    pub mask_embed: Array1<T>,
    pub pos_conv: Option<PosConv<T>>,
    pub blocks: Vec<Block<T>>,
    pub final_ln: LayerNorm<T>,
    pub head: Linear<T>,
}

impl<T: Real> Weights<T> {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.hidden_dim;
        let block = || Block {
            ln1: LayerNorm::zeros(d),
            q: Linear::zeros(d, d),
            k: Linear::zeros(d, d),
            v: Linear::zeros(d, d),
            o: Linear::zeros(d, d),
            ln2: LayerNorm::zeros(d),
            ffw1: Linear::zeros(d, cfg.ffw_dim),
            ffw2: Linear::zeros(cfg.ffw_dim, d),
        };
        Self {
            input_proj: Linear::zeros(cfg.input_dim, d),
            mask_embed: Array1::zeros(d),
            pos_conv: match cfg.positional {
                Positional::Sinusoidal => None,
                Positional::Conv { kernel, groups } => Some(PosConv {
                    weight: Array3::zeros((d, d / groups, kernel)),
                    bias: Array1::zeros(d),
                    groups,
                }),
            },
            blocks: (0..cfg.n_layers).map(|_| block()).collect(),
            final_ln: LayerNorm::zeros(d),
            head: Linear::zeros(d, cfg.n_clusters),
        }
    }

    /// All tensors in declared (checkpoint) order.
    pub fn tensors(&self) -> Vec<ArrayViewD<'_, T>> {
        let mut out: Vec<ArrayViewD<'_, T>> = vec![
            self.input_proj.weight.view().into_dyn(),
            self.input_proj.bias.view().into_dyn(),
            self.mask_embed.view().into_dyn(),
        ];
        if let Some(pc) = &self.pos_conv {
            out.push(pc.weight.view().into_dyn());
            out.push(pc.bias.view().into_dyn());
        }
        for b in &self.blocks {
            out.push(b.ln1.gamma.view().into_dyn());
            out.push(b.ln1.beta.view().into_dyn());
            for l in [&b.q, &b.k, &b.v, &b.o] {
                out.push(l.weight.view().into_dyn());
                out.push(l.bias.view().into_dyn());
            }
            out.push(b.ln2.gamma.view().into_dyn());
            out.push(b.ln2.beta.view().into_dyn());
            for l in [&b.ffw1, &b.ffw2] {
                out.push(l.weight.view().into_dyn());
                out.push(l.bias.view().into_dyn());
            }
        }
        out.push(self.final_ln.gamma.view().into_dyn());
        out.push(self.final_ln.beta.view().into_dyn());
        out.push(self.head.weight.view().into_dyn());
        out.push(self.head.bias.view().into_dyn());
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<ArrayViewMutD<'_, T>> {
        let mut out: Vec<ArrayViewMutD<'_, T>> = vec![
            self.input_proj.weight.view_mut().into_dyn(),
            self.input_proj.bias.view_mut().into_dyn(),
            self.mask_embed.view_mut().into_dyn(),
        ];
        if let Some(pc) = &mut self.pos_conv {
            out.push(pc.weight.view_mut().into_dyn());
            out.push(pc.bias.view_mut().into_dyn());
        }
        for b in &mut self.blocks {
            out.push(b.ln1.gamma.view_mut().into_dyn());
            out.push(b.ln1.beta.view_mut().into_dyn());
            for l in [&mut b.q, &mut b.k, &mut b.v, &mut b.o] {
                out.push(l.weight.view_mut().into_dyn());
                out.push(l.bias.view_mut().into_dyn());
            }
            out.push(b.ln2.gamma.view_mut().into_dyn());
            out.push(b.ln2.beta.view_mut().into_dyn());
            for l in [&mut b.ffw1, &mut b.ffw2] {
                out.push(l.weight.view_mut().into_dyn());
                out.push(l.bias.view_mut().into_dyn());
            }
        }
        out.push(self.final_ln.gamma.view_mut().into_dyn());
        out.push(self.final_ln.beta.view_mut().into_dyn());
        out.push(self.head.weight.view_mut().into_dyn());
        out.push(self.head.bias.view_mut().into_dyn());
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// `self += other`, tensor by tensor.
    pub fn add_assign(&mut self, other: &Weights<T>) {
        for (mut a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a += &b;
        }
    }

    pub fn scale(&mut self, factor: T) {
        for mut a in self.tensors_mut() {
            a.mapv_inplace(|v| v * factor);
        }
    }

    pub fn cast<U: Real>(&self) -> Weights<U> {
        let conv_lin = |l: &Linear<T>| Linear {
            weight: l.weight.mapv(|v| U::lit(v.as_f64())),
            bias: l.bias.mapv(|v| U::lit(v.as_f64())),
        };
        let conv_ln = |l: &LayerNorm<T>| LayerNorm {
            gamma: l.gamma.mapv(|v| U::lit(v.as_f64())),
            beta: l.beta.mapv(|v| U::lit(v.as_f64())),
        };
        Weights {
            input_proj: conv_lin(&self.input_proj),
            mask_embed: self.mask_embed.mapv(|v| U::lit(v.as_f64())),
            pos_conv: self.pos_conv.as_ref().map(|pc| PosConv {
                weight: pc.weight.mapv(|v| U::lit(v.as_f64())),
                bias: pc.bias.mapv(|v| U::lit(v.as_f64())),
                groups: pc.groups,
            }),
            blocks: self
                .blocks
                .iter()
                .map(|b| Block {
                    ln1: conv_ln(&b.ln1),
                    q: conv_lin(&b.q),
                    k: conv_lin(&b.k),
                    v: conv_lin(&b.v),
                    o: conv_lin(&b.o),
                    ln2: conv_ln(&b.ln2),
                    ffw1: conv_lin(&b.ffw1),
                    ffw2: conv_lin(&b.ffw2),
                })
                .collect(),
            final_ln: conv_ln(&self.final_ln),
            head: conv_lin(&self.head),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LinearMask {
    pub weight: Array2<bool>,
    pub bias: Array1<bool>,
}

impl LinearMask {
    fn all(input: usize, output: usize) -> Self {
        Self {
            weight: Array2::from_elem((output, input), true),
            bias: Array1::from_elem(output, true),
        }
    }

    pub fn kept(&self) -> usize {
        self.weight.iter().chain(self.bias.iter()).filter(|&&k| k).count()
    }

    pub fn len(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Keep-masks for one block, in `q, k, v, o, ffw1, ffw2` order.
pub type BlockMasks = [LinearMask; 6];

/// Pruning state. `true` = kept.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Masks {
    /// `n_layers x n_heads`.
    pub heads: Array2<bool>,
    /// `n_layers x ffw_dim`.
    pub rows: Array2<bool>,
    pub blocks: Vec<BlockMasks>,
}

impl Masks {
    pub fn all(cfg: &ModelConfig) -> Self {
        let d = cfg.hidden_dim;
        let f = cfg.ffw_dim;
        Self {
            heads: Array2::from_elem((cfg.n_layers, cfg.n_heads), true),
            rows: Array2::from_elem((cfg.n_layers, f), true),
            blocks: (0..cfg.n_layers)
                .map(|_| {
                    [
                        LinearMask::all(d, d),
                        LinearMask::all(d, d),
                        LinearMask::all(d, d),
                        LinearMask::all(d, d),
                        LinearMask::all(d, f),
                        LinearMask::all(f, d),
                    ]
                })
                .collect(),
        }
    }

    pub fn remaining_heads(&self) -> usize {
        self.heads.iter().filter(|&&k| k).count()
    }

    pub fn remaining_rows(&self) -> usize {
        self.rows.iter().filter(|&&k| k).count()
    }

    pub fn kept_prunable(&self) -> usize {
        self.blocks.iter().flat_map(|b| b.iter()).map(LinearMask::kept).sum()
    }

    pub fn total_prunable(&self) -> usize {
        self.blocks.iter().flat_map(|b| b.iter()).map(LinearMask::len).sum()
    }

    /// Fraction of prunable entries that are masked.
    pub fn sparsity(&self) -> f64 {
        let total = self.total_prunable();
        if total == 0 {
            0.0
        } else {
            1.0 - self.kept_prunable() as f64 / total as f64
        }
    }

    /// Masks out one attention head: its Q, K, V rows (weights and biases)
    /// and its O columns.
    pub fn drop_head(&mut self, layer: usize, head: usize, head_dim: usize) {
        self.heads[[layer, head]] = false;
        let span = head * head_dim..(head + 1) * head_dim;
        let masks = &mut self.blocks[layer];
        for m in &mut masks[..3] {
            for r in span.clone() {
                m.weight.row_mut(r).fill(false);
                m.bias[r] = false;
            }
        }
        for c in span {
            masks[3].weight.column_mut(c).fill(false);
        }
    }

    /// Masks out FFW hidden unit `row`: row of FFW1 (with its bias) and
    /// column of FFW2.
    pub fn drop_row(&mut self, layer: usize, row: usize) {
        self.rows[[layer, row]] = false;
        let masks = &mut self.blocks[layer];
        masks[4].weight.row_mut(row).fill(false);
        masks[4].bias[row] = false;
        masks[5].weight.column_mut(row).fill(false);
    }
}

/// Zeroes every masked entry of the block linears of `w`.
pub fn apply_masks<T: Real>(w: &mut Weights<T>, masks: &Masks) {
    for (block, bm) in w.blocks.iter_mut().zip(&masks.blocks) {
        for (lin, m) in block.linears_mut().into_iter().zip(bm.iter()) {
            ndarray::Zip::from(&mut lin.weight).and(&m.weight).for_each(|v, &keep| {
                if !keep {
                    *v = T::zero();
                }
            });
            ndarray::Zip::from(&mut lin.bias).and(&m.bias).for_each(|v, &keep| {
                if !keep {
                    *v = T::zero();
                }
            });
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerModel<T> {
    pub config: ModelConfig,
    pub weights: Weights<T>,
    pub masks: Masks,
}

impl<T: Real> TransformerModel<T> {
    pub fn parameter_count(&self) -> usize {
        self.weights.parameter_count()
    }

    /// Parameters not removed by a mask.
    pub fn unmasked_parameter_count(&self) -> usize {
        self.parameter_count() - (self.masks.total_prunable() - self.masks.kept_prunable())
    }

    pub fn sparsity(&self) -> f64 {
        self.masks.sparsity()
    }

    pub fn apply_masks(&mut self) {
        apply_masks(&mut self.weights, &self.masks);
    }

    pub fn cast<U: Real>(&self) -> TransformerModel<U> {
        TransformerModel {
            config: self.config,
            weights: self.weights.cast(),
            masks: self.masks.clone(),
        }
    }
}

/// Scaled-normal initialization: linear weights ~ N(0, 1/fan_in), with the
/// residual-branch output projections further shrunk by `1/sqrt(2 n_layers)`
/// and the prediction head at std 0.02. Biases start at zero, layer-norm
/// gains at one. All draws come from the `init` stream of `seed` in f64, so
/// f32 and f64 models from one seed agree up to rounding.
pub fn init_model<T: Real>(cfg: &ModelConfig, seed: u64) -> Result<TransformerModel<T>> {
    cfg.validate()?;
    let mut rng = rng::stream(seed, "init");
    let mut w = Weights::<T>::zeros(cfg);
    let mut fill = |a: &mut ArrayViewMutD<'_, T>, std: f64| {
        let normal = Normal::new(0.0, std).expect("positive std");
        for v in a.iter_mut() {
            *v = T::lit(normal.sample(&mut rng));
        }
    };
    let d = cfg.hidden_dim as f64;
    let residual = 1.0 / (2.0 * cfg.n_layers as f64).sqrt();
    fill(&mut w.input_proj.weight.view_mut().into_dyn(), (cfg.input_dim as f64).powf(-0.5));
    fill(&mut w.mask_embed.view_mut().into_dyn(), 1.0);
    if let Some(pc) = &mut w.pos_conv {
        let (_, per_group, kernel) = pc.weight.dim();
        fill(&mut pc.weight.view_mut().into_dyn(), 0.5 * ((per_group * kernel) as f64).powf(-0.5));
    }
    for b in &mut w.blocks {
        b.ln1 = LayerNorm::identity(cfg.hidden_dim);
        b.ln2 = LayerNorm::identity(cfg.hidden_dim);
        for l in [&mut b.q, &mut b.k, &mut b.v] {
            fill(&mut l.weight.view_mut().into_dyn(), d.powf(-0.5));
        }
        fill(&mut b.o.weight.view_mut().into_dyn(), d.powf(-0.5) * residual);
        fill(&mut b.ffw1.weight.view_mut().into_dyn(), d.powf(-0.5));
        fill(&mut b.ffw2.weight.view_mut().into_dyn(), (cfg.ffw_dim as f64).powf(-0.5) * residual);
    }
    w.final_ln = LayerNorm::identity(cfg.hidden_dim);
    fill(&mut w.head.weight.view_mut().into_dyn(), 0.02);
    Ok(TransformerModel {
        config: *cfg,
        weights: w,
        masks: Masks::all(cfg),
    })
}

/// Whether `SPEATFORGE_F64=1` asks for 64-bit accumulation.
pub fn f64_mode() -> bool {
    std::env::var("SPEATFORGE_F64").is_ok_and(|v| v == "1")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        let mut cfg = ModelConfig::tiny();
        cfg.n_heads = 5;
        assert!(matches!(init_model::<f32>(&cfg, 0), Err(Error::InvalidConfig(_))));
        cfg = ModelConfig::tiny();
        cfg.ffw_dim = 0;
        assert!(init_model::<f32>(&cfg, 0).is_err());
        assert!(ModelConfig::by_name("huge").is_err());
        assert_eq!(ModelConfig::by_name("Base").unwrap(), ModelConfig::base());
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = ModelConfig::tiny();
        let a = init_model::<f32>(&cfg, 11).unwrap();
        let b = init_model::<f32>(&cfg, 11).unwrap();
        let c = init_model::<f32>(&cfg, 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.weights, c.weights);
        assert!(a.masks.heads.iter().all(|&k| k));
    }

    #[test]
    fn analytic_count_matches_allocation() {
        for cfg in [ModelConfig::tiny(), ModelConfig::small()] {
            let m = init_model::<f32>(&cfg, 0).unwrap();
            assert_eq!(m.parameter_count(), cfg.parameter_count());
            assert_eq!(m.masks.total_prunable(), cfg.prunable_count());
        }
        let mut cfg = ModelConfig::tiny();
        cfg.positional = Positional::Sinusoidal;
        let m = init_model::<f64>(&cfg, 0).unwrap();
        assert_eq!(m.parameter_count(), cfg.parameter_count());
    }

    #[test]
    fn table_sizes() {
        let within = |got: usize, want: f64| ((got as f64 - want) / want).abs() <= 0.10;
        assert!(within(ModelConfig::base().parameter_count(), 90.2e6));
        assert!(within(ModelConfig::small().parameter_count(), 16.5e6));
        assert!(within(ModelConfig::slim().parameter_count(), 15.6e6));
        assert!(ModelConfig::small().parameter_count() > ModelConfig::slim().parameter_count());
    }

    #[test]
    fn dropping_a_head_masks_its_slices() {
        let cfg = ModelConfig::tiny();
        let mut m = init_model::<f64>(&cfg, 3).unwrap();
        let before = m.unmasked_parameter_count();
        m.masks.drop_head(1, 2, cfg.head_dim());
        m.apply_masks();
        let hd = cfg.head_dim();
        let removed = 3 * (hd * cfg.hidden_dim + hd) + hd * cfg.hidden_dim;
        assert_eq!(before - m.unmasked_parameter_count(), removed);
        let q = &m.weights.blocks[1].q.weight;
        assert!(q.rows().into_iter().skip(2 * hd).take(hd).all(|r| r.iter().all(|&v| v == 0.0)));
        let o = &m.weights.blocks[1].o.weight;
        assert!(o.column(2 * hd).iter().all(|&v| v == 0.0));
        assert_eq!(m.masks.remaining_heads(), cfg.n_layers * cfg.n_heads - 1);
    }
}
