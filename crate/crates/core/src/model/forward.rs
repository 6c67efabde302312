//! Forward pass with an explicit tape and the matching reverse pass.

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};

use super::{Block, LayerNorm, Linear, ModelConfig, PosConv, Real, TransformerModel, Weights};
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;

struct LnCache<T> {
    xhat: Array2<T>,
    rstd: Array1<T>,
}

fn layer_norm<T: Real>(x: &Array2<T>, ln: &LayerNorm<T>) -> (Array2<T>, LnCache<T>) {
    let n = T::lit(x.ncols() as f64);
    let eps = T::lit(LN_EPS);
    let mut xhat = x.clone();
    let mut rstd = Array1::zeros(x.nrows());
    for (mut row, r) in xhat.axis_iter_mut(Axis(0)).zip(rstd.iter_mut()) {
        let mean = row.sum() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let inv = T::one() / (var + eps).sqrt();
        row.mapv_inplace(|v| (v - mean) * inv);
        *r = inv;
    }
    let y = &xhat * &ln.gamma + &ln.beta;
    (y, LnCache { xhat, rstd })
}

fn layer_norm_backward<T: Real>(dy: &Array2<T>, cache: &LnCache<T>, ln: &LayerNorm<T>, g: &mut LayerNorm<T>) -> Array2<T> {
    g.gamma += &(dy * &cache.xhat).sum_axis(Axis(0));
    g.beta += &dy.sum_axis(Axis(0));
    let n = T::lit(dy.ncols() as f64);
    let dxhat = dy * &ln.gamma;
    let mut dx = Array2::zeros(dy.dim());
    for (((mut out, dh), xh), &r) in dx
        .axis_iter_mut(Axis(0))
        .zip(dxhat.axis_iter(Axis(0)))
        .zip(cache.xhat.axis_iter(Axis(0)))
        .zip(cache.rstd.iter())
    {
        let mean_d = dh.sum() / n;
        let mean_dx = dh.dot(&xh) / n;
        Zip::from(&mut out).and(&dh).and(&xh).for_each(|o, &d, &x| {
            *o = r * (d - mean_d - x * mean_dx);
        });
    }
    dx
}

pub(crate) fn linear<T: Real>(x: &Array2<T>, l: &Linear<T>) -> Array2<T> {
    x.dot(&l.weight.t()) + &l.bias
}

pub(crate) fn linear_backward<T: Real>(x: ArrayView2<T>, dy: &Array2<T>, l: &Linear<T>, g: &mut Linear<T>) -> Array2<T> {
    g.weight += &dy.t().dot(&x);
    g.bias += &dy.sum_axis(Axis(0));
    dy.dot(&l.weight)
}

const GELU_C: f64 = 0.044_715;

/// tanh approximation of GELU.
fn gelu<T: Real>(z: T) -> T {
    let k = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let half = T::lit(0.5);
    half * z * (T::one() + (k * (z + T::lit(GELU_C) * z * z * z)).tanh())
}

fn gelu_grad<T: Real>(z: T) -> T {
    let k = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let half = T::lit(0.5);
    let t = (k * (z + T::lit(GELU_C) * z * z * z)).tanh();
    half * (T::one() + t) + half * z * (T::one() - t * t) * k * (T::one() + T::lit(3.0 * GELU_C) * z * z)
}

fn softmax_rows<T: Real>(s: &mut Array2<T>) {
    for mut row in s.axis_iter_mut(Axis(0)) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

struct BlockCache<T> {
    ln1: LnCache<T>,
    a: Array2<T>,
    q: Array2<T>,
    k: Array2<T>,
    v: Array2<T>,
    probs: Vec<Option<Array2<T>>>,
    ctx: Array2<T>,
    ln2: LnCache<T>,
    f: Array2<T>,
    z: Array2<T>,
    u: Array2<T>,
}

fn block_forward<T: Real>(
    x: &Array2<T>,
    b: &Block<T>,
    head_mask: ndarray::ArrayView1<bool>,
    row_mask: ndarray::ArrayView1<bool>,
    cfg: &ModelConfig,
) -> (Array2<T>, BlockCache<T>) {
    let hd = cfg.head_dim();
    let scale = T::lit(1.0 / (hd as f64).sqrt());
    let (a, ln1) = layer_norm(x, &b.ln1);
    let q = linear(&a, &b.q);
    let k = linear(&a, &b.k);
    let v = linear(&a, &b.v);
    let mut ctx = Array2::zeros(x.dim());
    let mut probs = Vec::with_capacity(cfg.n_heads);
    for h in 0..cfg.n_heads {
        if !head_mask[h] {
            probs.push(None);
            continue;
        }
        let span = s![.., h * hd..(h + 1) * hd];
        let mut p = q.slice(span).dot(&k.slice(span).t()) * scale;
        softmax_rows(&mut p);
        ctx.slice_mut(span).assign(&p.dot(&v.slice(span)));
        probs.push(Some(p));
    }
    let h1 = x + &linear(&ctx, &b.o);
    let (f, ln2) = layer_norm(&h1, &b.ln2);
    let z = linear(&f, &b.ffw1);
    let mut u = z.mapv(gelu);
    for (mut col, &keep) in u.axis_iter_mut(Axis(1)).zip(row_mask.iter()) {
        if !keep {
            col.fill(T::zero());
        }
    }
    let out = &h1 + &linear(&u, &b.ffw2);
    (
        out,
        BlockCache {
            ln1,
            a,
            q,
            k,
            v,
            probs,
            ctx,
            ln2,
            f,
            z,
            u,
        },
    )
}

fn block_backward<T: Real>(
    dout: &Array2<T>,
    c: &BlockCache<T>,
    b: &Block<T>,
    g: &mut Block<T>,
    row_mask: ndarray::ArrayView1<bool>,
    cfg: &ModelConfig,
) -> Array2<T> {
    // feed-forward branch
    let du = linear_backward(c.u.view(), dout, &b.ffw2, &mut g.ffw2);
    let mut dz = du;
    Zip::from(&mut dz).and(&c.z).for_each(|d, &z| *d *= gelu_grad(z));
    for (mut col, &keep) in dz.axis_iter_mut(Axis(1)).zip(row_mask.iter()) {
        if !keep {
            col.fill(T::zero());
        }
    }
    let df = linear_backward(c.f.view(), &dz, &b.ffw1, &mut g.ffw1);
    let dh1 = dout + &layer_norm_backward(&df, &c.ln2, &b.ln2, &mut g.ln2);

    // attention branch
    let dctx = linear_backward(c.ctx.view(), &dh1, &b.o, &mut g.o);
    let hd = cfg.head_dim();
    let scale = T::lit(1.0 / (hd as f64).sqrt());
    let mut dq = Array2::zeros(c.q.dim());
    let mut dk = Array2::zeros(c.k.dim());
    let mut dv = Array2::zeros(c.v.dim());
    for (h, p) in c.probs.iter().enumerate() {
        let Some(p) = p else { continue };
        let span = s![.., h * hd..(h + 1) * hd];
        let dch = dctx.slice(span);
        let vh = c.v.slice(span);
        let mut dp = dch.dot(&vh.t());
        dv.slice_mut(span).assign(&p.t().dot(&dch));
        for (mut drow, prow) in dp.axis_iter_mut(Axis(0)).zip(p.axis_iter(Axis(0))) {
            let inner = drow.dot(&prow);
            Zip::from(&mut drow).and(&prow).for_each(|d, &pv| *d = pv * (*d - inner));
        }
        let ds = dp * scale;
        dq.slice_mut(span).assign(&ds.dot(&c.k.slice(span)));
        dk.slice_mut(span).assign(&ds.t().dot(&c.q.slice(span)));
    }
    let mut da = linear_backward(c.a.view(), &dq, &b.q, &mut g.q);
    da += &linear_backward(c.a.view(), &dk, &b.k, &mut g.k);
    da += &linear_backward(c.a.view(), &dv, &b.v, &mut g.v);
    dh1 + layer_norm_backward(&da, &c.ln1, &b.ln1, &mut g.ln1)
}

fn conv_offset(kernel: usize) -> isize {
    (kernel / 2) as isize
}

/// Valid output rows for tap offset `o` over `t` frames, and the matching
/// input rows.
fn tap_ranges(t: usize, o: isize) -> Option<(std::ops::Range<usize>, std::ops::Range<usize>)> {
    let lo = (-o).max(0) as usize;
    let hi = (t as isize - o).min(t as isize);
    if hi <= lo as isize {
        return None;
    }
    let hi = hi as usize;
    let in_lo = (lo as isize + o) as usize;
    Some((lo..hi, in_lo..in_lo + (hi - lo)))
}

fn pos_conv_forward<T: Real>(x: &Array2<T>, pc: &PosConv<T>) -> Array2<T> {
    let (d, per_group, kernel) = pc.weight.dim();
    let t = x.nrows();
    let mut out = Array2::from_shape_fn((t, d), |(_, c)| pc.bias[c]);
    for k in 0..kernel {
        let o = k as isize - conv_offset(kernel);
        let Some((out_rows, in_rows)) = tap_ranges(t, o) else { continue };
        let wk = pc.weight.slice(s![.., .., k]);
        for g in 0..pc.groups {
            let cols = g * per_group..(g + 1) * per_group;
            let xin = x.slice(s![in_rows.clone(), cols.clone()]);
            let wg = wk.slice(s![cols.clone(), ..]);
            let mut dst = out.slice_mut(s![out_rows.clone(), cols]);
            dst += &xin.dot(&wg.t());
        }
    }
    out
}

fn pos_conv_backward<T: Real>(x: &Array2<T>, dpre: &Array2<T>, pc: &PosConv<T>, g: &mut PosConv<T>) -> Array2<T> {
    let (_, per_group, kernel) = pc.weight.dim();
    let t = x.nrows();
    g.bias += &dpre.sum_axis(Axis(0));
    let mut dx = Array2::zeros(x.dim());
    for k in 0..kernel {
        let o = k as isize - conv_offset(kernel);
        let Some((out_rows, in_rows)) = tap_ranges(t, o) else { continue };
        let wk = pc.weight.slice(s![.., .., k]);
        for grp in 0..pc.groups {
            let cols = grp * per_group..(grp + 1) * per_group;
            let dy = dpre.slice(s![out_rows.clone(), cols.clone()]);
            let xin = x.slice(s![in_rows.clone(), cols.clone()]);
            let mut gw = g.weight.slice_mut(s![cols.clone(), .., k]);
            gw += &dy.t().dot(&xin);
            let wg = wk.slice(s![cols.clone(), ..]);
            let mut dst = dx.slice_mut(s![in_rows.clone(), cols]);
            dst += &dy.dot(&wg);
        }
    }
    dx
}

fn sinusoid<T: Real>(t: usize, d: usize) -> Array2<T> {
    Array2::from_shape_fn((t, d), |(pos, i)| {
        let pair = (i / 2) as f64;
        let angle = pos as f64 / 10_000f64.powf(2.0 * pair / d as f64);
        T::lit(if i % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}

/// Intermediates of one forward pass, consumed by [`backward`].
pub struct ForwardCache<T> {
    input: Array2<T>,
    frame_mask: Option<Vec<bool>>,
    h0: Array2<T>,
    pos_pre: Option<Array2<T>>,
    blocks: Vec<BlockCache<T>>,
    /// Projection output followed by every block output.
    pub reps: Vec<Array2<T>>,
}

fn check_input<T: Real>(model: &TransformerModel<T>, input: &Array2<T>, frame_mask: Option<&[bool]>) -> Result<()> {
    if input.ncols() != model.config.input_dim {
        return Err(Error::DimensionMismatch {
            expected: model.config.input_dim,
            got: input.ncols(),
            context: "input feature dimension",
        });
    }
    if input.nrows() == 0 {
        return Err(Error::EmptySequence("model input".into()));
    }
    if let Some(m) = frame_mask {
        if m.len() != input.nrows() {
            return Err(Error::DimensionMismatch {
                expected: input.nrows(),
                got: m.len(),
                context: "frame mask length",
            });
        }
    }
    Ok(())
}

pub fn forward_cached<T: Real>(model: &TransformerModel<T>, input: &Array2<T>, frame_mask: Option<&[bool]>) -> Result<ForwardCache<T>> {
    check_input(model, input, frame_mask)?;
    let cfg = &model.config;
    let w = &model.weights;
    let mut h0 = linear(input, &w.input_proj);
    if let Some(mask) = frame_mask {
        for (mut row, &m) in h0.axis_iter_mut(Axis(0)).zip(mask) {
            if m {
                row.assign(&w.mask_embed);
            }
        }
    }
    let (mut h, pos_pre) = match &w.pos_conv {
        Some(pc) => {
            let pre = pos_conv_forward(&h0, pc);
            (&h0 + &pre.mapv(gelu), Some(pre))
        }
        None => (&h0 + &sinusoid::<T>(h0.nrows(), cfg.hidden_dim), None),
    };
    let mut reps = Vec::with_capacity(cfg.n_layers + 1);
    let mut blocks = Vec::with_capacity(cfg.n_layers);
    reps.push(h.clone());
    for (l, b) in w.blocks.iter().enumerate() {
        let (out, cache) = block_forward(&h, b, model.masks.heads.row(l), model.masks.rows.row(l), cfg);
        h = out;
        reps.push(h.clone());
        blocks.push(cache);
    }
    Ok(ForwardCache {
        input: input.clone(),
        frame_mask: frame_mask.map(<[bool]>::to_vec),
        h0,
        pos_pre,
        blocks,
        reps,
    })
}

/// Representations of an unmasked utterance: `n_layers + 1` matrices of
/// `n_frames x hidden_dim`.
pub fn forward<T: Real>(model: &TransformerModel<T>, input: &Array2<T>) -> Result<Vec<Array2<T>>> {
    Ok(forward_cached(model, input, None)?.reps)
}

/// Reverse pass. `d_reps[l]`, when present, is the loss gradient with
/// respect to representation level `l`. Gradients of masked entries are
/// zeroed.
pub fn backward<T: Real>(model: &TransformerModel<T>, cache: &ForwardCache<T>, d_reps: &[Option<Array2<T>>]) -> Weights<T> {
    let cfg = &model.config;
    let w = &model.weights;
    let mut g = Weights::zeros(cfg);
    let grad_at = |l: usize| d_reps.get(l).and_then(Option::as_ref);
    let mut dh: Array2<T> = Array2::zeros(cache.reps[cfg.n_layers].dim());
    for l in (0..cfg.n_layers).rev() {
        if let Some(d) = grad_at(l + 1) {
            dh += d;
        }
        dh = block_backward(&dh, &cache.blocks[l], &w.blocks[l], &mut g.blocks[l], model.masks.rows.row(l), cfg);
    }
    if let Some(d) = grad_at(0) {
        dh += d;
    }
    let mut dh0 = dh.clone();
    if let (Some(pc), Some(pre), Some(gpc)) = (&w.pos_conv, &cache.pos_pre, &mut g.pos_conv) {
        let mut dpre = dh;
        Zip::from(&mut dpre).and(pre).for_each(|d, &z| *d *= gelu_grad(z));
        dh0 += &pos_conv_backward(&cache.h0, &dpre, pc, gpc);
    }
    if let Some(mask) = &cache.frame_mask {
        for (mut row, &m) in dh0.axis_iter_mut(Axis(0)).zip(mask) {
            if m {
                g.mask_embed += &row;
                row.fill(T::zero());
            }
        }
    }
    linear_backward(cache.input.view(), &dh0, &w.input_proj, &mut g.input_proj);
    super::apply_masks(&mut g, &model.masks);
    g
}

pub struct LmHeadCache<T> {
    ln: LnCache<T>,
    normed: Array2<T>,
}

/// Final layer norm plus prediction head over acoustic units.
pub fn head_forward<T: Real>(w: &Weights<T>, h: &Array2<T>) -> (Array2<T>, LmHeadCache<T>) {
    let (normed, ln) = layer_norm(h, &w.final_ln);
    let logits = linear(&normed, &w.head);
    (logits, LmHeadCache { ln, normed })
}

/// Returns the gradient with respect to the last representation.
pub fn head_backward<T: Real>(w: &Weights<T>, cache: &LmHeadCache<T>, dlogits: &Array2<T>, g: &mut Weights<T>) -> Array2<T> {
    let dn = linear_backward(cache.normed.view(), dlogits, &w.head, &mut g.head);
    layer_norm_backward(&dn, &cache.ln, &w.final_ln, &mut g.final_ln)
}
