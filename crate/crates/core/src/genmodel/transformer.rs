//! Pre-norm transformer forward pass with an explicit activation cache and
//! the matching hand-written backward pass.

use super::kernels::{gelu, gelu_grad, gemm, layer_norm, layer_norm_backward, linear, linear_backward};
use super::params::{LayerLayout, ModelParams};
use super::sequence::{Sequence, Slot};
use crate::error::{Error, Result};
use crate::vision::{fuse_understanding, project_semantic, spatial_encode, SEMANTIC_DIM};

/// Which text positions get logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TextReadout {
    /// One row per entry of `Sequence::text_targets`.
    Targets,
    /// A single row at `Sequence::next_text_pos`.
    Next,
    None,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `rows × vocab_size`, rows as selected by the readout.
    pub text_logits: Vec<f64>,
    pub text_rows: Vec<usize>,
    /// `image_rows × codebook_size`, present when the sequence has image rows.
    pub image_logits: Option<Vec<f64>>,
}

struct LayerCache {
    xhat1: Vec<f64>,
    rstd1: Vec<f64>,
    h1: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    probs: Vec<f64>,
    attn: Vec<f64>,
    xhat2: Vec<f64>,
    rstd2: Vec<f64>,
    h2: Vec<f64>,
    pre: Vec<f64>,
    act: Vec<f64>,
}

/// Activations kept for the backward pass.
pub struct Cache {
    layers: Vec<LayerCache>,
    xhatf: Vec<f64>,
    rstdf: Vec<f64>,
    hf: Vec<f64>,
    text_rows: Vec<usize>,
}

fn row_limit(seq: &Sequence, t: usize, len: usize) -> usize {
    match seq.query_start {
        Some(q) if t >= q => len,
        _ => t + 1,
    }
}

fn embed(p: &ModelParams, seq: &Sequence) -> Result<Vec<f64>> {
    let cfg = &p.config;
    let d = cfg.d_model;
    let l = &p.layout;
    let t_len = seq.len();
    let mut x = vec![0.0; t_len * d];
    let mut fused: Vec<Vec<f64>> = Vec::with_capacity(seq.images.len());
    for img in &seq.images {
        let spatial = spatial_encode(&img.tokens, p.slice(&l.img_emb), p.slice(&l.grid_pos), d)?;
        let sem = project_semantic(&img.semantic, p.slice(&l.sem_w), p.slice(&l.sem_b))?;
        fused.push(fuse_understanding(&sem, &spatial, cfg.fusion)?);
    }
    let mut cursor = vec![0usize; seq.images.len()];
    let tok = p.slice(&l.tok_emb);
    let img_emb = p.slice(&l.img_emb);
    let grid = p.slice(&l.grid_pos);
    for (t, slot) in seq.slots.iter().enumerate() {
        let row = &mut x[t * d..(t + 1) * d];
        match *slot {
            Slot::Text(id) => {
                let id = id as usize;
                if id >= cfg.vocab_size {
                    return Err(Error::ShapeMismatch(format!("text token {id} outside vocabulary")));
                }
                row.copy_from_slice(&tok[id * d..(id + 1) * d]);
            }
            Slot::Semantic { image } | Slot::Spatial { image, .. } | Slot::Pooled { image } => {
                let c = cursor[image];
                row.copy_from_slice(&fused[image][c * d..(c + 1) * d]);
                cursor[image] += 1;
            }
            Slot::Query(i) => row.copy_from_slice(&p.slice(&l.queries)[i * d..(i + 1) * d]),
            Slot::ArStart => row.copy_from_slice(p.slice(&l.ar_start)),
            Slot::ArToken { cell, token } => {
                let token = token as usize;
                if token >= cfg.codebook_size {
                    return Err(Error::InvalidToken { id: token as u32, size: cfg.codebook_size });
                }
                for c in 0..d {
                    row[c] = img_emb[token * d + c] + grid[cell * d + c];
                }
            }
        }
        let pos = &p.slice(&l.seq_pos)[t * d..(t + 1) * d];
        for (r, q) in row.iter_mut().zip(pos) {
            *r += q;
        }
    }
    Ok(x)
}

fn attention_forward(seq: &Sequence, q: &[f64], k: &[f64], v: &[f64], heads: usize, d: usize) -> (Vec<f64>, Vec<f64>) {
    let t_len = seq.len();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut probs = vec![0.0; heads * t_len * t_len];
    let mut out = vec![0.0; t_len * d];
    for h in 0..heads {
        let p = &mut probs[h * t_len * t_len..(h + 1) * t_len * t_len];
        // scores = Q_h · K_hᵀ
        gemm(t_len, dh, t_len, &q[h * dh..], d, 1, &k[h * dh..], 1, d, 0.0, p, t_len);
        for t in 0..t_len {
            let lim = row_limit(seq, t, t_len);
            let row = &mut p[t * t_len..(t + 1) * t_len];
            let mut max = f64::NEG_INFINITY;
            for s in row.iter_mut().take(lim) {
                *s *= scale;
                max = max.max(*s);
            }
            let mut sum = 0.0;
            for s in row.iter_mut().take(lim) {
                *s = (*s - max).exp();
                sum += *s;
            }
            for s in row.iter_mut().take(lim) {
                *s /= sum;
            }
            for s in row.iter_mut().skip(lim) {
                *s = 0.0;
            }
        }
        // out_h = P · V_h
        gemm(t_len, t_len, dh, p, t_len, 1, &v[h * dh..], d, 1, 0.0, &mut out[h * dh..], d);
    }
    (probs, out)
}

fn layer_forward(p: &ModelParams, lay: &LayerLayout, seq: &Sequence, x: Vec<f64>) -> (Vec<f64>, LayerCache) {
    let cfg = &p.config;
    let (d, ff, t_len) = (cfg.d_model, cfg.d_ff, seq.len());
    let (h1, xhat1, rstd1) = layer_norm(&x, p.slice(&lay.ln1_g), p.slice(&lay.ln1_b), d);
    let q = linear(&h1, p.slice(&lay.wq), None, t_len, d, d);
    let k = linear(&h1, p.slice(&lay.wk), None, t_len, d, d);
    let v = linear(&h1, p.slice(&lay.wv), None, t_len, d, d);
    let (probs, attn) = attention_forward(seq, &q, &k, &v, cfg.n_heads, d);
    let proj = linear(&attn, p.slice(&lay.wo), None, t_len, d, d);
    let x_mid: Vec<f64> = x.iter().zip(&proj).map(|(a, b)| a + b).collect();
    let (h2, xhat2, rstd2) = layer_norm(&x_mid, p.slice(&lay.ln2_g), p.slice(&lay.ln2_b), d);
    let pre = linear(&h2, p.slice(&lay.w1), Some(p.slice(&lay.b1)), t_len, d, ff);
    let act: Vec<f64> = pre.iter().map(|&u| gelu(u)).collect();
    let mlp = linear(&act, p.slice(&lay.w2), Some(p.slice(&lay.b2)), t_len, ff, d);
    let out: Vec<f64> = x_mid.iter().zip(&mlp).map(|(a, b)| a + b).collect();
    let cache = LayerCache { xhat1, rstd1, h1, q, k, v, probs, attn, xhat2, rstd2, h2, pre, act };
    (out, cache)
}

fn gather_rows(x: &[f64], rows: &[usize], d: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows.len() * d);
    for &r in rows {
        out.extend_from_slice(&x[r * d..(r + 1) * d]);
    }
    out
}

/// Runs the model on one sequence. Every call increments the instrumented
/// forward counter by one.
pub fn forward(p: &ModelParams, seq: &Sequence, readout: TextReadout) -> Result<ForwardOutput> {
    forward_impl(p, seq, readout).map(|(out, _)| out)
}

/// Same as [`forward`] but keeps the activations needed by [`backward`].
pub fn forward_with_cache(p: &ModelParams, seq: &Sequence, readout: TextReadout) -> Result<(ForwardOutput, Cache)> {
    forward_impl(p, seq, readout)
}

fn forward_impl(p: &ModelParams, seq: &Sequence, readout: TextReadout) -> Result<(ForwardOutput, Cache)> {
    let cfg = &p.config;
    if seq.len() > cfg.max_seq_len {
        return Err(Error::LengthExceeded { len: seq.len(), max: cfg.max_seq_len });
    }
    if seq.is_empty() {
        return Err(Error::ShapeMismatch("empty sequence".into()));
    }
    p.count_forward();
    let d = cfg.d_model;
    let l = &p.layout;
    let mut x = embed(p, seq)?;
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for lay in &l.layers {
        let (next, cache) = layer_forward(p, lay, seq, x);
        layers.push(cache);
        x = next;
    }
    let (hf, xhatf, rstdf) = layer_norm(&x, p.slice(&l.lnf_g), p.slice(&l.lnf_b), d);
    let text_rows: Vec<usize> = match readout {
        TextReadout::Targets => seq.text_targets.iter().map(|t| t.0).collect(),
        TextReadout::Next => vec![seq.next_text_pos],
        TextReadout::None => Vec::new(),
    };
    let text_h = gather_rows(&hf, &text_rows, d);
    let text_logits = linear(&text_h, p.slice(&l.text_w), Some(p.slice(&l.text_b)), text_rows.len(), d, cfg.vocab_size);
    let image_logits = (!seq.image_rows.is_empty()).then(|| {
        let img_h = gather_rows(&hf, &seq.image_rows, d);
        linear(&img_h, p.slice(&l.img_w), Some(p.slice(&l.img_b)), seq.image_rows.len(), d, cfg.codebook_size)
    });
    let out = ForwardOutput { text_logits, text_rows: text_rows.clone(), image_logits };
    Ok((out, Cache { layers, xhatf, rstdf, hf, text_rows }))
}

fn attention_backward(
    seq: &Sequence,
    c: &LayerCache,
    d_attn: &[f64],
    heads: usize,
    d: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let t_len = seq.len();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = vec![0.0; t_len * d];
    let mut dk = vec![0.0; t_len * d];
    let mut dv = vec![0.0; t_len * d];
    let mut dp = vec![0.0; t_len * t_len];
    for h in 0..heads {
        let p = &c.probs[h * t_len * t_len..(h + 1) * t_len * t_len];
        // dP = dO_h · V_hᵀ
        gemm(t_len, dh, t_len, &d_attn[h * dh..], d, 1, &c.v[h * dh..], 1, d, 0.0, &mut dp, t_len);
        // dV_h = Pᵀ · dO_h
        gemm(t_len, t_len, dh, p, 1, t_len, &d_attn[h * dh..], d, 1, 0.0, &mut dv[h * dh..], d);
        for t in 0..t_len {
            let lim = row_limit(seq, t, t_len);
            let prow = &p[t * t_len..(t + 1) * t_len];
            let drow = &mut dp[t * t_len..(t + 1) * t_len];
            let dot: f64 = prow[..lim].iter().zip(&drow[..lim]).map(|(a, b)| a * b).sum();
            for s in 0..lim {
                drow[s] = prow[s] * (drow[s] - dot) * scale;
            }
            for v in drow.iter_mut().skip(lim) {
                *v = 0.0;
            }
        }
        // dQ_h = dS · K_h ; dK_h = dSᵀ · Q_h
        gemm(t_len, t_len, dh, &dp, t_len, 1, &c.k[h * dh..], d, 1, 0.0, &mut dq[h * dh..], d);
        gemm(t_len, t_len, dh, &dp, 1, t_len, &c.q[h * dh..], d, 1, 0.0, &mut dk[h * dh..], d);
    }
    (dq, dk, dv)
}

/// Back-propagates logit gradients into `grad` (same layout as the
/// parameters). `d_text` must match the rows the forward pass produced.
pub fn backward(
    p: &ModelParams,
    seq: &Sequence,
    cache: &Cache,
    d_text: Option<&[f64]>,
    d_image: Option<&[f64]>,
    grad: &mut [f64],
) -> Result<()> {
    let cfg = &p.config;
    let l = &p.layout;
    let (d, ff, t_len) = (cfg.d_model, cfg.d_ff, seq.len());
    if grad.len() != p.len() {
        return Err(Error::ShapeMismatch("gradient buffer does not match parameters".into()));
    }
    let mut dhf = vec![0.0; t_len * d];
    if let Some(dt) = d_text {
        let rows = &cache.text_rows;
        if dt.len() != rows.len() * cfg.vocab_size {
            return Err(Error::ShapeMismatch("text logit gradient rows".into()));
        }
        let h = gather_rows(&cache.hf, rows, d);
        let mut dh = vec![0.0; rows.len() * d];
        let (w, b) = (l.text_w.clone(), l.text_b.clone());
        {
            let (gw, gb) = split_two(grad, &w, &b);
            linear_backward(&h, p.slice(&w), dt, rows.len(), d, cfg.vocab_size, gw, Some(gb), Some(&mut dh));
        }
        for (i, &r) in rows.iter().enumerate() {
            for c in 0..d {
                dhf[r * d + c] += dh[i * d + c];
            }
        }
    }
    if let Some(di) = d_image {
        let rows = &seq.image_rows;
        if di.len() != rows.len() * cfg.codebook_size {
            return Err(Error::ShapeMismatch("image logit gradient rows".into()));
        }
        let h = gather_rows(&cache.hf, rows, d);
        let mut dh = vec![0.0; rows.len() * d];
        let (w, b) = (l.img_w.clone(), l.img_b.clone());
        {
            let (gw, gb) = split_two(grad, &w, &b);
            linear_backward(&h, p.slice(&w), di, rows.len(), d, cfg.codebook_size, gw, Some(gb), Some(&mut dh));
        }
        for (i, &r) in rows.iter().enumerate() {
            for c in 0..d {
                dhf[r * d + c] += dh[i * d + c];
            }
        }
    }

    let mut dx = vec![0.0; t_len * d];
    {
        let (gg, gb) = split_two(grad, &l.lnf_g, &l.lnf_b);
        layer_norm_backward(&dhf, &cache.xhatf, &cache.rstdf, p.slice(&l.lnf_g), d, gg, gb, &mut dx);
    }

    for (lay, c) in l.layers.iter().zip(&cache.layers).rev() {
        // MLP block: out = x_mid + gelu(h2·w1 + b1)·w2 + b2
        let d_out = dx;
        let mut d_act = vec![0.0; t_len * ff];
        {
            let (gw, gb) = split_two(grad, &lay.w2, &lay.b2);
            linear_backward(&c.act, p.slice(&lay.w2), &d_out, t_len, ff, d, gw, Some(gb), Some(&mut d_act));
        }
        for (g, &u) in d_act.iter_mut().zip(&c.pre) {
            *g *= gelu_grad(u);
        }
        let mut dh2 = vec![0.0; t_len * d];
        {
            let (gw, gb) = split_two(grad, &lay.w1, &lay.b1);
            linear_backward(&c.h2, p.slice(&lay.w1), &d_act, t_len, d, ff, gw, Some(gb), Some(&mut dh2));
        }
        let mut dx_mid = d_out;
        {
            let (gg, gb) = split_two(grad, &lay.ln2_g, &lay.ln2_b);
            layer_norm_backward(&dh2, &c.xhat2, &c.rstd2, p.slice(&lay.ln2_g), d, gg, gb, &mut dx_mid);
        }
        // attention block: x_mid = x_in + attn·wo
        let mut d_attn = vec![0.0; t_len * d];
        linear_backward(&c.attn, p.slice(&lay.wo), &dx_mid, t_len, d, d, &mut grad[lay.wo.clone()], None, Some(&mut d_attn));
        let (dq, dk, dv) = attention_backward(seq, c, &d_attn, cfg.n_heads, d);
        let mut dh1 = vec![0.0; t_len * d];
        linear_backward(&c.h1, p.slice(&lay.wq), &dq, t_len, d, d, &mut grad[lay.wq.clone()], None, Some(&mut dh1));
        linear_backward(&c.h1, p.slice(&lay.wk), &dk, t_len, d, d, &mut grad[lay.wk.clone()], None, Some(&mut dh1));
        linear_backward(&c.h1, p.slice(&lay.wv), &dv, t_len, d, d, &mut grad[lay.wv.clone()], None, Some(&mut dh1));
        let mut dx_in = dx_mid;
        {
            let (gg, gb) = split_two(grad, &lay.ln1_g, &lay.ln1_b);
            layer_norm_backward(&dh1, &c.xhat1, &c.rstd1, p.slice(&lay.ln1_g), d, gg, gb, &mut dx_in);
        }
        dx = dx_in;
    }

    embed_backward(p, seq, &dx, grad);
    Ok(())
}

fn embed_backward(p: &ModelParams, seq: &Sequence, dx: &[f64], grad: &mut [f64]) {
    let cfg = &p.config;
    let l = &p.layout;
    let d = cfg.d_model;
    let add = |grad: &mut [f64], base: usize, src: &[f64], scale: f64| {
        for (g, s) in grad[base..base + src.len()].iter_mut().zip(src) {
            *g += scale * s;
        }
    };
    for (t, slot) in seq.slots.iter().enumerate() {
        let row = &dx[t * d..(t + 1) * d];
        add(grad, l.seq_pos.start + t * d, row, 1.0);
        match *slot {
            Slot::Text(id) => add(grad, l.tok_emb.start + id as usize * d, row, 1.0),
            Slot::Semantic { image } => {
                let sem = &seq.images[image].semantic;
                for o in 0..d {
                    for j in 0..SEMANTIC_DIM {
                        grad[l.sem_w.start + o * SEMANTIC_DIM + j] += row[o] * sem[j];
                    }
                }
                add(grad, l.sem_b.start, row, 1.0);
            }
            Slot::Spatial { image, cell } => {
                let tok = seq.images[image].tokens.tokens[cell] as usize;
                add(grad, l.img_emb.start + tok * d, row, 1.0);
                add(grad, l.grid_pos.start + cell * d, row, 1.0);
            }
            Slot::Pooled { image } => {
                let scale = 1.0 / seq.images[image].tokens.len() as f64;
                for (cell, &tok) in seq.images[image].tokens.tokens.iter().enumerate() {
                    add(grad, l.img_emb.start + tok as usize * d, row, scale);
                    add(grad, l.grid_pos.start + cell * d, row, scale);
                }
            }
            Slot::Query(i) => add(grad, l.queries.start + i * d, row, 1.0),
            Slot::ArStart => add(grad, l.ar_start.start, row, 1.0),
            Slot::ArToken { cell, token } => {
                add(grad, l.img_emb.start + token as usize * d, row, 1.0);
                add(grad, l.grid_pos.start + cell * d, row, 1.0);
            }
        }
    }
}

/// Two disjoint mutable views into the gradient buffer; `a` must precede `b`.
fn split_two<'g>(grad: &'g mut [f64], a: &std::ops::Range<usize>, b: &std::ops::Range<usize>) -> (&'g mut [f64], &'g mut [f64]) {
    debug_assert!(a.end <= b.start);
    let (lo, hi) = grad.split_at_mut(b.start);
    (&mut lo[a.clone()], &mut hi[..b.len()])
}
