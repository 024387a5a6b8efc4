//! Forward and hand-written reverse pass of the denoiser.
//!
//! One internal `run` routine serves all call modes (plain, with K/V
//! injection, with gradient tape), so injected and non-injected paths execute
//! identical arithmetic in identical order; injecting a cache captured from
//! the same input is therefore bit-identical to no injection.

use super::{AttentionCache, Condition, Conv, DenoiserParams, TIME_EMB_DIM};
use crate::tensor::Tensor;
use crate::{Error, Result};

// ── scalar pieces ────────────────────────────────────────────────────────

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
fn dsilu(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// Sinusoidal embedding of the normalized timestep: first half sines,
/// second half cosines, geometric frequency ladder over position `t/T * 1000`.
fn time_embedding(t_frac: f64) -> Vec<f64> {
    let half = TIME_EMB_DIM / 2;
    let p = t_frac * 1000.0;
    let mut emb = vec![0.0; TIME_EMB_DIM];
    for i in 0..half {
        let freq = (10_000.0f64).powf(-(i as f64) / half as f64);
        emb[i] = (p * freq).sin();
        emb[half + i] = (p * freq).cos();
    }
    emb
}

// ── conv / resample primitives ───────────────────────────────────────────

/// 3x3 convolution, padding 1, given stride. `[in_c, h, w] -> [out_c, oh, ow]`
/// with `oh = (h-1)/stride + 1`.
fn conv2d(conv: &Conv, input: &Tensor, stride: usize) -> Tensor {
    let (in_c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let out_c = conv.w.shape()[0];
    debug_assert_eq!(conv.w.shape(), &[out_c, in_c, 3, 3]);
    let (oh, ow) = ((h - 1) / stride + 1, (w - 1) / stride + 1);
    let mut out = Tensor::zeros(&[out_c, oh, ow]);
    let wd = conv.w.data();
    let xd = input.data();
    let od = out.data_mut();
    for o in 0..out_c {
        let bias = conv.b.data()[o];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = bias;
                for i in 0..in_c {
                    let wbase = ((o * in_c + i) * 3) * 3;
                    let xbase = i * h * w;
                    for ky in 0..3 {
                        let iy = (oy * stride + ky) as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let row = xbase + iy as usize * w;
                        for kx in 0..3 {
                            let ix = (ox * stride + kx) as isize - 1;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            acc += wd[wbase + ky * 3 + kx] * xd[row + ix as usize];
                        }
                    }
                }
                od[(o * oh + oy) * ow + ox] = acc;
            }
        }
    }
    out
}

/// Gradients of [`conv2d`]: returns (dW, db, dInput).
fn conv2d_backward(
    conv: &Conv,
    input: &Tensor,
    g_out: &Tensor,
    stride: usize,
) -> (Tensor, Tensor, Tensor) {
    let (in_c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (out_c, oh, ow) = (g_out.shape()[0], g_out.shape()[1], g_out.shape()[2]);
    let mut dw = Tensor::zeros(conv.w.shape());
    let mut db = Tensor::zeros(conv.b.shape());
    let mut dx = Tensor::zeros(input.shape());
    let wd = conv.w.data();
    let xd = input.data();
    let gd = g_out.data();
    let dwd = dw.data_mut();
    let dxd = dx.data_mut();
    for o in 0..out_c {
        let mut bsum = 0.0;
        for oy in 0..oh {
            for ox in 0..ow {
                let g = gd[(o * oh + oy) * ow + ox];
                if g == 0.0 {
                    bsum += g;
                    continue;
                }
                bsum += g;
                for i in 0..in_c {
                    let wbase = ((o * in_c + i) * 3) * 3;
                    let xbase = i * h * w;
                    for ky in 0..3 {
                        let iy = (oy * stride + ky) as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let row = xbase + iy as usize * w;
                        for kx in 0..3 {
                            let ix = (ox * stride + kx) as isize - 1;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let xi = row + ix as usize;
                            dwd[wbase + ky * 3 + kx] += g * xd[xi];
                            dxd[xi] += g * wd[wbase + ky * 3 + kx];
                        }
                    }
                }
            }
        }
        db.data_mut()[o] = bsum;
    }
    (dw, db, dx)
}

/// Nearest-neighbor 2x upsample.
fn upsample2(input: &Tensor) -> Tensor {
    let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    Tensor::from_fn(&[c, 2 * h, 2 * w], |i| {
        let x = i % (2 * w);
        let y = (i / (2 * w)) % (2 * h);
        let ch = i / (4 * h * w);
        input.at3(ch, y / 2, x / 2)
    })
}

/// Adjoint of [`upsample2`]: sum each 2x2 block.
fn upsample2_backward(g: &Tensor) -> Tensor {
    let (c, h2, w2) = (g.shape()[0], g.shape()[1], g.shape()[2]);
    let (h, w) = (h2 / 2, w2 / 2);
    let mut out = Tensor::zeros(&[c, h, w]);
    for ch in 0..c {
        for y in 0..h2 {
            for x in 0..w2 {
                let v = out.at3(ch, y / 2, x / 2) + g.at3(ch, y, x);
                out.set3(ch, y / 2, x / 2, v);
            }
        }
    }
    out
}

fn concat_channels(a: &Tensor, b: &Tensor) -> Tensor {
    let (ca, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let cb = b.shape()[0];
    debug_assert_eq!(&b.shape()[1..], &[h, w]);
    let mut data = Vec::with_capacity((ca + cb) * h * w);
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Tensor::from_vec(&[ca + cb, h, w], data)
}

fn split_channels(g: &Tensor, c_first: usize) -> (Tensor, Tensor) {
    let (c, h, w) = (g.shape()[0], g.shape()[1], g.shape()[2]);
    let cut = c_first * h * w;
    (
        Tensor::from_vec(&[c_first, h, w], g.data()[..cut].to_vec()),
        Tensor::from_vec(&[c - c_first, h, w], g.data()[cut..].to_vec()),
    )
}

// ── dense helpers (row-major slices) ─────────────────────────────────────

/// `a[m,k] · b[k,n] -> [m,n]`
fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

/// `aᵀ · b` with `a[k,m]`, `b[k,n] -> [m,n]`
fn matmul_tn(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        for i in 0..m {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

/// `a · bᵀ` with `a[m,k]`, `b[n,k] -> [m,n]`
fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for p in 0..k {
                acc += arow[p] * brow[p];
            }
            out[i * n + j] = acc;
        }
    }
    out
}

// ── attention ────────────────────────────────────────────────────────────

/// Intermediates needed by the attention backward pass. `k`/`v` here are the
/// self-computed ones (training never injects).
#[derive(Clone, Debug)]
struct AttnTape {
    x: Tensor, // tokens [n, d]
    q: Tensor,
    k: Tensor,
    v: Tensor,
    a: Tensor, // softmax weights [heads, n, n]
    o: Tensor, // pre-Wo head outputs [n, d]
}

/// Map `[d, r, r]` features to `[n, d]` tokens (token = spatial site).
fn to_tokens(h: &Tensor) -> Tensor {
    let (d, r, _) = (h.shape()[0], h.shape()[1], h.shape()[2]);
    let n = r * r;
    Tensor::from_fn(&[n, d], |i| {
        let (tok, ch) = (i / d, i % d);
        h.at3(ch, tok / r, tok % r)
    })
}

fn from_tokens(tokens: &Tensor, r: usize) -> Tensor {
    let d = tokens.shape()[1];
    Tensor::from_fn(&[d, r, r], |i| {
        let ch = i / (r * r);
        let tok = i % (r * r);
        tokens.at2(tok, ch)
    })
}

/// Multi-head self-attention over bottleneck tokens. Returns the block
/// output (pre-residual), the self-computed K/V, and optionally the tape.
/// With `inject`, the injected K/V replace the self-computed ones in the
/// attention math while queries still come from `h`.
fn attention(
    params: &DenoiserParams,
    h: &Tensor,
    inject: Option<&AttentionCache>,
    want_tape: bool,
) -> Result<(Tensor, (Tensor, Tensor), Option<AttnTape>)> {
    let d = params.cfg.bottleneck();
    let r = h.shape()[1];
    let n = r * r;
    let heads = params.cfg.attn_heads;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let x = to_tokens(h);
    let q = Tensor::from_vec(&[n, d], matmul(x.data(), params.wq.data(), n, d, d));
    let k_own = Tensor::from_vec(&[n, d], matmul(x.data(), params.wk.data(), n, d, d));
    let v_own = Tensor::from_vec(&[n, d], matmul(x.data(), params.wv.data(), n, d, d));

    if let Some(cache) = inject {
        if cache.k.shape() != [n, d] || cache.v.shape() != [n, d] {
            return Err(Error::ShapeMismatch(format!(
                "injected cache k{:?}/v{:?} vs expected [{n}, {d}]",
                cache.k.shape(),
                cache.v.shape()
            )));
        }
    }
    let (k_use, v_use) = match inject {
        Some(cache) => (&cache.k, &cache.v),
        None => (&k_own, &v_own),
    };

    let mut a = Tensor::zeros(&[heads, n, n]);
    let mut o = Tensor::zeros(&[n, d]);
    for hd in 0..heads {
        let col = hd * dh;
        for i in 0..n {
            // scores row, stabilized softmax
            let mut row = vec![0.0; n];
            let mut maxv = f64::NEG_INFINITY;
            for (j, rv) in row.iter_mut().enumerate() {
                let mut acc = 0.0;
                for p in 0..dh {
                    acc += q.at2(i, col + p) * k_use.at2(j, col + p);
                }
                *rv = acc * scale;
                maxv = maxv.max(*rv);
            }
            let mut denom = 0.0;
            for rv in &mut row {
                *rv = (*rv - maxv).exp();
                denom += *rv;
            }
            for (j, rv) in row.iter().enumerate() {
                let w = rv / denom;
                a.data_mut()[(hd * n + i) * n + j] = w;
                for p in 0..dh {
                    let idx = i * d + col + p;
                    o.data_mut()[idx] += w * v_use.at2(j, col + p);
                }
            }
        }
    }
    let y = Tensor::from_vec(&[n, d], matmul(o.data(), params.wo.data(), n, d, d));
    let out = from_tokens(&y, r);
    let tape = want_tape.then(|| AttnTape {
        x,
        q,
        k: k_own.clone(),
        v: v_own.clone(),
        a,
        o,
    });
    Ok((out, (k_own, v_own), tape))
}

/// Gradients of the attention block (no injection, as in training).
/// Returns (d h, dWq, dWk, dWv, dWo) where `d h` is the gradient w.r.t. the
/// block *input* through the attention path only (residual handled outside).
fn attention_backward(
    params: &DenoiserParams,
    tape: &AttnTape,
    g_out: &Tensor,
) -> (Tensor, Tensor, Tensor, Tensor, Tensor) {
    let d = params.cfg.bottleneck();
    let r = g_out.shape()[1];
    let n = r * r;
    let heads = params.cfg.attn_heads;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let g_y = to_tokens(g_out);
    let dwo = Tensor::from_vec(
        &[d, d],
        matmul_tn(tape.o.data(), g_y.data(), n, d, d),
    );
    let g_o = Tensor::from_vec(&[n, d], matmul_nt(g_y.data(), params.wo.data(), n, d, d));

    let mut g_q = Tensor::zeros(&[n, d]);
    let mut g_k = Tensor::zeros(&[n, d]);
    let mut g_v = Tensor::zeros(&[n, d]);
    for hd in 0..heads {
        let col = hd * dh;
        for i in 0..n {
            // dA over this row, plus accumulation into dV
            let mut ga = vec![0.0; n];
            for (j, g) in ga.iter_mut().enumerate() {
                let mut acc = 0.0;
                for p in 0..dh {
                    acc += g_o.at2(i, col + p) * tape.v.at2(j, col + p);
                }
                *g = acc;
                let a_ij = tape.a.data()[(hd * n + i) * n + j];
                for p in 0..dh {
                    let idx = j * d + col + p;
                    g_v.data_mut()[idx] += a_ij * g_o.at2(i, col + p);
                }
            }
            // softmax jacobian
            let mut dot = 0.0;
            for (j, g) in ga.iter().enumerate() {
                dot += g * tape.a.data()[(hd * n + i) * n + j];
            }
            for (j, g) in ga.iter().enumerate() {
                let a_ij = tape.a.data()[(hd * n + i) * n + j];
                let gs = a_ij * (g - dot) * scale;
                for p in 0..dh {
                    g_q.data_mut()[i * d + col + p] += gs * tape.k.at2(j, col + p);
                    g_k.data_mut()[j * d + col + p] += gs * tape.q.at2(i, col + p);
                }
            }
        }
    }

    let dwq = Tensor::from_vec(&[d, d], matmul_tn(tape.x.data(), g_q.data(), n, d, d));
    let dwk = Tensor::from_vec(&[d, d], matmul_tn(tape.x.data(), g_k.data(), n, d, d));
    let dwv = Tensor::from_vec(&[d, d], matmul_tn(tape.x.data(), g_v.data(), n, d, d));
    let mut g_x = Tensor::from_vec(&[n, d], matmul_nt(g_q.data(), params.wq.data(), n, d, d));
    g_x.axpy(1.0, &Tensor::from_vec(
        &[n, d],
        matmul_nt(g_k.data(), params.wk.data(), n, d, d),
    ));
    g_x.axpy(1.0, &Tensor::from_vec(
        &[n, d],
        matmul_nt(g_v.data(), params.wv.data(), n, d, d),
    ));
    (from_tokens(&g_x, r), dwq, dwk, dwv, dwo)
}

// ── full network ─────────────────────────────────────────────────────────

/// Noise prediction plus the K/V this forward computed from its own input
/// (`cache.t` is a placeholder 0 until a pipeline tags it).
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub eps: Tensor,
    pub cache: AttentionCache,
}

/// Saved activations for [`backward`].
pub struct Tape {
    input: Tensor,
    z0: Tensor,
    a0: Tensor,
    z1: Tensor,
    a1: Tensor,
    z2: Tensor,
    emb: Vec<f64>,
    class_row: usize,
    attn: AttnTape,
    z3: Tensor,
    cat1: Tensor,
    z4: Tensor,
    cat2: Tensor,
    a4: Tensor,
}

fn run(
    params: &DenoiserParams,
    x: &Tensor,
    t_frac: f64,
    cond: &Condition,
    inject: Option<&AttentionCache>,
    want_tape: bool,
) -> Result<(ForwardOutput, Option<Tape>)> {
    let cfg = &params.cfg;
    let s = cfg.image_size;
    if x.shape() != [3, s, s] {
        return Err(Error::ShapeMismatch(format!(
            "denoiser input {:?}, expected [3, {s}, {s}]",
            x.shape()
        )));
    }
    if cond.depth.shape() != [s, s] {
        return Err(Error::ShapeMismatch(format!(
            "depth {:?}, expected [{s}, {s}]",
            cond.depth.shape()
        )));
    }
    if let Some(id) = cond.class_id {
        if id >= cfg.num_classes {
            return Err(Error::InvalidArgument(format!(
                "class id {id} out of range 0..{}",
                cfg.num_classes
            )));
        }
    }
    if !t_frac.is_finite() || !(0.0..=1.0).contains(&t_frac) {
        return Err(Error::InvalidArgument(format!(
            "timestep fraction must be in [0, 1], got {t_frac}"
        )));
    }

    let d = cfg.bottleneck();

    // stack image and depth into the 4-channel input
    let mut input = Tensor::zeros(&[4, s, s]);
    input.data_mut()[..3 * s * s].copy_from_slice(x.data());
    input.data_mut()[3 * s * s..].copy_from_slice(cond.depth.data());

    let z0 = conv2d(&params.conv_in, &input, 1);
    let a0 = z0.map(silu);
    let z1 = conv2d(&params.down1, &a0, 2);
    let a1 = z1.map(silu);
    let z2 = conv2d(&params.down2, &a1, 2);

    let emb = time_embedding(t_frac);
    let class_row = cond.class_id.unwrap_or(cfg.num_classes);
    let r = cfg.attn_resolution;
    let mut h = z2.map(silu);
    {
        let tw = params.time_proj.w.data();
        let tb = params.time_proj.b.data();
        let ce = params.class_embed.data();
        for ch in 0..d {
            let mut bias = tb[ch];
            for (i, &e) in emb.iter().enumerate() {
                bias += tw[ch * TIME_EMB_DIM + i] * e;
            }
            bias += ce[class_row * d + ch];
            for i in 0..r * r {
                h.data_mut()[ch * r * r + i] += bias;
            }
        }
    }

    let (attn_out, (k_own, v_own), attn_tape) = attention(params, &h, inject, want_tape)?;
    let ha = h.add(&attn_out);

    let u1 = upsample2(&ha);
    let cat1 = concat_channels(&u1, &a1);
    let z3 = conv2d(&params.up1, &cat1, 1);
    let a3 = z3.map(silu);
    let u2 = upsample2(&a3);
    let cat2 = concat_channels(&u2, &a0);
    let z4 = conv2d(&params.up2, &cat2, 1);
    let a4 = z4.map(silu);
    let eps = conv2d(&params.conv_out, &a4, 1);

    let out = ForwardOutput {
        eps,
        cache: AttentionCache {
            t: 0,
            k: k_own,
            v: v_own,
        },
    };
    let tape = if want_tape {
        Some(Tape {
            input,
            z0,
            a0,
            z1,
            a1,
            z2,
            emb,
            class_row,
            attn: attn_tape.expect("tape requested"),
            z3,
            cat1,
            z4,
            cat2,
            a4,
        })
    } else {
        None
    };
    Ok((out, tape))
}

/// Plain forward; `inject` swaps the attention K/V for a recorded cache.
pub fn forward(
    params: &DenoiserParams,
    x: &Tensor,
    t_frac: f64,
    cond: &Condition,
    inject: Option<&AttentionCache>,
) -> Result<ForwardOutput> {
    Ok(run(params, x, t_frac, cond, inject, false)?.0)
}

/// Forward that also records the activations needed for [`backward`].
/// Training never injects, so this path has no inject parameter.
pub fn forward_train(
    params: &DenoiserParams,
    x: &Tensor,
    t_frac: f64,
    cond: &Condition,
) -> Result<(ForwardOutput, Tape)> {
    let (out, tape) = run(params, x, t_frac, cond, None, true)?;
    Ok((out, tape.expect("tape requested")))
}

/// Reverse pass: upstream gradient on the noise prediction in, parameter
/// gradients out (input gradients are consumed internally; nothing in the
/// lab differentiates through the denoiser into its input).
pub fn backward(params: &DenoiserParams, tape: &Tape, g_eps: &Tensor) -> DenoiserParams {
    let cfg = &params.cfg;
    let (c, d) = (cfg.base_channels, cfg.bottleneck());
    let r = cfg.attn_resolution;
    let mut g = params.zeros_like();

    // output conv
    let (dw, db, g_a4) = conv2d_backward(&params.conv_out, &tape.a4, g_eps, 1);
    g.conv_out = Conv { w: dw, b: db };
    let g_z4 = g_a4.zip(&tape.z4, |gv, z| gv * dsilu(z));

    // up2
    let (dw, db, g_cat2) = conv2d_backward(&params.up2, &tape.cat2, &g_z4, 1);
    g.up2 = Conv { w: dw, b: db };
    let (g_u2, g_a0_skip) = split_channels(&g_cat2, 2 * c);
    let g_a3 = upsample2_backward(&g_u2);
    let g_z3 = g_a3.zip(&tape.z3, |gv, z| gv * dsilu(z));

    // up1
    let (dw, db, g_cat1) = conv2d_backward(&params.up1, &tape.cat1, &g_z3, 1);
    g.up1 = Conv { w: dw, b: db };
    let (g_u1, g_a1_skip) = split_channels(&g_cat1, d);
    let g_ha = upsample2_backward(&g_u1);

    // attention block with residual: ha = h + attn(h)
    let (g_h_attn, dwq, dwk, dwv, dwo) = attention_backward(params, &tape.attn, &g_ha);
    g.wq = dwq;
    g.wk = dwk;
    g.wv = dwv;
    g.wo = dwo;
    let g_h = g_ha.add(&g_h_attn);

    // time/class biases: per-channel sums over the bottleneck grid
    {
        let mut bias_grad = vec![0.0; d];
        for ch in 0..d {
            let mut acc = 0.0;
            for i in 0..r * r {
                acc += g_h.data()[ch * r * r + i];
            }
            bias_grad[ch] = acc;
        }
        for ch in 0..d {
            for (i, &e) in tape.emb.iter().enumerate() {
                g.time_proj.w.data_mut()[ch * TIME_EMB_DIM + i] = bias_grad[ch] * e;
            }
            g.time_proj.b.data_mut()[ch] = bias_grad[ch];
            g.class_embed.data_mut()[tape.class_row * d + ch] = bias_grad[ch];
        }
    }

    // down path (skips join here)
    let g_z2 = g_h.zip(&tape.z2, |gv, z| gv * dsilu(z));
    let (dw, db, g_a1_conv) = conv2d_backward(&params.down2, &tape.a1, &g_z2, 2);
    g.down2 = Conv { w: dw, b: db };
    let g_a1 = g_a1_conv.add(&g_a1_skip);
    let g_z1 = g_a1.zip(&tape.z1, |gv, z| gv * dsilu(z));
    let (dw, db, g_a0_conv) = conv2d_backward(&params.down1, &tape.a0, &g_z1, 2);
    g.down1 = Conv { w: dw, b: db };
    let g_a0 = g_a0_conv.add(&g_a0_skip);
    let g_z0 = g_a0.zip(&tape.z0, |gv, z| gv * dsilu(z));
    let (dw, db, _g_input) = conv2d_backward(&params.conv_in, &tape.input, &g_z0, 1);
    g.conv_in = Conv { w: dw, b: db };

    g
}
