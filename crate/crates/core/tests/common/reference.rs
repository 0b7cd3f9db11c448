//! Loop-based forward passes written directly from the model definitions.
//! They share no code with the library's tape implementation and serve as
//! oracles for it.

use subword_lm::numcore::Params;

fn p<'a>(params: &'a Params, name: &str) -> &'a [f64] {
    let i = params
        .index_of(name)
        .unwrap_or_else(|| panic!("missing parameter {name}"));
    params.get(i).data()
}

/// `x · W` for a row vector `x` and row-major `W [x.len(), cols]`.
fn vec_mat(x: &[f64], w: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for (i, xi) in x.iter().enumerate() {
        for j in 0..cols {
            out[j] += xi * w[i * cols + j];
        }
    }
    out
}

fn plus(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn layer_norm(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let denom = (var + 1e-5).sqrt();
    x.iter()
        .enumerate()
        .map(|(i, v)| (v - mean) / denom * g[i] + b[i])
        .collect()
}

fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().cloned().fold(f64::MIN, f64::max);
    let e: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

fn feed_forward(params: &Params, pre: &str, x: &[f64], hidden: usize, inner: usize) -> Vec<f64> {
    let h: Vec<f64> = plus(&vec_mat(x, p(params, &format!("{pre}.ff.w1")), inner), p(params, &format!("{pre}.ff.b1")))
        .into_iter()
        .map(gelu)
        .collect();
    plus(&vec_mat(&h, p(params, &format!("{pre}.ff.w2")), hidden), p(params, &format!("{pre}.ff.b2")))
}

fn tied_logits(params: &Params, x: &[f64], vocab: usize) -> Vec<f64> {
    let e = p(params, "tok_emb");
    let h = x.len();
    let bias = p(params, "out_bias");
    (0..vocab).map(|v| dot(x, &e[v * h..(v + 1) * h]) + bias[v]).collect()
}

fn post_block(params: &Params, pre: &str, x: &[Vec<f64>], attn: &[Vec<f64>], hidden: usize, inner: usize) -> Vec<Vec<f64>> {
    x.iter()
        .zip(attn)
        .map(|(xi, ai)| {
            let y = layer_norm(
                &plus(xi, ai),
                p(params, &format!("{pre}.ln1.g")),
                p(params, &format!("{pre}.ln1.b")),
            );
            let f = feed_forward(params, pre, &y, hidden, inner);
            layer_norm(&plus(&y, &f), p(params, &format!("{pre}.ln2.g")), p(params, &format!("{pre}.ln2.b")))
        })
        .collect()
}

/// Encoder logits `[T][V]` for one sequence; `real[j] == false` hides key `j`.
#[allow(clippy::too_many_arguments)]
pub fn encoder_logits(
    params: &Params,
    layers: usize,
    hidden: usize,
    heads: usize,
    inner: usize,
    vocab: usize,
    ids: &[u32],
    real: &[bool],
) -> Vec<Vec<f64>> {
    let t = ids.len();
    let d = hidden / heads;
    let tok = p(params, "tok_emb");
    let pos = p(params, "pos_emb");
    let mut x: Vec<Vec<f64>> = (0..t)
        .map(|i| {
            let id = ids[i] as usize;
            let e = plus(&tok[id * hidden..(id + 1) * hidden], &pos[i * hidden..(i + 1) * hidden]);
            layer_norm(&e, p(params, "emb_ln.g"), p(params, "emb_ln.b"))
        })
        .collect();
    for l in 0..layers {
        let pre = format!("layer{l}");
        let proj = |name: &str, xi: &[f64]| {
            plus(
                &vec_mat(xi, p(params, &format!("{pre}.attn.w{name}")), hidden),
                p(params, &format!("{pre}.attn.b{name}")),
            )
        };
        let q: Vec<_> = x.iter().map(|xi| proj("q", xi)).collect();
        let k: Vec<_> = x.iter().map(|xi| proj("k", xi)).collect();
        let v: Vec<_> = x.iter().map(|xi| proj("v", xi)).collect();
        let mut attn = vec![vec![0.0; hidden]; t];
        for head in 0..heads {
            let r = head * d..(head + 1) * d;
            for i in 0..t {
                let visible: Vec<usize> = (0..t).filter(|&j| real[j]).collect();
                let scores: Vec<f64> = visible
                    .iter()
                    .map(|&j| dot(&q[i][r.clone()], &k[j][r.clone()]) / (d as f64).sqrt())
                    .collect();
                let w = softmax(&scores);
                for (wj, &j) in w.iter().zip(&visible) {
                    for c in r.clone() {
                        attn[i][c] += wj * v[j][c];
                    }
                }
            }
        }
        let out: Vec<_> = attn.iter().map(|a| proj("o", a)).collect();
        x = post_block(params, &pre, &x, &out, hidden, inner);
    }
    x.iter().map(|xi| tied_logits(params, xi, vocab)).collect()
}

/// Sinusoidal encoding of one distance.
fn sinusoid(dist: usize, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|j| {
            let pair = (j / 2) as f64;
            let angle = dist as f64 / 10000f64.powf(2.0 * pair / dim as f64);
            if j % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

/// Causal relative-attention logits `[T][V]` for one sequence processed
/// in a single window with no cached memory.
#[allow(clippy::too_many_arguments)]
pub fn causal_logits(
    params: &Params,
    layers: usize,
    hidden: usize,
    heads: usize,
    head_size: usize,
    inner: usize,
    vocab: usize,
    ids: &[u32],
) -> Vec<Vec<f64>> {
    let t = ids.len();
    let width = heads * head_size;
    let tok = p(params, "tok_emb");
    let mut x: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| tok[id as usize * hidden..(id as usize + 1) * hidden].to_vec())
        .collect();
    for l in 0..layers {
        let pre = format!("layer{l}");
        let w = |name: &str| p(params, &format!("{pre}.attn.{name}"));
        let q: Vec<_> = x.iter().map(|xi| vec_mat(xi, w("wq"), width)).collect();
        let k: Vec<_> = x.iter().map(|xi| vec_mat(xi, w("wk"), width)).collect();
        let v: Vec<_> = x.iter().map(|xi| vec_mat(xi, w("wv"), width)).collect();
        let rel: Vec<_> = (0..t).map(|dist| vec_mat(&sinusoid(dist, hidden), w("wr"), width)).collect();
        let (u, vb) = (w("u"), w("v"));
        let mut ctx = vec![vec![0.0; width]; t];
        for head in 0..heads {
            let r = head * head_size..(head + 1) * head_size;
            for i in 0..t {
                let scores: Vec<f64> = (0..=i)
                    .map(|j| {
                        let content: f64 = r.clone().map(|c| (q[i][c] + u[c]) * k[j][c]).sum();
                        let position: f64 = r.clone().map(|c| (q[i][c] + vb[c]) * rel[i - j][c]).sum();
                        (content + position) / (head_size as f64).sqrt()
                    })
                    .collect();
                let a = softmax(&scores);
                for (j, aj) in a.iter().enumerate() {
                    for c in r.clone() {
                        ctx[i][c] += aj * v[j][c];
                    }
                }
            }
        }
        let out: Vec<_> = ctx.iter().map(|ci| plus(&vec_mat(ci, w("wo"), hidden), w("bo"))).collect();
        x = post_block(params, &pre, &x, &out, hidden, inner);
    }
    x.iter().map(|xi| tied_logits(params, xi, vocab)).collect()
}
