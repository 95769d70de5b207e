//! Dense brute-force reference implementations over `Vec<Vec<f64>>`, written
//! independently of the tape so they can serve as oracles.

#![allow(dead_code)]

pub mod fd;

use attrseg::ops::{AttnParams, EncoderLayerParams, LayerNorm, Linear, MixerParams, Mlp, SlotParams};
use attrseg::params::{ParamId, ParamStore};
use attrseg::tape::Mat;
use rand::Rng;

pub type Dense = Vec<Vec<f64>>;

pub fn dense(m: &Mat) -> Dense {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

pub fn random_dense<R: Rng>(rng: &mut R, r: usize, c: usize) -> Dense {
    (0..r).map(|_| (0..c).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
}

pub fn to_mat(d: &Dense) -> Mat {
    let c = d.first().map_or(0, Vec::len);
    Mat::from_shape_vec((d.len(), c), d.iter().flatten().copied().collect()).unwrap()
}

/// Overwrites every parameter with uniform noise in `[-scale, scale]`.
pub fn randomize<R: Rng>(store: &mut ParamStore, rng: &mut R, scale: f64) {
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        store.get_mut(id).mapv_inplace(|_| rng.random_range(-scale..scale));
    }
}

/// `max |a - b| / max |b|`.
pub fn rel_err(a: &Mat, b: &Dense) -> f64 {
    let mut num: f64 = 0.0;
    let mut den: f64 = 0.0;
    for (i, row) in b.iter().enumerate() {
        for (j, &y) in row.iter().enumerate() {
            num = num.max((a[[i, j]] - y).abs());
            den = den.max(y.abs());
        }
    }
    assert_eq!(a.dim(), (b.len(), b.first().map_or(0, Vec::len)));
    num / den.max(f64::MIN_POSITIVE)
}

fn mm(a: &Dense, b: &Dense) -> Dense {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for t in 0..k {
                s += a[i][t] * b[t][j];
            }
            out[i][j] = s;
        }
    }
    out
}

fn tr(a: &Dense) -> Dense {
    (0..a[0].len()).map(|j| a.iter().map(|r| r[j]).collect()).collect()
}

pub fn add(a: &Dense, b: &Dense) -> Dense {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|x| x / z).collect()
}

fn linear(store: &ParamStore, l: &Linear, x: &Dense) -> Dense {
    let w = dense(store.get(l.w));
    let b = store.get(l.b);
    mm(x, &w)
        .into_iter()
        .map(|r| r.iter().enumerate().map(|(j, v)| v + b[[0, j]]).collect())
        .collect()
}

pub fn layer_norm(store: &ParamStore, ln: &LayerNorm, x: &Dense) -> Dense {
    let g = store.get(ln.gain);
    let b = store.get(ln.bias);
    x.iter()
        .map(|r| {
            let n = r.len() as f64;
            let mean = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            r.iter()
                .enumerate()
                .map(|(j, v)| (v - mean) / (var + 1e-5).sqrt() * g[[0, j]] + b[[0, j]])
                .collect()
        })
        .collect()
}

fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh())
}

fn mlp(store: &ParamStore, m: &Mlp, x: &Dense) -> Dense {
    let h: Dense = linear(store, &m.fc1, x)
        .into_iter()
        .map(|r| r.into_iter().map(gelu).collect())
        .collect();
    linear(store, &m.fc2, &h)
}

pub fn attention(store: &ParamStore, p: &AttnParams, queries: &Dense, keys: &Dense, values: &Dense) -> Dense {
    let q = linear(store, &p.q, queries);
    let k = linear(store, &p.k, keys);
    let v = linear(store, &p.v, values);
    let hd = p.dim / p.heads;
    let mut merged = vec![vec![0.0; p.dim]; q.len()];
    for h in 0..p.heads {
        let cols = h * hd..(h + 1) * hd;
        for (i, qi) in q.iter().enumerate() {
            let scores: Vec<f64> = k
                .iter()
                .map(|kj| cols.clone().map(|c| qi[c] * kj[c]).sum::<f64>() / (hd as f64).sqrt())
                .collect();
            let w = softmax(&scores);
            for c in cols.clone() {
                merged[i][c] = w.iter().zip(&v).map(|(wj, vj)| wj * vj[c]).sum();
            }
        }
    }
    linear(store, &p.o, &merged)
}

pub struct SlotRef {
    pub output: Dense,
    /// Assignment normalized over slots (columns sum to one).
    pub assign: Dense,
    pub weights: Dense,
}

pub fn slot_attention(store: &ParamStore, p: &SlotParams, slots: &Dense, inputs: &Dense) -> SlotRef {
    let q = mm(slots, &dense(store.get(p.wq)));
    let k = mm(inputs, &dense(store.get(p.wk)));
    let v = mm(inputs, &dense(store.get(p.wv)));
    let scale = 1.0 / (p.dim as f64).sqrt();
    let logits: Dense = q
        .iter()
        .map(|qi| k.iter().map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale).collect())
        .collect();
    let assign = tr(&tr(&logits).iter().map(|col| softmax(col)).collect());
    let weights: Dense = assign
        .iter()
        .map(|r| {
            let s: f64 = r.iter().sum();
            r.iter().map(|x| x / s).collect()
        })
        .collect();
    SlotRef {
        output: mm(&weights, &v),
        assign,
        weights,
    }
}

pub fn mixer(store: &ParamStore, p: &MixerParams, x: &Dense) -> Dense {
    let h = layer_norm(store, &p.token_norm, x);
    let h = tr(&mlp(store, &p.token_mlp, &tr(&h)));
    let x = add(x, &h);
    let h = mlp(store, &p.channel_mlp, &layer_norm(store, &p.channel_norm, &x));
    add(&x, &h)
}

pub fn encoder_layer(store: &ParamStore, p: &EncoderLayerParams, x: &Dense) -> Dense {
    let h = layer_norm(store, &p.attn_norm, x);
    let h = attention(store, &p.attn, &h, &h, &h);
    let x = add(x, &h);
    let h = mlp(store, &p.ffn, &layer_norm(store, &p.ffn_norm, &x));
    add(&x, &h)
}
