//! Attention and mixing kernels recorded on a [`Tape`].
//!
//! All kernels take row-major `tokens × channels` inputs. Parameter blocks
//! are plain collections of [`ParamId`]s registered in a [`ParamStore`];
//! a forward pass binds the store to the tape and looks the handles up.

use rand::Rng;

use crate::error::{shape_err, Result};
use crate::params::{init, Bound, ParamId, ParamStore};
use crate::tape::{Mat, Tape, Var};

/// Hidden-width expansion of every feed-forward MLP.
pub const FFN_RATIO: usize = 4;
pub const DEFAULT_HEADS: usize = 4;

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        fan_in: usize,
        fan_out: usize,
    ) -> Self {
        let w = store.register(format!("{name}.w"), init::xavier(rng, fan_in, fan_out));
        let b = store.register(format!("{name}.b"), Mat::zeros((1, fan_out)));
        Self {
            w,
            b,
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, t: &mut Tape, p: &Bound, x: Var) -> Var {
        let y = t.matmul(x, p[self.w]);
        t.add_row(y, p[self.b])
    }

    /// Zeroes weight and bias so the layer outputs exactly zero.
    pub fn zero(&self, store: &mut ParamStore) {
        store.get_mut(self.w).fill(0.0);
        store.get_mut(self.b).fill(0.0);
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Self {
            gain: store.register(format!("{name}.gain"), Mat::ones((1, d))),
            bias: store.register(format!("{name}.bias"), Mat::zeros((1, d))),
        }
    }

    pub fn forward(&self, t: &mut Tape, p: &Bound, x: Var) -> Var {
        t.layer_norm(x, p[self.gain], p[self.bias])
    }
}

/// Multi-head attention projections.
#[derive(Clone, Debug)]
pub struct AttnParams {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl AttnParams {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(shape_err(format!(
                "{name}: width {dim} not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            q: Linear::new(store, rng, &format!("{name}.q"), dim, dim),
            k: Linear::new(store, rng, &format!("{name}.k"), dim, dim),
            v: Linear::new(store, rng, &format!("{name}.v"), dim, dim),
            o: Linear::new(store, rng, &format!("{name}.o"), dim, dim),
            heads,
            dim,
        })
    }
}

fn check_width(t: &Tape, v: Var, dim: usize, what: &str) -> Result<()> {
    let (n, d) = t.shape(v);
    if d != dim {
        return Err(shape_err(format!("{what}: width {d}, expected {dim}")));
    }
    if n == 0 {
        return Err(shape_err(format!("{what}: no tokens")));
    }
    Ok(())
}

/// Multi-head scaled dot-product attention of `queries` over
/// `keys`/`values`, followed by the output projection.
pub fn cross_attention(
    t: &mut Tape,
    p: &Bound,
    queries: Var,
    keys: Var,
    values: Var,
    params: &AttnParams,
) -> Result<Var> {
    check_width(t, queries, params.dim, "cross_attention queries")?;
    check_width(t, keys, params.dim, "cross_attention keys")?;
    check_width(t, values, params.dim, "cross_attention values")?;
    if t.shape(keys).0 != t.shape(values).0 {
        return Err(shape_err(format!(
            "cross_attention: {} keys but {} values",
            t.shape(keys).0,
            t.shape(values).0
        )));
    }
    let q = params.q.forward(t, p, queries);
    let k = params.k.forward(t, p, keys);
    let v = params.v.forward(t, p, values);
    let head_dim = params.dim / params.heads;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut outs = Vec::with_capacity(params.heads);
    for h in 0..params.heads {
        let (qh, kh, vh) = if params.heads == 1 {
            (q, k, v)
        } else {
            (
                t.slice_cols(q, h * head_dim, head_dim),
                t.slice_cols(k, h * head_dim, head_dim),
                t.slice_cols(v, h * head_dim, head_dim),
            )
        };
        let scores = t.matmul_t(qh, kh);
        let scores = t.scale(scores, scale);
        let attn = t.softmax_rows(scores);
        outs.push(t.matmul(attn, vh));
    }
    let merged = if outs.len() == 1 {
        outs[0]
    } else {
        t.concat_cols(&outs)
    };
    Ok(params.o.forward(t, p, merged))
}

/// Projections of a single-head, single-iteration slot attention.
#[derive(Clone, Debug)]
pub struct SlotParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub dim: usize,
}

impl SlotParams {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, dim: usize) -> Self {
        Self {
            wq: store.register(format!("{name}.wq"), init::xavier(rng, dim, dim)),
            wk: store.register(format!("{name}.wk"), init::xavier(rng, dim, dim)),
            wv: store.register(format!("{name}.wv"), init::xavier(rng, dim, dim)),
            dim,
        }
    }
}

pub struct SlotOutput {
    /// `slots × d` grouped representation.
    pub output: Var,
    /// `slots × inputs` log of the assignment normalized over slots.
    pub log_assign: Var,
    /// `slots × inputs` per-slot weights, each row summing to one.
    pub weights: Var,
}

/// Slots compete for every input token (softmax over the slot axis); each
/// slot then takes the weighted mean of the projected inputs it won.
///
/// The renormalization over inputs is computed in log space so that a slot
/// losing every competition still gets a well-defined weight row.
pub fn slot_attention(
    t: &mut Tape,
    p: &Bound,
    slots: Var,
    inputs: Var,
    params: &SlotParams,
) -> Result<SlotOutput> {
    check_width(t, slots, params.dim, "slot_attention slots")?;
    check_width(t, inputs, params.dim, "slot_attention inputs")?;
    let q = t.matmul(slots, p[params.wq]);
    let k = t.matmul(inputs, p[params.wk]);
    let v = t.matmul(inputs, p[params.wv]);
    let logits = t.matmul_t(q, k);
    let logits = t.scale(logits, 1.0 / (params.dim as f64).sqrt());
    let by_input = t.transpose(logits);
    let log_assign = t.log_softmax_rows(by_input);
    let log_assign = t.transpose(log_assign);
    let weights = t.softmax_rows(log_assign);
    let output = t.matmul(weights, v);
    Ok(SlotOutput {
        output,
        log_assign,
        weights,
    })
}

/// Pre-norm two-layer MLP with GELU: `fc2(gelu(fc1(x)))`.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        width: usize,
        hidden: usize,
    ) -> Self {
        Self {
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), width, hidden),
            fc2: Linear::new(store, rng, &format!("{name}.fc2"), hidden, width),
        }
    }

    pub fn forward(&self, t: &mut Tape, p: &Bound, x: Var) -> Var {
        let h = self.fc1.forward(t, p, x);
        let h = t.gelu(h);
        self.fc2.forward(t, p, h)
    }
}

#[derive(Clone, Debug)]
pub struct MixerParams {
    pub token_norm: LayerNorm,
    pub token_mlp: Mlp,
    pub channel_norm: LayerNorm,
    pub channel_mlp: Mlp,
    pub tokens: usize,
    pub dim: usize,
}

impl MixerParams {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        tokens: usize,
        dim: usize,
    ) -> Self {
        Self {
            token_norm: LayerNorm::new(store, &format!("{name}.token_norm"), dim),
            token_mlp: Mlp::new(
                store,
                rng,
                &format!("{name}.token_mlp"),
                tokens,
                FFN_RATIO * tokens,
            ),
            channel_norm: LayerNorm::new(store, &format!("{name}.channel_norm"), dim),
            channel_mlp: Mlp::new(
                store,
                rng,
                &format!("{name}.channel_mlp"),
                dim,
                FFN_RATIO * dim,
            ),
            tokens,
            dim,
        }
    }
}

/// Token-mixing MLP across the token axis, then channel MLP across the
/// channel axis, each pre-normed and wrapped in a residual.
pub fn mixer_block(t: &mut Tape, p: &Bound, tokens: Var, params: &MixerParams) -> Result<Var> {
    check_width(t, tokens, params.dim, "mixer_block")?;
    if t.shape(tokens).0 != params.tokens {
        return Err(shape_err(format!(
            "mixer_block: {} tokens, expected {}",
            t.shape(tokens).0,
            params.tokens
        )));
    }
    let h = params.token_norm.forward(t, p, tokens);
    let h = t.transpose(h);
    let h = params.token_mlp.forward(t, p, h);
    let h = t.transpose(h);
    let x = t.add(tokens, h);
    let h = params.channel_norm.forward(t, p, x);
    let h = params.channel_mlp.forward(t, p, h);
    Ok(t.add(x, h))
}

#[derive(Clone, Debug)]
pub struct EncoderLayerParams {
    pub attn_norm: LayerNorm,
    pub attn: AttnParams,
    pub ffn_norm: LayerNorm,
    pub ffn: Mlp,
}

impl EncoderLayerParams {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> Result<Self> {
        Ok(Self {
            attn_norm: LayerNorm::new(store, &format!("{name}.attn_norm"), dim),
            attn: AttnParams::new(store, rng, &format!("{name}.attn"), dim, heads)?,
            ffn_norm: LayerNorm::new(store, &format!("{name}.ffn_norm"), dim),
            ffn: Mlp::new(store, rng, &format!("{name}.ffn"), dim, FFN_RATIO * dim),
        })
    }

    /// Zeroes both residual-branch output projections, turning the layer
    /// into the identity.
    pub fn zero_outputs(&self, store: &mut ParamStore) {
        self.attn.o.zero(store);
        self.ffn.fc2.zero(store);
    }
}

/// Pre-norm self-attention block followed by a pre-norm feed-forward block.
pub fn transformer_encoder_layer(
    t: &mut Tape,
    p: &Bound,
    tokens: Var,
    params: &EncoderLayerParams,
) -> Result<Var> {
    check_width(t, tokens, params.attn.dim, "transformer_encoder_layer")?;
    let h = params.attn_norm.forward(t, p, tokens);
    let h = cross_attention(t, p, h, h, h, &params.attn)?;
    let x = t.add(tokens, h);
    let h = params.ffn_norm.forward(t, p, x);
    let h = params.ffn.forward(t, p, h);
    Ok(t.add(x, h))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Mat::from_shape_simple_fn((r, c), || rng.random_range(-1.0..1.0))
    }

    fn max_abs_diff(a: &Mat, b: &Mat) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn single_key_attention_ignores_queries() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let params = AttnParams::new(&mut store, &mut rng, "a", 8, 2).unwrap();
        let mut t = Tape::new();
        let p = store.bind(&mut t, false);
        let q = t.constant(rand_mat(&mut rng, 3, 8));
        let kv = t.constant(rand_mat(&mut rng, 1, 8));
        let out = cross_attention(&mut t, &p, q, kv, kv, &params).unwrap();
        let v = params.v.forward(&mut t, &p, kv);
        let expected = params.o.forward(&mut t, &p, v);
        let out = t.value(out);
        for row in out.rows() {
            for (a, b) in row.iter().zip(t.value(expected).row(0)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identical_keys_give_identical_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let params = AttnParams::new(&mut store, &mut rng, "a", 8, 4).unwrap();
        let mut t = Tape::new();
        let p = store.bind(&mut t, false);
        let q = t.constant(rand_mat(&mut rng, 4, 8));
        let row = rand_mat(&mut rng, 1, 8);
        let kv = t.constant(row.broadcast((5, 8)).unwrap().to_owned());
        let out = cross_attention(&mut t, &p, q, kv, kv, &params).unwrap();
        let out = t.value(out);
        for r in 1..4 {
            for c in 0..8 {
                assert!((out[[r, c]] - out[[0, c]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_rejects_mismatched_widths() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let params = AttnParams::new(&mut store, &mut rng, "a", 8, 4).unwrap();
        let mut t = Tape::new();
        let p = store.bind(&mut t, false);
        let q = t.constant(rand_mat(&mut rng, 2, 8));
        let k = t.constant(rand_mat(&mut rng, 3, 6));
        assert!(cross_attention(&mut t, &p, q, k, k, &params).is_err());
        assert!(AttnParams::new(&mut store, &mut rng, "b", 6, 4).is_err());
    }

    #[test]
    fn single_slot_takes_uniform_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let params = SlotParams::new(&mut store, &mut rng, "s", 6);
        let mut t = Tape::new();
        let p = store.bind(&mut t, false);
        let slots = t.constant(rand_mat(&mut rng, 1, 6));
        let inputs = t.constant(rand_mat(&mut rng, 5, 6));
        let out = slot_attention(&mut t, &p, slots, inputs, &params).unwrap();
        let weights = t.value(out.weights);
        assert!(weights.iter().all(|w| (w - 0.2).abs() < 1e-12));
        let proj = t.matmul(inputs, p[params.wv]);
        let mean = t.mean_rows(proj);
        assert!(max_abs_diff(t.value(out.output), t.value(mean)) < 1e-12);
    }

    #[test]
    fn identical_inputs_reproduce_their_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let params = SlotParams::new(&mut store, &mut rng, "s", 4);
        let mut t = Tape::new();
        let p = store.bind(&mut t, false);
        let slots = t.constant(rand_mat(&mut rng, 3, 4));
        let row = rand_mat(&mut rng, 1, 4);
        let inputs = t.constant(row.broadcast((6, 4)).unwrap().to_owned());
        let out = slot_attention(&mut t, &p, slots, inputs, &params).unwrap();
        let single = t.constant(row);
        let proj = t.matmul(single, p[params.wv]);
        for r in t.value(out.output).rows() {
            for (a, b) in r.iter().zip(t.value(proj).row(0)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zeroed_mixer_and_encoder_are_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let mixer = MixerParams::new(&mut store, &mut rng, "m", 3, 8);
        let layer = EncoderLayerParams::new(&mut store, &mut rng, "e", 8, 2).unwrap();
        mixer.token_mlp.fc2.zero(&mut store);
        mixer.channel_mlp.fc2.zero(&mut store);
        layer.zero_outputs(&mut store);
        let x0 = rand_mat(&mut rng, 3, 8);
        let mut t = Tape::new();
        let p = store.bind(&mut t, false);
        let x = t.constant(x0.clone());
        let m = mixer_block(&mut t, &p, x, &mixer).unwrap();
        assert_eq!(t.value(m), &x0);
        let e = transformer_encoder_layer(&mut t, &p, x, &layer).unwrap();
        assert_eq!(t.value(e), &x0);
    }

    #[test]
    fn mixer_preserves_shape_and_checks_token_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for (g, d) in [(1, 2), (4, 6), (7, 3)] {
            let mut store = ParamStore::new();
            let mixer = MixerParams::new(&mut store, &mut rng, "m", g, d);
            let mut t = Tape::new();
            let p = store.bind(&mut t, false);
            let x = t.constant(rand_mat(&mut rng, g, d));
            let y = mixer_block(&mut t, &p, x, &mixer).unwrap();
            assert_eq!(t.shape(y), (g, d));
            let bad = t.constant(rand_mat(&mut rng, g + 1, d));
            assert!(mixer_block(&mut t, &p, bad, &mixer).is_err());
        }
    }
}
