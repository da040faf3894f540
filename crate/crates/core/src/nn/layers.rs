//! Composite layers built from [`Graph`] ops. Parameters live in the store
//! under a caller-chosen prefix.

use rand_chacha::ChaCha8Rng;

use super::{Graph, NnError, ParamStore, Var};

/// The generator used for every stochastic op (dropout masks, noise, shuffling):
/// ChaCha with 8 rounds, seeded through `SeedableRng::seed_from_u64`.
pub type DetRng = ChaCha8Rng;

const INIT_STD: f64 = 0.02;

/// `{prefix}.w: [out, in]` Gaussian(0.02), `{prefix}.b: [out]` zeros.
pub fn init_linear(store: &mut ParamStore, prefix: &str, input: usize, output: usize, seed: u64) {
    store.insert_normal(&format!("{prefix}.w"), &[output, input], INIT_STD, seed);
    store.insert_zeros(&format!("{prefix}.b"), &[output]);
}

/// GRU cell parameters with gates stacked in `(reset, update, candidate)` order:
/// `w_ih: [3h, in]`, `w_hh: [3h, h]`, `b_ih`, `b_hh: [3h]`.
pub fn init_gru(store: &mut ParamStore, prefix: &str, input: usize, hidden: usize, seed: u64) {
    store.insert_normal(&format!("{prefix}.w_ih"), &[3 * hidden, input], INIT_STD, seed);
    store.insert_normal(&format!("{prefix}.w_hh"), &[3 * hidden, hidden], INIT_STD, seed);
    store.insert_zeros(&format!("{prefix}.b_ih"), &[3 * hidden]);
    store.insert_zeros(&format!("{prefix}.b_hh"), &[3 * hidden]);
}

/// One GRU step over `[rows, in]` inputs and `[rows, hidden]` state:
///
/// ```text
/// r = σ(W_ir x + b_ir + W_hr h + b_hr)
/// z = σ(W_iz x + b_iz + W_hz h + b_hz)
/// n = tanh(W_in x + b_in + r ⊙ (W_hn h + b_hn))
/// h' = (1 - z) ⊙ n + z ⊙ h
/// ```
pub fn gru_step(g: &mut Graph, x: Var, h_prev: Var, prefix: &str) -> Result<Var, NnError> {
    let hidden = g.shape(h_prev).last().copied().unwrap_or(0);
    let w_hh_shape = g.store().get(&format!("{prefix}.w_hh"))?.shape().to_vec();
    if w_hh_shape != [3 * hidden, hidden] {
        return Err(NnError::Shape {
            op: "gru_step",
            detail: format!("hidden state {:?} vs {prefix}.w_hh {:?}", g.shape(h_prev), w_hh_shape),
        });
    }
    let gi = g.linear_named(x, &format!("{prefix}.w_ih"), &format!("{prefix}.b_ih"))?;
    let gh = g.linear_named(h_prev, &format!("{prefix}.w_hh"), &format!("{prefix}.b_hh"))?;
    if g.shape(gi) != g.shape(gh) {
        return Err(NnError::Shape {
            op: "gru_step",
            detail: format!("input gates {:?} vs hidden gates {:?}", g.shape(gi), g.shape(gh)),
        });
    }
    let (i_r, i_z, i_n) = (
        g.slice_cols(gi, 0, hidden)?,
        g.slice_cols(gi, hidden, 2 * hidden)?,
        g.slice_cols(gi, 2 * hidden, 3 * hidden)?,
    );
    let (h_r, h_z, h_n) = (
        g.slice_cols(gh, 0, hidden)?,
        g.slice_cols(gh, hidden, 2 * hidden)?,
        g.slice_cols(gh, 2 * hidden, 3 * hidden)?,
    );
    let r = g.add(i_r, h_r)?;
    let r = g.sigmoid(r)?;
    let z = g.add(i_z, h_z)?;
    let z = g.sigmoid(z)?;
    let rh = g.mul(r, h_n)?;
    let n = g.add(i_n, rh)?;
    let n = g.tanh(n)?;
    let one_minus_z = g.affine(z, -1.0, 1.0)?;
    let a = g.mul(one_minus_z, n)?;
    let b = g.mul(z, h_prev)?;
    g.add(a, b)
}

/// Parameters of one pre-norm transformer block of width `d` with a `4d`
/// feed-forward layer.
pub fn init_attention_block(store: &mut ParamStore, prefix: &str, d: usize, seed: u64) {
    for ln in ["ln1", "ln2"] {
        store.insert_full(&format!("{prefix}.{ln}.g"), &[d], 1.0);
        store.insert_zeros(&format!("{prefix}.{ln}.b"), &[d]);
    }
    for proj in ["q", "k", "v", "o"] {
        init_linear(store, &format!("{prefix}.attn.{proj}"), d, d, seed);
    }
    init_linear(store, &format!("{prefix}.ff1"), d, 4 * d, seed);
    init_linear(store, &format!("{prefix}.ff2"), 4 * d, d, seed);
}

/// Pre-norm multi-head self-attention followed by a GELU feed-forward
/// layer, each wrapped in a residual connection:
///
/// ```text
/// a = x + Drop(Wo · MHA(LN1(x)))
/// y = a + Drop(FF2(GELU(FF1(LN2(a)))))
/// ```
///
/// Dropout (on attention weights and on both residual branches) is applied
/// only when `rng` is given.
pub fn attention_block(
    g: &mut Graph,
    x: Var,
    prefix: &str,
    n_heads: usize,
    dropout: f64,
    mut rng: Option<&mut DetRng>,
) -> Result<Var, NnError> {
    let d = g.shape(x).last().copied().unwrap_or(0);
    if n_heads == 0 || d % n_heads != 0 {
        return Err(NnError::Config(format!(
            "model width {d} is not divisible by {n_heads} heads"
        )));
    }
    let seq = g.value(x).rows();
    let hd = d / n_heads;
    let scale = 1.0 / (hd as f64).sqrt();

    let (g1, b1) = (g.param(&format!("{prefix}.ln1.g"))?, g.param(&format!("{prefix}.ln1.b"))?);
    let h = g.layer_norm(x, g1, b1)?;
    let q = g.linear_named(h, &format!("{prefix}.attn.q.w"), &format!("{prefix}.attn.q.b"))?;
    let k = g.linear_named(h, &format!("{prefix}.attn.k.w"), &format!("{prefix}.attn.k.b"))?;
    let v = g.linear_named(h, &format!("{prefix}.attn.v.w"), &format!("{prefix}.attn.v.b"))?;

    let mut heads = Vec::with_capacity(n_heads);
    for i in 0..n_heads {
        let (lo, hi) = (i * hd, (i + 1) * hd);
        let qh = g.slice_cols(q, lo, hi)?;
        let kh = g.slice_cols(k, lo, hi)?;
        let vh = g.slice_cols(v, lo, hi)?;
        let scores = g.matmul_bt(qh, kh)?;
        let scores = g.affine(scores, scale, 0.0)?;
        let mut weights = g.softmax(scores)?;
        if let Some(r) = rng.as_deref_mut() {
            weights = g.dropout(weights, dropout, r)?;
        }
        heads.push(g.matmul(weights, vh)?);
    }
    debug_assert_eq!(g.value(heads[0]).rows(), seq);
    let attn = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
    let mut attn = g.linear_named(attn, &format!("{prefix}.attn.o.w"), &format!("{prefix}.attn.o.b"))?;
    if let Some(r) = rng.as_deref_mut() {
        attn = g.dropout(attn, dropout, r)?;
    }
    let a = g.add(x, attn)?;

    let (g2, b2) = (g.param(&format!("{prefix}.ln2.g"))?, g.param(&format!("{prefix}.ln2.b"))?);
    let h = g.layer_norm(a, g2, b2)?;
    let f = g.linear_named(h, &format!("{prefix}.ff1.w"), &format!("{prefix}.ff1.b"))?;
    let f = g.gelu(f)?;
    let mut f = g.linear_named(f, &format!("{prefix}.ff2.w"), &format!("{prefix}.ff2.b"))?;
    if let Some(r) = rng {
        f = g.dropout(f, dropout, r)?;
    }
    g.add(a, f)
}
