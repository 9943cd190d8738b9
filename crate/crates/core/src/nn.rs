//! Transformer building blocks: adaptive-norm modulation, multi-head
//! attention, the DiT-style backbone block, and the gated delta-attention
//! blocks used by the shared expert.
//!
//! Every gate is zero-initialized, so each block is an exact identity (or an
//! exactly-zero delta) at initialization — the strongest testable init
//! invariant for the control-branch architecture.

use std::sync::Arc;

use crate::embed::linear;
use crate::error::TensorError;
use crate::tensor::params::{Bound, Init, ParamSpec};
use crate::tensor::tape::{Tape, Var};
use crate::Tensor;

/// Layer-norm epsilon used by every block.
pub const LN_EPS: f64 = 1e-6;

/// Rotary tables, shared via Arc so tape closures can capture them.
pub type RopeTables = (Arc<Tensor>, Arc<Tensor>);

/// `x ⊙ (1 + scale) + shift` with `[1×d]` shift/scale rows.
pub fn modulate(tape: &Tape<f64>, x: Var, shift: Var, scale: Var) -> Result<Var, TensorError> {
    let s1 = tape.add_scalar(scale, 1.0)?;
    let y = tape.mul_row(x, s1)?;
    tape.add_row(y, shift)
}

/// Projects a conditioning vector into `n_chunks` modulation rows of width d:
/// `silu(c)·W + b`, sliced into `[1×d]` chunks.
fn modulation_rows(
    tape: &Tape<f64>,
    bound: &Bound,
    prefix: &str,
    cond: Var,
    n_chunks: usize,
) -> Result<Vec<Var>, TensorError> {
    let d = tape.shape(cond).1;
    let a = tape.silu(cond)?;
    let m = linear(
        tape,
        a,
        bound.var(&format!("{prefix}.mod.w")),
        bound.var(&format!("{prefix}.mod.b")),
    )?;
    (0..n_chunks).map(|i| tape.slice_cols(m, i * d, d)).collect()
}

/// Scaled dot-product attention with optional rotary position encoding.
///
/// `rope_q`: tables applied to all query rows. `rope_k`: tables applied to the
/// FIRST `n` key rows (image tokens); any remaining rows (prompt tokens) stay
/// unrotated, which keeps the output invariant to prompt-token order.
pub fn attention(
    tape: &Tape<f64>,
    q: Var,
    k: Var,
    v: Var,
    n_heads: usize,
    rope_q: Option<&RopeTables>,
    rope_k: Option<(&RopeTables, usize)>,
) -> Result<Var, TensorError> {
    let d = tape.shape(q).1;
    if d % n_heads != 0 {
        return Err(TensorError::invalid(
            "attention",
            format!("width {d} not divisible by {n_heads} heads"),
        ));
    }
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let k_rows = tape.shape(k).0;
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let mut qh = tape.slice_cols(q, h * dh, dh)?;
        let mut kh = tape.slice_cols(k, h * dh, dh)?;
        let vh = tape.slice_cols(v, h * dh, dh)?;
        if let Some((cos, sin)) = rope_q {
            qh = tape.rope(qh, Arc::clone(cos), Arc::clone(sin))?;
        }
        if let Some(((cos, sin), n_img)) = rope_k {
            let img = tape.slice_rows(kh, 0, n_img)?;
            let img = tape.rope(img, Arc::clone(cos), Arc::clone(sin))?;
            kh = if n_img == k_rows {
                img
            } else {
                let rest = tape.slice_rows(kh, n_img, k_rows - n_img)?;
                tape.concat_rows(&[img, rest])?
            };
        }
        let scores = tape.matmul_nt(qh, kh)?;
        let scores = tape.scale(scores, scale)?;
        let probs = tape.softmax_rows(scores)?;
        heads.push(tape.matmul(probs, vh)?);
    }
    if heads.len() == 1 {
        Ok(heads[0])
    } else {
        tape.concat_cols(&heads)
    }
}

/// One DiT-style backbone block: adaptive-norm joint attention over
/// `[x; prompt]` followed by a gated feed-forward. Exact identity at
/// initialization (both gates are zero).
///
/// Rotary encoding is applied to image-token queries and keys inside the
/// attention; prompt keys carry no positional encoding.
#[allow(clippy::too_many_arguments)]
pub fn dit_block(
    tape: &Tape<f64>,
    bound: &Bound,
    prefix: &str,
    x: Var,
    prompt: Var,
    cond: Var,
    n_heads: usize,
    rope_head: &RopeTables,
) -> Result<Var, TensorError> {
    let n_img = tape.shape(x).0;
    let m = modulation_rows(tape, bound, prefix, cond, 6)?;
    let (sh_a, sc_a, g_a, sh_f, sc_f, g_f) = (m[0], m[1], m[2], m[3], m[4], m[5]);

    // Attention over [modulated x; normalized prompt].
    let h = tape.layer_norm_rows(x, LN_EPS)?;
    let hm = modulate(tape, h, sh_a, sc_a)?;
    let pn = tape.layer_norm_rows(prompt, LN_EPS)?;
    let kv_in = tape.concat_rows(&[hm, pn])?;
    let p = |s: &str| bound.var(&format!("{prefix}.attn.{s}"));
    let q = linear(tape, hm, p("wq"), p("bq"))?;
    let k = linear(tape, kv_in, p("wk"), p("bk"))?;
    let v = linear(tape, kv_in, p("wv"), p("bv"))?;
    let a = attention(tape, q, k, v, n_heads, Some(rope_head), Some((rope_head, n_img)))?;
    let a = linear(tape, a, p("wo"), p("bo"))?;
    let x = tape.add(x, tape.mul_row(a, g_a)?)?;

    // Gated feed-forward.
    let h2 = tape.layer_norm_rows(x, LN_EPS)?;
    let h2m = modulate(tape, h2, sh_f, sc_f)?;
    let f = |s: &str| bound.var(&format!("{prefix}.ffn.{s}"));
    let y = linear(tape, h2m, f("w1"), f("b1"))?;
    let y = tape.gelu(y)?;
    let y = linear(tape, y, f("w2"), f("b2"))?;
    tape.add(x, tape.mul_row(y, g_f)?)
}

/// Gated cross-attention delta: `gate ⊙ Attn(mod(LN(xq)), mod(LN(xkv)))`.
/// Returns the delta only (no residual), which is exactly zero at init.
pub fn delta_cross(
    tape: &Tape<f64>,
    bound: &Bound,
    prefix: &str,
    xq: Var,
    xkv: Var,
    cond: Var,
    n_heads: usize,
) -> Result<Var, TensorError> {
    let m = modulation_rows(tape, bound, prefix, cond, 5)?;
    let (sh_q, sc_q, sh_kv, sc_kv, gate) = (m[0], m[1], m[2], m[3], m[4]);
    let hq = modulate(tape, tape.layer_norm_rows(xq, LN_EPS)?, sh_q, sc_q)?;
    let hkv = modulate(tape, tape.layer_norm_rows(xkv, LN_EPS)?, sh_kv, sc_kv)?;
    let p = |s: &str| bound.var(&format!("{prefix}.{s}"));
    let q = linear(tape, hq, p("wq"), p("bq"))?;
    let k = linear(tape, hkv, p("wk"), p("bk"))?;
    let v = linear(tape, hkv, p("wv"), p("bv"))?;
    let a = attention(tape, q, k, v, n_heads, None, None)?;
    let a = linear(tape, a, p("wo"), p("bo"))?;
    tape.mul_row(a, gate)
}

/// Gated self-attention delta over one stream; exactly zero at init.
pub fn delta_self(
    tape: &Tape<f64>,
    bound: &Bound,
    prefix: &str,
    x: Var,
    cond: Var,
    n_heads: usize,
) -> Result<Var, TensorError> {
    let m = modulation_rows(tape, bound, prefix, cond, 3)?;
    let (sh, sc, gate) = (m[0], m[1], m[2]);
    let h = modulate(tape, tape.layer_norm_rows(x, LN_EPS)?, sh, sc)?;
    let p = |s: &str| bound.var(&format!("{prefix}.{s}"));
    let q = linear(tape, h, p("wq"), p("bq"))?;
    let k = linear(tape, h, p("wk"), p("bk"))?;
    let v = linear(tape, h, p("wv"), p("bv"))?;
    let a = attention(tape, q, k, v, n_heads, None, None)?;
    let a = linear(tape, a, p("wo"), p("bo"))?;
    tape.mul_row(a, gate)
}

// ==== parameter layout helpers ====

/// Standard deviation for non-zero weight initialization outside the expert
/// module (which uses its own, wider scale).
pub const WEIGHT_STD: f64 = 0.02;

fn attn_specs(n: &dyn Fn(&str) -> String, d: usize, specs: &mut Vec<ParamSpec>) {
    let w = Init::Normal { std: WEIGHT_STD };
    for (name, rows, cols, init) in [
        ("wq", d, d, w),
        ("bq", 1, d, Init::Zero),
        ("wk", d, d, w),
        ("bk", 1, d, Init::Zero),
        ("wv", d, d, w),
        ("bv", 1, d, Init::Zero),
        ("wo", d, d, w),
        ("bo", 1, d, Init::Zero),
    ] {
        specs.push(ParamSpec::new(n(name), rows, cols, init));
    }
}

/// Parameter specs for one backbone block under `prefix`.
pub fn dit_block_specs(prefix: &str, d: usize, ffn_mult: usize) -> Vec<ParamSpec> {
    let n = |s: &str| format!("{prefix}.attn.{s}");
    let w = Init::Normal { std: WEIGHT_STD };
    let mut specs = Vec::new();
    attn_specs(&n, d, &mut specs);
    specs.push(ParamSpec::new(format!("{prefix}.ffn.w1"), d, d * ffn_mult, w));
    specs.push(ParamSpec::new(format!("{prefix}.ffn.b1"), 1, d * ffn_mult, Init::Zero));
    specs.push(ParamSpec::new(format!("{prefix}.ffn.w2"), d * ffn_mult, d, w));
    specs.push(ParamSpec::new(format!("{prefix}.ffn.b2"), 1, d, Init::Zero));
    specs.push(ParamSpec::new(format!("{prefix}.mod.w"), d, 6 * d, w));
    specs.push(ParamSpec::new(format!("{prefix}.mod.b"), 1, 6 * d, Init::Zero));
    specs
}

/// Parameter specs for one [`delta_cross`] block (5 modulation chunks).
pub fn cross_block_specs(prefix: &str, d: usize) -> Vec<ParamSpec> {
    let n = |s: &str| format!("{prefix}.{s}");
    let w = Init::Normal { std: WEIGHT_STD };
    let mut specs = Vec::new();
    attn_specs(&n, d, &mut specs);
    specs.push(ParamSpec::new(n("mod.w"), d, 5 * d, w));
    specs.push(ParamSpec::new(n("mod.b"), 1, 5 * d, Init::Zero));
    specs
}

/// Parameter specs for one [`delta_self`] block (3 modulation chunks).
pub fn self_block_specs(prefix: &str, d: usize) -> Vec<ParamSpec> {
    let n = |s: &str| format!("{prefix}.{s}");
    let w = Init::Normal { std: WEIGHT_STD };
    let mut specs = Vec::new();
    attn_specs(&n, d, &mut specs);
    specs.push(ParamSpec::new(n("mod.w"), d, 3 * d, w));
    specs.push(ParamSpec::new(n("mod.b"), 1, 3 * d, Init::Zero));
    specs
}

/// Zeroes the listed width-`d` chunks of a modulation matrix so the gates
/// they feed start at exactly zero. Chunk indices count `[1×d]` output slices.
pub fn zero_gate_cols(params: &mut crate::Params, name: &str, d: usize, gates: &[usize]) {
    let t = params.get_mut(name);
    for &g in gates {
        for i in 0..t.rows() {
            for j in g * d..(g + 1) * d {
                t.set(i, j, 0.0);
            }
        }
    }
}

/// Gate chunk indices per block kind, matching the spec builders above.
pub const DIT_GATE_CHUNKS: &[usize] = &[2, 5];
pub const CROSS_GATE_CHUNK: &[usize] = &[4];
pub const SELF_GATE_CHUNK: &[usize] = &[2];
