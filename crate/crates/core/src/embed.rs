//! Token embeddings: patch extraction with a fixed projection (the VAE
//! stand-in), 2-D rotary position tables, the timestep embedder, and the
//! prompt/condition-type lookups.

use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::TensorError;
use crate::img::Image;
use crate::rng;
use crate::tensor::params::Bound;
use crate::tensor::tape::{Tape, Var};
use crate::Tensor;

/// Seed of the fixed (non-trainable) patch projection. Shared by every model
/// so all checkpoints live in the same latent space.
const PATCH_PROJ_SEED: u64 = 0x7061_7463_68;

// ==== patch extraction (the VAE surrogate) ====

/// Flattens p×p patches in raster order: `[H×W×3] -> [N × p²·3]`,
/// N = (H/p)·(W/p). Pure rearrangement — linear, bias-free, exactly
/// invertible by [`unpatchify`].
pub fn patch_extract(img: &Image, p: usize) -> Result<Tensor, TensorError> {
    if img.h % p != 0 || img.w % p != 0 {
        return Err(TensorError::invalid(
            "patch_extract",
            format!("{}x{} image not divisible by patch {p}", img.h, img.w),
        ));
    }
    let (gh, gw) = (img.h / p, img.w / p);
    let width = p * p * Image::CHANNELS;
    let mut out = Tensor::zeros(gh * gw, width);
    for gy in 0..gh {
        for gx in 0..gw {
            let row = out.row_mut(gy * gw + gx);
            let mut at = 0;
            for dy in 0..p {
                for dx in 0..p {
                    for c in 0..Image::CHANNELS {
                        row[at] = img.get(gy * p + dy, gx * p + dx, c);
                        at += 1;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`patch_extract`]: `[N × p²·3] -> [H×W×3]`.
pub fn unpatchify(tokens: &Tensor, p: usize, h: usize, w: usize) -> Image {
    assert_eq!(tokens.rows(), (h / p) * (w / p), "unpatchify: token count");
    assert_eq!(tokens.cols(), p * p * Image::CHANNELS, "unpatchify: width");
    let gw = w / p;
    let mut img = Image::zeros(h, w);
    for (t, row) in (0..tokens.rows()).map(|t| (t, tokens.row(t))) {
        let (gy, gx) = (t / gw, t % gw);
        let mut at = 0;
        for dy in 0..p {
            for dx in 0..p {
                for c in 0..Image::CHANNELS {
                    img.set(gy * p + dy, gx * p + dx, c, row[at]);
                    at += 1;
                }
            }
        }
    }
    img
}

/// The fixed seeded projection `[p²·3 × d]` applied after patch extraction.
pub fn patch_projection(p: usize, d: usize) -> Tensor {
    let width = p * p * Image::CHANNELS;
    let std = 1.0 / (width as f64).sqrt();
    let mut stream = rng::stream("patch-projection", PATCH_PROJ_SEED, &[p as u64, d as u64]);
    Tensor::from_fn(width, d, |_, _| {
        let z: f64 = stream.sample(StandardNormal);
        z * std
    })
}

/// Patch-extracts and projects an image into latent tokens `[N × d]`.
pub fn latent_tokens(img: &Image, p: usize, proj: &Tensor) -> Result<Tensor, TensorError> {
    patch_extract(img, p)?.matmul(proj)
}

// ==== 2-D rotary position tables ====

/// Cos/sin tables `[N × dims/2]` for a `side × side` raster token grid.
///
/// Feature pairs are split half/half between the two axes: pair j of an axis
/// rotates by `θ_j · position` with `θ_j = 10000^(−2j / (dims/2))`. Tokens at
/// grid (0,0) get zero angles everywhere (identity rotation).
pub fn rope_tables(side: usize, dims: usize) -> Result<(Arc<Tensor>, Arc<Tensor>), TensorError> {
    if dims % 4 != 0 {
        return Err(TensorError::invalid(
            "rope_tables",
            format!("rotated width {dims} must be divisible by 4"),
        ));
    }
    let pairs = dims / 2;
    let per_axis = pairs / 2;
    let n = side * side;
    let mut cos = Tensor::zeros(n, pairs);
    let mut sin = Tensor::zeros(n, pairs);
    for t in 0..n {
        let (row, col) = ((t / side) as f64, (t % side) as f64);
        for pidx in 0..pairs {
            let (j, pos) = if pidx < per_axis {
                (pidx, row)
            } else {
                (pidx - per_axis, col)
            };
            let theta = 10000f64.powf(-2.0 * j as f64 / (dims as f64 / 2.0));
            let ang = theta * pos;
            cos.set(t, pidx, ang.cos());
            sin.set(t, pidx, ang.sin());
        }
    }
    Ok((Arc::new(cos), Arc::new(sin)))
}

// ==== timestep embedding ====

/// Sinusoidal features of `t·1000`: `[1 × d]`, first half cosines, second
/// half sines, with geometrically spaced frequencies.
pub fn timestep_sinusoid(t: f64, d: usize) -> Tensor {
    let half = d / 2;
    let mut v = vec![0.0; d];
    for i in 0..half {
        let freq = 10000f64.powf(-(i as f64) / half as f64);
        let ang = t * 1000.0 * freq;
        v[i] = ang.cos();
        v[half + i] = ang.sin();
    }
    Tensor::row_vec(v)
}

/// `x·W + b` on the tape.
pub fn linear(tape: &Tape<f64>, x: Var, w: Var, b: Var) -> Result<Var, TensorError> {
    let y = tape.matmul(x, w)?;
    tape.add_row(y, b)
}

/// Fuses the timestep with a pooled embedding:
/// `MLP(sinusoid(t·1000)) + pooled·Wp + bp`, output `[1 × d]`.
///
/// Parameter prefix `time.` — one embedder is shared by every consumer.
pub fn timestep_embedding(
    tape: &Tape<f64>,
    bound: &Bound,
    t: f64,
    pooled: Var,
) -> Result<Var, TensorError> {
    if !(0.0..=1.0).contains(&t) {
        return Err(TensorError::invalid(
            "timestep_embedding",
            format!("t = {t} outside [0, 1]"),
        ));
    }
    let d = tape.shape(pooled).1;
    let sin = tape.leaf(timestep_sinusoid(t, d))?;
    let h = linear(tape, sin, bound.var("time.w1"), bound.var("time.b1"))?;
    let h = tape.silu(h)?;
    let h = linear(tape, h, bound.var("time.w2"), bound.var("time.b2"))?;
    let pp = linear(tape, pooled, bound.var("time.wp"), bound.var("time.bp"))?;
    tape.add(h, pp)
}

// ==== prompt and condition-type embeddings ====

/// Looks up prompt ids in the vocabulary table and returns
/// `(F_p = rows·W + b, E_p = mean of the raw rows)`.
pub fn embed_prompt(
    tape: &Tape<f64>,
    bound: &Bound,
    ids: &[u32],
    vocab_size: usize,
) -> Result<(Var, Var), TensorError> {
    if ids.is_empty() {
        return Err(TensorError::invalid("embed_prompt", "empty prompt"));
    }
    if let Some(&bad) = ids.iter().find(|&&id| id as usize >= vocab_size) {
        return Err(TensorError::invalid(
            "embed_prompt",
            format!("token id {bad} outside vocabulary of {vocab_size}"),
        ));
    }
    let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
    let raw = tape.gather_rows(bound.var("vocab.table"), &idx)?;
    let e_p = tape.mean_rows(raw)?;
    let f_p = linear(tape, raw, bound.var("prompt.w"), bound.var("prompt.b"))?;
    Ok((f_p, e_p))
}

/// Pooled condition-type embedding `E_c` (type names are one token, so the
/// pooled value is that type's table row).
pub fn embed_condition(
    tape: &Tape<f64>,
    bound: &Bound,
    type_id: usize,
    n_cond_types: usize,
) -> Result<Var, TensorError> {
    if type_id >= n_cond_types {
        return Err(TensorError::invalid(
            "embed_condition",
            format!("type id {type_id} outside [0, {n_cond_types})"),
        ));
    }
    tape.slice_rows(bound.var("cond.table"), type_id, 1)
}
