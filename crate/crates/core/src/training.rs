//! Flow matching: noise mixing, the per-sample velocity loss, condition-
//! balanced batching, AdamW with linear warmup, the training loop, and the
//! guided Euler sampler.
//!
//! Training works in patch-pixel token space. A clean image becomes tokens
//! `x` via `patch_extract`; a draw `N` of standard normal noise is mixed in
//! as `σ·N + (1−σ)·x`; the model predicts the path velocity `v* = N − x`.
//! Sampling starts from pure noise and integrates the predicted velocity
//! from σ=1 down to σ=0 with uniform Euler steps.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::config::{Config, SigmaDist};
use crate::datagen::TOKEN_NULL;
use crate::dataset::Dataset;
use crate::embed::{patch_extract, unpatchify};
use crate::error::TensorError;
use crate::img::Image;
use crate::model::Model;
use crate::rng::{stream, Stream};
use crate::tensor::tape::Var;
use crate::{GradientRecord, Params, Tape, Tensor};

type Result<T> = std::result::Result<T, TensorError>;

// ==== noise mixing ====

/// A standard-normal token tensor drawn from the given stream.
pub fn noise_tokens(rows: usize, cols: usize, rng: &mut Stream) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// Elementwise `σ·N + (1−σ)·x`. At σ=1 this is exactly `N` (pure noise, the
/// inference starting point); at σ=0 exactly `x`.
pub fn mix_noise(x: &Tensor, noise: &Tensor, sigma: f64) -> Result<Tensor> {
    const OP: &str = "mix_noise";
    if !(0.0..=1.0).contains(&sigma) {
        return Err(TensorError::invalid(
            OP,
            format!("sigma {sigma} outside [0, 1]"),
        ));
    }
    if x.shape() != noise.shape() {
        return Err(TensorError::ShapeMismatch {
            op: OP,
            lhs: x.shape(),
            rhs: noise.shape(),
        });
    }
    let xd = x.data();
    let nd = noise.data();
    let data = (0..xd.len())
        .map(|i| sigma * nd[i] + (1.0 - sigma) * xd[i])
        .collect();
    Ok(Tensor::from_vec(x.rows(), x.cols(), data))
}

/// Draws a noise strength from the configured distribution.
pub fn draw_sigma(dist: SigmaDist, rng: &mut Stream) -> f64 {
    match dist {
        SigmaDist::Uniform => rng.gen::<f64>(),
        SigmaDist::LogitNormal => {
            let z: f64 = rng.sample(StandardNormal);
            1.0 / (1.0 + (-z).exp())
        }
    }
}

// ==== flow-matching loss ====

/// A dataset record encoded to patch tokens once, up front.
#[derive(Clone, Debug)]
pub struct EncodedSample {
    pub type_id: usize,
    pub prompt: Vec<u32>,
    /// Clean target as `[N × p²·3]` patch tokens.
    pub x: Tensor,
    /// Condition image as `[N × p²·3]` patch tokens.
    pub cond: Tensor,
}

/// Patch-encodes every sample of a dataset.
pub fn encode_dataset(ds: &Dataset, patch: usize) -> Result<Vec<EncodedSample>> {
    ds.samples
        .iter()
        .map(|s| {
            Ok(EncodedSample {
                type_id: s.type_id,
                prompt: s.prompt.clone(),
                x: patch_extract(&s.target, patch)?,
                cond: patch_extract(&s.condition, patch)?,
            })
        })
        .collect()
}

/// Mean squared error between a prediction on the tape and a fixed target.
pub fn mse_to_target(tape: &Tape, pred: Var, target: &Tensor) -> Result<Var> {
    let diff = tape.sub(pred, tape.leaf(target.clone())?)?;
    tape.mean_all(tape.mul(diff, diff)?)
}

/// What one loss evaluation produced.
pub struct LossStats {
    pub loss: f64,
    pub grads: GradientRecord,
    /// Tokens routed to each expert, when the routed module ran.
    pub expert_load: Vec<usize>,
}

/// One sample's flow-matching loss, and its parameter gradients when
/// `want_grads` is set.
///
/// The stream is consumed in a fixed order — prompt-dropout coin first, then
/// the noise tokens — so a given stream state fully determines the draw.
/// With probability `prompt_dropout` the prompt is replaced by the null
/// token, which is what guided sampling later contrasts against.
pub fn fm_loss(
    model: &Model,
    sample: &EncodedSample,
    sigma: f64,
    rng: &mut Stream,
    prompt_dropout: f64,
    want_grads: bool,
) -> Result<LossStats> {
    let coin: f64 = rng.gen();
    let null_prompt = [TOKEN_NULL];
    let prompt: &[u32] = if coin < prompt_dropout {
        &null_prompt
    } else {
        &sample.prompt
    };
    let noise = noise_tokens(sample.x.rows(), sample.x.cols(), rng);
    let mixed = mix_noise(&sample.x, &noise, sigma)?;
    let v_star = noise.sub(&sample.x)?;

    let tape = if want_grads {
        Tape::new()
    } else {
        Tape::inference()
    };
    let bound = model.bind(&tape)?;
    let mixed = tape.leaf(mixed)?;
    let cond = tape.leaf(sample.cond.clone())?;
    let out = model.velocity(&tape, &bound, mixed, cond, prompt, sample.type_id, sigma)?;
    let loss_var = mse_to_target(&tape, out.tokens, &v_star)?;
    let loss = tape.value(loss_var).item();
    let grads = if want_grads {
        tape.backward(loss_var)?
    } else {
        GradientRecord::new()
    };
    Ok(LossStats {
        loss,
        grads,
        expert_load: out.expert_load.unwrap_or_default(),
    })
}

// ==== condition-balanced batching ====

fn shuffle<T>(v: &mut [T], rng: &mut Stream) {
    for i in (1..v.len()).rev() {
        let j = rng.gen_range(0..=i);
        v.swap(i, j);
    }
}

/// One epoch of batches over items whose condition type is `type_of[i]`.
///
/// Every batch holds pairwise-distinct condition types, every item appears
/// exactly once per epoch, and the whole schedule is a pure function of
/// `(seed, epoch)`. Batches are filled greedily from the types with the most
/// items remaining, so equal per-type counts always yield full batches; with
/// skewed counts the tail degrades to smaller (still distinct-typed) batches
/// rather than violating the distinctness rule. A batch size of one is a
/// plain shuffled stream.
pub fn balanced_batches(
    type_of: &[usize],
    n_types: usize,
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> Result<Vec<Vec<usize>>> {
    const OP: &str = "balanced_batches";
    if batch_size == 0 {
        return Err(TensorError::invalid(OP, "batch_size must be ≥ 1"));
    }
    if let Some(&t) = type_of.iter().find(|&&t| t >= n_types) {
        return Err(TensorError::invalid(
            OP,
            format!("type id {t} not below n_types {n_types}"),
        ));
    }
    let mut rng = stream("balanced-batches", seed, &[epoch]);

    if batch_size == 1 {
        let mut order: Vec<usize> = (0..type_of.len()).collect();
        shuffle(&mut order, &mut rng);
        return Ok(order.into_iter().map(|i| vec![i]).collect());
    }

    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); n_types];
    for (i, &t) in type_of.iter().enumerate() {
        groups[t].push(i);
    }
    let present = groups.iter().filter(|g| !g.is_empty()).count();
    if batch_size > present {
        return Err(TensorError::invalid(
            OP,
            format!(
                "batch_size {batch_size} exceeds the {present} condition types present; \
                 a balanced batch holds at most one sample of each type"
            ),
        ));
    }
    for g in &mut groups {
        shuffle(g, &mut rng);
    }
    // Random priorities break count ties so no type is systematically first.
    let mut priority: Vec<usize> = (0..n_types).collect();
    shuffle(&mut priority, &mut rng);

    let mut batches = Vec::new();
    loop {
        let mut avail: Vec<usize> = (0..n_types).filter(|&t| !groups[t].is_empty()).collect();
        if avail.is_empty() {
            break;
        }
        avail.sort_by_key(|&t| (std::cmp::Reverse(groups[t].len()), priority[t]));
        avail.truncate(batch_size);
        let mut batch: Vec<usize> = avail.iter().map(|&t| groups[t].pop().unwrap()).collect();
        shuffle(&mut batch, &mut rng);
        batches.push(batch);
    }
    Ok(batches)
}

// ==== AdamW with linear warmup ====

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Linear warmup to the base rate, constant afterwards.
pub fn lr_at(step: usize, base: f64, warmup_steps: usize) -> f64 {
    if warmup_steps == 0 {
        base
    } else {
        base * (step as f64 / warmup_steps as f64).min(1.0)
    }
}

/// First and second moment estimates, keyed like the parameter set.
#[derive(Default)]
pub struct AdamW {
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl AdamW {
    pub fn new() -> Self {
        Self::default()
    }

    /// One decoupled-weight-decay update. `step` starts at 1; gradients
    /// absent from the record count as zero (parameters off the loss path
    /// neither move nor accumulate momentum when decay is zero).
    pub fn step(
        &mut self,
        params: &mut Params,
        grads: &GradientRecord,
        step: usize,
        base_lr: f64,
        warmup_steps: usize,
        weight_decay: f64,
    ) -> Result<()> {
        const OP: &str = "optimize_step";
        if step == 0 {
            return Err(TensorError::invalid(OP, "step counting starts at 1"));
        }
        let lr = lr_at(step, base_lr, warmup_steps);
        let bc1 = 1.0 - ADAM_BETA1.powi(step as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(step as i32);
        let names: Vec<String> = params.names().map(str::to_string).collect();
        for name in names {
            let grad = grads.get(&name);
            if grad.is_none() && weight_decay == 0.0 {
                continue;
            }
            let (rows, cols) = params.expect(&name).shape();
            if let Some(g) = grad {
                if g.shape() != (rows, cols) {
                    return Err(TensorError::ShapeMismatch {
                        op: OP,
                        lhs: g.shape(),
                        rhs: (rows, cols),
                    });
                }
            }
            let zero = Tensor::zeros(rows, cols);
            let gd: &[f64] = grad.map_or(zero.data(), |g| g.data());
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(rows, cols))
                .data_mut();
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(rows, cols))
                .data_mut();
            let p = params.get_mut(&name).data_mut();
            for i in 0..p.len() {
                m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * gd[i];
                v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * gd[i] * gd[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= lr * (m_hat / (v_hat.sqrt() + ADAM_EPS) + weight_decay * p[i]);
            }
        }
        Ok(())
    }
}

// ==== training loop ====

/// Everything a finished run hands back: the trained model, both CSV logs
/// (full precision, one row per step / per validation pass), the validation
/// curve, and the cumulative per-expert token counts.
pub struct TrainOutcome {
    pub model: Model,
    pub loss_csv: String,
    pub val_csv: String,
    pub val_losses: Vec<(usize, f64)>,
    pub expert_load: Vec<usize>,
}

/// One fixed validation item: a held-out sample with a frozen noise draw and
/// noise strength, so the validation loss is a deterministic function of the
/// parameters alone.
struct ValItem {
    enc: EncodedSample,
    sigma: f64,
    noise: Tensor,
}

fn validation_loss(model: &Model, items: &[ValItem]) -> Result<f64> {
    let losses: Vec<f64> = items
        .par_iter()
        .map(|it| -> Result<f64> {
            let mixed = mix_noise(&it.enc.x, &it.noise, it.sigma)?;
            let v_star = it.noise.sub(&it.enc.x)?;
            let tape = Tape::inference();
            let bound = model.bind(&tape)?;
            let mixed = tape.leaf(mixed)?;
            let cond = tape.leaf(it.enc.cond.clone())?;
            let out = model.velocity(
                &tape,
                &bound,
                mixed,
                cond,
                &it.enc.prompt,
                it.enc.type_id,
                it.sigma,
            )?;
            let loss = mse_to_target(&tape, out.tokens, &v_star)?;
            Ok(tape.value(loss).item())
        })
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
}

/// Trains a fresh model on the dataset per the config. Deterministic: the
/// same config and dataset give bitwise-identical logs and parameters,
/// independent of thread count (per-sample streams are keyed by step and
/// batch slot; gradient reduction runs in slot order).
///
/// The last `val_per_type` samples of each type are held out for validation
/// and never trained on. Validation items get stratified, frozen noise
/// strengths, so the curve measures the model, not the draw.
pub fn train(cfg: &Config, ds: &Dataset, mut progress: impl FnMut(&str)) -> Result<TrainOutcome> {
    const OP: &str = "train";
    cfg.validate()?;
    if ds.h != cfg.image_size || ds.w != cfg.image_size {
        return Err(TensorError::invalid(
            OP,
            format!(
                "dataset images are {}x{}, config image_size is {}",
                ds.h, ds.w, cfg.image_size
            ),
        ));
    }
    if ds.n_types > cfg.n_cond_types {
        return Err(TensorError::invalid(
            OP,
            format!(
                "dataset declares {} condition types, config allows {}",
                ds.n_types, cfg.n_cond_types
            ),
        ));
    }
    if let Some(&t) = ds
        .samples
        .iter()
        .flat_map(|s| s.prompt.iter())
        .find(|&&t| t as usize >= cfg.vocab_size)
    {
        return Err(TensorError::invalid(
            OP,
            format!("prompt token {t} not below vocab_size {}", cfg.vocab_size),
        ));
    }

    let encoded = encode_dataset(ds, cfg.patch_size)?;

    // Hold out the last val_per_type samples of each type.
    let mut val_ids: Vec<usize> = Vec::new();
    for t in 0..ds.n_types {
        let of_type = ds.indices_of_type(t);
        if of_type.is_empty() {
            continue;
        }
        if of_type.len() <= cfg.val_per_type {
            return Err(TensorError::invalid(
                OP,
                format!(
                    "type {t} has {} samples; validation holds out val_per_type = {} and \
                     needs at least one training sample left",
                    of_type.len(),
                    cfg.val_per_type
                ),
            ));
        }
        val_ids.extend_from_slice(&of_type[of_type.len() - cfg.val_per_type..]);
    }
    let val_set: std::collections::BTreeSet<usize> = val_ids.iter().copied().collect();
    let train_ids: Vec<usize> = (0..encoded.len()).filter(|i| !val_set.contains(i)).collect();
    let train_types: Vec<usize> = train_ids.iter().map(|&i| encoded[i].type_id).collect();

    // Freeze the validation plan: the k-th held-out item of a type gets the
    // k-th stratified noise strength and its own noise stream.
    let val_items: Vec<ValItem> = val_ids
        .iter()
        .enumerate()
        .map(|(j, &i)| {
            let k = j % cfg.val_per_type.max(1);
            let enc = encoded[i].clone();
            let sigma = (k as f64 + 0.5) / cfg.val_per_type.max(1) as f64;
            let mut rng = stream("val-noise", cfg.seed, &[j as u64]);
            let noise = noise_tokens(enc.x.rows(), enc.x.cols(), &mut rng);
            ValItem { enc, sigma, noise }
        })
        .collect();

    let mut model = Model::new(cfg.clone())?;
    let mut adam = AdamW::new();
    let mut loss_csv = String::from("step,loss,lr\n");
    let mut val_csv = String::from("step,val_loss\n");
    let mut val_losses = Vec::new();
    let mut expert_load = vec![0usize; cfg.n_experts];

    let mut step = 0usize;
    let mut epoch = 0u64;
    'outer: loop {
        let batches = balanced_batches(
            &train_types,
            cfg.n_cond_types,
            cfg.batch_size,
            cfg.seed,
            epoch,
        )?;
        for batch in batches {
            step += 1;
            let stats: Vec<LossStats> = batch
                .par_iter()
                .enumerate()
                .map(|(slot, &view_ix)| {
                    let mut rng = stream("train-sample", cfg.seed, &[step as u64, slot as u64]);
                    let sigma = draw_sigma(cfg.sigma_dist, &mut rng);
                    fm_loss(
                        &model,
                        &encoded[train_ids[view_ix]],
                        sigma,
                        &mut rng,
                        cfg.prompt_dropout,
                        true,
                    )
                })
                .collect::<Result<_>>()
                .map_err(|e| TensorError::invalid(OP, format!("step {step}: {e}")))?;

            let batch_loss = stats.iter().map(|s| s.loss).sum::<f64>() / stats.len() as f64;
            if !batch_loss.is_finite() {
                return Err(TensorError::invalid(
                    OP,
                    format!("step {step}: non-finite loss {batch_loss}"),
                ));
            }
            let mut grads = GradientRecord::new();
            for s in &stats {
                grads.accumulate(&s.grads);
                for (e, &n) in s.expert_load.iter().enumerate() {
                    expert_load[e] += n;
                }
            }
            grads.scale(1.0 / stats.len() as f64);
            adam.step(
                &mut model.params,
                &grads,
                step,
                cfg.lr,
                cfg.warmup_steps,
                cfg.weight_decay,
            )?;

            let lr = lr_at(step, cfg.lr, cfg.warmup_steps);
            loss_csv.push_str(&format!("{step},{batch_loss},{lr}\n"));
            if step % cfg.log_interval == 0 || step == cfg.total_steps {
                progress(&format!(
                    "step {step}/{} loss {batch_loss:.6} lr {lr:.2e}",
                    cfg.total_steps
                ));
            }

            if step % cfg.val_interval == 0 || step == cfg.total_steps {
                let vl = validation_loss(&model, &val_items)?;
                if val_losses.last().map(|&(s, _)| s) != Some(step) {
                    val_csv.push_str(&format!("{step},{vl}\n"));
                    val_losses.push((step, vl));
                    progress(&format!("step {step}: validation loss {vl:.6}"));
                }
            }
            if step >= cfg.total_steps {
                break 'outer;
            }
        }
        epoch += 1;
    }

    Ok(TrainOutcome {
        model,
        loss_csv,
        val_csv,
        val_losses,
        expert_load,
    })
}

/// Formats the cumulative expert-load histogram for the end-of-run report.
pub fn expert_load_report(load: &[usize]) -> String {
    let total: usize = load.iter().sum();
    let mut s = String::from("expert load:");
    for (e, &n) in load.iter().enumerate() {
        let pct = if total > 0 { 100.0 * n as f64 / total as f64 } else { 0.0 };
        s.push_str(&format!(" e{e}={n} ({pct:.1}%)"));
    }
    s
}

// ==== guided Euler sampling ====

/// Classifier-free guidance blend `v_null + g·(v_cond − v_null)`. At g=1
/// this is exactly the conditional prediction.
pub fn guided_velocity(v_null: &Tensor, v_cond: &Tensor, guidance: f64) -> Result<Tensor> {
    if guidance == 1.0 {
        return Ok(v_cond.clone());
    }
    v_null.add(&v_cond.sub(v_null)?.scale(guidance))
}

/// Integrates `dx/dσ = v(x, σ)` from σ=1 down to σ=0 in uniform steps,
/// starting from `start`. A constant field is integrated exactly for any
/// step count.
pub fn euler_integrate(
    start: Tensor,
    steps: usize,
    mut velocity: impl FnMut(&Tensor, f64) -> Result<Tensor>,
) -> Result<Tensor> {
    if steps == 0 {
        return Err(TensorError::invalid("euler_integrate", "steps must be ≥ 1"));
    }
    let dt = 1.0 / steps as f64;
    let mut x = start;
    for k in 0..steps {
        let sigma = 1.0 - k as f64 * dt;
        let v = velocity(&x, sigma)?;
        x = x.sub(&v.scale(dt))?;
    }
    Ok(x)
}

/// Generates one image: start from pure noise, integrate the guided velocity
/// over `steps` uniform Euler steps, unpatchify, and clamp to [0, 1].
/// Deterministic under the seed. Guidance contrasts the given prompt against
/// the null prompt; the condition image and its type id enter both branches.
pub fn sample_image(
    model: &Model,
    condition: &Image,
    type_id: usize,
    prompt: &[u32],
    steps: usize,
    guidance: f64,
    seed: u64,
) -> Result<Image> {
    const OP: &str = "sample_image";
    if guidance < 0.0 || !guidance.is_finite() {
        return Err(TensorError::invalid(OP, "guidance must be ≥ 0 and finite"));
    }
    for (name, t) in model.params.iter() {
        if !t.all_finite() {
            return Err(TensorError::invalid(
                OP,
                format!("parameter {name} holds non-finite values; refusing to sample"),
            ));
        }
    }
    let cfg = &model.cfg;
    if condition.h != cfg.image_size || condition.w != cfg.image_size {
        return Err(TensorError::invalid(
            OP,
            format!(
                "condition image is {}x{}, model expects {}x{}",
                condition.h, condition.w, cfg.image_size, cfg.image_size
            ),
        ));
    }
    let cond_tokens = patch_extract(condition, cfg.patch_size)?;
    let mut rng = stream("sample-noise", seed, &[]);
    let start = noise_tokens(cfg.n_tokens(), cfg.token_width(), &mut rng);

    let forward = |state: &Tensor, sigma: f64, prompt: &[u32]| -> Result<Tensor> {
        let tape = Tape::inference();
        let bound = model.bind(&tape)?;
        let mixed = tape.leaf(state.clone())?;
        let cond = tape.leaf(cond_tokens.clone())?;
        let out = model.velocity(&tape, &bound, mixed, cond, prompt, type_id, sigma)?;
        Ok((*tape.value(out.tokens)).clone())
    };
    let tokens = euler_integrate(start, steps, |state, sigma| {
        let v_cond = forward(state, sigma, prompt)?;
        if guidance == 1.0 {
            return Ok(v_cond);
        }
        let v_null = forward(state, sigma, &[TOKEN_NULL])?;
        guided_velocity(&v_null, &v_cond, guidance)
    })?;
    Ok(unpatchify(&tokens, cfg.patch_size, cfg.image_size, cfg.image_size).clamp01())
}

// ==== tests ====
