//! The two control architectures over a shared backbone: the interleaved
//! weave stack (expert module at layer 0, weave blocks re-reading the live
//! backbone stream) and a parallel control-branch baseline (one branch per
//! condition type, reading the layer-0 input once).
//!
//! Both inject control through zero-initialized residual projections, so at
//! initialization each is exactly the backbone alone.

use crate::comoe::{comoe_forward, comoe_param_count, comoe_specs, comoe_zero_gates};
use crate::embed::{linear, timestep_embedding};
use crate::error::TensorError;
use crate::nn::{dit_block, dit_block_specs, zero_gate_cols, RopeTables, DIT_GATE_CHUNKS};
use crate::tensor::params::{Bound, Init, ParamSpec};
use crate::tensor::tape::{Tape, Var};
use crate::{Params, Tensor};

/// Which control architecture a model runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arch {
    /// Interleaved control: expert module + weave blocks (the main design).
    Weave,
    /// Parallel control branches, one per condition type (the baseline).
    ControlNet,
}

impl Arch {
    pub fn name(self) -> &'static str {
        match self {
            Arch::Weave => "weavenet",
            Arch::ControlNet => "controlnet",
        }
    }

    pub fn parse(s: &str) -> Result<Self, TensorError> {
        match s {
            "weavenet" => Ok(Arch::Weave),
            "controlnet" => Ok(Arch::ControlNet),
            other => Err(TensorError::invalid(
                "arch",
                format!("unknown architecture {other:?} (weavenet | controlnet)"),
            )),
        }
    }
}

/// Structural hyperparameters shared by the forward passes.
#[derive(Debug, Clone, Copy)]
pub struct StackDims {
    pub base_layers: usize,
    pub ctrl_layers: usize,
    pub n_experts: usize,
    pub n_heads: usize,
    pub cond_scale: f64,
}

impl StackDims {
    fn check(&self) -> Result<(), TensorError> {
        if self.ctrl_layers < 1 || self.ctrl_layers > self.base_layers {
            return Err(TensorError::invalid(
                "stack",
                format!(
                    "control depth {} must be in [1, {}]",
                    self.ctrl_layers, self.base_layers
                ),
            ));
        }
        Ok(())
    }
}

/// Inputs every stack forward consumes: embedded token streams plus pooled
/// contexts. `f_n` are noisy image tokens, `f_c` condition tokens, `f_p`
/// prompt tokens; `e_c`/`e_p` the pooled condition/prompt embeddings.
#[derive(Clone, Copy)]
pub struct StreamInputs {
    pub f_n: Var,
    pub f_c: Var,
    pub f_p: Var,
    pub e_c: Var,
    pub e_p: Var,
    pub t: f64,
}

/// Velocity tokens plus routing load when the expert module ran.
pub struct StackOutput {
    pub tokens: Var,
    pub expert_load: Option<Vec<usize>>,
}

// ==== forward passes ====

fn project_head(tape: &Tape<f64>, bound: &Bound, x: Var) -> Result<Var, TensorError> {
    linear(tape, x, bound.var("head.w"), bound.var("head.b"))
}

fn inject(
    tape: &Tape<f64>,
    x: Var,
    proj: Var,
    cond_scale: f64,
) -> Result<Var, TensorError> {
    let scaled = if cond_scale == 1.0 {
        proj
    } else {
        tape.scale(proj, cond_scale)?
    };
    tape.add(x, scaled)
}

/// Backbone and head only — what both architectures reduce to at init.
pub fn base_only_forward(
    tape: &Tape<f64>,
    bound: &Bound,
    inp: StreamInputs,
    dims: &StackDims,
    rope_head: &RopeTables,
) -> Result<Var, TensorError> {
    let t_p = timestep_embedding(tape, bound, inp.t, inp.e_p)?;
    let mut x = inp.f_n;
    for i in 0..dims.base_layers {
        x = dit_block(tape, bound, &format!("base.{i}"), x, inp.f_p, t_p, dims.n_heads, rope_head)?;
    }
    project_head(tape, bound, x)
}

/// The interleaved forward: run base block i, and while control is attached
/// (the first `ctrl_layers` layers), weave a control step — at layer 0 the
/// expert module refreshes both streams and their sum feeds the weave block;
/// at deeper layers the weave block reads the CURRENT backbone stream — then
/// add the zero-projected result back into the backbone.
///
/// Base blocks are modulated by the prompt context, weave blocks by the
/// condition context.
pub fn weavenet_forward(
    tape: &Tape<f64>,
    bound: &Bound,
    inp: StreamInputs,
    dims: &StackDims,
    rope_head: &RopeTables,
    rope_model: &RopeTables,
) -> Result<StackOutput, TensorError> {
    dims.check()?;
    let t_p = timestep_embedding(tape, bound, inp.t, inp.e_p)?;
    let t_c = timestep_embedding(tape, bound, inp.t, inp.e_c)?;
    let mut x = inp.f_n;
    let mut expert_load = None;
    for i in 0..dims.base_layers {
        x = dit_block(tape, bound, &format!("base.{i}"), x, inp.f_p, t_p, dims.n_heads, rope_head)?;
        if i >= dims.ctrl_layers {
            continue;
        }
        let weave_in = if i == 0 {
            let moe = comoe_forward(
                tape,
                bound,
                x,
                inp.f_c,
                inp.f_p,
                inp.e_c,
                inp.e_p,
                inp.t,
                dims.n_experts,
                dims.n_heads,
                rope_model,
            )?;
            expert_load = Some(moe.expert_load);
            tape.add(moe.f_n, moe.f_c)?
        } else {
            x
        };
        let hat = dit_block(
            tape,
            bound,
            &format!("weave.{i}"),
            weave_in,
            inp.f_p,
            t_c,
            dims.n_heads,
            rope_head,
        )?;
        let proj = linear(
            tape,
            hat,
            bound.var(&format!("weave.proj.{i}.w")),
            bound.var(&format!("weave.proj.{i}.b")),
        )?;
        x = inject(tape, x, proj, dims.cond_scale)?;
    }
    Ok(StackOutput { tokens: project_head(tape, bound, x)?, expert_load })
}

/// The parallel baseline: the branch for `type_id` consumes the layer-0
/// input plus condition tokens ONCE, runs its blocks sequentially without
/// re-reading the backbone, and injects each zero-projected block output
/// into the corresponding backbone layer.
#[allow(clippy::too_many_arguments)]
pub fn controlnet_forward(
    tape: &Tape<f64>,
    bound: &Bound,
    inp: StreamInputs,
    type_id: usize,
    dims: &StackDims,
    rope_head: &RopeTables,
) -> Result<StackOutput, TensorError> {
    dims.check()?;
    let t_p = timestep_embedding(tape, bound, inp.t, inp.e_p)?;
    let t_c = timestep_embedding(tape, bound, inp.t, inp.e_c)?;
    let mut g = tape.add(inp.f_n, inp.f_c)?;
    let mut x = inp.f_n;
    for i in 0..dims.base_layers {
        x = dit_block(tape, bound, &format!("base.{i}"), x, inp.f_p, t_p, dims.n_heads, rope_head)?;
        if i >= dims.ctrl_layers {
            continue;
        }
        g = dit_block(
            tape,
            bound,
            &format!("branch.{type_id}.{i}"),
            g,
            inp.f_p,
            t_c,
            dims.n_heads,
            rope_head,
        )?;
        let proj = linear(
            tape,
            g,
            bound.var(&format!("branch.{type_id}.proj.{i}.w")),
            bound.var(&format!("branch.{type_id}.proj.{i}.b")),
        )?;
        x = inject(tape, x, proj, dims.cond_scale)?;
    }
    Ok(StackOutput { tokens: project_head(tape, bound, x)?, expert_load: None })
}

// ==== parameter layout ====

/// Specs for one zero-initialized residual projection.
fn zero_proj_specs(prefix: &str, d: usize) -> Vec<ParamSpec> {
    vec![
        ParamSpec::new(format!("{prefix}.w"), d, d, Init::Zero),
        ParamSpec::new(format!("{prefix}.b"), 1, d, Init::Zero),
    ]
}

/// Specs for the full stack of the chosen architecture (backbone included,
/// head and embeddings excluded — those belong to the surrounding model).
pub fn stack_specs(
    arch: Arch,
    d: usize,
    ffn_mult: usize,
    base_layers: usize,
    ctrl_layers: usize,
    n_experts: usize,
    n_cond_types: usize,
) -> Vec<ParamSpec> {
    let mut specs = Vec::new();
    for i in 0..base_layers {
        specs.extend(dit_block_specs(&format!("base.{i}"), d, ffn_mult));
    }
    match arch {
        Arch::Weave => {
            for i in 0..ctrl_layers {
                specs.extend(dit_block_specs(&format!("weave.{i}"), d, ffn_mult));
                specs.extend(zero_proj_specs(&format!("weave.proj.{i}"), d));
            }
            specs.extend(comoe_specs(d, n_experts));
        }
        Arch::ControlNet => {
            for c in 0..n_cond_types {
                for i in 0..ctrl_layers {
                    specs.extend(dit_block_specs(&format!("branch.{c}.{i}"), d, ffn_mult));
                    specs.extend(zero_proj_specs(&format!("branch.{c}.proj.{i}"), d));
                }
            }
        }
    }
    specs
}

/// Post-init fixups: zero every gate chunk, then copy each base block onto
/// its control twin (weave blocks, or every branch's blocks) bitwise.
pub fn stack_init_fixups(
    params: &mut Params,
    arch: Arch,
    d: usize,
    base_layers: usize,
    ctrl_layers: usize,
    n_cond_types: usize,
) {
    const BLOCK_TENSORS: [&str; 14] = [
        "attn.wq", "attn.bq", "attn.wk", "attn.bk", "attn.wv", "attn.bv", "attn.wo", "attn.bo",
        "ffn.w1", "ffn.b1", "ffn.w2", "ffn.b2", "mod.w", "mod.b",
    ];
    for i in 0..base_layers {
        zero_gate_cols(params, &format!("base.{i}.mod.w"), d, DIT_GATE_CHUNKS);
    }
    match arch {
        Arch::Weave => {
            comoe_zero_gates(params, d);
            for i in 0..ctrl_layers {
                for t in BLOCK_TENSORS {
                    params.copy_within(&format!("base.{i}.{t}"), &format!("weave.{i}.{t}"));
                }
            }
        }
        Arch::ControlNet => {
            for c in 0..n_cond_types {
                for i in 0..ctrl_layers {
                    for t in BLOCK_TENSORS {
                        params.copy_within(
                            &format!("base.{i}.{t}"),
                            &format!("branch.{c}.{i}.{t}"),
                        );
                    }
                }
            }
        }
    }
}

// ==== closed-form parameter counts ====

/// One backbone block: attention (4 maps + biases), feed-forward, and the
/// six-chunk modulation projection.
pub fn dit_block_param_count(d: usize, ffn_mult: usize) -> usize {
    (10 + 2 * ffn_mult) * d * d + (11 + ffn_mult) * d
}

/// One zero projection.
pub fn zero_proj_param_count(d: usize) -> usize {
    d * d + d
}

/// The architecture-specific stack (backbone + control), matching
/// [`stack_specs`] exactly.
pub fn stack_param_count(
    arch: Arch,
    d: usize,
    ffn_mult: usize,
    base_layers: usize,
    ctrl_layers: usize,
    n_experts: usize,
    n_cond_types: usize,
) -> usize {
    let base = base_layers * dit_block_param_count(d, ffn_mult);
    let ctrl_unit = ctrl_layers * (dit_block_param_count(d, ffn_mult) + zero_proj_param_count(d));
    match arch {
        Arch::Weave => base + ctrl_unit + comoe_param_count(d, n_experts),
        Arch::ControlNet => base + n_cond_types * ctrl_unit,
    }
}
