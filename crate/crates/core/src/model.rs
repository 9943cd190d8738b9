//! The assembled model: configuration + named parameters + fixed tables,
//! with the end-to-end velocity forward (patch tokens in, per-patch pixel
//! velocity out) and exact parameter accounting.

use std::sync::Arc;

use crate::config::Config;
use crate::embed::{embed_condition, embed_prompt, patch_projection, rope_tables};
use crate::error::TensorError;
use crate::nn::RopeTables;
use crate::tensor::params::{Bound, Init, ParamSpec};
use crate::tensor::tape::{Tape, Var};
use crate::weavenet::{
    controlnet_forward, stack_init_fixups, stack_param_count, stack_specs, weavenet_forward,
    Arch, StreamInputs,
};
use crate::{Params, Tensor};

/// Velocity tokens `[N × p²·3]` plus expert load when the routed module ran.
pub struct VelocityOutput {
    pub tokens: Var,
    pub expert_load: Option<Vec<usize>>,
}

/// A runnable model: config, trainable parameters, the fixed patch
/// projection, and precomputed rotary tables for both widths in use.
pub struct Model {
    pub cfg: Config,
    pub params: Params,
    patch_proj: Arc<Tensor>,
    rope_head: RopeTables,
    rope_model: RopeTables,
}

/// Full parameter layout for a config: timestep embedder, vocabulary and
/// condition-type tables, prompt projection, the architecture stack, and the
/// zero-initialized pixel head.
pub fn param_specs(cfg: &Config) -> Vec<ParamSpec> {
    let d = cfg.d_model;
    let w = Init::Normal { std: crate::nn::WEIGHT_STD };
    let head_w = cfg.token_width();
    let mut specs = vec![
        ParamSpec::new("time.w1", d, d, w),
        ParamSpec::new("time.b1", 1, d, Init::Zero),
        ParamSpec::new("time.w2", d, d, w),
        ParamSpec::new("time.b2", 1, d, Init::Zero),
        ParamSpec::new("time.wp", d, d, w),
        ParamSpec::new("time.bp", 1, d, Init::Zero),
        ParamSpec::new("vocab.table", cfg.vocab_size, d, w),
        ParamSpec::new("cond.table", cfg.n_cond_types, d, w),
        ParamSpec::new("prompt.w", d, d, w),
        ParamSpec::new("prompt.b", 1, d, Init::Zero),
        ParamSpec::new("head.w", d, head_w, Init::Zero),
        ParamSpec::new("head.b", 1, head_w, Init::Zero),
    ];
    specs.extend(stack_specs(
        cfg.arch,
        d,
        cfg.ffn_mult,
        cfg.base_layers,
        cfg.ctrl_layers,
        cfg.n_experts,
        cfg.n_cond_types,
    ));
    specs
}

/// Exact trainable-parameter count from the closed forms alone (audited
/// against actual tensor sizes in tests).
pub fn count_params_closed_form(cfg: &Config) -> usize {
    let d = cfg.d_model;
    let head_w = cfg.token_width();
    let embeddings = 3 * d * d + 3 * d            // timestep embedder
        + cfg.vocab_size * d                      // vocabulary table
        + cfg.n_cond_types * d                    // condition-type table
        + d * d + d                               // prompt projection
        + d * head_w + head_w; // pixel head
    embeddings
        + stack_param_count(
            cfg.arch,
            d,
            cfg.ffn_mult,
            cfg.base_layers,
            cfg.ctrl_layers,
            cfg.n_experts,
            cfg.n_cond_types,
        )
}

impl Model {
    /// Fresh model: validates the config, initializes all parameters from
    /// the config seed, zeroes every gate, and copies base blocks onto their
    /// control twins.
    pub fn new(cfg: Config) -> Result<Model, TensorError> {
        cfg.validate()?;
        let mut params = Params::init(&param_specs(&cfg), cfg.seed);
        stack_init_fixups(
            &mut params,
            cfg.arch,
            cfg.d_model,
            cfg.base_layers,
            cfg.ctrl_layers,
            cfg.n_cond_types,
        );
        Model::assemble(cfg, params)
    }

    /// Model from existing parameters (checkpoint load). Every expected
    /// tensor must be present with its exact shape, and nothing extra.
    pub fn from_params(cfg: Config, params: Params) -> Result<Model, TensorError> {
        cfg.validate()?;
        let specs = param_specs(&cfg);
        for s in &specs {
            let t = params.get(&s.name).ok_or_else(|| {
                TensorError::invalid("model", format!("missing parameter {:?}", s.name))
            })?;
            if t.shape() != (s.rows, s.cols) {
                return Err(TensorError::invalid(
                    "model",
                    format!(
                        "parameter {:?} has shape {:?}, expected ({}, {})",
                        s.name,
                        t.shape(),
                        s.rows,
                        s.cols
                    ),
                ));
            }
        }
        if params.len() != specs.len() {
            let expected: std::collections::BTreeSet<&str> =
                specs.iter().map(|s| s.name.as_str()).collect();
            let extra: Vec<&str> =
                params.names().filter(|n| !expected.contains(n)).collect();
            return Err(TensorError::invalid(
                "model",
                format!("unexpected parameters {extra:?}"),
            ));
        }
        Model::assemble(cfg, params)
    }

    fn assemble(cfg: Config, params: Params) -> Result<Model, TensorError> {
        let side = cfg.grid_side();
        let rope_head = rope_tables(side, cfg.d_model / cfg.n_heads)?;
        let rope_model = rope_tables(side, cfg.d_model)?;
        let patch_proj = Arc::new(patch_projection(cfg.patch_size, cfg.d_model));
        Ok(Model { cfg, params, patch_proj, rope_head, rope_model })
    }

    /// Registers every parameter on a tape.
    pub fn bind(&self, tape: &Tape<f64>) -> Result<Bound, TensorError> {
        Bound::bind(tape, &self.params)
    }

    pub fn count_params(&self) -> usize {
        self.params.total_len()
    }

    /// The fixed (non-trainable) projection from patch pixels to model width.
    pub fn patch_proj(&self) -> &Arc<Tensor> {
        &self.patch_proj
    }

    /// End-to-end velocity prediction.
    ///
    /// `mixed_patches` and `cond_patches` are `[N × p²·3]` patch-pixel
    /// tokens (see `embed::patch_extract`); the output predicts the pixel
    /// velocity in the same layout. With `zero_condition` set, the condition
    /// stream is zeroed after projection (its type embedding still enters),
    /// giving a prompt-only control with identical parameter shapes.
    pub fn velocity(
        &self,
        tape: &Tape<f64>,
        bound: &Bound,
        mixed_patches: Var,
        cond_patches: Var,
        prompt_ids: &[u32],
        type_id: usize,
        t: f64,
    ) -> Result<VelocityOutput, TensorError> {
        let cfg = &self.cfg;
        let n = cfg.n_tokens();
        if tape.shape(mixed_patches) != (n, cfg.token_width()) {
            return Err(TensorError::ShapeMismatch {
                op: "velocity",
                lhs: tape.shape(mixed_patches),
                rhs: (n, cfg.token_width()),
            });
        }
        let proj = tape.leaf_arc(Arc::clone(&self.patch_proj))?;
        let f_n = tape.matmul(mixed_patches, proj)?;
        let f_c = if cfg.zero_condition {
            tape.leaf(Tensor::zeros(n, cfg.d_model))?
        } else {
            tape.matmul(cond_patches, proj)?
        };
        let (f_p, e_p) = embed_prompt(tape, bound, prompt_ids, cfg.vocab_size)?;
        let e_c = embed_condition(tape, bound, type_id, cfg.n_cond_types)?;
        let inp = StreamInputs { f_n, f_c, f_p, e_c, e_p, t };
        let dims = cfg.stack_dims();
        let out = match cfg.arch {
            Arch::Weave => {
                weavenet_forward(tape, bound, inp, &dims, &self.rope_head, &self.rope_model)?
            }
            Arch::ControlNet => {
                controlnet_forward(tape, bound, inp, type_id, &dims, &self.rope_head)?
            }
        };
        Ok(VelocityOutput { tokens: out.tokens, expert_load: out.expert_load })
    }
}
