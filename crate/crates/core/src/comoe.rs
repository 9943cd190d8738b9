//! The condition-modulated expert module: score-based token routing, per-
//! expert condition-modulated transforms with reverse scatter, and a shared
//! expert built from gated multimodal attention.
//!
//! The routed path uses the expert index only (hard argmax), so router
//! weights receive an exactly-zero gradient; the shared expert is a pure
//! gated delta that contributes exactly zero at initialization.

use std::sync::Arc;

use crate::embed::timestep_embedding;
use crate::error::TensorError;
use crate::nn::{
    cross_block_specs, delta_cross, delta_self, self_block_specs, zero_gate_cols, RopeTables,
    CROSS_GATE_CHUNK, SELF_GATE_CHUNK, WEIGHT_STD,
};
use crate::tensor::params::{Bound, Init, ParamSpec};
use crate::tensor::tape::{Tape, Var};
use crate::{Params, Tensor};

/// Initialization scale of the per-expert modulation tensors (weights AND
/// biases — the expert path is meant to perturb features from step one).
pub const EXPERT_STD: f64 = 0.1;

// ==== routing ====

/// Result of routing a token batch across experts.
#[derive(Debug, Clone)]
pub struct ExpertAssignment {
    /// Raw routing scores, `[N × E]`.
    pub scores: Tensor,
    /// Winning expert per token (ties go to the lowest index).
    pub expert_of: Vec<usize>,
    /// Member token positions per expert, in original token order.
    pub groups: Vec<Vec<usize>>,
}

/// Argmax assignment from a score matrix; ties break toward the lowest
/// expert index, and groups keep original token order.
pub(crate) fn assign_from_scores(scores: Tensor) -> ExpertAssignment {
    let (n, e) = scores.shape();
    let mut expert_of = Vec::with_capacity(n);
    let mut groups = vec![Vec::new(); e];
    for t in 0..n {
        let row = scores.row(t);
        let mut best = 0;
        for (j, &v) in row.iter().enumerate().skip(1) {
            if v > row[best] {
                best = j;
            }
        }
        expert_of.push(best);
        groups[best].push(t);
    }
    ExpertAssignment { scores, expert_of, groups }
}

/// Scores the fused streams and assigns every token to one expert:
/// `S = (F_n + F_c)·W_r + b_r`, winner per row by argmax.
///
/// Pure value-level computation — the hard assignment blocks gradient flow,
/// so the router sees an exactly-zero gradient by construction.
pub fn route_tokens(
    f_n: &Tensor,
    f_c: &Tensor,
    w_r: &Tensor,
    b_r: &Tensor,
) -> Result<ExpertAssignment, TensorError> {
    if f_n.shape() != f_c.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "route_tokens",
            lhs: f_n.shape(),
            rhs: f_c.shape(),
        });
    }
    let scores = f_n.add(f_c)?.matmul(w_r)?.add_row_broadcast(b_r)?;
    Ok(assign_from_scores(scores))
}

// ==== modulated experts ====

/// One expert's condition-modulated transform over a gathered token block.
///
/// `F_c' = (E_c·LW_c) ⊙ F_c + LB_c` — the condition embedding picks a
/// per-channel scale shared by all tokens; then
/// `F_n' = (F_c'·LW_h) ⊙ F_n + LB_h` — each transformed condition token
/// gates its own image token channelwise. Inputs are expected to carry
/// rotary position already (positions travel with tokens through gathers).
pub fn modulated_expert_forward(
    tape: &Tape<f64>,
    bound: &Bound,
    prefix: &str,
    f_n_block: Var,
    f_c_block: Var,
    e_c: Var,
) -> Result<(Var, Var), TensorError> {
    let p = |s: &str| bound.var(&format!("{prefix}.{s}"));
    let scale_c = tape.matmul(e_c, p("lwc"))?;
    let f_c2 = tape.add_row(tape.mul_row(f_c_block, scale_c)?, p("lbc"))?;
    let gate = tape.matmul(f_c2, p("lwh"))?;
    let f_n2 = tape.add_row(tape.mul(gate, f_n_block)?, p("lbh"))?;
    Ok((f_n2, f_c2))
}

// ==== shared expert ====

/// The shared expert: two timestep-fused contexts drive gated attention over
/// both streams and the prompt. Returns `(S_n', S_c')` — pure deltas that are
/// exactly zero at initialization.
///
/// Stage 1: with context from the condition embedding, the image stream
/// queries the condition stream and vice versa, then the condition result
/// self-attends. Stage 2: with context from the prompt pooling, the
/// token-concatenation of both streams queries the prompt tokens, the joint
/// result self-attends, and the halves fold back onto the stage-1 outputs.
#[allow(clippy::too_many_arguments)]
pub fn shared_expert_forward(
    tape: &Tape<f64>,
    bound: &Bound,
    f_n_rope: Var,
    f_c_rope: Var,
    f_p: Var,
    e_c: Var,
    e_p: Var,
    t: f64,
    n_heads: usize,
) -> Result<(Var, Var), TensorError> {
    if tape.shape(f_p).0 == 0 {
        return Err(TensorError::invalid("shared_expert_forward", "empty prompt"));
    }
    let n = tape.shape(f_n_rope).0;
    let n_c = tape.shape(f_c_rope).0;

    let t_c = timestep_embedding(tape, bound, t, e_c)?;
    let s_n = delta_cross(tape, bound, "comoe.attn_n", f_n_rope, f_c_rope, t_c, n_heads)?;
    let mut s_c = delta_cross(tape, bound, "comoe.attn_c", f_c_rope, f_n_rope, t_c, n_heads)?;
    s_c = tape.add(s_c, delta_self(tape, bound, "comoe.self_c", s_c, t_c, n_heads)?)?;

    let t_p = timestep_embedding(tape, bound, t, e_p)?;
    let joint = tape.concat_rows(&[f_n_rope, f_c_rope])?;
    let mut j = delta_cross(tape, bound, "comoe.joint_x", joint, f_p, t_p, n_heads)?;
    j = tape.add(j, delta_self(tape, bound, "comoe.joint_self", j, t_p, n_heads)?)?;

    let s_n = tape.add(s_n, tape.slice_rows(j, 0, n)?)?;
    let s_c = tape.add(s_c, tape.slice_rows(j, n, n_c)?)?;
    Ok((s_n, s_c))
}

// ==== full module ====

/// Output of [`comoe_forward`]: both refreshed streams plus the routing load
/// (tokens per expert) for reporting.
pub struct CoMoeOutput {
    pub f_n: Var,
    pub f_c: Var,
    pub expert_load: Vec<usize>,
}

/// Full module pass: route on the pre-rotary fused streams, rotate both
/// streams, run each expert over its gathered block, scatter back to original
/// token order, and add the shared expert's deltas.
#[allow(clippy::too_many_arguments)]
pub fn comoe_forward(
    tape: &Tape<f64>,
    bound: &Bound,
    f_n: Var,
    f_c: Var,
    f_p: Var,
    e_c: Var,
    e_p: Var,
    t: f64,
    n_experts: usize,
    n_heads: usize,
    rope: &RopeTables,
) -> Result<CoMoeOutput, TensorError> {
    let assignment = route_tokens(
        &tape.value(f_n),
        &tape.value(f_c),
        &tape.value(bound.var("comoe.router.w")),
        &tape.value(bound.var("comoe.router.b")),
    )?;
    if assignment.groups.len() != n_experts {
        return Err(TensorError::invalid(
            "comoe_forward",
            format!("router scores {} experts, model has {n_experts}", assignment.groups.len()),
        ));
    }
    let n = tape.shape(f_n).0;

    let (cos, sin) = rope;
    let f_n_rope = tape.rope(f_n, Arc::clone(cos), Arc::clone(sin))?;
    let f_c_rope = tape.rope(f_c, Arc::clone(cos), Arc::clone(sin))?;

    // Experts over gathered blocks, then one scatter back to token order.
    let mut perm = Vec::with_capacity(n);
    let mut n_blocks = Vec::new();
    let mut c_blocks = Vec::new();
    for (e, group) in assignment.groups.iter().enumerate() {
        if group.is_empty() {
            continue;
        }
        perm.extend_from_slice(group);
        let bn = tape.gather_rows(f_n_rope, group)?;
        let bc = tape.gather_rows(f_c_rope, group)?;
        let (f_n2, f_c2) =
            modulated_expert_forward(tape, bound, &format!("comoe.expert.{e}"), bn, bc, e_c)?;
        n_blocks.push(f_n2);
        c_blocks.push(f_c2);
    }
    let f_n_hat = tape.scatter_add_rows(tape.concat_rows(&n_blocks)?, &perm, n)?;
    let f_c_hat = tape.scatter_add_rows(tape.concat_rows(&c_blocks)?, &perm, n)?;

    let (s_n, s_c) =
        shared_expert_forward(tape, bound, f_n_rope, f_c_rope, f_p, e_c, e_p, t, n_heads)?;
    Ok(CoMoeOutput {
        f_n: tape.add(f_n_hat, s_n)?,
        f_c: tape.add(f_c_hat, s_c)?,
        expert_load: assignment.groups.iter().map(Vec::len).collect(),
    })
}

// ==== parameter layout ====

/// Parameter specs for the whole module: router, per-expert modulation
/// tensors, and the five shared-expert attention blocks.
pub fn comoe_specs(d: usize, n_experts: usize) -> Vec<ParamSpec> {
    let mut specs = vec![
        ParamSpec::new("comoe.router.w", d, n_experts, Init::Normal { std: WEIGHT_STD }),
        ParamSpec::new("comoe.router.b", 1, n_experts, Init::Zero),
    ];
    let e_init = Init::Normal { std: EXPERT_STD };
    for e in 0..n_experts {
        let n = |s: &str| format!("comoe.expert.{e}.{s}");
        specs.push(ParamSpec::new(n("lwc"), d, d, e_init));
        specs.push(ParamSpec::new(n("lbc"), 1, d, e_init));
        specs.push(ParamSpec::new(n("lwh"), d, d, e_init));
        specs.push(ParamSpec::new(n("lbh"), 1, d, e_init));
    }
    for cross in ["comoe.attn_n", "comoe.attn_c", "comoe.joint_x"] {
        specs.extend(cross_block_specs(cross, d));
    }
    for slf in ["comoe.self_c", "comoe.joint_self"] {
        specs.extend(self_block_specs(slf, d));
    }
    specs
}

/// Closed-form size of [`comoe_specs`]: router `d·E + E`, experts
/// `E·(2d² + 2d)`, three cross blocks `9d² + 9d` each, two self blocks
/// `7d² + 7d` each.
pub fn comoe_param_count(d: usize, n_experts: usize) -> usize {
    let router = d * n_experts + n_experts;
    let experts = n_experts * (2 * d * d + 2 * d);
    let cross = 3 * (9 * d * d + 9 * d);
    let slf = 2 * (7 * d * d + 7 * d);
    router + experts + cross + slf
}

/// Zeroes the gate chunks of every shared-expert attention block so the
/// module starts as experts-only (shared delta exactly zero).
pub fn comoe_zero_gates(params: &mut Params, d: usize) {
    for cross in ["comoe.attn_n", "comoe.attn_c", "comoe.joint_x"] {
        zero_gate_cols(params, &format!("{cross}.mod.w"), d, CROSS_GATE_CHUNK);
    }
    for slf in ["comoe.self_c", "comoe.joint_self"] {
        zero_gate_cols(params, &format!("{slf}.mod.w"), d, SELF_GATE_CHUNK);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::{rope_tables, timestep_sinusoid};
    use crate::nn::LN_EPS;
    use crate::tensor::grad_check::grad_check;
    use crate::GradientRecord;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn time_specs(d: usize) -> Vec<ParamSpec> {
        let w = Init::Normal { std: WEIGHT_STD };
        vec![
            ParamSpec::new("time.w1", d, d, w),
            ParamSpec::new("time.b1", 1, d, Init::Zero),
            ParamSpec::new("time.w2", d, d, w),
            ParamSpec::new("time.b2", 1, d, Init::Zero),
            ParamSpec::new("time.wp", d, d, w),
            ParamSpec::new("time.bp", 1, d, Init::Zero),
        ]
    }

    fn test_params(d: usize, n_experts: usize, seed: u64, zero_gates: bool) -> Params {
        let mut specs = comoe_specs(d, n_experts);
        specs.extend(time_specs(d));
        let mut params = Params::init(&specs, seed);
        if zero_gates {
            comoe_zero_gates(&mut params, d);
        }
        params
    }

    fn rand_tensor(rows: usize, cols: usize, stream: &mut crate::rng::Stream) -> Tensor {
        Tensor::from_fn(rows, cols, |_, _| stream.gen_range(-1.0..1.0))
    }

    /// Identity tables: rope becomes a no-op, isolating the routing algebra.
    fn identity_rope(n: usize, d: usize) -> RopeTables {
        (Arc::new(Tensor::filled(n, d / 2, 1.0)), Arc::new(Tensor::zeros(n, d / 2)))
    }

    // ==== routing ====

    #[test]
    fn single_expert_takes_every_token() {
        let f = Tensor::filled(5, 3, 0.2);
        let a = route_tokens(&f, &f, &Tensor::zeros(3, 1), &Tensor::zeros(1, 1)).unwrap();
        assert_eq!(a.expert_of, vec![0; 5]);
        assert_eq!(a.groups, vec![(0..5).collect::<Vec<_>>()]);
    }

    #[test]
    fn score_ties_pick_the_lowest_expert() {
        // Zero weights give every expert the same (bias) score.
        let f = Tensor::filled(3, 2, 1.0);
        let a = route_tokens(&f, &f, &Tensor::zeros(2, 4), &Tensor::zeros(1, 4)).unwrap();
        assert_eq!(a.expert_of, vec![0, 0, 0]);
    }

    #[test]
    fn routing_matches_hand_computed_scores() {
        // F_n + F_c = [[2, 0], [0, 2], [1, 1]]; W_r = [[1, 0], [0, 1]] with
        // bias [0, 0.5] gives scores [[2, 0.5], [0, 2.5], [1, 1.5]] →
        // experts [0, 1, 1].
        let f_n = Tensor::from_vec(3, 2, vec![1.0, 0.0, 0.0, 1.0, 0.5, 0.5]);
        let f_c = f_n.clone();
        let w_r = Tensor::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let b_r = Tensor::row_vec(vec![0.0, 0.5]);
        let a = route_tokens(&f_n, &f_c, &w_r, &b_r).unwrap();
        assert_eq!(a.expert_of, vec![0, 1, 1]);
        assert_eq!(a.groups, vec![vec![0], vec![1, 2]]);
        assert_eq!(a.scores.row(2), &[1.0, 1.5]);
    }

    #[test]
    fn shifting_all_scores_of_a_token_keeps_its_expert() {
        let mut stream = crate::rng::stream("route-shift", 1, &[]);
        for _ in 0..200 {
            let scores = rand_tensor(6, 4, &mut stream);
            let base = assign_from_scores(scores.clone());
            let c: f64 = stream.gen_range(-5.0..5.0);
            let shifted = scores.map(|v| v + c);
            assert_eq!(assign_from_scores(shifted).expert_of, base.expert_of);
        }
    }

    #[test]
    fn routing_partitions_and_scatter_inverts_gather() {
        let mut stream = crate::rng::stream("route-partition", 2, &[]);
        for case in 0..1000 {
            let n = 1 + (case % 11);
            let e = 1 + (case % 5);
            let d = 4;
            let f_n = rand_tensor(n, d, &mut stream);
            let f_c = rand_tensor(n, d, &mut stream);
            let w_r = rand_tensor(d, e, &mut stream);
            let b_r = rand_tensor(1, e, &mut stream);
            let a = route_tokens(&f_n, &f_c, &w_r, &b_r).unwrap();

            let mut seen = vec![0usize; n];
            for g in &a.groups {
                assert!(g.windows(2).all(|w| w[0] < w[1]), "group order");
                for &t in g {
                    seen[t] += 1;
                }
            }
            assert_eq!(seen, vec![1; n], "every token exactly once");

            // Gather per group, concatenate, scatter back: bitwise identity.
            let tape = Tape::new();
            let x = tape.leaf(f_n.clone()).unwrap();
            let mut perm = Vec::new();
            let mut blocks = Vec::new();
            for g in a.groups.iter().filter(|g| !g.is_empty()) {
                perm.extend_from_slice(g);
                blocks.push(tape.gather_rows(x, g).unwrap());
            }
            let cat = tape.concat_rows(&blocks).unwrap();
            let back = tape.scatter_add_rows(cat, &perm, n).unwrap();
            assert_eq!(tape.value(back).data(), f_n.data(), "bitwise round trip");
        }
    }

    // ==== modulated expert ====

    fn expert_only_params(d: usize, seed: u64) -> Params {
        Params::init(&comoe_specs(d, 1), seed)
    }

    #[test]
    fn all_ones_scale_and_zero_shift_pass_the_condition_block_through() {
        let d = 4;
        let mut params = expert_only_params(d, 7);
        // E_c = e_0, first row of the scale map = ones → scale vector = 1.
        let mut lwc = Tensor::zeros(d, d);
        for j in 0..d {
            lwc.set(0, j, 1.0);
        }
        params.insert("comoe.expert.0.lwc", lwc);
        params.insert("comoe.expert.0.lbc", Tensor::zeros(1, d));
        let mut stream = crate::rng::stream("expert-id", 3, &[]);
        let bc = rand_tensor(2, d, &mut stream);
        let bn = rand_tensor(2, d, &mut stream);
        let tape = Tape::new();
        let bound = Bound::bind(&tape, &params).unwrap();
        let e_c = tape.leaf(Tensor::row_vec(vec![1.0, 0.0, 0.0, 0.0])).unwrap();
        let (_, f_c2) = modulated_expert_forward(
            &tape,
            &bound,
            "comoe.expert.0",
            tape.leaf(bn).unwrap(),
            tape.leaf(bc.clone()).unwrap(),
            e_c,
        )
        .unwrap();
        assert_eq!(tape.value(f_c2).data(), bc.data());
    }

    #[test]
    fn zero_gate_map_reduces_image_block_to_its_shift() {
        let d = 4;
        let mut params = expert_only_params(d, 8);
        params.insert("comoe.expert.0.lwh", Tensor::zeros(d, d));
        let lbh = Tensor::row_vec(vec![0.5, -1.0, 2.0, 0.0]);
        params.insert("comoe.expert.0.lbh", lbh.clone());
        let mut stream = crate::rng::stream("expert-shift", 4, &[]);
        let tape = Tape::new();
        let bound = Bound::bind(&tape, &params).unwrap();
        let (f_n2, _) = modulated_expert_forward(
            &tape,
            &bound,
            "comoe.expert.0",
            tape.leaf(rand_tensor(3, d, &mut stream)).unwrap(),
            tape.leaf(rand_tensor(3, d, &mut stream)).unwrap(),
            tape.leaf(rand_tensor(1, d, &mut stream)).unwrap(),
        )
        .unwrap();
        let out = tape.value(f_n2);
        for t in 0..3 {
            assert_eq!(out.row(t), lbh.row(0));
        }
    }

    #[test]
    fn expert_block_matches_scalar_loop() {
        let d = 4;
        let params = expert_only_params(d, 9);
        let mut stream = crate::rng::stream("expert-oracle", 5, &[]);
        let bn = rand_tensor(2, d, &mut stream);
        let bc = rand_tensor(2, d, &mut stream);
        let e_c = rand_tensor(1, d, &mut stream);
        let (lwc, lbc) = (params.expect("comoe.expert.0.lwc"), params.expect("comoe.expert.0.lbc"));
        let (lwh, lbh) = (params.expect("comoe.expert.0.lwh"), params.expect("comoe.expert.0.lbh"));

        // Scalar reference: loops only.
        let mut scale = vec![0.0; d];
        for j in 0..d {
            for i in 0..d {
                scale[j] += e_c.get(0, i) * lwc.get(i, j);
            }
        }
        let mut fc2 = Tensor::zeros(2, d);
        for t in 0..2 {
            for j in 0..d {
                fc2.set(t, j, scale[j] * bc.get(t, j) + lbc.get(0, j));
            }
        }
        let mut fn2 = Tensor::zeros(2, d);
        for t in 0..2 {
            for j in 0..d {
                let mut gate = 0.0;
                for i in 0..d {
                    gate += fc2.get(t, i) * lwh.get(i, j);
                }
                fn2.set(t, j, gate * bn.get(t, j) + lbh.get(0, j));
            }
        }

        let tape = Tape::new();
        let bound = Bound::bind(&tape, &params).unwrap();
        let (got_n, got_c) = modulated_expert_forward(
            &tape,
            &bound,
            "comoe.expert.0",
            tape.leaf(bn).unwrap(),
            tape.leaf(bc).unwrap(),
            tape.leaf(e_c).unwrap(),
        )
        .unwrap();
        assert!(tape.value(got_c).max_abs_diff(&fc2) <= 1e-12);
        assert!(tape.value(got_n).max_abs_diff(&fn2) <= 1e-12);
    }

    // ==== shared expert and full module ====

    #[test]
    fn zero_gates_make_the_shared_expert_contribute_nothing() {
        let (d, e) = (8, 2);
        let params = test_params(d, e, 11, true);
        let mut stream = crate::rng::stream("shared-zero", 6, &[]);
        let tape = Tape::new();
        let bound = Bound::bind(&tape, &params).unwrap();
        let f_n = tape.leaf(rand_tensor(4, d, &mut stream)).unwrap();
        let f_c = tape.leaf(rand_tensor(4, d, &mut stream)).unwrap();
        let f_p = tape.leaf(rand_tensor(2, d, &mut stream)).unwrap();
        let e_c = tape.leaf(rand_tensor(1, d, &mut stream)).unwrap();
        let e_p = tape.leaf(rand_tensor(1, d, &mut stream)).unwrap();
        let (s_n, s_c) =
            shared_expert_forward(&tape, &bound, f_n, f_c, f_p, e_c, e_p, 0.3, 1).unwrap();
        assert_eq!(tape.value(s_n).max_abs_diff(&Tensor::zeros(4, d)), 0.0);
        assert_eq!(tape.value(s_c).max_abs_diff(&Tensor::zeros(4, d)), 0.0);
    }

    #[test]
    fn empty_prompt_is_rejected() {
        let d = 8;
        let params = test_params(d, 1, 12, true);
        let tape = Tape::new();
        let bound = Bound::bind(&tape, &params).unwrap();
        let z = tape.leaf(Tensor::zeros(2, d)).unwrap();
        let empty = tape.leaf(Tensor::zeros(0, d)).unwrap();
        let e = tape.leaf(Tensor::zeros(1, d)).unwrap();
        assert!(shared_expert_forward(&tape, &bound, z, z, empty, e, e, 0.5, 1).is_err());
    }

    #[test]
    fn identity_experts_and_zero_gates_return_the_rotated_inputs() {
        // Scale vector = 1 and gate map that sums an all-ones condition row
        // to 1 per channel turn both expert maps into exact pass-throughs.
        let d = 4;
        let mut params = test_params(d, 1, 13, true);
        let mut lwc = Tensor::zeros(d, d);
        for j in 0..d {
            lwc.set(0, j, 1.0);
        }
        params.insert("comoe.expert.0.lwc", lwc);
        params.insert("comoe.expert.0.lbc", Tensor::zeros(1, d));
        let mut lwh = Tensor::zeros(d, d);
        for j in 0..d {
            lwh.set(j, j, 1.0);
        }
        params.insert("comoe.expert.0.lwh", lwh);
        params.insert("comoe.expert.0.lbh", Tensor::zeros(1, d));

        let mut stream = crate::rng::stream("comoe-id", 7, &[]);
        let f_n_in = rand_tensor(3, d, &mut stream);
        let f_c_in = Tensor::filled(3, d, 1.0);
        let tape = Tape::new();
        let bound = Bound::bind(&tape, &params).unwrap();
        let f_n = tape.leaf(f_n_in.clone()).unwrap();
        let f_c = tape.leaf(f_c_in.clone()).unwrap();
        let f_p = tape.leaf(rand_tensor(2, d, &mut stream)).unwrap();
        let e_c = tape.leaf(Tensor::row_vec(vec![1.0, 0.0, 0.0, 0.0])).unwrap();
        let e_p = tape.leaf(rand_tensor(1, d, &mut stream)).unwrap();
        let out = comoe_forward(
            &tape,
            &bound,
            f_n,
            f_c,
            f_p,
            e_c,
            e_p,
            0.4,
            1,
            1,
            &identity_rope(3, d),
        )
        .unwrap();
        assert!(tape.value(out.f_n).max_abs_diff(&f_n_in) <= 1e-12);
        assert!(tape.value(out.f_c).max_abs_diff(&f_c_in) <= 1e-12);
        assert_eq!(out.expert_load, vec![3]);
    }

    #[test]
    fn one_expert_equals_unrouted_expert_over_whole_sequence() {
        let d = 8;
        let params = test_params(d, 1, 14, false);
        let mut stream = crate::rng::stream("comoe-one", 8, &[]);
        let f_n_in = rand_tensor(4, d, &mut stream);
        let f_c_in = rand_tensor(4, d, &mut stream);
        let f_p_in = rand_tensor(2, d, &mut stream);
        let e_c_in = rand_tensor(1, d, &mut stream);
        let e_p_in = rand_tensor(1, d, &mut stream);
        let rope = rope_tables(2, d).unwrap();

        let tape = Tape::new();
        let bound = Bound::bind(&tape, &params).unwrap();
        let f_n = tape.leaf(f_n_in.clone()).unwrap();
        let f_c = tape.leaf(f_c_in.clone()).unwrap();
        let f_p = tape.leaf(f_p_in.clone()).unwrap();
        let e_c = tape.leaf(e_c_in.clone()).unwrap();
        let e_p = tape.leaf(e_p_in.clone()).unwrap();
        let out =
            comoe_forward(&tape, &bound, f_n, f_c, f_p, e_c, e_p, 0.6, 1, 1, &rope).unwrap();

        // Reference: same tape ops, no gather/scatter.
        let (cos, sin) = &rope;
        let frn = tape.rope(f_n, Arc::clone(cos), Arc::clone(sin)).unwrap();
        let frc = tape.rope(f_c, Arc::clone(cos), Arc::clone(sin)).unwrap();
        let (en, ec2) =
            modulated_expert_forward(&tape, &bound, "comoe.expert.0", frn, frc, e_c).unwrap();
        let (sn, sc) =
            shared_expert_forward(&tape, &bound, frn, frc, f_p, e_c, e_p, 0.6, 1).unwrap();
        let ref_n = tape.add(en, sn).unwrap();
        let ref_c = tape.add(ec2, sc).unwrap();
        assert!(tape.value(out.f_n).max_abs_diff(&tape.value(ref_n)) <= 1e-14);
        assert!(tape.value(out.f_c).max_abs_diff(&tape.value(ref_c)) <= 1e-14);
    }

    #[test]
    fn permuting_tokens_with_their_positions_permutes_the_outputs() {
        let (d, e, n) = (8, 3, 6);
        let params = test_params(d, e, 15, false);
        let mut stream = crate::rng::stream("comoe-perm", 9, &[]);
        let f_n = rand_tensor(n, d, &mut stream);
        let f_c = rand_tensor(n, d, &mut stream);
        let f_p = rand_tensor(2, d, &mut stream);
        let e_c = rand_tensor(1, d, &mut stream);
        let e_p = rand_tensor(1, d, &mut stream);
        let (cos, sin) = rope_tables(3, d).unwrap();
        // 9-position tables; use the first 6 rows, permuted with the tokens.
        let perm = [4usize, 0, 5, 2, 1, 3];
        let run = |fn_in: &Tensor, fc_in: &Tensor, positions: &[usize]| -> (Tensor, Tensor) {
            let tables = (
                Arc::new(cos.take_rows(positions)),
                Arc::new(sin.take_rows(positions)),
            );
            let tape = Tape::new();
            let bound = Bound::bind(&tape, &params).unwrap();
            let out = comoe_forward(
                &tape,
                &bound,
                tape.leaf(fn_in.clone()).unwrap(),
                tape.leaf(fc_in.clone()).unwrap(),
                tape.leaf(f_p.clone()).unwrap(),
                tape.leaf(e_c.clone()).unwrap(),
                tape.leaf(e_p.clone()).unwrap(),
                0.25,
                e,
                1,
                &tables,
            )
            .unwrap();
            (
                tape.value(out.f_n).as_ref().clone(),
                tape.value(out.f_c).as_ref().clone(),
            )
        };
        let (base_n, base_c) = run(&f_n, &f_c, &[0, 1, 2, 3, 4, 5]);
        let (perm_n, perm_c) = run(&f_n.take_rows(&perm), &f_c.take_rows(&perm), &perm);
        assert!(perm_n.max_abs_diff(&base_n.take_rows(&perm)) <= 1e-12);
        assert!(perm_c.max_abs_diff(&base_c.take_rows(&perm)) <= 1e-12);
    }

    // ==== straight-line reference oracle ====

    fn r_linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
        let (n, k) = x.shape();
        let m = w.cols();
        Tensor::from_fn(n, m, |i, j| {
            (0..k).map(|q| x.get(i, q) * w.get(q, j)).sum::<f64>() + b.get(0, j)
        })
    }

    fn r_silu(x: &Tensor) -> Tensor {
        x.map(|v| v / (1.0 + (-v).exp()))
    }

    fn r_ln(x: &Tensor) -> Tensor {
        let (n, d) = x.shape();
        let mut out = Tensor::zeros(n, d);
        for i in 0..n {
            let row = x.row(i);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            for j in 0..d {
                out.set(i, j, (row[j] - mean) * inv);
            }
        }
        out
    }

    fn r_mod(x: &Tensor, shift: &Tensor, scale: &Tensor) -> Tensor {
        Tensor::from_fn(x.rows(), x.cols(), |i, j| {
            x.get(i, j) * (1.0 + scale.get(0, j)) + shift.get(0, j)
        })
    }

    fn r_attn(q: &Tensor, k: &Tensor, v: &Tensor) -> Tensor {
        let (n, d) = q.shape();
        let m = k.rows();
        let scale = 1.0 / (d as f64).sqrt();
        let mut out = Tensor::zeros(n, v.cols());
        for i in 0..n {
            let mut w = vec![0.0; m];
            for (r, wr) in w.iter_mut().enumerate() {
                *wr = (0..d).map(|c| q.get(i, c) * k.get(r, c)).sum::<f64>() * scale;
            }
            let peak = w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for wr in &mut w {
                *wr = (*wr - peak).exp();
                z += *wr;
            }
            for j in 0..v.cols() {
                let s: f64 = (0..m).map(|r| w[r] * v.get(r, j)).sum();
                out.set(i, j, s / z);
            }
        }
        out
    }

    fn r_mods(params: &Params, prefix: &str, cond: &Tensor, chunks: usize) -> Vec<Tensor> {
        let d = cond.cols();
        let m = r_linear(
            &r_silu(cond),
            params.expect(&format!("{prefix}.mod.w")),
            params.expect(&format!("{prefix}.mod.b")),
        );
        (0..chunks)
            .map(|c| Tensor::from_fn(1, d, |_, j| m.get(0, c * d + j)))
            .collect()
    }

    fn r_delta_cross(params: &Params, prefix: &str, xq: &Tensor, xkv: &Tensor, cond: &Tensor) -> Tensor {
        let m = r_mods(params, prefix, cond, 5);
        let hq = r_mod(&r_ln(xq), &m[0], &m[1]);
        let hkv = r_mod(&r_ln(xkv), &m[2], &m[3]);
        let p = |s: &str| params.expect(&format!("{prefix}.{s}"));
        let a = r_attn(
            &r_linear(&hq, p("wq"), p("bq")),
            &r_linear(&hkv, p("wk"), p("bk")),
            &r_linear(&hkv, p("wv"), p("bv")),
        );
        let a = r_linear(&a, p("wo"), p("bo"));
        Tensor::from_fn(a.rows(), a.cols(), |i, j| a.get(i, j) * m[4].get(0, j))
    }

    fn r_delta_self(params: &Params, prefix: &str, x: &Tensor, cond: &Tensor) -> Tensor {
        let m = r_mods(params, prefix, cond, 3);
        let h = r_mod(&r_ln(x), &m[0], &m[1]);
        let p = |s: &str| params.expect(&format!("{prefix}.{s}"));
        let a = r_attn(
            &r_linear(&h, p("wq"), p("bq")),
            &r_linear(&h, p("wk"), p("bk")),
            &r_linear(&h, p("wv"), p("bv")),
        );
        let a = r_linear(&a, p("wo"), p("bo"));
        Tensor::from_fn(a.rows(), a.cols(), |i, j| a.get(i, j) * m[2].get(0, j))
    }

    fn r_timestep(params: &Params, t: f64, pooled: &Tensor) -> Tensor {
        let s = timestep_sinusoid(t, pooled.cols());
        let h = r_silu(&r_linear(&s, params.expect("time.w1"), params.expect("time.b1")));
        let h = r_linear(&h, params.expect("time.w2"), params.expect("time.b2"));
        let pp = r_linear(pooled, params.expect("time.wp"), params.expect("time.bp"));
        h.add(&pp).unwrap()
    }

    fn r_rope(x: &Tensor, cos: &Tensor, sin: &Tensor) -> Tensor {
        let (n, d) = x.shape();
        let mut out = Tensor::zeros(n, d);
        for i in 0..n {
            for p in 0..d / 2 {
                let (x1, x2) = (x.get(i, 2 * p), x.get(i, 2 * p + 1));
                let (c, s) = (cos.get(i, p), sin.get(i, p));
                out.set(i, 2 * p, x1 * c - x2 * s);
                out.set(i, 2 * p + 1, x1 * s + x2 * c);
            }
        }
        out
    }

    #[test]
    fn full_module_matches_straight_line_reference() {
        let (d, n_experts, n) = (8, 2, 4);
        let params = test_params(d, n_experts, 16, false);
        let mut stream = crate::rng::stream("comoe-oracle", 10, &[]);
        let f_n = rand_tensor(n, d, &mut stream);
        let f_c = rand_tensor(n, d, &mut stream);
        let f_p = rand_tensor(2, d, &mut stream);
        let e_c = rand_tensor(1, d, &mut stream);
        let e_p = rand_tensor(1, d, &mut stream);
        let t = 0.35;
        let (cos, sin) = rope_tables(2, d).unwrap();

        // Reference: per-token routing loop, no gather/scatter, loop algebra.
        let frn = r_rope(&f_n, &cos, &sin);
        let frc = r_rope(&f_c, &cos, &sin);
        let scores = r_linear(
            &f_n.add(&f_c).unwrap(),
            params.expect("comoe.router.w"),
            params.expect("comoe.router.b"),
        );
        let mut ref_n = Tensor::zeros(n, d);
        let mut ref_c = Tensor::zeros(n, d);
        for tok in 0..n {
            let row = scores.row(tok);
            let mut e = 0;
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > row[e] {
                    e = j;
                }
            }
            let p = |s: &str| params.expect(&format!("comoe.expert.{e}.{s}"));
            let scale = r_linear(&e_c, p("lwc"), p("lbc"));
            // r_linear adds the bias; recompute the pure product by
            // subtracting it back out where the equation needs e_c·lwc only.
            let mut fc2 = vec![0.0; d];
            for j in 0..d {
                let pure = scale.get(0, j) - p("lbc").get(0, j);
                fc2[j] = pure * frc.get(tok, j) + p("lbc").get(0, j);
            }
            for j in 0..d {
                let mut gate = 0.0;
                for i in 0..d {
                    gate += fc2[i] * p("lwh").get(i, j);
                }
                ref_n.set(tok, j, gate * frn.get(tok, j) + p("lbh").get(0, j));
                ref_c.set(tok, j, fc2[j]);
            }
        }
        let t_c = r_timestep(&params, t, &e_c);
        let s_n = r_delta_cross(&params, "comoe.attn_n", &frn, &frc, &t_c);
        let mut s_c = r_delta_cross(&params, "comoe.attn_c", &frc, &frn, &t_c);
        s_c = s_c.add(&r_delta_self(&params, "comoe.self_c", &s_c, &t_c)).unwrap();
        let t_p = r_timestep(&params, t, &e_p);
        let mut joint = Tensor::zeros(2 * n, d);
        for i in 0..n {
            for j in 0..d {
                joint.set(i, j, frn.get(i, j));
                joint.set(n + i, j, frc.get(i, j));
            }
        }
        let mut jd = r_delta_cross(&params, "comoe.joint_x", &joint, &f_p, &t_p);
        jd = jd.add(&r_delta_self(&params, "comoe.joint_self", &jd, &t_p)).unwrap();
        for i in 0..n {
            for j in 0..d {
                ref_n.set(i, j, ref_n.get(i, j) + s_n.get(i, j) + jd.get(i, j));
                ref_c.set(i, j, ref_c.get(i, j) + s_c.get(i, j) + jd.get(n + i, j));
            }
        }

        let tape = Tape::new();
        let bound = Bound::bind(&tape, &params).unwrap();
        let out = comoe_forward(
            &tape,
            &bound,
            tape.leaf(f_n).unwrap(),
            tape.leaf(f_c).unwrap(),
            tape.leaf(f_p).unwrap(),
            tape.leaf(e_c).unwrap(),
            tape.leaf(e_p).unwrap(),
            t,
            n_experts,
            1,
            &(cos, sin),
        )
        .unwrap();
        assert!(tape.value(out.f_n).max_abs_diff(&ref_n) <= 1e-9);
        assert!(tape.value(out.f_c).max_abs_diff(&ref_c) <= 1e-9);
    }

    // ==== gradients ====

    #[test]
    fn module_gradients_pass_the_finite_difference_check() {
        let (d, n_experts, n) = (8, 2, 4);
        let mut params = test_params(d, n_experts, 17, true);
        // Nudge every parameter off its init point so gate gradients are
        // exercised (zero gates would hide the attention paths).
        let mut noise = crate::rng::stream("comoe-grad-noise", 0, &[]);
        for name in params.names().map(str::to_string).collect::<Vec<_>>() {
            let t = params.get_mut(&name);
            for i in 0..t.rows() {
                for j in 0..t.cols() {
                    let z: f64 = noise.sample(StandardNormal);
                    t.set(i, j, t.get(i, j) + 0.02 * z);
                }
            }
        }
        let mut stream = crate::rng::stream("comoe-grad", 11, &[]);
        let f_n = rand_tensor(n, d, &mut stream);
        let f_c = rand_tensor(n, d, &mut stream);
        let f_p = rand_tensor(2, d, &mut stream);
        let e_c = rand_tensor(1, d, &mut stream);
        let e_p = rand_tensor(1, d, &mut stream);
        let rope = rope_tables(2, d).unwrap();

        // Routing must sit far from any decision boundary, or the finite
        // differences would step across an expert flip.
        let a = route_tokens(
            &f_n,
            &f_c,
            params.expect("comoe.router.w"),
            params.expect("comoe.router.b"),
        )
        .unwrap();
        for t in 0..n {
            let row = a.scores.row(t);
            let win = a.expert_of[t];
            for (j, &v) in row.iter().enumerate() {
                if j != win {
                    assert!(row[win] - v > 1e-3, "routing gap too small for token {t}");
                }
            }
        }

        let eval = |p: &Params, grads: bool| {
            let tape = if grads { Tape::new() } else { Tape::inference() };
            let bound = Bound::bind(&tape, p)?;
            let out = comoe_forward(
                &tape,
                &bound,
                tape.leaf(f_n.clone())?,
                tape.leaf(f_c.clone())?,
                tape.leaf(f_p.clone())?,
                tape.leaf(e_c.clone())?,
                tape.leaf(e_p.clone())?,
                0.45,
                n_experts,
                1,
                &rope,
            )?;
            let sq_n = tape.mean_all(tape.mul(out.f_n, out.f_n)?)?;
            let sq_c = tape.mean_all(tape.mul(out.f_c, out.f_c)?)?;
            let loss = tape.add(sq_n, sq_c)?;
            let lv = tape.value(loss).item();
            let g: Option<GradientRecord> =
                if grads { Some(tape.backward(loss)?) } else { None };
            Ok((lv, g))
        };
        let worst = grad_check(eval, &params, 1e-5).unwrap();
        assert!(worst <= 1e-6, "worst relative gradient error {worst}");
    }
}
