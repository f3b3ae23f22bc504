//! Forward pass of the fusion block with intermediate-activation capture.
//!
//! Pipeline: image queries cross-attend over text keys/values to form a
//! spatial context map; an occlusion gate weights the refined context
//! per pixel; the gated context merges back into the image stream; pooled
//! text drives a FiLM affine; a residual path plus batch norm closes the
//! block.

use crate::cage::config::{CageConfig, ResidualKind};
use crate::cage::params::CageParams;
use crate::error::{Error, Result};
use crate::tensor::costing::{
    bmm_macs, conv1x1_macs, conv3x3_macs, dwconv3x3_macs, linear_macs, CostTally,
};
use crate::tensor::ops::{self, Activation, BnCache, BnMode, RunningStats};
use crate::tensor::Tensor;

/// Captured intermediates of one forward, consumed by the backward pass.
#[derive(Debug, Clone)]
pub struct CageActivations {
    pub q: Tensor,         // [B, HW, P]
    pub k: Tensor,         // [B, L, P]
    pub v: Tensor,         // [B, L, P]
    pub attn: Tensor,      // [B, h, HW, L], rows sum to 1
    pub ctx_map: Tensor,   // [B, P, H, W]
    pub gate: Tensor,      // [B, 1, H, W], elementwise in [0, 1]
    pub ctx_ref: Tensor,   // [B, ctx, H, W]
    pub f_pre_film: Tensor, // [B, c_out, H, W]
    pub gamma: Tensor,     // [B, c_out]
    pub beta: Tensor,      // [B, c_out]
    pub f_modulated: Tensor,
    pub f_res: Tensor,
    pub f_out: Tensor,

    // backward caches
    pub(crate) mode: BnMode,
    pub(crate) cfg: CageConfig,
    pub(crate) f_img: Tensor,
    pub(crate) f_text: Tensor,
    pub(crate) params_checksum: f64,
    pub(crate) q_pre_ln: Tensor,
    pub(crate) text_ln: Tensor,
    pub(crate) heads_concat: Tensor,
    pub(crate) gate_pre3: Option<Tensor>,
    pub(crate) gate_act: Option<Tensor>,
    pub(crate) ctx_proj_out: Tensor,
    pub(crate) dw1_out: Tensor,
    pub(crate) pw1_out: Tensor,
    pub(crate) u1: Tensor,
    pub(crate) dw2_out: Tensor,
    pub(crate) pw2_out: Tensor,
    pub(crate) u2: Tensor,
    pub(crate) concat: Tensor,
    pub(crate) f_pool: Tensor,
    pub(crate) film_h_pre: Tensor,
    pub(crate) film_h: Tensor,
    pub(crate) bn_cache: BnCache,
}

impl CageActivations {
    /// Normalization mode the forward ran in.
    pub fn mode(&self) -> BnMode {
        self.mode
    }
}

/// Order-sensitive fingerprint of the learnable tensors, used to detect
/// backward calls with params that no longer match the recorded forward.
pub(crate) fn params_checksum(p: &CageParams) -> f64 {
    let mut acc = 0.0_f64;
    for (i, (_, t)) in p.learnable().iter().enumerate() {
        acc += (i as f64 + 1.0) * t.iter().sum::<f64>();
    }
    acc
}

/// `[B, C, H, W]` feature map to `[B, HW, C]` token sequence.
pub(crate) fn nchw_to_seq(x: &Tensor) -> Tensor {
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let hw = h * w;
    let mut out = vec![0.0; x.len()];
    for bi in 0..b {
        for ci in 0..c {
            for p in 0..hw {
                out[(bi * hw + p) * c + ci] = x.data()[(bi * c + ci) * hw + p];
            }
        }
    }
    Tensor::new(vec![b, hw, c], out).unwrap()
}

/// `[B, HW, C]` sequence back to a `[B, C, H, W]` map.
pub(crate) fn seq_to_nchw(x: &Tensor, h: usize, w: usize) -> Tensor {
    let (b, hw, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut out = vec![0.0; x.len()];
    for bi in 0..b {
        for ci in 0..c {
            for p in 0..hw {
                out[(bi * c + ci) * hw + p] = x.data()[(bi * hw + p) * c + ci];
            }
        }
    }
    Tensor::new(vec![b, c, h, w], out).unwrap()
}

fn check_inputs(f_img: &Tensor, f_text: &Tensor, cfg: &CageConfig) -> Result<()> {
    if f_img.rank() != 4 || f_img.shape()[1] != cfg.c_in {
        return Err(Error::Dimension {
            op: "cage_forward",
            detail: format!(
                "image shape {:?}, expected [B, {}, H, W]",
                f_img.shape(),
                cfg.c_in
            ),
        });
    }
    if f_text.rank() != 3 {
        return Err(Error::Dimension {
            op: "cage_forward",
            detail: format!("text shape {:?}, expected [B, L, D]", f_text.shape()),
        });
    }
    if f_text.shape()[1] == 0 {
        return Err(Error::EmptyVocabulary);
    }
    if f_text.shape()[2] != cfg.embed_dim {
        return Err(Error::Dimension {
            op: "cage_forward",
            detail: format!(
                "text depth {} != embed_dim {}",
                f_text.shape()[2],
                cfg.embed_dim
            ),
        });
    }
    if f_text.shape()[0] != f_img.shape()[0] {
        return Err(Error::Dimension {
            op: "cage_forward",
            detail: format!(
                "batch mismatch: image {} vs text {}",
                f_img.shape()[0],
                f_text.shape()[0]
            ),
        });
    }
    Ok(())
}

struct AttnStage {
    q_pre_ln: Tensor,
    q: Tensor,
    text_ln: Tensor,
    k: Tensor,
    v: Tensor,
    attn: Tensor,
    heads_concat: Tensor,
    ctx_map: Tensor,
}

fn stage_attention(
    f_img: &Tensor,
    f_text: &Tensor,
    p: &CageParams,
    cfg: &CageConfig,
    mut tally: Option<&mut CostTally>,
) -> Result<AttnStage> {
    let (b, h, w) = (f_img.shape()[0], f_img.shape()[2], f_img.shape()[3]);
    let l = f_text.shape()[1];
    let (pp, heads, dk) = (cfg.proj_dim, cfg.heads, cfg.head_dim());
    let hw = h * w;

    let qc = ops::conv1x1(f_img, &p.q_proj_w, &p.q_proj_b)?;
    let q_pre_ln = nchw_to_seq(&qc);
    let q = ops::layer_norm(&q_pre_ln, &p.q_ln_gain, &p.q_ln_shift, cfg.ln_eps)?;
    let text_ln = ops::layer_norm(f_text, &p.text_ln_gain, &p.text_ln_shift, cfg.ln_eps)?;
    let k = ops::linear(&text_ln, &p.w_k, None)?;
    let v = ops::linear(&text_ln, &p.w_v, None)?;
    if let Some(t) = tally.as_deref_mut() {
        t.add_macs("q_proj", conv1x1_macs(b, cfg.c_in, pp, h, w));
        t.add_elementwise("q_ln", (b * hw * pp) as u64);
        t.add_elementwise("text_ln", (b * l * cfg.embed_dim) as u64);
        t.add_macs("w_k", linear_macs(b * l, cfg.embed_dim, pp));
        t.add_macs("w_v", linear_macs(b * l, cfg.embed_dim, pp));
    }

    let scale = 1.0 / (dk as f64).sqrt();
    let mut attn = Tensor::zeros(vec![b, heads, hw, l]);
    let mut heads_concat = Tensor::zeros(vec![b, hw, pp]);
    for hi in 0..heads {
        let qi = ops::slice_lastdim(&q, hi * dk, dk);
        let ki = ops::slice_lastdim(&k, hi * dk, dk);
        let vi = ops::slice_lastdim(&v, hi * dk, dk);
        let scores = ops::bmm_nt(&qi, &ki)?.scale(scale);
        let ai = ops::softmax_lastdim(&scores);
        let head = ops::bmm(&ai, &vi)?;
        // pack attention weights and the head output
        for bi in 0..b {
            for qi_ in 0..hw {
                for li in 0..l {
                    attn.data_mut()[((bi * heads + hi) * hw + qi_) * l + li] =
                        ai.data()[(bi * hw + qi_) * l + li];
                }
            }
        }
        ops::accumulate_lastdim_slice(&mut heads_concat, hi * dk, &head);
        if let Some(t) = tally.as_deref_mut() {
            t.add_macs("attn_scores", bmm_macs(b, hw, dk, l));
            t.add_elementwise("attn_scores", (b * hw * l) as u64); // 1/sqrt(dk) scale
            t.add_elementwise("attn_softmax", (b * hw * l) as u64);
            t.add_macs("attn_mix", bmm_macs(b, hw, l, dk));
        }
    }
    let attn_out = match (&p.attn_out_w, &p.attn_out_b) {
        (Some(w_o), Some(b_o)) => {
            if let Some(t) = tally.as_deref_mut() {
                t.add_macs("attn_out_proj", linear_macs(b * hw, pp, pp));
            }
            ops::linear(&heads_concat, w_o, Some(b_o))?
        }
        _ => heads_concat.clone(),
    };
    let ctx_map = seq_to_nchw(&attn_out, h, w);
    Ok(AttnStage {
        q_pre_ln,
        q,
        text_ln,
        k,
        v,
        attn,
        heads_concat,
        ctx_map,
    })
}

struct GateStage {
    pre3: Option<Tensor>,
    act: Option<Tensor>,
    g: Tensor,
}

fn stage_gate(
    f_img: &Tensor,
    p: &CageParams,
    cfg: &CageConfig,
    mut tally: Option<&mut CostTally>,
) -> Result<GateStage> {
    let (b, h, w) = (f_img.shape()[0], f_img.shape()[2], f_img.shape()[3]);
    if !cfg.gate_enabled {
        return Ok(GateStage {
            pre3: None,
            act: None,
            g: Tensor::full(vec![b, 1, h, w], 1.0),
        });
    }
    let (w3, b3, w1, b1) = match (&p.gate_conv3_w, &p.gate_conv3_b, &p.gate_conv1_w, &p.gate_conv1_b)
    {
        (Some(a), Some(bb), Some(c), Some(d)) => (a, bb, c, d),
        _ => return Err(Error::Config("gate enabled but gate params missing".into())),
    };
    let pre3 = ops::conv3x3(f_img, w3, b3)?;
    let act = ops::activation(&pre3, Activation::Gelu);
    let logit = ops::conv1x1(&act, w1, b1)?;
    let g = ops::activation(&logit, Activation::Sigmoid);
    if let Some(t) = tally.as_deref_mut() {
        t.add_macs("gate_conv3", conv3x3_macs(b, cfg.c_in, cfg.c_in, h, w));
        t.add_elementwise("gate_gelu", (b * cfg.c_in * h * w) as u64);
        t.add_macs("gate_conv1", conv1x1_macs(b, cfg.c_in, 1, h, w));
        t.add_elementwise("gate_sigmoid", (b * h * w) as u64);
    }
    Ok(GateStage {
        pre3: Some(pre3),
        act: Some(act),
        g,
    })
}

struct RefineStage {
    ctx_proj_out: Tensor,
    dw1_out: Tensor,
    pw1_out: Tensor,
    u1: Tensor,
    dw2_out: Tensor,
    pw2_out: Tensor,
    u2: Tensor,
    ctx_ref: Tensor,
}

fn stage_refine(
    ctx_map: &Tensor,
    g: &Tensor,
    p: &CageParams,
    cfg: &CageConfig,
    mut tally: Option<&mut CostTally>,
) -> Result<RefineStage> {
    let (b, h, w) = (ctx_map.shape()[0], ctx_map.shape()[2], ctx_map.shape()[3]);
    let ctx = cfg.ctx_channels;
    let ctx_proj_out = ops::conv1x1(ctx_map, &p.ctx_proj_w, &p.ctx_proj_b)?;
    // two depthwise-separable units: dwconv3x3 -> conv1x1 -> GELU
    let dw1_out = ops::dwconv3x3(&ctx_proj_out, &p.dw1_w, &p.dw1_b)?;
    let pw1_out = ops::conv1x1(&dw1_out, &p.pw1_w, &p.pw1_b)?;
    let u1 = ops::activation(&pw1_out, Activation::Gelu);
    let dw2_out = ops::dwconv3x3(&u1, &p.dw2_w, &p.dw2_b)?;
    let pw2_out = ops::conv1x1(&dw2_out, &p.pw2_w, &p.pw2_b)?;
    let u2 = ops::activation(&pw2_out, Activation::Gelu);
    let ctx_ref = ops::mul_gate(&u2, g)?;
    if let Some(t) = tally.as_deref_mut() {
        t.add_macs("ctx_proj", conv1x1_macs(b, cfg.proj_dim, ctx, h, w));
        t.add_macs("dw1", dwconv3x3_macs(b, ctx, h, w));
        t.add_macs("pw1", conv1x1_macs(b, ctx, ctx, h, w));
        t.add_elementwise("gelu1", (b * ctx * h * w) as u64);
        t.add_macs("dw2", dwconv3x3_macs(b, ctx, h, w));
        t.add_macs("pw2", conv1x1_macs(b, ctx, ctx, h, w));
        t.add_elementwise("gelu2", (b * ctx * h * w) as u64);
        t.add_elementwise("gate_apply", (b * ctx * h * w) as u64);
    }
    Ok(RefineStage {
        ctx_proj_out,
        dw1_out,
        pw1_out,
        u1,
        dw2_out,
        pw2_out,
        u2,
        ctx_ref,
    })
}

struct MergeStage {
    concat: Tensor,
    f_pre_film: Tensor,
    f_pool: Tensor,
    film_h_pre: Tensor,
    film_h: Tensor,
    gamma: Tensor,
    beta: Tensor,
    f_modulated: Tensor,
}

fn stage_merge_film(
    f_img: &Tensor,
    ctx_ref: &Tensor,
    f_text: &Tensor,
    p: &CageParams,
    cfg: &CageConfig,
    mut tally: Option<&mut CostTally>,
) -> Result<MergeStage> {
    let (b, h, w) = (f_img.shape()[0], f_img.shape()[2], f_img.shape()[3]);
    let l = f_text.shape()[1];
    let concat = ops::concat_channels(f_img, ctx_ref)?;
    let f_pre_film = ops::conv1x1(&concat, &p.merge_w, &p.merge_b)?;
    // sentence-level pooling is the arithmetic mean over the token axis
    let f_pool = ops::reduce_mean(f_text, 1)?;
    let film_h_pre = ops::linear(&f_pool, &p.film_w1, Some(&p.film_b1))?;
    let film_h = ops::activation(&film_h_pre, Activation::Gelu);
    let film_out = ops::linear(&film_h, &p.film_w2, Some(&p.film_b2))?;
    let gamma = ops::slice_lastdim(&film_out, 0, cfg.c_out);
    let beta = ops::slice_lastdim(&film_out, cfg.c_out, cfg.c_out);
    let f_modulated = ops::film(&f_pre_film, &gamma, &beta)?;
    if let Some(t) = tally.as_deref_mut() {
        t.add_macs(
            "merge",
            conv1x1_macs(b, cfg.c_in + cfg.ctx_channels, cfg.c_out, h, w),
        );
        t.add_elementwise("film_pool", (b * l * cfg.embed_dim) as u64);
        t.add_macs("film_fc1", linear_macs(b, cfg.embed_dim, cfg.film_hidden));
        t.add_elementwise("film_gelu", (b * cfg.film_hidden) as u64);
        t.add_macs("film_fc2", linear_macs(b, cfg.film_hidden, 2 * cfg.c_out));
        t.add_elementwise("film_apply", 2 * (b * cfg.c_out * h * w) as u64);
    }
    Ok(MergeStage {
        concat,
        f_pre_film,
        f_pool,
        film_h_pre,
        film_h,
        gamma,
        beta,
        f_modulated,
    })
}

/// Spatial-semantic context map from multi-head cross-attention.
/// Returns `(ctx_map, attention weights [B, h, HW, L])`.
pub fn cross_attention_context(
    f_img: &Tensor,
    f_text: &Tensor,
    p: &CageParams,
    cfg: &CageConfig,
) -> Result<(Tensor, Tensor)> {
    check_inputs(f_img, f_text, cfg)?;
    let s = stage_attention(f_img, f_text, p, cfg, None)?;
    Ok((s.ctx_map, s.attn))
}

/// Per-pixel occlusion probability map; the constant-1 map when disabled.
pub fn occlusion_gate(f_img: &Tensor, p: &CageParams, cfg: &CageConfig) -> Result<Tensor> {
    Ok(stage_gate(f_img, p, cfg, None)?.g)
}

/// Gate-modulated depthwise refinement of the context map.
pub fn refine_context(
    ctx_map: &Tensor,
    g: &Tensor,
    p: &CageParams,
    cfg: &CageConfig,
) -> Result<Tensor> {
    Ok(stage_refine(ctx_map, g, p, cfg, None)?.ctx_ref)
}

/// Concat-merge plus FiLM modulation. Returns `(F_modulated, gamma, beta)`.
pub fn merge_and_film(
    f_img: &Tensor,
    ctx_ref: &Tensor,
    f_text: &Tensor,
    p: &CageParams,
    cfg: &CageConfig,
) -> Result<(Tensor, Tensor, Tensor)> {
    let s = stage_merge_film(f_img, ctx_ref, f_text, p, cfg, None)?;
    Ok((s.f_modulated, s.gamma, s.beta))
}

/// Full block forward. Params stay immutable; a train-mode call returns the
/// updated batch-norm running statistics for the caller to apply.
pub fn forward(
    f_img: &Tensor,
    f_text: &Tensor,
    p: &CageParams,
    cfg: &CageConfig,
    mode: BnMode,
) -> Result<(Tensor, CageActivations, Option<RunningStats>)> {
    forward_inner(f_img, f_text, p, cfg, mode, None)
}

/// Forward that additionally tallies multiply-accumulate and elementwise op
/// counts per layer, the oracle for the closed-form cost model.
pub fn forward_instrumented(
    f_img: &Tensor,
    f_text: &Tensor,
    p: &CageParams,
    cfg: &CageConfig,
    mode: BnMode,
    tally: &mut CostTally,
) -> Result<(Tensor, CageActivations, Option<RunningStats>)> {
    forward_inner(f_img, f_text, p, cfg, mode, Some(tally))
}

fn forward_inner(
    f_img: &Tensor,
    f_text: &Tensor,
    p: &CageParams,
    cfg: &CageConfig,
    mode: BnMode,
    mut tally: Option<&mut CostTally>,
) -> Result<(Tensor, CageActivations, Option<RunningStats>)> {
    cfg.validate()?;
    check_inputs(f_img, f_text, cfg)?;
    let (b, h, w) = (f_img.shape()[0], f_img.shape()[2], f_img.shape()[3]);

    let attn = stage_attention(f_img, f_text, p, cfg, tally.as_deref_mut())?;
    let gate = stage_gate(f_img, p, cfg, tally.as_deref_mut())?;
    let refine = stage_refine(&attn.ctx_map, &gate.g, p, cfg, tally.as_deref_mut())?;
    let merge = stage_merge_film(f_img, &refine.ctx_ref, f_text, p, cfg, tally.as_deref_mut())?;

    let f_res = match cfg.residual_kind {
        ResidualKind::Identity => f_img.clone(),
        ResidualKind::Projected => {
            let (rw, rb) = match (&p.res_w, &p.res_b) {
                (Some(rw), Some(rb)) => (rw, rb),
                _ => return Err(Error::Config("projected residual params missing".into())),
            };
            if let Some(t) = tally.as_deref_mut() {
                t.add_macs("residual", conv1x1_macs(b, cfg.c_in, cfg.c_out, h, w));
            }
            ops::conv1x1(f_img, rw, rb)?
        }
    };
    let (bn_out, bn_cache, running) = ops::batch_norm(
        &merge.f_modulated,
        &p.bn_gain,
        &p.bn_shift,
        &p.bn_running_mean,
        &p.bn_running_var,
        mode,
        cfg.bn_eps,
        cfg.bn_momentum,
    )?;
    if let Some(t) = tally.as_deref_mut() {
        t.add_elementwise("bn", (b * cfg.c_out * h * w) as u64);
        t.add_elementwise("residual_add", (b * cfg.c_out * h * w) as u64);
    }
    let f_out = ops::add(&f_res, &bn_out)?;
    if !f_out.all_finite() {
        return Err(Error::NonFinite { op: "cage_forward" });
    }

    let acts = CageActivations {
        q: attn.q,
        k: attn.k,
        v: attn.v,
        attn: attn.attn,
        ctx_map: attn.ctx_map,
        gate: gate.g,
        ctx_ref: refine.ctx_ref,
        f_pre_film: merge.f_pre_film,
        gamma: merge.gamma,
        beta: merge.beta,
        f_modulated: merge.f_modulated,
        f_res,
        f_out: f_out.clone(),
        mode,
        cfg: cfg.clone(),
        f_img: f_img.clone(),
        f_text: f_text.clone(),
        params_checksum: params_checksum(p),
        q_pre_ln: attn.q_pre_ln,
        text_ln: attn.text_ln,
        heads_concat: attn.heads_concat,
        gate_pre3: gate.pre3,
        gate_act: gate.act,
        ctx_proj_out: refine.ctx_proj_out,
        dw1_out: refine.dw1_out,
        pw1_out: refine.pw1_out,
        u1: refine.u1,
        dw2_out: refine.dw2_out,
        pw2_out: refine.pw2_out,
        u2: refine.u2,
        concat: merge.concat,
        f_pool: merge.f_pool,
        film_h_pre: merge.film_h_pre,
        film_h: merge.film_h,
        bn_cache,
    };
    Ok((f_out, acts, running))
}
