//! Exact reverse-mode cotangents through the whole block.

use crate::cage::config::{CageConfig, ResidualKind};
use crate::cage::forward::{nchw_to_seq, params_checksum, seq_to_nchw, CageActivations};
use crate::cage::params::CageParams;
use crate::error::{Error, Result};
use crate::tensor::ops::{self, Activation};
use crate::tensor::Tensor;

/// Cotangents for both inputs and every learnable parameter of the block.
#[derive(Debug, Clone)]
pub struct CageGradients {
    pub d_f_img: Tensor,
    pub d_f_text: Tensor,
    /// One entry per learnable tensor, same names and order as
    /// [`CageParams::learnable`].
    pub params: Vec<(&'static str, Tensor)>,
}

impl CageGradients {
    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|(n, _)| *n == name).map(|(_, t)| t)
    }
}

/// Backward through Eqs of the block given the activations of a matching
/// forward. Fails with a consistency error when the activations were
/// produced by different params or the upstream shape does not match.
pub fn backward(
    upstream: &Tensor,
    acts: &CageActivations,
    p: &CageParams,
    cfg: &CageConfig,
) -> Result<CageGradients> {
    if acts.cfg != *cfg {
        return Err(Error::StaleActivations(
            "config differs from the recorded forward".into(),
        ));
    }
    if upstream.shape() != acts.f_out.shape() {
        return Err(Error::StaleActivations(format!(
            "upstream shape {:?} != forward output shape {:?}",
            upstream.shape(),
            acts.f_out.shape()
        )));
    }
    if params_checksum(p).to_bits() != acts.params_checksum.to_bits() {
        return Err(Error::StaleActivations(
            "params differ from the recorded forward".into(),
        ));
    }

    let f_img = &acts.f_img;
    let f_text = &acts.f_text;
    let (h, w) = (f_img.shape()[2], f_img.shape()[3]);
    let (heads, dk, pp) = (cfg.heads, cfg.head_dim(), cfg.proj_dim);
    let (b, hw) = (f_img.shape()[0], h * w);
    let l = f_text.shape()[1];

    let mut d_f_img = Tensor::zeros(f_img.shape().to_vec());
    let mut d_f_text = Tensor::zeros(f_text.shape().to_vec());

    // output = residual + batch_norm(modulated)
    let (d_f_mod, d_bn_gain, d_bn_shift) =
        ops::batch_norm_backward(&acts.f_modulated, &p.bn_gain, &acts.bn_cache, cfg.bn_eps, upstream);
    let (d_res_w, d_res_b) = match cfg.residual_kind {
        ResidualKind::Identity => {
            accumulate(&mut d_f_img, upstream);
            (None, None)
        }
        ResidualKind::Projected => {
            let rw = p.res_w.as_ref().expect("projected residual params");
            let (dx, dw, db) = ops::conv1x1_backward(f_img, rw, upstream);
            accumulate(&mut d_f_img, &dx);
            (Some(dw), Some(db))
        }
    };

    // FiLM: modulated = (1 + gamma) * pre_film + beta
    let (d_f_pre, d_gamma, d_beta) = ops::film_backward(&acts.f_pre_film, &acts.gamma, &d_f_mod);
    let mut d_film_out = Tensor::zeros(vec![b, 2 * cfg.c_out]);
    ops::accumulate_lastdim_slice(&mut d_film_out, 0, &d_gamma);
    ops::accumulate_lastdim_slice(&mut d_film_out, cfg.c_out, &d_beta);
    let (d_film_h, d_film_w2, d_film_b2) = ops::linear_backward(&acts.film_h, &p.film_w2, &d_film_out);
    let d_film_h_pre = ops::activation_backward(&acts.film_h_pre, Activation::Gelu, &d_film_h);
    let (d_f_pool, d_film_w1, d_film_b1) =
        ops::linear_backward(&acts.f_pool, &p.film_w1, &d_film_h_pre);
    accumulate(&mut d_f_text, &ops::reduce_mean_backward(f_text.shape(), 1, &d_f_pool));

    // merge conv over [image ; gated context]
    let (d_concat, d_merge_w, d_merge_b) = ops::conv1x1_backward(&acts.concat, &p.merge_w, &d_f_pre);
    let (d_img_part, d_ctx_ref) = ops::split_channels(&d_concat, cfg.c_in);
    accumulate(&mut d_f_img, &d_img_part);

    // gate multiplication and the depthwise refinement chain
    let (d_u2, d_gate) = ops::mul_gate_backward(&acts.u2, &acts.gate, &d_ctx_ref);
    let d_pw2_out = ops::activation_backward(&acts.pw2_out, Activation::Gelu, &d_u2);
    let (d_dw2_out, d_pw2_w, d_pw2_b) = ops::conv1x1_backward(&acts.dw2_out, &p.pw2_w, &d_pw2_out);
    let (d_u1, d_dw2_w, d_dw2_b) = ops::dwconv3x3_backward(&acts.u1, &p.dw2_w, &d_dw2_out);
    let d_pw1_out = ops::activation_backward(&acts.pw1_out, Activation::Gelu, &d_u1);
    let (d_dw1_out, d_pw1_w, d_pw1_b) = ops::conv1x1_backward(&acts.dw1_out, &p.pw1_w, &d_pw1_out);
    let (d_ctx_proj_out, d_dw1_w, d_dw1_b) =
        ops::dwconv3x3_backward(&acts.ctx_proj_out, &p.dw1_w, &d_dw1_out);
    let (d_ctx_map, d_ctx_proj_w, d_ctx_proj_b) =
        ops::conv1x1_backward(&acts.ctx_map, &p.ctx_proj_w, &d_ctx_proj_out);

    // gate chain (gradient flows into the image only when the gate exists)
    let mut gate_grads: Option<(Tensor, Tensor, Tensor, Tensor)> = None;
    if cfg.gate_enabled {
        let g1w = p.gate_conv1_w.as_ref().expect("gate params");
        let g3w = p.gate_conv3_w.as_ref().expect("gate params");
        let pre3 = acts.gate_pre3.as_ref().expect("gate cache");
        let gact = acts.gate_act.as_ref().expect("gate cache");
        // sigmoid backward from its output
        let d_logit = Tensor::new(
            d_gate.shape().to_vec(),
            d_gate
                .iter()
                .zip(acts.gate.iter())
                .map(|(&g, &s)| g * s * (1.0 - s))
                .collect(),
        )?;
        let (d_gact, d_g1w, d_g1b) = ops::conv1x1_backward(gact, g1w, &d_logit);
        let d_pre3 = ops::activation_backward(pre3, Activation::Gelu, &d_gact);
        let (dx_gate, d_g3w, d_g3b) = ops::conv3x3_backward(f_img, g3w, &d_pre3);
        accumulate(&mut d_f_img, &dx_gate);
        gate_grads = Some((d_g3w, d_g3b, d_g1w, d_g1b));
    }

    // attention: ctx_map came from seq_to_nchw(attn_out)
    let d_attn_out = nchw_to_seq(&d_ctx_map);
    let (d_heads_concat, d_attn_out_w, d_attn_out_b) = match &p.attn_out_w {
        Some(w_o) => {
            let (dx, dw, db) = ops::linear_backward(&acts.heads_concat, w_o, &d_attn_out);
            (dx, Some(dw), Some(db))
        }
        None => (d_attn_out, None, None),
    };

    let scale = 1.0 / (dk as f64).sqrt();
    let mut d_q = Tensor::zeros(vec![b, hw, pp]);
    let mut d_k = Tensor::zeros(vec![b, l, pp]);
    let mut d_v = Tensor::zeros(vec![b, l, pp]);
    for hi in 0..heads {
        let qi = ops::slice_lastdim(&acts.q, hi * dk, dk);
        let ki = ops::slice_lastdim(&acts.k, hi * dk, dk);
        let vi = ops::slice_lastdim(&acts.v, hi * dk, dk);
        // per-head attention weights out of the packed [B, h, HW, L] block
        let mut ai = Tensor::zeros(vec![b, hw, l]);
        for bi in 0..b {
            for qi_ in 0..hw {
                for li in 0..l {
                    ai.data_mut()[(bi * hw + qi_) * l + li] =
                        acts.attn.data()[((bi * heads + hi) * hw + qi_) * l + li];
                }
            }
        }
        let d_head = ops::slice_lastdim(&d_heads_concat, hi * dk, dk);
        let (d_ai, d_vi) = ops::bmm_backward(&ai, &vi, &d_head);
        let d_scaled_scores = ops::softmax_lastdim_backward(&ai, &d_ai);
        let (d_qi, d_ki) = ops::bmm_nt_backward(&qi, &ki, &d_scaled_scores.scale(scale));
        ops::accumulate_lastdim_slice(&mut d_q, hi * dk, &d_qi);
        ops::accumulate_lastdim_slice(&mut d_k, hi * dk, &d_ki);
        ops::accumulate_lastdim_slice(&mut d_v, hi * dk, &d_vi);
    }

    // queries: LN <- flatten <- conv1x1
    let (d_q_pre, d_q_ln_gain, d_q_ln_shift) =
        ops::layer_norm_backward(&acts.q_pre_ln, &p.q_ln_gain, cfg.ln_eps, &d_q);
    let d_qc = seq_to_nchw(&d_q_pre, h, w);
    let (dx_q, d_q_proj_w, d_q_proj_b) = ops::conv1x1_backward(f_img, &p.q_proj_w, &d_qc);
    accumulate(&mut d_f_img, &dx_q);

    // keys/values: linear <- text LN
    let (d_tln_k, d_w_k, _) = ops::linear_backward(&acts.text_ln, &p.w_k, &d_k);
    let (d_tln_v, d_w_v, _) = ops::linear_backward(&acts.text_ln, &p.w_v, &d_v);
    let d_tln = ops::add(&d_tln_k, &d_tln_v)?;
    let (d_text, d_text_ln_gain, d_text_ln_shift) =
        ops::layer_norm_backward(f_text, &p.text_ln_gain, cfg.ln_eps, &d_tln);
    accumulate(&mut d_f_text, &d_text);

    // assemble in CageParams::learnable order
    let mut params: Vec<(&'static str, Tensor)> = vec![
        ("q_proj_w", d_q_proj_w),
        ("q_proj_b", d_q_proj_b),
        ("q_ln_gain", d_q_ln_gain),
        ("q_ln_shift", d_q_ln_shift),
        ("text_ln_gain", d_text_ln_gain),
        ("text_ln_shift", d_text_ln_shift),
        ("w_k", d_w_k),
        ("w_v", d_w_v),
    ];
    if let (Some(dw), Some(db)) = (d_attn_out_w, d_attn_out_b) {
        params.push(("attn_out_w", dw));
        params.push(("attn_out_b", db));
    }
    if let Some((d_g3w, d_g3b, d_g1w, d_g1b)) = gate_grads {
        params.push(("gate_conv3_w", d_g3w));
        params.push(("gate_conv3_b", d_g3b));
        params.push(("gate_conv1_w", d_g1w));
        params.push(("gate_conv1_b", d_g1b));
    }
    params.extend([
        ("ctx_proj_w", d_ctx_proj_w),
        ("ctx_proj_b", d_ctx_proj_b),
        ("dw1_w", d_dw1_w),
        ("dw1_b", d_dw1_b),
        ("pw1_w", d_pw1_w),
        ("pw1_b", d_pw1_b),
        ("dw2_w", d_dw2_w),
        ("dw2_b", d_dw2_b),
        ("pw2_w", d_pw2_w),
        ("pw2_b", d_pw2_b),
        ("merge_w", d_merge_w),
        ("merge_b", d_merge_b),
        ("film_w1", d_film_w1),
        ("film_b1", d_film_b1),
        ("film_w2", d_film_w2),
        ("film_b2", d_film_b2),
    ]);
    if let (Some(dw), Some(db)) = (d_res_w, d_res_b) {
        params.push(("res_w", dw));
        params.push(("res_b", db));
    }
    params.push(("bn_gain", d_bn_gain));
    params.push(("bn_shift", d_bn_shift));

    Ok(CageGradients {
        d_f_img,
        d_f_text,
        params,
    })
}

fn accumulate(dst: &mut Tensor, src: &Tensor) {
    debug_assert_eq!(dst.shape(), src.shape());
    for (d, s) in dst.data_mut().iter_mut().zip(src.iter()) {
        *d += s;
    }
}
