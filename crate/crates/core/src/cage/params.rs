//! Learnable weights of one CAGE block.

use crate::cage::config::{CageConfig, ResidualKind};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// All weights and buffers of one block. Shapes are a pure function of
/// [`CageConfig`]; `shape_audit` asserts that.
#[derive(Debug, Clone, PartialEq)]
pub struct CageParams {
    // cross-attention
    pub q_proj_w: Tensor, // [P, Cin]
    pub q_proj_b: Tensor, // [P]
    pub q_ln_gain: Tensor,
    pub q_ln_shift: Tensor,
    pub text_ln_gain: Tensor,
    pub text_ln_shift: Tensor,
    pub w_k: Tensor, // [D, P], no bias
    pub w_v: Tensor, // [D, P], no bias
    pub attn_out_w: Option<Tensor>, // [P, P]
    pub attn_out_b: Option<Tensor>, // [P]
    // occlusion gate
    pub gate_conv3_w: Option<Tensor>, // [Cin, Cin, 3, 3]
    pub gate_conv3_b: Option<Tensor>,
    pub gate_conv1_w: Option<Tensor>, // [1, Cin]
    pub gate_conv1_b: Option<Tensor>,
    // context refinement
    pub ctx_proj_w: Tensor, // [ctx, P]
    pub ctx_proj_b: Tensor,
    pub dw1_w: Tensor, // [ctx, 3, 3]
    pub dw1_b: Tensor,
    pub pw1_w: Tensor, // [ctx, ctx]
    pub pw1_b: Tensor,
    pub dw2_w: Tensor,
    pub dw2_b: Tensor,
    pub pw2_w: Tensor,
    pub pw2_b: Tensor,
    // merge + FiLM
    pub merge_w: Tensor, // [c_out, Cin + ctx]
    pub merge_b: Tensor,
    pub film_w1: Tensor, // [D, hidden]
    pub film_b1: Tensor,
    pub film_w2: Tensor, // [hidden, 2*c_out], zero-initialized
    pub film_b2: Tensor,
    // residual + output norm
    pub res_w: Option<Tensor>, // [c_out, Cin]
    pub res_b: Option<Tensor>,
    pub bn_gain: Tensor, // zero-initialized: block starts as the residual map
    pub bn_shift: Tensor,
    pub bn_running_mean: Tensor,
    pub bn_running_var: Tensor,
}

fn uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize) -> Tensor {
    let limit = 1.0 / (fan_in as f64).sqrt();
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-limit..limit)).collect()).unwrap()
}

/// Fan-in-scaled uniform initialization from a single 64-bit seed.
///
/// The batch-norm gain and the final FiLM layer are zero-initialized so a
/// fresh block acts as the residual map in eval mode.
pub fn init_params(cfg: &CageConfig, seed: u64) -> Result<CageParams> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (cin, cout, d, p, ctx, hid) = (
        cfg.c_in,
        cfg.c_out,
        cfg.embed_dim,
        cfg.proj_dim,
        cfg.ctx_channels,
        cfg.film_hidden,
    );
    Ok(CageParams {
        q_proj_w: uniform(&mut rng, vec![p, cin], cin),
        q_proj_b: Tensor::zeros(vec![p]),
        q_ln_gain: Tensor::full(vec![p], 1.0),
        q_ln_shift: Tensor::zeros(vec![p]),
        text_ln_gain: Tensor::full(vec![d], 1.0),
        text_ln_shift: Tensor::zeros(vec![d]),
        w_k: uniform(&mut rng, vec![d, p], d),
        w_v: uniform(&mut rng, vec![d, p], d),
        attn_out_w: cfg
            .attn_out_proj
            .then(|| uniform(&mut rng, vec![p, p], p)),
        attn_out_b: cfg.attn_out_proj.then(|| Tensor::zeros(vec![p])),
        gate_conv3_w: cfg
            .gate_enabled
            .then(|| uniform(&mut rng, vec![cin, cin, 3, 3], cin * 9)),
        gate_conv3_b: cfg.gate_enabled.then(|| Tensor::zeros(vec![cin])),
        gate_conv1_w: cfg
            .gate_enabled
            .then(|| uniform(&mut rng, vec![1, cin], cin)),
        gate_conv1_b: cfg.gate_enabled.then(|| Tensor::zeros(vec![1])),
        ctx_proj_w: uniform(&mut rng, vec![ctx, p], p),
        ctx_proj_b: Tensor::zeros(vec![ctx]),
        dw1_w: uniform(&mut rng, vec![ctx, 3, 3], 9),
        dw1_b: Tensor::zeros(vec![ctx]),
        pw1_w: uniform(&mut rng, vec![ctx, ctx], ctx),
        pw1_b: Tensor::zeros(vec![ctx]),
        dw2_w: uniform(&mut rng, vec![ctx, 3, 3], 9),
        dw2_b: Tensor::zeros(vec![ctx]),
        pw2_w: uniform(&mut rng, vec![ctx, ctx], ctx),
        pw2_b: Tensor::zeros(vec![ctx]),
        merge_w: uniform(&mut rng, vec![cout, cin + ctx], cin + ctx),
        merge_b: Tensor::zeros(vec![cout]),
        film_w1: uniform(&mut rng, vec![d, hid], d),
        film_b1: Tensor::zeros(vec![hid]),
        film_w2: Tensor::zeros(vec![hid, 2 * cout]),
        film_b2: Tensor::zeros(vec![2 * cout]),
        res_w: matches!(cfg.residual_kind, ResidualKind::Projected)
            .then(|| uniform(&mut rng, vec![cout, cin], cin)),
        res_b: matches!(cfg.residual_kind, ResidualKind::Projected)
            .then(|| Tensor::zeros(vec![cout])),
        bn_gain: Tensor::zeros(vec![cout]),
        bn_shift: Tensor::zeros(vec![cout]),
        bn_running_mean: Tensor::zeros(vec![cout]),
        bn_running_var: Tensor::full(vec![cout], 1.0),
    })
}

impl CageParams {
    /// Learnable tensors in a fixed order (excludes running statistics).
    pub fn learnable(&self) -> Vec<(&'static str, &Tensor)> {
        let mut v: Vec<(&'static str, &Tensor)> = vec![
            ("q_proj_w", &self.q_proj_w),
            ("q_proj_b", &self.q_proj_b),
            ("q_ln_gain", &self.q_ln_gain),
            ("q_ln_shift", &self.q_ln_shift),
            ("text_ln_gain", &self.text_ln_gain),
            ("text_ln_shift", &self.text_ln_shift),
            ("w_k", &self.w_k),
            ("w_v", &self.w_v),
        ];
        if let (Some(w), Some(b)) = (&self.attn_out_w, &self.attn_out_b) {
            v.push(("attn_out_w", w));
            v.push(("attn_out_b", b));
        }
        if let (Some(w3), Some(b3), Some(w1), Some(b1)) = (
            &self.gate_conv3_w,
            &self.gate_conv3_b,
            &self.gate_conv1_w,
            &self.gate_conv1_b,
        ) {
            v.push(("gate_conv3_w", w3));
            v.push(("gate_conv3_b", b3));
            v.push(("gate_conv1_w", w1));
            v.push(("gate_conv1_b", b1));
        }
        v.extend([
            ("ctx_proj_w", &self.ctx_proj_w),
            ("ctx_proj_b", &self.ctx_proj_b),
            ("dw1_w", &self.dw1_w),
            ("dw1_b", &self.dw1_b),
            ("pw1_w", &self.pw1_w),
            ("pw1_b", &self.pw1_b),
            ("dw2_w", &self.dw2_w),
            ("dw2_b", &self.dw2_b),
            ("pw2_w", &self.pw2_w),
            ("pw2_b", &self.pw2_b),
            ("merge_w", &self.merge_w),
            ("merge_b", &self.merge_b),
            ("film_w1", &self.film_w1),
            ("film_b1", &self.film_b1),
            ("film_w2", &self.film_w2),
            ("film_b2", &self.film_b2),
        ]);
        if let (Some(w), Some(b)) = (&self.res_w, &self.res_b) {
            v.push(("res_w", w));
            v.push(("res_b", b));
        }
        v.push(("bn_gain", &self.bn_gain));
        v.push(("bn_shift", &self.bn_shift));
        v
    }

    /// Every tensor including batch-norm running statistics, for checkpoints.
    pub fn all_tensors(&self) -> Vec<(&'static str, &Tensor)> {
        let mut v = self.learnable();
        v.push(("bn_running_mean", &self.bn_running_mean));
        v.push(("bn_running_var", &self.bn_running_var));
        v
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        match name {
            "q_proj_w" => Some(&mut self.q_proj_w),
            "q_proj_b" => Some(&mut self.q_proj_b),
            "q_ln_gain" => Some(&mut self.q_ln_gain),
            "q_ln_shift" => Some(&mut self.q_ln_shift),
            "text_ln_gain" => Some(&mut self.text_ln_gain),
            "text_ln_shift" => Some(&mut self.text_ln_shift),
            "w_k" => Some(&mut self.w_k),
            "w_v" => Some(&mut self.w_v),
            "attn_out_w" => self.attn_out_w.as_mut(),
            "attn_out_b" => self.attn_out_b.as_mut(),
            "gate_conv3_w" => self.gate_conv3_w.as_mut(),
            "gate_conv3_b" => self.gate_conv3_b.as_mut(),
            "gate_conv1_w" => self.gate_conv1_w.as_mut(),
            "gate_conv1_b" => self.gate_conv1_b.as_mut(),
            "ctx_proj_w" => Some(&mut self.ctx_proj_w),
            "ctx_proj_b" => Some(&mut self.ctx_proj_b),
            "dw1_w" => Some(&mut self.dw1_w),
            "dw1_b" => Some(&mut self.dw1_b),
            "pw1_w" => Some(&mut self.pw1_w),
            "pw1_b" => Some(&mut self.pw1_b),
            "dw2_w" => Some(&mut self.dw2_w),
            "dw2_b" => Some(&mut self.dw2_b),
            "pw2_w" => Some(&mut self.pw2_w),
            "pw2_b" => Some(&mut self.pw2_b),
            "merge_w" => Some(&mut self.merge_w),
            "merge_b" => Some(&mut self.merge_b),
            "film_w1" => Some(&mut self.film_w1),
            "film_b1" => Some(&mut self.film_b1),
            "film_w2" => Some(&mut self.film_w2),
            "film_b2" => Some(&mut self.film_b2),
            "res_w" => self.res_w.as_mut(),
            "res_b" => self.res_b.as_mut(),
            "bn_gain" => Some(&mut self.bn_gain),
            "bn_shift" => Some(&mut self.bn_shift),
            "bn_running_mean" => Some(&mut self.bn_running_mean),
            "bn_running_var" => Some(&mut self.bn_running_var),
            _ => None,
        }
    }

    /// Total learnable parameter elements actually allocated.
    pub fn learnable_element_count(&self) -> u64 {
        self.learnable().iter().map(|(_, t)| t.len() as u64).sum()
    }

    /// Assert every tensor shape against its closed-form expectation.
    pub fn shape_audit(&self, cfg: &CageConfig) -> Result<()> {
        for (name, tensor) in self.all_tensors() {
            let expected = expected_shape(cfg, name).ok_or_else(|| {
                Error::Config(format!("shape audit: unexpected tensor {name}"))
            })?;
            if tensor.shape() != expected.as_slice() {
                return Err(Error::Dimension {
                    op: "shape_audit",
                    detail: format!("{name}: {:?} != {:?}", tensor.shape(), expected),
                });
            }
        }
        Ok(())
    }
}

/// Closed-form shape of each named parameter, the audit's oracle.
pub fn expected_shape(cfg: &CageConfig, name: &str) -> Option<Vec<usize>> {
    let (cin, cout, d, p, ctx, hid) = (
        cfg.c_in,
        cfg.c_out,
        cfg.embed_dim,
        cfg.proj_dim,
        cfg.ctx_channels,
        cfg.film_hidden,
    );
    Some(match name {
        "q_proj_w" => vec![p, cin],
        "q_proj_b" | "q_ln_gain" | "q_ln_shift" => vec![p],
        "text_ln_gain" | "text_ln_shift" => vec![d],
        "w_k" | "w_v" => vec![d, p],
        "attn_out_w" => vec![p, p],
        "attn_out_b" => vec![p],
        "gate_conv3_w" => vec![cin, cin, 3, 3],
        "gate_conv3_b" => vec![cin],
        "gate_conv1_w" => vec![1, cin],
        "gate_conv1_b" => vec![1],
        "ctx_proj_w" => vec![ctx, p],
        "ctx_proj_b" => vec![ctx],
        "dw1_w" | "dw2_w" => vec![ctx, 3, 3],
        "dw1_b" | "dw2_b" | "pw1_b" | "pw2_b" => vec![ctx],
        "pw1_w" | "pw2_w" => vec![ctx, ctx],
        "merge_w" => vec![cout, cin + ctx],
        "merge_b" => vec![cout],
        "film_w1" => vec![d, hid],
        "film_b1" => vec![hid],
        "film_w2" => vec![hid, 2 * cout],
        "film_b2" => vec![2 * cout],
        "res_w" => vec![cout, cin],
        "res_b" => vec![cout],
        "bn_gain" | "bn_shift" | "bn_running_mean" | "bn_running_var" => vec![cout],
        _ => return None,
    })
}
