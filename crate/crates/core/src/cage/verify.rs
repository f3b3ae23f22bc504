//! Full-block gradient verification against central finite differences.

use crate::cage::backward::backward;
use crate::cage::config::CageConfig;
use crate::cage::forward::forward;
use crate::cage::params::{init_params, CageParams};
use crate::error::Result;
use crate::tensor::gradcheck::{grad_check, random_tensor, OpGradPair};
use crate::tensor::ops::BnMode;
use crate::tensor::Tensor;
use rand::rngs::StdRng;
use rand::SeedableRng;

/// Input extents for a verification run.
#[derive(Debug, Clone, Copy)]
pub struct ProbeSpec {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub tokens: usize,
}

impl Default for ProbeSpec {
    fn default() -> Self {
        ProbeSpec {
            batch: 2,
            height: 4,
            width: 4,
            tokens: 3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BlockGradReport {
    /// Worst relative error per checked tensor: `f_img`, `f_text`, then every
    /// learnable parameter in order.
    pub per_group: Vec<(String, f64)>,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl BlockGradReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

fn rebuild(template: &CageParams, inputs: &[Tensor]) -> (Tensor, Tensor, CageParams) {
    let f_img = inputs[0].clone();
    let f_text = inputs[1].clone();
    let mut p = template.clone();
    let names: Vec<&'static str> = template.learnable().iter().map(|(n, _)| *n).collect();
    for (name, t) in names.iter().zip(&inputs[2..]) {
        *p.tensor_mut(name).unwrap() = t.clone();
    }
    (f_img, f_text, p)
}

/// Check the analytic gradients of the whole block (all params and both
/// inputs) against central finite differences of the probe loss.
///
/// `sabotage` flips the sign of one parameter gradient; it exists as a
/// negative control so CI can prove the check actually detects a broken
/// backward.
pub fn full_block_grad_check(
    cfg: &CageConfig,
    probe: ProbeSpec,
    seed: u64,
    tolerance: f64,
    sabotage: bool,
) -> Result<BlockGradReport> {
    cfg.validate()?;
    let mut template = init_params(cfg, seed)?;
    let mut rng = StdRng::seed_from_u64(seed ^ 0x5eed);
    // zero-initialized tensors (BN gain, FiLM output layer) would zero out
    // all upstream gradients and make the check vacuous; randomize them
    for name in ["bn_gain", "bn_shift", "film_w2", "film_b2"] {
        let t = template.tensor_mut(name).unwrap();
        *t = random_tensor(t.shape().to_vec(), &mut rng);
    }
    let template = template;
    let f_img = random_tensor(
        vec![probe.batch, cfg.c_in, probe.height, probe.width],
        &mut rng,
    );
    let f_text = random_tensor(vec![probe.batch, probe.tokens, cfg.embed_dim], &mut rng);

    let mut inputs: Vec<Tensor> = vec![f_img, f_text];
    inputs.extend(template.learnable().iter().map(|(_, t)| (*t).clone()));
    let names: Vec<String> = ["f_img", "f_text"]
        .into_iter()
        .map(String::from)
        .chain(template.learnable().iter().map(|(n, _)| n.to_string()))
        .collect();

    let op = OpGradPair {
        forward: Box::new(|xs: &[Tensor]| {
            let (img, text, p) = rebuild(&template, xs);
            let (out, _, _) = forward(&img, &text, &p, cfg, BnMode::Train)?;
            Ok(out)
        }),
        backward: Box::new(|xs: &[Tensor], cot: &Tensor| {
            let (img, text, p) = rebuild(&template, xs);
            let (_, acts, _) = forward(&img, &text, &p, cfg, BnMode::Train)?;
            let grads = backward(cot, &acts, &p, cfg)?;
            let mut out = vec![grads.d_f_img, grads.d_f_text];
            out.extend(grads.params.into_iter().map(|(_, t)| t));
            if sabotage {
                // flip the sign of the key-projection gradient
                if let Some(t) = out.get_mut(8) {
                    *t = t.scale(-1.0);
                }
            }
            Ok(out)
        }),
    };
    let report = grad_check(&op, &inputs, tolerance, seed)?;
    Ok(BlockGradReport {
        per_group: names.into_iter().zip(report.per_input).collect(),
        max_rel_err: report.max_rel_err,
        tolerance,
    })
}
