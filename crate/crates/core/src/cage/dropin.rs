//! Drop-in contract check: the block must emit exactly the shape of the
//! fusion layer it replaces at each detector neck level.

use crate::cage::config::CageConfig;
use crate::cage::params::init_params;
use crate::cage::forward::forward;
use crate::cost;
use crate::error::Result;
use crate::tensor::gradcheck::random_tensor;
use crate::tensor::ops::BnMode;
use rand::rngs::StdRng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

/// One pyramid level of the neck being replaced.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct NeckLevelSpec {
    pub c_in: usize,
    /// Channels the downstream head expects at this level.
    pub c_out: usize,
    pub height: usize,
    pub width: usize,
}

/// The three default pyramid levels used throughout reports and tests.
pub fn default_neck_levels() -> Vec<NeckLevelSpec> {
    vec![
        NeckLevelSpec { c_in: 128, c_out: 128, height: 80, width: 80 },
        NeckLevelSpec { c_in: 256, c_out: 256, height: 40, width: 40 },
        NeckLevelSpec { c_in: 512, c_out: 512, height: 20, width: 20 },
    ]
}

#[derive(Debug, Clone, Serialize)]
pub struct LevelReport {
    pub level: usize,
    pub spec: NeckLevelSpec,
    pub expected_shape: Vec<usize>,
    pub actual_shape: Vec<usize>,
    pub ok: bool,
    pub failure: Option<String>,
    pub param_count: u64,
    pub gflops: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct DropInReport {
    pub levels: Vec<LevelReport>,
    pub all_ok: bool,
}

/// Run one per-level forward with explicit configs (the negative path: a
/// config whose `c_out` disagrees with the level contract must be reported,
/// naming the level).
pub fn drop_in_check_with(
    cfgs: &[(CageConfig, NeckLevelSpec)],
    tokens: usize,
    seed: u64,
) -> Result<DropInReport> {
    let batch = 1;
    let mut levels = Vec::new();
    for (idx, (cfg, spec)) in cfgs.iter().enumerate() {
        cfg.validate()?;
        let params = init_params(cfg, seed.wrapping_add(idx as u64))?;
        let mut rng = StdRng::seed_from_u64(seed.wrapping_add(idx as u64));
        let f_img = random_tensor(vec![batch, cfg.c_in, spec.height, spec.width], &mut rng);
        let f_text = random_tensor(vec![batch, tokens, cfg.embed_dim], &mut rng);
        let (out, _, _) = forward(&f_img, &f_text, &params, cfg, BnMode::Eval)?;
        let expected = vec![batch, spec.c_out, spec.height, spec.width];
        let ok = out.shape() == expected.as_slice();
        let flops = cost::count_flops(cfg, batch, spec.height, spec.width, tokens)?;
        levels.push(LevelReport {
            level: idx,
            spec: *spec,
            expected_shape: expected.clone(),
            actual_shape: out.shape().to_vec(),
            ok,
            failure: (!ok).then(|| {
                format!(
                    "level {idx}: output shape {:?} violates the replaced layer contract {:?}",
                    out.shape(),
                    expected
                )
            }),
            param_count: cost::count_params(cfg)?.total_params,
            gflops: flops.gflops(),
        });
    }
    let all_ok = levels.iter().all(|l| l.ok);
    Ok(DropInReport { levels, all_ok })
}

/// Contract check over neck levels with default block configs.
pub fn drop_in_check(
    levels: &[NeckLevelSpec],
    embed_dim: usize,
    tokens: usize,
    seed: u64,
) -> Result<DropInReport> {
    let cfgs: Vec<(CageConfig, NeckLevelSpec)> = levels
        .iter()
        .map(|s| (CageConfig::for_neck_level(s.c_in, s.c_out, embed_dim), *s))
        .collect();
    drop_in_check_with(&cfgs, tokens, seed)
}
