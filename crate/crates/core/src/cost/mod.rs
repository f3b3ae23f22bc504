//! Closed-form parameter and FLOP accounting for a fusion block and a
//! reference CSP-style baseline.
//!
//! Convention, stated in every report: FLOPs = 2 * MACs; nonlinearities and
//! other elementwise ops are counted at 1 FLOP per element application and
//! reported separately. Padded 3x3 convolutions count only the kernel taps
//! actually applied (border rows see a truncated kernel).

use crate::cage::config::{CageConfig, ResidualKind};
use crate::error::Result;
use serde::{Deserialize, Serialize};

pub const CONVENTION: &str =
    "FLOPs = 2*MACs; elementwise ops at 1 FLOP/element, reported separately; \
     padded 3x3 convs count only applied taps";

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
pub struct InputSpec {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub tokens: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct CostRow {
    pub name: String,
    pub params: u64,
    pub macs: u64,
    pub elementwise: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CostReport {
    pub convention: String,
    pub input: Option<InputSpec>,
    pub rows: Vec<CostRow>,
    pub total_params: u64,
    pub total_macs: u64,
    pub total_elementwise: u64,
}

impl CostReport {
    fn from_rows(rows: Vec<CostRow>, input: Option<InputSpec>) -> Self {
        let total_params = rows.iter().map(|r| r.params).sum();
        let total_macs = rows.iter().map(|r| r.macs).sum();
        let total_elementwise = rows.iter().map(|r| r.elementwise).sum();
        CostReport {
            convention: CONVENTION.to_string(),
            input,
            rows,
            total_params,
            total_macs,
            total_elementwise,
        }
    }

    /// Dense FLOPs under the 2*MACs convention (elementwise excluded).
    pub fn flops(&self) -> u64 {
        2 * self.total_macs
    }

    pub fn gflops(&self) -> f64 {
        self.flops() as f64 / 1e9
    }

    /// Aligned text table for terminal output.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("# {}\n", self.convention));
        if let Some(i) = &self.input {
            out.push_str(&format!(
                "# input: B={} H={} W={} L={}\n",
                i.batch, i.height, i.width, i.tokens
            ));
        }
        out.push_str(&format!(
            "{:<16} {:>12} {:>16} {:>14}\n",
            "layer", "params", "macs", "elementwise"
        ));
        for r in &self.rows {
            out.push_str(&format!(
                "{:<16} {:>12} {:>16} {:>14}\n",
                r.name, r.params, r.macs, r.elementwise
            ));
        }
        out.push_str(&format!(
            "{:<16} {:>12} {:>16} {:>14}\n",
            "total", self.total_params, self.total_macs, self.total_elementwise
        ));
        out
    }

    /// CSV rows for spreadsheet diffing.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,params,macs,elementwise\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{}\n", r.name, r.params, r.macs, r.elementwise));
        }
        out.push_str(&format!(
            "total,{},{},{}\n",
            self.total_params, self.total_macs, self.total_elementwise
        ));
        out
    }
}

fn taps3(e: usize) -> u64 {
    if e >= 2 {
        (3 * e - 2) as u64
    } else {
        1
    }
}

/// Per-layer closed-form rows of one fusion block. With `input == None`
/// only parameter counts are filled.
fn cage_rows(cfg: &CageConfig, input: Option<InputSpec>) -> Vec<CostRow> {
    let (cin, cout, d, p, ctx, hid) = (
        cfg.c_in as u64,
        cfg.c_out as u64,
        cfg.embed_dim as u64,
        cfg.proj_dim as u64,
        cfg.ctx_channels as u64,
        cfg.film_hidden as u64,
    );
    let heads = cfg.heads as u64;
    let (b, hw, l, th, tw) = match input {
        Some(i) => (
            i.batch as u64,
            (i.height * i.width) as u64,
            i.tokens as u64,
            taps3(i.height),
            taps3(i.width),
        ),
        None => (0, 0, 0, 0, 0),
    };
    let row = |name: &str, params: u64, macs: u64, elementwise: u64| CostRow {
        name: name.to_string(),
        params,
        macs,
        elementwise,
    };
    let mut rows = vec![
        row("q_proj", p * cin + p, b * hw * cin * p, 0),
        row("q_ln", 2 * p, 0, b * hw * p),
        row("text_ln", 2 * d, 0, b * l * d),
        row("w_k", d * p, b * l * d * p, 0),
        row("w_v", d * p, b * l * d * p, 0),
        // score matmul plus the 1/sqrt(d_k) scale per score element
        row("attn_scores", 0, b * hw * l * p, b * heads * hw * l),
        row("attn_softmax", 0, 0, b * heads * hw * l),
        row("attn_mix", 0, b * hw * l * p, 0),
    ];
    if cfg.attn_out_proj {
        rows.push(row("attn_out_proj", p * p + p, b * hw * p * p, 0));
    }
    if cfg.gate_enabled {
        rows.push(row("gate_conv3", cin * cin * 9 + cin, b * cin * cin * th * tw, 0));
        rows.push(row("gate_gelu", 0, 0, b * cin * hw));
        rows.push(row("gate_conv1", cin + 1, b * hw * cin, 0));
        rows.push(row("gate_sigmoid", 0, 0, b * hw));
    }
    rows.extend([
        row("ctx_proj", ctx * p + ctx, b * hw * p * ctx, 0),
        row("dw1", ctx * 9 + ctx, b * ctx * th * tw, 0),
        row("pw1", ctx * ctx + ctx, b * hw * ctx * ctx, 0),
        row("gelu1", 0, 0, b * ctx * hw),
        row("dw2", ctx * 9 + ctx, b * ctx * th * tw, 0),
        row("pw2", ctx * ctx + ctx, b * hw * ctx * ctx, 0),
        row("gelu2", 0, 0, b * ctx * hw),
        row("gate_apply", 0, 0, b * ctx * hw),
        row("merge", cout * (cin + ctx) + cout, b * hw * (cin + ctx) * cout, 0),
        row("film_pool", 0, 0, b * l * d),
        row("film_fc1", d * hid + hid, b * d * hid, 0),
        row("film_gelu", 0, 0, b * hid),
        row("film_fc2", hid * 2 * cout + 2 * cout, b * hid * 2 * cout, 0),
        row("film_apply", 0, 0, 2 * b * cout * hw),
    ]);
    if cfg.residual_kind == ResidualKind::Projected {
        rows.push(row("residual", cout * cin + cout, b * hw * cin * cout, 0));
    }
    rows.push(row("bn", 2 * cout, 0, b * cout * hw));
    rows.push(row("residual_add", 0, 0, b * cout * hw));
    rows
}

/// Closed-form parameter counts; audited against allocated tensors.
pub fn count_params(cfg: &CageConfig) -> Result<CostReport> {
    cfg.validate()?;
    Ok(CostReport::from_rows(cage_rows(cfg, None), None))
}

/// Closed-form MAC/elementwise counts for one forward at the given extents.
pub fn count_flops(
    cfg: &CageConfig,
    batch: usize,
    height: usize,
    width: usize,
    tokens: usize,
) -> Result<CostReport> {
    cfg.validate()?;
    let input = InputSpec { batch, height, width, tokens };
    Ok(CostReport::from_rows(cage_rows(cfg, Some(input)), Some(input)))
}

// ---------------------------------------------------------------------------
// reference baseline

/// A CSP-style text-vision fusion block with max-sigmoid text attention,
/// the documented stand-in for the layer this block replaces. Its exact
/// internal structure is reconstructed from the upstream architecture, so
/// comparisons against it are directional; reports label it
/// "reference baseline".
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineSpec {
    /// Number of CSP bottleneck units (two 3x3 convs each).
    pub bottlenecks: usize,
    /// Hidden width ratio: hidden = round(c_out * expansion).
    pub expansion: f64,
    /// Embedding width of the max-sigmoid text attention.
    pub embed_channels: usize,
    /// Text guide vector depth.
    pub guide_dim: usize,
}

impl BaselineSpec {
    pub fn for_neck_level(c_out: usize, guide_dim: usize) -> Self {
        BaselineSpec {
            bottlenecks: 3,
            expansion: 0.5,
            embed_channels: c_out,
            guide_dim,
        }
    }

    pub fn hidden(&self, c_out: usize) -> usize {
        ((c_out as f64 * self.expansion).round() as usize).max(1)
    }
}

/// Closed-form rows of the reference baseline at one level.
pub fn count_baseline(
    spec: &BaselineSpec,
    c_in: usize,
    c_out: usize,
    input: Option<InputSpec>,
) -> CostReport {
    let c = spec.hidden(c_out) as u64;
    let (cin, cout, ec, d) = (
        c_in as u64,
        c_out as u64,
        spec.embed_channels as u64,
        spec.guide_dim as u64,
    );
    let (b, hw, l, th, tw) = match input {
        Some(i) => (
            i.batch as u64,
            (i.height * i.width) as u64,
            i.tokens as u64,
            taps3(i.height),
            taps3(i.width),
        ),
        None => (0, 0, 0, 0, 0),
    };
    let row = |name: &str, params: u64, macs: u64, elementwise: u64| CostRow {
        name: name.to_string(),
        params,
        macs,
        elementwise,
    };
    let mut rows = vec![row("cv1", cin * 2 * c + 2 * c, b * hw * cin * 2 * c, 0)];
    for i in 0..spec.bottlenecks {
        rows.push(row(
            &format!("bottleneck{i}"),
            2 * (9 * c * c + c),
            2 * b * c * c * th * tw,
            b * c * hw, // shortcut add
        ));
    }
    rows.push(row("attn_embed", c * ec + ec, b * hw * c * ec, 0));
    rows.push(row("attn_guide", d * ec + ec, b * l * d * ec, 0));
    // per-position max-sigmoid similarity against every text token
    rows.push(row("attn_logits", 0, b * hw * l * ec, 2 * b * hw * l));
    rows.push(row("attn_proj", 9 * c * c + c, b * c * c * th * tw, b * c * hw));
    let concat_w = (2 + spec.bottlenecks as u64 + 1) * c;
    rows.push(row("cv2", concat_w * cout + cout, b * hw * concat_w * cout, 0));
    CostReport::from_rows(rows, input)
}

// ---------------------------------------------------------------------------
// comparison

#[derive(Debug, Clone, Serialize)]
pub struct ComparisonReport {
    pub label: String,
    pub cage: CostReport,
    pub baseline: CostReport,
    pub param_delta_pct: f64,
    pub macs_delta_pct: f64,
    /// Published whole-model totals for the detector this block plugs into,
    /// with and without it (L scale): context only, not recomputed here.
    pub reported_whole_model_reference: WholeModelReference,
}

#[derive(Debug, Clone, Serialize)]
pub struct WholeModelReference {
    pub params_m_before: f64,
    pub params_m_after: f64,
    pub gflops_before: f64,
    pub gflops_after: f64,
}

impl Default for WholeModelReference {
    fn default() -> Self {
        WholeModelReference {
            params_m_before: 48.0,
            params_m_after: 34.0,
            gflops_before: 204.5,
            gflops_after: 144.0,
        }
    }
}

fn delta_pct(ours: u64, base: u64) -> f64 {
    if base == 0 {
        return 0.0;
    }
    (ours as f64 - base as f64) / base as f64 * 100.0
}

/// Side-by-side totals with percentage deltas (ours relative to baseline).
pub fn compare_reports(cage: CostReport, baseline: CostReport) -> ComparisonReport {
    ComparisonReport {
        label: "reference baseline".to_string(),
        param_delta_pct: delta_pct(cage.total_params, baseline.total_params),
        macs_delta_pct: delta_pct(cage.total_macs, baseline.total_macs),
        cage,
        baseline,
        reported_whole_model_reference: WholeModelReference::default(),
    }
}

/// Compare one block config against the reference baseline at one level.
pub fn compare_baseline(
    cfg: &CageConfig,
    spec: &BaselineSpec,
    input: Option<InputSpec>,
) -> Result<ComparisonReport> {
    let cage = match input {
        Some(i) => count_flops(cfg, i.batch, i.height, i.width, i.tokens)?,
        None => count_params(cfg)?,
    };
    let baseline = count_baseline(spec, cfg.c_in, cfg.c_out, input);
    Ok(compare_reports(cage, baseline))
}
