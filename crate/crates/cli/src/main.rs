//! `cage`: CI-oriented command line for the fusion block and its pipeline.
//!
//! Exit codes are a stable contract: 0 success, 1 check failure, 2 usage or
//! parse error. Primary outputs are written atomically (temp file + rename)
//! and are byte-deterministic given the same arguments and inputs.

use clap::{Args, Parser, Subcommand};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use cage_core::cage::checkpoint;
use cage_core::cage::config::CageConfig;
use cage_core::cage::dropin::{default_neck_levels, drop_in_check};
use cage_core::cage::forward::forward;
use cage_core::cage::params::init_params;
use cage_core::cage::verify::{full_block_grad_check, ProbeSpec};
use cage_core::cost;
use cage_core::eval;
use cage_core::label::{self, dedup::read_embeddings, DatasetManifest, Grid3x3};
use cage_core::tensor::gradcheck::random_tensor;
use cage_core::tensor::ops::BnMode;
use cage_core::tensor::serial;
use cage_core::Tensor;
use rand::rngs::StdRng;
use rand::SeedableRng;

const EXIT_CHECK_FAILED: u8 = 1;
const EXIT_USAGE: u8 = 2;

#[derive(Parser)]
#[command(name = "cage", version, about = "Text-vision fusion block toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Verify the full-block backward against central finite differences
    Gradcheck(GradcheckArgs),
    /// Write a fresh randomly-initialized checkpoint
    Init(InitArgs),
    /// Run one forward pass and print activation statistics
    DemoForward(DemoForwardArgs),
    /// Parameter and FLOP report, optionally against the reference baseline
    Cost(CostArgs),
    /// Check output shapes at the default detector neck levels
    Dropin(DropinArgs),
    /// Drop near-duplicate frames by embedding cosine similarity
    Dedup(DedupArgs),
    /// Normalize every annotation to an axis-aligned box
    Convert(ConvertArgs),
    /// Plan or apply reclassification of ambiguous labels
    Reclass(ReclassArgs),
    /// Emit one caption prompt per image
    Caption(CaptionArgs),
    /// AP50 and COCO mAP over detection/ground-truth JSONL files
    Eval(EvalArgs),
}

#[derive(Args)]
struct GradcheckArgs {
    /// Block config JSON; a small verification config when omitted
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    /// Machine-readable per-group errors on stdout
    #[arg(long)]
    json: bool,
    /// Negative control: flip one gradient's sign so the check must fail
    #[arg(long, hide = true)]
    sabotage: bool,
}

#[derive(Args)]
struct InitArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Checkpoint directory to create
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DemoForwardArgs {
    /// Checkpoint directory produced by `cage init`
    #[arg(long)]
    checkpoint: PathBuf,
    /// Image feature tensor (.cagt), random when omitted
    #[arg(long)]
    image: Option<PathBuf>,
    /// Text embedding tensor (.cagt), random when omitted
    #[arg(long)]
    text: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 8)]
    height: usize,
    #[arg(long, default_value_t = 8)]
    width: usize,
    #[arg(long, default_value_t = 4)]
    tokens: usize,
    /// Write the full stats report to this JSON file
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CostArgs {
    /// Block config JSON; the three default neck levels when omitted
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    batch: usize,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long, default_value_t = 10)]
    tokens: usize,
    /// Add a comparison against the reference baseline block
    #[arg(long)]
    baseline: bool,
    /// CSV instead of the aligned table
    #[arg(long)]
    csv: bool,
    /// Write the structured report to this JSON file
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct DropinArgs {
    #[arg(long, default_value_t = 10)]
    tokens: usize,
    #[arg(long, default_value_t = 512)]
    embed_dim: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct DedupArgs {
    #[arg(long, default_value_t = 0.95)]
    tau: f64,
    /// Optional manifest; validated when given
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Embeddings JSONL, one {frame_id, dim, values} per line
    #[arg(long)]
    embeddings: PathBuf,
    /// Kept frame ids, JSON array
    #[arg(long)]
    out: Option<PathBuf>,
    /// Drop log JSONL
    #[arg(long)]
    drop_log: Option<PathBuf>,
}

#[derive(Args)]
struct ConvertArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReclassArgs {
    #[command(subcommand)]
    action: ReclassAction,
}

#[derive(Subcommand)]
enum ReclassAction {
    /// Emit one crop job per annotation with an ambiguous label
    Plan {
        #[arg(long)]
        manifest: PathBuf,
        /// Comma-separated ambiguous labels; manifest's own list when omitted
        #[arg(long, value_delimiter = ',')]
        ambiguous: Vec<String>,
        #[arg(long, default_value_t = 0.0)]
        margin: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Merge classifier responses back into the manifest
    Apply {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        jobs: PathBuf,
        /// JSON object mapping job id to response label
        #[arg(long)]
        responses: PathBuf,
        /// Closed vocabulary, comma separated; open when omitted
        #[arg(long, value_delimiter = ',')]
        allowed: Option<Vec<String>>,
        #[arg(long)]
        out: PathBuf,
        /// Rejection log JSONL
        #[arg(long)]
        reject_log: Option<PathBuf>,
    },
}

#[derive(Args)]
struct CaptionArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Directory receiving one <image_id>.txt per image
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    dets: PathBuf,
    #[arg(long)]
    gts: PathBuf,
    #[arg(long, default_value_t = eval::DEFAULT_SCORE_FLOOR)]
    score_floor: f64,
    #[arg(long)]
    json: Option<PathBuf>,
}

/// Input/parse problems exit 2; failed checks exit 1 via Ok(EXIT_CHECK_FAILED).
type CmdResult = Result<u8, String>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Init(a) => cmd_init(a),
        Command::DemoForward(a) => cmd_demo_forward(a),
        Command::Cost(a) => cmd_cost(a),
        Command::Dropin(a) => cmd_dropin(a),
        Command::Dedup(a) => cmd_dedup(a),
        Command::Convert(a) => cmd_convert(a),
        Command::Reclass(a) => cmd_reclass(a),
        Command::Caption(a) => cmd_caption(a),
        Command::Eval(a) => cmd_eval(a),
    };
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(message) => {
            eprintln!("error: {message}");
            ExitCode::from(EXIT_USAGE)
        }
    }
}

fn fail<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

/// Write through a temp file in the destination directory, then rename, so
/// interrupted runs never leave truncated output.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), String> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(fail)?;
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name().and_then(|n| n.to_str()).unwrap_or("out")
    ));
    std::fs::write(&tmp, bytes).map_err(fail)?;
    std::fs::rename(&tmp, path).map_err(fail)?;
    Ok(())
}

fn load_config(path: Option<&Path>) -> Result<CageConfig, String> {
    let cfg = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(fail)?;
            serde_json::from_str::<CageConfig>(&text).map_err(fail)?
        }
        None => {
            // small enough that a full finite-difference sweep stays quick
            let mut cfg = CageConfig::for_neck_level(8, 8, 16);
            cfg.proj_dim = 8;
            cfg.heads = 2;
            cfg
        }
    };
    cfg.validate().map_err(fail)?;
    Ok(cfg)
}

fn cmd_gradcheck(a: GradcheckArgs) -> CmdResult {
    let cfg = load_config(a.config.as_deref())?;
    let report = full_block_grad_check(&cfg, ProbeSpec::default(), a.seed, a.tolerance, a.sabotage)
        .map_err(fail)?;
    if a.json {
        let groups: BTreeMap<&str, f64> =
            report.per_group.iter().map(|(n, e)| (n.as_str(), *e)).collect();
        let body = serde_json::json!({
            "passed": report.passed(),
            "max_rel_err": report.max_rel_err,
            "tolerance": report.tolerance,
            "per_group": groups,
        });
        println!("{}", serde_json::to_string_pretty(&body).map_err(fail)?);
    } else {
        for (name, err) in &report.per_group {
            println!("{name:<16} {err:.3e}");
        }
        println!(
            "max rel err {:.3e} (tolerance {:.1e})",
            report.max_rel_err, report.tolerance
        );
    }
    if report.passed() {
        Ok(0)
    } else {
        let worst = report
            .per_group
            .iter()
            .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
            .map(|(n, _)| n.as_str())
            .unwrap_or("?");
        eprintln!("gradient check failed; worst group: {worst}");
        Ok(EXIT_CHECK_FAILED)
    }
}

fn cmd_init(a: InitArgs) -> CmdResult {
    let cfg = load_config(a.config.as_deref())?;
    let params = init_params(&cfg, a.seed).map_err(fail)?;
    checkpoint::save(&a.out, &cfg, &params).map_err(fail)?;
    println!("checkpoint written to {}", a.out.display());
    Ok(0)
}

fn tensor_stats(t: &Tensor) -> serde_json::Value {
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    let mut sum = 0.0;
    for v in t.iter() {
        min = min.min(*v);
        max = max.max(*v);
        sum += v;
    }
    serde_json::json!({
        "shape": t.shape(),
        "min": min,
        "max": max,
        "mean": sum / t.len() as f64,
    })
}

fn cmd_demo_forward(a: DemoForwardArgs) -> CmdResult {
    let (cfg, params) = checkpoint::load(&a.checkpoint).map_err(fail)?;
    let mut rng = StdRng::seed_from_u64(a.seed);
    let f_img = match &a.image {
        Some(p) => serial::load(p).map_err(fail)?,
        None => random_tensor(vec![1, cfg.c_in, a.height, a.width], &mut rng),
    };
    let f_text = match &a.text {
        Some(p) => serial::load(p).map_err(fail)?,
        None => random_tensor(vec![1, a.tokens, cfg.embed_dim], &mut rng),
    };
    let (f_out, acts, _) = forward(&f_img, &f_text, &params, &cfg, BnMode::Eval).map_err(fail)?;
    let body = serde_json::json!({
        "f_img": tensor_stats(&f_img),
        "f_text": tensor_stats(&f_text),
        "ctx_map": tensor_stats(&acts.ctx_map),
        "gate": tensor_stats(&acts.gate),
        "gamma": tensor_stats(&acts.gamma),
        "beta": tensor_stats(&acts.beta),
        "f_out": tensor_stats(&f_out),
    });
    let text = serde_json::to_string_pretty(&body).map_err(fail)?;
    println!("{text}");
    if let Some(out) = &a.out {
        write_atomic(out, format!("{text}\n").as_bytes())?;
    }
    Ok(0)
}

fn cmd_cost(a: CostArgs) -> CmdResult {
    let mut reports: Vec<serde_json::Value> = Vec::new();
    let mut text = String::new();
    let levels: Vec<(CageConfig, usize, usize)> = match &a.config {
        Some(path) => {
            let cfg = load_config(Some(path))?;
            let h = a.height.ok_or("--height is required with --config")?;
            let w = a.width.ok_or("--width is required with --config")?;
            vec![(cfg, h, w)]
        }
        None => default_neck_levels()
            .into_iter()
            .map(|s| (CageConfig::for_neck_level(s.c_in, s.c_out, 512), s.height, s.width))
            .collect(),
    };
    for (cfg, h, w) in &levels {
        let report = cost::count_flops(cfg, a.batch, *h, *w, a.tokens).map_err(fail)?;
        text.push_str(&format!("## c_in={} c_out={} at {}x{}\n", cfg.c_in, cfg.c_out, h, w));
        text.push_str(&if a.csv { report.to_csv() } else { report.to_table() });
        text.push_str(&format!("gflops (dense): {:.4}\n", report.gflops()));
        if a.baseline {
            let spec = cost::BaselineSpec::for_neck_level(cfg.c_out, cfg.embed_dim);
            let input = cost::InputSpec { batch: a.batch, height: *h, width: *w, tokens: a.tokens };
            let cmp = cost::compare_baseline(cfg, &spec, Some(input)).map_err(fail)?;
            text.push_str(&format!(
                "vs {}: params {:+.1}% macs {:+.1}%\n",
                cmp.label, cmp.param_delta_pct, cmp.macs_delta_pct
            ));
            reports.push(serde_json::to_value(&cmp).map_err(fail)?);
        } else {
            reports.push(serde_json::to_value(&report).map_err(fail)?);
        }
        text.push('\n');
    }
    print!("{text}");
    if let Some(path) = &a.json {
        let body = serde_json::to_string_pretty(&reports).map_err(fail)?;
        write_atomic(path, format!("{body}\n").as_bytes())?;
    }
    Ok(0)
}

fn cmd_dropin(a: DropinArgs) -> CmdResult {
    let report =
        drop_in_check(&default_neck_levels(), a.embed_dim, a.tokens, a.seed).map_err(fail)?;
    for lv in &report.levels {
        println!(
            "level {} ({}x{}, c_out {}): {} params {} gflops {:.3}",
            lv.level,
            lv.spec.height,
            lv.spec.width,
            lv.spec.c_out,
            if lv.ok { "ok" } else { "SHAPE MISMATCH" },
            lv.param_count,
            lv.gflops,
        );
    }
    if let Some(path) = &a.json {
        let body = serde_json::to_string_pretty(&report).map_err(fail)?;
        write_atomic(path, format!("{body}\n").as_bytes())?;
    }
    Ok(if report.all_ok { 0 } else { EXIT_CHECK_FAILED })
}

fn cmd_dedup(a: DedupArgs) -> CmdResult {
    if let Some(manifest) = &a.manifest {
        DatasetManifest::load(manifest).map_err(fail)?;
    }
    let frames = read_embeddings(&a.embeddings).map_err(fail)?;
    let result = label::dedup_frames(&frames, a.tau).map_err(fail)?;
    println!("kept {} of {} frames (tau {})", result.kept.len(), frames.len(), a.tau);
    if let Some(path) = &a.out {
        let body = serde_json::to_string_pretty(&result.kept).map_err(fail)?;
        write_atomic(path, format!("{body}\n").as_bytes())?;
    }
    if let Some(path) = &a.drop_log {
        let mut log = String::new();
        for d in &result.dropped {
            log.push_str(&serde_json::to_string(d).map_err(fail)?);
            log.push('\n');
        }
        write_atomic(path, log.as_bytes())?;
    }
    Ok(0)
}

fn cmd_convert(a: ConvertArgs) -> CmdResult {
    let manifest = DatasetManifest::load(&a.manifest).map_err(fail)?;
    let normalized = label::normalize_manifest(&manifest).map_err(fail)?;
    let body = normalized.to_json().map_err(fail)?;
    write_atomic(&a.out, format!("{body}\n").as_bytes())?;
    println!("normalized {} annotations", normalized.annotations.len());
    Ok(0)
}

fn cmd_reclass(a: ReclassArgs) -> CmdResult {
    match a.action {
        ReclassAction::Plan { manifest, ambiguous, margin, out } => {
            let m = DatasetManifest::load(&manifest).map_err(fail)?;
            let labels = if ambiguous.is_empty() { m.ambiguous_labels.clone() } else { ambiguous };
            let jobs = label::plan_reclassification(&m, &labels, margin).map_err(fail)?;
            let body = serde_json::to_string_pretty(&jobs).map_err(fail)?;
            write_atomic(&out, format!("{body}\n").as_bytes())?;
            println!("planned {} jobs", jobs.len());
            Ok(0)
        }
        ReclassAction::Apply { manifest, jobs, responses, allowed, out, reject_log } => {
            let m = DatasetManifest::load(&manifest).map_err(fail)?;
            let jobs: Vec<label::ReclassJob> =
                serde_json::from_str(&std::fs::read_to_string(&jobs).map_err(fail)?)
                    .map_err(fail)?;
            let responses: BTreeMap<String, String> =
                serde_json::from_str(&std::fs::read_to_string(&responses).map_err(fail)?)
                    .map_err(fail)?;
            let result =
                label::apply_reclassification(&m, &jobs, &responses, allowed.as_deref())
                    .map_err(fail)?;
            let body = result.manifest.to_json().map_err(fail)?;
            write_atomic(&out, format!("{body}\n").as_bytes())?;
            if let Some(path) = &reject_log {
                let mut log = String::new();
                for r in &result.rejections {
                    log.push_str(&serde_json::to_string(r).map_err(fail)?);
                    log.push('\n');
                }
                write_atomic(path, log.as_bytes())?;
            }
            println!(
                "applied {} responses, {} rejected",
                responses.len(),
                result.rejections.len()
            );
            Ok(0)
        }
    }
}

fn cmd_caption(a: CaptionArgs) -> CmdResult {
    let manifest = DatasetManifest::load(&a.manifest).map_err(fail)?;
    let grid = Grid3x3::default();
    std::fs::create_dir_all(&a.out).map_err(fail)?;
    for image in &manifest.images {
        let prompt = label::build_caption_prompt(&manifest, &image.id, &grid).map_err(fail)?;
        write_atomic(&a.out.join(format!("{}.txt", image.id)), prompt.as_bytes())?;
    }
    println!("wrote {} prompts", manifest.images.len());
    Ok(0)
}

fn cmd_eval(a: EvalArgs) -> CmdResult {
    let dets = eval::read_detections(&a.dets).map_err(fail)?;
    let gts = eval::read_ground_truths(&a.gts).map_err(fail)?;
    let report = eval::evaluate(&dets, &gts, a.score_floor).map_err(fail)?;
    println!("AP50 {:.6}  mAP {:.6}", report.ap50, report.map);
    if let Some(path) = &a.json {
        let body = serde_json::to_string_pretty(&report).map_err(fail)?;
        write_atomic(path, format!("{body}\n").as_bytes())?;
    }
    Ok(0)
}
