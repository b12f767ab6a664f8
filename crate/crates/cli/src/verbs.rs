use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use serde::{Deserialize, Serialize};
use svr_core::io::{
    read_fields, read_json, read_stack, read_volume, sidecars, write_atomic, write_fields, write_json, write_stack,
    write_transforms, write_volume, Dtype, StackExtras,
};
use svr_core::metrics::{median_max_tre, ncc, psnr, ssim, tre, MetricReport, PSNR_CAP_DB};
use svr_core::motion::{simulate_subject, Acquisition, MotionConfig};
use svr_core::optim::ReconConfig;
use svr_core::oracle::{run_case, OracleReport, CASES};
use svr_core::phantom::{make_phantom, PhantomKind};
use svr_core::pipeline::{reconstruct as run_pipeline, Mode};
use svr_core::{Error, Exec, Result, SliceStack};

use crate::manifest::{Input, Manifest, Outputs, MANIFEST};

pub struct Context {
    pub args: Vec<String>,
    pub deterministic: bool,
    pub exec: Exec,
}

/// Contents of a `--motion` file.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    /// Edge length of procedural phantoms, voxels.
    pub dims: usize,
    pub acquisition: Acquisition,
    pub motion: MotionConfig,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            dims: 32,
            acquisition: Acquisition::default(),
            motion: MotionConfig::default(),
        }
    }
}

fn stem_name(path: &Path) -> String {
    path.with_extension("")
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn sidecar_inputs(path: &Path) -> Result<Vec<Input>> {
    let (json, raw, mask) = sidecars(path);
    let mut out = vec![Input::file(&json)?, Input::file(&raw)?];
    if mask.exists() {
        out.push(Input::file(&mask)?);
    }
    Ok(out)
}

pub fn simulate(ctx: &Context, phantom: &str, motion: &str, seed: u64, out: &Path) -> Result<ExitCode> {
    let mut inputs = Vec::new();
    let mut config = match motion {
        "default" => SimConfig::default(),
        "still" => SimConfig {
            motion: MotionConfig::still(),
            ..SimConfig::default()
        },
        path => {
            inputs.push(Input::file(Path::new(path))?);
            read_json(Path::new(path))?
        }
    };
    config.motion.seed = seed;
    let volume = match phantom.parse::<PhantomKind>() {
        Ok(kind) => {
            inputs.push(Input::named(phantom));
            make_phantom(kind, [config.dims; 3], seed)?
        }
        Err(_) => {
            inputs.extend(sidecar_inputs(Path::new(phantom))?);
            read_volume(Path::new(phantom))?
        }
    };
    if volume.spacing.iter().any(|&s| s != volume.spacing[0]) {
        return Err(Error::InvalidArgument("phantom voxels must be isotropic".into()));
    }
    let gt = simulate_subject(&volume, &config.acquisition, &config.motion, ctx.exec)?;

    let mut m = Manifest::new("simulate", &ctx.args, &config, ctx.deterministic)?;
    m.inputs = inputs;
    m.seed = Some(seed);
    for (j, st) in gt.corrupted.iter().enumerate() {
        let rel = format!("stacks/stack_{j:02}_{}", st.orientation.label());
        let extras = StackExtras { poses: None, seed: Some(seed) };
        write_stack(&out.join(&rel), st, &extras, Dtype::F32)?;
        m.output("stacks", rel);
    }
    write_volume(&out.join("truth/phantom"), &volume, Dtype::F32, false)?;
    m.output("phantom", "truth/phantom");
    let poses: Vec<_> = gt.stacks.iter().map(|s| s.poses.clone()).collect();
    write_transforms(&out.join("truth/transforms.json"), &poses)?;
    m.output("transforms", "truth/transforms.json");
    for (j, s) in gt.stacks.iter().enumerate() {
        let rel = format!("truth/fields_{j:02}");
        write_fields(&out.join(&rel), &s.fields)?;
        m.output("fields", rel);
    }
    m.write(&out.join(MANIFEST))?;
    Ok(ExitCode::SUCCESS)
}

/// Stack files of `dir` (or of its `stacks` subdirectory), in name order.
pub fn find_stacks(dir: &Path) -> Result<Vec<PathBuf>> {
    let dir = if dir.join("stacks").is_dir() { dir.join("stacks") } else { dir.to_path_buf() };
    let entries =
        fs::read_dir(&dir).map_err(|e| Error::InvalidArgument(format!("cannot read stack directory {}: {e}", dir.display())))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().is_some_and(|e| e == "json")
                && p.file_name().is_some_and(|n| n.to_string_lossy().starts_with("stack_"))
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Empty(format!("no stack_*.json files in {}", dir.display())));
    }
    Ok(paths)
}

#[derive(Serialize)]
struct ReconstructConfig<'a> {
    mode: Mode,
    recon: &'a ReconConfig,
}

pub fn reconstruct(ctx: &Context, stacks: &Path, mode: Mode, config: Option<&Path>, out: &Path) -> Result<ExitCode> {
    let mut inputs = Vec::new();
    let mut recon: ReconConfig = match config {
        Some(p) => {
            inputs.push(Input::file(p)?);
            read_json(p)?
        }
        None => ReconConfig::default(),
    };
    if ctx.deterministic {
        recon.exec = Exec::Sequential;
    }
    let mut loaded: Vec<SliceStack> = Vec::new();
    for p in find_stacks(stacks)? {
        inputs.extend(sidecar_inputs(&p)?);
        loaded.push(read_stack(&p)?.0);
    }
    let rec = run_pipeline(&loaded, mode, &recon)?;

    let dir = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = stem_name(out);
    let mut m = Manifest::new("reconstruct", &ctx.args, ReconstructConfig { mode, recon: &recon }, ctx.deterministic)?;
    m.inputs = inputs;
    write_volume(&dir.join(&name), &rec.volume, Dtype::F32, true)?;
    m.output("volume", name);
    write_transforms(&dir.join("transforms.json"), &rec.poses)?;
    m.output("transforms", "transforms.json");
    for (j, f) in rec.fields.iter().enumerate() {
        let rel = format!("fields_{j:02}");
        write_fields(&dir.join(&rel), f)?;
        m.output("fields", rel);
    }
    if !rec.history.is_empty() {
        write_json(&dir.join("history.json"), &rec.history)?;
        m.output("history", "history.json");
    }
    m.write(&dir.join(MANIFEST))?;
    Ok(ExitCode::SUCCESS)
}

fn run_dir(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.to_path_buf()
    } else {
        path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new(".")).to_path_buf()
    }
}

/// CSV rows `metric,stack,value`; `stack` is `all` for whole-volume scores.
pub fn report_csv(r: &MetricReport) -> String {
    let mut s = String::from("metric,stack,value\n");
    let mut row = |metric: &str, stack: &str, v: f64| s.push_str(&format!("{metric},{stack},{v}\n"));
    if let Some(t) = r.tre_max {
        row("tre_max_mm", "all", t);
    }
    if let Some(per) = &r.tre_median_max_per_stack {
        for (j, t) in per.iter().enumerate() {
            row("tre_median_max_mm", &j.to_string(), *t);
        }
    }
    if let Some(t) = r.tre_median_max_mean {
        row("tre_median_max_mm", "mean", t);
    }
    row("ssim", "all", r.ssim);
    row("psnr_db", "all", r.psnr);
    row("ncc", "all", r.ncc);
    s
}

pub fn evaluate(ctx: &Context, result: &Path, truth: &Path, out: &Path) -> Result<ExitCode> {
    let (rdir, tdir) = (run_dir(result), run_dir(truth));
    let (ro, to) = (Outputs::read(&rdir)?, Outputs::read(&tdir)?);
    let volume = read_volume(&ro.one(&rdir, "volume")?)?;
    let phantom = read_volume(&to.one(&tdir, "phantom")?)?;
    let est = ro.all(&rdir, "fields")?.iter().map(|p| read_fields(p)).collect::<Result<Vec<_>>>()?;
    let gt = to.all(&tdir, "fields")?.iter().map(|p| read_fields(p)).collect::<Result<Vec<_>>>()?;
    let spacing = phantom.spacing[0];
    let summary = median_max_tre(&est, &gt, spacing)?;
    let mut tre_max: f64 = 0.0;
    for (e, g) in est.iter().zip(&gt) {
        if e.len() != g.len() {
            return Err(Error::GridMismatch("result and truth slice counts differ".into()));
        }
        for (a, b) in e.iter().zip(g) {
            tre_max = tre_max.max(tre(a, b, spacing)?);
        }
    }
    let report = MetricReport {
        tre_max: Some(tre_max),
        tre_median_max_per_stack: Some(summary.per_stack),
        tre_median_max_mean: Some(summary.mean),
        ssim: ssim(&phantom, &volume)?,
        ncc: ncc(&phantom, &volume)?.value,
        psnr: psnr(&phantom, &volume, PSNR_CAP_DB)?,
        per_slice_consistency: Vec::new(),
    };
    write_atomic(out, report_csv(&report).as_bytes())?;

    let mut m = Manifest::new("evaluate", &ctx.args, serde_json::json!({}), ctx.deterministic)?;
    for p in [ro.one(&rdir, "volume")?, to.one(&tdir, "phantom")?] {
        m.inputs.extend(sidecar_inputs(&p)?);
    }
    m.output("report", out.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default());
    m.write(&out.with_extension("manifest.json"))?;
    println!("{}", report.to_json());
    Ok(ExitCode::SUCCESS)
}

pub fn oracle(case: &str) -> Result<ExitCode> {
    let names: Vec<&str> = if case == "all" { CASES.to_vec() } else { vec![case] };
    let reports: Vec<OracleReport> = names.iter().map(|n| run_case(n)).collect::<Result<_>>()?;
    println!("{}", serde_json::to_string_pretty(&reports)?);
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed()).map(|r| r.case.as_str()).collect();
    if failed.is_empty() {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!(
            "{}",
            serde_json::json!({ "error": { "code": "oracle_failed", "message": format!("failed: {}", failed.join(", ")) } })
        );
        Ok(ExitCode::FAILURE)
    }
}
