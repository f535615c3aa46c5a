use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use hazesplit_core::gradcheck::{run_suite, GradCheckConfig};
use hazesplit_core::image::{load_image, save_png16_gray, save_png8, ImagePlane};
use hazesplit_core::metrics::{fmt_db, psnr, ssim, MetricReport, SSIM_CONVENTION};
use hazesplit_core::objective::LossBreakdown;
use hazesplit_core::physics::Disentanglement;
use hazesplit_core::solver::{ablate as ablate_run, dehaze as dehaze_run, AblatedTerm, RunRecord, SolverConfig};
use hazesplit_core::transfer::{apply_style, HazeStyle, Resize, STYLE_AIRLIGHT_FILE, STYLE_META_FILE, STYLE_TRANSMISSION_FILE};
use hazesplit_core::Error;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use crate::error::CliError;
use crate::{Precision, Settings};

pub const DEHAZED_FILE: &str = "dehazed.png";
pub const TRANSMISSION_FILE: &str = "transmission.png";
pub const AIRLIGHT_FILE: &str = "airlight.png";
pub const METRICS_FILE: &str = "metrics.json";
pub const TRANSFERRED_FILE: &str = "transferred.png";
pub const ABLATION_FILE: &str = "ablation.tsv";

const DEHAZE_FILES: [&str; 4] = [DEHAZED_FILE, TRANSMISSION_FILE, AIRLIGHT_FILE, METRICS_FILE];

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

/// Creates `dir` and refuses to clobber any of `files` inside it unless forced.
fn prepare_dir(dir: &Path, files: &[&str], force: bool) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    if !force {
        if let Some(f) = files.iter().map(|f| dir.join(f)).find(|p| p.exists()) {
            return Err(CliError::Usage(format!("{} exists; pass --force to overwrite", f.display())));
        }
    }
    Ok(())
}

/// One output directory per input: the `--out` directory itself for a single
/// image, `<out>/<file stem>` otherwise.
fn output_dirs(s: &Settings) -> Result<Vec<PathBuf>, CliError> {
    if s.inputs.len() == 1 {
        return Ok(vec![s.out.clone()]);
    }
    let mut seen = BTreeSet::new();
    s.inputs
        .iter()
        .map(|p| {
            let stem = p
                .file_stem()
                .ok_or_else(|| CliError::Usage(format!("{}: no file name", p.display())))?;
            if !seen.insert(stem.to_os_string()) {
                return Err(CliError::Usage(format!("two inputs share the name {}", stem.to_string_lossy())));
            }
            Ok(s.out.join(stem))
        })
        .collect()
}

fn references(s: &Settings) -> Result<Vec<Option<PathBuf>>, CliError> {
    match s.references.len() {
        0 => Ok(vec![None; s.inputs.len()]),
        n if n == s.inputs.len() => Ok(s.references.iter().cloned().map(Some).collect()),
        n => Err(CliError::Usage(format!("{n} --ref given for {} --input", s.inputs.len()))),
    }
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool, CliError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start {jobs} worker threads: {e}")))
}

fn solve(hazy: &ImagePlane, cfg: &SolverConfig, precision: Precision, disabled: Option<AblatedTerm>) -> hazesplit_core::Result<(Disentanglement, RunRecord)> {
    match (precision, disabled) {
        (Precision::F32, None) => dehaze_run::<f32>(hazy, cfg),
        (Precision::F64, None) => dehaze_run::<f64>(hazy, cfg),
        (Precision::F32, Some(t)) => ablate_run::<f32>(hazy, cfg, t),
        (Precision::F64, Some(t)) => ablate_run::<f64>(hazy, cfg, t),
    }
}

#[derive(Serialize)]
struct EpochRow {
    epoch: usize,
    rec: f64,
    j: f64,
    h: f64,
    kl: f64,
    reg: f64,
    total: f64,
}

fn epoch_rows(losses: &[LossBreakdown]) -> Vec<EpochRow> {
    losses
        .iter()
        .enumerate()
        .map(|(i, b)| EpochRow {
            epoch: i + 1,
            rec: b.rec,
            j: b.j,
            h: b.h,
            kl: b.kl,
            reg: b.reg,
            total: b.total,
        })
        .collect()
}

fn db_value(v: f64) -> Value {
    if v.is_infinite() {
        json!("inf")
    } else {
        json!(v)
    }
}

fn config_echo(command: &str, input: &Path, reference: Option<&Path>, cfg: &SolverConfig, precision: Precision) -> Value {
    json!({
        "command": command,
        "input": input.display().to_string(),
        "ref": reference.map(|p| p.display().to_string()),
        "epochs": cfg.epochs,
        "lr": cfg.learning_rate,
        "lambda": cfg.loss.lambda_reg,
        "seed": cfg.seed,
        "precision": precision.name(),
        "solver": cfg,
        "version": env!("CARGO_PKG_VERSION"),
    })
}

fn write_json(path: &Path, value: &Value) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("json values serialize");
    std::fs::write(path, text + "\n").map_err(|e| io_err(path, e))
}

fn save_layers(dir: &Path, d: &Disentanglement, prefix: &str) -> Result<(), CliError> {
    save_png8(&d.radiance, dir.join(format!("{prefix}{DEHAZED_FILE}")))?;
    save_png16_gray(&d.transmission, dir.join(format!("{prefix}{TRANSMISSION_FILE}")))?;
    save_png8(&d.airlight, dir.join(format!("{prefix}{AIRLIGHT_FILE}")))?;
    Ok(())
}

/// Saves the last finite outputs of a diverged run before reporting it.
fn numerical_failure(dir: &Path, input: &Path, e: Error) -> CliError {
    if let Error::NonFiniteLoss {
        last_good: Some(d), ..
    } = &e
    {
        if let Err(save) = save_layers(dir, d, "last_good_") {
            return save;
        }
    }
    CliError::Numerical(format!("{}: {e}", input.display()))
}

struct Scored {
    psnr_db: f64,
    ssim: f64,
}

fn score(pred: &ImagePlane, reference: &ImagePlane) -> Result<Scored, CliError> {
    Ok(Scored {
        psnr_db: psnr(pred, reference)?,
        ssim: ssim(pred, reference)?,
    })
}

fn load_reference(path: Option<&Path>, hazy: &ImagePlane) -> Result<Option<ImagePlane>, CliError> {
    let Some(path) = path else { return Ok(None) };
    let r = load_image(path)?;
    if r.dims() != hazy.dims() {
        return Err(CliError::Usage(format!(
            "{}: reference is {:?}, input is {:?}",
            path.display(),
            r.dims(),
            hazy.dims()
        )));
    }
    Ok(Some(r))
}

fn dehaze_one(input: &Path, reference: Option<&Path>, dir: &Path, s: &Settings) -> Result<String, CliError> {
    let hazy = load_image(input)?;
    let gt = load_reference(reference, &hazy)?;
    prepare_dir(dir, &DEHAZE_FILES, s.force)?;
    let (layers, record) = match solve(&hazy, &s.solver, s.precision, None) {
        Ok(r) => r,
        Err(e @ Error::NonFiniteLoss { .. }) | Err(e @ Error::NonFiniteGradient(_)) => {
            return Err(numerical_failure(dir, input, e))
        }
        Err(e) => return Err(e.into()),
    };
    let scored = gt.as_ref().map(|g| score(&layers.radiance, g)).transpose()?;
    save_layers(dir, &layers, "")?;
    let mut metrics = json!({
        "config": config_echo("dehaze", input, reference, &s.solver, s.precision),
        "seed": record.seed,
        "hint": record.hint,
        "epochs": epoch_rows(&record.losses),
        "timing_ms_per_epoch": record.epoch_ms,
    });
    let mut line = format!(
        "{} -> {}: {} epochs, final loss {:.6}",
        input.display(),
        dir.display(),
        record.losses.len(),
        record.losses.last().map_or(f64::NAN, |b| b.total)
    );
    if let Some(sc) = scored {
        metrics["psnr_db"] = db_value(sc.psnr_db);
        metrics["ssim"] = json!(sc.ssim);
        metrics["ssim_convention"] = json!(SSIM_CONVENTION);
        line.push_str(&format!(", psnr {} dB, ssim {:.4}", fmt_db(sc.psnr_db), sc.ssim));
    }
    write_json(&dir.join(METRICS_FILE), &metrics)?;
    Ok(line)
}

/// Reports every result in input order and returns the most severe failure.
fn finish(results: Vec<Result<String, CliError>>) -> Result<(), CliError> {
    let mut worst: Option<CliError> = None;
    for r in results {
        match r {
            Ok(line) => println!("{line}"),
            Err(e) => {
                eprintln!("hazesplit: {e}");
                if worst.as_ref().is_none_or(|w| e.exit_code() > w.exit_code()) {
                    worst = Some(e);
                }
            }
        }
    }
    match worst {
        None => Ok(()),
        Some(e) => Err(e),
    }
}

fn require_inputs(s: &Settings) -> Result<(), CliError> {
    if s.inputs.is_empty() {
        return Err(CliError::Usage("at least one --input is required".into()));
    }
    Ok(())
}

pub fn dehaze(s: &Settings) -> Result<(), CliError> {
    require_inputs(s)?;
    let dirs = output_dirs(s)?;
    let refs = references(s)?;
    let results = pool(s.jobs)?.install(|| {
        (0..s.inputs.len())
            .into_par_iter()
            .map(|i| dehaze_one(&s.inputs[i], refs[i].as_deref(), &dirs[i], s))
            .collect::<Vec<_>>()
    });
    finish(results)
}

const VARIANTS: [Option<AblatedTerm>; 5] = [
    Some(AblatedTerm::H),
    Some(AblatedTerm::Kl),
    Some(AblatedTerm::J),
    Some(AblatedTerm::Reg),
    None,
];

fn variant_label(v: Option<AblatedTerm>) -> String {
    v.map_or_else(|| "full".to_string(), |t| format!("-{}", t.label()))
}

pub fn ablate(s: &Settings) -> Result<(), CliError> {
    require_inputs(s)?;
    let dirs = output_dirs(s)?;
    let refs = references(s)?;
    let mut images = Vec::new();
    for (i, input) in s.inputs.iter().enumerate() {
        let hazy = load_image(input)?;
        let gt = load_reference(refs[i].as_deref(), &hazy)?;
        prepare_dir(&dirs[i], &[ABLATION_FILE], s.force)?;
        images.push((hazy, gt));
    }
    let jobs: Vec<(usize, Option<AblatedTerm>)> =
        (0..images.len()).flat_map(|i| VARIANTS.map(|v| (i, v))).collect();
    let runs = pool(s.jobs)?.install(|| {
        jobs.par_iter()
            .map(|&(i, v)| -> Result<Scored, CliError> {
                let (hazy, gt) = &images[i];
                let (layers, _) = solve(hazy, &s.solver, s.precision, v)
                    .map_err(|e| CliError::from(e).prefixed(&s.inputs[i]))?;
                match gt {
                    Some(g) => score(&layers.radiance, g),
                    None => score(&layers.recompose()?, hazy),
                }
            })
            .collect::<Vec<_>>()
    });
    let mut runs = runs.into_iter();
    let mut results = Vec::new();
    for (i, (_, gt)) in images.iter().enumerate() {
        let against = if gt.is_some() { "reference" } else { "input (reconstruction)" };
        let mut table = format!("# {} scored against {against}\nvariant\tpsnr_db\tssim\n", s.inputs[i].display());
        let mut failed = None;
        for v in VARIANTS {
            match runs.next().expect("one run per variant") {
                Ok(sc) => table.push_str(&format!("{}\t{}\t{:.4}\n", variant_label(v), fmt_db(sc.psnr_db), sc.ssim)),
                Err(e) => failed = Some(e),
            }
        }
        if let Some(e) = failed {
            results.push(Err(e));
            continue;
        }
        let path = dirs[i].join(ABLATION_FILE);
        results.push(std::fs::write(&path, &table).map_err(|e| io_err(&path, e)).map(|_| table.trim_end().to_string()));
    }
    finish(results)
}

pub fn transfer(s: &Settings) -> Result<(), CliError> {
    let clean_path = s.clean.as_ref().ok_or_else(|| CliError::Usage("--clean is required".into()))?;
    let clean = load_image(clean_path)?;
    let style = match (&s.style, s.inputs.as_slice()) {
        (Some(dir), []) => {
            prepare_dir(&s.out, &[TRANSFERRED_FILE], s.force)?;
            HazeStyle::load(dir)?
        }
        (None, [input]) => {
            prepare_dir(
                &s.out,
                &[TRANSFERRED_FILE, STYLE_TRANSMISSION_FILE, STYLE_AIRLIGHT_FILE, STYLE_META_FILE, METRICS_FILE],
                s.force,
            )?;
            let hazy = load_image(input)?;
            let (layers, record) = match solve(&hazy, &s.solver, s.precision, None) {
                Ok(r) => r,
                Err(e @ Error::NonFiniteLoss { .. }) | Err(e @ Error::NonFiniteGradient(_)) => {
                    return Err(numerical_failure(&s.out, input, e))
                }
                Err(e) => return Err(e.into()),
            };
            let style = HazeStyle::new(layers.transmission, layers.airlight)?;
            style.save(&s.out)?;
            write_json(
                &s.out.join(METRICS_FILE),
                &json!({
                    "config": config_echo("transfer", input, None, &s.solver, s.precision),
                    "seed": record.seed,
                    "hint": record.hint,
                    "epochs": epoch_rows(&record.losses),
                    "timing_ms_per_epoch": record.epoch_ms,
                }),
            )?;
            style
        }
        _ => return Err(CliError::Usage("give exactly one of --input or --style".into())),
    };
    let hazed = apply_style(&clean, &style, Resize::Bilinear)?;
    let out = s.out.join(TRANSFERRED_FILE);
    save_png8(&hazed, &out)?;
    println!("{} -> {}", clean_path.display(), out.display());
    Ok(())
}

pub fn eval(preds: &[PathBuf], refs: &[PathBuf]) -> Result<(), CliError> {
    if preds.len() != refs.len() {
        return Err(CliError::Usage(format!("{} --pred but {} --ref", preds.len(), refs.len())));
    }
    let scores = preds
        .iter()
        .zip(refs)
        .map(|(p, r)| Ok(MetricReport::score(p.display().to_string(), &load_image(p)?, &load_image(r)?)?))
        .collect::<Result<Vec<_>, CliError>>()?;
    print!("{}", MetricReport::from_scores(scores).to_text());
    Ok(())
}

pub fn gradcheck(probes: usize, seed: u64, tolerance: f64, step: f64) -> Result<(), CliError> {
    if probes == 0 || !(step > 0.0) || !(tolerance > 0.0) {
        return Err(CliError::Usage("--probes, --step and --tolerance must be positive".into()));
    }
    let cfg = GradCheckConfig {
        probes,
        step,
        tolerance,
        seed,
    };
    let reports = run_suite(&cfg)?;
    println!("op\tmax_rel_err\tresolved_rel_err\texcluded\tstatus");
    for r in &reports {
        println!(
            "{}\t{:.3e}\t{:.3e}\t{}\t{}",
            r.name,
            r.max_rel_err,
            r.max_resolved_rel_err,
            r.excluded,
            if r.passed { "ok" } else { "FAIL" }
        );
    }
    let failed = reports.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        return Err(CliError::Numerical(format!("{failed} gradient checks failed")));
    }
    Ok(())
}
