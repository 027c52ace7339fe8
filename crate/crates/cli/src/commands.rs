use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use rayon::prelude::*;
use serde_json::{json, Value};
use volreg::io::{self, VolumeData};
use volreg::metrics::{full_report, MetricsReport, ReportInputs, RunReport};
use volreg::register::{self as engine, RegistrationResult};
use volreg::stage1::estimate_with;
use volreg::synth::{self, files, PhantomParams};
use volreg::warp::{warp_mask, warp_scalar};
use volreg::{BinaryMask, DisplacementField, GridInfo, LandmarkSet, RegistrationConfig, ScalarVolume, SoftMask};

use crate::{
    ConfigArgs, EstimateArgs, Inputs, MaskSource, MetricsArgs, PipelineArgs, Preset, RegisterArgs, Switch, SynthArgs,
    UsageError, WarpArgs,
};

const STM_FILE: &str = "stm.vpv.json";
const FIELD_STAGE1_FILE: &str = "field_stage1.vpv.json";
const FIELD_STAGE2_FILE: &str = "field_stage2.vpv.json";
const FIELD_FILE: &str = "field.vpv.json";
const WARPED_FILE: &str = "warped.vpv.json";
const REPORT_FILE: &str = "report.json";

/// Images and annotations of one registration problem.
struct Loaded {
    moving: ScalarVolume,
    fixed: ScalarVolume,
    organ: BinaryMask,
    organ_fixed: Option<BinaryMask>,
    tumor: Option<BinaryMask>,
    landmarks: Option<LandmarkSet>,
}

fn pick(explicit: &Option<PathBuf>, case: Option<&Path>, name: &str) -> Option<PathBuf> {
    explicit.clone().or_else(|| case.map(|d| d.join(name)).filter(|p| p.exists()))
}

fn require(path: Option<PathBuf>, flag: &str) -> Result<PathBuf> {
    path.ok_or_else(|| UsageError(format!("missing --{flag} (or --case)")).into())
}

impl Inputs {
    fn load(&self) -> Result<Loaded> {
        let case = self.case.as_deref();
        if let Some(dir) = case {
            anyhow::ensure!(dir.is_dir(), "case directory {} does not exist", dir.display());
        }
        let moving = io::read_scalar(require(pick(&self.moving, case, files::MOVING), "moving")?)?;
        let fixed = io::read_scalar(require(pick(&self.fixed, case, files::FIXED), "fixed")?)?;
        moving.grid().check_same(fixed.grid(), "moving/fixed")?;
        let organ = io::read_binary(require(pick(&self.organ, case, files::ORGAN_MOVING), "organ")?)?;
        let optional = |p: Option<PathBuf>| p.map(io::read_binary).transpose();
        let organ_fixed = optional(pick(&self.organ_fixed, case, files::ORGAN_FIXED))?;
        let tumor = optional(pick(&self.tumor, case, files::TUMOR_MOVING))?;
        let landmarks =
            pick(&self.landmarks, case, files::LANDMARKS).map(|p| io::read_landmarks(p, fixed.grid())).transpose()?;
        let grid = fixed.grid();
        organ.grid().check_same(grid, "organ mask")?;
        for m in organ_fixed.iter().chain(&tumor) {
            m.grid().check_same(grid, "annotation mask")?;
        }
        Ok(Loaded { moving, fixed, organ, organ_fixed, tumor, landmarks })
    }
}

fn merge(base: &mut Value, overlay: Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                b.insert(k, v);
            }
        }
        (b, o) => *b = o,
    }
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RegistrationConfig> {
        let preset = match self.preset {
            Preset::Default => RegistrationConfig::default(),
            Preset::Calibrated => RegistrationConfig::calibrated(),
        };
        let mut value = serde_json::to_value(preset)?;
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let overlay: Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
            anyhow::ensure!(overlay.is_object(), "{} must hold a JSON object", path.display());
            merge(&mut value, overlay);
        }
        let mut cfg: RegistrationConfig = serde_json::from_value(value).context("invalid config")?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(t) = self.transform {
            cfg.transform = t;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn metrics_for(data: &Loaded, field: &DisplacementField) -> Result<Option<MetricsReport>> {
    let Some(organ_fixed) = &data.organ_fixed else {
        return Ok(None);
    };
    let report = full_report(ReportInputs {
        field,
        organ_moving: &data.organ,
        organ_fixed,
        tumor_moving: data.tumor.as_ref(),
        landmarks: data.landmarks.as_ref(),
    })?;
    Ok(Some(report))
}

/// Report JSON: the metrics when a fixed organ mask is known, plus the
/// optimization summary, the effective config and the version.
fn run_report(data: &Loaded, result: &RegistrationResult, cfg: &RegistrationConfig) -> Result<Value> {
    let mut value = match metrics_for(data, &result.field)? {
        Some(m) => serde_json::to_value(RunReport::new(m, cfg)?)?,
        None => json!({ "config": cfg, "version": env!("CARGO_PKG_VERSION") }),
    };
    merge(
        &mut value,
        json!({
            "final_loss": result.final_loss(),
            "converged": result.converged,
            "levels": result.levels,
        }),
    );
    Ok(value)
}

fn save_registration(out: &Path, field_name: &str, data: &Loaded, result: &RegistrationResult) -> Result<()> {
    io::write_volume(&result.field, out.join(field_name))?;
    io::write_volume(&warp_scalar(&data.moving, &result.field)?, out.join(WARPED_FILE))?;
    Ok(())
}

pub fn register(args: RegisterArgs) -> Result<()> {
    if args.vp == Switch::On && args.mask_source == MaskSource::None {
        return Err(UsageError("--vp on needs a --mask-source other than none".into()).into());
    }
    let mut cfg = args.config.resolve()?;
    let data = args.inputs.load()?;
    create_dir(&args.out)?;

    let stm = match &args.mask_source {
        MaskSource::None => None,
        MaskSource::File(p) => {
            let stm = io::read_soft(p)?;
            stm.grid().check_same(data.fixed.grid(), "soft mask")?;
            Some(stm)
        }
        MaskSource::Organ => Some(SoftMask::from_binary(data.organ_fixed.as_ref().unwrap_or(&data.organ))),
        MaskSource::Estimated => {
            let e = estimate_with(&data.moving, &data.fixed, &data.organ, &cfg, !args.skip_prereg)?;
            io::write_volume(&e.prereg_field, args.out.join(FIELD_STAGE1_FILE))?;
            Some(e.stm)
        }
    };
    if let Some(stm) = &stm {
        io::write_volume(stm, args.out.join(STM_FILE))?;
    }
    if args.vp == Switch::Off {
        cfg.alpha_vp = 0.0;
    }
    let result = engine::register(&data.moving, &data.fixed, &data.organ, stm.as_ref(), &cfg)?;
    save_registration(&args.out, FIELD_FILE, &data, &result)?;
    write_json(&args.out.join(REPORT_FILE), &run_report(&data, &result, &cfg)?)?;
    println!("{}", summary_line(&args.out, &result));
    Ok(())
}

fn summary_line(out: &Path, result: &RegistrationResult) -> String {
    let loss = result.final_loss();
    format!(
        "{}: total {:.6} similarity {:.6} vp {:.6} smoothness {:.6}",
        out.display(),
        loss.total,
        loss.similarity,
        loss.vp,
        loss.smoothness
    )
}

pub fn estimate_mask(args: EstimateArgs) -> Result<()> {
    let cfg = args.config.resolve()?;
    let data = args.inputs.load()?;
    create_dir(&args.out)?;
    let e = estimate_with(&data.moving, &data.fixed, &data.organ, &cfg, !args.skip_prereg)?;
    io::write_volume(&e.stm, args.out.join(STM_FILE))?;
    io::write_volume(&e.prereg_field, args.out.join(FIELD_STAGE1_FILE))?;
    let outside = BinaryMask::full(*data.fixed.grid()).and_not(&e.organ);
    let summary = json!({
        "organ_ratio": e.organ_ratio,
        "stm_mean_in_organ": e.stm.mean_over(&e.organ),
        "stm_mean_outside_organ": e.stm.mean_over(&outside),
        "stm_voxels_above_half": e.stm.threshold(0.5).count(),
        "prereg": !args.skip_prereg,
        "config": cfg,
        "version": env!("CARGO_PKG_VERSION"),
    });
    write_json(&args.out.join("summary.json"), &summary)?;
    println!(
        "{}: organ ratio {:.4}, {} voxels with weight >= 0.5",
        args.out.display(),
        e.organ_ratio,
        e.stm.threshold(0.5).count()
    );
    Ok(())
}

struct PipelineJob {
    inputs: Inputs,
    out: PathBuf,
}

fn run_pipeline(job: &PipelineJob, cfg: &RegistrationConfig, prereg: bool, compare: bool) -> Result<String> {
    let data = job.inputs.load()?;
    let out = &job.out;
    create_dir(out)?;
    let e = estimate_with(&data.moving, &data.fixed, &data.organ, cfg, prereg)?;
    io::write_volume(&e.stm, out.join(STM_FILE))?;
    io::write_volume(&e.prereg_field, out.join(FIELD_STAGE1_FILE))?;
    let result = engine::register(&data.moving, &data.fixed, &data.organ, Some(&e.stm), cfg)?;
    save_registration(out, FIELD_STAGE2_FILE, &data, &result)?;
    let report = run_report(&data, &result, cfg)?;
    write_json(&out.join(REPORT_FILE), &report)?;

    if compare {
        let regular = engine::register(&data.moving, &data.fixed, &data.organ, None, cfg)?;
        io::write_volume(&regular.field, out.join("field_regular.vpv.json"))?;
        let regular_report = run_report(&data, &regular, cfg)?;
        write_json(&out.join("report_regular.json"), &regular_report)?;
        let pick = |r: &Value| {
            json!({
                "dice_organ": r.get("dice_organ"),
                "stsr": r.get("stsr"),
                "folding_pct": r.get("folding_pct"),
                "landmark_distance_mm": r.get("landmark_distance_mm"),
                "final_loss": r.get("final_loss"),
            })
        };
        write_json(
            &out.join("comparison.json"),
            &json!({ "regular": pick(&regular_report), "pipeline": pick(&report) }),
        )?;
    }
    Ok(summary_line(out, &result))
}

pub fn pipeline(args: PipelineArgs, jobs: usize) -> Result<()> {
    let cfg = args.config.resolve()?;
    let prereg = !args.skip_prereg;
    let jobs_list: Vec<PipelineJob> = if args.cases.is_empty() {
        vec![PipelineJob { inputs: args.inputs.clone(), out: args.out.clone() }]
    } else {
        let mut seen = std::collections::HashSet::new();
        args.cases
            .iter()
            .map(|dir| {
                let name = dir
                    .file_name()
                    .map(|n| n.to_string_lossy().into_owned())
                    .ok_or_else(|| UsageError(format!("cannot name output for case {}", dir.display())))?;
                if !seen.insert(name.clone()) {
                    return Err(UsageError(format!("duplicate case name {name}")).into());
                }
                let out = if args.cases.len() == 1 { args.out.clone() } else { args.out.join(&name) };
                Ok(PipelineJob { inputs: Inputs { case: Some(dir.clone()), ..args.inputs.clone() }, out })
            })
            .collect::<Result<_>>()?
    };

    let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs.min(jobs_list.len())).build()?;
    let results: Vec<Result<String>> = pool
        .install(|| jobs_list.par_iter().map(|job| run_pipeline(job, &cfg, prereg, args.compare_regular)).collect());
    let mut first_err = None;
    for (job, r) in jobs_list.iter().zip(results) {
        match r {
            Ok(line) => println!("{line}"),
            Err(e) => {
                let e = e.context(format!("case {}", job.out.display()));
                if first_err.is_none() {
                    first_err = Some(e);
                } else {
                    eprintln!("error: {:#}", e);
                }
            }
        }
    }
    first_err.map_or(Ok(()), Err)
}

pub fn synth(args: SynthArgs) -> Result<()> {
    let grid = GridInfo::cube(args.size)?;
    let params = if args.boundary_mismatch {
        PhantomParams::boundary_mismatch(args.scenario)
    } else {
        PhantomParams::new(args.scenario)
    };
    let case = synth::generate_with(&params, grid, args.seed)?;
    synth::write_case(&case, &args.out, Some(args.seed))?;
    println!(
        "{}: {} phantom, seed {}, {}^3, organ {} voxels, tumor {} voxels",
        args.out.display(),
        args.scenario,
        args.seed,
        args.size,
        case.organ_moving.count(),
        case.tumor_moving.count()
    );
    Ok(())
}

pub fn warp(args: WarpArgs) -> Result<()> {
    let field = io::read_field(&args.field)?;
    let out_dir = args.out.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(dir) = out_dir {
        create_dir(dir)?;
    }
    match io::read_volume(&args.input)? {
        VolumeData::Scalar(v) => {
            v.grid().check_same(field.grid(), "input/field")?;
            io::write_volume(&warp_scalar(&v, &field)?, &args.out)?;
        }
        VolumeData::Binary(m) => {
            m.grid().check_same(field.grid(), "input/field")?;
            io::write_volume(&warp_mask(&m, &field, volreg::metrics::WARP_THRESHOLD)?, &args.out)?;
        }
        VolumeData::Field(_) => anyhow::bail!("{} is a field; expected a volume or mask", args.input.display()),
    }
    println!("{}", args.out.display());
    Ok(())
}

pub fn metrics(args: MetricsArgs) -> Result<()> {
    let data = args.inputs.load()?;
    if data.organ_fixed.is_none() {
        return Err(UsageError("metrics needs --organ-fixed (or a case with one)".into()).into());
    }
    let field = io::read_field(&args.field)?;
    field.grid().check_same(data.fixed.grid(), "field")?;
    let report = metrics_for(&data, &field)?.expect("fixed organ checked above");
    if let Some(dir) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write_json(&args.out, &report)?;
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}
