use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{error, info, warn};
use rayon::prelude::*;

use boxfit::config::{parse_bounds, Config};
use boxfit::dataset::{
    self, format_gt_line, read_mask_png, read_scene, scene_dirs, write_rgb_png, write_scene,
    MASK_FILE,
};
use boxfit::experiments::{ablate_depth_filter, ablate_early_stop};
use boxfit::metrics::{precision_of_rows, Criterion, ResultRow, RESULTS_HEADER};
use boxfit::overlay::render_overlay;
use boxfit::pipeline::{estimate_scene, evaluate_scene, trace_rows, SceneEstimate, TRACE_HEADER};
use boxfit::scenegen::{generate_scene, GtInstance, Scene};
use boxfit::suites::Suite;
use boxfit::{Error, InstanceMask, Result};

/// Box pose and size estimation from single depth frames.
#[derive(Debug, Parser)]
#[command(name = "boxfit", version)]
struct Cli {
    /// key = value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Extra `key=value` settings applied after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Worker threads (default: logical CPUs).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write synthetic scenes and a manifest.
    Generate {
        #[arg(long)]
        out: PathBuf,
        /// Start from a benchmark suite preset.
        #[arg(long)]
        suite: Option<Suite>,
    },
    /// Estimate boxes in a scene or dataset directory.
    Estimate {
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Instance masks to use instead of segmentation: a PNG for a single
        /// scene, or a directory holding `<scene>/mask.png`.
        #[arg(long)]
        mask_in: Option<PathBuf>,
        /// Write `<scene>/overlay.png` with the estimates drawn over the depth.
        #[arg(long)]
        render_overlays: bool,
        /// Write `<scene>/pred.txt` in the ground-truth format.
        #[arg(long)]
        predictions: bool,
        #[command(flatten)]
        tuning: Tuning,
    },
    /// Precision table of a results CSV.
    Eval { results: PathBuf },
    /// Paired runs with a pipeline feature on and off.
    Ablate {
        data: PathBuf,
        #[arg(long, value_enum)]
        which: Which,
        /// Paired runs of the early-stop ablation.
        #[arg(long)]
        runs: Option<usize>,
        /// Also write the table to this file.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        tuning: Tuning,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Which {
    DepthFilter,
    EarlyStop,
}

#[derive(Debug, Args)]
struct Tuning {
    #[arg(long)]
    no_depth_filter: bool,
    #[arg(long)]
    no_early_stop: bool,
    #[arg(long)]
    tau_px: Option<f64>,
    #[arg(long)]
    t_max: Option<usize>,
    /// Initial scale bounds `lo,hi`.
    #[arg(long)]
    bounds: Option<String>,
}

impl Tuning {
    fn apply(&self, c: &mut Config) -> Result<()> {
        let p = &mut c.pipeline;
        if self.no_depth_filter {
            p.filter_enabled = false;
        }
        if self.no_early_stop {
            p.search.early_stop_enabled = false;
        }
        if let Some(t) = self.tau_px {
            p.search.tau_px = t;
        }
        if let Some(t) = self.t_max {
            p.search.t_max = t;
        }
        if let Some(b) = &self.bounds {
            p.search.bounds_init = parse_bounds("--bounds", b)?;
        }
        c.validate()
    }
}

fn load_config(cli: &Cli, base: Config) -> Result<Config> {
    let mut c = base;
    if let Some(path) = &cli.config {
        let text = fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.clone(),
            source: e,
        })?;
        c.apply(&text)?;
    }
    for kv in &cli.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| Error::Config {
            field: kv.clone(),
            msg: "expected KEY=VALUE".into(),
        })?;
        c.set(k.trim(), v.trim())?;
    }
    c.validate()?;
    Ok(c)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(text.as_bytes()).map_err(io_err(path))
}

fn generate(cfg: &Config, out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(io_err(out))?;
    let results: Vec<(String, u64, Result<Scene>)> = (0..cfg.n_scenes)
        .into_par_iter()
        .map(|i| {
            let sc = cfg.scene_config(i);
            (format!("scene_{i:04}"), sc.seed, generate_scene(&sc))
        })
        .collect();
    let mut manifest = String::new();
    let mut failed = 0;
    for (name, seed, scene) in results {
        match scene {
            Ok(s) => {
                write_scene(&s, &out.join(&name))?;
                manifest += &format!("{name} {seed}\n");
            }
            Err(e) => {
                error!("{name} (seed {seed}): {e}");
                failed += 1;
            }
        }
    }
    write_file(&out.join("manifest.txt"), &manifest)?;
    write_file(&out.join("config.txt"), &cfg.to_text())?;
    info!(
        "wrote {} scenes to {}",
        cfg.n_scenes - failed,
        out.display()
    );
    Ok(())
}

fn scene_id(root: &Path, dir: &Path) -> String {
    let rel = dir.strip_prefix(root).unwrap_or(dir);
    let name = if rel.as_os_str().is_empty() { dir } else { rel };
    name.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "scene".into())
}

fn load_masks(mask_in: Option<&Path>, id: &str, single: bool) -> Result<Option<InstanceMask>> {
    let Some(p) = mask_in else {
        return Ok(None);
    };
    let path = if p.is_dir() {
        p.join(id).join(MASK_FILE)
    } else if single {
        p.to_path_buf()
    } else {
        return Err(Error::Config {
            field: "--mask-in".into(),
            msg: "a dataset needs a directory of <scene>/mask.png".into(),
        });
    };
    read_mask_png(&path).map(Some)
}

struct SceneRun {
    id: String,
    scene: Scene,
    est: std::result::Result<SceneEstimate, String>,
}

fn load_scenes(data: &Path) -> Result<Vec<(String, Scene)>> {
    let dirs = scene_dirs(data)?;
    dirs.par_iter()
        .map(|d| Ok((scene_id(data, d), read_scene(d)?)))
        .collect()
}

fn estimate(
    cfg: &Config,
    data: &Path,
    out: &Path,
    mask_in: Option<&Path>,
    overlays: bool,
    predictions: bool,
) -> Result<()> {
    let scenes = load_scenes(data)?;
    let single = scenes.len() == 1 && dataset::is_scene_dir(data);
    let runs: Vec<SceneRun> = scenes
        .into_par_iter()
        .map(|(id, scene)| {
            let masks = load_masks(mask_in, &id, single)?;
            let est = estimate_scene(&scene.depth, &scene.camera, masks.as_ref(), &cfg.pipeline)
                .map_err(|e| e.to_string());
            Ok(SceneRun { id, scene, est })
        })
        .collect::<Result<_>>()?;
    if runs.is_empty() {
        warn!("no scenes found in {}", data.display());
    }
    fs::create_dir_all(out).map_err(io_err(out))?;
    let mut results = format!("{RESULTS_HEADER}\n");
    let mut trace = format!("{TRACE_HEADER}\n");
    for run in &runs {
        let est = match &run.est {
            Ok(e) => e,
            Err(msg) => {
                error!("{}: {msg}", run.id);
                for g in &run.scene.gt {
                    results += &format!("{},{},0.000000,NaN,NaN,0,0.000000,failed\n", run.id, g.id);
                }
                continue;
            }
        };
        for inst in est.instances.iter().filter(|i| i.outcome.is_err()) {
            warn!(
                "{} label {}: {}",
                run.id,
                inst.label,
                inst.outcome
                    .as_ref()
                    .err()
                    .map(String::as_str)
                    .unwrap_or("")
            );
        }
        let (rows, _) = evaluate_scene(&run.id, &run.scene.gt, est);
        for r in &rows {
            results += &r.to_csv();
            results.push('\n');
        }
        for t in trace_rows(&run.id, est) {
            trace += &t;
            trace.push('\n');
        }
        let preds: Vec<(u8, _)> = est
            .instances
            .iter()
            .filter_map(|i| i.outcome.as_ref().ok().map(|p| (i.label, *p)))
            .collect();
        if predictions || overlays {
            let dir = out.join(&run.id);
            fs::create_dir_all(&dir).map_err(io_err(&dir))?;
            if predictions {
                let text: String = preds
                    .iter()
                    .map(|(label, (pose, dims))| {
                        format_gt_line(&GtInstance {
                            id: *label,
                            pose: *pose,
                            dims: *dims,
                        }) + "\n"
                    })
                    .collect();
                write_file(&dir.join("pred.txt"), &text)?;
            }
            if overlays {
                let boxes: Vec<_> = preds.iter().map(|(_, p)| *p).collect();
                let img = render_overlay(&run.scene.depth, &run.scene.camera, &boxes)?;
                write_rgb_png(&dir.join("overlay.png"), img.width, img.height, &img.data)?;
            }
        }
    }
    write_file(&out.join("results.csv"), &results)?;
    write_file(&out.join("trace.csv"), &trace)?;
    info!(
        "{} scenes, results in {}",
        runs.len(),
        out.join("results.csv").display()
    );
    Ok(())
}

const EVAL_CRITERIA: [(&str, Criterion); 5] = [
    ("iou@0.50", Criterion::Iou(0.5)),
    ("iou@0.70", Criterion::Iou(0.7)),
    ("iou@0.90", Criterion::Iou(0.9)),
    ("5deg5cm", Criterion::PoseNm(5.0, 5.0)),
    ("10deg10cm", Criterion::PoseNm(10.0, 10.0)),
];

fn eval(path: &Path) -> Result<String> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let row = ResultRow::parse(line).ok_or_else(|| Error::Parse {
            file: path.to_path_buf(),
            offset: text.lines().take(i).map(|l| l.len() as u64 + 1).sum(),
            msg: "malformed results row".into(),
        })?;
        rows.push(row);
    }
    let mut out = format!("metric,precision\ninstances,{}\n", rows.len());
    for (name, c) in EVAL_CRITERIA {
        out += &format!("{name},{:.4}\n", precision_of_rows(&rows, c)?);
    }
    Ok(out)
}

fn ablate(cfg: &Config, data: &Path, which: Which, runs: usize) -> Result<String> {
    let scenes: Vec<Scene> = load_scenes(data)?.into_iter().map(|(_, s)| s).collect();
    if scenes.is_empty() {
        return Err(Error::UndefinedMetric(format!(
            "no scenes in {}",
            data.display()
        )));
    }
    let table = match which {
        Which::DepthFilter => {
            ablate_depth_filter(&scenes, &cfg.pipeline, 0.8)?.to_table("depth_filter")
        }
        Which::EarlyStop => {
            let a = ablate_early_stop(&scenes, &cfg.pipeline, runs, 0.9)?;
            format!(
                "{}iteration_reduction,{:.4}\nwall_time_reduction,{:.4}\n",
                a.to_table("early_stop"),
                a.iteration_reduction(),
                a.wall_time_reduction()
            )
        }
    };
    Ok(table)
}

fn run(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| Error::Config {
                field: "--jobs".into(),
                msg: e.to_string(),
            })?;
    }
    match &cli.command {
        Command::Generate { out, suite } => {
            let base = suite.map(|s| s.config()).unwrap_or_default();
            generate(&load_config(cli, base)?, out)
        }
        Command::Estimate {
            data,
            out,
            mask_in,
            render_overlays,
            predictions,
            tuning,
        } => {
            let mut cfg = load_config(cli, Config::default())?;
            tuning.apply(&mut cfg)?;
            estimate(
                &cfg,
                data,
                out,
                mask_in.as_deref(),
                *render_overlays,
                *predictions,
            )
        }
        Command::Eval { results } => {
            print!("{}", eval(results)?);
            Ok(())
        }
        Command::Ablate {
            data,
            which,
            runs,
            out,
            tuning,
        } => {
            let mut cfg = load_config(cli, Config::default())?;
            tuning.apply(&mut cfg)?;
            let table = ablate(&cfg, data, *which, runs.unwrap_or(cfg.runs))?;
            print!("{table}");
            if let Some(p) = out {
                write_file(p, &table)?;
            }
            Ok(())
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } => 2,
        Error::Io { .. } | Error::Parse { .. } => 3,
        Error::UndefinedMetric(_) => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
