//! `rdet`: predict, benchmark, fuse, inspect and self-test detectors.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use rdet_core::analysis::{cost_report, CostReport};
use rdet_core::image::Image;
use rdet_core::model_io::{init_random, load_weights, save_weights, Config, WeightStore};
use rdet_core::postprocess::Detection;
use rdet_core::predictor::{benchmark_grid, Pipeline};
use rdet_core::reparam::fuse_model;
use rdet_core::{selftest, Detector, Error};

const EXIT_IO: u8 = 2;
const EXIT_CONFIG: u8 = 3;
const EXIT_SELFTEST: u8 = 4;

#[derive(Parser, Debug)]
#[command(name = "rdet", version, about = "Anchor-free detector inference, fusion and benchmarking")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Detect objects in PPM images; writes detections.jsonl and annotated copies.
    Predict(PredictArgs),
    /// Time all eight export configurations.
    Bench(BenchArgs),
    /// Apply the fusion passes and write the fused weights.
    Fuse(FuseArgs),
    /// Print parameter and operation counts.
    Inspect(InspectArgs),
    /// Run the built-in equivalence and oracle checks.
    Selftest(SelftestArgs),
}

#[derive(Args, Debug)]
struct Common {
    /// Config file (`key = value` lines); defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set head.kind=tood`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Cap on worker threads (1 = reproducibility mode).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args, Debug)]
struct ModelSource {
    /// Weight file.
    #[arg(long, conflicts_with = "random_weights")]
    weights: Option<PathBuf>,
    /// Use seeded random weights instead of a weight file.
    #[arg(long)]
    random_weights: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    source: ModelSource,
    #[arg(long, num_args = 1.., required = true)]
    images: Vec<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Skip writing annotated images.
    #[arg(long)]
    no_annotate: bool,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    source: ModelSource,
    /// Images to cycle through; a synthetic 1280x960 image when omitted.
    #[arg(long, num_args = 1..)]
    images: Vec<PathBuf>,
    #[arg(long, default_value_t = 100)]
    iters: usize,
    #[arg(long, default_value_t = 10)]
    warmup: usize,
    /// Directory for bench.txt and bench.json.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct FuseArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    source: ModelSource,
    /// Fused weight file to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct InspectArgs {
    #[command(flatten)]
    common: Common,
    /// Report this weight file's form instead of the config's deploy and
    /// training forms.
    #[arg(long)]
    weights: Option<PathBuf>,
    /// JSON report file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SelftestArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    threads: Option<usize>,
}

/// A failure with its exit code.
#[derive(Debug)]
struct Failure {
    code: u8,
    msg: String,
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.msg)
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Io(_) | Error::BadMagic | Error::BadVersion(_) | Error::Checksum { .. } | Error::Malformed(_) | Error::Input(_) => {
                EXIT_IO
            }
            _ => EXIT_CONFIG,
        };
        Failure { code, msg: e.to_string() }
    }
}

type CliResult<T> = Result<T, Failure>;

fn io_fail(path: &Path, e: impl fmt::Display) -> Failure {
    Failure {
        code: EXIT_IO,
        msg: format!("{}: {e}", path.display()),
    }
}

/// Attaches the path to I/O-class errors.
fn at_path(path: &Path) -> impl Fn(Error) -> Failure + '_ {
    move |e| {
        let f = Failure::from(e);
        if f.code == EXIT_IO {
            io_fail(path, f.msg)
        } else {
            f
        }
    }
}

fn set_threads(n: Option<usize>) -> CliResult<()> {
    if let Some(n) = n {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| Failure {
                code: EXIT_CONFIG,
                msg: format!("cannot configure {n} threads: {e}"),
            })?;
    }
    Ok(())
}

fn load_config(common: &Common) -> CliResult<Config> {
    set_threads(common.threads)?;
    let mut cfg = Config::default();
    if let Some(path) = &common.config {
        let text = fs::read_to_string(path).map_err(|e| io_fail(path, e))?;
        cfg.apply(&text).map_err(|e| Failure {
            code: EXIT_CONFIG,
            msg: format!("{}: {e}", path.display()),
        })?;
    }
    cfg.apply_overrides(&common.overrides)?;
    Ok(cfg)
}

fn read_store(path: &Path) -> CliResult<WeightStore> {
    load_weights(path).map_err(at_path(path))
}

fn load_model(cfg: &Config, source: &ModelSource) -> CliResult<Detector> {
    let store = match (&source.weights, source.random_weights) {
        (Some(path), _) => read_store(path)?,
        (None, true) => init_random(&cfg.model, source.seed)?,
        (None, false) => {
            return Err(Failure {
                code: EXIT_CONFIG,
                msg: "no model weights: pass --weights FILE or --random-weights".into(),
            })
        }
    };
    let what = source.weights.as_deref().map(|p| p.display().to_string());
    Detector::load(&cfg.model, &store).map_err(|e| Failure {
        code: EXIT_CONFIG,
        msg: match what {
            Some(p) => format!("{p}: {e}"),
            None => e.to_string(),
        },
    })
}

fn read_image(path: &Path) -> CliResult<Image> {
    Image::read_ppm(path).map_err(at_path(path))
}

fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|e| io_fail(path, e))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> CliResult<()> {
    fs::write(path, bytes).map_err(|e| io_fail(path, e))
}

fn class_color(class_id: usize) -> [u8; 3] {
    const PALETTE: [[u8; 3]; 8] = [
        [255, 56, 56],
        [255, 157, 151],
        [255, 112, 31],
        [255, 178, 29],
        [72, 249, 10],
        [26, 147, 52],
        [0, 194, 255],
        [132, 56, 255],
    ];
    PALETTE[class_id % PALETTE.len()]
}

/// One JSON line: `{"image":..,"detections":[{"class","score","box"}..]}`.
fn detections_line(image: &Path, dets: &[Detection]) -> String {
    let dets: Vec<_> = dets
        .iter()
        .map(|d| format!(r#"{{"class":{},"score":{},"box":{}}}"#, d.class_id, json!(d.score), json!(d.bbox)))
        .collect();
    format!(r#"{{"image":{},"detections":[{}]}}"#, json!(image.display().to_string()), dets.join(","))
}

fn cmd_predict(a: &PredictArgs) -> CliResult<()> {
    let cfg = load_config(&a.common)?;
    let model = load_model(&cfg, &a.source)?;
    let images = a.images.iter().map(|p| read_image(p)).collect::<CliResult<Vec<_>>>()?;
    let pipe = Pipeline::build(&model, cfg.export.clone())?;
    let results = pipe.predict_many(&images)?;

    create_dir(&a.out)?;
    let mut lines = String::new();
    for (i, ((dets, _), path)) in results.iter().zip(&a.images).enumerate() {
        lines.push_str(&detections_line(path, dets));
        lines.push('\n');
        if !a.no_annotate {
            let mut img = images[i].clone();
            for d in dets {
                img.draw_rect(d.bbox, 2, class_color(d.class_id));
            }
            let stem = path.file_stem().map_or_else(|| format!("image{i}"), |s| s.to_string_lossy().into_owned());
            let dst = a.out.join(format!("{i:04}_{stem}.ppm"));
            img.write_ppm(&dst).map_err(at_path(&dst))?;
        }
    }
    write_file(&a.out.join("detections.jsonl"), &lines)?;
    let total: usize = results.iter().map(|(d, _)| d.len()).sum();
    println!("{} image(s), {total} detection(s) -> {}", images.len(), a.out.display());
    Ok(())
}

fn cmd_bench(a: &BenchArgs) -> CliResult<()> {
    let cfg = load_config(&a.common)?;
    let model = load_model(&cfg, &a.source)?;
    let images = if a.images.is_empty() {
        vec![Image::synthetic(960, 1280, a.source.seed)]
    } else {
        a.images.iter().map(|p| read_image(p)).collect::<CliResult<_>>()?
    };
    if a.iters == 0 {
        return Err(Failure {
            code: EXIT_CONFIG,
            msg: "--iters must be at least 1".into(),
        });
    }
    let report = benchmark_grid(&model, &cfg.export, &images, a.warmup, a.iters)?;
    let table = report.table();
    print!("{table}");
    if let Some(dir) = &a.out {
        create_dir(dir)?;
        write_file(&dir.join("bench.txt"), &table)?;
        write_file(&dir.join("bench.json"), report.to_json())?;
    }
    Ok(())
}

fn params_m(model: &Detector) -> f64 {
    rdet_core::analysis::count_params(model)[3] as f64 / 1e6
}

fn cmd_fuse(a: &FuseArgs) -> CliResult<()> {
    let cfg = load_config(&a.common)?;
    let model = load_model(&cfg, &a.source)?;
    let nodes = model.fusable_nodes();
    let fused = fuse_model(&model)?;
    if nodes == 0 {
        println!("no fusable nodes");
    } else {
        println!("fused {nodes} node(s)");
    }
    println!("params before: {:.4} M", params_m(&model));
    println!("params after:  {:.4} M", params_m(&fused));
    save_weights(&fused.export(), &a.out).map_err(at_path(&a.out))?;
    Ok(())
}

fn report_json(r: &CostReport) -> serde_json::Value {
    serde_json::to_value(r).expect("cost report serializes")
}

fn cmd_inspect(a: &InspectArgs) -> CliResult<()> {
    let cfg = load_config(&a.common)?;
    let size = cfg.model.input_size;
    let mut out = serde_json::Map::new();
    if let Some(path) = &a.weights {
        let model = Detector::load(&cfg.model, &read_store(path)?).map_err(|e| Failure {
            code: EXIT_CONFIG,
            msg: format!("{}: {e}", path.display()),
        })?;
        let r = cost_report(&model, size)?;
        println!("{} at {}x{}", path.display(), size.0, size.1);
        print!("{}", r.table());
        out.insert("model".into(), report_json(&r));
    } else {
        for (label, fused) in [("deploy", true), ("train", false)] {
            let r = rdet_core::analysis::cost_for_config(&cfg.model, fused)?;
            println!("{label} form at {}x{}", size.0, size.1);
            print!("{}", r.table());
            out.insert(label.into(), report_json(&r));
        }
    }
    if let Some(path) = &a.out {
        let text = serde_json::to_string_pretty(&out).expect("json");
        write_file(path, text)?;
    }
    Ok(())
}

fn cmd_selftest(a: &SelftestArgs) -> CliResult<()> {
    set_threads(a.threads)?;
    let checks = selftest::run(a.seed);
    let failed = checks.iter().filter(|c| !c.passed).count();
    for c in &checks {
        let status = if c.passed { "ok  " } else { "FAIL" };
        println!("{status} {} {}", c.name, c.detail);
    }
    if failed > 0 {
        return Err(Failure {
            code: EXIT_SELFTEST,
            msg: format!("{failed} of {} checks failed", checks.len()),
        });
    }
    println!("all {} checks passed", checks.len());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_CONFIG) } else { ExitCode::SUCCESS };
        }
    };
    let result = match &cli.cmd {
        Cmd::Predict(a) => cmd_predict(a),
        Cmd::Bench(a) => cmd_bench(a),
        Cmd::Fuse(a) => cmd_fuse(a),
        Cmd::Inspect(a) => cmd_inspect(a),
        Cmd::Selftest(a) => cmd_selftest(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code)
        }
    }
}
