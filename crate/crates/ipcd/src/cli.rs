//! The `ipcd` command line.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use ipcd_core::apps::{edit_texture, relight, Edit, Selection};
use ipcd_core::baselines::retinex_points;
use ipcd_core::model::{infer, Prediction};
use ipcd_core::{PointCloud, Rgb, Vec3};

use crate::config::Config;
use crate::dataset::{self, Split};
use crate::error::{IpcdError, Result};
use crate::formats::{
    metric_rows, metric_table, read_params, read_pld_csv, write_loss_history, write_metric_csv, write_params, write_pld_csv, write_pld_png,
    write_registration_csv,
};
use crate::pipeline::{evaluate, register, train_samples, Method};
use crate::ply::{read_ply, save_ply, PlyData, WriteOptions};

pub const SUMMARY_FILE: &str = "summary.json";

#[derive(Debug, Parser)]
#[command(name = "ipcd", version, about = "Intrinsic decomposition of colored point clouds", arg_required_else_help = true)]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML configuration file; defaults apply to missing keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one configuration key, `section.key=value`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Seed for every randomized step of the command.
    #[arg(long, global = true, value_parser = clap::value_parser!(u64).range(..=i64::MAX as u64))]
    pub seed: Option<u64>,
    /// Output directory; receives the results and summary.json.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Suppress progress output.
    #[arg(long, global = true)]
    pub quiet: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    GroundTruth,
    BaselineA,
    BaselineS,
    Retinex,
    Model,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ColorsArg {
    /// Observed colors.
    Input,
    /// Ground-truth albedo.
    Albedo,
    /// Albedo predicted by `--params`.
    Model,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic dataset into --out.
    Gen,
    /// Compute the PLD map of a point cloud.
    Pld {
        #[arg(long)]
        input: PathBuf,
        /// Also write a luma heatmap, pld.png.
        #[arg(long)]
        png: bool,
    },
    /// Train a network on a dataset split.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "train")]
        split: String,
    },
    /// Decompose a point cloud with trained parameters.
    Infer {
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// PLD CSV of the input; needed by networks with a PLD input.
        #[arg(long)]
        pld: Option<PathBuf>,
    },
    /// Decompose a point cloud with the graph Retinex.
    Retinex {
        #[arg(long)]
        input: PathBuf,
    },
    /// Score methods against the ground truth of a dataset split.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long = "method", value_enum, default_values_t = [MethodArg::BaselineA])]
        methods: Vec<MethodArg>,
        /// Parameters for `--method model`.
        #[arg(long)]
        params: Option<PathBuf>,
    },
    /// Registration recall with colored ICP over generated crop pairs.
    Register {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long = "colors", value_enum, default_values_t = [ColorsArg::Input, ColorsArg::Albedo])]
        colors: Vec<ColorsArg>,
        /// Parameters for `--colors model`.
        #[arg(long)]
        params: Option<PathBuf>,
    },
    /// Recombine an albedo with a new shade.
    Relight {
        /// PLY whose `albedo` channel (or colors) is the albedo.
        #[arg(long)]
        albedo: PathBuf,
        /// PLY whose `shade` channel (or colors) is the new shade.
        #[arg(long)]
        shade: PathBuf,
    },
    /// Edit the albedo of a region.
    Edit {
        /// PLY whose `albedo` channel (or colors) is the albedo.
        #[arg(long)]
        albedo: PathBuf,
        /// Axis-aligned box `xmin,ymin,zmin,xmax,ymax,zmax`.
        #[arg(long = "box", allow_hyphen_values = true, value_parser = parse_floats::<6>, conflicts_with = "indices", required_unless_present = "indices")]
        bbox: Option<[f64; 6]>,
        /// Point indices `i,j,...`.
        #[arg(long, value_delimiter = ',')]
        indices: Option<Vec<usize>>,
        /// New albedo `r,g,b`.
        #[arg(long, value_parser = parse_floats::<3>, conflicts_with = "hue_shift", required_unless_present = "hue_shift")]
        color: Option<[f64; 3]>,
        /// Hue rotation in degrees.
        #[arg(long, allow_hyphen_values = true)]
        hue_shift: Option<f64>,
    },
}

/// Parses exactly `N` comma-separated numbers.
fn parse_floats<const N: usize>(s: &str) -> std::result::Result<[f64; N], String> {
    let v: Vec<f64> = s.split(',').map(|t| t.trim().parse::<f64>().map_err(|e| format!("`{t}`: {e}"))).collect::<std::result::Result<_, _>>()?;
    v.try_into().map_err(|v: Vec<f64>| format!("expected {N} comma-separated numbers, got {}", v.len()))
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Gen => "gen",
            Command::Pld { .. } => "pld",
            Command::Train { .. } => "train",
            Command::Infer { .. } => "infer",
            Command::Retinex { .. } => "retinex",
            Command::Eval { .. } => "eval",
            Command::Register { .. } => "register",
            Command::Relight { .. } => "relight",
            Command::Edit { .. } => "edit",
        }
    }
}

struct Ctx {
    config: Config,
    out: PathBuf,
    quiet: bool,
    outputs: Vec<String>,
}

impl Ctx {
    fn log(&self, msg: &str) {
        if !self.quiet {
            eprintln!("{msg}");
        }
    }

    fn path(&mut self, name: &str) -> PathBuf {
        self.outputs.push(name.to_string());
        self.out.join(name)
    }
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn apply_seed(config: &mut Config, seed: u64) {
    config.gen.seed = seed;
    config.train.seed = seed;
    config.eval.seed = seed;
    config.register.seed = seed;
}

pub fn execute(cli: Cli) -> Result<()> {
    let common = cli.common;
    let mut config = Config::load(common.config.as_deref(), &common.overrides)?;
    if let Some(seed) = common.seed {
        apply_seed(&mut config, seed);
    }
    let out = common.out.ok_or_else(|| IpcdError::Usage(format!("`{}` needs --out <DIR>", cli.command.name())))?;
    fs::create_dir_all(&out).map_err(|e| IpcdError::io(&out, e))?;
    let mut ctx = Ctx { config, out, quiet: common.quiet, outputs: Vec::new() };
    let results = match &cli.command {
        Command::Gen => cmd_gen(&mut ctx)?,
        Command::Pld { input, png } => cmd_pld(&mut ctx, input, *png)?,
        Command::Train { data, split } => cmd_train(&mut ctx, data, split)?,
        Command::Infer { params, input, pld } => cmd_infer(&mut ctx, params, input, pld.as_deref())?,
        Command::Retinex { input } => cmd_retinex(&mut ctx, input)?,
        Command::Eval { data, split, methods, params } => cmd_eval(&mut ctx, data, split, methods, params.as_deref())?,
        Command::Register { data, split, colors, params } => cmd_register(&mut ctx, data, split, colors, params.as_deref())?,
        Command::Relight { albedo, shade } => cmd_relight(&mut ctx, albedo, shade)?,
        Command::Edit { albedo, bbox, indices, color, hue_shift } => cmd_edit(&mut ctx, albedo, *bbox, indices.as_deref(), *color, *hue_shift)?,
    };
    let config_json: Value = toml::from_str::<Value>(&ctx.config.to_toml()).unwrap_or(Value::Null);
    let summary = json!({
        "command": cli.command.name(),
        "status": "ok",
        "config": config_json,
        "outputs": ctx.outputs,
        "results": results,
    });
    let path = ctx.out.join(SUMMARY_FILE);
    let text = serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n";
    fs::write(&path, text).map_err(|e| IpcdError::io(&path, e))
}

fn cmd_gen(ctx: &mut Ctx) -> Result<Value> {
    let (gen, pld) = (ctx.config.gen.clone(), ctx.config.pld.clone());
    let quiet = ctx.quiet;
    let index = dataset::generate(&ctx.out, &gen, &pld, &mut |m| {
        if !quiet {
            eprintln!("{m}");
        }
    })?;
    ctx.outputs.push(dataset::SPLIT_FILE.into());
    Ok(json!({ "train": index.train, "test": index.test, "times": index.times, "points": index.points }))
}

fn cmd_pld(ctx: &mut Ctx, input: &Path, png: bool) -> Result<Value> {
    let cloud = read_ply(input)?.cloud;
    let map = dataset::pld_for(&cloud, &ctx.config.pld)?;
    write_pld_csv(ctx.path("pld.csv"), &map)?;
    if png {
        write_pld_png(ctx.path("pld.png"), &map, 8)?;
    }
    let luma = ipcd_core::projection::pld_luma(&map);
    let best = luma.iter().enumerate().fold((0, f64::MIN), |b, (i, &v)| if v > b.1 { (i, v) } else { b });
    let (ti, pi) = (best.0 / map.grid.phis.len(), best.0 % map.grid.phis.len());
    Ok(json!({ "directions": map.grid.len(), "brightest_theta": map.grid.thetas[ti], "brightest_phi": map.grid.phis[pi], "brightest_luma": best.1 }))
}

fn cmd_train(ctx: &mut Ctx, data: &Path, split: &str) -> Result<Value> {
    let cfg = ctx.config.train.to_train_config()?;
    let samples = dataset::load_split(data, Split::parse(split)?, cfg.arch.use_pld)?;
    ctx.log(&format!("training on {} samples, {} iterations", samples.len(), cfg.iterations));
    let every = (cfg.iterations / 20).max(1);
    let quiet = ctx.quiet;
    let output = train_samples(&samples, &cfg, |it, l| {
        if !quiet && (it + 1) % every == 0 {
            eprintln!("iteration {:>6}  loss {:.5}", it + 1, l.total);
        }
    })?;
    write_params(ctx.path("params.txt"), &output.params)?;
    write_loss_history(ctx.path("loss_history.csv"), &output.history)?;
    let last = output.history.last().map_or(f64::NAN, |l| l.total);
    Ok(json!({ "iterations": cfg.iterations, "final_loss": last, "parameters": output.params.parameter_count() }))
}

/// The `name` extra channel if present, else the colors.
fn channel_or_colors(data: &PlyData, name: &str) -> Vec<Rgb> {
    data.extras.get(name).cloned().unwrap_or_else(|| data.cloud.colors().to_vec())
}

fn write_decomposition(ctx: &mut Ctx, cloud: &PointCloud, p: &Prediction) -> Result<()> {
    let opts = WriteOptions::default();
    save_ply(cloud, ctx.path("decomposition.ply"), opts, &[("albedo", &p.albedo), ("shade", &p.shade)])?;
    save_ply(&cloud.with_colors(p.albedo.clone())?, ctx.path("albedo.ply"), opts, &[])?;
    save_ply(&cloud.with_colors(p.shade.clone())?, ctx.path("shade.ply"), opts, &[])
}

fn cmd_infer(ctx: &mut Ctx, params: &Path, input: &Path, pld: Option<&Path>) -> Result<Value> {
    let params = read_params(params)?;
    let cloud = read_ply(input)?.cloud;
    let map = pld.map(read_pld_csv).transpose()?;
    let pred = infer(&cloud, map.as_ref(), &params, &ctx.config.infer.to_infer_config())?;
    write_decomposition(ctx, &cloud, &pred)?;
    Ok(json!({ "points": cloud.len() }))
}

fn cmd_retinex(ctx: &mut Ctx, input: &Path) -> Result<Value> {
    let cloud = read_ply(input)?.cloud;
    let (pred, report) = retinex_points(&cloud, &ctx.config.retinex.to_retinex_config())?;
    write_decomposition(ctx, &cloud, &pred)?;
    Ok(json!({
        "points": cloud.len(),
        "cg_iterations": report.iterations,
        "relative_residual": report.relative_residual,
        "components": report.components,
        "albedo_edges": report.albedo_edges,
        "shade_edges": report.shade_edges,
    }))
}

fn model_method(ctx: &Ctx, params: Option<&Path>) -> Result<Method> {
    let path = params.ok_or_else(|| IpcdError::Usage("the model method needs --params <FILE>".into()))?;
    Ok(Method::Model { params: read_params(path)?, infer: ctx.config.infer.to_infer_config() })
}

fn cmd_eval(ctx: &mut Ctx, data: &Path, split: &str, methods: &[MethodArg], params: Option<&Path>) -> Result<Value> {
    let samples = dataset::load_split(data, Split::parse(split)?, true)?;
    let mut reports = Vec::new();
    let mut csv_rows = Vec::new();
    let mut results = serde_json::Map::new();
    for m in methods {
        let method = match m {
            MethodArg::GroundTruth => Method::GroundTruth,
            MethodArg::BaselineA => Method::BaselineA,
            MethodArg::BaselineS => Method::BaselineS,
            MethodArg::Retinex => Method::Retinex(ctx.config.retinex.to_retinex_config()),
            MethodArg::Model => model_method(ctx, params)?,
        };
        let name = method.name();
        ctx.log(&format!("evaluating {name} on {} samples", samples.len()));
        let outcome = evaluate(&samples, &method, &ctx.config.eval)?;
        csv_rows.extend(metric_rows(&name, &outcome.report));
        let r = &outcome.report;
        results.insert(
            name.clone(),
            json!({
                "albedo_mse": r.mean_albedo.mse, "albedo_mae": r.mean_albedo.mae, "albedo_psnr": r.mean_albedo.psnr,
                "shade_mse": r.mean_shade.mse, "shade_mae": r.mean_shade.mae, "shade_psnr": r.mean_shade.psnr,
                "albedo_pooled_psnr": r.pooled_psnr_albedo, "shade_pooled_psnr": r.pooled_psnr_shade,
                "pair_f1": outcome.pair_f1,
            }),
        );
        reports.push((name, outcome.report));
    }
    write_metric_csv(ctx.path("metrics.csv"), &csv_rows)?;
    if !ctx.quiet {
        print!("{}", metric_table(&reports));
    }
    Ok(Value::Object(results))
}

fn cmd_register(ctx: &mut Ctx, data: &Path, split: &str, colors: &[ColorsArg], params: Option<&Path>) -> Result<Value> {
    let needs_pld = colors.contains(&ColorsArg::Model);
    let samples = dataset::load_split(data, Split::parse(split)?, needs_pld)?;
    let mut rows = Vec::new();
    let mut results = serde_json::Map::new();
    for c in colors {
        let outcome = match c {
            ColorsArg::Input => register(&samples, "input", |s| Ok(s.triplet.cloud.colors().to_vec()), &ctx.config.register)?,
            ColorsArg::Albedo => register(&samples, "albedo", |s| Ok(s.triplet.albedo.clone()), &ctx.config.register)?,
            ColorsArg::Model => {
                let method = model_method(ctx, params)?;
                register(&samples, "model", |s| Ok(method.predict(s)?.albedo), &ctx.config.register)?
            }
        };
        let label = outcome.rows.first().map_or_else(|| format!("{c:?}").to_lowercase(), |r| r.colors.clone());
        ctx.log(&format!("{label}: recall {:.3} over {} cases", outcome.recall, outcome.rows.len()));
        for w in &outcome.warnings {
            ctx.log(&format!("warning: {w}"));
        }
        results.insert(label, json!({ "recall": outcome.recall, "cases": outcome.rows.len(), "warnings": outcome.warnings }));
        rows.extend(outcome.rows);
    }
    write_registration_csv(ctx.path("registration.csv"), &rows)?;
    Ok(Value::Object(results))
}

fn cmd_relight(ctx: &mut Ctx, albedo: &Path, shade: &Path) -> Result<Value> {
    let a = read_ply(albedo)?;
    let s = read_ply(shade)?;
    if a.cloud.len() != s.cloud.len() {
        return Err(IpcdError::format(shade, format!("{} points, albedo file has {}", s.cloud.len(), a.cloud.len())));
    }
    let colors = relight(&channel_or_colors(&a, "albedo"), &channel_or_colors(&s, "shade"))?;
    let out = a.cloud.with_colors(colors)?;
    save_ply(&out, ctx.path("relit.ply"), WriteOptions::default(), &[])?;
    Ok(json!({ "points": out.len() }))
}

fn cmd_edit(
    ctx: &mut Ctx,
    albedo: &Path,
    bbox: Option<[f64; 6]>,
    indices: Option<&[usize]>,
    color: Option<[f64; 3]>,
    hue: Option<f64>,
) -> Result<Value> {
    let data = read_ply(albedo)?;
    let selection = match (indices, bbox) {
        (Some(idx), _) => Selection::Indices(idx.to_vec()),
        (None, Some(b)) => Selection::Box { min: Vec3::new(b[0], b[1], b[2]), max: Vec3::new(b[3], b[4], b[5]) },
        (None, None) => return Err(IpcdError::Usage("edit needs --box or --indices".into())),
    };
    let edit = match (hue, color) {
        (Some(deg), _) => Edit::HueShift(deg),
        (None, Some(c)) => Edit::Set(c),
        (None, None) => return Err(IpcdError::Usage("edit needs --color or --hue-shift".into())),
    };
    let selected = selection.resolve(data.cloud.positions()).map_err(|e| IpcdError::Usage(e.to_string()))?.len();
    let edited = edit_texture(&channel_or_colors(&data, "albedo"), data.cloud.positions(), &selection, edit)?;
    let mut extras: Vec<(&str, &[Rgb])> = vec![("albedo", &edited)];
    if let Some(shade) = data.extras.get("shade") {
        extras.push(("shade", shade));
    }
    save_ply(&data.cloud, ctx.path("edited.ply"), WriteOptions::default(), &extras)?;
    Ok(json!({ "points": data.cloud.len(), "selected": selected }))
}
