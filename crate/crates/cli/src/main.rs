use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{value_parser, Arg, ArgAction, ArgMatches, Command};
use hsm_core::clustering::build_balanced_dendrogram;
use hsm_core::engine::{Engine, EngineError, Mode};
use hsm_core::geometry::Frame;
use hsm_core::io::{
    engine_images, intrinsics_to_text, load_config, match_images, parse_intrinsics,
    parse_scene_spec, read_model, read_with, scene_spec_to_text, write_model, write_text,
    ConfigError, IoError, KeypointFile, MatchFile, PipelineConfig,
};
use hsm_core::synthetic::{baseline_rms, compare_to_truth, generate, SceneKind, SceneSpec};
use serde_json::{json, Value};

#[derive(Debug)]
enum CliError {
    Io(IoError),
    Config(String),
    NoModel,
    Eval(String),
}

impl From<IoError> for CliError {
    fn from(e: IoError) -> Self {
        CliError::Io(e)
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Io(e) => CliError::Io(e),
            ConfigError::Invalid(m) => CliError::Config(m),
        }
    }
}

impl CliError {
    fn report(&self) -> Value {
        match self {
            CliError::Io(IoError::File { path, source }) => json!({
                "error": "io", "path": path.display().to_string(), "message": source.to_string(),
            }),
            CliError::Io(IoError::Parse { path, error }) => json!({
                "error": "parse", "path": path.display().to_string(),
                "line": error.line, "message": error.message,
            }),
            CliError::Config(m) => json!({ "error": "config", "message": m }),
            CliError::NoModel => json!({ "error": "no_model", "message": "no model was produced" }),
            CliError::Eval(m) => json!({ "error": "eval", "message": m }),
        }
    }
}

fn config_args(cmd: Command) -> Command {
    let cmd = cmd.arg(
        Arg::new("config")
            .long("config")
            .value_parser(value_parser!(PathBuf))
            .help("key = value configuration file"),
    );
    PipelineConfig::keys().fold(cmd, |cmd, key| {
        cmd.arg(Arg::new(key).long(key).value_name("VALUE"))
    })
}

fn cli() -> Command {
    let path = |name: &'static str| {
        Arg::new(name)
            .long(name)
            .required(true)
            .value_parser(value_parser!(PathBuf))
    };
    Command::new("hsm")
        .about("Hierarchical structure-and-motion")
        .subcommand_required(true)
        .subcommand(
            Command::new("synth")
                .about("Generate a synthetic scene with keypoint files and ground truth")
                .arg(Arg::new("kind").long("kind").default_value("ring"))
                .arg(
                    Arg::new("cameras")
                        .long("cameras")
                        .default_value("8")
                        .value_parser(value_parser!(usize)),
                )
                .arg(
                    Arg::new("points")
                        .long("points")
                        .default_value("400")
                        .value_parser(value_parser!(usize)),
                )
                .arg(
                    Arg::new("noise")
                        .long("noise")
                        .default_value("0.5")
                        .value_parser(value_parser!(f64)),
                )
                .arg(
                    Arg::new("outliers")
                        .long("outliers")
                        .default_value("0")
                        .value_parser(value_parser!(f64)),
                )
                .arg(
                    Arg::new("seed")
                        .long("seed")
                        .default_value("0")
                        .value_parser(value_parser!(u64)),
                )
                .arg(path("out")),
        )
        .subcommand(config_args(
            Command::new("match").about("Broad and narrow matching of keypoint files"),
        ))
        .subcommand(config_args(
            Command::new("cluster").about("Report the balanced dendrogram of matched images"),
        ))
        .subcommand(config_args(
            Command::new("sam").about("Run the full reconstruction pipeline"),
        ))
        .subcommand(
            Command::new("eval")
                .about("Compare a reconstructed model with the synthetic ground truth")
                .arg(path("scene"))
                .arg(path("model"))
                .arg(
                    Arg::new("baseline")
                        .long("baseline")
                        .action(ArgAction::SetTrue)
                        .help("Also report the bundle-adjusted truth RMS"),
                ),
        )
}

fn pipeline_config(m: &ArgMatches) -> Result<PipelineConfig, CliError> {
    let file = m.get_one::<PathBuf>("config");
    let mut cfg = load_config(file.map(PathBuf::as_path), std::env::vars())?;
    for key in PipelineConfig::keys() {
        if let Some(v) = m.get_one::<String>(key) {
            cfg.set(key, v)
                .map_err(|e| CliError::Config(format!("--{key}: {e}")))?;
        }
    }
    cfg.validate().map_err(CliError::Config)?;
    Ok(cfg)
}

fn required<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path, CliError> {
    p.as_deref()
        .ok_or_else(|| CliError::Config(format!("missing path `{key}` (--{key})")))
}

fn keypoint_files(dir: &Path) -> Result<Vec<KeypointFile>, CliError> {
    let io = |source| IoError::File {
        path: dir.to_path_buf(),
        source,
    };
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io)?
        .map(|e| e.map(|e| e.path()).map_err(io))
        .collect::<Result<_, _>>()?;
    paths.retain(|p| p.extension().is_some_and(|e| e == "txt"));
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::Config(format!(
            "no keypoint files (*.txt) in {}",
            dir.display()
        )));
    }
    Ok(paths
        .iter()
        .map(|p| read_with(p, KeypointFile::parse))
        .collect::<Result<_, _>>()?)
}

fn synth(m: &ArgMatches) -> Result<Value, CliError> {
    let kind_name = m.get_one::<String>("kind").unwrap();
    let kind = SceneKind::parse(kind_name)
        .ok_or_else(|| CliError::Config(format!("unknown scene kind `{kind_name}`")))?;
    let spec = SceneSpec::new(
        kind,
        *m.get_one("cameras").unwrap(),
        *m.get_one("points").unwrap(),
        *m.get_one("seed").unwrap(),
    )
    .with_noise(
        *m.get_one("noise").unwrap(),
        *m.get_one("outliers").unwrap(),
    );
    let out = m.get_one::<PathBuf>("out").unwrap();
    let kp_dir = out.join("keypoints");
    fs::create_dir_all(&kp_dir).map_err(|source| IoError::File {
        path: kp_dir.clone(),
        source,
    })?;
    let scene = generate(&spec);
    for (i, kps) in scene.keypoints.iter().enumerate() {
        let file = KeypointFile {
            size: spec.image_size,
            keypoints: kps.clone(),
        };
        write_text(&kp_dir.join(format!("{i:05}.txt")), &file.to_text())?;
    }
    write_text(
        &out.join("intrinsics.txt"),
        &intrinsics_to_text(&scene.intrinsics()),
    )?;
    write_text(&out.join("scene.txt"), &scene_spec_to_text(&spec))?;
    write_model(&scene.truth_model(), &out.join("truth"))?;
    Ok(json!({ "images": scene.n_images(), "points": scene.points.len() }))
}

fn run_match(m: &ArgMatches) -> Result<Value, CliError> {
    let cfg = pipeline_config(m)?;
    let files = keypoint_files(required(&cfg.keypoints, "keypoints")?)?;
    let out = required(&cfg.matches, "matches")?;
    let edges = match_images(&files, &cfg);
    write_text(out, &MatchFile::from_edges(&edges).to_text())?;
    Ok(json!({ "images": files.len(), "edges": edges.len() }))
}

struct Inputs {
    cfg: PipelineConfig,
    files: Vec<KeypointFile>,
    matches: MatchFile,
    intrinsics: Option<std::collections::BTreeMap<usize, hsm_core::geometry::Intrinsics>>,
}

fn inputs(m: &ArgMatches) -> Result<Inputs, CliError> {
    let cfg = pipeline_config(m)?;
    if cfg.mode == Mode::Calibrated && cfg.intrinsics.is_none() {
        return Err(CliError::Config(
            "calibrated mode needs an intrinsics file (--intrinsics)".into(),
        ));
    }
    let files = keypoint_files(required(&cfg.keypoints, "keypoints")?)?;
    let matches = read_with(required(&cfg.matches, "matches")?, MatchFile::parse)?;
    let intrinsics = match (&cfg.intrinsics, cfg.mode) {
        (Some(p), Mode::Calibrated) => Some(read_with(p, parse_intrinsics)?),
        _ => None,
    };
    Ok(Inputs {
        cfg,
        files,
        matches,
        intrinsics,
    })
}

fn engine_error(e: EngineError) -> CliError {
    match e {
        EngineError::NoModel => CliError::NoModel,
        EngineError::Config(m) => CliError::Config(m),
    }
}

fn cluster(m: &ArgMatches) -> Result<Value, CliError> {
    let inp = inputs(m)?;
    let (tracks, classes) = inp.matches.graph(inp.cfg.final_min_track_length);
    let images = engine_images(&inp.files, inp.intrinsics.as_ref());
    let engine =
        Engine::new(&images, &tracks, &classes, inp.cfg.engine_config()).map_err(engine_error)?;
    let d = build_balanced_dendrogram(&engine.distances(), inp.cfg.cluster_l);
    print!("{}", d.report());
    Ok(json!({ "height": d.height(), "roots": d.roots().len() }))
}

fn sam(m: &ArgMatches) -> Result<Value, CliError> {
    let inp = inputs(m)?;
    let out = required(&inp.cfg.output, "output")?.to_path_buf();
    fs::create_dir_all(&out).map_err(|source| IoError::File {
        path: out.clone(),
        source,
    })?;
    let (tracks, classes) = inp.matches.graph(inp.cfg.final_min_track_length);
    let images = engine_images(&inp.files, inp.intrinsics.as_ref());
    let mut engine =
        Engine::new(&images, &tracks, &classes, inp.cfg.engine_config()).map_err(engine_error)?;
    let result = engine.run().map_err(engine_error)?;
    let log: String = result.actions.iter().map(|a| a.line() + "\n").collect();
    write_text(&out.join("actions.txt"), &log)?;
    write_text(&out.join("dendrogram.txt"), &result.dendrogram.report())?;
    let mut models = Vec::new();
    for (k, model) in result.models.iter().enumerate() {
        let prefix = out.join(format!("model_{k}"));
        write_model(model, &prefix)?;
        models.push(json!({
            "prefix": prefix.display().to_string(),
            "frame": if model.frame == Frame::Euclidean { "euclidean" } else { "projective" },
            "cameras": model.cameras.len(),
            "points": model.triangulated_count(),
            "mean_reprojection_error": model.reprojection_stats().0,
        }));
    }
    Ok(json!({ "models": models }))
}

fn eval(m: &ArgMatches) -> Result<Value, CliError> {
    let spec = read_with(m.get_one::<PathBuf>("scene").unwrap(), parse_scene_spec)?;
    let model = read_model(m.get_one::<PathBuf>("model").unwrap())?;
    let scene = generate(&spec);
    let c = compare_to_truth(&model, &scene).map_err(|e| CliError::Eval(e.to_string()))?;
    let mut report = json!({
        "cameras": model.cameras.len(),
        "points_compared": c.points_compared,
        "rms": c.similarity_rms,
        "max_focal_error": c.max_focal_error(),
    });
    if m.get_flag("baseline") {
        let b = baseline_rms(&scene).map_err(|e| CliError::Eval(e.to_string()))?;
        report["baseline_rms"] = json!(b);
        report["rms_ratio"] = json!(c.similarity_rms / b);
    }
    Ok(report)
}

fn run(args: Vec<OsString>) -> Result<Value, CliError> {
    let matches = cli().get_matches_from(args);
    match matches.subcommand() {
        Some(("synth", m)) => synth(m),
        Some(("match", m)) => run_match(m),
        Some(("cluster", m)) => cluster(m),
        Some(("sam", m)) => sam(m),
        Some(("eval", m)) => eval(m),
        _ => unreachable!("subcommand required"),
    }
}

fn main() -> ExitCode {
    match run(std::env::args_os().collect()) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.report());
            ExitCode::FAILURE
        }
    }
}
