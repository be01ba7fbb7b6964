use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use blendfield::geometry::CameraPose;
use blendfield::guidance::{serve_protocol, MockScorer};
use blendfield::math::Vec3;
use blendfield::metrics::{direction_consistency, direction_similarity, masked_bg_mad, r_precision, roi_mask, MetricsReport};
use blendfield::raster::{Image, Resolution};
use blendfield::renderer::io::{encode_depth, read_png, write_png};
use blendfield::renderer::RenderOutput;
use blendfield::trainer::{init_state, train_from, TrainConfig, TrainState, GENERATOR_FILE};
use blendfield_service::api::{edit_config, parse_resolution, router, AppState, DEFAULT_MAX_SIDE};
use blendfield_service::jobs::{default_target, ScorerSpec};
use blendfield_service::scene::{load_edit, read_edit, EditDescriptor, Scene, SceneDescriptor, WirePose, TEST_SCENE};
use blendfield_service::{ServiceError, DEFAULT_SEED};
use clap::{Args, Parser, Subcommand, ValueEnum};

/// Scene argument naming the built-in analytic scene instead of a file.
const BUILTIN_PREFIX: &str = "builtin:";

#[derive(Parser)]
#[command(name = "blendfield", version, about = "Radiance-field editing inside a 3D box")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the original scene.
    Render {
        scene: String,
        #[command(flatten)]
        view: ViewArgs,
    },
    /// Train a generator for an edit; writes the state and `edit.json` to `--out`.
    EditTrain {
        scene: String,
        edit: PathBuf,
        #[command(flatten)]
        scorer: ScorerArgs,
        #[arg(long)]
        out: PathBuf,
        /// Training config JSON; unspecified fields take defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        steps: Option<u64>,
        /// Training render side length.
        #[arg(long)]
        res: Option<usize>,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        /// Continue from the state saved in `--out`.
        #[arg(long)]
        resume: bool,
        /// Save and exit once this many steps are done; `--resume` continues.
        #[arg(long)]
        stop_at: Option<u64>,
        #[arg(long, default_value_t = DEFAULT_SEED)]
        seed: u64,
    },
    /// Render the edited scene.
    BlendRender {
        scene: String,
        edit: PathBuf,
        #[command(flatten)]
        view: ViewArgs,
    },
    /// Score an edit on an orbit of frames around its box; prints a JSON report.
    Evaluate {
        scene: String,
        edit: PathBuf,
        #[command(flatten)]
        scorer: ScorerArgs,
        /// Caption of the unedited scene.
        #[arg(long)]
        original_caption: String,
        /// Extra captions for retrieval, one per line.
        #[arg(long)]
        pool: Option<PathBuf>,
        #[arg(long, default_value_t = 6)]
        frames: usize,
        #[arg(long, default_value_t = 10.0)]
        spacing_deg: f64,
        #[arg(long, default_value = "64")]
        res: String,
        #[arg(long, default_value_t = DEFAULT_SEED)]
        seed: u64,
    },
    /// Serve the HTTP interface.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// Scene descriptors; the built-in scene is served when none is given.
        #[arg(long = "scene")]
        scenes: Vec<String>,
        #[arg(long)]
        data_dir: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_MAX_SIDE)]
        max_side: usize,
        #[command(flatten)]
        scorer: ScorerArgs,
        #[arg(long, default_value_t = DEFAULT_SEED)]
        seed: u64,
    },
    /// Print the built-in scene descriptor, or an example edit with `--edit`.
    SceneTemplate {
        #[arg(long)]
        edit: bool,
        #[arg(long, default_value_t = DEFAULT_SEED)]
        seed: u64,
    },
    /// Answer scorer requests on stdin/stdout with the mock scorer.
    MockScorer {
        #[arg(long)]
        caption: String,
        /// Target image; a red disc when absent.
        #[arg(long)]
        target: Option<PathBuf>,
        #[arg(long, default_value_t = 32)]
        res: usize,
        #[arg(long, default_value_t = DEFAULT_SEED)]
        seed: u64,
    },
}

#[derive(Args)]
struct ViewArgs {
    /// Camera as JSON `{position, look_at, up, afov_deg}` or `@file`;
    /// repeat for several frames. Defaults to the scene camera.
    #[arg(long)]
    pose: Vec<String>,
    /// `N` or `WxH`.
    #[arg(long)]
    res: Option<String>,
    /// Output PNG; with several poses, a directory of `frame_NNN.png`.
    #[arg(long)]
    out: PathBuf,
    /// Also write the depth map (`BFDEPTH` container).
    #[arg(long)]
    depth: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScorerKind {
    Mock,
    External,
}

#[derive(Args)]
struct ScorerArgs {
    #[arg(long, value_enum, default_value = "mock")]
    scorer: ScorerKind,
    /// Mock target PNG.
    #[arg(long)]
    target: Option<PathBuf>,
    /// External scorer program.
    #[arg(long)]
    scorer_cmd: Option<String>,
    /// Argument for the external scorer; repeatable.
    #[arg(long = "scorer-arg", allow_hyphen_values = true)]
    scorer_args: Vec<String>,
}

impl ScorerArgs {
    fn spec(&self, seed: u64) -> Result<ScorerSpec, ServiceError> {
        match self.scorer {
            ScorerKind::Mock => Ok(ScorerSpec::Mock {
                target: self.target.as_deref().map(load_png).transpose()?,
                seed,
            }),
            ScorerKind::External => Ok(ScorerSpec::External {
                program: self
                    .scorer_cmd
                    .clone()
                    .ok_or_else(|| ServiceError::BadRequest("--scorer external needs --scorer-cmd".into()))?,
                args: self.scorer_args.clone(),
            }),
        }
    }
}

fn load_png(path: &Path) -> Result<Image, ServiceError> {
    read_png(path).map_err(|e| ServiceError::BadRequest(format!("{}: {e}", path.display())))
}

fn save_png(path: &Path, img: &Image) -> Result<(), ServiceError> {
    write_png(path, img).map_err(|e| ServiceError::Io(format!("{}: {e}", path.display())))
}

fn load_scene(arg: &str) -> Result<Scene, ServiceError> {
    match arg.strip_prefix(BUILTIN_PREFIX) {
        Some(TEST_SCENE) => Ok(Scene::test_scene()),
        Some(other) => Err(ServiceError::BadRequest(format!("unknown built-in scene {other:?}"))),
        None => Scene::load(Path::new(arg)),
    }
}

fn parse_pose(arg: &str) -> Result<CameraPose, ServiceError> {
    let text = match arg.strip_prefix('@') {
        Some(path) => std::fs::read_to_string(path).map_err(|e| ServiceError::Io(format!("{path}: {e}")))?,
        None => arg.to_string(),
    };
    let wire: WirePose = serde_json::from_str(&text).map_err(|e| ServiceError::BadRequest(format!("pose: {e}")))?;
    wire.to_pose()
}

fn poses(view: &ViewArgs, scene: &Scene) -> Result<Vec<CameraPose>, ServiceError> {
    if view.pose.is_empty() {
        return Ok(vec![scene.descriptor.default_camera.to_pose()?]);
    }
    view.pose.iter().map(|p| parse_pose(p)).collect()
}

fn write_renders(view: &ViewArgs, outputs: &[RenderOutput]) -> Result<(), ServiceError> {
    if let [single] = outputs {
        save_png(&view.out, &single.rgb)?;
        if let Some(d) = &view.depth {
            std::fs::write(d, encode_depth(&single.depth))?;
        }
        return Ok(());
    }
    std::fs::create_dir_all(&view.out)?;
    for (i, o) in outputs.iter().enumerate() {
        save_png(&view.out.join(format!("frame_{i:03}.png")), &o.rgb)?;
    }
    if let Some(d) = &view.depth {
        std::fs::create_dir_all(d)?;
        for (i, o) in outputs.iter().enumerate() {
            std::fs::write(d.join(format!("frame_{i:03}.depth")), encode_depth(&o.depth))?;
        }
    }
    Ok(())
}

fn resolution_arg(res: &Option<String>) -> Result<Option<Resolution>, ServiceError> {
    res.as_deref().map(|r| parse_resolution(r, usize::MAX)).transpose()
}

fn example_edit() -> EditDescriptor {
    EditDescriptor {
        scene_id: TEST_SCENE.into(),
        roi: blendfield::fields::AnalyticScene::test_scene_empty_roi(),
        blend: blendfield::blending::BlendMode::Replace,
        caption: "a red disc".into(),
        ema_center: None,
        generator: None,
        texture_only: false,
    }
}

/// `n` cameras orbiting the box center about the vertical axis, starting
/// from the scene camera, `spacing_deg` apart.
fn orbit(scene: &Scene, center: Vec3, n: usize, spacing_deg: f64) -> Result<Vec<CameraPose>, ServiceError> {
    let cam = scene.descriptor.default_camera;
    let offset = cam.position - center;
    (0..n)
        .map(|i| {
            let (s, c) = (i as f64 * spacing_deg).to_radians().sin_cos();
            let rotated = Vec3::new(c * offset.x + s * offset.z, offset.y, -s * offset.x + c * offset.z);
            WirePose {
                position: center + rotated,
                look_at: center,
                up: cam.up,
                afov_deg: cam.afov_deg,
            }
            .to_pose()
        })
        .collect()
}

fn print_json(v: &impl serde::Serialize) -> Result<(), ServiceError> {
    let text = serde_json::to_string_pretty(v).map_err(|e| ServiceError::Internal(e.to_string()))?;
    println!("{text}");
    Ok(())
}

fn run(cli: Cli) -> Result<(), ServiceError> {
    match cli.command {
        Command::Render { scene, view } => {
            let scene = load_scene(&scene)?;
            let res = resolution_arg(&view.res)?;
            let outputs = poses(&view, &scene)?
                .iter()
                .map(|p| scene.render(p, res, view.seed))
                .collect::<Result<Vec<_>, _>>()?;
            write_renders(&view, &outputs)
        }
        Command::BlendRender { scene, edit, view } => {
            let scene = load_scene(&scene)?;
            let (edit, generator) = load_edit(&edit)?;
            scene.validate_edit(&edit)?;
            let res = resolution_arg(&view.res)?;
            let outputs = poses(&view, &scene)?
                .iter()
                .map(|p| scene.render_edited(&edit, &generator, p, res, view.seed))
                .collect::<Result<Vec<_>, _>>()?;
            write_renders(&view, &outputs)
        }
        Command::EditTrain {
            scene,
            edit,
            scorer,
            out,
            config,
            steps,
            res,
            samples,
            lr,
            resume,
            stop_at,
            seed,
        } => {
            let scene = load_scene(&scene)?;
            let edit = read_edit(&edit)?;
            scene.validate_edit(&edit)?;
            let base = match config {
                Some(p) => {
                    let text = std::fs::read(&p).map_err(|e| ServiceError::Io(format!("{}: {e}", p.display())))?;
                    serde_json::from_slice(&text)
                        .map_err(|e| ServiceError::BadRequest(format!("{}: {e}", p.display())))?
                }
                None => TrainConfig::default(),
            };
            let mut cfg = edit_config(base, &edit, &scene);
            cfg.seed = seed;
            if let Some(s) = steps {
                cfg.steps = s;
            }
            if let Some(r) = res {
                cfg.resolution = Resolution::square(r);
            }
            if let Some(s) = samples {
                cfg.samples_per_ray = s;
            }
            if let Some(lr) = lr {
                cfg.learning_rate = lr;
                cfg.final_learning_rate = cfg.final_learning_rate.min(lr);
            }
            cfg.validate()?;
            let state = if resume {
                TrainState::load(&out)?.0
            } else {
                init_state(&scene.field, &cfg)?
            };
            let scorer = scorer.spec(seed)?.build(&edit.caption, cfg.resolution)?;
            let outcome = train_from(
                state,
                &scene.field,
                &edit.roi,
                &edit.caption,
                &cfg,
                scorer.as_ref(),
                Some(&out),
                |s| {
                    if let Some(r) = s.history.last() {
                        eprintln!(
                            "{}",
                            serde_json::json!({"step": s.step, "loss": r.loss.total, "similarity": r.loss.similarity})
                        );
                    }
                    if stop_at.is_some_and(|n| s.step >= n) {
                        std::ops::ControlFlow::Break(())
                    } else {
                        std::ops::ControlFlow::Continue(())
                    }
                },
            )?;
            let trained = EditDescriptor {
                ema_center: Some(outcome.summary.ema_center),
                generator: Some(GENERATOR_FILE.into()),
                ..edit
            };
            let text = serde_json::to_vec_pretty(&trained).map_err(|e| ServiceError::Internal(e.to_string()))?;
            std::fs::write(out.join("edit.json"), text)?;
            print_json(&outcome.summary)
        }
        Command::Evaluate {
            scene,
            edit,
            scorer,
            original_caption,
            pool,
            frames,
            spacing_deg,
            res,
            seed,
        } => {
            let scene = load_scene(&scene)?;
            let (edit, generator) = load_edit(&edit)?;
            scene.validate_edit(&edit)?;
            let res = parse_resolution(&res, usize::MAX)?;
            let cams = orbit(&scene, edit.roi.center(), frames.max(1), spacing_deg)?;
            let original: Vec<Image> = cams
                .iter()
                .map(|p| scene.render(p, Some(res), seed).map(|o| o.rgb))
                .collect::<Result<_, _>>()?;
            let edited: Vec<Image> = cams
                .iter()
                .map(|p| scene.render_edited(&edit, &generator, p, Some(res), seed).map(|o| o.rgb))
                .collect::<Result<_, _>>()?;
            let scorer = scorer.spec(seed)?.build(&edit.caption, res)?;
            let s = scorer.as_ref();

            let mut report = MetricsReport::default();
            let warn = |what: &str, e: &dyn std::fmt::Display| eprintln!("{}", serde_json::json!({"warning": what, "message": e.to_string()}));
            match direction_similarity(s, &original[0], &edited[0], &original_caption, &edit.caption) {
                Ok(v) => report.direction_similarity = Some(v),
                Err(e) => warn("direction_similarity", &e),
            }
            match direction_consistency(s, &original, &edited) {
                Ok(c) => {
                    report.direction_consistency = Some(c.mean);
                    report.degenerate_pairs = c.degenerate;
                }
                Err(e) => warn("direction_consistency", &e),
            }
            let mut captions = vec![edit.caption.clone(), original_caption.clone()];
            if let Some(p) = pool {
                let text = std::fs::read_to_string(&p).map_err(|e| ServiceError::Io(format!("{}: {e}", p.display())))?;
                captions.extend(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from));
            }
            let mut seen = std::collections::HashSet::new();
            captions.retain(|c| seen.insert(c.clone()));
            let pool_refs: Vec<&str> = captions.iter().map(String::as_str).collect();
            let truth = vec![edit.caption.as_str(); edited.len()];
            match r_precision(s, &edited, &truth, &pool_refs) {
                Ok(v) => report.r_precision = Some(v),
                Err(e) => warn("r_precision", &e),
            }
            let mads: Result<Vec<f64>, _> = cams
                .iter()
                .zip(original.iter().zip(&edited))
                .map(|(p, (o, e))| masked_bg_mad(o, e, &roi_mask(&edit.roi, p, res)))
                .collect();
            match mads {
                Ok(m) => report.masked_bg_mad = Some(m.iter().sum::<f64>() / m.len() as f64),
                Err(e) => warn("masked_bg_mad", &e),
            }
            print_json(&report)
        }
        Command::Serve {
            port,
            host,
            scenes,
            data_dir,
            max_side,
            scorer,
            seed,
        } => {
            let loaded = if scenes.is_empty() {
                vec![Scene::test_scene()]
            } else {
                scenes.iter().map(|s| load_scene(s)).collect::<Result<_, _>>()?
            };
            let mut state = AppState::new(loaded, scorer.spec(seed)?);
            state.max_side = max_side;
            state.data_dir = data_dir;
            let app = router(Arc::new(state));
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::bind((host.as_str(), port)).await?;
                eprintln!("{}", serde_json::json!({"listening": listener.local_addr()?.to_string()}));
                axum::serve(listener, app).await
            })?;
            Ok(())
        }
        Command::SceneTemplate { edit, seed: _ } => {
            if edit {
                print_json(&example_edit())
            } else {
                print_json(&SceneDescriptor::test_scene())
            }
        }
        Command::MockScorer {
            caption,
            target,
            res,
            seed,
        } => {
            let target = match target {
                Some(p) => load_png(&p)?,
                None => default_target(Resolution::square(res)),
            };
            let mock = MockScorer::with_target(&target, &caption, seed);
            let stdin = std::io::stdin();
            serve_protocol(&mock, BufReader::new(stdin.lock()), std::io::stdout().lock())?;
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::FAILURE
        }
    }
}
