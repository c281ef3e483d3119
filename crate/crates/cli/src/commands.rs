use std::fs;
use std::io::Write;
use std::net::TcpListener;
use std::path::{Path, PathBuf};

use droplex::calibration::{calibrate, read_points_csv, write_points_csv, CompensationMap, MapFile};
use droplex::detection::{deposit_events_in, deposit_events_streaming, detect_droplets, FrameDetections};
use droplex::heatmap::Session;
use droplex::learn::{
    assemble_framewise, container_features_from_session, fit_cnn, kfold_evaluate, kfold_forest, AssembleOptions,
    CnnConfig, ContainerOptions, FoldMode, ForestConfig, TrainConfig, LABEL_KEY,
};
use droplex::physics::{fit_physics_model, fit_quadratic_model, read_fit_csv, CellGeometry, FitReport};
use droplex::serve::{serve, FrameKind, SessionStore};
use droplex::simulator::{
    adulteration_classes, container_classes, generate_container_dataset, generate_dataset, run_scenario,
    simulate_calibration_points, DatasetSpec, ScenarioOp, SimConfig,
};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::CliError;
use crate::settings::{read_json, Settings};
use crate::{Classifier, Command, FoldModeArg, KindArg, ModelChoice, Task};

type Result<T> = std::result::Result<T, CliError>;

/// Scenario file: a bare list of operations, or operations with an inline
/// simulator configuration.
#[derive(Deserialize)]
#[serde(untagged)]
enum ScenarioFile {
    Ops(Vec<ScenarioOp>),
    Full {
        #[serde(default)]
        config: Option<SimConfig>,
        ops: Vec<ScenarioOp>,
    },
}

#[derive(Serialize)]
struct DatasetManifest {
    task: &'static str,
    seed: u64,
    sessions: Vec<ManifestEntry>,
}

#[derive(Serialize)]
struct ManifestEntry {
    file: String,
    label: String,
}

pub fn run(settings: &Settings, command: Command) -> Result<()> {
    match command {
        Command::Simulate {
            scenario,
            task,
            sim_config,
            per_class,
            pre_frames,
            post_frames,
            separation,
            quantize,
        } => {
            let mut config = load_sim_config(sim_config.as_deref())?;
            config.quantize |= quantize;
            match (scenario, task) {
                (Some(path), _) => {
                    let (inline, ops) = match read_json::<ScenarioFile>(&path)? {
                        ScenarioFile::Ops(ops) => (None, ops),
                        ScenarioFile::Full { config, ops } => (config, ops),
                    };
                    if let Some(c) = inline {
                        config = SimConfig {
                            quantize: c.quantize || quantize,
                            ..c
                        };
                    }
                    if let Some(seed) = settings.seed {
                        config.seed = seed;
                    }
                    let session = run_scenario(&config, &ops)?;
                    emit(settings.out.as_deref(), &session.to_json_string()?)
                }
                (None, Some(task)) => {
                    if let Some(seed) = settings.seed {
                        config.seed = seed;
                    }
                    let spec = DatasetSpec {
                        samples_per_class: per_class,
                        pre_frames,
                        post_frames,
                        ..DatasetSpec::default()
                    };
                    let (name, sessions) = match task {
                        Task::Adulteration => (
                            "adulteration",
                            generate_dataset(&config, &adulteration_classes(separation), &spec)?,
                        ),
                        Task::Containers => (
                            "containers",
                            generate_container_dataset(&config, &container_classes(), &spec)?,
                        ),
                    };
                    write_dataset(settings.out_path()?, name, config.seed, &sessions)
                }
                (None, None) => Err(CliError::usage("simulate needs --scenario or --task")),
            }
        }
        Command::Calibrate {
            points,
            simulate_stride,
            sim_config,
            rows,
            cols,
        } => {
            let out = settings.out_path()?;
            let (pts, rows, cols) = match (points, simulate_stride) {
                (Some(p), _) => (read_points_csv(settings.locate(&p))?, rows, cols),
                (None, Some(stride)) => {
                    let mut config = load_sim_config(sim_config.as_deref())?;
                    if let Some(seed) = settings.seed {
                        config.seed = seed;
                    }
                    let pts = simulate_calibration_points(&config, stride)?;
                    (pts, config.profile.rows, config.profile.cols)
                }
                (None, None) => return Err(CliError::usage("calibrate needs --points or --simulate-stride")),
            };
            let (sens, comp) = calibrate(&pts, rows, cols, settings.lambda, settings.epsilon)?;
            create_dir(out)?;
            write_file(&out.join("sensitivity.json"), &to_pretty(&MapFile::from(&sens))?)?;
            write_file(&out.join("compensation.json"), &to_pretty(&MapFile::from(&comp))?)?;
            write_points_csv(&pts, out.join("points.csv"))?;
            println!(
                "{}",
                json!({ "points": pts.len(), "rows": rows, "cols": cols, "out": out })
            );
            Ok(())
        }
        Command::Detect {
            frame,
            kind,
            window,
            compensation,
            events,
            streaming,
        } => {
            let (store, id) = single_session_store(settings, compensation.as_deref())?;
            let body = if events {
                let s = store.get(&id)?;
                let frames = (0..s.len()).map(|n| s.measured(n)).collect::<droplex::Result<Vec<_>>>()?;
                let ev = if streaming {
                    deposit_events_streaming(&frames, &settings.trigger)?
                } else {
                    deposit_events_in(&frames, &settings.trigger)?
                };
                serde_json::to_string_pretty(&ev)?
            } else {
                let f = store.frame(&id, frame, frame_kind(kind), window)?;
                let det = FrameDetections {
                    frame_index: frame,
                    regions: detect_droplets(&f, &settings.detection)?,
                };
                serde_json::to_string_pretty(&det)?
            };
            emit(settings.out.as_deref(), &body)
        }
        Command::Fit {
            data,
            model,
            device_units,
        } => {
            let mut samples = read_fit_csv(settings.locate(&data))?;
            if device_units {
                for s in &mut samples {
                    s.observed = -s.observed;
                }
            }
            let mut reports: Vec<FitReport> = Vec::new();
            if matches!(model, ModelChoice::Physics | ModelChoice::Both) {
                reports.push(fit_physics_model(&samples, &CellGeometry::reference())?.into());
            }
            if matches!(model, ModelChoice::Quadratic | ModelChoice::Both) {
                reports.push(fit_quadratic_model(&samples)?.into());
            }
            emit(settings.out.as_deref(), &serde_json::to_string_pretty(&reports)?)
        }
        Command::Train {
            sessions,
            epochs,
            compensation,
        } => {
            let out = settings.out_path()?;
            let sessions = load_dir_sessions(&settings.sessions_dir(sessions.as_deref())?)?;
            let comp = load_compensation(settings, compensation.as_deref())?;
            let ds = assemble_framewise(&sessions, &settings.detection, &assemble_options(settings), comp.as_ref())?;
            let tc = train_config(settings, epochs);
            let patches: Vec<&[f64]> = ds.samples.iter().map(|s| s.patch.as_slice()).collect();
            let (model, stats) = fit_cnn(&patches, &ds.labels(), ds.classes.clone(), &CnnConfig::default(), &tc)?;
            write_file(out, &model.to_json_string()?)?;
            let last = stats.last();
            println!(
                "{}",
                json!({
                    "classes": ds.classes,
                    "patches": ds.len(),
                    "regions": ds.region_count(),
                    "epochs": stats.len(),
                    "final": last,
                    "model": out,
                })
            );
            Ok(())
        }
        Command::Eval {
            sessions,
            classifier,
            fold_mode,
            epochs,
            compensation,
        } => {
            let sessions = load_dir_sessions(&settings.sessions_dir(sessions.as_deref())?)?;
            let comp = load_compensation(settings, compensation.as_deref())?;
            let report = match classifier {
                Classifier::Cnn => {
                    let ds =
                        assemble_framewise(&sessions, &settings.detection, &assemble_options(settings), comp.as_ref())?;
                    let mode = match fold_mode {
                        FoldModeArg::Region => FoldMode::Region,
                        FoldModeArg::Sample => FoldMode::Sample,
                    };
                    kfold_evaluate(&ds, &CnnConfig::default(), &train_config(settings, epochs), mode)?
                }
                Classifier::Forest => {
                    let opts = ContainerOptions {
                        trigger: settings.trigger,
                        detection: settings.detection,
                        ..ContainerOptions::default()
                    };
                    let mut labels = Vec::with_capacity(sessions.len());
                    let mut x = Vec::with_capacity(sessions.len());
                    for (i, s) in sessions.iter().enumerate() {
                        let label = s.label(LABEL_KEY).ok_or_else(|| {
                            CliError::from(droplex::Error::MissingLabel(format!("session {i} has no label")))
                        })?;
                        labels.push(label.to_string());
                        x.push(container_features_from_session(s, &opts, comp.as_ref())?.as_vector().to_vec());
                    }
                    let mut classes = labels.clone();
                    classes.sort();
                    classes.dedup();
                    let y: Vec<usize> = labels
                        .iter()
                        .map(|l| classes.binary_search(l).expect("class list built from labels"))
                        .collect();
                    let cfg = ForestConfig {
                        seed: settings.seed.unwrap_or(0),
                        ..ForestConfig::default()
                    };
                    kfold_forest(&x, &y, &classes, &cfg, settings.folds)?
                }
            };
            emit(settings.out.as_deref(), &serde_json::to_string_pretty(&report)?)
        }
        Command::Export { compensation } => {
            let out = settings.out_path()?;
            let (store, id) = single_session_store(settings, compensation.as_deref())?;
            let session = store.get(&id)?;
            let kind = if compensation.is_some() {
                FrameKind::Compensated
            } else {
                FrameKind::SampleDelta
            };
            let mut detections = Vec::with_capacity(session.len());
            for n in 0..session.len() {
                let f = store.frame(&id, n, kind, None)?;
                detections.push(FrameDetections {
                    frame_index: n,
                    regions: detect_droplets(&f, &settings.detection)?,
                });
            }
            let frames = (0..session.len()).map(|n| session.measured(n)).collect::<droplex::Result<Vec<_>>>()?;
            let events = json!({
                "batch": deposit_events_in(&frames, &settings.trigger)?,
                "streaming": deposit_events_streaming(&frames, &settings.trigger)?,
            });
            create_dir(out)?;
            session.save_json(out.join("session.json"))?;
            write_file(&out.join("detections.json"), &serde_json::to_string(&detections)?)?;
            write_file(&out.join("events.json"), &to_pretty(&events)?)?;
            let bundle = json!({
                "session": "session.json",
                "detections": "detections.json",
                "events": "events.json",
                "frame_kind": kind,
                "frames": session.len(),
                "rows": session.profile.rows,
                "cols": session.profile.cols,
                "detection_params": settings.detection,
                "trigger_params": settings.trigger,
            });
            write_file(&out.join("bundle.json"), &to_pretty(&bundle)?)
        }
        Command::Serve {
            sessions,
            addr,
            compensation,
        } => {
            let dir = settings.sessions_dir(sessions.as_deref())?;
            let comp = load_compensation(settings, compensation.as_deref())?;
            let store = SessionStore::new(dir, comp)?;
            let listener = TcpListener::bind(&addr).map_err(|e| CliError::io(Path::new(&addr), e))?;
            let local = listener.local_addr().map_err(|e| CliError::io(Path::new(&addr), e))?;
            println!("{}", json!({ "listening": local.to_string() }));
            std::io::stdout().flush().map_err(|e| CliError::io(Path::new("<stdout>"), e))?;
            serve(&store, listener).map_err(|e| CliError::io(Path::new(&addr), e))
        }
    }
}

fn frame_kind(k: KindArg) -> FrameKind {
    match k {
        KindArg::Raw => FrameKind::Raw,
        KindArg::Measured => FrameKind::Measured,
        KindArg::SampleDelta => FrameKind::SampleDelta,
        KindArg::Compensated => FrameKind::Compensated,
    }
}

fn assemble_options(settings: &Settings) -> AssembleOptions {
    AssembleOptions {
        frames_per_region: settings.frames_per_region,
        trigger: settings.trigger,
        ..AssembleOptions::default()
    }
}

fn train_config(settings: &Settings, epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        folds: settings.folds,
        frames_per_region: settings.frames_per_region,
        seed: settings.seed.unwrap_or(0),
        ..TrainConfig::default()
    }
}

fn load_sim_config(path: Option<&Path>) -> Result<SimConfig> {
    let config = match path {
        Some(p) => read_json(p)?,
        None => SimConfig::default(),
    };
    config.validate()?;
    Ok(config)
}

fn load_compensation(settings: &Settings, path: Option<&Path>) -> Result<Option<CompensationMap>> {
    path.map(|p| Ok(MapFile::load(settings.locate(p))?.into_compensation()?))
        .transpose()
}

/// A store rooted at the session's directory, plus the session's id in it.
/// Accepts `<id>.json`, a CSV sidecar `session.json`, or its directory.
fn single_session_store(settings: &Settings, compensation: Option<&Path>) -> Result<(SessionStore, String)> {
    let path = settings.session_path()?;
    if !path.exists() {
        return Err(CliError::io(
            &path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "session not found"),
        ));
    }
    let path = path.canonicalize().map_err(|e| CliError::io(&path, e))?;
    let (root, id) = if path.is_dir() || path.file_name().is_some_and(|n| n == "session.json") {
        let dir = if path.is_dir() { path.clone() } else { parent(&path) };
        (parent(&dir), file_name(&dir))
    } else if path.extension().is_some_and(|e| e == "json") {
        (parent(&path), stem(&path))
    } else {
        return Err(CliError::usage(format!("{} is not a session file", path.display())));
    };
    let comp = load_compensation(settings, compensation)?;
    Ok((SessionStore::new(root, comp)?, id))
}

fn parent(p: &Path) -> PathBuf {
    p.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."))
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Every session in a directory, in id order.
fn load_dir_sessions(dir: &Path) -> Result<Vec<Session>> {
    let store = SessionStore::new(dir, None)?;
    let ids = store.ids()?;
    if ids.is_empty() {
        return Err(droplex::Error::InsufficientData(format!("no sessions in {}", dir.display())).into());
    }
    ids.iter().map(|id| Ok(store.get(id)?.as_ref().clone())).collect()
}

fn write_dataset(out: &Path, task: &'static str, seed: u64, sessions: &[Session]) -> Result<()> {
    create_dir(out)?;
    let mut entries = Vec::with_capacity(sessions.len());
    for (i, s) in sessions.iter().enumerate() {
        let file = format!("session-{i:04}.json");
        s.save_json(out.join(&file))?;
        entries.push(ManifestEntry {
            file,
            label: s.label(LABEL_KEY).unwrap_or_default().to_string(),
        });
    }
    let manifest = DatasetManifest {
        task,
        seed,
        sessions: entries,
    };
    write_file(&out.join("manifest.json"), &to_pretty(&manifest)?)
}

fn to_pretty<T: Serialize>(v: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(v)?)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_file(path: &Path, body: &str) -> Result<()> {
    let mut text = body.to_string();
    if !text.ends_with('\n') {
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// Writes to `out` when given, else to stdout.
fn emit(out: Option<&Path>, body: &str) -> Result<()> {
    match out {
        Some(p) => write_file(p, body),
        None => {
            let mut stdout = std::io::stdout().lock();
            match writeln!(stdout, "{body}").and_then(|_| stdout.flush()) {
                Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(CliError::io(Path::new("<stdout>"), e)),
                _ => Ok(()),
            }
        }
    }
}
