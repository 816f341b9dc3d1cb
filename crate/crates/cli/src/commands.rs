use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use chrono::TimeDelta;
use pedflow::clustering::{medoid_panel, remove_abnormal_weeks, write_removed_weeks, WeekSlice};
use pedflow::graph;
use pedflow::ingest::{
    chronological_split, impute_missing, ingest_csv, load_sensor_locations, make_segment_windows, read_panel,
    select_sensors, write_panel, CountSchema, Normalizer, PanelSeries, WindowSample, TIMESTAMP_FORMAT,
};
use pedflow::model::{CellKind, ModelCheckpoint, ModelShape, Seq2SeqModel, Supports};
use pedflow::training::{
    evaluate as evaluate_metrics, forecast_windows, grid_search, train as train_model, var_fit, var_order_select,
    GridData, GridPoint,
};
use serde::Serialize;

use crate::artifact::{load_graph, RunArtifact, TrainedModel, ARTIFACT_FORMAT_VERSION};
use crate::config::{ModelName, RunConfig};
use crate::plot::{write_plot_csv, write_plot_svg, PlotPoint};
use crate::{
    BuildGraphArgs, Common, EvaluateArgs, ExportPlotArgs, ForecastArgs, GridArgs, IngestArgs, PreprocessArgs,
    TrainArgs,
};

const CONFIG_ECHO: &str = "effective_config.toml";

fn resolve(common: &Common) -> Result<RunConfig> {
    RunConfig::load(common.config.as_deref())?.with_overrides(&common.overrides)
}

fn required<'a>(value: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    value.as_deref().with_context(|| format!("{flag} is required (flag or config)"))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

/// Reads a panel and fills any missing hours.
fn load_panel(path: &Path) -> Result<PanelSeries> {
    let panel = read_panel(path)?;
    if panel.has_missing() {
        Ok(impute_missing(&panel)?)
    } else {
        Ok(panel)
    }
}

pub fn ingest(args: IngestArgs) -> Result<()> {
    let mut cfg = resolve(&args.common)?;
    if let Some(p) = args.input {
        cfg.paths.input = Some(p);
    }
    if let Some(p) = args.locations {
        cfg.paths.locations = Some(p);
    }
    if let Some(n) = args.select_sensors {
        cfg.ingest.select_sensors = Some(n);
    }
    if let Some(path) = &args.schema {
        let text = fs::read_to_string(path)
            .map_err(|_| pedflow::Error::InputNotFound(path.clone()))?;
        cfg.schema = toml::from_str::<CountSchema>(&text)
            .with_context(|| format!("invalid schema {}", path.display()))?;
    }

    let input = required(&cfg.paths.input, "--input")?;
    let mut panel = ingest_csv(input, &cfg.schema)?;
    if let Some(loc) = &cfg.paths.locations {
        panel.attach_locations(&load_sensor_locations(loc)?);
    }
    if let Some(n) = cfg.ingest.select_sensors {
        panel = select_sensors(&panel, n)?;
    }
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_panel(&panel, &args.out)?;
    eprintln!(
        "ingested {} sensors x {} hours ({} missing) -> {}",
        panel.num_sensors(),
        panel.len(),
        (0..panel.num_sensors()).map(|s| panel.missing_count(s)).sum::<usize>(),
        args.out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct WeekRef {
    cluster: usize,
    week_index: usize,
    start: String,
    size: usize,
}

#[derive(Serialize)]
struct RemovedRef {
    week_index: usize,
    start: String,
    distance: f64,
    critical_value: f64,
}

#[derive(Serialize)]
struct PreprocessReport {
    weeks: usize,
    best_k: usize,
    silhouette: Vec<(usize, f64)>,
    frequency: usize,
    dominant_cluster: usize,
    medoids: Vec<WeekRef>,
    removed: Vec<RemovedRef>,
    rows_before: usize,
    rows_after: usize,
}

pub fn preprocess(args: PreprocessArgs) -> Result<()> {
    let mut cfg = resolve(&args.common)?;
    if let Some(p) = args.panel {
        cfg.paths.panel = Some(p);
    }
    if let Some(k) = args.k_range {
        cfg.preprocess.k_range = k;
    }
    if let Some(r) = args.runs {
        cfg.preprocess.runs = r;
    }
    if let Some(q) = args.q {
        cfg.preprocess.tukey.q = q;
    }
    if let Some(s) = args.seed {
        cfg.preprocess.seed = s;
    }
    create_dir(&args.out)?;
    cfg.echo(&args.out, CONFIG_ECHO)?;

    let panel = load_panel(required(&cfg.paths.panel, "--panel")?)?;
    let report = remove_abnormal_weeks(&panel, &cfg.preprocess)?;

    write_panel(&report.panel, &args.out.join("clean.csv"))?;
    write_removed_weeks(&report.removed, &args.out.join("removed_weeks.csv"))?;
    write_panel(&medoid_panel(&panel, report.dominant_medoid())?, &args.out.join("medoid.csv"))?;
    for (c, m) in report.medoids.iter().enumerate() {
        write_panel(&medoid_panel(&panel, m)?, &args.out.join(format!("medoid_{c}.csv")))?;
    }

    let sizes = report.selection.clustering.cluster_sizes();
    let summary = PreprocessReport {
        weeks: report.weeks.len(),
        best_k: report.selection.best_k,
        silhouette: report.selection.scores.clone(),
        frequency: report.selection.frequency,
        dominant_cluster: report.dominant,
        medoids: report
            .medoids
            .iter()
            .enumerate()
            .map(|(c, m)| WeekRef {
                cluster: c,
                week_index: m.week_index,
                start: m.start.format(TIMESTAMP_FORMAT).to_string(),
                size: sizes[c],
            })
            .collect(),
        removed: report
            .removed
            .iter()
            .map(|r| RemovedRef {
                week_index: r.week_index,
                start: r.start.format(TIMESTAMP_FORMAT).to_string(),
                distance: r.distance,
                critical_value: r.critical_value,
            })
            .collect(),
        rows_before: panel.len(),
        rows_after: report.panel.len(),
    };
    write_json(&args.out.join("report.json"), &summary)?;
    eprintln!(
        "k = {}, removed {} of {} weeks -> {}",
        summary.best_k,
        summary.removed.len(),
        summary.weeks,
        args.out.display()
    );
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Medoid week with its columns reordered to `ids`.
fn medoid_week(path: &Path, ids: &[String]) -> Result<WeekSlice> {
    let medoid = read_panel(path)?;
    let cols = ids
        .iter()
        .map(|id| medoid.sensor_index(id).ok_or_else(|| pedflow::Error::UnknownSensor(id.clone())))
        .collect::<Result<Vec<_>, _>>()?;
    let medoid = medoid.select_columns(&cols);
    if medoid.has_missing() {
        bail!("medoid week {} has missing values", path.display());
    }
    let start = *medoid.timestamps().first().context("medoid week is empty")?;
    Ok(WeekSlice::rescale(medoid.values(), 0, 0, start))
}

pub fn build_graph(args: BuildGraphArgs) -> Result<()> {
    let mut cfg = resolve(&args.common)?;
    if let Some(p) = args.panel {
        cfg.paths.panel = Some(p);
    }
    if let Some(p) = args.medoid {
        cfg.paths.medoid = Some(p);
    }
    if let Some(p) = args.locations {
        cfg.paths.locations = Some(p);
    }
    if let Some(k) = args.kappa {
        cfg.graph.kappa = k;
    }
    if let Some(b) = args.beta {
        cfg.graph.beta = b;
    }
    cfg.graph.validate()?;
    create_dir(&args.out)?;
    cfg.echo(&args.out, CONFIG_ECHO)?;

    let mut panel = read_panel(required(&cfg.paths.panel, "--panel")?)?;
    if let Some(loc) = &cfg.paths.locations {
        panel.attach_locations(&load_sensor_locations(loc)?);
    }
    let medoid = cfg
        .paths
        .medoid
        .as_deref()
        .map(|p| medoid_week(p, &panel.sensor_ids()))
        .transpose()?;
    let graph = graph::build_graph(panel.sensors(), medoid.as_ref(), &cfg.graph)?;
    graph.save(&args.out)?;
    let edges = graph.w.iter().filter(|&&v| v > 0.0).count();
    eprintln!(
        "graph over {} sensors, {edges} nonzero weights, fingerprint {} -> {}",
        graph.num_nodes(),
        graph.fingerprint(),
        args.out.display()
    );
    Ok(())
}


/// Splits, normalizes and windows a panel for training.
struct Prepared {
    train_raw: PanelSeries,
    train: Vec<WindowSample>,
    val: Vec<WindowSample>,
    val_raw: Vec<WindowSample>,
    test_raw: Vec<WindowSample>,
    normalizer: Option<Normalizer>,
}

fn prepare(cfg: &RunConfig, panel: &PanelSeries, normalize: bool) -> Result<Prepared> {
    let w = &cfg.window;
    let (train, val, test) = chronological_split(panel, &cfg.split)?;
    let val_raw = make_segment_windows(&val, w.l_in, w.l_out, w.step)?;
    let test_raw = make_segment_windows(&test, w.l_in, w.l_out, 1)?;
    if !normalize {
        return Ok(Prepared {
            train_raw: train,
            train: Vec::new(),
            val: Vec::new(),
            val_raw,
            test_raw,
            normalizer: None,
        });
    }
    let normalizer = Normalizer::fit(&train)?;
    let train_w = make_segment_windows(&normalizer.normalize(&train)?, w.l_in, w.l_out, w.step)?;
    let val_w = make_segment_windows(&normalizer.normalize(&val)?, w.l_in, w.l_out, w.step)?;
    Ok(Prepared {
        train_raw: train,
        train: train_w,
        val: val_w,
        val_raw,
        test_raw,
        normalizer: Some(normalizer),
    })
}

/// β used to combine the adjacencies: DCGRU uses geography alone.
fn effective_beta(model: ModelName, beta: f64) -> f64 {
    match model {
        ModelName::DcgruDtw => beta,
        _ => 0.0,
    }
}

struct ModelFactory {
    name: ModelName,
    num_nodes: usize,
    hidden: usize,
    graph_dir: Option<PathBuf>,
}

impl ModelFactory {
    fn new(name: ModelName, panel: &PanelSeries, cfg: &RunConfig) -> Result<Self> {
        let graph_dir = match name {
            ModelName::Dcgru | ModelName::DcgruDtw => {
                Some(required(&cfg.paths.graph, "--graph")?.to_path_buf())
            }
            _ => None,
        };
        if let Some(dir) = &graph_dir {
            let graph = load_graph(dir, 0.0)?;
            if graph.sensor_ids != panel.sensor_ids() {
                bail!("graph sensors {:?} do not match panel sensors {:?}", graph.sensor_ids, panel.sensor_ids());
            }
        }
        Ok(Self {
            name,
            num_nodes: panel.num_sensors(),
            hidden: cfg.train.hidden,
            graph_dir,
        })
    }

    fn build(&self, layers: usize, k_max: usize, beta: f64, seed: u64) -> pedflow::Result<Seq2SeqModel> {
        let kind = match self.name {
            ModelName::Gru => CellKind::Gru,
            ModelName::Dcgru | ModelName::DcgruDtw => CellKind::Dcgru,
            ModelName::Var => unreachable!("VAR is not a sequence model"),
        };
        let shape = ModelShape {
            kind,
            num_nodes: self.num_nodes,
            layers,
            hidden: self.hidden,
            k_max,
        };
        let supports = match &self.graph_dir {
            Some(dir) => {
                let graph = load_graph(dir, effective_beta(self.name, beta))
                    .map_err(|e| pedflow::Error::Checkpoint(format!("{e:#}")))?;
                Some(Supports::from_graph(&graph, k_max)?)
            }
            None => None,
        };
        Seq2SeqModel::new(shape, supports, seed)
    }
}

pub fn train(args: TrainArgs) -> Result<()> {
    let mut cfg = resolve(&args.common)?;
    if let Some(m) = args.model {
        cfg.model = Some(m);
    }
    if let Some(p) = args.panel {
        cfg.paths.panel = Some(p);
    }
    if let Some(p) = args.graph {
        cfg.paths.graph = Some(p);
    }
    if let Some(s) = args.seed {
        cfg.train.seed = s;
    }
    if let Some(e) = args.epochs {
        cfg.train.epochs = e;
    }
    if let Some(o) = args.out {
        cfg.paths.out = Some(o);
    }
    let name = cfg.model.context("--model is required (flag or config)")?;
    if name == ModelName::Gru {
        cfg.paths.graph = None;
    }
    let out = required(&cfg.paths.out, "--out")?.to_path_buf();
    create_dir(&out)?;
    cfg.echo(&out, CONFIG_ECHO)?;

    let panel = load_panel(required(&cfg.paths.panel, "--panel")?)?;
    let data = prepare(&cfg, &panel, name != ModelName::Var)?;

    let artifact = if name == ModelName::Var {
        let selection = var_order_select(data.train_raw.values(), &cfg.var.orders, cfg.var.folds)?;
        let fit = var_fit(data.train_raw.values(), selection.order)?;
        let val_loss = evaluate_metrics(&fit, &data.val_raw)?.aggregate.mae;
        let mut log = String::from("order,cv_mae\n");
        for (order, score) in &selection.scores {
            log.push_str(&format!("{order},{score:?}\n"));
        }
        fs::write(out.join("train_log.csv"), log).context("writing train log")?;
        eprintln!("VAR order {} selected, validation MAE {val_loss:.4}", selection.order);
        RunArtifact {
            format_version: ARTIFACT_FORMAT_VERSION,
            model: name,
            l_in: cfg.window.l_in,
            l_out: cfg.window.l_out,
            split: cfg.split,
            normalizer: None,
            graph_dir: None,
            beta: 0.0,
            trained: TrainedModel::Var(fit),
            best_epoch: None,
            val_loss: Some(val_loss),
        }
    } else {
        let factory = ModelFactory::new(name, &panel, &cfg)?;
        let beta = effective_beta(name, cfg.graph.beta);
        let model = factory.build(cfg.train.layers, cfg.train.k_max, beta, cfg.train.seed)?;
        let outcome = train_model(model, &data.train, &data.val, &cfg.train)?;
        outcome.log.write(&out.join("train_log.csv"))?;
        eprintln!(
            "{name}: best epoch {} of {}, validation MAE (normalized) {:.5}",
            outcome.best_epoch, cfg.train.epochs, outcome.best_val_loss
        );
        RunArtifact {
            format_version: ARTIFACT_FORMAT_VERSION,
            model: name,
            l_in: cfg.window.l_in,
            l_out: cfg.window.l_out,
            split: cfg.split,
            normalizer: data.normalizer,
            graph_dir: factory.graph_dir,
            beta,
            trained: TrainedModel::Neural(ModelCheckpoint::from_model(&outcome.model)),
            best_epoch: Some(outcome.best_epoch),
            val_loss: Some(outcome.best_val_loss),
        }
    };
    artifact.save(&out.join("checkpoint.json"))?;
    eprintln!("checkpoint -> {}", out.join("checkpoint.json").display());
    Ok(())
}

pub fn grid(args: GridArgs) -> Result<()> {
    let mut cfg = resolve(&args.common)?;
    if let Some(m) = args.model {
        cfg.model = Some(m);
    }
    if let Some(p) = args.panel {
        cfg.paths.panel = Some(p);
    }
    if let Some(p) = args.graph {
        cfg.paths.graph = Some(p);
    }
    if let Some(r) = args.repeats {
        cfg.grid.repeats = r;
    }
    if let Some(o) = args.out {
        cfg.paths.out = Some(o);
    }
    let name = cfg.model.context("--model is required (flag or config)")?;
    match name {
        ModelName::Var => bail!("grid search applies to neural models; VAR selects its order in `train`"),
        ModelName::Gru => {
            cfg.paths.graph = None;
            cfg.grid.betas = vec![0.0];
            cfg.grid.k_max.truncate(1);
        }
        ModelName::Dcgru => cfg.grid.betas = vec![0.0],
        ModelName::DcgruDtw => {}
    }
    let out = required(&cfg.paths.out, "--out")?.to_path_buf();
    create_dir(&out)?;
    cfg.echo(&out, CONFIG_ECHO)?;

    let panel = load_panel(required(&cfg.paths.panel, "--panel")?)?;
    let data = prepare(&cfg, &panel, true)?;
    let normalizer = data.normalizer.clone().expect("neural data is normalized");
    let factory = ModelFactory::new(name, &panel, &cfg)?;
    let points = cfg.grid.points();
    let report = grid_search(
        &points,
        cfg.grid.repeats,
        &cfg.train,
        GridData {
            train: &data.train,
            val: &data.val,
            test: &data.test_raw,
            normalizer: &normalizer,
        },
        |p: &GridPoint, seed| factory.build(p.layers, p.k_max, p.beta, seed),
    )?;
    report.write_csv(&out.join("grid.csv"))?;

    let best = report.best.context("every grid cell failed; see grid.csv")?;
    let cell = &report.cells[best];
    let model = cell.model.as_ref().expect("best cell keeps its model");
    let best_run = cell.selected.and_then(|r| cell.repeats[r].outcome.as_ref().ok().copied());
    let artifact = RunArtifact {
        format_version: ARTIFACT_FORMAT_VERSION,
        model: name,
        l_in: cfg.window.l_in,
        l_out: cfg.window.l_out,
        split: cfg.split,
        normalizer: Some(normalizer),
        graph_dir: factory.graph_dir.clone(),
        beta: effective_beta(name, cell.point.beta),
        trained: TrainedModel::Neural(ModelCheckpoint::from_model(model)),
        best_epoch: best_run.map(|(_, e)| e),
        val_loss: best_run.map(|(l, _)| l),
    };
    let best_dir = out.join("best");
    create_dir(&best_dir)?;
    artifact.save(&best_dir.join("checkpoint.json"))?;
    let p = cell.point;
    eprintln!(
        "best of {} cells: lr {} batch {} layers {} K {} beta {} -> {}",
        report.cells.len(),
        p.learning_rate,
        p.batch_size,
        p.layers,
        p.k_max,
        p.beta,
        best_dir.display()
    );
    Ok(())
}

/// Loads the checkpoint and the panel named by flags or config.
fn load_for_inference(
    common: &Common,
    checkpoint: &Path,
    panel: Option<PathBuf>,
    graph: Option<PathBuf>,
) -> Result<(RunConfig, RunArtifact, crate::artifact::LoadedModel, PanelSeries)> {
    let mut cfg = resolve(common)?;
    if let Some(p) = panel {
        cfg.paths.panel = Some(p);
    }
    if let Some(g) = graph {
        cfg.paths.graph = Some(g);
    }
    let artifact = RunArtifact::load(checkpoint)?;
    let loaded = artifact.restore(cfg.paths.graph.as_deref())?;
    let panel = load_panel(required(&cfg.paths.panel, "--panel")?)?;
    if let Some(n) = &artifact.normalizer {
        if n.sensor_ids != panel.sensor_ids() {
            bail!("panel sensors {:?} do not match the checkpoint's {:?}", panel.sensor_ids(), n.sensor_ids);
        }
    }
    Ok((cfg, artifact, loaded, panel))
}

pub fn evaluate(args: EvaluateArgs) -> Result<()> {
    let (cfg, artifact, loaded, panel) =
        load_for_inference(&args.common, &args.checkpoint, args.panel, args.graph)?;
    let horizons = args.horizons.unwrap_or(cfg.evaluate.horizons);
    let (_, _, test) = chronological_split(&panel, &artifact.split)?;
    let windows = make_segment_windows(&test, artifact.l_in, artifact.l_out, 1)?;
    let report = evaluate_metrics(&*loaded.forecaster(), &windows)?.restrict(&horizons)?;

    let out = args
        .out
        .unwrap_or_else(|| args.checkpoint.with_file_name("metrics.csv"));
    report.write_csv(&out)?;
    print!("{}", report.to_csv());
    Ok(())
}

pub fn forecast(args: ForecastArgs) -> Result<()> {
    let (_, artifact, loaded, panel) = load_for_inference(&args.common, &args.checkpoint, args.panel, args.graph)?;
    let steps = args.steps.unwrap_or(artifact.l_out);
    if panel.len() < artifact.l_in {
        return Err(pedflow::Error::NotEnoughData(format!(
            "forecast needs {} rows of history, panel has {}",
            artifact.l_in,
            panel.len()
        ))
        .into());
    }
    let history = panel.slice_rows(panel.len() - artifact.l_in..panel.len());
    let pred = loaded.forecaster().forecast(&history.values().to_owned(), steps)?;

    let last = *panel.timestamps().last().expect("panel is not empty");
    let mut text = String::from("timestamp");
    for id in panel.sensor_ids() {
        text.push(',');
        text.push_str(&id);
    }
    text.push('\n');
    for (h, row) in pred.rows().into_iter().enumerate() {
        let ts = last + TimeDelta::hours(h as i64 + 1);
        text.push_str(&ts.format(TIMESTAMP_FORMAT).to_string());
        for v in row {
            text.push_str(&format!(",{v}"));
        }
        text.push('\n');
    }
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    fs::write(&args.out, text).with_context(|| format!("writing {}", args.out.display()))?;
    eprintln!("{steps} hours forecast -> {}", args.out.display());
    Ok(())
}

pub fn export_plot(args: ExportPlotArgs) -> Result<()> {
    let (_, artifact, loaded, panel) = load_for_inference(&args.common, &args.checkpoint, args.panel, args.graph)?;
    let columns = args
        .sensors
        .iter()
        .map(|id| panel.sensor_index(id).ok_or_else(|| pedflow::Error::UnknownSensor(id.clone())))
        .collect::<Result<Vec<_>, _>>()?;
    if args.weeks == 0 {
        bail!("--weeks must be at least 1");
    }

    let (test_start, _) = artifact.split.boundaries(panel.len());
    let hours = args.weeks * pedflow::clustering::HOURS_PER_WEEK;
    if test_start < artifact.l_in || test_start + hours > panel.len() {
        return Err(pedflow::Error::NotEnoughData(format!(
            "test segment starting at row {test_start} has {} rows, {hours} requested",
            panel.len() - test_start
        ))
        .into());
    }
    // One-step windows whose targets are the first `hours` test rows.
    let span = panel.slice_rows(test_start - artifact.l_in..test_start + hours);
    let windows = pedflow::ingest::make_windows(&span, artifact.l_in, 1, 1)?;
    let preds = forecast_windows(&*loaded.forecaster(), &windows)?;

    create_dir(&args.out)?;
    let timestamps = &panel.timestamps()[test_start..test_start + hours];
    for (id, &col) in args.sensors.iter().zip(&columns) {
        let points: Vec<PlotPoint> = timestamps
            .iter()
            .enumerate()
            .map(|(i, &ts)| PlotPoint {
                timestamp: ts,
                truth: panel.values()[[test_start + i, col]],
                prediction: preds[i][[0, col]],
            })
            .collect();
        let stem = file_stem(id);
        write_plot_csv(&args.out.join(format!("{stem}.csv")), &points)?;
        write_plot_svg(&args.out.join(format!("{stem}.svg")), id, &points)?;
    }
    eprintln!("{} plots over {hours} hours -> {}", args.sensors.len(), args.out.display());
    Ok(())
}

fn file_stem(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

