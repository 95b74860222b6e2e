//! The pipeline commands. Each is a pure function of the configuration,
//! its inputs and the seed.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use ifnet::geometry::io::{load_mesh, load_xyz, save_mesh, save_xyz};
use ifnet::geometry::{
    depth_cull, gen_synthetic, sample_surface, voxelize_mesh, voxelize_points, ShapeKind, ShapeParams, TriMesh,
    VoxelGrid,
};
use ifnet::mesher::{evaluate_field, marching_cubes};
use ifnet::metrics::{evaluate, MetricReport};
use ifnet::model::ModelParams;
use ifnet::sampler::{read_dataset, sample_training_points, write_dataset, SamplerConfig, ShapeRecord};
use ifnet::trainer::{train_steps, LossRow, StopReason, TrainState, LOSS_CSV_HEADER};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::{RunConfig, Task};

/// Result of a command that ran to completion.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    Success,
    /// Some rows or checks failed; artifacts were still written.
    Failed,
    /// A reconstruction had no surface.
    EmptyOutput,
}

impl Outcome {
    pub fn exit_code(self) -> i32 {
        match self {
            Outcome::Success => 0,
            Outcome::Failed => 1,
            Outcome::EmptyOutput => 3,
        }
    }
}

const SPLIT_STREAM: u64 = 0x7370_6c69_7400_0001;

pub const MANIFEST: &str = "manifest.tsv";
pub const STATE_FILE: &str = "state.ifck";
pub const MODEL_FILE: &str = "model.ifck";
pub const LOSS_FILE: &str = "loss.csv";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => bail!("unknown split {s:?}, expected train, val or test"),
        }
    }

    pub fn dataset_file(self) -> String {
        format!("{}.ifds", self.name())
    }
}

/// One row of the dataset manifest.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub kind: ShapeKind,
    pub split: Split,
    pub mesh: String,
    pub input: String,
    /// Point cloud the input was voxelized from, if any.
    pub cloud: Option<String>,
}

/// Sizes of the three splits: validation and test take the floor of
/// their fractions, training takes the remainder.
pub fn split_sizes(n: usize, val_fraction: f64, test_fraction: f64) -> (usize, usize, usize) {
    let val = (val_fraction * n as f64).floor() as usize;
    let test = (test_fraction * n as f64).floor() as usize;
    (n - val - test, val, test)
}

pub fn read_manifest(data_dir: &Path) -> Result<Vec<ManifestEntry>> {
    let path = data_dir.join(MANIFEST);
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .skip(1)
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 6 {
                bail!("{}:{}: expected 6 fields", path.display(), i + 2);
            }
            Ok(ManifestEntry {
                id: f[0].into(),
                kind: f[1].parse()?,
                split: Split::parse(f[2])?,
                mesh: f[3].into(),
                input: f[4].into(),
                cloud: (f[5] != "-").then(|| f[5].into()),
            })
        })
        .collect()
}

fn write_manifest(data_dir: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut s = String::from("id\tkind\tsplit\tmesh\tinput\tcloud\n");
    for e in entries {
        s += &format!(
            "{}\t{}\t{}\t{}\t{}\t{}\n",
            e.id,
            e.kind,
            e.split.name(),
            e.mesh,
            e.input,
            e.cloud.as_deref().unwrap_or("-")
        );
    }
    fs::write(data_dir.join(MANIFEST), s)?;
    Ok(())
}

/// Encoder input for one shape, plus the cloud it came from.
pub fn make_input(
    cfg: &RunConfig,
    mesh: &TriMesh,
    seed: u64,
) -> Result<(VoxelGrid, Option<ifnet::geometry::PointCloud>)> {
    let n = cfg.encoder.resolution;
    Ok(match cfg.task {
        Task::Voxel32 | Task::Voxel128 => (voxelize_mesh(mesh, n)?, None),
        Task::PointcloudSparse | Task::PointcloudDense => {
            let cloud = sample_surface(mesh, cfg.data.cloud_points, seed)?;
            (voxelize_points(&cloud, n)?, Some(cloud))
        }
        Task::SingleView => {
            let cloud = depth_cull(mesh, cfg.data.view_direction, cfg.data.depth_resolution)?;
            (voxelize_points(&cloud, n)?, Some(cloud))
        }
    })
}

struct Generated {
    entry: ManifestEntry,
    record: ShapeRecord,
}

fn generate_one(cfg: &RunConfig, dir: &Path, index: usize, seed: u64, split: Split) -> Result<Generated> {
    let kind = cfg.data.kinds[index % cfg.data.kinds.len()];
    let id = format!("{index:04}_{kind}");
    let shape = gen_synthetic(kind, &ShapeParams::default(), seed)?;
    let mesh_rel = format!("meshes/{id}.off");
    save_mesh(&shape.mesh, dir.join(&mesh_rel))?;
    if !shape.skeleton.is_empty() {
        let mut s = String::from("# ax ay az bx by bz radius\n");
        for c in &shape.skeleton {
            s += &format!(
                "{} {} {} {} {} {} {}\n",
                c.a.x, c.a.y, c.a.z, c.b.x, c.b.y, c.b.z, c.radius
            );
        }
        fs::write(dir.join(format!("skeletons/{id}.txt")), s)?;
    }
    let (voxels, cloud) = make_input(cfg, &shape.mesh, seed)?;
    let input_rel = format!("inputs/{id}.ifvx");
    voxels.save(dir.join(&input_rel))?;
    let cloud_rel = match &cloud {
        Some(c) => {
            let rel = format!("inputs/{id}.xyz");
            save_xyz(c, dir.join(&rel))?;
            Some(rel)
        }
        None => None,
    };
    let samples = sample_training_points(
        &shape.mesh,
        &SamplerConfig {
            seed,
            ..cfg.sampler.clone()
        },
    )?;
    Ok(Generated {
        entry: ManifestEntry {
            id: id.clone(),
            kind,
            split,
            mesh: mesh_rel.clone(),
            input: input_rel,
            cloud: cloud_rel,
        },
        record: ShapeRecord {
            id,
            mesh_path: mesh_rel,
            voxels,
            points: cloud.map(|c| c.points),
            samples,
        },
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GenSummary {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

/// Writes meshes, inputs, training samples per split and the manifest.
pub fn gen(cfg: &RunConfig) -> Result<GenSummary> {
    let dir = &cfg.data_dir;
    for sub in ["meshes", "inputs", "skeletons"] {
        fs::create_dir_all(dir.join(sub)).with_context(|| format!("creating {}", dir.join(sub).display()))?;
    }
    let n = cfg.data.shape_count;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let seeds: Vec<u64> = (0..n).map(|_| rng.random()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed ^ SPLIT_STREAM));
    let (train, val, test) = split_sizes(n, cfg.data.val_fraction, cfg.data.test_fraction);
    let mut splits = vec![Split::Train; n];
    for (rank, &i) in order.iter().enumerate() {
        splits[i] = if rank < test {
            Split::Test
        } else if rank < test + val {
            Split::Val
        } else {
            Split::Train
        };
    }
    let shapes: Vec<Generated> = (0..n)
        .into_par_iter()
        .map(|i| generate_one(cfg, dir, i, seeds[i], splits[i]))
        .collect::<Result<_>>()?;
    for split in [Split::Train, Split::Val, Split::Test] {
        let records: Vec<ShapeRecord> = shapes
            .iter()
            .filter(|g| g.entry.split == split)
            .map(|g| g.record.clone())
            .collect();
        write_dataset(dir.join(split.dataset_file()), &records)?;
    }
    write_manifest(dir, &shapes.iter().map(|g| g.entry.clone()).collect::<Vec<_>>())?;
    fs::write(dir.join("config.txt"), cfg.to_text())?;
    Ok(GenSummary { train, val, test })
}

fn csv_row(r: &LossRow) -> String {
    let mut out = Vec::new();
    ifnet::trainer::write_loss_csv(&mut out, std::slice::from_ref(r)).expect("in-memory write");
    String::from_utf8(out)
        .expect("ascii")
        .lines()
        .nth(1)
        .expect("one row")
        .to_string()
}

/// Loss log rows up to and including `step`, without the header.
fn kept_rows(path: &Path, step: u64) -> Result<Vec<String>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let f = BufReader::new(fs::File::open(path)?);
    let mut rows = Vec::new();
    for line in f.lines().skip(1) {
        let line = line?;
        let s: u64 = line
            .split(',')
            .next()
            .unwrap_or("")
            .parse()
            .context("malformed loss log")?;
        if s <= step {
            rows.push(line);
        }
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub steps: u64,
    pub stop: StopReason,
    pub best_val: f64,
}

/// Trains on the generated splits, checkpointing every
/// `checkpoint_interval` steps into the run directory.
pub fn train(cfg: &RunConfig, resume: bool) -> Result<TrainSummary> {
    let train_set = read_dataset(cfg.data_dir.join(Split::Train.dataset_file()))
        .with_context(|| format!("reading training data from {}", cfg.data_dir.display()))?;
    let val_set = read_dataset(cfg.data_dir.join(Split::Val.dataset_file())).unwrap_or_default();
    let run = &cfg.run_dir;
    fs::create_dir_all(run).with_context(|| format!("creating {}", run.display()))?;
    let state_path = run.join(STATE_FILE);
    let mut state = if resume {
        let s = TrainState::load(&state_path).with_context(|| format!("resuming from {}", state_path.display()))?;
        if s.params.config() != &cfg.model_config() {
            bail!("checkpoint architecture differs from the configuration");
        }
        s
    } else {
        TrainState::new(ModelParams::init(cfg.model_config(), cfg.seed)?, cfg.seed)
    };
    let loss_path = run.join(LOSS_FILE);
    let previous = if resume {
        kept_rows(&loss_path, state.step)?
    } else {
        Vec::new()
    };
    let mut log = BufWriter::new(fs::File::create(&loss_path)?);
    writeln!(log, "{LOSS_CSV_HEADER}")?;
    for r in &previous {
        writeln!(log, "{r}")?;
    }
    fs::write(run.join("config.txt"), cfg.to_text())?;

    // Each checkpoint segment restarts the trainer clock; the log counts from here.
    let started = Instant::now();
    let stop = loop {
        let pause = (state.step / cfg.checkpoint_interval + 1) * cfg.checkpoint_interval;
        let mut io_error = None;
        let (why, _) = train_steps(&mut state, &train_set, &val_set, &cfg.trainer, Some(pause), |row, _| {
            let row = LossRow {
                elapsed_s: started.elapsed().as_secs_f64(),
                ..row.clone()
            };
            if let Err(e) = writeln!(log, "{}", csv_row(&row)) {
                io_error.get_or_insert(e);
            }
        })?;
        if let Some(e) = io_error {
            return Err(e).context("writing the loss log");
        }
        log.flush()?;
        state.save(&state_path)?;
        if why != StopReason::Paused {
            break why;
        }
    };
    state.best_params.save(run.join(MODEL_FILE))?;
    Ok(TrainSummary {
        steps: state.step,
        stop,
        best_val: state.best_val,
    })
}

/// Loads an encoder input: a voxel grid as is, or a point cloud voxelized
/// at resolution `n`.
pub fn load_input(path: &Path, n: usize) -> Result<VoxelGrid> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("ifvx") => Ok(VoxelGrid::load(path)?),
        Some("xyz") => Ok(voxelize_points(&load_xyz(path)?, n)?),
        _ => bail!("{}: expected a .ifvx voxel grid or .xyz point cloud", path.display()),
    }
}

/// Meshes one input; returns whether the surface is empty.
pub fn reconstruct_one(
    cfg: &RunConfig,
    params: &ModelParams,
    input: &Path,
    output: &Path,
    field_dump: Option<&Path>,
) -> Result<bool> {
    let x = load_input(input, params.config().encoder.resolution)?;
    let field = evaluate_field(params, &x, &cfg.mesher)?;
    if let Some(p) = field_dump {
        field.save(p)?;
    }
    let mesh = marching_cubes(&field, cfg.mesher.threshold)?;
    if let Some(parent) = output.parent() {
        fs::create_dir_all(parent)?;
    }
    save_mesh(&mesh, output)?;
    Ok(mesh.is_empty())
}

/// Reconstructs every shape of `split`, writing `<id>.obj` into `out_dir`.
pub fn reconstruct_split(cfg: &RunConfig, params: &ModelParams, split: Split, out_dir: &Path) -> Result<Vec<String>> {
    let mut empty = Vec::new();
    for e in read_manifest(&cfg.data_dir)?.iter().filter(|e| e.split == split) {
        let input = cfg.data_dir.join(&e.input);
        if reconstruct_one(cfg, params, &input, &out_dir.join(format!("{}.obj", e.id)), None)? {
            empty.push(e.id.clone());
        }
    }
    Ok(empty)
}

/// Per-shape metrics; `None` marks a missing or unreadable prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub id: String,
    pub report: Option<MetricReport>,
    pub error: Option<String>,
}

pub const EVAL_HEADER: &str = "id,iou,chamfer_l2,normal_consistency,iou_points,surface_points,seed";

fn mesh_files(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let path = entry?.path();
        let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
        if ext == "off" || ext == "obj" {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string(), path);
            }
        }
    }
    Ok(out)
}

/// Evaluates every ground-truth mesh (optionally restricted to `ids`)
/// against the prediction with the same file stem.
pub fn eval(cfg: &RunConfig, pred_dir: &Path, gt_dir: &Path, ids: Option<&[String]>) -> Result<Vec<EvalRow>> {
    let gt = mesh_files(gt_dir)?;
    let preds = mesh_files(pred_dir)?;
    let wanted: Vec<&String> = match ids {
        Some(ids) => ids.iter().collect(),
        None => gt.keys().collect(),
    };
    let rows = wanted
        .into_iter()
        .map(|id| {
            let result = (|| -> Result<MetricReport> {
                let gt_path = gt.get(id).ok_or_else(|| anyhow!("no ground truth mesh"))?;
                let pred_path = preds.get(id).ok_or_else(|| anyhow!("no predicted mesh"))?;
                Ok(evaluate(&load_mesh(pred_path)?, &load_mesh(gt_path)?, &cfg.metrics)?)
            })();
            match result {
                Ok(r) => EvalRow {
                    id: id.clone(),
                    report: Some(r),
                    error: None,
                },
                Err(e) => EvalRow {
                    id: id.clone(),
                    report: None,
                    error: Some(format!("{e:#}")),
                },
            }
        })
        .collect();
    Ok(rows)
}

/// Arithmetic mean of the successful rows.
pub fn mean_report(rows: &[EvalRow]) -> Option<MetricReport> {
    let ok: Vec<&MetricReport> = rows.iter().filter_map(|r| r.report.as_ref()).collect();
    let first = ok.first()?;
    let n = ok.len() as f64;
    Some(MetricReport {
        iou: ok.iter().map(|r| r.iou).sum::<f64>() / n,
        chamfer_l2: ok.iter().map(|r| r.chamfer_l2).sum::<f64>() / n,
        normal_consistency: ok.iter().map(|r| r.normal_consistency).sum::<f64>() / n,
        ..(*first).clone()
    })
}

pub fn eval_csv(rows: &[EvalRow]) -> String {
    let mut s = format!("{EVAL_HEADER}\n");
    for r in rows {
        match &r.report {
            Some(m) => s += &format!("{},{}\n", r.id, m.csv_row()),
            None => s += &format!("{},FAILED,,,,,\n", r.id),
        }
    }
    if let Some(m) = mean_report(rows) {
        s += &format!("mean,{}\n", m.csv_row());
    }
    s
}

/// Human-readable table; Chamfer is shown in units of 1e-2.
pub fn eval_table(rows: &[EvalRow]) -> String {
    let mut s = format!("{:<24} {:>8} {:>14} {:>8}\n", "shape", "IoU", "Chamfer x1e-2", "NC");
    let line = |id: &str, m: &MetricReport| {
        format!(
            "{:<24} {:>8.4} {:>14.5} {:>8.4}\n",
            id,
            m.iou,
            m.chamfer_l2 / 1e-2,
            m.normal_consistency
        )
    };
    for r in rows {
        match &r.report {
            Some(m) => s += &line(&r.id, m),
            None => s += &format!("{:<24} FAILED: {}\n", r.id, r.error.as_deref().unwrap_or("")),
        }
    }
    if let Some(m) = mean_report(rows) {
        s += &line("mean", &m);
    }
    s
}
