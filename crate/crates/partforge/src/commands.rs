//! The five pipeline commands. Each one writes its resolved config and the
//! tool version into its output directory before doing any work.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use log::{info, warn};
use partforge_core::dataset::{
    curate, decode_points, encode_monolithic, encode_toy, generate_toy, normalize_canonical, CanonicalAsset,
    ConditionEncoder, RejectReason, Thresholds,
};
use partforge_core::flow::{flow_loss_and_grads, BatchItem, ItemGrads, ItemRunner};
use partforge_core::geometry::{
    assemble, chamfer, f_score, pairwise_iou, sample_surface, voxelize_points, voxelize_solid, Point3, VoxelGrid,
};
use partforge_core::{
    euler_sample, train_with, AdamState, CurationRecord, Denoiser, StepRecord, ToySpec, TrainingExample, TriMesh,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::archive::{self, ToyRecord};
use crate::checkpoint::Checkpoint;
use crate::config::{prepare_output, CurateConfig, EvalConfig, RunConfig, SampleConfig, ToygenConfig, TrainConfig};
use crate::error::{CliError, CliResult};
use crate::gltf::{extract_parts, ExtractOptions, ModePolicy};
use crate::mesh_io::PlyData;

pub const MANIFEST: &str = "manifest.jsonl";
pub const SUMMARY: &str = "summary.json";
pub const PARTS_DIR: &str = "parts";
pub const CHECKPOINT: &str = "checkpoint.ckpt";
pub const LOSS_CSV: &str = "loss.csv";
pub const METRICS: &str = "metrics.json";

/// What counts as one part when curating.
pub const PART_COUNT_RULE: &str = "mesh-bearing scene-graph nodes";

/// splitmix64 of `a` offset by `b`; used to derive independent sub-seeds.
pub fn mix(a: u64, b: u64) -> u64 {
    let mut x = a.wrapping_add(b.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::at(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::at(path, e))
}

/// Evaluates batch items on the rayon pool. `collect` keeps item order, so
/// the trainer's reduction is unchanged by the thread count.
#[derive(Debug, Clone, Copy, Default)]
pub struct Parallel;

impl ItemRunner for Parallel {
    fn run(&self, model: &Denoiser, items: &[BatchItem<'_>]) -> Vec<partforge_core::Result<ItemGrads>> {
        items.par_iter().map(|it| flow_loss_and_grads(model, &it.latent, &it.eps, it.t, it.cond)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurateSummary {
    pub part_count_rule: String,
    pub thresholds: Thresholds,
    pub total: usize,
    pub kept: usize,
    /// Rejections by reason.
    pub rejected: BTreeMap<String, usize>,
    /// Readable assets by part count.
    pub part_count_histogram: BTreeMap<usize, usize>,
}

fn scene_files(dir: &Path) -> CliResult<Vec<(String, PathBuf)>> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| CliError::at(dir, e))? {
        let path = entry?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if path.is_file() && matches!(ext.as_deref(), Some("gltf" | "glb")) {
            let name = path.file_name().unwrap_or_default().to_string_lossy().into_owned();
            files.push((name, path));
        }
    }
    files.sort();
    Ok(files)
}

fn curate_file(name: &str, path: &Path, cfg: &CurateConfig) -> (CurationRecord, Option<CanonicalAsset>) {
    let asset_id = Path::new(name).file_stem().unwrap_or_default().to_string_lossy().into_owned();
    let options = ExtractOptions {
        modes: if cfg.triangles_only { ModePolicy::TrianglesOnly } else { ModePolicy::Triangulate },
        split_components: cfg.split_components,
    };
    let scene = fs::read(path).map_err(|e| e.to_string()).and_then(|bytes| {
        extract_parts(&bytes, path.parent(), &options).map_err(|e| e.to_string())
    });
    let scene = match scene {
        Ok(s) => s,
        Err(e) => {
            warn!("{name}: {e}");
            return (CurationRecord::unreadable(asset_id, name), None);
        }
    };
    let meshes: Vec<TriMesh> = scene.parts.into_iter().map(|p| p.mesh).collect();
    let record = curate(&asset_id, name, &meshes, scene.has_texture, &cfg.thresholds);
    let kept = if record.verdict.is_kept() { normalize_canonical(meshes).ok() } else { None };
    (record, kept)
}

/// Curates every `.gltf`/`.glb` in `cfg.input`. Kept assets have their
/// canonical parts written under `parts/<asset>/`.
pub fn cmd_curate(cfg: &CurateConfig, out: &Path) -> CliResult<CurateSummary> {
    let files = scene_files(&cfg.input)?;
    if files.is_empty() {
        return Err(CliError::Data(format!("{}: no .gltf or .glb files", cfg.input.display())));
    }
    prepare_output(out, cfg)?;
    let results: Vec<_> = files.par_iter().map(|(name, path)| curate_file(name, path, cfg)).collect();

    let mut summary = CurateSummary {
        part_count_rule: PART_COUNT_RULE.into(),
        thresholds: cfg.thresholds.clone(),
        total: results.len(),
        kept: 0,
        rejected: BTreeMap::new(),
        part_count_histogram: BTreeMap::new(),
    };
    let mut records = Vec::with_capacity(results.len());
    for (record, kept) in results {
        match record.verdict {
            partforge_core::Verdict::Kept => summary.kept += 1,
            partforge_core::Verdict::Rejected(r) => *summary.rejected.entry(r.as_str().to_owned()).or_insert(0) += 1,
        }
        if record.verdict != partforge_core::Verdict::Rejected(RejectReason::Io) {
            *summary.part_count_histogram.entry(record.part_count).or_insert(0) += 1;
        }
        if let Some(asset) = kept {
            archive::write_part_meshes(&out.join(PARTS_DIR).join(&record.asset_id), &asset.parts)?;
        }
        records.push(record);
    }
    archive::write_jsonl(&out.join(MANIFEST), &records)?;
    write_json(&out.join(SUMMARY), &summary)?;
    info!("curated {} assets: {} kept", summary.total, summary.kept);
    if summary.rejected.get(RejectReason::Io.as_str()) == Some(&summary.total) {
        return Err(CliError::Data(format!("{}: no readable input", cfg.input.display())));
    }
    Ok(summary)
}

/// Generates the toy archive; returns its records in manifest order.
pub fn cmd_toygen(cfg: &ToygenConfig, out: &Path) -> CliResult<Vec<ToyRecord>> {
    cfg.validate()?;
    prepare_output(out, cfg)?;
    let jobs: Vec<(String, ToySpec)> = cfg
        .part_counts
        .iter()
        .zip(cfg.counts())
        .flat_map(|(&n, count)| {
            (0..count).map(move |j| {
                let spec = ToySpec { kind: cfg.kinds[j % cfg.kinds.len()], parts: n, seed: mix(mix(cfg.seed, n as u64), j as u64) };
                (format!("n{n}-{j:05}"), spec)
            })
        })
        .collect();
    let records = jobs
        .par_iter()
        .map(|(id, spec)| archive::write_toy(out, id, &generate_toy(spec)?))
        .collect::<CliResult<Vec<_>>>()?;
    archive::write_jsonl(&out.join(archive::TOY_MANIFEST), &records)?;
    Ok(records)
}

/// Latents and conditions for every asset of a toy archive.
pub fn load_training_set(root: &Path, k: usize, width: usize, encoder: &ConditionEncoder) -> CliResult<Vec<TrainingExample>> {
    let records = archive::read_manifest(root)?;
    records
        .par_iter()
        .map(|r| {
            let asset = archive::load_toy(root, r)?;
            Ok(TrainingExample {
                latent: encode_toy(&asset, k, width, r.seed)?,
                monolithic: Some(encode_monolithic(&asset, k, width, r.seed)?),
                cond: encoder.encode(&asset)?,
            })
        })
        .collect()
}

fn histogram_field(counts: &BTreeMap<usize, usize>) -> String {
    counts.iter().map(|(n, c)| format!("{n}:{c}")).collect::<Vec<_>>().join(";")
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub trace: Vec<StepRecord>,
}

/// Trains on a toy archive and writes `checkpoint.ckpt` and `loss.csv`.
pub fn cmd_train(cfg: &TrainConfig, out: &Path) -> CliResult<TrainOutcome> {
    cfg.validate()?;
    let (mut model, mut adam, init_seed) = match &cfg.resume {
        Some(path) => {
            let file = File::open(path).map_err(|e| CliError::at(path, e))?;
            let ckpt = Checkpoint::read(BufReader::new(file)).map_err(|e| CliError::at(path, e))?;
            if ckpt.model.config() != &cfg.model {
                return Err(CliError::Config("model config differs from the resumed checkpoint".into()));
            }
            if ckpt.condition_seed != cfg.condition_seed {
                return Err(CliError::Config("condition_seed differs from the resumed checkpoint".into()));
            }
            (ckpt.model, ckpt.adam, ckpt.seed)
        }
        None => {
            let model = Denoiser::new(cfg.model.clone(), cfg.seed)?;
            let adam = AdamState::new(model.params());
            (model, adam, cfg.seed)
        }
    };
    prepare_output(out, cfg)?;
    let encoder = ConditionEncoder::new(cfg.model.cond_width, cfg.condition_seed)?;
    let data = load_training_set(&cfg.data, cfg.model.tokens_per_part, cfg.model.width, &encoder)?;
    info!("training on {} assets for {} steps from step {}", data.len(), cfg.plan.steps, adam.step);

    let loss_path = out.join(LOSS_CSV);
    let mut csv = csv::Writer::from_writer(BufWriter::new(File::create(&loss_path).map_err(|e| CliError::at(&loss_path, e))?));
    let mut write_err = None;
    let csv_err = |e: csv::Error| CliError::at(&loss_path, e);
    csv.write_record(["step", "loss", "t_mean", "n_hist"]).map_err(csv_err)?;
    let trained = train_with(&data, &cfg.plan, &mut model, &mut adam, &Parallel, |r| {
        if write_err.is_none() {
            let row = [r.step.to_string(), r.loss.to_string(), r.t_mean.to_string(), histogram_field(&r.part_counts)];
            write_err = csv.write_record(&row).and_then(|_| Ok(csv.flush()?)).err();
        }
        if r.step % 100 == 0 {
            info!("step {} loss {:.6}", r.step, r.loss);
        }
    });
    csv.flush()?;
    if let Some(e) = write_err {
        return Err(csv_err(e));
    }
    let trace = trained?;

    let checkpoint = out.join(CHECKPOINT);
    let ckpt = Checkpoint { model, adam, seed: init_seed, condition_seed: cfg.condition_seed, plan: cfg.plan.clone() };
    let mut w = BufWriter::new(File::create(&checkpoint).map_err(|e| CliError::at(&checkpoint, e))?);
    ckpt.write(&mut w).map_err(|e| CliError::at(&checkpoint, e))?;
    w.flush()?;
    Ok(TrainOutcome { checkpoint, trace })
}

/// Samples every archived asset's condition at each requested part count.
/// Outputs go to `n<N>/<asset>/` per count, or `<asset>/` when the asset's
/// own part count is used. Returns the number of assets written.
pub fn cmd_sample(cfg: &SampleConfig, out: &Path) -> CliResult<usize> {
    cfg.validate()?;
    let file = File::open(&cfg.checkpoint).map_err(|e| CliError::at(&cfg.checkpoint, e))?;
    let ckpt = Checkpoint::read(BufReader::new(file)).map_err(|e| CliError::at(&cfg.checkpoint, e))?;
    let model = &ckpt.model;
    let max_parts = model.config().max_parts;
    if let Some(n) = cfg.part_counts.iter().find(|&&n| n > max_parts) {
        return Err(CliError::Config(format!("{n} parts requested, the model supports at most {max_parts}")));
    }
    let mut records = archive::read_manifest(&cfg.data)?;
    records.truncate(cfg.limit.unwrap_or(usize::MAX));
    prepare_output(out, cfg)?;
    let encoder = ConditionEncoder::new(model.config().cond_width, ckpt.condition_seed)?;

    let jobs: Vec<(usize, &ToyRecord, Option<usize>)> = records
        .iter()
        .enumerate()
        .flat_map(|(i, r)| {
            let counts: Vec<Option<usize>> =
                if cfg.part_counts.is_empty() { vec![None] } else { cfg.part_counts.iter().map(|&n| Some(n)).collect() };
            counts.into_iter().map(move |n| (i, r, n))
        })
        .collect();
    jobs.par_iter()
        .map(|&(i, record, requested)| {
            let n = requested.unwrap_or(record.parts);
            if n > max_parts {
                return Err(CliError::Config(format!("{}: {n} parts exceed the model's {max_parts}", record.asset_id)));
            }
            let asset = archive::load_toy(&cfg.data, record)?;
            let cond = encoder.encode(&asset)?;
            let mut rng = ChaCha8Rng::seed_from_u64(mix(mix(cfg.seed, i as u64), n as u64));
            let latent = euler_sample(&cond, n, model, &cfg.sampler, &mut rng)?;
            if !latent.concat().all_finite() {
                return Err(CliError::Numeric(format!("{}: sample is not finite", record.asset_id)));
            }
            let dir = match requested {
                Some(n) => out.join(format!("n{n}")).join(&record.asset_id),
                None => out.join(&record.asset_id),
            };
            archive::write_part_points(&dir, &decode_points(&latent))
        })
        .collect::<CliResult<Vec<()>>>()?;
    Ok(records.len())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AssetMetrics {
    pub asset_id: String,
    pub cd: f64,
    pub f_score: f64,
    /// Mean pairwise IoU of the predicted parts.
    pub iou: f64,
    /// Predicted part count.
    pub n: usize,
    pub resolution: usize,
    pub tau: f64,
    pub samples: usize,
    /// Seed of the surface samples. Prediction and ground truth share it, so
    /// identical meshes score exactly zero.
    pub sample_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MeanMetrics {
    pub cd: f64,
    pub f_score: f64,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub mean: MeanMetrics,
    pub assets: Vec<AssetMetrics>,
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Points of an assembly: mesh parts are assembled and surface-sampled,
/// point-cloud parts are taken as they are.
fn assembly_points(parts: &[PlyData], samples: usize, seed: u64) -> CliResult<Vec<Point3>> {
    let meshes: Vec<TriMesh> = parts
        .iter()
        .filter(|p| !p.faces.is_empty())
        .map(|p| p.clone().into_mesh())
        .collect::<Result<_, _>>()?;
    let mut points: Vec<Point3> = parts.iter().filter(|p| p.faces.is_empty()).flat_map(|p| p.vertices.clone()).collect();
    if !meshes.is_empty() {
        points.extend(sample_surface(&assemble(&meshes), samples, seed)?.points);
    }
    Ok(points)
}

fn part_grid(part: &PlyData, cfg: &EvalConfig) -> CliResult<VoxelGrid> {
    Ok(if part.faces.is_empty() {
        voxelize_points(&part.vertices, cfg.resolution, cfg.radius())
    } else {
        voxelize_solid(&part.clone().into_mesh()?, cfg.resolution)
    })
}

fn eval_asset(id: &str, pred_dir: &Path, gt_dir: &Path, cfg: &EvalConfig) -> CliResult<AssetMetrics> {
    let pred = archive::read_parts(pred_dir)?;
    let gt = archive::read_parts(gt_dir)?;
    let sample_seed = mix(cfg.seed, fnv1a(id));
    let p = assembly_points(&pred, cfg.samples, sample_seed).map_err(|e| CliError::at(pred_dir, e))?;
    let q = assembly_points(&gt, cfg.samples, sample_seed).map_err(|e| CliError::at(gt_dir, e))?;
    let grids = pred.iter().map(|part| part_grid(part, cfg)).collect::<CliResult<Vec<_>>>()?;
    Ok(AssetMetrics {
        asset_id: id.to_owned(),
        cd: chamfer(&p, &q).map_err(|e| CliError::at(pred_dir, e))?,
        f_score: f_score(&p, &q, cfg.tau).map_err(|e| CliError::at(pred_dir, e))?,
        iou: pairwise_iou(&grids)?,
        n: pred.len(),
        resolution: cfg.resolution,
        tau: cfg.tau,
        samples: cfg.samples,
        sample_seed,
    })
}

/// Scores every asset directory of `cfg.pred` against the same-named
/// directory of `cfg.gt`, writing `metrics.json`.
pub fn cmd_eval(cfg: &EvalConfig, out: &Path) -> CliResult<EvalReport> {
    cfg.validate()?;
    let assets = archive::asset_dirs(&cfg.pred)?;
    if assets.is_empty() {
        return Err(CliError::Data(format!("{}: no asset directories", cfg.pred.display())));
    }
    prepare_output(out, cfg)?;
    let metrics = assets
        .par_iter()
        .map(|(id, dir)| {
            let gt_dir = cfg.gt.join(id);
            if !gt_dir.is_dir() {
                return Err(CliError::Data(format!("{id}: no ground truth in {}", cfg.gt.display())));
            }
            eval_asset(id, dir, &gt_dir, cfg)
        })
        .collect::<CliResult<Vec<_>>>()?;
    let n = metrics.len() as f64;
    let mean = MeanMetrics {
        cd: metrics.iter().map(|m| m.cd).sum::<f64>() / n,
        f_score: metrics.iter().map(|m| m.f_score).sum::<f64>() / n,
        iou: metrics.iter().map(|m| m.iou).sum::<f64>() / n,
    };
    let report = EvalReport { mean, assets: metrics };
    write_json(&out.join(METRICS), &report)?;
    Ok(report)
}
