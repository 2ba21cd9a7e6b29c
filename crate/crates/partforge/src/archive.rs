//! Directory layouts shared by the commands.
//!
//! A toy archive holds `toy_manifest.jsonl` (one [`ToyRecord`] per line),
//! `meshes/<asset>/part_<i>.ply` in the canonical frame and
//! `scenes/<asset>.glb` with one node per part. Sample and eval directories
//! hold one `<asset>/part_<i>.ply` directory per asset.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use partforge_core::dataset::CanonicalAsset;
use partforge_core::geometry::Point3;
use partforge_core::{ToyAsset, ToyKind, TriMesh};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};
use crate::gltf::{GlbBuilder, NodeTransform};
use crate::mesh_io::{read_ply, write_ply, write_ply_points, PlyData};

pub const TOY_MANIFEST: &str = "toy_manifest.jsonl";
pub const MESH_DIR: &str = "meshes";
pub const SCENE_DIR: &str = "scenes";

/// Manifest line of one toy asset. `seed` drives both generation and the
/// surface samples of its latent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyRecord {
    pub asset_id: String,
    pub kind: ToyKind,
    pub parts: usize,
    pub seed: u64,
    pub labels: Vec<String>,
    pub scale: f64,
    pub translation: Point3,
}

pub fn part_file(i: usize) -> String {
    format!("part_{i}.ply")
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| CliError::at(path, e))?))
}

/// Writes `part_<i>.ply` for each mesh into `dir`.
pub fn write_part_meshes(dir: &Path, parts: &[TriMesh]) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::at(dir, e))?;
    for (i, p) in parts.iter().enumerate() {
        let path = dir.join(part_file(i));
        let mut w = create(&path)?;
        write_ply(p, &mut w).and_then(|_| w.flush()).map_err(|e| CliError::at(&path, e))?;
    }
    Ok(())
}

/// Writes `part_<i>.ply` per point set plus their union as `assembly.ply`.
pub fn write_part_points(dir: &Path, parts: &[Vec<Point3>]) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::at(dir, e))?;
    let assembly: Vec<Point3> = parts.concat();
    let files = parts.iter().enumerate().map(|(i, p)| (part_file(i), p.as_slice()));
    for (name, points) in files.chain(std::iter::once(("assembly.ply".to_string(), assembly.as_slice()))) {
        let path = dir.join(name);
        let mut w = create(&path)?;
        write_ply_points(points, &mut w).and_then(|_| w.flush()).map_err(|e| CliError::at(&path, e))?;
    }
    Ok(())
}

/// Reads `part_0.ply`, `part_1.ply`, … from `dir` until the first gap.
pub fn read_parts(dir: &Path) -> CliResult<Vec<PlyData>> {
    let mut parts = Vec::new();
    loop {
        let path = dir.join(part_file(parts.len()));
        if !path.exists() {
            break;
        }
        let file = File::open(&path).map_err(|e| CliError::at(&path, e))?;
        parts.push(read_ply(BufReader::new(file)).map_err(|e| CliError::at(&path, e))?);
    }
    if parts.is_empty() {
        return Err(CliError::Data(format!("{}: no part files", dir.display())));
    }
    Ok(parts)
}

/// Subdirectories of `dir`, sorted by name.
pub fn asset_dirs(dir: &Path) -> CliResult<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| CliError::at(dir, e))? {
        let entry = entry?;
        if entry.file_type()?.is_dir() {
            out.push((entry.file_name().to_string_lossy().into_owned(), entry.path()));
        }
    }
    out.sort();
    Ok(out)
}

/// Adds one toy asset to the archive at `root`.
pub fn write_toy(root: &Path, asset_id: &str, toy: &ToyAsset) -> CliResult<ToyRecord> {
    write_part_meshes(&root.join(MESH_DIR).join(asset_id), &toy.asset.parts)?;
    let mut glb = GlbBuilder::new();
    for (label, part) in toy.labels.iter().zip(&toy.asset.parts) {
        glb.node(label, Some(part.clone()), NodeTransform::Identity);
    }
    let scenes = root.join(SCENE_DIR);
    fs::create_dir_all(&scenes).map_err(|e| CliError::at(&scenes, e))?;
    let path = scenes.join(format!("{asset_id}.glb"));
    fs::write(&path, glb.to_glb()).map_err(|e| CliError::at(&path, e))?;
    Ok(ToyRecord {
        asset_id: asset_id.to_owned(),
        kind: toy.spec.kind,
        parts: toy.asset.num_parts(),
        seed: toy.spec.seed,
        labels: toy.labels.clone(),
        scale: toy.asset.scale,
        translation: toy.asset.translation,
    })
}

/// Serializes `records` one JSON object per line.
pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> CliResult<()> {
    let mut w = create(path)?;
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|e| CliError::at(path, e))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_manifest(root: &Path) -> CliResult<Vec<ToyRecord>> {
    let path = root.join(TOY_MANIFEST);
    let file = File::open(&path).map_err(|e| CliError::at(&path, e))?;
    let mut records = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ToyRecord =
            serde_json::from_str(&line).map_err(|e| CliError::at(&path, format!("line {}: {e}", n + 1)))?;
        records.push(rec);
    }
    if records.is_empty() {
        return Err(CliError::at(&path, "no assets"));
    }
    Ok(records)
}

/// The canonical-frame parts of one archived asset.
pub fn load_toy(root: &Path, record: &ToyRecord) -> CliResult<CanonicalAsset> {
    let dir = root.join(MESH_DIR).join(&record.asset_id);
    let parts = read_parts(&dir)?
        .into_iter()
        .map(|p| p.into_mesh().map_err(|e| CliError::at(&dir, e)))
        .collect::<CliResult<Vec<_>>>()?;
    if parts.len() != record.parts {
        return Err(CliError::at(&dir, format!("{} part files, manifest says {}", parts.len(), record.parts)));
    }
    Ok(CanonicalAsset { parts, scale: record.scale, translation: record.translation })
}
