//! Canonical normalization, curation verdicts, toy asset generation, and the
//! toy latent and condition encoders.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::denoiser::ConditionTokens;
use crate::error::{Error, Result};
use crate::geometry::{
    self, assemble, box_mesh, cylinder_mesh, sample_surface_with, sphere_mesh, voxelize_solid, Point3, TriMesh,
};
use crate::latent::AssetLatent;
use crate::nn;
use crate::tensor::Tensor;

/// Fraction of the canonical half-extent left free around a normalized asset.
pub const CANONICAL_MARGIN: f64 = 0.01;

/// Parts of one asset sharing a single canonical frame. `x_canonical =
/// scale·x + translation` for every vertex of every part.
#[derive(Debug, Clone, PartialEq)]
pub struct CanonicalAsset {
    pub parts: Vec<TriMesh>,
    pub scale: f64,
    pub translation: Point3,
}

impl CanonicalAsset {
    pub fn num_parts(&self) -> usize {
        self.parts.len()
    }

    pub fn assembled(&self) -> TriMesh {
        assemble(&self.parts)
    }
}

/// One uniform scale and translation mapping the union bounding box of all
/// parts into `[-1, 1]³` with a 1% margin. Parts are never recentered
/// individually.
pub fn normalize_canonical(parts: Vec<TriMesh>) -> Result<CanonicalAsset> {
    let bounds = assemble(&parts).bounds().ok_or_else(|| Error::Mesh("asset has no vertices".into()))?;
    let (lo, hi) = bounds;
    let center = [0, 1, 2].map(|i| 0.5 * (lo[i] + hi[i]));
    let half = (0..3).map(|i| 0.5 * (hi[i] - lo[i])).fold(0.0, f64::max);
    if !(half > 0.0) {
        return Err(Error::Mesh("asset bounding box is a single point".into()));
    }
    let scale = (1.0 - CANONICAL_MARGIN) / half;
    let translation = center.map(|c| -scale * c);
    let parts = parts
        .iter()
        .map(|p| p.map_vertices(|v| [0, 1, 2].map(|i| scale * v[i] + translation[i])))
        .collect::<Result<Vec<_>>>()?;
    Ok(CanonicalAsset { parts, scale, translation })
}

/// Curation thresholds. Both bounds are exclusive: an asset is kept when it
/// has fewer than `max_parts` parts and its largest pairwise IoU is below
/// `max_iou`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Thresholds {
    pub max_parts: usize,
    pub max_iou: f64,
    pub require_texture: bool,
    pub resolution: usize,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self { max_parts: 16, max_iou: 0.1, require_texture: false, resolution: geometry::DEFAULT_RESOLUTION }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum RejectReason {
    Io,
    Empty,
    PartCount,
    Texture,
    Iou,
}

impl RejectReason {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Io => "io",
            Self::Empty => "empty",
            Self::PartCount => "part_count",
            Self::Texture => "texture",
            Self::Iou => "iou",
        }
    }
}

/// `kept` or `rejected:<reason>` in text form.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Verdict {
    Kept,
    Rejected(RejectReason),
}

impl Verdict {
    pub fn is_kept(self) -> bool {
        self == Self::Kept
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Kept => f.write_str("kept"),
            Self::Rejected(r) => write!(f, "rejected:{}", r.as_str()),
        }
    }
}

impl FromStr for Verdict {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "kept" {
            return Ok(Self::Kept);
        }
        let reason = s.strip_prefix("rejected:").ok_or_else(|| Error::Domain(format!("unknown verdict {s:?}")))?;
        let r = [RejectReason::Io, RejectReason::Empty, RejectReason::PartCount, RejectReason::Texture, RejectReason::Iou]
            .into_iter()
            .find(|r| r.as_str() == reason)
            .ok_or_else(|| Error::Domain(format!("unknown rejection reason {reason:?}")))?;
        Ok(Self::Rejected(r))
    }
}

impl Serialize for Verdict {
    fn serialize<S: Serializer>(&self, s: S) -> core::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Verdict {
    fn deserialize<D: Deserializer<'de>>(d: D) -> core::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Provenance and verdict for one source asset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurationRecord {
    pub asset_id: String,
    pub source_path: String,
    pub part_count: usize,
    pub has_texture: bool,
    /// `None` when the parts could not be read.
    pub max_pairwise_iou: Option<f64>,
    pub verdict: Verdict,
}

impl CurationRecord {
    /// Record for a source that could not be read or parsed.
    pub fn unreadable(asset_id: impl Into<String>, source_path: impl Into<String>) -> Self {
        Self {
            asset_id: asset_id.into(),
            source_path: source_path.into(),
            part_count: 0,
            has_texture: false,
            max_pairwise_iou: None,
            verdict: Verdict::Rejected(RejectReason::Io),
        }
    }
}

/// Largest pairwise solid-voxel IoU after canonical normalization; zero for
/// fewer than two parts.
pub fn max_part_iou(parts: &[TriMesh], resolution: usize) -> Result<f64> {
    if parts.len() < 2 {
        return Ok(0.0);
    }
    let canonical = normalize_canonical(parts.to_vec())?;
    let grids: Vec<_> = canonical.parts.iter().map(|p| voxelize_solid(p, resolution)).collect();
    geometry::max_pairwise_iou(&grids)
}

/// Applies the thresholds in order: empty, part count, texture, overlap.
pub fn curate(
    asset_id: &str,
    source_path: &str,
    parts: &[TriMesh],
    has_texture: bool,
    thresholds: &Thresholds,
) -> CurationRecord {
    let nonempty = parts.iter().any(|p| !p.is_empty());
    let max_iou = if nonempty { max_part_iou(parts, thresholds.resolution).ok() } else { None };
    let verdict = if !nonempty || max_iou.is_none() {
        Verdict::Rejected(RejectReason::Empty)
    } else if parts.len() >= thresholds.max_parts {
        Verdict::Rejected(RejectReason::PartCount)
    } else if thresholds.require_texture && !has_texture {
        Verdict::Rejected(RejectReason::Texture)
    } else if max_iou.is_some_and(|v| v >= thresholds.max_iou) {
        Verdict::Rejected(RejectReason::Iou)
    } else {
        Verdict::Kept
    };
    CurationRecord {
        asset_id: asset_id.to_string(),
        source_path: source_path.to_string(),
        part_count: parts.len(),
        has_texture,
        max_pairwise_iou: max_iou,
        verdict,
    }
}

/// Toy asset families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToyKind {
    /// Boxes stacked along +y with small gaps.
    StackedBoxes,
    /// A vertical rod with spheres attached alternately on either side.
    SpheresOnRod,
    /// Box segments forming an L: a vertical column, then arms along +x.
    LBracket,
    /// Mixed primitives on a ground grid.
    Tableau,
}

impl ToyKind {
    pub const ALL: [ToyKind; 4] = [Self::StackedBoxes, Self::SpheresOnRod, Self::LBracket, Self::Tableau];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToySpec {
    pub kind: ToyKind,
    pub parts: usize,
    pub seed: u64,
}

/// A generated asset with one label per part.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyAsset {
    pub spec: ToySpec,
    pub asset: CanonicalAsset,
    pub labels: Vec<String>,
}

const GAP: f64 = 0.04;
const SPHERE_RINGS: usize = 8;
const SPHERE_SEGMENTS: usize = 12;
const ROUND_SEGMENTS: usize = 12;

/// Deterministic watertight multi-part asset. A single-part request of any
/// kind yields one sphere.
pub fn generate_toy(spec: &ToySpec) -> Result<ToyAsset> {
    if spec.parts == 0 {
        return Err(Error::Config("a toy asset needs at least one part".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut parts = Vec::with_capacity(spec.parts);
    let mut labels = Vec::with_capacity(spec.parts);
    if spec.parts == 1 {
        let r = rng.random_range(0.3..0.6);
        parts.push(sphere_mesh([0.0; 3], r, SPHERE_RINGS, SPHERE_SEGMENTS)?);
        labels.push("sphere".to_string());
    } else {
        match spec.kind {
            ToyKind::StackedBoxes => stacked_boxes(&mut rng, spec.parts, &mut parts, &mut labels)?,
            ToyKind::SpheresOnRod => spheres_on_rod(&mut rng, spec.parts, &mut parts, &mut labels)?,
            ToyKind::LBracket => l_bracket(&mut rng, spec.parts, &mut parts, &mut labels)?,
            ToyKind::Tableau => tableau(&mut rng, spec.parts, &mut parts, &mut labels)?,
        }
    }
    Ok(ToyAsset { spec: spec.clone(), asset: normalize_canonical(parts)?, labels })
}

fn stacked_boxes(rng: &mut ChaCha8Rng, n: usize, parts: &mut Vec<TriMesh>, labels: &mut Vec<String>) -> Result<()> {
    let mut y = 0.0;
    for i in 0..n {
        let hx = rng.random_range(0.2..0.6);
        let hz = rng.random_range(0.2..0.6);
        let hy = rng.random_range(0.1..0.3);
        let cx = rng.random_range(-0.15..0.15);
        let cz = rng.random_range(-0.15..0.15);
        parts.push(box_mesh([cx - hx, y, cz - hz], [cx + hx, y + 2.0 * hy, cz + hz])?);
        labels.push(format!("box{i}"));
        y += 2.0 * hy + GAP;
    }
    Ok(())
}

fn spheres_on_rod(rng: &mut ChaCha8Rng, n: usize, parts: &mut Vec<TriMesh>, labels: &mut Vec<String>) -> Result<()> {
    let rod_r = rng.random_range(0.04..0.08);
    let spheres = n - 1;
    let radii: Vec<f64> = (0..spheres).map(|_| rng.random_range(0.15..0.3)).collect();
    // Spheres alternate sides; consecutive ones on the same side never touch.
    let spacing = radii.iter().copied().fold(0.0, f64::max) + GAP;
    let half_h = 0.5 * spacing * (spheres as f64 + 1.0);
    parts.push(cylinder_mesh([0.0; 3], rod_r, half_h, ROUND_SEGMENTS)?.map_vertices(|v| [v[0], v[2], v[1]])?);
    labels.push("rod".to_string());
    for (i, r) in radii.iter().enumerate() {
        let side = if i % 2 == 0 { 1.0 } else { -1.0 };
        let y = -half_h + spacing * (i as f64 + 1.0);
        let x = side * (rod_r + GAP + r);
        parts.push(sphere_mesh([x, y, rng.random_range(-0.1..0.1)], *r, SPHERE_RINGS, SPHERE_SEGMENTS)?);
        labels.push(format!("sphere{i}"));
    }
    Ok(())
}

fn l_bracket(rng: &mut ChaCha8Rng, n: usize, parts: &mut Vec<TriMesh>, labels: &mut Vec<String>) -> Result<()> {
    let t = rng.random_range(0.08..0.16);
    let depth = rng.random_range(0.15..0.4);
    let column = n.div_ceil(2);
    let mut y = 0.0;
    for i in 0..column {
        let h = rng.random_range(0.2..0.45);
        parts.push(box_mesh([-t, y, -depth], [t, y + h, depth])?);
        labels.push(format!("column{i}"));
        y += h + GAP;
    }
    let mut x = t + GAP;
    for i in 0..n - column {
        let w = rng.random_range(0.25..0.5);
        parts.push(box_mesh([x, 0.0, -depth], [x + w, 2.0 * t, depth])?);
        labels.push(format!("arm{i}"));
        x += w + GAP;
    }
    Ok(())
}

fn tableau(rng: &mut ChaCha8Rng, n: usize, parts: &mut Vec<TriMesh>, labels: &mut Vec<String>) -> Result<()> {
    let cols = libm::ceil(libm::sqrt(n as f64)) as usize;
    let cell = 0.6;
    for i in 0..n {
        let (gx, gz) = ((i % cols) as f64, (i / cols) as f64);
        let c = [gx * cell, 0.0, gz * cell];
        let size = rng.random_range(0.12..0.5 * cell - GAP);
        match rng.random_range(0..3) {
            0 => {
                let h = rng.random_range(0.1..0.4);
                parts.push(box_mesh([c[0] - size, 0.0, c[2] - size], [c[0] + size, h, c[2] + size])?);
                labels.push(format!("box{i}"));
            }
            1 => {
                parts.push(sphere_mesh([c[0], size, c[2]], size, SPHERE_RINGS, SPHERE_SEGMENTS)?);
                labels.push(format!("sphere{i}"));
            }
            _ => {
                let h = rng.random_range(0.1..0.4);
                let cyl = cylinder_mesh([c[0], c[2], h], size, h, ROUND_SEGMENTS)?;
                parts.push(cyl.map_vertices(|v| [v[0], v[2], v[1]])?);
                labels.push(format!("cylinder{i}"));
            }
        }
    }
    Ok(())
}

/// Seed for part `index` of an asset encoded with `seed`.
fn part_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(index as u64 + 1)
}

fn points_to_tokens(points: &[Point3], width: usize) -> Tensor {
    let mut data = vec![0.0; points.len() * width];
    for (r, p) in points.iter().enumerate() {
        data[r * width..r * width + 3].copy_from_slice(p);
    }
    Tensor::new(vec![points.len(), width], data).expect("positive extents")
}

fn check_width(width: usize, k: usize) -> Result<()> {
    if width < 3 || k == 0 {
        return Err(Error::Config(format!("toy latents need width ≥ 3 and K ≥ 1, got width {width}, K {k}")));
    }
    Ok(())
}

/// Per part, `k` area-weighted surface samples as token rows `[x, y, z, 0, …]`.
/// Token blocks follow the asset's part order.
pub fn encode_toy(asset: &CanonicalAsset, k: usize, width: usize, seed: u64) -> Result<AssetLatent> {
    check_width(width, k)?;
    let blocks = asset
        .parts
        .iter()
        .enumerate()
        .map(|(i, part)| {
            let mut rng = ChaCha8Rng::seed_from_u64(part_seed(seed, i));
            Ok(points_to_tokens(&sample_surface_with(part, k, &mut rng)?, width))
        })
        .collect::<Result<Vec<_>>>()?;
    AssetLatent::from_parts(blocks)
}

/// Single-part latent of the whole asset, sampled from the assembled mesh.
pub fn encode_monolithic(asset: &CanonicalAsset, k: usize, width: usize, seed: u64) -> Result<AssetLatent> {
    check_width(width, k)?;
    let mut rng = ChaCha8Rng::seed_from_u64(part_seed(seed, usize::MAX - 1));
    let points = sample_surface_with(&asset.assembled(), k, &mut rng)?;
    AssetLatent::from_parts(vec![points_to_tokens(&points, width)])
}

/// The first three channels of every token, one point list per part.
pub fn decode_points(latent: &AssetLatent) -> Vec<Vec<Point3>> {
    latent
        .parts()
        .iter()
        .map(|p| (0..p.tokens.rows()).map(|r| [0, 1, 2].map(|c| p.tokens.get(r, c))).collect())
        .collect()
}

/// Silhouette resolution per axis.
pub const SILHOUETTE: usize = 32;
/// Silhouette pixels per patch side.
pub const PATCH: usize = 4;

fn pixel_center(i: usize) -> f64 {
    -1.0 + (i as f64 + 0.5) * 2.0 / SILHOUETTE as f64
}

/// Whether `(x, y)` lies in the xy projection of a triangle, edges included.
fn covers(x: f64, y: f64, [a, b, c]: [Point3; 3]) -> bool {
    let e = |p: Point3, q: Point3| (q[0] - p[0]) * (y - p[1]) - (q[1] - p[1]) * (x - p[0]);
    let (w0, w1, w2) = (e(b, c), e(c, a), e(a, b));
    if w0 + w1 + w2 == 0.0 {
        return false;
    }
    (w0 >= 0.0 && w1 >= 0.0 && w2 >= 0.0) || (w0 <= 0.0 && w1 <= 0.0 && w2 <= 0.0)
}

/// Orthographic view along −z (camera on +z): pixel `(row, col)` is set when
/// its center `(x_col, y_row)` falls inside the projection of any face.
/// Row-major, `SILHOUETTE × SILHOUETTE`.
pub fn silhouette(asset: &CanonicalAsset) -> Vec<bool> {
    let mut out = vec![false; SILHOUETTE * SILHOUETTE];
    let pitch = 2.0 / SILHOUETTE as f64;
    let range = |lo: f64, hi: f64| {
        let first = libm::ceil((lo + 1.0) / pitch - 0.5).max(0.0) as usize;
        let last = libm::floor((hi + 1.0) / pitch - 0.5).min(SILHOUETTE as f64 - 1.0);
        (last >= 0.0).then(|| (first, last as usize))
    };
    for part in &asset.parts {
        for f in 0..part.faces().len() {
            let t = part.triangle(f);
            let lo = |i: usize| t.iter().map(|p| p[i]).fold(f64::INFINITY, f64::min);
            let hi = |i: usize| t.iter().map(|p| p[i]).fold(f64::NEG_INFINITY, f64::max);
            let (Some((c0, c1)), Some((r0, r1))) = (range(lo(0), hi(0)), range(lo(1), hi(1))) else {
                continue;
            };
            for row in r0..=r1 {
                for col in c0..=c1 {
                    if !out[row * SILHOUETTE + col] && covers(pixel_center(col), pixel_center(row), t) {
                        out[row * SILHOUETTE + col] = true;
                    }
                }
            }
        }
    }
    out
}

/// Reference for [`silhouette`]: every pixel against every face.
pub fn silhouette_brute(asset: &CanonicalAsset) -> Vec<bool> {
    let mut out = vec![false; SILHOUETTE * SILHOUETTE];
    for row in 0..SILHOUETTE {
        for col in 0..SILHOUETTE {
            out[row * SILHOUETTE + col] = asset
                .parts
                .iter()
                .any(|p| (0..p.faces().len()).any(|f| covers(pixel_center(col), pixel_center(row), p.triangle(f))));
        }
    }
    out
}

/// Per-patch features: `PATCH²` pixel values followed by the patch center.
pub const PATCH_FEATURES: usize = PATCH * PATCH + 2;

/// Fixed random projection from silhouette patches to condition tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionEncoder {
    projection: Tensor,
    seed: u64,
}

impl ConditionEncoder {
    pub fn new(cond_width: usize, seed: u64) -> Result<Self> {
        if cond_width == 0 {
            return Err(Error::Config("cond_width must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = 1.0 / libm::sqrt(PATCH_FEATURES as f64);
        Ok(Self { projection: nn::normal(&mut rng, &[PATCH_FEATURES, cond_width], std), seed })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn width(&self) -> usize {
        self.projection.cols()
    }

    /// Patch feature rows in row-major patch order.
    pub fn patch_features(silhouette: &[bool]) -> Tensor {
        let per_side = SILHOUETTE / PATCH;
        let mut data = Vec::with_capacity(per_side * per_side * PATCH_FEATURES);
        for pr in 0..per_side {
            for pc in 0..per_side {
                for r in 0..PATCH {
                    for c in 0..PATCH {
                        let on = silhouette[(pr * PATCH + r) * SILHOUETTE + pc * PATCH + c];
                        data.push(if on { 1.0 } else { 0.0 });
                    }
                }
                let center = |p: usize| -1.0 + (p as f64 + 0.5) * 2.0 / per_side as f64;
                data.push(center(pc));
                data.push(center(pr));
            }
        }
        Tensor::new(vec![per_side * per_side, PATCH_FEATURES], data).expect("positive extents")
    }

    pub fn encode(&self, asset: &CanonicalAsset) -> Result<ConditionTokens> {
        ConditionTokens::new(Self::patch_features(&silhouette(asset)).matmul(&self.projection)?)
    }
}
