//! Triangle meshes, surface sampling, voxelization and the three evaluation
//! metrics. Every accelerated metric has a brute-force twin used as an oracle;
//! both evaluate the same per-point expressions in the same order, so they
//! agree bit for bit.
//!
//! Canonical space is the cube `[-1, 1]³`.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use fixedbitset::FixedBitSet;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub type Point3 = [f64; 3];

/// Default number of surface samples per mesh for CD and F-score.
pub const DEFAULT_SAMPLES: usize = 10_000;
/// Default F-score distance threshold in canonical units.
pub const DEFAULT_TAU: f64 = 0.1;
/// Default voxel grid resolution per axis.
pub const DEFAULT_RESOLUTION: usize = 64;

fn sub(a: Point3, b: Point3) -> Point3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot(a: Point3, b: Point3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: Point3, b: Point3) -> Point3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn axpy(a: Point3, s: f64, d: Point3) -> Point3 {
    [a[0] + s * d[0], a[1] + s * d[1], a[2] + s * d[2]]
}

/// Euclidean distance.
pub fn distance(a: Point3, b: Point3) -> f64 {
    let d = sub(a, b);
    libm::sqrt(dot(d, d))
}

/// Indexed triangle mesh. Faces never reference missing vertices and have
/// non-zero area.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TriMesh {
    vertices: Vec<Point3>,
    faces: Vec<[u32; 3]>,
}

impl TriMesh {
    /// Validates indices and coordinates, then drops zero-area faces.
    pub fn new(vertices: Vec<Point3>, faces: Vec<[u32; 3]>) -> Result<Self> {
        if let Some(v) = vertices.iter().find(|v| v.iter().any(|c| !c.is_finite())) {
            return Err(Error::Mesh(format!("non-finite vertex {v:?}")));
        }
        let n = vertices.len();
        if let Some(f) = faces.iter().find(|f| f.iter().any(|&i| i as usize >= n)) {
            return Err(Error::Mesh(format!("face {f:?} references vertex beyond {n}")));
        }
        let mut mesh = Self { vertices, faces };
        mesh.faces.retain(|f| {
            let [a, b, c] = f.map(|i| mesh.vertices[i as usize]);
            let n = cross(sub(b, a), sub(c, a));
            dot(n, n) > 0.0
        });
        Ok(mesh)
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn vertices(&self) -> &[Point3] {
        &self.vertices
    }

    pub fn faces(&self) -> &[[u32; 3]] {
        &self.faces
    }

    pub fn is_empty(&self) -> bool {
        self.faces.is_empty()
    }

    pub fn triangle(&self, f: usize) -> [Point3; 3] {
        self.faces[f].map(|i| self.vertices[i as usize])
    }

    pub fn face_area(&self, f: usize) -> f64 {
        let [a, b, c] = self.triangle(f);
        let n = cross(sub(b, a), sub(c, a));
        0.5 * libm::sqrt(dot(n, n))
    }

    pub fn area(&self) -> f64 {
        (0..self.faces.len()).map(|f| self.face_area(f)).sum()
    }

    /// Axis-aligned bounds of the vertices, `None` without vertices.
    pub fn bounds(&self) -> Option<(Point3, Point3)> {
        let first = *self.vertices.first()?;
        Some(self.vertices.iter().fold((first, first), |(lo, hi), v| {
            (
                [lo[0].min(v[0]), lo[1].min(v[1]), lo[2].min(v[2])],
                [hi[0].max(v[0]), hi[1].max(v[1]), hi[2].max(v[2])],
            )
        }))
    }

    /// Applies `f` to every vertex; faces are kept as they are.
    pub fn map_vertices(&self, f: impl Fn(Point3) -> Point3) -> Result<Self> {
        Self::new(self.vertices.iter().map(|&v| f(v)).collect(), self.faces.clone())
    }

    /// Same mesh with faces listed in a different order (`order[i]` is the old index).
    pub fn with_face_order(&self, order: &[usize]) -> Self {
        Self { vertices: self.vertices.clone(), faces: order.iter().map(|&i| self.faces[i]).collect() }
    }

    /// Closed two-manifold test: after merging vertices at identical
    /// positions, every undirected edge borders exactly two faces.
    pub fn is_watertight(&self) -> bool {
        if self.faces.is_empty() {
            return false;
        }
        let mut canon: BTreeMap<[u64; 3], u32> = BTreeMap::new();
        let ids: Vec<u32> = self
            .vertices
            .iter()
            .map(|v| {
                let key = v.map(|c| (c + 0.0).to_bits());
                let next = canon.len() as u32;
                *canon.entry(key).or_insert(next)
            })
            .collect();
        let mut edges: BTreeMap<(u32, u32), u32> = BTreeMap::new();
        for f in &self.faces {
            let v = f.map(|i| ids[i as usize]);
            for e in 0..3 {
                let (a, b) = (v[e], v[(e + 1) % 3]);
                if a == b {
                    return false;
                }
                *edges.entry((a.min(b), a.max(b))).or_insert(0) += 1;
            }
        }
        edges.values().all(|&c| c == 2)
    }
}

/// Concatenates parts into one mesh, offsetting face indices. Vertices are
/// not welded.
pub fn assemble(parts: &[TriMesh]) -> TriMesh {
    let mut out = TriMesh::empty();
    for p in parts {
        let offset = out.vertices.len() as u32;
        out.vertices.extend_from_slice(&p.vertices);
        out.faces.extend(p.faces.iter().map(|f| f.map(|i| i + offset)));
    }
    out
}

/// Closest point to `p` on triangle `abc`.
pub fn closest_point_on_triangle(p: Point3, [a, b, c]: [Point3; 3]) -> Point3 {
    let ab = sub(b, a);
    let ac = sub(c, a);
    let ap = sub(p, a);
    let d1 = dot(ab, ap);
    let d2 = dot(ac, ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return a;
    }
    let bp = sub(p, b);
    let d3 = dot(ab, bp);
    let d4 = dot(ac, bp);
    if d3 >= 0.0 && d4 <= d3 {
        return b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        return axpy(a, d1 / (d1 - d3), ab);
    }
    let cp = sub(p, c);
    let d5 = dot(ab, cp);
    let d6 = dot(ac, cp);
    if d6 >= 0.0 && d5 <= d6 {
        return c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        return axpy(a, d2 / (d2 - d6), ac);
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        return axpy(b, (d4 - d3) / ((d4 - d3) + (d5 - d6)), sub(c, b));
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    axpy(axpy(a, v, ab), w, ac)
}

/// Unsigned distance from `p` to the nearest face; infinite for an empty mesh.
pub fn distance_to_mesh(p: Point3, mesh: &TriMesh) -> f64 {
    (0..mesh.faces.len())
        .map(|f| distance(p, closest_point_on_triangle(p, mesh.triangle(f))))
        .fold(f64::INFINITY, f64::min)
}

/// Point set together with the seed that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct PointSample {
    pub points: Vec<Point3>,
    pub seed: u64,
}

/// Area-weighted uniform surface samples, deterministic per seed.
pub fn sample_surface(mesh: &TriMesh, n: usize, seed: u64) -> Result<PointSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(PointSample { points: sample_surface_with(mesh, n, &mut rng)?, seed })
}

/// [`sample_surface`] drawing from a caller-supplied generator.
pub fn sample_surface_with<R: Rng + ?Sized>(mesh: &TriMesh, n: usize, rng: &mut R) -> Result<Vec<Point3>> {
    let mut cumulative = Vec::with_capacity(mesh.faces.len());
    let mut total = 0.0;
    for f in 0..mesh.faces.len() {
        total += mesh.face_area(f);
        cumulative.push(total);
    }
    if !(total > 0.0) {
        return Err(Error::Mesh("cannot sample a mesh without area".into()));
    }
    let mut points = Vec::with_capacity(n);
    for _ in 0..n {
        let x = rng.random::<f64>() * total;
        let f = cumulative.partition_point(|&c| c <= x).min(cumulative.len() - 1);
        let [a, b, c] = mesh.triangle(f);
        let r1 = libm::sqrt(rng.random::<f64>());
        let r2 = rng.random::<f64>();
        let (wa, wb, wc) = (1.0 - r1, r1 * (1.0 - r2), r1 * r2);
        points.push([0, 1, 2].map(|i| wa * a[i] + wb * b[i] + wc * c[i]));
    }
    Ok(points)
}

/// Uniform grid over a point set for nearest-neighbour queries.
struct PointGrid<'a> {
    points: &'a [Point3],
    origin: Point3,
    cell: f64,
    dims: [usize; 3],
    starts: Vec<usize>,
    order: Vec<usize>,
}

impl<'a> PointGrid<'a> {
    fn new(points: &'a [Point3]) -> Self {
        let mut lo = points[0];
        let mut hi = points[0];
        for p in points {
            for i in 0..3 {
                lo[i] = lo[i].min(p[i]);
                hi[i] = hi[i].max(p[i]);
            }
        }
        let extent = (0..3).map(|i| hi[i] - lo[i]).fold(0.0, f64::max);
        // Roughly two points per occupied cell on a surface-like set.
        let per_axis = libm::ceil(libm::sqrt(points.len() as f64 / 2.0)).clamp(1.0, 256.0);
        let cell = if extent > 0.0 { extent / per_axis } else { 1.0 };
        let dims = [0, 1, 2].map(|i| ((hi[i] - lo[i]) / cell) as usize + 1);
        let total = dims[0] * dims[1] * dims[2];
        let mut counts = vec![0usize; total + 1];
        let cells: Vec<usize> = points
            .iter()
            .map(|p| {
                let c = Self::cell_of(lo, cell, dims, *p);
                (c[0] as usize * dims[1] + c[1] as usize) * dims[2] + c[2] as usize
            })
            .collect();
        for &c in &cells {
            counts[c + 1] += 1;
        }
        for i in 0..total {
            counts[i + 1] += counts[i];
        }
        let mut fill = counts.clone();
        let mut order = vec![0; points.len()];
        for (i, &c) in cells.iter().enumerate() {
            order[fill[c]] = i;
            fill[c] += 1;
        }
        Self { points, origin: lo, cell, dims, starts: counts, order }
    }

    fn cell_of(origin: Point3, cell: f64, dims: [usize; 3], p: Point3) -> [isize; 3] {
        [0, 1, 2].map(|i| {
            let c = libm::floor((p[i] - origin[i]) / cell) as isize;
            c.clamp(0, dims[i] as isize - 1)
        })
    }

    /// Distance from `q` to the nearest indexed point.
    fn nearest(&self, q: Point3) -> f64 {
        let home = Self::cell_of(self.origin, self.cell, self.dims, q);
        let max_ring = self.dims.iter().copied().max().unwrap_or(1) as isize;
        let mut best = f64::INFINITY;
        let span = |axis: usize, r: isize| {
            let lo = (home[axis] - r).max(0);
            let hi = (home[axis] + r).min(self.dims[axis] as isize - 1);
            lo..=hi
        };
        for r in 0..=max_ring {
            for x in span(0, r) {
                for y in span(1, r) {
                    let z_range = span(2, r);
                    let on_shell = (x - home[0]).abs() == r || (y - home[1]).abs() == r;
                    // Off the x/y shell only the two z faces of the ring remain.
                    let faces = [home[2] - r, home[2] + r];
                    let zs: &mut dyn Iterator<Item = isize> = if on_shell {
                        &mut z_range.clone()
                    } else {
                        &mut faces.into_iter().filter(|z| z_range.contains(z))
                    };
                    for z in zs {
                        let c = (x as usize * self.dims[1] + y as usize) * self.dims[2] + z as usize;
                        for &i in &self.order[self.starts[c]..self.starts[c + 1]] {
                            best = best.min(distance(q, self.points[i]));
                        }
                    }
                }
            }
            // Unvisited cells lie more than `r` cells from the home cell
            // along some axis, hence at least `r·cell` away from `q`.
            if best <= r as f64 * self.cell || r == max_ring {
                break;
            }
        }
        best
    }
}

fn check_nonempty(p: &[Point3], q: &[Point3]) -> Result<()> {
    if p.is_empty() || q.is_empty() {
        return Err(Error::Domain("metric needs non-empty point sets".into()));
    }
    Ok(())
}

/// Nearest-neighbour distance from every point of `from` into `to`.
pub fn nearest_distances(from: &[Point3], to: &[Point3]) -> Result<Vec<f64>> {
    check_nonempty(from, to)?;
    let grid = PointGrid::new(to);
    Ok(from.iter().map(|&p| grid.nearest(p)).collect())
}

/// O(nm) reference for [`nearest_distances`].
pub fn nearest_distances_brute(from: &[Point3], to: &[Point3]) -> Result<Vec<f64>> {
    check_nonempty(from, to)?;
    Ok(from.iter().map(|&p| to.iter().map(|&q| distance(p, q)).fold(f64::INFINITY, f64::min)).collect())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn chamfer_from(pq: &[f64], qp: &[f64]) -> f64 {
    mean(pq) + mean(qp)
}

/// `mean_p min_q |p−q| + mean_q min_p |q−p|` with non-squared distances.
pub fn chamfer(p: &[Point3], q: &[Point3]) -> Result<f64> {
    Ok(chamfer_from(&nearest_distances(p, q)?, &nearest_distances(q, p)?))
}

pub fn chamfer_brute(p: &[Point3], q: &[Point3]) -> Result<f64> {
    Ok(chamfer_from(&nearest_distances_brute(p, q)?, &nearest_distances_brute(q, p)?))
}

fn f_score_from(pq: &[f64], qp: &[f64], tau: f64) -> f64 {
    let precision = pq.iter().filter(|&&d| d < tau).count() as f64 / pq.len() as f64;
    let recall = qp.iter().filter(|&&d| d < tau).count() as f64 / qp.len() as f64;
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Harmonic mean of the fractions of each set strictly closer than `tau`
/// to the other set.
pub fn f_score(p: &[Point3], q: &[Point3], tau: f64) -> Result<f64> {
    Ok(f_score_from(&nearest_distances(p, q)?, &nearest_distances(q, p)?, tau))
}

pub fn f_score_brute(p: &[Point3], q: &[Point3], tau: f64) -> Result<f64> {
    Ok(f_score_from(&nearest_distances_brute(p, q)?, &nearest_distances_brute(q, p)?, tau))
}

/// Occupancy of the `R³` cells partitioning `[-1, 1]³`. Cell `(i, j, k)`
/// has its center at `-1 + (i + 0.5)·2/R` along x, and likewise for y and z.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VoxelGrid {
    resolution: usize,
    bits: FixedBitSet,
    surface_only: bool,
}

impl VoxelGrid {
    pub fn new(resolution: usize) -> Self {
        assert!(resolution > 0, "resolution must be positive");
        Self { resolution, bits: FixedBitSet::with_capacity(resolution.pow(3)), surface_only: false }
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn pitch(&self) -> f64 {
        2.0 / self.resolution as f64
    }

    pub fn center(&self, i: usize) -> f64 {
        -1.0 + (i as f64 + 0.5) * self.pitch()
    }

    /// True when the occupancy is a surface band rather than a solid.
    pub fn surface_only(&self) -> bool {
        self.surface_only
    }

    fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.resolution + j) * self.resolution + k
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> bool {
        self.bits.contains(self.index(i, j, k))
    }

    pub fn set(&mut self, i: usize, j: usize, k: usize) {
        let idx = self.index(i, j, k);
        self.bits.insert(idx);
    }

    pub fn count(&self) -> usize {
        self.bits.count_ones(..)
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    /// Occupied cells as `(i, j, k)` in index order.
    pub fn occupied(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        let r = self.resolution;
        self.bits.ones().map(move |idx| (idx / (r * r), (idx / r) % r, idx % r))
    }

    /// Cell range whose centers may lie within `[lo, hi]` along one axis.
    fn cell_range(&self, lo: f64, hi: f64) -> Option<(usize, usize)> {
        let r = self.resolution as f64;
        let first = libm::ceil((lo + 1.0) / self.pitch() - 0.5).max(0.0);
        let last = libm::floor((hi + 1.0) / self.pitch() - 0.5).min(r - 1.0);
        (first <= last).then_some((first as usize, last as usize))
    }
}

fn check_resolutions(a: &VoxelGrid, b: &VoxelGrid) -> Result<()> {
    if a.resolution != b.resolution {
        return Err(Error::Domain(format!("resolutions differ: {} vs {}", a.resolution, b.resolution)));
    }
    Ok(())
}

fn ratio(inter: usize, union: usize) -> f64 {
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// `|A∩B| / |A∪B|`, zero when both are empty.
pub fn iou(a: &VoxelGrid, b: &VoxelGrid) -> Result<f64> {
    check_resolutions(a, b)?;
    Ok(ratio(a.bits.intersection_count(&b.bits), a.bits.union_count(&b.bits)))
}

pub fn iou_brute(a: &VoxelGrid, b: &VoxelGrid) -> Result<f64> {
    check_resolutions(a, b)?;
    let r = a.resolution;
    let (mut inter, mut union) = (0, 0);
    for i in 0..r {
        for j in 0..r {
            for k in 0..r {
                let (x, y) = (a.get(i, j, k), b.get(i, j, k));
                inter += usize::from(x && y);
                union += usize::from(x || y);
            }
        }
    }
    Ok(ratio(inter, union))
}

fn pair_ious(parts: &[VoxelGrid], f: fn(&VoxelGrid, &VoxelGrid) -> Result<f64>) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for i in 0..parts.len() {
        for j in i + 1..parts.len() {
            out.push(f(&parts[i], &parts[j])?);
        }
    }
    Ok(out)
}

/// IoU of every unordered pair `(i, j)`, `i < j`, in lexicographic order.
pub fn pair_iou_values(parts: &[VoxelGrid]) -> Result<Vec<f64>> {
    pair_ious(parts, iou)
}

/// Mean IoU over unordered pairs; zero for fewer than two parts.
pub fn pairwise_iou(parts: &[VoxelGrid]) -> Result<f64> {
    let v = pair_ious(parts, iou)?;
    Ok(if v.is_empty() { 0.0 } else { mean(&v) })
}

pub fn pairwise_iou_brute(parts: &[VoxelGrid]) -> Result<f64> {
    let v = pair_ious(parts, iou_brute)?;
    Ok(if v.is_empty() { 0.0 } else { mean(&v) })
}

/// Largest IoU over unordered pairs; zero for fewer than two parts.
pub fn max_pairwise_iou(parts: &[VoxelGrid]) -> Result<f64> {
    Ok(pair_ious(parts, iou)?.into_iter().fold(0.0, f64::max))
}

/// Where a ray parallel to +x at `(y, z)` crosses a triangle, if it does.
/// `Err(())` reports a grazing hit on an edge or vertex.
fn crossing(y: f64, z: f64, [a, b, c]: [Point3; 3]) -> core::result::Result<Option<f64>, ()> {
    // Signed areas in the yz plane.
    let e = |p: Point3, q: Point3| (q[1] - p[1]) * (z - p[2]) - (q[2] - p[2]) * (y - p[1]);
    let (w0, w1, w2) = (e(b, c), e(c, a), e(a, b));
    let area = w0 + w1 + w2;
    if area == 0.0 {
        // Triangle seen edge-on; neighbours account for any crossing.
        return Ok(None);
    }
    let tol = 1e-12 * area.abs();
    if w0.abs() <= tol || w1.abs() <= tol || w2.abs() <= tol {
        let inside_or_on = (w0 >= -tol && w1 >= -tol && w2 >= -tol) || (w0 <= tol && w1 <= tol && w2 <= tol);
        return if inside_or_on { Err(()) } else { Ok(None) };
    }
    let inside = (w0 > 0.0 && w1 > 0.0 && w2 > 0.0) || (w0 < 0.0 && w1 < 0.0 && w2 < 0.0);
    if !inside {
        return Ok(None);
    }
    Ok(Some((w0 * a[0] + w1 * b[0] + w2 * c[0]) / area))
}

/// Sorted x positions where a +x ray at `(y, z)` crosses `mesh`, jittering
/// the ray off grazing contacts.
fn ray_crossings(mesh: &TriMesh, candidates: &[usize], y: f64, z: f64, pitch: f64) -> Vec<f64> {
    const JITTER: [(f64, f64); 6] =
        [(0.0, 0.0), (1.3e-7, 0.7e-7), (-0.9e-7, 1.1e-7), (0.6e-7, -1.4e-7), (-1.2e-7, -0.5e-7), (2.1e-7, 1.7e-7)];
    let mut xs = Vec::new();
    for (dy, dz) in JITTER {
        let (yy, zz) = (y + dy * pitch, z + dz * pitch);
        xs.clear();
        let mut grazed = false;
        for &f in candidates {
            match crossing(yy, zz, mesh.triangle(f)) {
                Ok(Some(x)) => xs.push(x),
                Ok(None) => {}
                Err(()) => {
                    grazed = true;
                    break;
                }
            }
        }
        if !grazed {
            break;
        }
    }
    xs.sort_by(f64::total_cmp);
    xs
}

/// Solid occupancy by +x parity ray casting through cell centers. Meshes
/// that are not closed fall back to [`voxelize_surface`] and come back
/// flagged [`VoxelGrid::surface_only`].
pub fn voxelize_solid(mesh: &TriMesh, resolution: usize) -> VoxelGrid {
    let mut grid = VoxelGrid::new(resolution);
    if mesh.is_empty() {
        return grid;
    }
    if !mesh.is_watertight() {
        return voxelize_surface(mesh, resolution);
    }
    let pitch = grid.pitch();
    // Bucket faces by the (j, k) rows their yz bounds overlap.
    let mut rows: Vec<Vec<usize>> = vec![Vec::new(); resolution * resolution];
    for f in 0..mesh.faces.len() {
        let t = mesh.triangle(f);
        let lo = |i: usize| t.iter().map(|p| p[i]).fold(f64::INFINITY, f64::min) - pitch;
        let hi = |i: usize| t.iter().map(|p| p[i]).fold(f64::NEG_INFINITY, f64::max) + pitch;
        let (Some((j0, j1)), Some((k0, k1))) = (grid.cell_range(lo(1), hi(1)), grid.cell_range(lo(2), hi(2))) else {
            continue;
        };
        for j in j0..=j1 {
            for k in k0..=k1 {
                rows[j * resolution + k].push(f);
            }
        }
    }
    for j in 0..resolution {
        for k in 0..resolution {
            let candidates = &rows[j * resolution + k];
            if candidates.is_empty() {
                continue;
            }
            let xs = ray_crossings(mesh, candidates, grid.center(j), grid.center(k), pitch);
            let mut passed = 0;
            for i in 0..resolution {
                let x = grid.center(i);
                while passed < xs.len() && xs[passed] < x {
                    passed += 1;
                }
                if passed % 2 == 1 {
                    grid.set(i, j, k);
                }
            }
        }
    }
    grid
}

/// Cells whose centers lie within half a cell diagonal of the surface.
pub fn voxelize_surface(mesh: &TriMesh, resolution: usize) -> VoxelGrid {
    let mut grid = VoxelGrid::new(resolution);
    grid.surface_only = true;
    let band = 0.5 * libm::sqrt(3.0) * grid.pitch();
    for f in 0..mesh.faces.len() {
        let t = mesh.triangle(f);
        let range = |i: usize| {
            let lo = t.iter().map(|p| p[i]).fold(f64::INFINITY, f64::min) - band;
            let hi = t.iter().map(|p| p[i]).fold(f64::NEG_INFINITY, f64::max) + band;
            grid.cell_range(lo, hi)
        };
        let (Some((i0, i1)), Some((j0, j1)), Some((k0, k1))) = (range(0), range(1), range(2)) else {
            continue;
        };
        for i in i0..=i1 {
            for j in j0..=j1 {
                for k in k0..=k1 {
                    let c = [grid.center(i), grid.center(j), grid.center(k)];
                    if distance(c, closest_point_on_triangle(c, t)) <= band {
                        grid.set(i, j, k);
                    }
                }
            }
        }
    }
    grid
}

/// Occupancy of a point set: the cell containing each point inside the cube,
/// plus every cell whose center lies within `radius` of a point.
pub fn voxelize_points(points: &[Point3], resolution: usize, radius: f64) -> VoxelGrid {
    let mut grid = VoxelGrid::new(resolution);
    grid.surface_only = true;
    let r = resolution as f64;
    for &p in points {
        if p.iter().all(|c| (-1.0..1.0).contains(c)) {
            let [i, j, k] = p.map(|c| (libm::floor((c + 1.0) / 2.0 * r) as usize).min(resolution - 1));
            grid.set(i, j, k);
        }
        if radius > 0.0 {
            let (Some((i0, i1)), Some((j0, j1)), Some((k0, k1))) = (
                grid.cell_range(p[0] - radius, p[0] + radius),
                grid.cell_range(p[1] - radius, p[1] + radius),
                grid.cell_range(p[2] - radius, p[2] + radius),
            ) else {
                continue;
            };
            for i in i0..=i1 {
                for j in j0..=j1 {
                    for k in k0..=k1 {
                        if distance(p, [grid.center(i), grid.center(j), grid.center(k)]) <= radius {
                            grid.set(i, j, k);
                        }
                    }
                }
            }
        }
    }
    grid
}

/// Closed axis-aligned box with 8 shared vertices and 12 outward faces.
pub fn box_mesh(lo: Point3, hi: Point3) -> Result<TriMesh> {
    let v = |x: usize, y: usize, z: usize| [[lo, hi][x][0], [lo, hi][y][1], [lo, hi][z][2]];
    let vertices = vec![v(0, 0, 0), v(1, 0, 0), v(1, 1, 0), v(0, 1, 0), v(0, 0, 1), v(1, 0, 1), v(1, 1, 1), v(0, 1, 1)];
    let faces = vec![
        [0, 2, 1],
        [0, 3, 2],
        [4, 5, 6],
        [4, 6, 7],
        [0, 1, 5],
        [0, 5, 4],
        [3, 7, 6],
        [3, 6, 2],
        [0, 4, 7],
        [0, 7, 3],
        [1, 2, 6],
        [1, 6, 5],
    ];
    TriMesh::new(vertices, faces)
}

/// Closed UV sphere with single pole vertices.
pub fn sphere_mesh(center: Point3, radius: f64, rings: usize, segments: usize) -> Result<TriMesh> {
    if rings < 2 || segments < 3 {
        return Err(Error::Mesh("sphere needs at least 2 rings and 3 segments".into()));
    }
    let pi = core::f64::consts::PI;
    let mut vertices = vec![[center[0], center[1], center[2] + radius]];
    for r in 1..rings {
        let theta = pi * r as f64 / rings as f64;
        for s in 0..segments {
            let phi = 2.0 * pi * s as f64 / segments as f64;
            vertices.push([
                center[0] + radius * libm::sin(theta) * libm::cos(phi),
                center[1] + radius * libm::sin(theta) * libm::sin(phi),
                center[2] + radius * libm::cos(theta),
            ]);
        }
    }
    let south = vertices.len() as u32;
    vertices.push([center[0], center[1], center[2] - radius]);
    let seg = segments as u32;
    let at = |r: u32, s: u32| 1 + r * seg + s % seg;
    let mut faces = Vec::new();
    for s in 0..seg {
        faces.push([0, at(0, s), at(0, s + 1)]);
    }
    for r in 0..rings as u32 - 2 {
        for s in 0..seg {
            faces.push([at(r, s), at(r + 1, s), at(r + 1, s + 1)]);
            faces.push([at(r, s), at(r + 1, s + 1), at(r, s + 1)]);
        }
    }
    let last = rings as u32 - 2;
    for s in 0..seg {
        faces.push([south, at(last, s + 1), at(last, s)]);
    }
    TriMesh::new(vertices, faces)
}

/// Closed cylinder along z with polygonal caps.
pub fn cylinder_mesh(center: Point3, radius: f64, half_height: f64, segments: usize) -> Result<TriMesh> {
    if segments < 3 {
        return Err(Error::Mesh("cylinder needs at least 3 segments".into()));
    }
    let pi = core::f64::consts::PI;
    let mut vertices = Vec::new();
    for dz in [-half_height, half_height] {
        for s in 0..segments {
            let phi = 2.0 * pi * s as f64 / segments as f64;
            vertices.push([center[0] + radius * libm::cos(phi), center[1] + radius * libm::sin(phi), center[2] + dz]);
        }
    }
    let bottom = vertices.len() as u32;
    vertices.push([center[0], center[1], center[2] - half_height]);
    vertices.push([center[0], center[1], center[2] + half_height]);
    let top = bottom + 1;
    let seg = segments as u32;
    let mut faces = Vec::new();
    for s in 0..seg {
        let n = (s + 1) % seg;
        faces.push([s, n, seg + n]);
        faces.push([s, seg + n, seg + s]);
        faces.push([bottom, n, s]);
        faces.push([top, seg + s, seg + n]);
    }
    TriMesh::new(vertices, faces)
}
