use partforge_core::geometry::{
    assemble, box_mesh, chamfer, chamfer_brute, closest_point_on_triangle, cylinder_mesh, distance_to_mesh, f_score,
    f_score_brute, iou, iou_brute, max_pairwise_iou, nearest_distances, nearest_distances_brute, pairwise_iou,
    pairwise_iou_brute, sample_surface, sphere_mesh, voxelize_points, voxelize_solid, voxelize_surface, Point3,
};
use partforge_core::{Error, TriMesh, VoxelGrid};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn unit_square() -> TriMesh {
    TriMesh::new(
        vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [1.0, 1.0, 0.0], [0.0, 1.0, 0.0]],
        vec![[0, 1, 2], [0, 2, 3]],
    )
    .unwrap()
}

fn random_points(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<Point3> {
    (0..n).map(|_| [0; 3].map(|_| rng.random_range(-scale..scale))).collect()
}

#[test]
fn mesh_validation() {
    assert!(matches!(TriMesh::new(vec![[0.0; 3]], vec![[0, 0, 1]]), Err(Error::Mesh(_))));
    assert!(matches!(TriMesh::new(vec![[f64::NAN, 0.0, 0.0]], vec![]), Err(Error::Mesh(_))));
    // Collinear and repeated-vertex faces are dropped.
    let m = TriMesh::new(
        vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
        vec![[0, 1, 2], [0, 0, 3], [0, 1, 3]],
    )
    .unwrap();
    assert_eq!(m.faces(), &[[0, 1, 3]]);
    assert_eq!(unit_square().area(), 1.0);
}

#[test]
fn watertightness() {
    assert!(box_mesh([-0.5; 3], [0.5; 3]).unwrap().is_watertight());
    assert!(sphere_mesh([0.0; 3], 0.5, 8, 12).unwrap().is_watertight());
    assert!(cylinder_mesh([0.0; 3], 0.3, 0.5, 10).unwrap().is_watertight());
    assert!(!unit_square().is_watertight());
    let b = box_mesh([-0.5; 3], [0.5; 3]).unwrap();
    let open = TriMesh::new(b.vertices().to_vec(), b.faces()[2..].to_vec()).unwrap();
    assert!(!open.is_watertight());
    // Unwelded copies of shared vertices still count as closed.
    let soup: Vec<Point3> = (0..b.faces().len()).flat_map(|f| b.triangle(f)).collect();
    let faces = (0..b.faces().len() as u32).map(|f| [3 * f, 3 * f + 1, 3 * f + 2]).collect();
    assert!(TriMesh::new(soup, faces).unwrap().is_watertight());
}

#[test]
fn primitive_areas() {
    assert!((box_mesh([-0.5; 3], [0.5; 3]).unwrap().area() - 6.0).abs() < 1e-12);
    let s = sphere_mesh([0.0; 3], 1.0, 48, 96).unwrap().area();
    assert!((s - 4.0 * std::f64::consts::PI).abs() / s < 0.01);
}

#[test]
fn sampling_is_area_weighted() {
    // Triangle areas 3/4 and 1/4 of the total.
    let m = TriMesh::new(
        vec![[0.0, 0.0, 0.0], [3.0, 0.0, 0.0], [3.0, 1.0, 0.0], [0.0, 0.0, 1.0], [1.0, 0.0, 1.0], [1.0, 1.0, 1.0]],
        vec![[0, 1, 2], [3, 4, 5]],
    )
    .unwrap();
    let n = 20_000;
    let pts = sample_surface(&m, n, 3).unwrap().points;
    let first = pts.iter().filter(|p| p[2] == 0.0).count() as f64;
    let p = 0.75;
    let sigma = (n as f64 * p * (1.0 - p)).sqrt();
    assert!((first - n as f64 * p).abs() < 3.0 * sigma, "{first}");

    let sq = sample_surface(&unit_square(), n, 4).unwrap().points;
    let lower = sq.iter().filter(|p| p[0] > p[1]).count() as f64;
    let sigma = (n as f64 * 0.25).sqrt();
    assert!((lower - n as f64 / 2.0).abs() < 3.0 * sigma);
}

#[test]
fn samples_stay_inside_a_triangle() {
    let t = [[0.1, 0.2, 0.3], [0.9, -0.4, 0.0], [-0.2, 0.5, 0.8]];
    let m = TriMesh::new(t.to_vec(), vec![[0, 1, 2]]).unwrap();
    for p in sample_surface(&m, 2000, 1).unwrap().points {
        assert!(distance_to_mesh(p, &m) < 1e-12);
    }
}

#[test]
fn sampling_is_deterministic() {
    let m = sphere_mesh([0.0; 3], 0.5, 6, 8).unwrap();
    assert_eq!(sample_surface(&m, 100, 9).unwrap(), sample_surface(&m, 100, 9).unwrap());
    assert_ne!(sample_surface(&m, 100, 9).unwrap(), sample_surface(&m, 100, 10).unwrap());
    assert!(matches!(sample_surface(&TriMesh::empty(), 10, 0), Err(Error::Mesh(_))));
}

#[test]
fn closest_point_regions() {
    let t = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
    let inner = closest_point_on_triangle([0.2, 0.2, 5.0], t);
    assert!((0..3).all(|i| (inner[i] - [0.2, 0.2, 0.0][i]).abs() < 1e-15));
    assert_eq!(closest_point_on_triangle([-1.0, -1.0, 0.0], t), [0.0, 0.0, 0.0]);
    assert_eq!(closest_point_on_triangle([2.0, -1.0, 0.0], t), [1.0, 0.0, 0.0]);
    assert_eq!(closest_point_on_triangle([0.5, -3.0, 1.0], t), [0.5, 0.0, 0.0]);
    assert_eq!(closest_point_on_triangle([1.0, 1.0, 0.0], t), [0.5, 0.5, 0.0]);
}

#[test]
fn chamfer_examples() {
    let p = vec![[0.0, 0.0, 0.0]];
    let q = vec![[1.0, 0.0, 0.0]];
    assert_eq!(chamfer(&p, &q).unwrap(), 2.0);
    assert_eq!(chamfer_brute(&p, &q).unwrap(), 2.0);
    let mut r = ChaCha8Rng::seed_from_u64(0);
    let a = random_points(&mut r, 50, 1.0);
    assert_eq!(chamfer(&a, &a).unwrap(), 0.0);
    assert!(matches!(chamfer(&[], &a), Err(Error::Domain(_))));
    assert!(matches!(f_score(&a, &[], 0.1), Err(Error::Domain(_))));
}

#[test]
fn f_score_examples() {
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let a = random_points(&mut r, 40, 1.0);
    assert_eq!(f_score(&a, &a, 0.1).unwrap(), 1.0);
    let far: Vec<Point3> = a.iter().map(|p| [p[0] + 10.0, p[1], p[2]]).collect();
    assert_eq!(f_score(&a, &far, 0.1).unwrap(), 0.0);
    // Half of P sits on Q, the other half is far away; all of Q is covered.
    let q = vec![[0.0, 0.0, 0.0], [0.5, 0.0, 0.0]];
    let p = vec![[0.0, 0.0, 0.0], [0.5, 0.0, 0.0], [5.0, 0.0, 0.0], [6.0, 0.0, 0.0]];
    assert!((f_score(&p, &q, 0.1).unwrap() - 2.0 / 3.0).abs() < 1e-15);
    assert_eq!(f_score(&p, &q, 0.1).unwrap(), f_score_brute(&p, &q, 0.1).unwrap());
    // The threshold is strict.
    assert_eq!(f_score(&[[0.0; 3]], &[[0.1, 0.0, 0.0]], 0.1).unwrap(), 0.0);
}

#[test]
fn point_metrics_match_brute_force_on_many_instances() {
    let mut r = ChaCha8Rng::seed_from_u64(2);
    for trial in 0..1000 {
        let n = r.random_range(1..60);
        let m = r.random_range(1..60);
        let scale = [0.01, 0.3, 1.0, 5.0][trial % 4];
        let p = random_points(&mut r, n, scale);
        let mut q = random_points(&mut r, m, scale);
        if trial % 7 == 0 {
            // Duplicates and coincident sets.
            q.extend_from_slice(&p[..n.min(3)]);
        }
        let fast = chamfer(&p, &q).unwrap();
        let slow = chamfer_brute(&p, &q).unwrap();
        assert!((fast - slow).abs() <= 1e-12, "trial {trial}: {fast} vs {slow}");
        let tau = [0.05, 0.1, 0.5][trial % 3];
        assert!((f_score(&p, &q, tau).unwrap() - f_score_brute(&p, &q, tau).unwrap()).abs() <= 1e-12);
    }
}

#[test]
fn nearest_neighbour_grid_handles_large_sets() {
    let mut r = ChaCha8Rng::seed_from_u64(3);
    let m = sphere_mesh([0.1, 0.0, -0.2], 0.7, 12, 16).unwrap();
    let p = sample_surface(&m, 1000, 1).unwrap().points;
    let q = random_points(&mut r, 1000, 1.2);
    assert_eq!(nearest_distances(&p, &q).unwrap(), nearest_distances_brute(&p, &q).unwrap());
    assert_eq!(nearest_distances(&q, &p).unwrap(), nearest_distances_brute(&q, &p).unwrap());
}

#[test]
fn unit_cube_occupancy() {
    let cube = box_mesh([-0.5; 3], [0.5; 3]).unwrap();
    let g = voxelize_solid(&cube, 64);
    assert!(!g.surface_only());
    let expected = 32f64.powi(3);
    assert!((g.count() as f64 - expected).abs() / expected < 0.02, "{}", g.count());
    assert_eq!(g.len(), 64 * 64 * 64);
}

#[test]
fn sphere_volume_is_close() {
    let s = sphere_mesh([0.05, -0.1, 0.0], 0.6, 32, 64).unwrap();
    let g = voxelize_solid(&s, 64);
    let cell = (2.0f64 / 64.0).powi(3);
    let volume = g.count() as f64 * cell;
    let exact = 4.0 / 3.0 * std::f64::consts::PI * 0.6f64.powi(3);
    assert!((volume - exact).abs() / exact < 0.03, "{volume} vs {exact}");
}

#[test]
fn open_meshes_fall_back_to_surface_band() {
    let patch = TriMesh::new(
        vec![[-0.5, -0.5, 0.0], [0.5, -0.5, 0.0], [0.5, 0.5, 0.0], [-0.5, 0.5, 0.0]],
        vec![[0, 1, 2], [0, 2, 3]],
    )
    .unwrap();
    let g = voxelize_solid(&patch, 16);
    assert!(g.surface_only());
    assert!(g.count() > 0);
    assert_eq!(g, voxelize_surface(&patch, 16));
    assert!(voxelize_solid(&TriMesh::empty(), 8).is_empty());
}

#[test]
fn translation_by_one_pitch_shifts_one_cell() {
    let r = 32;
    let pitch = 2.0 / r as f64;
    let s = sphere_mesh([-0.13, 0.07, 0.021], 0.41, 10, 14).unwrap();
    let moved = s.map_vertices(|v| [v[0] + pitch, v[1], v[2]]).unwrap();
    let a = voxelize_solid(&s, r);
    let b = voxelize_solid(&moved, r);
    assert_eq!(a.count(), b.count());
    for (i, j, k) in a.occupied() {
        assert!(b.get(i + 1, j, k));
    }
}

#[test]
fn half_overlapping_cubes_have_iou_one_third() {
    let a = voxelize_solid(&box_mesh([-0.75, -0.5, -0.5], [0.25, 0.5, 0.5]).unwrap(), 64);
    let b = voxelize_solid(&box_mesh([-0.25, -0.5, -0.5], [0.75, 0.5, 0.5]).unwrap(), 64);
    let v = pairwise_iou(&[a.clone(), b.clone()]).unwrap();
    assert!((v - 1.0 / 3.0).abs() <= 0.02, "{v}");
    assert_eq!(iou(&a, &a).unwrap(), 1.0);
}

#[test]
fn iou_conventions() {
    let cube = voxelize_solid(&box_mesh([-0.9; 3], [-0.1; 3]).unwrap(), 16);
    let other = voxelize_solid(&box_mesh([0.1; 3], [0.9; 3]).unwrap(), 16);
    assert_eq!(pairwise_iou(&[cube.clone(), other.clone()]).unwrap(), 0.0);
    assert_eq!(pairwise_iou(std::slice::from_ref(&cube)).unwrap(), 0.0);
    assert_eq!(pairwise_iou(&[]).unwrap(), 0.0);
    assert_eq!(iou(&VoxelGrid::new(8), &VoxelGrid::new(8)).unwrap(), 0.0);
    assert!(matches!(iou(&VoxelGrid::new(8), &VoxelGrid::new(4)), Err(Error::Domain(_))));
    assert_eq!(max_pairwise_iou(&[cube.clone(), cube.clone(), other]).unwrap(), 1.0);
}

fn random_grid(rng: &mut ChaCha8Rng, r: usize, density: f64) -> VoxelGrid {
    let mut g = VoxelGrid::new(r);
    for i in 0..r {
        for j in 0..r {
            for k in 0..r {
                if rng.random::<f64>() < density {
                    g.set(i, j, k);
                }
            }
        }
    }
    g
}

#[test]
fn iou_matches_brute_force_on_many_instances() {
    let mut r = ChaCha8Rng::seed_from_u64(4);
    for trial in 0..1000 {
        let res = r.random_range(1..=16);
        let n = r.random_range(1..5);
        let density = [0.0, 0.01, 0.2, 0.7][trial % 4];
        let parts: Vec<VoxelGrid> = (0..n).map(|_| random_grid(&mut r, res, density)).collect();
        let fast = pairwise_iou(&parts).unwrap();
        let slow = pairwise_iou_brute(&parts).unwrap();
        assert!((fast - slow).abs() <= 1e-12, "trial {trial}");
        assert_eq!(iou(&parts[0], &parts[n - 1]).unwrap(), iou_brute(&parts[0], &parts[n - 1]).unwrap());
    }
}

#[test]
fn point_voxelization() {
    let g = voxelize_points(&[[0.0, 0.0, 0.0], [-1.0, 0.99, 5.0]], 4, 0.0);
    assert_eq!(g.occupied().collect::<Vec<_>>(), vec![(2, 2, 2)]);
    // Radius reaches the eight cells around the origin.
    let g = voxelize_points(&[[0.0, 0.0, 0.0]], 4, 0.5);
    assert_eq!(g.count(), 8);
}

#[test]
fn assemble_examples() {
    let a = box_mesh([-0.5; 3], [0.0; 3]).unwrap();
    assert_eq!(assemble(std::slice::from_ref(&a)), a);
    let b = sphere_mesh([0.5; 3], 0.2, 4, 6).unwrap();
    let ab = assemble(&[a.clone(), b.clone()]);
    assert_eq!(ab.vertices().len(), a.vertices().len() + b.vertices().len());
    assert_eq!(ab.faces().len(), a.faces().len() + b.faces().len());
    assert!((ab.area() - a.area() - b.area()).abs() < 1e-12);
}

fn arb_points(max: usize) -> impl Strategy<Value = Vec<Point3>> {
    prop::collection::vec(prop::array::uniform3(-1.0f64..1.0), 1..max)
}

proptest! {
    #[test]
    fn metrics_are_symmetric(p in arb_points(40), q in arb_points(40), tau in 0.01f64..1.0) {
        prop_assert_eq!(chamfer(&p, &q).unwrap(), chamfer(&q, &p).unwrap());
        prop_assert_eq!(f_score(&p, &q, tau).unwrap(), f_score(&q, &p, tau).unwrap());
        let f = f_score(&p, &q, tau).unwrap();
        prop_assert!((0.0..=1.0).contains(&f));
        prop_assert!(chamfer(&p, &q).unwrap() >= 0.0);
    }

    #[test]
    fn fast_paths_equal_brute_force(p in arb_points(100), q in arb_points(100)) {
        prop_assert!((chamfer(&p, &q).unwrap() - chamfer_brute(&p, &q).unwrap()).abs() <= 1e-12);
        prop_assert!((f_score(&p, &q, 0.1).unwrap() - f_score_brute(&p, &q, 0.1).unwrap()).abs() <= 1e-12);
    }

    #[test]
    fn pairwise_iou_ignores_part_order(seed in 0u64..500, n in 2usize..6) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let parts: Vec<VoxelGrid> = (0..n).map(|_| random_grid(&mut r, 6, 0.3)).collect();
        let mut shuffled = parts.clone();
        shuffled.reverse();
        shuffled.swap(0, n / 2);
        let a = pairwise_iou(&parts).unwrap();
        let b = pairwise_iou(&shuffled).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn voxelization_ignores_face_order(seed in 0u64..200) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let c = [0; 3].map(|_| r.random_range(-0.3..0.3));
        let mesh = sphere_mesh(c, r.random_range(0.2..0.6), 6, 9).unwrap();
        let mut order: Vec<usize> = (0..mesh.faces().len()).collect();
        use rand::seq::SliceRandom;
        order.shuffle(&mut r);
        prop_assert_eq!(voxelize_solid(&mesh, 16), voxelize_solid(&mesh.with_face_order(&order), 16));
    }

    #[test]
    fn assembled_faces_stay_in_range(seed in 0u64..200, n in 1usize..5) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let parts: Vec<TriMesh> = (0..n)
            .map(|_| {
                let lo = [0; 3].map(|_| r.random_range(-1.0..0.0));
                let hi = lo.map(|v| v + r.random_range(0.1..1.0));
                box_mesh(lo, hi).unwrap()
            })
            .collect();
        let all = assemble(&parts);
        let nv = all.vertices().len() as u32;
        prop_assert!(all.faces().iter().all(|f| f.iter().all(|&i| i < nv)));
        prop_assert_eq!(all.faces().len(), 12 * n);
    }
}
