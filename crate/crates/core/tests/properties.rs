use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use patchmatch::association::{associate, combine, extract_point_map, FeatureField};
use patchmatch::criteria::{cycle_loss, geodesic_loss, matching_loss, self_reconstruction_loss};
use patchmatch::deformation::{
    blend_weights, decode_rotation, deform, encode_rotation, global_motion, rigidity_energy,
    DeformationLayout, DeformationParams,
};
use patchmatch::geodesic::{center_matrix, single_source, Normalization};
use patchmatch::hierarchy::build_hierarchy;
use patchmatch::kernels::points_to_rows;
use patchmatch::mesh::{load_mesh, save_mesh, triangle_area};
use patchmatch::scalar::{det3, mat_vec3, norm3, sub3, Mat3, Vec3};
use patchmatch::synthetic;
use patchmatch::Mesh;

fn config() -> ProptestConfig {
    ProptestConfig {
        cases: 24,
        ..ProptestConfig::default()
    }
}

fn random_rotation(rng: &mut ChaCha8Rng) -> Mat3<f64> {
    let r6: [f64; 6] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
    decode_rotation(&r6).unwrap()
}

fn transpose(m: &Mat3<f64>) -> Mat3<f64> {
    std::array::from_fn(|i| std::array::from_fn(|j| m[j][i]))
}

fn matmul(a: &Mat3<f64>, b: &Mat3<f64>) -> Mat3<f64> {
    std::array::from_fn(|i| std::array::from_fn(|j| (0..3).map(|k| a[i][k] * b[k][j]).sum()))
}

fn rigid(m: &Mesh, r: &Mat3<f64>, t: Vec3<f64>, s: f64) -> Mesh {
    m.map_vertices(|p| {
        let q = mat_vec3(r, p);
        [s * q[0] + t[0], s * q[1] + t[1], s * q[2] + t[2]]
    })
    .unwrap()
}

fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(config())]

    #[test]
    fn save_then_load_preserves_meshes(seed in 0u64..1000, ext in prop::sample::select(vec!["obj", "off", "ply"])) {
        let m: Mesh = synthetic::random_mesh(120, seed);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join(format!("m.{ext}"));
        save_mesh(&m, &p).unwrap();
        let back: Mesh = load_mesh(&p).unwrap();
        prop_assert_eq!(back.faces(), m.faces());
        prop_assert_eq!(back.vertices(), m.vertices());
    }

    #[test]
    fn area_is_the_sum_of_triangles_and_rigid_invariant(seed in 0u64..1000) {
        let m: Mesh = synthetic::random_mesh(150, seed);
        let sum: f64 = m.faces().iter().map(|f| triangle_area(m.vertex(f[0]), m.vertex(f[1]), m.vertex(f[2]))).sum();
        prop_assert!((m.surface_area() - sum).abs() <= 1e-12 * sum);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let moved = rigid(&m, &random_rotation(&mut rng), [1.0, -2.0, 0.5], 1.0);
        prop_assert!((moved.surface_area() - m.surface_area()).abs() < 1e-9);
    }

    #[test]
    fn mean_edge_length_counts_each_edge_once(seed in 0u64..1000) {
        let m: Mesh = synthetic::random_mesh(150, seed);
        let lengths: Vec<f64> = m.edges().iter().map(|&[a, b]| norm3(sub3(m.vertex(a), m.vertex(b)))).collect();
        let mean = lengths.iter().sum::<f64>() / lengths.len() as f64;
        prop_assert!((m.mean_edge_length() - mean).abs() <= 1e-12 * mean);
        let half_edges: usize = (0..m.num_vertices()).map(|v| m.neighbors(v).len()).sum();
        prop_assert_eq!(half_edges, 2 * m.edges().len());
    }

    #[test]
    fn dijkstra_is_relaxed_on_every_edge(seed in 0u64..1000, source in 0usize..1000) {
        let m: Mesh = synthetic::random_mesh(200, seed);
        let d = single_source(&m, source % m.num_vertices()).unwrap().dist;
        for v in 0..m.num_vertices() {
            for &(w, len) in m.neighbors(v) {
                prop_assert!(d[w] <= d[v] + len);
            }
        }
    }

    #[test]
    fn center_matrix_is_symmetric_and_scale_free(seed in 0u64..1000) {
        let m: Mesh = synthetic::random_mesh(150, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let centers: Vec<usize> = (0..8).map(|_| rng.gen_range(0..m.num_vertices())).collect();
        let d = center_matrix(&m, &centers, Normalization::SqrtArea).unwrap().values;
        prop_assert_eq!(&d, &d.t().to_owned());
        prop_assert!(d.diag().iter().all(|&x| x == 0.0));
        let moved = rigid(&m, &random_rotation(&mut rng), [3.0, 1.0, -1.0], 2.5);
        let d2 = center_matrix(&moved, &centers, Normalization::SqrtArea).unwrap().values;
        prop_assert!(max_abs_diff(&d, &d2) < 1e-9);
    }

    #[test]
    fn hierarchy_partitions_and_is_voronoi_optimal(seed in 0u64..1000, a in 6usize..30, b in 1usize..6) {
        let m: Mesh = synthetic::random_mesh(200, seed);
        prop_assume!(m.num_vertices() >= a);
        let h = build_hierarchy(&m, &[a, b], seed).unwrap();
        let again = build_hierarchy(&m, &[a, b], seed).unwrap();
        prop_assert_eq!(h.samples(), again.samples());
        for level in h.levels() {
            let total: usize = level.members.iter().map(Vec::len).sum();
            prop_assert_eq!(total, m.num_vertices());
            prop_assert!(level.members.iter().all(|p| !p.is_empty()));
            let maps: Vec<Vec<f64>> = level.centers.iter().map(|&c| single_source(&m, c).unwrap().dist).collect();
            for v in 0..m.num_vertices() {
                let own = maps[level.assignment[v]][v];
                prop_assert!(maps.iter().all(|d| own <= d[v]));
            }
        }
    }

    #[test]
    fn repool_keeps_constants(seed in 0u64..1000, value in -5.0f64..5.0) {
        let m: Mesh = synthetic::random_mesh(150, seed);
        prop_assume!(m.num_vertices() >= 12);
        let h = build_hierarchy(&m, &[12, 3], seed).unwrap();
        for from in 0..3 {
            for to in 0..3 {
                let c = Array2::from_elem((h.level(from).len(), 2), value);
                let out = h.repool(from, to, c.view()).unwrap();
                prop_assert!(out.iter().all(|&x| x == value));
            }
        }
    }

    #[test]
    fn associations_are_stochastic_and_swap_consistent(seed in 0u64..1000, tau in 1e-3f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (na, nb, d) = (rng.gen_range(1..30), rng.gen_range(1..30), rng.gen_range(1..10));
        let a = Array2::from_shape_fn((na, d), |_| rng.gen_range(-1.0..1.0));
        let b = Array2::from_shape_fn((nb, d), |_| rng.gen_range(-1.0..1.0));
        let (ab, ba) = associate(a.view(), b.view(), tau).unwrap();
        for pi in [&ab, &ba] {
            prop_assert!(pi.rows().into_iter().all(|r| (r.sum() - 1.0).abs() < 1e-9));
        }
        let (ba2, ab2) = associate(b.view(), a.view(), tau).unwrap();
        prop_assert!(max_abs_diff(&ab, &ab2) < 1e-12);
        prop_assert!(max_abs_diff(&ba, &ba2) < 1e-12);
        let scaled = Array2::from_shape_fn((na, d), |(i, j)| a[[i, j]] * (1.0 + i as f64 * 3.0));
        let (ab3, _) = associate(scaled.view(), b.view(), tau).unwrap();
        prop_assert!(max_abs_diff(&ab, &ab3) < 1e-9);
        prop_assert_eq!(extract_point_map(ab.view()), extract_point_map(ab3.view()));
    }

    #[test]
    fn top_level_combination_is_the_raw_field(seed in 0u64..1000, smoothing in 0usize..3) {
        let m: Mesh = synthetic::random_mesh(150, seed);
        prop_assume!(m.num_vertices() >= 10);
        let h = build_hierarchy(&m, &[10, 4], seed).unwrap();
        let f = FeatureField::<f64>::random(&h, &[3, 4, 5], seed).unwrap();
        let c = combine(&h, &f, smoothing).unwrap();
        prop_assert_eq!(&c[2], &f.levels[2]);
        prop_assert_eq!(c[0].ncols(), 12);
    }

    #[test]
    fn decoded_rotations_are_proper(r6 in prop::array::uniform6(-10.0f64..10.0)) {
        let r = match decode_rotation(&r6) {
            Ok(r) => r,
            Err(_) => return Ok(()),
        };
        let rtr = matmul(&transpose(&r), &r);
        for (i, row) in rtr.iter().enumerate() {
            for (j, &x) in row.iter().enumerate() {
                let want = if i == j { 1.0 } else { 0.0 };
                prop_assert!((x - want).abs() < 1e-9);
            }
        }
        prop_assert!((det3(&r) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn deformation_is_equivariant_under_rigid_motion(seed in 0u64..1000) {
        // Jittered so that no Voronoi or support boundary sits on a tie.
        let m: Mesh = synthetic::perturbed_grid(8, 8, 0.3, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (q, s) = (random_rotation(&mut rng), [0.3, -1.0, 2.0]);
        let moved = rigid(&m, &q, s, 1.0);
        let h = build_hierarchy(&m, &[12], 2).unwrap();
        let h2 = build_hierarchy(&moved, &[12], 2).unwrap();
        prop_assume!(h.level(1).centers == h2.level(1).centers);
        prop_assume!(h.level(1).assignment == h2.level(1).assignment);
        let w = blend_weights(&m, &h, 1, 1.0).unwrap();
        let w2 = blend_weights(&moved, &h2, 1, 1.0).unwrap();
        let (l1, l2) = (DeformationLayout::new(&m, &h, &w), DeformationLayout::new(&moved, &h2, &w2));
        let n = h.level(1).len();
        let mut p = DeformationParams::identity(&h.level(1).center_positions);
        let mut p2 = DeformationParams::identity(&h2.level(1).center_positions);
        for i in 0..n {
            let r = random_rotation(&mut rng);
            let u: Vec3<f64> = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
            let conj = matmul(&matmul(&q, &r), &transpose(&q));
            let qu = mat_vec3(&q, u);
            for k in 0..6 {
                p.rot6[[i, k]] = encode_rotation(&r)[k];
                p2.rot6[[i, k]] = encode_rotation(&conj)[k];
            }
            for k in 0..3 {
                p.translation[[i, k]] = u[k];
                p2.translation[[i, k]] = qu[k] + s[k];
            }
        }
        let (out, _) = deform(&l1, &p).unwrap();
        let (out2, _) = deform(&l2, &p2).unwrap();
        for (a, b) in out.iter().zip(&out2) {
            let qa = mat_vec3(&q, *a);
            for k in 0..3 {
                prop_assert!((qa[k] + s[k] - b[k]).abs() < 1e-9);
            }
        }
        let e = rigidity_energy(&l1, &p).unwrap();
        prop_assert!(e >= 0.0);
        prop_assert!((e - rigidity_energy(&l2, &p2).unwrap()).abs() <= 1e-9 * e.max(1.0));
        let shared = global_motion(&h.level(1).center_positions, &q, s);
        prop_assert!(rigidity_energy(&l1, &shared).unwrap() < 1e-18);
    }

    #[test]
    fn criteria_vanish_on_identity_self_pairs(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(2..20);
        let pts: Vec<Vec3<f64>> = (0..n).map(|_| std::array::from_fn(|_| rng.gen_range(-1.0..1.0))).collect();
        let c = points_to_rows(&pts);
        let id = Array2::<f64>::eye(n);
        let d = Array2::from_shape_fn((n, n), |(i, j)| norm3(sub3(pts[i], pts[j])));
        prop_assert_eq!(geodesic_loss(id.view(), id.view(), d.view(), d.view()).unwrap(), 0.0);
        prop_assert_eq!(cycle_loss(id.view(), id.view(), c.view(), c.view()).unwrap(), 0.0);
        prop_assert_eq!(self_reconstruction_loss(id.view(), c.view(), id.view(), c.view()).unwrap(), 0.0);
        prop_assert_eq!(matching_loss(c.view(), id.view(), c.view(), c.view(), id.view(), c.view()).unwrap(), 0.0);

        // Any stochastic matrices give nonnegative losses.
        let soft = |r: usize, k: usize, rng: &mut ChaCha8Rng| {
            let mut m = Array2::from_shape_fn((r, k), |_| rng.gen_range(0.0..1.0));
            for mut row in m.rows_mut() {
                let s = row.sum();
                row.mapv_inplace(|x| x / s);
            }
            m
        };
        let (pxy, pyx) = (soft(n, n, &mut rng), soft(n, n, &mut rng));
        prop_assert!(geodesic_loss(pxy.view(), pyx.view(), d.view(), d.view()).unwrap() >= 0.0);
        prop_assert!(cycle_loss(pxy.view(), pyx.view(), c.view(), c.view()).unwrap() >= 0.0);
        prop_assert!(self_reconstruction_loss(pxy.view(), c.view(), pyx.view(), c.view()).unwrap() >= 0.0);
        prop_assert!(matching_loss(c.view(), pxy.view(), c.view(), c.view(), pyx.view(), c.view()).unwrap() >= 0.0);
    }

    #[test]
    fn geodesic_loss_ignores_patch_order(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (nx, ny) = (rng.gen_range(2..12), rng.gen_range(2..12));
        let sym = |n: usize, rng: &mut ChaCha8Rng| {
            let mut m = Array2::from_shape_fn((n, n), |_| rng.gen_range(0.0..2.0));
            m = &m + &m.t();
            m.diag_mut().fill(0.0);
            m
        };
        let (dx, dy) = (sym(nx, &mut rng), sym(ny, &mut rng));
        let pxy = Array2::from_shape_fn((nx, ny), |_| rng.gen_range(0.0..1.0));
        let pyx = Array2::from_shape_fn((ny, nx), |_| rng.gen_range(0.0..1.0));
        let mut perm: Vec<usize> = (0..nx).collect();
        for i in (1..nx).rev() {
            perm.swap(i, rng.gen_range(0..=i));
        }
        let pxy2 = Array2::from_shape_fn((nx, ny), |(i, j)| pxy[[perm[i], j]]);
        let pyx2 = Array2::from_shape_fn((ny, nx), |(i, j)| pyx[[i, perm[j]]]);
        let dx2 = Array2::from_shape_fn((nx, nx), |(i, j)| dx[[perm[i], perm[j]]]);
        let a: f64 = geodesic_loss(pxy.view(), pyx.view(), dx.view(), dy.view()).unwrap();
        let b = geodesic_loss(pxy2.view(), pyx2.view(), dx2.view(), dy.view()).unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * a.max(1.0));
    }
}
