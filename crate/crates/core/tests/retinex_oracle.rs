use ipcd_core::baselines::{build_retinex_system, retinex_points, RetinexConfig};
use ipcd_core::scene::{build_scene, sample_triplet, sun_preset, SceneSpec, TimeOfDay};
use ipcd_core::{PointCloud, Vec3};
use nalgebra::{DMatrix, DVector};

fn scene_cloud(n: usize, seed: u64) -> PointCloud {
    let scene = build_scene(&SceneSpec { seed, ..SceneSpec::default() }).unwrap();
    sample_triplet(&scene, &sun_preset(TimeOfDay::Noon).unwrap(), n, seed).unwrap().cloud
}

/// Minimizes the edge residuals with every component mean pinned to the
/// anchor, via a dense Cholesky factorization of `L + Σ 1_c 1_cᵀ`.
fn dense_oracle(cloud: &PointCloud, cfg: &RetinexConfig) -> Vec<f64> {
    let sys = build_retinex_system(cloud, cfg).unwrap();
    let n = sys.n;
    let mut m = DMatrix::<f64>::zeros(n, n);
    let mut b = DVector::<f64>::zeros(n);
    for e in &sys.edges {
        m[(e.i, e.i)] += 1.0;
        m[(e.j, e.j)] += 1.0;
        m[(e.i, e.j)] -= 1.0;
        m[(e.j, e.i)] -= 1.0;
        b[e.i] += e.target;
        b[e.j] -= e.target;
    }
    let (label, count) = sys.components();
    for c in 0..count {
        let members: Vec<usize> = (0..n).filter(|&i| label[i] == c).collect();
        for &i in &members {
            for &j in &members {
                m[(i, j)] += 1.0;
            }
            b[i] += sys.anchor * members.len() as f64;
        }
    }
    let s = m.cholesky().expect("pinned Laplacian is positive definite").solve(&b);
    s.iter().copied().collect()
}

#[test]
fn sparse_solve_matches_dense_least_squares() {
    let cfg = RetinexConfig::default();
    for (n, seed) in [(600, 3), (2000, 11)] {
        let cloud = scene_cloud(n, seed);
        let sys = build_retinex_system(&cloud, &cfg).unwrap();
        let (sparse, report) = sys.solve(&cfg).unwrap();
        assert!(report.relative_residual <= 1e-6);
        let dense = dense_oracle(&cloud, &cfg);
        let diff: f64 = sparse.iter().zip(&dense).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let norm: f64 = dense.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(diff / norm < 1e-6, "n={n}: relative difference {:.3e}", diff / norm);
        assert!((sys.objective(&sparse) - sys.objective(&dense)).abs() <= 1e-8 * (1.0 + sys.objective(&dense)));
    }
}

#[test]
fn luminance_step_is_absorbed_into_shade() {
    let base = [0.8, 0.6, 0.4];
    let mut positions = Vec::new();
    let mut colors = Vec::new();
    for i in 0..40 {
        for j in 0..40 {
            let x = i as f64 * 0.05;
            positions.push(Vec3::new(x, j as f64 * 0.05, 0.0));
            let k = if x < 1.0 { 0.9 } else { 0.35 };
            colors.push([base[0] * k, base[1] * k, base[2] * k]);
        }
    }
    let cloud = PointCloud::new(positions, colors).unwrap();
    let (pred, report) = retinex_points(&cloud, &RetinexConfig::default()).unwrap();
    assert_eq!(report.albedo_edges, 0);
    let n = pred.albedo.len() as f64;
    for ch in 0..3 {
        let mean = pred.albedo.iter().map(|a| a[ch]).sum::<f64>() / n;
        let var = pred.albedo.iter().map(|a| (a[ch] - mean) * (a[ch] - mean)).sum::<f64>() / n;
        assert!(var < 1e-5, "channel {ch}: albedo variance {var:.3e}");
    }
    let bright = pred.shade[0][0];
    let dark = pred.shade[pred.shade.len() - 1][0];
    assert!((dark / bright - 0.35 / 0.9).abs() < 1e-6);
}
