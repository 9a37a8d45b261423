use bdgxrl::bridge::{
    bridge_interpolate, em_integrate, em_path, imf_fit, Bridge, BridgeConfig, Direction, DriftModel,
};
use bdgxrl::datasets::{Dataset, Transition, TransitionLayout};
use bdgxrl::tensornet::Tensor;
use bdgxrl::{stats, Rng};

fn gaussian(n: usize, mean: f64, std: f64, seed: u64) -> Tensor {
    let mut rng = Rng::seed_from(seed);
    let data = (0..n).map(|_| mean + std * rng.normal()).collect();
    Tensor::new(vec![n, 1], data).unwrap()
}

fn column_var(x: &Tensor, j: usize) -> f64 {
    stats::std(&stats::column(x.data(), x.cols(), j)).powi(2)
}

#[test]
fn interpolant_variance_at_midpoint() {
    let mut rng = Rng::seed_from(17);
    let (p0, p1) = ([0.0, -1.0], [1.0, 2.0]);
    let n = 100_000;
    let mut cols = [Vec::with_capacity(n), Vec::with_capacity(n)];
    for _ in 0..n {
        let p = bridge_interpolate(&p0, &p1, 0.5, 1.0, &mut rng).unwrap();
        cols[0].push(p[0]);
        cols[1].push(p[1]);
    }
    for (j, c) in cols.iter().enumerate() {
        let var = stats::std(c).powi(2);
        assert!((var - 0.25).abs() < 0.02 * 0.25, "dim {j}: var {var}");
        let mean = stats::mean(c);
        assert!((mean - 0.5 * (p0[j] + p1[j])).abs() < 0.01, "dim {j}: mean {mean}");
    }
}

#[test]
fn zero_drift_terminal_variance_is_sigma_squared() {
    let cfg = BridgeConfig {
        sigma0: 1.0,
        steps: 100,
        hidden: vec![4],
        ..BridgeConfig::default()
    };
    let model = DriftModel::zeros(Direction::Forward, 2, &cfg).unwrap();
    let start = Tensor::filled(&[100_000, 2], 0.3);
    let end = em_integrate(&start, &model, &cfg, None, &mut Rng::seed_from(4)).unwrap();
    for j in 0..2 {
        let var = column_var(&end, j);
        assert!((var - 1.0).abs() < 0.03, "dim {j}: var {var}");
    }
}

#[test]
fn point_masses_are_transported_into_the_noise_band() {
    let cfg = BridgeConfig {
        hidden: vec![64, 64],
        n_outer: 3,
        inner_steps: 3000,
        cache_size: 1024,
        diagnostic_samples: 256,
        ..BridgeConfig::default()
    };
    let (x0, x1) = ([-1.0, 0.5], [1.0, -0.5]);
    let source = Tensor::from_rows(&vec![x0; 512]).unwrap();
    let target = Tensor::from_rows(&vec![x1; 512]).unwrap();
    let mut rng = Rng::seed_from(8);
    let (imf, _) = imf_fit(&source, &target, &cfg, &mut rng).unwrap();
    let out = em_integrate(&source, &imf.forward, &cfg, None, &mut rng).unwrap();
    let band = 3.0 * cfg.sigma0 / (cfg.steps as f64).sqrt();
    let dists: Vec<f64> = (0..out.rows()).map(|r| stats::euclidean(out.row(r), &x1)).collect();
    let inside = dists.iter().filter(|&&d| d <= band).count() as f64 / dists.len() as f64;
    assert!(inside >= 0.95, "fraction inside band {inside}, mean distance {}", stats::mean(&dists));
    let back = em_integrate(&target, &imf.backward, &cfg, None, &mut rng).unwrap();
    let inside = (0..back.rows()).filter(|&r| stats::euclidean(back.row(r), &x0) <= band).count();
    assert!(inside as f64 >= 0.95 * back.rows() as f64, "backward inside {inside}");
}

#[test]
fn forward_and_backward_midpoint_marginals_agree() {
    let cfg = BridgeConfig {
        hidden: vec![64, 64],
        n_outer: 4,
        inner_steps: 600,
        cache_size: 2048,
        diagnostic_samples: 512,
        ..BridgeConfig::default()
    };
    let source = gaussian(4000, -1.0, 0.05, 1);
    let target = gaussian(4000, 1.0, 0.05, 2);
    let mut rng = Rng::seed_from(3);
    let (imf, _) = imf_fit(&source, &target, &cfg, &mut rng).unwrap();
    let half = cfg.steps / 2;
    let fwd = em_path(&source, &imf.forward, &cfg, half, &mut rng).unwrap();
    let bwd = em_path(&target, &imf.backward, &cfg, half, &mut rng).unwrap();
    let fm = stats::mean(fwd[1].data());
    let bm = stats::mean(bwd[1].data());
    assert!((fm - bm).abs() < 0.1, "forward midpoint mean {fm}, backward {bm}");
}

fn linear_dataset(n: usize, shift: f64, seed: u64) -> Dataset {
    let mut rng = Rng::seed_from(seed);
    let mut ds = Dataset::new(TransitionLayout::new(2, 1), false);
    for _ in 0..n {
        let s = vec![rng.normal(), rng.normal()];
        let a = vec![rng.uniform(-1.0, 1.0)];
        let sn = vec![s[0] + 0.1 * a[0] + shift, s[1]];
        ds.push(Transition {
            s,
            a,
            s_next: sn,
            r: None,
            done: false,
        })
        .unwrap();
    }
    ds
}

#[test]
fn translation_is_deterministic_anchored_and_thread_independent() {
    let cfg = BridgeConfig {
        hidden: vec![32, 32],
        n_outer: 1,
        inner_steps: 100,
        cache_size: 512,
        diagnostic_samples: 128,
        ..BridgeConfig::default()
    };
    let s = linear_dataset(600, 0.0, 1);
    let t = linear_dataset(600, 0.5, 2);
    let (bridge, _) = Bridge::fit(&s, &t, &cfg, &mut Rng::seed_from(6)).unwrap();
    let packed = s.packed_matrix();
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| bridge.translate_packed(&packed, Direction::Forward, &mut Rng::seed_from(11)).unwrap())
    };
    let one = run(1);
    assert_eq!(one, run(4));
    assert_eq!(one, run(1));
    for r in 0..packed.rows() {
        assert_eq!(&one.row(r)[..3], &packed.row(r)[..3]);
    }
    let single = bridge
        .translate_s_to_t(&s.get(0).s, &s.get(0).a, &s.get(0).s_next, &mut Rng::seed_from(2))
        .unwrap();
    let again = bridge
        .translate_s_to_t(&s.get(0).s, &s.get(0).a, &s.get(0).s_next, &mut Rng::seed_from(2))
        .unwrap();
    assert_eq!(single.len(), 2);
    assert_eq!(single, again);
}

#[test]
fn mismatched_dims_are_rejected() {
    let cfg = BridgeConfig {
        hidden: vec![8],
        n_outer: 1,
        inner_steps: 5,
        cache_size: 64,
        diagnostic_samples: 16,
        ..BridgeConfig::default()
    };
    let s = linear_dataset(100, 0.0, 1);
    let (bridge, _) = Bridge::fit(&s, &s, &cfg, &mut Rng::seed_from(1)).unwrap();
    let wrong = Tensor::zeros(&[3, 4]);
    assert!(bridge.translate_packed(&wrong, Direction::Forward, &mut Rng::seed_from(1)).is_err());
    assert!(bridge.translate_s_to_t(&[0.0], &[0.0], &[0.0, 0.0], &mut Rng::seed_from(1)).is_err());
}
