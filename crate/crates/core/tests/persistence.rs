use bdgxrl::agent::{AgentConfig, GaussianPolicy, Sac};
use bdgxrl::bridge::{Bridge, BridgeConfig, Direction};
use bdgxrl::datasets::{Dataset, Transition, TransitionLayout};
use bdgxrl::reward::{train_reward, RewardConfig};
use bdgxrl::tensornet::Tensor;
use bdgxrl::Rng;

/// Largest output deviation relative to the largest output magnitude.
fn rel_err(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    let scale = a.data().iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    a.data().iter().zip(b.data()).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale
}

fn inputs(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = Rng::seed_from(seed);
    let mut data = vec![0.0; rows * cols];
    rng.fill_normal(&mut data);
    Tensor::new(vec![rows, cols], data).unwrap()
}

fn toy_dataset(n: usize, rewards: bool, shift: f64, seed: u64) -> Dataset {
    let mut rng = Rng::seed_from(seed);
    let mut ds = Dataset::new(TransitionLayout::new(2, 1), rewards);
    for _ in 0..n {
        let s = vec![rng.normal(), rng.normal()];
        let a = vec![rng.uniform(-1.0, 1.0)];
        let sn = vec![s[0] + 0.1 * a[0] + shift, s[1] - 0.05 * s[0]];
        let r = -(sn[0] * sn[0] + sn[1] * sn[1]).sqrt();
        ds.push(Transition {
            s,
            a,
            s_next: sn,
            r: rewards.then_some(r),
            done: false,
        })
        .unwrap();
    }
    ds
}

#[test]
fn policy_checkpoint_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    for seed in 0..5 {
        let p = GaussianPolicy::new(4, 2, &[256, 256], &mut Rng::seed_from(seed)).unwrap();
        let path = tmp.path().join("p.bdgx");
        p.save(&path).unwrap();
        let q = GaussianPolicy::load(&path).unwrap();
        let x = inputs(512, 4, seed + 100);
        let err = rel_err(&p.net.forward(&x).unwrap(), &q.net.forward(&x).unwrap());
        assert!(err < 1e-6, "{err}");
    }
}

#[test]
fn sac_checkpoint_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let sac = Sac::new(4, 2, AgentConfig::default(), &mut Rng::seed_from(3)).unwrap();
    let path = tmp.path().join("sac.bdgx");
    sac.save(&path).unwrap();
    let back = Sac::load(&path).unwrap();
    let x = inputs(512, 6, 9);
    for (a, b) in [(&sac.q1, &back.q1), (&sac.q2, &back.q2), (&sac.q1_target, &back.q1_target), (&sac.q2_target, &back.q2_target)] {
        let err = rel_err(&a.forward(&x).unwrap(), &b.forward(&x).unwrap());
        assert!(err < 1e-6, "{err}");
    }
    assert_eq!(back.temperature(), sac.temperature());
    assert_eq!(back.config, sac.config);
}

#[test]
fn bridge_checkpoint_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = BridgeConfig {
        hidden: vec![64, 64],
        n_outer: 1,
        inner_steps: 50,
        cache_size: 256,
        diagnostic_samples: 64,
        ..BridgeConfig::default()
    };
    let s = toy_dataset(300, true, 0.0, 1);
    let t = toy_dataset(300, false, 0.3, 2);
    let (bridge, _) = Bridge::fit(&s, &t, &cfg, &mut Rng::seed_from(5)).unwrap();
    let path = tmp.path().join("b.bdgx");
    bridge.save(&path).unwrap();
    let back = Bridge::load(&path).unwrap();
    assert_eq!(back.layout, bridge.layout);
    assert_eq!(back.normalizer, bridge.normalizer);
    assert_eq!(back.config(), bridge.config());
    let x = bridge.imf.forward.input(&vec![0.5; 256], &inputs(256, 5, 7)).unwrap();
    for (a, b) in [(&bridge.imf.forward.net, &back.imf.forward.net), (&bridge.imf.backward.net, &back.imf.backward.net)] {
        let err = rel_err(&a.forward(&x).unwrap(), &b.forward(&x).unwrap());
        assert!(err < 1e-6, "{err}");
    }
    let packed = s.packed_matrix();
    let y1 = bridge.translate_packed(&packed, Direction::Forward, &mut Rng::seed_from(1)).unwrap();
    let y2 = back.translate_packed(&packed, Direction::Forward, &mut Rng::seed_from(1)).unwrap();
    let err = rel_err(&y1, &y2);
    assert!(err < 1e-6, "{err}");
}

#[test]
fn reward_checkpoint_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = RewardConfig {
        steps: 200,
        ..RewardConfig::default()
    };
    let ds = toy_dataset(500, true, 0.0, 4);
    let (model, _) = train_reward(&ds, &cfg, &mut Rng::seed_from(2)).unwrap();
    let path = tmp.path().join("r.bdgx");
    model.save(&path).unwrap();
    let back = bdgxrl::reward::RewardModel::load(&path).unwrap();
    let a = Tensor::new(vec![500, 1], model.predict_batch(&ds.states(), &ds.next_states()).unwrap()).unwrap();
    let b = Tensor::new(vec![500, 1], back.predict_batch(&ds.states(), &ds.next_states()).unwrap()).unwrap();
    let err = rel_err(&a, &b);
    assert!(err < 1e-6, "{err}");
}
