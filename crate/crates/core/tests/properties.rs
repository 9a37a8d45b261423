use bdgxrl::datasets::{BufferRecord, Normalizer, Provenance, ReplayBuffer, TransitionLayout};
use bdgxrl::tensornet::{Activation, Mlp, Tensor};
use bdgxrl::{stats, Rng};
use proptest::prelude::*;

fn vec_of(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-100.0f64..100.0, len)
}

proptest! {
    #[test]
    fn pack_then_unpack_is_identity(
        (sd, ad) in (1usize..6, 1usize..4),
        seed in any::<u64>(),
    ) {
        let layout = TransitionLayout::new(sd, ad);
        let mut rng = Rng::seed_from(seed);
        let mut draw = |n: usize| (0..n).map(|_| rng.normal()).collect::<Vec<f64>>();
        let (s, a, sn) = (draw(sd), draw(ad), draw(sd));
        let p = layout.pack(&s, &a, &sn).unwrap();
        prop_assert_eq!(p.as_slice().len(), 2 * sd + ad);
        prop_assert_eq!(p.unpack(), (s.clone(), a.clone(), sn.clone()));
        prop_assert_eq!(layout.offsets(), [0, sd, sd + ad]);
        prop_assert_eq!(p.state(), &s[..]);
        prop_assert_eq!(p.next_state(), &sn[..]);
    }

    #[test]
    fn normalized_data_is_standardized(rows in prop::collection::vec(vec_of(3), 2..200)) {
        let x = Tensor::from_rows(&rows).unwrap();
        let norm = Normalizer::fit(&[&x]).unwrap();
        let z = norm.normalize(&x).unwrap();
        for j in 0..3 {
            let col = stats::column(x.data(), 3, j);
            let zc = stats::column(z.data(), 3, j);
            prop_assert!(stats::mean(&zc).abs() < 1e-9);
            if stats::std(&col) > Normalizer::STD_FLOOR {
                prop_assert!((stats::std(&zc) - 1.0).abs() < 1e-6);
            }
        }
        let back = norm.denormalize(&z).unwrap();
        for (a, b) in back.data().iter().zip(x.data()) {
            prop_assert!((a - b).abs() <= 1e-9 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn ks_statistic_is_a_symmetric_distance(a in vec_of(20), b in vec_of(30)) {
        let d = stats::ks_statistic(&a, &b);
        prop_assert!((0.0..=1.0).contains(&d));
        prop_assert_eq!(d, stats::ks_statistic(&b, &a));
        prop_assert_eq!(stats::ks_statistic(&a, &a), 0.0);
    }
}

#[test]
fn constant_columns_hit_the_std_floor() {
    let x = Tensor::from_rows(&[[1.0, 2.0], [1.0, 3.0]]).unwrap();
    let norm = Normalizer::fit(&[&x]).unwrap();
    assert_eq!(norm.std()[0], Normalizer::STD_FLOOR);
    let z = norm.normalize(&x).unwrap();
    assert!(z.is_finite());
}

#[test]
fn polyak_target_is_the_geometric_average() {
    let tau = 0.1;
    let sizes = [2, 3, 1];
    let mut target = Mlp::new(&sizes, Activation::Relu, Activation::Identity, &mut Rng::seed_from(0)).unwrap();
    let start: Vec<Vec<f64>> = target.params().iter().map(|p| p.data().to_vec()).collect();
    let history: Vec<Mlp> = (1..=6)
        .map(|i| Mlp::new(&sizes, Activation::Relu, Activation::Identity, &mut Rng::seed_from(i)).unwrap())
        .collect();
    for online in &history {
        target.polyak_update(online, tau).unwrap();
    }
    let n = history.len() as i32;
    for (pi, param) in target.params().iter().enumerate() {
        for (vi, &got) in param.data().iter().enumerate() {
            let mut want = (1.0 - tau).powi(n) * start[pi][vi];
            for (i, online) in history.iter().enumerate() {
                want += tau * (1.0 - tau).powi(n - 1 - i as i32) * online.params()[pi].data()[vi];
            }
            assert!((got - want).abs() < 1e-12, "param {pi}[{vi}]: {got} vs {want}");
        }
    }
}

#[test]
fn buffer_ring_keeps_the_newest() {
    let layout = TransitionLayout::new(1, 1);
    let mut buf = ReplayBuffer::new(layout, 2).unwrap();
    for i in 0..3 {
        buf.push(BufferRecord {
            s: vec![i as f64],
            a: vec![0.0],
            r: i as f64,
            s_next: vec![0.0],
            done: false,
            reward_from: Provenance::Source,
            next_from: Provenance::Source,
        })
        .unwrap();
    }
    let mut kept: Vec<f64> = buf.records().map(|r| r.r).collect();
    kept.sort_by(f64::total_cmp);
    assert_eq!(kept, vec![1.0, 2.0]);
}
