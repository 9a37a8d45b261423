use bdgxrl::tensornet::{Activation, Mlp, Tensor};
use bdgxrl::Rng;

const H: f64 = 1e-5;

fn loss(net: &Mlp, x: &Tensor, c: &Tensor) -> f64 {
    let y = net.forward(x).unwrap();
    y.data().iter().zip(c.data()).map(|(a, b)| a * b).sum()
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-6)
}

/// Largest relative error between analytic and central-difference gradients
/// of `Σ c ⊙ net(x)` w.r.t. every parameter and every input.
fn max_rel_error(net: &mut Mlp, rows: usize, rng: &mut Rng) -> f64 {
    let din = net.input_dim();
    let dout = net.output_dim();
    let mut xd = vec![0.0; rows * din];
    rng.fill_normal(&mut xd);
    let x = Tensor::new(vec![rows, din], xd).unwrap();
    let mut cd = vec![0.0; rows * dout];
    rng.fill_normal(&mut cd);
    let c = Tensor::new(vec![rows, dout], cd).unwrap();

    let cache = net.forward_cached(&x).unwrap();
    let g = net.backward(&cache, &c).unwrap();
    let mut worst: f64 = 0.0;
    let n_params = net.params().len();
    for p in 0..n_params {
        for i in 0..net.params()[p].len() {
            let orig = net.params()[p].data()[i];
            net.params_mut()[p].data_mut()[i] = orig + H;
            let up = loss(net, &x, &c);
            net.params_mut()[p].data_mut()[i] = orig - H;
            let down = loss(net, &x, &c);
            net.params_mut()[p].data_mut()[i] = orig;
            worst = worst.max(rel(g.params[p].data()[i], (up - down) / (2.0 * H)));
        }
    }
    for i in 0..x.len() {
        let mut xp = x.clone();
        xp.data_mut()[i] += H;
        let mut xm = x.clone();
        xm.data_mut()[i] -= H;
        let fd = (loss(net, &xp, &c) - loss(net, &xm, &c)) / (2.0 * H);
        worst = worst.max(rel(g.input.data()[i], fd));
    }
    worst
}

fn check(sizes: &[usize], act: Activation, seeds: u64) {
    for seed in 0..seeds {
        let mut rng = Rng::seed_from(1000 + seed);
        let mut net = Mlp::new(sizes, act, Activation::Identity, &mut rng).unwrap();
        let err = max_rel_error(&mut net, 5, &mut rng);
        assert!(err < 1e-4, "sizes {sizes:?} {act:?} seed {seed}: rel error {err:e}");
    }
}

#[test]
fn drift_net_gradients() {
    check(&[11, 32, 32, 10], Activation::Tanh, 10);
    check(&[2, 16, 16, 1], Activation::Tanh, 10);
}

#[test]
fn reward_net_gradients() {
    check(&[8, 32, 32, 1], Activation::Relu, 10);
}

#[test]
fn policy_net_gradients() {
    check(&[4, 32, 32, 4], Activation::Relu, 10);
}

#[test]
fn critic_net_gradients() {
    check(&[6, 32, 32, 1], Activation::Relu, 10);
}

#[test]
fn backward_is_linear_in_upstream() {
    let mut rng = Rng::seed_from(3);
    let net = Mlp::new(&[3, 8, 2], Activation::Tanh, Activation::Identity, &mut rng).unwrap();
    let x = Tensor::from_rows(&[[0.1, 0.2, -0.3], [1.0, -1.0, 0.5]]).unwrap();
    let cache = net.forward_cached(&x).unwrap();
    let u = Tensor::from_rows(&[[1.0, -2.0], [0.5, 0.25]]).unwrap();
    let v = Tensor::from_rows(&[[-0.3, 0.7], [2.0, 1.0]]).unwrap();
    let mut uv = u.clone();
    uv.add_assign(&v).unwrap();
    let gu = net.backward(&cache, &u).unwrap();
    let gv = net.backward(&cache, &v).unwrap();
    let guv = net.backward(&cache, &uv).unwrap();
    for p in 0..guv.params.len() {
        for i in 0..guv.params[p].len() {
            let sum = gu.params[p].data()[i] + gv.params[p].data()[i];
            assert!((guv.params[p].data()[i] - sum).abs() < 1e-12);
        }
    }
}
