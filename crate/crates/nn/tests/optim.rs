use maskguide_nn::{clip_grad_norm, Optimizer, OptimizerKind, ParamStore, Tensor};

fn store(values: &[f32]) -> ParamStore {
    let mut s = ParamStore::new();
    s.insert("w", Tensor::from_vec([1, values.len(), 1, 1], values.to_vec()).unwrap());
    s
}

fn grad(values: &[f32]) -> Vec<(String, Tensor)> {
    vec![("w".to_string(), Tensor::from_vec([1, values.len(), 1, 1], values.to_vec()).unwrap())]
}

const GRADS: [[f32; 3]; 4] = [[0.5, -1.0, 2.0], [0.1, -0.3, 0.0], [-2.0, 4.0, 1.0], [0.7, 0.7, -0.7]];

#[test]
fn momentum_matches_scalar_recurrence() {
    let (lr, mu) = (0.05f64, 0.9f64);
    let mut s = store(&[1.0, -1.0, 0.0]);
    let mut opt = Optimizer::new(OptimizerKind::Momentum { lr: lr as f32, momentum: mu as f32 });
    let mut p = [1.0f64, -1.0, 0.0];
    let mut v = [0.0f64; 3];
    for g in GRADS {
        opt.step(&mut s, &grad(&g)).unwrap();
        for i in 0..3 {
            v[i] = mu * v[i] + g[i] as f64;
            p[i] -= lr * v[i];
        }
        for i in 0..3 {
            assert!((s.get("w").unwrap().data()[i] as f64 - p[i]).abs() < 1e-5);
        }
    }
}

#[test]
fn adam_matches_scalar_recurrence() {
    let (lr, b1, b2, eps) = (0.01f64, 0.9f64, 0.999f64, 1e-8f64);
    let mut s = store(&[0.3, 0.0, -0.2]);
    let mut opt = Optimizer::new(OptimizerKind::Adam { lr: lr as f32, beta1: b1 as f32, beta2: b2 as f32, eps: eps as f32 });
    let mut p = [0.3f64, 0.0, -0.2];
    let (mut m, mut v) = ([0.0f64; 3], [0.0f64; 3]);
    for (k, g) in GRADS.iter().enumerate() {
        opt.step(&mut s, &grad(g)).unwrap();
        let t = (k + 1) as i32;
        for i in 0..3 {
            let gi = g[i] as f64;
            m[i] = b1 * m[i] + (1.0 - b1) * gi;
            v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
            p[i] -= lr * (m[i] / (1.0 - b1.powi(t))) / ((v[i] / (1.0 - b2.powi(t))).sqrt() + eps);
        }
        for i in 0..3 {
            assert!((s.get("w").unwrap().data()[i] as f64 - p[i]).abs() < 1e-5, "step {t} elem {i}");
        }
    }
    // First Adam step moves every nonzero-gradient coordinate by lr.
    let mut s = store(&[0.0, 0.0, 0.0]);
    let mut opt = Optimizer::new(OptimizerKind::Adam { lr: 0.01, beta1: 0.9, beta2: 0.999, eps: 1e-8 });
    opt.step(&mut s, &grad(&[3.0, -0.01, 0.0])).unwrap();
    let w = s.get("w").unwrap().data();
    assert!((w[0] + 0.01).abs() < 1e-6 && (w[1] - 0.01).abs() < 1e-5 && w[2] == 0.0);
}

#[test]
fn optimizer_rejects_unknown_or_misshapen_params() {
    let mut s = store(&[1.0, 2.0]);
    let mut opt = Optimizer::new(OptimizerKind::Momentum { lr: 0.1, momentum: 0.0 });
    assert!(opt.step(&mut s, &[("missing".to_string(), Tensor::zeros([1, 2, 1, 1]))]).is_err());
    assert!(opt.step(&mut s, &grad(&[1.0, 2.0, 3.0])).is_err());
}

#[test]
fn clipping_rescales_to_the_bound() {
    let mut g = vec![
        ("a".to_string(), Tensor::from_vec([1, 1, 1, 2], vec![3.0, 0.0]).unwrap()),
        ("b".to_string(), Tensor::from_vec([1, 1, 1, 1], vec![4.0]).unwrap()),
    ];
    assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
    assert!((g[0].1.data()[0] - 0.6).abs() < 1e-6 && (g[1].1.data()[0] - 0.8).abs() < 1e-6);
    assert!((clip_grad_norm(&mut g, 10.0) - 1.0).abs() < 1e-6);
    assert!((g[1].1.data()[0] - 0.8).abs() < 1e-6);
}
