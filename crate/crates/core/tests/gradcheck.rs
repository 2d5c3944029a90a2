mod common;

use common::gradcheck::{cases, max_rel_error};
use tablediff::numerics::{Rng, Tape, Tensor};

#[test]
fn every_primitive_matches_finite_differences() {
    let mut rng = Rng::new(11);
    for c in cases() {
        for _ in 0..5 {
            let err = max_rel_error(&c, &mut rng).unwrap();
            assert!(err < 1e-4, "{}: relative error {err:e}", c.name);
        }
    }
}

#[test]
fn mean_of_matmul_grad_matches_finite_differences() {
    let mut rng = Rng::new(3);
    let w = rng.normal_tensor::<f64>([3, 4]);
    let x = rng.normal_tensor::<f64>([4, 2]);
    let loss = |w: &Tensor<f64>| {
        let tape = Tape::<f64>::new();
        let wv = tape.param(w.clone());
        let xv = tape.constant(x.clone());
        let l = wv.matmul(xv).unwrap().mean().unwrap();
        (l.value().item(), tape.backward(l).unwrap().get(wv))
    };
    let (_, g) = loss(&w);
    for i in 0..w.numel() {
        let (mut p, mut m) = (w.clone(), w.clone());
        p.data_mut()[i] += 1e-5;
        m.data_mut()[i] -= 1e-5;
        let fd = (loss(&p).0 - loss(&m).0) / 2e-5;
        let rel = (g.data()[i] - fd).abs() / fd.abs().max(1e-12);
        assert!(rel < 1e-6, "element {i}: {rel:e}");
    }
}

#[test]
fn three_primitive_chain_matches_hand_jacobian() {
    // y = sum(tanh(2·x)) ⇒ dy/dx = 2·(1 − tanh²(2x))
    let x = Tensor::<f64>::new([3], vec![-0.7, 0.1, 1.3]).unwrap();
    let tape = Tape::<f64>::new();
    let xv = tape.param(x.clone());
    let y = xv.scalar_scale(2.0).unwrap().tanh().unwrap().sum().unwrap();
    let g = tape.backward(y).unwrap().get(xv);
    for (gi, xi) in g.data().iter().zip(x.data()) {
        let t = (2.0 * xi).tanh();
        assert!((gi - 2.0 * (1.0 - t * t)).abs() < 1e-14);
    }
}
