//! Reverse-mode gradients against central finite differences.

use occam::adapt::{kf_update_tracked, TrackedBelief};
use occam::numkernel::{hconcat, Matrix, Tape, Var};
use rand::Rng;
use rand_distr::StandardNormal;

fn randn(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
}

/// Checks `d f / d inputs[k]` for every entry of every input.
fn check<F>(inputs: &[Matrix], f: F, tol: f64)
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|m| tape.param(m.clone())).collect();
    let loss = f(&tape, &vars);
    let grads = tape.backward(loss).unwrap();
    let eval = |ms: &[Matrix]| {
        let t = Tape::new();
        let vs: Vec<Var> = ms.iter().map(|m| t.constant(m.clone())).collect();
        f(&t, &vs).scalar()
    };
    let h = 1e-6;
    for (k, m) in inputs.iter().enumerate() {
        let g = grads.wrt(vars[k]).cloned().unwrap_or_else(|| Matrix::zeros(m.rows(), m.cols()));
        for idx in 0..m.len() {
            let mut plus = inputs.to_vec();
            let mut minus = inputs.to_vec();
            plus[k].as_mut_slice()[idx] += h;
            minus[k].as_mut_slice()[idx] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let an = g.as_slice()[idx];
            assert!((fd - an).abs() <= tol * (1.0 + fd.abs()), "input {k} entry {idx}: fd {fd} vs tape {an}");
        }
    }
}

#[test]
fn elementwise_and_linear_ops() {
    let mut rng = occam::rng::stream(1, &[]);
    let a = randn(3, 4, &mut rng);
    let b = randn(4, 2, &mut rng);
    let c = randn(3, 4, &mut rng);
    check(
        &[a, b, c],
        |_, v| {
            let ab = v[0].matmul(&v[1]).unwrap();
            let mix = v[0].mul(&v[2]).unwrap().sub(&v[2].scale(0.3).unwrap()).unwrap();
            let s = mix.transpose().unwrap().matmul(&ab).unwrap();
            s.relu().unwrap().square().unwrap().mean().unwrap().add(&ab.sum().unwrap()).unwrap()
        },
        1e-6,
    );
}

#[test]
fn slicing_reshape_and_concat() {
    let mut rng = occam::rng::stream(2, &[]);
    let a = randn(4, 3, &mut rng);
    let b = randn(4, 2, &mut rng);
    check(
        &[a, b],
        |_, v| {
            let joined = hconcat(&[v[0], v[1]]).unwrap();
            let top = joined.rows_slice(1, 2).unwrap().reshape(5, 2).unwrap();
            let blk = joined.block(0, 2, 3, 3).unwrap();
            top.square().unwrap().sum().unwrap().add(&blk.lower_triangle().unwrap().sum().unwrap()).unwrap()
        },
        1e-6,
    );
}

#[test]
fn spd_solve_and_inverse() {
    let mut rng = occam::rng::stream(3, &[]);
    let l = randn(4, 4, &mut rng).add(&Matrix::identity(4).scale(2.0)).unwrap();
    let rhs = randn(4, 2, &mut rng);
    check(
        &[l, rhs],
        |t, v| {
            let floor = t.constant(Matrix::identity(4).scale(0.1));
            let a = v[0].psd_from_factor().unwrap().add(&floor).unwrap();
            let x = a.solve_spd(&v[1]).unwrap();
            let inv = a.inverse_spd().unwrap().symmetrize().unwrap();
            x.square().unwrap().sum().unwrap().add(&inv.sum().unwrap()).unwrap()
        },
        1e-5,
    );
}

#[test]
fn kalman_step_wrt_every_input() {
    let mut rng = occam::rng::stream(4, &[]);
    let (nb, ny) = (3, 2);
    let mu = randn(nb, 1, &mut rng);
    let l0 = randn(nb, nb, &mut rng);
    let lq = randn(nb, nb, &mut rng).scale(0.3);
    let lr = randn(ny, ny, &mut rng).add(&Matrix::identity(ny)).unwrap();
    let phi = randn(ny, nb, &mut rng);
    let y = randn(ny, 1, &mut rng);
    check(
        &[mu, l0, lq, lr, phi, y],
        |t, v| {
            let floor = t.constant(Matrix::identity(ny).scale(1e-3));
            let b = TrackedBelief { mean: v[0], cov: v[1].psd_from_factor().unwrap() };
            let q = v[2].psd_from_factor().unwrap();
            let r = v[3].psd_from_factor().unwrap().add(&floor).unwrap();
            let b1 = kf_update_tracked(b, q, r, v[4], v[5]).unwrap();
            let b2 = kf_update_tracked(b1, q, r, v[4].scale(-0.5).unwrap(), v[5]).unwrap();
            b2.mean.square().unwrap().sum().unwrap().add(&b2.cov.sum().unwrap()).unwrap()
        },
        1e-5,
    );
}

#[test]
fn unused_parameter_has_no_gradient() {
    let tape = Tape::new();
    let a = tape.param(Matrix::filled(2, 2, 1.0));
    let b = tape.param(Matrix::filled(2, 2, 1.0));
    let loss = a.sum().unwrap();
    let g = tape.backward(loss).unwrap();
    assert!(g.wrt(b).is_none());
    assert_eq!(g.wrt(a).unwrap().as_slice(), &[1.0; 4]);
}
