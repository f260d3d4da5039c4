use proptest::{prop_assert, proptest};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

const TOL: f64 = 1e-6;
const H: f64 = 1e-5;

fn rand_t(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

fn unit_quats(rng: &mut impl Rng, rows: usize) -> Tensor {
    let mut d = Vec::with_capacity(rows * 4);
    for _ in 0..rows {
        let q: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        d.extend(q.iter().map(|v| v / n));
    }
    Tensor::new(vec![rows, 4], d).unwrap()
}

/// Weighted sum so every output coordinate carries a distinct gradient.
fn wsum<'t>(v: Var<'t>) -> Result<Var<'t>> {
    let w = Tensor::from_fn(&v.shape(), |i| 0.3 + 0.7 * ((i * 7919 % 13) as f64) / 13.0);
    Ok(v.mul(v.tape().constant(w))?.sum())
}

fn spd_batch(rng: &mut impl Rng, rows: usize) -> Tensor {
    let mut d = Vec::with_capacity(rows * 9);
    for _ in 0..rows {
        let a = nalgebra::Matrix3::from_fn(|_, _| rng.random_range(-1.0..1.0));
        let m = a * a.transpose() + nalgebra::Matrix3::identity() * 0.5;
        for i in 0..3 {
            for j in 0..3 {
                d.push(m[(i, j)]);
            }
        }
    }
    Tensor::new(vec![rows, 3, 3], d).unwrap()
}

#[test]
fn softmax_uniform() {
    let t = Tape::new();
    let y = t.constant(Tensor::full(&[5], 2.5)).softmax();
    assert!(y.value().data().iter().all(|v| (v - 0.2).abs() < 1e-15));
}

#[test]
fn normalize_quat_example() {
    let t = Tape::new();
    let y = t.constant(Tensor::new(vec![4], vec![2.0, 0.0, 0.0, 0.0]).unwrap()).normalize_last();
    assert_eq!(y.value().data(), &[1.0, 0.0, 0.0, 0.0]);
}

#[test]
fn log_sum_exp_stable() {
    let t = Tape::new();
    let y = t.constant(Tensor::new(vec![2], vec![-1000.0, 0.0]).unwrap()).log_sum_exp();
    assert!(y.item().abs() < 1e-12);
}

#[test]
fn backward_of_sum_is_ones() {
    let t = Tape::new();
    let x = t.leaf(Tensor::from_fn(&[2, 3], |i| i as f64));
    let l = x.sum();
    let g = t.backward(l).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[1.0; 6]);
    assert!(t.is_empty());
}

#[test]
fn backward_of_square_sum_is_twice_x() {
    let t = Tape::new();
    let xv = Tensor::from_fn(&[4], |i| i as f64 - 1.5);
    let x = t.leaf(xv.clone());
    let l = x.mul(x).unwrap().sum();
    let g = t.backward(l).unwrap();
    assert_eq!(g.get(x).unwrap().data(), xv.map(|v| 2.0 * v).data());
}

#[test]
fn backward_rejects_non_scalar() {
    let t = Tape::new();
    let x = t.leaf(Tensor::zeros(&[3]));
    assert!(t.backward(x).is_err());
}

#[test]
fn shape_mismatch_names_both_shapes() {
    let t = Tape::new();
    let a = t.constant(Tensor::zeros(&[2, 3]));
    let b = t.constant(Tensor::zeros(&[4]));
    let msg = a.add(b).unwrap_err().to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[4]"), "{msg}");
    let m = t.constant(Tensor::zeros(&[3, 2]));
    let msg = a.matmul(m.transpose_last2().unwrap()).unwrap_err().to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[2, 3]"));
}

#[test]
fn detached_input_gets_no_gradient() {
    let t = Tape::new();
    let x = t.leaf(Tensor::full(&[3], 2.0));
    let y = x.detach().mul(x).unwrap().sum();
    let g = t.backward(y).unwrap();
    // only the non-detached branch contributes: d/dx (c·x) = c
    assert_eq!(g.get(x).unwrap().data(), &[2.0; 3]);
    let t = Tape::new();
    let x = t.leaf(Tensor::full(&[3], 2.0));
    let y = x.detach().square().sum().add(t.constant(Tensor::scalar(0.0))).unwrap();
    let g = t.backward(y).unwrap();
    assert!(g.get(x).is_none());
}

fn lin_f1(x: Var<'_>) -> Var<'_> {
    x.tanh().sum()
}

fn lin_f2(x: Var<'_>) -> Var<'_> {
    x.square().softmax().ln().sum()
}

fn lin_f12(x: Var<'_>) -> Var<'_> {
    lin_f1(x).add(lin_f2(x)).unwrap()
}

#[test]
fn gradient_linearity() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let xv = rand_t(&mut rng, &[3, 4], -1.0, 1.0);
    let grad = |f: for<'a> fn(Var<'a>) -> Var<'a>| {
        let t = Tape::new();
        let x = t.leaf(xv.clone());
        let l = f(x);
        t.backward(l).unwrap().get(x).unwrap().clone()
    };
    let g1 = grad(lin_f1);
    let g2 = grad(lin_f2);
    let g12 = grad(lin_f12);
    for i in 0..xv.len() {
        assert!((g12.data()[i] - g1.data()[i] - g2.data()[i]).abs() < 1e-12);
    }
}

#[test]
fn grad_check_quadratic_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = rand_t(&mut rng, &[4, 4], -1.0, 1.0);
    let x = rand_t(&mut rng, &[4, 1], -1.0, 1.0);
    let err = grad_check(
        |t, x| {
            let a = t.constant(a.clone());
            let ax = a.matmul(x)?;
            Ok(x.mul(ax)?.sum())
        },
        &x,
        H,
    )
    .unwrap();
    assert!(err < 1e-9, "{err}");
}

#[test]
fn grad_elementwise_with_broadcast() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cases: [(&[usize], &[usize]); 4] = [(&[2, 3], &[2, 3]), (&[2, 3], &[3]), (&[2, 1, 4], &[3, 1]), (&[], &[2, 2])];
    for (sa, sb) in cases {
        let a = rand_t(&mut rng, sa, 0.5, 1.5);
        let b = rand_t(&mut rng, sb, 0.5, 1.5);
        for op in 0..4 {
            let err = grad_check_many(
                |_, v| {
                    let r = match op {
                        0 => v[0].add(v[1])?,
                        1 => v[0].sub(v[1])?,
                        2 => v[0].mul(v[1])?,
                        _ => v[0].div(v[1])?,
                    };
                    wsum(r)
                },
                &[a.clone(), b.clone()],
                H,
            )
            .unwrap();
            assert!(err < TOL, "op {op} {sa:?} {sb:?}: {err}");
        }
    }
}

#[test]
fn grad_unary() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = rand_t(&mut rng, &[3, 5], 0.2, 2.0);
    for op in 0..9 {
        let err = grad_check(
            |_, x| {
                let r = match op {
                    0 => x.sigmoid(),
                    1 => x.tanh(),
                    2 => x.softplus(),
                    3 => x.exp(),
                    4 => x.ln(),
                    5 => x.scale(-2.5),
                    6 => x.add_scalar(3.0),
                    7 => x.neg(),
                    _ => x.square(),
                };
                wsum(r)
            },
            &x,
            H,
        )
        .unwrap();
        assert!(err < TOL, "op {op}: {err}");
    }
}

#[test]
fn grad_matmul_variants() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = rand_t(&mut rng, &[3, 4], -1.0, 1.0);
    let b = rand_t(&mut rng, &[4, 2], -1.0, 1.0);
    let err = grad_check_many(|_, v| wsum(v[0].matmul(v[1])?), &[a, b.clone()], H).unwrap();
    assert!(err < TOL);
    let a = rand_t(&mut rng, &[2, 3, 3, 4], -1.0, 1.0);
    let err = grad_check_many(|_, v| wsum(v[0].batched_matmul(v[1])?), &[a.clone(), b], H).unwrap();
    assert!(err < TOL);
    let b = rand_t(&mut rng, &[2, 3, 4, 5], -1.0, 1.0);
    let err = grad_check_many(|_, v| wsum(v[0].batched_matmul(v[1])?), &[a.clone(), b], H).unwrap();
    assert!(err < TOL);
    let err = grad_check(|_, x| wsum(x.transpose_last2()?), &a, H).unwrap();
    assert!(err < TOL);
}

#[test]
fn matmul_values() {
    let t = Tape::new();
    let a = t.constant(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let b = t.constant(Tensor::new(vec![2, 1], vec![5.0, 6.0]).unwrap());
    assert_eq!(a.matmul(b).unwrap().value().data(), &[17.0, 39.0]);
    assert_eq!(a.transpose_last2().unwrap().value().data(), &[1.0, 3.0, 2.0, 4.0]);
}

#[test]
fn typed_matmul_matches_per_node_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = rand_t(&mut rng, &[2, 3, 4], -1.0, 1.0);
    let w = rand_t(&mut rng, &[2, 4, 5], -1.0, 1.0);
    let classes = std::sync::Arc::new(vec![1, 0, 1]);
    let t = Tape::new();
    let out = t.constant(x.clone()).typed_matmul(t.constant(w.clone()), classes.clone()).unwrap().value();
    for b in 0..2 {
        for n in 0..3 {
            for o in 0..5 {
                let expect: f64 = (0..4).map(|i| x.at(&[b, n, i]) * w.at(&[classes[n], i, o])).sum();
                assert!((out.at(&[b, n, o]) - expect).abs() < 1e-14);
            }
        }
    }
    let err = grad_check_many(|_, v| wsum(v[0].typed_matmul(v[1], classes.clone())?), &[x, w], H).unwrap();
    assert!(err < TOL);
}

#[test]
fn graph_mix_values_and_grad() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let g = rand_t(&mut rng, &[3, 3], -1.0, 1.0);
    let y = rand_t(&mut rng, &[2, 3, 4], -1.0, 1.0);
    let t = Tape::new();
    let out = t.constant(g.clone()).graph_mix(t.constant(y.clone())).unwrap().value();
    for b in 0..2 {
        for i in 0..3 {
            for d in 0..4 {
                let expect: f64 = (0..3).map(|j| g.at(&[i, j]) * y.at(&[b, j, d])).sum();
                assert!((out.at(&[b, i, d]) - expect).abs() < 1e-14);
            }
        }
    }
    let err = grad_check_many(|_, v| wsum(v[0].graph_mix(v[1])?), &[g, y], H).unwrap();
    assert!(err < TOL);
}

#[test]
fn grad_shape_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let a = rand_t(&mut rng, &[2, 3, 4], -1.0, 1.0);
    let b = rand_t(&mut rng, &[2, 2, 4], -1.0, 1.0);
    let err = grad_check_many(|_, v| wsum(Var::concat(&[v[0], v[1], v[0]], 1)?), &[a.clone(), b], H).unwrap();
    assert!(err < TOL);
    let err = grad_check(|_, x| wsum(x.slice(2, 1, 2)?), &a, H).unwrap();
    assert!(err < TOL);
    let err = grad_check(|_, x| wsum(x.reshape(&[6, 4])?), &a, H).unwrap();
    assert!(err < TOL);
    let err = grad_check(|_, x| wsum(x.index_select0(&[1, 0, 1, 1])?), &a, H).unwrap();
    assert!(err < TOL);
    for axis in 0..3 {
        let err = grad_check(|_, x| wsum(x.sum_axis(axis)?), &a, H).unwrap();
        assert!(err < TOL);
        let err = grad_check(|_, x| wsum(x.mean_axis(axis)?), &a, H).unwrap();
        assert!(err < TOL);
    }
    let err = grad_check(|_, x| Ok(x.mean()), &a, H).unwrap();
    assert!(err < TOL);
}

#[test]
fn concat_and_slice_values() {
    let t = Tape::new();
    let a = t.constant(Tensor::new(vec![2, 1], vec![1.0, 2.0]).unwrap());
    let b = t.constant(Tensor::new(vec![2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap());
    let c = Var::concat(&[a, b], 1).unwrap();
    assert_eq!(c.value().data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
    assert_eq!(c.slice(1, 1, 1).unwrap().value().data(), &[3.0, 5.0]);
    assert!(c.slice(1, 2, 2).is_err());
}

#[test]
fn grad_softmax_family() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = rand_t(&mut rng, &[3, 5], -3.0, 3.0);
    for op in 0..4 {
        let err = grad_check(
            |_, x| {
                let r = match op {
                    0 => x.softmax(),
                    1 => x.log_softmax(),
                    2 => x.log_sum_exp(),
                    _ => x.normalize_last(),
                };
                wsum(r)
            },
            &x,
            H,
        )
        .unwrap();
        assert!(err < TOL, "op {op}: {err}");
    }
}

#[test]
fn grad_softmax_crossing_composition() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = rand_t(&mut rng, &[4, 3], -2.0, 2.0);
    let err = grad_check(
        |t, x| {
            let p = x.softmax();
            let lp = x.log_softmax();
            let mixed = p.mul(lp)?.add(x.tanh().log_sum_exp().reshape(&[4, 1])?)?;
            let c = t.constant(Tensor::from_fn(&[3, 3], |i| (i as f64).sin()));
            wsum(mixed.matmul(c)?.softmax())
        },
        &x,
        H,
    )
    .unwrap();
    assert!(err < TOL, "{err}");
}

#[test]
fn grad_quaternion_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a = unit_quats(&mut rng, 5);
    let b = unit_quats(&mut rng, 5);
    let err = grad_check_many(|_, v| wsum(v[0].quat_mul(v[1])?), &[a.clone(), b.clone()], H).unwrap();
    assert!(err < TOL);
    let err = grad_check(|_, x| wsum(x.quat_to_rotmat()?), &a, H).unwrap();
    assert!(err < TOL);
    let err = grad_check(|_, x| wsum(x.quat_conj()?), &a, H).unwrap();
    assert!(err < TOL);
    // quat_log is defined off the unit sphere through the same formula
    let err = grad_check(|_, x| wsum(x.quat_log()?), &a, H).unwrap();
    assert!(err < TOL, "{err}");
    // near-identity quaternions exercise the series branch
    let small = Tensor::new(vec![2, 4], vec![0.9999, 3e-5, -2e-5, 1e-5, -0.999, 1e-5, 4e-5, 0.0]).unwrap();
    let err = grad_check(|_, x| wsum(x.quat_log()?), &small, 1e-7).unwrap();
    assert!(err < TOL, "{err}");
}

#[test]
fn quaternion_ops_match_rotmath() {
    use crate::rotmath::{log_so3, quat_mul, quat_to_rotmat, UnitQuaternion};
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let a = unit_quats(&mut rng, 20);
    let b = unit_quats(&mut rng, 20);
    let t = Tape::new();
    let (va, vb) = (t.constant(a.clone()), t.constant(b.clone()));
    let prod = va.quat_mul(vb).unwrap().value();
    let rot = va.quat_to_rotmat().unwrap().value();
    let lg = va.quat_log().unwrap().value();
    for r in 0..20 {
        let qa = UnitQuaternion::new(a.at(&[r, 0]), a.at(&[r, 1]), a.at(&[r, 2]), a.at(&[r, 3])).unwrap();
        let qb = UnitQuaternion::new(b.at(&[r, 0]), b.at(&[r, 1]), b.at(&[r, 2]), b.at(&[r, 3])).unwrap();
        let p = UnitQuaternion::new(prod.at(&[r, 0]), prod.at(&[r, 1]), prod.at(&[r, 2]), prod.at(&[r, 3])).unwrap();
        assert!(p.max_abs_diff(&quat_mul(&qa, &qb)) < 1e-12);
        let m = quat_to_rotmat(&qa);
        for i in 0..3 {
            for j in 0..3 {
                assert!((rot.at(&[r, i, j]) - m[(i, j)]).abs() < 1e-12);
            }
        }
        let e = log_so3(&qa);
        for k in 0..3 {
            assert!((lg.at(&[r, k]) - e[k]).abs() < 1e-12, "{} {}", lg.at(&[r, k]), e[k]);
        }
    }
}

#[test]
fn grad_covariance_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let c = spd_batch(&mut rng, 4);
    let e = rand_t(&mut rng, &[4, 3], -1.0, 1.0);
    let err = grad_check_many(|_, v| wsum(v[0].mahalanobis3(v[1])?), &[c.clone(), e], H).unwrap();
    assert!(err < TOL, "{err}");
    let err = grad_check(|_, x| wsum(x.logdet3()?), &c, H).unwrap();
    assert!(err < TOL, "{err}");
    let raw = rand_t(&mut rng, &[4, 6], -1.0, 1.0);
    let err = grad_check(
        |_, x| {
            let l = x.lower_tri3()?;
            let s = l.batched_matmul(l.transpose_last2()?)?;
            wsum(s)
        },
        &raw,
        H,
    )
    .unwrap();
    assert!(err < TOL, "{err}");
}

#[test]
fn covariance_op_values() {
    let t = Tape::new();
    let c = t.constant(Tensor::new(vec![3, 3], vec![4.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 1.0]).unwrap());
    let e = t.constant(Tensor::new(vec![3], vec![2.0, 2.0, 1.0]).unwrap());
    assert!((c.mahalanobis3(e).unwrap().item() - 4.0).abs() < 1e-14);
    assert!((c.logdet3().unwrap().item() - 8f64.ln()).abs() < 1e-14);
    let raw = t.constant(Tensor::new(vec![6], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
    assert_eq!(raw.lower_tri3().unwrap().value().data(), &[1.0, 0.0, 0.0, 4.0, 2.0, 0.0, 5.0, 6.0, 3.0]);
}

#[test]
fn param_store_roundtrip() {
    let mut ps = ParamStore::new();
    let a = ps.add("a", Tensor::full(&[2], 1.0));
    let b = ps.add("b", Tensor::full(&[3], 2.0));
    assert_eq!(ps.count(), 5);
    assert_eq!(ps.find("b"), Some(b));
    let t = Tape::new();
    let bound = ps.attach(&t);
    let l = bound.var(a).square().sum();
    let mut g = t.backward(l).unwrap();
    let grads = bound.collect_grads(&mut g, &ps);
    assert_eq!(grads[0].data(), &[2.0, 2.0]);
    assert_eq!(grads[1].data(), &[0.0; 3]);
    assert!(ps.set_values(vec![Tensor::zeros(&[2])]).is_err());
}

proptest! {
    #[test]
    fn random_composite_passes_grad_check(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_t(&mut rng, &[2, 3], -1.5, 1.5);
        let w = rand_t(&mut rng, &[3, 4], -1.0, 1.0);
        let err = grad_check_many(
            |_, v| {
                let h = v[0].matmul(v[1])?.tanh();
                let g = h.sigmoid().mul(h.softplus())?;
                wsum(g.log_softmax())
            },
            &[x, w],
            H,
        ).unwrap();
        prop_assert!(err < TOL);
    }
}
