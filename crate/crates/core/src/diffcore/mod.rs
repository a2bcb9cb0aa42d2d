//! Reverse-mode differentiation over dense `f64` arrays.
//!
//! The primitive set is deliberately closed: add, multiply, matmul,
//! embedding-gather, tanh, softmax, log, sum, scale, sqrt, L2-norm and
//! concatenate. Everything the model and the losses need is composed from
//! these.

mod array;
mod check;
mod params;
mod tape;

pub use array::RealArray;
pub use check::{finite_diff_check, forward, value_and_grad};
pub use params::ParamSet;
pub use tape::{Bound, Tape, Var};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn params(entries: &[(&str, RealArray)]) -> ParamSet {
        entries
            .iter()
            .map(|(k, v)| (k.to_string(), v.clone()))
            .collect()
    }

    fn random_array(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> RealArray {
        let n = shape.iter().product();
        RealArray::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
    }

    fn dot_program(t: &mut Tape, b: &Bound) -> crate::Result<Var> {
        let (u, v) = (b.get("u")?, b.get("v")?);
        let p = t.mul(u, v)?;
        t.sum(p)
    }

    fn dot_params() -> ParamSet {
        params(&[
            ("u", RealArray::vector(vec![1.0, 2.0]).unwrap()),
            ("v", RealArray::vector(vec![3.0, 4.0]).unwrap()),
        ])
    }

    #[test]
    fn dot_product_value_and_gradient() {
        let (value, grads) = value_and_grad(&dot_params(), dot_program).unwrap();
        assert_eq!(value, 11.0);
        assert_eq!(grads.get("u").unwrap().values(), &[3.0, 4.0]);
        assert_eq!(grads.get("v").unwrap().values(), &[1.0, 2.0]);
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut t = Tape::new();
        let z = t.constant(RealArray::row(vec![0.0; 4]).unwrap()).unwrap();
        let s = t.softmax(z).unwrap();
        assert_eq!(t.value(s).values(), &[0.25; 4]);
    }

    #[test]
    fn tanh_of_zero() {
        let mut t = Tape::new();
        let z = t.constant(RealArray::scalar(0.0).unwrap()).unwrap();
        let y = t.tanh(z).unwrap();
        assert_eq!(t.value(y).item(), Some(0.0));
    }

    #[test]
    fn norm_gradient_is_unit_direction() {
        let p = params(&[("u", RealArray::vector(vec![3.0, 4.0]).unwrap())]);
        let (value, grads) = value_and_grad(&p, |t, b| t.l2_norm(b.get("u")?)).unwrap();
        assert_eq!(value, 5.0);
        let g = grads.get("u").unwrap().values();
        assert!((g[0] - 0.6).abs() < 1e-15 && (g[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn log_softmax_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let p = params(&[("z", random_array(&mut rng, &[1, 5], -2.0, 2.0))]);
            let k = rng.random_range(0..5);
            let err = finite_diff_check(
                &p,
                |t, b| {
                    let s = t.softmax(b.get("z")?)?;
                    let l = t.log(s)?;
                    t.gather(l, &[0]).and_then(|r| {
                        let mut mask = vec![0.0; 5];
                        mask[k] = 1.0;
                        let m = t.constant(RealArray::row(mask)?)?;
                        let pick = t.mul(r, m)?;
                        t.sum(pick)
                    })
                },
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-6, "err {err}");
        }
    }

    #[test]
    fn dot_product_finite_difference_error() {
        let err = finite_diff_check(&dot_params(), dot_program, 1e-5).unwrap();
        assert!(err < 1e-8, "err {err}");
    }

    #[test]
    fn composite_tanh_matmul_finite_difference_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = params(&[
            ("w", random_array(&mut rng, &[3, 4], -1.0, 1.0)),
            ("x", random_array(&mut rng, &[1, 3], -1.0, 1.0)),
        ]);
        let err = finite_diff_check(
            &p,
            |t, b| {
                let h = t.matmul(b.get("x")?, b.get("w")?)?;
                let a = t.tanh(h)?;
                let sq = t.mul(a, a)?;
                t.sum(sq)
            },
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "err {err}");
    }

    #[test]
    fn constant_program_has_zero_error() {
        let err = finite_diff_check(&ParamSet::new(), |t, _| t.constant(RealArray::scalar(2.0)?), 1e-5).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn gradients_before_backward_is_state_error() {
        let (tape, _) = forward(&dot_params(), dot_program).unwrap();
        assert!(matches!(tape.param_gradients(), Err(Error::State(_))));
        let mut empty = Tape::new();
        assert!(matches!(empty.backward(Var::from_test(0)), Err(Error::State(_))));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut t = Tape::new();
        let a = t.constant(RealArray::vector(vec![1.0, 2.0]).unwrap()).unwrap();
        let b = t.constant(RealArray::vector(vec![1.0]).unwrap()).unwrap();
        assert!(matches!(t.add(a, b), Err(Error::Shape(_))));
        let m = t.constant(RealArray::matrix(2, 3, vec![0.0; 6]).unwrap()).unwrap();
        assert!(matches!(t.matmul(m, m), Err(Error::Shape(_))));
    }

    #[test]
    fn non_finite_intermediate_names_the_node() {
        let mut t = Tape::new();
        let z = t.constant(RealArray::scalar(0.0).unwrap()).unwrap();
        match t.log(z) {
            Err(Error::NonFinite { node, op }) => {
                assert_eq!(node, 1);
                assert_eq!(op, "log");
            }
            other => panic!("expected non-finite error, got {other:?}"),
        }
    }

    #[test]
    fn backward_requires_scalar_output() {
        let (mut tape, _) = forward(&dot_params(), |_, b| b.get("u")).unwrap();
        let u = Var::from_test(1);
        assert!(matches!(tape.backward(u), Err(Error::Shape(_))));
    }

    /// Every primitive, checked against central differences on random inputs.
    #[test]
    fn every_primitive_matches_finite_differences() {
        type Prog = fn(&mut Tape, &Bound) -> crate::Result<Var>;
        let progs: Vec<(&str, Prog)> = vec![
            ("add", |t, b| {
                let s = t.add(b.get("a")?, b.get("b")?)?;
                let s2 = t.mul(s, s)?;
                t.sum(s2)
            }),
            ("mul", |t, b| {
                let s = t.mul(b.get("a")?, b.get("b")?)?;
                t.sum(s)
            }),
            ("matmul", |t, b| {
                let s = t.matmul(b.get("a")?, b.get("m")?)?;
                let s2 = t.mul(s, s)?;
                t.sum(s2)
            }),
            ("gather", |t, b| {
                let g = t.gather(b.get("m")?, &[2, 0, 2])?;
                let s2 = t.mul(g, g)?;
                t.sum(s2)
            }),
            ("tanh", |t, b| {
                let s = t.tanh(b.get("a")?)?;
                let w = t.mul(s, b.get("b")?)?;
                t.sum(w)
            }),
            ("softmax", |t, b| {
                let s = t.softmax(b.get("m")?)?;
                let w = t.gather(s, &[1])?;
                let w = t.mul(w, b.get("a")?)?;
                t.sum(w)
            }),
            ("log", |t, b| {
                let s = t.log(b.get("p")?)?;
                t.sum(s)
            }),
            ("scale", |t, b| {
                let s = t.scale(b.get("a")?, -2.5)?;
                let w = t.mul(s, b.get("b")?)?;
                t.sum(w)
            }),
            ("sqrt", |t, b| {
                let s = t.sqrt(b.get("p")?)?;
                t.sum(s)
            }),
            ("l2norm", |t, b| t.l2_norm(b.get("a")?)),
            ("concat", |t, b| {
                let c = t.concat(&[b.get("a")?, b.get("b")?])?;
                let s = t.mul(c, c)?;
                let s = t.tanh(s)?;
                t.sum(s)
            }),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for (name, prog) in progs {
            for _ in 0..100 {
                let p = params(&[
                    ("a", random_array(&mut rng, &[1, 3], -1.5, 1.5)),
                    ("b", random_array(&mut rng, &[1, 3], -1.5, 1.5)),
                    ("m", random_array(&mut rng, &[3, 3], -1.5, 1.5)),
                    ("p", random_array(&mut rng, &[1, 3], 0.2, 2.0)),
                ]);
                let err = finite_diff_check(&p, prog, 1e-5).unwrap();
                assert!(err < 1e-5, "{name}: err {err}");
            }
        }
    }

    #[test]
    fn backward_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = params(&[("x", random_array(&mut rng, &[1, 4], -1.0, 1.0))]);
        let f = |t: &mut Tape, b: &Bound| -> crate::Result<Var> {
            let h = t.tanh(b.get("x")?)?;
            t.sum(h)
        };
        let g = |t: &mut Tape, b: &Bound| -> crate::Result<Var> {
            let s = t.softmax(b.get("x")?)?;
            let l = t.log(s)?;
            t.sum(l)
        };
        let (alpha, beta) = (0.7, -1.3);
        let (_, gf) = value_and_grad(&p, f).unwrap();
        let (_, gg) = value_and_grad(&p, g).unwrap();
        let (_, gc) = value_and_grad(&p, |t, b| {
            let fv = f(t, b)?;
            let gv = g(t, b)?;
            let fa = t.scale(fv, alpha)?;
            let gb = t.scale(gv, beta)?;
            t.add(fa, gb)
        })
        .unwrap();
        let mut expect = gf.zeros_like();
        expect.add_scaled(&gf, alpha).unwrap();
        expect.add_scaled(&gg, beta).unwrap();
        assert!(expect.max_abs_diff(&gc).unwrap() < 1e-10);
    }

    #[test]
    fn softmax_rows_are_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut t = Tape::new();
        let z = t.constant(random_array(&mut rng, &[6, 9], -30.0, 30.0)).unwrap();
        let s = t.softmax(z).unwrap();
        let v = t.value(s);
        for r in 0..v.rows() {
            let row = v.row_slice(r);
            assert!(row.iter().all(|&p| p >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn repeated_runs_are_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = params(&[
            ("w", random_array(&mut rng, &[4, 4], -1.0, 1.0)),
            ("x", random_array(&mut rng, &[1, 4], -1.0, 1.0)),
        ]);
        let prog = |t: &mut Tape, b: &Bound| -> crate::Result<Var> {
            let h = t.matmul(b.get("x")?, b.get("w")?)?;
            let s = t.softmax(h)?;
            let l = t.log(s)?;
            t.sum(l)
        };
        let a = value_and_grad(&p, prog).unwrap();
        let b = value_and_grad(&p, prog).unwrap();
        assert_eq!(a.0.to_bits(), b.0.to_bits());
        assert_eq!(a.1, b.1);
    }
}
