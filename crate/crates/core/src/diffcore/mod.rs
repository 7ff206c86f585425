//! Differentiable computation substrate.
//!
//! A minimal tensor type, a reverse-mode tape over the primitives the models
//! need (affine maps, softmax, sigmoid, ReLU, layer norm, attention, embedding
//! lookup, concatenation, reductions, cross-entropy), a finite-difference
//! checker and the optimizers used for training.

mod graph;
mod optim;
mod params;
mod tape;
mod tensor;

pub use graph::{
    backward_grad, finite_diff_check, finite_diff_check_with, forward_eval, rel_error, FdOptions, FdReport, Graph,
    Inputs,
};
pub use optim::{make_optimizer, AdamW, Optimizer, OptimizerKind, Sgd};
pub use params::{GradMap, Init, ParamSet, CHECKPOINT_MAGIC};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    fn inputs(pairs: &[(&str, Tensor)]) -> Inputs {
        pairs.iter().map(|(n, t)| (n.to_string(), t.clone())).collect()
    }

    #[test]
    fn affine_identity() {
        let mut p = ParamSet::new(0);
        p.insert("w", Tensor::identity(2)).unwrap();
        p.insert("b", Tensor::row(vec![0.0, 0.0])).unwrap();
        let ins = inputs(&[("x", Tensor::row(vec![1.0, 2.0]))]);
        let g = |t: &mut Tape<'_>| {
            let x = t.input("x")?;
            let (w, b) = (t.param("w")?, t.param("b")?);
            let y = t.affine(x, w, b)?;
            Ok(vec![("y".to_string(), y)])
        };
        let out = forward_eval(&g, &ins, &p).unwrap();
        assert_eq!(out["y"].data(), &[1.0, 2.0]);
    }

    #[test]
    fn softmax_and_sigmoid_fixed_points() {
        let p = ParamSet::new(0);
        let mut t = Tape::new(&p);
        let x = t.constant(Tensor::row(vec![0.0, 0.0]));
        let s = t.softmax(x).unwrap();
        assert_eq!(t.value(s).data(), &[0.5, 0.5]);
        let z = t.constant(Tensor::scalar(0.0));
        let g = t.sigmoid(z);
        assert_eq!(t.value(g).item(), 0.5);
    }

    #[test]
    fn shape_mismatch_names_the_op() {
        let p = ParamSet::new(0);
        let mut t = Tape::new(&p);
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[2, 3]));
        match t.matmul(a, b) {
            Err(Error::Shape { op, detail }) => {
                assert_eq!(op, "matmul");
                assert!(detail.contains("[2, 3]"));
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn linear_loss_gradient_and_unused_param() {
        let mut p = ParamSet::new(0);
        p.insert("w", Tensor::matrix(2, 2, vec![0.3, -1.0, 2.0, 0.5]).unwrap()).unwrap();
        p.insert("unused", Tensor::row(vec![1.0, 2.0, 3.0])).unwrap();
        let ins = inputs(&[("x", Tensor::matrix(2, 1, vec![1.0, 1.0]).unwrap())]);
        // loss = sum(W x)
        let g = |t: &mut Tape<'_>| {
            let (w, x) = (t.param("w")?, t.input("x")?);
            let wx = t.matmul(w, x)?;
            let l = t.sum(wx);
            Ok(vec![("loss".to_string(), l)])
        };
        let grads = backward_grad(&g, &ins, &p, "loss").unwrap();
        assert_eq!(grads.params["w"].data(), &[1.0, 1.0, 1.0, 1.0]);
        assert_eq!(grads.params["unused"].data(), &[0.0, 0.0, 0.0]);
        assert!(finite_diff_check(&g, &ins, &p, "loss", 1e-6).unwrap() < 1e-9);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let p = ParamSet::new(0);
        let ins = inputs(&[("x", Tensor::row(vec![1.0, 2.0]))]);
        let g = |t: &mut Tape<'_>| Ok(vec![("y".to_string(), t.input("x")?)]);
        assert!(matches!(
            backward_grad(&g, &ins, &p, "y"),
            Err(Error::NonScalarLoss(..))
        ));
    }

    #[test]
    fn softmax_ce_gradient_at_uniform_logits() {
        let mut p = ParamSet::new(0);
        p.insert("logits", Tensor::row(vec![0.0, 0.0])).unwrap();
        let g = |t: &mut Tape<'_>| {
            let z = t.param("logits")?;
            let l = t.cross_entropy(z, &[1])?;
            Ok(vec![("loss".to_string(), l)])
        };
        let grads = backward_grad(&g, &Inputs::new(), &p, "loss").unwrap();
        assert_eq!(grads.params["logits"].data(), &[0.5, -0.5]);
        // central-difference oracle for the same gradient
        let f = |a: f64, b: f64| {
            let m = a.max(b);
            m + ((a - m).exp() + (b - m).exp()).ln() - b
        };
        let h = 1e-6;
        let n0 = (f(h, 0.0) - f(-h, 0.0)) / (2.0 * h);
        let n1 = (f(0.0, h) - f(0.0, -h)) / (2.0 * h);
        assert!((n0 - 0.5).abs() < 1e-9 && (n1 + 0.5).abs() < 1e-9);
    }

    #[test]
    fn backward_is_linear_in_upstream() {
        let mut p = ParamSet::new(3);
        let init = p.init();
        p.insert("w", init.normal("w", &[3, 3], 1.0)).unwrap();
        let mut t = Tape::new(&p);
        let w = t.param("w").unwrap();
        let s = t.softmax(w).unwrap();
        let y = t.mul(s, w).unwrap();
        let l = t.sum(y);
        let g1 = t.backward(l).unwrap();
        let g3 = t.backward_scaled(l, 3.0).unwrap();
        for (a, b) in g1.params["w"].data().iter().zip(g3.params["w"].data()) {
            assert!((3.0 * a - b).abs() <= 1e-14 * b.abs().max(1.0));
        }
    }

    #[test]
    fn masked_softmax_zeroes_excluded_entries() {
        let p = ParamSet::new(0);
        let mut t = Tape::new(&p);
        let x = t.constant(Tensor::row(vec![5.0, 1.0, 1.0]));
        let s = t.softmax_masked(x, Some(&[true, false, false])).unwrap();
        assert_eq!(t.value(s).data(), &[0.0, 0.5, 0.5]);
    }

    /// Graph exercising one primitive, parameterised by name.
    fn primitive_graph(kind: &'static str) -> impl Fn(&mut Tape<'_>) -> crate::error::Result<Vec<(String, Var)>> {
        move |t: &mut Tape<'_>| {
            let x = t.param("x")?;
            let w = t.param("w")?;
            let b = t.param("b")?;
            let y = match kind {
                "affine" => t.affine(x, w, b)?,
                "softmax" => t.softmax(x)?,
                "sigmoid" => t.sigmoid(x),
                "relu" => t.relu(x),
                "exp" => t.exp(x),
                "layer_norm" => {
                    let g = t.slice_rows(w, 0, 1)?;
                    t.layer_norm(x, g, b, 1e-5)?
                }
                "attention" => {
                    let q = t.matmul(x, w)?;
                    let (o, _) = t.attention(q, x, x)?;
                    o
                }
                "gather" => t.gather_rows(w, &[2, 0, 2])?,
                "concat" => {
                    let r = t.concat_rows(&[x, w])?;
                    let c = t.concat_cols(&[r, r])?;
                    t.slice_cols(c, 1, 5)?
                }
                "l2norm" => t.l2_normalize_rows(x, 1e-12),
                "mul" => {
                    let xw = t.matmul(x, w)?;
                    t.mul(xw, x)?
                }
                "mean" => {
                    let m = t.mean(x);
                    t.scale_by(w, m)?
                }
                "cross_entropy" => {
                    let xw = t.matmul(x, w)?;
                    let l = t.cross_entropy(xw, &[0, 3])?;
                    return Ok(vec![("loss".into(), l)]);
                }
                other => unreachable!("{other}"),
            };
            // random projection keeps the loss sensitive to every output entry
            let proj = t.param("proj")?;
            let shaped = t.slice_cols(proj, 0, t.value(y).cols())?;
            let rows = t.value(y).rows();
            let shaped = t.slice_rows(shaped, 0, rows)?;
            let yp = t.mul(y, shaped)?;
            let l = t.sum(yp);
            Ok(vec![("loss".into(), l)])
        }
    }

    #[test]
    fn every_primitive_passes_finite_differences_over_20_seeds() {
        let kinds = [
            "affine",
            "softmax",
            "sigmoid",
            "relu",
            "exp",
            "layer_norm",
            "attention",
            "gather",
            "concat",
            "l2norm",
            "mul",
            "mean",
            "cross_entropy",
        ];
        for kind in kinds {
            for seed in 0..20u64 {
                let mut p = ParamSet::new(seed);
                let init = p.init();
                p.insert("x", init.normal("x", &[2, 4], 1.0)).unwrap();
                p.insert("w", init.normal("w", &[4, 4], 0.7)).unwrap();
                p.insert("b", init.normal("b", &[4], 0.5)).unwrap();
                p.insert("proj", init.normal("proj", &[8, 8], 1.0)).unwrap();
                let g = primitive_graph(kind);
                let err = finite_diff_check(&g, &Inputs::new(), &p, "loss", 1e-6).unwrap();
                assert!(err < 1e-5, "{kind} seed {seed}: rel err {err}");
            }
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_and_stay_positive() {
        let p = ParamSet::new(0);
        for seed in 0..20 {
            let x = Init::new(seed).normal("x", &[5, 7], 10.0);
            let mut t = Tape::new(&p);
            let v = t.constant(x);
            let s = t.softmax(v).unwrap();
            for r in 0..5 {
                let row = t.value(s).row_slice(r);
                assert!(row.iter().all(|&v| v > 0.0));
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let mut p = ParamSet::new(9);
        let init = p.init();
        p.insert("x", init.normal("x", &[3, 4], 1.0)).unwrap();
        p.insert("w", init.normal("w", &[4, 4], 1.0)).unwrap();
        p.insert("b", init.normal("b", &[4], 1.0)).unwrap();
        p.insert("proj", init.normal("proj", &[8, 8], 1.0)).unwrap();
        let g = primitive_graph("attention");
        let a = forward_eval(&g, &Inputs::new(), &p).unwrap();
        let b = forward_eval(&g, &Inputs::new(), &p).unwrap();
        assert_eq!(a["loss"].data()[0].to_bits(), b["loss"].data()[0].to_bits());
    }
}
