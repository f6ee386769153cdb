//! Randomized gradient-check suite covering every differentiable op.
//!
//! Multi-input ops pack all inputs into one flat vector so a single
//! check validates every gradient path at once. The suite is reused by
//! the acceptance tests, which is why it lives in the library rather
//! than in test code.

use super::error::Result;
use super::grad_check::{grad_check, GradCheckReport};
use super::ops;
use super::rng::RngStream;
use super::tape::Tape;
use super::tensor::Tensor;

fn randn(shape: Vec<usize>, rng: &mut RngStream) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, rng)
}

/// Fixed random weights so test losses have non-uniform gradients.
fn weights(len: usize, rng: &mut RngStream) -> Tensor<f64> {
    Tensor::randn(vec![len], 0.7, rng)
}

fn weighted_sum(y: &Tensor<f64>, c: &Tensor<f64>) -> Result<Tensor<f64>> {
    let c = c.reshape(y.shape().to_vec())?;
    Ok(ops::sum_all(&ops::mul(y, &c)?))
}

fn unpack(x: &Tensor<f64>, shapes: &[Vec<usize>]) -> Vec<Tensor<f64>> {
    let mut out = Vec::with_capacity(shapes.len());
    let mut offset = 0;
    for s in shapes {
        let n: usize = s.iter().product();
        let part = ops::slice_rows(&x.reshape(vec![x.len(), 1]).unwrap(), offset, offset + n)
            .unwrap()
            .reshape(s.clone())
            .unwrap();
        out.push(part);
        offset += n;
    }
    out
}

type LossFn = Box<dyn Fn(&Tape<f64>, &Tensor<f64>) -> Result<Tensor<f64>>>;

struct Case {
    name: &'static str,
    input_len: usize,
    loss: LossFn,
}

fn cases(rng: &mut RngStream) -> Vec<Case> {
    let mut cases: Vec<Case> = Vec::new();

    let c = weights(6, rng);
    cases.push(Case {
        name: "matmul",
        input_len: 3 * 4 + 4 * 2,
        loss: Box::new(move |_, x| {
            let parts = unpack(x, &[vec![3, 4], vec![4, 2]]);
            weighted_sum(&ops::matmul(&parts[0], &parts[1])?, &c)
        }),
    });

    let c = weights(15, rng);
    cases.push(Case {
        name: "matmul_nt",
        input_len: 3 * 4 + 5 * 4,
        loss: Box::new(move |_, x| {
            let parts = unpack(x, &[vec![3, 4], vec![5, 4]]);
            weighted_sum(&ops::matmul_nt(&parts[0], &parts[1])?, &c)
        }),
    });

    let c = weights(12, rng);
    cases.push(Case {
        name: "transpose",
        input_len: 12,
        loss: Box::new(move |_, x| {
            weighted_sum(&ops::transpose(&x.reshape(vec![3, 4])?)?, &c)
        }),
    });

    let c = weights(12, rng);
    cases.push(Case {
        name: "add",
        input_len: 24,
        loss: Box::new(move |_, x| {
            let parts = unpack(x, &[vec![3, 4], vec![3, 4]]);
            weighted_sum(&ops::add(&parts[0], &parts[1])?, &c)
        }),
    });

    let c = weights(12, rng);
    cases.push(Case {
        name: "sub",
        input_len: 24,
        loss: Box::new(move |_, x| {
            let parts = unpack(x, &[vec![3, 4], vec![3, 4]]);
            weighted_sum(&ops::sub(&parts[0], &parts[1])?, &c)
        }),
    });

    let c = weights(12, rng);
    cases.push(Case {
        name: "mul",
        input_len: 24,
        loss: Box::new(move |_, x| {
            let parts = unpack(x, &[vec![3, 4], vec![3, 4]]);
            weighted_sum(&ops::mul(&parts[0], &parts[1])?, &c)
        }),
    });

    let c = weights(12, rng);
    cases.push(Case {
        name: "scale",
        input_len: 12,
        loss: Box::new(move |_, x| {
            weighted_sum(&ops::scale(&x.reshape(vec![3, 4])?, -1.7), &c)
        }),
    });

    let c = weights(12, rng);
    cases.push(Case {
        name: "mul_scalar_t",
        input_len: 13,
        loss: Box::new(move |_, x| {
            let parts = unpack(x, &[vec![3, 4], vec![1]]);
            weighted_sum(&ops::mul_scalar_t(&parts[0], &parts[1])?, &c)
        }),
    });

    let c = weights(12, rng);
    cases.push(Case {
        name: "exp",
        input_len: 12,
        loss: Box::new(move |_, x| {
            weighted_sum(&ops::exp(&ops::scale(&x.reshape(vec![3, 4])?, 0.3)), &c)
        }),
    });

    let c = weights(12, rng);
    cases.push(Case {
        name: "add_bias",
        input_len: 4 * 3 + 3,
        loss: Box::new(move |_, x| {
            let parts = unpack(x, &[vec![4, 3], vec![3]]);
            weighted_sum(&ops::add_bias(&parts[0], &parts[1])?, &c)
        }),
    });

    let c = weights(12, rng);
    cases.push(Case {
        name: "gelu",
        input_len: 12,
        loss: Box::new(move |_, x| weighted_sum(&ops::gelu(&x.reshape(vec![3, 4])?), &c)),
    });

    let c = weights(15, rng);
    cases.push(Case {
        name: "softmax_rows",
        input_len: 15,
        loss: Box::new(move |_, x| {
            weighted_sum(&ops::softmax_rows(&x.reshape(vec![3, 5])?)?, &c)
        }),
    });

    let c = weights(15, rng);
    cases.push(Case {
        name: "layer_norm",
        input_len: 3 * 5 + 5 + 5,
        loss: Box::new(move |_, x| {
            let parts = unpack(x, &[vec![3, 5], vec![5], vec![5]]);
            weighted_sum(&ops::layer_norm(&parts[0], &parts[1], &parts[2], 1e-5)?, &c)
        }),
    });

    let c = weights(12, rng);
    cases.push(Case {
        name: "normalize_rows",
        input_len: 12,
        loss: Box::new(move |_, x| {
            weighted_sum(&ops::normalize_rows(&x.reshape(vec![3, 4])?, 1e-8)?, &c)
        }),
    });

    cases.push(Case {
        name: "cross_entropy",
        input_len: 4 * 6,
        loss: Box::new(move |_, x| {
            ops::cross_entropy(&x.reshape(vec![4, 6])?, &[1, 0, 5, 3])
        }),
    });

    cases.push(Case {
        name: "cross_entropy_masked",
        input_len: 4 * 6,
        loss: Box::new(move |_, x| {
            ops::cross_entropy_masked(
                &x.reshape(vec![4, 6])?,
                &[None, Some(2), None, Some(4)],
            )
        }),
    });

    let target: Vec<f64> = {
        let mut r = rng.substream(91);
        (0..12).map(|_| r.normal()).collect()
    };
    cases.push(Case {
        name: "mse_to",
        input_len: 12,
        loss: Box::new(move |_, x| ops::mse_to(&x.reshape(vec![3, 4])?, &target)),
    });

    let c = weights(4 * 3, rng);
    cases.push(Case {
        name: "embedding",
        input_len: 7 * 3,
        loss: Box::new(move |_, x| {
            // id 2 repeats to exercise gradient accumulation in the scatter.
            weighted_sum(&ops::embedding(&x.reshape(vec![7, 3])?, &[0, 2, 2, 5])?, &c)
        }),
    });

    let angles: Vec<f64> = {
        let mut r = rng.substream(92);
        (0..3 * 4).map(|_| r.uniform() * 6.0).collect()
    };
    let c = weights(24, rng);
    cases.push(Case {
        name: "rotate_pairs",
        input_len: 24,
        loss: Box::new(move |_, x| {
            weighted_sum(&ops::rotate_pairs(&x.reshape(vec![3, 8])?, &angles)?, &c)
        }),
    });

    let c = weights(4, rng);
    cases.push(Case {
        name: "mean_rows",
        input_len: 12,
        loss: Box::new(move |_, x| weighted_sum(&ops::mean_rows(&x.reshape(vec![3, 4])?)?, &c)),
    });

    cases.push(Case {
        name: "sum_all",
        input_len: 12,
        loss: Box::new(move |_, x| Ok(ops::sum_all(&ops::gelu(&x.reshape(vec![3, 4])?)))),
    });

    let c = weights(15, rng);
    cases.push(Case {
        name: "concat_rows",
        input_len: 2 * 3 + 3 * 3,
        loss: Box::new(move |_, x| {
            let parts = unpack(x, &[vec![2, 3], vec![3, 3]]);
            weighted_sum(&ops::concat_rows(&[&parts[0], &parts[1]])?, &c)
        }),
    });

    let c = weights(15, rng);
    cases.push(Case {
        name: "concat_cols",
        input_len: 3 * 2 + 3 * 3,
        loss: Box::new(move |_, x| {
            let parts = unpack(x, &[vec![3, 2], vec![3, 3]]);
            weighted_sum(&ops::concat_cols(&[&parts[0], &parts[1]])?, &c)
        }),
    });

    let c0 = weights(6, rng);
    let c1 = weights(6, rng);
    cases.push(Case {
        name: "split_cols",
        input_len: 3 * 6,
        loss: Box::new(move |_, x| {
            let blocks = ops::split_cols(&x.reshape(vec![3, 6])?, 3)?;
            let a = weighted_sum(&blocks[0], &c0)?;
            let b = weighted_sum(&blocks[2], &c1)?;
            ops::add(&a, &ops::scale(&b, 2.0))
        }),
    });

    let c = weights(12, rng);
    cases.push(Case {
        name: "permute_elements",
        input_len: 12,
        loss: Box::new(move |_, x| {
            let perm: Vec<usize> = (0..12).map(|i| (i * 5) % 12).collect();
            weighted_sum(&ops::permute_elements(x, &perm, vec![3, 4])?, &c)
        }),
    });

    let c = weights(8, rng);
    cases.push(Case {
        name: "slice_rows",
        input_len: 5 * 4,
        loss: Box::new(move |_, x| {
            weighted_sum(&ops::slice_rows(&x.reshape(vec![5, 4])?, 1, 3)?, &c)
        }),
    });

    cases
}

/// Runs `trials` random gradient checks per op at f64 with the given
/// step, returning the worst report per op.
pub fn op_gradient_suite(trials: usize, h: f64, tol: f64) -> Vec<(String, GradCheckReport)> {
    let mut setup_rng = RngStream::new(0x6F70_5F63, 17);
    let cases = cases(&mut setup_rng);
    let mut results = Vec::with_capacity(cases.len());
    for case in &cases {
        let mut worst: Option<GradCheckReport> = None;
        for trial in 0..trials {
            let mut rng = RngStream::new(0xCAFE, 1000 + trial as u64);
            let x = randn(vec![case.input_len], &mut rng);
            let report = grad_check(&case.loss, &x, h, tol)
                .unwrap_or_else(|e| panic!("{}: {e}", case.name));
            let replace = match &worst {
                None => true,
                Some(w) => report.max_rel_err > w.max_rel_err,
            };
            if replace {
                worst = Some(report);
            }
        }
        results.push((case.name.to_string(), worst.unwrap()));
    }
    results
}
