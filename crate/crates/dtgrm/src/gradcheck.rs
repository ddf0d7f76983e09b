//! Central finite-difference validation of analytic gradients.
//!
//! Always runs at 64-bit. Each check builds a small random instance,
//! projects the operation output to a scalar with a fixed random weight,
//! and compares `backward` against (f(x+h) - f(x-h)) / 2h element by
//! element.

use crate::backbone::BackboneConfig;
use crate::dtgrm::DtgrmConfig;
use crate::loss::{tmse_loss_ref, total_loss, LossWeights};
use crate::model::Model;
use crate::rng::SplitMix64;
use crate::selfsup::exchange_frames;
use crate::tensor::{compose_scalars, stack_cols, Tensor};

pub const FD_STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct CheckEntry {
    pub name: String,
    pub worst_rel_err: f64,
    pub pass: bool,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub entries: Vec<CheckEntry>,
}

impl GradCheckReport {
    pub fn pass(&self) -> bool {
        self.entries.iter().all(|e| e.pass)
    }
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / 1.0f64.max(a.abs()).max(n.abs())
}

/// Worst relative error between analytic and numeric gradients of
/// `forward` with respect to every element of every leaf. `forward` must
/// rebuild its graph from the leaves' current values on each call.
pub fn check_gradients(leaves: &[Tensor<f64>], forward: &dyn Fn() -> Tensor<f64>) -> f64 {
    check_gradients_with_corruption(leaves, forward, 0.0)
}

fn check_gradients_with_corruption(
    leaves: &[Tensor<f64>],
    forward: &dyn Fn() -> Tensor<f64>,
    corruption: f64,
) -> f64 {
    for l in leaves {
        assert!(l.requires_grad(), "gradcheck leaf must require gradients");
        l.zero_grad();
    }
    let loss = forward();
    assert_eq!(loss.numel(), 1, "gradcheck loss must be scalar");
    loss.backward();
    let mut analytic: Vec<Vec<f64>> = leaves
        .iter()
        .map(|l| l.grad().unwrap_or_else(|| vec![0.0; l.numel()]))
        .collect();
    if corruption != 0.0 {
        analytic[0][0] += corruption;
    }

    let mut worst = 0.0f64;
    for (li, leaf) in leaves.iter().enumerate() {
        for e in 0..leaf.numel() {
            let orig = leaf.value_at(e);
            leaf.set_value_at(e, orig + FD_STEP);
            let f_plus = forward().item();
            leaf.set_value_at(e, orig - FD_STEP);
            let f_minus = forward().item();
            leaf.set_value_at(e, orig);
            let numeric = (f_plus - f_minus) / (2.0 * FD_STEP);
            let err = rel_err(analytic[li][e], numeric);
            if err > worst {
                worst = err;
            }
        }
    }
    worst
}

fn leaf(rng: &mut SplitMix64, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let values = (0..n).map(|_| rng.uniform(lo, hi)).collect();
    Tensor::leaf(shape, values, true)
}

fn projection(rng: &mut SplitMix64, shape: Vec<usize>) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let values = (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect();
    Tensor::from_vec(shape, values)
}

type CheckFn = Box<dyn Fn(&mut SplitMix64, f64) -> f64>;

fn op_checks() -> Vec<(&'static str, CheckFn)> {
    let mut checks: Vec<(&'static str, CheckFn)> = Vec::new();

    checks.push((
        "add",
        Box::new(|rng, c| {
            let a = leaf(rng, vec![3, 4], -2.0, 2.0);
            let b = leaf(rng, vec![3, 4], -2.0, 2.0);
            let w = projection(rng, vec![3, 4]);
            check_inner(&[a.clone(), b.clone()], move || a.add(&b).mul(&w).sum(), c)
        }),
    ));
    checks.push((
        "sub",
        Box::new(|rng, c| {
            let a = leaf(rng, vec![3, 4], -2.0, 2.0);
            let b = leaf(rng, vec![3, 4], -2.0, 2.0);
            let w = projection(rng, vec![3, 4]);
            check_inner(&[a.clone(), b.clone()], move || a.sub(&b).mul(&w).sum(), c)
        }),
    ));
    checks.push((
        "mul",
        Box::new(|rng, c| {
            let a = leaf(rng, vec![2, 5], -2.0, 2.0);
            let b = leaf(rng, vec![2, 5], -2.0, 2.0);
            let w = projection(rng, vec![2, 5]);
            check_inner(&[a.clone(), b.clone()], move || a.mul(&b).mul(&w).sum(), c)
        }),
    ));
    checks.push((
        "scale",
        Box::new(|rng, c| {
            let a = leaf(rng, vec![6], -2.0, 2.0);
            let w = projection(rng, vec![6]);
            check_inner(&[a.clone()], move || a.scale(-1.7).mul(&w).sum(), c)
        }),
    ));
    // kinked ops get inputs away from the kink so central differences hold
    checks.push((
        "relu",
        Box::new(|rng, c| {
            let vals: Vec<f64> = (0..12)
                .map(|_| {
                    let v = rng.uniform(0.2, 2.0);
                    if rng.next_f64() < 0.5 {
                        -v
                    } else {
                        v
                    }
                })
                .collect();
            let a = Tensor::leaf(vec![3, 4], vals, true);
            let w = projection(rng, vec![3, 4]);
            check_inner(&[a.clone()], move || a.relu().mul(&w).sum(), c)
        }),
    ));
    checks.push((
        "abs",
        Box::new(|rng, c| {
            let vals: Vec<f64> = (0..8)
                .map(|_| {
                    let v = rng.uniform(0.2, 2.0);
                    if rng.next_f64() < 0.5 {
                        -v
                    } else {
                        v
                    }
                })
                .collect();
            let a = Tensor::leaf(vec![8], vals, true);
            let w = projection(rng, vec![8]);
            check_inner(&[a.clone()], move || a.abs().mul(&w).sum(), c)
        }),
    ));
    checks.push((
        "log",
        Box::new(|rng, c| {
            let a = leaf(rng, vec![7], 0.1, 3.0);
            let w = projection(rng, vec![7]);
            check_inner(&[a.clone()], move || a.log().mul(&w).sum(), c)
        }),
    ));
    checks.push((
        "clamp",
        Box::new(|rng, c| {
            // half the inputs inside [0, 1], half clearly outside
            let vals: Vec<f64> = (0..10)
                .map(|i| {
                    if i % 2 == 0 {
                        rng.uniform(0.1, 0.9)
                    } else {
                        rng.uniform(1.3, 2.5)
                    }
                })
                .collect();
            let a = Tensor::leaf(vec![10], vals, true);
            let w = projection(rng, vec![10]);
            check_inner(
                &[a.clone()],
                move || a.clamp(Some(0.0), Some(1.0)).mul(&w).sum(),
                c,
            )
        }),
    ));
    checks.push((
        "mean",
        Box::new(|rng, c| {
            let a = leaf(rng, vec![3, 3], -2.0, 2.0);
            check_inner(&[a.clone()], move || a.mul(&a).mean(), c)
        }),
    ));
    checks.push((
        "sum",
        Box::new(|rng, c| {
            let a = leaf(rng, vec![5], -2.0, 2.0);
            check_inner(&[a.clone()], move || a.mul(&a).sum(), c)
        }),
    ));
    checks.push((
        "matmul",
        Box::new(|rng, c| {
            let a = leaf(rng, vec![3, 4], -1.0, 1.0);
            let b = leaf(rng, vec![4, 2], -1.0, 1.0);
            let w = projection(rng, vec![3, 2]);
            check_inner(
                &[a.clone(), b.clone()],
                move || a.matmul(&b).mul(&w).sum(),
                c,
            )
        }),
    ));
    checks.push((
        "conv1d",
        Box::new(|rng, c| {
            let x = leaf(rng, vec![7, 2], -1.0, 1.0);
            let f = leaf(rng, vec![3, 2, 3], -1.0, 1.0);
            let b = leaf(rng, vec![3], -0.5, 0.5);
            let w = projection(rng, vec![7, 3]);
            check_inner(
                &[x.clone(), f.clone(), b.clone()],
                move || x.conv1d(&f, Some(&b), 2).mul(&w).sum(),
                c,
            )
        }),
    ));
    checks.push((
        "softmax",
        Box::new(|rng, c| {
            let a = leaf(rng, vec![4, 3], -2.0, 2.0);
            let mask = vec![
                true, true, false, //
                true, true, true, //
                false, true, true, //
                true, false, true,
            ];
            let w = projection(rng, vec![4, 3]);
            check_inner(
                &[a.clone()],
                move || a.softmax(1, Some(&mask)).mul(&w).sum(),
                c,
            )
        }),
    ));
    checks.push((
        "cosine_rows",
        Box::new(|rng, c| {
            let a = leaf(rng, vec![4, 3], 0.3, 2.0);
            let b = leaf(rng, vec![4, 3], 0.3, 2.0);
            let w = projection(rng, vec![4]);
            check_inner(
                &[a.clone(), b.clone()],
                move || a.cosine_rows(&b, 1e-8).mul(&w).sum(),
                c,
            )
        }),
    ));
    checks.push((
        "index_rows",
        Box::new(|rng, c| {
            let a = leaf(rng, vec![5, 3], -1.0, 1.0);
            let rows = [Some(2), None, Some(0), Some(2), None, Some(4)];
            let w = projection(rng, vec![6, 3]);
            check_inner(
                &[a.clone()],
                move || a.index_rows(&rows).mul(&w).sum(),
                c,
            )
        }),
    ));
    checks.push((
        "gather_per_row",
        Box::new(|rng, c| {
            let a = leaf(rng, vec![4, 3], -1.0, 1.0);
            let idx = [2usize, 0, 1, 1];
            let w = projection(rng, vec![4]);
            check_inner(
                &[a.clone()],
                move || a.gather_per_row(&idx).mul(&w).sum(),
                c,
            )
        }),
    ));
    checks.push((
        "slice_cols",
        Box::new(|rng, c| {
            let a = leaf(rng, vec![4, 5], -1.0, 1.0);
            let w = projection(rng, vec![4, 2]);
            check_inner(&[a.clone()], move || a.slice_cols(1, 3).mul(&w).sum(), c)
        }),
    ));
    checks.push((
        "reshape",
        Box::new(|rng, c| {
            let a = leaf(rng, vec![2, 6], -1.0, 1.0);
            let w = projection(rng, vec![3, 4]);
            check_inner(
                &[a.clone()],
                move || a.reshape(vec![3, 4]).mul(&w).sum(),
                c,
            )
        }),
    ));
    checks.push((
        "add_row_broadcast",
        Box::new(|rng, c| {
            let a = leaf(rng, vec![4, 3], -1.0, 1.0);
            let r = leaf(rng, vec![3], -1.0, 1.0);
            let w = projection(rng, vec![4, 3]);
            check_inner(
                &[a.clone(), r.clone()],
                move || a.add_row_broadcast(&r).mul(&w).sum(),
                c,
            )
        }),
    ));
    checks.push((
        "mul_col_broadcast",
        Box::new(|rng, c| {
            let a = leaf(rng, vec![4, 3], -1.0, 1.0);
            let col = leaf(rng, vec![4], -1.0, 1.0);
            let w = projection(rng, vec![4, 3]);
            check_inner(
                &[a.clone(), col.clone()],
                move || a.mul_col_broadcast(&col).mul(&w).sum(),
                c,
            )
        }),
    ));
    checks.push((
        "stack_cols",
        Box::new(|rng, c| {
            let a = leaf(rng, vec![5], -1.0, 1.0);
            let b = leaf(rng, vec![5], -1.0, 1.0);
            let d = leaf(rng, vec![5], -1.0, 1.0);
            let w = projection(rng, vec![5, 3]);
            check_inner(
                &[a.clone(), b.clone(), d.clone()],
                move || stack_cols(&[&a, &b, &d]).mul(&w).sum(),
                c,
            )
        }),
    ));
    checks.push((
        "compose_scalars",
        Box::new(|rng, c| {
            let s1 = leaf(rng, vec![], -1.0, 1.0);
            let s2 = leaf(rng, vec![], -1.0, 1.0);
            let w = projection(rng, vec![2, 2]);
            let (a, b) = (s1.clone(), s2.clone());
            check_inner(
                &[s1, s2],
                move || {
                    compose_scalars(
                        vec![2, 2],
                        vec![1.0, 0.0, 0.0, 1.0],
                        &[(1, a.clone()), (2, a.clone()), (3, b.clone())],
                    )
                    .mul(&w)
                    .sum()
                },
                c,
            )
        }),
    ));
    checks
}

fn check_inner(
    leaves: &[Tensor<f64>],
    forward: impl Fn() -> Tensor<f64>,
    corruption: f64,
) -> f64 {
    check_gradients_with_corruption(leaves, &forward, corruption)
}

/// The per-operation part of the suite. `corrupt_fixture` deliberately
/// breaks one analytic gradient so failure detection itself is testable.
pub fn run_op_suite(corrupt_fixture: bool) -> GradCheckReport {
    let mut rng = SplitMix64::new(0xD1FF);
    let mut entries = Vec::new();
    for (name, check) in op_checks() {
        let corruption = if corrupt_fixture && name == "matmul" {
            1e-2
        } else {
            0.0
        };
        let worst = check(&mut rng, corruption);
        entries.push(CheckEntry {
            name: name.to_string(),
            worst_rel_err: worst,
            pass: worst < TOLERANCE,
        });
    }
    GradCheckReport { entries }
}

/// End-to-end check of the full network plus training loss against
/// finite differences over every parameter element. The smoothing
/// term's earlier-frame references are frozen at the baseline pass so
/// its stop-gradient convention stays finite-difference-consistent; the
/// stop-gradient itself is asserted directly in the loss tests.
pub fn run_model_check() -> CheckEntry {
    let mut rng = SplitMix64::new(0xC0DE);
    let (t_len, d_in, num_classes) = (6usize, 5usize, 3usize);
    let bb = BackboneConfig {
        d_hidden: 4,
        num_layers: 3,
    };
    let dt = DtgrmConfig {
        d_hidden: 4,
        num_levels: 3,
        num_stages: 2,
        ..DtgrmConfig::default()
    };
    let model = Model::<f64>::new(d_in, num_classes, &bb, &dt, &mut rng);
    let x = Tensor::from_vec(
        vec![t_len, d_in],
        (0..t_len * d_in).map(|_| rng.normal()).collect(),
    );
    let targets: Vec<usize> = (0..t_len).map(|_| rng.below(num_classes)).collect();
    // 40% of six frames rounds down to one exchanged pair
    let (x_ex, spec) = exchange_frames(&x, 40.0, &mut rng);
    assert_eq!(spec.num_exchanged(), 2);

    let w = LossWeights::default();
    let no_smooth = LossWeights { omega: 0.0, ..w };
    let base = model.forward(&x);
    let base_ex = model.forward(&x_ex);
    let frozen: Vec<Tensor<f64>> = base.predictions.iter().map(|y| y.detach()).collect();
    let frozen_ex: Vec<Tensor<f64>> = base_ex.predictions.iter().map(|y| y.detach()).collect();
    let leaves: Vec<Tensor<f64>> = model.params().iter().map(|p| p.tensor().clone()).collect();

    let forward = move || {
        let out = model.forward(&x);
        let out_ex = model.forward(&x_ex);
        let heads = model.exchange_scores(&out_ex.hiddens);
        let (mut total, _) = total_loss(
            &out.predictions,
            &out_ex.predictions,
            &heads,
            &targets,
            &spec.p,
            &no_smooth,
        );
        for (y, f) in out.predictions.iter().zip(&frozen) {
            total = total.add(&tmse_loss_ref(y, f, w.tmse_tau).scale(w.omega));
        }
        for (y, f) in out_ex.predictions.iter().zip(&frozen_ex) {
            total = total.add(&tmse_loss_ref(y, f, w.tmse_tau).scale(w.omega));
        }
        total
    };
    let worst = check_gradients(&leaves, &forward);
    CheckEntry {
        name: "composed model".to_string(),
        worst_rel_err: worst,
        pass: worst < TOLERANCE,
    }
}

/// Every operation plus the composed model.
pub fn run_full_suite(corrupt_fixture: bool) -> GradCheckReport {
    let mut report = run_op_suite(corrupt_fixture);
    report.entries.push(run_model_check());
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes() {
        let report = run_op_suite(false);
        for e in &report.entries {
            assert!(e.pass, "{}: worst rel err {}", e.name, e.worst_rel_err);
        }
    }

    #[test]
    fn corrupted_fixture_is_detected() {
        let report = run_op_suite(true);
        assert!(!report.pass());
        let bad = report.entries.iter().find(|e| e.name == "matmul").unwrap();
        assert!(!bad.pass);
    }

    #[test]
    fn composed_model_passes() {
        let entry = run_model_check();
        assert!(
            entry.pass,
            "composed model worst rel err {}",
            entry.worst_rel_err
        );
    }

    #[test]
    fn three_layer_net_gradient() {
        let mut rng = SplitMix64::new(5);
        let x = Tensor::from_vec(
            vec![4, 3],
            (0..12).map(|_| rng.uniform(-1.0, 1.0)).collect(),
        );
        let w1 = leaf(&mut rng, vec![3, 5], -0.7, 0.7);
        let w2 = leaf(&mut rng, vec![5, 4], -0.7, 0.7);
        let w3 = leaf(&mut rng, vec![4, 2], -0.7, 0.7);
        let leaves = [w1.clone(), w2.clone(), w3.clone()];
        let worst = check_gradients(&leaves, &move || {
            x.matmul(&w1)
                .relu()
                .matmul(&w2)
                .relu()
                .matmul(&w3)
                .softmax_rows()
                .mul(&x.slice_cols(0, 2))
                .sum()
        });
        assert!(worst < TOLERANCE, "worst {worst}");
    }
}
