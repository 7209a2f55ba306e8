//! Named finite-difference suites covering every differentiable op. Each
//! suite probes five seeded inputs; inputs for kinked ops (relu, clip, max)
//! are sampled away from their non-differentiable points.

use rand::{seq::SliceRandom, Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::LabelVolume;
use crate::error::{Error, Result};
use crate::gradcheck::{finite_diff_check, GradReport};
use crate::losses::{consistency_loss, cross_entropy, soft_dice_loss};
use crate::ops::{
    batch_norm, conv3d, conv_transpose3d, instance_norm, max_pool3d, softmax_channels, ConvSpec,
    NormMode,
};
use crate::tensor::{ReduceKind, Tensor};

pub const EPS: f32 = 1e-3;
pub const TOL: f32 = 1e-3;
const CASES: u64 = 5;

/// All public suite names, in report order.
pub const SUITE_NAMES: &[&str] = &[
    "add",
    "sub",
    "mul",
    "relu",
    "clip",
    "exp",
    "log",
    "reduce_sum",
    "reduce_mean",
    "reduce_max",
    "conv3d",
    "conv_transpose3d",
    "max_pool3d",
    "batch_norm",
    "instance_norm",
    "softmax",
    "cross_entropy",
    "soft_dice_loss",
    "consistency_loss",
];

/// Hidden fixture with a deliberately wrong backward; used to prove the
/// checker and the CLI failure path actually fail.
pub const CORRUPT_FIXTURE: &str = "_corrupt_fixture";

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::from_vec(data, shape).unwrap()
}

/// Values in ±[margin, 1]: nothing within `margin` of zero, so central
/// differences at eps << margin never cross the relu kink.
fn kink_safe(rng: &mut ChaCha8Rng, shape: &[usize], margin: f32) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n)
        .map(|_| {
            let v = rng.gen_range(margin..1.0);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::from_vec(data, shape).unwrap()
}

/// Pairwise-distinct values (gap 0.07 >> 2·eps) so max ties cannot flip
/// between the two sides of a central difference.
fn distinct(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    let data: Vec<f32> = perm.iter().map(|&p| p as f32 * 0.07 - 0.5 * n as f32 * 0.07).collect();
    Tensor::from_vec(data, shape).unwrap()
}

fn labels_for(rng: &mut ChaCha8Rng, shape: &[usize], classes: usize) -> LabelVolume {
    let n: usize = shape.iter().product();
    let data: Vec<u8> = (0..n).map(|_| rng.gen_range(0..classes as u8)).collect();
    LabelVolume::new(shape.to_vec(), data).unwrap()
}

/// Fixed random coefficients turn a tensor-valued op into an informative
/// scalar: sum(out ⊙ c).
fn weighted_sum(out: &Tensor, c: &Tensor) -> Result<Tensor> {
    Ok(out.mul(c)?.sum_all())
}

fn check_case(
    f: &dyn Fn(&[Tensor]) -> Result<Tensor>,
    inputs: &[Tensor],
) -> Result<GradReport> {
    finite_diff_check(f, inputs, EPS, TOL)
}

/// Run one named suite; returns one report per seeded case.
pub fn run_suite(name: &str) -> Result<Vec<GradReport>> {
    let mut reports = Vec::new();
    for case in 0..CASES {
        let mut rng = ChaCha8Rng::seed_from_u64(0xC0FFEE ^ (case * 7919));
        let shape = [1usize, 2, 3, 4, 3];
        let report = match name {
            "add" => {
                let a = uniform(&mut rng, &shape, -1.0, 1.0);
                let b = uniform(&mut rng, &shape, -1.0, 1.0);
                let c = uniform(&mut rng, &shape, -1.0, 1.0);
                check_case(&move |t: &[Tensor]| weighted_sum(&t[0].add(&t[1])?, &c), &[a, b])?
            }
            "sub" => {
                let a = uniform(&mut rng, &shape, -1.0, 1.0);
                let b = uniform(&mut rng, &shape, -1.0, 1.0);
                let c = uniform(&mut rng, &shape, -1.0, 1.0);
                check_case(&move |t: &[Tensor]| weighted_sum(&t[0].sub(&t[1])?, &c), &[a, b])?
            }
            "mul" => {
                let a = uniform(&mut rng, &shape, -1.0, 1.0);
                let b = uniform(&mut rng, &shape, -1.0, 1.0);
                let c = uniform(&mut rng, &shape, -1.0, 1.0);
                check_case(&move |t: &[Tensor]| weighted_sum(&t[0].mul(&t[1])?, &c), &[a, b])?
            }
            "relu" => {
                let a = kink_safe(&mut rng, &shape, 0.05);
                let c = uniform(&mut rng, &shape, -1.0, 1.0);
                check_case(&move |t: &[Tensor]| weighted_sum(&t[0].relu(), &c), &[a])?
            }
            "clip" => {
                // keep every coordinate at least 0.05 away from the clip
                // bounds ±0.6
                let raw = uniform(&mut rng, &shape, -1.2, 1.2);
                let data: Vec<f32> = raw
                    .to_vec()
                    .iter()
                    .map(|&v| {
                        let d = (v.abs() - 0.6).abs();
                        if d < 0.05 {
                            if v.abs() > 0.6 {
                                v + 0.1 * v.signum()
                            } else {
                                v - 0.1 * v.signum()
                            }
                        } else {
                            v
                        }
                    })
                    .collect();
                let a = Tensor::from_vec(data, &shape).unwrap();
                let c = uniform(&mut rng, &shape, -1.0, 1.0);
                check_case(&move |t: &[Tensor]| weighted_sum(&t[0].clip(-0.6, 0.6)?, &c), &[a])?
            }
            "exp" => {
                let a = uniform(&mut rng, &shape, -1.0, 1.0);
                let c = uniform(&mut rng, &shape, -1.0, 1.0);
                check_case(&move |t: &[Tensor]| weighted_sum(&t[0].exp(), &c), &[a])?
            }
            "log" => {
                let a = uniform(&mut rng, &shape, 0.5, 2.0);
                let c = uniform(&mut rng, &shape, -1.0, 1.0);
                check_case(&move |t: &[Tensor]| weighted_sum(&t[0].log()?, &c), &[a])?
            }
            "reduce_sum" => {
                let a = uniform(&mut rng, &shape, -1.0, 1.0);
                let c = uniform(&mut rng, &[1, 3, 4, 3], -1.0, 1.0);
                check_case(
                    &move |t: &[Tensor]| {
                        weighted_sum(&t[0].reduce(ReduceKind::Sum, Some(&[1]))?, &c)
                    },
                    &[a],
                )?
            }
            "reduce_mean" => {
                let a = uniform(&mut rng, &shape, -1.0, 1.0);
                let c = uniform(&mut rng, &[1, 2, 4, 3], -1.0, 1.0);
                check_case(
                    &move |t: &[Tensor]| {
                        weighted_sum(&t[0].reduce(ReduceKind::Mean, Some(&[2]))?, &c)
                    },
                    &[a],
                )?
            }
            "reduce_max" => {
                let a = distinct(&mut rng, &shape);
                let c = uniform(&mut rng, &[1, 2], -1.0, 1.0);
                check_case(
                    &move |t: &[Tensor]| {
                        weighted_sum(&t[0].reduce(ReduceKind::Max, Some(&[2, 3, 4]))?, &c)
                    },
                    &[a],
                )?
            }
            "conv3d" => {
                let x = uniform(&mut rng, &[1, 2, 4, 4, 4], -1.0, 1.0);
                let w = uniform(&mut rng, &[2, 2, 3, 3, 3], -0.5, 0.5);
                let b = uniform(&mut rng, &[2], -0.5, 0.5);
                // small coefficients keep the scalar's magnitude low so f32
                // central differences stay well inside tolerance
                let c = uniform(&mut rng, &[1, 2, 4, 4, 4], -0.2, 0.2);
                let spec = ConvSpec::unit_stride(2, 2, 3, 1);
                check_case(
                    &move |t: &[Tensor]| {
                        weighted_sum(&conv3d(&t[0], &t[1], Some(&t[2]), &spec)?, &c)
                    },
                    &[x, w, b],
                )?
            }
            "conv_transpose3d" => {
                let x = uniform(&mut rng, &[1, 2, 2, 2, 2], -1.0, 1.0);
                let w = uniform(&mut rng, &[2, 3, 2, 2, 2], -0.5, 0.5);
                let b = uniform(&mut rng, &[3], -0.5, 0.5);
                let c = uniform(&mut rng, &[1, 3, 4, 4, 4], -0.2, 0.2);
                check_case(
                    &move |t: &[Tensor]| {
                        weighted_sum(&conv_transpose3d(&t[0], &t[1], Some(&t[2]))?, &c)
                    },
                    &[x, w, b],
                )?
            }
            "max_pool3d" => {
                let x = distinct(&mut rng, &[1, 2, 4, 4, 4]);
                let c = uniform(&mut rng, &[1, 2, 2, 2, 2], -1.0, 1.0);
                check_case(&move |t: &[Tensor]| weighted_sum(&max_pool3d(&t[0])?, &c), &[x])?
            }
            "batch_norm" => {
                let x = uniform(&mut rng, &[2, 2, 3, 3, 3], -1.0, 1.0);
                let g = uniform(&mut rng, &[2], 0.5, 1.5);
                let bt = uniform(&mut rng, &[2], -0.5, 0.5);
                let c = uniform(&mut rng, &[2, 2, 3, 3, 3], -0.2, 0.2);
                check_case(
                    &move |t: &[Tensor]| {
                        weighted_sum(
                            &batch_norm(&t[0], &t[1], &t[2], 1e-5, 0.0, NormMode::Train, None)?,
                            &c,
                        )
                    },
                    &[x, g, bt],
                )?
            }
            "instance_norm" => {
                let x = uniform(&mut rng, &[2, 2, 3, 3, 3], -1.0, 1.0);
                let g = uniform(&mut rng, &[2], 0.5, 1.5);
                let bt = uniform(&mut rng, &[2], -0.5, 0.5);
                let c = uniform(&mut rng, &[2, 2, 3, 3, 3], -0.2, 0.2);
                check_case(
                    &move |t: &[Tensor]| {
                        weighted_sum(&instance_norm(&t[0], &t[1], &t[2], 1e-5)?, &c)
                    },
                    &[x, g, bt],
                )?
            }
            "softmax" => {
                let x = uniform(&mut rng, &[1, 3, 2, 2, 2], -2.0, 2.0);
                let c = uniform(&mut rng, &[1, 3, 2, 2, 2], -1.0, 1.0);
                check_case(&move |t: &[Tensor]| weighted_sum(&softmax_channels(&t[0])?, &c), &[x])?
            }
            "cross_entropy" => {
                let x = uniform(&mut rng, &[1, 3, 2, 2, 2], -2.0, 2.0);
                let l = labels_for(&mut rng, &[1, 2, 2, 2], 3);
                check_case(&move |t: &[Tensor]| cross_entropy(&t[0], &l), &[x])?
            }
            "soft_dice_loss" => {
                let x = uniform(&mut rng, &[1, 3, 2, 2, 2], -2.0, 2.0);
                let l = labels_for(&mut rng, &[1, 2, 2, 2], 3);
                check_case(&move |t: &[Tensor]| soft_dice_loss(&t[0], &l, 1e-5), &[x])?
            }
            "consistency_loss" => {
                let x = uniform(&mut rng, &[1, 2, 3, 3, 3], -1.0, 1.0);
                let target = uniform(&mut rng, &[1, 2, 3, 3, 3], -1.0, 1.0);
                check_case(&move |t: &[Tensor]| consistency_loss(&t[0], &target), &[x])?
            }
            CORRUPT_FIXTURE => {
                // value = sum(x) but the recorded graph doubles the gradient
                let x = uniform(&mut rng, &[2, 3], -1.0, 1.0);
                check_case(
                    &|t: &[Tensor]| Ok(t[0].add(&t[0].sub(&t[0].detach())?)?.sum_all()),
                    &[x],
                )?
            }
            other => return Err(Error::Contract(format!("unknown gradcheck suite '{other}'"))),
        };
        reports.push(report);
    }
    Ok(reports)
}

/// One line per suite: (name, every case passed, worst relative error).
pub fn run_scope(scope: &str) -> Result<Vec<(String, bool, f32)>> {
    let names: Vec<&str> = if scope == "all" {
        SUITE_NAMES.to_vec()
    } else {
        vec![scope]
    };
    let mut out = Vec::new();
    for name in names {
        let reports = run_suite(name)?;
        let pass = reports.iter().all(|r| r.pass);
        let worst = reports.iter().map(|r| r.worst_rel()).fold(0.0, f32::max);
        out.push((name.to_string(), pass, worst));
    }
    Ok(out)
}
