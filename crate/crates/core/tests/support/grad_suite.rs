//! Randomized finite-difference checks for every differentiable op and
//! the distillation losses.

use aird::autograd::{Graph, ReduceOp, Var};
use aird::distill::{
    critic_rows, ild_loss, rld_loss, PairRows, Reduction, RelationHeads, RelationNet, RldConfig,
};
use aird::gradcheck::{check, DEFAULT_STEP};
use aird::nn::functional::{conv2d, cosine_rows, cross_entropy, linear};
use aird::nn::margin::margin_softmax_logits;
use aird::nn::Bound;
use aird::rng::Rng;
use aird::train::vanilla_kd_loss;
use aird::{Result, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};

pub const TRIALS: usize = 100;
pub const TOL: f64 = 1e-4;
/// Relation networks and the critic are held to a tighter bound.
pub const TIGHT_TOL: f64 = 1e-6;

pub struct Case {
    pub name: &'static str,
    pub tol: f64,
    trial: fn(&mut Rng) -> Result<f64>,
}

pub struct Outcome {
    pub name: &'static str,
    pub tol: f64,
    pub trials: usize,
    pub worst: f64,
}

impl Outcome {
    pub fn passed(&self) -> bool {
        self.trials >= TRIALS && self.worst < self.tol
    }
}

impl Case {
    pub fn run(&self, seed: u64) -> Outcome {
        let mut rng = Rng::seed_from_u64(seed);
        let mut worst = 0.0f64;
        for t in 0..TRIALS {
            let err =
                (self.trial)(&mut rng).unwrap_or_else(|e| panic!("{} trial {t}: {e}", self.name));
            worst = worst.max(err);
        }
        Outcome {
            name: self.name,
            tol: self.tol,
            trials: TRIALS,
            worst,
        }
    }
}

fn uniform(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(lo..hi)).collect(),
    )
    .unwrap()
}

fn normal(rng: &mut Rng, shape: &[usize]) -> Tensor {
    uniform(rng, shape, -1.0, 1.0)
}

/// Values bounded away from zero, for kinks at the origin.
fn off_zero(rng: &mut Rng, shape: &[usize], gap: f64) -> Tensor {
    let mut t = normal(rng, shape);
    for v in t.data_mut() {
        if v.abs() < gap {
            *v = if *v < 0.0 { -gap - v.abs() } else { gap + *v };
        }
    }
    t
}

/// Distinct values separated by at least 0.05, for max-type ops.
fn spread(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut ranks: Vec<usize> = (0..n).collect();
    ranks.shuffle(rng);
    let data = ranks
        .into_iter()
        .map(|r| r as f64 * 0.1 - n as f64 * 0.05 + rng.random_range(-0.02..0.02))
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn labels(rng: &mut Rng, n: usize, classes: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..classes)).collect()
}

/// Scalarizes `v` as `Σ v ⊙ w` so every output entry gets its own weight.
fn project(g: &mut Graph, v: Var, w: &Tensor) -> Result<Var> {
    let wv = g.constant(w.clone());
    let p = g.mul(v, wv)?;
    Ok(g.sum_all(p))
}

fn grad<F>(inputs: &[Tensor], f: F) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    Ok(check(inputs, DEFAULT_STEP, f)?.max_rel_err)
}

/// Checks `op` on `inputs` through a random projection of its output.
fn projected<F>(inputs: &[Tensor], rng: &mut Rng, op: F) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = op(&mut g, &vars)?;
    let w = normal(rng, g.value(out).shape());
    grad(inputs, |g, v| {
        let out = op(g, v)?;
        project(g, out, &w)
    })
}

fn min_abs(v: &[f64]) -> f64 {
    v.iter().fold(f64::INFINITY, |m, x| m.min(x.abs()))
}

/// Pre-activations `concat(a, b)·W + b` of a relation network.
fn preacts(a: &Tensor, b: &Tensor, w: &Tensor, bias: &Tensor) -> Vec<f64> {
    let k = bias.len();
    let mut out = Vec::new();
    for r in 0..a.rows() {
        let x: Vec<f64> = a.row(r).iter().chain(b.row(r)).copied().collect();
        for c in 0..k {
            out.push(
                x.iter()
                    .enumerate()
                    .map(|(i, v)| v * w.data()[i * k + c])
                    .sum::<f64>()
                    + bias.data()[c],
            );
        }
    }
    out
}

fn relation_bound(net: &RelationNet, w: Var, b: Var) -> Bound {
    Bound::new(vec![(net.weight_name(), w), (net.bias_name(), b)])
}

fn loose(name: &'static str, trial: fn(&mut Rng) -> Result<f64>) -> Case {
    Case {
        name,
        tol: TOL,
        trial,
    }
}

fn tight(name: &'static str, trial: fn(&mut Rng) -> Result<f64>) -> Case {
    Case {
        name,
        tol: TIGHT_TOL,
        trial,
    }
}

pub fn cases() -> Vec<Case> {
    vec![
        loose("matmul", |rng| {
            let (a, b) = (normal(rng, &[3, 4]), normal(rng, &[4, 2]));
            projected(&[a, b], rng, |g, v| g.matmul(v[0], v[1]))
        }),
        loose("transpose", |rng| {
            projected(&[normal(rng, &[3, 5])], rng, |g, v| g.transpose(v[0]))
        }),
        loose("add_broadcast", |rng| {
            let (a, b) = (normal(rng, &[3, 4]), normal(rng, &[4]));
            projected(&[a, b], rng, |g, v| g.add(v[0], v[1]))
        }),
        loose("sub_broadcast", |rng| {
            let (a, b) = (normal(rng, &[3, 1]), normal(rng, &[3, 4]));
            projected(&[a, b], rng, |g, v| g.sub(v[0], v[1]))
        }),
        loose("mul", |rng| {
            let (a, b) = (normal(rng, &[2, 3]), normal(rng, &[2, 3]));
            projected(&[a, b], rng, |g, v| g.mul(v[0], v[1]))
        }),
        loose("relu", |rng| {
            projected(
                &[off_zero(rng, &[4, 4], 1e-3)],
                rng,
                |g, v| Ok(g.relu(v[0])),
            )
        }),
        loose("exp", |rng| {
            projected(&[normal(rng, &[3, 3])], rng, |g, v| Ok(g.exp(v[0])))
        }),
        loose("log", |rng| {
            projected(&[uniform(rng, &[3, 3], 0.2, 2.0)], rng, |g, v| g.log(v[0]))
        }),
        loose("sigmoid", |rng| {
            projected(&[normal(rng, &[3, 3])], rng, |g, v| Ok(g.sigmoid(v[0])))
        }),
        loose("neg_scale_shift", |rng| {
            projected(&[normal(rng, &[3, 3])], rng, |g, v| {
                let a = g.neg(v[0]);
                let a = g.scale(a, 2.5);
                Ok(g.add_scalar(a, 0.7))
            })
        }),
        loose("clamp", |rng| {
            let mut x = uniform(rng, &[4, 4], -1.0, 1.0);
            for v in x.data_mut() {
                for bound in [-0.5, 0.5] {
                    if (*v - bound).abs() < 1e-3 {
                        *v = bound + 2e-3;
                    }
                }
            }
            projected(&[x], rng, |g, v| Ok(g.clamp(v[0], -0.5, 0.5)))
        }),
        loose("softmax", |rng| {
            projected(&[normal(rng, &[3, 5])], rng, |g, v| g.softmax(v[0]))
        }),
        loose("log_softmax", |rng| {
            projected(&[normal(rng, &[3, 5])], rng, |g, v| g.log_softmax(v[0]))
        }),
        loose("logsumexp_masked", |rng| {
            let mut mask: Vec<bool> = (0..15).map(|_| rng.random_bool(0.7)).collect();
            for r in 0..3 {
                mask[r * 5] = true;
            }
            projected(&[normal(rng, &[3, 5])], rng, move |g, v| {
                g.logsumexp_rows(v[0], Some(mask.clone()))
            })
        }),
        loose("reduce_sum", |rng| {
            projected(&[normal(rng, &[2, 3, 4])], rng, |g, v| {
                g.reduce(ReduceOp::Sum, v[0], 1)
            })
        }),
        loose("reduce_mean", |rng| {
            projected(&[normal(rng, &[2, 3, 4])], rng, |g, v| {
                g.reduce(ReduceOp::Mean, v[0], 2)
            })
        }),
        loose("reduce_max", |rng| {
            projected(&[spread(rng, &[3, 4])], rng, |g, v| {
                g.reduce(ReduceOp::Max, v[0], 1)
            })
        }),
        loose("sum_mean_all", |rng| {
            grad(&[normal(rng, &[3, 4])], |g, v| {
                let s = g.sum_all(v[0]);
                let m = g.mean_all(v[0]);
                let m = g.scale(m, 3.0);
                g.add(s, m)
            })
        }),
        loose("reshape", |rng| {
            projected(&[normal(rng, &[2, 6])], rng, |g, v| {
                g.reshape(v[0], &[3, 4])
            })
        }),
        loose("im2col", |rng| {
            projected(&[normal(rng, &[2, 2, 4, 4])], rng, |g, v| {
                g.im2col(v[0], 3, 1, 1)
            })
        }),
        loose("rows_to_nchw", |rng| {
            projected(&[normal(rng, &[2 * 2 * 3, 3])], rng, |g, v| {
                g.rows_to_nchw(v[0], 2, 2, 3)
            })
        }),
        loose("max_pool2d", |rng| {
            projected(&[spread(rng, &[2, 2, 4, 4])], rng, |g, v| {
                g.max_pool2d(v[0], 2)
            })
        }),
        loose("conv2d", |rng| {
            let (x, w) = (normal(rng, &[2, 2, 5, 5]), normal(rng, &[3, 2, 3, 3]));
            projected(&[x, w], rng, |g, v| conv2d(g, v[0], v[1], 2, 1))
        }),
        loose("linear", |rng| {
            let (x, w, b) = (
                normal(rng, &[3, 4]),
                normal(rng, &[4, 2]),
                normal(rng, &[2]),
            );
            projected(&[x, w, b], rng, |g, v| linear(g, v[0], v[1], Some(v[2])))
        }),
        loose("batch_norm_train", |rng| {
            let x = normal(rng, &[4, 3, 2, 2]);
            let (ga, be) = (uniform(rng, &[3], 0.5, 1.5), normal(rng, &[3]));
            projected(&[x, ga, be], rng, |g, v| {
                Ok(g.batch_norm(v[0], v[1], v[2], None, 1e-5)?.0)
            })
        }),
        loose("batch_norm_eval", |rng| {
            let x = normal(rng, &[4, 3]);
            let (ga, be) = (uniform(rng, &[3], 0.5, 1.5), normal(rng, &[3]));
            let mean: Vec<f64> = (0..3).map(|_| rng.random_range(-0.5..0.5)).collect();
            let var: Vec<f64> = (0..3).map(|_| rng.random_range(0.5..2.0)).collect();
            projected(&[x, ga, be], rng, move |g, v| {
                Ok(g.batch_norm(v[0], v[1], v[2], Some((&mean, &var)), 1e-5)?.0)
            })
        }),
        loose("pick", |rng| {
            let idx = labels(rng, 4, 3);
            projected(&[normal(rng, &[4, 3])], rng, move |g, v| g.pick(v[0], &idx))
        }),
        loose("gather_rows", |rng| {
            let idx = labels(rng, 6, 4);
            projected(&[normal(rng, &[4, 3])], rng, move |g, v| {
                g.gather_rows(v[0], &idx)
            })
        }),
        loose("concat_last", |rng| {
            let (a, b) = (normal(rng, &[3, 2]), normal(rng, &[3, 4]));
            projected(&[a, b], rng, |g, v| g.concat_last(v[0], v[1]))
        }),
        loose("slice_rows", |rng| {
            projected(&[normal(rng, &[5, 3])], rng, |g, v| {
                g.slice_rows(v[0], 1, 4)
            })
        }),
        loose("normalize_rows", |rng| {
            projected(&[off_zero(rng, &[3, 4], 0.1)], rng, |g, v| {
                g.normalize_rows(v[0], true)
            })
        }),
        loose("cosine_rows", |rng| {
            let (a, b) = (off_zero(rng, &[3, 4], 0.1), off_zero(rng, &[3, 4], 0.1));
            projected(&[a, b], rng, |g, v| cosine_rows(g, v[0], v[1]))
        }),
        loose("arc_margin", |rng| {
            let y = labels(rng, 4, 5);
            let scale = rng.random_range(4.0..16.0);
            projected(&[uniform(rng, &[4, 5], -0.9, 0.9)], rng, move |g, v| {
                g.arc_margin(v[0], &y, 0.35, scale)
            })
        }),
        loose("margin_softmax_ce", |rng| {
            let y = labels(rng, 4, 3);
            let (f, w) = (off_zero(rng, &[4, 5], 0.1), off_zero(rng, &[3, 5], 0.1));
            grad(&[f, w], move |g, v| {
                let logits = margin_softmax_logits(g, v[0], v[1], &y, 0.35, 8.0)?;
                cross_entropy(g, logits, &y)
            })
        }),
        tight("relation_forward", |rng| loop {
            let net = RelationNet::new("rel_ts", 3, 4);
            let (fa, fb) = (normal(rng, &[3, 3]), normal(rng, &[3, 3]));
            let (w, b) = (normal(rng, &[6, 4]), normal(rng, &[4]));
            if min_abs(&preacts(&fa, &fb, &w, &b)) < 1e-3 {
                continue;
            }
            let proj = normal(rng, &[3, 4]);
            return grad(&[fa, fb, w, b], move |g, v| {
                let r = net.forward(g, &relation_bound(&net, v[2], v[3]), v[0], v[1])?;
                project(g, r, &proj)
            });
        }),
        tight("relation_forward_indexed", |rng| loop {
            let net = RelationNet::new("rel_t", 3, 4);
            let (fa, fb) = (normal(rng, &[4, 3]), normal(rng, &[5, 3]));
            let (w, b) = (normal(rng, &[6, 4]), normal(rng, &[4]));
            let ia = labels(rng, 6, 4);
            let ib = labels(rng, 6, 5);
            if min_abs(&preacts(&fa.select(&ia)?, &fb.select(&ib)?, &w, &b)) < 1e-3 {
                continue;
            }
            let proj = normal(rng, &[6, 4]);
            return grad(&[fa, fb, w, b], move |g, v| {
                let bound = relation_bound(&net, v[2], v[3]);
                let r = net.forward_indexed(g, &bound, v[0], v[1], &ia, &ib)?;
                project(g, r, &proj)
            });
        }),
        tight("critic", |rng| {
            let (rt, rts) = (
                uniform(rng, &[4, 5], 0.05, 1.0),
                uniform(rng, &[4, 5], 0.05, 1.0),
            );
            projected(&[rt, rts], rng, |g, v| critic_rows(g, v[0], v[1], 0.1, 0.0))
        }),
        tight("critic_offset", |rng| {
            let (rt, rts) = (uniform(rng, &[4, 5], 0.05, 1.0), normal(rng, &[4, 5]));
            let (tau, offset) = (rng.random_range(0.1..1.0), rng.random_range(0.0..0.9));
            projected(&[rt, rts], rng, move |g, v| {
                critic_rows(g, v[0], v[1], tau, offset)
            })
        }),
        loose("ild_loss", |rng| {
            let y = labels(rng, 3, 4);
            let t = uniform(rng, &[3, 4], -3.0, 3.0);
            let temp = rng.random_range(0.5..4.0);
            grad(&[uniform(rng, &[3, 4], -3.0, 3.0)], move |g, v| {
                ild_loss(g, &t, v[0], &y, temp)
            })
        }),
        loose("vanilla_kd_loss", |rng| {
            let t = uniform(rng, &[3, 4], -3.0, 3.0);
            let temp = rng.random_range(0.5..4.0);
            grad(&[uniform(rng, &[3, 4], -3.0, 3.0)], move |g, v| {
                vanilla_kd_loss(g, &t, v[0], temp)
            })
        }),
        loose("rld_loss", rld_trial),
    ]
}

fn rld_trial(rng: &mut Rng) -> Result<f64> {
    let (d, k, n) = (3, 4, 5);
    loop {
        let heads = RelationHeads::init(d, k, rng)?;
        let teacher = normal(rng, &[n, d]);
        let student = normal(rng, &[n, d]);
        let (mut pos, mut neg) = (PairRows::default(), PairRows::default());
        for _ in 0..4 {
            let (i, j) = (rng.random_range(0..n), rng.random_range(0..n));
            pos.push(i, j, j);
            let (i, jt, js) = (
                rng.random_range(0..n),
                rng.random_range(0..n),
                rng.random_range(0..n),
            );
            neg.push(i, jt, js);
        }
        let names: Vec<String> = heads
            .params
            .iter()
            .map(|(name, _)| name.to_string())
            .collect();
        let params: Vec<Tensor> = heads.params.iter().map(|(_, t)| t.clone()).collect();
        let p = |name: &str| heads.params.get(name).unwrap();
        let mut near_kink = false;
        for rows in [&pos, &neg] {
            let ti = teacher.select(&rows.i)?;
            let tj = teacher.select(&rows.j_teacher)?;
            let sj = student.select(&rows.j_student)?;
            let wt = heads.teacher.weight_name();
            let bt = heads.teacher.bias_name();
            let wc = heads.cross.weight_name();
            let bc = heads.cross.bias_name();
            near_kink |= min_abs(&preacts(&ti, &tj, p(&wt), p(&bt))) < 1e-3;
            near_kink |= min_abs(&preacts(&ti, &sj, p(&wc), p(&bc))) < 1e-3;
        }
        if near_kink {
            continue;
        }
        let cfg = RldConfig {
            tau: rng.random_range(0.1..0.5),
            neg_weight: rng.random_range(0.5..3.0),
            reduction: if rng.random_bool(0.5) {
                Reduction::Mean
            } else {
                Reduction::Sum
            },
            offset: rng.random_range(0.0..0.6),
        };
        let mut inputs = vec![student];
        inputs.extend(params);
        return grad(&inputs, move |g, v| {
            let bound = Bound::new(names.iter().cloned().zip(v[1..].iter().copied()).collect());
            Ok(rld_loss(g, &heads, &bound, &teacher, v[0], &pos, &neg, &cfg)?.loss)
        });
    }
}
