//! Independent oracles shared by the integration tests and the acceptance
//! target. Nothing here calls the code it checks except through the public
//! operation under test.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use steeradv_core::attack::{box_preimage, record_objective, Objective};
use steeradv_core::data::{Direction, Sample};
use steeradv_core::model::{Head, Model};
use steeradv_core::tensor::{finite_difference_check, FdReport};
use steeradv_core::{Graph, Mode, NodeId, Padding, Result, Tensor};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Direct seven-loop convolution over an `N×H×W×C` batch with `K×K×C×F`
/// filters. Padding follows the usual "same" rule: total padding
/// `max((out−1)·s + k − in, 0)`, the smaller half on the leading side.
pub fn naive_conv2d(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, padding: Padding) -> Tensor<f64> {
    let [n, h, wd, c] = x.shape().try_into().unwrap();
    let [k, _, _, f] = w.shape().try_into().unwrap();
    let (oh, ow, pt, pl) = match padding {
        Padding::Valid => ((h - k) / stride + 1, (wd - k) / stride + 1, 0, 0),
        Padding::Same => {
            let oh = h.div_ceil(stride);
            let ow = wd.div_ceil(stride);
            let ph = ((oh - 1) * stride + k).saturating_sub(h);
            let pw = ((ow - 1) * stride + k).saturating_sub(wd);
            (oh, ow, ph / 2, pw / 2)
        }
    };
    let (xd, wdat) = (x.data(), w.data());
    let mut out = vec![0.0; n * oh * ow * f];
    for b in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                for fo in 0..f {
                    let mut acc = 0.0;
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * stride + ky) as isize - pt as isize;
                            let ix = (ox * stride + kx) as isize - pl as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                continue;
                            }
                            for ci in 0..c {
                                let xv = xd[((b * h + iy as usize) * wd + ix as usize) * c + ci];
                                let wv = wdat[((ky * k + kx) * c + ci) * f + fo];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((b * oh + oy) * ow + ox) * f + fo] = acc;
                }
            }
        }
    }
    Tensor::new(&[n, oh, ow, f], out).unwrap()
}

/// Reduces any node to a scalar through a fixed, non-uniform linear map so
/// that every output coordinate contributes a distinct weight.
pub fn project(g: &mut Graph<f64>, y: NodeId) -> Result<NodeId> {
    let len = g.value(y).len();
    let flat = g.reshape(y, &[len])?;
    let weights = g.constant(Tensor::from_fn(&[len, 1], |i| (1.0 + i as f64 * 0.7).sin()));
    let bias = g.constant(Tensor::zeros(&[1]));
    let z = g.dense(flat, weights, bias)?;
    g.sum(z)
}

#[derive(Debug, Clone)]
pub struct CaseOutcome {
    pub name: &'static str,
    pub instances: usize,
    pub failures: Vec<String>,
    pub worst: f64,
    pub checked: usize,
    pub excluded: usize,
}

impl CaseOutcome {
    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.checked > 0
    }
}

type Check = Box<dyn Fn(&mut ChaCha8Rng) -> Result<FdReport>>;

fn fd(point: &Tensor<f64>, build: impl FnMut(&mut Graph<f64>, NodeId) -> Result<NodeId>) -> Result<FdReport> {
    finite_difference_check(point, FD_STEP, FD_TOLERANCE, None, build)
}

fn random_conv_case(rng: &mut ChaCha8Rng) -> (Tensor<f64>, Tensor<f64>, usize, Padding) {
    let k = rng.random_range(1..=3);
    let stride = rng.random_range(1..=2);
    let padding = if rng.random_bool(0.5) { Padding::Same } else { Padding::Valid };
    let (h, w) = (rng.random_range(k..=5), rng.random_range(k..=5));
    let (c, f) = (rng.random_range(1..=3), rng.random_range(1..=3));
    let n = rng.random_range(1..=2);
    let x = random_tensor(rng, &[n, h, w, c], -1.0, 1.0);
    let filters = random_tensor(rng, &[k, k, c, f], -1.0, 1.0);
    (x, filters, stride, padding)
}

/// Builds a small classification or regression Epoch network in double
/// precision for the attack-objective checks.
pub fn tiny_model(head: Head, seed: u64) -> Model<f64> {
    Model::<f64>::epoch(head, 8, 8, seed).unwrap()
}

fn objective_case(rng: &mut ChaCha8Rng, head: Head) -> Result<FdReport> {
    let model = tiny_model(head, rng.random());
    let x = random_tensor(rng, &[8, 8, 3], 0.05, 0.95);
    // start away from σ = 0, where the norm itself has a kink
    let w0 = box_preimage(&x);
    let w = Tensor::from_fn(w0.shape(), |i| w0.data()[i] + rng.random_range(-0.3..0.3));
    let c = rng.random_range(0.1..10.0);
    let objective = match head {
        Head::Classification => {
            let z = model.logits(&x)?;
            let lowest = (0..3).min_by(|&a, &b| z.data()[a].total_cmp(&z.data()[b])).unwrap();
            Objective::Targeted {
                target: Direction::from_index(lowest),
            }
        }
        Head::Regression => Objective::Residual {
            y: rng.random_range(-0.5..0.5),
        },
    };
    fd(&w, |g, var| Ok(record_objective(g, &model, var, &x, objective, c)?.total))
}

fn cases() -> Vec<(&'static str, Check)> {
    let mut v: Vec<(&'static str, Check)> = Vec::new();
    v.push((
        "conv2d/input",
        Box::new(|r| {
            let (x, w, s, p) = random_conv_case(r);
            fd(&x, |g, var| {
                let wn = g.constant(w.clone());
                let y = g.conv2d(var, wn, s, p)?;
                project(g, y)
            })
        }),
    ));
    v.push((
        "conv2d/filters",
        Box::new(|r| {
            let (x, w, s, p) = random_conv_case(r);
            fd(&w, |g, var| {
                let xn = g.constant(x.clone());
                let y = g.conv2d(xn, var, s, p)?;
                project(g, y)
            })
        }),
    ));
    v.push((
        "bias_add",
        Box::new(|r| {
            let c = r.random_range(1..=4);
            let x = random_tensor(r, &[2, 3, 3, c], -1.0, 1.0);
            let b = random_tensor(r, &[c], -1.0, 1.0);
            let a = fd(&x, |g, var| {
                let bn = g.constant(b.clone());
                let y = g.bias_add(var, bn)?;
                project(g, y)
            })?;
            let bias = fd(&b, |g, var| {
                let xn = g.constant(x.clone());
                let y = g.bias_add(xn, var)?;
                project(g, y)
            })?;
            Ok(worse(a, bias))
        }),
    ));
    v.push((
        "maxpool2x2",
        Box::new(|r| {
            let (h, w) = (2 * r.random_range(1..=3), 2 * r.random_range(1..=3));
            let x = random_tensor(r, &[2, h, w, 2], -1.0, 1.0);
            fd(&x, |g, var| {
                let y = g.maxpool2x2(var)?;
                project(g, y)
            })
        }),
    ));
    v.push((
        "relu",
        Box::new(|r| {
            let x = random_tensor(r, &[3, 7], -1.0, 1.0);
            fd(&x, |g, var| {
                let y = g.relu(var)?;
                project(g, y)
            })
        }),
    ));
    v.push((
        "dense",
        Box::new(|r| {
            let (rows, n, m) = (r.random_range(1..=3), r.random_range(1..=6), r.random_range(1..=5));
            let x = random_tensor(r, &[rows, n], -1.0, 1.0);
            let w = random_tensor(r, &[n, m], -1.0, 1.0);
            let b = random_tensor(r, &[m], -1.0, 1.0);
            let dx = fd(&x, |g, var| {
                let (wn, bn) = (g.constant(w.clone()), g.constant(b.clone()));
                let y = g.dense(var, wn, bn)?;
                project(g, y)
            })?;
            let dw = fd(&w, |g, var| {
                let (xn, bn) = (g.constant(x.clone()), g.constant(b.clone()));
                let y = g.dense(xn, var, bn)?;
                project(g, y)
            })?;
            let db = fd(&b, |g, var| {
                let (xn, wn) = (g.constant(x.clone()), g.constant(w.clone()));
                let y = g.dense(xn, wn, var)?;
                project(g, y)
            })?;
            Ok(worse(worse(dx, dw), db))
        }),
    ));
    v.push((
        "softmax",
        Box::new(|r| {
            let x = random_tensor(r, &[2, 3], -3.0, 3.0);
            fd(&x, |g, var| {
                let y = g.softmax(var)?;
                project(g, y)
            })
        }),
    ));
    v.push((
        "batch_norm/train",
        Box::new(|r| {
            let c = r.random_range(1..=3);
            let x = random_tensor(r, &[4, 2, 2, c], -1.0, 1.0);
            let gamma = random_tensor(r, &[c], 0.5, 1.5);
            let beta = random_tensor(r, &[c], -0.5, 0.5);
            let (mean, var) = (Tensor::zeros(&[c]), Tensor::full(&[c], 1.0));
            let dx = fd(&x, |g, v| {
                let (gn, bn) = (g.constant(gamma.clone()), g.constant(beta.clone()));
                let y = g.batch_norm(v, gn, bn, &mean, &var, Mode::Train, 1e-5)?;
                project(g, y)
            })?;
            let dg = fd(&gamma, |g, v| {
                let (xn, bn) = (g.constant(x.clone()), g.constant(beta.clone()));
                let y = g.batch_norm(xn, v, bn, &mean, &var, Mode::Train, 1e-5)?;
                project(g, y)
            })?;
            let db = fd(&beta, |g, v| {
                let (xn, gn) = (g.constant(x.clone()), g.constant(gamma.clone()));
                let y = g.batch_norm(xn, gn, v, &mean, &var, Mode::Train, 1e-5)?;
                project(g, y)
            })?;
            Ok(worse(worse(dx, dg), db))
        }),
    ));
    v.push((
        "batch_norm/infer",
        Box::new(|r| {
            let x = random_tensor(r, &[3, 2], -1.0, 1.0);
            let (mean, var) = (random_tensor(r, &[2], -0.2, 0.2), random_tensor(r, &[2], 0.5, 2.0));
            fd(&x, |g, v| {
                let gn = g.constant(Tensor::full(&[2], 1.3));
                let bn = g.constant(Tensor::full(&[2], 0.1));
                let y = g.batch_norm(v, gn, bn, &mean, &var, Mode::Infer, 1e-5)?;
                project(g, y)
            })
        }),
    ));
    v.push((
        "dropout/train",
        Box::new(|r| {
            let x = random_tensor(r, &[4, 5], -1.0, 1.0);
            let seed = r.random();
            fd(&x, |g, v| {
                let y = g.dropout(v, 0.4, Mode::Train, seed)?;
                project(g, y)
            })
        }),
    ));
    v.push((
        "softmax_cross_entropy",
        Box::new(|r| {
            let rows = r.random_range(1..=4);
            let x = random_tensor(r, &[rows, 3], -3.0, 3.0);
            let labels: Vec<usize> = (0..rows).map(|_| r.random_range(0..3)).collect();
            fd(&x, |g, v| g.softmax_cross_entropy(v, &labels))
        }),
    ));
    v.push((
        "mean_squared_error",
        Box::new(|r| {
            let x = random_tensor(r, &[4, 1], -1.0, 1.0);
            let t: Vec<f64> = (0..4).map(|_| r.random_range(-1.0..1.0)).collect();
            fd(&x, |g, v| g.mean_squared_error(v, &t))
        }),
    ));
    v.push((
        "hinge_logit",
        Box::new(|r| {
            let x = random_tensor(r, &[3], -2.0, 2.0);
            let target = r.random_range(0..3);
            fd(&x, |g, v| g.hinge_logit(v, target))
        }),
    ));
    v.push((
        "tanh_box",
        Box::new(|r| {
            let x = random_tensor(r, &[2, 3, 3], -2.0, 2.0);
            fd(&x, |g, v| {
                let y = g.tanh_box(v)?;
                project(g, y)
            })
        }),
    ));
    v.push((
        "l2_norm",
        Box::new(|r| {
            let x = random_tensor(r, &[2, 5], -1.0, 1.0);
            fd(&x, |g, v| g.l2_norm(v))
        }),
    ));
    v.push((
        "add/sub/scale/flatten",
        Box::new(|r| {
            let x = random_tensor(r, &[2, 2, 2, 3], -1.0, 1.0);
            let other = random_tensor(r, &[2, 2, 2, 3], -1.0, 1.0);
            let k = r.random_range(-2.0..2.0);
            fd(&x, |g, v| {
                let o = g.constant(other.clone());
                let s = g.sub(v, o)?;
                let t = g.scale(s, k)?;
                let a = g.add(t, v)?;
                let f = g.flatten(a)?;
                project(g, f)
            })
        }),
    ));
    v.push(("attack/targeted", Box::new(|r| objective_case(r, Head::Classification))));
    v.push(("attack/residual", Box::new(|r| objective_case(r, Head::Regression))));
    v
}

/// Keeps whichever report has the larger error, merging the coordinate tallies.
fn worse(mut a: FdReport, b: FdReport) -> FdReport {
    a.coordinates.extend(b.coordinates);
    a.max_rel_error = a.max_rel_error.max(b.max_rel_error);
    a
}

/// Runs every gradient case over `instances` random draws.
pub fn gradient_suite(instances: usize, seed: u64) -> Vec<CaseOutcome> {
    cases()
        .into_iter()
        .enumerate()
        .map(|(i, (name, check))| {
            let mut r = rng(seed ^ (i as u64 * 7919));
            let mut out = CaseOutcome {
                name,
                instances,
                failures: Vec::new(),
                worst: 0.0,
                checked: 0,
                excluded: 0,
            };
            for inst in 0..instances {
                match check(&mut r) {
                    Ok(report) => {
                        out.worst = out.worst.max(report.max_rel_error);
                        out.checked += report.checked();
                        out.excluded += report.excluded();
                        if !report.passed() {
                            out.failures.push(format!("instance {inst}: worst {:?}", report.worst()));
                        }
                    }
                    Err(e) => out.failures.push(format!("instance {inst}: {e}")),
                }
            }
            out
        })
        .collect()
}

/// Random conv shapes up to 16×16×8 input and 8 filters; returns the largest
/// relative deviation `|a − b| / max(|b|, 1e-8)` from the naive oracle.
pub fn conv_oracle_sweep(shapes: usize, seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let mut worst = 0f64;
    for _ in 0..shapes {
        let k = r.random_range(1..=5);
        let (h, w) = (r.random_range(k..=16), r.random_range(k..=16));
        let c = r.random_range(1..=8);
        let f = r.random_range(1..=8);
        let n = r.random_range(1..=2);
        let stride = r.random_range(1..=3);
        let padding = if r.random_bool(0.5) { Padding::Same } else { Padding::Valid };
        let x = random_tensor(&mut r, &[n, h, w, c], -1.0, 1.0);
        let filters = random_tensor(&mut r, &[k, k, c, f], -1.0, 1.0);
        let mut g = Graph::new();
        let (xn, wn) = (g.constant(x.clone()), g.constant(filters.clone()));
        let y = g.conv2d(xn, wn, stride, padding)?;
        let got = g.value(y);
        let want = naive_conv2d(&x, &filters, stride, padding);
        assert_eq!(got.shape(), want.shape(), "k={k} s={stride} {padding:?} {h}x{w}");
        for (a, b) in got.data().iter().zip(want.data()) {
            worst = worst.max((a - b).abs() / b.abs().max(1e-8));
        }
    }
    Ok(worst)
}

/// Nearest-rank percentile by counting: the smallest value `v` with
/// `#{x ≤ v} · 100 ≥ p · n`. No sorting involved.
pub fn percentile_by_count(values: &[f64], p: u32) -> f64 {
    let n = values.len();
    values
        .iter()
        .copied()
        .filter(|&v| values.iter().filter(|&&x| x <= v).count() * 100 >= p as usize * n)
        .fold(f64::INFINITY, f64::min)
}

/// CDF by counting: every distinct value with the fraction at or below it.
pub fn cdf_by_count(values: &[f64]) -> Vec<(f64, f64)> {
    let mut distinct: Vec<f64> = Vec::new();
    for &v in values {
        if !distinct.contains(&v) {
            distinct.push(v);
        }
    }
    distinct.sort_by(f64::total_cmp);
    let n = values.len() as f64;
    distinct
        .into_iter()
        .map(|v| (v, values.iter().filter(|&&x| x <= v).count() as f64 / n))
        .collect()
}

/// Micro-averaged AUC as the Mann-Whitney statistic over all
/// (positive, negative) pairs of the pooled one-vs-rest expansion.
pub fn auc_by_pairs(scores: &[[f64; 3]], labels: &[usize]) -> f64 {
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for (row, &l) in scores.iter().zip(labels) {
        for (k, &s) in row.iter().enumerate() {
            if k == l {
                pos.push(s);
            } else {
                neg.push(s);
            }
        }
    }
    let mut wins = 0.0;
    for &p in &pos {
        for &q in &neg {
            wins += if p > q {
                1.0
            } else if p == q {
                0.5
            } else {
                0.0
            };
        }
    }
    wins / (pos.len() * neg.len()) as f64
}

/// 8×8 images whose bright column band encodes the class.
pub fn toy_set(n: usize, seed: u64) -> Vec<Sample> {
    let mut r = rng(seed);
    (0..n)
        .map(|i| {
            let class = i % 3;
            let angle = [-0.5, 0.0, 0.5][class];
            let img = Tensor::<f32>::from_fn(&[8, 8, 3], |j| {
                let x = (j / 3) % 8;
                let lit = x * 3 / 8 == class;
                let base = if lit { 0.8 } else { 0.2 };
                (base + r.random_range(-0.1f32..0.1)).clamp(0.0, 1.0)
            });
            Sample::new(img, angle, format!("toy_{i}"))
        })
        .collect()
}

/// Random probability rows drawn independently of the labels.
pub fn random_scores(r: &mut ChaCha8Rng, n: usize) -> (Vec<[f64; 3]>, Vec<usize>) {
    (0..n)
        .map(|_| {
            let raw: [f64; 3] = [r.random(), r.random(), r.random()];
            let s: f64 = raw.iter().sum();
            (raw.map(|v| v / s), r.random_range(0..3))
        })
        .unzip()
}
