//! Independent reference computations shared by the integration tests and
//! the acceptance suite. Each check returns the worst relative error seen.

#![allow(dead_code)]

use hoimotion::affordance::{affordance_from_distance, distance_map, ContactMask};
use hoimotion::annotation::{bleu4, rouge_l, rouge_n};
use hoimotion::geometry::PointCloudSequence;
use hoimotion::guidance::{foot_loss_from_joints, joint_guidance_loss, GuidanceWeights};
use hoimotion::metrics::{contact_scores, fid, hand_jpe, left_jpe, mpjpe, right_jpe};
use hoimotion::motion::{FeatureNormalizer, FEATURE_DIM};
use hoimotion::skeleton::JointSequence;
use hoimotion::stage1::{Stage1Config, Stage1Model};
use hoimotion::stage2::{guidance_objective, FusedCondition, GuidanceTarget, Stage2Config, Stage2Model};
use hoimotion::text::TEXT_DIM;
use hoimotion_nn::{Graph, Matrix, ParamStore, Var};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const FIXTURES: usize = 24;
pub const ORACLE_TOL: f64 = 1e-6;
pub const MONTE_CARLO_TOL: f64 = 1e-3;
pub const GRAD_TOL: f64 = 1e-3;

const WRISTS: [usize; 2] = [20, 21];
const FEET: [usize; 2] = [10, 11];

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// Below this norm a gradient is treated as zero and the error as absolute.
/// Some gradients vanish exactly (an attention key bias shifts every score
/// equally), leaving only roundoff on both sides.
pub const GRAD_FLOOR: f64 = 1e-4;

/// `‖a − b‖ / max(‖a‖, ‖b‖, GRAD_FLOOR)`.
pub fn norm_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(GRAD_FLOOR)
}

fn normal<R: Rng>(r: &mut R) -> f64 {
    r.sample(StandardNormal)
}

pub fn random_points<R: Rng>(r: &mut R, n: usize, scale: f64) -> Vec<[f64; 3]> {
    (0..n).map(|_| [scale * normal(r), scale * normal(r), scale * normal(r)]).collect()
}

pub fn random_joints<R: Rng>(r: &mut R, frames: usize, joints: usize, scale: f64) -> JointSequence {
    JointSequence::new(frames, joints, random_points(r, frames * joints, scale)).unwrap()
}

pub fn random_cloud<R: Rng>(r: &mut R, frames: usize, n: usize, scale: f64) -> PointCloudSequence {
    PointCloudSequence::new(frames, n, random_points(r, frames * n, scale)).unwrap()
}

pub fn random_mask<R: Rng>(r: &mut R, frames: usize, joints: usize, p: f64) -> ContactMask {
    ContactMask { frames, joints, values: (0..frames * joints).map(|_| r.random_bool(p)).collect(), tau: 0.1 }
}

fn distance(a: [f64; 3], b: [f64; 3]) -> f64 {
    (0..3).map(|i| (a[i] - b[i]) * (a[i] - b[i])).sum::<f64>().sqrt()
}

// ---------------------------------------------------------------- formulas

/// Proximity field `exp(-d / (2σ²))` for every (frame, point, joint).
pub fn oracle_affordance() -> f64 {
    let mut worst: f64 = 0.0;
    for f in 0..FIXTURES {
        let mut r = rng(100 + f as u64);
        let (frames, n, j) = (r.random_range(1..4), r.random_range(1..9), r.random_range(1..5));
        let cloud = random_cloud(&mut r, frames, n, 0.5);
        let joints = random_joints(&mut r, frames, j, 0.5);
        let sigma = r.random_range(0.05..1.0);
        let got = affordance_from_distance(&distance_map(&cloud, &joints).unwrap(), sigma).unwrap();
        for l in 0..frames {
            for p in 0..n {
                for k in 0..j {
                    let d = distance(cloud.frame(l)[p], joints.frame(l)[k]);
                    worst = worst.max(rel_err(got.get(l, p, k), (-d / (2.0 * sigma * sigma)).exp()));
                }
            }
        }
    }
    worst
}

/// Masked hand distance summed and divided by (2 × frames with any contact).
pub fn joint_loss_reference(pred: &JointSequence, target: &JointSequence, mask: &ContactMask) -> f64 {
    let mut total = 0.0;
    let mut frames = 0;
    for l in 0..target.frames() {
        let mut any = false;
        for k in 0..2 {
            if mask.values[l * 2 + k] {
                any = true;
                total += distance(pred.frame(l)[WRISTS[k]], target.frame(l)[k]);
            }
        }
        frames += usize::from(any);
    }
    if frames == 0 {
        0.0
    } else {
        total / (2.0 * frames as f64)
    }
}

pub fn oracle_joint_loss() -> f64 {
    let mut worst: f64 = 0.0;
    for f in 0..FIXTURES {
        let mut r = rng(200 + f as u64);
        let frames = r.random_range(1..12);
        let pred = random_joints(&mut r, frames, 22, 0.4);
        let target = random_joints(&mut r, frames, 2, 0.4);
        let mask = random_mask(&mut r, frames, 2, 0.4);
        let got = joint_guidance_loss(&pred, &target, &mask).unwrap();
        worst = worst.max(rel_err(got, joint_loss_reference(&pred, &target, &mask)));
    }
    worst
}

/// Ground term on the lower foot plus velocity and acceleration penalties on
/// planted feet, averaged over frames.
pub fn foot_loss_reference(joints: &JointSequence, contacts: &[[bool; 2]], w: &GuidanceWeights) -> f64 {
    let l = joints.frames();
    let p = |i: usize, k: usize| joints.frame(i)[FEET[k]];
    let mut ground = 0.0;
    for i in 0..l {
        let y = p(i, 0)[1].min(p(i, 1)[1]);
        ground += (y - w.h_g) * (y - w.h_g);
    }
    let mut vel = 0.0;
    let mut acc = 0.0;
    for k in 0..2 {
        let v: Vec<[f64; 3]> = (0..l.saturating_sub(1))
            .map(|i| {
                let (a, b) = (p(i, k), p(i + 1, k));
                [b[0] - a[0], b[1] - a[1], b[2] - a[2]]
            })
            .collect();
        for (i, vi) in v.iter().enumerate() {
            if contacts[i][k] {
                vel += vi.iter().map(|x| x * x).sum::<f64>();
                if let Some(vn) = v.get(i + 1) {
                    acc += (0..3).map(|d| (vn[d] - vi[d]).powi(2)).sum::<f64>();
                }
            }
        }
    }
    (ground + w.alpha * vel + w.beta * acc) / l as f64
}

pub fn oracle_foot_loss() -> f64 {
    let mut worst: f64 = 0.0;
    for f in 0..FIXTURES {
        let mut r = rng(300 + f as u64);
        let frames = r.random_range(1..12);
        let joints = random_joints(&mut r, frames, 22, 0.3);
        let contacts: Vec<[bool; 2]> = (0..frames).map(|_| [r.random_bool(0.5), r.random_bool(0.5)]).collect();
        let w = GuidanceWeights {
            alpha: r.random_range(0.0..2.0),
            beta: r.random_range(0.0..2.0),
            h_g: r.random_range(0.0..0.1),
            ..GuidanceWeights::default()
        };
        let got = foot_loss_from_joints(&joints, &contacts, &w).unwrap();
        worst = worst.max(rel_err(got, foot_loss_reference(&joints, &contacts, &w)));
    }
    worst
}

/// Mean Euclidean error in centimeters over the listed joints.
fn jpe_reference(pred: &JointSequence, gt: &JointSequence, joints: &[usize]) -> f64 {
    let mut total = 0.0;
    for l in 0..pred.frames() {
        for &j in joints {
            total += distance(pred.frame(l)[j], gt.frame(l)[j]);
        }
    }
    100.0 * total / (pred.frames() * joints.len()) as f64
}

pub fn oracle_jpe() -> f64 {
    let mut worst: f64 = 0.0;
    for f in 0..FIXTURES {
        let mut r = rng(400 + f as u64);
        let frames = r.random_range(1..10);
        let a = random_joints(&mut r, frames, 22, 0.5);
        let b = random_joints(&mut r, frames, 22, 0.5);
        let all: Vec<usize> = (0..22).collect();
        worst = worst.max(rel_err(mpjpe(&a, &b).unwrap(), jpe_reference(&a, &b, &all)));
        worst = worst.max(rel_err(hand_jpe(&a, &b).unwrap(), jpe_reference(&a, &b, &WRISTS)));
        worst = worst.max(rel_err(left_jpe(&a, &b).unwrap(), jpe_reference(&a, &b, &WRISTS[..1])));
        worst = worst.max(rel_err(right_jpe(&a, &b).unwrap(), jpe_reference(&a, &b, &WRISTS[1..])));
    }
    worst
}

pub fn oracle_contact() -> f64 {
    let mut worst: f64 = 0.0;
    for f in 0..FIXTURES {
        let mut r = rng(500 + f as u64);
        let frames = r.random_range(1..30);
        let (pp, pg) = (r.random_range(0.0..1.0), r.random_range(0.0..1.0));
        let pred = random_mask(&mut r, frames, 2, pp);
        let gt = random_mask(&mut r, frames, 2, pg);
        let count = |p: bool, t: bool| pred.values.iter().zip(&gt.values).filter(|(&a, &b)| a == p && b == t).count() as f64;
        let (tp, fp, fne, tn) = (count(true, true), count(true, false), count(false, true), count(false, false));
        let div = |a: f64, b: f64| if b == 0.0 { 0.0 } else { a / b };
        let with_contact = (0..frames).filter(|&l| pred.values[2 * l] || pred.values[2 * l + 1]).count() as f64;
        let s = contact_scores(&pred, &gt).unwrap();
        for (got, want) in [
            (s.precision, div(tp, tp + fp)),
            (s.recall, div(tp, tp + fne)),
            (s.accuracy, div(tp + tn, tp + fp + fne + tn)),
            (s.f1, div(2.0 * tp, 2.0 * tp + fp + fne)),
            (s.percentage, with_contact / frames as f64),
        ] {
            worst = worst.max(rel_err(got, want));
        }
    }
    worst
}

fn column(values: &[f64]) -> Matrix {
    Matrix::from_vec(values.len(), 1, values.to_vec())
}

/// One-dimensional features: `(μ1 − μ2)² + (s1 − s2)²` with sample deviations.
pub fn oracle_fid_scalar() -> f64 {
    let mut worst: f64 = 0.0;
    for f in 0..FIXTURES {
        let mut r = rng(600 + f as u64);
        let (n1, n2) = (r.random_range(3..40), r.random_range(3..40));
        let shift = r.random_range(-2.0..2.0);
        let a: Vec<f64> = (0..n1).map(|_| normal(&mut r)).collect();
        let b: Vec<f64> = (0..n2).map(|_| shift + 2.0 * normal(&mut r)).collect();
        let stats = |x: &[f64]| {
            let m = x.iter().sum::<f64>() / x.len() as f64;
            let v = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() - 1) as f64;
            (m, v.sqrt())
        };
        let ((m1, s1), (m2, s2)) = (stats(&a), stats(&b));
        let want = (m1 - m2).powi(2) + (s1 - s2).powi(2);
        worst = worst.max(rel_err(fid(&column(&a), &column(&b)).unwrap(), want));
    }
    worst
}

fn sample_cov(x: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let (n, k) = x.shape();
    let mean: Vec<f64> = (0..k).map(|j| x.column(j).sum() / n as f64).collect();
    let mut c = DMatrix::zeros(k, k);
    for i in 0..n {
        for a in 0..k {
            for b in 0..k {
                c[(a, b)] += (x[(i, a)] - mean[a]) * (x[(i, b)] - mean[b]);
            }
        }
    }
    (mean, c / (n - 1) as f64)
}

/// Principal square root by the Denman–Beavers iteration.
fn sqrt_iterative(a: &DMatrix<f64>) -> DMatrix<f64> {
    let k = a.nrows();
    let mut y = a.clone();
    let mut z = DMatrix::<f64>::identity(k, k);
    for _ in 0..100 {
        let yi = y.clone().try_inverse().expect("invertible iterate");
        let zi = z.clone().try_inverse().expect("invertible iterate");
        let ny = (&y + zi) * 0.5;
        let nz = (&z + yi) * 0.5;
        let done = (&ny - &y).norm() < 1e-15 * ny.norm().max(1.0);
        y = ny;
        z = nz;
        if done {
            break;
        }
    }
    y
}

/// Multivariate features against `tr(S1 + S2 − 2 (S1 S2)^½)` with the
/// square root of the (non-symmetric) product taken iteratively.
pub fn oracle_fid_multivariate() -> f64 {
    let mut worst: f64 = 0.0;
    for f in 0..FIXTURES {
        let mut r = rng(700 + f as u64);
        let k = r.random_range(2..6);
        let (n1, n2) = (r.random_range(k + 8..60), r.random_range(k + 8..60));
        let mix = DMatrix::from_fn(k, k, |_, _| normal(&mut r));
        let a = DMatrix::from_fn(n1, k, |_, _| normal(&mut r));
        let b = DMatrix::from_fn(n2, k, |_, _| normal(&mut r) + 0.5) * &mix;
        let (m1, s1) = sample_cov(&a);
        let (m2, s2) = sample_cov(&b);
        let mean_term: f64 = m1.iter().zip(&m2).map(|(x, y)| (x - y).powi(2)).sum();
        let want = mean_term + s1.trace() + s2.trace() - 2.0 * sqrt_iterative(&(&s1 * &s2)).trace();
        let to_matrix = |m: &DMatrix<f64>| Matrix::from_vec(m.nrows(), m.ncols(), m.transpose().as_slice().to_vec());
        worst = worst.max(rel_err(fid(&to_matrix(&a), &to_matrix(&b)).unwrap(), want));
    }
    worst
}

/// Large samples of two known Gaussians against the population distance.
pub fn oracle_fid_monte_carlo() -> f64 {
    let mut r = rng(800);
    let n = 400_000;
    let mu1 = [0.0, 0.0, 0.0];
    let mu2 = [6.0, -4.0, 3.0];
    let sd1 = [1.0, 0.5, 0.8];
    let sd2 = [0.7, 0.9, 0.8];
    let draw = |r: &mut ChaCha8Rng, mu: [f64; 3], sd: [f64; 3]| {
        let mut v = Vec::with_capacity(3 * n);
        for _ in 0..n {
            for d in 0..3 {
                v.push(mu[d] + sd[d] * normal(r));
            }
        }
        Matrix::from_vec(n, 3, v)
    };
    let a = draw(&mut r, mu1, sd1);
    let b = draw(&mut r, mu2, sd2);
    let want: f64 = (0..3).map(|d| (mu1[d] - mu2[d]).powi(2) + (sd1[d] - sd2[d]).powi(2)).sum();
    rel_err(fid(&a, &b).unwrap(), want)
}

const VOCAB: [&str; 12] =
    ["the", "person", "lifts", "box", "with", "both", "hands", "left", "side", "walks", "forward", "then"];

fn random_sentence<R: Rng>(r: &mut R) -> Vec<&'static str> {
    let n = r.random_range(1..11);
    (0..n).map(|_| VOCAB[r.random_range(0..VOCAB.len())]).collect()
}

fn count_ngram(tokens: &[&str], gram: &[&str]) -> usize {
    if tokens.len() < gram.len() {
        return 0;
    }
    (0..=tokens.len() - gram.len()).filter(|&i| &tokens[i..i + gram.len()] == gram).count()
}

/// Clipped matches by scanning each distinct candidate n-gram.
fn clipped_hits(c: &[&str], r: &[&str], n: usize) -> usize {
    if c.len() < n {
        return 0;
    }
    let mut seen: Vec<&[&str]> = Vec::new();
    let mut hits = 0;
    for i in 0..=c.len() - n {
        let g = &c[i..i + n];
        if seen.contains(&g) {
            continue;
        }
        seen.push(g);
        hits += count_ngram(c, g).min(count_ngram(r, g));
    }
    hits
}

fn grams(len: usize, n: usize) -> usize {
    (len + 1).saturating_sub(n)
}

/// BLEU-4: unsmoothed unigram precision, add-one for orders 2–4, brevity penalty.
pub fn bleu_reference(c: &[&str], r: &[&str]) -> f64 {
    let mut logp = 0.0;
    for n in 1..=4 {
        let hits = clipped_hits(c, r, n) as f64;
        let total = grams(c.len(), n) as f64;
        let p = if n == 1 { hits / total } else { (hits + 1.0) / (total + 1.0) };
        if p == 0.0 {
            return 0.0;
        }
        logp += p.ln() / 4.0;
    }
    let bp = if c.len() > r.len() { 1.0 } else { (1.0 - r.len() as f64 / c.len() as f64).exp() };
    100.0 * bp * logp.exp()
}

fn f_measure(hits: f64, cand: f64, reference: f64) -> f64 {
    if hits == 0.0 {
        return 0.0;
    }
    let (p, r) = (hits / cand, hits / reference);
    100.0 * 2.0 * p * r / (p + r)
}

/// Longest common subsequence by trying every subset of the shorter side.
fn lcs_exhaustive(a: &[&str], b: &[&str]) -> usize {
    let (short, long) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    let mut best = 0;
    for bits in 0u32..(1 << short.len()) {
        let sub: Vec<&str> = (0..short.len()).filter(|i| bits >> i & 1 == 1).map(|i| short[i]).collect();
        if sub.len() <= best {
            continue;
        }
        let mut it = long.iter();
        if sub.iter().all(|w| it.any(|x| x == w)) {
            best = sub.len();
        }
    }
    best
}

pub fn oracle_text_scores() -> f64 {
    let mut worst: f64 = 0.0;
    for f in 0..FIXTURES {
        let mut r = rng(900 + f as u64);
        let c = random_sentence(&mut r);
        let refr = random_sentence(&mut r);
        let (cs, rs) = (c.join(" "), refr.join(" "));
        worst = worst.max(rel_err(bleu4(&cs, &rs), bleu_reference(&c, &refr)));
        for n in 1..=2 {
            let want = f_measure(
                clipped_hits(&c, &refr, n) as f64,
                grams(c.len(), n) as f64,
                grams(refr.len(), n) as f64,
            );
            worst = worst.max(rel_err(rouge_n(&cs, &rs, n), want));
        }
        let want = f_measure(lcs_exhaustive(&c, &refr) as f64, c.len() as f64, refr.len() as f64);
        worst = worst.max(rel_err(rouge_l(&cs, &rs), want));
    }
    worst
}

// ------------------------------------------------------------- gradients

const FD_STEP: f64 = 1e-6;

fn weights_like(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut r = rng(seed);
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| normal(&mut r)).collect())
}

/// Scalar probe `Σ W ⊙ x` so each output element gets its own upstream weight.
pub fn probe(g: &mut Graph, x: Var, seed: u64) -> Var {
    let (r, c) = g.shape(x);
    let w = g.constant(weights_like(r, c, seed));
    let p = g.mul(x, w);
    g.sum(p)
}

/// Worst relative error of input gradients against central differences.
pub fn check_inputs(inputs: &[Matrix], build: impl Fn(&mut Graph, &[Var]) -> Var) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|m| g.leaf(m.clone(), true)).collect();
    let out = build(&mut g, &vars);
    let grads = g.backward(out);
    let eval = |xs: &[Matrix]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|m| g.leaf(m.clone(), true)).collect();
        let out = build(&mut g, &vars);
        g.value(out).data()[0]
    };
    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.wrt(vars[k]).cloned().unwrap_or_else(|| Matrix::zeros(input.rows(), input.cols()));
        let mut fd = Vec::with_capacity(input.len());
        for i in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= FD_STEP;
            fd.push((eval(&plus) - eval(&minus)) / (2.0 * FD_STEP));
        }
        worst = worst.max(norm_rel_err(analytic.data(), &fd));
    }
    worst
}

/// Worst relative error of parameter gradients, over up to `per_param`
/// sampled coordinates of every parameter whose name starts with `prefix`.
pub fn check_params<M>(
    model: &mut M,
    store: fn(&M) -> &ParamStore,
    store_mut: fn(&mut M) -> &mut ParamStore,
    prefix: &str,
    per_param: usize,
    build: impl Fn(&M, &mut Graph) -> Var,
) -> f64 {
    let analytic = {
        let mut g = Graph::new();
        let out = build(model, &mut g);
        g.backward(out).param_grads(store(model))
    };
    let ids: Vec<_> = store(model).ids().filter(|&id| store(model).name(id).starts_with(prefix)).collect();
    assert!(!ids.is_empty(), "no parameters under {prefix}");
    let eval = |m: &M| {
        let mut g = Graph::new();
        let out = build(m, &mut g);
        g.value(out).data()[0]
    };
    let mut r = rng(ids.len() as u64);
    let mut worst: f64 = 0.0;
    for id in ids {
        let len = store(model).value(id).len();
        let coords: Vec<usize> = if len <= per_param {
            (0..len).collect()
        } else {
            (0..per_param).map(|_| r.random_range(0..len)).collect()
        };
        let mut an = Vec::new();
        let mut fd = Vec::new();
        for i in coords {
            let orig = store(model).value(id).data()[i];
            store_mut(model).value_mut(id).data_mut()[i] = orig + FD_STEP;
            let up = eval(model);
            store_mut(model).value_mut(id).data_mut()[i] = orig - FD_STEP;
            let down = eval(model);
            store_mut(model).value_mut(id).data_mut()[i] = orig;
            fd.push((up - down) / (2.0 * FD_STEP));
            an.push(analytic[id.index()].data()[i]);
        }
        worst = worst.max(norm_rel_err(&an, &fd));
    }
    worst
}

pub fn tiny_stage1() -> Stage1Model {
    let cfg = Stage1Config {
        bps_width: 12,
        n_points: 5,
        latent: 8,
        heads: 2,
        layers: 1,
        ff_dim: 8,
        bps_hidden: 6,
        pc_dim: 6,
    };
    Stage1Model::new(cfg, 3)
}

pub fn tiny_stage2() -> Stage2Model {
    let cfg = Stage2Config {
        bps_width: 12,
        n_points: 5,
        latent: 8,
        heads: 2,
        layers: 2,
        ff_dim: 8,
        bps_hidden: 6,
        pc_dim: 6,
    };
    let mut m = Stage2Model::new(cfg, 4);
    m.attach_controlnet(5);
    m
}

fn s1_store(m: &Stage1Model) -> &ParamStore {
    &m.store
}

fn s1_store_mut(m: &mut Stage1Model) -> &mut ParamStore {
    &mut m.store
}

fn s2_store(m: &Stage2Model) -> &ParamStore {
    &m.store
}

fn s2_store_mut(m: &mut Stage2Model) -> &mut ParamStore {
    &mut m.store
}

const FRAMES: usize = 4;

pub fn grad_project_bps() -> f64 {
    let mut m = tiny_stage1();
    let bps = weights_like(FRAMES, 12, 1);
    let wrt_input = check_inputs(std::slice::from_ref(&bps), |g, v| {
        let y = m.project_bps(g, v[0]);
        probe(g, y, 2)
    });
    let wrt_params = check_params(&mut m, s1_store, s1_store_mut, "stage1.project_bps", 8, |m, g| {
        let x = g.constant(bps.clone());
        let y = m.project_bps(g, x);
        probe(g, y, 2)
    });
    wrt_input.max(wrt_params)
}

/// Joint self-attention branch, inputs and its own parameters.
pub fn grad_joint_branch() -> f64 {
    let mut m = tiny_stage1();
    let inputs = [weights_like(FRAMES, 6, 3), weights_like(FRAMES, 12, 4), weights_like(1, TEXT_DIM, 5)];
    let build = |m: &Stage1Model, g: &mut Graph, v: &[Var]| {
        let b = m.bundle_vars(g, v[1], v[2], 7);
        let y = m.joint_branch(g, v[0], b);
        probe(g, y, 6)
    };
    let wrt_input = check_inputs(&inputs, |g, v| build(&m, g, v));
    let wrt_params = check_params(&mut m, s1_store, s1_store_mut, "stage1.joint", 6, |m, g| {
        let v: Vec<Var> = inputs.iter().map(|x| g.constant(x.clone())).collect();
        build(m, g, &v)
    });
    wrt_input.max(wrt_params)
}

/// Affordance cross-attention branch and the mutual cross-attention.
pub fn grad_affordance_branch() -> f64 {
    let mut m = tiny_stage1();
    let inputs = [weights_like(FRAMES, 5, 8), weights_like(FRAMES, 12, 9), weights_like(1, TEXT_DIM, 10)];
    let build = |m: &Stage1Model, g: &mut Graph, v: &[Var]| {
        let b = m.bundle_vars(g, v[1], v[2], 3);
        let y = m.affordance_branch(g, v[0], b);
        probe(g, y, 11)
    };
    let wrt_input = check_inputs(&inputs, |g, v| build(&m, g, v));
    let wrt_params = check_params(&mut m, s1_store, s1_store_mut, "stage1.afford", 6, |m, g| {
        let v: Vec<Var> = inputs.iter().map(|x| g.constant(x.clone())).collect();
        build(m, g, &v)
    });
    let feats = [weights_like(FRAMES, 8, 12), weights_like(FRAMES, 8, 13)];
    let mutual = check_inputs(&feats, |g, v| {
        let y = m.mutual_cross_attention(g, v[0], v[1]);
        probe(g, y, 14)
    });
    wrt_input.max(wrt_params).max(mutual)
}

pub fn grad_fuse_affordance() -> f64 {
    let mut m = tiny_stage2();
    let inputs = [weights_like(FRAMES, 6, 15), weights_like(FRAMES, 5, 16)];
    let wrt_input = check_inputs(&inputs, |g, v| {
        let y = m.fuse_affordance(g, v[0], v[1]).unwrap();
        probe(g, y, 17)
    });
    let wrt_params = check_params(&mut m, s2_store, s2_store_mut, "control.afford", 6, |m, g| {
        let v: Vec<Var> = inputs.iter().map(|x| g.constant(x.clone())).collect();
        let y = m.fuse_affordance(g, v[0], v[1]).unwrap();
        probe(g, y, 17)
    });
    wrt_input.max(wrt_params)
}

pub fn grad_fuse_joints() -> f64 {
    let mut m = tiny_stage2();
    let inputs = [weights_like(FRAMES, 6, 18), weights_like(FRAMES, 8, 19)];
    let wrt_input = check_inputs(&inputs, |g, v| {
        let y = m.fuse_joints(g, v[0], v[1]).unwrap();
        probe(g, y, 20)
    });
    let wrt_params = check_params(&mut m, s2_store, s2_store_mut, "control.joint", 6, |m, g| {
        let v: Vec<Var> = inputs.iter().map(|x| g.constant(x.clone())).collect();
        let y = m.fuse_joints(g, v[0], v[1]).unwrap();
        probe(g, y, 20)
    });
    wrt_input.max(wrt_params)
}

pub fn random_condition(len: usize, bps_width: usize, n_points: usize, seed: u64) -> FusedCondition {
    let mut r = rng(seed);
    FusedCondition {
        text: (0..TEXT_DIM).map(|_| normal(&mut r)).collect(),
        text_fine: (0..TEXT_DIM).map(|_| normal(&mut r)).collect(),
        bps: weights_like(len, bps_width, seed + 1),
        hands: random_joints(&mut r, len, 2, 0.5),
        affordance: Matrix::from_vec(len, n_points, (0..len * n_points).map(|_| r.random_range(0.0..1.0)).collect()),
    }
}

/// Gradients reaching the trainable copy, with the zero links randomized so
/// that the copy is on the output path.
pub fn grad_controlnet_copy() -> f64 {
    let mut m = tiny_stage2();
    let mut r = rng(21);
    let links: Vec<_> = m.store.ids().filter(|&id| m.store.name(id).starts_with("control.link")).collect();
    for id in links {
        for v in m.store.value_mut(id).data_mut() {
            *v = 0.3 * normal(&mut r);
        }
    }
    let cond = random_condition(FRAMES, 12, 5, 22);
    let x_t = weights_like(FRAMES, FEATURE_DIM, 23);
    let build = |m: &Stage2Model, g: &mut Graph, x: Var| {
        let cv = m.condition_vars(g, &cond);
        let y = m.controlnet_denoise_graph(g, x, cv, 5).unwrap();
        probe(g, y, 24)
    };
    let wrt_input = check_inputs(std::slice::from_ref(&x_t), |g, v| build(&m, g, v[0]));
    let wrt_params = check_params(&mut m, s2_store, s2_store_mut, "control.copy", 4, |m, g| {
        let x = g.constant(x_t.clone());
        build(m, g, x)
    });
    wrt_input.max(wrt_params)
}

fn objective_fixture(seed: u64) -> (Vec<f64>, FeatureNormalizer, GuidanceTarget, Vec<[bool; 2]>) {
    let mut r = rng(seed);
    let frames = 5;
    let mu: Vec<f64> = (0..frames * FEATURE_DIM).map(|_| 0.3 * normal(&mut r)).collect();
    let normalizer = FeatureNormalizer {
        mean: (0..FEATURE_DIM).map(|_| 0.1 * normal(&mut r)).collect(),
        std: (0..FEATURE_DIM).map(|_| r.random_range(0.2..1.0)).collect(),
    };
    let target = GuidanceTarget { hands: random_joints(&mut r, frames, 2, 0.5), mask: random_mask(&mut r, frames, 2, 0.6) };
    let contacts = (0..frames).map(|_| [r.random_bool(0.5), r.random_bool(0.5)]).collect();
    (mu, normalizer, target, contacts)
}

fn check_objective(w: GuidanceWeights, seed: u64) -> f64 {
    let (mu, normalizer, target, contacts) = objective_fixture(seed);
    let rows = mu.len() / FEATURE_DIM;
    let f = |x: &[f64]| guidance_objective(x, rows, &normalizer, 30.0, &target, &contacts, &w);
    let (_, grad) = f(&mu);
    let mut fd = Vec::with_capacity(mu.len());
    let mut x = mu.clone();
    for i in 0..mu.len() {
        x[i] = mu[i] + FD_STEP;
        let up = f(&x).0;
        x[i] = mu[i] - FD_STEP;
        let down = f(&x).0;
        x[i] = mu[i];
        fd.push((up - down) / (2.0 * FD_STEP));
    }
    norm_rel_err(&grad, &fd)
}

pub fn grad_joint_loss() -> f64 {
    let w = GuidanceWeights { foot_weight: 0.0, ..GuidanceWeights::default() };
    check_objective(w, 31).max(check_objective(w, 32))
}

pub fn grad_foot_loss() -> f64 {
    let w = GuidanceWeights { joint_weight: 0.0, alpha: 0.7, beta: 1.3, ..GuidanceWeights::default() };
    check_objective(w, 33).max(check_objective(w, 34))
}

/// Named formula oracles, in acceptance order.
pub fn formula_oracles() -> Vec<(&'static str, f64, f64)> {
    vec![
        ("affordance", oracle_affordance(), ORACLE_TOL),
        ("joint loss", oracle_joint_loss(), ORACLE_TOL),
        ("foot loss", oracle_foot_loss(), ORACLE_TOL),
        ("mpjpe/hand jpe", oracle_jpe(), ORACLE_TOL),
        ("contact scores", oracle_contact(), ORACLE_TOL),
        ("fid k=1", oracle_fid_scalar(), ORACLE_TOL),
        ("fid multivariate", oracle_fid_multivariate(), ORACLE_TOL),
        ("fid monte carlo", oracle_fid_monte_carlo(), MONTE_CARLO_TOL),
        ("bleu/rouge", oracle_text_scores(), ORACLE_TOL),
    ]
}

/// Named gradient checks, in acceptance order.
pub fn gradient_checks() -> Vec<(&'static str, f64)> {
    vec![
        ("project_bps", grad_project_bps()),
        ("joint attention branch", grad_joint_branch()),
        ("affordance attention branch", grad_affordance_branch()),
        ("fuse_affordance", grad_fuse_affordance()),
        ("fuse_joints", grad_fuse_joints()),
        ("controlnet copy", grad_controlnet_copy()),
        ("joint loss", grad_joint_loss()),
        ("foot loss", grad_foot_loss()),
    ]
}
