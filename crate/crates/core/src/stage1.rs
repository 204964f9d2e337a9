//! Dual-branch diffusion model that jointly denoises two-hand trajectories
//! and per-point hand affordance, conditioned on text and BPS geometry.

use std::path::Path;

use hoimotion_nn::{
    clip_grad_norm, positional_encoding, sinusoidal_embedding, AdamW, CrossAttentionBlock, Graph, Linear, Matrix,
    Mlp, ParamId, ParamStore, TransformerBlock, Var,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{forward_diffuse, gaussian, sample_plain, DiffusionSchedule};
use crate::error::{CoreError, Result};
use crate::skeleton::JointSequence;
use crate::text::TEXT_DIM;

pub const HAND_DIM: usize = 6;
/// Projected point-cloud feature width.
pub const PC_DIM: usize = 256;
/// Smallest affordance value a sample may carry.
pub const AFFORDANCE_FLOOR: f64 = 1e-6;
const HAND_STD_FLOOR: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage1Config {
    /// Raw BPS width per frame (6 × basis points).
    pub bps_width: usize,
    /// Cloud points per frame, the affordance signal width.
    pub n_points: usize,
    pub latent: usize,
    pub heads: usize,
    pub layers: usize,
    pub ff_dim: usize,
    pub bps_hidden: usize,
    pub pc_dim: usize,
}

impl Stage1Config {
    pub fn new(bps_width: usize, n_points: usize) -> Self {
        Self { bps_width, n_points, latent: 64, heads: 4, layers: 2, ff_dim: 128, bps_hidden: 128, pc_dim: PC_DIM }
    }
}

/// Per-clip conditioning: coarse text embedding and raw BPS features.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionBundle {
    pub text: Vec<f64>,
    /// `L x bps_width`
    pub bps: Matrix,
}

/// Noisy (or clean) diffusion state of one clip.
#[derive(Clone, Debug, PartialEq)]
pub struct GuidanceState {
    /// `L x 6` normalized hand positions.
    pub joints: Matrix,
    /// `L x N` affordance rescaled to `[-1, 1]`.
    pub affordance: Matrix,
}

/// Stage-1 output in world units.
#[derive(Clone, Debug, PartialEq)]
pub struct GuidancePair {
    /// Left and right hand positions, `L x 2` joints.
    pub hands: JointSequence,
    /// Reduced affordance `L x N`, values in `(0, 1]`.
    pub affordance: Matrix,
}

/// Tape nodes shared by both branches.
#[derive(Clone, Copy, Debug)]
pub struct BundleVars {
    /// `L x pc_dim`
    pub f_pc: Var,
    /// `1 x latent` text-and-step condition.
    pub cond: Var,
}

pub struct Stage1Model {
    pub config: Stage1Config,
    pub store: ParamStore,
    hand_mean: ParamId,
    hand_std: ParamId,
    pub project_bps: Mlp,
    time_mlp: Mlp,
    cond_proj: Linear,
    joint_in: Linear,
    joint_blocks: Vec<TransformerBlock>,
    afford_query: Linear,
    afford_kv: Linear,
    pub afford_cross: CrossAttentionBlock,
    afford_blocks: Vec<TransformerBlock>,
    pub mutual: CrossAttentionBlock,
    joint_head: Linear,
    afford_head: Linear,
}

impl Stage1Model {
    pub fn new(config: Stage1Config, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = &config;
        let d = c.latent;
        let hand_mean = store.add("stage1.hand_mean", Matrix::zeros(1, HAND_DIM));
        let hand_std = store.add("stage1.hand_std", Matrix::filled(1, HAND_DIM, 1.0));
        store.set_frozen(hand_mean, true);
        store.set_frozen(hand_std, true);
        let project_bps = Mlp::new(&mut store, "stage1.project_bps", &[c.bps_width, c.bps_hidden, c.pc_dim], &mut rng);
        let time_mlp = Mlp::new(&mut store, "stage1.time", &[d, d, d], &mut rng);
        let cond_proj = Linear::new(&mut store, "stage1.cond", TEXT_DIM + d, d, &mut rng);
        let joint_in = Linear::new(&mut store, "stage1.joint_in", HAND_DIM + c.pc_dim, d, &mut rng);
        let joint_blocks = (0..c.layers)
            .map(|i| TransformerBlock::new(&mut store, &format!("stage1.joint.{i}"), d, c.heads, c.ff_dim, &mut rng))
            .collect();
        let afford_query = Linear::new(&mut store, "stage1.afford_query", d, d, &mut rng);
        let afford_kv = Linear::new(&mut store, "stage1.afford_kv", c.pc_dim + c.n_points, d, &mut rng);
        let afford_cross = CrossAttentionBlock::new(&mut store, "stage1.afford_cross", d, c.heads, &mut rng);
        let afford_blocks = (0..c.layers)
            .map(|i| TransformerBlock::new(&mut store, &format!("stage1.afford.{i}"), d, c.heads, c.ff_dim, &mut rng))
            .collect();
        let mutual = CrossAttentionBlock::new(&mut store, "stage1.mutual", d, c.heads, &mut rng);
        let joint_head = Linear::new(&mut store, "stage1.joint_head", d, HAND_DIM, &mut rng);
        let afford_head = Linear::new(&mut store, "stage1.afford_head", d, c.n_points, &mut rng);
        Self {
            config,
            store,
            hand_mean,
            hand_std,
            project_bps,
            time_mlp,
            cond_proj,
            joint_in,
            joint_blocks,
            afford_query,
            afford_kv,
            afford_cross,
            afford_blocks,
            mutual,
            joint_head,
            afford_head,
        }
    }

    /// Fits the hand normalization from training trajectories.
    pub fn fit_hand_normalizer<'a>(&mut self, hands: impl IntoIterator<Item = &'a JointSequence>) {
        let mut sum = [0.0; HAND_DIM];
        let mut sq = [0.0; HAND_DIM];
        let mut n = 0.0;
        for h in hands {
            for f in 0..h.frames() {
                for (k, v) in hand_row(h, f).iter().enumerate() {
                    sum[k] += v;
                    sq[k] += v * v;
                }
                n += 1.0;
            }
        }
        if n == 0.0 {
            return;
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std: Vec<f64> = sq.iter().zip(&mean).map(|(s, m)| (s / n - m * m).max(0.0).sqrt().max(HAND_STD_FLOOR)).collect();
        *self.store.value_mut(self.hand_mean) = Matrix::row_vector(mean);
        *self.store.value_mut(self.hand_std) = Matrix::row_vector(std);
    }

    pub fn normalize_hands(&self, hands: &JointSequence) -> Matrix {
        let (mean, std) = (self.store.value(self.hand_mean).data(), self.store.value(self.hand_std).data());
        let mut out = Matrix::zeros(hands.frames(), HAND_DIM);
        for f in 0..hands.frames() {
            for (k, v) in hand_row(hands, f).iter().enumerate() {
                out.set(f, k, (v - mean[k]) / std[k]);
            }
        }
        out
    }

    pub fn denormalize_hands(&self, x: &Matrix) -> Result<JointSequence> {
        let (mean, std) = (self.store.value(self.hand_mean).data(), self.store.value(self.hand_std).data());
        let mut pos = Vec::with_capacity(2 * x.rows());
        for f in 0..x.rows() {
            let r = x.row(f);
            let v: Vec<f64> = (0..HAND_DIM).map(|k| r[k] * std[k] + mean[k]).collect();
            pos.push([v[0], v[1], v[2]]);
            pos.push([v[3], v[4], v[5]]);
        }
        JointSequence::new(x.rows(), 2, pos)
    }

    /// Learned per-frame projection of raw BPS features.
    pub fn project_bps(&self, g: &mut Graph, bps: Var) -> Var {
        self.project_bps.forward(g, &self.store, bps)
    }

    pub fn bundle_vars(&self, g: &mut Graph, bps: Var, text: Var, t: usize) -> BundleVars {
        let f_pc = self.project_bps(g, bps);
        let temb = g.constant(Matrix::row_vector(sinusoidal_embedding(t as f64, self.config.latent)));
        let temb = self.time_mlp.forward(g, &self.store, temb);
        let ct = g.concat_cols(&[text, temb]);
        let cond = self.cond_proj.forward(g, &self.store, ct);
        BundleVars { f_pc, cond }
    }

    fn positions(&self, g: &mut Graph, len: usize) -> Var {
        g.constant(positional_encoding(len, self.config.latent))
    }

    /// Self-attention over `[x_J ⊕ f_pc]` with the condition added per frame.
    pub fn joint_branch(&self, g: &mut Graph, x_j: Var, b: BundleVars) -> Var {
        let len = g.shape(x_j).0;
        let inp = g.concat_cols(&[x_j, b.f_pc]);
        let h = self.joint_in.forward(g, &self.store, inp);
        let h = g.add_row(h, b.cond);
        let pe = self.positions(g, len);
        let mut h = g.add(h, pe);
        for blk in &self.joint_blocks {
            h = blk.forward(g, &self.store, h);
        }
        h
    }

    /// Condition queries attend over `[f_pc ⊕ x_A]`, then self-attention.
    pub fn affordance_branch(&self, g: &mut Graph, x_a: Var, b: BundleVars) -> Var {
        let len = g.shape(x_a).0;
        let pe = self.positions(g, len);
        let kv_in = g.concat_cols(&[b.f_pc, x_a]);
        let kv = self.afford_kv.forward(g, &self.store, kv_in);
        let kv = g.add(kv, pe);
        let q = self.afford_query.forward(g, &self.store, b.cond);
        let q = g.add_row(pe, q);
        let mut h = self.afford_cross.forward(g, &self.store, q, kv);
        for blk in &self.afford_blocks {
            h = blk.forward(g, &self.store, h);
        }
        h
    }

    /// Joint features query affordance features (residual).
    pub fn mutual_cross_attention(&self, g: &mut Graph, joint_feat: Var, afford_feat: Var) -> Var {
        self.mutual.forward(g, &self.store, joint_feat, afford_feat)
    }

    /// Clean-signal estimates `(x0_J, x0_A)` on the tape.
    pub fn predict_clean_graph(&self, g: &mut Graph, x_j: Var, x_a: Var, bps: Var, text: Var, t: usize) -> (Var, Var) {
        let b = self.bundle_vars(g, bps, text, t);
        let jf = self.joint_branch(g, x_j, b);
        let af = self.affordance_branch(g, x_a, b);
        let jf = self.mutual_cross_attention(g, jf, af);
        (self.joint_head.forward(g, &self.store, jf), self.afford_head.forward(g, &self.store, af))
    }

    pub fn predict_clean(&self, state: &GuidanceState, bundle: &ConditionBundle, t: usize) -> GuidanceState {
        let mut g = Graph::new();
        let x_j = g.constant(state.joints.clone());
        let x_a = g.constant(state.affordance.clone());
        let bps = g.constant(bundle.bps.clone());
        let text = g.constant(Matrix::row_vector(bundle.text.clone()));
        let (j, a) = self.predict_clean_graph(&mut g, x_j, x_a, bps, text, t);
        GuidanceState { joints: g.value(j).clone(), affordance: g.value(a).clone() }
    }

    pub fn save(&self, path: &Path, config_hash: &str, step: u64) -> Result<()> {
        Ok(self.store.save(path, config_hash, step)?)
    }

    /// Loads parameters saved by [`save`](Self::save); returns the step count.
    pub fn load(&mut self, path: &Path) -> Result<u64> {
        let frozen: Vec<ParamId> = self.store.ids().filter(|&id| self.store.is_frozen(id)).collect();
        let m = self.store.load(path)?;
        for id in frozen {
            self.store.set_frozen(id, true);
        }
        Ok(m.step)
    }
}

fn hand_row(h: &JointSequence, f: usize) -> [f64; HAND_DIM] {
    let (l, r) = (h.get(f, 0), h.get(f, 1));
    [l[0], l[1], l[2], r[0], r[1], r[2]]
}

/// Affordance in `[0, 1]` to the diffusion range `[-1, 1]`.
pub fn affordance_to_signal(a: &Matrix) -> Matrix {
    a.map(|v| 2.0 * v - 1.0)
}

/// Diffusion range back to affordance, clamped into `(0, 1]`.
pub fn signal_to_affordance(x: &Matrix) -> Matrix {
    x.map(|v| (0.5 * (v + 1.0)).clamp(AFFORDANCE_FLOOR, 1.0))
}

/// One training clip with clean targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Stage1Example {
    pub bundle: ConditionBundle,
    pub clean: GuidanceState,
}

impl Stage1Example {
    /// `affordance` is the reduced `L x N` hand affordance in `[0, 1]`.
    pub fn new(model: &Stage1Model, bundle: ConditionBundle, hands: &JointSequence, affordance: &Matrix) -> Self {
        Self {
            bundle,
            clean: GuidanceState { joints: model.normalize_hands(hands), affordance: affordance_to_signal(affordance) },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage1Loss {
    pub joint: f64,
    pub affordance: f64,
    pub total: f64,
}

/// Mean absolute error between two equally shaped nodes.
pub fn l1_loss(g: &mut Graph, pred: Var, target: Var) -> Var {
    let d = g.sub(pred, target);
    let a = g.abs(d);
    g.mean(a)
}

/// Records the batch loss for fixed noise levels and noise draws.
pub fn batch_loss_graph(
    model: &Stage1Model,
    g: &mut Graph,
    batch: &[Stage1Example],
    steps: &[usize],
    noise: &[GuidanceState],
    schedule: &DiffusionSchedule,
) -> Result<(Var, Stage1Loss)> {
    let mut terms = Vec::with_capacity(batch.len());
    let (mut lj, mut la) = (0.0, 0.0);
    for ((ex, &t), n) in batch.iter().zip(steps).zip(noise) {
        let xj = forward_diffuse(&ex.clean.joints, t, &n.joints, schedule)?;
        let xa = forward_diffuse(&ex.clean.affordance, t, &n.affordance, schedule)?;
        let (xj, xa) = (g.constant(xj), g.constant(xa));
        let bps = g.constant(ex.bundle.bps.clone());
        let text = g.constant(Matrix::row_vector(ex.bundle.text.clone()));
        let (pj, pa) = model.predict_clean_graph(g, xj, xa, bps, text, t);
        let tj = g.constant(ex.clean.joints.clone());
        let ta = g.constant(ex.clean.affordance.clone());
        let ej = l1_loss(g, pj, tj);
        let ea = l1_loss(g, pa, ta);
        lj += g.value(ej).data()[0];
        la += g.value(ea).data()[0];
        terms.push(g.add(ej, ea));
    }
    let all = g.concat_cols(&terms);
    let total = g.mean(all);
    let n = batch.len() as f64;
    let loss = Stage1Loss { joint: lj / n, affordance: la / n, total: g.value(total).data()[0] };
    Ok((total, loss))
}

/// One optimizer update with random noise levels; returns the pre-update loss.
pub fn train_step<R: Rng + ?Sized>(
    model: &mut Stage1Model,
    opt: &mut AdamW,
    batch: &[Stage1Example],
    schedule: &DiffusionSchedule,
    rng: &mut R,
) -> Result<Stage1Loss> {
    if batch.is_empty() {
        return Err(CoreError::InvalidArgument("empty training batch".into()));
    }
    let steps: Vec<usize> = batch.iter().map(|_| rng.random_range(0..schedule.steps())).collect();
    let noise: Vec<GuidanceState> = batch
        .iter()
        .map(|ex| GuidanceState {
            joints: gaussian(ex.clean.joints.rows(), ex.clean.joints.cols(), rng),
            affordance: gaussian(ex.clean.affordance.rows(), ex.clean.affordance.cols(), rng),
        })
        .collect();
    let mut g = Graph::new();
    let (total, loss) = batch_loss_graph(model, &mut g, batch, &steps, &noise, schedule)?;
    if !loss.total.is_finite() {
        return Err(CoreError::NonFinite("stage-1 training loss".into()));
    }
    let mut grads = g.backward(total).param_grads(&model.store);
    clip_grad_norm(&mut grads, 1.0);
    opt.step(&mut model.store, &grads);
    Ok(loss)
}

/// Ancestral sampling of both signals for one clip.
pub fn sample(
    model: &Stage1Model,
    bundle: &ConditionBundle,
    schedule: &DiffusionSchedule,
    seed: u64,
) -> Result<GuidancePair> {
    let len = bundle.bps.rows();
    let n = model.config.n_points;
    let x = sample_plain(len, HAND_DIM + n, schedule, seed, |x, t| {
        let state = split_state(x, n);
        let p = model.predict_clean(&state, bundle, t);
        Ok(join_state(&p))
    })?;
    let state = split_state(&x, n);
    Ok(GuidancePair {
        hands: model.denormalize_hands(&state.joints)?,
        affordance: signal_to_affordance(&state.affordance),
    })
}

fn split_state(x: &Matrix, n: usize) -> GuidanceState {
    let len = x.rows();
    let mut joints = Matrix::zeros(len, HAND_DIM);
    let mut affordance = Matrix::zeros(len, n);
    for r in 0..len {
        joints.row_mut(r).copy_from_slice(&x.row(r)[..HAND_DIM]);
        affordance.row_mut(r).copy_from_slice(&x.row(r)[HAND_DIM..]);
    }
    GuidanceState { joints, affordance }
}

fn join_state(s: &GuidanceState) -> Matrix {
    let len = s.joints.rows();
    let w = HAND_DIM + s.affordance.cols();
    let mut out = Matrix::zeros(len, w);
    for r in 0..len {
        out.row_mut(r)[..HAND_DIM].copy_from_slice(s.joints.row(r));
        out.row_mut(r)[HAND_DIM..].copy_from_slice(s.affordance.row(r));
    }
    out
}
