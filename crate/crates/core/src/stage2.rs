//! Motion generation: a text-conditioned base denoiser, a trainable copy
//! that injects geometric conditions through zero-initialized links, and
//! guided ancestral sampling.

use std::path::Path;

use hoimotion_nn::{
    clip_grad_norm, positional_encoding, sinusoidal_embedding, AdamW, CrossAttentionBlock, Graph, Linear, Matrix,
    Mlp, ParamId, ParamStore, TransformerBlock, Var,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::affordance::ContactMask;
use crate::diffusion::{forward_diffuse, gaussian, sample_ancestral, DiffusionSchedule};
use crate::error::{CoreError, Result};
use crate::guidance::{
    foot_contact_flags, foot_guidance_loss_graph, joint_guidance_loss_graph, GuidanceWeights,
};
use crate::lbfgs::{minimize, LbfgsConfig};
use crate::motion::{recover_joints_graph, FeatureNormalizer, MotionSequence, FEATURE_DIM};
use crate::skeleton::JointSequence;
use crate::stage1::{l1_loss, HAND_DIM, PC_DIM};
use crate::text::{TextEncoder, TEXT_DIM};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage2Config {
    pub bps_width: usize,
    pub n_points: usize,
    pub latent: usize,
    pub heads: usize,
    pub layers: usize,
    pub ff_dim: usize,
    pub bps_hidden: usize,
    pub pc_dim: usize,
}

impl Stage2Config {
    pub fn new(bps_width: usize, n_points: usize) -> Self {
        Self { bps_width, n_points, latent: 64, heads: 4, layers: 2, ff_dim: 128, bps_hidden: 128, pc_dim: PC_DIM }
    }
}

/// Embedding of the three fine-grained phase sentences with the long encoder.
pub fn encode_fine_text(encoder: &TextEncoder, sentences: &[String]) -> Result<Vec<f64>> {
    if sentences.len() != 3 {
        return Err(CoreError::PhaseCount(sentences.len()));
    }
    Ok(encoder.encode_phases(sentences))
}

/// Everything the controlled denoiser conditions on for one clip.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedCondition {
    /// Coarse sentence embedding.
    pub text: Vec<f64>,
    /// Fine-grained phases embedding.
    pub text_fine: Vec<f64>,
    /// Raw BPS features, `L x bps_width`.
    pub bps: Matrix,
    /// Hand trajectory, `L x 2` joints.
    pub hands: JointSequence,
    /// Reduced affordance, `L x N`.
    pub affordance: Matrix,
}

/// Text-conditioned transformer denoiser predicting clean features.
#[derive(Clone, Debug)]
pub struct MotionDenoiser {
    input: Linear,
    time_mlp: Mlp,
    cond_proj: Linear,
    layers: Vec<TransformerBlock>,
    output: Linear,
}

impl MotionDenoiser {
    fn new<R: Rng>(store: &mut ParamStore, prefix: &str, c: &Stage2Config, rng: &mut R) -> Self {
        let d = c.latent;
        Self {
            input: Linear::new(store, &format!("{prefix}.input"), FEATURE_DIM, d, rng),
            time_mlp: Mlp::new(store, &format!("{prefix}.time"), &[d, d, d], rng),
            cond_proj: Linear::new(store, &format!("{prefix}.cond"), TEXT_DIM + d, d, rng),
            layers: (0..c.layers)
                .map(|i| TransformerBlock::new(store, &format!("{prefix}.layer.{i}"), d, c.heads, c.ff_dim, rng))
                .collect(),
            output: Linear::new(store, &format!("{prefix}.output"), d, FEATURE_DIM, rng),
        }
    }

    fn duplicate(&self, store: &mut ParamStore, prefix: &str) -> Self {
        Self {
            input: self.input.duplicate(store, &format!("{prefix}.input")),
            time_mlp: self.time_mlp.duplicate(store, &format!("{prefix}.time")),
            cond_proj: self.cond_proj.duplicate(store, &format!("{prefix}.cond")),
            layers: self
                .layers
                .iter()
                .enumerate()
                .map(|(i, l)| l.duplicate(store, &format!("{prefix}.layer.{i}")))
                .collect(),
            output: self.output.duplicate(store, &format!("{prefix}.output")),
        }
    }

    /// Input embedding plus the text-and-step condition, before the layers.
    fn embed(&self, g: &mut Graph, store: &ParamStore, x_t: Var, text: Var, t: usize) -> Var {
        let (len, _) = g.shape(x_t);
        let d = self.input.out_dim;
        let h = self.input.forward(g, store, x_t);
        let pe = g.constant(positional_encoding(len, d));
        let h = g.add(h, pe);
        let temb = g.constant(Matrix::row_vector(sinusoidal_embedding(t as f64, d)));
        let temb = self.time_mlp.forward(g, store, temb);
        let ct = g.concat_cols(&[text, temb]);
        let cond = self.cond_proj.forward(g, store, ct);
        g.add_row(h, cond)
    }
}

/// Trainable copy of the base layers plus the condition encoders.
#[derive(Clone, Debug)]
pub struct ControlNet {
    copy: MotionDenoiser,
    cond_in: Linear,
    pub links: Vec<Linear>,
    project_bps: Mlp,
    afford_mlp: Mlp,
    afford_temporal: TransformerBlock,
    joint_mlp: Mlp,
    pub joint_cross: CrossAttentionBlock,
}

/// Tape nodes of a [`FusedCondition`].
#[derive(Clone, Copy, Debug)]
pub struct ConditionVars {
    pub text: Var,
    pub text_fine: Var,
    pub bps: Var,
    pub hands: Var,
    pub affordance: Var,
}

pub struct Stage2Model {
    pub config: Stage2Config,
    pub store: ParamStore,
    feat_mean: ParamId,
    feat_std: ParamId,
    pub base: MotionDenoiser,
    pub control: Option<ControlNet>,
}

fn repeat_rows(g: &mut Graph, row: Var, len: usize) -> Var {
    let idx = vec![0; len];
    g.select_rows(row, &idx)
}

fn hands_matrix(h: &JointSequence) -> Matrix {
    let mut m = Matrix::zeros(h.frames(), HAND_DIM);
    for f in 0..h.frames() {
        let (l, r) = (h.get(f, 0), h.get(f, 1));
        m.row_mut(f).copy_from_slice(&[l[0], l[1], l[2], r[0], r[1], r[2]]);
    }
    m
}

impl Stage2Model {
    /// Base denoiser only; see [`attach_controlnet`](Self::attach_controlnet).
    pub fn new(config: Stage2Config, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let feat_mean = store.add("stage2.feat_mean", Matrix::zeros(1, FEATURE_DIM));
        let feat_std = store.add("stage2.feat_std", Matrix::filled(1, FEATURE_DIM, 1.0));
        store.set_frozen(feat_mean, true);
        store.set_frozen(feat_std, true);
        let base = MotionDenoiser::new(&mut store, "base", &config, &mut rng);
        Self { config, store, feat_mean, feat_std, base, control: None }
    }

    pub fn set_normalizer(&mut self, n: &FeatureNormalizer) {
        *self.store.value_mut(self.feat_mean) = Matrix::row_vector(n.mean.clone());
        *self.store.value_mut(self.feat_std) = Matrix::row_vector(n.std.clone());
    }

    pub fn normalizer(&self) -> FeatureNormalizer {
        FeatureNormalizer {
            mean: self.store.value(self.feat_mean).data().to_vec(),
            std: self.store.value(self.feat_std).data().to_vec(),
        }
    }

    /// Freezes the base and adds the controlled branch: a copy of the
    /// current base weights, condition encoders, and zero links.
    pub fn attach_controlnet(&mut self, seed: u64) {
        if self.control.is_some() {
            return;
        }
        self.store.freeze_prefix("base.");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = self.config.clone();
        let d = c.latent;
        let store = &mut self.store;
        let copy = self.base.duplicate(store, "control.copy");
        let cond_in = Linear::new(store, "control.cond_in", 2 * TEXT_DIM + d, d, &mut rng);
        let links = (0..c.layers).map(|i| Linear::zeros(store, &format!("control.link.{i}"), d, d)).collect();
        let project_bps = Mlp::new(store, "control.project_bps", &[c.bps_width, c.bps_hidden, c.pc_dim], &mut rng);
        let afford_mlp = Mlp::new(store, "control.afford_mlp", &[c.pc_dim + c.n_points, d, d, d], &mut rng);
        let afford_temporal = TransformerBlock::new(store, "control.afford_temporal", d, c.heads, c.ff_dim, &mut rng);
        let joint_mlp = Mlp::new(store, "control.joint_mlp", &[HAND_DIM, d, d], &mut rng);
        let joint_cross = CrossAttentionBlock::new(store, "control.joint_cross", d, c.heads, &mut rng);
        self.control = Some(ControlNet {
            copy,
            cond_in,
            links,
            project_bps,
            afford_mlp,
            afford_temporal,
            joint_mlp,
            joint_cross,
        });
    }

    fn control(&self) -> Result<&ControlNet> {
        self.control
            .as_ref()
            .ok_or_else(|| CoreError::InvalidArgument("the controlled branch has not been attached".into()))
    }

    pub fn condition_vars(&self, g: &mut Graph, cond: &FusedCondition) -> ConditionVars {
        ConditionVars {
            text: g.constant(Matrix::row_vector(cond.text.clone())),
            text_fine: g.constant(Matrix::row_vector(cond.text_fine.clone())),
            bps: g.constant(cond.bps.clone()),
            hands: g.constant(hands_matrix(&cond.hands)),
            affordance: g.constant(cond.affordance.clone()),
        }
    }

    /// `TemporalTransformer(MLP(f_pc ⊕ A'))`
    pub fn fuse_affordance(&self, g: &mut Graph, f_pc: Var, affordance: Var) -> Result<Var> {
        let c = self.control()?;
        let x = g.concat_cols(&[f_pc, affordance]);
        let h = c.afford_mlp.forward(g, &self.store, x);
        let (len, d) = g.shape(h);
        let pe = g.constant(positional_encoding(len, d));
        let h = g.add(h, pe);
        Ok(c.afford_temporal.forward(g, &self.store, h))
    }

    /// Hand features query the fused geometry features (residual).
    pub fn fuse_joints(&self, g: &mut Graph, hands: Var, fused: Var) -> Result<Var> {
        let c = self.control()?;
        let q = c.joint_mlp.forward(g, &self.store, hands);
        Ok(c.joint_cross.forward(g, &self.store, q, fused))
    }

    /// Per-frame condition `[f_text, f_text_fine, F_fusion]`.
    pub fn condition_sequence(&self, g: &mut Graph, cv: ConditionVars) -> Result<Var> {
        let c = self.control()?;
        let f_pc = c.project_bps.forward(g, &self.store, cv.bps);
        let fused = self.fuse_affordance(g, f_pc, cv.affordance)?;
        let fusion = self.fuse_joints(g, cv.hands, fused)?;
        let len = g.shape(fusion).0;
        let t = repeat_rows(g, cv.text, len);
        let tf = repeat_rows(g, cv.text_fine, len);
        Ok(g.concat_cols(&[t, tf, fusion]))
    }

    pub fn base_denoise_graph(&self, g: &mut Graph, x_t: Var, text: Var, t: usize) -> Var {
        let mut h = self.base.embed(g, &self.store, x_t, text, t);
        for layer in &self.base.layers {
            h = layer.forward(g, &self.store, h);
        }
        self.base.output.forward(g, &self.store, h)
    }

    pub fn controlnet_denoise_graph(&self, g: &mut Graph, x_t: Var, cv: ConditionVars, t: usize) -> Result<Var> {
        let c = self.control()?;
        let seq = self.condition_sequence(g, cv)?;
        let mut hb = self.base.embed(g, &self.store, x_t, cv.text, t);
        let hc = c.copy.embed(g, &self.store, x_t, cv.text, t);
        let inj = c.cond_in.forward(g, &self.store, seq);
        let mut hc = g.add(hc, inj);
        for ((base_layer, copy_layer), link) in self.base.layers.iter().zip(&c.copy.layers).zip(&c.links) {
            hc = copy_layer.forward(g, &self.store, hc);
            hb = base_layer.forward(g, &self.store, hb);
            let l = link.forward(g, &self.store, hc);
            hb = g.add(hb, l);
        }
        Ok(self.base.output.forward(g, &self.store, hb))
    }

    pub fn base_denoise(&self, x_t: &Matrix, text: &[f64], t: usize) -> Matrix {
        let mut g = Graph::new();
        let x = g.constant(x_t.clone());
        let tx = g.constant(Matrix::row_vector(text.to_vec()));
        let out = self.base_denoise_graph(&mut g, x, tx, t);
        g.value(out).clone()
    }

    /// Clean estimate from the controlled model.
    pub fn controlnet_denoise(&self, x_t: &Matrix, cond: &FusedCondition, t: usize) -> Result<Matrix> {
        let mut g = Graph::new();
        let x = g.constant(x_t.clone());
        let cv = self.condition_vars(&mut g, cond);
        let out = self.controlnet_denoise_graph(&mut g, x, cv, t)?;
        Ok(g.value(out).clone())
    }

    pub fn save(&self, path: &Path, config_hash: &str, step: u64) -> Result<()> {
        Ok(self.store.save(path, config_hash, step)?)
    }

    pub fn load(&mut self, path: &Path) -> Result<u64> {
        Ok(self.store.load(path)?.step)
    }
}

/// One training clip: condition plus normalized clean features.
#[derive(Clone, Debug, PartialEq)]
pub struct Stage2Example {
    pub cond: FusedCondition,
    pub clean: Matrix,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage2Phase {
    Base,
    ControlNet,
}

/// Batch L1 loss between predicted and clean features at given steps and noise.
pub fn batch_loss_graph(
    model: &Stage2Model,
    g: &mut Graph,
    batch: &[Stage2Example],
    steps: &[usize],
    noise: &[Matrix],
    schedule: &DiffusionSchedule,
    phase: Stage2Phase,
) -> Result<Var> {
    let mut terms = Vec::with_capacity(batch.len());
    for ((ex, &t), n) in batch.iter().zip(steps).zip(noise) {
        let x_t = g.constant(forward_diffuse(&ex.clean, t, n, schedule)?);
        let pred = match phase {
            Stage2Phase::Base => {
                let text = g.constant(Matrix::row_vector(ex.cond.text.clone()));
                model.base_denoise_graph(g, x_t, text, t)
            }
            Stage2Phase::ControlNet => {
                let cv = model.condition_vars(g, &ex.cond);
                model.controlnet_denoise_graph(g, x_t, cv, t)?
            }
        };
        let target = g.constant(ex.clean.clone());
        terms.push(l1_loss(g, pred, target));
    }
    let all = g.concat_cols(&terms);
    Ok(g.mean(all))
}

fn train_step_phase<R: Rng + ?Sized>(
    model: &mut Stage2Model,
    opt: &mut AdamW,
    batch: &[Stage2Example],
    schedule: &DiffusionSchedule,
    rng: &mut R,
    phase: Stage2Phase,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(CoreError::InvalidArgument("empty training batch".into()));
    }
    let steps: Vec<usize> = batch.iter().map(|_| rng.random_range(0..schedule.steps())).collect();
    let noise: Vec<Matrix> = batch.iter().map(|ex| gaussian(ex.clean.rows(), ex.clean.cols(), rng)).collect();
    let mut g = Graph::new();
    let loss = batch_loss_graph(model, &mut g, batch, &steps, &noise, schedule, phase)?;
    let value = g.value(loss).data()[0];
    if !value.is_finite() {
        return Err(CoreError::NonFinite("stage-2 training loss".into()));
    }
    let mut grads = g.backward(loss).param_grads(&model.store);
    clip_grad_norm(&mut grads, 1.0);
    opt.step(&mut model.store, &grads);
    Ok(value)
}

/// One update of the base denoiser (before the controlled branch exists).
pub fn train_base_step<R: Rng + ?Sized>(
    model: &mut Stage2Model,
    opt: &mut AdamW,
    batch: &[Stage2Example],
    schedule: &DiffusionSchedule,
    rng: &mut R,
) -> Result<f64> {
    train_step_phase(model, opt, batch, schedule, rng, Stage2Phase::Base)
}

/// One update of the controlled branch; the base stays frozen.
pub fn train_controlnet<R: Rng + ?Sized>(
    model: &mut Stage2Model,
    opt: &mut AdamW,
    batch: &[Stage2Example],
    schedule: &DiffusionSchedule,
    rng: &mut R,
) -> Result<f64> {
    model.control()?;
    train_step_phase(model, opt, batch, schedule, rng, Stage2Phase::ControlNet)
}

/// Hand targets and the frames where they apply.
#[derive(Clone, Debug, PartialEq)]
pub struct GuidanceTarget {
    /// `L x 2` hand positions.
    pub hands: JointSequence,
    pub mask: ContactMask,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GuidanceStats {
    pub refined_steps: usize,
    pub skipped_steps: usize,
    pub loss_before: f64,
    pub loss_after: f64,
}

/// Guidance objective over a flattened normalized mean, with its gradient.
pub fn guidance_objective(
    mu: &[f64],
    rows: usize,
    normalizer: &FeatureNormalizer,
    fps: f64,
    target: &GuidanceTarget,
    contacts: &[[bool; 2]],
    w: &GuidanceWeights,
) -> (f64, Vec<f64>) {
    let mut g = Graph::new();
    let x = g.leaf(Matrix::from_vec(rows, FEATURE_DIM, mu.to_vec()), true);
    let raw = normalizer.denormalize_graph(&mut g, x);
    let jv = recover_joints_graph(&mut g, raw, fps);
    let mut parts = Vec::new();
    if w.joint_weight != 0.0 {
        let l = joint_guidance_loss_graph(&mut g, jv, &target.hands, &target.mask);
        parts.push(g.scale(l, w.joint_weight));
    }
    if w.foot_weight != 0.0 {
        let l = foot_guidance_loss_graph(&mut g, jv, contacts, w);
        parts.push(g.scale(l, w.foot_weight));
    }
    if parts.is_empty() {
        return (0.0, vec![0.0; mu.len()]);
    }
    let all = g.concat_cols(&parts);
    let total = g.sum(all);
    let value = g.value(total).data()[0];
    let grads = g.backward(total);
    let grad = grads.wrt(x).map_or_else(|| vec![0.0; mu.len()], |m| m.data().to_vec());
    (value, grad)
}

/// Refines a normalized posterior mean in place; returns whether it ran.
pub fn refine_mean(
    mean: &mut Matrix,
    normalizer: &FeatureNormalizer,
    fps: f64,
    target: &GuidanceTarget,
    w: &GuidanceWeights,
    stats: &mut GuidanceStats,
) -> bool {
    let raw = normalizer.denormalize(mean);
    let contacts = match MotionSequence::new(raw, fps) {
        Ok(m) => foot_contact_flags(&m),
        Err(_) => {
            stats.skipped_steps += 1;
            return false;
        }
    };
    let rows = mean.rows();
    let cfg = LbfgsConfig { max_iters: w.lbfgs_iters, ..Default::default() };
    let result = minimize(
        mean.data().to_vec(),
        |mu| Ok(guidance_objective(mu, rows, normalizer, fps, target, &contacts, w)),
        cfg,
    );
    match result {
        Ok(r) if r.f <= r.f_initial => {
            if stats.refined_steps == 0 {
                stats.loss_before = r.f_initial;
            }
            stats.loss_after = r.f;
            stats.refined_steps += 1;
            *mean = Matrix::from_vec(rows, FEATURE_DIM, r.x);
            true
        }
        Ok(_) => {
            stats.skipped_steps += 1;
            false
        }
        Err(e) => {
            log::warn!("guidance skipped: {e}");
            stats.skipped_steps += 1;
            false
        }
    }
}

/// Ancestral sampling from the controlled model with optional refinement of
/// each posterior mean. With guidance inactive this is plain sampling.
pub fn guided_sample(
    model: &Stage2Model,
    cond: &FusedCondition,
    schedule: &DiffusionSchedule,
    weights: &GuidanceWeights,
    target: &GuidanceTarget,
    fps: f64,
    seed: u64,
) -> Result<(MotionSequence, GuidanceStats)> {
    weights.validate()?;
    let len = cond.bps.rows();
    let normalizer = model.normalizer();
    let mut stats = GuidanceStats::default();
    let x = sample_ancestral(
        len,
        FEATURE_DIM,
        schedule,
        seed,
        |x, t| model.controlnet_denoise(x, cond, t),
        |_, mean, _, _| {
            if weights.is_active() {
                refine_mean(mean, &normalizer, fps, target, weights, &mut stats);
            }
            Ok(())
        },
    )?;
    let mut motion = MotionSequence::new(normalizer.denormalize(&x), fps)?;
    motion.binarize_contacts();
    Ok((motion, stats))
}
