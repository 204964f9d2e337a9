//! Phase-by-phase orchestration with on-disk checkpoints between phases.

use std::fs;
use std::path::{Path, PathBuf};

use hoimotion_nn::{AdamW, AdamWConfig, Matrix, ParamStore};
use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::affordance::{contact_mask, reduced_affordance, ContactMask};
use crate::annotation::{
    annotate_clip, annotate_fine, fine_request, infer_contact_events, summarize_trajectory, AnnotationRecord,
    EchoClient, HttpClient, HttpClientConfig, LanguageModelClient, ReplayClient, TemplateClient,
};
use crate::diffusion::DiffusionSchedule;
use crate::error::{CoreError, Result};
use crate::evaluator::{motion_descriptor, MotionEvaluator, TextMotionMatcher};
use crate::geometry::{encode_sequence, sample_basis, BasisPointSet};
use crate::io::{load_joints, load_matrix, load_motion, save_joints, save_matrix, save_motion};
use crate::metrics::{
    affordance_similarity, contact_scores, diversity, fid, foot_sliding, hand_jpe, left_jpe, mpjpe, r_score,
    right_jpe, EvalReport, Stage1Report, FOOT_SLIDING_HEIGHT, R_SCORE_BATCH,
};
use crate::motion::{recover_joints, FeatureNormalizer, MotionSequence};
use crate::skeleton::JointSequence;
use crate::stage1::{self, ConditionBundle, Stage1Config, Stage1Example, Stage1Model};
use crate::stage2::{
    encode_fine_text, guided_sample, train_base_step, train_controlnet, FusedCondition, GuidanceStats, GuidanceTarget, Stage2Config,
    Stage2Example, Stage2Model,
};
use crate::text::TextEncoder;

use super::config::{AnnotatorBackend, ModelConfig, PipelineConfig};
use super::dataset::{assign_split, load_annotations, save_annotations, InteractionClip, Split};
use super::runlog::RunLog;
use super::synthetic::{generate_mixed, SyntheticConfig};

/// Interval between logged training losses.
const LOG_EVERY: usize = 50;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    GenData,
    Annotate,
    TrainStage1,
    SampleStage1,
    TrainStage2,
    Sample,
    Evaluate,
}

impl Phase {
    pub const ALL: [Phase; 7] = [
        Phase::GenData,
        Phase::Annotate,
        Phase::TrainStage1,
        Phase::SampleStage1,
        Phase::TrainStage2,
        Phase::Sample,
        Phase::Evaluate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Phase::GenData => "gen-data",
            Phase::Annotate => "annotate",
            Phase::TrainStage1 => "train-stage1",
            Phase::SampleStage1 => "sample-stage1",
            Phase::TrainStage2 => "train-stage2",
            Phase::Sample => "sample",
            Phase::Evaluate => "evaluate",
        }
    }
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Output layout under the run directory.
#[derive(Clone, Debug)]
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }
    pub fn index(&self) -> PathBuf {
        self.root.join("data/index.json")
    }
    pub fn annotations(&self) -> PathBuf {
        self.root.join("annotations.jsonl")
    }
    pub fn stage1_model(&self) -> PathBuf {
        self.root.join("stage1/model.ckpt")
    }
    pub fn stage1_samples(&self) -> PathBuf {
        self.root.join("stage1/samples")
    }
    pub fn stage1_fine(&self) -> PathBuf {
        self.root.join("stage1/fine.jsonl")
    }
    pub fn stage2_base(&self) -> PathBuf {
        self.root.join("stage2/base.ckpt")
    }
    pub fn stage2_model(&self) -> PathBuf {
        self.root.join("stage2/model.ckpt")
    }
    pub fn samples(&self) -> PathBuf {
        self.root.join("samples")
    }
    pub fn guidance_stats(&self) -> PathBuf {
        self.root.join("samples/guidance.json")
    }
    pub fn report_json(&self) -> PathBuf {
        self.root.join("eval/report.json")
    }
    pub fn report_csv(&self) -> PathBuf {
        self.root.join("eval/report.csv")
    }
    pub fn marker(&self, phase: Phase) -> PathBuf {
        self.root.join("phases").join(format!("{}.done", phase.name()))
    }
}

fn missing(phase: Phase, path: &Path) -> CoreError {
    CoreError::MissingCheckpoint { phase: phase.name().to_owned(), path: path.display().to_string() }
}

fn require(phase: Phase, path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(missing(phase, path))
    }
}

pub fn stage1_config(cfg: &PipelineConfig) -> Stage1Config {
    let m = &cfg.stage1;
    Stage1Config {
        bps_width: 6 * cfg.geometry.bps_points,
        n_points: cfg.data.n_points,
        latent: m.latent,
        heads: m.heads,
        layers: m.layers,
        ff_dim: m.ff_dim,
        bps_hidden: m.bps_hidden,
        pc_dim: m.pc_dim,
    }
}

pub fn stage2_config(cfg: &PipelineConfig) -> Stage2Config {
    let m = &cfg.stage2;
    Stage2Config {
        bps_width: 6 * cfg.geometry.bps_points,
        n_points: cfg.data.n_points,
        latent: m.latent,
        heads: m.heads,
        layers: m.layers,
        ff_dim: m.ff_dim,
        bps_hidden: m.bps_hidden,
        pc_dim: m.pc_dim,
    }
}

/// Reduced hand affordance as an `L x N` matrix.
pub fn affordance_matrix(clip: &InteractionClip, hands: &JointSequence, sigma: f64) -> Result<Matrix> {
    let v = reduced_affordance(&clip.cloud, hands, sigma)?;
    Ok(Matrix::from_vec(clip.frames(), clip.cloud.points_per_frame(), v))
}

/// Stage-1 output for one test clip.
#[derive(Clone, Debug, PartialEq)]
pub struct Stage1Sample {
    pub hands: JointSequence,
    pub affordance: Matrix,
    pub fine_text: Vec<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct FineRecord {
    clip_id: String,
    fine_text: Vec<String>,
}

pub struct Pipeline {
    pub config: PipelineConfig,
    pub hash: String,
    pub paths: RunPaths,
    pub log: RunLog,
    short_text: TextEncoder,
    long_text: TextEncoder,
    basis: BasisPointSet,
}

fn load_checkpoint(store: &mut ParamStore, path: &Path, phase: Phase, hash: &str) -> Result<u64> {
    require(phase, path)?;
    let manifest = store.load(path)?;
    if manifest.config_hash != hash {
        log::warn!("{} was written under config {}, current is {hash}", path.display(), manifest.config_hash);
    }
    Ok(manifest.step)
}

impl Pipeline {
    pub fn new(config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        let hash = config.hash();
        let paths = RunPaths { root: config.paths.out_dir.clone() };
        fs::create_dir_all(&paths.root)?;
        fs::write(paths.root.join("config.toml"), config.to_toml())?;
        let log = RunLog::open(&paths.root.join("log.jsonl"))?;
        let mut short_text = TextEncoder::short(config.annotation.text_seed);
        short_text.freeze();
        let mut long_text = TextEncoder::long(config.annotation.text_seed.wrapping_add(1));
        long_text.freeze();
        let g = &config.geometry;
        let basis = sample_basis(g.bps_seed, g.bps_points, g.bps_radius)?;
        Ok(Self { config, hash, paths, log, short_text, long_text, basis })
    }

    pub fn is_done(&self, phase: Phase) -> bool {
        fs::read_to_string(self.paths.marker(phase)).is_ok_and(|h| h.trim() == self.hash)
    }

    fn mark_done(&self, phase: Phase) -> Result<()> {
        let p = self.paths.marker(phase);
        fs::create_dir_all(p.parent().expect("marker has a parent"))?;
        fs::write(p, &self.hash)?;
        Ok(())
    }

    /// Runs one phase. Finished phases are skipped unless `force` is set.
    pub fn run_phase(&mut self, phase: Phase, force: bool) -> Result<()> {
        if !force && self.is_done(phase) {
            self.log.event(phase.name(), "up to date, skipped");
            return Ok(());
        }
        self.log.event(phase.name(), "start");
        match phase {
            Phase::GenData => self.gen_data()?,
            Phase::Annotate => self.annotate()?,
            Phase::TrainStage1 => self.train_stage1()?,
            Phase::SampleStage1 => self.sample_stage1()?,
            Phase::TrainStage2 => self.train_stage2()?,
            Phase::Sample => self.sample()?,
            Phase::Evaluate => {
                self.evaluate()?;
            }
        }
        self.mark_done(phase)?;
        self.log.event(phase.name(), "done");
        Ok(())
    }

    /// Every phase in order, resuming from finished ones.
    pub fn run_all(&mut self) -> Result<EvalReport> {
        for phase in Phase::ALL {
            self.run_phase(phase, false)?;
        }
        self.load_report()
    }

    pub fn load_report(&self) -> Result<EvalReport> {
        let p = self.paths.report_json();
        require(Phase::Evaluate, &p)?;
        Ok(serde_json::from_str(&fs::read_to_string(p)?)?)
    }

    fn gen_data(&mut self) -> Result<()> {
        let d = &self.config.data;
        let syn = SyntheticConfig { frames: d.clip_len, fps: d.fps, n_points: d.n_points };
        let clips = generate_mixed(d.seed, d.n_clips, &syn)?;
        let mut ids = Vec::with_capacity(clips.len());
        for (i, c) in clips.iter().enumerate() {
            let clip = InteractionClip::from_synthetic(c, d.fps, assign_split(i, d.test_fraction))?;
            clip.save(&self.paths.data().join(&clip.id), &self.hash)?;
            ids.push(clip.id);
        }
        fs::write(self.paths.index(), serde_json::to_string_pretty(&ids)?)?;
        self.log.event(Phase::GenData.name(), &format!("{} clips", ids.len()));
        Ok(())
    }

    /// Clips in generation order, with annotations attached when present.
    pub fn load_clips(&self) -> Result<Vec<InteractionClip>> {
        let index = self.paths.index();
        require(Phase::GenData, &index)?;
        let ids: Vec<String> = serde_json::from_str(&fs::read_to_string(&index)?)?;
        let mut clips: Vec<InteractionClip> = ids
            .iter()
            .map(|id| InteractionClip::load(&self.paths.data().join(id), Some(&self.hash)))
            .collect::<Result<_>>()?;
        if self.paths.annotations().exists() {
            let recs = load_annotations(&self.paths.annotations())?;
            for c in &mut clips {
                c.annotation = recs.iter().find(|r| r.clip_id == c.id).cloned();
            }
        }
        Ok(clips)
    }

    pub fn annotated_clips(&self, phase: Phase) -> Result<Vec<InteractionClip>> {
        let clips = self.load_clips()?;
        require(Phase::Annotate, &self.paths.annotations())?;
        if let Some(c) = clips.iter().find(|c| c.annotation.is_none()) {
            return Err(CoreError::InvalidArgument(format!("{phase}: clip {} has no annotation", c.id)));
        }
        Ok(clips)
    }

    pub fn language_model(&self) -> Result<Box<dyn LanguageModelClient>> {
        Ok(match self.config.annotation.backend {
            AnnotatorBackend::Template => Box::new(TemplateClient),
            AnnotatorBackend::Echo => Box::new(EchoClient),
            AnnotatorBackend::Replay => {
                let p = self.config.annotation.replay_path.as_ref().ok_or_else(|| {
                    CoreError::Config("annotation.replay_path is required for the replay backend".into())
                })?;
                Box::new(ReplayClient::from_path(p)?)
            }
            AnnotatorBackend::Http => Box::new(HttpClient::new(HttpClientConfig::from_env()?)),
        })
    }

    fn annotate(&mut self) -> Result<()> {
        let clips = self.load_clips()?;
        let client = self.language_model()?;
        let tau = self.config.affordance.tau;
        let mut recs = Vec::with_capacity(clips.len());
        for c in &clips {
            let hands = c.joints().hands();
            let r = annotate_clip(&c.id, &c.cloud, &hands, &c.category, c.motion.fps, tau, client.as_ref())?;
            r.validate()?;
            recs.push(r);
        }
        save_annotations(&self.paths.annotations(), &recs)?;
        Ok(())
    }

    pub fn bps(&self, clip: &InteractionClip) -> Result<Matrix> {
        encode_sequence(&clip.cloud, &self.basis)
    }

    fn coarse(clip: &InteractionClip) -> &AnnotationRecord {
        clip.annotation.as_ref().expect("annotated clip")
    }

    pub fn stage1_bundle(&self, clip: &InteractionClip) -> Result<ConditionBundle> {
        Ok(ConditionBundle { text: self.short_text.encode(&Self::coarse(clip).coarse_text), bps: self.bps(clip)? })
    }

    fn schedule(m: &ModelConfig) -> Result<DiffusionSchedule> {
        DiffusionSchedule::cosine(m.diffusion_steps)
    }

    pub fn new_stage1_model(&self) -> Stage1Model {
        Stage1Model::new(stage1_config(&self.config), self.config.stage1.seed)
    }

    pub fn load_stage1_model(&self) -> Result<Stage1Model> {
        let mut m = self.new_stage1_model();
        load_checkpoint(&mut m.store, &self.paths.stage1_model(), Phase::TrainStage1, &self.hash)?;
        Ok(m)
    }

    /// Untrained stage-1 model with its hand normalizer fit on the train split.
    pub fn fresh_stage1_model(&self, clips: &[InteractionClip]) -> Stage1Model {
        let mut model = self.new_stage1_model();
        let hands: Vec<JointSequence> =
            clips.iter().filter(|c| c.split == Split::Train).map(|c| c.joints().hands()).collect();
        model.fit_hand_normalizer(hands.iter());
        model
    }

    /// Samples `model` on every test clip and scores hands and affordance against the references.
    pub fn stage1_report(&self, model: &Stage1Model, clips: &[InteractionClip]) -> Result<Stage1Report> {
        let schedule = Self::schedule(&self.config.stage1)?;
        let sigma = self.config.affordance.sigma;
        let (mut l, mut r, mut h, mut cos, mut k) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (i, c) in clips.iter().enumerate().filter(|(_, c)| c.split == Split::Test) {
            let seed = self.config.stage1.seed.wrapping_add(1000 + i as u64);
            let pair = stage1::sample(model, &self.stage1_bundle(c)?, &schedule, seed)?;
            let gt_hands = c.joints().hands();
            l += left_jpe(&pair.hands, &gt_hands)?;
            r += right_jpe(&pair.hands, &gt_hands)?;
            h += hand_jpe(&pair.hands, &gt_hands)?;
            let gt_aff = affordance_matrix(c, &gt_hands, sigma)?;
            cos += affordance_similarity(pair.affordance.data(), gt_aff.data())?;
            k += 1.0;
        }
        if k == 0.0 {
            return Err(CoreError::InvalidArgument("stage-1 report: no test clips".into()));
        }
        Ok(Stage1Report { left_jpe: l / k, right_jpe: r / k, hand_jpe: h / k, affordance_cos_sim: cos / k })
    }

    fn train_stage1(&mut self) -> Result<()> {
        let clips = self.annotated_clips(Phase::TrainStage1)?;
        let train: Vec<&InteractionClip> = clips.iter().filter(|c| c.split == Split::Train).collect();
        if train.is_empty() {
            return Err(CoreError::InvalidArgument("train-stage1: no training clips".into()));
        }
        let model = self.fresh_stage1_model(&clips);
        let hands: Vec<JointSequence> = train.iter().map(|c| c.joints().hands()).collect();
        let sigma = self.config.affordance.sigma;
        let examples: Vec<Stage1Example> = train
            .iter()
            .zip(&hands)
            .map(|(c, h)| Ok(Stage1Example::new(&model, self.stage1_bundle(c)?, h, &affordance_matrix(c, h, sigma)?)))
            .collect::<Result<_>>()?;
        let m = self.config.stage1.clone();
        let schedule = Self::schedule(&m)?;
        let mut model = model;
        let mut opt = AdamW::new(&model.store, AdamWConfig { lr: m.lr, ..Default::default() });
        let mut rng = ChaCha8Rng::seed_from_u64(m.seed.wrapping_add(1));
        for step in 0..m.train_steps {
            let batch: Vec<Stage1Example> = examples.choose_multiple(&mut rng, m.batch).cloned().collect();
            let loss = stage1::train_step(&mut model, &mut opt, &batch, &schedule, &mut rng)?;
            if step % LOG_EVERY == 0 || step + 1 == m.train_steps {
                self.log.loss(Phase::TrainStage1.name(), step as u64, loss.total);
            }
        }
        model.save(&self.paths.stage1_model(), &self.hash, m.train_steps as u64)?;
        Ok(())
    }

    fn sample_stage1(&mut self) -> Result<()> {
        let clips = self.annotated_clips(Phase::SampleStage1)?;
        let model = self.load_stage1_model()?;
        let schedule = Self::schedule(&self.config.stage1)?;
        let client = self.language_model()?;
        let tau = self.config.affordance.tau;
        let mut fine = Vec::new();
        for (i, c) in clips.iter().enumerate().filter(|(_, c)| c.split == Split::Test) {
            let seed = self.config.stage1.seed.wrapping_add(1000 + i as u64);
            let pair = stage1::sample(&model, &self.stage1_bundle(c)?, &schedule, seed)?;
            let summary = summarize_trajectory(&c.cloud, &c.category, c.motion.fps)?;
            let events = infer_contact_events(&pair.hands, &c.cloud, tau, c.motion.fps)?;
            let req = fine_request(&Self::coarse(c).coarse_text, &summary, &events)?;
            let text = annotate_fine(&req, client.as_ref())?;
            let dir = self.paths.stage1_samples().join(&c.id);
            fs::create_dir_all(&dir)?;
            save_joints(&dir.join("hands"), &pair.hands, &self.hash)?;
            save_matrix(&dir.join("affordance"), &pair.affordance, &[("config_hash", self.hash.clone().into())])?;
            fine.push(FineRecord { clip_id: c.id.clone(), fine_text: text });
        }
        let body: String = fine.iter().map(|r| serde_json::to_string(r).map(|s| s + "\n")).collect::<std::result::Result<_, _>>()?;
        fs::write(self.paths.stage1_fine(), body)?;
        Ok(())
    }

    /// Stage-1 outputs of every test clip, keyed by position in `clips`.
    pub fn load_stage1_samples(&self, clips: &[InteractionClip]) -> Result<Vec<(usize, Stage1Sample)>> {
        let fine_path = self.paths.stage1_fine();
        require(Phase::SampleStage1, &fine_path)?;
        let fine: Vec<FineRecord> = fs::read_to_string(&fine_path)?
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<_, _>>()?;
        let mut out = Vec::new();
        for (i, c) in clips.iter().enumerate().filter(|(_, c)| c.split == Split::Test) {
            let dir = self.paths.stage1_samples().join(&c.id);
            let hands_stem = dir.join("hands");
            require(Phase::SampleStage1, &hands_stem.with_extension("json"))?;
            let hands = load_joints(&hands_stem, Some(&self.hash))?;
            let affordance = load_matrix(&dir.join("affordance"), Some(&self.hash))?;
            let fine_text = fine
                .iter()
                .find(|r| r.clip_id == c.id)
                .map(|r| r.fine_text.clone())
                .ok_or_else(|| missing(Phase::SampleStage1, &fine_path))?;
            out.push((i, Stage1Sample { hands, affordance, fine_text }));
        }
        Ok(out)
    }

    pub fn new_stage2_model(&self) -> Stage2Model {
        Stage2Model::new(stage2_config(&self.config), self.config.stage2.seed)
    }

    /// Base denoiser from its checkpoint with the controlled branch attached.
    pub fn load_stage2_model(&self) -> Result<Stage2Model> {
        let mut m = self.new_stage2_model();
        load_checkpoint(&mut m.store, &self.paths.stage2_base(), Phase::TrainStage2, &self.hash)?;
        m.attach_controlnet(self.config.stage2.seed.wrapping_add(1));
        load_checkpoint(&mut m.store, &self.paths.stage2_model(), Phase::TrainStage2, &self.hash)?;
        Ok(m)
    }

    fn fused_condition(
        &self,
        clip: &InteractionClip,
        hands: &JointSequence,
        affordance: &Matrix,
        fine: &[String],
    ) -> Result<FusedCondition> {
        Ok(FusedCondition {
            text: self.short_text.encode(&Self::coarse(clip).coarse_text),
            text_fine: encode_fine_text(&self.long_text, fine)?,
            bps: self.bps(clip)?,
            hands: hands.clone(),
            affordance: affordance.clone(),
        })
    }

    fn train_stage2(&mut self) -> Result<()> {
        let clips = self.annotated_clips(Phase::TrainStage2)?;
        let train: Vec<&InteractionClip> = clips.iter().filter(|c| c.split == Split::Train).collect();
        if train.is_empty() {
            return Err(CoreError::InvalidArgument("train-stage2: no training clips".into()));
        }
        let m = self.config.stage2.clone();
        let mut model = self.new_stage2_model();
        let normalizer = FeatureNormalizer::fit(train.iter().map(|c| &c.motion.features))?;
        model.set_normalizer(&normalizer);
        let sigma = self.config.affordance.sigma;
        let examples: Vec<Stage2Example> = train
            .iter()
            .map(|c| {
                let hands = c.joints().hands();
                let aff = affordance_matrix(c, &hands, sigma)?;
                Ok(Stage2Example {
                    cond: self.fused_condition(c, &hands, &aff, &Self::coarse(c).fine_text)?,
                    clean: normalizer.normalize(&c.motion.features),
                })
            })
            .collect::<Result<_>>()?;
        let schedule = Self::schedule(&m)?;
        let adam = AdamWConfig { lr: m.lr, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(m.seed.wrapping_add(2));

        let mut opt = AdamW::new(&model.store, adam);
        for step in 0..m.base_steps {
            let batch: Vec<Stage2Example> = examples.choose_multiple(&mut rng, m.batch).cloned().collect();
            let loss = train_base_step(&mut model, &mut opt, &batch, &schedule, &mut rng)?;
            if step % LOG_EVERY == 0 || step + 1 == m.base_steps {
                self.log.record(Phase::TrainStage2.name(), Some(step as u64), Some(loss), "base");
            }
        }
        model.save(&self.paths.stage2_base(), &self.hash, m.base_steps as u64)?;

        model.attach_controlnet(m.seed.wrapping_add(1));
        let mut opt = AdamW::new(&model.store, adam);
        for step in 0..m.train_steps {
            let batch: Vec<Stage2Example> = examples.choose_multiple(&mut rng, m.batch).cloned().collect();
            let loss = train_controlnet(&mut model, &mut opt, &batch, &schedule, &mut rng)?;
            if step % LOG_EVERY == 0 || step + 1 == m.train_steps {
                self.log.record(Phase::TrainStage2.name(), Some(step as u64), Some(loss), "controlnet");
            }
        }
        model.save(&self.paths.stage2_model(), &self.hash, m.train_steps as u64)?;
        Ok(())
    }

    /// Guided sample of one test clip from its stage-1 output.
    pub fn sample_clip(
        &self,
        model: &Stage2Model,
        clip: &InteractionClip,
        s1: &Stage1Sample,
        seed: u64,
    ) -> Result<(MotionSequence, GuidanceStats)> {
        let cond = self.fused_condition(clip, &s1.hands, &s1.affordance, &s1.fine_text)?;
        let target = GuidanceTarget {
            hands: s1.hands.clone(),
            mask: contact_mask(&s1.hands, &clip.cloud, self.config.guidance.tau)?,
        };
        let schedule = Self::schedule(&self.config.stage2)?;
        guided_sample(model, &cond, &schedule, &self.config.guidance.weights(), &target, clip.motion.fps, seed)
    }

    fn sample(&mut self) -> Result<()> {
        let clips = self.annotated_clips(Phase::Sample)?;
        let s1 = self.load_stage1_samples(&clips)?;
        let model = self.load_stage2_model()?;
        let mut stats = Vec::new();
        for (i, s) in &s1 {
            let c = &clips[*i];
            let seed = self.config.guidance.seed.wrapping_add(*i as u64);
            let (motion, st) = self.sample_clip(&model, c, s, seed)?;
            save_motion(&self.paths.samples().join(&c.id).join("motion"), &motion, &self.hash)?;
            stats.push(serde_json::json!({ "clip_id": c.id, "stats": st }));
        }
        fs::create_dir_all(self.paths.samples())?;
        fs::write(self.paths.guidance_stats(), serde_json::to_string_pretty(&stats)?)?;
        Ok(())
    }

    fn load_samples(&self, clips: &[InteractionClip]) -> Result<Vec<(usize, MotionSequence)>> {
        clips
            .iter()
            .enumerate()
            .filter(|(_, c)| c.split == Split::Test)
            .map(|(i, c)| {
                let stem = self.paths.samples().join(&c.id).join("motion");
                require(Phase::Sample, &stem.with_extension("json"))?;
                Ok((i, load_motion(&stem, Some(&self.hash))?))
            })
            .collect()
    }

    fn evaluate(&mut self) -> Result<EvalReport> {
        let clips = self.annotated_clips(Phase::Evaluate)?;
        let s1 = self.load_stage1_samples(&clips)?;
        let generated = self.load_samples(&clips)?;
        let report = self.score(&clips, &s1, &generated)?;
        let json = self.paths.report_json();
        fs::create_dir_all(json.parent().expect("report has a parent"))?;
        fs::write(&json, serde_json::to_string_pretty(&report)?)?;
        fs::write(self.paths.report_csv(), report.to_csv())?;
        self.log.event(Phase::Evaluate.name(), &serde_json::to_string(&report)?);
        Ok(report)
    }

    /// Metrics of generated test motions against the reference clips.
    pub fn score(
        &mut self,
        clips: &[InteractionClip],
        s1: &[(usize, Stage1Sample)],
        generated: &[(usize, MotionSequence)],
    ) -> Result<EvalReport> {
        if generated.is_empty() {
            return Err(CoreError::InvalidArgument("evaluate: no test clips".into()));
        }
        let e = self.config.eval.clone();
        let tau = self.config.affordance.tau;
        let train: Vec<&InteractionClip> = clips.iter().filter(|c| c.split == Split::Train).collect();
        let train_desc: Vec<Vec<f64>> = train.iter().map(|c| motion_descriptor(&c.joints())).collect::<Result<_>>()?;
        let train_text: Vec<Vec<f64>> = train.iter().map(|c| self.short_text.encode(&Self::coarse(c).coarse_text)).collect();
        let mut evaluator = MotionEvaluator::new(e.seed);
        let ae = evaluator.train(&train_desc, e.evaluator_steps, e.seed.wrapping_add(1))?;
        self.log.record(Phase::Evaluate.name(), Some(e.evaluator_steps as u64), Some(ae), "motion evaluator");
        let mut matcher = TextMotionMatcher::new(e.seed.wrapping_add(2));
        if train.len() >= 2 {
            let ml = matcher.train(&train_desc, &train_text, e.evaluator_steps, e.seed.wrapping_add(3))?;
            self.log.record(Phase::Evaluate.name(), Some(e.evaluator_steps as u64), Some(ml), "matcher");
        }
        evaluator.save(&self.paths.root.join("eval/motion_evaluator.ckpt"), &self.hash)?;
        matcher.save(&self.paths.root.join("eval/matcher.ckpt"), &self.hash)?;

        let n = generated.len() as f64;
        let (mut hj, mut mp, mut fs_sum) = (0.0, 0.0, 0.0);
        let mut pred_mask = Vec::new();
        let mut gt_mask = Vec::new();
        let mut frames = 0;
        let mut gen_desc = Vec::new();
        let mut gt_desc = Vec::new();
        let mut texts = Vec::new();
        for (i, motion) in generated {
            let c = &clips[*i];
            let gt = c.joints();
            let pred = recover_joints(motion);
            hj += hand_jpe(&pred, &gt)?;
            mp += mpjpe(&pred, &gt)?;
            fs_sum += foot_sliding(&pred, FOOT_SLIDING_HEIGHT)?;
            pred_mask.extend(contact_mask(&pred.hands(), &c.cloud, tau)?.values);
            gt_mask.extend(contact_mask(&gt.hands(), &c.cloud, tau)?.values);
            frames += c.frames();
            gen_desc.push(motion_descriptor(&pred)?);
            gt_desc.push(motion_descriptor(&gt)?);
            texts.push(self.short_text.encode(&Self::coarse(c).coarse_text));
        }
        let mask = |values| ContactMask { frames, joints: 2, values, tau };
        let cs = contact_scores(&mask(pred_mask), &mask(gt_mask))?;
        let gen_feats = evaluator.embed(&gen_desc);
        let gt_feats = evaluator.embed(&gt_desc);
        let div = if gen_feats.rows() >= 2 { diversity(&gen_feats, e.diversity_pairs, e.seed)? } else { 0.0 };

        let stage1 = if s1.is_empty() {
            None
        } else {
            let (mut l, mut r, mut h, mut cos) = (0.0, 0.0, 0.0, 0.0);
            for (i, s) in s1 {
                let c = &clips[*i];
                let gt_hands = c.joints().hands();
                l += left_jpe(&s.hands, &gt_hands)?;
                r += right_jpe(&s.hands, &gt_hands)?;
                h += hand_jpe(&s.hands, &gt_hands)?;
                let gt_aff = affordance_matrix(c, &gt_hands, self.config.affordance.sigma)?;
                cos += affordance_similarity(s.affordance.data(), gt_aff.data())?;
            }
            let k = s1.len() as f64;
            Some(Stage1Report { left_jpe: l / k, right_jpe: r / k, hand_jpe: h / k, affordance_cos_sim: cos / k })
        };

        let report = EvalReport {
            clips: generated.len(),
            hand_jpe_cm: hj / n,
            mpjpe_cm: mp / n,
            c_prec: cs.precision,
            c_rec: cs.recall,
            c_acc: cs.accuracy,
            c_pct: cs.percentage,
            f1: cs.f1,
            fid: fid(&gen_feats, &gt_feats)?,
            r_score: r_score(&matcher.embed_motion(&gen_desc), &matcher.embed_text(&texts), R_SCORE_BATCH)?,
            diversity: div,
            fs: fs_sum / n,
            stage1,
        };
        report.validate()?;
        Ok(report)
    }
}

/// Runs every phase under `config.paths.out_dir`, resuming finished ones.
pub fn run_pipeline(config: &PipelineConfig) -> Result<EvalReport> {
    Pipeline::new(config.clone())?.run_all()
}
