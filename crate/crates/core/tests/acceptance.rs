//! Acceptance suite. Prints one PASS/FAIL line per criterion and fails if any
//! criterion fails. `ACCEPTANCE_ONLY=5,6` restricts the run to a subset.

mod common;

use std::io::Write;
use std::time::{Duration, Instant};

use hoimotion::affordance::{contact_mask, DEFAULT_TAU};
use hoimotion::annotation::{annotate_clip, score_text, Direction, TemplateClient};
use hoimotion::diffusion::{forward_diffuse, gaussian, sample_plain, DiffusionSchedule};
use hoimotion::harness::pipeline::{stage2_config, Stage1Sample};
use hoimotion::harness::{
    generate_mixed, run_pipeline, InteractionClip, Phase, Pipeline, PipelineConfig, Split, SyntheticConfig,
};
use hoimotion::metrics::{foot_sliding, FOOT_SLIDING_HEIGHT};
use hoimotion::motion::{recover_joints, FEATURE_DIM};
use hoimotion::skeleton::JointSequence;
use hoimotion::stage2::{train_controlnet, GuidanceTarget, Stage2Example, Stage2Model};
use hoimotion_nn::{AdamW, AdamWConfig, Graph, Matrix, ParamId, ParamStore};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn within(elapsed: Duration, budget_secs: u64) -> bool {
    elapsed < Duration::from_secs(budget_secs)
}

fn config(dir: &std::path::Path, n_clips: usize) -> PipelineConfig {
    let mut c = PipelineConfig::default();
    c.data.n_clips = n_clips;
    c.paths.out_dir = dir.to_path_buf();
    c
}

fn formula_oracles() -> Outcome {
    let start = Instant::now();
    let results = common::formula_oracles();
    let elapsed = start.elapsed();
    let ok = results.iter().all(|(_, err, tol)| err < tol);
    let worst: Vec<String> = results.iter().map(|(name, err, tol)| format!("{name} {err:.1e}<{tol:.0e}")).collect();
    outcome(
        ok && within(elapsed, 60),
        format!("{} fixtures each; {}; {:.1} s < 60 s", common::FIXTURES, worst.join(", "), elapsed.as_secs_f64()),
    )
}

fn gradient_checks() -> Outcome {
    let start = Instant::now();
    let results = common::gradient_checks();
    let elapsed = start.elapsed();
    let ok = results.iter().all(|(_, err)| *err < common::GRAD_TOL);
    let worst: Vec<String> = results.iter().map(|(name, err)| format!("{name} {err:.1e}")).collect();
    outcome(
        ok && within(elapsed, 300),
        format!("max relative error < 1e-3: {}; {:.1} s < 300 s", worst.join(", "), elapsed.as_secs_f64()),
    )
}

fn zero_init_identity() -> Outcome {
    let cfg = stage2_config(&PipelineConfig::default());
    let mut model = Stage2Model::new(cfg.clone(), 41);
    model.attach_controlnet(42);
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    let mut identical = 0;
    for i in 0..10u64 {
        let len = 8 + i as usize;
        let cond = common::random_condition(len, cfg.bps_width, cfg.n_points, 100 + i);
        let x_t = gaussian(len, FEATURE_DIM, &mut rng);
        let t = (7 * i as usize) % 50;
        let base = model.base_denoise(&x_t, &cond.text, t);
        let ctrl = model.controlnet_denoise(&x_t, &cond, t).unwrap();
        if base.data().iter().zip(ctrl.data()).all(|(a, b)| a.to_bits() == b.to_bits()) {
            identical += 1;
        }
    }

    let cond = common::random_condition(12, cfg.bps_width, cfg.n_points, 200);
    let target = gaussian(12, FEATURE_DIM, &mut rng);
    let mut g = Graph::new();
    let x = g.constant(gaussian(12, FEATURE_DIM, &mut rng));
    let cv = model.condition_vars(&mut g, &cond);
    let out = model.controlnet_denoise_graph(&mut g, x, cv, 10).unwrap();
    let tgt = g.constant(target.clone());
    let diff = g.sub(out, tgt);
    let abs = g.abs(diff);
    let loss = g.sum(abs);
    let grads = g.backward(loss).param_grads(&model.store);
    let ids = |store: &ParamStore, pfx: &str| -> Vec<ParamId> {
        store.ids().filter(|&id| store.name(id).starts_with(pfx)).collect()
    };
    let base_ids = ids(&model.store, "base.");
    let base_zero = base_ids.iter().all(|id| grads[id.index()].data().iter().all(|v| v.to_bits() == 0));
    let links_live = ids(&model.store, "control.link").iter().any(|id| grads[id.index()].data().iter().any(|v| *v != 0.0));

    let before: Vec<Matrix> = base_ids.iter().map(|&id| model.store.value(id).clone()).collect();
    let schedule = DiffusionSchedule::cosine(50).unwrap();
    let mut opt = AdamW::new(&model.store, AdamWConfig::default());
    let batch = vec![Stage2Example { cond, clean: target }];
    train_controlnet(&mut model, &mut opt, &batch, &schedule, &mut rng).unwrap();
    let after: Vec<Matrix> = base_ids.iter().map(|&id| model.store.value(id).clone()).collect();
    let base_unchanged = before == after;

    outcome(
        identical == 10 && base_zero && links_live && base_unchanged,
        format!(
            "{identical}/10 outputs bitwise equal, base grads all zero: {base_zero}, link grads non-zero: {links_live}, base unchanged by a training step: {base_unchanged}"
        ),
    )
}

fn diffusion_sanity() -> Outcome {
    let schedule = DiffusionSchedule::cosine(100).unwrap();
    let x0_row = [1.5, -0.7, 0.0, 2.0];
    let draws = 10_000;
    let x0 = Matrix::from_vec(draws, 4, x0_row.iter().cycle().take(4 * draws).copied().collect());
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let mut worst: f64 = 0.0;
    for t in [0, 10, 50, 99] {
        let noise = gaussian(draws, 4, &mut rng);
        let xt = forward_diffuse(&x0, t, &noise, &schedule).unwrap();
        let ab = schedule.alpha_bars[t];
        for (d, m) in x0_row.iter().enumerate() {
            let emp = (0..draws).map(|i| xt.get(i, d).powi(2)).sum::<f64>() / draws as f64;
            worst = worst.max(common::rel_err(emp, ab * m * m + (1.0 - ab)));
        }
    }

    let constant = Matrix::from_vec(3, 4, vec![0.25, -1.0, 3.0, 0.5, 0.0, 2.0, -0.3, 1.1, 0.7, -2.2, 0.05, 4.0]);
    let converged = sample_plain(3, 4, &schedule, 52, |_, _| Ok(constant.clone())).unwrap();
    let conv_err = converged.data().iter().zip(constant.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);

    let shrink = |x: &Matrix, t: usize| Ok(x.scale(0.5 + 0.001 * t as f64));
    let a = sample_plain(5, 4, &schedule, 53, shrink).unwrap();
    let b = sample_plain(5, 4, &schedule, 53, shrink).unwrap();
    let c = sample_plain(5, 4, &schedule, 54, shrink).unwrap();
    let deterministic = a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()) && a != c;

    outcome(
        worst <= 0.05 && conv_err <= 1e-4 && deterministic,
        format!(
            "second-moment rel err {:.2}% <= 5% over {draws} draws, constant model error {conv_err:.1e} <= 1e-4, same-seed bit equality: {deterministic}",
            100.0 * worst
        ),
    )
}

fn stage1_learning() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path(), 64);
    cfg.stage1.train_steps = 2000;
    let start = Instant::now();
    let mut pipe = Pipeline::new(cfg).unwrap();
    for p in [Phase::GenData, Phase::Annotate] {
        pipe.run_phase(p, false).unwrap();
    }
    let clips = pipe.annotated_clips(Phase::TrainStage1).unwrap();
    let untrained = pipe.stage1_report(&pipe.fresh_stage1_model(&clips), &clips).unwrap();
    pipe.run_phase(Phase::TrainStage1, false).unwrap();
    let trained = pipe.stage1_report(&pipe.load_stage1_model().unwrap(), &clips).unwrap();
    let elapsed = start.elapsed();
    let ratio = trained.hand_jpe / untrained.hand_jpe;
    outcome(
        ratio <= 0.5 && trained.affordance_cos_sim >= 0.6 && within(elapsed, 30 * 60),
        format!(
            "hand_jpe {:.2} cm vs untrained {:.2} cm (ratio {ratio:.3} <= 0.5), affordance cos {:.3} >= 0.6, {:.0} s < 1800 s",
            trained.hand_jpe,
            untrained.hand_jpe,
            trained.affordance_cos_sim,
            elapsed.as_secs_f64()
        ),
    )
}

/// Mean distance between predicted and target hands over masked (frame, hand) pairs.
fn masked_hand_distance(pred: &JointSequence, target: &GuidanceTarget) -> f64 {
    let hands = pred.hands();
    let (mut sum, mut n) = (0.0, 0usize);
    for l in 0..target.hands.frames() {
        for k in 0..2 {
            if target.mask.get(l, k) {
                let (a, b) = (hands.get(l, k), target.hands.get(l, k));
                sum += (0..3).map(|i| (a[i] - b[i]).powi(2)).sum::<f64>().sqrt();
                n += 1;
            }
        }
    }
    sum / n.max(1) as f64
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn guidance_efficacy() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path(), 16);
    cfg.stage2.base_steps = 300;
    cfg.stage2.train_steps = 300;
    let mut pipe = Pipeline::new(cfg).unwrap();
    for p in [Phase::GenData, Phase::Annotate, Phase::TrainStage2] {
        pipe.run_phase(p, false).unwrap();
    }
    let clips = pipe.annotated_clips(Phase::Sample).unwrap();
    let model = pipe.load_stage2_model().unwrap();
    let test: Vec<&InteractionClip> = clips.iter().filter(|c| c.split == Split::Test).collect();
    let sigma = pipe.config.affordance.sigma;
    let tau = pipe.config.guidance.tau;
    let (mut reductions, mut fs_plain, mut fs_guided) = (Vec::new(), 0.0, 0.0);
    for seed in 0..10u64 {
        let clip = test[seed as usize % test.len()];
        let hands = clip.joints().hands();
        let s1 = Stage1Sample {
            affordance: hoimotion::harness::pipeline::affordance_matrix(clip, &hands, sigma).unwrap(),
            fine_text: clip.annotation.as_ref().unwrap().fine_text.clone(),
            hands: hands.clone(),
        };
        let target = GuidanceTarget { mask: contact_mask(&hands, &clip.cloud, tau).unwrap(), hands };
        pipe.config.guidance.joint = false;
        pipe.config.guidance.foot = false;
        let (plain, _) = pipe.sample_clip(&model, clip, &s1, seed).unwrap();
        pipe.config.guidance.joint = true;
        pipe.config.guidance.foot = true;
        let (guided, _) = pipe.sample_clip(&model, clip, &s1, seed).unwrap();
        let (jp, jg) = (recover_joints(&plain), recover_joints(&guided));
        let (dp, dg) = (masked_hand_distance(&jp, &target), masked_hand_distance(&jg, &target));
        reductions.push(1.0 - dg / dp);
        fs_plain += foot_sliding(&jp, FOOT_SLIDING_HEIGHT).unwrap();
        fs_guided += foot_sliding(&jg, FOOT_SLIDING_HEIGHT).unwrap();
        eprintln!("seed {seed}: plain {dp:.4} m guided {dg:.4} m");
    }
    let med = median(reductions);
    let fs_ratio = fs_guided / fs_plain.max(1e-12);
    outcome(
        med >= 0.3 && fs_ratio <= 1.1,
        format!("median hand distance reduction {:.1}% >= 30%, FS ratio {fs_ratio:.3} <= 1.10", 100.0 * med),
    )
}

/// Direction labels named in "from the X side" / "from the X and Y sides".
fn direction_labels(sentence: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut rest = sentence;
    while let Some(i) = rest.find("from the ") {
        rest = &rest[i + "from the ".len()..];
        let end = rest.find(" side").unwrap_or(rest.len());
        out.extend(rest[..end].split(" and ").map(str::to_owned));
        rest = &rest[end..];
    }
    out
}

fn annotation_contract() -> Outcome {
    let cfg = SyntheticConfig::default();
    let clips = generate_mixed(61, 24, &cfg).unwrap();
    let legal: Vec<&str> = Direction::ALL.iter().map(|d| d.label()).collect();
    let (mut three, mut labels_ok, mut deterministic, mut perfect, mut labels_seen) = (0, true, true, true, 0);
    for c in &clips {
        let hands = c.joints.hands();
        let run = || annotate_clip(&c.id, &c.cloud, &hands, &c.category, cfg.fps, DEFAULT_TAU, &TemplateClient).unwrap();
        let (a, b) = (run(), run());
        deterministic &= a == b;
        three += usize::from(a.fine_text.len() == 3);
        for s in a.fine_text.iter().chain(std::iter::once(&a.coarse_text)) {
            for l in direction_labels(s) {
                labels_seen += 1;
                labels_ok &= legal.contains(&l.as_str());
            }
            let sc = score_text(s, s);
            perfect &= [sc.bleu4, sc.rouge1, sc.rouge2, sc.rouge_l].iter().all(|&v| v == 100.0);
        }
        labels_ok &= a.events.iter().flat_map(|e| &e.directions).all(|d| legal.contains(&d.label()));
    }
    let n = clips.len();
    outcome(
        three == n && labels_ok && labels_seen > 0 && deterministic && perfect,
        format!(
            "{three}/{n} clips with 3 phases, {labels_seen} direction labels all legal: {labels_ok}, deterministic: {deterministic}, self-score 100: {perfect}"
        ),
    )
}

fn end_to_end() -> Outcome {
    let (da, db) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let smoke = |dir: &std::path::Path| {
        let mut c = config(dir, 8);
        c.stage1.train_steps = 200;
        c.stage2.base_steps = 100;
        c.stage2.train_steps = 200;
        c.eval.evaluator_steps = 100;
        c
    };
    let start = Instant::now();
    let first = run_pipeline(&smoke(da.path()));
    let elapsed = start.elapsed();
    let second = run_pipeline(&smoke(db.path()));
    let (first, second) = match (first, second) {
        (Ok(a), Ok(b)) => (a, b),
        (a, b) => return outcome(false, format!("pipeline failed: {:?} / {:?}", a.err(), b.err())),
    };
    let valid = first.validate().is_ok() && first.clips > 0;
    let phases_done = {
        let pipe = Pipeline::new(smoke(da.path())).unwrap();
        Phase::ALL.iter().all(|&p| pipe.is_done(p))
    };
    let same_report = serde_json::to_string(&first).unwrap() == serde_json::to_string(&second).unwrap();
    let same_samples = {
        let read = |root: &std::path::Path| {
            let mut files: Vec<_> = walk(&root.join("samples"));
            files.sort();
            files.iter().map(|p| (p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(p).unwrap())).collect::<Vec<_>>()
        };
        let (a, b) = (read(da.path()), read(db.path()));
        !a.is_empty() && a == b
    };
    outcome(
        valid && phases_done && same_report && same_samples && within(elapsed, 600),
        format!(
            "all phases done: {phases_done}, report valid: {valid}, rerun report identical: {same_report}, sample files identical: {same_samples}, first run {:.0} s < 600 s",
            elapsed.as_secs_f64()
        ),
    )
}

fn walk(dir: &std::path::Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    if let Ok(entries) = std::fs::read_dir(dir) {
        for e in entries.flatten() {
            let p = e.path();
            if p.is_dir() {
                out.extend(walk(&p));
            } else {
                out.push(p);
            }
        }
    }
    out
}

type Criterion = (usize, &'static str, fn() -> Outcome);

#[test]
fn acceptance() {
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let criteria: Vec<Criterion> = vec![
        (1, "formula oracles", formula_oracles),
        (2, "gradient checks", gradient_checks),
        (3, "zero-init controlnet identity", zero_init_identity),
        (4, "diffusion sanity", diffusion_sanity),
        (5, "stage-1 learning signal", stage1_learning),
        (6, "guidance efficacy", guidance_efficacy),
        (7, "annotation contract", annotation_contract),
        (8, "end-to-end pipeline", end_to_end),
    ];
    let mut failed = Vec::new();
    for (id, name, run) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let start = Instant::now();
        let r = run();
        let verdict = if r.pass { "PASS" } else { "FAIL" };
        // written to the handle so the line shows without --nocapture
        let mut out = std::io::stdout().lock();
        writeln!(out, "[{verdict}] {id}. {name}: {} ({:.1} s)", r.detail, start.elapsed().as_secs_f64()).unwrap();
        out.flush().unwrap();
        if !r.pass {
            failed.push(id);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
