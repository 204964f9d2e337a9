//! Feature extractors used by FID, diversity and R-score: a motion
//! autoencoder and a contrastive text/motion matcher, both trained on the
//! reference clips.

use std::path::Path;

use hoimotion_nn::{clip_grad_norm, AdamW, AdamWConfig, Graph, Linear, Matrix, Mlp, ParamId, ParamStore, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};
use crate::skeleton::{JointSequence, NUM_JOINTS, PELVIS};
use crate::text::TEXT_DIM;

/// Frames sampled from each clip for the descriptor.
pub const DESCRIPTOR_FRAMES: usize = 10;
pub const DESCRIPTOR_DIM: usize = DESCRIPTOR_FRAMES * NUM_JOINTS * 3;
pub const EMBED_DIM: usize = 32;

/// Evenly sampled joints relative to the first frame's pelvis on the ground plane.
pub fn motion_descriptor(joints: &JointSequence) -> Result<Vec<f64>> {
    if joints.joints() != NUM_JOINTS || joints.frames() == 0 {
        return Err(CoreError::Shape(format!("descriptor needs {NUM_JOINTS}-joint frames")));
    }
    let l = joints.frames();
    let origin = joints.get(0, PELVIS);
    let mut out = Vec::with_capacity(DESCRIPTOR_DIM);
    for k in 0..DESCRIPTOR_FRAMES {
        let f = if DESCRIPTOR_FRAMES == 1 { 0 } else { k * (l - 1) / (DESCRIPTOR_FRAMES - 1) };
        for p in joints.frame(f) {
            out.extend_from_slice(&[p[0] - origin[0], p[1], p[2] - origin[2]]);
        }
    }
    Ok(out)
}

fn stack(rows: &[Vec<f64>]) -> Matrix {
    Matrix::from_rows(rows)
}

/// Per-column standardization fitted on the training descriptors.
fn fit_standardizer(store: &mut ParamStore, mean: ParamId, std: ParamId, x: &Matrix) {
    let (n, k) = x.shape();
    let mut mu = vec![0.0; k];
    let mut sd = vec![0.0; k];
    for r in 0..n {
        mu.iter_mut().zip(x.row(r)).for_each(|(m, v)| *m += v / n as f64);
    }
    for r in 0..n {
        sd.iter_mut().zip(x.row(r)).zip(&mu).for_each(|((s, v), m)| *s += (v - m).powi(2) / n as f64);
    }
    *store.value_mut(mean) = Matrix::row_vector(mu);
    *store.value_mut(std) = Matrix::row_vector(sd.into_iter().map(|v| 1.0 / v.sqrt().max(1e-2)).collect());
}

fn standardize(g: &mut Graph, store: &ParamStore, mean: ParamId, inv_std: ParamId, x: Var) -> Var {
    let m = g.param(store, mean);
    let neg = g.scale(m, -1.0);
    let c = g.add_row(x, neg);
    let s = g.param(store, inv_std);
    g.mul_row(c, s)
}

/// Rows scaled to unit length.
fn l2_rows(g: &mut Graph, x: Var) -> Var {
    let sq = g.square(x);
    let n = g.sum_cols(sq);
    let n = g.add_scalar(n, 1e-8);
    let ln = g.ln(n);
    let half = g.scale(ln, -0.5);
    let inv = g.exp(half);
    g.mul_col(x, inv)
}

/// Autoencoder whose bottleneck gives the FID and diversity features.
pub struct MotionEvaluator {
    pub store: ParamStore,
    mean: ParamId,
    inv_std: ParamId,
    encoder: Mlp,
    decoder: Mlp,
}

impl MotionEvaluator {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mean = store.add("eval.mean", Matrix::zeros(1, DESCRIPTOR_DIM));
        let inv_std = store.add("eval.inv_std", Matrix::filled(1, DESCRIPTOR_DIM, 1.0));
        store.set_frozen(mean, true);
        store.set_frozen(inv_std, true);
        let encoder = Mlp::new(&mut store, "eval.encoder", &[DESCRIPTOR_DIM, 128, EMBED_DIM], &mut rng);
        let decoder = Mlp::new(&mut store, "eval.decoder", &[EMBED_DIM, 128, DESCRIPTOR_DIM], &mut rng);
        Self { store, mean, inv_std, encoder, decoder }
    }

    fn encode_graph(&self, g: &mut Graph, x: Var) -> Var {
        let z = standardize(g, &self.store, self.mean, self.inv_std, x);
        self.encoder.forward(g, &self.store, z)
    }

    /// Trains on reconstruction error; returns the final batch loss.
    pub fn train(&mut self, descriptors: &[Vec<f64>], steps: usize, seed: u64) -> Result<f64> {
        if descriptors.is_empty() {
            return Err(CoreError::InvalidArgument("no clips to train the motion evaluator".into()));
        }
        let all = stack(descriptors);
        fit_standardizer(&mut self.store, self.mean, self.inv_std, &all);
        let mut opt = AdamW::new(&self.store, AdamWConfig { lr: 1e-3, ..Default::default() });
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..descriptors.len()).collect();
        let mut last = f64::NAN;
        for _ in 0..steps {
            order.shuffle(&mut rng);
            let batch: Vec<Vec<f64>> = order.iter().take(32).map(|&i| descriptors[i].clone()).collect();
            let mut g = Graph::new();
            let x = g.constant(stack(&batch));
            let z = self.encode_graph(&mut g, x);
            let rec = self.decoder.forward(&mut g, &self.store, z);
            let target = standardize(&mut g, &self.store, self.mean, self.inv_std, x);
            let d = g.sub(rec, target);
            let sq = g.square(d);
            let loss = g.mean(sq);
            last = g.value(loss).data()[0];
            if !last.is_finite() {
                return Err(CoreError::NonFinite("motion evaluator loss".into()));
            }
            let mut grads = g.backward(loss).param_grads(&self.store);
            clip_grad_norm(&mut grads, 1.0);
            opt.step(&mut self.store, &grads);
        }
        Ok(last)
    }

    pub fn embed(&self, descriptors: &[Vec<f64>]) -> Matrix {
        let mut g = Graph::new();
        let x = g.constant(stack(descriptors));
        let z = self.encode_graph(&mut g, x);
        g.value(z).clone()
    }

    pub fn save(&self, path: &Path, config_hash: &str) -> Result<()> {
        Ok(self.store.save(path, config_hash, 0)?)
    }

    pub fn load(&mut self, path: &Path) -> Result<()> {
        self.store.load(path)?;
        Ok(())
    }
}

/// Contrastive text/motion embedding for retrieval scores.
pub struct TextMotionMatcher {
    pub store: ParamStore,
    mean: ParamId,
    inv_std: ParamId,
    motion: Mlp,
    text: Linear,
    pub temperature: f64,
}

impl TextMotionMatcher {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mean = store.add("match.mean", Matrix::zeros(1, DESCRIPTOR_DIM));
        let inv_std = store.add("match.inv_std", Matrix::filled(1, DESCRIPTOR_DIM, 1.0));
        store.set_frozen(mean, true);
        store.set_frozen(inv_std, true);
        let motion = Mlp::new(&mut store, "match.motion", &[DESCRIPTOR_DIM, 128, EMBED_DIM], &mut rng);
        let text = Linear::new(&mut store, "match.text", TEXT_DIM, EMBED_DIM, &mut rng);
        Self { store, mean, inv_std, motion, text, temperature: 0.1 }
    }

    fn motion_graph(&self, g: &mut Graph, x: Var) -> Var {
        let z = standardize(g, &self.store, self.mean, self.inv_std, x);
        let h = self.motion.forward(g, &self.store, z);
        l2_rows(g, h)
    }

    fn text_graph(&self, g: &mut Graph, t: Var) -> Var {
        let h = self.text.forward(g, &self.store, t);
        l2_rows(g, h)
    }

    /// Symmetric InfoNCE over the batch.
    pub fn loss_graph(&self, g: &mut Graph, descriptors: &Matrix, texts: &Matrix) -> Var {
        let b = descriptors.rows();
        let x = g.constant(descriptors.clone());
        let t = g.constant(texts.clone());
        let m = self.motion_graph(g, x);
        let e = self.text_graph(g, t);
        let logits = g.matmul_nt(m, e);
        let logits = g.scale(logits, 1.0 / self.temperature);
        let mut eye = Matrix::zeros(b, b);
        (0..b).for_each(|i| eye.set(i, i, 1.0));
        let eye = g.constant(eye);
        let mut parts = Vec::new();
        for l in [logits, g.transpose(logits)] {
            let p = g.softmax(l);
            let lp = g.ln(p);
            let diag = g.mul(lp, eye);
            parts.push(g.sum(diag));
        }
        let both = g.concat_cols(&parts);
        let s = g.sum(both);
        g.scale(s, -0.5 / b as f64)
    }

    /// Trains on matching pairs; rows of `texts` belong to `descriptors`.
    pub fn train(&mut self, descriptors: &[Vec<f64>], texts: &[Vec<f64>], steps: usize, seed: u64) -> Result<f64> {
        if descriptors.len() != texts.len() || descriptors.len() < 2 {
            return Err(CoreError::InvalidArgument("matcher needs at least two paired clips".into()));
        }
        fit_standardizer(&mut self.store, self.mean, self.inv_std, &stack(descriptors));
        let mut opt = AdamW::new(&self.store, AdamWConfig { lr: 1e-3, ..Default::default() });
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..descriptors.len()).collect();
        let mut last = f64::NAN;
        for _ in 0..steps {
            order.shuffle(&mut rng);
            let idx: Vec<usize> = order.iter().take(32).copied().collect();
            let d = stack(&idx.iter().map(|&i| descriptors[i].clone()).collect::<Vec<_>>());
            let t = stack(&idx.iter().map(|&i| texts[i].clone()).collect::<Vec<_>>());
            let mut g = Graph::new();
            let loss = self.loss_graph(&mut g, &d, &t);
            last = g.value(loss).data()[0];
            if !last.is_finite() {
                return Err(CoreError::NonFinite("matcher loss".into()));
            }
            let mut grads = g.backward(loss).param_grads(&self.store);
            clip_grad_norm(&mut grads, 1.0);
            opt.step(&mut self.store, &grads);
        }
        Ok(last)
    }

    pub fn embed_motion(&self, descriptors: &[Vec<f64>]) -> Matrix {
        let mut g = Graph::new();
        let x = g.constant(stack(descriptors));
        let z = self.motion_graph(&mut g, x);
        g.value(z).clone()
    }

    pub fn embed_text(&self, texts: &[Vec<f64>]) -> Matrix {
        let mut g = Graph::new();
        let x = g.constant(stack(texts));
        let z = self.text_graph(&mut g, x);
        g.value(z).clone()
    }

    pub fn save(&self, path: &Path, config_hash: &str) -> Result<()> {
        Ok(self.store.save(path, config_hash, 0)?)
    }

    pub fn load(&mut self, path: &Path) -> Result<()> {
        self.store.load(path)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::skeleton::REST_POSE;

    fn clip(shift: f64, frames: usize) -> JointSequence {
        let mut p = Vec::new();
        for l in 0..frames {
            for j in REST_POSE {
                p.push([j[0] + shift * l as f64, j[1], j[2]]);
            }
        }
        JointSequence::new(frames, NUM_JOINTS, p).unwrap()
    }

    #[test]
    fn descriptor_is_translation_invariant_on_the_ground_plane() {
        let a = motion_descriptor(&clip(0.01, 20)).unwrap();
        let moved = clip(0.01, 20);
        let shifted: Vec<[f64; 3]> = moved.positions().iter().map(|p| [p[0] + 3.0, p[1], p[2] - 1.0]).collect();
        let b = motion_descriptor(&JointSequence::new(20, NUM_JOINTS, shifted).unwrap()).unwrap();
        assert_eq!(a.len(), DESCRIPTOR_DIM);
        assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-12));
    }

    #[test]
    fn matcher_learns_to_pair() {
        let descs: Vec<Vec<f64>> = (0..8).map(|i| motion_descriptor(&clip(0.005 * i as f64, 12)).unwrap()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let texts: Vec<Vec<f64>> = (0..8).map(|_| crate::diffusion::gaussian(1, TEXT_DIM, &mut rng).into_vec()).collect();
        let mut m = TextMotionMatcher::new(1);
        let mut g = Graph::new();
        let before = {
            let l = m.loss_graph(&mut g, &stack(&descs), &stack(&texts));
            g.value(l).data()[0]
        };
        let after = m.train(&descs, &texts, 150, 2).unwrap();
        assert!(after < 0.5 * before, "{before} -> {after}");
    }
}
