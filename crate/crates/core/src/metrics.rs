//! Evaluation metrics and the report written by `evaluate`.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use hoimotion_nn::Matrix;

use crate::affordance::ContactMask;
use crate::error::{CoreError, Result};
use crate::skeleton::{JointSequence, HAND_JOINTS, LEFT_FOOT, NUM_JOINTS, RIGHT_FOOT};

/// Height below which a foot counts as touching the ground for foot sliding.
pub const FOOT_SLIDING_HEIGHT: f64 = 0.05;
pub const R_SCORE_BATCH: usize = 32;

fn check_same(pred: &JointSequence, gt: &JointSequence) -> Result<()> {
    if pred.frames() != gt.frames() || pred.joints() != gt.joints() {
        return Err(CoreError::Shape(format!(
            "prediction {}x{} vs reference {}x{}",
            pred.frames(),
            pred.joints(),
            gt.frames(),
            gt.joints()
        )));
    }
    if pred.frames() == 0 || pred.joints() == 0 {
        return Err(CoreError::InvalidArgument("empty joint sequence".into()));
    }
    Ok(())
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Mean per-joint position error in centimeters.
pub fn mpjpe(pred: &JointSequence, gt: &JointSequence) -> Result<f64> {
    check_same(pred, gt)?;
    let total: f64 = pred.positions().iter().zip(gt.positions()).map(|(a, b)| dist(*a, *b)).sum();
    Ok(100.0 * total / pred.positions().len() as f64)
}

/// Picks the hand joints out of a full skeleton; two-joint input is taken as hands already.
fn hands_of(j: &JointSequence) -> Result<JointSequence> {
    match j.joints() {
        2 => Ok(j.clone()),
        NUM_JOINTS => Ok(j.select(&HAND_JOINTS)),
        n => Err(CoreError::Shape(format!("expected 2 or {NUM_JOINTS} joints, got {n}"))),
    }
}

pub fn hand_jpe(pred: &JointSequence, gt: &JointSequence) -> Result<f64> {
    mpjpe(&hands_of(pred)?, &hands_of(gt)?)
}

pub fn left_jpe(pred: &JointSequence, gt: &JointSequence) -> Result<f64> {
    mpjpe(&hands_of(pred)?.select(&[0]), &hands_of(gt)?.select(&[0]))
}

pub fn right_jpe(pred: &JointSequence, gt: &JointSequence) -> Result<f64> {
    mpjpe(&hands_of(pred)?.select(&[1]), &hands_of(gt)?.select(&[1]))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContactScores {
    pub precision: f64,
    pub recall: f64,
    pub accuracy: f64,
    /// Fraction of frames with any predicted contact.
    pub percentage: f64,
    pub f1: f64,
}

/// Confusion statistics over (frame, joint) pairs. Empty denominators give 0.
pub fn contact_scores(pred: &ContactMask, gt: &ContactMask) -> Result<ContactScores> {
    if pred.frames != gt.frames || pred.joints != gt.joints {
        return Err(CoreError::Shape("contact masks differ in shape".into()));
    }
    if pred.values.is_empty() {
        return Err(CoreError::InvalidArgument("empty contact mask".into()));
    }
    let (mut tp, mut fp, mut fne, mut tn) = (0usize, 0usize, 0usize, 0usize);
    for (&p, &t) in pred.values.iter().zip(&gt.values) {
        match (p, t) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fne += 1,
            (false, false) => tn += 1,
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fne);
    let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
    let frames_with_contact = (0..pred.frames).filter(|&l| pred.any_in_frame(l)).count();
    Ok(ContactScores {
        precision,
        recall,
        accuracy: ratio(tp + tn, tp + fp + fne + tn),
        percentage: ratio(frames_with_contact, pred.frames),
        f1,
    })
}

/// Column means and sample covariance (n − 1 denominator, n for a single row).
pub fn mean_and_covariance(x: &Matrix) -> (Vec<f64>, DMatrix<f64>) {
    let (n, k) = x.shape();
    let mut mean = vec![0.0; k];
    for r in 0..n {
        mean.iter_mut().zip(x.row(r)).for_each(|(m, v)| *m += v / n as f64);
    }
    let centered = DMatrix::from_fn(n, k, |r, c| x.get(r, c) - mean[c]);
    let denom = (n.max(2) - 1) as f64;
    (mean, centered.transpose() * &centered / denom)
}

fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// Fréchet distance between Gaussian fits of two feature sets (rows are samples).
pub fn fid(gen: &Matrix, reference: &Matrix) -> Result<f64> {
    if gen.cols() != reference.cols() || gen.rows() == 0 || reference.rows() == 0 {
        return Err(CoreError::Shape(format!(
            "feature sets {}x{} and {}x{}",
            gen.rows(),
            gen.cols(),
            reference.rows(),
            reference.cols()
        )));
    }
    if !gen.is_finite() || !reference.is_finite() {
        return Err(CoreError::NonFinite("fid features".into()));
    }
    let (m1, s1) = mean_and_covariance(gen);
    let (m2, s2) = mean_and_covariance(reference);
    let mean_term: f64 = m1.iter().zip(&m2).map(|(a, b)| (a - b).powi(2)).sum();
    // tr((S1 S2)^1/2) = tr((S1^1/2 S2 S1^1/2)^1/2), which stays symmetric.
    let r1 = sqrt_psd(&s1);
    let cross = sqrt_psd(&(&r1 * &s2 * &r1)).trace();
    Ok((mean_term + s1.trace() + s2.trace() - 2.0 * cross).max(0.0))
}

/// Precision@1 of matching each motion to its own text among batches of
/// `batch` consecutive rows, by Euclidean distance.
pub fn r_score(motion: &Matrix, text: &Matrix, batch: usize) -> Result<f64> {
    if motion.shape() != text.shape() || motion.rows() == 0 || batch == 0 {
        return Err(CoreError::Shape("motion and text embeddings must match and be non-empty".into()));
    }
    let d = |i: usize, j: usize| -> f64 {
        motion.row(i).iter().zip(text.row(j)).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
    };
    let mut hits = 0usize;
    for start in (0..motion.rows()).step_by(batch) {
        let end = (start + batch).min(motion.rows());
        for i in start..end {
            let own = d(i, i);
            if (start..end).all(|j| j == i || d(i, j) > own) {
                hits += 1;
            }
        }
    }
    Ok(hits as f64 / motion.rows() as f64)
}

/// Mean distance over up to `pairs` disjoint random pairs of rows.
pub fn diversity(feats: &Matrix, pairs: usize, seed: u64) -> Result<f64> {
    let n = feats.rows();
    let pairs = pairs.min(n / 2);
    if pairs == 0 {
        return Err(CoreError::InvalidArgument(format!("diversity needs at least 2 samples, got {n}")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let total: f64 = idx
        .chunks_exact(2)
        .take(pairs)
        .map(|p| feats.row(p[0]).iter().zip(feats.row(p[1])).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt())
        .sum();
    Ok(total / pairs as f64)
}

/// Height-weighted horizontal foot displacement, averaged over feet and
/// frame transitions. Feet at or above `height` contribute nothing.
pub fn foot_sliding(joints: &JointSequence, height: f64) -> Result<f64> {
    if joints.joints() != NUM_JOINTS {
        return Err(CoreError::Shape(format!("foot sliding needs {NUM_JOINTS} joints")));
    }
    let l = joints.frames();
    if l < 2 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for foot in [LEFT_FOOT, RIGHT_FOOT] {
        for f in 0..l - 1 {
            let (a, b) = (joints.get(f, foot), joints.get(f + 1, foot));
            let h = a[1];
            if h < height {
                let disp = ((b[0] - a[0]).powi(2) + (b[2] - a[2]).powi(2)).sqrt();
                total += disp * (2.0 - 2f64.powf(h / height)).clamp(0.0, 1.0);
            }
        }
    }
    Ok(total / (2 * (l - 1)) as f64)
}

/// Cosine similarity; 0 when either side has zero norm.
pub fn affordance_similarity(pred: &[f64], gt: &[f64]) -> Result<f64> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(CoreError::Shape("affordance vectors differ in length".into()));
    }
    let dot: f64 = pred.iter().zip(gt).map(|(a, b)| a * b).sum();
    let na = pred.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = gt.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage1Report {
    pub left_jpe: f64,
    pub right_jpe: f64,
    pub hand_jpe: f64,
    pub affordance_cos_sim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub clips: usize,
    pub hand_jpe_cm: f64,
    pub mpjpe_cm: f64,
    pub c_prec: f64,
    pub c_rec: f64,
    pub c_acc: f64,
    pub c_pct: f64,
    pub f1: f64,
    pub fid: f64,
    pub r_score: f64,
    pub diversity: f64,
    pub fs: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage1: Option<Stage1Report>,
}

/// Column order of [`EvalReport::csv_row`]. Stage-1 columns are empty when absent.
pub const CSV_COLUMNS: [&str; 16] = [
    "clips",
    "hand_jpe_cm",
    "mpjpe_cm",
    "c_prec",
    "c_rec",
    "c_acc",
    "c_pct",
    "f1",
    "fid",
    "r_score",
    "diversity",
    "fs",
    "stage1_left_jpe",
    "stage1_right_jpe",
    "stage1_hand_jpe",
    "stage1_affordance_cos_sim",
];

impl EvalReport {
    pub fn validate(&self) -> Result<()> {
        let unit = [self.c_prec, self.c_rec, self.c_acc, self.c_pct, self.f1, self.r_score];
        if unit.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(CoreError::InvalidArgument("contact or retrieval score outside [0, 1]".into()));
        }
        let errs = [self.hand_jpe_cm, self.mpjpe_cm, self.fid, self.diversity, self.fs];
        if errs.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(CoreError::InvalidArgument("negative or non-finite error metric".into()));
        }
        if let Some(s) = &self.stage1 {
            if [s.left_jpe, s.right_jpe, s.hand_jpe].iter().any(|v| !v.is_finite() || *v < 0.0)
                || !(-1.0..=1.0).contains(&s.affordance_cos_sim)
            {
                return Err(CoreError::InvalidArgument("stage-1 metrics out of range".into()));
            }
        }
        Ok(())
    }

    pub fn csv_header() -> String {
        CSV_COLUMNS.join(",")
    }

    pub fn csv_row(&self) -> String {
        let mut cells = vec![self.clips.to_string()];
        cells.extend(
            [
                self.hand_jpe_cm,
                self.mpjpe_cm,
                self.c_prec,
                self.c_rec,
                self.c_acc,
                self.c_pct,
                self.f1,
                self.fid,
                self.r_score,
                self.diversity,
                self.fs,
            ]
            .iter()
            .map(|v| format!("{v:.6}")),
        );
        match &self.stage1 {
            Some(s) => cells.extend(
                [s.left_jpe, s.right_jpe, s.hand_jpe, s.affordance_cos_sim].iter().map(|v| format!("{v:.6}")),
            ),
            None => cells.extend(std::iter::repeat_n(String::new(), 4)),
        }
        cells.join(",")
    }

    pub fn to_csv(&self) -> String {
        format!("{}\n{}\n", Self::csv_header(), self.csv_row())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(frames: usize, joints: usize, f: impl Fn(usize, usize) -> [f64; 3]) -> JointSequence {
        let mut p = Vec::new();
        for l in 0..frames {
            for j in 0..joints {
                p.push(f(l, j));
            }
        }
        JointSequence::new(frames, joints, p).unwrap()
    }

    #[test]
    fn one_centimeter_offset() {
        let a = seq(4, NUM_JOINTS, |l, j| [l as f64, j as f64, 0.0]);
        let b = seq(4, NUM_JOINTS, |l, j| [l as f64 + 0.01, j as f64, 0.0]);
        assert!((mpjpe(&a, &b).unwrap() - 1.0).abs() < 1e-9);
        assert!((hand_jpe(&a, &b).unwrap() - 1.0).abs() < 1e-9);
        assert_eq!(mpjpe(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn contact_fixture() {
        let m = |v: [bool; 4]| ContactMask { frames: 4, joints: 1, values: v.to_vec(), tau: 0.1 };
        let s = contact_scores(&m([true, true, false, false]), &m([true, false, true, false])).unwrap();
        assert_eq!((s.precision, s.recall, s.accuracy, s.f1, s.percentage), (0.5, 0.5, 0.5, 0.5, 0.5));
        let none = contact_scores(&m([false; 4]), &m([true, false, true, false])).unwrap();
        assert_eq!((none.precision, none.percentage, none.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn fid_scalar_closed_form() {
        let a = Matrix::from_vec(4, 1, vec![0.0, 1.0, 2.0, 3.0]);
        let b = Matrix::from_vec(3, 1, vec![5.0, 7.0, 9.0]);
        let (ma, sa): (f64, f64) = (1.5, (5.0f64 / 3.0).sqrt());
        let (mb, sb): (f64, f64) = (7.0, 2.0);
        let expect = (ma - mb).powi(2) + (sa - sb).powi(2);
        assert!((fid(&a, &b).unwrap() - expect).abs() < 1e-9);
        assert!(fid(&a, &a).unwrap() < 1e-9);
    }

    #[test]
    fn single_element_retrieval() {
        let m = Matrix::from_vec(1, 3, vec![1.0, 2.0, 3.0]);
        let t = Matrix::from_vec(1, 3, vec![-4.0, 0.0, 9.0]);
        assert_eq!(r_score(&m, &t, R_SCORE_BATCH).unwrap(), 1.0);
    }

    #[test]
    fn identical_features_have_no_diversity() {
        let f = Matrix::filled(10, 3, 0.7);
        assert_eq!(diversity(&f, 5, 3).unwrap(), 0.0);
    }

    #[test]
    fn sliding_on_ground_counts_fully() {
        let j = seq(3, NUM_JOINTS, |l, _| [0.02 * l as f64, 0.0, 0.0]);
        assert!((foot_sliding(&j, FOOT_SLIDING_HEIGHT).unwrap() - 0.02).abs() < 1e-12);
        let air = seq(3, NUM_JOINTS, |l, _| [0.02 * l as f64, 0.3, 0.0]);
        assert_eq!(foot_sliding(&air, FOOT_SLIDING_HEIGHT).unwrap(), 0.0);
    }

    #[test]
    fn csv_has_fixed_columns() {
        let r = EvalReport {
            clips: 2,
            hand_jpe_cm: 1.0,
            mpjpe_cm: 2.0,
            c_prec: 0.5,
            c_rec: 0.5,
            c_acc: 0.5,
            c_pct: 0.5,
            f1: 0.5,
            fid: 0.1,
            r_score: 1.0,
            diversity: 3.0,
            fs: 0.0,
            stage1: None,
        };
        r.validate().unwrap();
        let csv = r.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0].split(',').count(), CSV_COLUMNS.len());
        assert_eq!(lines[1].split(',').count(), CSV_COLUMNS.len());
    }
}
