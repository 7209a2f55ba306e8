//! Segmentation losses (cross-entropy, soft Dice, their mix), the MSE
//! consistency loss, the multi-path total loss and the hard Dice metric.

use crate::data::LabelVolume;
use crate::error::{Error, Result};
use crate::tensor::{make_result, Tensor};

/// Loss mixing weights: `alpha` blends CE and soft Dice, `lambda_con` scales
/// the consistency term.
#[derive(Clone, Copy, Debug)]
pub struct LossWeights {
    pub alpha: f32,
    pub lambda_con: f32,
    pub dice_epsilon: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 0.5,
            lambda_con: 1.0,
            dice_epsilon: 1e-5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Contract(format!("alpha must be in [0,1], got {}", self.alpha)));
        }
        if self.lambda_con < 0.0 {
            return Err(Error::Contract("lambda_con must be >= 0".into()));
        }
        if self.dice_epsilon <= 0.0 {
            return Err(Error::Contract("dice_epsilon must be > 0".into()));
        }
        Ok(())
    }
}

fn check_logits_labels(logits: &Tensor, labels: &LabelVolume) -> Result<(usize, usize, usize)> {
    let s = logits.shape();
    if s.len() != 5 {
        return Err(Error::Shape(format!("logits must be (N,C,D,H,W), got {s:?}")));
    }
    let (n, c) = (s[0], s[1]);
    let sp: usize = s[2..].iter().product();
    let expected: usize = n * sp;
    if labels.data.len() != expected {
        return Err(Error::Shape(format!(
            "labels have {} voxels, logits imply {expected}",
            labels.data.len()
        )));
    }
    if let Some(&bad) = labels.data.iter().find(|&&l| l as usize >= c) {
        return Err(Error::Data(format!("label {bad} out of range for {c} classes")));
    }
    Ok((n, c, sp))
}

/// Per-voxel softmax probabilities computed densely (f32, stable).
fn softmax_probs(logits: &[f32], n: usize, c: usize, sp: usize) -> Vec<f32> {
    let mut p = vec![0.0f32; logits.len()];
    for b in 0..n {
        for v in 0..sp {
            let mut m = f32::NEG_INFINITY;
            for ch in 0..c {
                m = m.max(logits[(b * c + ch) * sp + v]);
            }
            let mut z = 0.0f32;
            for ch in 0..c {
                let e = (logits[(b * c + ch) * sp + v] - m).exp();
                p[(b * c + ch) * sp + v] = e;
                z += e;
            }
            let inv = 1.0 / z;
            for ch in 0..c {
                p[(b * c + ch) * sp + v] *= inv;
            }
        }
    }
    p
}

/// Mean voxel-wise negative log-likelihood under the channel softmax,
/// computed through log-sum-exp.
pub fn cross_entropy(logits: &Tensor, labels: &LabelVolume) -> Result<Tensor> {
    let (n, c, sp) = check_logits_labels(logits, labels)?;
    let ld = logits.data();
    let total = (n * sp) as f64;
    let mut loss = 0.0f64;
    for b in 0..n {
        for v in 0..sp {
            let mut m = f32::NEG_INFINITY;
            for ch in 0..c {
                m = m.max(ld[(b * c + ch) * sp + v]);
            }
            let mut z = 0.0f64;
            for ch in 0..c {
                z += ((ld[(b * c + ch) * sp + v] - m) as f64).exp();
            }
            let label = labels.data[b * sp + v] as usize;
            let lse = m as f64 + z.ln();
            loss += lse - ld[(b * c + label) * sp + v] as f64;
        }
    }
    drop(ld);
    let loss = (loss / total) as f32;

    let logits_c = logits.clone();
    let label_data = labels.data.clone();
    Ok(make_result(vec![1], vec![loss], vec![logits.clone()], move |gy| {
        if !logits_c.requires_grad() {
            return vec![None];
        }
        let ld = logits_c.data();
        let mut g = softmax_probs(&ld, n, c, sp);
        let scale = gy[0] / (n * sp) as f32;
        for b in 0..n {
            for v in 0..sp {
                let label = label_data[b * sp + v] as usize;
                g[(b * c + label) * sp + v] -= 1.0;
                for ch in 0..c {
                    g[(b * c + ch) * sp + v] *= scale;
                }
            }
        }
        vec![Some(g)]
    }))
}

/// Per-class soft-Dice terms over softmax probabilities: intersection,
/// probability sum and one-hot sum per foreground class.
fn dice_terms(p: &[f32], labels: &[u8], n: usize, c: usize, sp: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut inter = vec![0.0f64; c];
    let mut psum = vec![0.0f64; c];
    let mut gsum = vec![0.0f64; c];
    for b in 0..n {
        for v in 0..sp {
            let label = labels[b * sp + v] as usize;
            gsum[label] += 1.0;
            for ch in 0..c {
                let pv = p[(b * c + ch) * sp + v] as f64;
                psum[ch] += pv;
                if ch == label {
                    inter[ch] += pv;
                }
            }
        }
    }
    (inter, psum, gsum)
}

/// Soft Dice loss: `1 - mean over foreground classes` of the smoothed
/// per-class soft DSC, with sums taken over batch and voxels together.
pub fn soft_dice_loss(logits: &Tensor, labels: &LabelVolume, epsilon: f32) -> Result<Tensor> {
    let (n, c, sp) = check_logits_labels(logits, labels)?;
    if epsilon <= 0.0 {
        return Err(Error::Contract("dice epsilon must be > 0".into()));
    }
    let ld = logits.data();
    let p = softmax_probs(&ld, n, c, sp);
    drop(ld);
    let (inter, psum, gsum) = dice_terms(&p, &labels.data, n, c, sp);
    let eps = epsilon as f64;
    let n_fg = (c - 1) as f64;
    let mut mean_dsc = 0.0f64;
    for ch in 1..c {
        mean_dsc += (2.0 * inter[ch] + eps) / (psum[ch] + gsum[ch] + eps);
    }
    mean_dsc /= n_fg;
    let loss = (1.0 - mean_dsc) as f32;

    let logits_c = logits.clone();
    let label_data = labels.data.clone();
    Ok(make_result(vec![1], vec![loss], vec![logits.clone()], move |gy| {
        if !logits_c.requires_grad() {
            return vec![None];
        }
        let ld = logits_c.data();
        let p = softmax_probs(&ld, n, c, sp);
        let (inter, psum, gsum) = dice_terms(&p, &label_data, n, c, sp);
        // dL/dp for each foreground class, then chain through softmax
        // d dsc_c / d p_c[v] = (2*g_v*(S+eps) - (2I+eps)) / (S+eps)^2
        let mut denom = vec![0.0f64; c];
        let mut numer = vec![0.0f64; c];
        for ch in 1..c {
            denom[ch] = psum[ch] + gsum[ch] + eps;
            numer[ch] = 2.0 * inter[ch] + eps;
        }
        let n_fg = (c - 1) as f64;
        let mut g = vec![0.0f32; p.len()];
        for b in 0..n {
            for v in 0..sp {
                let label = label_data[b * sp + v] as usize;
                // dL/dp per channel at this voxel
                let mut dldp = [0.0f64; 16];
                debug_assert!(c <= 16);
                for ch in 1..c {
                    let gv = if ch == label { 1.0 } else { 0.0 };
                    let ddsc = (2.0 * gv * denom[ch] - numer[ch]) / (denom[ch] * denom[ch]);
                    dldp[ch] = -ddsc / n_fg;
                }
                // softmax backward: dx = p * (dldp - sum_k dldp_k p_k)
                let mut dot = 0.0f64;
                for ch in 0..c {
                    dot += dldp[ch] * p[(b * c + ch) * sp + v] as f64;
                }
                for ch in 0..c {
                    let pv = p[(b * c + ch) * sp + v] as f64;
                    g[(b * c + ch) * sp + v] = (gy[0] as f64 * pv * (dldp[ch] - dot)) as f32;
                }
            }
        }
        vec![Some(g)]
    }))
}

/// `alpha * CE + (1 - alpha) * Dice`.
pub fn seg_loss(logits: &Tensor, labels: &LabelVolume, weights: &LossWeights) -> Result<Tensor> {
    weights.validate()?;
    let ce = cross_entropy(logits, labels)?;
    let dice = soft_dice_loss(logits, labels, weights.dice_epsilon)?;
    ce.scale(weights.alpha).add(&dice.scale(1.0 - weights.alpha))
}

/// Mean squared difference between an MSB feature map and its (detached)
/// encoder target. The target must not require gradients.
pub fn consistency_loss(f_msb: &Tensor, f_enc_detached: &Tensor) -> Result<Tensor> {
    if f_msb.shape() != f_enc_detached.shape() {
        return Err(Error::Shape(format!(
            "consistency_loss shape mismatch: {:?} vs {:?}",
            f_msb.shape(),
            f_enc_detached.shape()
        )));
    }
    if f_enc_detached.requires_grad() {
        return Err(Error::Contract(
            "consistency target must be detached (no gradient)".into(),
        ));
    }
    let diff = f_msb.sub(f_enc_detached)?;
    Ok(diff.mul(&diff)?.mean_all())
}

/// `mean(seg_losses) + lambda_con * mean(con_losses)`; an empty consistency
/// list contributes 0 (plain-UNet mode).
pub fn total_loss(seg_losses: &[Tensor], con_losses: &[Tensor], weights: &LossWeights) -> Result<Tensor> {
    if seg_losses.is_empty() {
        return Err(Error::Contract("total_loss needs at least one segmentation loss".into()));
    }
    let mut seg = seg_losses[0].clone();
    for l in &seg_losses[1..] {
        seg = seg.add(l)?;
    }
    let seg = seg.scale(1.0 / seg_losses.len() as f32);
    if con_losses.is_empty() || weights.lambda_con == 0.0 {
        return Ok(seg);
    }
    let mut con = con_losses[0].clone();
    for l in &con_losses[1..] {
        con = con.add(l)?;
    }
    let con = con.scale(weights.lambda_con / con_losses.len() as f32);
    seg.add(&con)
}

/// Hard Dice per foreground class: `2|P∩G| / (|P| + |G|)`, with the
/// both-empty case defined as 1.0.
pub fn dice_score(pred: &LabelVolume, gt: &LabelVolume, num_classes: usize) -> Result<Vec<f32>> {
    if pred.shape != gt.shape {
        return Err(Error::Shape(format!(
            "dice_score shape mismatch: {:?} vs {:?}",
            pred.shape, gt.shape
        )));
    }
    let mut inter = vec![0u64; num_classes];
    let mut psum = vec![0u64; num_classes];
    let mut gsum = vec![0u64; num_classes];
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        psum[p as usize] += 1;
        gsum[g as usize] += 1;
        if p == g {
            inter[p as usize] += 1;
        }
    }
    Ok((1..num_classes)
        .map(|c| {
            let denom = psum[c] + gsum[c];
            if denom == 0 {
                1.0
            } else {
                2.0 * inter[c] as f32 / denom as f32
            }
        })
        .collect())
}
