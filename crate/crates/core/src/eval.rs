//! Test-set evaluation (per-scale, per-class DSC tables) and steady-state
//! inference benchmarking.

use std::time::Instant;

use crate::data::{self, LabelVolume, Sample};
use crate::error::{Error, Result};
use crate::losses::dice_score;
use crate::model::{flop_count, param_count, Model};
use crate::ops::{argmax_channels, NormMode};
use crate::routing::{baseline_prepare, PrepareMode};
use crate::tensor::Tensor;

/// Mean and standard deviation (population) of one score column.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn mean_sd(values: &[f64]) -> MeanSd {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    MeanSd { mean, sd: var.sqrt() }
}

/// DSC summary over a test set: one row per scale with per-class and
/// all-class columns, plus the overall row (mean over scale means).
#[derive(Clone, Debug)]
pub struct EvalReport {
    pub variant: String,
    /// Downsampling factors evaluated, e.g. [1, 2, 4, 8].
    pub scales: Vec<usize>,
    pub num_classes: usize,
    /// [scale][class−1]: foreground-class DSC over volumes.
    pub per_class: Vec<Vec<MeanSd>>,
    /// [scale]: per-volume mean foreground DSC.
    pub per_scale: Vec<MeanSd>,
    /// Mean over the per-scale means; SD over the per-scale means.
    pub overall: MeanSd,
}

/// How a variant consumes a downsampled input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalProtocol {
    /// Route through the matching MSB; score at the routed resolution
    /// against downsampled labels.
    Routed,
    /// Restore to full resolution (pad or up); score against full labels.
    Restored(PrepareMode),
}

fn predict(model: &Model, x: &Tensor, d: usize) -> Result<Vec<u8>> {
    crate::tensor::no_grad(|| {
        let logits = if d == 0 {
            model.forward_full(x, NormMode::Eval)?.logits
        } else {
            model.forward_scale(x, d, NormMode::Eval)?.logits
        };
        argmax_channels(&logits)
    })
}

/// Per-volume, per-scale foreground DSC for one model.
pub fn evaluate(
    model: &Model,
    samples: &[Sample],
    scales: &[usize],
    protocol: EvalProtocol,
    variant: &str,
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Contract("evaluate needs at least one volume".into()));
    }
    let classes = samples[0].num_classes;
    let mut per_class = Vec::new();
    let mut per_scale = Vec::new();
    for &factor in scales {
        if !factor.is_power_of_two() {
            return Err(Error::Contract(format!("scale factor {factor} is not a power of two")));
        }
        let d = factor.trailing_zeros() as usize;
        let mut class_cols: Vec<Vec<f64>> = vec![Vec::new(); classes - 1];
        let mut vol_means: Vec<f64> = Vec::new();
        for s in samples {
            let image = data::normalize_intensity(&s.image)?;
            let shape = s.shape;
            let small_shape = [shape[0] / factor, shape[1] / factor, shape[2] / factor];
            let (small_img, small_labels) = if factor == 1 {
                (image.clone(), s.labels.clone())
            } else {
                (
                    data::downsample_image(&image, s.channels, shape, factor)?,
                    data::downsample_labels(&s.labels, factor)?,
                )
            };
            let scores = match protocol {
                EvalProtocol::Routed => {
                    let x = Tensor::from_vec(
                        small_img,
                        &[1, s.channels, small_shape[0], small_shape[1], small_shape[2]],
                    )?;
                    let pred =
                        LabelVolume::new(small_labels.shape.clone(), predict(model, &x, d)?)?;
                    dice_score(&pred, &small_labels, classes)?
                }
                EvalProtocol::Restored(mode) => {
                    let restored =
                        baseline_prepare(&small_img, s.channels, small_shape, mode, shape)?;
                    let x = Tensor::from_vec(
                        restored,
                        &[1, s.channels, shape[0], shape[1], shape[2]],
                    )?;
                    let pred = LabelVolume::new(s.labels.shape.clone(), predict(model, &x, 0)?)?;
                    dice_score(&pred, &s.labels, classes)?
                }
            };
            for (c, v) in scores.iter().enumerate() {
                class_cols[c].push(*v as f64);
            }
            vol_means.push(scores.iter().map(|&v| v as f64).sum::<f64>() / scores.len() as f64);
        }
        per_class.push(class_cols.iter().map(|col| mean_sd(col)).collect());
        per_scale.push(mean_sd(&vol_means));
    }
    let scale_means: Vec<f64> = per_scale.iter().map(|m| m.mean).collect();
    let overall = mean_sd(&scale_means);
    Ok(EvalReport {
        variant: variant.to_string(),
        scales: scales.to_vec(),
        num_classes: classes,
        per_class,
        per_scale,
        overall,
    })
}

impl EvalReport {
    /// Structured CSV; float formatting uses Rust's shortest round-trip
    /// representation so parsing back is lossless.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant,scale,class,mean,sd\n");
        for (si, &scale) in self.scales.iter().enumerate() {
            for c in 1..self.num_classes {
                let m = self.per_class[si][c - 1];
                out.push_str(&format!("{},{scale},{c},{},{}\n", self.variant, m.mean, m.sd));
            }
            let m = self.per_scale[si];
            out.push_str(&format!("{},{scale},all,{},{}\n", self.variant, m.mean, m.sd));
        }
        out.push_str(&format!(
            "{},overall,all,{},{}\n",
            self.variant, self.overall.mean, self.overall.sd
        ));
        out
    }

    pub fn from_csv(text: &str) -> Result<EvalReport> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Format("empty report".into()))?;
        if header != "variant,scale,class,mean,sd" {
            return Err(Error::Format("unexpected report header".into()));
        }
        let mut variant = String::new();
        let mut scales = Vec::new();
        let mut per_class: Vec<Vec<MeanSd>> = Vec::new();
        let mut per_scale = Vec::new();
        let mut overall = None;
        let mut classes = 1usize;
        for line in lines {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(Error::Format(format!("bad report row: {line}")));
            }
            variant = f[0].to_string();
            let mean: f64 = f[3].parse().map_err(|_| Error::Format("bad mean".into()))?;
            let sd: f64 = f[4].parse().map_err(|_| Error::Format("bad sd".into()))?;
            let m = MeanSd { mean, sd };
            match (f[1], f[2]) {
                ("overall", "all") => overall = Some(m),
                (s, "all") => {
                    scales.push(s.parse().map_err(|_| Error::Format("bad scale".into()))?);
                    per_scale.push(m);
                }
                (_, c) => {
                    let c: usize = c.parse().map_err(|_| Error::Format("bad class".into()))?;
                    classes = classes.max(c + 1);
                    if per_class.len() == scales.len() {
                        per_class.push(Vec::new());
                    }
                    per_class.last_mut().unwrap().push(m);
                }
            }
        }
        Ok(EvalReport {
            variant,
            scales,
            num_classes: classes,
            per_class,
            per_scale,
            overall: overall.ok_or_else(|| Error::Format("report missing overall row".into()))?,
        })
    }

    /// Human-readable mean±SD table.
    pub fn render_table(&self) -> String {
        let mut out = format!("variant: {}\n", self.variant);
        out.push_str("scale      ");
        for c in 1..self.num_classes {
            out.push_str(&format!("class{c}          "));
        }
        out.push_str("all\n");
        for (si, &scale) in self.scales.iter().enumerate() {
            out.push_str(&format!("1/{scale:<8} "));
            for c in 1..self.num_classes {
                let m = self.per_class[si][c - 1];
                out.push_str(&format!("{:.3}±{:.3}     ", m.mean, m.sd));
            }
            let m = self.per_scale[si];
            out.push_str(&format!("{:.3}±{:.3}\n", m.mean, m.sd));
        }
        out.push_str(&format!(
            "overall    {:.3}±{:.3} (mean over scales)\n",
            self.overall.mean, self.overall.sd
        ));
        out
    }
}

// ---------------------------------------------------------------------------
// Benchmarking
// ---------------------------------------------------------------------------

/// One bench row: steady-state forward timing plus analytic counts.
#[derive(Clone, Debug)]
pub struct BenchRow {
    pub scale: usize,
    pub entry_depth: usize,
    pub mean_seconds: f64,
    pub sd_seconds: f64,
    pub macs: u64,
    pub mac_ratio: f64,
    pub speedup: f64,
    pub params: usize,
}

/// Times `repeats` eval-mode forwards per scale (after one warm-up each) on
/// a synthetic input; no file I/O inside the timed region.
pub fn bench(model: &Model, scales: &[usize], repeats: usize, seed: u64) -> Result<Vec<BenchRow>> {
    if repeats == 0 {
        return Err(Error::Contract("bench needs repeats >= 1".into()));
    }
    let cfg = &model.config;
    let params = param_count(cfg);
    let base_macs = flop_count(cfg, 0, 1)?;
    let mut rows = Vec::new();
    let mut base_time = None;
    for &factor in scales {
        if !factor.is_power_of_two() {
            return Err(Error::Contract(format!("scale factor {factor} is not a power of two")));
        }
        let d = factor.trailing_zeros() as usize;
        if d >= cfg.depth {
            return Err(Error::Contract(format!("scale 1/{factor} below the deepest level")));
        }
        let s = cfg.shape_at(d);
        let x = Tensor::create(
            &[1, cfg.in_channels, s[0], s[1], s[2]],
            crate::tensor::Init::Uniform { seed, lo: 0.0, hi: 1.0 },
        )?;
        let run = |x: &Tensor| -> Result<()> {
            crate::tensor::no_grad(|| {
                if d == 0 {
                    model.forward_full(x, NormMode::Eval)?;
                } else {
                    model.forward_scale(x, d, NormMode::Eval)?;
                }
                Ok(())
            })
        };
        run(&x)?; // warm-up
        let mut times = Vec::with_capacity(repeats);
        for _ in 0..repeats {
            let t0 = Instant::now();
            run(&x)?;
            times.push(t0.elapsed().as_secs_f64());
        }
        let stats = mean_sd(&times);
        // steady-state estimate: the median is robust to scheduler noise,
        // which dominates the tail on a shared core
        let med = median(&times);
        let macs = flop_count(cfg, d, 1)?;
        if d == 0 {
            base_time = Some(med);
        }
        let speedup = base_time.map(|b| b / med).unwrap_or(f64::NAN);
        rows.push(BenchRow {
            scale: factor,
            entry_depth: d,
            mean_seconds: stats.mean,
            sd_seconds: stats.sd,
            macs,
            mac_ratio: macs as f64 / base_macs as f64,
            speedup,
            params,
        });
    }
    Ok(rows)
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut out =
        String::from("scale,entry_depth,mean_seconds,sd_seconds,macs,mac_ratio,speedup,params\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{:.6},{:.6},{},{:.6},{:.3},{}\n",
            r.scale, r.entry_depth, r.mean_seconds, r.sd_seconds, r.macs, r.mac_ratio, r.speedup, r.params
        ));
    }
    out
}
