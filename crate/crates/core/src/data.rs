//! Synthetic phantom volumes, the preprocessing pipeline (intensity
//! normalization, resampling, shape standardization) and the `.vvol` file
//! format.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Integer label volume, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelVolume {
    pub shape: Vec<usize>,
    pub data: Vec<u8>,
}

impl LabelVolume {
    pub fn new(shape: Vec<usize>, data: Vec<u8>) -> Result<LabelVolume> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Shape("label shape/data length mismatch".into()));
        }
        Ok(LabelVolume { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> LabelVolume {
        LabelVolume {
            shape: shape.to_vec(),
            data: vec![0; shape.iter().product()],
        }
    }
}

/// One labeled volume: image (C,D,H,W) as raw floats plus labels (D,H,W).
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Vec<f32>,
    pub channels: usize,
    /// Spatial shape (D,H,W), shared by image and labels.
    pub shape: [usize; 3],
    pub labels: LabelVolume,
    pub num_classes: usize,
    pub seed: u64,
    pub native_shape: [usize; 3],
}

impl Sample {
    pub fn spatial_len(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Ellipsoid count/size ranges for one foreground class.
#[derive(Clone, Debug)]
pub struct StructureSpec {
    pub count: (usize, usize),
    /// Per-axis semi-axis range in voxels.
    pub radius: ([f32; 3], [f32; 3]),
    /// Mean intensity added inside the structure.
    pub intensity: f32,
    /// Center is restricted to this fraction band of each axis (lo, hi).
    pub center_band: ([f32; 3], [f32; 3]),
}

/// Generation recipe for synthetic phantoms.
#[derive(Clone, Debug)]
pub struct PhantomSpec {
    pub shape: [usize; 3],
    pub channels: usize,
    pub num_classes: usize,
    /// index 0 corresponds to class 1
    pub structures: Vec<StructureSpec>,
    pub noise_sigma: f32,
    pub background: f32,
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config("phantoms need at least 2 classes".into()));
        }
        if self.structures.len() != self.num_classes - 1 {
            return Err(Error::Config(format!(
                "expected {} structure specs, got {}",
                self.num_classes - 1,
                self.structures.len()
            )));
        }
        for s in &self.structures {
            for ax in 0..3 {
                if s.radius.1[ax] * 2.0 >= self.shape[ax] as f32 {
                    return Err(Error::Config(format!(
                        "structure radius {} does not fit grid axis {} of extent {}",
                        s.radius.1[ax], ax, self.shape[ax]
                    )));
                }
            }
        }
        Ok(())
    }

    /// Single-channel, 3-class preset on the 32x64x32 grid: one bright
    /// blob per hemisphere, mimicking a left/right anatomy labeling task.
    pub fn hippocampus_like() -> PhantomSpec {
        PhantomSpec {
            shape: [32, 64, 32],
            channels: 1,
            num_classes: 3,
            structures: vec![
                StructureSpec {
                    count: (1, 1),
                    radius: ([5.0, 7.0, 5.0], [8.0, 12.0, 8.0]),
                    intensity: 0.45,
                    center_band: ([0.3, 0.1, 0.3], [0.7, 0.42, 0.7]),
                },
                StructureSpec {
                    count: (1, 1),
                    radius: ([5.0, 7.0, 5.0], [8.0, 12.0, 8.0]),
                    intensity: 0.9,
                    center_band: ([0.3, 0.58, 0.3], [0.7, 0.9, 0.7]),
                },
            ],
            noise_sigma: 0.04,
            background: 0.15,
        }
    }

    /// Four-channel, 4-class preset on a 64x64x32 desk grid standing in for
    /// large multi-modal tumor volumes.
    pub fn tumor_like() -> PhantomSpec {
        PhantomSpec {
            shape: [64, 64, 32],
            channels: 4,
            num_classes: 4,
            structures: vec![
                StructureSpec {
                    count: (1, 2),
                    radius: ([8.0, 8.0, 5.0], [14.0, 14.0, 9.0]),
                    intensity: 0.35,
                    center_band: ([0.25, 0.25, 0.25], [0.75, 0.75, 0.75]),
                },
                StructureSpec {
                    count: (1, 2),
                    radius: ([5.0, 5.0, 4.0], [9.0, 9.0, 7.0]),
                    intensity: 0.65,
                    center_band: ([0.3, 0.3, 0.3], [0.7, 0.7, 0.7]),
                },
                StructureSpec {
                    count: (1, 1),
                    radius: ([4.0, 4.0, 3.0], [7.0, 7.0, 5.0]),
                    intensity: 0.95,
                    center_band: ([0.35, 0.35, 0.35], [0.65, 0.65, 0.65]),
                },
            ],
            noise_sigma: 0.05,
            background: 0.1,
        }
    }
}

/// Deterministic per-seed phantom: random ellipsoids per foreground class,
/// class-specific intensity, Gaussian noise. Overlaps resolve to the higher
/// class index.
pub fn generate_phantom(seed: u64, spec: &PhantomSpec) -> Result<Sample> {
    spec.validate()?;
    let [d, h, w] = spec.shape;
    let sp = d * h * w;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels = vec![0u8; sp];
    let mut clean = vec![spec.background; sp];

    for (ci, s) in spec.structures.iter().enumerate() {
        let class = (ci + 1) as u8;
        let count = rng.gen_range(s.count.0..=s.count.1);
        for _ in 0..count {
            let mut center = [0.0f32; 3];
            let mut radius = [0.0f32; 3];
            for ax in 0..3 {
                let ext = spec.shape[ax] as f32;
                radius[ax] = rng.gen_range(s.radius.0[ax]..=s.radius.1[ax]);
                let lo = (s.center_band.0[ax] * ext).max(radius[ax]);
                let hi = (s.center_band.1[ax] * ext).min(ext - radius[ax]);
                center[ax] = if lo < hi { rng.gen_range(lo..hi) } else { ext / 2.0 };
            }
            for z in 0..d {
                for y in 0..h {
                    for x in 0..w {
                        let dz = (z as f32 + 0.5 - center[0]) / radius[0];
                        let dy = (y as f32 + 0.5 - center[1]) / radius[1];
                        let dx = (x as f32 + 0.5 - center[2]) / radius[2];
                        if dz * dz + dy * dy + dx * dx <= 1.0 {
                            let idx = (z * h + y) * w + x;
                            labels[idx] = class;
                            clean[idx] = spec.background + s.intensity;
                        }
                    }
                }
            }
        }
    }

    let noise = Normal::new(0.0f32, 1.0f32).expect("unit normal");
    let mut image = vec![0.0f32; spec.channels * sp];
    for ch in 0..spec.channels {
        // per-channel contrast scaling so multi-modal presets differ per channel
        let gain = 1.0 - 0.12 * ch as f32;
        for i in 0..sp {
            let n = if spec.noise_sigma > 0.0 {
                noise.sample(&mut rng) * spec.noise_sigma
            } else {
                0.0
            };
            image[ch * sp + i] = clean[i] * gain + n;
        }
    }

    Ok(Sample {
        image,
        channels: spec.channels,
        shape: spec.shape,
        labels: LabelVolume::new(vec![d, h, w], labels)?,
        num_classes: spec.num_classes,
        seed,
        native_shape: spec.shape,
    })
}

// ---------------------------------------------------------------------------
// Intensity normalization
// ---------------------------------------------------------------------------

/// Nearest-rank percentile of the sorted values, q in [0,100].
fn percentile_nearest_rank(sorted: &[f32], q: f64) -> f32 {
    let n = sorted.len();
    let rank = ((q / 100.0) * n as f64).ceil() as usize;
    sorted[rank.clamp(1, n) - 1]
}

/// Clips to the [0.5, 99.5] percentile range and stretches into [0,1].
/// Constant volumes map to all zeros.
pub fn normalize_intensity(volume: &[f32]) -> Result<Vec<f32>> {
    if volume.is_empty() {
        return Err(Error::Data("normalize_intensity on empty volume".into()));
    }
    if volume.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("normalize_intensity: non-finite input".into()));
    }
    let mut sorted = volume.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let lo = percentile_nearest_rank(&sorted, 0.5);
    let hi = percentile_nearest_rank(&sorted, 99.5);
    if hi <= lo {
        return Ok(vec![0.0; volume.len()]);
    }
    let inv = 1.0 / (hi - lo);
    Ok(volume
        .iter()
        .map(|&v| ((v.clamp(lo, hi) - lo) * inv).clamp(0.0, 1.0))
        .collect())
}

// ---------------------------------------------------------------------------
// Resampling
// ---------------------------------------------------------------------------

fn check_factor(shape: [usize; 3], factor: usize) -> Result<()> {
    if !matches!(factor, 2 | 4 | 8) {
        return Err(Error::Shape(format!("downsample factor must be 2, 4 or 8, got {factor}")));
    }
    for (ax, &e) in shape.iter().enumerate() {
        if e % factor != 0 {
            return Err(Error::Shape(format!(
                "axis {ax} extent {e} not divisible by factor {factor}"
            )));
        }
    }
    Ok(())
}

/// Trilinear downsampling of a (C,D,H,W) volume by an integer factor, using
/// cell-center sample alignment (align-corners false).
pub fn downsample_image(volume: &[f32], channels: usize, shape: [usize; 3], factor: usize) -> Result<Vec<f32>> {
    check_factor(shape, factor)?;
    let [d, h, w] = shape;
    let (od, oh, ow) = (d / factor, h / factor, w / factor);
    let sp = d * h * w;
    let mut out = vec![0.0f32; channels * od * oh * ow];

    // 1D sample positions and interpolation weights per output coordinate
    let axis_weights = |out_e: usize, in_e: usize| -> Vec<(usize, usize, f32)> {
        (0..out_e)
            .map(|o| {
                let pos = (o as f32 + 0.5) * factor as f32 - 0.5;
                let i0 = pos.floor().max(0.0) as usize;
                let i1 = (i0 + 1).min(in_e - 1);
                let t = (pos - i0 as f32).clamp(0.0, 1.0);
                (i0, i1, t)
            })
            .collect()
    };
    let wz = axis_weights(od, d);
    let wy = axis_weights(oh, h);
    let wx = axis_weights(ow, w);

    for c in 0..channels {
        let base = c * sp;
        let obase = c * od * oh * ow;
        for (oz, &(z0, z1, tz)) in wz.iter().enumerate() {
            for (oy, &(y0, y1, ty)) in wy.iter().enumerate() {
                for (ox, &(x0, x1, tx)) in wx.iter().enumerate() {
                    let at = |z: usize, y: usize, x: usize| volume[base + (z * h + y) * w + x];
                    let c00 = at(z0, y0, x0) * (1.0 - tx) + at(z0, y0, x1) * tx;
                    let c01 = at(z0, y1, x0) * (1.0 - tx) + at(z0, y1, x1) * tx;
                    let c10 = at(z1, y0, x0) * (1.0 - tx) + at(z1, y0, x1) * tx;
                    let c11 = at(z1, y1, x0) * (1.0 - tx) + at(z1, y1, x1) * tx;
                    let c0 = c00 * (1.0 - ty) + c01 * ty;
                    let c1 = c10 * (1.0 - ty) + c11 * ty;
                    out[obase + (oz * oh + oy) * ow + ox] = c0 * (1.0 - tz) + c1 * tz;
                }
            }
        }
    }
    Ok(out)
}

/// Trilinear upsampling of a (C,D,H,W) volume to `target` extents
/// (cell-center alignment); used by the Up baseline handler.
pub fn upsample_image(volume: &[f32], channels: usize, shape: [usize; 3], target: [usize; 3]) -> Result<Vec<f32>> {
    let [d, h, w] = shape;
    let [od, oh, ow] = target;
    let sp = d * h * w;
    if volume.len() != channels * sp {
        return Err(Error::Shape("upsample_image: volume length mismatch".into()));
    }
    let mut out = vec![0.0f32; channels * od * oh * ow];
    let axis_weights = |out_e: usize, in_e: usize| -> Vec<(usize, usize, f32)> {
        let scale = in_e as f32 / out_e as f32;
        (0..out_e)
            .map(|o| {
                let pos = (o as f32 + 0.5) * scale - 0.5;
                let i0 = pos.floor().max(0.0) as usize;
                let i1 = (i0 + 1).min(in_e - 1);
                let t = (pos - i0 as f32).clamp(0.0, 1.0);
                (i0, i1, t)
            })
            .collect()
    };
    let wz = axis_weights(od, d);
    let wy = axis_weights(oh, h);
    let wx = axis_weights(ow, w);
    for c in 0..channels {
        let base = c * sp;
        let obase = c * od * oh * ow;
        for (oz, &(z0, z1, tz)) in wz.iter().enumerate() {
            for (oy, &(y0, y1, ty)) in wy.iter().enumerate() {
                for (ox, &(x0, x1, tx)) in wx.iter().enumerate() {
                    let at = |z: usize, y: usize, x: usize| volume[base + (z * h + y) * w + x];
                    let c00 = at(z0, y0, x0) * (1.0 - tx) + at(z0, y0, x1) * tx;
                    let c01 = at(z0, y1, x0) * (1.0 - tx) + at(z0, y1, x1) * tx;
                    let c10 = at(z1, y0, x0) * (1.0 - tx) + at(z1, y0, x1) * tx;
                    let c11 = at(z1, y1, x0) * (1.0 - tx) + at(z1, y1, x1) * tx;
                    let c0 = c00 * (1.0 - ty) + c01 * ty;
                    let c1 = c10 * (1.0 - ty) + c11 * ty;
                    out[obase + (oz * oh + oy) * ow + ox] = c0 * (1.0 - tz) + c1 * tz;
                }
            }
        }
    }
    Ok(out)
}

/// Index of the nearest input sample for one output coordinate under
/// cell-center alignment.
pub fn nearest_source_index(o: usize, factor: usize) -> usize {
    // floor((o + 0.5)*f - 0.5 + 0.5) = floor((o + 0.5)*f)
    (o * factor) + factor / 2
}

/// Nearest-neighbor label downsampling; never introduces new label values.
pub fn downsample_labels(labels: &LabelVolume, factor: usize) -> Result<LabelVolume> {
    if labels.shape.len() != 3 {
        return Err(Error::Shape("downsample_labels expects a (D,H,W) volume".into()));
    }
    let shape = [labels.shape[0], labels.shape[1], labels.shape[2]];
    check_factor(shape, factor)?;
    let [d, h, w] = shape;
    let (od, oh, ow) = (d / factor, h / factor, w / factor);
    let mut out = vec![0u8; od * oh * ow];
    for oz in 0..od {
        let iz = nearest_source_index(oz, factor);
        for oy in 0..oh {
            let iy = nearest_source_index(oy, factor);
            for ox in 0..ow {
                let ix = nearest_source_index(ox, factor);
                out[(oz * oh + oy) * ow + ox] = labels.data[(iz * h + iy) * w + ix];
            }
        }
    }
    LabelVolume::new(vec![od, oh, ow], out)
}

/// Nearest-neighbor label upsampling to `target` extents (for optional
/// full-resolution prediction output).
pub fn upsample_labels(labels: &LabelVolume, target: [usize; 3]) -> Result<LabelVolume> {
    if labels.shape.len() != 3 {
        return Err(Error::Shape("upsample_labels expects a (D,H,W) volume".into()));
    }
    let [d, h, w] = [labels.shape[0], labels.shape[1], labels.shape[2]];
    let [od, oh, ow] = target;
    let near = |o: usize, out_e: usize, in_e: usize| -> usize {
        let pos = (o as f32 + 0.5) * (in_e as f32 / out_e as f32);
        (pos.floor() as usize).min(in_e - 1)
    };
    let mut out = vec![0u8; od * oh * ow];
    for oz in 0..od {
        let iz = near(oz, od, d);
        for oy in 0..oh {
            let iy = near(oy, oh, h);
            for ox in 0..ow {
                let ix = near(ox, ow, w);
                out[(oz * oh + oy) * ow + ox] = labels.data[(iz * h + iy) * w + ix];
            }
        }
    }
    LabelVolume::new(vec![od, oh, ow], out)
}

// ---------------------------------------------------------------------------
// Pad / crop / shape standardization
// ---------------------------------------------------------------------------

/// Center-aligned pad (with `fill`) or crop of a (C,D,H,W) volume to the
/// target spatial shape. Excess splits low/high with the extra voxel on the
/// high side.
pub fn pad_or_crop(
    volume: &[f32],
    channels: usize,
    shape: [usize; 3],
    target: [usize; 3],
    fill: f32,
) -> Vec<f32> {
    let sp_in: usize = shape.iter().product();
    let sp_out: usize = target.iter().product();
    debug_assert_eq!(volume.len(), channels * sp_in);
    let mut out = vec![fill; channels * sp_out];
    // per axis: range copied and its offset in both volumes
    let overlap = |in_e: usize, out_e: usize| -> (usize, usize, usize) {
        if out_e >= in_e {
            ((out_e - in_e) / 2, 0, in_e) // (out offset, in offset, len)
        } else {
            (0, (in_e - out_e) / 2, out_e)
        }
    };
    let (oz, iz, lz) = overlap(shape[0], target[0]);
    let (oy, iy, ly) = overlap(shape[1], target[1]);
    let (ox, ix, lx) = overlap(shape[2], target[2]);
    for c in 0..channels {
        for z in 0..lz {
            for y in 0..ly {
                let src = c * sp_in + ((iz + z) * shape[1] + iy + y) * shape[2] + ix;
                let dst = c * sp_out + ((oz + z) * target[1] + oy + y) * target[2] + ox;
                out[dst..dst + lx].copy_from_slice(&volume[src..src + lx]);
            }
        }
    }
    out
}

/// `pad_or_crop` for label volumes (fill = background 0).
pub fn pad_or_crop_labels(labels: &LabelVolume, target: [usize; 3]) -> Result<LabelVolume> {
    if labels.shape.len() != 3 {
        return Err(Error::Shape("pad_or_crop_labels expects (D,H,W)".into()));
    }
    let as_f32: Vec<f32> = labels.data.iter().map(|&v| v as f32).collect();
    let shape = [labels.shape[0], labels.shape[1], labels.shape[2]];
    let out = pad_or_crop(&as_f32, 1, shape, target, 0.0);
    LabelVolume::new(target.to_vec(), out.iter().map(|&v| v as u8).collect())
}

/// Per axis: nearest-rank 90th percentile of the observed extents, rounded up
/// to the next power of two.
pub fn standardize_shape(shapes: &[[usize; 3]]) -> Result<[usize; 3]> {
    if shapes.is_empty() {
        return Err(Error::Data("standardize_shape on empty list".into()));
    }
    let mut target = [0usize; 3];
    for (ax, t) in target.iter_mut().enumerate() {
        let mut vals: Vec<usize> = shapes.iter().map(|s| s[ax]).collect();
        vals.sort_unstable();
        let rank = ((0.9 * vals.len() as f64).ceil() as usize).clamp(1, vals.len());
        *t = vals[rank - 1].next_power_of_two();
    }
    Ok(target)
}

// ---------------------------------------------------------------------------
// Dataset split
// ---------------------------------------------------------------------------

/// Deterministic shuffled 80/20-style split; disjoint and exhaustive.
pub fn split_dataset(seeds: &[u64], ratio: f64, split_seed: u64) -> Result<(Vec<u64>, Vec<u64>)> {
    if seeds.len() < 2 {
        return Err(Error::Data("split_dataset needs at least 2 items".into()));
    }
    let mut idx: Vec<usize> = (0..seeds.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(split_seed);
    use rand::seq::SliceRandom;
    idx.shuffle(&mut rng);
    let n_train = ((ratio * seeds.len() as f64).floor() as usize).clamp(1, seeds.len() - 1);
    let train = idx[..n_train].iter().map(|&i| seeds[i]).collect();
    let test = idx[n_train..].iter().map(|&i| seeds[i]).collect();
    Ok((train, test))
}

// ---------------------------------------------------------------------------
// .vvol file format
// ---------------------------------------------------------------------------

const VVOL_MAGIC: &[u8; 8] = b"VVOL0001";

/// Serializes a sample: magic, u32-LE header length, UTF-8 key=value header,
/// f32-LE image payload, u8 label payload.
pub fn save_volume(path: &Path, sample: &Sample) -> Result<()> {
    let header = format!(
        "shape={},{},{}\nchannels={}\nclasses={}\nseed={}\nnative_shape={},{},{}\n",
        sample.shape[0],
        sample.shape[1],
        sample.shape[2],
        sample.channels,
        sample.num_classes,
        sample.seed,
        sample.native_shape[0],
        sample.native_shape[1],
        sample.native_shape[2],
    );
    let mut buf = Vec::with_capacity(12 + header.len() + sample.image.len() * 4 + sample.labels.data.len());
    buf.extend_from_slice(VVOL_MAGIC);
    buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
    buf.extend_from_slice(header.as_bytes());
    for v in &sample.image {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend_from_slice(&sample.labels.data);
    let tmp = path.with_extension("vvol.tmp");
    std::fs::write(&tmp, &buf)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn parse_header(text: &str) -> Result<HashMap<String, String>> {
    let mut map = HashMap::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("bad header line: {line}")))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

fn header_usize3(map: &HashMap<String, String>, key: &str) -> Result<[usize; 3]> {
    let raw = map
        .get(key)
        .ok_or_else(|| Error::Format(format!("header missing {key}")))?;
    let parts: Vec<usize> = raw
        .split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Format(format!("bad {key} value: {raw}")))?;
    if parts.len() != 3 {
        return Err(Error::Format(format!("{key} must have 3 extents")));
    }
    Ok([parts[0], parts[1], parts[2]])
}

fn header_usize(map: &HashMap<String, String>, key: &str) -> Result<usize> {
    map.get(key)
        .ok_or_else(|| Error::Format(format!("header missing {key}")))?
        .parse()
        .map_err(|_| Error::Format(format!("bad {key} value")))
}

pub fn load_volume(path: &Path) -> Result<Sample> {
    let mut file = std::fs::File::open(path)?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)?;
    if bytes.len() < 12 || &bytes[..8] != VVOL_MAGIC {
        return Err(Error::Format("not a VVOL0001 file".into()));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if bytes.len() < 12 + hlen {
        return Err(Error::Format("truncated header".into()));
    }
    let header = std::str::from_utf8(&bytes[12..12 + hlen])
        .map_err(|_| Error::Format("header is not UTF-8".into()))?;
    let map = parse_header(header)?;
    let shape = header_usize3(&map, "shape")?;
    let native_shape = header_usize3(&map, "native_shape")?;
    let channels = header_usize(&map, "channels")?;
    let num_classes = header_usize(&map, "classes")?;
    let seed: u64 = map
        .get("seed")
        .ok_or_else(|| Error::Format("header missing seed".into()))?
        .parse()
        .map_err(|_| Error::Format("bad seed value".into()))?;

    let sp: usize = shape.iter().product();
    let img_bytes = channels * sp * 4;
    let expected = 12 + hlen + img_bytes + sp;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "payload size mismatch: file has {} bytes, header implies {expected}",
            bytes.len()
        )));
    }
    let img_start = 12 + hlen;
    let mut image = Vec::with_capacity(channels * sp);
    for i in 0..channels * sp {
        let off = img_start + i * 4;
        image.push(f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()));
    }
    let labels = bytes[img_start + img_bytes..].to_vec();
    if labels.iter().any(|&l| l as usize >= num_classes) {
        return Err(Error::Format("label value out of class range".into()));
    }
    Ok(Sample {
        image,
        channels,
        shape,
        labels: LabelVolume::new(shape.to_vec(), labels)?,
        num_classes,
        seed,
        native_shape,
    })
}

/// Dataset manifest: one `name split` line per volume.
pub fn write_manifest(path: &Path, entries: &[(String, bool)]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    for (name, is_train) in entries {
        writeln!(f, "{name} {}", if *is_train { "train" } else { "test" })?;
    }
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<(String, bool)>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let name = parts
            .next()
            .ok_or_else(|| Error::Format("empty manifest line".into()))?;
        let split = parts
            .next()
            .ok_or_else(|| Error::Format(format!("manifest line missing split: {line}")))?;
        out.push((
            name.to_string(),
            match split {
                "train" => true,
                "test" => false,
                other => return Err(Error::Format(format!("unknown split {other}"))),
            },
        ));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn phantom_deterministic() {
        let spec = PhantomSpec::hippocampus_like();
        let a = generate_phantom(7, &spec).unwrap();
        let b = generate_phantom(7, &spec).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn phantom_noiseless_piecewise_constant() {
        let mut spec = PhantomSpec::hippocampus_like();
        spec.noise_sigma = 0.0;
        spec.structures.truncate(1);
        spec.num_classes = 2;
        let s = generate_phantom(3, &spec).unwrap();
        assert!(s.labels.data.iter().any(|&l| l == 1));
        let mut distinct: Vec<f32> = s.image.clone();
        distinct.sort_by(|a, b| a.partial_cmp(b).unwrap());
        distinct.dedup();
        assert!(distinct.len() <= 2, "piecewise constant expected, got {} values", distinct.len());
    }

    #[test]
    fn phantom_class_census() {
        let spec = PhantomSpec::hippocampus_like();
        let mut hits = vec![0usize; spec.num_classes];
        let trials = 200;
        for seed in 0..trials {
            let s = generate_phantom(seed, &spec).unwrap();
            for c in 1..spec.num_classes {
                if s.labels.data.iter().any(|&l| l as usize == c) {
                    hits[c] += 1;
                }
            }
        }
        for c in 1..spec.num_classes {
            assert!(hits[c] as f64 >= 0.95 * trials as f64, "class {c} present in {}/{trials}", hits[c]);
        }
    }

    #[test]
    fn normalize_constant_is_zero() {
        let v = vec![2.5f32; 100];
        assert_eq!(normalize_intensity(&v).unwrap(), vec![0.0; 100]);
    }

    #[test]
    fn normalize_range_and_monotonic() {
        let v: Vec<f32> = (0..1000).map(|i| i as f32).collect();
        let n = normalize_intensity(&v).unwrap();
        assert_eq!(n[0], 0.0);
        assert_eq!(n[999], 1.0);
        for w in n.windows(2) {
            assert!(w[0] <= w[1]);
        }
    }

    #[test]
    fn normalize_saturation_fraction() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let v: Vec<f32> = (0..10_000).map(|_| rng.gen_range(-10.0..10.0)).collect();
        let n = normalize_intensity(&v).unwrap();
        assert!(n.iter().all(|&x| (0.0..=1.0).contains(&x)));
        let lo_sat = n.iter().filter(|&&x| x == 0.0).count();
        let hi_sat = n.iter().filter(|&&x| x == 1.0).count();
        assert!(lo_sat <= 100, "low saturation {lo_sat}");
        assert!(hi_sat <= 100, "high saturation {hi_sat}");
    }

    #[test]
    fn normalize_rejects_nan() {
        assert!(normalize_intensity(&[1.0, f32::NAN]).is_err());
    }

    #[test]
    fn downsample_constant() {
        let v = vec![3.0f32; 8 * 8 * 8];
        let d = downsample_image(&v, 1, [8, 8, 8], 2).unwrap();
        assert!(d.iter().all(|&x| (x - 3.0).abs() < 1e-6));
    }

    #[test]
    fn downsample_ramp() {
        // linear ramp along W: value = x coordinate
        let (d, h, w) = (2usize, 2usize, 8usize);
        let mut v = vec![0.0f32; d * h * w];
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    v[(z * h + y) * w + x] = x as f32;
                }
            }
        }
        let out = downsample_image(&v, 1, [2, 2, 8], 2).unwrap();
        // output sample o sits at input coordinate 2o + 0.5
        for (i, &val) in out.iter().enumerate() {
            let x = i % 4;
            assert!((val - (2.0 * x as f32 + 0.5)).abs() < 1e-6, "at {x}: {val}");
        }
    }

    #[test]
    fn downsample_matches_direct_weights_oracle() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let shape = [4usize, 6, 8];
        let v: Vec<f32> = (0..shape.iter().product::<usize>()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let out = downsample_image(&v, 1, shape, 2).unwrap();
        let [_, h, w] = shape;
        // direct-weight oracle
        for oz in 0..2 {
            for oy in 0..3 {
                for ox in 0..4 {
                    let mut acc = 0.0f64;
                    for (iz, wz) in [(2 * oz, 0.5f64), (2 * oz + 1, 0.5)] {
                        for (iy, wyv) in [(2 * oy, 0.5f64), (2 * oy + 1, 0.5)] {
                            for (ix, wxv) in [(2 * ox, 0.5f64), (2 * ox + 1, 0.5)] {
                                acc += wz * wyv * wxv * v[(iz * h + iy) * w + ix] as f64;
                            }
                        }
                    }
                    let got = out[(oz * 3 + oy) * 4 + ox];
                    assert!((got as f64 - acc).abs() <= 1e-6, "got {got}, oracle {acc}");
                }
            }
        }
    }

    #[test]
    fn downsample_labels_value_set() {
        let mut data = vec![0u8; 4 * 4 * 4];
        for (i, v) in data.iter_mut().enumerate() {
            *v = (i % 2) as u8; // checkerboard-ish
        }
        let l = LabelVolume::new(vec![4, 4, 4], data).unwrap();
        let d = downsample_labels(&l, 2).unwrap();
        assert!(d.data.iter().all(|&v| v <= 1));
    }

    #[test]
    fn downsample_labels_index_oracle() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let data: Vec<u8> = (0..8 * 8 * 8).map(|_| rng.gen_range(0..5u8)).collect();
        let l = LabelVolume::new(vec![8, 8, 8], data.clone()).unwrap();
        for factor in [2usize, 4, 8] {
            let d = downsample_labels(&l, factor).unwrap();
            let oe = 8 / factor;
            for oz in 0..oe {
                for oy in 0..oe {
                    for ox in 0..oe {
                        let (iz, iy, ix) = (
                            oz * factor + factor / 2,
                            oy * factor + factor / 2,
                            ox * factor + factor / 2,
                        );
                        assert_eq!(d.data[(oz * oe + oy) * oe + ox], data[(iz * 8 + iy) * 8 + ix]);
                    }
                }
            }
        }
    }

    #[test]
    fn pad_then_crop_restores() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let v: Vec<f32> = (0..30 * 60 * 30).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let padded = pad_or_crop(&v, 1, [30, 60, 30], [32, 64, 32], 0.0);
        let restored = pad_or_crop(&padded, 1, [32, 64, 32], [30, 60, 30], 0.0);
        assert_eq!(v, restored);
    }

    #[test]
    fn pad_centers_and_crop_is_symmetric() {
        let v = vec![1.0f32; 30 * 60 * 30];
        let p = pad_or_crop(&v, 1, [30, 60, 30], [32, 64, 32], 0.0);
        // low pad of (32-30)/2 = 1 on axis 0
        assert_eq!(p[0], 0.0);
        let inner = ((1 * 64) + 2) * 32 + 1;
        assert_eq!(p[inner], 1.0);
        // identity
        let same = pad_or_crop(&v, 1, [30, 60, 30], [30, 60, 30], 0.0);
        assert_eq!(same, v);
    }

    #[test]
    fn standardize_shape_cases() {
        let shapes = vec![[28usize, 60, 28]; 5];
        assert_eq!(standardize_shape(&shapes).unwrap(), [32, 64, 32]);

        let shapes: Vec<[usize; 3]> = (1..=100).map(|i| [i, i, i]).collect();
        assert_eq!(standardize_shape(&shapes).unwrap(), [128, 128, 128]);

        assert!(standardize_shape(&[]).is_err());
    }

    #[test]
    fn split_properties() {
        let seeds: Vec<u64> = (0..10).collect();
        let (train, test) = split_dataset(&seeds, 0.8, 42).unwrap();
        assert_eq!(train.len(), 8);
        assert_eq!(test.len(), 2);
        let (t2, s2) = split_dataset(&seeds, 0.8, 42).unwrap();
        assert_eq!(train, t2);
        assert_eq!(test, s2);
        let mut all: Vec<u64> = train.iter().chain(test.iter()).cloned().collect();
        all.sort_unstable();
        assert_eq!(all, seeds);
    }

    #[test]
    fn vvol_roundtrip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let spec = PhantomSpec::hippocampus_like();
        let s = generate_phantom(11, &spec).unwrap();
        let path = dir.path().join("a.vvol");
        save_volume(&path, &s).unwrap();
        let loaded = load_volume(&path).unwrap();
        assert_eq!(s, loaded);

        // truncation
        let bytes = std::fs::read(&path).unwrap();
        let trunc = &bytes[..bytes.len() - 10];
        let bad = dir.path().join("bad.vvol");
        std::fs::write(&bad, trunc).unwrap();
        assert!(load_volume(&bad).is_err());

        // header/payload disagreement
        let mut tampered = bytes.clone();
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let header = String::from_utf8(bytes[12..12 + hlen].to_vec()).unwrap();
        let new_header = header.replace("shape=32,64,32", "shape=32,64,33");
        tampered.splice(12..12 + hlen, new_header.into_bytes());
        std::fs::write(&bad, &tampered).unwrap();
        assert!(load_volume(&bad).is_err());

        // bad magic
        let mut nomagic = bytes;
        nomagic[0] = b'X';
        std::fs::write(&bad, &nomagic).unwrap();
        assert!(load_volume(&bad).is_err());
    }
}
