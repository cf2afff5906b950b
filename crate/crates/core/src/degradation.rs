//! Synthetic paired data: procedural clean images and parameterized corruptions.
//!
//! Images are `[C, H, W]` tensors with values in `[0, 1]`.
//!
//! Dataset layout (little-endian): `MIMP`, version `u32`, count `u32`, then per
//! sample the length-prefixed spec text (empty when unlabeled) followed by the
//! clean and degraded tensors.

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::conv2d;
use crate::error::{MimError, Result};
use crate::tensor::{read_text, read_u32, write_text, Tensor};

const DATASET_MAGIC: &[u8; 4] = b"MIMP";
const DATASET_VERSION: u32 = 1;

pub const MAX_BLUR_SIGMA: f64 = 2.0;
pub const MAX_NOISE_SIGMA: f64 = 0.2;
pub const MAX_STREAKS: usize = 12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DegradationKind {
    Blur,
    Noise,
    Haze,
    Lowlight,
    Rain,
}

impl DegradationKind {
    pub const ALL: [DegradationKind; 5] = [
        DegradationKind::Blur,
        DegradationKind::Noise,
        DegradationKind::Haze,
        DegradationKind::Lowlight,
        DegradationKind::Rain,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DegradationKind::Blur => "blur",
            DegradationKind::Noise => "noise",
            DegradationKind::Haze => "haze",
            DegradationKind::Lowlight => "lowlight",
            DegradationKind::Rain => "rain",
        }
    }
}

impl fmt::Display for DegradationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DegradationKind {
    type Err = MimError;

    fn from_str(s: &str) -> Result<Self> {
        DegradationKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| MimError::Parameter(format!("unknown degradation kind {s:?}")))
    }
}

/// Kind-specific physical parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DegradationParams {
    Blur { sigma: f64 },
    Noise { sigma: f64 },
    Haze { transmission: f64, airlight: f64 },
    Lowlight { gamma: f64, gain: f64 },
    /// `angle` is measured from vertical in radians.
    Rain { streaks: usize, angle: f64, intensity: f64 },
}

impl DegradationParams {
    pub fn kind(&self) -> DegradationKind {
        match self {
            DegradationParams::Blur { .. } => DegradationKind::Blur,
            DegradationParams::Noise { .. } => DegradationKind::Noise,
            DegradationParams::Haze { .. } => DegradationKind::Haze,
            DegradationParams::Lowlight { .. } => DegradationKind::Lowlight,
            DegradationParams::Rain { .. } => DegradationKind::Rain,
        }
    }

    fn fields(&self) -> Vec<(&'static str, String)> {
        match *self {
            DegradationParams::Blur { sigma } | DegradationParams::Noise { sigma } => {
                vec![("sigma", sigma.to_string())]
            }
            DegradationParams::Haze { transmission, airlight } => vec![
                ("transmission", transmission.to_string()),
                ("airlight", airlight.to_string()),
            ],
            DegradationParams::Lowlight { gamma, gain } => {
                vec![("gamma", gamma.to_string()), ("gain", gain.to_string())]
            }
            DegradationParams::Rain { streaks, angle, intensity } => vec![
                ("streaks", streaks.to_string()),
                ("angle", angle.to_string()),
                ("intensity", intensity.to_string()),
            ],
        }
    }

    fn validate(&self) -> Result<()> {
        let within = |name: &str, v: f64, lo: f64, hi: f64| {
            if (lo..=hi).contains(&v) {
                Ok(())
            } else {
                Err(MimError::Parameter(format!("{name} = {v} outside [{lo}, {hi}]")))
            }
        };
        match *self {
            DegradationParams::Blur { sigma } => within("blur sigma", sigma, 0.0, MAX_BLUR_SIGMA),
            DegradationParams::Noise { sigma } => within("noise sigma", sigma, 0.0, MAX_NOISE_SIGMA),
            DegradationParams::Haze { transmission, airlight } => {
                within("transmission", transmission, 0.0, 1.0)?;
                within("airlight", airlight, 0.0, 1.0)
            }
            DegradationParams::Lowlight { gamma, gain } => {
                within("gamma", gamma, 1.0, 2.5)?;
                if gain <= 0.0 || gain > 1.0 {
                    return Err(MimError::Parameter(format!("gain = {gain} outside (0, 1]")));
                }
                Ok(())
            }
            DegradationParams::Rain { streaks, angle, intensity } => {
                within("streaks", streaks as f64, 0.0, MAX_STREAKS as f64)?;
                within("angle", angle, -0.5, 0.5)?;
                within("intensity", intensity, 0.0, 1.0)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DegradationSpec {
    pub severity: f64,
    pub params: DegradationParams,
    pub seed: u64,
}

impl DegradationSpec {
    /// Maps a normalized severity onto kind parameters. Severity 0 is the identity
    /// for every kind; any randomness (airlight, streak angle) comes from `seed`.
    pub fn from_severity(kind: DegradationKind, severity: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&severity) {
            return Err(MimError::Parameter(format!("severity {severity} outside [0, 1]")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = match kind {
            DegradationKind::Blur => DegradationParams::Blur {
                sigma: MAX_BLUR_SIGMA * severity,
            },
            DegradationKind::Noise => DegradationParams::Noise {
                sigma: MAX_NOISE_SIGMA * severity,
            },
            DegradationKind::Haze => DegradationParams::Haze {
                transmission: 1.0 - 0.8 * severity,
                airlight: rng.gen_range(0.8..=1.0),
            },
            DegradationKind::Lowlight => DegradationParams::Lowlight {
                gamma: 1.0 + 1.5 * severity,
                gain: 1.0 - 0.7 * severity,
            },
            DegradationKind::Rain => DegradationParams::Rain {
                streaks: (MAX_STREAKS as f64 * severity).round() as usize,
                angle: rng.gen_range(-0.4..=0.4),
                intensity: rng.gen_range(0.5..=0.7),
            },
        };
        let spec = DegradationSpec { severity, params, seed };
        spec.validate()?;
        Ok(spec)
    }

    pub fn kind(&self) -> DegradationKind {
        self.params.kind()
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.severity) {
            return Err(MimError::Parameter(format!("severity {} outside [0, 1]", self.severity)));
        }
        self.params.validate()
    }
}

/// Space-separated `key=value` pairs. Floats use shortest round-trip formatting.
impl fmt::Display for DegradationSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "kind={} severity={} seed={}", self.kind(), self.severity, self.seed)?;
        for (k, v) in self.params.fields() {
            write!(f, " {k}={v}")?;
        }
        Ok(())
    }
}

impl FromStr for DegradationSpec {
    type Err = MimError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = |what: &str| MimError::Format(format!("degradation spec {s:?}: {what}"));
        let mut fields = std::collections::BTreeMap::new();
        for pair in s.split_whitespace() {
            let (k, v) = pair.split_once('=').ok_or_else(|| bad("expected key=value"))?;
            if fields.insert(k, v).is_some() {
                return Err(bad(&format!("duplicate key {k}")));
            }
        }
        let mut take = |k: &str| fields.remove(k).ok_or_else(|| bad(&format!("missing {k}")));
        let kind: DegradationKind = take("kind")?.parse()?;
        let severity: f64 = take("severity")?.parse().map_err(|_| bad("severity"))?;
        let seed: u64 = take("seed")?.parse().map_err(|_| bad("seed"))?;
        let mut float = |k: &str| -> Result<f64> { take(k)?.parse().map_err(|_| bad(k)) };
        let params = match kind {
            DegradationKind::Blur => DegradationParams::Blur { sigma: float("sigma")? },
            DegradationKind::Noise => DegradationParams::Noise { sigma: float("sigma")? },
            DegradationKind::Haze => DegradationParams::Haze {
                transmission: float("transmission")?,
                airlight: float("airlight")?,
            },
            DegradationKind::Lowlight => DegradationParams::Lowlight {
                gamma: float("gamma")?,
                gain: float("gain")?,
            },
            DegradationKind::Rain => DegradationParams::Rain {
                streaks: float("streaks")? as usize,
                angle: float("angle")?,
                intensity: float("intensity")?,
            },
        };
        if let Some(k) = fields.keys().next() {
            return Err(bad(&format!("unexpected key {k}")));
        }
        let spec = DegradationSpec { severity, params, seed };
        spec.validate()?;
        Ok(spec)
    }
}

fn image_dims(img: &Tensor) -> Result<(usize, usize, usize)> {
    match *img.shape() {
        [c, h, w] => Ok((c, h, w)),
        ref s => Err(MimError::dim("image", format!("expected [C, H, W], got {s:?}"))),
    }
}

fn clamp01(mut img: Tensor) -> Tensor {
    img.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    img
}

/// Smooth gradient plus a sinusoidal texture plus rectangles, min-max normalized
/// so the image spans exactly `[0, 1]`.
pub fn synthesize_clean(seed: u64, height: usize, width: usize, channels: usize) -> Result<Tensor> {
    if height < 4 || width < 4 || channels == 0 {
        return Err(MimError::Parameter(format!(
            "clean images need extents >= 4 and at least one channel, got {channels}x{height}x{width}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (height as f64, width as f64);
    let mut img = Tensor::zeros(&[channels, height, width]);
    for c in 0..channels {
        let (gx, gy): (f64, f64) = (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        let (fx, fy): (f64, f64) = (rng.gen_range(0.3..1.6), rng.gen_range(0.3..1.6));
        let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let amp: f64 = rng.gen_range(0.1..0.5);
        let plane = &mut img.data_mut()[c * height * width..(c + 1) * height * width];
        for y in 0..height {
            for x in 0..width {
                let (xf, yf) = (x as f64, y as f64);
                plane[y * width + x] =
                    gx * xf / w + gy * yf / h + amp * (fx * xf + fy * yf + phase).sin();
            }
        }
        for _ in 0..rng.gen_range(1..=3) {
            let y0 = rng.gen_range(0..height - 1);
            let x0 = rng.gen_range(0..width - 1);
            let y1 = rng.gen_range(y0 + 1..=height);
            let x1 = rng.gen_range(x0 + 1..=width);
            let level: f64 = rng.gen_range(-0.8..0.8);
            for y in y0..y1 {
                for x in x0..x1 {
                    plane[y * width + x] += level;
                }
            }
        }
    }
    let lo = img.data().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = img.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = if hi > lo { hi - lo } else { 1.0 };
    img.data_mut().iter_mut().for_each(|v| *v = (*v - lo) / range);
    Ok(clamp01(img))
}

/// Normalized Gaussian of half-width `ceil(3 sigma)`; a single unit tap at `sigma = 0`.
pub fn gaussian_kernel(sigma: f64) -> Tensor {
    if sigma <= 0.0 {
        return Tensor::full(&[1, 1], 1.0);
    }
    let r = (3.0 * sigma).ceil() as usize;
    let size = 2 * r + 1;
    let mut k = Tensor::zeros(&[size, size]);
    for i in 0..size {
        for j in 0..size {
            let (dy, dx) = (i as f64 - r as f64, j as f64 - r as f64);
            k.data_mut()[i * size + j] = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
        }
    }
    let total: f64 = k.data().iter().sum();
    k.data_mut().iter_mut().for_each(|v| *v /= total);
    k
}

fn add_rain(img: &mut Tensor, streaks: usize, angle: f64, intensity: f64, rng: &mut ChaCha8Rng) -> Result<()> {
    let (c, h, w) = image_dims(img)?;
    let (dx, dy) = (angle.sin(), angle.cos());
    let data = img.data_mut();
    for _ in 0..streaks {
        let x0: f64 = rng.gen_range(0.0..w as f64);
        let y0: f64 = rng.gen_range(0.0..h as f64);
        let len = rng.gen_range(3..=(h / 2).max(3));
        let strength = intensity * rng.gen_range(0.8..=1.0);
        for s in 0..len {
            let x = (x0 + dx * s as f64).floor();
            let y = (y0 + dy * s as f64).floor();
            if x < 0.0 || y < 0.0 || x >= w as f64 || y >= h as f64 {
                break;
            }
            let at = y as usize * w + x as usize;
            for ch in 0..c {
                data[ch * h * w + at] += strength;
            }
        }
    }
    Ok(())
}

pub fn apply_degradation(clean: &Tensor, spec: &DegradationSpec) -> Result<Tensor> {
    spec.validate()?;
    image_dims(clean)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let pointwise = |f: &dyn Fn(f64) -> f64| {
        let data = clean.data().iter().map(|&v| f(v)).collect();
        Tensor::new(clean.shape().to_vec(), data)
    };
    let out = match spec.params {
        DegradationParams::Blur { sigma } => conv2d(clean, &gaussian_kernel(sigma))?,
        DegradationParams::Noise { sigma } => {
            let mut out = clean.clone();
            for v in out.data_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *v += sigma * z;
            }
            out
        }
        DegradationParams::Haze { transmission, airlight } => {
            pointwise(&|v| v * transmission + airlight * (1.0 - transmission))?
        }
        DegradationParams::Lowlight { gamma, gain } => pointwise(&|v| gain * v.powf(gamma))?,
        DegradationParams::Rain { streaks, angle, intensity } => {
            // The spec seed fixed angle and intensity; streak placement continues the stream.
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(1);
            let mut out = clean.clone();
            add_rain(&mut out, streaks, angle, intensity, &mut rng)?;
            out
        }
    };
    Ok(clamp01(out))
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairedSample {
    pub clean: Tensor,
    pub degraded: Tensor,
    /// `None` for pairs imported without a degradation label.
    pub spec: Option<DegradationSpec>,
}

impl PairedSample {
    pub fn label(&self) -> Option<DegradationKind> {
        self.spec.map(|s| s.kind())
    }
}

#[derive(Clone, Debug)]
pub struct DatasetOptions {
    pub count: usize,
    pub kinds: Vec<DegradationKind>,
    pub severity: (f64, f64),
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl Default for DatasetOptions {
    fn default() -> Self {
        DatasetOptions {
            count: 64,
            kinds: vec![DegradationKind::Blur, DegradationKind::Haze, DegradationKind::Lowlight],
            severity: (0.3, 1.0),
            seed: 0,
            height: 16,
            width: 16,
            channels: 1,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<PairedSample>,
}

/// Sample `i` draws from stream `i` of the seed, so any index can be generated alone.
pub fn generate_sample(opts: &DatasetOptions, index: usize) -> Result<PairedSample> {
    if opts.kinds.is_empty() {
        return Err(MimError::Parameter("dataset needs at least one degradation kind".into()));
    }
    let (lo, hi) = opts.severity;
    if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
        return Err(MimError::Parameter(format!("severity range [{lo}, {hi}] invalid")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    rng.set_stream(index as u64);
    let clean = synthesize_clean(rng.gen(), opts.height, opts.width, opts.channels)?;
    let severity = if lo == hi { lo } else { rng.gen_range(lo..=hi) };
    let kind = opts.kinds[index % opts.kinds.len()];
    let spec = DegradationSpec::from_severity(kind, severity, rng.gen())?;
    let degraded = apply_degradation(&clean, &spec)?;
    Ok(PairedSample {
        clean,
        degraded,
        spec: Some(spec),
    })
}

pub fn build_dataset(opts: &DatasetOptions) -> Result<Dataset> {
    if opts.count == 0 {
        return Err(MimError::Parameter("dataset count must be at least 1".into()));
    }
    let samples = (0..opts.count).map(|i| generate_sample(opts, i)).collect::<Result<_>>()?;
    Ok(Dataset { samples })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Splits off the last `held_out` samples.
    pub fn split(&self, held_out: usize) -> Result<(Dataset, Dataset)> {
        if held_out >= self.len() {
            return Err(MimError::Parameter(format!(
                "cannot hold out {held_out} of {} samples",
                self.len()
            )));
        }
        let cut = self.len() - held_out;
        Ok((
            Dataset {
                samples: self.samples[..cut].to_vec(),
            },
            Dataset {
                samples: self.samples[cut..].to_vec(),
            },
        ))
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(DATASET_MAGIC)?;
        w.write_all(&DATASET_VERSION.to_le_bytes())?;
        w.write_all(&(self.samples.len() as u32).to_le_bytes())?;
        for s in &self.samples {
            write_text(w, &s.spec.map(|sp| sp.to_string()).unwrap_or_default())?;
            s.clean.write_to(w)?;
            s.degraded.write_to(w)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Dataset> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|e| MimError::Format(format!("truncated dataset header: {e}")))?;
        if &magic != DATASET_MAGIC {
            return Err(MimError::Format(format!("bad dataset magic {magic:?}")));
        }
        let version = read_u32(r)?;
        if version != DATASET_VERSION {
            return Err(MimError::Format(format!("unsupported dataset version {version}")));
        }
        let count = read_u32(r)? as usize;
        let mut samples = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let text = read_text(r)?;
            let spec = if text.is_empty() { None } else { Some(text.parse()?) };
            let clean = Tensor::read_from(r)?;
            let degraded = Tensor::read_from(r)?;
            if clean.shape() != degraded.shape() {
                return Err(MimError::Format("clean and degraded shapes differ".into()));
            }
            samples.push(PairedSample { clean, degraded, spec });
        }
        Ok(Dataset { samples })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| MimError::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| MimError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        let file = File::open(path).map_err(|e| MimError::io(path, e))?;
        Dataset::read_from(&mut BufReader::new(file))
    }
}

/// Plain-text PGM (one channel) or PPM (three channels) with 8-bit levels.
pub fn to_pnm(img: &Tensor) -> Result<String> {
    let (c, h, w) = image_dims(img)?;
    let magic = match c {
        1 => "P2",
        3 => "P3",
        _ => return Err(MimError::dim("to_pnm", format!("{c} channels; need 1 or 3"))),
    };
    let level = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let mut out = format!("{magic}\n{w} {h}\n255\n");
    for y in 0..h {
        let row: Vec<String> = (0..w)
            .flat_map(|x| (0..c).map(move |ch| (ch, x)))
            .map(|(ch, x)| level(img.data()[ch * h * w + y * w + x]).to_string())
            .collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    Ok(out)
}

pub fn write_pnm(img: &Tensor, path: &Path) -> Result<()> {
    std::fs::write(path, to_pnm(img)?).map_err(|e| MimError::io(path, e))
}
