//! Training, restoration, ablation and routing reports over synthetic data.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{patchify, unpatchify, Conditioning, MimDit};
use crate::checkpoint::Checkpoint;
use crate::config::{InterRouting, IntraRouting, Mechanism, MiMConfig};
use crate::degradation::{build_dataset, Dataset, DatasetOptions, DegradationKind, PairedSample};
use crate::error::{MimError, Result};
use crate::flow::{euler_sample, flow_loss, ConditionedField, SamplerConfig, VelocityField};
use crate::optim::Adam;
use crate::params::{ParamStore, Session};
use crate::routing::{balance_penalty, RoutingSink};
use crate::tensor::Tensor;

/// Reported instead of an infinite PSNR when MSE falls below `1e-18`.
pub const PSNR_CAP: f64 = 180.0;
/// Window over which the final training loss is averaged.
pub const LOSS_WINDOW: usize = 100;

const BATCH_STREAM: u64 = 1;
const RESTORE_STREAM: u64 = 1 << 32;
const REPORT_STREAM: u64 = 1 << 33;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoIntra,
    SpatialOnly,
    ChannelOnly,
    SwinOnly,
    SeOnly,
    SparseInterSparseIntra,
    SparseInterDenseIntra,
}

impl Variant {
    pub const ALL: [Variant; 8] = [
        Variant::Full,
        Variant::NoIntra,
        Variant::SpatialOnly,
        Variant::ChannelOnly,
        Variant::SwinOnly,
        Variant::SeOnly,
        Variant::SparseInterSparseIntra,
        Variant::SparseInterDenseIntra,
    ];

    /// The four homogeneous variants, one per mechanism.
    pub const SINGLE_STRUCTURE: [Variant; 4] = [
        Variant::SpatialOnly,
        Variant::ChannelOnly,
        Variant::SwinOnly,
        Variant::SeOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoIntra => "no_intra",
            Variant::SpatialOnly => "spatial_only",
            Variant::ChannelOnly => "channel_only",
            Variant::SwinOnly => "swin_only",
            Variant::SeOnly => "se_only",
            Variant::SparseInterSparseIntra => "sparse_inter_sparse_intra",
            Variant::SparseInterDenseIntra => "sparse_inter_dense_intra",
        }
    }

    /// The model configuration this variant trains, derived from `base`.
    pub fn apply(self, base: &MiMConfig) -> MiMConfig {
        let mut cfg = base.clone();
        let only = |m: Mechanism| vec![m; MiMConfig::GROUP_COUNT];
        match self {
            Variant::Full => {}
            Variant::NoIntra => cfg.intra_routing = IntraRouting::Single,
            Variant::SpatialOnly => cfg.groups = only(Mechanism::Spatial),
            Variant::ChannelOnly => cfg.groups = only(Mechanism::Channel),
            Variant::SwinOnly => cfg.groups = only(Mechanism::Swin),
            Variant::SeOnly => cfg.groups = only(Mechanism::Se),
            Variant::SparseInterSparseIntra => cfg.inter_routing = InterRouting::SparseTop1,
            Variant::SparseInterDenseIntra => {
                cfg.inter_routing = InterRouting::SparseTop1;
                cfg.intra_routing = IntraRouting::DenseUniform;
            }
        }
        cfg
    }
}

impl FromStr for Variant {
    type Err = MimError;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| MimError::Config(format!("unknown variant {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            steps: 2000,
            batch_size: 4,
            log_every: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Dataset file; commands fall back to `dataset.mimp` in the output directory.
    pub path: Option<PathBuf>,
    pub count: usize,
    /// Trailing samples reserved for evaluation.
    pub held_out: usize,
    pub kinds: Vec<DegradationKind>,
    pub severity_min: f64,
    pub severity_max: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            path: None,
            count: 96,
            held_out: 24,
            kinds: vec![DegradationKind::Blur, DegradationKind::Haze, DegradationKind::Lowlight],
            severity_min: 0.3,
            severity_max: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub variant: Variant,
    pub model: MiMConfig,
    pub sampler: SamplerConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            variant: Variant::Full,
            model: MiMConfig::default(),
            sampler: SamplerConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_text(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| MimError::Config(format!("bad experiment config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// The architecture actually trained: `model` with the variant applied.
    pub fn model_config(&self) -> MiMConfig {
        self.variant.apply(&self.model)
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        let fail = |msg: String| Err(MimError::Config(msg));
        let t = &self.train;
        if !(t.learning_rate > 0.0 && t.learning_rate.is_finite()) {
            return fail(format!("learning rate {} must be positive", t.learning_rate));
        }
        if t.batch_size == 0 || t.log_every == 0 {
            return fail("batch_size and log_every must be at least 1".into());
        }
        let d = &self.data;
        if d.kinds.is_empty() {
            return fail("data.kinds is empty".into());
        }
        if d.count == 0 || d.held_out >= d.count {
            return fail(format!("cannot hold out {} of {} samples", d.held_out, d.count));
        }
        if !(0.0..=1.0).contains(&d.severity_min) || !(d.severity_min..=1.0).contains(&d.severity_max) {
            return fail(format!("severity range [{}, {}] invalid", d.severity_min, d.severity_max));
        }
        if self.sampler.steps == 0 {
            return fail("sampler.steps must be at least 1".into());
        }
        Ok(())
    }

    pub fn dataset_options(&self) -> DatasetOptions {
        DatasetOptions {
            count: self.data.count,
            kinds: self.data.kinds.clone(),
            severity: (self.data.severity_min, self.data.severity_max),
            seed: self.seed,
            height: self.model.image_size,
            width: self.model.image_size,
            channels: self.model.channels,
        }
    }

    pub fn build_dataset(&self) -> Result<Dataset> {
        build_dataset(&self.dataset_options())
    }
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub checkpoint: Checkpoint,
    /// Mean batch loss at every step.
    pub losses: Vec<f64>,
    pub log: Vec<String>,
}

impl TrainReport {
    pub fn initial_loss(&self) -> Option<f64> {
        window_mean(&self.losses[..self.losses.len().min(LOSS_WINDOW)])
    }

    pub fn final_loss(&self) -> Option<f64> {
        window_mean(&self.losses[self.losses.len().saturating_sub(LOSS_WINDOW)..])
    }
}

fn window_mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

fn require_samples(data: &[PairedSample], what: &str) -> Result<()> {
    if data.is_empty() {
        return Err(MimError::Contract(format!("{what} needs at least one sample")));
    }
    Ok(())
}

/// Minimizes the flow loss with Adam over uniformly drawn samples and times.
/// Every random draw derives from `cfg.seed`, so the run is reproducible.
pub fn train(cfg: &ExperimentConfig, data: &[PairedSample]) -> Result<TrainReport> {
    cfg.validate()?;
    require_samples(data, "training")?;
    let mcfg = cfg.model_config();
    let (model, mut store) = MimDit::new(&mcfg, cfg.seed)?;
    let pairs: Vec<(Tensor, Tensor)> = data
        .iter()
        .map(|s| Ok((patchify(&s.clean, mcfg.patch)?, patchify(&s.degraded, mcfg.patch)?)))
        .collect::<Result<_>>()?;
    let shape = pairs[0].0.shape().to_vec();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(BATCH_STREAM);
    let mut adam = Adam::new(cfg.train.learning_rate);
    let mut losses = Vec::with_capacity(cfg.train.steps);
    let mut log = Vec::new();
    let batch = cfg.train.batch_size;
    for step in 0..cfg.train.steps {
        let (loss, grads) = {
            let mut s = Session::new(&store);
            let mut sink = RoutingSink::default();
            let mut total = None;
            for _ in 0..batch {
                let (x, lq) = &pairs[rng.gen_range(0..pairs.len())];
                let t: f64 = rng.gen();
                let z = Tensor::randn(&shape, 1.0, &mut rng);
                let l = sample_loss(&mut s, &model, x, lq, &z, t, &mut sink, mcfg.balance_coef)?;
                total = Some(match total {
                    Some(acc) => s.graph.add(acc, l)?,
                    None => l,
                });
            }
            let mut loss = s.graph.scale(total.expect("batch is nonempty"), 1.0 / batch as f64);
            if let Some(p) = balance_penalty(&mut s, &sink, mcfg.balance_coef)? {
                loss = s.graph.add(loss, p)?;
            }
            let value = s.graph.data(loss)[0];
            if !value.is_finite() {
                return Err(MimError::Numerical {
                    step,
                    detail: format!("training loss is {value}"),
                });
            }
            s.backward(loss)?;
            (value, s.param_grads())
        };
        store.accumulate_grads(grads);
        adam.step(&mut store);
        losses.push(loss);
        if (step + 1) % cfg.train.log_every == 0 {
            let recent = &losses[losses.len().saturating_sub(cfg.train.log_every)..];
            let line = format!("step {} loss {:.6}", step + 1, window_mean(recent).unwrap_or(loss));
            info!("{line}");
            log.push(line);
        }
    }
    Ok(TrainReport {
        checkpoint: Checkpoint::new(&mcfg, &store),
        losses,
        log,
    })
}

#[allow(clippy::too_many_arguments)]
fn sample_loss(
    s: &mut Session,
    model: &MimDit,
    x: &Tensor,
    lq: &Tensor,
    z: &Tensor,
    t: f64,
    sink: &mut RoutingSink,
    balance_coef: f64,
) -> Result<crate::autodiff::Var> {
    if balance_coef == 0.0 {
        return flow_loss(s, model, x, lq, z, t);
    }
    // Same objective, but routed through the sink so router probabilities are recorded.
    struct Traced<'a> {
        model: &'a MimDit,
        sink: std::cell::RefCell<&'a mut RoutingSink>,
    }
    impl crate::flow::VelocityModel for Traced<'_> {
        fn velocity(&self, s: &mut Session, z_lq: crate::autodiff::Var, x_t: crate::autodiff::Var, t: f64) -> Result<crate::autodiff::Var> {
            let mut sink = self.sink.borrow_mut();
            self.model.forward(s, z_lq, x_t, t, Conditioning::Enabled, Some(&mut **sink))
        }
    }
    let traced = Traced {
        model,
        sink: std::cell::RefCell::new(sink),
    };
    flow_loss(s, &traced, x, lq, z, t)
}

pub fn psnr(mse: f64) -> f64 {
    if mse < 1e-18 {
        PSNR_CAP
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

pub fn mse(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape(), "mse shape mismatch");
    let sum: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    sum / a.numel() as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct FidelityRow {
    pub label: String,
    pub count: usize,
    pub mse: f64,
    pub psnr: f64,
    /// Error of the degraded input itself, the do-nothing baseline.
    pub degraded_mse: f64,
    pub degraded_psnr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    /// One row per degradation kind in canonical order, then an `all` row.
    pub rows: Vec<FidelityRow>,
    pub losses: Vec<f64>,
}

impl MetricsRecord {
    pub fn overall(&self) -> &FidelityRow {
        self.rows.last().expect("metrics always hold an overall row")
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{:<10} {:>6} {:>14} {:>10} {:>14} {:>10}\n",
            "kind", "count", "mse", "psnr", "degraded_mse", "degraded_psnr"
        );
        for r in &self.rows {
            writeln!(
                out,
                "{:<10} {:>6} {:>14.8e} {:>10.4} {:>14.8e} {:>10.4}",
                r.label, r.count, r.mse, r.psnr, r.degraded_mse, r.degraded_psnr
            )
            .unwrap();
        }
        out
    }
}

fn fidelity_row(label: String, errs: &[(f64, f64)]) -> FidelityRow {
    let n = errs.len() as f64;
    let mse = errs.iter().map(|e| e.0).sum::<f64>() / n;
    let degraded_mse = errs.iter().map(|e| e.1).sum::<f64>() / n;
    FidelityRow {
        label,
        count: errs.len(),
        mse,
        psnr: psnr(mse),
        degraded_mse,
        degraded_psnr: psnr(degraded_mse),
    }
}

fn label_of(s: &PairedSample) -> String {
    s.label().map(|k| k.name().to_string()).unwrap_or_else(|| "unlabeled".into())
}

/// Groups per-sample values by label, in canonical kind order with unlabeled last.
fn by_label<T: Clone>(samples: &[PairedSample], values: &[T]) -> Vec<(String, Vec<T>)> {
    let mut keys: Vec<Option<DegradationKind>> = samples.iter().map(PairedSample::label).collect();
    keys.sort_by_key(|k| k.map_or(usize::MAX, |k| k as usize));
    keys.dedup();
    keys.into_iter()
        .map(|key| {
            let vals = samples
                .iter()
                .zip(values)
                .filter(|(s, _)| s.label() == key)
                .map(|(_, v)| v.clone())
                .collect();
            (key.map_or_else(|| "unlabeled".to_string(), |k| k.name().to_string()), vals)
        })
        .collect()
}

/// `count: u32` followed by each tensor in the standard stream layout.
pub fn write_tensors(path: &std::path::Path, tensors: &[Tensor]) -> Result<()> {
    let mut bytes = (tensors.len() as u32).to_le_bytes().to_vec();
    for t in tensors {
        t.write_to(&mut bytes).expect("writing to a Vec cannot fail");
    }
    std::fs::write(path, bytes).map_err(|e| MimError::io(path, e))
}

pub fn read_tensors(path: &std::path::Path) -> Result<Vec<Tensor>> {
    let bytes = std::fs::read(path).map_err(|e| MimError::io(path, e))?;
    let mut r = bytes.as_slice();
    let count = crate::tensor::read_u32(&mut r)? as usize;
    (0..count).map(|_| Tensor::read_from(&mut r)).collect()
}

#[derive(Clone, Debug)]
pub struct Restoration {
    pub restored: Vec<Tensor>,
    pub metrics: MetricsRecord,
}

/// Initial sampler noise for held-out sample `index`.
pub fn sampler_noise(seed: u64, index: usize, shape: &[usize]) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(RESTORE_STREAM + index as u64);
    Tensor::randn(shape, 1.0, &mut rng)
}

/// Runs the sampler once per sample with the field `field_for(index, z_lq)` and
/// scores the clamped result against the clean reference.
pub fn restore_with<'a, F>(
    samples: &[PairedSample],
    mcfg: &MiMConfig,
    sampler: &SamplerConfig,
    seed: u64,
    mut field_for: F,
) -> Result<Restoration>
where
    F: FnMut(usize, &Tensor) -> Result<Box<dyn VelocityField + 'a>>,
{
    require_samples(samples, "restoration")?;
    let mut restored = Vec::with_capacity(samples.len());
    let mut errs = Vec::with_capacity(samples.len());
    for (i, sample) in samples.iter().enumerate() {
        let [c, h, w] = *sample.degraded.shape() else {
            return Err(MimError::dim("restore", format!("image shape {:?}", sample.degraded.shape())));
        };
        if (c, h, w) != (mcfg.channels, mcfg.image_size, mcfg.image_size) {
            return Err(MimError::Contract(format!(
                "sample {i} is {c}x{h}x{w}, model expects {}x{}x{}",
                mcfg.channels, mcfg.image_size, mcfg.image_size
            )));
        }
        let z_lq = patchify(&sample.degraded, mcfg.patch)?;
        let z = sampler_noise(seed, i, z_lq.shape());
        let field = field_for(i, &z_lq)?;
        let out = euler_sample(field.as_ref(), &z, sampler)?;
        let mut img = unpatchify(&out, c, h, w, mcfg.patch)?;
        img.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        errs.push((mse(&img, &sample.clean), mse(&sample.degraded, &sample.clean)));
        restored.push(img);
    }
    let mut rows: Vec<FidelityRow> = by_label(samples, &errs)
        .into_iter()
        .map(|(label, e)| fidelity_row(label, &e))
        .collect();
    rows.push(fidelity_row("all".into(), &errs));
    Ok(Restoration {
        restored,
        metrics: MetricsRecord {
            rows,
            losses: Vec::new(),
        },
    })
}

/// Restores each degraded image with the trained model.
pub fn restore(ck: &Checkpoint, samples: &[PairedSample], sampler: &SamplerConfig, seed: u64) -> Result<Restoration> {
    let (model, store) = ck.instantiate()?;
    restore_model(&model, &store, samples, sampler, seed)
}

pub fn restore_model(
    model: &MimDit,
    store: &ParamStore,
    samples: &[PairedSample],
    sampler: &SamplerConfig,
    seed: u64,
) -> Result<Restoration> {
    let lqs: Vec<Tensor> = samples
        .iter()
        .map(|s| patchify(&s.degraded, model.cfg.patch))
        .collect::<Result<_>>()?;
    restore_with(samples, &model.cfg, sampler, seed, |i, _| {
        Ok(Box::new(ConditionedField {
            model,
            store,
            z_lq: &lqs[i],
        }))
    })
}

/// Which blocks' dense gates feed the routing report.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ReportBlocks {
    #[default]
    First,
    /// Mean over every block.
    All,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoutingReport {
    pub kinds: Vec<DegradationKind>,
    /// Mean dense gate vector per kind, in canonical group order.
    pub rows: Vec<Vec<f64>>,
    pub counts: Vec<usize>,
    pub groups: Vec<Mechanism>,
}

impl RoutingReport {
    pub fn row_sums(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.iter().sum()).collect()
    }

    /// Largest L1 distance between any two rows.
    pub fn max_pairwise_l1(&self) -> f64 {
        let mut best = 0.0f64;
        for (i, a) in self.rows.iter().enumerate() {
            for b in &self.rows[i + 1..] {
                best = best.max(a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum());
            }
        }
        best
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{:<10}", "kind");
        for g in &self.groups {
            write!(out, " {:>10}", g.name()).unwrap();
        }
        writeln!(out, " {:>10} {:>6}", "sum", "count").unwrap();
        for ((kind, row), (count, sum)) in self.kinds.iter().zip(&self.rows).zip(self.counts.iter().zip(self.row_sums())) {
            write!(out, "{:<10}", kind.name()).unwrap();
            for g in row {
                write!(out, " {g:>10.6}").unwrap();
            }
            writeln!(out, " {sum:>10.6} {count:>6}").unwrap();
        }
        out
    }
}

/// Mean dense gates per degradation label. Each sample is run once from seeded
/// noise at `t = 0`, the state the sampler starts from.
pub fn route_report(
    model: &MimDit,
    store: &ParamStore,
    samples: &[PairedSample],
    blocks: ReportBlocks,
    seed: u64,
) -> Result<RoutingReport> {
    require_samples(samples, "routing report")?;
    if let Some(i) = samples.iter().position(|s| s.spec.is_none()) {
        return Err(MimError::Contract(format!("routing report needs labels; sample {i} has none")));
    }
    let mut gates = Vec::with_capacity(samples.len());
    for (i, sample) in samples.iter().enumerate() {
        let z_lq = patchify(&sample.degraded, model.cfg.patch)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(REPORT_STREAM + i as u64);
        let x_t = Tensor::randn(z_lq.shape(), 1.0, &mut rng);
        let mut s = Session::inference(store);
        let (lq, xt) = (s.constant(z_lq), s.constant(x_t));
        let mut sink = RoutingSink {
            label: Some(label_of(sample)),
            ..RoutingSink::default()
        };
        model.forward(&mut s, lq, xt, 0.0, Conditioning::Enabled, Some(&mut sink))?;
        let used: Vec<&Vec<f64>> = match blocks {
            ReportBlocks::First => sink.traces.iter().filter(|t| t.block == 0).map(|t| &t.dense).collect(),
            ReportBlocks::All => sink.traces.iter().map(|t| &t.dense).collect(),
        };
        gates.push(mean_rows(&used));
    }
    let grouped = by_label(samples, &gates);
    let mut report = RoutingReport {
        kinds: Vec::new(),
        rows: Vec::new(),
        counts: Vec::new(),
        groups: model.cfg.groups.clone(),
    };
    for (label, vecs) in grouped {
        report.kinds.push(label.parse()?);
        report.counts.push(vecs.len());
        report.rows.push(mean_rows(&vecs.iter().collect::<Vec<_>>()));
    }
    Ok(report)
}

fn mean_rows(rows: &[&Vec<f64>]) -> Vec<f64> {
    let mut acc = vec![0.0; rows[0].len()];
    for r in rows {
        acc.iter_mut().zip(r.iter()).for_each(|(a, b)| *a += b);
    }
    acc.iter_mut().for_each(|a| *a /= rows.len() as f64);
    acc
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    pub params: usize,
    pub final_loss: Option<f64>,
    pub mse: f64,
    pub psnr: f64,
}

/// One trained variant and its held-out evaluation.
#[derive(Clone, Debug)]
pub struct VariantRun {
    pub variant: Variant,
    pub train: TrainReport,
    pub restoration: Restoration,
}

impl VariantRun {
    pub fn row(&self) -> AblationRow {
        let overall = self.restoration.metrics.overall();
        AblationRow {
            variant: self.variant,
            params: self.train.checkpoint.store.numel(),
            final_loss: self.train.final_loss(),
            mse: overall.mse,
            psnr: overall.psnr,
        }
    }
}

/// Trains `base` with its variant replaced by `variant` and evaluates on `held_out`.
pub fn run_variant(
    base: &ExperimentConfig,
    variant: Variant,
    train_set: &[PairedSample],
    held_out: &[PairedSample],
) -> Result<VariantRun> {
    let cfg = ExperimentConfig {
        variant,
        ..base.clone()
    };
    info!("training variant {}", variant.name());
    let report = train(&cfg, train_set)?;
    let restoration = restore(&report.checkpoint, held_out, &cfg.sampler, cfg.seed)?;
    Ok(VariantRun {
        variant,
        train: report,
        restoration,
    })
}

/// Every variant trains from the same seed on the same split.
pub fn ablate(base: &ExperimentConfig, variants: &[Variant], data: &Dataset) -> Result<Vec<AblationRow>> {
    let (train_set, held_out) = data.split(base.data.held_out)?;
    variants
        .iter()
        .map(|&v| Ok(run_variant(base, v, &train_set.samples, &held_out.samples)?.row()))
        .collect()
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut out = format!(
        "{:<26} {:>8} {:>12} {:>14} {:>10}\n",
        "variant", "params", "final_loss", "mse", "psnr"
    );
    for r in rows {
        let loss = r.final_loss.map_or_else(|| "-".to_string(), |l| format!("{l:.6}"));
        writeln!(
            out,
            "{:<26} {:>8} {:>12} {:>14.8e} {:>10.4}",
            r.variant.name(),
            r.params,
            loss,
            r.mse,
            r.psnr
        )
        .unwrap();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ExperimentConfig {
        ExperimentConfig {
            model: MiMConfig {
                model_dim: 8,
                block_count: 1,
                image_size: 8,
                ..MiMConfig::default()
            },
            train: TrainConfig {
                steps: 3,
                batch_size: 2,
                log_every: 1,
                ..TrainConfig::default()
            },
            data: DataConfig {
                count: 6,
                held_out: 2,
                ..DataConfig::default()
            },
            sampler: SamplerConfig { steps: 4 },
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn config_text_roundtrips_and_rejects_unknown_keys() {
        let cfg = tiny();
        assert_eq!(ExperimentConfig::from_text(&cfg.to_text()).unwrap(), cfg);
        assert!(ExperimentConfig::from_text("seed = 1\nbogus = 2\n").is_err());
        let parsed = ExperimentConfig::from_text("variant = \"no_intra\"\n[train]\nsteps = 7\n").unwrap();
        assert_eq!((parsed.variant, parsed.train.steps), (Variant::NoIntra, 7));
        assert!(ExperimentConfig::from_text("[data]\ncount = 4\nheld_out = 4\n").is_err());
    }

    #[test]
    fn variants_map_to_distinct_configs() {
        let base = MiMConfig::default();
        let cfgs: Vec<MiMConfig> = Variant::ALL.iter().map(|v| v.apply(&base)).collect();
        for (i, a) in cfgs.iter().enumerate() {
            a.validate().unwrap();
            for b in &cfgs[i + 1..] {
                assert_ne!(a, b);
            }
            assert_eq!(Variant::ALL[i].name().parse::<Variant>().unwrap(), Variant::ALL[i]);
        }
        assert_eq!(Variant::Full.apply(&base), base);
    }

    #[test]
    fn psnr_matches_definition_and_caps() {
        for m in [1e-4, 0.01, 0.5, 1.0] {
            assert!((psnr(m) - 10.0 * (1.0 / m).log10()).abs() <= 1e-9);
        }
        assert_eq!(psnr(0.0), PSNR_CAP);
        assert_eq!(psnr(1e-19), PSNR_CAP);
    }

    #[test]
    fn zero_steps_keeps_initialization() {
        let cfg = ExperimentConfig {
            train: TrainConfig { steps: 0, ..tiny().train },
            ..tiny()
        };
        let data = cfg.build_dataset().unwrap();
        let report = train(&cfg, &data.samples).unwrap();
        let (_, init) = MimDit::new(&cfg.model_config(), cfg.seed).unwrap();
        assert_eq!(report.checkpoint.store, init);
        assert!(report.final_loss().is_none());
    }

    #[test]
    fn training_logs_and_is_deterministic() {
        let cfg = tiny();
        let data = cfg.build_dataset().unwrap();
        let a = train(&cfg, &data.samples).unwrap();
        let b = train(&cfg, &data.samples).unwrap();
        assert_eq!(a.checkpoint.to_bytes(), b.checkpoint.to_bytes());
        assert_eq!(a.losses, b.losses);
        assert_eq!(a.log.len(), 3);
        assert!(train(&cfg, &[]).is_err());
    }

    #[test]
    fn balance_penalty_changes_the_objective() {
        let plain = tiny();
        let mut balanced = tiny();
        balanced.model.balance_coef = 0.5;
        let data = plain.build_dataset().unwrap();
        let a = train(&plain, &data.samples).unwrap();
        let b = train(&balanced, &data.samples).unwrap();
        assert!(b.losses[0] > a.losses[0]);
    }

    /// `(x* - x_t) / (1 - t)` is the straight-line field into `x*`.
    struct Oracle(Tensor);
    impl VelocityField for Oracle {
        fn velocity(&self, x: &Tensor, t: f64) -> Result<Tensor> {
            let v = self.0.data().iter().zip(x.data()).map(|(a, b)| (a - b) / (1.0 - t)).collect();
            Tensor::new(x.shape().to_vec(), v)
        }
    }

    #[test]
    fn oracle_field_restores_exactly() {
        let cfg = tiny();
        let mcfg = cfg.model_config();
        let data = cfg.build_dataset().unwrap();
        let targets: Vec<Tensor> = data.samples.iter().map(|s| patchify(&s.clean, mcfg.patch).unwrap()).collect();
        let out = restore_with(&data.samples, &mcfg, &SamplerConfig { steps: 40 }, 5, |i, _| {
            Ok(Box::new(Oracle(targets[i].clone())))
        })
        .unwrap();
        for (r, s) in out.restored.iter().zip(&data.samples) {
            assert!(r.max_abs_diff(&s.clean) <= 1e-9);
        }
        assert_eq!(out.metrics.overall().psnr, PSNR_CAP);
        assert_eq!(out.metrics.overall().count, data.len());
    }

    #[test]
    fn untrained_report_is_uniform_and_unlabeled_is_rejected() {
        let cfg = tiny();
        let mut data = cfg.build_dataset().unwrap();
        let (model, store) = MimDit::new(&cfg.model_config(), 0).unwrap();
        for blocks in [ReportBlocks::First, ReportBlocks::All] {
            let report = route_report(&model, &store, &data.samples, blocks, 0).unwrap();
            assert_eq!(report.kinds.len(), 3);
            assert_eq!(report.counts.iter().sum::<usize>(), data.len());
            for row in &report.rows {
                assert_eq!(row, &vec![0.25; 4]);
            }
        }
        data.samples[1].spec = None;
        assert!(matches!(
            route_report(&model, &store, &data.samples, ReportBlocks::First, 0),
            Err(MimError::Contract(_))
        ));
    }

    #[test]
    fn single_variant_ablation_matches_plain_run() {
        let cfg = tiny();
        let data = cfg.build_dataset().unwrap();
        let rows = ablate(&cfg, &[Variant::Full, Variant::NoIntra], &data).unwrap();
        let (tr, held) = data.split(cfg.data.held_out).unwrap();
        let report = train(&cfg, &tr.samples).unwrap();
        let rest = restore(&report.checkpoint, &held.samples, &cfg.sampler, cfg.seed).unwrap();
        assert_eq!(rows[0].mse, rest.metrics.overall().mse);
        assert_eq!(rows[0].final_loss, report.final_loss());
        assert!(rows[1].params < rows[0].params);
        let table = ablation_table(&rows);
        assert_eq!(table.lines().count(), 3);
        let widths: Vec<usize> = table.lines().map(|l| l.split_whitespace().count()).collect();
        assert!(widths.iter().all(|&w| w == 5), "{table}");
    }
}
