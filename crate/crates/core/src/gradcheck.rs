//! Central finite-difference checks of reverse-mode gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::backbone::MimDit;
use crate::config::MiMConfig;
use crate::error::Result;
use crate::flow::flow_loss;
use crate::params::{ParamStore, Session};
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_RTOL: f64 = 1e-4;
/// Denominator floor for relative error, so that gradients near zero are
/// compared on an absolute scale of `GRAD_RTOL * GRAD_FLOOR`.
pub const GRAD_FLOOR: f64 = 1e-4;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR)
}

#[derive(Clone, Debug)]
pub struct GradReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    /// Location of the largest error.
    pub worst: String,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= GRAD_RTOL
    }

    fn record(&mut self, analytic: f64, numeric: f64, at: impl FnOnce() -> String) {
        self.checked += 1;
        let err = relative_error(analytic, numeric);
        if err > self.max_rel_err || !err.is_finite() {
            self.max_rel_err = if err.is_finite() { err } else { f64::INFINITY };
            self.worst = format!("{} (analytic {analytic:.6e}, numeric {numeric:.6e})", at());
        }
    }

    fn new(name: &str) -> Self {
        GradReport {
            name: name.to_string(),
            checked: 0,
            max_rel_err: 0.0,
            worst: String::new(),
        }
    }
}

/// Checks every element of every input of a scalar-valued graph function.
pub fn check_inputs<F>(name: &str, inputs: &[Tensor], f: F) -> Result<GradReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    let eval = |ins: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.constant(t.clone())).collect();
        let loss = f(&mut g, &vars)?;
        Ok(g.data(loss)[0])
    };

    let mut report = GradReport::new(name);
    let mut work = inputs.to_vec();
    for i in 0..work.len() {
        for j in 0..work[i].numel() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + FD_STEP;
            let up = eval(&work)?;
            work[i].data_mut()[j] = orig - FD_STEP;
            let down = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            report.record(analytic[i][j], numeric, || format!("input {i}[{j}]"));
        }
    }
    Ok(report)
}

/// Checks every element of every parameter in `store` against a loss built
/// by `f`. Parameters the loss never reads must have zero numeric gradient.
pub fn check_params<F>(name: &str, store: &ParamStore, f: F) -> Result<GradReport>
where
    F: Fn(&mut Session) -> Result<Var>,
{
    let grads = {
        let mut s = Session::new(store);
        let loss = f(&mut s)?;
        s.backward(loss)?;
        s.param_grads()
    };
    let mut analytic: Vec<Vec<f64>> = store.ids().map(|id| vec![0.0; store.get(id).numel()]).collect();
    for (id, g) in grads {
        analytic[id.index()] = g;
    }

    let mut work = store.clone();
    let eval = |st: &ParamStore| -> Result<f64> {
        let mut s = Session::inference(st);
        let loss = f(&mut s)?;
        Ok(s.graph.data(loss)[0])
    };
    let mut report = GradReport::new(name);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for j in 0..store.get(id).numel() {
            let orig = store.get(id).data()[j];
            work.get_mut(id).data_mut()[j] = orig + FD_STEP;
            let up = eval(&work)?;
            work.get_mut(id).data_mut()[j] = orig - FD_STEP;
            let down = eval(&work)?;
            work.get_mut(id).data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            report.record(analytic[id.index()][j], numeric, || {
                format!("{}[{j}]", store.name(id))
            });
        }
    }
    Ok(report)
}

fn rand_in(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, -2.0, 2.0, rng)
}

/// Contracts `y` with fixed random weights so every output element matters.
fn weighted_total(g: &mut Graph, y: Var, rng_seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let w = g.constant(Tensor::uniform(g.shape(y), -1.0, 1.0, &mut rng));
    let prod = g.mul(y, w)?;
    Ok(g.sum(prod))
}

type PrimitiveCase = (&'static str, Vec<Tensor>, Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>);

fn primitive_cases(rng: &mut ChaCha8Rng) -> Vec<PrimitiveCase> {
    let w = rng.gen::<u64>();
    let positive = |shape: &[usize], rng: &mut ChaCha8Rng| Tensor::uniform(shape, 0.5, 2.0, rng);
    let mut cases: Vec<PrimitiveCase> = Vec::new();
    macro_rules! case {
        ($name:expr, [$($t:expr),*], |$g:ident, $v:ident| $body:expr) => {
            cases.push((
                $name,
                vec![$($t),*],
                Box::new(move |$g: &mut Graph, $v: &[Var]| {
                    let y = $body;
                    weighted_total($g, y, w)
                }),
            ));
        };
    }
    case!("add", [rand_in(&[3, 4], rng), rand_in(&[3, 4], rng)], |g, v| g.add(v[0], v[1])?);
    case!("sub", [rand_in(&[3, 4], rng), rand_in(&[3, 4], rng)], |g, v| g.sub(v[0], v[1])?);
    case!("mul", [rand_in(&[3, 4], rng), rand_in(&[3, 4], rng)], |g, v| g.mul(v[0], v[1])?);
    case!("add_row", [rand_in(&[3, 4], rng), rand_in(&[4], rng)], |g, v| g.add_row(v[0], v[1])?);
    case!("mul_row", [rand_in(&[3, 4], rng), rand_in(&[1, 4], rng)], |g, v| g.mul_row(v[0], v[1])?);
    case!("scale", [rand_in(&[2, 3], rng)], |g, v| g.scale(v[0], -1.7));
    case!("scale_by", [rand_in(&[2, 3], rng), rand_in(&[1], rng)], |g, v| g.scale_by(v[0], v[1])?);
    case!("matmul", [rand_in(&[3, 4], rng), rand_in(&[4, 2], rng)], |g, v| g.matmul(v[0], v[1])?);
    case!("transpose", [rand_in(&[3, 2], rng)], |g, v| g.transpose(v[0])?);
    case!("reshape", [rand_in(&[3, 2], rng)], |g, v| g.reshape(v[0], &[2, 3])?);
    case!("softmax_vector", [rand_in(&[5], rng)], |g, v| g.softmax(v[0], 0)?);
    case!("softmax_rows", [rand_in(&[3, 4], rng)], |g, v| g.softmax(v[0], 1)?);
    case!("softmax_columns", [rand_in(&[3, 4], rng)], |g, v| g.softmax(v[0], 0)?);
    case!(
        "layernorm",
        [rand_in(&[2, 4], rng), rand_in(&[4], rng), rand_in(&[4], rng)],
        |g, v| g.layernorm(v[0], v[1], v[2])?
    );
    case!("gelu", [rand_in(&[2, 5], rng)], |g, v| g.gelu(v[0]));
    case!("sigmoid", [rand_in(&[2, 5], rng)], |g, v| g.sigmoid(v[0]));
    case!("mean_axis0", [rand_in(&[3, 4], rng)], |g, v| g.mean_axis(v[0], 0)?);
    case!("mean_axis1", [rand_in(&[3, 4], rng)], |g, v| g.mean_axis(v[0], 1)?);
    case!("sum", [rand_in(&[3, 4], rng)], |g, v| g.sum(v[0]));
    case!("mean", [rand_in(&[3, 4], rng)], |g, v| g.mean(v[0]));
    case!(
        "concat",
        [rand_in(&[2, 3], rng), rand_in(&[1, 3], rng), rand_in(&[3, 3], rng)],
        |g, v| g.concat(v, 0)?
    );
    case!("concat_columns", [rand_in(&[2, 3], rng), rand_in(&[2, 1], rng)], |g, v| g.concat(v, 1)?);
    case!("split", [rand_in(&[5, 3], rng)], |g, v| {
        let parts = g.split(v[0], 0, &[2, 3])?;
        let a = g.scale(parts[0], 2.0);
        let b = g.sum(parts[1]);
        let a = g.sum(a);
        g.add(a, b)?
    });
    case!("slice", [rand_in(&[3, 5], rng)], |g, v| g.slice(v[0], 1, 1, 3)?);
    case!("gather_rows", [rand_in(&[4, 3], rng)], |g, v| g.gather_rows(v[0], &[3, 0, 0, 2])?);
    case!("index", [rand_in(&[5], rng)], |g, v| g.index(v[0], 3)?);
    case!("l2_normalize", [rand_in(&[3, 4], rng)], |g, v| g.l2_normalize(v[0]));
    case!("sum_normalize", [positive(&[4], rng)], |g, v| g.sum_normalize(v[0])?);
    case!("conv2d", [rand_in(&[2, 5, 4], rng), rand_in(&[3, 3], rng)], |g, v| g.conv2d(v[0], v[1])?);
    cases
}

/// Every differentiable primitive on one random instance drawn from `seed`.
pub fn primitive_suite(seed: u64) -> Result<Vec<GradReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    primitive_cases(&mut rng)
        .into_iter()
        .map(|(name, inputs, f)| check_inputs(name, &inputs, f))
        .collect()
}

/// The width-8, two-block model used for whole-model gradient checks.
pub fn gradcheck_config() -> MiMConfig {
    MiMConfig {
        model_dim: 8,
        block_count: 2,
        sub_experts: 3,
        top_k: 2,
        image_size: 8,
        patch: 4,
        window: 2,
        se_reduction: 4,
        ..MiMConfig::default()
    }
}

/// Perturbs every parameter so that zero-initialized and unit-initialized
/// tensors are exercised away from their special values.
pub fn randomize_params(store: &mut ParamStore, std: f64, rng: &mut ChaCha8Rng) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let t = store.get_mut(id);
        for v in t.data_mut() {
            let z: f64 = rng.sample(rand_distr::StandardNormal);
            *v += std * z;
        }
    }
}

/// Flow-loss gradient of a randomized model against finite differences over all parameters.
pub fn model_check(cfg: &MiMConfig, seed: u64) -> Result<GradReport> {
    let (model, mut store) = MimDit::new(cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    randomize_params(&mut store, 0.3, &mut rng);
    let shape = [cfg.tokens(), cfg.patch_dim()];
    let x = Tensor::uniform(&shape, 0.0, 1.0, &mut rng);
    let lq = Tensor::uniform(&shape, 0.0, 1.0, &mut rng);
    let z = Tensor::randn(&shape, 1.0, &mut rng);
    let t = rng.gen_range(0.05..0.95);
    check_params(&format!("model seed {seed}"), &store, |s| flow_loss(s, &model, &x, &lq, &z, t))
}

/// Every primitive and the whole model, each on `instances` seeded random draws.
pub fn full_suite(instances: u64, seed: u64) -> Result<Vec<GradReport>> {
    let cfg = gradcheck_config();
    let mut reports = Vec::new();
    for i in 0..instances {
        let s = seed.wrapping_add(i);
        for mut r in primitive_suite(s)? {
            r.name = format!("{} seed {s}", r.name);
            reports.push(r);
        }
        reports.push(model_check(&cfg, s)?);
    }
    Ok(reports)
}

pub fn report_text(reports: &[GradReport]) -> String {
    reports
        .iter()
        .map(|r| {
            let verdict = if r.passed() { "ok" } else { "FAIL" };
            format!("{verdict:<4} {:<28} checked {:>6} max_rel_err {:.3e} {}\n", r.name, r.checked, r.max_rel_err, r.worst)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_primitive_passes() {
        for seed in 0..3 {
            for r in primitive_suite(seed).unwrap() {
                assert!(r.passed(), "{}: {} at {}", r.name, r.max_rel_err, r.worst);
                assert!(r.checked > 0);
            }
        }
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // d/dx of x * stop(x) is x, not 2x: a constant copy hides one path.
        let report = check_inputs("bad", &[Tensor::from_vec(vec![1.5])], |g, v| {
            let c = g.constant(g.value(v[0]).clone());
            let y = g.mul(v[0], c)?;
            Ok(g.sum(y))
        })
        .unwrap();
        assert!(!report.passed());
    }
}
