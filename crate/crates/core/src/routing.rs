//! Two-level mixture of experts.
//!
//! The outer level densely fuses four structurally different expert groups;
//! inside each group a sparse top-k router picks among sub-experts that share
//! one attention mechanism but hold independent parameters.

use std::fmt::Write as _;

use rand::Rng;

use crate::attention::{AttentionSettings, BoundExpert, Expert, ExpertParams, TokenSequence};
use crate::autodiff::{topk, Var};
use crate::config::{InterRouting, IntraRouting, MiMConfig, Mechanism};
use crate::error::{MimError, Result};
use crate::params::{Linear, ParamStore, Session};

/// Linear gate over mean-pooled tokens.
#[derive(Clone, Copy, Debug)]
pub struct Router {
    pub proj: Linear,
    pub outputs: usize,
}

impl Router {
    pub fn zeroed(store: &mut ParamStore, name: &str, dim: usize, outputs: usize) -> Self {
        Router {
            proj: Linear::zeroed(store, name, dim, outputs),
            outputs,
        }
    }

    pub fn random<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        outputs: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        Router {
            proj: Linear::with_std(store, name, dim, outputs, std, rng),
            outputs,
        }
    }

    /// Raw gate logits, shape `[outputs]`.
    pub fn logits(&self, s: &mut Session, x: &TokenSequence) -> Result<Var> {
        let d = s.store().get(self.proj.weight).shape()[0];
        if x.dim(&s.graph) != d {
            return Err(MimError::dim(
                "router",
                format!("tokens {:?} for router width {d}", s.graph.shape(x.tokens)),
            ));
        }
        let pooled = s.graph.mean_axis(x.tokens, 0)?;
        let logits = self.proj.forward(s, pooled)?;
        s.graph.reshape(logits, &[self.outputs])
    }
}

/// Softmax gate over all outputs; a point on the probability simplex.
pub fn dense_route(s: &mut Session, x: &TokenSequence, router: &Router) -> Result<Var> {
    let logits = router.logits(s, x)?;
    s.graph.softmax(logits, 0)
}

#[derive(Clone, Debug)]
pub struct SparseRoute {
    /// Selected sub-experts, highest probability first.
    pub indices: Vec<usize>,
    /// Renormalized gate of each selected sub-expert, each of shape `[1]`.
    pub gates: Vec<Var>,
    /// Full softmax over all sub-experts, shape `[N]`.
    pub probs: Var,
}

impl SparseRoute {
    pub fn gate_values(&self, s: &Session) -> Vec<f64> {
        self.gates.iter().map(|&g| s.graph.data(g)[0]).collect()
    }
}

/// Softmax, top-k with lowest-index tie-break, renormalize the kept gates.
pub fn sparse_route(s: &mut Session, x: &TokenSequence, router: &Router, k: usize) -> Result<SparseRoute> {
    if k == 0 || k > router.outputs {
        return Err(MimError::Parameter(format!(
            "top-k needs 1 <= k <= {}, got k = {k}",
            router.outputs
        )));
    }
    let logits = router.logits(s, x)?;
    let probs = s.graph.softmax(logits, 0)?;
    let (indices, _) = topk(s.graph.data(probs), k)?;
    let picked = indices
        .iter()
        .map(|&i| s.graph.index(probs, i))
        .collect::<Result<Vec<_>>>()?;
    let picked = s.graph.concat(&picked, 0)?;
    let renormalized = s.graph.sum_normalize(picked)?;
    let gates = (0..k)
        .map(|j| s.graph.index(renormalized, j))
        .collect::<Result<Vec<_>>>()?;
    Ok(SparseRoute {
        indices,
        gates,
        probs,
    })
}

fn weighted_sum(s: &mut Session, terms: &[(Var, Var)]) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for &(out, gate) in terms {
        let scaled = s.graph.scale_by(out, gate)?;
        acc = Some(match acc {
            Some(a) => s.graph.add(a, scaled)?,
            None => scaled,
        });
    }
    acc.ok_or_else(|| MimError::Config("mixture with no experts".into()))
}

/// `y = sum_i gates[i] * f_i(x)` with one scalar gate per expert.
pub fn moe_layer(s: &mut Session, x: &TokenSequence, experts: &[&dyn Expert], gates: Var) -> Result<TokenSequence> {
    let values = s.graph.data(gates).to_vec();
    if values.len() != experts.len() {
        return Err(MimError::Config(format!(
            "{} gates for {} experts",
            values.len(),
            experts.len()
        )));
    }
    if let Some(v) = values.iter().find(|v| !(**v >= 0.0)) {
        return Err(MimError::Config(format!("gate {v} is negative")));
    }
    let mut terms = Vec::with_capacity(experts.len());
    for (i, e) in experts.iter().enumerate() {
        let out = e.forward(s, x)?;
        terms.push((out.tokens, s.graph.index(gates, i)?));
    }
    let y = weighted_sum(s, &terms)?;
    Ok(x.with_tokens(y))
}

/// Sub-experts sharing one mechanism, plus their sparse router.
#[derive(Clone, Debug)]
pub struct ExpertGroup {
    pub mechanism: Mechanism,
    pub experts: Vec<ExpertParams>,
    /// Absent when the group holds a single fixed expert.
    pub router: Option<Router>,
}

impl ExpertGroup {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        mechanism: Mechanism,
        cfg: &MiMConfig,
        rng: &mut R,
    ) -> Self {
        let n = cfg.experts_per_group();
        let experts = (0..n)
            .map(|j| ExpertParams::new(store, &format!("{name}.expert{j}"), mechanism, cfg, rng))
            .collect();
        let router = match cfg.intra_routing {
            IntraRouting::Single => None,
            _ => Some(Router::random(
                store,
                &format!("{name}.router"),
                cfg.model_dim,
                n,
                0.02,
                rng,
            )),
        };
        ExpertGroup {
            mechanism,
            experts,
            router,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GroupOutput {
    pub output: TokenSequence,
    /// `(sub-expert, gate)` for every evaluated sub-expert.
    pub selections: Vec<(usize, f64)>,
    /// Sparse router softmax, when a router ran.
    pub probs: Option<Var>,
}

/// One expert group: only selected sub-experts are evaluated.
pub fn intra_moe_forward(
    s: &mut Session,
    x: &TokenSequence,
    group: &ExpertGroup,
    k: usize,
    mode: IntraRouting,
    settings: AttentionSettings,
) -> Result<GroupOutput> {
    let bind = |j: usize| BoundExpert {
        params: &group.experts[j],
        settings,
    };
    match (mode, &group.router) {
        (IntraRouting::Single, _) => {
            let out = bind(0).forward(s, x)?;
            Ok(GroupOutput {
                output: out,
                selections: vec![(0, 1.0)],
                probs: None,
            })
        }
        (IntraRouting::Sparse, Some(router)) => {
            let route = sparse_route(s, x, router, k)?;
            let mut terms = Vec::with_capacity(k);
            for (&j, &gate) in route.indices.iter().zip(&route.gates) {
                let out = bind(j).forward(s, x)?;
                terms.push((out.tokens, gate));
            }
            let y = weighted_sum(s, &terms)?;
            let selections = route.indices.iter().copied().zip(route.gate_values(s)).collect();
            Ok(GroupOutput {
                output: x.with_tokens(y),
                selections,
                probs: Some(route.probs),
            })
        }
        (IntraRouting::DenseUniform, _) => {
            let n = group.experts.len();
            let w = 1.0 / n as f64;
            let mut acc: Option<Var> = None;
            for j in 0..n {
                let out = bind(j).forward(s, x)?;
                let scaled = s.graph.scale(out.tokens, w);
                acc = Some(match acc {
                    Some(a) => s.graph.add(a, scaled)?,
                    None => scaled,
                });
            }
            Ok(GroupOutput {
                output: x.with_tokens(acc.expect("group has experts")),
                selections: (0..n).map(|j| (j, w)).collect(),
                probs: None,
            })
        }
        (IntraRouting::Sparse, None) => Err(MimError::Config(
            "sparse intra routing on a group without a router".into(),
        )),
    }
}

/// The four expert groups and the dense router that fuses them.
#[derive(Clone, Debug)]
pub struct MimModule {
    pub groups: Vec<ExpertGroup>,
    pub router: Router,
}

impl MimModule {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cfg: &MiMConfig, rng: &mut R) -> Self {
        let groups = cfg
            .groups
            .iter()
            .enumerate()
            .map(|(i, &m)| ExpertGroup::new(store, &format!("{name}.group{i}"), m, cfg, rng))
            .collect();
        let router = Router::zeroed(store, &format!("{name}.router"), cfg.model_dim, cfg.groups.len());
        MimModule { groups, router }
    }
}

/// Gate decisions of one MiM forward for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutingTrace {
    pub block: usize,
    pub label: Option<String>,
    /// Softmax weight of each expert group.
    pub dense: Vec<f64>,
    /// Per group, the evaluated `(sub-expert, gate)` pairs; empty when the group was skipped.
    pub selections: Vec<Vec<(usize, f64)>>,
}

impl RoutingTrace {
    /// `label, g1, g2, g3, g4, group:subexpert ...`
    pub fn to_line(&self) -> String {
        let mut line = self.label.clone().unwrap_or_else(|| "unlabeled".into());
        for g in &self.dense {
            write!(line, ", {g:.10}").unwrap();
        }
        let pairs: Vec<String> = self
            .selections
            .iter()
            .enumerate()
            .flat_map(|(gi, sel)| sel.iter().map(move |(j, _)| format!("{gi}:{j}")))
            .collect();
        write!(line, ", {}", pairs.join(" ")).unwrap();
        line
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SparseProbs {
    pub block: usize,
    pub group: usize,
    pub probs: Var,
}

/// Collects routing traces (and, for the balance penalty, sparse router
/// probabilities) across the forwards of one session.
#[derive(Clone, Debug, Default)]
pub struct RoutingSink {
    pub label: Option<String>,
    pub traces: Vec<RoutingTrace>,
    pub sparse_probs: Vec<SparseProbs>,
}

/// Dense fusion of the four groups' intra-MoE outputs, with an optional
/// residual from `x`.
pub fn mim_forward(
    s: &mut Session,
    x: &TokenSequence,
    module: &MimModule,
    cfg: &MiMConfig,
    block: usize,
    sink: Option<&mut RoutingSink>,
) -> Result<TokenSequence> {
    if module.groups.len() != MiMConfig::GROUP_COUNT {
        return Err(MimError::Config(format!(
            "MiM needs 4 expert groups, got {}",
            module.groups.len()
        )));
    }
    let settings = AttentionSettings::for_block(cfg, block);
    let gates = dense_route(s, x, &module.router)?;
    let dense = s.graph.data(gates).to_vec();
    let active: Vec<usize> = match cfg.inter_routing {
        InterRouting::Dense => (0..module.groups.len()).collect(),
        InterRouting::SparseTop1 => topk(&dense, 1)?.0,
    };
    let mut selections = vec![Vec::new(); module.groups.len()];
    let mut probs = Vec::new();
    let mut terms = Vec::with_capacity(active.len());
    for &i in &active {
        let out = intra_moe_forward(s, x, &module.groups[i], cfg.top_k, cfg.intra_routing, settings)?;
        selections[i] = out.selections;
        if let Some(p) = out.probs {
            probs.push(SparseProbs {
                block,
                group: i,
                probs: p,
            });
        }
        terms.push((out.output.tokens, s.graph.index(gates, i)?));
    }
    let mut y = weighted_sum(s, &terms)?;
    if cfg.mim_residual {
        y = s.graph.add(x.tokens, y)?;
    }
    if let Some(sink) = sink {
        sink.traces.push(RoutingTrace {
            block,
            label: sink.label.clone(),
            dense,
            selections,
        });
        sink.sparse_probs.extend(probs);
    }
    Ok(x.with_tokens(y))
}

/// `coef * N * sum_j f_j^2` per (block, group), where `f` is the batch share
/// of sub-expert router probability. Minimal when importance is uniform.
pub fn balance_penalty(s: &mut Session, sink: &RoutingSink, coef: f64) -> Result<Option<Var>> {
    if coef == 0.0 || sink.sparse_probs.is_empty() {
        return Ok(None);
    }
    let mut keys: Vec<(usize, usize)> = sink.sparse_probs.iter().map(|p| (p.block, p.group)).collect();
    keys.sort_unstable();
    keys.dedup();
    let mut total: Option<Var> = None;
    for key in keys {
        let mut importance: Option<Var> = None;
        for p in sink.sparse_probs.iter().filter(|p| (p.block, p.group) == key) {
            importance = Some(match importance {
                Some(a) => s.graph.add(a, p.probs)?,
                None => p.probs,
            });
        }
        let importance = importance.expect("key came from this list");
        let n = s.graph.value(importance).numel() as f64;
        let share = s.graph.sum_normalize(importance)?;
        let sq = s.graph.mul(share, share)?;
        let term = s.graph.sum(sq);
        let term = s.graph.scale(term, coef * n);
        total = Some(match total {
            Some(t) => s.graph.add(t, term)?,
            None => term,
        });
    }
    Ok(total)
}
