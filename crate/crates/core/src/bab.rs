//! Branch-and-bound robustness verification with ReLU splitting, a wall-clock
//! timeout and leaf save/reuse.
//!
//! Subproblems are processed best-first (lowest bound first, insertion order
//! on ties). Each verified subproblem contributes its constraint set to the
//! returned [`LeafCache`]; on an early return the unresolved constraint sets
//! are appended, so the cache always partitions the phase space of the root.
//! A subproblem with no ambiguous neuron left is affine on its region and is
//! settled exactly by linear programming.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::attack::{self, AttackBudget, AttackResult, RestrictedSpace};
use crate::bounds::{Analyzer, BoundMethod, ConstraintSet, LayerBounds, Phase, PerturbationBox, PhaseConstraint};
use crate::error::{Error, Result};
use crate::lp::{BoxedLp, LpOutcome};
use crate::model::{argmax, logit_margin, Network};

/// Slack allowed on perturbed coordinates when validating witnesses.
pub const WITNESS_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct RobustnessQuery {
    x: Vec<f64>,
    active: Vec<usize>,
    epsilon: f64,
    predicted: usize,
    bx: PerturbationBox,
}

impl RobustnessQuery {
    pub fn new(net: &Network, x: &[f64], active: &[usize], epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0) {
            return Err(Error::Domain(format!("epsilon must be > 0, got {epsilon}")));
        }
        let bx = PerturbationBox::new(net, x, active, epsilon)?;
        Ok(Self {
            x: x.to_vec(),
            active: bx.active().to_vec(),
            epsilon,
            predicted: net.predict(x)?,
            bx,
        })
    }

    pub fn x(&self) -> &[f64] {
        &self.x
    }

    pub fn active(&self) -> &[usize] {
        &self.active
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn predicted(&self) -> usize {
        self.predicted
    }

    pub fn perturbation_box(&self) -> &PerturbationBox {
        &self.bx
    }

    /// Whether `w` is a counterfactual for this query: inside the
    /// perturbation set and classified differently.
    pub fn is_witness(&self, net: &Network, w: &[f64]) -> bool {
        self.bx.contains(w, WITNESS_TOLERANCE)
            && (0..w.len()).all(|i| w[i] >= net.input_lower()[i] && w[i] <= net.input_upper()[i])
            && argmax(&net.forward_unchecked(w)) != self.predicted
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Verified,
    Counterexample,
    Unknown,
}

impl Status {
    /// The verifier's three-valued answer: 1, -1 or 0.
    pub fn value(self) -> i8 {
        match self {
            Status::Verified => 1,
            Status::Counterexample => -1,
            Status::Unknown => 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LeafOrigin {
    FullVerification,
    Timeout,
    Counterexample,
    /// Search finished but some affine leaf could not be settled numerically.
    Inconclusive,
    Empty,
}

/// Constraint sets at the leaves of a branch-and-bound tree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeafCache {
    pub leaves: Vec<ConstraintSet>,
    pub origin: LeafOrigin,
    /// Caches holding more leaves than this are not inherited; `None` means
    /// unbounded.
    pub limit: Option<usize>,
}

impl LeafCache {
    pub fn empty() -> Self {
        Self {
            leaves: Vec::new(),
            origin: LeafOrigin::Empty,
            limit: None,
        }
    }

    pub fn within_limit(&self) -> bool {
        self.limit.is_none_or(|k| self.leaves.len() <= k)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct VerifyStats {
    /// Subproblems taken off the queue and bounded.
    pub nodes_expanded: usize,
    pub bound_calls: usize,
    pub attack_calls: usize,
    pub lp_calls: usize,
    pub inherited: bool,
    #[serde(skip)]
    pub wall_time: Duration,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Verdict {
    pub status: Status,
    pub witness: Option<Vec<f64>>,
    /// Lowest-margin point observed by the attacks and candidate checks.
    pub near_miss: Vec<f64>,
    pub leaves: LeafCache,
    pub stats: VerifyStats,
}

impl Verdict {
    /// A verdict carrying only a status, for oracles that do not run a search.
    pub fn bare(status: Status) -> Self {
        Self {
            status,
            witness: None,
            near_miss: Vec::new(),
            leaves: LeafCache::empty(),
            stats: VerifyStats::default(),
        }
    }
}

/// A previous search point together with the feature set it was drawn from.
#[derive(Debug, Clone, PartialEq)]
pub struct WarmStart {
    pub point: Vec<f64>,
    pub active: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyOptions {
    pub timeout: Duration,
    pub method: BoundMethod,
    pub leaf_limit: Option<usize>,
    pub budget: AttackBudget,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            timeout: Duration::from_secs(60),
            method: BoundMethod::LinearRelaxation,
            leaf_limit: Some(500),
            budget: AttackBudget::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Subproblem {
    pub constraints: ConstraintSet,
    /// Last known lower bound (that of the parent for fresh children).
    pub priority: f64,
}

/// Splits on the ambiguous unconstrained neuron with the largest triangle
/// relaxation area `-l u / (u - l)`; ties go to the lowest (layer, neuron).
pub fn split(sub: &Subproblem, bounds: &LayerBounds) -> Result<(Subproblem, Subproblem)> {
    let mut best: Option<((usize, usize), f64)> = None;
    for (layer, neuron) in bounds.ambiguous() {
        if sub.constraints.get(layer, neuron).is_some() {
            continue;
        }
        let (l, u) = (bounds.lower[layer][neuron], bounds.upper[layer][neuron]);
        let score = -l * u / (u - l);
        if best.is_none_or(|(_, s)| score > s) {
            best = Some(((layer, neuron), score));
        }
    }
    let ((layer, neuron), _) = best.ok_or(Error::NoAmbiguousNeuron)?;
    let child = |sign| Subproblem {
        constraints: sub.constraints.with(PhaseConstraint { layer, neuron, sign }),
        priority: sub.priority,
    };
    Ok((child(Phase::NonNegative), child(Phase::Negative)))
}

/// Preliminary PGD over the whole active set, followed by the restricted
/// multi-start search around `warm` when the first attack fails.
pub fn cex_search(
    net: &Network,
    q: &RobustnessQuery,
    warm: Option<&WarmStart>,
    budget: &AttackBudget,
) -> Result<AttackResult> {
    let preliminary = AttackBudget { starts: 1, ..*budget };
    let mut result = attack::pgd(net, q.x(), q.active(), q.epsilon(), q.predicted(), &preliminary)?;
    if result.witness.is_some() {
        return Ok(result);
    }
    if let Some(space) = warm.and_then(|w| restricted_space(net, q, w)) {
        let restricted = attack::restricted_search(net, &space, q.predicted(), budget)?;
        if restricted.witness.is_some() || restricted.best_loss < result.best_loss {
            result = restricted;
        }
    }
    if let Some(w) = &result.witness {
        if !q.is_witness(net, w) {
            result.witness = None;
        }
    }
    Ok(result)
}

/// Restricts the warm point to the query: coordinates outside the active set
/// return to `x`, and only active features absent from the warm set are free.
fn restricted_space(net: &Network, q: &RobustnessQuery, warm: &WarmStart) -> Option<RestrictedSpace> {
    if warm.point.len() != q.x().len() {
        return None;
    }
    let mut base = q.x().to_vec();
    let mut previous = Vec::new();
    for &i in &warm.active {
        if q.active().binary_search(&i).is_ok() {
            base[i] = warm.point[i];
            previous.push(i);
        }
    }
    let free: Vec<usize> = q
        .active()
        .iter()
        .copied()
        .filter(|i| !previous.contains(i))
        .collect();
    RestrictedSpace::new(net, q.x(), &base, &previous, &free, q.epsilon()).ok()
}

struct QueueEntry {
    priority: f64,
    seq: usize,
    constraints: ConstraintSet,
    candidate: Option<Vec<f64>>,
}

impl PartialEq for QueueEntry {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for QueueEntry {}

impl PartialOrd for QueueEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for QueueEntry {
    // BinaryHeap is a max-heap: reverse so the lowest bound, then the oldest
    // entry, pops first.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .priority
            .total_cmp(&self.priority)
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

enum LeafResolution {
    Verified,
    Counterexample(Vec<f64>),
    Unsettled,
}

struct Search<'a> {
    net: &'a Network,
    q: &'a RobustnessQuery,
    stats: VerifyStats,
    near_miss: Vec<f64>,
    near_loss: f64,
    seq: usize,
}

impl Search<'_> {
    fn observe(&mut self, p: &[f64], loss: f64) {
        if loss < self.near_loss {
            self.near_loss = loss;
            self.near_miss = p.to_vec();
        }
    }

    /// Evaluates a concrete point; returns it when it is a counterfactual.
    fn try_point(&mut self, p: &[f64]) -> Option<Vec<f64>> {
        let logits = self.net.forward_unchecked(p);
        self.observe(p, logit_margin(&logits, self.q.predicted()));
        self.q.is_witness(self.net, p).then(|| p.to_vec())
    }

    fn entry(&mut self, priority: f64, constraints: ConstraintSet, candidate: Option<Vec<f64>>) -> QueueEntry {
        self.seq += 1;
        QueueEntry {
            priority,
            seq: self.seq,
            constraints,
            candidate,
        }
    }

    /// Exact treatment of a subproblem whose every ReLU phase is fixed by
    /// `bounds`: minimise each logit difference over the phase region.
    fn resolve_affine(&mut self, bounds: &LayerBounds) -> LeafResolution {
        self.stats.lp_calls += 1;
        let net = self.net;
        let bx = self.q.perturbation_box();
        let d = net.input_dim();
        let free: Vec<usize> = bx.active().to_vec();
        // Affine forms over the free coordinates: value = coef . t + constant,
        // with x_free = lower + t.
        let base: Vec<f64> = bx.lower().to_vec();
        let mut coef: Vec<Vec<f64>> = (0..d)
            .map(|i| {
                let mut r = vec![0.0; free.len()];
                if let Some(k) = free.iter().position(|&j| j == i) {
                    r[k] = 1.0;
                }
                r
            })
            .collect();
        let mut constant = base.clone();
        let mut rows = Vec::new();
        let mut rhs = Vec::new();
        for layer in 0..net.num_affine() {
            let aff = net.affine(layer);
            let mut zc = Vec::with_capacity(aff.rows());
            let mut zk = Vec::with_capacity(aff.rows());
            for i in 0..aff.rows() {
                let mut r = vec![0.0; free.len()];
                let mut c = aff.bias()[i];
                for (j, &w) in aff.row(i).iter().enumerate() {
                    if w != 0.0 {
                        c += w * constant[j];
                        for (rv, cv) in r.iter_mut().zip(&coef[j]) {
                            *rv += w * cv;
                        }
                    }
                }
                zc.push(r);
                zk.push(c);
            }
            if layer + 1 == net.num_affine() {
                coef = zc;
                constant = zk;
                break;
            }
            for n in 0..aff.rows() {
                let inactive = bounds.upper[layer][n] <= 0.0;
                if inactive {
                    // z <= 0
                    rows.push(zc[n].clone());
                    rhs.push(-zk[n]);
                    zc[n].iter_mut().for_each(|v| *v = 0.0);
                    zk[n] = 0.0;
                } else {
                    // -z <= 0
                    rows.push(zc[n].iter().map(|v| -v).collect());
                    rhs.push(zk[n]);
                }
            }
            coef = zc;
            constant = zk;
        }
        let y = self.q.predicted();
        let upper: Vec<f64> = free.iter().map(|&i| bx.upper()[i] - bx.lower()[i]).collect();
        let mut worst: Option<(f64, Vec<f64>)> = None;
        for i in (0..coef.len()).filter(|&i| i != y) {
            let objective: Vec<f64> = coef[y].iter().zip(&coef[i]).map(|(a, b)| a - b).collect();
            let offset = constant[y] - constant[i];
            let lp = BoxedLp {
                objective,
                rows: rows.clone(),
                rhs: rhs.clone(),
                upper: upper.clone(),
            };
            match lp.solve() {
                LpOutcome::Infeasible => return LeafResolution::Verified,
                LpOutcome::Optimal { value, point } => {
                    let v = value + offset;
                    if worst.as_ref().is_none_or(|(w, _)| v < *w) {
                        worst = Some((v, point));
                    }
                }
            }
        }
        let Some((value, t)) = worst else {
            return LeafResolution::Verified;
        };
        if value > 0.0 {
            return LeafResolution::Verified;
        }
        let mut p = base;
        for (k, &i) in free.iter().enumerate() {
            p[i] = (bx.lower()[i] + t[k]).clamp(bx.lower()[i], bx.upper()[i]);
        }
        match self.try_point(&p) {
            Some(w) => LeafResolution::Counterexample(w),
            None => LeafResolution::Unsettled,
        }
    }
}

/// Decides local robustness of `net` on `q`.
///
/// `inherited` seeds the queue with cached leaves when the cache is within
/// its limit; `warm` enables the restricted-space attack at the root.
pub fn verify(
    net: &Network,
    q: &RobustnessQuery,
    opts: &VerifyOptions,
    inherited: Option<&LeafCache>,
    warm: Option<&WarmStart>,
) -> Result<Verdict> {
    let started = Instant::now();
    if q.x().len() != net.input_dim() || q.predicted() != net.predict(q.x())? {
        return Err(Error::shape(None, "query was built for a different network"));
    }
    let bx = q.perturbation_box();
    let analyzer = Analyzer::new(net, bx, q.predicted(), opts.method)?;
    let mut search = Search {
        net,
        q,
        stats: VerifyStats::default(),
        near_miss: q.x().to_vec(),
        near_loss: logit_margin(&net.forward_unchecked(q.x()), q.predicted()),
        seq: 0,
    };

    let seeds: Vec<ConstraintSet> = match inherited {
        Some(cache)
            if !cache.leaves.is_empty()
                && cache.within_limit()
                && cache.leaves.iter().all(|c| c.check(net).is_ok()) =>
        {
            search.stats.inherited = true;
            cache.leaves.clone()
        }
        _ => vec![ConstraintSet::new()],
    };
    let mut queue = BinaryHeap::new();
    for c in seeds {
        let e = search.entry(f64::NEG_INFINITY, c, None);
        queue.push(e);
    }

    search.stats.attack_calls += 1;
    let attack = cex_search(net, q, warm, &opts.budget)?;
    search.observe(&attack.best, attack.best_loss);

    let mut leaves: Vec<ConstraintSet> = Vec::new();
    let mut unsettled: Vec<ConstraintSet> = Vec::new();
    let finish = |search: Search<'_>, status, witness, leaves, origin| {
        let mut stats = search.stats;
        stats.wall_time = started.elapsed();
        Verdict {
            status,
            witness,
            near_miss: search.near_miss,
            leaves: LeafCache {
                leaves,
                origin,
                limit: opts.leaf_limit,
            },
            stats,
        }
    };

    if let Some(w) = attack.witness {
        let saved = queue.into_sorted_vec().into_iter().rev().map(|e| e.constraints).collect();
        return Ok(finish(search, Status::Counterexample, Some(w), saved, LeafOrigin::Counterexample));
    }

    while let Some(entry) = queue.pop() {
        if let Some(p) = &entry.candidate {
            if let Some(w) = search.try_point(p) {
                leaves.extend(unsettled);
                leaves.push(entry.constraints);
                leaves.extend(drain_ordered(queue));
                return Ok(finish(search, Status::Counterexample, Some(w), leaves, LeafOrigin::Counterexample));
            }
        }
        search.stats.nodes_expanded += 1;
        search.stats.bound_calls += 1;
        let bound = match analyzer.bound(&entry.constraints) {
            Ok(b) => b,
            Err(Error::Conflict { .. }) => {
                leaves.push(entry.constraints);
                continue;
            }
            Err(e) => return Err(e),
        };
        let lb = bound.lower_bound.max(entry.priority);
        if lb > 0.0 {
            leaves.push(entry.constraints);
            continue;
        }
        if started.elapsed() >= opts.timeout {
            leaves.extend(unsettled);
            leaves.push(entry.constraints);
            leaves.extend(drain_ordered(queue));
            return Ok(finish(search, Status::Unknown, None, leaves, LeafOrigin::Timeout));
        }
        let sub = Subproblem {
            constraints: entry.constraints,
            priority: lb,
        };
        match split(&sub, &bound.bounds) {
            Ok((a, b)) => {
                for child in [a, b] {
                    let e = search.entry(lb, child.constraints, bound.candidate.clone());
                    queue.push(e);
                }
            }
            Err(Error::NoAmbiguousNeuron) => match search.resolve_affine(&bound.bounds) {
                LeafResolution::Verified => leaves.push(sub.constraints),
                LeafResolution::Counterexample(w) => {
                    leaves.extend(unsettled);
                    leaves.push(sub.constraints);
                    leaves.extend(drain_ordered(queue));
                    return Ok(finish(search, Status::Counterexample, Some(w), leaves, LeafOrigin::Counterexample));
                }
                LeafResolution::Unsettled => unsettled.push(sub.constraints),
            },
            Err(e) => return Err(e),
        }
    }

    if unsettled.is_empty() {
        Ok(finish(search, Status::Verified, None, leaves, LeafOrigin::FullVerification))
    } else {
        leaves.extend(unsettled);
        Ok(finish(search, Status::Unknown, None, leaves, LeafOrigin::Inconclusive))
    }
}

fn drain_ordered(queue: BinaryHeap<QueueEntry>) -> impl Iterator<Item = ConstraintSet> {
    queue.into_sorted_vec().into_iter().rev().map(|e| e.constraints)
}
