//! Explanation drivers: batched FaVeX search with sequential fallback, plus
//! the purely sequential and purely binary-search baselines, and the feature
//! traversal strategies that order their input.

use std::collections::{BTreeMap, VecDeque};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::bab::{self, LeafCache, RobustnessQuery, Status, Verdict, VerifyOptions, WarmStart};
use crate::bounds::{feature_scores, logit_lb, BoundMethod, PerturbationBox};
use crate::error::{Error, Result};
use crate::model::Network;

/// Smallest timeout handed to a batch query.
pub const MIN_BATCH_TIMEOUT: Duration = Duration::from_millis(100);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Counterfactuals and unknowns are merged; unknown features are never
    /// perturbed again.
    Standard,
    /// Unknown features stay perturbed in later queries so that every
    /// counterfactual is certified against them.
    VOptimal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TraversalStrategy {
    IndexOrder,
    FavexAlpha,
    FavexIbp,
    VerixPlus,
    VerixSensitivity,
}

impl TraversalStrategy {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "index" | "index-order" => Ok(Self::IndexOrder),
            "favex-alpha" => Ok(Self::FavexAlpha),
            "favex-ibp" => Ok(Self::FavexIbp),
            "verix-plus" => Ok(Self::VerixPlus),
            "verix-sensitivity" | "verix" => Ok(Self::VerixSensitivity),
            other => Err(Error::Config(format!("unknown traversal `{other}`"))),
        }
    }
}

/// Per-feature scores under `strategy`; higher scores are traversed first.
pub fn traversal_scores(net: &Network, x: &[f64], epsilon: f64, strategy: TraversalStrategy) -> Result<Vec<f64>> {
    let d = net.input_dim();
    let y = net.predict(x)?;
    match strategy {
        TraversalStrategy::IndexOrder => Ok(vec![0.0; d]),
        TraversalStrategy::FavexAlpha => feature_scores(net, x, epsilon, BoundMethod::LinearRelaxation),
        TraversalStrategy::FavexIbp => feature_scores(net, x, epsilon, BoundMethod::Ibp),
        TraversalStrategy::VerixPlus => (0..d)
            .map(|i| {
                let bx = PerturbationBox::new(net, x, &[i], epsilon)?;
                logit_lb(net, &bx, y, BoundMethod::LinearRelaxation)
            })
            .collect(),
        TraversalStrategy::VerixSensitivity => {
            let base = net.forward(x)?.values()[y];
            Ok((0..d)
                .map(|i| {
                    let shifted = |delta: f64| {
                        let mut p = x.to_vec();
                        p[i] += delta;
                        let p = net.clamp(&p);
                        (net.forward_unchecked(&p)[y] - base).abs()
                    };
                    -shifted(epsilon).max(shifted(-epsilon))
                })
                .collect())
        }
    }
}

/// Feature indices sorted by descending score, lower index first on ties.
pub fn order_by_scores(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

pub fn traversal_order(net: &Network, x: &[f64], epsilon: f64, strategy: TraversalStrategy) -> Result<Vec<usize>> {
    Ok(order_by_scores(&traversal_scores(net, x, epsilon, strategy)?))
}

/// A robustness verifier over a fixed input and radius, queried by active set.
pub trait VerifierOracle {
    fn input(&self) -> &[f64];
    fn epsilon(&self) -> f64;
    fn predicted_class(&self) -> usize;
    fn query(
        &mut self,
        active: &[usize],
        timeout: Duration,
        inherited: Option<&LeafCache>,
        warm: Option<&WarmStart>,
    ) -> Result<Verdict>;
}

/// Oracle backed by the branch-and-bound verifier.
#[derive(Debug, Clone)]
pub struct BabOracle<'a> {
    net: &'a Network,
    x: Vec<f64>,
    epsilon: f64,
    y: usize,
    options: VerifyOptions,
}

impl<'a> BabOracle<'a> {
    pub fn new(net: &'a Network, x: &[f64], epsilon: f64, options: VerifyOptions) -> Result<Self> {
        // Validates x, epsilon and the attack budget once up front.
        RobustnessQuery::new(net, x, &[], epsilon)?;
        options.budget.validate()?;
        Ok(Self {
            net,
            x: x.to_vec(),
            epsilon,
            y: net.predict(x)?,
            options,
        })
    }
}

impl VerifierOracle for BabOracle<'_> {
    fn input(&self) -> &[f64] {
        &self.x
    }

    fn epsilon(&self) -> f64 {
        self.epsilon
    }

    fn predicted_class(&self) -> usize {
        self.y
    }

    fn query(
        &mut self,
        active: &[usize],
        timeout: Duration,
        inherited: Option<&LeafCache>,
        warm: Option<&WarmStart>,
    ) -> Result<Verdict> {
        let q = RobustnessQuery::new(self.net, &self.x, active, self.epsilon)?;
        let opts = VerifyOptions {
            timeout,
            ..self.options.clone()
        };
        bab::verify(self.net, &q, &opts, inherited, warm)
    }
}

/// Replays a fixed sequence of statuses in call order. Counterexample
/// verdicts carry the input itself as a placeholder witness.
#[derive(Debug, Clone)]
pub struct ScriptedOracle {
    x: Vec<f64>,
    script: VecDeque<Status>,
    /// Active sets received, in call order.
    pub calls: Vec<Vec<usize>>,
}

impl ScriptedOracle {
    pub fn new(dim: usize, script: impl IntoIterator<Item = Status>) -> Self {
        Self {
            x: vec![0.0; dim],
            script: script.into_iter().collect(),
            calls: Vec::new(),
        }
    }

    pub fn remaining(&self) -> usize {
        self.script.len()
    }
}

impl VerifierOracle for ScriptedOracle {
    fn input(&self) -> &[f64] {
        &self.x
    }

    fn epsilon(&self) -> f64 {
        1.0
    }

    fn predicted_class(&self) -> usize {
        0
    }

    fn query(
        &mut self,
        active: &[usize],
        _timeout: Duration,
        _inherited: Option<&LeafCache>,
        _warm: Option<&WarmStart>,
    ) -> Result<Verdict> {
        self.calls.push(active.to_vec());
        let status = self
            .script
            .pop_front()
            .ok_or_else(|| Error::Config(format!("script exhausted at call {}", self.calls.len())))?;
        let mut v = Verdict::bare(status);
        if status == Status::Counterexample {
            v.witness = Some(self.x.clone());
        }
        Ok(v)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExplainStats {
    pub queries: usize,
    pub batch_queries: usize,
    pub single_queries: usize,
    pub timeouts: usize,
    pub leaf_reuse_accepts: usize,
    #[serde(skip)]
    pub total_time: Duration,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub mode: Mode,
    pub epsilon: f64,
    pub input: Vec<f64>,
    pub predicted_class: usize,
    pub order: Vec<usize>,
    pub invariants: Vec<usize>,
    pub unknowns: Vec<usize>,
    pub counterfactuals: Vec<usize>,
    pub witnesses: BTreeMap<usize, Vec<f64>>,
    pub stats: ExplainStats,
}

impl Explanation {
    /// Features that must stay fixed: counterfactuals and unknowns.
    pub fn explanation(&self) -> Vec<usize> {
        let mut e: Vec<usize> = self.counterfactuals.iter().chain(&self.unknowns).copied().collect();
        e.sort_unstable();
        e
    }

    /// Checks that the three sets partition the features and that every
    /// counterfactual has a witness.
    pub fn check_partition(&self) -> Result<()> {
        let d = self.input.len();
        let mut seen = vec![false; d];
        for &i in self.invariants.iter().chain(&self.unknowns).chain(&self.counterfactuals) {
            if i >= d || std::mem::replace(&mut seen[i], true) {
                return Err(Error::Config(format!("feature {i} is out of range or in two sets")));
            }
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::Config(format!("feature {i} is unassigned")));
        }
        if let Some(i) = self.counterfactuals.iter().find(|i| !self.witnesses.contains_key(i)) {
            return Err(Error::Config(format!("counterfactual {i} has no witness")));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("explanation serialises")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExplainConfig {
    pub mode: Mode,
    pub order: Vec<usize>,
    /// Timeout of a single-feature query; batches get a tenth of it.
    pub timeout: Duration,
    /// Leaf caches larger than this are not handed to the next query.
    pub leaf_limit: Option<usize>,
}

impl ExplainConfig {
    fn validate(&self, d: usize) -> Result<()> {
        if self.timeout.is_zero() {
            return Err(Error::Config("timeout must be positive".into()));
        }
        let mut seen = vec![false; d];
        for &i in &self.order {
            if i >= d || std::mem::replace(&mut seen[i], true) {
                return Err(Error::Config(format!("order is not a permutation of 0..{d}")));
            }
        }
        if self.order.len() != d {
            return Err(Error::Config(format!("order is not a permutation of 0..{d}")));
        }
        Ok(())
    }

    fn batch_timeout(&self) -> Duration {
        (self.timeout / 10).max(MIN_BATCH_TIMEOUT)
    }
}

struct Driver<'o> {
    oracle: &'o mut dyn VerifierOracle,
    config: ExplainConfig,
    invariants: Vec<usize>,
    unknowns: Vec<usize>,
    counterfactuals: Vec<usize>,
    witnesses: BTreeMap<usize, Vec<f64>>,
    stats: ExplainStats,
    last_cache: Option<LeafCache>,
    last_timed_out: bool,
    /// Cache of the most recent query that did not time out.
    settled_cache: Option<LeafCache>,
    warm: Option<WarmStart>,
}

impl<'o> Driver<'o> {
    fn new(oracle: &'o mut dyn VerifierOracle, config: &ExplainConfig) -> Result<Self> {
        config.validate(oracle.input().len())?;
        Ok(Self {
            oracle,
            config: config.clone(),
            invariants: Vec::new(),
            unknowns: Vec::new(),
            counterfactuals: Vec::new(),
            witnesses: BTreeMap::new(),
            stats: ExplainStats::default(),
            last_cache: None,
            last_timed_out: false,
            settled_cache: None,
            warm: None,
        })
    }

    fn active_with(&self, batch: &[usize]) -> Vec<usize> {
        let mut active: Vec<usize> = self.invariants.iter().chain(batch).copied().collect();
        if self.config.mode == Mode::VOptimal {
            active.extend(&self.unknowns);
        }
        active.sort_unstable();
        active
    }

    /// In sequential mode a timeout discards the cache; batch mode falls back
    /// to the last cache obtained without a timeout.
    fn inherited(&self, sequential: bool) -> Option<&LeafCache> {
        let cache = if sequential {
            if self.last_timed_out {
                None
            } else {
                self.last_cache.as_ref()
            }
        } else {
            self.settled_cache.as_ref()
        };
        cache.filter(|c| !c.leaves.is_empty() && self.config.leaf_limit.is_none_or(|k| c.leaves.len() <= k))
    }

    fn ask(&mut self, batch: &[usize], sequential: bool) -> Result<Verdict> {
        let active = self.active_with(batch);
        let timeout = if batch.len() > 1 {
            self.stats.batch_queries += 1;
            self.config.batch_timeout()
        } else {
            self.stats.single_queries += 1;
            self.config.timeout
        };
        self.stats.queries += 1;
        let inherited = self.inherited(sequential).cloned();
        let verdict = self.oracle.query(&active, timeout, inherited.as_ref(), self.warm.as_ref())?;
        if verdict.stats.inherited {
            self.stats.leaf_reuse_accepts += 1;
        }
        self.last_timed_out = verdict.status == Status::Unknown;
        if self.last_timed_out {
            self.stats.timeouts += 1;
        } else {
            self.settled_cache = Some(verdict.leaves.clone());
        }
        self.last_cache = Some(verdict.leaves.clone());
        if !verdict.near_miss.is_empty() {
            self.warm = Some(WarmStart {
                point: verdict.near_miss.clone(),
                active,
            });
        }
        Ok(verdict)
    }

    /// Queries one feature and files it; returns the verifier's status.
    fn single(&mut self, i: usize, sequential: bool) -> Result<Status> {
        let v = self.ask(&[i], sequential)?;
        match v.status {
            Status::Verified => self.invariants.push(i),
            Status::Counterexample => {
                let w = v
                    .witness
                    .ok_or_else(|| Error::Config("counterexample verdict without witness".into()))?;
                self.witnesses.insert(i, w);
                self.counterfactuals.push(i);
            }
            Status::Unknown => self.unknowns.push(i),
        }
        Ok(v.status)
    }

    /// Binary-search batching; with `fallback` a failed single-feature query
    /// switches the rest of the run to one feature per query.
    fn batched(&mut self, fallback_enabled: bool) -> Result<()> {
        let mut queue: VecDeque<Vec<usize>> = VecDeque::new();
        if !self.config.order.is_empty() {
            queue.push_back(self.config.order.clone());
        }
        let mut fallback = false;
        while let Some(batch) = queue.pop_front() {
            if fallback {
                for &i in &batch {
                    self.single(i, true)?;
                }
            } else if batch.len() == 1 {
                if self.single(batch[0], false)? != Status::Verified && fallback_enabled {
                    fallback = true;
                }
            } else if self.ask(&batch, false)?.status == Status::Verified {
                self.invariants.extend(&batch);
            } else {
                let (first, second) = batch.split_at(batch.len().div_ceil(2));
                queue.push_front(second.to_vec());
                queue.push_front(first.to_vec());
            }
        }
        Ok(())
    }

    fn finish(mut self, started: Instant) -> Explanation {
        self.stats.total_time = started.elapsed();
        for set in [&mut self.invariants, &mut self.unknowns, &mut self.counterfactuals] {
            set.sort_unstable();
        }
        Explanation {
            mode: self.config.mode,
            epsilon: self.oracle.epsilon(),
            input: self.oracle.input().to_vec(),
            predicted_class: self.oracle.predicted_class(),
            order: self.config.order,
            invariants: self.invariants,
            unknowns: self.unknowns,
            counterfactuals: self.counterfactuals,
            witnesses: self.witnesses,
            stats: self.stats,
        }
    }
}

/// Batched explanation search that halves failing batches and falls back to
/// one feature per query after the first failed single-feature query.
pub fn favex(oracle: &mut dyn VerifierOracle, config: &ExplainConfig) -> Result<Explanation> {
    let started = Instant::now();
    let mut driver = Driver::new(oracle, config)?;
    driver.batched(true)?;
    Ok(driver.finish(started))
}

/// One single-feature query per feature, in order.
pub fn sequential_explain(oracle: &mut dyn VerifierOracle, config: &ExplainConfig) -> Result<Explanation> {
    let started = Instant::now();
    let mut driver = Driver::new(oracle, config)?;
    for i in config.order.clone() {
        driver.single(i, true)?;
    }
    Ok(driver.finish(started))
}

/// Batched search without the sequential fallback.
pub fn binary_search_explain(oracle: &mut dyn VerifierOracle, config: &ExplainConfig) -> Result<Explanation> {
    let started = Instant::now();
    let mut driver = Driver::new(oracle, config)?;
    driver.batched(false)?;
    Ok(driver.finish(started))
}
