//! Gradient-based counterfactual search under l-infinity perturbations.
//!
//! The loss is the worst-case logit difference `min_{i != y} f_y - f_i`; a
//! point whose prediction differs from `y` is a counterfactual. [`pgd`] runs
//! over the whole active set, while [`restricted_search`] moves only the
//! newly freed coordinates around a previous best point.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{argmax, Network};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttackBudget {
    pub steps: usize,
    pub starts: usize,
    /// Absolute step size; `None` means `epsilon / 4`.
    pub step_size: Option<f64>,
    pub seed: u64,
}

impl Default for AttackBudget {
    fn default() -> Self {
        Self {
            steps: 10,
            starts: 128,
            step_size: None,
            seed: 0,
        }
    }
}

impl AttackBudget {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.starts == 0 {
            return Err(Error::Config("attack steps and starts must be >= 1".into()));
        }
        if let Some(s) = self.step_size {
            if !(s > 0.0) {
                return Err(Error::Config(format!("attack step size must be > 0, got {s}")));
            }
        }
        Ok(())
    }

    fn step(&self, epsilon: f64) -> f64 {
        self.step_size.unwrap_or(epsilon / 4.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackResult {
    /// A point with a different prediction, if one was found.
    pub witness: Option<Vec<f64>>,
    /// Lowest-loss point seen (the witness itself when one exists).
    pub best: Vec<f64>,
    pub best_loss: f64,
}

/// Worst-case logit difference at `x` and its gradient. The competitor is
/// the lowest-index minimiser; the ReLU derivative at exactly 0 is 0.
pub fn margin_and_gradient(net: &Network, x: &[f64], y: usize) -> (f64, Vec<f64>) {
    let (pre, logits) = net.forward_trace(x);
    let mut rival = None;
    let mut loss = f64::INFINITY;
    for (i, &v) in logits.iter().enumerate() {
        if i != y && logits[y] - v < loss {
            loss = logits[y] - v;
            rival = Some(i);
        }
    }
    let Some(rival) = rival else {
        return (loss, vec![0.0; x.len()]);
    };
    let last = net.affine(net.num_affine() - 1);
    let mut grad: Vec<f64> = last
        .row(y)
        .iter()
        .zip(last.row(rival))
        .map(|(a, b)| a - b)
        .collect();
    for layer in (0..net.num_relu_layers()).rev() {
        for (g, &z) in grad.iter_mut().zip(&pre[layer]) {
            if z <= 0.0 {
                *g = 0.0;
            }
        }
        let aff = net.affine(layer);
        let mut back = vec![0.0; aff.cols()];
        for (i, &g) in grad.iter().enumerate() {
            if g != 0.0 {
                for (b, &w) in back.iter_mut().zip(aff.row(i)) {
                    *b += g * w;
                }
            }
        }
        grad = back;
    }
    (loss, grad)
}

fn is_counterfactual(net: &Network, p: &[f64], y: usize) -> bool {
    argmax(&net.forward_unchecked(p)) != y
}

/// Axis-aligned feasible set for one PGD run: coordinates in `free` move in
/// `[lower, upper]`, all others stay at their start value.
struct SearchBox<'a> {
    free: &'a [usize],
    lower: Vec<f64>,
    upper: Vec<f64>,
}

/// One signed-gradient descent run from `start`. Calls `observe` on every
/// iterate (start included). Stops at the first counterfactual.
fn descend(
    net: &Network,
    y: usize,
    start: Vec<f64>,
    space: &SearchBox<'_>,
    steps: usize,
    step: f64,
    observe: &mut dyn FnMut(&[f64]),
) -> AttackResult {
    let mut p = start;
    let mut best = p.clone();
    let mut best_loss = f64::INFINITY;
    for it in 0..=steps {
        observe(&p);
        let (loss, grad) = margin_and_gradient(net, &p, y);
        if loss < best_loss {
            best_loss = loss;
            best = p.clone();
        }
        if is_counterfactual(net, &p, y) {
            return AttackResult {
                witness: Some(p.clone()),
                best: p,
                best_loss: loss,
            };
        }
        if it == steps {
            break;
        }
        for (k, &i) in space.free.iter().enumerate() {
            let g = grad[i];
            let dir = if g > 0.0 {
                -1.0
            } else if g < 0.0 {
                1.0
            } else {
                0.0
            };
            p[i] = (p[i] + step * dir).clamp(space.lower[k], space.upper[k]);
        }
    }
    AttackResult {
        witness: None,
        best,
        best_loss,
    }
}

/// Merge rule: a witness beats no witness, then lower loss; earlier results
/// win ties.
fn better(candidate: &AttackResult, incumbent: &AttackResult) -> bool {
    match (&candidate.witness, &incumbent.witness) {
        (Some(_), None) => true,
        (None, Some(_)) => false,
        _ => candidate.best_loss < incumbent.best_loss,
    }
}

fn validate_point(net: &Network, x: &[f64], y: usize) -> Result<()> {
    if x.len() != net.input_dim() {
        return Err(Error::shape(None, "attack input has the wrong length"));
    }
    if y >= net.num_classes() {
        return Err(Error::shape(None, format!("class {y} out of range")));
    }
    Ok(())
}

/// Projected signed-gradient descent over `B^eps_active(x)` intersected with
/// the valid input box. The first start is `x` itself; further starts (when
/// `budget.starts > 1`) are drawn uniformly from the box.
pub fn pgd(
    net: &Network,
    x: &[f64],
    active: &[usize],
    epsilon: f64,
    y: usize,
    budget: &AttackBudget,
) -> Result<AttackResult> {
    pgd_observed(net, x, active, epsilon, y, budget, &mut |_| {})
}

pub(crate) fn pgd_observed(
    net: &Network,
    x: &[f64],
    active: &[usize],
    epsilon: f64,
    y: usize,
    budget: &AttackBudget,
    observe: &mut dyn FnMut(&[f64]),
) -> Result<AttackResult> {
    validate_point(net, x, y)?;
    budget.validate()?;
    let (loss, _) = margin_and_gradient(net, x, y);
    if active.is_empty() {
        let witness = is_counterfactual(net, x, y).then(|| x.to_vec());
        return Ok(AttackResult {
            witness,
            best: x.to_vec(),
            best_loss: loss,
        });
    }
    let (glo, ghi) = (net.input_lower(), net.input_upper());
    let space = SearchBox {
        free: active,
        lower: active.iter().map(|&i| (x[i] - epsilon).max(glo[i])).collect(),
        upper: active.iter().map(|&i| (x[i] + epsilon).min(ghi[i])).collect(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(budget.seed);
    let step = budget.step(epsilon);
    let mut result: Option<AttackResult> = None;
    for s in 0..budget.starts {
        let mut start = x.to_vec();
        if s > 0 {
            for (k, &i) in active.iter().enumerate() {
                start[i] = sample(&mut rng, space.lower[k], space.upper[k]);
            }
        }
        let r = descend(net, y, start, &space, budget.steps, step, observe);
        if result.as_ref().is_none_or(|inc| better(&r, inc)) {
            result = Some(r);
        }
    }
    Ok(result.expect("at least one start"))
}

fn sample(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.gen_range(lo..=hi)
    } else {
        lo
    }
}

/// Slice of `B^eps_{A u B}(x)` in which only the coordinates of `B` move,
/// every other coordinate being pinned to a previous search point `z`.
#[derive(Debug, Clone, PartialEq)]
pub struct RestrictedSpace {
    origin: Vec<f64>,
    base: Vec<f64>,
    previous: Vec<usize>,
    free: Vec<usize>,
    epsilon: f64,
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl RestrictedSpace {
    /// `origin` is the input being explained, `base` the previous best point
    /// (inside `B^eps_previous(origin)`), and `free` the newly added features.
    pub fn new(
        net: &Network,
        origin: &[f64],
        base: &[f64],
        previous: &[usize],
        free: &[usize],
        epsilon: f64,
    ) -> Result<Self> {
        let d = net.input_dim();
        if origin.len() != d || base.len() != d {
            return Err(Error::shape(None, "restricted space vectors have the wrong length"));
        }
        let mut previous = previous.to_vec();
        previous.sort_unstable();
        previous.dedup();
        let mut free = free.to_vec();
        free.sort_unstable();
        free.dedup();
        if let Some(&i) = previous.iter().chain(&free).find(|&&i| i >= d) {
            return Err(Error::shape(None, format!("feature index {i} out of range")));
        }
        if let Some(i) = free.iter().find(|i| previous.binary_search(i).is_ok()) {
            return Err(Error::Config(format!("feature {i} is both fixed and free")));
        }
        for i in 0..d {
            let ok = if previous.binary_search(&i).is_ok() {
                (base[i] - origin[i]).abs() <= epsilon + 1e-9
            } else {
                base[i] == origin[i] || free.binary_search(&i).is_ok()
            };
            if !ok {
                return Err(Error::Domain(format!(
                    "base point leaves the previous perturbation set at feature {i}"
                )));
            }
        }
        let (glo, ghi) = (net.input_lower(), net.input_upper());
        Ok(Self {
            origin: origin.to_vec(),
            base: base.to_vec(),
            lower: free.iter().map(|&i| (origin[i] - epsilon).max(glo[i])).collect(),
            upper: free.iter().map(|&i| (origin[i] + epsilon).min(ghi[i])).collect(),
            previous,
            free,
            epsilon,
        })
    }

    pub fn free(&self) -> &[usize] {
        &self.free
    }

    pub fn base(&self) -> &[f64] {
        &self.base
    }

    /// Whether `p` lies in `B^eps_{previous u free}(origin)` and the valid box.
    pub fn contains_in_union(&self, net: &Network, p: &[f64]) -> bool {
        (0..p.len()).all(|i| {
            let perturbable =
                self.previous.binary_search(&i).is_ok() || self.free.binary_search(&i).is_ok();
            let inside = p[i] >= net.input_lower()[i] && p[i] <= net.input_upper()[i];
            if perturbable {
                inside && (p[i] - self.origin[i]).abs() <= self.epsilon + 1e-9
            } else {
                p[i] == self.origin[i]
            }
        })
    }
}

/// Multi-start PGD over the free coordinates of `space`. Starts are the
/// all-lower and all-upper corners of the slice followed by uniform samples.
pub fn restricted_search(
    net: &Network,
    space: &RestrictedSpace,
    y: usize,
    budget: &AttackBudget,
) -> Result<AttackResult> {
    restricted_observed(net, space, y, budget, &mut |_| {})
}

pub(crate) fn restricted_observed(
    net: &Network,
    space: &RestrictedSpace,
    y: usize,
    budget: &AttackBudget,
    observe: &mut dyn FnMut(&[f64]),
) -> Result<AttackResult> {
    validate_point(net, &space.origin, y)?;
    budget.validate()?;
    if space.free.is_empty() {
        let (loss, _) = margin_and_gradient(net, &space.base, y);
        observe(&space.base);
        let witness = is_counterfactual(net, &space.base, y).then(|| space.base.clone());
        return Ok(AttackResult {
            witness,
            best: space.base.clone(),
            best_loss: loss,
        });
    }
    let search = SearchBox {
        free: &space.free,
        lower: space.lower.clone(),
        upper: space.upper.clone(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(budget.seed);
    let step = budget.step(space.epsilon);
    let mut starts = Vec::with_capacity(budget.starts);
    for extreme in [&space.lower, &space.upper] {
        let mut p = space.base.clone();
        for (k, &i) in space.free.iter().enumerate() {
            p[i] = extreme[k];
        }
        starts.push(p);
    }
    while starts.len() < budget.starts.max(2) {
        let mut p = space.base.clone();
        for (k, &i) in space.free.iter().enumerate() {
            p[i] = sample(&mut rng, space.lower[k], space.upper[k]);
        }
        starts.push(p);
    }
    // Extremes are evaluated before any descent.
    for p in &starts[..2] {
        observe(p);
        if is_counterfactual(net, p, y) {
            let (loss, _) = margin_and_gradient(net, p, y);
            return Ok(AttackResult {
                witness: Some(p.clone()),
                best: p.clone(),
                best_loss: loss,
            });
        }
    }
    let mut result: Option<AttackResult> = None;
    for start in starts {
        let r = descend(net, y, start, &search, budget.steps, step, observe);
        if result.as_ref().is_none_or(|inc| better(&r, inc)) {
            result = Some(r);
        }
    }
    Ok(result.expect("at least two starts"))
}
