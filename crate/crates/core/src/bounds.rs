//! Incomplete analyzers over a restricted perturbation box.
//!
//! Two methods are provided: interval bound propagation and a backward linear
//! relaxation with fixed adaptive lower slopes (CROWN-style). Both produce
//! sound pre-activation bounds for every ReLU layer and a lower bound on the
//! worst-case logit difference `min_{i != y} f(x')_y - f(x')_i`.
//!
//! Phase constraints are honoured by clipping the interval of the constrained
//! neuron to its sign. A clipped interval that becomes empty means the
//! constrained region is empty, reported as [`Error::Conflict`].

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{argmax, dot, Network};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BoundMethod {
    Ibp,
    LinearRelaxation,
}

/// `B^eps_A(x)` intersected with the network's valid input box.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationBox {
    center: Vec<f64>,
    active: Vec<usize>,
    epsilon: f64,
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl PerturbationBox {
    pub fn new(net: &Network, x: &[f64], active: &[usize], epsilon: f64) -> Result<Self> {
        let d = net.input_dim();
        if x.len() != d {
            return Err(Error::shape(
                None,
                format!("input has length {}, network expects {d}", x.len()),
            ));
        }
        if !(epsilon >= 0.0) || !epsilon.is_finite() {
            return Err(Error::Domain(format!("epsilon must be finite and >= 0, got {epsilon}")));
        }
        let mut active = active.to_vec();
        active.sort_unstable();
        active.dedup();
        if let Some(&i) = active.iter().find(|&&i| i >= d) {
            return Err(Error::shape(None, format!("feature index {i} out of range for d = {d}")));
        }
        let (glo, ghi) = (net.input_lower(), net.input_upper());
        if let Some(i) = (0..d).find(|&i| !(glo[i] <= x[i] && x[i] <= ghi[i])) {
            return Err(Error::Domain(format!(
                "x[{i}] = {} lies outside the valid input box [{}, {}]",
                x[i], glo[i], ghi[i]
            )));
        }
        let mut lower = x.to_vec();
        let mut upper = x.to_vec();
        for &i in &active {
            lower[i] = (x[i] - epsilon).max(glo[i]);
            upper[i] = (x[i] + epsilon).min(ghi[i]);
        }
        Ok(Self {
            center: x.to_vec(),
            active,
            epsilon,
            lower,
            upper,
        })
    }

    pub fn center(&self) -> &[f64] {
        &self.center
    }

    pub fn active(&self) -> &[usize] {
        &self.active
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    /// Membership with absolute slack `tol` on the perturbed coordinates.
    /// Frozen coordinates must match exactly.
    pub fn contains(&self, p: &[f64], tol: f64) -> bool {
        p.len() == self.center.len()
            && (0..p.len()).all(|i| {
                if self.lower[i] == self.upper[i] {
                    p[i] == self.lower[i]
                } else {
                    p[i] >= self.lower[i] - tol && p[i] <= self.upper[i] + tol
                }
            })
    }

    pub fn project(&self, p: &mut [f64]) {
        for i in 0..p.len() {
            p[i] = p[i].clamp(self.lower[i], self.upper[i]);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Phase {
    /// `z >= 0`: the ReLU acts as the identity.
    NonNegative,
    /// `z < 0`: the ReLU outputs zero.
    Negative,
}

impl Phase {
    pub fn flip(self) -> Phase {
        match self {
            Phase::NonNegative => Phase::Negative,
            Phase::Negative => Phase::NonNegative,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PhaseConstraint {
    pub layer: usize,
    pub neuron: usize,
    pub sign: Phase,
}

/// At most one sign per neuron, kept sorted for deterministic iteration.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ConstraintSet(BTreeMap<(usize, usize), Phase>);

impl ConstraintSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_constraints(cs: impl IntoIterator<Item = PhaseConstraint>) -> Result<Self> {
        let mut set = Self::new();
        for c in cs {
            match set.0.insert((c.layer, c.neuron), c.sign) {
                Some(prev) if prev != c.sign => {
                    return Err(Error::Conflict {
                        layer: c.layer,
                        neuron: c.neuron,
                    })
                }
                _ => {}
            }
        }
        Ok(set)
    }

    pub fn get(&self, layer: usize, neuron: usize) -> Option<Phase> {
        self.0.get(&(layer, neuron)).copied()
    }

    /// Copy extended with one more constraint. The neuron must be unconstrained.
    pub fn with(&self, c: PhaseConstraint) -> Self {
        let mut next = self.clone();
        let prev = next.0.insert((c.layer, c.neuron), c.sign);
        debug_assert!(prev.is_none(), "neuron constrained twice");
        next
    }

    pub fn iter(&self) -> impl Iterator<Item = PhaseConstraint> + '_ {
        self.0.iter().map(|(&(layer, neuron), &sign)| PhaseConstraint {
            layer,
            neuron,
            sign,
        })
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub(crate) fn check(&self, net: &Network) -> Result<()> {
        for c in self.iter() {
            if c.layer >= net.num_relu_layers() || c.neuron >= net.relu_width(c.layer) {
                return Err(Error::shape(
                    None,
                    format!("constraint references missing neuron ({}, {})", c.layer, c.neuron),
                ));
            }
        }
        Ok(())
    }
}

impl fmt::Display for ConstraintSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{")?;
        for (i, c) in self.iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            let op = match c.sign {
                Phase::NonNegative => ">=0",
                Phase::Negative => "<0",
            };
            write!(f, "z[{},{}]{op}", c.layer, c.neuron)?;
        }
        write!(f, "}}")
    }
}

impl Serialize for ConstraintSet {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_seq(self.iter())
    }
}

impl<'de> Deserialize<'de> for ConstraintSet {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let cs = Vec::<PhaseConstraint>::deserialize(d)?;
        ConstraintSet::from_constraints(cs).map_err(serde::de::Error::custom)
    }
}

/// Pre-activation bounds per ReLU layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerBounds {
    pub lower: Vec<Vec<f64>>,
    pub upper: Vec<Vec<f64>>,
}

impl LayerBounds {
    pub fn is_ambiguous(&self, layer: usize, neuron: usize) -> bool {
        self.lower[layer][neuron] < 0.0 && self.upper[layer][neuron] > 0.0
    }

    /// Neurons whose sign is not determined by the bounds.
    pub fn ambiguous(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.lower.iter().enumerate().flat_map(move |(l, lo)| {
            (0..lo.len())
                .filter(move |&n| self.is_ambiguous(l, n))
                .map(move |n| (l, n))
        })
    }

}

/// Clips one layer's interval to the constrained signs.
/// Relative slack below which crossed interval bounds count as rounding.
const CROSSING_TOLERANCE: f64 = 1e-9;

fn clip_layer(
    layer: usize,
    lower: &mut [f64],
    upper: &mut [f64],
    constraints: &ConstraintSet,
) -> Result<()> {
    for c in constraints.iter().filter(|c| c.layer == layer) {
        let n = c.neuron;
        match c.sign {
            Phase::NonNegative => {
                if upper[n] < 0.0 {
                    return Err(Error::Conflict { layer, neuron: n });
                }
                lower[n] = lower[n].max(0.0);
            }
            Phase::Negative => {
                if lower[n] > 0.0 {
                    return Err(Error::Conflict { layer, neuron: n });
                }
                upper[n] = upper[n].min(0.0);
            }
        }
    }
    // Intersected bounds may cross by rounding; larger crossings mean the
    // constrained region is empty.
    for n in 0..lower.len() {
        if lower[n] > upper[n] {
            if lower[n] - upper[n] > CROSSING_TOLERANCE * (1.0 + lower[n].abs() + upper[n].abs()) {
                return Err(Error::Conflict { layer, neuron: n });
            }
            std::mem::swap(&mut lower[n], &mut upper[n]);
        }
    }
    Ok(())
}

/// Interval image of `h -> W h + b` for `h` in `[lo, hi]`.
fn interval_affine(net: &Network, affine: usize, lo: &[f64], hi: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let a = net.affine(affine);
    let mut out_lo = Vec::with_capacity(a.rows());
    let mut out_hi = Vec::with_capacity(a.rows());
    for i in 0..a.rows() {
        let (mut l, mut u) = (a.bias()[i], a.bias()[i]);
        for (j, &w) in a.row(i).iter().enumerate() {
            if w >= 0.0 {
                l += w * lo[j];
                u += w * hi[j];
            } else {
                l += w * hi[j];
                u += w * lo[j];
            }
        }
        out_lo.push(l);
        out_hi.push(u);
    }
    (out_lo, out_hi)
}

fn relu_interval(lo: &[f64], hi: &[f64]) -> (Vec<f64>, Vec<f64>) {
    (
        lo.iter().map(|v| v.max(0.0)).collect(),
        hi.iter().map(|v| v.max(0.0)).collect(),
    )
}

/// Interval propagation with clipping at every layer.
fn ibp_layers(net: &Network, bx: &PerturbationBox, constraints: &ConstraintSet) -> Result<LayerBounds> {
    let mut lo = bx.lower().to_vec();
    let mut hi = bx.upper().to_vec();
    let mut out = LayerBounds {
        lower: Vec::new(),
        upper: Vec::new(),
    };
    for layer in 0..net.num_relu_layers() {
        let (mut zl, mut zu) = interval_affine(net, layer, &lo, &hi);
        clip_layer(layer, &mut zl, &mut zu, constraints)?;
        (lo, hi) = relu_interval(&zl, &zu);
        out.lower.push(zl);
        out.upper.push(zu);
    }
    Ok(out)
}

/// Same as [`ibp_layers`] but intersecting each layer with `prior` before
/// propagating further.
fn ibp_refine(
    net: &Network,
    bx: &PerturbationBox,
    prior: &LayerBounds,
    constraints: &ConstraintSet,
) -> Result<LayerBounds> {
    let mut lo = bx.lower().to_vec();
    let mut hi = bx.upper().to_vec();
    let mut out = LayerBounds {
        lower: Vec::new(),
        upper: Vec::new(),
    };
    for layer in 0..net.num_relu_layers() {
        let (mut zl, mut zu) = interval_affine(net, layer, &lo, &hi);
        for n in 0..zl.len() {
            zl[n] = zl[n].max(prior.lower[layer][n]);
            zu[n] = zu[n].min(prior.upper[layer][n]);
        }
        clip_layer(layer, &mut zl, &mut zu, constraints)?;
        (lo, hi) = relu_interval(&zl, &zu);
        out.lower.push(zl);
        out.upper.push(zu);
    }
    Ok(out)
}

/// Linear lower bound `coeffs . x + constant` of some objective, valid over
/// the box, together with its minimum and the box corner attaining it.
#[derive(Debug, Clone)]
struct LinearLowerBound {
    value: f64,
    corner: Vec<f64>,
}

/// Lower-bounds `rows . h + biases` where `h` is the output of ReLU layer
/// `top - 1` (or the network input when `top == 0`), by backward
/// substitution through the relaxations of ReLU layers `< top`.
fn backward_bound(
    net: &Network,
    bx: &PerturbationBox,
    bounds: &LayerBounds,
    top: usize,
    rows: Vec<Vec<f64>>,
    biases: Vec<f64>,
) -> Vec<LinearLowerBound> {
    let mut coeffs = rows;
    let mut consts = biases;
    for layer in (0..top).rev() {
        let (lo, hi) = (&bounds.lower[layer], &bounds.upper[layer]);
        // Through the ReLU: coefficients on h become coefficients on z.
        for (row, c) in coeffs.iter_mut().zip(consts.iter_mut()) {
            for n in 0..row.len() {
                let a = row[n];
                let (l, u) = (lo[n], hi[n]);
                if l >= 0.0 {
                    continue;
                }
                if u <= 0.0 {
                    row[n] = 0.0;
                    continue;
                }
                if a >= 0.0 {
                    row[n] = if u >= -l { a } else { 0.0 };
                } else {
                    let s = u / (u - l);
                    row[n] = a * s;
                    *c -= a * s * l;
                }
            }
        }
        // Through the affine map feeding this ReLU layer.
        let aff = net.affine(layer);
        let mut next = Vec::with_capacity(coeffs.len());
        for (row, c) in coeffs.iter().zip(consts.iter_mut()) {
            *c += dot(row, aff.bias());
            let mut back = vec![0.0; aff.cols()];
            for (i, &a) in row.iter().enumerate() {
                if a != 0.0 {
                    for (b, &w) in back.iter_mut().zip(aff.row(i)) {
                        *b += a * w;
                    }
                }
            }
            next.push(back);
        }
        coeffs = next;
    }
    coeffs
        .into_iter()
        .zip(consts)
        .map(|(row, c)| {
            let mut value = c;
            let mut corner = Vec::with_capacity(row.len());
            for (i, &a) in row.iter().enumerate() {
                let v = if a >= 0.0 { bx.lower()[i] } else { bx.upper()[i] };
                value += a * v;
                corner.push(v);
            }
            LinearLowerBound { value, corner }
        })
        .collect()
}

/// Pre-activation bounds from backward passes started at every layer, each
/// intersected with interval propagation and clipped.
fn relaxation_layers(
    net: &Network,
    bx: &PerturbationBox,
    constraints: &ConstraintSet,
) -> Result<LayerBounds> {
    let mut out = LayerBounds {
        lower: Vec::new(),
        upper: Vec::new(),
    };
    let (mut lo, mut hi) = (bx.lower().to_vec(), bx.upper().to_vec());
    for layer in 0..net.num_relu_layers() {
        let (mut zl, mut zu) = interval_affine(net, layer, &lo, &hi);
        if layer > 0 {
            let aff = net.affine(layer);
            let rows: Vec<Vec<f64>> = (0..aff.rows()).map(|i| aff.row(i).to_vec()).collect();
            let neg: Vec<Vec<f64>> = rows
                .iter()
                .map(|r| r.iter().map(|v| -v).collect())
                .collect();
            let lower = backward_bound(net, bx, &out, layer, rows, aff.bias().to_vec());
            let upper = backward_bound(
                net,
                bx,
                &out,
                layer,
                neg,
                aff.bias().iter().map(|v| -v).collect(),
            );
            for n in 0..zl.len() {
                zl[n] = zl[n].max(lower[n].value);
                zu[n] = zu[n].min(-upper[n].value);
            }
        }
        clip_layer(layer, &mut zl, &mut zu, constraints)?;
        (lo, hi) = relu_interval(&zl, &zu);
        out.lower.push(zl);
        out.upper.push(zu);
    }
    Ok(out)
}

/// Sound bounds on every ReLU pre-activation over the constrained box.
pub fn preactivation_bounds(
    net: &Network,
    bx: &PerturbationBox,
    constraints: &ConstraintSet,
    method: BoundMethod,
) -> Result<LayerBounds> {
    check_box(net, bx)?;
    constraints.check(net)?;
    match method {
        BoundMethod::Ibp => ibp_layers(net, bx, constraints),
        BoundMethod::LinearRelaxation => relaxation_layers(net, bx, constraints),
    }
}

fn check_box(net: &Network, bx: &PerturbationBox) -> Result<()> {
    if bx.dim() != net.input_dim() {
        return Err(Error::shape(None, "perturbation box does not match the network input"));
    }
    Ok(())
}

/// Rows `W_y - W_i` and biases `b_y - b_i` of the final affine map for
/// every competitor `i != y`.
fn difference_rows(net: &Network, y: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
    let last = net.affine(net.num_affine() - 1);
    let mut rows = Vec::new();
    let mut biases = Vec::new();
    for i in (0..last.rows()).filter(|&i| i != y) {
        rows.push(
            last.row(y)
                .iter()
                .zip(last.row(i))
                .map(|(a, b)| a - b)
                .collect(),
        );
        biases.push(last.bias()[y] - last.bias()[i]);
    }
    (rows, biases)
}

/// Interval lower bound of `rows . h + biases` for `h` the output of the last
/// ReLU layer (or the input for networks without hidden layers).
fn interval_objective(
    net: &Network,
    bx: &PerturbationBox,
    bounds: &LayerBounds,
    rows: &[Vec<f64>],
    biases: &[f64],
) -> Vec<f64> {
    let top = net.num_relu_layers();
    let (lo, hi) = if top == 0 {
        (bx.lower().to_vec(), bx.upper().to_vec())
    } else {
        relu_interval(&bounds.lower[top - 1], &bounds.upper[top - 1])
    };
    rows.iter()
        .zip(biases)
        .map(|(row, &b)| {
            b + row
                .iter()
                .enumerate()
                .map(|(j, &w)| if w >= 0.0 { w * lo[j] } else { w * hi[j] })
                .sum::<f64>()
        })
        .collect()
}

/// Lower bounds of the objective rows, combining the interval bound with the
/// backward relaxation when requested. Also returns a candidate input point
/// for the lowest row when a relaxation was run.
fn objective_bounds(
    net: &Network,
    bx: &PerturbationBox,
    bounds: &LayerBounds,
    rows: Vec<Vec<f64>>,
    biases: Vec<f64>,
    method: BoundMethod,
    want_candidate: bool,
) -> (Vec<f64>, Option<Vec<f64>>) {
    let mut values = interval_objective(net, bx, bounds, &rows, &biases);
    if method == BoundMethod::Ibp && !want_candidate {
        return (values, None);
    }
    // Under IBP the relaxation only supplies the candidate point.
    let linear = backward_bound(net, bx, bounds, net.num_relu_layers(), rows, biases);
    let mut worst: Option<usize> = None;
    for (i, lb) in linear.iter().enumerate() {
        if method == BoundMethod::LinearRelaxation {
            values[i] = values[i].max(lb.value);
        }
        if worst.is_none_or(|w| lb.value < linear[w].value) {
            worst = Some(i);
        }
    }
    (values, worst.map(|w| linear[w].corner.clone()))
}

fn min_of(values: &[f64]) -> f64 {
    values.iter().copied().fold(f64::INFINITY, f64::min)
}

/// Lower bound on `min_{x' in box, consistent with constraints} min_{i != y}
/// (f(x')_y - f(x')_i)` where `y` is the prediction at the box center.
///
/// The linear-relaxation bound is never below the interval bound.
pub fn worst_logit_diff_lb(
    net: &Network,
    bx: &PerturbationBox,
    constraints: &ConstraintSet,
    method: BoundMethod,
) -> Result<f64> {
    let y = argmax(&net.forward_unchecked(bx.center()));
    let bound = |method| -> Result<f64> {
        let bounds = preactivation_bounds(net, bx, constraints, method)?;
        let (rows, biases) = difference_rows(net, y);
        Ok(min_of(&objective_bounds(net, bx, &bounds, rows, biases, method, false).0))
    };
    match method {
        BoundMethod::Ibp => bound(BoundMethod::Ibp),
        BoundMethod::LinearRelaxation => Ok(bound(BoundMethod::LinearRelaxation)?.max(bound(BoundMethod::Ibp)?)),
    }
}

/// Lower bound on logit `class` over the box (no constraints).
pub fn logit_lb(net: &Network, bx: &PerturbationBox, class: usize, method: BoundMethod) -> Result<f64> {
    let bounds = preactivation_bounds(net, bx, &ConstraintSet::new(), method)?;
    let last = net.affine(net.num_affine() - 1);
    if class >= last.rows() {
        return Err(Error::shape(None, format!("class {class} out of range")));
    }
    let rows = vec![last.row(class).to_vec()];
    let biases = vec![last.bias()[class]];
    Ok(objective_bounds(net, bx, &bounds, rows, biases, method, false).0[0])
}

/// Worst-case logit difference bound with only feature `i` perturbed, for
/// every feature.
pub fn feature_scores(net: &Network, x: &[f64], epsilon: f64, method: BoundMethod) -> Result<Vec<f64>> {
    (0..net.input_dim())
        .map(|i| {
            let bx = PerturbationBox::new(net, x, &[i], epsilon)?;
            worst_logit_diff_lb(net, &bx, &ConstraintSet::new(), method)
        })
        .collect()
}

/// Outcome of bounding one subproblem.
#[derive(Debug, Clone)]
pub struct SubproblemBound {
    pub lower_bound: f64,
    /// Intermediate bounds after refinement and clipping; drives branching.
    pub bounds: LayerBounds,
    /// Box corner minimising the linear relaxation of the worst difference.
    pub candidate: Option<Vec<f64>>,
}

/// Analyzer bound to one query: pre-activation bounds are computed once for
/// the unconstrained box and then refined per subproblem by interval
/// propagation and clipping.
#[derive(Debug, Clone)]
pub struct Analyzer<'a> {
    net: &'a Network,
    bx: &'a PerturbationBox,
    method: BoundMethod,
    root: LayerBounds,
    rows: Vec<Vec<f64>>,
    biases: Vec<f64>,
}

impl<'a> Analyzer<'a> {
    pub fn new(net: &'a Network, bx: &'a PerturbationBox, y: usize, method: BoundMethod) -> Result<Self> {
        let root = preactivation_bounds(net, bx, &ConstraintSet::new(), method)?;
        let (rows, biases) = difference_rows(net, y);
        Ok(Self {
            net,
            bx,
            method,
            root,
            rows,
            biases,
        })
    }

    pub fn root_bounds(&self) -> &LayerBounds {
        &self.root
    }

    pub fn bound(&self, constraints: &ConstraintSet) -> Result<SubproblemBound> {
        let bounds = if constraints.is_empty() {
            self.root.clone()
        } else {
            ibp_refine(self.net, self.bx, &self.root, constraints)?
        };
        let (values, candidate) = objective_bounds(
            self.net,
            self.bx,
            &bounds,
            self.rows.clone(),
            self.biases.clone(),
            self.method,
            true,
        );
        Ok(SubproblemBound {
            lower_bound: min_of(&values),
            bounds,
            candidate,
        })
    }
}
