//! Shared helpers for integration tests: random networks, an exhaustive
//! phase-enumeration oracle and a set-deterministic verifier stub.
#![allow(dead_code)]

use std::path::PathBuf;
use std::time::Duration;

use favex::bab::{LeafCache, Status, Verdict, WarmStart};
use favex::bounds::{ConstraintSet, Phase};
use favex::explain::VerifierOracle;
use favex::model::{Affine, Network};
use favex::Result;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const FOREVER: Duration = Duration::from_secs(1_000_000);

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(name)
}

pub fn fc10x2() -> Network {
    favex::model::load_model(fixture("fc-10x2/model.json")).unwrap()
}

pub fn fc10x2_inputs() -> Vec<Vec<f64>> {
    serde_json::from_str(&std::fs::read_to_string(fixture("fc-10x2/inputs.json")).unwrap()).unwrap()
}

/// Dense net with the given widths (input first, classes last), weights
/// uniform in [-1, 1], biases in [-0.5, 0.5], input box [0, 1]^d.
pub fn random_net(rng: &mut ChaCha8Rng, widths: &[usize]) -> Network {
    let affines = widths
        .windows(2)
        .map(|w| {
            let (cols, rows) = (w[0], w[1]);
            let weights = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let bias = (0..rows).map(|_| rng.gen_range(-0.5..0.5)).collect();
            Affine::new(rows, cols, weights, bias).unwrap()
        })
        .collect();
    Network::from_affines("random", affines).unwrap()
}

pub fn random_point(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.gen_range(0.0..1.0)).collect()
}

/// Random sorted subset of 0..d with at most `max` elements.
pub fn random_subset(rng: &mut ChaCha8Rng, d: usize, max: usize) -> Vec<usize> {
    let mut all: Vec<usize> = (0..d).collect();
    for i in (1..d).rev() {
        all.swap(i, rng.gen_range(0..=i));
    }
    let k = rng.gen_range(0..=max.min(d));
    let mut s = all[..k].to_vec();
    s.sort_unstable();
    s
}

/// Worst-case logit difference recomputed on a point, independent of the
/// crate: `min_{i != y} f_y - f_i`.
pub fn margin(net: &Network, p: &[f64], y: usize) -> f64 {
    let f = net.forward(p).unwrap();
    let f = f.values();
    (0..f.len()).filter(|&i| i != y).map(|i| f[y] - f[i]).fold(f64::INFINITY, f64::min)
}

/// Checks the counterfactual contract of `w` for (x, active, eps).
pub fn valid_witness(net: &Network, x: &[f64], active: &[usize], eps: f64, w: &[f64]) -> bool {
    if w.len() != x.len() || net.predict(w).unwrap() == net.predict(x).unwrap() {
        return false;
    }
    (0..x.len()).all(|i| {
        let inside = w[i] >= net.input_lower()[i] && w[i] <= net.input_upper()[i];
        let moved = if active.contains(&i) {
            (w[i] - x[i]).abs() <= eps + 1e-9
        } else {
            w[i] == x[i]
        };
        inside && moved
    })
}

// ---------------------------------------------------------------------------
// Exhaustive oracle

/// Affine function `coef . t + c` of the active coordinates `t`.
#[derive(Clone, Debug)]
struct Form {
    coef: Vec<f64>,
    c: f64,
}

/// Half-space `a . t <= b`.
type Cut = (Vec<f64>, f64);

fn solve(mut m: Vec<Vec<f64>>, mut r: Vec<f64>) -> Option<Vec<f64>> {
    let n = r.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&a, &b| m[a][col].abs().total_cmp(&m[b][col].abs()))?;
        if m[piv][col].abs() < 1e-12 {
            return None;
        }
        m.swap(col, piv);
        r.swap(col, piv);
        for row in 0..n {
            if row != col {
                let f = m[row][col] / m[col][col];
                for k in col..n {
                    m[row][k] -= f * m[col][k];
                }
                r[row] -= f * r[col];
            }
        }
    }
    Some((0..n).map(|i| r[i] / m[i][i]).collect())
}

fn combos(n: usize, k: usize, start: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
    if cur.len() == k {
        out.push(cur.clone());
        return;
    }
    for i in start..n {
        cur.push(i);
        combos(n, k, i + 1, cur, out);
        cur.pop();
    }
}

/// Vertices of the bounded polytope `{t : cuts}` in dimension `k`.
fn vertices(cuts: &[Cut], k: usize) -> Vec<Vec<f64>> {
    let feasible = |t: &[f64]| {
        cuts.iter().all(|(a, b)| {
            let lhs: f64 = a.iter().zip(t).map(|(x, y)| x * y).sum();
            lhs <= b + 1e-9
        })
    };
    if k == 0 {
        return if feasible(&[]) { vec![vec![]] } else { vec![] };
    }
    let mut sets = Vec::new();
    combos(cuts.len(), k, 0, &mut Vec::new(), &mut sets);
    sets.into_iter()
        .filter_map(|s| {
            let m = s.iter().map(|&i| cuts[i].0.clone()).collect();
            let r = s.iter().map(|&i| cuts[i].1).collect();
            solve(m, r)
        })
        .filter(|t| feasible(t))
        .collect()
}

fn eval(f: &Form, t: &[f64]) -> f64 {
    f.c + f.coef.iter().zip(t).map(|(a, b)| a * b).sum::<f64>()
}

fn affine_forms(aff: &Affine, inputs: &[Form], k: usize) -> Vec<Form> {
    (0..aff.rows())
        .map(|i| {
            let mut f = Form {
                coef: vec![0.0; k],
                c: aff.bias()[i],
            };
            for (j, inp) in inputs.iter().enumerate() {
                let w = aff.weight(i, j);
                f.c += w * inp.c;
                for (a, b) in f.coef.iter_mut().zip(&inp.coef) {
                    *a += w * b;
                }
            }
            f
        })
        .collect()
}

struct Enumerator<'a> {
    net: &'a Network,
    k: usize,
    y: usize,
    best: f64,
    argbest: Vec<f64>,
    regions: usize,
}

impl Enumerator<'_> {
    fn dfs(&mut self, layer: usize, pre: &[Form], post: &mut Vec<Form>, cuts: &mut Vec<Cut>) {
        if post.len() == pre.len() {
            let next = affine_forms(self.net.affine(layer + 1), post, self.k);
            if layer + 2 == self.net.num_affine() {
                self.leaf(&next, cuts);
            } else {
                self.dfs(layer + 1, &next, &mut Vec::new(), cuts);
            }
            return;
        }
        let z = pre[post.len()].clone();
        for active in [true, false] {
            let cut = if active {
                (z.coef.iter().map(|v| -v).collect(), z.c)
            } else {
                (z.coef.clone(), -z.c)
            };
            cuts.push(cut);
            if !vertices(cuts, self.k).is_empty() {
                post.push(if active {
                    z.clone()
                } else {
                    Form {
                        coef: vec![0.0; self.k],
                        c: 0.0,
                    }
                });
                self.dfs(layer, pre, post, cuts);
                post.pop();
            }
            cuts.pop();
        }
    }

    fn leaf(&mut self, logits: &[Form], cuts: &[Cut]) {
        self.regions += 1;
        for t in vertices(cuts, self.k) {
            let fy = eval(&logits[self.y], &t);
            for (i, f) in logits.iter().enumerate() {
                if i != self.y {
                    let v = fy - eval(f, &t);
                    if v < self.best {
                        self.best = v;
                        self.argbest = t.clone();
                    }
                }
            }
        }
    }
}

/// Exact minimum of the worst-case logit difference over the perturbation
/// set, by enumerating feasible ReLU phase regions and their vertices.
/// Returns (minimum, minimising point, number of feasible regions).
pub fn exhaustive_min(net: &Network, x: &[f64], active: &[usize], eps: f64) -> (f64, Vec<f64>, usize) {
    let k = active.len();
    let y = net.predict(x).unwrap();
    let mut cuts = Vec::new();
    let inputs: Vec<Form> = (0..x.len())
        .map(|i| match active.iter().position(|&a| a == i) {
            Some(j) => {
                let lo = (x[i] - eps).max(net.input_lower()[i]);
                let hi = (x[i] + eps).min(net.input_upper()[i]);
                let mut e = vec![0.0; k];
                e[j] = 1.0;
                cuts.push((e.clone(), hi));
                cuts.push((e.iter().map(|v| -v).collect(), -lo));
                Form { coef: e, c: 0.0 }
            }
            None => Form {
                coef: vec![0.0; k],
                c: x[i],
            },
        })
        .collect();
    let mut en = Enumerator {
        net,
        k,
        y,
        best: f64::INFINITY,
        argbest: Vec::new(),
        regions: 0,
    };
    let pre = affine_forms(net.affine(0), &inputs, k);
    if net.num_affine() == 1 {
        en.leaf(&pre, &cuts);
    } else {
        en.dfs(0, &pre, &mut Vec::new(), &mut cuts);
    }
    let mut point = x.to_vec();
    for (j, &i) in active.iter().enumerate() {
        point[i] = en.argbest.get(j).copied().unwrap_or(x[i]);
    }
    (en.best, point, en.regions)
}

// ---------------------------------------------------------------------------
// Leaf covers

/// Every total sign assignment of the net's ReLUs agrees with exactly one
/// leaf. Returns the first offending assignment index on failure.
pub fn disjoint_cover(net: &Network, leaves: &[ConstraintSet]) -> std::result::Result<(), usize> {
    let neurons: Vec<(usize, usize)> = (0..net.num_relu_layers())
        .flat_map(|l| (0..net.relu_width(l)).map(move |n| (l, n)))
        .collect();
    assert!(neurons.len() <= 16, "cover check is exponential");
    for mask in 0..1usize << neurons.len() {
        let phase = |idx: usize| {
            if mask >> idx & 1 == 1 {
                Phase::NonNegative
            } else {
                Phase::Negative
            }
        };
        let hits = leaves
            .iter()
            .filter(|leaf| {
                leaf.iter().all(|c| {
                    let idx = neurons.iter().position(|&p| p == (c.layer, c.neuron)).unwrap();
                    phase(idx) == c.sign
                })
            })
            .count();
        if hits != 1 {
            return Err(mask);
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Set-deterministic oracle

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Label {
    Invariant,
    Counterfactual,
    Unknown,
}

/// Verifier whose answer depends only on the active set: robust iff every
/// active feature is invariant, counterexample iff some active feature is
/// counterfactual, unknown otherwise.
pub struct SetOracle {
    pub labels: Vec<Label>,
    x: Vec<f64>,
    pub calls: usize,
}

impl SetOracle {
    pub fn new(labels: Vec<Label>) -> Self {
        let x = vec![0.0; labels.len()];
        Self { labels, x, calls: 0 }
    }

    pub fn status(&self, active: &[usize]) -> Status {
        if active.iter().any(|&i| self.labels[i] == Label::Counterfactual) {
            Status::Counterexample
        } else if active.iter().all(|&i| self.labels[i] == Label::Invariant) {
            Status::Verified
        } else {
            Status::Unknown
        }
    }
}

impl VerifierOracle for SetOracle {
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
        self.calls += 1;
        let status = self.status(active);
        let mut v = Verdict::bare(status);
        if status == Status::Counterexample {
            v.witness = Some(self.x.clone());
        }
        Ok(v)
    }
}

pub fn random_labels(rng: &mut ChaCha8Rng, d: usize, allow_unknown: bool) -> Vec<Label> {
    (0..d)
        .map(|_| match rng.gen_range(0..if allow_unknown { 3 } else { 2 }) {
            0 => Label::Invariant,
            1 => Label::Counterfactual,
            _ => Label::Unknown,
        })
        .collect()
}

pub fn random_permutation(rng: &mut ChaCha8Rng, d: usize) -> Vec<usize> {
    let mut p: Vec<usize> = (0..d).collect();
    for i in (1..d).rev() {
        p.swap(i, rng.gen_range(0..=i));
    }
    p
}

/// Largest radius (up to `cap`) at which the query is still robust, by
/// bisection on the exhaustive oracle.
pub fn critical_radius(net: &Network, x: &[f64], active: &[usize], cap: f64) -> f64 {
    if exhaustive_min(net, x, active, cap).0 > 0.0 {
        return cap;
    }
    let (mut lo, mut hi) = (0.0, cap);
    for _ in 0..30 {
        let mid = 0.5 * (lo + hi);
        if exhaustive_min(net, x, active, mid).0 > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

/// A radius within 20% of the critical one, where relaxations are loosest.
pub fn hard_radius(rng: &mut ChaCha8Rng, net: &Network, x: &[f64], active: &[usize]) -> f64 {
    let r = critical_radius(net, x, active, 1.0);
    (r * rng.gen_range(0.8..1.2)).clamp(1e-3, 1.0)
}

/// Pre-activations of every ReLU layer at `p`, recomputed from the weights.
pub fn preactivations(net: &Network, p: &[f64]) -> Vec<Vec<f64>> {
    let mut h = p.to_vec();
    let mut out = Vec::new();
    for l in 0..net.num_relu_layers() {
        let z = net.affine(l).apply(&h);
        h = z.iter().map(|v| v.max(0.0)).collect();
        out.push(z);
    }
    out
}

/// Whether the ReLU phases at `p` agree with every constraint.
pub fn satisfies(net: &Network, p: &[f64], constraints: &ConstraintSet) -> bool {
    let z = preactivations(net, p);
    constraints.iter().all(|c| match c.sign {
        Phase::NonNegative => z[c.layer][c.neuron] >= 0.0,
        Phase::Negative => z[c.layer][c.neuron] < 0.0,
    })
}

/// Constraints fixing the phase of `p` on a random subset of neurons.
pub fn constraints_at(rng: &mut ChaCha8Rng, net: &Network, p: &[f64], fraction: f64) -> ConstraintSet {
    let z = preactivations(net, p);
    let mut cs = Vec::new();
    for (layer, zs) in z.iter().enumerate() {
        for (neuron, &v) in zs.iter().enumerate() {
            if rng.gen_bool(fraction) {
                let sign = if v >= 0.0 { Phase::NonNegative } else { Phase::Negative };
                cs.push(favex::bounds::PhaseConstraint { layer, neuron, sign });
            }
        }
    }
    ConstraintSet::from_constraints(cs).unwrap()
}
