mod common;

use common::*;
use favex::bounds::{
    preactivation_bounds, worst_logit_diff_lb, BoundMethod, ConstraintSet, Phase, PerturbationBox, PhaseConstraint,
};
use favex::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-9;
const METHODS: [BoundMethod; 2] = [BoundMethod::Ibp, BoundMethod::LinearRelaxation];

struct Instance {
    net: favex::model::Network,
    x: Vec<f64>,
    active: Vec<usize>,
    eps: f64,
    rng: ChaCha8Rng,
}

fn instance(seed: u64, max_layers: usize) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = rng.gen_range(2..=6);
    let mut widths = vec![d];
    for _ in 0..rng.gen_range(1..=max_layers) {
        widths.push(rng.gen_range(2..=16));
    }
    widths.push(rng.gen_range(2..=4));
    let net = random_net(&mut rng, &widths);
    let x = random_point(&mut rng, d);
    let active = random_subset(&mut rng, d, d);
    let eps = rng.gen_range(0.01..0.6);
    Instance { net, x, active, eps, rng }
}

/// Bound value, with an empty region reported as +inf.
fn lb(inst: &Instance, cs: &ConstraintSet, method: BoundMethod) -> f64 {
    let bx = PerturbationBox::new(&inst.net, &inst.x, &inst.active, inst.eps).unwrap();
    match worst_logit_diff_lb(&inst.net, &bx, cs, method) {
        Ok(v) => v,
        Err(Error::Conflict { .. }) => f64::INFINITY,
        Err(e) => panic!("{e}"),
    }
}

fn sample(inst: &mut Instance, bx: &PerturbationBox) -> Vec<f64> {
    let mut p = inst.x.clone();
    for &i in &inst.active {
        p[i] = inst.rng.gen_range(bx.lower()[i]..=bx.upper()[i]);
    }
    p
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn sound_under_phase_constraints(seed in any::<u64>()) {
        let mut inst = instance(seed, 2);
        let bx = PerturbationBox::new(&inst.net, &inst.x, &inst.active, inst.eps).unwrap();
        let anchor = sample(&mut inst, &bx);
        let cs = constraints_at(&mut inst.rng, &inst.net, &anchor, 0.3);
        let y = inst.net.predict(&inst.x).unwrap();
        for method in METHODS {
            let bound = lb(&inst, &cs, method);
            prop_assert!(bound.is_finite(), "region containing the anchor reported empty");
            prop_assert!(margin(&inst.net, &anchor, y) >= bound - TOL);
            let (lo, hi) = preactivation_bounds(&inst.net, &bx, &cs, method)
                .map(|b| (b.lower, b.upper))
                .unwrap();
            for _ in 0..500 {
                let p = sample(&mut inst, &bx);
                if satisfies(&inst.net, &p, &cs) {
                    prop_assert!(margin(&inst.net, &p, y) >= bound - TOL);
                    for (l, z) in preactivations(&inst.net, &p).iter().enumerate() {
                        for (n, v) in z.iter().enumerate() {
                            prop_assert!(*v >= lo[l][n] - TOL && *v <= hi[l][n] + TOL);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn relaxation_dominates_intervals(seed in any::<u64>()) {
        let mut inst = instance(seed, 2);
        let bx = PerturbationBox::new(&inst.net, &inst.x, &inst.active, inst.eps).unwrap();
        let anchor = sample(&mut inst, &bx);
        let cs = constraints_at(&mut inst.rng, &inst.net, &anchor, 0.2);
        prop_assert!(lb(&inst, &cs, BoundMethod::LinearRelaxation) >= lb(&inst, &cs, BoundMethod::Ibp));
    }

    #[test]
    fn interval_bound_monotone_in_active_set(seed in any::<u64>()) {
        let mut inst = instance(seed, 2);
        let small = lb(&inst, &ConstraintSet::new(), BoundMethod::Ibp);
        let d = inst.x.len();
        let extra = inst.rng.gen_range(0..d);
        if !inst.active.contains(&extra) {
            inst.active.push(extra);
            inst.active.sort_unstable();
        }
        let large = lb(&inst, &ConstraintSet::new(), BoundMethod::Ibp);
        prop_assert!(large <= small);
    }

    #[test]
    fn interval_bound_monotone_under_tightening(seed in any::<u64>()) {
        let mut inst = instance(seed, 2);
        let bx = PerturbationBox::new(&inst.net, &inst.x, &inst.active, inst.eps).unwrap();
        let anchor = sample(&mut inst, &bx);
        let cs = constraints_at(&mut inst.rng, &inst.net, &anchor, 0.2);
        let layer = inst.rng.gen_range(0..inst.net.num_relu_layers());
        let neuron = inst.rng.gen_range(0..inst.net.relu_width(layer));
        let sign = if inst.rng.gen_bool(0.5) { Phase::NonNegative } else { Phase::Negative };
        prop_assume!(cs.get(layer, neuron).is_none());
        let tighter = cs.with(PhaseConstraint { layer, neuron, sign });
        prop_assert!(lb(&inst, &tighter, BoundMethod::Ibp) >= lb(&inst, &cs, BoundMethod::Ibp));
    }

    #[test]
    fn exact_on_linear_networks(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = rng.gen_range(1..=5);
        let classes = rng.gen_range(2..=4);
        let net = random_net(&mut rng, &[d, classes]);
        let x = random_point(&mut rng, d);
        let active = random_subset(&mut rng, d, d);
        let eps = rng.gen_range(0.01..0.6);
        let bx = PerturbationBox::new(&net, &x, &active, eps).unwrap();
        let y = net.predict(&x).unwrap();
        let mut exact = f64::INFINITY;
        for mask in 0..1usize << active.len() {
            let mut p = x.clone();
            for (k, &i) in active.iter().enumerate() {
                p[i] = if mask >> k & 1 == 1 { bx.upper()[i] } else { bx.lower()[i] };
            }
            exact = exact.min(margin(&net, &p, y));
        }
        for method in METHODS {
            let bound = worst_logit_diff_lb(&net, &bx, &ConstraintSet::new(), method).unwrap();
            prop_assert!((bound - exact).abs() < 1e-12, "{:?}: {} vs {}", method, bound, exact);
        }
    }
}

/// The relaxation's adaptive slopes may change when intervals shrink, so
/// tightening is not guaranteed to help it; this measures how often the
/// bound still improves and checks it never becomes unsound.
#[test]
fn relaxation_under_tightening_stays_sound() {
    let mut worse = 0;
    for seed in 0..300u64 {
        let mut inst = instance(seed, 2);
        let bx = PerturbationBox::new(&inst.net, &inst.x, &inst.active, inst.eps).unwrap();
        let anchor = sample(&mut inst, &bx);
        let cs = constraints_at(&mut inst.rng, &inst.net, &anchor, 0.5);
        let before = lb(&inst, &ConstraintSet::new(), BoundMethod::LinearRelaxation);
        let after = lb(&inst, &cs, BoundMethod::LinearRelaxation);
        worse += (after < before) as usize;
        let y = inst.net.predict(&inst.x).unwrap();
        assert!(margin(&inst.net, &anchor, y) >= after - TOL);
    }
    eprintln!("relaxation bound decreased under tightening in {worse}/300 instances");
}
