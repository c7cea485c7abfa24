use proptest::prelude::*;
use smoothfbo::funcgrad::Objective;
use smoothfbo::losses::{Batch, Sample, SquaredOuterLoss, WeightedSquaredInnerLoss};
use smoothfbo::models::{FeatureMap, LinearPredictor};
use smoothfbo::numkit::Mat64;
use smoothfbo::outer_loop::linear_reduction_check;

#[derive(Debug, Clone)]
struct Instance {
    phi: Vec<f64>,
    inputs: Vec<Vec<f64>>,
    targets: Vec<f64>,
    outer: Vec<(Vec<f64>, f64)>,
    lambda: Vec<f64>,
}

const P: usize = 3;
const K: usize = 4;
const SLOTS: usize = 3;

fn instance() -> impl Strategy<Value = Instance> {
    let row = || proptest::collection::vec(-2.0f64..2.0, P);
    (
        proptest::collection::vec(-1.5f64..1.5, K * P),
        proptest::collection::vec(row(), 9..20),
        proptest::collection::vec(-2.0f64..2.0, 20),
        proptest::collection::vec((row(), -2.0f64..2.0), 1..8),
        proptest::collection::vec(0.1f64..3.0, SLOTS),
    )
        .prop_map(|(phi, inputs, targets, outer, lambda)| Instance {
            phi,
            inputs,
            targets,
            outer,
            lambda,
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn functional_matches_parametric(inst in instance()) {
        let tmpl = LinearPredictor::zeros(FeatureMap::new(Mat64::from_vec(K, P, inst.phi.clone()).unwrap(), true));
        let inner: Vec<Sample> = inst
            .inputs
            .iter()
            .enumerate()
            .map(|(i, x)| Sample::new(x.clone(), vec![inst.targets[i]], i % SLOTS))
            .collect();
        let outer: Vec<Sample> = inst.outer.iter().map(|(x, y)| Sample::new(x.clone(), vec![*y], 0)).collect();
        let inner = Batch::slot_means(inner).unwrap();
        let outer = Batch::uniform(outer).unwrap();
        let obj = Objective {
            inner_loss: &WeightedSquaredInnerLoss,
            outer_loss: &SquaredOuterLoss,
            inner: &inner,
            outer: &outer,
        };
        let r = linear_reduction_check(&inst.lambda, &tmpl, &obj, 1e-3).unwrap();
        let scale = r.parametric.iter().fold(1.0f64, |m, g| m.max(g.abs()));
        prop_assert!(r.max_abs_diff() <= 1e-6 * scale, "{:?} vs {:?}", r.functional, r.parametric);
    }
}
