use mammoclip_autodiff::gradcheck::{check, op_catalog, random_chain};
use mammoclip_autodiff::{Array, Graph};
use proptest::prelude::*;

const STEP: f64 = 1e-5;
const TOLERANCE: f64 = 1e-4;
const SEEDS: u64 = 20;

#[test]
fn every_op_matches_central_differences() {
    let mut failures = Vec::new();
    for (name, make) in op_catalog() {
        let mut worst: f64 = 0.0;
        for seed in 0..SEEDS {
            let report = check(&make(seed), STEP).unwrap_or_else(|e| panic!("{name} seed {seed}: {e}"));
            assert!(report.checked > 0, "{name} checked nothing");
            worst = worst.max(report.max_relative_error);
        }
        if worst >= TOLERANCE {
            failures.push(format!("{name}: {worst:e}"));
        }
    }
    assert!(failures.is_empty(), "gradient mismatches: {failures:?}");
}

#[test]
fn random_five_op_chains_match_central_differences() {
    for seed in 0..50 {
        let report = check(&random_chain(seed, 5), STEP).unwrap();
        assert!(
            report.max_relative_error < TOLERANCE,
            "seed {seed}: {:e}",
            report.max_relative_error
        );
    }
}

#[test]
fn conv_then_pool_pipeline_gradients() {
    use mammoclip_autodiff::gradcheck::GradCheckCase;
    let case = GradCheckCase {
        inputs: vec![
            Array::new(vec![1, 1, 6, 6], (0..36).map(|v| ((v * 17) % 23) as f64 / 23.0).collect()).unwrap(),
            Array::new(vec![2, 1, 3, 3], (0..18).map(|v| ((v * 5) % 7) as f64 / 7.0 - 0.4).collect()).unwrap(),
            Array::new(vec![2], vec![0.05, -0.1]).unwrap(),
        ],
        build: Box::new(|_, v| {
            v[0].conv2d(v[1], Some(v[2]), 1, 1)?
                .relu()?
                .max_pool2d(2, 2)?
                .global_avg_pool()?
                .sum()
        }),
    };
    let report = check(&case, STEP).unwrap();
    assert!(report.max_relative_error < TOLERANCE, "{report:?}");
}

fn run_chain(seed: u64) -> (Vec<u64>, Vec<Vec<u64>>) {
    let case = random_chain(seed, 5);
    let g = Graph::new();
    let leaves: Vec<_> = case.inputs.iter().map(|a| g.param(a.clone()).unwrap()).collect();
    let root = (case.build)(&g, &leaves).unwrap();
    g.backward(root).unwrap();
    let value = root.value().data().iter().map(|v| v.to_bits()).collect();
    let grads = leaves
        .iter()
        .map(|l| g.grad(*l).map(|a| a.data().iter().map(|v| v.to_bits()).collect()).unwrap_or_default())
        .collect();
    (value, grads)
}

proptest! {
    #[test]
    fn identical_inputs_give_bit_identical_values_and_gradients(seed in 0u64..10_000) {
        prop_assert_eq!(run_chain(seed), run_chain(seed));
    }
}
