mod common;

use common::{random_manifest, recount};
use mammoclip::curation::stratified_group_kfold;

#[test]
fn randomized_manifests_split_without_leakage() {
    let mut worst: f64 = 0.0;
    for seed in 0..100u64 {
        let patients = 150 + (seed as usize * 37) % 351;
        let m = random_manifest(seed, patients);
        let folds = stratified_group_kfold(&m, 5, seed).unwrap();
        let rc = recount(&m, &folds);
        assert!(rc.clean(), "seed {seed}: {rc:?}");
        let audit = folds.audit(&m).unwrap();
        assert!((audit.max_relative_deviation - rc.max_relative_deviation).abs() < 1e-12);
        worst = worst.max(rc.max_relative_deviation);
        println!("seed {seed} patients {patients} deviation {:.3}", rc.max_relative_deviation);
    }
    assert!(worst <= 0.20, "worst relative deviation {worst}");
}
