use proptest::prelude::*;
use swarmshare::econ::{
    amplification_ratio, project_row, project_table, challenge_datasets, CostModel, DatasetSpec, UnitSystem, GB,
};
use swarmshare::swarmsim::{simulate, Mode, PeerSpec, SwarmScenario};

#[test]
fn http_only_simulation_has_unit_ratio() {
    let s = SwarmScenario::new(12_345_678, Mode::HttpOnly, 3e6, vec![PeerSpec::new(0.0, 2e6, 1e6); 5]);
    let r = simulate(&s).unwrap();
    assert_eq!(amplification_ratio(r.server_uploaded, r.total_downloaded()).unwrap(), 1.0);
}

#[test]
fn measured_swarm_ratio_feeds_projection() {
    let mut s = SwarmScenario::new(50_000_000, Mode::Hybrid, 5e6, vec![PeerSpec::new(0.0, 20e6, 10e6); 8]);
    s.seed_after = true;
    let r = simulate(&s).unwrap();
    let ratio = amplification_ratio(r.server_uploaded, r.total_downloaded()).unwrap();
    assert!(ratio > 1.0);
    let model = CostModel {
        amplification: ratio,
        ..CostModel::default()
    };
    let row = project_row(&DatasetSpec::new("sim", 50e6, 8), &model, 8);
    assert!((row.at_upload - r.server_uploaded).abs() < 1e-3 * r.server_uploaded);
}

#[test]
fn table_rows_follow_input_order() {
    let rows = project_table(&challenge_datasets(UnitSystem::Decimal), &CostModel::default());
    let names: Vec<_> = rows.iter().map(|r| r.name.as_str()).collect();
    assert_eq!(names, ["Whale", "Diabetes", "ImageNet"]);
}

proptest! {
    #[test]
    fn savings_are_linear_in_downloads(size_gb in 0.1..2000.0f64, n in 0u64..10_000, k in 1u64..20) {
        let model = CostModel::default();
        let ds = DatasetSpec::new("x", size_gb * GB, n);
        let one = project_row(&ds, &model, n);
        let many = project_row(&ds, &model, n * k);
        prop_assert!((many.dollar_savings - k as f64 * one.dollar_savings).abs() <= 1e-6 * many.dollar_savings.max(1.0));
    }

    #[test]
    fn savings_non_negative_when_amplified(size_gb in 0.0..2000.0f64, n in 0u64..10_000, amp in 1.0..100.0f64) {
        let model = CostModel { amplification: amp, ..CostModel::default() };
        let row = project_row(&DatasetSpec::new("x", size_gb * GB, n), &model, n);
        prop_assert!(row.dollar_savings >= 0.0);
        prop_assert!(row.at_upload <= row.http_upload);
    }
}
