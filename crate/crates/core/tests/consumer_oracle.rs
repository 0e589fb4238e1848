mod common;

use fisher_market::consumer::{expenditure, hicksian_demand, indirect_utility, marshallian_demand};
use fisher_market::{PriceVector, UtilityFunction};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn ces_example_matches_numeric_ump_and_emp() {
    let u = UtilityFunction::ces(vec![1.0, 1.0], 0.5).unwrap();
    let p = [1.0, 4.0];
    let x = common::ump(&u, &p, 1.0);
    assert!(common::rel_gap(&x, &[0.8, 0.05]) < 1e-6, "{x:?}");
    let (h, e) = common::emp(&u, &p, 1.25);
    assert!(common::rel_gap(&h, &[0.8, 0.05]) < 1e-6, "{h:?}");
    assert!((e - 1.0).abs() < 1e-6);
    let (_, unit) = common::emp(&u, &p, 1.0);
    assert!((unit - 0.8).abs() < 1e-6);
}

#[test]
fn closed_forms_match_numeric_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    for _ in 0..60 {
        let m = rng.gen_range(1..=4);
        let u = common::random_utility(&mut rng, m);
        let p = common::random_prices(&mut rng, m);
        let b = rng.gen_range(0.5..3.0);
        let pv = PriceVector::new(p.clone()).unwrap();

        let d = marshallian_demand(&u, &pv, b).unwrap().quantities;
        worst = worst.max(common::rel_gap(&d, &common::ump(&u, &p, b)));

        let target = rng.gen_range(0.5..3.0);
        let h = hicksian_demand(&u, &pv, target).unwrap().quantities;
        let (hn, en) = common::emp(&u, &p, target);
        worst = worst.max(common::rel_gap(&h, &hn));
        worst = worst.max((expenditure(&u, &pv, target).unwrap() - en).abs() / en);
        let v = indirect_utility(&u, &pv, b).unwrap();
        worst = worst.max((v - common::utility(&u, &common::ump(&u, &p, b))).abs() / v);
        assert!(worst < 1e-6, "{u:?} at {p:?}: {worst}");
    }
}
