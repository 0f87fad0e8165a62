mod common;

use proptest::prelude::*;
use slotlab::envs::AttributeCatalog;
use slotlab::oodgen::{make_split, SplitKind};

fn kind_strategy() -> impl Strategy<Value = SplitKind> {
    prop::sample::select(SplitKind::ALL.to_vec())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn generated_splits_pass_the_validator(
        kind in kind_strategy(),
        k in 0usize..8,
        n in 1usize..7,
        shapes in 1usize..9,
        colors in 1usize..9,
        seed in any::<u64>(),
    ) {
        let outcome = common::check_split_draw(kind, k, n, shapes, colors, seed);
        prop_assert!(outcome.is_ok(), "{}", outcome.unwrap_err());
    }
}

#[test]
fn crafted_violations_are_named() {
    let cases = common::crafted_violations();
    assert_eq!(cases.len(), 17);
    for (spec, clause) in &cases {
        common::check_violation(spec, clause).unwrap();
    }
}

#[test]
fn infeasible_requests_are_errors_not_partial_splits() {
    let cat = AttributeCatalog::default();
    let err = make_split(SplitKind::ExtrapolationColor, 7, 5, &cat, 0).unwrap_err();
    assert_eq!(err.category(), "infeasible-split");
    assert!(err.to_string().contains("exceeds"));
    let err = make_split(SplitKind::NewConjunction, 0, 5, &cat, 0).unwrap_err();
    assert!(err.to_string().contains("needs at least one changed object"));
}
