use crowdwm_cli::{Overrides, RunConfig};
use crowdwm_core::eval::SplitMode;
use crowdwm_core::model::Variant;
use proptest::prelude::*;

fn overrides() -> impl Strategy<Value = Overrides> {
    (
        proptest::option::of(any::<u64>()),
        proptest::option::of(prop_oneof![Just(Variant::D), Just(Variant::G)]),
        proptest::option::of(prop_oneof![Just(SplitMode::Iv), Just(SplitMode::Cv)]),
        proptest::option::of("[a-z]{1,8}"),
        proptest::option::of(1usize..10_000),
    )
        .prop_map(|(seed, variant, split, hold_out, epochs)| Overrides {
            seed,
            variant,
            split,
            hold_out,
            epochs,
        })
}

proptest! {
    #[test]
    fn echo_round_trips_after_overrides(o in overrides()) {
        let mut c = RunConfig::default();
        let log = c.apply(&o);
        let n = [o.seed.is_some(), o.variant.is_some(), o.split.is_some(), o.hold_out.is_some(), o.epochs.is_some()]
            .iter()
            .filter(|b| **b)
            .count();
        prop_assert_eq!(log.len(), n);
        let back: RunConfig = serde_json::from_value(c.echo()).unwrap();
        prop_assert_eq!(&back, &c);
        let toml_back = RunConfig::from_toml(&toml::to_string(&c).unwrap()).unwrap();
        prop_assert_eq!(&toml_back, &c);
    }

    #[test]
    fn seed_reaches_every_consumer(o in overrides()) {
        let mut c = RunConfig::default();
        c.apply(&o);
        prop_assert_eq!(c.train.seed, c.seed);
        prop_assert_eq!(c.model.init_seed, c.seed);
        prop_assert_eq!(c.eval.seed, c.seed);
        if let Some(s) = o.seed {
            prop_assert_eq!(c.seed, s);
        }
    }
}
