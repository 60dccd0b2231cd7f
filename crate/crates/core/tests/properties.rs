mod common;

use common::props;

macro_rules! checks {
    ($($name:ident),* $(,)?) => {
        $(
            #[test]
            fn $name() {
                props::$name().unwrap();
            }
        )*
    };
}

checks!(
    net_delay_exact,
    stage_exact,
    path_exact,
    fsi_zero,
    skew_antisymmetric,
    translation_invariant,
    generation_deterministic,
    training_deterministic,
    save_load_identical,
    monotone_rescaling,
    r2_brute_force,
);
