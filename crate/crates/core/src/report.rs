//! Output formatting shared by the CSV writers.

/// 17 significant digits, enough to round-trip any `f64`.
pub fn fmt17(v: f64) -> String {
    if v == 0.0 {
        // Avoids "-0" noise in diffs.
        return "0.0000000000000000e0".to_string();
    }
    format!("{v:.16e}")
}

/// Version string written next to every output.
pub fn version_string() -> String {
    format!("{} {}", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn fmt17_round_trips(v in proptest::num::f64::NORMAL | proptest::num::f64::SUBNORMAL) {
            let back: f64 = fmt17(v).parse().unwrap();
            prop_assert_eq!(back.to_bits(), v.to_bits());
        }
    }

    #[test]
    fn zero_is_signless() {
        assert_eq!(fmt17(-0.0), fmt17(0.0));
    }
}
