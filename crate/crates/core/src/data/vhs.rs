use crate::data::ClassLabel;
use crate::error::{Error, Result};

pub const SMALL_BELOW: f64 = 8.2;
pub const LARGE_ABOVE: f64 = 10.0;

/// Vertebral heart scale measurement. Always finite and positive.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct VhsScore(f64);

impl VhsScore {
    pub fn new(score: f64) -> Result<Self> {
        if !(score.is_finite() && score > 0.0) {
            return Err(Error::domain(
                "vhs",
                format!("score must be a positive number, got {score}"),
            ));
        }
        Ok(Self(score))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// Below 8.2 is Small, 8.2 through 10 inclusive is Normal, above 10 is Large.
pub fn vhs_to_class(score: VhsScore) -> ClassLabel {
    let s = score.value();
    if s < SMALL_BELOW {
        ClassLabel::Small
    } else if s <= LARGE_ABOVE {
        ClassLabel::Normal
    } else {
        ClassLabel::Large
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn class(s: f64) -> ClassLabel {
        vhs_to_class(VhsScore::new(s).unwrap())
    }

    #[test]
    fn thresholds() {
        assert_eq!(class(7.9), ClassLabel::Small);
        assert_eq!(class(8.2), ClassLabel::Normal);
        assert_eq!(class(10.0), ClassLabel::Normal);
        assert_eq!(class(10.5), ClassLabel::Large);
        assert_eq!(class(8.199_999), ClassLabel::Small);
        assert_eq!(class(10.000_001), ClassLabel::Large);
    }

    #[test]
    fn nonpositive_scores_are_rejected() {
        for s in [0.0, -1.0, f64::NAN, f64::INFINITY] {
            assert!(matches!(VhsScore::new(s), Err(Error::Domain { .. })));
        }
    }

    fn size_rank(c: ClassLabel) -> u8 {
        match c {
            ClassLabel::Small => 0,
            ClassLabel::Normal => 1,
            ClassLabel::Large => 2,
        }
    }

    proptest! {
        #[test]
        fn monotone_in_score(a in 0.01f64..20.0, b in 0.01f64..20.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(size_rank(class(lo)) <= size_rank(class(hi)));
        }
    }
}
