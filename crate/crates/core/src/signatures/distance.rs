use crate::error::{Error, Result};
use crate::ingest::Direction;

/// Distance between two length/direction subarrays.
///
/// `Maximal` is used whenever two packets at the same index travel in
/// opposite directions. It never satisfies a neighborhood test, whatever the
/// radius.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Distance {
    Finite(f64),
    Maximal,
}

impl Distance {
    pub fn within(self, eps: f64) -> bool {
        match self {
            Distance::Finite(d) => d <= eps,
            Distance::Maximal => false,
        }
    }

    pub fn finite(self) -> Option<f64> {
        match self {
            Distance::Finite(d) => Some(d),
            Distance::Maximal => None,
        }
    }
}

pub fn signature_distance(a: &[(u32, Direction)], b: &[(u32, Direction)]) -> Result<Distance> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    let mut sum = 0.0;
    for (&(la, da), &(lb, db)) in a.iter().zip(b) {
        if da != db {
            return Ok(Distance::Maximal);
        }
        let diff = la as f64 - lb as f64;
        sum += diff * diff;
    }
    Ok(Distance::Finite(sum.sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use Direction::{Incoming as In, Outgoing as Out};

    #[test]
    fn identical_is_zero() {
        let a = [(100, Out), (200, In)];
        assert_eq!(signature_distance(&a, &a).unwrap(), Distance::Finite(0.0));
    }

    #[test]
    fn euclidean_over_lengths() {
        let a = [(100, Out), (200, In)];
        let b = [(103, Out), (204, In)];
        assert_eq!(signature_distance(&a, &b).unwrap(), Distance::Finite(5.0));
    }

    #[test]
    fn opposing_direction_is_maximal() {
        let a = [(100, Out), (200, In)];
        let b = [(100, Out), (200, Out)];
        let d = signature_distance(&a, &b).unwrap();
        assert_eq!(d, Distance::Maximal);
        assert!(!d.within(f64::MAX));
    }

    #[test]
    fn length_mismatch() {
        let a = [(100, Out)];
        let b = [(100, Out), (1, In)];
        assert!(matches!(
            signature_distance(&a, &b),
            Err(Error::LengthMismatch { left: 1, right: 2 })
        ));
    }

    proptest! {
        #[test]
        fn symmetric_and_zero_iff_equal(
            a in proptest::collection::vec(1u32..1600, 1..6),
            b_seed in proptest::collection::vec(1u32..1600, 6),
        ) {
            let a: Vec<_> = a.into_iter().map(|l| (l, Out)).collect();
            let b: Vec<_> = b_seed[..a.len()].iter().map(|&l| (l, Out)).collect();
            let ab = signature_distance(&a, &b).unwrap();
            let ba = signature_distance(&b, &a).unwrap();
            prop_assert_eq!(ab, ba);
            let zero = ab == Distance::Finite(0.0);
            prop_assert_eq!(zero, a == b);
        }
    }
}
