//! Output size classes and their expected byte ranges.

use serde::{Deserialize, Serialize};

use super::graph::DataClass;

const KB: u64 = 1_000;
const MB: u64 = 1_000_000;
const GB: u64 = 1_000_000_000;

/// Size scale used by desk-scale runs: every class range shrinks by this factor.
pub const DESK_SCALE: f64 = 1e-3;

impl DataClass {
    /// Expected size range in bytes as `(exclusive lower, inclusive upper)`.
    pub fn expected_range(self) -> (u64, u64) {
        match self {
            DataClass::TextHuge => (GB, 10 * GB),
            DataClass::TextMedium => (10 * MB, GB),
            DataClass::ImageSmall => (0, MB),
            DataClass::VideoSmall => (0, 10 * MB),
            DataClass::Scalar => (0, KB),
        }
    }

    /// Representative size: the midpoint of the range the components
    /// typically produce (1-10 GB dumps, 10-100 MB diffraction tables, <1 MB
    /// plots, <10 MB videos).
    pub fn nominal_bytes(self) -> u64 {
        match self {
            DataClass::TextHuge => 5_500 * MB,
            DataClass::TextMedium => 55 * MB,
            DataClass::ImageSmall => MB / 2,
            DataClass::VideoSmall => 5 * MB,
            DataClass::Scalar => KB / 2,
        }
    }

    /// Whether `bytes` lies in this class's range after shrinking it by `scale`.
    pub fn admits(self, bytes: u64, scale: f64) -> bool {
        let (lo, hi) = self.expected_range();
        let (lo, hi) = (lo as f64 * scale, hi as f64 * scale);
        let b = bytes as f64;
        (lo == 0.0 || b > lo) && b <= hi
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SizeReport {
    pub class: DataClass,
    pub bytes: u64,
    pub within_expected: bool,
}

/// Classifies an artifact of `bytes` declared as `class`, at the given size scale
/// (1.0 for production sizes, [`DESK_SCALE`] for desk-scale runs).
pub fn classify_size(bytes: u64, class: DataClass, scale: f64) -> SizeReport {
    SizeReport { class, bytes, within_expected: class.admits(bytes, scale) }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_sizes() {
        assert!(classify_size(2 * GB, DataClass::TextHuge, 1.0).within_expected);
        assert!(classify_size(200 * KB, DataClass::ImageSmall, 1.0).within_expected);
        assert!(!classify_size(50 * MB, DataClass::ImageSmall, 1.0).within_expected);
        assert!(!classify_size(GB, DataClass::TextHuge, 1.0).within_expected);
        assert!(classify_size(GB, DataClass::TextMedium, 1.0).within_expected);
        assert!(classify_size(2 * MB, DataClass::TextHuge, DESK_SCALE).within_expected);
    }

    #[test]
    fn nominal_sizes_fit_their_class() {
        for class in DataClass::ALL {
            assert!(class.admits(class.nominal_bytes(), 1.0), "{class}");
            let desk = (class.nominal_bytes() as f64 * DESK_SCALE) as u64;
            assert!(class.admits(desk, DESK_SCALE), "{class} desk");
        }
    }
}
