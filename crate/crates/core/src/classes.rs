//! Flare classes and the peak-flux labeling rule.
//!
//! The class index mapping is fixed everywhere in the crate:
//! 0 = X, 1 = M, 2 = C, 3 = O. Classes are ordinal by peak soft X-ray
//! flux, X strongest.

use crate::error::DataError;

pub const NUM_CLASSES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FlareClass {
    X = 0,
    M = 1,
    C = 2,
    O = 3,
}

pub const ALL_CLASSES: [FlareClass; NUM_CLASSES] =
    [FlareClass::X, FlareClass::M, FlareClass::C, FlareClass::O];

impl FlareClass {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        ALL_CLASSES.get(i).copied()
    }

    pub fn letter(self) -> char {
        match self {
            FlareClass::X => 'X',
            FlareClass::M => 'M',
            FlareClass::C => 'C',
            FlareClass::O => 'O',
        }
    }

    pub fn from_letter(c: char) -> Option<Self> {
        match c {
            'X' => Some(FlareClass::X),
            'M' => Some(FlareClass::M),
            'C' => Some(FlareClass::C),
            'O' => Some(FlareClass::O),
            _ => None,
        }
    }

    /// True for the >= M binarization (positive = {X, M}).
    pub fn is_geq_m(self) -> bool {
        matches!(self, FlareClass::X | FlareClass::M)
    }
}

/// Label a peak X-ray flux in W/m^2:
/// X for I > 1e-4, M for 1e-5 < I <= 1e-4, C for 1e-6 < I <= 1e-5,
/// O for I <= 1e-6. Negative flux is rejected.
pub fn label_from_flux(peak_flux: f64) -> Result<FlareClass, DataError> {
    if peak_flux < 0.0 || !peak_flux.is_finite() {
        return Err(DataError::Constraint(format!(
            "peak flux must be a non-negative real, got {peak_flux}"
        )));
    }
    Ok(if peak_flux > 1e-4 {
        FlareClass::X
    } else if peak_flux > 1e-5 {
        FlareClass::M
    } else if peak_flux > 1e-6 {
        FlareClass::C
    } else {
        FlareClass::O
    })
}
