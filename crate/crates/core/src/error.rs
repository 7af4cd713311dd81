use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("lattice is singular or left-handed (smallest/largest singular value = {ratio:e})")]
    SingularLattice { ratio: f64 },

    #[error("grid denominator {0} is not a positive multiple of 12")]
    InvalidDenominator(u32),

    #[error("two atoms of species index {species} snap to the same grid point {point:?}")]
    CollisionAfterSnap { species: usize, point: [u32; 3] },

    #[error("coordinate component is not finite")]
    NonFiniteCoordinate,

    #[error("crystal generation failed: {0}")]
    GenerationFailure(String),

    #[error("symmetry operation moves coordinates off the {denominator} grid")]
    OffGridTranslation { denominator: u32 },

    #[error("invalid symmetry operation: {0}")]
    InvalidSymmetryOp(String),

    #[error("wave set is not closed under the rotation: {w:?} maps outside")]
    WaveSetNotClosed { w: [i32; 3] },

    #[error("zero-frequency coefficient {value} of slot {slot} is not a non-negative integer")]
    NonIntegerMultiplicity { slot: usize, value: f64 },

    #[error("invalid crystal: {0}")]
    InvalidCrystal(String),
}
