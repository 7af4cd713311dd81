use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("loss became non-finite at step {step}")]
    DivergenceDetected { step: usize },
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("noise scales must be frozen before corrupting latents")]
    ScalesNotFrozen,
    #[error(transparent)]
    Core(#[from] recipcrystal_core::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;
