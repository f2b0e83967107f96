use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("{axis} axis of size {size} is not divisible by {factor}")]
    Divisibility {
        axis: &'static str,
        size: usize,
        factor: usize,
    },
    #[error("channel mismatch: expected {expected}, got {got}")]
    Channels { expected: usize, got: usize },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("timestep {t} outside schedule with {steps} steps")]
    Timestep { t: usize, steps: usize },
    #[error("attention row {row} has every key masked")]
    AllMasked { row: usize },
    #[error("latents are {0}")]
    NormalizationState(&'static str),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("empty input: {0}")]
    Empty(&'static str),
}
