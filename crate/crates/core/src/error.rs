use alloc::string::String;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("time {t} outside [0, {t_max}]")]
    TimeDomain { t: f64, t_max: f64 },

    #[error("bridge is singular at t = {t}: {what}")]
    Singular { t: f64, what: &'static str },

    #[error("label {label} out of range for {class_count} classes")]
    LabelOutOfRange { label: usize, class_count: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite training loss {loss} at step {step} (batch {batch}, t = {t})")]
    TrainingFault { step: u64, batch: u64, t: f64, loss: f64 },

    #[error("non-finite sampler state at step {step}")]
    SamplingFault { step: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("infeasible request: {0}")]
    Infeasible(String),
}

pub type Result<T> = core::result::Result<T, Error>;
