use thiserror::Error;

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Core(#[from] erwin_core::Error),
    /// Bad command-line or workload settings.
    #[error("invalid settings: {0}")]
    Validation(String),
    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl HarnessError {
    /// True for failures caused by the caller's input rather than by the
    /// computation itself.
    pub fn is_validation(&self) -> bool {
        match self {
            HarnessError::Validation(_) => true,
            HarnessError::Core(e) => is_core_validation(e),
            _ => false,
        }
    }
}

fn is_core_validation(e: &erwin_core::Error) -> bool {
    use erwin_core::Error as E;
    match e {
        E::Config(_) | E::Input(_) | E::Parse { .. } | E::Argument(_) => true,
        E::Stage { source, .. } => is_core_validation(source),
        _ => false,
    }
}
