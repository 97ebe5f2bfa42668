use alloc::string::String;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("cannot step from terminal state {0}")]
    TerminalStateStep(usize),

    #[error("{what} index {index} out of range (limit {limit})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        limit: usize,
    },

    #[error("replay buffer is empty")]
    EmptyBuffer,

    #[error("return enumeration exceeded {limit} atoms")]
    ExplosionGuard { limit: usize },

    #[error("invalid MDP: {0}")]
    InvalidMdp(String),

    #[error("invalid environment spec: {0}")]
    SpecInvalid(String),

    #[error("invalid training config: {0}")]
    ConfigInvalid(String),

    #[error("epistemic variance needs at least 2 ensemble members, got {0}")]
    DegenerateEnsemble(usize),

    #[error("aleatoric variance needs at least 2 quantiles, got {0}")]
    DegenerateQuantiles(usize),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

pub(crate) fn check_index(what: &'static str, index: usize, limit: usize) -> Result<()> {
    if index < limit {
        Ok(())
    } else {
        Err(Error::IndexOutOfRange { what, index, limit })
    }
}
