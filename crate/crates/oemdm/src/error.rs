use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Validation failure: malformed value, constraint violation, bad argument.
    #[error("invalid input: {0}")]
    Invalid(String),

    /// An enumeration or combinatorial budget guard refused the request.
    #[error("size guard: {0}")]
    SizeGuard(String),

    /// A scheduler was evaluated without the context its variant requires.
    #[error("scheduler context: {0}")]
    SchedulerContext(String),

    /// A masked sequence is not a corruption of the stated clean sequence.
    #[error("membership: {0}")]
    Membership(String),

    /// Zero confidence at a position that must contribute a log term; the
    /// exact objective would be infinite.
    #[error("infinite loss: {0}")]
    InfiniteLoss(String),

    /// A non-finite intermediate value surfaced where finiteness is promised.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error("corpus: {0}")]
    Corpus(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
