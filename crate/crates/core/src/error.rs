use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("singular component {0}")]
    SingularComponent(usize),
    #[error("singular covariance")]
    SingularCovariance,
    #[error("coefficient blow-up at t = {0}")]
    CoefficientBlowUp(f64),
    #[error("quadrature did not converge within {0} nodes")]
    QuadratureBudget(usize),
    #[error("diverged at step {step}, trajectory {trajectory}")]
    Diverged { step: usize, trajectory: usize },
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("schedule order: alpha_now = {now} must not exceed alpha_prev = {prev}, both in (0, 1]")]
    ScheduleOrder { now: f64, prev: f64 },
    #[error("schedule inconsistency: 1 - alpha_prev - sigma^2 = {0} < 0")]
    ScheduleInconsistency(f64),
    #[error("degenerate horizon")]
    DegenerateHorizon,
    #[error("degenerate policy step {0}")]
    DegeneratePolicyStep(usize),
    #[error("degenerate group")]
    DegenerateGroup,
    #[error("ratio overflow")]
    RatioOverflow,
    #[error("training diverged at iteration {0}")]
    TrainingDiverged(usize),
    #[error("uncoupled batches: {0}")]
    UncoupledBatches(String),
    #[error("bound inapplicable (vacuous regime): 2m - (L + eta^2/4) g^2 = {0}")]
    BoundInapplicable(f64),
    #[error("mixture preconditions not met: {0}")]
    MixturePrecondition(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("decode error: {0}")]
    Decode(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, got })
    }
}
