use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("misalignment {requested} is not attainable with |beta*| = {norm}")]
    Misalignment { requested: f64, norm: f64 },

    #[error("singular design: {0}")]
    SingularDesign(String),

    #[error("rank error: {0}")]
    Rank(String),

    /// The closed form is undefined for these sample sizes.
    #[error("out of regime: {0}")]
    OutOfRegime(String),

    #[error("division by zero: {0}")]
    DivideByZero(String),

    /// `gamma_I(n_B) <= 0`, so there is no optimal ridge schedule.
    #[error("degenerate lambda schedule: gamma_I = {gamma_i}")]
    DegenerateSchedule { gamma_i: f64 },

    /// Risk at or below the noise floor cannot be mapped back to a sample count.
    #[error("cannot invert risk {risk} against noise floor {floor}")]
    Inversion { risk: f64, floor: f64 },

    #[error("budget {budget} admits no feasible allocation (need at least {required})")]
    BudgetTooSmall { budget: f64, required: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("trial {index}: {source}")]
    Trial {
        index: u64,
        #[source]
        source: Box<Error>,
    },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
}

impl Error {
    pub(crate) fn in_trial(self, index: u64) -> Self {
        Error::Trial {
            index,
            source: Box::new(self),
        }
    }
}
