use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch in {context}: expected {expected}, found {found}")]
    Shape {
        context: &'static str,
        expected: String,
        found: String,
    },

    #[error("objective is unbounded below: {0}")]
    UnboundedBelow(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("{}", diverged_message(*round, *step, detail))]
    Diverged {
        round: Option<usize>,
        step: usize,
        detail: String,
    },

    #[error("relative spread is undefined when the smallest cost is zero")]
    UndefinedSpread,
}

fn diverged_message(round: Option<usize>, step: usize, detail: &str) -> String {
    match round {
        Some(r) => format!("diverged at round {r}, step {step}: {detail}"),
        None => format!("diverged at step {step}: {detail}"),
    }
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn shape(context: &'static str, expected: impl ToString, found: impl ToString) -> Self {
        Error::Shape {
            context,
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }

    /// Attaches a round index to a divergence raised inside a round.
    pub fn in_round(self, round: usize) -> Self {
        match self {
            Error::Diverged { step, detail, .. } => Error::Diverged {
                round: Some(round),
                step,
                detail,
            },
            other => other,
        }
    }
}
