use thiserror::Error;

/// Errors raised by simulation, tangent propagation, weights and estimators.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum Error {
  #[error("model evaluation produced a non-finite value in field {field} at x={x:?}")]
  ModelEvaluation { field: usize, x: Vec<f64> },

  #[error("state became non-finite at step {step}")]
  BlowUp { step: usize },

  #[error("jacobian is singular (condition estimate {condition:e})")]
  SingularJacobian { condition: f64 },

  #[error("integration-by-parts order {requested} exceeds the cap {cap}")]
  OrderExceeded { requested: usize, cap: usize },

  #[error("skorohod integrand has a random factor without its Malliavin field")]
  MissingField,

  #[error("no auxiliary path was simulated for v={v:?}")]
  MissingAuxiliaryPath { v: Vec<f64> },

  #[error("dimension mismatch: {0}")]
  Dimension(String),

  #[error("class mismatch: {0}")]
  ClassMismatch(String),

  #[error("empty z grid")]
  DegenerateGrid,

  #[error("invalid argument: {0}")]
  InvalidArgument(String),

  #[error("unsupported weight composition: {0}")]
  Unsupported(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
  /// Numeric failures are blow-ups, singular jacobians and non-finite model output.
  pub fn is_numeric(&self) -> bool {
    matches!(
      self,
      Error::BlowUp { .. } | Error::SingularJacobian { .. } | Error::ModelEvaluation { .. }
    )
  }
}
