//! Command-line driver: configuration, model artifacts and the subcommands
//! `synth`, `train`, `predict`, `explain`, `evaluate` and `shift-sweep`.

pub mod artifact;
pub mod commands;
pub mod config;
pub mod data;

use artifact::ArtifactError;

pub const EXIT_OK: u8 = 0;
pub const EXIT_USAGE: u8 = 1;
pub const EXIT_DATA: u8 = 2;
pub const EXIT_NUMERICAL: u8 = 3;

/// Bad flags or configuration.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

/// Input data that cannot be used as given.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct DataError(pub String);

/// Maps an error chain to the process exit status.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return EXIT_USAGE;
        }
        if let Some(e) = cause.downcast_ref::<physres_core::Error>() {
            return if e.is_numerical() { EXIT_NUMERICAL } else { EXIT_DATA };
        }
        if cause.is::<DataError>() || cause.is::<ArtifactError>() {
            return EXIT_DATA;
        }
    }
    EXIT_DATA
}

/// Logging to stderr at the level named by `PHYSRES_LOG` (default `error`).
pub fn init_logging() {
    let env = env_logger::Env::new().filter_or("PHYSRES_LOG", "error");
    let _ = env_logger::Builder::from_env(env).format_timestamp(None).try_init();
}

#[cfg(test)]
mod tests {
    use super::*;
    use anyhow::Context;
    use physres_core::Error;

    fn code_of(e: impl Into<anyhow::Error>) -> u8 {
        exit_code(&e.into())
    }

    #[test]
    fn exit_codes_by_kind() {
        assert_eq!(code_of(UsageError("x".into())), EXIT_USAGE);
        assert_eq!(code_of(Error::Numerical("nan".into())), EXIT_NUMERICAL);
        assert_eq!(code_of(Error::Numerical("nan".into()).in_stage("readout training")), EXIT_NUMERICAL);
        assert_eq!(code_of(Error::MissingChannel("torque".into())), EXIT_DATA);
        assert_eq!(code_of(Error::Untrained), EXIT_DATA);
        assert_eq!(code_of(std::io::Error::other("gone")), EXIT_DATA);
    }

    #[test]
    fn context_does_not_hide_kind() {
        let r: anyhow::Result<()> = Err(Error::Diverged {
            epoch: 3,
            loss: 1e9,
            trace: vec![],
        })
        .context("train");
        assert_eq!(exit_code(&r.unwrap_err()), EXIT_NUMERICAL);
    }
}
