//! Exit statuses and the one-line diagnosis printed on failure.

use std::fmt;
use std::path::Path;

use gst_core::GstError;

pub const USAGE: u8 = 2;
pub const IO: u8 = 3;
pub const MISMATCH: u8 = 4;
pub const NUMERICAL: u8 = 5;

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: USAGE,
            message: message.into(),
        }
    }

    pub fn io(path: &Path, err: std::io::Error) -> Self {
        Self {
            code: IO,
            message: format!("{}: {err}", path.display()),
        }
    }

    pub fn missing(what: &str, path: &Path) -> Self {
        Self {
            code: IO,
            message: format!("{what} not found: {}", path.display()),
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<GstError> for Failure {
    fn from(e: GstError) -> Self {
        let code = match &e {
            GstError::Io { .. }
            | GstError::Parse { .. }
            | GstError::DuplicateRecord { .. }
            | GstError::Json(_) => IO,
            GstError::ConfigMismatch(_) => MISMATCH,
            GstError::Config(_) | GstError::InvalidArgument(_) | GstError::EmptyInput(_) => USAGE,
            GstError::Tensor(_)
            | GstError::DegenerateWindow
            | GstError::NotRowStochastic { .. }
            | GstError::NonFiniteLoss { .. } => NUMERICAL,
        };
        // one line, whatever the source said
        let message = e.to_string().replace('\n', " ");
        Self { code, message }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn codes_by_kind() {
        assert_eq!(
            Failure::from(GstError::ConfigMismatch("x".into())).code,
            MISMATCH
        );
        assert_eq!(
            Failure::from(GstError::NonFiniteLoss { epoch: 1, batch: 2 }).code,
            NUMERICAL
        );
        assert_eq!(Failure::from(GstError::Config("x".into())).code, USAGE);
        let io = std::io::Error::new(std::io::ErrorKind::NotFound, "gone");
        assert_eq!(
            Failure::from(GstError::Io {
                path: "a".into(),
                source: io
            })
            .code,
            IO
        );
    }
}
