use std::fmt;
use std::path::Path;

use serde_json::json;

/// A failure reported as `{"error": {"code", "message"}}` on stderr with a
/// code-specific exit status.
#[derive(Debug)]
pub struct CliError {
    pub code: &'static str,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: "usage",
            message: message.into(),
        }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        Self {
            code: "io",
            message: format!("{}: {e}", path.display()),
        }
    }

    pub fn schema(path: &Path, e: serde_json::Error) -> Self {
        Self {
            code: "schema_violation",
            message: format!("{}: {e}", path.display()),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.code {
            "usage" => 2,
            "schema_violation" => 3,
            "dimension_mismatch" => 4,
            "missing_label" => 5,
            "io" => 6,
            "invalid_parameter" => 7,
            "insufficient_data" => 8,
            "no_detections" => 9,
            "degenerate" => 10,
            "non_finite" => 11,
            "index_out_of_range" => 12,
            "simulation" => 13,
            _ => 1,
        }
    }

    pub fn to_json(&self) -> String {
        json!({ "error": { "code": self.code, "message": self.message } }).to_string()
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.code, self.message)
    }
}

impl From<droplex::Error> for CliError {
    fn from(e: droplex::Error) -> Self {
        Self {
            code: e.code(),
            message: e.to_string(),
        }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        droplex::Error::from(e).into()
    }
}
