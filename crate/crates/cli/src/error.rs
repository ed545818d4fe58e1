use thiserror::Error;

/// Failure of a CLI command. Each variant maps to one category and exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{}", .0.join("; "))]
    Config(Vec<String>),
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Integrity(String),
    #[error(transparent)]
    Core(#[from] peft_forge::Error),
}

/// `(category, exit code)`; 0 is success and 2 is reserved for usage errors.
pub const EXIT_CODES: &[(&str, i32)] = &[
    ("config", 3),
    ("io", 4),
    ("archive", 5),
    ("dataset", 6),
    ("shape", 7),
    ("numerical", 8),
    ("statistics", 9),
    ("integrity", 10),
];

impl CliError {
    pub fn category(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Io(_) => "io",
            CliError::Integrity(_) => "integrity",
            CliError::Core(e) => e.category(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        let c = self.category();
        EXIT_CODES.iter().find(|(k, _)| *k == c).map(|(_, v)| *v).unwrap_or(1)
    }

    /// `error[<category>]: <message>` on one line.
    pub fn line(&self) -> String {
        format!("error[{}]: {}", self.category(), self.to_string().replace('\n', " "))
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}
