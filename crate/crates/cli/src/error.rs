use std::fmt;

/// Failure category; each maps to a process exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Usage,
    Data,
    Numerical,
}

impl Kind {
    pub fn exit_code(self) -> i32 {
        match self {
            Kind::Usage => 1,
            Kind::Data => 2,
            Kind::Numerical => 3,
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub kind: Kind,
    pub message: String,
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            kind: Kind::Usage,
            message: message.into(),
        }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self {
            kind: Kind::Data,
            message: message.into(),
        }
    }

    pub fn numerical(message: impl Into<String>) -> Self {
        Self {
            kind: Kind::Numerical,
            message: message.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let label = match self.kind {
            Kind::Usage => "usage error",
            Kind::Data => "data error",
            Kind::Numerical => "numerical failure",
        };
        write!(f, "{label}: {}", self.message)
    }
}

impl From<vqbridge::Error> for CliError {
    fn from(e: vqbridge::Error) -> Self {
        use vqbridge::Error as E;
        let kind = match &e {
            E::Config(_) => Kind::Usage,
            E::Data(_) | E::Io { .. } | E::Autograd(_) => Kind::Data,
            E::Numerical(_) => Kind::Numerical,
        };
        let message = match e {
            E::Config(m) | E::Data(m) | E::Numerical(m) => m,
            other => other.to_string(),
        };
        Self { kind, message }
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::data(e.to_string())
    }
}
