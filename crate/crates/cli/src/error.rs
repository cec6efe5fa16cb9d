use std::fmt;
use std::path::{Path, PathBuf};

use embryo_net::NetError;

/// Failure classes reported on stderr as `error[CLASS]: message`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    MissingConfig,
    MissingCheckpoint,
    IncompatibleProfile,
    Io,
    Data,
    Training,
    Provenance,
}

impl ErrorClass {
    pub fn name(self) -> &'static str {
        match self {
            ErrorClass::Usage => "USAGE",
            ErrorClass::MissingConfig => "MISSING_CONFIG",
            ErrorClass::MissingCheckpoint => "MISSING_CHECKPOINT",
            ErrorClass::IncompatibleProfile => "INCOMPATIBLE_PROFILE",
            ErrorClass::Io => "IO",
            ErrorClass::Data => "DATA",
            ErrorClass::Training => "TRAINING",
            ErrorClass::Provenance => "PROVENANCE",
        }
    }

    pub fn exit_code(self) -> i32 {
        match self {
            ErrorClass::Usage => 2,
            ErrorClass::MissingConfig => 3,
            ErrorClass::MissingCheckpoint => 4,
            ErrorClass::IncompatibleProfile => 5,
            ErrorClass::Io => 6,
            ErrorClass::Data => 7,
            ErrorClass::Training => 8,
            ErrorClass::Provenance => 9,
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub class: ErrorClass,
    pub message: String,
}

pub type Result<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn new(class: ErrorClass, message: impl Into<String>) -> Self {
        Self {
            class,
            message: message.into(),
        }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        Self::new(ErrorClass::Io, format!("{}: {e}", path.display()))
    }

    /// The single stderr line.
    pub fn line(&self) -> String {
        let msg: Vec<&str> = self.message.split_whitespace().collect();
        format!("error[{}]: {}", self.class.name(), msg.join(" "))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.line())
    }
}

impl From<embryo_core::Error> for CliError {
    fn from(e: embryo_core::Error) -> Self {
        Self::from_core(&e)
    }
}

impl From<NetError> for CliError {
    fn from(e: NetError) -> Self {
        let class = match &e {
            NetError::Incompatible(_) => ErrorClass::IncompatibleProfile,
            NetError::Config(_) => ErrorClass::Usage,
            NetError::TrainConfig(_) | NetError::EmptyStratum(_) | NetError::NonFiniteLoss { .. } | NetError::StepOutOfRange { .. } => {
                ErrorClass::Training
            }
            NetError::Io { .. } => ErrorClass::Io,
            NetError::Core(inner) => return CliError::from_core(inner),
            _ => ErrorClass::Data,
        };
        Self::new(class, e.to_string())
    }
}

impl CliError {
    fn from_core(e: &embryo_core::Error) -> Self {
        use embryo_core::Error as E;
        let class = match e {
            E::TruthLeak(_) => ErrorClass::Provenance,
            E::Io { .. } => ErrorClass::Io,
            _ => ErrorClass::Data,
        };
        Self::new(class, e.to_string())
    }
}

/// Wraps `std::io` errors with the path.
pub fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::io(path, e)
}

pub fn must_exist(path: &Path, class: ErrorClass, what: &str) -> Result<PathBuf> {
    if path.exists() {
        Ok(path.to_owned())
    } else {
        Err(CliError::new(class, format!("{what} {} does not exist", path.display())))
    }
}
