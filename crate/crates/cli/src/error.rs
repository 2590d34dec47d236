use std::io;
use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{}: {source}", path.display())]
    File {
        path: PathBuf,
        #[source]
        source: capsid::Error,
    },

    #[error(transparent)]
    Core(#[from] capsid::Error),

    #[error("{0}")]
    Threads(String),

    #[error("{violations} items violate the soft-vs-hard reconstruction bound (report in {})", report.display())]
    TheoryViolation { violations: usize, report: PathBuf },
}

/// Failure class shown to the user; each maps to its own exit code.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Category {
    NotFound,
    Io,
    Format,
    Config,
    Input,
    Numeric,
    Theory,
}

impl Category {
    pub fn label(self) -> &'static str {
        match self {
            Category::NotFound => "not-found",
            Category::Io => "io",
            Category::Format => "format",
            Category::Config => "config",
            Category::Input => "input",
            Category::Numeric => "numeric",
            Category::Theory => "theory",
        }
    }

    pub fn exit_code(self) -> u8 {
        match self {
            Category::NotFound => 3,
            Category::Io => 4,
            Category::Format => 5,
            Category::Config => 6,
            Category::Input => 7,
            Category::Numeric => 8,
            Category::Theory => 9,
        }
    }
}

fn classify(e: &capsid::Error) -> Category {
    use capsid::Error as E;
    match e {
        E::Io(io) if io.kind() == io::ErrorKind::NotFound => Category::NotFound,
        E::Io(_) => Category::Io,
        E::Format { .. } | E::Version { .. } => Category::Format,
        E::Config(_) => Category::Config,
        E::NonFinite(_) | E::NonFiniteGradient(_) | E::Diverged { .. } | E::ZeroVector => {
            Category::Numeric
        }
        E::Item { source, .. } => classify(source),
        _ => Category::Input,
    }
}

impl CliError {
    pub fn at(path: impl Into<PathBuf>) -> impl FnOnce(capsid::Error) -> CliError {
        let path = path.into();
        move |source| CliError::File { path, source }
    }

    pub fn category(&self) -> Category {
        match self {
            CliError::File { source, .. } | CliError::Core(source) => classify(source),
            CliError::Threads(_) => Category::Config,
            CliError::TheoryViolation { .. } => Category::Theory,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn categories_follow_the_root_cause() {
        let missing = capsid::Error::Io(io::Error::new(io::ErrorKind::NotFound, "gone"));
        assert_eq!(
            CliError::at("x.ckpt")(missing).category(),
            Category::NotFound
        );
        let nested = capsid::Error::Item {
            index: 3,
            source: Box::new(capsid::Error::ZeroVector),
        };
        assert_eq!(CliError::Core(nested).category(), Category::Numeric);
        let version = capsid::Error::Version {
            found: 9,
            supported: 1,
        };
        assert_eq!(CliError::Core(version).category(), Category::Format);
    }

    #[test]
    fn exit_codes_are_distinct_and_avoid_usage() {
        let all = [
            Category::NotFound,
            Category::Io,
            Category::Format,
            Category::Config,
            Category::Input,
            Category::Numeric,
            Category::Theory,
        ];
        let mut codes: Vec<u8> = all.iter().map(|c| c.exit_code()).collect();
        codes.sort();
        codes.dedup();
        assert_eq!(codes.len(), all.len());
        assert!(codes.iter().all(|&c| c > 2));
    }
}
