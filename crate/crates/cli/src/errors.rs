//! Error tags for the single-line failure report.

use std::fmt;

/// An error carrying a machine-readable class.
#[derive(Debug)]
pub struct TaggedError {
    pub tag: &'static str,
    message: String,
}

impl fmt::Display for TaggedError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for TaggedError {}

pub fn tagged(tag: &'static str, message: impl Into<String>) -> anyhow::Error {
    TaggedError {
        tag,
        message: message.into(),
    }
    .into()
}

pub trait Tagged<T> {
    fn tag(self, tag: &'static str) -> anyhow::Result<T>;
}

impl<T, E: Into<anyhow::Error>> Tagged<T> for Result<T, E> {
    fn tag(self, tag: &'static str) -> anyhow::Result<T> {
        self.map_err(|e| {
            let e: anyhow::Error = e.into();
            tagged(tag, format!("{e:#}"))
        })
    }
}

/// Tag of the first tagged error in the chain; core errors carry their own.
pub fn tag_of(err: &anyhow::Error) -> &'static str {
    for cause in err.chain() {
        if let Some(t) = cause.downcast_ref::<TaggedError>() {
            return t.tag;
        }
        if let Some(e) = cause.downcast_ref::<kgeu::Error>() {
            return e.tag();
        }
    }
    "internal"
}

/// `error[tag]: message` on one line.
pub fn render(err: &anyhow::Error) -> String {
    let message = format!("{err:#}").replace(['\n', '\r'], " ");
    format!("error[{}]: {message}", tag_of(err))
}
