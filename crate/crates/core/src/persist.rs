//! Versioned JSON envelopes for persisted models and reports.
//!
//! Every document has the shape `{"kind": ..., "version": ..., "body": ...}`.
//! Floats are written in shortest round-trip form, so reading a document
//! back reproduces every parameter bit for bit.

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize)]
struct EnvelopeRef<'a, T> {
    kind: &'a str,
    version: u32,
    body: &'a T,
}

#[derive(Deserialize)]
struct Envelope<T> {
    kind: String,
    version: u32,
    body: T,
}

pub fn to_json<T: Serialize>(kind: &str, body: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(&EnvelopeRef {
        kind,
        version: FORMAT_VERSION,
        body,
    })?)
}

pub fn from_json<T: DeserializeOwned>(kind: &str, text: &str) -> Result<T> {
    let env: Envelope<T> = serde_json::from_str(text)?;
    if env.kind != kind {
        return Err(Error::Format(format!("expected a `{kind}` document, found `{}`", env.kind)));
    }
    if env.version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "`{kind}` document version {} is not supported (expected {FORMAT_VERSION})",
            env.version
        )));
    }
    Ok(env.body)
}
