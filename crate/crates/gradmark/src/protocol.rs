//! Newline-delimited JSON wire protocol for the prediction server.
//!
//! Request:  {"id": u64, "input": [f64, ...]}
//! Response: {"id": u64, "probs": [f64, ...]} or {"id": u64, "error": "..."}
//!
//! Floats round-trip exactly (shortest representation that parses back to
//! the same bits); precision games belong to the rounding wrapper, never to
//! the encoding.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub id: u64,
    pub input: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Response {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub id: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub probs: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl Response {
    pub fn ok(id: u64, probs: Vec<f64>) -> Self {
        Response {
            id: Some(id),
            probs: Some(probs),
            error: None,
        }
    }

    pub fn failure(id: Option<u64>, error: impl Into<String>) -> Self {
        Response {
            id,
            probs: None,
            error: Some(error.into()),
        }
    }
}

fn check_finite(values: &[f64]) -> Result<()> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Protocol("non-finite float in message".into()));
    }
    Ok(())
}

pub fn encode_request(req: &Request) -> Result<String> {
    check_finite(&req.input)?;
    Ok(serde_json::to_string(req)?)
}

pub fn decode_request(line: &str) -> Result<Request> {
    serde_json::from_str(line).map_err(|e| Error::Protocol(format!("parse: {e}")))
}

pub fn encode_response(resp: &Response) -> Result<String> {
    if let Some(probs) = &resp.probs {
        check_finite(probs)?;
    }
    Ok(serde_json::to_string(resp)?)
}

pub fn decode_response(line: &str) -> Result<Response> {
    serde_json::from_str(line).map_err(|e| Error::Protocol(format!("parse: {e}")))
}
