//! JSON messages exchanged with console clients.
//!
//! Outbound: `state` (one per engine tick), `summary` (once, at the end) and
//! `error` (reply to a rejected inbound message). Inbound: `intent` and
//! `control`.

use cortexloop_core::session::ControlAction;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Inbound {
    Intent { u: f64, v: f64 },
    Control { action: ControlAction },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorMessage {
    #[serde(rename = "type")]
    pub kind: String,
    pub message: String,
}

impl ErrorMessage {
    pub fn new(message: impl Into<String>) -> Self {
        Self { kind: "error".into(), message: message.into() }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("error message serializes")
    }
}

pub fn parse_inbound(text: &str) -> Result<Inbound, String> {
    let msg: Inbound = serde_json::from_str(text).map_err(|e| format!("malformed message: {e}"))?;
    if let Inbound::Intent { u, v } = msg {
        if !(u.is_finite() && v.is_finite()) {
            return Err("intent components must be finite".into());
        }
    }
    Ok(msg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_both_kinds() {
        assert_eq!(parse_inbound(r#"{"type":"intent","u":0.5,"v":0}"#), Ok(Inbound::Intent { u: 0.5, v: 0.0 }));
        assert_eq!(
            parse_inbound(r#"{"type":"control","action":"next_mode"}"#),
            Ok(Inbound::Control { action: ControlAction::NextMode })
        );
    }

    #[test]
    fn rejects_malformed() {
        for bad in [
            "",
            "hello",
            "[]",
            r#"{"type":"intent","u":0.5}"#,
            r#"{"type":"intent","u":"fast","v":0}"#,
            r#"{"type":"intent","u":0.1,"v":0,"w":2}"#,
            r#"{"type":"control","action":"jump"}"#,
            r#"{"type":"teleport"}"#,
            r#"{"type":"intent","u":1e999,"v":0}"#,
        ] {
            assert!(parse_inbound(bad).is_err(), "{bad} was accepted");
        }
    }

    #[test]
    fn error_wire_format() {
        let v: serde_json::Value = serde_json::from_str(&ErrorMessage::new("nope").to_json()).unwrap();
        assert_eq!(v, serde_json::json!({"type": "error", "message": "nope"}));
    }
}
