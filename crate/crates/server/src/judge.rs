//! Judge endpoint over HTTP.

use std::time::Duration;

use citycoord_core::reward::{Judge, JudgeError};
use serde_json::{json, Value};

/// POSTs `{"prompt": ...}` and reads the reply text from a `text` field,
/// from `choices[0].message.content`, or from the raw body.
///
/// Uses a blocking client; do not call from inside an async task.
pub struct HttpJudge {
    url: String,
    client: reqwest::blocking::Client,
}

impl HttpJudge {
    pub fn new(url: impl Into<String>, timeout: Duration) -> Result<Self, JudgeError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| JudgeError(e.to_string()))?;
        Ok(Self {
            url: url.into(),
            client,
        })
    }

    pub fn url(&self) -> &str {
        &self.url
    }
}

pub fn reply_text(body: &str) -> String {
    match serde_json::from_str::<Value>(body) {
        Ok(v) => v
            .get("text")
            .or_else(|| v.pointer("/choices/0/message/content"))
            .and_then(Value::as_str)
            .map_or_else(|| body.to_owned(), str::to_owned),
        Err(_) => body.to_owned(),
    }
}

impl Judge for HttpJudge {
    fn complete(&self, prompt: &str) -> Result<String, JudgeError> {
        let resp = self
            .client
            .post(&self.url)
            .json(&json!({ "prompt": prompt }))
            .send()
            .map_err(|e| JudgeError(e.to_string()))?;
        let status = resp.status();
        let body = resp.text().map_err(|e| JudgeError(e.to_string()))?;
        if !status.is_success() {
            return Err(JudgeError(format!("judge returned {status}")));
        }
        Ok(reply_text(&body))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reply_shapes() {
        assert_eq!(reply_text(r#"{"text":"Score: 7"}"#), "Score: 7");
        assert_eq!(
            reply_text(r#"{"choices":[{"message":{"content":"Score: 3"}}]}"#),
            "Score: 3"
        );
        assert_eq!(reply_text("Score: 9\nBrief Comment: ok"), "Score: 9\nBrief Comment: ok");
        assert_eq!(reply_text(r#"{"other":1}"#), r#"{"other":1}"#);
    }
}
