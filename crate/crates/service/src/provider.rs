//! Chat-completions provider and LLM-based decomposition.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::intent::{
    build_tool_schema, check_against_schema, normalize_dataset, Role, SessionContext, ToolCall,
    TOOL_NAME,
};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);
pub const DEFAULT_MODEL: &str = "gpt-4o-mini";

const SYSTEM_PROMPT: &str = "You help a retail store planner choose which products to offer. \
For every planning request call the solve_assortment function. Carry the dataset, model and \
constraints over from earlier turns unless the planner changes them. Put products that must be \
offered in include_products and products that must not be offered in exclude_products. \
Use the model name \"mnl\" for the multinomial logit model. If the message is not a planning \
request, answer briefly in plain text without calling the function.";

const PARAPHRASE_PROMPT: &str = "Rewrite the following assortment recommendation for a store \
planner in friendly plain language. Keep every number, product id and the table exactly as given.";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    fn new(role: &str, content: impl Into<String>) -> Self {
        ChatMessage {
            role: role.into(),
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tools: Vec<Value>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawToolCall {
    pub name: String,
    /// The arguments exactly as the provider sent them.
    pub arguments: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProviderMessage {
    pub content: Option<String>,
    pub tool_calls: Vec<RawToolCall>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProviderError {
    #[error("language model provider unavailable: {0}")]
    Unavailable(String),
    #[error("unreadable provider response: {reason}")]
    BadResponse { reason: String, raw: String },
}

pub trait ChatProvider: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<ProviderMessage, ProviderError>;
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProviderConfig {
    pub base_url: String,
    pub api_key: Option<String>,
    pub model: String,
    pub timeout: Duration,
}

impl ProviderConfig {
    /// Reads `INTERASSORT_LLM_BASE_URL`, `INTERASSORT_LLM_API_KEY` and
    /// `INTERASSORT_LLM_MODEL`. Returns `None` when no base URL is set.
    pub fn from_env() -> Option<Self> {
        let var = |name| {
            std::env::var(name)
                .ok()
                .filter(|v: &String| !v.trim().is_empty())
        };
        Some(ProviderConfig {
            base_url: var("INTERASSORT_LLM_BASE_URL")?,
            api_key: var("INTERASSORT_LLM_API_KEY"),
            model: var("INTERASSORT_LLM_MODEL").unwrap_or_else(|| DEFAULT_MODEL.into()),
            timeout: DEFAULT_TIMEOUT,
        })
    }
}

/// A provider speaking the OpenAI chat-completions protocol.
pub struct OpenAiCompatible {
    config: ProviderConfig,
    client: reqwest::blocking::Client,
}

impl OpenAiCompatible {
    pub fn new(config: ProviderConfig) -> Result<Self, ProviderError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| ProviderError::Unavailable(e.to_string()))?;
        Ok(OpenAiCompatible { config, client })
    }

    pub fn model(&self) -> &str {
        &self.config.model
    }
}

impl ChatProvider for OpenAiCompatible {
    fn complete(&self, request: &ChatRequest) -> Result<ProviderMessage, ProviderError> {
        let url = format!(
            "{}/chat/completions",
            self.config.base_url.trim_end_matches('/')
        );
        let mut body = serde_json::to_value(request).expect("request serializes");
        if !request.tools.is_empty() {
            body["tools"] = request
                .tools
                .iter()
                .map(|f| json!({"type": "function", "function": f}))
                .collect();
        }
        let mut call = self.client.post(&url).json(&body);
        if let Some(key) = &self.config.api_key {
            call = call.bearer_auth(key);
        }
        let response = call
            .send()
            .map_err(|e| ProviderError::Unavailable(e.to_string()))?;
        let status = response.status();
        let raw = response
            .text()
            .map_err(|e| ProviderError::Unavailable(e.to_string()))?;
        if !status.is_success() {
            return Err(ProviderError::Unavailable(format!("HTTP {status}: {raw}")));
        }
        parse_completion(&raw)
    }
}

/// Extracts the first choice's message from a chat-completions response.
pub fn parse_completion(raw: &str) -> Result<ProviderMessage, ProviderError> {
    let bad = |reason: &str| ProviderError::BadResponse {
        reason: reason.into(),
        raw: raw.into(),
    };
    let doc: Value = serde_json::from_str(raw).map_err(|_| bad("response is not JSON"))?;
    let message = doc
        .pointer("/choices/0/message")
        .ok_or_else(|| bad("response has no choices[0].message"))?;
    let mut tool_calls = Vec::new();
    for call in message
        .get("tool_calls")
        .and_then(Value::as_array)
        .into_iter()
        .flatten()
    {
        let function = call
            .get("function")
            .ok_or_else(|| bad("tool call without function"))?;
        let name = function
            .get("name")
            .and_then(Value::as_str)
            .unwrap_or_default();
        let arguments = match function.get("arguments") {
            Some(Value::String(s)) => s.clone(),
            Some(other) => other.to_string(),
            None => String::new(),
        };
        tool_calls.push(RawToolCall {
            name: name.into(),
            arguments,
        });
    }
    Ok(ProviderMessage {
        content: message
            .get("content")
            .and_then(Value::as_str)
            .map(str::to_string),
        tool_calls,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub enum Decomposition {
    Call(ToolCall),
    /// The model answered in text instead of calling the tool.
    NoToolCall(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DecomposeError {
    #[error("{0}")]
    ProviderUnavailable(String),
    #[error("could not decompose the request: {reason}")]
    Malformed { reason: String, raw: String },
}

fn history_messages(context: &SessionContext) -> impl Iterator<Item = ChatMessage> + '_ {
    context.history().iter().map(|entry| match entry.role {
        Role::User => ChatMessage::new("user", entry.text.clone()),
        Role::Assistant => ChatMessage::new("assistant", entry.text.clone()),
        Role::Tool => ChatMessage::new(
            "assistant",
            format!("Called {TOOL_NAME} with {}", entry.text),
        ),
    })
}

/// The request sent for one user turn: system prompt, the session history in
/// order, then `text`.
pub fn decomposition_request(context: &SessionContext, text: &str, model: &str) -> ChatRequest {
    let mut messages = vec![ChatMessage::new("system", SYSTEM_PROMPT)];
    messages.extend(history_messages(context));
    messages.push(ChatMessage::new("user", text));
    ChatRequest {
        model: model.into(),
        messages,
        tools: vec![build_tool_schema()],
    }
}

/// Asks the provider to decompose `text`. The returned call has already been
/// checked against the tool schema.
pub fn decompose_with_llm(
    context: &SessionContext,
    text: &str,
    provider: &dyn ChatProvider,
    model: &str,
) -> Result<Decomposition, DecomposeError> {
    let request = decomposition_request(context, text, model);
    let message = provider.complete(&request).map_err(|e| match e {
        ProviderError::Unavailable(m) => DecomposeError::ProviderUnavailable(m),
        ProviderError::BadResponse { reason, raw } => DecomposeError::Malformed { reason, raw },
    })?;
    let Some(raw_call) = message.tool_calls.first() else {
        return match message.content {
            Some(text) if !text.trim().is_empty() => Ok(Decomposition::NoToolCall(text)),
            _ => Err(DecomposeError::Malformed {
                reason: "provider returned neither a tool call nor text".into(),
                raw: String::new(),
            }),
        };
    };
    let malformed = |reason: String| DecomposeError::Malformed {
        reason,
        raw: raw_call.arguments.clone(),
    };
    if raw_call.name != TOOL_NAME {
        return Err(malformed(format!("unknown function `{}`", raw_call.name)));
    }
    let mut arguments: Value = serde_json::from_str(&raw_call.arguments)
        .map_err(|e| malformed(format!("arguments are not JSON: {e}")))?;
    if let Some(obj) = arguments.as_object_mut() {
        if let Some(Value::String(d)) = obj.get_mut("dataset") {
            *d = normalize_dataset(d);
        }
        if let Some(Value::String(m)) = obj.get_mut("model") {
            *m = crate::datastore::normalize_name(m);
        }
    }
    check_against_schema(&arguments, &build_tool_schema()["parameters"]).map_err(malformed)?;
    Ok(Decomposition::Call(ToolCall {
        function_name: TOOL_NAME.into(),
        arguments,
    }))
}

/// Rewrites a rendered reply. `None` when the provider fails or returns
/// nothing usable.
pub fn paraphrase(provider: &dyn ChatProvider, model: &str, text: &str) -> Option<String> {
    let request = ChatRequest {
        model: model.into(),
        messages: vec![
            ChatMessage::new("system", PARAPHRASE_PROMPT),
            ChatMessage::new("user", text),
        ],
        tools: Vec::new(),
    };
    provider
        .complete(&request)
        .ok()?
        .content
        .filter(|t| !t.trim().is_empty())
}

#[cfg(test)]
mod tests {
    use super::*;
    use parking_lot::Mutex;

    struct Scripted {
        reply: Result<ProviderMessage, ProviderError>,
        seen: Mutex<Vec<ChatRequest>>,
    }

    impl ChatProvider for Scripted {
        fn complete(&self, request: &ChatRequest) -> Result<ProviderMessage, ProviderError> {
            self.seen.lock().push(request.clone());
            self.reply.clone()
        }
    }

    fn tool(arguments: &str) -> Scripted {
        Scripted {
            reply: Ok(ProviderMessage {
                content: None,
                tool_calls: vec![RawToolCall {
                    name: TOOL_NAME.into(),
                    arguments: arguments.into(),
                }],
            }),
            seen: Mutex::new(Vec::new()),
        }
    }

    #[test]
    fn scripted_call_round_trips() {
        let stub = tool(r#"{"dataset":"ta-feng","model":"mnl"}"#);
        let ctx = SessionContext::new("s");
        let out = decompose_with_llm(&ctx, "hi", &stub, "m").unwrap();
        assert_eq!(
            out,
            Decomposition::Call(ToolCall {
                function_name: TOOL_NAME.into(),
                arguments: json!({"dataset": "ta-feng", "model": "mnl"}),
            })
        );
        let seen = stub.seen.lock();
        assert_eq!(seen[0].tools, vec![build_tool_schema()]);
        assert_eq!(seen[0].messages.last().unwrap().content, "hi");
    }

    #[test]
    fn malformed_arguments_are_errors() {
        let ctx = SessionContext::new("s");
        for args in [
            r#"{"dataset":"ta-feng","model":"mnl","cardinality":"five"}"#,
            r#"{"dataset":"ta-feng""#,
            r#"{"model":"mnl"}"#,
        ] {
            match decompose_with_llm(&ctx, "x", &tool(args), "m") {
                Err(DecomposeError::Malformed { raw, .. }) => assert_eq!(raw, args),
                other => panic!("{other:?}"),
            }
        }
    }

    #[test]
    fn history_is_sent_in_order() {
        let stub = tool(r#"{"dataset":"ta-feng","model":"MNL","cardinality":5}"#);
        let mut ctx = SessionContext::new("s");
        ctx.push(Role::User, "first");
        ctx.push(Role::Tool, r#"{"dataset":"ta-feng","model":"mnl"}"#);
        ctx.push(Role::Assistant, "answer");
        decompose_with_llm(&ctx, "second", &stub, "m").unwrap();
        let roles: Vec<_> = stub.seen.lock()[0]
            .messages
            .iter()
            .map(|m| (m.role.clone(), m.content.starts_with("Called")))
            .collect();
        let expected: Vec<(String, bool)> = [
            ("system", false),
            ("user", false),
            ("assistant", true),
            ("assistant", false),
            ("user", false),
        ]
        .iter()
        .map(|(r, c)| (r.to_string(), *c))
        .collect();
        assert_eq!(roles, expected);
    }

    #[test]
    fn text_reply_and_outage() {
        let ctx = SessionContext::new("s");
        let text = Scripted {
            reply: Ok(ProviderMessage {
                content: Some("Which dataset?".into()),
                tool_calls: vec![],
            }),
            seen: Mutex::new(Vec::new()),
        };
        assert_eq!(
            decompose_with_llm(&ctx, "x", &text, "m").unwrap(),
            Decomposition::NoToolCall("Which dataset?".into())
        );
        let down = Scripted {
            reply: Err(ProviderError::Unavailable("timeout".into())),
            seen: Mutex::new(Vec::new()),
        };
        assert!(matches!(
            decompose_with_llm(&ctx, "x", &down, "m"),
            Err(DecomposeError::ProviderUnavailable(_))
        ));
    }

    #[test]
    fn completion_parsing() {
        let raw = r#"{"choices":[{"message":{"content":null,"tool_calls":[{"id":"c1","type":"function","function":{"name":"solve_assortment","arguments":"{\"dataset\":\"d\"}"}}]}}]}"#;
        let msg = parse_completion(raw).unwrap();
        assert_eq!(msg.tool_calls[0].arguments, r#"{"dataset":"d"}"#);
        assert!(matches!(
            parse_completion("<html>"),
            Err(ProviderError::BadResponse { .. })
        ));
        assert!(matches!(
            parse_completion("{}"),
            Err(ProviderError::BadResponse { .. })
        ));
    }

    #[test]
    fn unreachable_endpoint_is_unavailable() {
        let provider = OpenAiCompatible::new(ProviderConfig {
            base_url: "http://127.0.0.1:9".into(),
            api_key: Some("k".into()),
            model: "m".into(),
            timeout: Duration::from_secs(2),
        })
        .unwrap();
        let req = decomposition_request(&SessionContext::new("s"), "x", "m");
        assert!(matches!(
            provider.complete(&req),
            Err(ProviderError::Unavailable(_))
        ));
    }
}
