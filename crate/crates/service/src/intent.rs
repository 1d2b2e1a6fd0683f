//! Prompt decomposition: intent frames, the tool schema, the offline rule
//! parser and multi-turn merging.

use std::collections::BTreeSet;
use std::sync::LazyLock;

use chrono::{DateTime, Utc};
use interassort_core::ProductId;
use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::datastore::normalize_name;

pub const TOOL_NAME: &str = "solve_assortment";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    #[default]
    Optimize,
    WhatifInclude,
    Reset,
    Help,
    ListDatasets,
}

impl Action {
    pub fn is_solve(self) -> bool {
        matches!(self, Action::Optimize | Action::WhatifInclude)
    }
}

/// Slots of one request. `None` means "not mentioned", which matters when
/// frames are merged across turns.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntentFrame {
    pub action: Action,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cardinality: Option<u64>,
    #[serde(
        default,
        rename = "include_products",
        skip_serializing_if = "Option::is_none"
    )]
    pub include: Option<BTreeSet<ProductId>>,
    #[serde(
        default,
        rename = "exclude_products",
        skip_serializing_if = "Option::is_none"
    )]
    pub exclude: Option<BTreeSet<ProductId>>,
}

impl IntentFrame {
    pub fn with_action(action: Action) -> Self {
        IntentFrame {
            action,
            ..IntentFrame::default()
        }
    }

    pub fn has_slots(&self) -> bool {
        self.dataset.is_some()
            || self.model.is_some()
            || self.cardinality.is_some()
            || self.include.is_some()
            || self.exclude.is_some()
    }

    /// The frame as `solve_assortment` arguments.
    pub fn to_tool_arguments(&self) -> Value {
        let mut args = Map::new();
        if let Some(d) = &self.dataset {
            args.insert("dataset".into(), json!(d));
        }
        if let Some(m) = &self.model {
            args.insert("model".into(), json!(m));
        }
        if let Some(c) = self.cardinality {
            args.insert("cardinality".into(), json!(c));
        }
        if let Some(ids) = &self.include {
            args.insert("include_products".into(), json!(ids));
        }
        if let Some(ids) = &self.exclude {
            args.insert("exclude_products".into(), json!(ids));
        }
        Value::Object(args)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolCall {
    pub function_name: String,
    pub arguments: Value,
}

impl ToolCall {
    /// Checks the call against the tool schema and converts it to a frame.
    /// Any include list makes the request a what-if question.
    pub fn to_frame(&self) -> Result<IntentFrame, String> {
        if self.function_name != TOOL_NAME {
            return Err(format!("unknown function `{}`", self.function_name));
        }
        check_against_schema(&self.arguments, &build_tool_schema()["parameters"])?;
        let args = self.arguments.as_object().expect("schema checked object");
        let ids = |field: &str| {
            args.get(field).and_then(Value::as_array).map(|a| {
                a.iter()
                    .filter_map(Value::as_u64)
                    .map(ProductId)
                    .collect::<BTreeSet<_>>()
            })
        };
        let include = ids("include_products");
        let action = match &include {
            Some(ids) if !ids.is_empty() => Action::WhatifInclude,
            _ => Action::Optimize,
        };
        Ok(IntentFrame {
            action,
            dataset: args
                .get("dataset")
                .and_then(Value::as_str)
                .map(normalize_dataset),
            model: args
                .get("model")
                .and_then(Value::as_str)
                .map(normalize_name),
            cardinality: args.get("cardinality").and_then(Value::as_u64),
            include,
            exclude: ids("exclude_products"),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    User,
    Assistant,
    Tool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub role: Role,
    pub text: String,
    pub timestamp: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionContext {
    pub session_id: String,
    history: Vec<HistoryEntry>,
    pub sticky_frame: IntentFrame,
}

impl SessionContext {
    pub fn new(session_id: impl Into<String>) -> Self {
        SessionContext {
            session_id: session_id.into(),
            history: Vec::new(),
            sticky_frame: IntentFrame::default(),
        }
    }

    pub fn history(&self) -> &[HistoryEntry] {
        &self.history
    }

    pub fn push(&mut self, role: Role, text: impl Into<String>) {
        self.history.push(HistoryEntry {
            role,
            text: text.into(),
            timestamp: Utc::now(),
        });
    }
}

/// The function-calling document for `solve_assortment`. Object keys are
/// kept sorted, so serializing it always gives the same bytes.
pub fn build_tool_schema() -> Value {
    let id_list = |description: &str| {
        json!({
            "type": "array",
            "items": {"type": "integer", "minimum": 1},
            "description": description,
        })
    };
    json!({
        "name": TOOL_NAME,
        "description": "Compute the revenue-maximizing assortment for a dataset under a choice model, optionally with a size limit and products that must or must not be offered.",
        "parameters": {
            "type": "object",
            "properties": {
                "dataset": {
                    "type": "string",
                    "description": "Dataset identifier, for example ta-feng.",
                },
                "model": {
                    "type": "string",
                    "enum": ["mnl"],
                    "description": "Customer choice model.",
                },
                "cardinality": {
                    "type": "integer",
                    "minimum": 1,
                    "description": "Maximum number of products in the assortment.",
                },
                "include_products": id_list("Product ids that must be offered."),
                "exclude_products": id_list("Product ids that must not be offered."),
            },
            "required": ["dataset", "model"],
            "additionalProperties": false,
        },
    })
}

/// Checks `value` against the subset of JSON Schema used by the tool schema:
/// `type`, `properties`, `required`, `additionalProperties`, `items`, `enum`
/// and `minimum`.
pub fn check_against_schema(value: &Value, schema: &Value) -> Result<(), String> {
    check_at(value, schema, "arguments")
}

fn check_at(value: &Value, schema: &Value, at: &str) -> Result<(), String> {
    if let Some(ty) = schema.get("type").and_then(Value::as_str) {
        let ok = match ty {
            "object" => value.is_object(),
            "array" => value.is_array(),
            "string" => value.is_string(),
            "integer" => value.is_i64() || value.is_u64(),
            "number" => value.is_number(),
            "boolean" => value.is_boolean(),
            _ => true,
        };
        if !ok {
            return Err(format!("{at}: expected {ty}, got {value}"));
        }
    }
    if let Some(options) = schema.get("enum").and_then(Value::as_array) {
        if !options.contains(value) {
            return Err(format!(
                "{at}: {value} is not one of {}",
                Value::from(options.clone())
            ));
        }
    }
    if let (Some(min), Some(n)) = (
        schema.get("minimum").and_then(Value::as_f64),
        value.as_f64(),
    ) {
        if n < min {
            return Err(format!("{at}: {value} is below the minimum {min}"));
        }
    }
    if let Some(items) = schema.get("items") {
        for (i, item) in value.as_array().into_iter().flatten().enumerate() {
            check_at(item, items, &format!("{at}[{i}]"))?;
        }
    }
    if let Some(obj) = value.as_object() {
        let props = schema.get("properties").and_then(Value::as_object);
        for name in schema
            .get("required")
            .and_then(Value::as_array)
            .into_iter()
            .flatten()
        {
            let name = name.as_str().unwrap_or_default();
            if !obj.contains_key(name) {
                return Err(format!("{at}: missing required field `{name}`"));
            }
        }
        for (key, field) in obj {
            match props.and_then(|p| p.get(key)) {
                Some(sub) => check_at(field, sub, &format!("{at}.{key}"))?,
                None if schema.get("additionalProperties") == Some(&Value::Bool(false)) => {
                    return Err(format!("{at}: unexpected field `{key}`"));
                }
                None => {}
            }
        }
    }
    Ok(())
}

/// `normalize_name` plus removal of a leading "the" and a trailing
/// "dataset": "The Ta-Feng Dataset" becomes "ta-feng".
pub fn normalize_dataset(raw: &str) -> String {
    let name = normalize_name(raw);
    let name = name.strip_prefix("the-").unwrap_or(&name);
    let name = name.strip_suffix("-dataset").unwrap_or(name);
    name.to_string()
}

/// Slot-wise override of `sticky` by `delta`.
pub fn merge_context(sticky: &IntentFrame, delta: &IntentFrame) -> IntentFrame {
    if delta.action == Action::Reset {
        return IntentFrame::with_action(Action::Reset);
    }
    IntentFrame {
        action: delta.action,
        dataset: delta.dataset.clone().or_else(|| sticky.dataset.clone()),
        model: delta.model.clone().or_else(|| sticky.model.clone()),
        cardinality: delta.cardinality.or(sticky.cardinality),
        include: delta.include.clone().or_else(|| sticky.include.clone()),
        exclude: delta.exclude.clone().or_else(|| sticky.exclude.clone()),
    }
}

const NUMBER: &str = r"(\d+|zero|one|two|three|four|five|six|seven|eight|nine|ten|eleven|twelve|thirteen|fourteen|fifteen|sixteen|seventeen|eighteen|nineteen|twenty)";
const PRODUCTS: &str =
    r"products?\s+(?:ids?\s+|#)?(\d+(?:\s*(?:,|\band\b|\bor\b|&)\s*(?:products?\s+)?#?\d+)*)";

fn number_value(word: &str) -> Option<u64> {
    const WORDS: [&str; 21] = [
        "zero",
        "one",
        "two",
        "three",
        "four",
        "five",
        "six",
        "seven",
        "eight",
        "nine",
        "ten",
        "eleven",
        "twelve",
        "thirteen",
        "fourteen",
        "fifteen",
        "sixteen",
        "seventeen",
        "eighteen",
        "nineteen",
        "twenty",
    ];
    word.parse()
        .ok()
        .or_else(|| WORDS.iter().position(|w| *w == word).map(|i| i as u64))
}

fn rx(pattern: &str) -> Regex {
    Regex::new(&pattern.replace("{N}", NUMBER).replace("{P}", PRODUCTS)).expect("static pattern")
}

struct Grammar {
    reset: Regex,
    help: Regex,
    list: Regex,
    dataset: Vec<Regex>,
    model: Regex,
    mnl: Regex,
    cardinality: Vec<Regex>,
    exclude: Vec<Regex>,
    include: Vec<Regex>,
    revenue: Regex,
    solve_words: Regex,
    digits: Regex,
}

static GRAMMAR: LazyLock<Grammar> = LazyLock::new(|| Grammar {
    reset: rx(r"^(?:reset|start over|clear(?: the)?(?: context| constraints)?|new conversation)$"),
    help: rx(r"^(?:help|\?|what can you do|how does this work)$"),
    list: rx(r"\b(?:list|show|which|what)\b.*\bdatasets\b"),
    dataset: vec![
        rx(
            r"\bassortments?\s+(?:for|of|on|in)\s+(?:the\s+)?([a-z0-9][a-z0-9 _.-]*?)(?:\s+dataset)?(?:\s+(?:using|with|under|given|and|where|if)\b|[?.!,;]|$)",
        ),
        rx(r"\b(?:on|for|in|from|use)\s+(?:the\s+)?([a-z0-9][a-z0-9_.-]*)\s+dataset\b"),
        rx(r"\bdataset\s+([a-z0-9][a-z0-9_.-]*)"),
    ],
    model: rx(
        r"\b(?:using|with|under|use)\s+(?:the\s+|an?\s+)?([a-z][a-z0-9 _.-]*?)\s+(?:choice\s+)?model\b",
    ),
    mnl: rx(r"\b(?:mnl|multinomial logit)\b"),
    cardinality: vec![
        rx(
            r"\b(?:limit(?:ed)?|restrict(?:ed)?|cap(?:ped)?|constrain(?:ed)?|reduce[ds]?|set)\b[^.?!;]*?\bto\s+(?:at\s+most\s+|only\s+)?{N}\s+(?:products?|items?)\b",
        ),
        rx(r"\bcardinality\s*(?:of|is|=|:|to|at)?\s*{N}\b"),
        rx(
            r"\b(?:at\s+most|no\s+more\s+than|up\s+to|maximum\s+of|max(?:imum)?)\s+{N}\s+(?:products?|items?)\b",
        ),
        rx(r"\b(?:size|assortment\s+size)\s+(?:of|is|=|:)\s+{N}\b"),
        rx(r"\bonly\s+{N}\s+(?:products?|items?)\b"),
    ],
    exclude: vec![
        rx(
            r"\b{P}\s+(?:cannot|can't|can\s+not|must\s+not|should\s+not|may\s+not)\s+be\s+(?:included|offered|part|in)\b",
        ),
        rx(
            r"\b(?:exclude|excluding|without|drop|dropping|remove|removing|cannot\s+include|can't\s+include|must\s+not\s+(?:include|contain)|do\s+not\s+(?:include|offer)|don't\s+(?:include|offer)|not\s+offering|no)\s+(?:the\s+)?{P}",
        ),
    ],
    include: vec![
        rx(r"\bif\s+(?:the\s+)?{P}\s+(?:is|are|were|was)\s+(?:part|included|in|offered|added)\b"),
        rx(r"\b{P}\s+(?:must|should|has\s+to|have\s+to)\s+be\s+(?:included|offered|part|in)\b"),
        rx(
            r"\b(?:include|including|includes|must\s+contain|must\s+include|contains?|containing|with|add|adding|force|forcing|keep|keeping|offer|offering)\s+(?:the\s+)?{P}",
        ),
    ],
    revenue: rx(r"\b(?:revenue|earn|income|sales|what\s+if|how\s+much)\b"),
    solve_words: rx(r"\b(?:assortments?|optimi[sz]e|optimal|solve|recommend)\b"),
    digits: rx(r"\d+"),
});

fn ids_in(capture: &str) -> BTreeSet<ProductId> {
    GRAMMAR
        .digits
        .find_iter(capture)
        .filter_map(|m| m.as_str().parse().ok())
        .map(ProductId)
        .collect()
}

/// Applies every pattern, collects the listed ids and blanks out the matched
/// text so later patterns cannot reuse it.
fn take_products(text: &mut String, patterns: &[Regex]) -> Option<BTreeSet<ProductId>> {
    let mut ids = BTreeSet::new();
    let mut spans = Vec::new();
    for pattern in patterns {
        for caps in pattern.captures_iter(text) {
            ids.extend(ids_in(&caps[1]));
            spans.push(caps.get(0).expect("whole match").range());
        }
    }
    for span in spans {
        text.replace_range(span.clone(), &" ".repeat(span.len()));
    }
    (!ids.is_empty()).then_some(ids)
}

/// Rule-based decomposition of a prompt. Returns `None` when nothing in the
/// text is recognised.
pub fn parse_deterministic(text: &str) -> Option<IntentFrame> {
    let g = &*GRAMMAR;
    let lowered = text.to_lowercase();
    let bare = lowered
        .trim()
        .trim_end_matches(|c: char| matches!(c, '.' | '!'))
        .trim();
    if g.reset.is_match(bare) {
        return Some(IntentFrame::with_action(Action::Reset));
    }
    if g.help.is_match(bare) {
        return Some(IntentFrame::with_action(Action::Help));
    }
    if g.list.is_match(bare) && !g.solve_words.is_match(bare) {
        return Some(IntentFrame::with_action(Action::ListDatasets));
    }

    let mut rest = lowered.split_whitespace().collect::<Vec<_>>().join(" ");
    let exclude = take_products(&mut rest, &g.exclude);
    let include = take_products(&mut rest, &g.include);

    let cardinality = g
        .cardinality
        .iter()
        .find_map(|p| p.captures(&rest))
        .and_then(|c| number_value(&c[1]));

    let model = g
        .model
        .captures(&rest)
        .map(|c| normalize_name(&c[1]))
        .or_else(|| g.mnl.is_match(&rest).then(|| "mnl".to_string()));

    let dataset = g
        .dataset
        .iter()
        .filter_map(|p| p.captures(&rest))
        .map(|c| normalize_dataset(&c[1]))
        .find(|d| {
            !d.is_empty()
                && d != "dataset"
                && !d
                    .split('-')
                    .any(|w| matches!(w, "product" | "products" | "items" | "size" | "at"))
        });

    let frame = IntentFrame {
        action: Action::Optimize,
        dataset,
        model,
        cardinality,
        include,
        exclude,
    };
    if !frame.has_slots() && !g.solve_words.is_match(&rest) {
        return None;
    }
    let asks_revenue = g.revenue.is_match(&lowered);
    let action = if frame.include.is_some() && asks_revenue {
        Action::WhatifInclude
    } else {
        Action::Optimize
    };
    Some(IntentFrame { action, ..frame })
}
