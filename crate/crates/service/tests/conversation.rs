mod common;

use std::collections::VecDeque;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use interassort_core::{OptimizationResult, OptimizeError};
use interassort_service::orchestrator::{
    ErrorCode, ExactSolver, Planner, Solver, ValidatedRequest,
};
use interassort_service::provider::{
    ChatProvider, ChatRequest, ProviderError, ProviderMessage, RawToolCall,
};
use parking_lot::Mutex;

const FIRST: &str = "What is the optimal assortment for the Ta-Feng Dataset using the MNL model?";
const SECOND: &str = "I want an optimal assortment where assortment size is limited to 5 products";

#[derive(Default)]
struct Counting(AtomicUsize);

impl Solver for Counting {
    fn solve(&self, request: &ValidatedRequest) -> Result<OptimizationResult, OptimizeError> {
        self.0.fetch_add(1, Ordering::SeqCst);
        ExactSolver.solve(request)
    }
}

/// Replays scripted tool-call arguments and records every request.
#[derive(Default)]
struct Script {
    replies: Mutex<VecDeque<&'static str>>,
    seen: Mutex<Vec<ChatRequest>>,
}

impl Script {
    fn new(replies: &[&'static str]) -> Arc<Self> {
        Arc::new(Script {
            replies: Mutex::new(replies.iter().copied().collect()),
            seen: Mutex::default(),
        })
    }
}

impl ChatProvider for Script {
    fn complete(&self, request: &ChatRequest) -> Result<ProviderMessage, ProviderError> {
        self.seen.lock().push(request.clone());
        let arguments = self.replies.lock().pop_front().expect("script exhausted");
        Ok(ProviderMessage {
            content: None,
            tool_calls: vec![RawToolCall {
                name: "solve_assortment".into(),
                arguments: arguments.into(),
            }],
        })
    }
}

fn transcript(lines: &[&str]) -> String {
    let planner = Planner::new(common::fixture_store());
    lines
        .iter()
        .map(|line| {
            let reply = planner.handle_turn("local", line);
            format!("> {line}\n{}\n", reply.reply_text)
        })
        .collect::<Vec<_>>()
        .join("\n")
}

#[test]
fn golden_transcript_matches_checked_in_copy() {
    let text = transcript(&[FIRST, SECOND]);
    assert_eq!(text, transcript(&[FIRST, SECOND]));
    let golden =
        std::fs::read_to_string(common::fixture_dir().join("golden/ta-feng-two-turn.txt")).unwrap();
    assert_eq!(text, golden);
}

#[test]
fn llm_two_turn_carries_context() {
    let script = Script::new(&[
        r#"{"dataset":"ta-feng","model":"mnl"}"#,
        r#"{"dataset":"ta-feng","model":"mnl","cardinality":5}"#,
    ]);
    let planner = Planner::new(common::fixture_store()).with_provider(script.clone(), "stub");
    let first = planner.handle_turn("s", FIRST);
    assert!(first.result.is_some());
    let second = planner.handle_turn("s", SECOND);
    assert_eq!(second.result.unwrap().assortment.len(), 5);
    assert_eq!(second.frame.cardinality, Some(5));

    let seen = script.seen.lock();
    let contents: Vec<(&str, &str)> = seen[1]
        .messages
        .iter()
        .map(|m| (m.role.as_str(), m.content.as_str()))
        .collect();
    assert_eq!(contents[0].0, "system");
    assert_eq!(contents[1], ("user", FIRST));
    assert!(contents[2].1.starts_with("Called solve_assortment"));
    assert_eq!(contents[3].0, "assistant");
    assert_eq!(contents[3].1, first.reply_text);
    assert_eq!(contents[4], ("user", SECOND));
    assert_eq!(contents.len(), 5);
}

#[test]
fn llm_mode_answers_control_commands_locally() {
    let script = Script::new(&[]);
    let planner = Planner::new(common::fixture_store()).with_provider(script.clone(), "stub");
    assert!(planner.handle_turn("s", "help").error.is_none());
    assert!(planner
        .handle_turn("s", "list datasets")
        .reply_text
        .contains("ta-feng"));
    assert!(script.seen.lock().is_empty());
}

#[test]
fn malformed_tool_calls_are_decomposition_errors() {
    let counter = Arc::new(Counting::default());
    let script = Script::new(&[
        r#"{"dataset":"ta-feng","model":"mnl","cardinality":"five"}"#,
        r#"{"dataset":"ta-feng","model":"#,
        r#"{"dataset":"ta-feng"}"#,
        r#"[1,2,3]"#,
    ]);
    let planner = Planner::new(common::fixture_store())
        .with_solver(counter.clone())
        .with_provider(script, "stub");
    for _ in 0..4 {
        let reply = planner.handle_turn("s", "anything");
        assert_eq!(reply.error.unwrap().code, ErrorCode::DecompositionError);
        assert!(reply.result.is_none());
    }
    assert_eq!(counter.0.load(Ordering::SeqCst), 0);
}

#[test]
fn validation_failures_never_reach_the_solver() {
    let cases = [
        ("optimal assortment for nope using the mnl model", ErrorCode::UnknownDataset),
        ("optimal assortment for ta-feng using the probit model", ErrorCode::UnknownModel),
        ("optimal assortment for ta-feng using the mnl model limited to 0 products", ErrorCode::CardinalityRange),
        ("optimal assortment for ta-feng using the mnl model without product 99", ErrorCode::UnknownProduct),
        (
            "optimal assortment for ta-feng using the mnl model that must contain product 1001 and exclude product 1001",
            ErrorCode::ConflictingConstraints,
        ),
        (
            "optimal assortment for ta-feng using the mnl model with at most 1 products that must contain products 1001 and 1002",
            ErrorCode::InfeasibleCardinality,
        ),
    ];
    for (text, code) in cases {
        let counter = Arc::new(Counting::default());
        let planner = Planner::new(common::fixture_store()).with_solver(counter.clone());
        let reply = planner.handle_turn("s", text);
        assert_eq!(reply.error.as_ref().map(|e| e.code), Some(code), "{text}");
        assert!(reply.reply_text.contains(code.as_str()));
        assert_eq!(counter.0.load(Ordering::SeqCst), 0, "{text}");
        assert!(!planner.sticky_frame("s").unwrap().has_slots());
    }
}
