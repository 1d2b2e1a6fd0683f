//! Turn handling: decompose, merge, validate, solve, render.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use interassort_core::{
    optimize_constrained, optimize_unconstrained, whatif_revenue, Catalog, ConstraintSet,
    MnlParameters, OptimizationResult, OptimizeError, ProductId,
};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use tracing::{info, warn};

use crate::datastore::{list_or_none, ParameterKey, Store, StoreError};
use crate::intent::{
    merge_context, normalize_dataset, parse_deterministic, Action, HistoryEntry, IntentFrame, Role,
    SessionContext,
};
use crate::provider::{
    decompose_with_llm, paraphrase, ChatProvider, DecomposeError, Decomposition, OpenAiCompatible,
    ProviderConfig,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ErrorCode {
    UnknownDataset,
    UnknownModel,
    CardinalityRange,
    UnknownProduct,
    ConflictingConstraints,
    InfeasibleCardinality,
    Unparsed,
    DecompositionError,
    ServiceDegraded,
    SolverError,
    UnknownSession,
    BadRequest,
}

impl ErrorCode {
    /// Codes produced by [`validate`].
    pub fn is_validation(self) -> bool {
        matches!(
            self,
            ErrorCode::UnknownDataset
                | ErrorCode::UnknownModel
                | ErrorCode::CardinalityRange
                | ErrorCode::UnknownProduct
                | ErrorCode::ConflictingConstraints
                | ErrorCode::InfeasibleCardinality
        )
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCode::UnknownDataset => "UNKNOWN_DATASET",
            ErrorCode::UnknownModel => "UNKNOWN_MODEL",
            ErrorCode::CardinalityRange => "CARDINALITY_RANGE",
            ErrorCode::UnknownProduct => "UNKNOWN_PRODUCT",
            ErrorCode::ConflictingConstraints => "CONFLICTING_CONSTRAINTS",
            ErrorCode::InfeasibleCardinality => "INFEASIBLE_CARDINALITY",
            ErrorCode::Unparsed => "UNPARSED",
            ErrorCode::DecompositionError => "DECOMPOSITION_ERROR",
            ErrorCode::ServiceDegraded => "SERVICE_DEGRADED",
            ErrorCode::SolverError => "SOLVER_ERROR",
            ErrorCode::UnknownSession => "UNKNOWN_SESSION",
            ErrorCode::BadRequest => "BAD_REQUEST",
        }
    }
}

impl std::fmt::Display for ErrorCode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplyError {
    pub code: ErrorCode,
    pub message: String,
    pub offending_field: Option<String>,
}

impl ReplyError {
    pub fn new(code: ErrorCode, message: impl Into<String>, field: Option<&str>) -> Self {
        ReplyError {
            code,
            message: message.into(),
            offending_field: field.map(str::to_string),
        }
    }
}

impl std::fmt::Display for ReplyError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.code, self.message)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannerReply {
    pub reply_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<OptimizationResult>,
    pub frame: IntentFrame,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<ReplyError>,
}

/// A request that passed every check in [`validate`]. It cannot be built any
/// other way, so a solver only ever sees validated input.
#[derive(Debug, Clone)]
pub struct ValidatedRequest {
    catalog: Arc<Catalog>,
    params: Arc<MnlParameters>,
    constraints: ConstraintSet,
    action: Action,
}

impl ValidatedRequest {
    pub fn catalog(&self) -> &Catalog {
        &self.catalog
    }

    pub fn params(&self) -> &MnlParameters {
        &self.params
    }

    pub fn constraints(&self) -> &ConstraintSet {
        &self.constraints
    }

    pub fn action(&self) -> Action {
        self.action
    }
}

fn ids_text(ids: &BTreeSet<ProductId>) -> String {
    let list: Vec<String> = ids.iter().map(ToString::to_string).collect();
    let noun = if ids.len() == 1 {
        "product"
    } else {
        "products"
    };
    format!("{noun} {}", list.join(", "))
}

/// Range and consistency checks. The first failing check is reported.
pub fn validate(frame: &IntentFrame, store: &Store) -> Result<ValidatedRequest, ReplyError> {
    let datasets: Vec<String> = store
        .list_datasets()
        .into_iter()
        .map(|d| d.dataset_id)
        .collect();
    let Some(dataset) = frame.dataset.as_deref() else {
        return Err(ReplyError::new(
            ErrorCode::UnknownDataset,
            format!(
                "No dataset was specified. Available datasets: {}.",
                list_or_none(&datasets)
            ),
            Some("dataset"),
        ));
    };
    let unknown_dataset = |name: &str| {
        ReplyError::new(
            ErrorCode::UnknownDataset,
            format!(
                "Unknown dataset `{name}`. Available datasets: {}.",
                list_or_none(&datasets)
            ),
            Some("dataset"),
        )
    };
    let dataset = crate::datastore::normalize_name(dataset);
    let Some(descriptor) = store
        .list_datasets()
        .into_iter()
        .find(|d| d.dataset_id == dataset)
    else {
        return Err(unknown_dataset(&dataset));
    };
    let models: Vec<String> = descriptor.available_models.into_iter().collect();
    let unknown_model = |what: String| {
        ReplyError::new(
            ErrorCode::UnknownModel,
            format!("{what}. Available models: {}.", list_or_none(&models)),
            Some("model"),
        )
    };
    let Some(model) = frame.model.as_deref() else {
        return Err(unknown_model("No choice model was specified".into()));
    };
    let missing_model = || {
        unknown_model(format!(
            "Model `{model}` is not available for dataset `{dataset}`"
        ))
    };
    let key = ParameterKey::new(&dataset, model).map_err(|_| missing_model())?;
    let (catalog, params) = store.resolve(&key).map_err(|e| match e {
        StoreError::UnknownDataset { .. } => unknown_dataset(&dataset),
        _ => missing_model(),
    })?;

    let n = catalog.len();
    let cardinality = match frame.cardinality {
        Some(c) if c < 1 || c > n as u64 => {
            return Err(ReplyError::new(
                ErrorCode::CardinalityRange,
                format!("Cardinality {c} is out of range; it must be between 1 and {n} for dataset `{}`.", catalog.dataset_id()),
                Some("cardinality"),
            ));
        }
        Some(c) => Some(c as usize),
        None => None,
    };
    let include = frame.include.clone().unwrap_or_default();
    let exclude = frame.exclude.clone().unwrap_or_default();
    for (field, ids) in [
        ("include_products", &include),
        ("exclude_products", &exclude),
    ] {
        let unknown: BTreeSet<ProductId> = ids
            .iter()
            .copied()
            .filter(|id| !catalog.contains(*id))
            .collect();
        if !unknown.is_empty() {
            return Err(ReplyError::new(
                ErrorCode::UnknownProduct,
                format!(
                    "Unknown {} in dataset `{}`. Product ids must come from its catalog ({n} products).",
                    ids_text(&unknown),
                    catalog.dataset_id()
                ),
                Some(field),
            ));
        }
    }
    let both: BTreeSet<ProductId> = include.intersection(&exclude).copied().collect();
    if !both.is_empty() {
        return Err(ReplyError::new(
            ErrorCode::ConflictingConstraints,
            format!(
                "{} cannot be both included and excluded. Restate the constraints or say \"reset\".",
                ids_text(&both)
            ),
            Some("include_products"),
        ));
    }
    if let Some(c) = cardinality {
        if include.len() > c {
            return Err(ReplyError::new(
                ErrorCode::InfeasibleCardinality,
                format!(
                    "{} forced products do not fit in an assortment of at most {c} products. Raise the cardinality or include fewer products.",
                    include.len()
                ),
                Some("cardinality"),
            ));
        }
    }
    let constraints = ConstraintSet::new(cardinality, include, exclude)
        .map_err(|e| ReplyError::new(ErrorCode::ConflictingConstraints, e.to_string(), None))?;
    Ok(ValidatedRequest {
        catalog,
        params,
        constraints,
        action: frame.action,
    })
}

pub trait Solver: Send + Sync {
    fn solve(&self, request: &ValidatedRequest) -> Result<OptimizationResult, OptimizeError>;
}

/// Revenue-ordered search without constraints, Dinkelbach iteration with
/// them.
#[derive(Debug, Clone, Copy, Default)]
pub struct ExactSolver;

impl Solver for ExactSolver {
    fn solve(&self, request: &ValidatedRequest) -> Result<OptimizationResult, OptimizeError> {
        let (catalog, params, constraints) =
            (request.catalog(), request.params(), request.constraints());
        match request.action() {
            Action::WhatifInclude => whatif_revenue(catalog, params, constraints),
            _ if constraints.is_empty() => {
                optimize_unconstrained(catalog, params, &BTreeSet::new())
            }
            _ => optimize_constrained(catalog, params, constraints),
        }
    }
}

fn display_model(model: &str) -> String {
    if model == "mnl" {
        "MNL".into()
    } else {
        model.into()
    }
}

fn describe_constraints(frame: &IntentFrame) -> String {
    let mut parts = Vec::new();
    if let Some(c) = frame.cardinality {
        parts.push(format!("at most {c} products"));
    }
    if let Some(ids) = frame.include.as_ref().filter(|s| !s.is_empty()) {
        parts.push(format!("must include {}", ids_text(ids)));
    }
    if let Some(ids) = frame.exclude.as_ref().filter(|s| !s.is_empty()) {
        parts.push(format!("must exclude {}", ids_text(ids)));
    }
    if parts.is_empty() {
        "no additional constraints".into()
    } else {
        parts.join("; ")
    }
}

/// Template text for a solver result or an error. Numbers are rounded for
/// display only.
pub fn render_reply(
    outcome: Result<(&OptimizationResult, &Catalog), &ReplyError>,
    frame: &IntentFrame,
) -> String {
    let (result, catalog) = match outcome {
        Ok(found) => found,
        Err(e) => return format!("I could not run that request ({}). {}", e.code, e.message),
    };
    let dataset = frame.dataset.as_deref().unwrap_or(catalog.dataset_id());
    let model = display_model(frame.model.as_deref().unwrap_or_default());
    let mut out = String::new();
    if frame.action == Action::WhatifInclude {
        let forced = frame.include.clone().unwrap_or_default();
        let _ = writeln!(
            out,
            "Expected revenue with {} in the assortment: {:.2}",
            ids_text(&forced),
            result.revenue
        );
        let _ = writeln!(
            out,
            "Best assortment for dataset {dataset} under the {model} model."
        );
    } else {
        let _ = writeln!(
            out,
            "Optimal assortment for dataset {dataset} under the {model} model."
        );
    }
    let _ = writeln!(out, "Constraints: {}.", describe_constraints(frame));
    let mut rows: Vec<_> = result
        .assortment
        .iter()
        .filter_map(|id| catalog.get(id))
        .collect();
    rows.sort_by(|a, b| b.price.total_cmp(&a.price).then(a.id.cmp(&b.id)));
    let _ = writeln!(out, "\n{} products offered:\n", rows.len());
    let _ = writeln!(out, "| id | name | price | choice probability |");
    let _ = writeln!(out, "|---:|:-----|------:|-------------------:|");
    for p in rows {
        let prob = result.probabilities.get(&p.id).copied().unwrap_or(0.0);
        let _ = writeln!(
            out,
            "| {} | {} | {:.2} | {:.4} |",
            p.id,
            p.name.replace('|', "\\|"),
            p.price,
            prob
        );
    }
    let none = result
        .probabilities
        .get(&ProductId::NO_PURCHASE)
        .copied()
        .unwrap_or(1.0);
    let _ = writeln!(out, "\nNo-purchase probability: {none:.4}");
    let _ = write!(out, "Expected revenue: {:.2}", result.revenue);
    out
}

pub const HELP_TEXT: &str =
    "I plan product assortments from plain-language requests. For example:\n\
- What is the optimal assortment for the ta-feng dataset using the MNL model?\n\
- I want an optimal assortment where assortment size is limited to 5 products\n\
- Product 7 cannot be included in the assortment\n\
- What is the expected revenue if product 3 is part of the assortment?\n\
- list datasets\n\
- reset (clears the dataset, model and constraints)";

const UNPARSED_TEXT: &str = "Sorry, I did not understand that request. Try something like \
\"What is the optimal assortment for the ta-feng dataset using the MNL model?\" or type \"help\".";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Deterministic,
    Llm,
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_lowercase().as_str() {
            "deterministic" | "" => Ok(Mode::Deterministic),
            "llm" => Ok(Mode::Llm),
            other => Err(format!(
                "unknown mode `{other}` (expected deterministic or llm)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlannerConfig {
    pub mode: Mode,
    /// Rewrite template replies through the provider (llm mode only).
    pub paraphrase: bool,
    pub llm_model: String,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        PlannerConfig {
            mode: Mode::Deterministic,
            paraphrase: false,
            llm_model: crate::provider::DEFAULT_MODEL.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolveRequest {
    pub dataset: String,
    pub model: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cardinality: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub include_products: Option<BTreeSet<ProductId>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exclude_products: Option<BTreeSet<ProductId>>,
}

impl SolveRequest {
    pub fn to_frame(&self) -> IntentFrame {
        IntentFrame {
            action: Action::Optimize,
            dataset: Some(normalize_dataset(&self.dataset)),
            model: Some(crate::datastore::normalize_name(&self.model)),
            cardinality: self.cardinality,
            include: self.include_products.clone(),
            exclude: self.exclude_products.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveOutput {
    pub reply_text: String,
    pub result: OptimizationResult,
}

type SessionHandle = Arc<Mutex<SessionContext>>;

pub struct Planner {
    store: Arc<Store>,
    solver: Arc<dyn Solver>,
    provider: Option<Arc<dyn ChatProvider>>,
    config: PlannerConfig,
    sessions: Mutex<HashMap<String, SessionHandle>>,
}

impl Planner {
    /// Deterministic planner with the exact solver.
    pub fn new(store: Arc<Store>) -> Self {
        Planner {
            store,
            solver: Arc::new(ExactSolver),
            provider: None,
            config: PlannerConfig::default(),
            sessions: Mutex::new(HashMap::new()),
        }
    }

    pub fn with_solver(mut self, solver: Arc<dyn Solver>) -> Self {
        self.solver = solver;
        self
    }

    /// Switches to llm mode with the given provider.
    pub fn with_provider(mut self, provider: Arc<dyn ChatProvider>, model: &str) -> Self {
        self.provider = Some(provider);
        self.config.mode = Mode::Llm;
        self.config.llm_model = model.into();
        self
    }

    pub fn with_paraphrase(mut self, on: bool) -> Self {
        self.config.paraphrase = on;
        self
    }

    /// Mode from `INTERASSORT_MODE`, overridable by `mode`. Llm mode needs
    /// `INTERASSORT_LLM_BASE_URL`.
    pub fn from_env(store: Arc<Store>, mode: Option<Mode>) -> Result<Self, String> {
        let mode = match mode {
            Some(m) => m,
            None => std::env::var("INTERASSORT_MODE")
                .unwrap_or_default()
                .parse()?,
        };
        let planner = Planner::new(store);
        if mode == Mode::Deterministic {
            return Ok(planner);
        }
        let config = ProviderConfig::from_env()
            .ok_or("llm mode needs INTERASSORT_LLM_BASE_URL to be set")?;
        let model = config.model.clone();
        let provider = OpenAiCompatible::new(config).map_err(|e| e.to_string())?;
        Ok(planner.with_provider(Arc::new(provider), &model))
    }

    pub fn store(&self) -> &Arc<Store> {
        &self.store
    }

    pub fn config(&self) -> &PlannerConfig {
        &self.config
    }

    pub fn create_session(&self) -> String {
        let id = format!("{:032x}", rand::random::<u128>());
        self.sessions.lock().insert(
            id.clone(),
            Arc::new(Mutex::new(SessionContext::new(id.clone()))),
        );
        id
    }

    fn session(&self, id: &str) -> Option<SessionHandle> {
        self.sessions.lock().get(id).cloned()
    }

    pub fn history(&self, id: &str) -> Option<Vec<HistoryEntry>> {
        self.session(id).map(|s| s.lock().history().to_vec())
    }

    pub fn sticky_frame(&self, id: &str) -> Option<IntentFrame> {
        self.session(id).map(|s| s.lock().sticky_frame.clone())
    }

    /// Runs a turn, creating the session on first use.
    pub fn handle_turn(&self, id: &str, text: &str) -> PlannerReply {
        let session = self
            .sessions
            .lock()
            .entry(id.to_string())
            .or_insert_with(|| Arc::new(Mutex::new(SessionContext::new(id))))
            .clone();
        let mut ctx = session.lock();
        self.run_turn(&mut ctx, text)
    }

    /// Runs a turn on an existing session; `None` if there is no such session.
    pub fn post_message(&self, id: &str, text: &str) -> Option<PlannerReply> {
        let session = self.session(id)?;
        let mut ctx = session.lock();
        Some(self.run_turn(&mut ctx, text))
    }

    fn decompose(&self, ctx: &SessionContext, text: &str) -> Result<IntentFrame, PlannerReply> {
        let failed = |code, message: String, reply_text: String| PlannerReply {
            reply_text,
            result: None,
            frame: ctx.sticky_frame.clone(),
            error: Some(ReplyError::new(code, message, None)),
        };
        let parsed = parse_deterministic(text);
        let provider = match (&self.provider, self.config.mode) {
            (Some(p), Mode::Llm) => p,
            _ => {
                return parsed.ok_or_else(|| {
                    failed(
                        ErrorCode::Unparsed,
                        "no recognised request".into(),
                        UNPARSED_TEXT.into(),
                    )
                })
            }
        };
        if let Some(frame) = parsed.filter(|f| !f.action.is_solve()) {
            return Ok(frame);
        }
        match decompose_with_llm(ctx, text, provider.as_ref(), &self.config.llm_model) {
            Ok(Decomposition::Call(call)) => call.to_frame().map_err(|reason| {
                failed(
                    ErrorCode::DecompositionError,
                    reason.clone(),
                    format!("I could not interpret that request ({reason}). Please rephrase it."),
                )
            }),
            Ok(Decomposition::NoToolCall(answer)) => Err(PlannerReply {
                reply_text: answer,
                result: None,
                frame: ctx.sticky_frame.clone(),
                error: None,
            }),
            Err(DecomposeError::ProviderUnavailable(reason)) => Err(failed(
                ErrorCode::ServiceDegraded,
                reason,
                "The language model service is unavailable right now. Please retry, or switch to deterministic mode (INTERASSORT_MODE=deterministic).".into(),
            )),
            Err(DecomposeError::Malformed { reason, raw }) => {
                warn!(%reason, raw = %raw, "malformed tool call from provider");
                Err(failed(
                    ErrorCode::DecompositionError,
                    reason.clone(),
                    format!("I could not interpret that request ({reason}). Please rephrase it."),
                ))
            }
        }
    }

    fn run_turn(&self, ctx: &mut SessionContext, text: &str) -> PlannerReply {
        let decomposed = self.decompose(ctx, text);
        ctx.push(Role::User, text);
        let reply = match decomposed {
            Err(reply) => reply,
            Ok(delta) => match delta.action {
                Action::Reset => {
                    ctx.sticky_frame = merge_context(&ctx.sticky_frame, &delta);
                    self.plain(
                        ctx,
                        "Context cleared. Which dataset and model should I plan for?".into(),
                    )
                }
                Action::Help => self.plain(ctx, HELP_TEXT.into()),
                Action::ListDatasets => self.plain(ctx, self.datasets_text()),
                Action::Optimize | Action::WhatifInclude => {
                    let merged = merge_context(&ctx.sticky_frame, &delta);
                    match validate(&merged, &self.store) {
                        Ok(request) => {
                            ctx.sticky_frame = merged.clone();
                            ctx.push(Role::Tool, merged.to_tool_arguments().to_string());
                            self.execute(&request, merged)
                        }
                        Err(e) => PlannerReply {
                            reply_text: render_reply(Err(&e), &merged),
                            result: None,
                            frame: ctx.sticky_frame.clone(),
                            error: Some(e),
                        },
                    }
                }
            },
        };
        ctx.push(Role::Assistant, reply.reply_text.clone());
        reply
    }

    fn plain(&self, ctx: &SessionContext, reply_text: String) -> PlannerReply {
        PlannerReply {
            reply_text,
            result: None,
            frame: ctx.sticky_frame.clone(),
            error: None,
        }
    }

    fn datasets_text(&self) -> String {
        let datasets = self.store.list_datasets();
        if datasets.is_empty() {
            return "No datasets have been ingested yet.".into();
        }
        let mut out = String::from("Available datasets:");
        for d in datasets {
            let models: Vec<String> = d
                .available_models
                .iter()
                .map(|m| display_model(m))
                .collect();
            let _ = write!(
                out,
                "\n- {} ({} products; models: {})",
                d.dataset_id,
                d.product_count,
                list_or_none(&models)
            );
        }
        out
    }

    fn run_solver(&self, request: &ValidatedRequest) -> Result<OptimizationResult, ReplyError> {
        let result = self.solver.solve(request).map_err(|e| {
            ReplyError::new(
                ErrorCode::SolverError,
                format!("The solver failed: {e}."),
                None,
            )
        })?;
        let known = result
            .assortment
            .iter()
            .all(|id| request.catalog().contains(id));
        if !known || !request.constraints().admits(&result.assortment) {
            return Err(ReplyError::new(
                ErrorCode::SolverError,
                "The solver returned an assortment that violates the constraints.",
                None,
            ));
        }
        Ok(result)
    }

    fn execute(&self, request: &ValidatedRequest, frame: IntentFrame) -> PlannerReply {
        match self.run_solver(request) {
            Ok(result) => {
                info!(
                    dataset = request.catalog().dataset_id(),
                    revenue = result.revenue,
                    "solved"
                );
                let mut reply_text = render_reply(Ok((&result, request.catalog())), &frame);
                if let (true, Mode::Llm, Some(provider)) =
                    (self.config.paraphrase, self.config.mode, &self.provider)
                {
                    if let Some(text) =
                        paraphrase(provider.as_ref(), &self.config.llm_model, &reply_text)
                    {
                        reply_text = text;
                    }
                }
                PlannerReply {
                    reply_text,
                    result: Some(result),
                    frame,
                    error: None,
                }
            }
            Err(e) => PlannerReply {
                reply_text: render_reply(Err(&e), &frame),
                result: None,
                frame,
                error: Some(e),
            },
        }
    }

    /// Stateless solve shared by the CLI and `POST /v1/solve`.
    pub fn solve_direct(&self, request: &SolveRequest) -> Result<SolveOutput, ReplyError> {
        let frame = request.to_frame();
        let validated = validate(&frame, &self.store)?;
        let result = self.run_solver(&validated)?;
        Ok(SolveOutput {
            reply_text: render_reply(Ok((&result, validated.catalog())), &frame),
            result,
        })
    }

    /// Writes every session to `path` as JSON.
    pub fn snapshot(&self, path: &Path) -> std::io::Result<()> {
        let sessions: Vec<SessionContext> = {
            let map = self.sessions.lock();
            let mut all: Vec<_> = map.values().map(|s| s.lock().clone()).collect();
            all.sort_by(|a, b| a.session_id.cmp(&b.session_id));
            all
        };
        let json = serde_json::to_vec_pretty(&sessions).map_err(std::io::Error::other)?;
        std::fs::write(path, json)
    }

    /// Loads sessions written by [`Planner::snapshot`]; returns how many.
    pub fn restore(&self, path: &Path) -> std::io::Result<usize> {
        let bytes = std::fs::read(path)?;
        let sessions: Vec<SessionContext> =
            serde_json::from_slice(&bytes).map_err(std::io::Error::other)?;
        let count = sessions.len();
        let mut map = self.sessions.lock();
        for s in sessions {
            map.insert(s.session_id.clone(), Arc::new(Mutex::new(s)));
        }
        Ok(count)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use interassort_core::{Assortment, Product};
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn store() -> Arc<Store> {
        let store = Store::in_memory();
        let catalog = Catalog::new(
            "ta-feng",
            vec![
                Product::new(1u64, "green tea", 10.0),
                Product::new(2u64, "rice", 8.0),
                Product::new(3u64, "soy sauce", 2.0),
            ],
        )
        .unwrap();
        store.put_catalog(catalog, "memory").unwrap();
        let utilities = [
            (ProductId(1), 0.5),
            (ProductId(2), 1.0),
            (ProductId(3), 0.4),
        ]
        .into_iter()
        .collect();
        let params = MnlParameters::new("ta-feng", "mnl", 0.5, utilities).unwrap();
        store
            .put_parameters(&ParameterKey::new("ta-feng", "mnl").unwrap(), params)
            .unwrap();
        Arc::new(store)
    }

    fn frame(cardinality: Option<u64>, include: &[u64], exclude: &[u64]) -> IntentFrame {
        let set = |v: &[u64]| (!v.is_empty()).then(|| v.iter().copied().map(ProductId).collect());
        IntentFrame {
            action: Action::Optimize,
            dataset: Some("ta-feng".into()),
            model: Some("mnl".into()),
            cardinality,
            include: set(include),
            exclude: set(exclude),
        }
    }

    #[test]
    fn validation_codes() {
        let s = store();
        assert!(validate(&frame(None, &[], &[]), &s)
            .unwrap()
            .constraints()
            .is_empty());
        let code = |f: IntentFrame| validate(&f, &s).unwrap_err().code;
        let mut f = frame(None, &[], &[]);
        f.dataset = Some("nope".into());
        assert_eq!(code(f), ErrorCode::UnknownDataset);
        let mut f = frame(None, &[], &[]);
        f.dataset = None;
        assert_eq!(code(f), ErrorCode::UnknownDataset);
        let mut f = frame(None, &[], &[]);
        f.model = Some("nested-logit".into());
        assert_eq!(code(f), ErrorCode::UnknownModel);
        let mut f = frame(None, &[], &[]);
        f.model = None;
        assert_eq!(code(f), ErrorCode::UnknownModel);
        assert_eq!(code(frame(Some(0), &[], &[])), ErrorCode::CardinalityRange);
        assert_eq!(code(frame(Some(4), &[], &[])), ErrorCode::CardinalityRange);
        assert_eq!(code(frame(None, &[9], &[])), ErrorCode::UnknownProduct);
        assert_eq!(code(frame(None, &[], &[9])), ErrorCode::UnknownProduct);
        assert_eq!(
            code(frame(None, &[2], &[2])),
            ErrorCode::ConflictingConstraints
        );
        assert_eq!(
            code(frame(Some(1), &[1, 2], &[])),
            ErrorCode::InfeasibleCardinality
        );
    }

    #[test]
    fn unknown_dataset_hint_lists_datasets() {
        let mut f = frame(None, &[], &[]);
        f.dataset = Some("nope".into());
        let e = validate(&f, &store()).unwrap_err();
        assert_eq!(e.offending_field.as_deref(), Some("dataset"));
        let text = render_reply(Err(&e), &f);
        assert!(
            text.contains("UNKNOWN_DATASET") && text.contains("ta-feng"),
            "{text}"
        );
    }

    #[test]
    fn render_known_instance() {
        let s = store();
        let (catalog, params) = s
            .resolve(&ParameterKey::new("ta-feng", "mnl").unwrap())
            .unwrap();
        let result = optimize_unconstrained(&catalog, &params, &BTreeSet::new()).unwrap();
        assert_eq!(result.assortment, Assortment::from_iter([1u64, 2]));
        let text = render_reply(Ok((&result, &catalog)), &frame(None, &[], &[]));
        assert!(text.contains("6.50"), "{text}");
        assert!(
            text.contains("| 1 | green tea | 10.00 | 0.2500 |"),
            "{text}"
        );
        assert!(text.contains("| 2 | rice | 8.00 | 0.5000 |"), "{text}");
        assert!(text.contains("no additional constraints"));
        assert!(text.contains("No-purchase probability: 0.2500"));
    }

    #[test]
    fn whatif_leads_with_revenue() {
        let s = store();
        let v = validate(
            &IntentFrame {
                action: Action::WhatifInclude,
                ..frame(None, &[3], &[])
            },
            &s,
        )
        .unwrap();
        let result = ExactSolver.solve(&v).unwrap();
        assert!(result.assortment.contains(ProductId(3)));
        let f = IntentFrame {
            action: Action::WhatifInclude,
            ..frame(None, &[3], &[])
        };
        let text = render_reply(Ok((&result, v.catalog())), &f);
        assert!(
            text.starts_with("Expected revenue with product 3 in the assortment:"),
            "{text}"
        );
        assert!(text.contains("must include product 3"));
    }

    struct Counting(AtomicUsize);

    impl Solver for Counting {
        fn solve(&self, request: &ValidatedRequest) -> Result<OptimizationResult, OptimizeError> {
            self.0.fetch_add(1, Ordering::SeqCst);
            ExactSolver.solve(request)
        }
    }

    #[test]
    fn failed_turns_keep_sticky_frame_and_skip_solver() {
        let counter = Arc::new(Counting(AtomicUsize::new(0)));
        let planner = Planner::new(store()).with_solver(counter.clone());
        let ok = planner.handle_turn(
            "s",
            "What is the optimal assortment for the Ta-Feng Dataset using the MNL model?",
        );
        assert!(ok.result.is_some());
        let sticky = planner.sticky_frame("s").unwrap();

        let bad = planner.handle_turn("s", "qwertyuiop");
        assert_eq!(bad.error.unwrap().code, ErrorCode::Unparsed);
        assert_eq!(bad.frame, sticky);

        let bad = planner.handle_turn("s", "limit the assortment to 0 products");
        assert_eq!(bad.error.unwrap().code, ErrorCode::CardinalityRange);
        assert_eq!(planner.sticky_frame("s").unwrap(), sticky);
        assert_eq!(counter.0.load(Ordering::SeqCst), 1);

        let history = planner.history("s").unwrap();
        let roles: Vec<Role> = history.iter().map(|h| h.role).collect();
        assert_eq!(
            roles,
            vec![
                Role::User,
                Role::Tool,
                Role::Assistant,
                Role::User,
                Role::Assistant,
                Role::User,
                Role::Assistant
            ]
        );
    }

    #[test]
    fn reset_clears_context() {
        let planner = Planner::new(store());
        planner.handle_turn(
            "s",
            "optimal assortment for ta-feng using the mnl model with at most 2 products",
        );
        let reply = planner.handle_turn("s", "reset");
        assert!(!reply.frame.has_slots());
        let after = planner.handle_turn("s", "limit the assortment to 2 products");
        assert_eq!(after.error.unwrap().code, ErrorCode::UnknownDataset);
    }

    #[test]
    fn solve_direct_matches_turn() {
        let planner = Planner::new(store());
        let out = planner
            .solve_direct(&SolveRequest {
                dataset: "Ta-Feng".into(),
                model: "MNL".into(),
                cardinality: Some(1),
                ..SolveRequest::default()
            })
            .unwrap();
        assert_eq!(out.result.assortment.len(), 1);
        let err = planner
            .solve_direct(&SolveRequest {
                dataset: "nope".into(),
                model: "mnl".into(),
                ..SolveRequest::default()
            })
            .unwrap_err();
        assert_eq!(err.code, ErrorCode::UnknownDataset);
    }

    #[test]
    fn snapshot_round_trip() {
        let planner = Planner::new(store());
        let id = planner.create_session();
        planner
            .post_message(&id, "optimal assortment for ta-feng using the mnl model")
            .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sessions.json");
        planner.snapshot(&path).unwrap();
        let fresh = Planner::new(store());
        assert_eq!(fresh.restore(&path).unwrap(), 1);
        assert_eq!(fresh.sticky_frame(&id), planner.sticky_frame(&id));
        assert!(fresh.post_message("missing", "help").is_none());
    }
}
