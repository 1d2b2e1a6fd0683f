//! Exact expected-revenue maximization under the MNL model.
//!
//! * [`optimize_unconstrained`] scans the price-ordered prefixes of the
//!   catalog; the unconstrained MNL optimum is always one of them.
//! * [`optimize_constrained`] handles a cardinality bound plus forced
//!   inclusions and exclusions with Dinkelbach's parametric method: at a
//!   revenue level `λ` the linearized problem
//!   `max Σ_{k∈S} (p_k − λ)·v_k − λ·v_0` is solved by taking the forced set
//!   and the best positive scores, and `λ` is moved to the revenue of the
//!   returned set until it stops increasing.
//! * [`brute_force_optimal`] enumerates every feasible subset and is only
//!   meant as a verification oracle for small instances.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::choice::{
    choice_distribution, expected_revenue, Assortment, Catalog, ChoiceError, MnlParameters,
    ProductId,
};
use crate::EPS;

/// Largest universe the brute-force oracle accepts.
pub const ORACLE_MAX_PRODUCTS: usize = 20;

/// Safety cap on Dinkelbach iterations. Convergence is finite and in
/// practice takes a handful of steps.
const MAX_DINKELBACH_ITERS: usize = 1_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimizeError {
    #[error("oracle refuses {0} candidate products (limit {ORACLE_MAX_PRODUCTS})")]
    OracleTooLarge(usize),
    #[error("infeasible constraints: {0}")]
    Infeasible(String),
    #[error("product {0} is not in the catalog")]
    UnknownProduct(ProductId),
    #[error("no products left to choose from")]
    EmptyUniverse,
    #[error(transparent)]
    Choice(#[from] ChoiceError),
}

/// The feasible family: an optional size bound `C`, products that must be
/// offered (`F`) and products that must not be (`E`).
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConstraintSet {
    cardinality: Option<usize>,
    include: BTreeSet<ProductId>,
    exclude: BTreeSet<ProductId>,
}

impl ConstraintSet {
    pub fn new(
        cardinality: Option<usize>,
        include: impl IntoIterator<Item = ProductId>,
        exclude: impl IntoIterator<Item = ProductId>,
    ) -> Result<Self, OptimizeError> {
        let include: BTreeSet<_> = include.into_iter().collect();
        let exclude: BTreeSet<_> = exclude.into_iter().collect();
        if cardinality == Some(0) {
            return Err(OptimizeError::Infeasible(
                "cardinality bound must be at least 1".into(),
            ));
        }
        if let Some(id) = include.intersection(&exclude).next() {
            return Err(OptimizeError::Infeasible(format!(
                "product {id} is both required and excluded"
            )));
        }
        if let Some(c) = cardinality {
            if include.len() > c {
                return Err(OptimizeError::Infeasible(format!(
                    "{} required products exceed the size limit of {c}",
                    include.len()
                )));
            }
        }
        Ok(ConstraintSet {
            cardinality,
            include,
            exclude,
        })
    }

    pub fn unconstrained() -> Self {
        ConstraintSet::default()
    }

    pub fn cardinality(&self) -> Option<usize> {
        self.cardinality
    }

    pub fn include(&self) -> &BTreeSet<ProductId> {
        &self.include
    }

    pub fn exclude(&self) -> &BTreeSet<ProductId> {
        &self.exclude
    }

    pub fn is_empty(&self) -> bool {
        self.cardinality.is_none() && self.include.is_empty() && self.exclude.is_empty()
    }

    /// Whether `assortment` belongs to the feasible family.
    pub fn admits(&self, assortment: &Assortment) -> bool {
        self.cardinality.is_none_or(|c| assortment.len() <= c)
            && self.include.iter().all(|&id| assortment.contains(id))
            && !self.exclude.iter().any(|&id| assortment.contains(id))
    }

    fn check_known(&self, catalog: &Catalog) -> Result<(), OptimizeError> {
        match self
            .include
            .iter()
            .chain(&self.exclude)
            .find(|id| !catalog.contains(**id))
        {
            Some(&id) => Err(OptimizeError::UnknownProduct(id)),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    RevenueOrdered,
    Dinkelbach,
    BruteForce,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizationResult {
    pub assortment: Assortment,
    pub revenue: f64,
    /// Choice probability of every offered product, plus id 0 for no purchase.
    pub probabilities: BTreeMap<ProductId, f64>,
    /// Linearized subproblems solved; 0 on the unconstrained path.
    pub iterations: usize,
    pub algorithm: Algorithm,
}

impl OptimizationResult {
    fn evaluate(
        catalog: &Catalog,
        params: &MnlParameters,
        assortment: Assortment,
        iterations: usize,
        algorithm: Algorithm,
    ) -> Result<Self, OptimizeError> {
        let revenue = expected_revenue(catalog, params, &assortment)?;
        let probabilities = choice_distribution(params, &assortment)?;
        Ok(OptimizationResult {
            assortment,
            revenue,
            probabilities,
            iterations,
            algorithm,
        })
    }
}

#[derive(Debug, Clone, Copy)]
struct Item {
    id: ProductId,
    price: f64,
    weight: f64,
}

/// Catalog products not in `exclude`, in catalog order.
fn candidates(
    catalog: &Catalog,
    params: &MnlParameters,
    exclude: &BTreeSet<ProductId>,
) -> Result<Vec<Item>, OptimizeError> {
    catalog
        .products()
        .iter()
        .filter(|p| !exclude.contains(&p.id))
        .map(|p| {
            Ok(Item {
                id: p.id,
                price: p.price,
                weight: params.weight(p.id)?,
            })
        })
        .collect()
}

fn ratio<'a>(v0: f64, items: impl IntoIterator<Item = &'a Item>) -> f64 {
    let (num, den) = items.into_iter().fold((0.0, v0), |(n, d), it| {
        (n + it.price * it.weight, d + it.weight)
    });
    num / den
}

fn ties(a: f64, b: f64) -> bool {
    (a - b).abs() <= EPS * a.abs().max(b.abs()).max(1.0)
}

/// Enumerates every feasible subset and returns a revenue maximizer. Ties go
/// to the smaller set, then to the lexicographically smaller id list.
pub fn brute_force_optimal(
    catalog: &Catalog,
    params: &MnlParameters,
    constraints: &ConstraintSet,
) -> Result<OptimizationResult, OptimizeError> {
    constraints.check_known(catalog)?;
    let mut items = candidates(catalog, params, &constraints.exclude)?;
    if items.len() > ORACLE_MAX_PRODUCTS {
        return Err(OptimizeError::OracleTooLarge(items.len()));
    }
    items.sort_by_key(|it| it.id);
    let n = items.len();
    let forced_mask: u32 = items
        .iter()
        .enumerate()
        .filter(|(_, it)| constraints.include.contains(&it.id))
        .fold(0, |m, (i, _)| m | (1 << i));
    let limit = constraints.cardinality.unwrap_or(n);
    if forced_mask.count_ones() as usize > limit {
        return Err(OptimizeError::Infeasible(
            "too many required products".into(),
        ));
    }

    let members = |mask: u32| (0..n).filter(move |i| mask & (1 << i) != 0);
    let mut best: Option<(u32, f64)> = None;
    for mask in 0u32..(1u32 << n) {
        if mask & forced_mask != forced_mask || mask.count_ones() as usize > limit {
            continue;
        }
        let r = ratio(params.v0(), members(mask).map(|i| &items[i]));
        let better = match best {
            None => true,
            Some((bm, br)) => {
                if ties(r, br) {
                    match mask.count_ones().cmp(&bm.count_ones()) {
                        Ordering::Less => true,
                        Ordering::Greater => false,
                        Ordering::Equal => members(mask).lt(members(bm)),
                    }
                } else {
                    r > br
                }
            }
        };
        if better {
            best = Some((mask, r));
        }
    }
    let (mask, _) = best.ok_or(OptimizeError::EmptyUniverse)?;
    let assortment = members(mask).map(|i| items[i].id).collect();
    OptimizationResult::evaluate(catalog, params, assortment, 0, Algorithm::BruteForce)
}

fn by_price_desc(a: &Item, b: &Item) -> Ordering {
    b.price.total_cmp(&a.price).then(a.id.cmp(&b.id))
}

/// Best price-ordered prefix of the non-excluded products.
pub fn optimize_unconstrained(
    catalog: &Catalog,
    params: &MnlParameters,
    exclude: &BTreeSet<ProductId>,
) -> Result<OptimizationResult, OptimizeError> {
    if let Some(&id) = exclude.iter().find(|id| !catalog.contains(**id)) {
        return Err(OptimizeError::UnknownProduct(id));
    }
    let mut items = candidates(catalog, params, exclude)?;
    if items.is_empty() {
        return Err(OptimizeError::EmptyUniverse);
    }
    items.sort_by(by_price_desc);

    let (mut num, mut den) = (0.0, params.v0());
    let (mut best_len, mut best_rev) = (0, 0.0);
    for (i, it) in items.iter().enumerate() {
        num += it.price * it.weight;
        den += it.weight;
        let r = num / den;
        if best_len == 0 || (r > best_rev && !ties(r, best_rev)) {
            best_len = i + 1;
            best_rev = r;
        }
    }
    let assortment = items[..best_len].iter().map(|it| it.id).collect();
    OptimizationResult::evaluate(catalog, params, assortment, 0, Algorithm::RevenueOrdered)
}

/// Exact optimum over the feasible family described by `constraints`.
pub fn optimize_constrained(
    catalog: &Catalog,
    params: &MnlParameters,
    constraints: &ConstraintSet,
) -> Result<OptimizationResult, OptimizeError> {
    optimize_constrained_with_trace(catalog, params, constraints).map(|(r, _)| r)
}

/// [`optimize_constrained`] that also returns the sequence of revenue levels
/// `λ` visited, starting from 0.
pub fn optimize_constrained_with_trace(
    catalog: &Catalog,
    params: &MnlParameters,
    constraints: &ConstraintSet,
) -> Result<(OptimizationResult, Vec<f64>), OptimizeError> {
    constraints.check_known(catalog)?;
    let items = candidates(catalog, params, &constraints.exclude)?;
    if items.is_empty() {
        return Err(OptimizeError::EmptyUniverse);
    }
    let (forced, free): (Vec<Item>, Vec<Item>) = items
        .into_iter()
        .partition(|it| constraints.include.contains(&it.id));
    let slots = match constraints.cardinality {
        Some(c) => c
            .checked_sub(forced.len())
            .ok_or_else(|| OptimizeError::Infeasible("too many required products".into()))?,
        None => free.len(),
    };

    let v0 = params.v0();
    let mut lambda = 0.0;
    let mut trace = vec![lambda];
    let mut best: Option<(Vec<ProductId>, f64)> = None;
    let mut scored: Vec<(f64, &Item)> = Vec::with_capacity(free.len());
    let mut iterations = 0;
    while iterations < MAX_DINKELBACH_ITERS {
        iterations += 1;
        scored.clear();
        scored.extend(
            free.iter()
                .map(|it| ((it.price - lambda) * it.weight, it))
                .filter(|(score, _)| *score > 0.0),
        );
        scored.sort_unstable_by(|a, b| b.0.total_cmp(&a.0).then(a.1.id.cmp(&b.1.id)));
        scored.truncate(slots);

        let chosen = forced.iter().chain(scored.iter().map(|(_, it)| *it));
        let r = ratio(v0, chosen.clone());
        if best.as_ref().is_none_or(|(_, br)| r > *br) {
            best = Some((chosen.map(|it| it.id).collect(), r));
        }
        if r - lambda <= EPS * lambda.abs().max(1.0) {
            break;
        }
        lambda = r;
        trace.push(lambda);
    }

    let (ids, _) = best.expect("at least one iteration runs");
    let assortment = ids.into_iter().collect();
    let result = OptimizationResult::evaluate(
        catalog,
        params,
        assortment,
        iterations,
        Algorithm::Dinkelbach,
    )?;
    Ok((result, trace))
}

/// Expected revenue when particular products are forced into the
/// assortment. Same solver as [`optimize_constrained`]; kept separate so the
/// caller can phrase the answer around the revenue figure.
pub fn whatif_revenue(
    catalog: &Catalog,
    params: &MnlParameters,
    constraints: &ConstraintSet,
) -> Result<OptimizationResult, OptimizeError> {
    optimize_constrained(catalog, params, constraints)
}
