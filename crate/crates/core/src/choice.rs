//! Products, catalogs and the multinomial logit (MNL) choice model.
//!
//! Under MNL a customer offered assortment `S` picks product `k ∈ S` with
//! probability `v_k / (v_0 + Σ_{j∈S} v_j)` and walks away without buying with
//! probability `v_0 / (v_0 + Σ_{j∈S} v_j)`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Identifier of a product within a catalog. `0` is reserved for the
/// no-purchase option.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ProductId(pub u64);

impl ProductId {
    pub const NO_PURCHASE: ProductId = ProductId(0);

    pub fn is_no_purchase(self) -> bool {
        self.0 == 0
    }
}

impl fmt::Display for ProductId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

impl FromStr for ProductId {
    type Err = std::num::ParseIntError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.trim().parse().map(ProductId)
    }
}

impl From<u64> for ProductId {
    fn from(id: u64) -> Self {
        ProductId(id)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ChoiceError {
    #[error("product {id}: {reason}")]
    InvalidProduct { id: ProductId, reason: String },
    #[error("duplicate product id {0}")]
    DuplicateProduct(ProductId),
    #[error("utility for {id} must lie in (0, 1], got {value}")]
    InvalidUtility { id: ProductId, value: f64 },
    #[error("parameter mismatch: {0}")]
    ParameterMismatch(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Product {
    pub id: ProductId,
    pub name: String,
    pub price: f64,
}

impl Product {
    pub fn new(id: impl Into<ProductId>, name: impl Into<String>, price: f64) -> Self {
        Product {
            id: id.into(),
            name: name.into(),
            price,
        }
    }
}

/// The product universe of one dataset.
#[derive(Debug, Clone)]
pub struct Catalog {
    dataset_id: String,
    products: Vec<Product>,
    index: HashMap<ProductId, usize>,
}

impl Catalog {
    /// Builds a catalog, rejecting non-positive ids, non-positive or
    /// non-finite prices and duplicate ids.
    pub fn new(dataset_id: impl Into<String>, products: Vec<Product>) -> Result<Self, ChoiceError> {
        let mut index = HashMap::with_capacity(products.len());
        for (pos, p) in products.iter().enumerate() {
            if p.id.is_no_purchase() {
                return Err(ChoiceError::InvalidProduct {
                    id: p.id,
                    reason: "id 0 is reserved for the no-purchase option".into(),
                });
            }
            if !(p.price.is_finite() && p.price > 0.0) {
                return Err(ChoiceError::InvalidProduct {
                    id: p.id,
                    reason: format!("price must be positive, got {}", p.price),
                });
            }
            if index.insert(p.id, pos).is_some() {
                return Err(ChoiceError::DuplicateProduct(p.id));
            }
        }
        Ok(Catalog {
            dataset_id: dataset_id.into(),
            products,
            index,
        })
    }

    pub fn dataset_id(&self) -> &str {
        &self.dataset_id
    }

    pub fn products(&self) -> &[Product] {
        &self.products
    }

    pub fn len(&self) -> usize {
        self.products.len()
    }

    pub fn is_empty(&self) -> bool {
        self.products.is_empty()
    }

    pub fn get(&self, id: ProductId) -> Option<&Product> {
        self.index.get(&id).map(|&i| &self.products[i])
    }

    pub fn contains(&self, id: ProductId) -> bool {
        self.index.contains_key(&id)
    }

    pub fn ids(&self) -> impl Iterator<Item = ProductId> + '_ {
        self.products.iter().map(|p| p.id)
    }

    /// The sub-catalog of products that `params` assigns a utility to,
    /// keeping catalog order.
    pub fn restrict_to(&self, params: &MnlParameters) -> Catalog {
        let products: Vec<Product> = self
            .products
            .iter()
            .filter(|p| params.utility(p.id).is_some())
            .cloned()
            .collect();
        let index = products
            .iter()
            .enumerate()
            .map(|(i, p)| (p.id, i))
            .collect();
        Catalog {
            dataset_id: self.dataset_id.clone(),
            products,
            index,
        }
    }
}

/// MNL preference weights for one (dataset, model) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MnlParameters {
    pub dataset_id: String,
    pub model_id: String,
    v0: f64,
    utilities: BTreeMap<ProductId, f64>,
}

fn check_weight(id: ProductId, value: f64) -> Result<(), ChoiceError> {
    if value.is_finite() && value > 0.0 && value <= 1.0 {
        Ok(())
    } else {
        Err(ChoiceError::InvalidUtility { id, value })
    }
}

impl MnlParameters {
    pub fn new(
        dataset_id: impl Into<String>,
        model_id: impl Into<String>,
        v0: f64,
        utilities: BTreeMap<ProductId, f64>,
    ) -> Result<Self, ChoiceError> {
        check_weight(ProductId::NO_PURCHASE, v0)?;
        for (&id, &v) in &utilities {
            if id.is_no_purchase() {
                return Err(ChoiceError::InvalidArgument(
                    "utility map must not contain the no-purchase id 0".into(),
                ));
            }
            check_weight(id, v)?;
        }
        Ok(MnlParameters {
            dataset_id: dataset_id.into(),
            model_id: model_id.into(),
            v0,
            utilities,
        })
    }

    pub fn v0(&self) -> f64 {
        self.v0
    }

    pub fn utilities(&self) -> &BTreeMap<ProductId, f64> {
        &self.utilities
    }

    pub fn utility(&self, id: ProductId) -> Option<f64> {
        if id.is_no_purchase() {
            Some(self.v0)
        } else {
            self.utilities.get(&id).copied()
        }
    }

    /// Weight of `id`, or a parameter-mismatch error when it has none.
    pub fn weight(&self, id: ProductId) -> Result<f64, ChoiceError> {
        self.utility(id)
            .ok_or_else(|| ChoiceError::ParameterMismatch(format!("no utility for product {id}")))
    }

    /// Checks that the utilities cover exactly the catalog's products.
    pub fn validate_against(&self, catalog: &Catalog) -> Result<(), ChoiceError> {
        if let Some(missing) = catalog.ids().find(|id| !self.utilities.contains_key(id)) {
            return Err(ChoiceError::ParameterMismatch(format!(
                "catalog product {missing} has no utility"
            )));
        }
        if let Some(extra) = self.utilities.keys().find(|id| !catalog.contains(**id)) {
            return Err(ChoiceError::ParameterMismatch(format!(
                "utility given for product {extra} which is not in the catalog"
            )));
        }
        Ok(())
    }
}

/// An offered subset `S` of a catalog.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Assortment(BTreeSet<ProductId>);

impl Assortment {
    pub fn new() -> Self {
        Assortment::default()
    }

    pub fn ids(&self) -> &BTreeSet<ProductId> {
        &self.0
    }

    pub fn contains(&self, id: ProductId) -> bool {
        self.0.contains(&id)
    }

    pub fn insert(&mut self, id: ProductId) -> bool {
        self.0.insert(id)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = ProductId> + '_ {
        self.0.iter().copied()
    }
}

impl FromIterator<ProductId> for Assortment {
    fn from_iter<I: IntoIterator<Item = ProductId>>(iter: I) -> Self {
        Assortment(iter.into_iter().collect())
    }
}

impl FromIterator<u64> for Assortment {
    fn from_iter<I: IntoIterator<Item = u64>>(iter: I) -> Self {
        Assortment(iter.into_iter().map(ProductId).collect())
    }
}

/// Sum of the no-purchase weight and the weights of every product in `S`.
fn denominator(params: &MnlParameters, assortment: &Assortment) -> Result<f64, ChoiceError> {
    assortment
        .iter()
        .try_fold(params.v0, |acc, id| Ok(acc + params.weight(id)?))
}

/// `P(k | S)`; `k = 0` asks for the no-purchase probability.
pub fn choice_probability(
    params: &MnlParameters,
    assortment: &Assortment,
    k: ProductId,
) -> Result<f64, ChoiceError> {
    let denom = denominator(params, assortment)?;
    if !k.is_no_purchase() && !assortment.contains(k) {
        return Err(ChoiceError::InvalidArgument(format!(
            "product {k} is not in the offered assortment"
        )));
    }
    Ok(params.weight(k)? / denom)
}

/// Choice probabilities of every member of `S` plus the no-purchase option
/// (keyed by id 0).
pub fn choice_distribution(
    params: &MnlParameters,
    assortment: &Assortment,
) -> Result<BTreeMap<ProductId, f64>, ChoiceError> {
    let denom = denominator(params, assortment)?;
    let mut out = BTreeMap::new();
    out.insert(ProductId::NO_PURCHASE, params.v0 / denom);
    for id in assortment.iter() {
        out.insert(id, params.weight(id)? / denom);
    }
    Ok(out)
}

/// `R(S) = Σ_{k∈S} p_k · P(k | S)`.
pub fn expected_revenue(
    catalog: &Catalog,
    params: &MnlParameters,
    assortment: &Assortment,
) -> Result<f64, ChoiceError> {
    let mut num = 0.0;
    let mut denom = params.v0;
    for id in assortment.iter() {
        let product = catalog.get(id).ok_or_else(|| {
            ChoiceError::ParameterMismatch(format!(
                "product {id} is not in catalog {}",
                catalog.dataset_id()
            ))
        })?;
        let v = params.weight(id)?;
        num += product.price * v;
        denom += v;
    }
    Ok(num / denom)
}
