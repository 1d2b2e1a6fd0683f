//! Estimating MNL parameters from data.
//!
//! Purchase-only data (no record of what was on the shelf) supports the
//! frequency estimator: every product is assumed to have been offered, so
//! weights are proportional to units sold and the no-purchase weight is fixed
//! at 1 by convention. When offer sets are known, [`estimate_mle`] maximizes
//! the exact MNL log-likelihood.

use std::collections::{BTreeMap, HashMap};

use chrono::NaiveDate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::choice::{Assortment, Catalog, ChoiceError, MnlParameters, ProductId};

/// Weight given to catalog products that never sold.
pub const ZERO_COUNT_FLOOR: f64 = 1e-6;

/// Log-utilities are kept inside `[-LOG_UTILITY_BOUND, LOG_UTILITY_BOUND]`
/// so that separable data cannot push weights to 0 or infinity.
const LOG_UTILITY_BOUND: f64 = 40.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstimationError {
    #[error("no usable observations")]
    EmptyData,
    #[error("product {0} is never offered, its utility is not identifiable")]
    Unidentifiable(ProductId),
    #[error("invalid observation #{index}: {reason}")]
    InvalidObservation { index: usize, reason: String },
    #[error(transparent)]
    Choice(#[from] ChoiceError),
}

/// One purchase line of a Ta-Feng style transaction log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransactionRecord {
    pub date: NaiveDate,
    pub user_id: String,
    pub product_id: ProductId,
    pub quantity: u32,
}

/// A customer facing `offered` who picked `chosen` (id 0 = walked away).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OfferSetObservation {
    pub offered: Assortment,
    pub chosen: ProductId,
}

/// Frequency estimator: `v_i = units_i / max_j units_j`, `v_0 = 1`.
///
/// Rows naming products outside the catalog or with zero quantity are
/// ignored; products that never sold get [`ZERO_COUNT_FLOOR`].
pub fn estimate_frequency(
    catalog: &Catalog,
    transactions: &[TransactionRecord],
) -> Result<MnlParameters, EstimationError> {
    let mut counts: HashMap<ProductId, u64> = HashMap::new();
    for t in transactions {
        if t.quantity > 0 && catalog.contains(t.product_id) {
            *counts.entry(t.product_id).or_default() += u64::from(t.quantity);
        }
    }
    let max = counts
        .values()
        .copied()
        .max()
        .ok_or(EstimationError::EmptyData)?;
    let utilities = catalog
        .ids()
        .map(|id| {
            let v = match counts.get(&id) {
                Some(&c) => c as f64 / max as f64,
                None => ZERO_COUNT_FLOOR,
            };
            (id, v)
        })
        .collect();
    Ok(MnlParameters::new(
        catalog.dataset_id(),
        "mnl",
        1.0,
        utilities,
    )?)
}

/// Draws one choice per offer set from the MNL distribution of `params`.
/// The same seed always yields the same observations.
pub fn simulate_choices(
    catalog: &Catalog,
    params: &MnlParameters,
    offer_sets: &[Assortment],
    seed: u64,
) -> Result<Vec<OfferSetObservation>, EstimationError> {
    params.validate_against(catalog)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    offer_sets
        .iter()
        .map(|offered| {
            let weights = offered
                .iter()
                .map(|id| Ok((id, params.weight(id)?)))
                .collect::<Result<Vec<_>, ChoiceError>>()?;
            let total = params.v0() + weights.iter().map(|(_, w)| w).sum::<f64>();
            let mut draw = rng.random::<f64>() * total - params.v0();
            let mut chosen = ProductId::NO_PURCHASE;
            if draw >= 0.0 {
                // Floating point leftovers at the top end fall to the last product.
                chosen = weights.last().map_or(ProductId::NO_PURCHASE, |(id, _)| *id);
                for &(id, w) in &weights {
                    if draw < w {
                        chosen = id;
                        break;
                    }
                    draw -= w;
                }
            }
            Ok(OfferSetObservation {
                offered: offered.clone(),
                chosen,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MleOptions {
    pub max_iters: usize,
    /// Stop once the largest component of the per-observation gradient of
    /// the log-likelihood falls below this.
    pub tol: f64,
}

impl Default for MleOptions {
    fn default() -> Self {
        MleOptions {
            max_iters: 500,
            tol: 1e-7,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MleFit {
    pub params: MnlParameters,
    pub converged: bool,
    /// Some utility has no finite maximizer (a product never or always
    /// chosen when offered, or no observed no-purchase); the returned values
    /// sit at the search bound in that direction.
    pub boundary: bool,
    pub iterations: usize,
    /// Log-likelihood at the start point and after every accepted step.
    pub log_likelihood: Vec<f64>,
}

/// Observations flattened onto dense product indices.
struct Design {
    offsets: Vec<usize>,
    members: Vec<u32>,
    chosen: Vec<Option<u32>>,
    chosen_count: Vec<f64>,
}

impl Design {
    fn observations(&self) -> usize {
        self.chosen.len()
    }

    fn offered(&self, obs: usize) -> &[u32] {
        &self.members[self.offsets[obs]..self.offsets[obs + 1]]
    }

    /// Total log-likelihood at log-utilities `u`, with `v_0 = 1`.
    fn log_likelihood(&self, u: &[f64]) -> f64 {
        let w: Vec<f64> = u.iter().map(|x| x.exp()).collect();
        (0..self.observations())
            .map(|o| {
                let denom = 1.0 + self.offered(o).iter().map(|&j| w[j as usize]).sum::<f64>();
                self.chosen[o].map_or(0.0, |c| u[c as usize]) - denom.ln()
            })
            .sum()
    }

    /// Gradient and Hessian diagonal of the total log-likelihood.
    fn derivatives(&self, u: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let w: Vec<f64> = u.iter().map(|x| x.exp()).collect();
        let mut grad = self.chosen_count.clone();
        let mut curv = vec![0.0; u.len()];
        for o in 0..self.observations() {
            let offered = self.offered(o);
            let denom = 1.0 + offered.iter().map(|&j| w[j as usize]).sum::<f64>();
            for &j in offered {
                let p = w[j as usize] / denom;
                grad[j as usize] -= p;
                curv[j as usize] += p * (1.0 - p);
            }
        }
        (grad, curv)
    }
}

fn build_design(
    catalog: &Catalog,
    observations: &[OfferSetObservation],
) -> Result<(Design, Vec<usize>, usize), EstimationError> {
    let index: HashMap<ProductId, u32> = catalog
        .ids()
        .enumerate()
        .map(|(i, id)| (id, i as u32))
        .collect();
    let n = catalog.len();
    let mut offsets = Vec::with_capacity(observations.len() + 1);
    offsets.push(0);
    let mut members = Vec::new();
    let mut chosen = Vec::with_capacity(observations.len());
    let mut chosen_count = vec![0.0; n];
    let mut offered_count = vec![0usize; n];
    let mut walkaways = 0;
    for (i, obs) in observations.iter().enumerate() {
        for id in obs.offered.iter() {
            let j = *index
                .get(&id)
                .ok_or_else(|| EstimationError::InvalidObservation {
                    index: i,
                    reason: format!("offered product {id} is not in the catalog"),
                })?;
            members.push(j);
            offered_count[j as usize] += 1;
        }
        offsets.push(members.len());
        if obs.chosen.is_no_purchase() {
            walkaways += 1;
            chosen.push(None);
        } else if obs.offered.contains(obs.chosen) {
            let j = index[&obs.chosen];
            chosen_count[j as usize] += 1.0;
            chosen.push(Some(j));
        } else {
            return Err(EstimationError::InvalidObservation {
                index: i,
                reason: format!("chosen product {} was not offered", obs.chosen),
            });
        }
    }
    let design = Design {
        offsets,
        members,
        chosen,
        chosen_count,
    };
    Ok((design, offered_count, walkaways))
}

/// Maximum-likelihood MNL estimate with `v_0` pinned to 1 before the final
/// rescale into `(0, 1]`.
///
/// Works on log-utilities starting from zero. Each step moves along the
/// gradient scaled by the inverse Hessian diagonal, starting at step 1 and
/// halving until the Armijo condition holds, so the log-likelihood never
/// decreases.
pub fn estimate_mle(
    catalog: &Catalog,
    observations: &[OfferSetObservation],
    options: MleOptions,
) -> Result<MleFit, EstimationError> {
    if observations.is_empty() || catalog.is_empty() {
        return Err(EstimationError::EmptyData);
    }
    let (design, offered_count, walkaways) = build_design(catalog, observations)?;
    let ids: Vec<ProductId> = catalog.ids().collect();
    if let Some(j) = offered_count.iter().position(|&c| c == 0) {
        return Err(EstimationError::Unidentifiable(ids[j]));
    }
    let boundary = walkaways == 0
        || design
            .chosen_count
            .iter()
            .zip(&offered_count)
            .any(|(&c, &o)| c == 0.0 || c as usize == o);

    let scale = 1.0 / design.observations() as f64;
    let mut u = vec![0.0; ids.len()];
    let mut ll = design.log_likelihood(&u);
    let mut trace = vec![ll];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < options.max_iters {
        let (grad, curv) = design.derivatives(&u);
        let gmax = grad.iter().fold(0.0f64, |m, g| m.max(g.abs())) * scale;
        if gmax < options.tol {
            converged = true;
            break;
        }
        iterations += 1;
        let dir: Vec<f64> = grad
            .iter()
            .zip(&curv)
            .map(|(g, h)| g / h.max(1e-12))
            .collect();
        let slope: f64 = grad.iter().zip(&dir).map(|(g, d)| g * d).sum();
        let mut step = 1.0;
        let mut accepted = false;
        while step > 1e-12 {
            let trial: Vec<f64> = u
                .iter()
                .zip(&dir)
                .map(|(x, d)| (x + step * d).clamp(-LOG_UTILITY_BOUND, LOG_UTILITY_BOUND))
                .collect();
            let trial_ll = design.log_likelihood(&trial);
            if trial_ll >= ll + 1e-4 * step * slope {
                accepted = trial_ll >= ll;
                if accepted {
                    u = trial;
                    ll = trial_ll;
                    trace.push(ll);
                }
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }

    let norm = u.iter().fold(0.0f64, |m, &x| m.max(x)).exp();
    let utilities: BTreeMap<ProductId, f64> = ids
        .iter()
        .zip(&u)
        .map(|(&id, &x)| (id, x.exp() / norm))
        .collect();
    let params = MnlParameters::new(catalog.dataset_id(), "mnl", 1.0 / norm, utilities)?;
    Ok(MleFit {
        params,
        converged,
        boundary,
        iterations,
        log_likelihood: trace,
    })
}
