//! Brute-force ground truth on small instances.
//!
//! Everything here enumerates the full joint state space. States are indexed
//! in base `L` with site 0 as the least significant digit.

use rand::Rng;
use serde::Serialize;

use crate::error::{CrfError, Result};
use crate::model::{GradientBundle, GridCrfModel, Labeling, UnaryField};

/// Largest joint state space the oracle will enumerate.
pub const MAX_STATES: u64 = 1 << 20;

fn state_count(sites: usize, labels: usize) -> Result<usize> {
    let states = (labels as f64).powi(sites as i32);
    if states > MAX_STATES as f64 {
        return Err(CrfError::TooLarge {
            states,
            limit: MAX_STATES,
        });
    }
    Ok(labels.pow(sites as u32))
}

fn decode_state(mut index: usize, sites: usize, labels: usize) -> Vec<usize> {
    let mut states = vec![0; sites];
    for s in states.iter_mut() {
        *s = index % labels;
        index /= labels;
    }
    states
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// The exact posterior over all labelings of one instance.
#[derive(Debug, Clone)]
pub struct ExactDistribution {
    sites: usize,
    labels: usize,
    energies: Vec<f64>,
    probabilities: Vec<f64>,
    log_z: f64,
}

impl ExactDistribution {
    pub fn new(model: &GridCrfModel, unaries: &UnaryField) -> Result<Self> {
        model.check_unaries(unaries)?;
        let sites = unaries.geometry().sites();
        let labels = model.labels().count();
        let count = state_count(sites, labels)?;
        let mut energies = Vec::with_capacity(count);
        for index in 0..count {
            let y = Labeling::new(decode_state(index, sites, labels), model.labels())?;
            energies.push(model.energy(unaries, &y)?);
        }
        let log_z = log_sum_exp(energies.iter().map(|e| -e));
        let probabilities = energies.iter().map(|e| (-e - log_z).exp()).collect();
        Ok(ExactDistribution {
            sites,
            labels,
            energies,
            probabilities,
            log_z,
        })
    }

    pub fn len(&self) -> usize {
        self.probabilities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probabilities.is_empty()
    }

    pub fn log_z(&self) -> f64 {
        self.log_z
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probabilities
    }

    pub fn energy(&self, index: usize) -> f64 {
        self.energies[index]
    }

    pub fn state(&self, index: usize) -> Labeling {
        Labeling::from_states_unchecked(decode_state(index, self.sites, self.labels))
    }

    pub fn index_of(&self, y: &Labeling) -> usize {
        y.states().iter().rev().fold(0, |acc, &s| acc * self.labels + s)
    }

    /// Exact draw by inverting the cumulative distribution.
    pub fn sample(&self, rng: &mut impl Rng) -> Labeling {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (i, p) in self.probabilities.iter().enumerate() {
            acc += p;
            if u < acc {
                return self.state(i);
            }
        }
        self.state(self.probabilities.len() - 1)
    }
}

/// Oracle outputs for one instance.
#[derive(Debug, Clone, Serialize)]
pub struct ExactSummary {
    pub log_z: f64,
    /// `N x L`, row-major.
    pub marginals: Vec<f64>,
    pub pairwise_marginals: Vec<EdgeMarginal>,
    pub log_likelihood: Option<f64>,
    pub labels: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct EdgeMarginal {
    pub class: usize,
    pub base: usize,
    pub shifted: usize,
    /// `L x L`, entry `(a, b)` at `a * L + b`.
    pub table: Vec<f64>,
}

impl ExactSummary {
    pub fn marginal_row(&self, site: usize) -> &[f64] {
        &self.marginals[site * self.labels..(site + 1) * self.labels]
    }
}

/// Partition function, site marginals and edge marginals by full enumeration.
pub fn enumerate(model: &GridCrfModel, unaries: &UnaryField) -> Result<ExactSummary> {
    let dist = ExactDistribution::new(model, unaries)?;
    let geometry = unaries.geometry();
    let l = model.labels().count();
    let mut marginals = vec![0.0; geometry.sites() * l];
    let mut edges = Vec::new();
    model.for_each_edge(geometry, |class, base, shifted| {
        edges.push(EdgeMarginal {
            class,
            base,
            shifted,
            table: vec![0.0; l * l],
        })
    });
    for (index, &p) in dist.probabilities().iter().enumerate() {
        let y = dist.state(index);
        for n in 0..geometry.sites() {
            marginals[n * l + y.get(n)] += p;
        }
        for edge in edges.iter_mut() {
            edge.table[y.get(edge.base) * l + y.get(edge.shifted)] += p;
        }
    }
    Ok(ExactSummary {
        log_z: dist.log_z(),
        marginals,
        pairwise_marginals: edges,
        log_likelihood: None,
        labels: l,
    })
}

/// `p(y_site | y_rest)` from full-joint energies of the `L` completions.
pub fn exact_conditional(
    model: &GridCrfModel,
    unaries: &UnaryField,
    y: &Labeling,
    site: usize,
) -> Result<Vec<f64>> {
    model.check_unaries(unaries)?;
    state_count(unaries.geometry().sites(), model.labels().count())?;
    let labels = model.labels();
    let energies = (0..labels.count())
        .map(|l| model.energy(unaries, &y.with_site(site, l, labels)?))
        .collect::<Result<Vec<f64>>>()?;
    let log_norm = log_sum_exp(energies.iter().map(|e| -e));
    Ok(energies.iter().map(|e| (-e - log_norm).exp()).collect())
}

/// Gradient of `log p(y_data)` with respect to every potential entry:
/// `-[data indicator] + exact marginal of that configuration`.
pub fn exact_gradient(
    model: &GridCrfModel,
    unaries: &UnaryField,
    y_data: &Labeling,
) -> Result<GradientBundle> {
    let geometry = unaries.geometry();
    model.check_labeling(geometry, y_data)?;
    let summary = enumerate(model, unaries)?;
    let l = model.labels().count();
    let mut grad = GradientBundle::zeros(geometry.sites(), l, model.classes().len());
    for (g, m) in grad.unary.iter_mut().zip(&summary.marginals) {
        *g = *m;
    }
    for n in 0..geometry.sites() {
        grad.unary[n * l + y_data.get(n)] -= 1.0;
    }
    for edge in &summary.pairwise_marginals {
        let table = &mut grad.tables[edge.class];
        for (g, m) in table.iter_mut().zip(&edge.table) {
            *g += m;
        }
        table[y_data.get(edge.base) * l + y_data.get(edge.shifted)] -= 1.0;
    }
    Ok(grad)
}

/// `-E(y_data) - log Z`.
pub fn exact_loglik(model: &GridCrfModel, unaries: &UnaryField, y_data: &Labeling) -> Result<f64> {
    let dist = ExactDistribution::new(model, unaries)?;
    Ok(-model.energy(unaries, y_data)? - dist.log_z())
}

/// Summed log-likelihood of several labelings that share one set of unaries.
pub fn exact_loglik_total(
    model: &GridCrfModel,
    unaries: &UnaryField,
    data: &[Labeling],
) -> Result<f64> {
    let dist = ExactDistribution::new(model, unaries)?;
    let mut total = 0.0;
    for y in data {
        total += -model.energy(unaries, y)? - dist.log_z();
    }
    Ok(total)
}

/// Full transition matrix of one sweep that updates the given phases in
/// order, each site drawn from its exact conditional given the state at the
/// start of its phase. Row `s` is the distribution after one sweep from `s`.
pub fn sweep_transition_matrix(
    model: &GridCrfModel,
    unaries: &UnaryField,
    phases: &[Vec<usize>],
) -> Result<Vec<Vec<f64>>> {
    let sites = unaries.geometry().sites();
    let l = model.labels().count();
    let count = state_count(sites, l)?;
    if count > 1 << 12 {
        return Err(CrfError::TooLarge {
            states: count as f64,
            limit: 1 << 12,
        });
    }
    let identity: Vec<Vec<f64>> = (0..count)
        .map(|i| (0..count).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    let mut total = identity;
    for phase in phases {
        let mut kernel = vec![vec![0.0; count]; count];
        for (from, row) in kernel.iter_mut().enumerate() {
            let y = Labeling::from_states_unchecked(decode_state(from, sites, l));
            let conditionals = phase
                .iter()
                .map(|&site| exact_conditional(model, unaries, &y, site))
                .collect::<Result<Vec<_>>>()?;
            // all label assignments to the phase's sites
            let combos = l.pow(phase.len() as u32);
            for combo in 0..combos {
                let labels = decode_state(combo, phase.len(), l);
                let mut to = y.states().to_vec();
                let mut p = 1.0;
                for ((&site, &label), cond) in phase.iter().zip(&labels).zip(&conditionals) {
                    to[site] = label;
                    p *= cond[label];
                }
                let to_index = to.iter().rev().fold(0, |acc, &s| acc * l + s);
                row[to_index] += p;
            }
        }
        total = mat_mul(&total, &kernel);
    }
    Ok(total)
}

fn mat_mul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = b[0].len();
    a.iter()
        .map(|row| {
            let mut out = vec![0.0; n];
            for (k, &v) in row.iter().enumerate() {
                if v != 0.0 {
                    for (o, &bv) in out.iter_mut().zip(&b[k]) {
                        *o += v * bv;
                    }
                }
            }
            out
        })
        .collect()
}
