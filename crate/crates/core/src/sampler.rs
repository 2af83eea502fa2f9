//! Gibbs sampling over the grid CRF.
//!
//! A sweep resamples every site once from its local conditional. Randomness
//! comes from counter-based streams keyed by `(chain seed, site, sweep)`, so a
//! chain is fully determined by its seed, the schedule and the model.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CrfError, Result};
use crate::model::{GridCrfModel, GridGeometry, Labeling, OffsetClass, UnaryField};
use crate::rng::{counter_uniform, derive_seed};

const INIT_STREAM_TAG: u64 = 0x1417;
const PARALLEL_CLASS_MIN: usize = 512;

/// A Markov chain over labelings of one grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChainState {
    labeling: Labeling,
    seed: u64,
    sweep_count: u64,
}

impl ChainState {
    pub fn new(labeling: Labeling, seed: u64) -> Self {
        ChainState {
            labeling,
            seed,
            sweep_count: 0,
        }
    }

    pub fn labeling(&self) -> &Labeling {
        &self.labeling
    }

    pub fn into_labeling(self) -> Labeling {
        self.labeling
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn sweep_count(&self) -> u64 {
        self.sweep_count
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    #[default]
    RasterSequential,
    ChromaticParallel,
}

/// Order in which a sweep visits sites.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepSchedule {
    kind: ScheduleKind,
    geometry: GridGeometry,
    classes: Vec<OffsetClass>,
    color_classes: Vec<Vec<usize>>,
}

impl SweepSchedule {
    pub fn raster(model: &GridCrfModel, geometry: GridGeometry) -> Self {
        SweepSchedule {
            kind: ScheduleKind::RasterSequential,
            geometry,
            classes: model.classes().to_vec(),
            color_classes: Vec::new(),
        }
    }

    /// Chromatic schedule from a greedy coloring of the conflict graph, sites
    /// visited in raster order and given the smallest free color.
    pub fn chromatic(model: &GridCrfModel, geometry: GridGeometry) -> Self {
        let n = geometry.sites();
        let mut color = vec![usize::MAX; n];
        let mut used: Vec<bool> = Vec::new();
        let mut count = 0;
        for site in 0..n {
            used.clear();
            used.resize(count + 1, false);
            for class in model.classes() {
                for (dx, dy) in [(class.dx, class.dy), (-class.dx, -class.dy)] {
                    if let Some(j) = geometry.shifted(site, dx, dy) {
                        if color[j] != usize::MAX {
                            used[color[j]] = true;
                        }
                    }
                }
            }
            let c = used.iter().position(|u| !u).unwrap_or(count);
            color[site] = c;
            count = count.max(c + 1);
        }
        let mut color_classes = vec![Vec::new(); count];
        for (site, &c) in color.iter().enumerate() {
            color_classes[c].push(site);
        }
        SweepSchedule {
            kind: ScheduleKind::ChromaticParallel,
            geometry,
            classes: model.classes().to_vec(),
            color_classes,
        }
    }

    /// Chromatic schedule from an explicit partition; rejects partitions that
    /// miss a site or put two connected sites in one class.
    pub fn from_partition(
        model: &GridCrfModel,
        geometry: GridGeometry,
        color_classes: Vec<Vec<usize>>,
    ) -> Result<Self> {
        let mut color = vec![usize::MAX; geometry.sites()];
        for (c, members) in color_classes.iter().enumerate() {
            for &site in members {
                if site >= geometry.sites() || color[site] != usize::MAX {
                    return Err(CrfError::contract(format!(
                        "site {site} missing from grid or listed twice in partition"
                    )));
                }
                color[site] = c;
            }
        }
        if color.contains(&usize::MAX) {
            return Err(CrfError::contract("partition does not cover every site"));
        }
        let mut conflict = None;
        model.for_each_edge(geometry, |_, i, j| {
            if conflict.is_none() && color[i] == color[j] {
                conflict = Some((i, j));
            }
        });
        if let Some((i, j)) = conflict {
            return Err(CrfError::contract(format!(
                "sites {i} and {j} share a factor but have the same color"
            )));
        }
        Ok(SweepSchedule {
            kind: ScheduleKind::ChromaticParallel,
            geometry,
            classes: model.classes().to_vec(),
            color_classes,
        })
    }

    pub fn build(kind: ScheduleKind, model: &GridCrfModel, geometry: GridGeometry) -> Self {
        match kind {
            ScheduleKind::RasterSequential => Self::raster(model, geometry),
            ScheduleKind::ChromaticParallel => Self::chromatic(model, geometry),
        }
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn color_classes(&self) -> &[Vec<usize>] {
        &self.color_classes
    }

    /// Groups of sites updated together, in sweep order. Sites within one
    /// group see the state left by the previous group.
    pub fn phases(&self) -> Vec<Vec<usize>> {
        match self.kind {
            ScheduleKind::RasterSequential => (0..self.geometry.sites()).map(|s| vec![s]).collect(),
            ScheduleKind::ChromaticParallel => self.color_classes.clone(),
        }
    }

    fn check_bound(&self, model: &GridCrfModel, geometry: GridGeometry) -> Result<()> {
        if self.geometry != geometry || self.classes != model.classes() {
            return Err(CrfError::contract(
                "sweep schedule was built for a different grid or offset set",
            ));
        }
        Ok(())
    }
}

/// In-place softmax of negated energies with max-subtraction.
fn boltzmann_in_place(energies: &mut [f64]) {
    let min = energies.iter().copied().fold(f64::INFINITY, f64::min);
    let mut total = 0.0;
    for e in energies.iter_mut() {
        *e = (min - *e).exp();
        total += *e;
    }
    for e in energies.iter_mut() {
        *e /= total;
    }
}

#[inline]
fn draw_index(probabilities: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (l, p) in probabilities.iter().enumerate() {
        acc += p;
        if u < acc {
            return l;
        }
    }
    // rounding left u above the final cumulative sum
    probabilities.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// `p(y_site = l | rest)` from the factors touching `site`.
pub fn local_conditional(
    model: &GridCrfModel,
    unaries: &UnaryField,
    y: &Labeling,
    site: usize,
) -> Result<Vec<f64>> {
    model.check_unaries(unaries)?;
    model.check_labeling(unaries.geometry(), y)?;
    if site >= unaries.geometry().sites() {
        return Err(CrfError::contract(format!("site {site} outside grid")));
    }
    let mut p = vec![0.0; model.labels().count()];
    model.local_energies_into(unaries, y, site, &mut p);
    boltzmann_in_place(&mut p);
    Ok(p)
}

#[inline]
fn resample_site(
    model: &GridCrfModel,
    unaries: &UnaryField,
    y: &Labeling,
    site: usize,
    seed: u64,
    sweep: u64,
    scratch: &mut [f64],
) -> usize {
    model.local_energies_into(unaries, y, site, scratch);
    boltzmann_in_place(scratch);
    draw_index(scratch, counter_uniform(seed, site as u64, sweep))
}

/// One full sweep: every site resampled once from its local conditional.
pub fn gibbs_sweep(
    chain: &mut ChainState,
    model: &GridCrfModel,
    unaries: &UnaryField,
    schedule: &SweepSchedule,
) -> Result<()> {
    model.check_unaries(unaries)?;
    let geometry = unaries.geometry();
    model.check_labeling(geometry, &chain.labeling)?;
    schedule.check_bound(model, geometry)?;
    let l = model.labels().count();
    let (seed, sweep) = (chain.seed, chain.sweep_count);
    match schedule.kind {
        ScheduleKind::RasterSequential => {
            let mut scratch = vec![0.0; l];
            for site in 0..geometry.sites() {
                let new = resample_site(model, unaries, &chain.labeling, site, seed, sweep, &mut scratch);
                chain.labeling.set(site, new);
            }
        }
        ScheduleKind::ChromaticParallel => {
            for members in &schedule.color_classes {
                let y = &chain.labeling;
                let updates: Vec<usize> = if members.len() >= PARALLEL_CLASS_MIN {
                    members
                        .par_iter()
                        .with_min_len(128)
                        .map_init(
                            || vec![0.0; l],
                            |scratch, &site| resample_site(model, unaries, y, site, seed, sweep, scratch),
                        )
                        .collect()
                } else {
                    let mut scratch = vec![0.0; l];
                    members
                        .iter()
                        .map(|&site| resample_site(model, unaries, y, site, seed, sweep, &mut scratch))
                        .collect()
                };
                for (&site, new) in members.iter().zip(updates) {
                    chain.labeling.set(site, new);
                }
            }
        }
    }
    chain.sweep_count += 1;
    Ok(())
}

/// Independent per-site draw from `exp(-unary)`, i.e. the unary-only model.
pub fn init_from_unary_marginals(unaries: &UnaryField, seed: u64) -> Labeling {
    let stream_seed = derive_seed(seed, INIT_STREAM_TAG);
    let mut scratch = vec![0.0; unaries.labels()];
    let states = (0..unaries.geometry().sites())
        .map(|site| {
            scratch.copy_from_slice(unaries.row(site));
            boltzmann_in_place(&mut scratch);
            draw_index(&scratch, counter_uniform(stream_seed, site as u64, 0))
        })
        .collect();
    // every drawn index is below `labels` by construction
    Labeling::from_states_unchecked(states)
}

/// Per-site label counts over recorded samples.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MarginalEstimate {
    labels: usize,
    counts: Vec<u64>,
    samples_used: u64,
}

impl MarginalEstimate {
    pub fn new(sites: usize, labels: usize) -> Self {
        MarginalEstimate {
            labels,
            counts: vec![0; sites * labels],
            samples_used: 0,
        }
    }

    pub fn from_counts(labels: usize, counts: Vec<u64>, samples_used: u64) -> Result<Self> {
        if labels == 0 || !counts.len().is_multiple_of(labels) {
            return Err(CrfError::contract("count table is not a whole number of rows"));
        }
        for row in counts.chunks(labels) {
            if row.iter().sum::<u64>() != samples_used {
                return Err(CrfError::contract("count row does not sum to samples_used"));
            }
        }
        Ok(MarginalEstimate {
            labels,
            counts,
            samples_used,
        })
    }

    pub fn record(&mut self, y: &Labeling) {
        for (n, &s) in y.states().iter().enumerate() {
            self.counts[n * self.labels + s] += 1;
        }
        self.samples_used += 1;
    }

    pub fn sites(&self) -> usize {
        self.counts.len() / self.labels
    }

    pub fn labels(&self) -> usize {
        self.labels
    }

    pub fn samples_used(&self) -> u64 {
        self.samples_used
    }

    pub fn counts_row(&self, site: usize) -> &[u64] {
        &self.counts[site * self.labels..(site + 1) * self.labels]
    }

    pub fn frequencies(&self, site: usize) -> Vec<f64> {
        let total = self.samples_used.max(1) as f64;
        self.counts_row(site).iter().map(|&c| c as f64 / total).collect()
    }
}

/// Runs `burn_in` sweeps, then records `samples` labelings, one every
/// `thinning` sweeps.
pub fn estimate_marginals(
    chain: &mut ChainState,
    model: &GridCrfModel,
    unaries: &UnaryField,
    schedule: &SweepSchedule,
    burn_in: usize,
    samples: usize,
    thinning: usize,
) -> Result<MarginalEstimate> {
    if samples == 0 || thinning == 0 {
        return Err(CrfError::contract("samples and thinning must be at least 1"));
    }
    for _ in 0..burn_in {
        gibbs_sweep(chain, model, unaries, schedule)?;
    }
    let mut estimate = MarginalEstimate::new(unaries.geometry().sites(), model.labels().count());
    for _ in 0..samples {
        for _ in 0..thinning {
            gibbs_sweep(chain, model, unaries, schedule)?;
        }
        estimate.record(chain.labeling());
    }
    Ok(estimate)
}

/// Per-site most frequent label, lowest label on ties.
pub fn max_marginal_decode(estimate: &MarginalEstimate) -> Labeling {
    let states = (0..estimate.sites())
        .map(|n| {
            let row = estimate.counts_row(n);
            let mut best = 0;
            for (l, &c) in row.iter().enumerate() {
                if c > row[best] {
                    best = l;
                }
            }
            best
        })
        .collect();
    Labeling::from_states_unchecked(states)
}

/// Test-time inference settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InferenceSettings {
    pub burn_in: usize,
    pub samples: usize,
    pub thinning: usize,
    pub schedule: ScheduleKind,
}

impl Default for InferenceSettings {
    fn default() -> Self {
        InferenceSettings {
            burn_in: 20,
            samples: 100,
            thinning: 1,
            schedule: ScheduleKind::ChromaticParallel,
        }
    }
}

/// Max-marginal inference: chain started from a unary-marginal draw, then
/// burn-in, sampling and per-site decoding.
pub fn infer_max_marginals(
    model: &GridCrfModel,
    unaries: &UnaryField,
    settings: &InferenceSettings,
    seed: u64,
) -> Result<(Labeling, MarginalEstimate)> {
    let geometry = unaries.geometry();
    let schedule = SweepSchedule::build(settings.schedule, model, geometry);
    let start = init_from_unary_marginals(unaries, seed);
    let mut chain = ChainState::new(start, derive_seed(seed, 0xC4A1));
    let estimate = estimate_marginals(
        &mut chain,
        model,
        unaries,
        &schedule,
        settings.burn_in,
        settings.samples,
        settings.thinning,
    )?;
    Ok((max_marginal_decode(&estimate), estimate))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{LabelSpace, PairwiseTable};

    fn two_site_model() -> (GridCrfModel, UnaryField) {
        let labels = LabelSpace::new(2).unwrap();
        let geometry = GridGeometry::new(1, 2).unwrap();
        let classes = vec![OffsetClass::new(1, 0).unwrap()];
        let tables = vec![PairwiseTable::from_values(labels, vec![0.0, 3.0, 3.0, 0.0]).unwrap()];
        let model = GridCrfModel::with_tables(labels, classes, tables).unwrap();
        let unaries = UnaryField::from_values(geometry, labels, vec![0.0, 1.0, 2.0, 0.0]).unwrap();
        (model, unaries)
    }

    fn zero_model(h: usize, w: usize, l: usize) -> (GridCrfModel, UnaryField) {
        let labels = LabelSpace::new(l).unwrap();
        let model = GridCrfModel::new(labels, vec![OffsetClass::new(1, 0).unwrap(), OffsetClass::new(0, 1).unwrap()]).unwrap();
        (model, UnaryField::zeros(GridGeometry::new(h, w).unwrap(), labels))
    }

    #[test]
    fn conditional_examples() {
        let (model, unaries) = zero_model(2, 2, 2);
        let p = local_conditional(&model, &unaries, &Labeling::constant(4, 1), 3).unwrap();
        assert_eq!(p, vec![0.5, 0.5]);

        let (model, unaries) = two_site_model();
        let y = Labeling::new(vec![0, 1], model.labels()).unwrap();
        let p = local_conditional(&model, &unaries, &y, 0).unwrap();
        let logistic = 1.0 / (1.0 + (-2.0f64).exp());
        assert!((p[1] - logistic).abs() < 1e-15);
        assert!((p[0] - 0.1192).abs() < 1e-4 && (p[1] - 0.8808).abs() < 1e-4);
    }

    #[test]
    fn conditional_shift_invariant() {
        let (model, unaries) = two_site_model();
        let y = Labeling::new(vec![1, 0], model.labels()).unwrap();
        let mut shifted = unaries.clone();
        for v in shifted.row_mut(1) {
            *v += 123.5;
        }
        let a = local_conditional(&model, &unaries, &y, 1).unwrap();
        let b = local_conditional(&model, &shifted, &y, 1).unwrap();
        for (x, z) in a.iter().zip(&b) {
            assert!((x - z).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_sweeps_give_uniform_frequencies() {
        let (model, unaries) = zero_model(2, 3, 3);
        let schedule = SweepSchedule::raster(&model, unaries.geometry());
        let mut chain = ChainState::new(Labeling::constant(6, 0), 11);
        let est = estimate_marginals(&mut chain, &model, &unaries, &schedule, 0, 10_000, 1).unwrap();
        for n in 0..6 {
            for f in est.frequencies(n) {
                assert!((f - 1.0 / 3.0).abs() < 0.02, "{f}");
            }
        }
        assert_eq!(chain.sweep_count(), 10_000);
        assert_eq!(est.samples_used(), 10_000);
    }

    #[test]
    fn sweep_is_deterministic() {
        let (model, unaries) = zero_model(4, 5, 3);
        for schedule in [
            SweepSchedule::raster(&model, unaries.geometry()),
            SweepSchedule::chromatic(&model, unaries.geometry()),
        ] {
            let mut a = ChainState::new(Labeling::constant(20, 2), 99);
            let mut b = a.clone();
            for _ in 0..5 {
                gibbs_sweep(&mut a, &model, &unaries, &schedule).unwrap();
                gibbs_sweep(&mut b, &model, &unaries, &schedule).unwrap();
            }
            assert_eq!(a, b);
        }
    }

    #[test]
    fn chromatic_partition_has_no_conflicts() {
        let labels = LabelSpace::new(2).unwrap();
        for classes in [OffsetClass::desk_preset(), OffsetClass::wide_preset()] {
            let model = GridCrfModel::new(labels, classes).unwrap();
            let g = GridGeometry::new(25, 23).unwrap();
            let s = SweepSchedule::chromatic(&model, g);
            // round-trip through the validating constructor
            SweepSchedule::from_partition(&model, g, s.color_classes().to_vec()).unwrap();
        }
    }

    #[test]
    fn bad_partition_rejected() {
        let (model, unaries) = zero_model(2, 2, 2);
        let g = unaries.geometry();
        assert!(SweepSchedule::from_partition(&model, g, vec![vec![0, 1], vec![2, 3]]).is_err());
        assert!(SweepSchedule::from_partition(&model, g, vec![vec![0, 3]]).is_err());
        assert!(SweepSchedule::from_partition(&model, g, vec![vec![0, 3], vec![1, 2]]).is_ok());

        let other = GridGeometry::new(3, 3).unwrap();
        let wrong = SweepSchedule::chromatic(&model, other);
        let mut chain = ChainState::new(Labeling::constant(4, 0), 0);
        assert!(gibbs_sweep(&mut chain, &model, &unaries, &wrong).is_err());
    }

    #[test]
    fn init_from_marginals_examples() {
        let labels = LabelSpace::new(2).unwrap();
        let g = GridGeometry::new(1, 100_000).unwrap();
        let mut values = Vec::with_capacity(200_000);
        for _ in 0..100_000 {
            values.extend([0.0, 10.0]);
        }
        let u = UnaryField::from_values(g, labels, values).unwrap();
        let y = init_from_unary_marginals(&u, 5);
        let zeros = y.states().iter().filter(|&&s| s == 0).count() as f64 / 1e5;
        let expected = 1.0 / (1.0 + (-10.0f64).exp());
        assert!((zeros - expected).abs() < 0.001);

        let g = GridGeometry::new(100, 100).unwrap();
        let l3 = LabelSpace::new(3).unwrap();
        let mut dominant = UnaryField::zeros(g, l3);
        for n in 0..10_000 {
            let row = dominant.row_mut(n);
            row.copy_from_slice(&[30.0, 60.0, 30.0]);
            row[n % 3] = 0.0;
        }
        let y = init_from_unary_marginals(&dominant, 1);
        assert!(y.states().iter().enumerate().all(|(n, &s)| s == n % 3));

        let zero = UnaryField::zeros(g, l3);
        let y = init_from_unary_marginals(&zero, 2);
        for l in 0..3 {
            let f = y.states().iter().filter(|&&s| s == l).count() as f64 / 1e4;
            assert!((f - 1.0 / 3.0).abs() < 0.02);
        }
    }

    #[test]
    fn decode_tie_breaks_low() {
        assert!(MarginalEstimate::from_counts(3, vec![5, 9, 5, 7, 7, 0], 19).is_err());
        let est = MarginalEstimate::from_counts(3, vec![5, 9, 5], 19).unwrap();
        assert_eq!(max_marginal_decode(&est).states(), &[1]);
        let est = MarginalEstimate::from_counts(3, vec![7, 7, 0], 14).unwrap();
        assert_eq!(max_marginal_decode(&est).states(), &[0]);
    }

    #[test]
    fn marginals_record_requested_samples() {
        let (model, unaries) = zero_model(2, 2, 2);
        let schedule = SweepSchedule::raster(&model, unaries.geometry());
        let mut chain = ChainState::new(Labeling::constant(4, 0), 3);
        let est = estimate_marginals(&mut chain, &model, &unaries, &schedule, 5, 20_000, 1).unwrap();
        assert_eq!(est.samples_used(), 20_000);
        for n in 0..4 {
            let f = est.frequencies(n)[0];
            assert!((0.48..=0.52).contains(&f));
            assert_eq!(est.counts_row(n).iter().sum::<u64>(), 20_000);
        }
        assert!(estimate_marginals(&mut chain, &model, &unaries, &schedule, 0, 0, 1).is_err());
    }
}
