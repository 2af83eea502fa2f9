//! Grid CRF energy model: unary potentials plus shared pairwise tables, one
//! table per pixel-offset class.
//!
//! Sites are indexed in raster order, `n = row * width + col`. An offset class
//! `(dx, dy)` connects site `(row, col)` to `(row + dy, col + dx)`; the table
//! entry `(a, b)` applies with `a` at the base site and `b` at the shifted
//! site. Edges that would leave the grid are absent.

use serde::{Deserialize, Serialize};

use crate::error::{CrfError, Result};

/// Number of labels per site. All sites share one label set `{0, .., count-1}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LabelSpace(usize);

impl LabelSpace {
    pub fn new(count: usize) -> Result<Self> {
        if count == 0 {
            return Err(CrfError::contract("label count must be at least 1"));
        }
        Ok(LabelSpace(count))
    }

    pub fn count(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridGeometry {
    height: usize,
    width: usize,
}

impl GridGeometry {
    pub fn new(height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(CrfError::contract(format!(
                "grid must have at least one site, got {height}x{width}"
            )));
        }
        Ok(GridGeometry { height, width })
    }

    pub fn height(self) -> usize {
        self.height
    }

    pub fn width(self) -> usize {
        self.width
    }

    pub fn sites(self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn coords(self, site: usize) -> (usize, usize) {
        (site / self.width, site % self.width)
    }

    /// Site reached from `site` by `(dx, dy)`, if it lies inside the grid.
    #[inline]
    pub fn shifted(self, site: usize, dx: i32, dy: i32) -> Option<usize> {
        let (row, col) = self.coords(site);
        let r = row as i64 + dy as i64;
        let c = col as i64 + dx as i64;
        if r < 0 || c < 0 || r >= self.height as i64 || c >= self.width as i64 {
            None
        } else {
            Some(r as usize * self.width + c as usize)
        }
    }
}

/// One pixel displacement. Its negation is the same class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct OffsetClass {
    pub dx: i32,
    pub dy: i32,
}

impl OffsetClass {
    pub fn new(dx: i32, dy: i32) -> Result<Self> {
        if dx == 0 && dy == 0 {
            return Err(CrfError::contract("offset (0, 0) is not an edge"));
        }
        Ok(OffsetClass { dx, dy })
    }

    fn same_or_opposite(self, other: OffsetClass) -> bool {
        (self.dx == other.dx && self.dy == other.dy) || (self.dx == -other.dx && self.dy == -other.dy)
    }

    /// Twelve classes mixing short and long horizontal/vertical/diagonal reach;
    /// sized for desk-scale grids around 48x32.
    pub fn desk_preset() -> Vec<OffsetClass> {
        [
            (1, 0),
            (0, 1),
            (1, 1),
            (-1, 1),
            (3, 0),
            (0, 3),
            (6, 0),
            (0, 6),
            (10, 0),
            (0, 10),
            (6, 6),
            (-6, 6),
        ]
        .iter()
        .map(|&(dx, dy)| OffsetClass { dx, dy })
        .collect()
    }

    /// 32 classes (64 neighbours) with reach up to 20 pixels, for large
    /// images.
    pub fn wide_preset() -> Vec<OffsetClass> {
        let listed: [(i32, i32); 21] = [
            (1, 0),
            (0, 1),
            (1, 1),
            (2, 0),
            (0, 2),
            (2, 2),
            (3, 0),
            (0, 3),
            (5, 0),
            (0, 5),
            (5, 5),
            (5, 10),
            (10, 5),
            (10, 0),
            (0, 10),
            (10, 10),
            (15, 0),
            (0, 15),
            (20, 0),
            (0, 20),
            (20, 20),
        ];
        // padding to reach 32 classes
        let extra: [(i32, i32); 2] = [(3, 3), (15, 15)];
        let mut out = Vec::with_capacity(32);
        for &(dx, dy) in listed.iter().chain(extra.iter()) {
            out.push(OffsetClass { dx, dy });
            if dx != 0 && dy != 0 {
                out.push(OffsetClass { dx: -dx, dy });
            }
        }
        out.truncate(32);
        out
    }
}

/// Validates an offset list: no zero offset, no duplicated or opposite pair.
pub fn validate_classes(classes: &[OffsetClass]) -> Result<()> {
    for (i, a) in classes.iter().enumerate() {
        if a.dx == 0 && a.dy == 0 {
            return Err(CrfError::contract(format!("offset class {i} is (0, 0)")));
        }
        for (j, b) in classes.iter().enumerate().skip(i + 1) {
            if a.same_or_opposite(*b) {
                return Err(CrfError::contract(format!(
                    "offset classes {i} ({}, {}) and {j} ({}, {}) describe the same edges",
                    a.dx, a.dy, b.dx, b.dy
                )));
            }
        }
    }
    Ok(())
}

/// `L x L` table of pairwise energies, row-major, entry `(a, b)` at `a * L + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseTable {
    labels: usize,
    values: Vec<f64>,
}

impl PairwiseTable {
    pub fn zeros(labels: LabelSpace) -> Self {
        let l = labels.count();
        PairwiseTable {
            labels: l,
            values: vec![0.0; l * l],
        }
    }

    pub fn from_values(labels: LabelSpace, values: Vec<f64>) -> Result<Self> {
        let l = labels.count();
        if values.len() != l * l {
            return Err(CrfError::contract(format!(
                "pairwise table needs {} entries, got {}",
                l * l,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(CrfError::contract("pairwise table entries must be finite"));
        }
        Ok(PairwiseTable { labels: l, values })
    }

    #[inline]
    pub fn get(&self, a: usize, b: usize) -> f64 {
        self.values[a * self.labels + b]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }
}

/// Per-site, per-label unary energies over one grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnaryField {
    geometry: GridGeometry,
    labels: usize,
    values: Vec<f64>,
}

impl UnaryField {
    pub fn zeros(geometry: GridGeometry, labels: LabelSpace) -> Self {
        UnaryField {
            geometry,
            labels: labels.count(),
            values: vec![0.0; geometry.sites() * labels.count()],
        }
    }

    pub fn from_values(geometry: GridGeometry, labels: LabelSpace, values: Vec<f64>) -> Result<Self> {
        let expected = geometry.sites() * labels.count();
        if values.len() != expected {
            return Err(CrfError::contract(format!(
                "unary field needs {expected} entries, got {}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(CrfError::contract("unary entries must be finite"));
        }
        Ok(UnaryField {
            geometry,
            labels: labels.count(),
            values,
        })
    }

    pub fn geometry(&self) -> GridGeometry {
        self.geometry
    }

    pub fn labels(&self) -> usize {
        self.labels
    }

    #[inline]
    pub fn get(&self, site: usize, label: usize) -> f64 {
        self.values[site * self.labels + label]
    }

    #[inline]
    pub fn row(&self, site: usize) -> &[f64] {
        &self.values[site * self.labels..(site + 1) * self.labels]
    }

    pub fn row_mut(&mut self, site: usize) -> &mut [f64] {
        &mut self.values[site * self.labels..(site + 1) * self.labels]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Per-site argmin of the unary energy (lowest label on ties).
    pub fn argmin_labeling(&self) -> Labeling {
        let states = (0..self.geometry.sites())
            .map(|n| {
                let row = self.row(n);
                let mut best = 0;
                for (l, &v) in row.iter().enumerate() {
                    if v < row[best] {
                        best = l;
                    }
                }
                best
            })
            .collect();
        Labeling { states }
    }
}

/// One label per site.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Labeling {
    states: Vec<usize>,
}

impl Labeling {
    pub fn new(states: Vec<usize>, labels: LabelSpace) -> Result<Self> {
        if let Some((n, &s)) = states.iter().enumerate().find(|(_, &s)| s >= labels.count()) {
            return Err(CrfError::contract(format!(
                "label {s} at site {n} outside label space of size {}",
                labels.count()
            )));
        }
        Ok(Labeling { states })
    }

    pub(crate) fn from_states_unchecked(states: Vec<usize>) -> Self {
        Labeling { states }
    }

    pub fn constant(sites: usize, label: usize) -> Self {
        Labeling {
            states: vec![label; sites],
        }
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    #[inline]
    pub fn get(&self, site: usize) -> usize {
        self.states[site]
    }

    #[inline]
    pub(crate) fn set(&mut self, site: usize, label: usize) {
        self.states[site] = label;
    }

    pub fn states(&self) -> &[usize] {
        &self.states
    }

    /// Labeling with one site changed, validated against `labels`.
    pub fn with_site(&self, site: usize, label: usize, labels: LabelSpace) -> Result<Self> {
        if site >= self.states.len() || label >= labels.count() {
            return Err(CrfError::contract(format!("invalid site {site} or label {label}")));
        }
        let mut out = self.clone();
        out.states[site] = label;
        Ok(out)
    }
}

/// Gradient with respect to every potential entry: an `N x L` unary table
/// and one `L x L` accumulation per offset class.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    pub labels: usize,
    pub unary: Vec<f64>,
    pub tables: Vec<Vec<f64>>,
}

impl GradientBundle {
    pub fn zeros(sites: usize, labels: usize, classes: usize) -> Self {
        GradientBundle {
            labels,
            unary: vec![0.0; sites * labels],
            tables: vec![vec![0.0; labels * labels]; classes],
        }
    }

    pub fn unary_row(&self, site: usize) -> &[f64] {
        &self.unary[site * self.labels..(site + 1) * self.labels]
    }

    /// `self += weight * other`
    pub fn add_scaled(&mut self, other: &GradientBundle, weight: f64) {
        for (a, b) in self.unary.iter_mut().zip(&other.unary) {
            *a += weight * b;
        }
        for (ta, tb) in self.tables.iter_mut().zip(&other.tables) {
            for (a, b) in ta.iter_mut().zip(tb) {
                *a += weight * b;
            }
        }
    }

    pub fn max_abs_diff(&self, other: &GradientBundle) -> f64 {
        let u = self
            .unary
            .iter()
            .zip(&other.unary)
            .map(|(a, b)| (a - b).abs());
        let t = self
            .tables
            .iter()
            .zip(&other.tables)
            .flat_map(|(ta, tb)| ta.iter().zip(tb).map(|(a, b)| (a - b).abs()));
        u.chain(t).fold(0.0, f64::max)
    }
}

/// The CRF part of the parameters: label space, offset classes and one
/// shared pairwise table per class. Geometry comes with each unary field, so
/// a single model serves grids of different sizes.
#[derive(Debug, Clone, PartialEq)]
pub struct GridCrfModel {
    labels: LabelSpace,
    classes: Vec<OffsetClass>,
    tables: Vec<PairwiseTable>,
}

impl GridCrfModel {
    /// Model with all pairwise tables set to zero.
    pub fn new(labels: LabelSpace, classes: Vec<OffsetClass>) -> Result<Self> {
        validate_classes(&classes)?;
        let tables = classes.iter().map(|_| PairwiseTable::zeros(labels)).collect();
        Ok(GridCrfModel {
            labels,
            classes,
            tables,
        })
    }

    pub fn with_tables(
        labels: LabelSpace,
        classes: Vec<OffsetClass>,
        tables: Vec<PairwiseTable>,
    ) -> Result<Self> {
        validate_classes(&classes)?;
        if tables.len() != classes.len() {
            return Err(CrfError::contract(format!(
                "{} offset classes but {} tables",
                classes.len(),
                tables.len()
            )));
        }
        if tables.iter().any(|t| t.labels != labels.count()) {
            return Err(CrfError::contract("table shape does not match label count"));
        }
        Ok(GridCrfModel {
            labels,
            classes,
            tables,
        })
    }

    pub fn labels(&self) -> LabelSpace {
        self.labels
    }

    pub fn classes(&self) -> &[OffsetClass] {
        &self.classes
    }

    pub fn tables(&self) -> &[PairwiseTable] {
        &self.tables
    }

    pub fn tables_mut(&mut self) -> &mut [PairwiseTable] {
        &mut self.tables
    }

    pub fn check_unaries(&self, unaries: &UnaryField) -> Result<()> {
        if unaries.labels() != self.labels.count() {
            return Err(CrfError::contract(format!(
                "unary field has {} labels, model has {}",
                unaries.labels(),
                self.labels.count()
            )));
        }
        Ok(())
    }

    pub fn check_labeling(&self, geometry: GridGeometry, y: &Labeling) -> Result<()> {
        if y.len() != geometry.sites() {
            return Err(CrfError::contract(format!(
                "labeling has {} sites, grid has {}",
                y.len(),
                geometry.sites()
            )));
        }
        if let Some(&s) = y.states().iter().find(|&&s| s >= self.labels.count()) {
            return Err(CrfError::contract(format!(
                "label {s} outside label space of size {}",
                self.labels.count()
            )));
        }
        Ok(())
    }

    /// Calls `visit(class, base, shifted)` for every edge, class by class,
    /// base sites in raster order.
    pub fn for_each_edge(&self, geometry: GridGeometry, mut visit: impl FnMut(usize, usize, usize)) {
        for (c, class) in self.classes.iter().enumerate() {
            for i in 0..geometry.sites() {
                if let Some(j) = geometry.shifted(i, class.dx, class.dy) {
                    visit(c, i, j);
                }
            }
        }
    }

    /// Number of edges of each class on `geometry`.
    pub fn edge_counts(&self, geometry: GridGeometry) -> Vec<usize> {
        self.classes
            .iter()
            .map(|c| {
                let w = geometry.width() as i64 - c.dx.unsigned_abs() as i64;
                let h = geometry.height() as i64 - c.dy.unsigned_abs() as i64;
                (w.max(0) * h.max(0)) as usize
            })
            .collect()
    }

    /// Total energy: unaries in site order, then pairwise terms class by class.
    pub fn energy(&self, unaries: &UnaryField, y: &Labeling) -> Result<f64> {
        self.check_unaries(unaries)?;
        let geometry = unaries.geometry();
        self.check_labeling(geometry, y)?;
        let mut total = 0.0;
        for n in 0..geometry.sites() {
            total += unaries.get(n, y.get(n));
        }
        self.for_each_edge(geometry, |c, i, j| {
            total += self.tables[c].get(y.get(i), y.get(j));
        });
        Ok(total)
    }

    /// Energy of every label at `site` given the rest of `y`, counting only the
    /// unary at `site` and the pairwise factors touching it.
    pub(crate) fn local_energies_into(
        &self,
        unaries: &UnaryField,
        y: &Labeling,
        site: usize,
        out: &mut [f64],
    ) {
        let geometry = unaries.geometry();
        let l = self.labels.count();
        out.copy_from_slice(unaries.row(site));
        for (class, table) in self.classes.iter().zip(&self.tables) {
            let values = table.values();
            if let Some(j) = geometry.shifted(site, class.dx, class.dy) {
                let b = y.get(j);
                for (a, e) in out.iter_mut().enumerate() {
                    *e += values[a * l + b];
                }
            }
            if let Some(j) = geometry.shifted(site, -class.dx, -class.dy) {
                let a = y.get(j);
                let row = &values[a * l..(a + 1) * l];
                for (e, v) in out.iter_mut().zip(row) {
                    *e += v;
                }
            }
        }
    }

    /// `energy(y with site := new_label) - energy(y)`, from the factors at `site` only.
    pub fn energy_delta(
        &self,
        unaries: &UnaryField,
        y: &Labeling,
        site: usize,
        new_label: usize,
    ) -> Result<f64> {
        self.check_unaries(unaries)?;
        let geometry = unaries.geometry();
        self.check_labeling(geometry, y)?;
        if site >= geometry.sites() || new_label >= self.labels.count() {
            return Err(CrfError::contract(format!("invalid site {site} or label {new_label}")));
        }
        let current = y.get(site);
        if current == new_label {
            return Ok(0.0);
        }
        let mut energies = vec![0.0; self.labels.count()];
        self.local_energies_into(unaries, y, site, &mut energies);
        Ok(energies[new_label] - energies[current])
    }

    /// Indicator difference `-[y_data_f = v] + [y_sample_f = v]` for every
    /// factor `f` and configuration `v`: per-site rows for the unaries, and per
    /// class sums over all edges for the shared tables.
    ///
    /// This is the gradient of the log-likelihood with respect to each
    /// potential value when `y_sample` stands in for the model expectation.
    pub fn indicator_error(
        &self,
        geometry: GridGeometry,
        y_data: &Labeling,
        y_sample: &Labeling,
    ) -> Result<GradientBundle> {
        self.check_labeling(geometry, y_data)?;
        self.check_labeling(geometry, y_sample)?;
        let l = self.labels.count();
        let mut out = GradientBundle::zeros(geometry.sites(), l, self.classes.len());
        for n in 0..geometry.sites() {
            out.unary[n * l + y_data.get(n)] -= 1.0;
            out.unary[n * l + y_sample.get(n)] += 1.0;
        }
        self.for_each_edge(geometry, |c, i, j| {
            let table = &mut out.tables[c];
            table[y_data.get(i) * l + y_data.get(j)] -= 1.0;
            table[y_sample.get(i) * l + y_sample.get(j)] += 1.0;
        });
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// 1x2 grid, two labels, one horizontal class with table [[0,3],[3,0]].
    pub(crate) fn two_site_model() -> (GridCrfModel, UnaryField) {
        let labels = LabelSpace::new(2).unwrap();
        let geometry = GridGeometry::new(1, 2).unwrap();
        let classes = vec![OffsetClass::new(1, 0).unwrap()];
        let tables = vec![PairwiseTable::from_values(labels, vec![0.0, 3.0, 3.0, 0.0]).unwrap()];
        let model = GridCrfModel::with_tables(labels, classes, tables).unwrap();
        let unaries = UnaryField::from_values(geometry, labels, vec![0.0, 1.0, 2.0, 0.0]).unwrap();
        (model, unaries)
    }

    fn lab(states: &[usize], l: usize) -> Labeling {
        Labeling::new(states.to_vec(), LabelSpace::new(l).unwrap()).unwrap()
    }

    /// Independent energy: walks every site pair and tests membership in each class.
    fn brute_energy(model: &GridCrfModel, unaries: &UnaryField, y: &Labeling) -> f64 {
        let g = unaries.geometry();
        let mut e: f64 = (0..g.sites()).map(|n| unaries.get(n, y.get(n))).sum();
        for (c, class) in model.classes().iter().enumerate() {
            for i in 0..g.sites() {
                for j in 0..g.sites() {
                    let (ri, ci) = g.coords(i);
                    let (rj, cj) = g.coords(j);
                    if rj as i64 - ri as i64 == class.dy as i64 && cj as i64 - ci as i64 == class.dx as i64 {
                        e += model.tables()[c].get(y.get(i), y.get(j));
                    }
                }
            }
        }
        e
    }

    #[test]
    fn energy_examples() {
        let (model, unaries) = two_site_model();
        assert_eq!(model.energy(&unaries, &lab(&[0, 1], 2)).unwrap(), 3.0);
        assert_eq!(model.energy(&unaries, &lab(&[1, 0], 2)).unwrap(), 6.0);
        assert_eq!(brute_energy(&model, &unaries, &lab(&[0, 1], 2)), 3.0);
        assert_eq!(brute_energy(&model, &unaries, &lab(&[1, 0], 2)), 6.0);

        let labels = LabelSpace::new(3).unwrap();
        let g = GridGeometry::new(3, 3).unwrap();
        let zero = GridCrfModel::new(labels, OffsetClass::desk_preset()).unwrap();
        let u = UnaryField::zeros(g, labels);
        assert_eq!(zero.energy(&u, &lab(&[0, 1, 2, 2, 1, 0, 0, 0, 1], 3)).unwrap(), 0.0);
    }

    #[test]
    fn energy_rejects_mismatch() {
        let (model, unaries) = two_site_model();
        assert!(model.energy(&unaries, &Labeling::constant(3, 0)).is_err());
        assert!(model.energy(&unaries, &Labeling::constant(2, 2)).is_err());
        let wrong = UnaryField::zeros(unaries.geometry(), LabelSpace::new(3).unwrap());
        assert!(model.energy(&wrong, &Labeling::constant(2, 0)).is_err());
    }

    #[test]
    fn energy_delta_examples() {
        let (model, unaries) = two_site_model();
        let y = lab(&[0, 1], 2);
        assert_eq!(model.energy_delta(&unaries, &y, 0, 0).unwrap(), 0.0);
        // (0,1) -> (1,1): energies 3 -> 1
        let moved = y.with_site(0, 1, model.labels()).unwrap();
        let direct = model.energy(&unaries, &moved).unwrap() - model.energy(&unaries, &y).unwrap();
        assert_eq!(direct, -2.0);
        assert_eq!(model.energy_delta(&unaries, &y, 0, 1).unwrap(), direct);
        assert_eq!(model.energy_delta(&unaries, &y, 1, 0).unwrap(), -1.0);
        assert!(model.energy_delta(&unaries, &y, 2, 0).is_err());
    }

    #[test]
    fn indicator_error_examples() {
        let (model, unaries) = two_site_model();
        let g = unaries.geometry();
        let same = model.indicator_error(g, &lab(&[0, 1], 2), &lab(&[0, 1], 2)).unwrap();
        assert!(same.unary.iter().chain(same.tables[0].iter()).all(|&v| v == 0.0));

        let err = model.indicator_error(g, &lab(&[0, 1], 2), &lab(&[1, 1], 2)).unwrap();
        assert_eq!(err.tables[0], vec![0.0, -1.0, 0.0, 1.0]);
        assert_eq!(err.unary, vec![-1.0, 1.0, 0.0, 0.0]);

        let l3 = LabelSpace::new(3).unwrap();
        let single = GridCrfModel::new(l3, vec![]).unwrap();
        let g1 = GridGeometry::new(1, 1).unwrap();
        let e = single.indicator_error(g1, &lab(&[0], 3), &lab(&[2], 3)).unwrap();
        assert_eq!(e.unary, vec![-1.0, 0.0, 1.0]);
    }

    #[test]
    fn class_validation() {
        assert!(OffsetClass::new(0, 0).is_err());
        let l = LabelSpace::new(2).unwrap();
        let dup = vec![OffsetClass { dx: 1, dy: 0 }, OffsetClass { dx: -1, dy: 0 }];
        assert!(GridCrfModel::new(l, dup).is_err());
        assert!(LabelSpace::new(0).is_err());
        assert!(GridGeometry::new(0, 3).is_err());
    }

    #[test]
    fn presets_are_valid() {
        let p = OffsetClass::wide_preset();
        assert_eq!(p.len(), 32);
        validate_classes(&p).unwrap();
        validate_classes(&OffsetClass::desk_preset()).unwrap();
    }

    #[test]
    fn interior_site_has_two_edges_per_class() {
        let l = LabelSpace::new(2).unwrap();
        let model = GridCrfModel::new(l, OffsetClass::desk_preset()).unwrap();
        let g = GridGeometry::new(30, 30).unwrap();
        let centre = 15 * 30 + 15;
        let mut incident = vec![0usize; model.classes().len()];
        model.for_each_edge(g, |c, i, j| {
            if i == centre || j == centre {
                incident[c] += 1;
            }
        });
        assert!(incident.iter().all(|&k| k == 2));
        let mut counted = vec![0usize; model.classes().len()];
        model.for_each_edge(g, |c, _, _| counted[c] += 1);
        assert_eq!(counted, model.edge_counts(g));
    }

    fn instance() -> impl Strategy<Value = (usize, usize, usize, Vec<f64>, Vec<f64>, Vec<usize>)> {
        (1usize..=3, 1usize..=3, 1usize..=3).prop_flat_map(|(h, w, l)| {
            let n = h * w;
            (
                Just(h),
                Just(w),
                Just(l),
                prop::collection::vec(-2.0f64..2.0, n * l),
                prop::collection::vec(-2.0f64..2.0, 4 * l * l),
                prop::collection::vec(0..l, n),
            )
        })
    }

    fn build(h: usize, w: usize, l: usize, u: Vec<f64>, t: Vec<f64>) -> (GridCrfModel, UnaryField) {
        let labels = LabelSpace::new(l).unwrap();
        let classes: Vec<_> = [(1, 0), (0, 1), (1, 1), (-1, 1)]
            .iter()
            .map(|&(dx, dy)| OffsetClass::new(dx, dy).unwrap())
            .collect();
        let tables = t
            .chunks(l * l)
            .map(|c| PairwiseTable::from_values(labels, c.to_vec()).unwrap())
            .collect();
        let model = GridCrfModel::with_tables(labels, classes, tables).unwrap();
        let unaries = UnaryField::from_values(GridGeometry::new(h, w).unwrap(), labels, u).unwrap();
        (model, unaries)
    }

    proptest! {
        #[test]
        fn energy_matches_pairwise_scan((h, w, l, u, t, y) in instance()) {
            let (model, unaries) = build(h, w, l, u, t);
            let y = Labeling::new(y, model.labels()).unwrap();
            let e = model.energy(&unaries, &y).unwrap();
            prop_assert!((e - brute_energy(&model, &unaries, &y)).abs() < 1e-12);
        }

        #[test]
        fn delta_matches_two_energies((h, w, l, u, t, y) in instance(), site_seed in 0usize..100, label_seed in 0usize..100) {
            let (model, unaries) = build(h, w, l, u, t);
            let y = Labeling::new(y, model.labels()).unwrap();
            let site = site_seed % (h * w);
            let label = label_seed % l;
            let moved = y.with_site(site, label, model.labels()).unwrap();
            let direct = model.energy(&unaries, &moved).unwrap() - model.energy(&unaries, &y).unwrap();
            prop_assert!((model.energy_delta(&unaries, &y, site, label).unwrap() - direct).abs() < 1e-12);
        }

        #[test]
        fn error_entries_cancel_per_factor((h, w, l, u, t, y) in instance(), y2 in prop::collection::vec(0usize..3, 9)) {
            let (model, unaries) = build(h, w, l, u, t);
            let g = unaries.geometry();
            let a = Labeling::new(y, model.labels()).unwrap();
            let b = Labeling::new(y2.into_iter().take(g.sites()).map(|s| s % l).collect(), model.labels()).unwrap();
            let err = model.indicator_error(g, &a, &b).unwrap();
            for n in 0..g.sites() {
                prop_assert_eq!(err.unary_row(n).iter().sum::<f64>(), 0.0);
                prop_assert!(err.unary_row(n).iter().filter(|v| **v != 0.0).count() <= 2);
            }
            for table in &err.tables {
                prop_assert_eq!(table.iter().sum::<f64>(), 0.0);
            }
        }

        #[test]
        fn table_entry_derivative_is_edge_count((h, w, l, u, t, y) in instance(), class in 0usize..4, a in 0usize..3, b in 0usize..3) {
            let (mut model, unaries) = build(h, w, l, u, t);
            let (a, b) = (a % l, b % l);
            let y = Labeling::new(y, model.labels()).unwrap();
            let before = model.energy(&unaries, &y).unwrap();
            let eps = 0.25;
            model.tables_mut()[class].values_mut()[a * l + b] += eps;
            let after = model.energy(&unaries, &y).unwrap();
            let mut realized = 0usize;
            model.for_each_edge(unaries.geometry(), |c, i, j| {
                if c == class && y.get(i) == a && y.get(j) == b {
                    realized += 1;
                }
            });
            prop_assert!((after - before - eps * realized as f64).abs() < 1e-12);
        }
    }
}
