//! Confidence-rich map: each cell keeps a histogram over its continuous occupancy
//! level in `[0, 1]` instead of a single occupancy probability.
//!
//! Bin `b` of `λ_m` bins is centered at `(b + 0.5) / λ_m`; every occupancy integral
//! is a midpoint sum over those centers.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geom::{trace_ray, GridSpec, Pose2D};
use crate::raster;
use crate::sensor::{cause_masses, trace_ranges, BeamModelParams, LinearBeam, Scan};

pub const DEFAULT_BINS: usize = 10;

#[inline]
pub fn bin_center(b: usize, bins: usize) -> f64 {
    (b as f64 + 0.5) / bins as f64
}

/// Shannon entropy in bits, with `0 log 0 = 0`.
pub fn entropy_bits(masses: &[f64]) -> f64 {
    -masses
        .iter()
        .filter(|&&m| m > 0.0)
        .map(|&m| m * m.log2())
        .sum::<f64>()
}

pub fn expected_of(masses: &[f64]) -> f64 {
    let n = masses.len();
    masses.iter().enumerate().map(|(b, m)| bin_center(b, n) * m).sum()
}

/// Multiplies `masses` by `offset + v_b * slope` and renormalizes.
/// Returns `false` (leaving `masses` untouched) if the posterior has no mass.
#[inline]
pub(crate) fn update_masses_linear(masses: &mut [f64], offset: f64, slope: f64) -> bool {
    let n = masses.len();
    let mut post = [0.0f64; 64];
    let mut heap;
    let buf: &mut [f64] = if n <= post.len() {
        &mut post[..n]
    } else {
        heap = vec![0.0; n];
        &mut heap
    };
    let mut total = 0.0;
    for (b, (p, &m)) in buf.iter_mut().zip(masses.iter()).enumerate() {
        *p = m * (offset + bin_center(b, n) * slope).max(0.0);
        total += *p;
    }
    if !(total > 0.0) || !total.is_finite() {
        return false;
    }
    for (m, p) in masses.iter_mut().zip(buf.iter()) {
        *m = p / total;
    }
    true
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellBelief {
    pub masses: Vec<f64>,
}

impl CellBelief {
    pub fn uniform(bins: usize) -> Self {
        Self {
            masses: vec![1.0 / bins as f64; bins],
        }
    }

    pub fn delta(bins: usize, bin: usize) -> Self {
        let mut masses = vec![0.0; bins];
        masses[bin] = 1.0;
        Self { masses }
    }

    pub fn from_masses(masses: Vec<f64>) -> Result<Self> {
        if masses.is_empty() || masses.iter().any(|m| !(*m >= 0.0)) {
            return Err(Error::Validation("belief masses must be nonnegative".into()));
        }
        let s: f64 = masses.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::Validation(format!("belief masses sum to {s}")));
        }
        Ok(Self { masses })
    }

    pub fn bins(&self) -> usize {
        self.masses.len()
    }

    pub fn expected(&self) -> f64 {
        expected_of(&self.masses)
    }

    pub fn entropy_bits(&self) -> f64 {
        entropy_bits(&self.masses)
    }

    /// Entropy scaled by its maximum `log2 λ_m`, in `[0, 1]`.
    pub fn normalized_entropy(&self) -> f64 {
        self.entropy_bits() / (self.bins() as f64).log2()
    }
}

/// Bayesian update of a cell histogram with per-bin likelihoods.
pub fn update_cell(belief: &CellBelief, likelihoods: &[f64]) -> Result<CellBelief> {
    if likelihoods.len() != belief.bins() {
        return Err(Error::domain(format!(
            "expected {} likelihoods, got {}",
            belief.bins(),
            likelihoods.len()
        )));
    }
    if likelihoods.iter().any(|l| !(*l >= 0.0)) {
        return Err(Error::domain("likelihoods must be nonnegative"));
    }
    let post: Vec<f64> = belief.masses.iter().zip(likelihoods).map(|(m, l)| m * l).collect();
    let total: f64 = post.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Numerical("posterior has zero mass; update skipped".into()));
    }
    Ok(CellBelief {
        masses: post.into_iter().map(|p| p / total).collect(),
    })
}

/// Read access to a confidence-rich belief over a grid.
pub trait CrmBelief {
    fn grid(&self) -> &GridSpec;
    fn bins(&self) -> usize;
    fn masses(&self, cell: usize) -> &[f64];
    fn expected(&self, cell: usize) -> f64;
}

/// Mutable histogram storage the scan update writes into.
pub(crate) trait MassStore {
    fn masses_mut(&mut self, cell: usize) -> &mut [f64];
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ScanUpdateReport {
    pub cells_updated: usize,
    /// Cell updates skipped because the posterior had no mass.
    pub skipped: usize,
    /// `ln p(z | x, m̂)` of the scan under the pre-scan belief.
    pub log_likelihood: f64,
}

/// Reusable buffers for scan updates.
#[derive(Debug, Default)]
pub(crate) struct ScanScratch {
    occ: Vec<f64>,
    cause: Vec<f64>,
    beam: LinearBeam,
    pub(crate) touched: Vec<usize>,
}

/// Applies every beam of `scan` to `store`. Cause profiles come from `expected`,
/// which must reflect the pre-scan belief for the whole call.
pub(crate) fn apply_scan<F, S>(
    grid: &GridSpec,
    expected: F,
    store: &mut S,
    pose: &Pose2D,
    scan: &Scan,
    params: &BeamModelParams,
    scratch: &mut ScanScratch,
) -> Result<ScanUpdateReport>
where
    F: Fn(usize) -> f64,
    S: MassStore + ?Sized,
{
    if !grid.contains(pose.x, pose.y) {
        return Err(Error::domain(format!("pose ({:.3}, {:.3}) outside map", pose.x, pose.y)));
    }
    let sensor = scan.sensor_pose(pose);
    let mut report = ScanUpdateReport::default();
    scratch.touched.clear();
    for beam in &scan.beams {
        let trace = trace_ray(grid, &sensor, beam.bearing, params.max_range)?;
        if trace.is_empty() {
            continue;
        }
        let ranges = trace_ranges(&trace, params.max_range);
        scratch.occ.clear();
        scratch.occ.extend(trace.cells.iter().map(|c| expected(c.index)));
        let no_hit = cause_masses(beam.range, &ranges, params, &mut scratch.cause);
        scratch.beam.compute(&scratch.occ, &scratch.cause, no_hit);
        report.log_likelihood += scratch.beam.marginal.ln();
        for (k, cell) in trace.cells.iter().enumerate() {
            let m = store.masses_mut(cell.index);
            if update_masses_linear(m, scratch.beam.offset[k], scratch.beam.slope[k]) {
                report.cells_updated += 1;
                scratch.touched.push(cell.index);
            } else {
                report.skipped += 1;
            }
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceRichMap {
    grid: GridSpec,
    bins: usize,
    masses: Vec<f64>,
    expected: Vec<f64>,
}

struct DenseStore<'a> {
    bins: usize,
    masses: &'a mut [f64],
}

impl MassStore for DenseStore<'_> {
    #[inline]
    fn masses_mut(&mut self, cell: usize) -> &mut [f64] {
        &mut self.masses[cell * self.bins..(cell + 1) * self.bins]
    }
}

impl ConfidenceRichMap {
    /// Every cell uniform over `bins` occupancy bins.
    pub fn init_uniform(grid: GridSpec, bins: usize) -> Self {
        let bins = bins.max(1);
        let n = grid.cell_count();
        Self {
            grid,
            bins,
            masses: vec![1.0 / bins as f64; n * bins],
            expected: vec![0.5; n],
        }
    }

    pub fn cell(&self, index: usize) -> CellBelief {
        CellBelief {
            masses: self.masses(index).to_vec(),
        }
    }

    pub fn set_cell(&mut self, index: usize, belief: &CellBelief) -> Result<()> {
        if belief.bins() != self.bins {
            return Err(Error::domain("bin count mismatch"));
        }
        self.masses[index * self.bins..(index + 1) * self.bins].copy_from_slice(&belief.masses);
        self.expected[index] = belief.expected();
        Ok(())
    }

    /// Expected-occupancy raster `m̂`.
    pub fn expected_occupancy(&self) -> &[f64] {
        &self.expected
    }

    pub fn cell_entropy(&self, index: usize) -> f64 {
        entropy_bits(self.masses(index))
    }

    pub fn entropy_raster(&self, normalized: bool) -> Vec<f64> {
        let scale = if normalized {
            1.0 / (self.bins as f64).log2()
        } else {
            1.0
        };
        (0..self.grid.cell_count())
            .map(|i| self.cell_entropy(i) * scale)
            .collect()
    }

    /// Updates every cell on each beam's trace. Cause profiles for all beams are
    /// built from the expected occupancy before the scan.
    pub fn integrate_scan(
        &mut self,
        pose: &Pose2D,
        scan: &Scan,
        params: &BeamModelParams,
    ) -> Result<ScanUpdateReport> {
        let mut scratch = ScanScratch::default();
        self.integrate_scan_with(pose, scan, params, &mut scratch)
    }

    pub(crate) fn integrate_scan_with(
        &mut self,
        pose: &Pose2D,
        scan: &Scan,
        params: &BeamModelParams,
        scratch: &mut ScanScratch,
    ) -> Result<ScanUpdateReport> {
        let expected = &self.expected;
        let mut store = DenseStore {
            bins: self.bins,
            masses: &mut self.masses,
        };
        let report = apply_scan(&self.grid, |i| expected[i], &mut store, pose, scan, params, scratch)?;
        for &i in &scratch.touched {
            self.expected[i] = expected_of(&self.masses[i * self.bins..(i + 1) * self.bins]);
        }
        Ok(report)
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        raster::write_pgm(path, &self.grid, &self.expected)
    }

    pub fn write_entropy_csv<W: Write>(&self, out: W, normalized: bool) -> Result<()> {
        raster::write_csv(out, &self.grid, &self.entropy_raster(normalized))
    }
}

impl CrmBelief for ConfidenceRichMap {
    fn grid(&self) -> &GridSpec {
        &self.grid
    }

    fn bins(&self) -> usize {
        self.bins
    }

    #[inline]
    fn masses(&self, cell: usize) -> &[f64] {
        &self.masses[cell * self.bins..(cell + 1) * self.bins]
    }

    #[inline]
    fn expected(&self, cell: usize) -> f64 {
        self.expected[cell]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{trace_ray, Pose2D};
    use crate::sensor::{beam_likelihood_given_cell, Beam};
    use proptest::prelude::*;

    fn grid() -> GridSpec {
        GridSpec::new(30, 10, 0.2, Pose2D::identity()).unwrap()
    }

    fn one_beam(range: f64) -> Scan {
        Scan {
            timestamp: 0.0,
            beams: vec![Beam { bearing: 0.0, range }],
            offset: Pose2D::identity(),
        }
    }

    #[test]
    fn uniform_init() {
        let map = ConfidenceRichMap::init_uniform(grid(), 10);
        let c = map.cell(17);
        assert!(c.masses.iter().all(|&m| (m - 0.1).abs() < 1e-15));
        assert!((c.entropy_bits() - 10f64.log2()).abs() < 1e-12);
        assert!((c.normalized_entropy() - 1.0).abs() < 1e-12);
        assert!(map.expected_occupancy().iter().all(|&e| e == 0.5));
        assert!((c.expected() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn expected_occupancy_examples() {
        assert!((CellBelief::delta(10, 9).expected() - 0.95).abs() < 1e-12);
        let mut m = vec![0.0; 10];
        m[0] = 0.5;
        m[9] = 0.5;
        assert!((expected_of(&m) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn entropy_examples() {
        assert_eq!(CellBelief::delta(10, 3).entropy_bits(), 0.0);
        let mut m = vec![0.0; 10];
        m[0] = 0.5;
        m[1] = 0.5;
        assert!((entropy_bits(&m) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn update_with_center_likelihood() {
        let prior = CellBelief::uniform(10);
        let lik: Vec<f64> = (0..10).map(|b| bin_center(b, 10)).collect();
        let post = update_cell(&prior, &lik).unwrap();
        // Σ centers = 5
        for (b, m) in post.masses.iter().enumerate() {
            assert!((m - bin_center(b, 10) / 5.0).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_likelihood_is_uninformative() {
        let prior = CellBelief::from_masses(vec![0.05, 0.15, 0.3, 0.1, 0.1, 0.05, 0.05, 0.1, 0.05, 0.05]).unwrap();
        let post = update_cell(&prior, &[0.37; 10]).unwrap();
        for (a, b) in prior.masses.iter().zip(&post.masses) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn delta_prior_is_absorbing() {
        let prior = CellBelief::delta(10, 4);
        let lik: Vec<f64> = (0..10).map(|b| 0.1 + b as f64).collect();
        assert_eq!(update_cell(&prior, &lik).unwrap(), prior);
    }

    #[test]
    fn zero_likelihood_is_flagged() {
        let prior = CellBelief::delta(10, 4);
        let mut lik = vec![1.0; 10];
        lik[4] = 0.0;
        assert!(matches!(update_cell(&prior, &lik), Err(Error::Numerical(_))));
    }

    #[test]
    fn empty_scan_leaves_map() {
        let mut map = ConfidenceRichMap::init_uniform(grid(), 10);
        let before = map.clone();
        map.integrate_scan(&Pose2D::new(0.1, 1.1, 0.0), &Scan::empty(0.0), &BeamModelParams::default())
            .unwrap();
        assert_eq!(map, before);
    }

    #[test]
    fn pose_outside_map() {
        let mut map = ConfidenceRichMap::init_uniform(grid(), 10);
        let r = map.integrate_scan(&Pose2D::new(-1.0, 1.0, 0.0), &one_beam(1.0), &BeamModelParams::default());
        assert!(matches!(r, Err(Error::Domain(_))));
    }

    #[test]
    fn repeated_wall_return_converges_monotonically() {
        let params = BeamModelParams::default();
        let mut map = ConfidenceRichMap::init_uniform(grid(), 10);
        let pose = Pose2D::new(0.1, 1.1, 0.0);
        let g = map.grid().clone();
        // cell 5 ahead has nominal range 0.9 + 0.1
        let hit = g.index(5, 5);
        let free = g.index(2, 5);
        let mut last_e = map.expected(hit);
        let mut last_h = map.cell_entropy(hit);
        for rep in 0..10 {
            map.integrate_scan(&pose, &one_beam(1.0), &params).unwrap();
            let e = map.expected(hit);
            let h = map.cell_entropy(hit);
            assert!(e >= last_e - 1e-12, "rep {rep}: {e} < {last_e}");
            assert!(h <= last_h + 1e-12, "rep {rep}: {h} > {last_h}");
            assert!(map.expected(free) < 0.5);
            last_e = e;
            last_h = h;
        }
        assert!(last_e > 0.8);
    }

    #[test]
    fn update_matches_direct_substitution() {
        let params = BeamModelParams::default();
        let mut map = ConfidenceRichMap::init_uniform(grid(), 10);
        let pose = Pose2D::new(0.1, 1.1, 0.0);
        map.integrate_scan(&pose, &one_beam(1.7), &params).unwrap();
        let before = map.clone();
        let z = 1.0;
        map.integrate_scan(&pose, &one_beam(z), &params).unwrap();
        let trace = trace_ray(before.grid(), &pose, 0.0, params.max_range).unwrap();
        for cell in trace.cells.iter().take(12) {
            let lik: Vec<f64> = (0..10)
                .map(|b| {
                    beam_likelihood_given_cell(z, &trace, before.expected_occupancy(), cell.index, bin_center(b, 10), &params)
                        .unwrap()
                        .mass(params.outcome_bin)
                })
                .collect();
            let want = update_cell(&before.cell(cell.index), &lik).unwrap();
            for (a, b) in want.masses.iter().zip(map.masses(cell.index)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn disjoint_beams_commute() {
        let params = BeamModelParams::default();
        let g = GridSpec::new(30, 30, 0.2, Pose2D::identity()).unwrap();
        let pose = Pose2D::new(3.1, 3.1, 0.0);
        let a = Scan { timestamp: 0.0, beams: vec![Beam { bearing: 0.0, range: 1.0 }], offset: Pose2D::identity() };
        let b = Scan { timestamp: 0.0, beams: vec![Beam { bearing: 1.5707963, range: 0.6 }], offset: Pose2D::identity() };
        let mut m1 = ConfidenceRichMap::init_uniform(g.clone(), 10);
        m1.integrate_scan(&pose, &a, &params).unwrap();
        m1.integrate_scan(&pose, &b, &params).unwrap();
        let mut m2 = ConfidenceRichMap::init_uniform(g, 10);
        m2.integrate_scan(&pose, &b, &params).unwrap();
        m2.integrate_scan(&pose, &a, &params).unwrap();
        for i in 0..m1.grid().cell_count() {
            for (x, y) in m1.masses(i).iter().zip(m2.masses(i)) {
                assert!((x - y).abs() < 1e-15);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn updates_preserve_normalization_and_locality(
            x in 0.5..5.5f64, y in 0.5..1.5f64,
            beams in proptest::collection::vec((-3.1..3.1f64, 0.0..5.0f64), 1..6),
            reps in 1usize..4,
        ) {
            let params = BeamModelParams::default();
            let mut map = ConfidenceRichMap::init_uniform(grid(), 10);
            let pose = Pose2D::new(x, y, 0.0);
            let mut sorted = beams.clone();
            sorted.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
            sorted.dedup_by(|a, b| a.0 == b.0);
            let scan = Scan {
                timestamp: 0.0,
                beams: sorted.iter().map(|&(bearing, range)| Beam { bearing, range }).collect(),
                offset: Pose2D::identity(),
            };
            let mut on_trace = std::collections::HashSet::new();
            for b in &scan.beams {
                for c in trace_ray(map.grid(), &pose, b.bearing, params.max_range).unwrap().cells {
                    on_trace.insert(c.index);
                }
            }
            let before = map.clone();
            for _ in 0..reps {
                map.integrate_scan(&pose, &scan, &params).unwrap();
            }
            for i in 0..map.grid().cell_count() {
                let s: f64 = map.masses(i).iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-9);
                prop_assert!((map.expected(i) - expected_of(map.masses(i))).abs() < 1e-9);
                if !on_trace.contains(&i) {
                    prop_assert_eq!(map.masses(i), before.masses(i));
                }
            }
        }

        #[test]
        fn repeated_single_beam_entropy_nonincreasing(dist in 3usize..20, x0 in 0.02..0.18f64) {
            // wall cell at `dist` cells ahead, noiseless return at its nominal range
            let params = BeamModelParams::default();
            let g = GridSpec::new(30, 3, 0.2, Pose2D::identity()).unwrap();
            let mut map = ConfidenceRichMap::init_uniform(g.clone(), 10);
            let pose = Pose2D::new(x0, 0.3, 0.0);
            let trace = trace_ray(&g, &pose, 0.0, params.max_range).unwrap();
            let z = trace.cell_range(dist - 1).min(params.max_range);
            let hit = trace.cells[dist - 1].index;
            map.integrate_scan(&pose, &one_beam(z), &params).unwrap();
            let mut last = map.cell_entropy(hit);
            for _ in 0..8 {
                map.integrate_scan(&pose, &one_beam(z), &params).unwrap();
                let h = map.cell_entropy(hit);
                prop_assert!(h <= last + 1e-12);
                last = h;
            }
        }
    }
}
