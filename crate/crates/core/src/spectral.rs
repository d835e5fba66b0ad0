//! Energy grids, dual-source spectra, basis-material attenuation and the
//! poly-energetic expected-count model.

use alloc::format;
use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{dim_err, Error, Result};

/// Uniformly spaced energy samples (keV).
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyGrid {
    energies: Vec<f64>,
    delta_e: f64,
}

impl EnergyGrid {
    /// Grid `start, start + step, ...` up to and including `stop` (within rounding).
    pub fn uniform(start: f64, stop: f64, step: f64) -> Result<Self> {
        if !(step > 0.0) || !(stop > start) || !start.is_finite() || !stop.is_finite() {
            return Err(Error::Validation(format!(
                "energy grid needs start < stop and step > 0, got {start}..{stop} step {step}"
            )));
        }
        let n = libm::floor((stop - start) / step + 1e-9) as usize + 1;
        if n < 2 {
            return Err(Error::Validation("energy grid needs at least 2 nodes".to_string()));
        }
        let energies = (0..n).map(|i| start + i as f64 * step).collect();
        Ok(Self {
            energies,
            delta_e: step,
        })
    }

    /// 20–120 keV at 1 keV spacing.
    pub fn diagnostic() -> Self {
        Self::uniform(20.0, 120.0, 1.0).expect("static grid")
    }

    pub fn energies(&self) -> &[f64] {
        &self.energies
    }

    pub fn delta_e(&self) -> f64 {
        self.delta_e
    }

    pub fn len(&self) -> usize {
        self.energies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.energies.is_empty()
    }

    pub fn min(&self) -> f64 {
        self.energies[0]
    }

    pub fn max(&self) -> f64 {
        self.energies[self.energies.len() - 1]
    }

    /// Index of the node closest to `energy`.
    pub fn nearest_index(&self, energy: f64) -> usize {
        let raw = libm::round((energy - self.min()) / self.delta_e);
        raw.clamp(0.0, (self.len() - 1) as f64) as usize
    }
}

/// A tabulated function of energy: one energy column and one or two value columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub energies: Vec<f64>,
    pub columns: Vec<Vec<f64>>,
}

impl Table {
    /// Parses whitespace-separated text. Lines starting with `#` and blank
    /// lines are skipped. Every data row must carry the same number of
    /// columns (2 or 3) and energies must be strictly increasing.
    pub fn parse(text: &str) -> Result<Self> {
        let mut energies = Vec::new();
        let mut columns: Vec<Vec<f64>> = Vec::new();
        let mut width = 0usize;
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<f64> = line
                .split_whitespace()
                .map(|f| {
                    f.parse::<f64>().map_err(|_| Error::Parse {
                        line: line_no,
                        message: format!("not a number: {f:?}"),
                    })
                })
                .collect::<Result<_>>()?;
            if fields.iter().any(|v| !v.is_finite()) {
                return Err(Error::Parse {
                    line: line_no,
                    message: "non-finite value".to_string(),
                });
            }
            if width == 0 {
                if !(2..=3).contains(&fields.len()) {
                    return Err(Error::Parse {
                        line: line_no,
                        message: format!("expected 2 or 3 columns, found {}", fields.len()),
                    });
                }
                width = fields.len();
                columns = vec![Vec::new(); width - 1];
            } else if fields.len() != width {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("expected {width} columns, found {}", fields.len()),
                });
            }
            if let Some(&last) = energies.last() {
                if !(fields[0] > last) {
                    return Err(Error::Parse {
                        line: line_no,
                        message: format!("energy {} not greater than previous {last}", fields[0]),
                    });
                }
            }
            energies.push(fields[0]);
            for (col, v) in columns.iter_mut().zip(&fields[1..]) {
                col.push(*v);
            }
        }
        if energies.len() < 2 {
            return Err(Error::Parse {
                line: text.lines().count(),
                message: "table needs at least 2 data rows".to_string(),
            });
        }
        Ok(Self { energies, columns })
    }

    /// Linearly interpolates column `col` onto every node of `grid`.
    pub fn resample(&self, col: usize, grid: &EnergyGrid) -> Result<Vec<f64>> {
        let values = self
            .columns
            .get(col)
            .ok_or_else(|| dim_err(format!("table has no value column {col}")))?;
        let (tmin, tmax) = (self.energies[0], self.energies[self.energies.len() - 1]);
        let tol = 1e-9 * grid.delta_e();
        if tmin > grid.min() + tol || tmax < grid.max() - tol {
            return Err(Error::Range {
                table_min: tmin,
                table_max: tmax,
                grid_min: grid.min(),
                grid_max: grid.max(),
            });
        }
        let mut out = Vec::with_capacity(grid.len());
        let mut seg = 0usize;
        for &e in grid.energies() {
            while seg + 2 < self.energies.len() && e > self.energies[seg + 1] {
                seg += 1;
            }
            let (e0, e1) = (self.energies[seg], self.energies[seg + 1]);
            let t = ((e - e0) / (e1 - e0)).clamp(0.0, 1.0);
            let v = if t == 0.0 {
                values[seg]
            } else if t == 1.0 {
                values[seg + 1]
            } else {
                values[seg] + t * (values[seg + 1] - values[seg])
            };
            out.push(v);
        }
        Ok(out)
    }
}

/// Photon fractions per energy node for the two sources, plus the photon
/// count per ray. Each row sums to one; `i0` carries the flux.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    grid: EnergyGrid,
    rows: [Vec<f64>; 2],
    i0: f64,
}

/// Built-in source spectrum families.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SyntheticSpectrum {
    /// All photons of source k at a single energy.
    DeltaPair { low_kev: f64, high_kev: f64 },
    /// Triangular shapes `(start, mode, end)` in keV for each source.
    TriangularPair {
        low: (f64, f64, f64),
        high: (f64, f64, f64),
    },
}

impl SyntheticSpectrum {
    /// Low source 20–80 keV peaking at 45 keV, high source 30–120 keV peaking at 70 keV.
    pub const DEFAULT_TRIANGULAR: SyntheticSpectrum = SyntheticSpectrum::TriangularPair {
        low: (20.0, 45.0, 80.0),
        high: (30.0, 70.0, 120.0),
    };
}

fn triangle(e: f64, (lo, mode, hi): (f64, f64, f64)) -> f64 {
    if e <= lo || e >= hi {
        0.0
    } else if e <= mode {
        (e - lo) / (mode - lo)
    } else {
        (hi - e) / (hi - mode)
    }
}

impl Spectrum {
    /// Normalizes each row to unit sum. Rows must be nonnegative with positive mass.
    pub fn new(grid: EnergyGrid, rows: [Vec<f64>; 2], i0: f64) -> Result<Self> {
        if !(i0 > 0.0) || !i0.is_finite() {
            return Err(Error::Validation(format!("i0 must be positive, got {i0}")));
        }
        let mut rows = rows;
        for (k, row) in rows.iter_mut().enumerate() {
            if row.len() != grid.len() {
                return Err(dim_err(format!(
                    "spectrum row {k} has {} entries, grid has {}",
                    row.len(),
                    grid.len()
                )));
            }
            if row.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(Error::Validation(format!(
                    "spectrum row {k} has negative or non-finite weights"
                )));
            }
            let total: f64 = row.iter().sum();
            if !(total > 0.0) {
                return Err(Error::Validation(format!("spectrum row {k} has zero mass")));
            }
            row.iter_mut().for_each(|v| *v /= total);
        }
        Ok(Self { grid, rows, i0 })
    }

    /// A three-column table gives both sources; two two-column tables give one source each.
    pub fn from_tables(tables: &[&Table], grid: &EnergyGrid, i0: f64) -> Result<Self> {
        let rows = match tables {
            [t] if t.columns.len() == 2 => [t.resample(0, grid)?, t.resample(1, grid)?],
            [a, b] if a.columns.len() == 1 && b.columns.len() == 1 => [a.resample(0, grid)?, b.resample(0, grid)?],
            _ => {
                return Err(dim_err(
                    "spectrum needs one three-column table or two two-column tables",
                ))
            }
        };
        Self::new(grid.clone(), rows, i0)
    }

    pub fn synthetic(kind: SyntheticSpectrum, grid: &EnergyGrid, i0: f64) -> Result<Self> {
        let n = grid.len();
        let rows = match kind {
            SyntheticSpectrum::DeltaPair { low_kev, high_kev } => {
                let mut rows = [vec![0.0; n], vec![0.0; n]];
                for (row, e) in rows.iter_mut().zip([low_kev, high_kev]) {
                    let idx = grid.nearest_index(e);
                    let node = grid.energies()[idx];
                    if libm::fabs(node - e) > 1e-9 * grid.delta_e() {
                        log::warn!("delta energy {e} keV is off-grid, snapped to {node} keV");
                    }
                    row[idx] = 1.0;
                }
                rows
            }
            SyntheticSpectrum::TriangularPair { low, high } => {
                for (lo, mode, hi) in [low, high] {
                    if !(lo < mode && mode < hi) {
                        return Err(Error::Validation(format!(
                            "triangular spectrum needs start < mode < end, got ({lo}, {mode}, {hi})"
                        )));
                    }
                }
                [
                    grid.energies().iter().map(|&e| triangle(e, low)).collect(),
                    grid.energies().iter().map(|&e| triangle(e, high)).collect(),
                ]
            }
        };
        Self::new(grid.clone(), rows, i0)
    }

    pub fn grid(&self) -> &EnergyGrid {
        &self.grid
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.rows[k]
    }

    pub fn i0(&self) -> f64 {
        self.i0
    }

    pub fn with_i0(mut self, i0: f64) -> Result<Self> {
        if !(i0 > 0.0) || !i0.is_finite() {
            return Err(Error::Validation(format!("i0 must be positive, got {i0}")));
        }
        self.i0 = i0;
        Ok(self)
    }
}

/// Mass attenuation (cm²/mg) of the two basis materials on an energy grid.
#[derive(Debug, Clone, PartialEq)]
pub struct MaterialBasis {
    grid: EnergyGrid,
    phi: [Vec<f64>; 2],
}

/// Klein–Nishina total cross-section up to a constant factor.
fn klein_nishina(e_kev: f64) -> f64 {
    let k = e_kev / 511.0;
    let l = libm::log(1.0 + 2.0 * k);
    (1.0 + k) / (k * k) * (2.0 * (1.0 + k) / (1.0 + 2.0 * k) - l / k) + l / (2.0 * k)
        - (1.0 + 3.0 * k) / ((1.0 + 2.0 * k) * (1.0 + 2.0 * k))
}

impl MaterialBasis {
    pub fn new(grid: EnergyGrid, phi: [Vec<f64>; 2]) -> Result<Self> {
        for (s, row) in phi.iter().enumerate() {
            if row.len() != grid.len() {
                return Err(dim_err(format!(
                    "basis row {s} has {} entries, grid has {}",
                    row.len(),
                    grid.len()
                )));
            }
            if row.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
                return Err(Error::Validation(format!(
                    "mass attenuation of material {} must be positive",
                    s + 1
                )));
            }
        }
        // 2x2 Gram matrix eigenvalue ratio
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let (g11, g12, g22) = (dot(&phi[0], &phi[0]), dot(&phi[0], &phi[1]), dot(&phi[1], &phi[1]));
        let tr = g11 + g22;
        let det = g11 * g22 - g12 * g12;
        let disc = libm::sqrt((tr * tr / 4.0 - det).max(0.0));
        let (lmax, lmin) = (tr / 2.0 + disc, tr / 2.0 - disc);
        if !(lmin > 1e-12 * lmax) {
            return Err(Error::Validation(
                "basis materials are linearly dependent on this grid".to_string(),
            ));
        }
        Ok(Self { grid, phi })
    }

    pub fn from_table(table: &Table, grid: &EnergyGrid) -> Result<Self> {
        if table.columns.len() != 2 {
            return Err(dim_err("material basis table needs three columns"));
        }
        Self::new(grid.clone(), [table.resample(0, grid)?, table.resample(1, grid)?])
    }

    /// Synthetic photoelectric + Compton basis pair.
    ///
    /// Material 1 is soft-tissue-like (Compton dominated); material 2 carries a
    /// strong photoelectric term. Both are normalized at 30 keV.
    pub fn synthetic(grid: &EnergyGrid) -> Result<Self> {
        let kn30 = klein_nishina(30.0);
        let model = |photo: f64, compton: f64| -> Vec<f64> {
            grid.energies()
                .iter()
                .map(|&e| {
                    let r = 30.0 / e;
                    photo * r * r * r + compton * klein_nishina(e) / kn30
                })
                .collect()
        };
        Self::new(grid.clone(), [model(0.10e-3, 0.19e-3), model(0.90e-3, 0.17e-3)])
    }

    pub fn grid(&self) -> &EnergyGrid {
        &self.grid
    }

    pub fn phi(&self, s: usize) -> &[f64] {
        &self.phi[s]
    }
}

/// Precomputed spectral forward map `p -> (expected counts per source)`.
#[derive(Debug, Clone)]
pub struct SpectralModel {
    spectrum: Spectrum,
    basis: MaterialBasis,
}

impl SpectralModel {
    pub fn new(spectrum: Spectrum, basis: MaterialBasis) -> Result<Self> {
        if spectrum.grid() != basis.grid() {
            return Err(dim_err("spectrum and basis are sampled on different energy grids"));
        }
        Ok(Self { spectrum, basis })
    }

    pub fn spectrum(&self) -> &Spectrum {
        &self.spectrum
    }

    pub fn basis(&self) -> &MaterialBasis {
        &self.basis
    }

    pub fn i0(&self) -> f64 {
        self.spectrum.i0
    }

    /// Expected detected counts of both sources for material line integrals `p` (mg/cm²).
    pub fn expected_counts(&self, p: [f64; 2]) -> [f64; 2] {
        let (phi1, phi2) = (&self.basis.phi[0], &self.basis.phi[1]);
        let mut acc = [0.0f64; 2];
        for e in 0..phi1.len() {
            let t = libm::exp(-(p[0] * phi1[e] + p[1] * phi2[e]));
            acc[0] += self.spectrum.rows[0][e] * t;
            acc[1] += self.spectrum.rows[1][e] * t;
        }
        [self.spectrum.i0 * acc[0], self.spectrum.i0 * acc[1]]
    }

    /// Noiseless log measurement `h(p) = -log(counts / i0)`.
    pub fn log_attenuation(&self, p: [f64; 2]) -> [f64; 2] {
        let c = self.expected_counts(p);
        let i0 = self.spectrum.i0;
        [-libm::log(c[0] / i0), -libm::log(c[1] / i0)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::String;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_grid() -> EnergyGrid {
        EnergyGrid::uniform(20.0, 30.0, 1.0).unwrap()
    }

    #[test]
    fn grid_is_uniform_and_inclusive() {
        let g = EnergyGrid::diagnostic();
        assert_eq!(g.len(), 101);
        assert_eq!(g.min(), 20.0);
        assert_eq!(g.max(), 120.0);
        assert!(EnergyGrid::uniform(10.0, 10.0, 1.0).is_err());
        assert!(EnergyGrid::uniform(10.0, 20.0, 0.0).is_err());
    }

    #[test]
    fn table_at_grid_nodes_is_verbatim() {
        let g = small_grid();
        let mut text = String::from("# energy value\n");
        let values: Vec<f64> = (0..g.len()).map(|i| 0.1 + 0.37 * i as f64).collect();
        for (e, v) in g.energies().iter().zip(&values) {
            text.push_str(&format!("{e} {v}\n"));
        }
        let t = Table::parse(&text).unwrap();
        assert_eq!(t.resample(0, &g).unwrap(), values);
    }

    #[test]
    fn two_node_table_midpoint_is_mean() {
        let t = Table::parse("20 3.0\n30 5.0\n").unwrap();
        let g = EnergyGrid::uniform(20.0, 30.0, 5.0).unwrap();
        let v = t.resample(0, &g).unwrap();
        assert_eq!(v, vec![3.0, 4.0, 5.0]);
    }

    #[test]
    fn random_table_matches_pointwise_interpolation() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut energies = vec![15.0];
        for _ in 0..9 {
            let last = *energies.last().unwrap();
            energies.push(last + rng.random_range(3.0..20.0));
        }
        let values: Vec<f64> = (0..10).map(|_| rng.random_range(0.0..2.0)).collect();
        let text: String = energies
            .iter()
            .zip(&values)
            .map(|(e, v)| format!("{e:.17e}\t{v:.17e}\n"))
            .collect();
        let table = Table::parse(&text).unwrap();
        let grid = EnergyGrid::uniform(20.0, energies[9] - 1.0, 0.5).unwrap();
        let got = table.resample(0, &grid).unwrap();
        for (e, v) in grid.energies().iter().zip(got) {
            // independent oracle: locate the bracketing pair by scanning
            let k = (0..9).find(|&k| energies[k] <= *e && *e <= energies[k + 1]).unwrap();
            let t = (e - energies[k]) / (energies[k + 1] - energies[k]);
            let expect = (1.0 - t) * values[k] + t * values[k + 1];
            assert!((v - expect).abs() <= 1e-12, "at {e}: {v} vs {expect}");
        }
    }

    #[test]
    fn malformed_rows_report_line_numbers() {
        let err = Table::parse("# header\n20 1\n21 x\n").unwrap_err();
        assert_eq!(
            err,
            Error::Parse {
                line: 3,
                message: "not a number: \"x\"".into()
            }
        );
        match Table::parse("20 1\n21 1 2\n").unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            e => panic!("unexpected {e:?}"),
        }
        match Table::parse("20 1\n19 1\n").unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn uncovered_grid_is_a_range_error() {
        let t = Table::parse("25 1\n40 1\n").unwrap();
        assert!(matches!(t.resample(0, &small_grid()), Err(Error::Range { .. })));
    }

    #[test]
    fn loaded_spectrum_rows_are_renormalized() {
        let t = Table::parse("20 1 2\n25 3 4\n30 1 0\n").unwrap();
        let s = Spectrum::from_tables(&[&t], &small_grid(), 10.0).unwrap();
        for k in 0..2 {
            assert!((s.row(k).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let a = Table::parse("20 1\n30 1\n").unwrap();
        let b = Table::parse("20 0\n30 1\n").unwrap();
        let s2 = Spectrum::from_tables(&[&a, &b], &small_grid(), 10.0).unwrap();
        assert!((s2.row(0)[0] - 1.0 / 11.0).abs() < 1e-15);
        assert_eq!(s2.row(1)[0], 0.0);
    }

    #[test]
    fn delta_pair_is_one_hot() {
        let g = EnergyGrid::diagnostic();
        let s = Spectrum::synthetic(
            SyntheticSpectrum::DeltaPair {
                low_kev: 50.0,
                high_kev: 80.0,
            },
            &g,
            1e5,
        )
        .unwrap();
        for (k, e) in [(0, 50.0), (1, 80.0)] {
            let nonzero: Vec<usize> = (0..g.len()).filter(|&i| s.row(k)[i] != 0.0).collect();
            assert_eq!(nonzero.len(), 1);
            assert_eq!(g.energies()[nonzero[0]], e);
            assert_eq!(s.row(k)[nonzero[0]], 1.0);
        }
        assert_eq!(s.i0(), 1e5);
    }

    #[test]
    fn off_grid_delta_snaps_to_nearest_node() {
        let g = EnergyGrid::diagnostic();
        let s = Spectrum::synthetic(
            SyntheticSpectrum::DeltaPair {
                low_kev: 50.4,
                high_kev: 200.0,
            },
            &g,
            1.0,
        )
        .unwrap();
        assert_eq!(s.row(0)[g.nearest_index(50.0)], 1.0);
        assert_eq!(s.row(1)[g.len() - 1], 1.0);
    }

    #[test]
    fn triangular_pair_rows_sum_to_one() {
        let g = EnergyGrid::diagnostic();
        let s = Spectrum::synthetic(SyntheticSpectrum::DEFAULT_TRIANGULAR, &g, 1e5).unwrap();
        for k in 0..2 {
            assert!((s.row(k).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            assert!(s.row(k).iter().all(|v| *v >= 0.0));
        }
        assert_eq!(s.i0(), 1e5);
    }

    #[test]
    fn rejects_dependent_or_nonpositive_basis() {
        let g = small_grid();
        let row: Vec<f64> = (0..g.len()).map(|i| 1.0 + i as f64).collect();
        let twice: Vec<f64> = row.iter().map(|v| 2.0 * v).collect();
        assert!(MaterialBasis::new(g.clone(), [row.clone(), twice]).is_err());
        let mut bad = row.clone();
        bad[3] = 0.0;
        assert!(MaterialBasis::new(g, [row, bad]).is_err());
    }

    fn delta_model() -> SpectralModel {
        let g = EnergyGrid::diagnostic();
        let s = Spectrum::synthetic(
            SyntheticSpectrum::DeltaPair {
                low_kev: 50.0,
                high_kev: 80.0,
            },
            &g,
            1e5,
        )
        .unwrap();
        SpectralModel::new(s, MaterialBasis::synthetic(&g).unwrap()).unwrap()
    }

    #[test]
    fn zero_path_gives_full_flux() {
        let g = EnergyGrid::diagnostic();
        let s = Spectrum::synthetic(SyntheticSpectrum::DEFAULT_TRIANGULAR, &g, 1e5).unwrap();
        let m = SpectralModel::new(s, MaterialBasis::synthetic(&g).unwrap()).unwrap();
        let c = m.expected_counts([0.0, 0.0]);
        assert!((c[0] - 1e5).abs() < 1e-7 && (c[1] - 1e5).abs() < 1e-7);
        assert_eq!(m.log_attenuation([0.0, 0.0]).map(|v| v.abs() < 1e-14), [true, true]);
    }

    #[test]
    fn delta_spectrum_is_beer_lambert() {
        let m = delta_model();
        let g = m.basis().grid();
        let (i50, i80) = (g.nearest_index(50.0), g.nearest_index(80.0));
        let p = [1200.0, 300.0];
        let c = m.expected_counts(p);
        let phi = |s: usize, i: usize| m.basis().phi(s)[i];
        let e50 = 1e5 * libm::exp(-p[0] * phi(0, i50) - p[1] * phi(1, i50));
        let e80 = 1e5 * libm::exp(-p[0] * phi(0, i80) - p[1] * phi(1, i80));
        assert!((c[0] - e50).abs() <= 1e-9 * e50);
        assert!((c[1] - e80).abs() <= 1e-9 * e80);
    }

    #[test]
    fn three_node_grid_matches_hand_sum() {
        let g = EnergyGrid::uniform(40.0, 60.0, 10.0).unwrap();
        let s = Spectrum::new(g.clone(), [vec![0.2, 0.5, 0.3], vec![0.0, 0.25, 0.75]], 1000.0).unwrap();
        let b = MaterialBasis::new(g, [vec![3e-4, 2e-4, 1.5e-4], vec![9e-4, 5e-4, 3e-4]]).unwrap();
        let m = SpectralModel::new(s, b).unwrap();
        let p = [1000.0, 500.0];
        let att = [
            libm::exp(-(0.3 + 0.45)),
            libm::exp(-(0.2 + 0.25)),
            libm::exp(-(0.15 + 0.15)),
        ];
        let expect0 = 1000.0 * (0.2 * att[0] + 0.5 * att[1] + 0.3 * att[2]);
        let expect1 = 1000.0 * (0.25 * att[1] + 0.75 * att[2]);
        let c = m.expected_counts(p);
        assert!((c[0] - expect0).abs() < 1e-9);
        assert!((c[1] - expect1).abs() < 1e-9);
    }

    #[test]
    fn delta_log_attenuation_is_linear() {
        let m = delta_model();
        let a = m.log_attenuation([700.0, 100.0]);
        let b = m.log_attenuation([300.0, 900.0]);
        let ab = m.log_attenuation([1000.0, 1000.0]);
        for k in 0..2 {
            assert!((a[k] + b[k] - ab[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn grid_mismatch_is_rejected() {
        let g1 = EnergyGrid::diagnostic();
        let g2 = EnergyGrid::uniform(20.0, 120.0, 2.0).unwrap();
        let s = Spectrum::synthetic(SyntheticSpectrum::DEFAULT_TRIANGULAR, &g1, 1.0).unwrap();
        let b = MaterialBasis::synthetic(&g2).unwrap();
        assert!(matches!(SpectralModel::new(s, b), Err(Error::Dimension(_))));
    }
}
