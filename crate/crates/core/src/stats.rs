//! Ensemble statistics: histograms, kernel-density mode, moments and L1
//! distances between densities.

use thiserror::Error;

use crate::fpe::{DensityGrid, FpeError, GridSpec};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StatsError {
    #[error("sample set is empty")]
    Empty,
    #[error("sample {0} is not finite")]
    NonFinite(f64),
    #[error("need at least {needed} samples (got {got})")]
    TooFew { needed: usize, got: usize },
    #[error("all {0} samples fall outside the histogram range")]
    AllOutOfRange(usize),
    #[error("densities live on different grids")]
    GridMismatch,
    #[error(transparent)]
    Grid(#[from] FpeError),
}

/// One marginal coordinate of an ensemble at a fixed time.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    values: Vec<f64>,
}

impl SampleSet {
    pub fn new(values: Vec<f64>) -> Result<Self, StatsError> {
        if values.is_empty() {
            return Err(StatsError::Empty);
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(StatsError::NonFinite(*v));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub density: DensityGrid,
    pub out_of_range: usize,
}

/// Normalized histogram with closed-open cells; the last cell is closed.
pub fn histogram(samples: &SampleSet, spec: GridSpec) -> Result<Histogram, StatsError> {
    let mut counts = vec![0.0; spec.n_cells];
    let mut outside = 0;
    for &x in samples.values() {
        match spec.cell_of(x) {
            Some(i) => counts[i] += 1.0,
            None => outside += 1,
        }
    }
    let inside = samples.len() - outside;
    if inside == 0 {
        return Err(StatsError::AllOutOfRange(samples.len()));
    }
    let scale = 1.0 / (inside as f64 * spec.dx());
    for c in &mut counts {
        *c *= scale;
    }
    Ok(Histogram {
        density: DensityGrid::new(spec, counts)?,
        out_of_range: outside,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Moments {
    pub mean: f64,
    /// Unbiased (n - 1) variance.
    pub variance: f64,
    pub std_error: f64,
}

pub fn moments(samples: &SampleSet) -> Result<Moments, StatsError> {
    let v = samples.values();
    if v.len() < 2 {
        return Err(StatsError::TooFew {
            needed: 2,
            got: v.len(),
        });
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let variance = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(Moments {
        mean,
        variance,
        std_error: (variance / n).sqrt(),
    })
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KdeMode {
    pub mode: f64,
    pub bandwidth: f64,
}

const KDE_SCAN_POINTS: usize = 512;

/// Mode of a Gaussian-kernel density estimate with Silverman bandwidth
/// `0.9 * min(sd, IQR / 1.34) * N^(-1/5)`.
///
/// Scans 512 points across the sample range, then refines around the best
/// one by golden-section search.
pub fn kde_mode(samples: &SampleSet) -> Result<KdeMode, StatsError> {
    if samples.len() < 100 {
        return Err(StatsError::TooFew {
            needed: 100,
            got: samples.len(),
        });
    }
    // sorting first makes the estimate exactly permutation invariant
    let mut sorted = samples.values().to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mean = sorted.iter().sum::<f64>() / n;
    let sd = (sorted.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    if sd == 0.0 {
        return Ok(KdeMode {
            mode: sorted[0],
            bandwidth: 0.0,
        });
    }
    let iqr = quantile(&sorted, 0.75) - quantile(&sorted, 0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    let h = 0.9 * spread * n.powf(-0.2);

    let density = |x: f64| -> f64 {
        // kernels beyond 8 bandwidths contribute below 1e-14 relative
        let lo = sorted.partition_point(|v| *v < x - 8.0 * h);
        let hi = sorted.partition_point(|v| *v <= x + 8.0 * h);
        sorted[lo..hi]
            .iter()
            .map(|v| {
                let u = (x - v) / h;
                (-0.5 * u * u).exp()
            })
            .sum()
    };

    let (min, max) = (sorted[0], sorted[sorted.len() - 1]);
    let step = (max - min) / (KDE_SCAN_POINTS - 1) as f64;
    let mut best = (min, f64::NEG_INFINITY);
    for k in 0..KDE_SCAN_POINTS {
        let x = min + k as f64 * step;
        let f = density(x);
        if f > best.1 {
            best = (x, f);
        }
    }

    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (best.0 - step, best.0 + step);
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (density(c), density(d));
    while (b - a) > 1e-10 * h.max(f64::MIN_POSITIVE) {
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = density(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = density(d);
        }
    }
    let refined = 0.5 * (a + b);
    let mode = if density(refined) >= best.1 { refined } else { best.0 };
    Ok(KdeMode { mode, bandwidth: h })
}

/// `Σ |a_i - b_i| Δx` on a shared grid.
pub fn l1_distance(a: &DensityGrid, b: &DensityGrid) -> Result<f64, StatsError> {
    if a.spec() != b.spec() {
        return Err(StatsError::GridMismatch);
    }
    Ok(a.values()
        .iter()
        .zip(b.values())
        .map(|(x, y)| (x - y).abs())
        .sum::<f64>()
        * a.dx())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn normals(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.sample(StandardNormal)).collect()
    }

    #[test]
    fn histogram_examples() {
        let spec = GridSpec::new(0.0, 1.0, 2).unwrap();
        let h = histogram(&SampleSet::new(vec![0.5]).unwrap(), spec).unwrap();
        assert_eq!(h.density.values(), &[0.0, 2.0]);
        let h = histogram(&SampleSet::new(vec![1.0, 0.0, 3.0]).unwrap(), spec).unwrap();
        assert_eq!(h.density.values(), &[1.0, 1.0]);
        assert_eq!(h.out_of_range, 1);
        assert!(matches!(
            histogram(&SampleSet::new(vec![5.0, 6.0]).unwrap(), spec),
            Err(StatsError::AllOutOfRange(2))
        ));
    }

    #[test]
    fn histogram_matches_gaussian() {
        let spec = GridSpec::new(-5.0, 5.0, 100).unwrap();
        let h = histogram(&SampleSet::new(normals(1_000_000, 1)).unwrap(), spec).unwrap();
        let exact = DensityGrid::gaussian(spec, 0.0, 1.0).unwrap();
        let d = l1_distance(&h.density, &exact).unwrap();
        assert!(d <= 0.01, "{d}");
        assert!((h.density.mass() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn moments_examples() {
        let m = moments(&SampleSet::new(vec![1.0, 2.0, 3.0]).unwrap()).unwrap();
        assert_eq!(m.mean, 2.0);
        assert_eq!(m.variance, 1.0);
        assert!((m.std_error - 1.0 / 3f64.sqrt()).abs() < 1e-15);
        let draws: Vec<f64> = normals(1_000_000, 2).iter().map(|z| 0.1 * z).collect();
        assert!(moments(&SampleSet::new(draws).unwrap()).unwrap().mean.abs() < 4e-4);
        assert!(matches!(
            moments(&SampleSet::new(vec![1.0]).unwrap()),
            Err(StatsError::TooFew { .. })
        ));
        assert!(SampleSet::new(vec![]).is_err());
        assert!(SampleSet::new(vec![f64::NAN]).is_err());
    }

    #[test]
    fn kde_examples() {
        let k = kde_mode(&SampleSet::new(normals(100_000, 3)).unwrap()).unwrap();
        assert!(k.mode.abs() < 0.05, "{k:?}");
        let same = kde_mode(&SampleSet::new(vec![3.0; 200]).unwrap()).unwrap();
        assert_eq!(
            same,
            KdeMode {
                mode: 3.0,
                bandwidth: 0.0
            }
        );
        assert!(kde_mode(&SampleSet::new(vec![1.0; 10]).unwrap()).is_err());
    }

    #[test]
    fn kde_is_permutation_and_shift_equivariant() {
        let v = normals(5_000, 4);
        let base = kde_mode(&SampleSet::new(v.clone()).unwrap()).unwrap();
        let mut rev = v.clone();
        rev.reverse();
        assert_eq!(kde_mode(&SampleSet::new(rev).unwrap()).unwrap(), base);
        let shifted: Vec<f64> = v.iter().map(|x| x + 7.25).collect();
        let s = kde_mode(&SampleSet::new(shifted).unwrap()).unwrap();
        assert!(
            (s.mode - base.mode - 7.25).abs() < 1e-9 * 7.25,
            "{} vs {}",
            s.mode,
            base.mode
        );
    }

    #[test]
    fn l1_examples() {
        let spec = GridSpec::new(0.0, 2.0, 2).unwrap();
        let a = DensityGrid::new(spec, vec![1.0, 0.0]).unwrap();
        let b = DensityGrid::new(spec, vec![0.0, 1.0]).unwrap();
        assert_eq!(l1_distance(&a, &a).unwrap(), 0.0);
        assert_eq!(l1_distance(&a, &b).unwrap(), 2.0);
        let other = DensityGrid::new(GridSpec::new(0.0, 1.0, 2).unwrap(), vec![1.0, 1.0]).unwrap();
        assert!(matches!(l1_distance(&a, &other), Err(StatsError::GridMismatch)));
    }

    #[test]
    fn l1_of_shifted_gaussian() {
        // oracle: 2 * (2Φ(s/2) - 1) for unit Gaussians a shift s apart, by
        // Simpson quadrature of |φ(x) - φ(x - s)|
        let oracle = |s: f64| {
            let phi = |x: f64| (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
            let (lo, hi, n) = (-12.0, 12.0, 24_000);
            let h = (hi - lo) / n as f64;
            let f = |x: f64| (phi(x) - phi(x - s)).abs();
            let mut acc = f(lo) + f(hi);
            for k in 1..n {
                acc += f(lo + k as f64 * h) * if k % 2 == 1 { 4.0 } else { 2.0 };
            }
            acc * h / 3.0
        };
        let spec = GridSpec::new(-10.0, 10.0, 4000).unwrap();
        let a = DensityGrid::gaussian(spec, 0.0, 1.0).unwrap();
        let mut last = 0.0;
        for s in [0.05, 0.1, 0.2] {
            let b = DensityGrid::gaussian(spec, s, 1.0).unwrap();
            let d = l1_distance(&a, &b).unwrap();
            assert!((d - oracle(s)).abs() < 1e-3, "shift {s}: {d} vs {}", oracle(s));
            assert!(d > last);
            last = d;
        }
        assert!((oracle(0.1) - 0.0798).abs() < 1e-3);
    }

    proptest! {
        #[test]
        fn l1_is_a_metric(
            a in proptest::collection::vec(0.0f64..1.0, 16),
            b in proptest::collection::vec(0.0f64..1.0, 16),
            c in proptest::collection::vec(0.0f64..1.0, 16),
        ) {
            let spec = GridSpec::new(0.0, 1.0, 16).unwrap();
            let g = |v: Vec<f64>| DensityGrid::new(spec, v).unwrap();
            let (a, b, c) = (g(a), g(b), g(c));
            let ab = l1_distance(&a, &b).unwrap();
            prop_assert!((ab - l1_distance(&b, &a).unwrap()).abs() <= 1e-12);
            prop_assert!(l1_distance(&a, &c).unwrap() <= ab + l1_distance(&b, &c).unwrap() + 1e-12);
        }

        #[test]
        fn histogram_is_normalized(v in proptest::collection::vec(-2.0f64..2.0, 1..200)) {
            let spec = GridSpec::new(-1.0, 1.0, 10).unwrap();
            if let Ok(h) = histogram(&SampleSet::new(v).unwrap(), spec) {
                prop_assert!((h.density.mass() - 1.0).abs() <= 1e-9);
            }
        }
    }
}
