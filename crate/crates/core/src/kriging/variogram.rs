use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::euclidean;

/// Binning of space-time pairs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VariogramConfig {
    /// Equal-width spatial bins above zero distance.
    pub space_bins: usize,
    /// Largest binned distance; half the largest pairwise distance if absent.
    pub max_distance: Option<f64>,
    /// Largest time lag in steps; `min(T − 1, 10)` if absent.
    pub max_time_lag: Option<usize>,
}

impl Default for VariogramConfig {
    fn default() -> Self {
        Self {
            space_bins: 12,
            max_distance: None,
            max_time_lag: None,
        }
    }
}

/// Semivariance per (spatial bin, time lag) cell.
///
/// Row 0 holds pairs at zero spatial distance (the same location at
/// different times); rows `1..=space_bins` the equal-width bins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalVariogram {
    /// Edges of the equal-width bins, `space_bins + 1` values starting at 0.
    pub space_edges: Vec<f64>,
    /// Time lag of each column in time units.
    pub time_lags: Vec<f64>,
    #[serde(with = "crate::serde_matrix")]
    pub gamma: DMatrix<f64>,
    /// Mean pair distance per cell (zero where empty).
    #[serde(with = "crate::serde_matrix")]
    pub distance: DMatrix<f64>,
    #[serde(with = "crate::serde_matrix")]
    pub counts: DMatrix<f64>,
}

/// One populated cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VariogramCell {
    pub h_s: f64,
    pub h_t: f64,
    pub gamma: f64,
    pub count: f64,
}

impl EmpiricalVariogram {
    pub fn cells(&self) -> Vec<VariogramCell> {
        let mut out = Vec::new();
        for b in 0..self.gamma.nrows() {
            for l in 0..self.gamma.ncols() {
                if self.counts[(b, l)] > 0.0 {
                    out.push(VariogramCell {
                        h_s: self.distance[(b, l)],
                        h_t: self.time_lags[l],
                        gamma: self.gamma[(b, l)],
                        count: self.counts[(b, l)],
                    });
                }
            }
        }
        out
    }

    /// Count-weighted average of variograms sharing the same binning.
    pub fn pool(parts: &[EmpiricalVariogram]) -> Result<EmpiricalVariogram> {
        let first = parts.first().ok_or_else(|| Error::invalid("no variograms to pool"))?;
        let shape = first.gamma.shape();
        let mut gamma = DMatrix::<f64>::zeros(shape.0, shape.1);
        let mut distance = DMatrix::<f64>::zeros(shape.0, shape.1);
        let mut counts = DMatrix::<f64>::zeros(shape.0, shape.1);
        for part in parts {
            if part.space_edges != first.space_edges || part.time_lags != first.time_lags {
                return Err(Error::invalid("variograms use different binning"));
            }
            gamma += part.gamma.component_mul(&part.counts);
            distance += part.distance.component_mul(&part.counts);
            counts += &part.counts;
        }
        for k in 0..counts.len() {
            if counts[k] > 0.0 {
                gamma[k] /= counts[k];
                distance[k] /= counts[k];
            }
        }
        Ok(EmpiricalVariogram {
            space_edges: first.space_edges.clone(),
            time_lags: first.time_lags.clone(),
            gamma,
            distance,
            counts,
        })
    }

    /// CSV with columns `h_s_center,h_t,gamma,count`, populated cells only.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        wtr.write_record(["h_s_center", "h_t", "gamma", "count"])?;
        for cell in self.cells() {
            wtr.write_record([
                cell.h_s.to_string(),
                cell.h_t.to_string(),
                cell.gamma.to_string(),
                cell.count.to_string(),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Semivariogram `½·mean (v_a − v_b)²` of a field observed on every
/// location at every time.
///
/// `values` is `n × T`; times must be equally spaced.
pub fn empirical_variogram(
    locations: &DMatrix<f64>,
    times: &DVector<f64>,
    values: &DMatrix<f64>,
    config: VariogramConfig,
) -> Result<EmpiricalVariogram> {
    let (n, t_len) = values.shape();
    if locations.nrows() != n || times.len() != t_len {
        return Err(Error::invalid("values do not match locations and times"));
    }
    if n * t_len < 2 {
        return Err(Error::invalid("need at least two points"));
    }
    if config.space_bins == 0 {
        return Err(Error::invalid("need at least one spatial bin"));
    }
    let coords: Vec<Vec<f64>> = locations.row_iter().map(|r| r.iter().copied().collect()).collect();
    let mut max_pair: f64 = 0.0;
    for a in 0..n {
        for b in (a + 1)..n {
            max_pair = max_pair.max(euclidean(&coords[a], &coords[b]));
        }
    }
    let max_distance = config.max_distance.unwrap_or(max_pair / 2.0);
    if !(max_distance > 0.0) && n > 1 {
        return Err(Error::invalid("all locations coincide; spatial bins are degenerate"));
    }
    let max_lag = config.max_time_lag.unwrap_or(10).min(t_len - 1);
    let step = if t_len > 1 { times[1] - times[0] } else { 1.0 };
    let width = max_distance / config.space_bins as f64;
    let rows = config.space_bins + 1;
    let mut sum_sq = DMatrix::<f64>::zeros(rows, max_lag + 1);
    let mut sum_d = DMatrix::<f64>::zeros(rows, max_lag + 1);
    let mut counts = DMatrix::<f64>::zeros(rows, max_lag + 1);

    for a in 0..n {
        let va = values.row(a);
        for b in a..n {
            let d = if a == b { 0.0 } else { euclidean(&coords[a], &coords[b]) };
            let bin = if d == 0.0 {
                0
            } else if d <= max_distance {
                1 + (((d / width).ceil() as usize).max(1) - 1).min(config.space_bins - 1)
            } else {
                continue;
            };
            let vb = values.row(b);
            for lag in 0..=max_lag {
                if a == b && lag == 0 {
                    continue;
                }
                let mut acc = 0.0;
                let mut count = 0usize;
                for t in 0..(t_len - lag) {
                    acc += (va[t] - vb[t + lag]).powi(2);
                    count += 1;
                    if a != b && lag > 0 {
                        acc += (va[t + lag] - vb[t]).powi(2);
                        count += 1;
                    }
                }
                sum_sq[(bin, lag)] += acc;
                sum_d[(bin, lag)] += d * count as f64;
                counts[(bin, lag)] += count as f64;
            }
        }
    }
    let mut gamma = DMatrix::<f64>::zeros(rows, max_lag + 1);
    let mut distance = DMatrix::<f64>::zeros(rows, max_lag + 1);
    for k in 0..counts.len() {
        if counts[k] > 0.0 {
            gamma[k] = 0.5 * sum_sq[k] / counts[k];
            distance[k] = sum_d[k] / counts[k];
        }
    }
    Ok(EmpiricalVariogram {
        space_edges: (0..=config.space_bins).map(|k| k as f64 * width).collect(),
        time_lags: (0..=max_lag).map(|l| l as f64 * step).collect(),
        gamma,
        distance,
        counts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn times(t: usize) -> DVector<f64> {
        DVector::from_fn(t, |i, _| (i + 1) as f64)
    }

    #[test]
    fn constant_field_has_zero_semivariance() {
        let s = DMatrix::from_fn(6, 2, |i, j| (i * 3 + j) as f64 * 0.1);
        let v = DMatrix::from_element(6, 4, 2.5);
        let emp = empirical_variogram(&s, &times(4), &v, VariogramConfig::default()).unwrap();
        assert!(emp.gamma.iter().all(|g| *g == 0.0));
        assert!(emp.counts.sum() > 0.0);
    }

    #[test]
    fn single_pair_formula() {
        let s = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 1.0, 0.0]);
        let v = DMatrix::from_row_slice(2, 1, &[0.0, 2.0]);
        let config = VariogramConfig {
            space_bins: 4,
            max_distance: Some(2.0),
            max_time_lag: None,
        };
        let emp = empirical_variogram(&s, &times(1), &v, config).unwrap();
        let cells = emp.cells();
        assert_eq!(cells.len(), 1);
        assert_eq!(cells[0].gamma, 2.0);
        assert_eq!(cells[0].h_s, 1.0);
        assert_eq!(emp.counts[(2, 0)], 1.0);
    }

    /// Brute force over all ordered point pairs.
    #[test]
    fn matches_brute_force_pairs() {
        let s = DMatrix::from_row_slice(4, 2, &[0.0, 0.0, 0.3, 0.1, 0.9, 0.5, 0.2, 0.8]);
        let v = DMatrix::from_fn(4, 5, |i, t| ((i * 7 + t * 3) as f64).sin());
        let config = VariogramConfig {
            space_bins: 3,
            max_distance: Some(1.2),
            max_time_lag: Some(2),
        };
        let emp = empirical_variogram(&s, &times(5), &v, config).unwrap();
        let mut sums = DMatrix::<f64>::zeros(4, 3);
        let mut cnt = DMatrix::<f64>::zeros(4, 3);
        for a in 0..4 {
            for b in 0..4 {
                for ta in 0..5usize {
                    for tb in 0..5usize {
                        let lag = ta.abs_diff(tb);
                        if (a, ta) >= (b, tb) || lag > 2 {
                            continue;
                        }
                        let d = ((s[(a, 0)] - s[(b, 0)]).powi(2) + (s[(a, 1)] - s[(b, 1)]).powi(2)).sqrt();
                        let bin = if d == 0.0 { 0 } else if d <= 1.2 { 1 + ((d / 0.4).ceil() as usize - 1).min(2) } else { continue };
                        sums[(bin, lag)] += 0.5 * (v[(a, ta)] - v[(b, tb)]).powi(2);
                        cnt[(bin, lag)] += 1.0;
                    }
                }
            }
        }
        assert_eq!(emp.counts, cnt);
        for k in 0..cnt.len() {
            if cnt[k] > 0.0 {
                assert!((emp.gamma[k] - sums[k] / cnt[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pooling_weights_by_counts() {
        let s = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 1.0, 0.0]);
        let config = VariogramConfig {
            space_bins: 2,
            max_distance: Some(2.0),
            max_time_lag: Some(0),
        };
        let a = empirical_variogram(&s, &times(1), &DMatrix::from_row_slice(2, 1, &[0.0, 2.0]), config).unwrap();
        let b = empirical_variogram(&s, &times(1), &DMatrix::from_row_slice(2, 1, &[0.0, 4.0]), config).unwrap();
        let pooled = EmpiricalVariogram::pool(&[a, b]).unwrap();
        assert_eq!(pooled.cells()[0].gamma, 5.0);
        assert_eq!(pooled.cells()[0].count, 2.0);
    }

    #[test]
    fn csv_export_has_header_and_rows() {
        let s = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 1.0, 0.0]);
        let emp = empirical_variogram(&s, &times(3), &DMatrix::from_fn(2, 3, |i, t| (i + t) as f64), VariogramConfig::default())
            .unwrap();
        let mut buf = Vec::new();
        emp.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("h_s_center,h_t,gamma,count\n"));
        assert_eq!(text.lines().count(), 1 + emp.cells().len());
    }
}
