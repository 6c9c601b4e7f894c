//! Lead-lag statistics between lower-layer readings and throughput.

use std::io::Write;

use crate::error::{AbrError, Result};
use crate::trace::Trace;

/// `R_{X,C}(tau) = 1/(N - tau) * sum_{n} X_n C_{n+tau}` with raw products.
pub fn cross_correlation(x: &[f64], c: &[f64], tau: usize) -> Result<f64> {
    let n = x.len().min(c.len());
    if x.len() != c.len() {
        return Err(AbrError::Validation(format!(
            "sequences differ in length ({} vs {})",
            x.len(),
            c.len()
        )));
    }
    if tau >= n {
        return Err(AbrError::Validation(format!("lag {tau} must be below sequence length {n}")));
    }
    let sum: f64 = x[..n - tau].iter().zip(&c[tau..]).map(|(a, b)| a * b).sum();
    Ok(sum / (n - tau) as f64)
}

pub fn auto_correlation(c: &[f64], tau: usize) -> Result<f64> {
    cross_correlation(c, c, tau)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CorrelationRow {
    pub tau: usize,
    pub r_xc: f64,
    pub r_cc: f64,
}

/// MAC-rate/throughput cross-correlation and throughput auto-correlation for
/// `tau = 0..=tau_max`, averaged over traces.
pub fn correlation_table(traces: &[Trace], tau_max: usize) -> Result<Vec<CorrelationRow>> {
    if traces.is_empty() {
        return Err(AbrError::Validation("no traces to analyze".into()));
    }
    let per_trace: Vec<(Vec<f64>, Vec<f64>)> = traces.iter().map(|t| (t.mac_rates(), t.throughputs())).collect();
    (0..=tau_max)
        .map(|tau| {
            let mut r_xc = 0.0;
            let mut r_cc = 0.0;
            for (x, c) in &per_trace {
                r_xc += cross_correlation(x, c, tau)?;
                r_cc += auto_correlation(c, tau)?;
            }
            let m = per_trace.len() as f64;
            Ok(CorrelationRow { tau, r_xc: r_xc / m, r_cc: r_cc / m })
        })
        .collect()
}

pub fn write_correlation_csv<W: Write>(rows: &[CorrelationRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["tau", "R_xc", "R_cc"])?;
    for r in rows {
        w.write_record([r.tau.to_string(), r.r_xc.to_string(), r.r_cc.to_string()])?;
    }
    w.flush().map_err(|e| AbrError::io("<correlation csv>", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn two_sample_hand_value() {
        assert_eq!(cross_correlation(&[1.0, 2.0], &[2.0, 4.0], 0).unwrap(), 5.0);
        assert_eq!(cross_correlation(&[1.0, 2.0], &[2.0, 4.0], 1).unwrap(), 4.0);
    }

    #[test]
    fn lag_out_of_domain() {
        assert!(cross_correlation(&[1.0, 2.0], &[2.0, 4.0], 2).is_err());
    }

    #[test]
    fn lagged_copy_peaks_at_one() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let x: Vec<f64> = (0..400).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut c = vec![0.0];
        c.extend(x[..399].iter().map(|v| v + 0.01 * rng.random_range(-1.0..1.0)));
        let best = (0..6)
            .max_by(|a, b| {
                cross_correlation(&x, &c, *a)
                    .unwrap()
                    .total_cmp(&cross_correlation(&x, &c, *b).unwrap())
            })
            .unwrap();
        assert_eq!(best, 1);
    }

    proptest! {
        #[test]
        fn constant_sequence_gives_square(v in 0.01f64..10.0, n in 1usize..50, tau_frac in 0.0f64..1.0) {
            let c = vec![v; n];
            let tau = ((n - 1) as f64 * tau_frac) as usize;
            let r = auto_correlation(&c, tau).unwrap();
            prop_assert!((r - v * v).abs() <= 1e-12 * v * v);
        }
    }
}
