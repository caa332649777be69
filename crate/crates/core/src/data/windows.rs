use crate::data::raw::RawRecord;
use crate::error::{Error, Result};

/// All overlapping windows of `window` rows with stride 1.
pub fn extract_windows(series: &[Vec<f64>], window: usize) -> Result<Vec<Vec<Vec<f64>>>> {
    if window == 0 || series.len() < window {
        return Err(Error::Window {
            len: series.len(),
            window,
        });
    }
    Ok((0..=series.len() - window)
        .map(|k| series[k..k + window].to_vec())
        .collect())
}

/// Windows as fully observed raw records, ids `w<k>`.
pub fn window_records(series: &[Vec<f64>], window: usize) -> Result<Vec<RawRecord>> {
    Ok(extract_windows(series, window)?
        .iter()
        .enumerate()
        .map(|(k, rows)| RawRecord::complete(format!("w{k}"), rows))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn series(n: usize) -> Vec<Vec<f64>> {
        (0..n).map(|i| vec![i as f64, -(i as f64)]).collect()
    }

    #[test]
    fn twenty_six_rows_give_three_windows() {
        let w = extract_windows(&series(26), 24).unwrap();
        assert_eq!(w.len(), 3);
        for (k, win) in w.iter().enumerate() {
            for (i, row) in win.iter().enumerate() {
                assert_eq!(row, &series(26)[k + i]);
            }
        }
    }

    #[test]
    fn short_series_is_an_error() {
        assert!(matches!(extract_windows(&series(5), 24), Err(Error::Window { len: 5, window: 24 })));
        assert!(extract_windows(&series(5), 0).is_err());
    }

    proptest! {
        #[test]
        fn window_count_is_len_minus_window_plus_one(len in 1usize..200, window in 1usize..50) {
            prop_assume!(window <= len);
            prop_assert_eq!(extract_windows(&series(len), window).unwrap().len(), len - window + 1);
        }
    }
}
