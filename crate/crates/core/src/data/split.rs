use super::{NormStats, STDataset};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: STDataset,
    pub val: STDataset,
    pub test: STDataset,
}

/// Contiguous chronological train/val/test segments.
///
/// Train and validation sizes are `round(T·f)`; test takes the remainder.
/// Every segment must hold at least `min_frames` frames (one window plus its
/// target), and all three carry normalization stats of the train segment.
pub fn chrono_split(
    ds: &STDataset,
    fractions: (f64, f64, f64),
    min_frames: usize,
) -> Result<Splits> {
    let (ft, fv, fs) = fractions;
    if !(ft > 0.0 && fv > 0.0 && fs > 0.0) || ((ft + fv + fs) - 1.0).abs() > 1e-9 {
        return Err(Error::usage(format!(
            "split fractions must be positive and sum to 1, got ({ft}, {fv}, {fs})"
        )));
    }
    let total = ds.len();
    let n_train = (total as f64 * ft).round() as usize;
    let n_val = (total as f64 * fv).round() as usize;
    let n_test = total.saturating_sub(n_train + n_val);
    let min = min_frames.max(1);
    if n_train < min || n_val < min || n_test < min || n_train + n_val > total {
        return Err(Error::usage(format!(
            "{total} frames split {n_train}/{n_val}/{n_test}; each split needs at least {min}"
        )));
    }
    let mut train = ds.range(0, n_train)?;
    let stats = NormStats::from_values(train.frames.data());
    train.norm = Some(stats);
    let mut val = ds.range(n_train, n_val)?;
    val.norm = Some(stats);
    let mut test = ds.range(n_train + n_val, n_test)?;
    test.norm = Some(stats);
    Ok(Splits { train, val, test })
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowedSample {
    /// History `[n, c, h, w]`, oldest first.
    pub x: Tensor,
    /// The next `horizon` frames folded into channels: `[horizon·c, h, w]`.
    pub y: Tensor,
    /// Index of the first target frame within the source dataset.
    pub target_index: usize,
}

/// Stride-1 sliding windows over `ds`: `T − n − horizon + 1` samples.
pub fn make_windows(ds: &STDataset, n: usize, horizon: usize) -> Result<Vec<WindowedSample>> {
    if n == 0 || horizon == 0 {
        return Err(Error::usage("window and horizon must be positive"));
    }
    let t_len = ds.len();
    if t_len < n + horizon {
        return Err(Error::usage(format!(
            "{t_len} frames cannot hold a window of {n} plus {horizon} target frame(s)"
        )));
    }
    let (c, h, w) = ds.frame_dims();
    let frame = c * h * w;
    let data = ds.frames.data();
    (0..=t_len - n - horizon)
        .map(|s| {
            let x = Tensor::new(vec![n, c, h, w], data[s * frame..(s + n) * frame].to_vec())?;
            let t = s + n;
            let y = Tensor::new(
                vec![horizon * c, h, w],
                data[t * frame..(t + horizon) * frame].to_vec(),
            )?;
            Ok(WindowedSample {
                x,
                y,
                target_index: t,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::{Duration, NaiveDate};

    fn ramp(t_len: usize) -> STDataset {
        let start = NaiveDate::from_ymd_opt(2020, 5, 1)
            .unwrap()
            .and_hms_opt(0, 0, 0)
            .unwrap();
        let ts = (0..t_len)
            .map(|i| start + Duration::minutes(15 * i as i64))
            .collect();
        let frames = Tensor::from_fn(&[t_len, 1, 1, 2], |i| (i / 2) as f64);
        STDataset::new(frames, ts, 15).unwrap()
    }

    #[test]
    fn split_counts() {
        let s = chrono_split(&ramp(100), (0.85, 0.05, 0.10), 1).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (85, 5, 10));
        let s = chrono_split(&ramp(9), (1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0), 1).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (3, 3, 3));
    }

    #[test]
    fn split_uses_train_stats_everywhere() {
        let s = chrono_split(&ramp(10), (0.6, 0.2, 0.2), 1).unwrap();
        let expect = NormStats::from_values(&[0., 0., 1., 1., 2., 2., 3., 3., 4., 4., 5., 5.]);
        assert_eq!(s.train.norm, Some(expect));
        assert_eq!(s.test.norm, Some(expect));
        assert!(s.train.timestamps.last() < s.val.timestamps.first());
    }

    #[test]
    fn split_rejects_bad_fractions_and_short_segments() {
        assert!(chrono_split(&ramp(100), (0.5, 0.5, 0.0), 1).is_err());
        assert!(chrono_split(&ramp(100), (0.5, 0.3, 0.3), 1).is_err());
        assert!(matches!(
            chrono_split(&ramp(100), (0.85, 0.05, 0.10), 9),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn window_counts_and_targets() {
        let ws = make_windows(&ramp(10), 8, 1).unwrap();
        assert_eq!(ws.len(), 2);
        assert_eq!(ws[0].y.data(), &[8.0, 8.0]);
        assert_eq!(ws[0].x.data().last(), Some(&7.0));
        let ws = make_windows(&ramp(10), 4, 3).unwrap();
        assert_eq!(ws.len(), 4);
        assert_eq!(ws[0].y.shape(), &[3, 1, 2]);
        assert_eq!(ws[0].y.data(), &[4., 4., 5., 5., 6., 6.]);
        assert!(matches!(make_windows(&ramp(8), 8, 1), Err(Error::Usage(_))));
    }
}
