//! Normalized time-series profiles: zero-order-hold CSV tracks in [0, 1].
//!
//! Format: a `time_s,value` header, then one `t,v` row per sample on a
//! uniform grid starting at 0. Lines starting with `#` and blank lines are
//! skipped. The value holds from its timestamp until the next row; the last
//! row holds until `duration_s`.

use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum ProfileError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("line {line}: expected `time_s,value` header")]
    BadHeader { line: usize },
    #[error("line {line}: expected two comma-separated numbers")]
    BadRow { line: usize },
    #[error("line {line}: value {value} outside [0, 1]")]
    ValueRange { line: usize, value: f64 },
    #[error("line {line}: time must advance on a uniform grid starting at 0")]
    BadGrid { line: usize },
    #[error("profile needs at least two rows")]
    TooShort,
    #[error("query window [{t0}, {t1}] outside profile span")]
    OutOfSpan { t0: f64, t1: f64 },
    #[error("step {0} does not divide the profile duration")]
    BadResampleStep(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Profile {
    step_s: f64,
    values: Vec<f64>,
}

impl Profile {
    pub fn new(step_s: f64, values: Vec<f64>) -> Profile {
        assert!(step_s > 0.0 && values.len() >= 2);
        Profile { step_s, values }
    }

    pub fn parse(text: &str) -> Result<Profile, ProfileError> {
        let mut rows: Vec<(f64, f64, usize)> = Vec::new();
        let mut saw_header = false;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if !saw_header {
                let fields: Vec<&str> = line.split(',').map(str::trim).collect();
                if fields != ["time_s", "value"] {
                    return Err(ProfileError::BadHeader { line: i + 1 });
                }
                saw_header = true;
                continue;
            }
            let mut split = line.split(',').map(str::trim);
            let (Some(ts), Some(vs), None) = (split.next(), split.next(), split.next()) else {
                return Err(ProfileError::BadRow { line: i + 1 });
            };
            let (Ok(t), Ok(v)) = (ts.parse::<f64>(), vs.parse::<f64>()) else {
                return Err(ProfileError::BadRow { line: i + 1 });
            };
            if !(0.0..=1.0).contains(&v) {
                return Err(ProfileError::ValueRange { line: i + 1, value: v });
            }
            rows.push((t, v, i + 1));
        }
        if !saw_header {
            return Err(ProfileError::BadHeader { line: 1 });
        }
        if rows.len() < 2 {
            return Err(ProfileError::TooShort);
        }
        if rows[0].0 != 0.0 {
            return Err(ProfileError::BadGrid { line: rows[0].2 });
        }
        let step = rows[1].0 - rows[0].0;
        if step <= 0.0 {
            return Err(ProfileError::BadGrid { line: rows[1].2 });
        }
        for (k, row) in rows.iter().enumerate() {
            if (row.0 - k as f64 * step).abs() > 1e-6 * step {
                return Err(ProfileError::BadGrid { line: row.2 });
            }
        }
        Ok(Profile {
            step_s: step,
            values: rows.into_iter().map(|(_, v, _)| v).collect(),
        })
    }

    pub fn load(path: &Path) -> Result<Profile, ProfileError> {
        let text = std::fs::read_to_string(path).map_err(|source| ProfileError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Profile::parse(&text)
    }

    pub fn step_s(&self) -> f64 {
        self.step_s
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn duration_s(&self) -> f64 {
        self.step_s * self.values.len() as f64
    }

    /// Held value at `t_s`; requires `0 ≤ t_s ≤ duration_s` (the right edge
    /// returns the final sample).
    pub fn sample(&self, t_s: f64) -> Result<f64, ProfileError> {
        if t_s < 0.0 || t_s > self.duration_s() {
            return Err(ProfileError::OutOfSpan { t0: t_s, t1: t_s });
        }
        let idx = ((t_s / self.step_s) as usize).min(self.values.len() - 1);
        Ok(self.values[idx])
    }

    /// Held value with the profile repeated periodically along all of time.
    pub fn sample_periodic(&self, t_s: f64) -> f64 {
        let d = self.duration_s();
        let t = t_s.rem_euclid(d);
        let idx = ((t / self.step_s) as usize).min(self.values.len() - 1);
        self.values[idx]
    }

    /// Exact integral of the hold over `[t0, t1] ⊆ [0, duration]`.
    fn integral(&self, t0: f64, t1: f64) -> f64 {
        let first = (t0 / self.step_s) as usize;
        let mut acc = 0.0;
        let mut k = first.min(self.values.len() - 1);
        loop {
            let seg_start = k as f64 * self.step_s;
            let seg_end = seg_start + self.step_s;
            let lo = t0.max(seg_start);
            let hi = t1.min(seg_end);
            if hi > lo {
                acc += (hi - lo) * self.values[k];
            }
            if seg_end >= t1 || k + 1 == self.values.len() {
                break;
            }
            k += 1;
        }
        acc
    }

    /// Exact mean of the hold over `[t0, t1] ⊆ [0, duration]`.
    pub fn mean(&self, t0: f64, t1: f64) -> Result<f64, ProfileError> {
        if !(0.0 <= t0 && t0 < t1 && t1 <= self.duration_s() + 1e-9) {
            return Err(ProfileError::OutOfSpan { t0, t1 });
        }
        let t1 = t1.min(self.duration_s());
        Ok(self.integral(t0, t1) / (t1 - t0))
    }

    /// Exact mean over any window, repeating the profile periodically.
    pub fn mean_periodic(&self, t0: f64, t1: f64) -> f64 {
        assert!(t1 > t0);
        let d = self.duration_s();
        let total: f64 = self.integral(0.0, d);
        let width = t1 - t0;
        let full_cycles = (width / d).floor();
        let mut acc = full_cycles * total;
        let start = t0.rem_euclid(d);
        let rem = width - full_cycles * d;
        if start + rem <= d {
            acc += self.integral(start, start + rem);
        } else {
            acc += self.integral(start, d);
            acc += self.integral(0.0, start + rem - d);
        }
        acc / width
    }

    /// Re-grids the hold onto `step_s`, which must divide the duration.
    pub fn resample(&self, step_s: f64) -> Result<Profile, ProfileError> {
        if step_s <= 0.0 {
            return Err(ProfileError::BadResampleStep(step_s));
        }
        let count = self.duration_s() / step_s;
        if (count - count.round()).abs() > 1e-9 || count.round() < 2.0 {
            return Err(ProfileError::BadResampleStep(step_s));
        }
        let count = count.round() as usize;
        let values = (0..count)
            .map(|i| {
                let t = i as f64 * step_s;
                let idx = ((t / self.step_s) as usize).min(self.values.len() - 1);
                self.values[idx]
            })
            .collect();
        Ok(Profile {
            step_s,
            values,
        })
    }
}
