//! Per-step training metrics and the append-only metrics log.

use std::io::{BufRead, Write};
use std::path::Path;

use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::objective::POSITION_BINS;
use crate::rollout::RolloutMode;

/// One line of `metrics.log`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub step: u64,
    pub mode: RolloutMode,
    pub mean_reward: f64,
    pub loss: f64,
    pub clip_frac: f64,
    pub clip_frac_prefix: f64,
    pub clip_frac_suffix: f64,
    /// Mean current-policy entropy per normalized position bin; `None` for empty bins.
    pub entropy_decile: [Option<f64>; POSITION_BINS],
    pub clip_decile: [f64; POSITION_BINS],
    pub lr: f64,
    pub grad_norm: f64,
    pub mean_resp_len: f64,
    pub prefix_tokens: usize,
    pub suffix_tokens: usize,
    /// Largest `|ratio - 1|` over current-policy tokens, first update of the step.
    pub max_suffix_ratio_dev: f64,
    pub updates: usize,
    pub gen_batches: usize,
}

fn num(v: f64) -> Value {
    serde_json::Number::from_f64(v).map_or(Value::Null, Value::Number)
}

fn get_f64(map: &Map<String, Value>, key: &str) -> Result<f64> {
    match map.get(key) {
        Some(Value::Number(n)) => n.as_f64().ok_or_else(|| Error::Parse(format!("{key}: not a number"))),
        // Non-finite values are written as null.
        Some(Value::Null) => Ok(f64::NAN),
        _ => Err(Error::Parse(format!("metrics record is missing {key:?}"))),
    }
}

fn get_u64(map: &Map<String, Value>, key: &str) -> Result<u64> {
    map.get(key)
        .and_then(Value::as_u64)
        .ok_or_else(|| Error::Parse(format!("metrics record is missing {key:?}")))
}

impl MetricsRecord {
    pub fn to_json(&self) -> Value {
        let mut m = Map::new();
        m.insert("step".into(), self.step.into());
        m.insert("mode".into(), self.mode.to_string().into());
        m.insert("mean_reward".into(), num(self.mean_reward));
        m.insert("loss".into(), num(self.loss));
        m.insert("clip_frac".into(), num(self.clip_frac));
        m.insert("clip_frac_prefix".into(), num(self.clip_frac_prefix));
        m.insert("clip_frac_suffix".into(), num(self.clip_frac_suffix));
        for (i, e) in self.entropy_decile.iter().enumerate() {
            m.insert(format!("entropy_decile_{i}"), e.map_or(Value::Null, num));
        }
        for (i, c) in self.clip_decile.iter().enumerate() {
            m.insert(format!("clip_decile_{i}"), num(*c));
        }
        m.insert("lr".into(), num(self.lr));
        m.insert("grad_norm".into(), num(self.grad_norm));
        m.insert("mean_resp_len".into(), num(self.mean_resp_len));
        m.insert("prefix_tokens".into(), self.prefix_tokens.into());
        m.insert("suffix_tokens".into(), self.suffix_tokens.into());
        m.insert("max_suffix_ratio_dev".into(), num(self.max_suffix_ratio_dev));
        m.insert("updates".into(), self.updates.into());
        m.insert("gen_batches".into(), self.gen_batches.into());
        Value::Object(m)
    }

    pub fn to_line(&self) -> String {
        self.to_json().to_string()
    }

    pub fn from_line(line: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(line)?;
        let m = value
            .as_object()
            .ok_or_else(|| Error::Parse("metrics record is not an object".into()))?;
        let mode = m
            .get("mode")
            .and_then(Value::as_str)
            .ok_or_else(|| Error::Parse("metrics record is missing \"mode\"".into()))?
            .parse()?;
        let mut entropy_decile = [None; POSITION_BINS];
        let mut clip_decile = [0.0; POSITION_BINS];
        for i in 0..POSITION_BINS {
            let key = format!("entropy_decile_{i}");
            entropy_decile[i] = match m.get(&key) {
                Some(Value::Null) => None,
                _ => Some(get_f64(m, &key)?),
            };
            clip_decile[i] = get_f64(m, &format!("clip_decile_{i}"))?;
        }
        Ok(MetricsRecord {
            step: get_u64(m, "step")?,
            mode,
            mean_reward: get_f64(m, "mean_reward")?,
            loss: get_f64(m, "loss")?,
            clip_frac: get_f64(m, "clip_frac")?,
            clip_frac_prefix: get_f64(m, "clip_frac_prefix")?,
            clip_frac_suffix: get_f64(m, "clip_frac_suffix")?,
            entropy_decile,
            clip_decile,
            lr: get_f64(m, "lr")?,
            grad_norm: get_f64(m, "grad_norm")?,
            mean_resp_len: get_f64(m, "mean_resp_len")?,
            prefix_tokens: get_u64(m, "prefix_tokens")? as usize,
            suffix_tokens: get_u64(m, "suffix_tokens")? as usize,
            max_suffix_ratio_dev: get_f64(m, "max_suffix_ratio_dev")?,
            updates: get_u64(m, "updates")? as usize,
            gen_batches: get_u64(m, "gen_batches")? as usize,
        })
    }
}

/// Appends records to the log, one JSON object per line.
pub fn append_metrics(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    let file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for r in records {
        writeln!(w, "{}", r.to_line()).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = MetricsRecord::from_line(&line)
            .map_err(|e| Error::Parse(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

/// Mean entropy per bin over a window of records, skipping empty bins.
pub fn mean_entropy_profile(records: &[MetricsRecord]) -> [Option<f64>; POSITION_BINS] {
    let mut out = [None; POSITION_BINS];
    for (b, slot) in out.iter_mut().enumerate() {
        let vals: Vec<f64> = records.iter().filter_map(|r| r.entropy_decile[b]).collect();
        if !vals.is_empty() {
            *slot = Some(vals.iter().sum::<f64>() / vals.len() as f64);
        }
    }
    out
}

/// Least-squares slope of the profile against bin index, over nonempty bins.
pub fn profile_slope(profile: &[Option<f64>; POSITION_BINS]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = profile
        .iter()
        .enumerate()
        .filter_map(|(i, v)| v.map(|v| (i as f64, v)))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    Some(sxy / sxx)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> MetricsRecord {
        let mut entropy_decile = [Some(0.5); POSITION_BINS];
        entropy_decile[3] = None;
        MetricsRecord {
            step: 7,
            mode: RolloutMode::Soup,
            mean_reward: 0.375,
            loss: -0.0123456789012345,
            clip_frac: 0.1,
            clip_frac_prefix: 0.2,
            clip_frac_suffix: 0.0,
            entropy_decile,
            clip_decile: [0.05; POSITION_BINS],
            lr: 3e-3,
            grad_norm: 1.25,
            mean_resp_len: 2.5,
            prefix_tokens: 40,
            suffix_tokens: 60,
            max_suffix_ratio_dev: 1e-15,
            updates: 1,
            gen_batches: 1,
        }
    }

    #[test]
    fn fixed_field_names() {
        let v = sample().to_json();
        let m = v.as_object().unwrap();
        for key in ["step", "mode", "mean_reward", "loss", "clip_frac_prefix", "clip_frac_suffix", "lr", "grad_norm"] {
            assert!(m.contains_key(key), "{key}");
        }
        for i in 0..POSITION_BINS {
            assert!(m.contains_key(&format!("entropy_decile_{i}")));
            assert!(m.contains_key(&format!("clip_decile_{i}")));
        }
        assert_eq!(m["mode"], "soup");
        assert!(m["entropy_decile_3"].is_null());
    }

    #[test]
    fn line_round_trip() {
        let r = sample();
        assert_eq!(MetricsRecord::from_line(&r.to_line()).unwrap(), r);
        assert!(MetricsRecord::from_line("{\"step\":1}").is_err());
    }

    #[test]
    fn log_appends() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.log");
        let mut r = sample();
        append_metrics(&path, &[r.clone()]).unwrap();
        r.step = 8;
        append_metrics(&path, &[r.clone()]).unwrap();
        let back = read_metrics(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[1], r);
    }

    #[test]
    fn slope_of_linear_profile() {
        let mut p = [None; POSITION_BINS];
        for (i, v) in p.iter_mut().enumerate() {
            *v = Some(2.0 - 0.25 * i as f64);
        }
        assert!((profile_slope(&p).unwrap() + 0.25).abs() < 1e-12);
        p[0] = None;
        p[9] = None;
        assert!((profile_slope(&p).unwrap() + 0.25).abs() < 1e-12);
        let mut q = [None; POSITION_BINS];
        q[2] = Some(1.0);
        assert_eq!(profile_slope(&q), None);
    }

    #[test]
    fn profile_averages_present_values() {
        let mut a = sample();
        let mut b = sample();
        a.entropy_decile[0] = Some(1.0);
        b.entropy_decile[0] = Some(0.0);
        b.entropy_decile[3] = Some(2.0);
        let p = mean_entropy_profile(&[a, b]);
        assert_eq!(p[0], Some(0.5));
        assert_eq!(p[3], Some(2.0));
    }
}
