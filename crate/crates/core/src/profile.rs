//! Fixed-dimension feature profiles.
//!
//! A task setting yields one value per invoked sample, and settings differ
//! in sample count. Each per-kind list is sorted and resampled to `d`
//! points by linear interpolation, giving an empirical quantile curve that
//! the meta-models consume. Profiles for several kinds are concatenated.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{extract_task_features_with, FeatureKind, PplMode};
use crate::records::{InvocationRecord, SettingKey};

pub const DEFAULT_DIMS: usize = 100;

pub const DEFAULT_KINDS: [FeatureKind; 2] = [FeatureKind::Nll, FeatureKind::Ppl];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureProfile {
    pub service_id: String,
    pub task_id: String,
    pub context_id: String,
    pub kinds: Vec<FeatureKind>,
    pub dims: usize,
    pub vector: Vec<f64>,
}

impl FeatureProfile {
    pub fn setting(&self) -> SettingKey {
        SettingKey::new(&self.service_id, &self.task_id, &self.context_id)
    }

    /// The `d` entries belonging to `kind`, if present.
    pub fn segment(&self, kind: FeatureKind) -> Option<&[f64]> {
        let i = self.kinds.iter().position(|k| *k == kind)?;
        Some(&self.vector[i * self.dims..(i + 1) * self.dims])
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims == 0 {
            return Err(Error::invalid("dims", "must be at least 1"));
        }
        if self.kinds.is_empty() {
            return Err(Error::invalid("kinds", "at least one feature kind is required"));
        }
        if self.vector.len() != self.kinds.len() * self.dims {
            return Err(Error::invalid(
                "vector",
                format!(
                    "length {} != {} kinds x {} dims",
                    self.vector.len(),
                    self.kinds.len(),
                    self.dims
                ),
            ));
        }
        if self.vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("vector", "entries must be finite"));
        }
        Ok(())
    }
}

/// Resamples `values` to `d` points along their sorted order.
///
/// Position `n` (1-based) maps to `p = |D| * n / d` in the sorted values
/// (also 1-based); the result blends the neighbours at `floor(p)` and
/// `ceil(p)` by the fractional part of `p`, clamping indices to `[1, |D|]`.
pub fn interpolate_profile(values: &[f64], d: usize) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(Error::EmptyProfile);
    }
    if d == 0 {
        return Err(Error::invalid("dims", "must be at least 1"));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let len = sorted.len();
    let at = |one_based: usize| sorted[one_based.clamp(1, len) - 1];
    Ok((1..=d)
        .map(|n| {
            // Integer arithmetic keeps integral positions exact.
            let num = len * n;
            let lo = num / d;
            let rem = num % d;
            if rem == 0 {
                at(lo)
            } else {
                let frac = rem as f64 / d as f64;
                let (a, b) = (at(lo), at(lo + 1));
                // Equivalent to a(1 - f) + bf, written so rounding can
                // never leave [a, b] or break monotonicity.
                (a + (b - a) * frac).min(b)
            }
        })
        .collect())
}

pub fn build_profile(
    records: &[InvocationRecord],
    kinds: &[FeatureKind],
    d: usize,
) -> Result<FeatureProfile> {
    build_profile_with(records, kinds, d, PplMode::default())
}

/// Profile of one setting: per-kind interpolated curves, concatenated in
/// `kinds` order.
pub fn build_profile_with(
    records: &[InvocationRecord],
    kinds: &[FeatureKind],
    d: usize,
    mode: PplMode,
) -> Result<FeatureProfile> {
    if kinds.is_empty() {
        return Err(Error::invalid("kinds", "at least one feature kind is required"));
    }
    let feats = extract_task_features_with(records, kinds, mode)?;
    let mut vector = Vec::with_capacity(kinds.len() * d);
    for k in kinds {
        vector.extend(interpolate_profile(&feats[k], d)?);
    }
    let first = &records[0];
    let profile = FeatureProfile {
        service_id: first.service_id.clone(),
        task_id: first.task_id.clone(),
        context_id: first.context_id.clone(),
        kinds: kinds.to_vec(),
        dims: d,
        vector,
    };
    profile.validate()?;
    Ok(profile)
}

/// Profile cache: one JSON profile per line.
pub fn write_profiles(profiles: &[FeatureProfile], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for p in profiles {
        let line = serde_json::to_string(p).expect("profiles always serialize");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_profiles(path: impl AsRef<Path>) -> Result<Vec<FeatureProfile>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let p: FeatureProfile = serde_json::from_str(&line).map_err(|e| Error::Validation {
            line: i + 1,
            field: "profile".into(),
            message: e.to_string(),
        })?;
        p.validate().map_err(|e| match e {
            Error::Invalid { field, message } => Error::Validation {
                line: i + 1,
                field,
                message,
            },
            other => other,
        })?;
        out.push(p);
    }
    Ok(out)
}
