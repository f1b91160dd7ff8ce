//! Weight-level checkpoint merging: linear averaging, SLERP and TIES.
//!
//! Each method has a vector-level form operating on `f64` slices and a
//! checkpoint-level form that applies it tensor by tensor. Checkpoint values
//! are widened to `f64` for arithmetic and stored back as `f32`. Within a
//! tensor every reduction runs in a fixed order, so results do not depend on
//! how tensors are scheduled across threads.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, Tensor, TensorCheckpoint};
use crate::error::{Error, Result};

/// SLERP falls back to linear interpolation when `sin Ω` is below this.
pub const SLERP_PARALLEL_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MergeMethod {
    Linear,
    Slerp,
    Ties,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeSpec {
    pub method: MergeMethod,
    pub inputs: Vec<PathBuf>,
    #[serde(default)]
    pub weights: Option<Vec<f64>>,
    #[serde(default)]
    pub t: Option<f64>,
    #[serde(default)]
    pub base: Option<PathBuf>,
    #[serde(default = "default_density")]
    pub density: f64,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
}

fn default_density() -> f64 {
    0.2
}
fn default_lambda() -> f64 {
    1.0
}

impl MergeSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        match self.method {
            MergeMethod::Linear => {
                let w = match &self.weights {
                    Some(w) => w,
                    None => return fail("linear merge needs --weights".into()),
                };
                validate_linear_weights(w, self.inputs.len())
            }
            MergeMethod::Slerp => {
                if self.inputs.len() != 2 {
                    return fail(format!("slerp merges exactly 2 inputs, got {}", self.inputs.len()));
                }
                match self.t {
                    Some(t) if (0.0..=1.0).contains(&t) => Ok(()),
                    Some(t) => fail(format!("slerp t = {t} outside [0, 1]")),
                    None => fail("slerp needs --t".into()),
                }
            }
            MergeMethod::Ties => {
                if self.base.is_none() {
                    return fail("ties merge needs --base".into());
                }
                if self.inputs.is_empty() {
                    return fail("ties merge needs at least one input".into());
                }
                validate_ties_params(self.density, self.lambda)
            }
        }
    }
}

fn validate_linear_weights(weights: &[f64], inputs: usize) -> Result<()> {
    if weights.len() != inputs {
        return Err(Error::Config(format!(
            "{} weights for {inputs} inputs",
            weights.len()
        )));
    }
    if inputs == 0 {
        return Err(Error::Config("linear merge needs at least one input".into()));
    }
    if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
        return Err(Error::Config("linear weights must be finite and nonnegative".into()));
    }
    if !(weights.iter().sum::<f64>() > 0.0) {
        return Err(Error::Config("linear weights must not all be zero".into()));
    }
    Ok(())
}

fn validate_ties_params(density: f64, lambda: f64) -> Result<()> {
    if !(density > 0.0 && density <= 1.0) {
        return Err(Error::Config(format!("ties density {density} outside (0, 1]")));
    }
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::Config(format!("ties lambda {lambda} must be positive")));
    }
    Ok(())
}

/// Fails on the first tensor (in name order) whose presence, shape or dtype differs.
pub fn check_schema(reference: &TensorCheckpoint, other: &TensorCheckpoint) -> Result<()> {
    let mut names: Vec<&String> = reference.tensors.keys().chain(other.tensors.keys()).collect();
    names.sort();
    names.dedup();
    for name in names {
        match (reference.tensors.get(name), other.tensors.get(name)) {
            (Some(a), Some(b)) => {
                if a.shape != b.shape {
                    return Err(Error::Schema {
                        tensor: name.clone(),
                        message: format!("shape {:?} vs {:?}", a.shape, b.shape),
                    });
                }
                if a.dtype != b.dtype {
                    return Err(Error::Schema {
                        tensor: name.clone(),
                        message: format!("dtype {} vs {}", a.dtype.as_str(), b.dtype.as_str()),
                    });
                }
            }
            (Some(_), None) => {
                return Err(Error::Schema {
                    tensor: name.clone(),
                    message: "missing from the second checkpoint".into(),
                })
            }
            (None, _) => {
                return Err(Error::Schema {
                    tensor: name.clone(),
                    message: "missing from the first checkpoint".into(),
                })
            }
        }
    }
    Ok(())
}

fn widen(t: &Tensor) -> Vec<f64> {
    t.data.iter().map(|&v| v as f64).collect()
}

/// Applies `f` to every tensor, in parallel, keeping the reference schema.
fn map_tensors<F>(reference: &TensorCheckpoint, f: F) -> Result<BTreeMap<String, Tensor>>
where
    F: Fn(&str) -> Result<Vec<f64>> + Sync,
{
    reference
        .tensors
        .par_iter()
        .map(|(name, t)| {
            let values = f(name)?;
            let data = values.into_iter().map(|v| v as f32).collect();
            Ok((name.clone(), Tensor::new(t.dtype, t.shape.clone(), data)?))
        })
        .collect()
}

/// `Σ wᵢ·vᵢ / Σ wᵢ`, accumulated in input order.
pub fn linear_vectors(vectors: &[&[f64]], weights: &[f64]) -> Vec<f64> {
    let total: f64 = weights.iter().sum();
    let normalized: Vec<f64> = weights.iter().map(|w| w / total).collect();
    let len = vectors.first().map_or(0, |v| v.len());
    (0..len)
        .map(|i| {
            vectors
                .iter()
                .zip(&normalized)
                .fold(0.0, |acc, (v, w)| acc + w * v[i])
        })
        .collect()
}

pub fn merge_linear(ckpts: &[&TensorCheckpoint], weights: &[f64]) -> Result<TensorCheckpoint> {
    validate_linear_weights(weights, ckpts.len())?;
    let reference = ckpts[0];
    for other in &ckpts[1..] {
        check_schema(reference, other)?;
    }
    let tensors = map_tensors(reference, |name| {
        let widened: Vec<Vec<f64>> = ckpts.iter().map(|c| widen(&c.tensors[name])).collect();
        let views: Vec<&[f64]> = widened.iter().map(Vec::as_slice).collect();
        Ok(linear_vectors(&views, weights))
    })?;
    let total: f64 = weights.iter().sum();
    let normalized: Vec<f64> = weights.iter().map(|w| w / total).collect();
    let mut metadata = BTreeMap::new();
    metadata.insert("merge_method".into(), "linear".into());
    metadata.insert("merge_weights".into(), serde_json::to_string(&normalized)?);
    Ok(TensorCheckpoint { tensors, metadata })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |acc, (x, y)| acc + x * y)
}

/// Outcome of interpolating one pair of vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Slerped {
    pub values: Vec<f64>,
    /// True when the linear fallback was used (parallel or zero-norm input).
    pub linear_fallback: bool,
}

/// Spherical interpolation of the unnormalized vectors along the angle between
/// their normalized copies.
pub fn slerp_vectors(v0: &[f64], v1: &[f64], t: f64) -> Slerped {
    let lerp = |linear_fallback| Slerped {
        values: v0.iter().zip(v1).map(|(a, b)| (1.0 - t) * a + t * b).collect(),
        linear_fallback,
    };
    let n0 = dot(v0, v0).sqrt();
    let n1 = dot(v1, v1).sqrt();
    if n0 == 0.0 || n1 == 0.0 {
        return lerp(true);
    }
    let cos = (dot(v0, v1) / (n0 * n1)).clamp(-1.0, 1.0);
    let omega = cos.acos();
    let sin_omega = omega.sin();
    if sin_omega < SLERP_PARALLEL_EPS {
        return lerp(true);
    }
    let s0 = ((1.0 - t) * omega).sin() / sin_omega;
    let s1 = (t * omega).sin() / sin_omega;
    Slerped {
        values: v0.iter().zip(v1).map(|(a, b)| s0 * a + s1 * b).collect(),
        linear_fallback: false,
    }
}

pub fn merge_slerp(a: &TensorCheckpoint, b: &TensorCheckpoint, t: f64) -> Result<TensorCheckpoint> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Config(format!("slerp t = {t} outside [0, 1]")));
    }
    check_schema(a, b)?;
    let results: BTreeMap<String, Slerped> = a
        .tensors
        .par_iter()
        .map(|(name, ta)| (name.clone(), slerp_vectors(&widen(ta), &widen(&b.tensors[name]), t)))
        .collect();
    let mut fallbacks = Vec::new();
    let mut tensors = BTreeMap::new();
    for (name, result) in results {
        if result.linear_fallback {
            fallbacks.push(name.clone());
        }
        let ta = &a.tensors[&name];
        let data = result.values.into_iter().map(|v| v as f32).collect();
        tensors.insert(name, Tensor::new(ta.dtype, ta.shape.clone(), data)?);
    }
    let mut metadata = BTreeMap::new();
    metadata.insert("merge_method".into(), "slerp".into());
    metadata.insert("merge_t".into(), t.to_string());
    if !fallbacks.is_empty() {
        metadata.insert("slerp_linear_fallback".into(), fallbacks.join(","));
    }
    Ok(TensorCheckpoint { tensors, metadata })
}

/// Keeps the `ceil(density · n)` largest-magnitude entries; ties keep the
/// lower index.
pub fn trim(task_vector: &[f64], density: f64) -> Vec<f64> {
    let n = task_vector.len();
    if n == 0 {
        return Vec::new();
    }
    let keep = ((density * n as f64).ceil() as usize).min(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| task_vector[j].abs().total_cmp(&task_vector[i].abs()).then(i.cmp(&j)));
    let mut out = vec![0.0; n];
    for &i in &order[..keep] {
        out[i] = task_vector[i];
    }
    out
}

/// Sum of `values` in ascending order, independent of input order.
fn ordered_sum(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    values.iter().sum()
}

/// Elect-and-merge over already trimmed task vectors.
pub fn elect_and_merge(trimmed: &[Vec<f64>]) -> Vec<f64> {
    let len = trimmed.first().map_or(0, Vec::len);
    let mut column = Vec::with_capacity(trimmed.len());
    (0..len)
        .map(|i| {
            column.clear();
            column.extend(trimmed.iter().map(|v| v[i]));
            let total = ordered_sum(&mut column);
            let sign = if total > 0.0 {
                1.0
            } else if total < 0.0 {
                -1.0
            } else {
                return 0.0;
            };
            let mut agreeing: Vec<f64> = column.iter().copied().filter(|v| v * sign > 0.0).collect();
            if agreeing.is_empty() {
                return 0.0;
            }
            let count = agreeing.len() as f64;
            ordered_sum(&mut agreeing) / count
        })
        .collect()
}

/// TIES on vectors: task vectors relative to `base`, trimmed, sign-elected,
/// merged and scaled by `lambda`.
pub fn ties_vectors(base: &[f64], inputs: &[&[f64]], density: f64, lambda: f64) -> Vec<f64> {
    let trimmed: Vec<Vec<f64>> = inputs
        .iter()
        .map(|theta| {
            let tau: Vec<f64> = theta.iter().zip(base).map(|(t, b)| t - b).collect();
            trim(&tau, density)
        })
        .collect();
    let merged = elect_and_merge(&trimmed);
    base.iter().zip(&merged).map(|(b, m)| b + lambda * m).collect()
}

pub fn merge_ties(
    base: &TensorCheckpoint,
    ckpts: &[&TensorCheckpoint],
    density: f64,
    lambda: f64,
) -> Result<TensorCheckpoint> {
    validate_ties_params(density, lambda)?;
    if ckpts.is_empty() {
        return Err(Error::Config("ties merge needs at least one input".into()));
    }
    for c in ckpts {
        check_schema(base, c)?;
    }
    let tensors = map_tensors(base, |name| {
        let b = widen(&base.tensors[name]);
        let widened: Vec<Vec<f64>> = ckpts.iter().map(|c| widen(&c.tensors[name])).collect();
        let views: Vec<&[f64]> = widened.iter().map(Vec::as_slice).collect();
        Ok(ties_vectors(&b, &views, density, lambda))
    })?;
    let mut metadata = BTreeMap::new();
    metadata.insert("merge_method".into(), "ties".into());
    metadata.insert("merge_density".into(), density.to_string());
    metadata.insert("merge_lambda".into(), lambda.to_string());
    Ok(TensorCheckpoint { tensors, metadata })
}

fn file_name(p: &Path) -> String {
    p.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| p.display().to_string())
}

/// Loads the spec's inputs, dispatches to the chosen method and records
/// provenance in the output metadata.
pub fn merge(spec: &MergeSpec) -> Result<TensorCheckpoint> {
    spec.validate()?;
    let inputs = spec
        .inputs
        .iter()
        .map(load_checkpoint)
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&TensorCheckpoint> = inputs.iter().collect();
    let mut merged = match spec.method {
        MergeMethod::Linear => merge_linear(&refs, spec.weights.as_deref().unwrap_or_default())?,
        MergeMethod::Slerp => merge_slerp(refs[0], refs[1], spec.t.unwrap_or_default())?,
        MergeMethod::Ties => {
            let base = load_checkpoint(spec.base.as_ref().expect("validated"))?;
            let mut out = merge_ties(&base, &refs, spec.density, spec.lambda)?;
            out.metadata
                .insert("merge_base".into(), file_name(spec.base.as_ref().unwrap()));
            out
        }
    };
    let names: Vec<String> = spec.inputs.iter().map(|p| file_name(p)).collect();
    merged
        .metadata
        .insert("merge_inputs".into(), serde_json::to_string(&names)?);
    Ok(merged)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ckpt(pairs: &[(&str, Vec<f32>)]) -> TensorCheckpoint {
        let mut c = TensorCheckpoint::new();
        for (name, data) in pairs {
            c.insert(*name, Tensor::f32(vec![data.len()], data.clone()).unwrap());
        }
        c
    }

    #[test]
    fn linear_midpoint_and_corner() {
        let a = ckpt(&[("w", vec![2.0, 4.0])]);
        let b = ckpt(&[("w", vec![4.0, 8.0])]);
        let m = merge_linear(&[&a, &b], &[0.5, 0.5]).unwrap();
        assert_eq!(m.tensors["w"].data, vec![3.0, 6.0]);
        let corner = merge_linear(&[&a, &b], &[0.0, 1.0]).unwrap();
        assert_eq!(corner.tensors["w"], b.tensors["w"]);
        assert_eq!(m.metadata["merge_method"], "linear");
        assert!(merge_linear(&[&a, &b], &[0.0, 0.0]).is_err());
        assert!(merge_linear(&[&a, &b], &[1.0]).is_err());
    }

    #[test]
    fn schema_mismatch_names_tensor() {
        let a = ckpt(&[("a", vec![1.0]), ("b", vec![1.0, 2.0])]);
        let b = ckpt(&[("a", vec![1.0]), ("b", vec![1.0])]);
        match merge_linear(&[&a, &b], &[1.0, 1.0]) {
            Err(Error::Schema { tensor, .. }) => assert_eq!(tensor, "b"),
            other => panic!("unexpected {other:?}"),
        }
        let c = ckpt(&[("a", vec![1.0])]);
        assert!(matches!(check_schema(&a, &c), Err(Error::Schema { tensor, .. }) if tensor == "b"));
    }

    #[test]
    fn slerp_orthonormal_half_angle() {
        let r = slerp_vectors(&[1.0, 0.0], &[0.0, 1.0], 0.5);
        let expected = std::f64::consts::FRAC_1_SQRT_2;
        assert!(!r.linear_fallback);
        assert!((r.values[0] - expected).abs() < 1e-9);
        assert!((r.values[1] - expected).abs() < 1e-9);
    }

    #[test]
    fn slerp_parallel_and_zero_fallbacks() {
        let v0 = [1.0, -2.0, 3.0];
        let v1: Vec<f64> = v0.iter().map(|x| 2.0 * x).collect();
        let r = slerp_vectors(&v0, &v1, 0.25);
        assert!(r.linear_fallback);
        for (got, x) in r.values.iter().zip(v0) {
            assert!((got - (0.75 * x + 0.5 * x)).abs() < 1e-15);
        }
        let z = slerp_vectors(&[0.0, 0.0], &[1.0, 1.0], 0.5);
        assert!(z.linear_fallback);
        assert_eq!(z.values, vec![0.5, 0.5]);

        let a = ckpt(&[("z", vec![0.0, 0.0]), ("w", vec![1.0, 0.0])]);
        let b = ckpt(&[("z", vec![1.0, 1.0]), ("w", vec![0.0, 1.0])]);
        let m = merge_slerp(&a, &b, 0.5).unwrap();
        assert_eq!(m.metadata["slerp_linear_fallback"], "z");
    }

    #[test]
    fn slerp_endpoints_exact() {
        let a = ckpt(&[("w", vec![0.3, -1.2, 2.5])]);
        let b = ckpt(&[("w", vec![-0.7, 0.4, 1.1])]);
        assert_eq!(merge_slerp(&a, &b, 0.0).unwrap().tensors["w"], a.tensors["w"]);
        assert_eq!(merge_slerp(&a, &b, 1.0).unwrap().tensors["w"], b.tensors["w"]);
        assert_eq!(merge_slerp(&a, &a, 0.5).unwrap().tensors["w"], a.tensors["w"]);
    }

    #[test]
    fn ties_hand_example() {
        let base = ckpt(&[("w", vec![0.0, 0.0])]);
        let t1 = ckpt(&[("w", vec![0.9, -0.1])]);
        let t2 = ckpt(&[("w", vec![0.8, 0.3])]);
        let m = merge_ties(&base, &[&t1, &t2], 0.5, 1.0).unwrap();
        assert_eq!(m.tensors["w"].data, vec![0.85, 0.0]);
    }

    #[test]
    fn ties_sign_conflict_keeps_agreeing_values() {
        let merged = elect_and_merge(&[vec![0.6], vec![-0.5]]);
        assert_eq!(merged, vec![0.6]);
        let cancel = elect_and_merge(&[vec![0.5], vec![-0.5]]);
        assert_eq!(cancel, vec![0.0]);
    }

    #[test]
    fn ties_identity_and_zero_task_vectors() {
        let base = ckpt(&[("w", vec![1.0, 2.0, 3.0])]);
        let tuned = ckpt(&[("w", vec![1.5, 1.0, 3.25])]);
        let m = merge_ties(&base, &[&tuned], 1.0, 1.0).unwrap();
        assert_eq!(m.tensors["w"], tuned.tensors["w"]);
        let same = merge_ties(&base, &[&base, &base], 0.2, 1.0).unwrap();
        assert_eq!(same.tensors["w"], base.tensors["w"]);
        assert!(merge_ties(&base, &[&tuned], 0.0, 1.0).is_err());
    }

    #[test]
    fn trim_keeps_ceiling_of_density() {
        assert_eq!(trim(&[0.1, -0.5, 0.3], 0.5), vec![0.0, -0.5, 0.3]);
        assert_eq!(trim(&[0.2, 0.2, 0.2], 0.3), vec![0.2, 0.0, 0.0]);
        assert_eq!(trim(&[0.2], 0.01), vec![0.2]);
    }

    #[test]
    fn spec_validation() {
        let spec = MergeSpec {
            method: MergeMethod::Slerp,
            inputs: vec!["a".into()],
            weights: None,
            t: Some(0.5),
            base: None,
            density: 0.2,
            lambda: 1.0,
        };
        assert!(spec.validate().is_err());
        let ties = MergeSpec {
            method: MergeMethod::Ties,
            inputs: vec!["a".into()],
            ..spec.clone()
        };
        assert!(ties.validate().is_err());
        let linear = MergeSpec {
            method: MergeMethod::Linear,
            inputs: vec!["a".into(), "b".into()],
            weights: Some(vec![1.0, 1.0]),
            ..spec
        };
        assert!(linear.validate().is_ok());
    }
}
