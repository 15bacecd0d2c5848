//! Transformations applied to task data and task results in transit.
//!
//! The same mechanism runs at both ends: clients filter inbound task data and outbound
//! results, the server filters outbound task data and inbound results.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{FLModel, Tensor, TensorData};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    TaskData,
    TaskResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FilterKind {
    Clip { max_norm: f64 },
    Gaussian { sigma: f64, seed: u64 },
    Exclude { patterns: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterSpec {
    #[serde(flatten)]
    pub kind: FilterKind,
    pub direction: Direction,
}

#[derive(Debug, Error)]
pub enum FilterError {
    #[error("invalid filter #{index}: {reason}")]
    Invalid { index: usize, reason: String },
    #[error("filter #{index} failed: {reason}")]
    Failed { index: usize, reason: String },
}

impl FilterSpec {
    pub fn new(kind: FilterKind, direction: Direction) -> Self {
        FilterSpec { kind, direction }
    }

    fn check(&self) -> Result<(), String> {
        match &self.kind {
            FilterKind::Clip { max_norm } if !(max_norm.is_finite() && *max_norm > 0.0) => {
                Err(format!("max_norm must be > 0, got {max_norm}"))
            }
            FilterKind::Gaussian { sigma, .. } if !(sigma.is_finite() && *sigma >= 0.0) => {
                Err(format!("sigma must be >= 0, got {sigma}"))
            }
            FilterKind::Exclude { patterns } => {
                for p in patterns {
                    glob::Pattern::new(p).map_err(|e| format!("bad pattern {p:?}: {e}"))?;
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

/// Checks every spec up front so a bad chain fails at configuration load.
pub fn validate_chain(chain: &[FilterSpec]) -> Result<(), FilterError> {
    for (index, spec) in chain.iter().enumerate() {
        spec.check()
            .map_err(|reason| FilterError::Invalid { index, reason })?;
    }
    Ok(())
}

/// Applies the filters whose direction matches, in listed order.
///
/// Gaussian filters are seeded with `seed + model.current_round`, so a fixed chain adds
/// fresh but reproducible noise every round.
pub fn apply_chain(
    model: &FLModel,
    chain: &[FilterSpec],
    direction: Direction,
) -> Result<FLModel, FilterError> {
    validate_chain(chain)?;
    let mut out = model.clone();
    for (index, spec) in chain.iter().enumerate() {
        if spec.direction != direction {
            continue;
        }
        out = match &spec.kind {
            FilterKind::Clip { max_norm } => {
                let norm = global_norm(&out);
                if !norm.is_finite() {
                    return Err(FilterError::Failed {
                        index,
                        reason: format!("parameter norm is {norm}"),
                    });
                }
                clip_filter(&out, *max_norm)
            }
            FilterKind::Gaussian { sigma, seed } => gaussian_noise_filter(
                &out,
                *sigma,
                seed.wrapping_add(out.current_round as u64),
            ),
            FilterKind::Exclude { patterns } => exclude_filter(&out, patterns),
        };
    }
    Ok(out)
}

/// L2 norm over every floating-point element of every parameter.
pub fn global_norm(model: &FLModel) -> f64 {
    let mut sum = 0.0f64;
    for t in model.params.values() {
        match t.data() {
            TensorData::F32(v) => sum += v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>(),
            TensorData::F64(v) => sum += v.iter().map(|&x| x * x).sum::<f64>(),
            _ => {}
        }
    }
    sum.sqrt()
}

/// `f64 -> f32` rounding toward zero, so scaling down never grows a magnitude.
fn narrow_toward_zero(x: f64) -> f32 {
    let y = x as f32;
    if y.is_finite() && y != 0.0 && (y as f64).abs() > x.abs() {
        f32::from_bits(y.to_bits() - 1)
    } else {
        y
    }
}

fn map_floats(model: &FLModel, mut f: impl FnMut(usize, &Tensor) -> Option<Tensor>) -> FLModel {
    let mut out = model.clone();
    for (i, (_, t)) in out.params.iter_mut().enumerate() {
        if let Some(new) = f(i, t) {
            *t = new;
        }
    }
    out
}

const CLIP_SLACK: f64 = 1e-12;

/// Scales all float elements by `max_norm / g` when the global norm `g` exceeds `max_norm`.
/// Integer parameters are left alone. Norms within a relative 1e-12 of `max_norm` count as
/// in range, which makes clipping an already clipped model a no-op.
pub fn clip_filter(model: &FLModel, max_norm: f64) -> FLModel {
    let norm = global_norm(model);
    if norm.is_nan() || norm <= max_norm * (1.0 + CLIP_SLACK) {
        return model.clone();
    }
    let scale = max_norm / norm;
    map_floats(model, |_, t| {
        let data = match t.data() {
            TensorData::F32(v) => {
                TensorData::F32(v.iter().map(|&x| narrow_toward_zero(x as f64 * scale)).collect())
            }
            TensorData::F64(v) => TensorData::F64(v.iter().map(|&x| x * scale).collect()),
            _ => return None,
        };
        Some(Tensor::new(t.shape().to_vec(), data).expect("same shape"))
    })
}

/// Standard normal draws from ChaCha20 via the Box–Muller transform.
///
/// Parameter `i` (in iteration order) uses ChaCha20 stream `i` of the generator seeded
/// with `seed`; each pair of 53-bit uniforms `(u1, u2)` yields
/// `sqrt(-2 ln(1 - u1)) * (cos 2πu2, sin 2πu2)`.
pub struct NormalStream {
    rng: ChaCha20Rng,
    spare: Option<f64>,
}

impl NormalStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        NormalStream { rng, spare: None }
    }

    fn uniform(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn sample(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * (1.0 - u1).ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(r * theta.sin());
        r * theta.cos()
    }
}

pub fn gaussian_noise_filter(model: &FLModel, sigma: f64, seed: u64) -> FLModel {
    if sigma == 0.0 {
        return model.clone();
    }
    map_floats(model, |i, t| {
        let mut noise = NormalStream::new(seed, i as u64);
        let data = match t.data() {
            TensorData::F32(v) => TensorData::F32(
                v.iter()
                    .map(|&x| (x as f64 + sigma * noise.sample()) as f32)
                    .collect(),
            ),
            TensorData::F64(v) => {
                TensorData::F64(v.iter().map(|&x| x + sigma * noise.sample()).collect())
            }
            _ => return None,
        };
        Some(Tensor::new(t.shape().to_vec(), data).expect("same shape"))
    })
}

/// Drops parameters whose names match any glob pattern. Invalid patterns match nothing.
pub fn exclude_filter(model: &FLModel, patterns: &[String]) -> FLModel {
    let compiled: Vec<glob::Pattern> = patterns
        .iter()
        .filter_map(|p| glob::Pattern::new(p).ok())
        .collect();
    let mut out = model.clone();
    out.params
        .retain(|name, _| !compiled.iter().any(|p| p.matches(name)));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ParamMap;
    use proptest::prelude::*;

    fn model(entries: &[(&str, Vec<f64>)]) -> FLModel {
        let mut params = ParamMap::new();
        for (name, v) in entries {
            params.insert((*name).into(), Tensor::vector(v.clone()));
        }
        FLModel::new(params)
    }

    fn values(m: &FLModel, name: &str) -> Vec<f64> {
        m.params[name].to_f64_vec()
    }

    #[test]
    fn empty_chain_is_identity() {
        let m = model(&[("w", vec![1.0, -2.0])]);
        assert_eq!(apply_chain(&m, &[], Direction::TaskResult).unwrap(), m);
    }

    #[test]
    fn clip_examples() {
        let small = model(&[("w", vec![0.3, 0.4])]);
        assert_eq!(clip_filter(&small, 1.0), small);
        let m = model(&[("w", vec![3.0, 4.0])]);
        let c = clip_filter(&m, 1.0);
        let v = values(&c, "w");
        assert!((v[0] - 0.6).abs() < 1e-15 && (v[1] - 0.8).abs() < 1e-15, "{v:?}");
    }

    #[test]
    fn clip_ignores_integer_params_and_narrows_f32_safely() {
        let mut params = ParamMap::new();
        params.insert("i".into(), Tensor::new(vec![2], TensorData::I64(vec![100, 200])).unwrap());
        params.insert("f".into(), Tensor::from_f32(vec![3], vec![3.0, 4.0, 12.0]).unwrap());
        let m = FLModel::new(params);
        let c = clip_filter(&m, 0.7);
        assert_eq!(c.params["i"], m.params["i"]);
        assert!(global_norm(&c) <= 0.7);
    }

    #[test]
    fn zero_sigma_and_seed_determinism() {
        let m = model(&[("a", vec![1.0; 50]), ("b", vec![2.0; 10])]);
        assert_eq!(gaussian_noise_filter(&m, 0.0, 1), m);
        let x = gaussian_noise_filter(&m, 0.5, 77);
        assert_eq!(x, gaussian_noise_filter(&m, 0.5, 77));
        assert_ne!(x, gaussian_noise_filter(&m, 0.5, 78));
        // parameters draw from distinct streams
        let a = values(&x, "a");
        let b = values(&x, "b");
        assert_ne!(a[0] - 1.0, b[0] - 2.0);
    }

    #[test]
    fn clip_then_zero_noise_equals_clip() {
        let m = model(&[("w", vec![3.0, 4.0])]);
        let chain = vec![
            FilterSpec::new(FilterKind::Clip { max_norm: 1.0 }, Direction::TaskResult),
            FilterSpec::new(FilterKind::Gaussian { sigma: 0.0, seed: 5 }, Direction::TaskResult),
        ];
        assert_eq!(
            apply_chain(&m, &chain, Direction::TaskResult).unwrap(),
            clip_filter(&m, 1.0)
        );
    }

    #[test]
    fn filter_order_matters() {
        // norm 2 vector; sigma > 0
        let m = model(&[("w", vec![2.0_f64.sqrt(), 2.0_f64.sqrt()])]);
        let clip = FilterSpec::new(FilterKind::Clip { max_norm: 1.0 }, Direction::TaskResult);
        let noise = FilterSpec::new(FilterKind::Gaussian { sigma: 0.5, seed: 9 }, Direction::TaskResult);
        let a = apply_chain(&m, &[clip.clone(), noise.clone()], Direction::TaskResult).unwrap();
        let b = apply_chain(&m, &[noise, clip], Direction::TaskResult).unwrap();

        // explicit computation of both orders with the same generator
        let mut z = NormalStream::new(9, 0);
        let (z0, z1) = (z.sample(), z.sample());
        let c = 1.0 / 2.0_f64.sqrt();
        let s = 2.0_f64.sqrt();
        let clip_first = [c + 0.5 * z0, c + 0.5 * z1];
        let noisy = [s + 0.5 * z0, s + 0.5 * z1];
        let n = (noisy[0] * noisy[0] + noisy[1] * noisy[1]).sqrt();
        let noise_first = [noisy[0] / n, noisy[1] / n];
        let av = values(&a, "w");
        let bv = values(&b, "w");
        for i in 0..2 {
            assert!((av[i] - clip_first[i]).abs() < 1e-12);
            assert!((bv[i] - noise_first[i]).abs() < 1e-12);
        }
        assert_ne!(a, b);
        assert!((global_norm(&b) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn direction_filtering() {
        let m = model(&[("head.w", vec![1.0]), ("body.w", vec![2.0])]);
        let chain = vec![FilterSpec::new(
            FilterKind::Exclude { patterns: vec!["head.*".into()] },
            Direction::TaskResult,
        )];
        assert_eq!(apply_chain(&m, &chain, Direction::TaskData).unwrap(), m);
        let out = apply_chain(&m, &chain, Direction::TaskResult).unwrap();
        assert_eq!(out.params.keys().collect::<Vec<_>>(), vec!["body.w"]);
    }

    #[test]
    fn exclude_examples() {
        let m = model(&[("head.w", vec![1.0]), ("body.w", vec![2.0])]);
        assert!(exclude_filter(&m, &["*".into()]).params.is_empty());
        assert_eq!(exclude_filter(&m, &["tail.*".into()]), m);
    }

    #[test]
    fn exclusion_and_clipping_do_not_commute() {
        // the excluded parameter carries norm, so the order changes the surviving values
        let m = model(&[("head.w", vec![3.0]), ("body.w", vec![4.0])]);
        let excl = vec!["head.*".to_string()];
        let a = clip_filter(&exclude_filter(&m, &excl), 1.0);
        let b = exclude_filter(&clip_filter(&m, 1.0), &excl);
        assert_eq!(values(&a, "body.w"), vec![1.0]);
        assert!((values(&b, "body.w")[0] - 0.8).abs() < 1e-15);
        // and they do commute when the excluded parameter is zero
        let z = model(&[("head.w", vec![0.0]), ("body.w", vec![4.0])]);
        assert_eq!(
            clip_filter(&exclude_filter(&z, &excl), 1.0),
            exclude_filter(&clip_filter(&z, 1.0), &excl)
        );
    }

    #[test]
    fn invalid_specs_rejected_at_validation() {
        for kind in [
            FilterKind::Clip { max_norm: 0.0 },
            FilterKind::Gaussian { sigma: -1.0, seed: 0 },
            FilterKind::Exclude { patterns: vec!["[".into()] },
        ] {
            let chain = vec![
                FilterSpec::new(FilterKind::Clip { max_norm: 1.0 }, Direction::TaskData),
                FilterSpec::new(kind, Direction::TaskData),
            ];
            assert!(matches!(validate_chain(&chain), Err(FilterError::Invalid { index: 1, .. })));
        }
    }

    #[test]
    fn json_shape() {
        let spec: FilterSpec =
            serde_json::from_str(r#"{"kind":"clip","max_norm":1.5,"direction":"task_result"}"#).unwrap();
        assert_eq!(spec, FilterSpec::new(FilterKind::Clip { max_norm: 1.5 }, Direction::TaskResult));
    }

    #[test]
    fn noise_moments() {
        let m = model(&[("w", vec![0.0; 1_000_000])]);
        let v = values(&gaussian_noise_filter(&m, 1.0, 2024), "w");
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let std = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!(mean.abs() < 0.005, "mean {mean}");
        assert!((0.995..=1.005).contains(&std), "std {std}");
    }

    proptest! {
        #[test]
        fn clip_bounds_norm_and_is_idempotent(
            v in proptest::collection::vec(-1e3f64..1e3, 1..64),
            w in proptest::collection::vec(-1e3f32..1e3, 0..16),
            max_norm in 1e-3f64..50.0,
        ) {
            let mut params = ParamMap::new();
            params.insert("a".into(), Tensor::vector(v));
            params.insert("b".into(), Tensor::from_f32(vec![w.len() as u64], w).unwrap());
            let m = FLModel::new(params);
            let once = clip_filter(&m, max_norm);
            prop_assert!(global_norm(&once) <= max_norm * (1.0 + 1e-9));
            let twice = clip_filter(&once, max_norm);
            prop_assert_eq!(twice, once);
        }

        #[test]
        fn filters_never_mutate_input(seed in any::<u64>(), sigma in 0.0f64..3.0) {
            let m = model(&[("w", vec![1.0, 2.0, 3.0])]);
            let before = m.clone();
            let chain = vec![
                FilterSpec::new(FilterKind::Gaussian { sigma, seed }, Direction::TaskResult),
                FilterSpec::new(FilterKind::Clip { max_norm: 1.0 }, Direction::TaskResult),
            ];
            let a = apply_chain(&m, &chain, Direction::TaskResult).unwrap();
            let b = apply_chain(&m, &chain, Direction::TaskResult).unwrap();
            prop_assert_eq!(&m, &before);
            prop_assert_eq!(a, b);
        }
    }
}
