//! Reference models trained with plain gradient descent in `f64`.
//!
//! `Linear` is least-squares regression with a single parameter `w` of shape `[d]`:
//! loss `mean((x·w - y)^2)`, gradient `2/n · Xᵀ(Xw - y)`.
//!
//! `Classifier` is a fully connected network with tanh hidden layers and a softmax output,
//! trained on mean cross-entropy. Layer `i` holds `fc{i}.weight` of shape `[in, out]` and
//! `fc{i}.bias` of shape `[out]`; with no hidden layers it is multinomial logistic regression.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use super::{DataError, LabeledDataset, Labels, Result};
use crate::model::{ParamMap, Tensor};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Arch {
    Linear,
    Classifier { hidden: Vec<usize> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Batch {
    Full,
    Size(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    #[serde(default = "full_batch")]
    pub batch: Batch,
    /// Seeds minibatch shuffling; unused for full-batch training.
    #[serde(default)]
    pub seed: u64,
}

fn full_batch() -> Batch {
    Batch::Full
}

impl TrainConfig {
    pub fn full_batch(lr: f64, epochs: usize) -> Self {
        TrainConfig {
            lr,
            epochs,
            batch: Batch::Full,
            seed: 0,
        }
    }
}

fn weight_name(i: usize) -> String {
    format!("fc{i}.weight")
}

fn bias_name(i: usize) -> String {
    format!("fc{i}.bias")
}

fn layer_sizes(hidden: &[usize], d: usize, k: usize) -> Vec<usize> {
    let mut sizes = vec![d];
    sizes.extend_from_slice(hidden);
    sizes.push(k);
    sizes
}

/// Initial parameters: zeros for `Linear`, Xavier-uniform weights and zero biases for
/// `Classifier` (weights drawn layer by layer, row-major, from ChaCha20 seeded with `seed`).
pub fn init_params(arch: &Arch, d: usize, classes: usize, seed: u64) -> Result<ParamMap> {
    let mut params = ParamMap::new();
    match arch {
        Arch::Linear => {
            params.insert("w".into(), Tensor::vector(vec![0.0; d]));
        }
        Arch::Classifier { hidden } => {
            if hidden.contains(&0) || classes < 2 {
                return Err(DataError::InvalidArgument(
                    "hidden sizes must be >= 1 and classes >= 2".into(),
                ));
            }
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let sizes = layer_sizes(hidden, d, classes);
            for (i, pair) in sizes.windows(2).enumerate() {
                let (fan_in, fan_out) = (pair[0], pair[1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let w: Vec<f64> = (0..fan_in * fan_out)
                    .map(|_| rng.random_range(-limit..limit))
                    .collect();
                params.insert(
                    weight_name(i),
                    Tensor::from_f64(vec![fan_in as u64, fan_out as u64], w).expect("shape"),
                );
                params.insert(bias_name(i), Tensor::vector(vec![0.0; fan_out]));
            }
        }
    }
    Ok(params)
}

fn mismatch(msg: impl Into<String>) -> DataError {
    DataError::ShapeMismatch(msg.into())
}

fn vector_param(params: &ParamMap, name: &str, len: usize) -> Result<Array1<f64>> {
    let t = params
        .get(name)
        .ok_or_else(|| mismatch(format!("missing parameter {name}")))?;
    if t.shape() != [len as u64] {
        return Err(mismatch(format!("{name} has shape {:?}, expected [{len}]", t.shape())));
    }
    Ok(Array1::from(t.to_f64_vec()))
}

fn matrix_param(params: &ParamMap, name: &str, rows: usize, cols: usize) -> Result<Array2<f64>> {
    let t = params
        .get(name)
        .ok_or_else(|| mismatch(format!("missing parameter {name}")))?;
    if t.shape() != [rows as u64, cols as u64] {
        return Err(mismatch(format!(
            "{name} has shape {:?}, expected [{rows}, {cols}]",
            t.shape()
        )));
    }
    Ok(Array2::from_shape_vec((rows, cols), t.to_f64_vec()).expect("checked shape"))
}

struct Layer {
    w: Array2<f64>,
    b: Array1<f64>,
}

enum Net {
    Linear(Array1<f64>),
    Classifier(Vec<Layer>),
}

impl Net {
    fn from_params(arch: &Arch, params: &ParamMap, data: &LabeledDataset) -> Result<Net> {
        let d = data.dim();
        let expected = match arch {
            Arch::Linear => {
                if !matches!(data.labels, Labels::Values(_)) {
                    return Err(mismatch("linear model needs regression targets"));
                }
                1
            }
            Arch::Classifier { hidden } => 2 * (hidden.len() + 1),
        };
        if params.len() != expected {
            return Err(mismatch(format!(
                "expected {expected} parameters, found {}",
                params.len()
            )));
        }
        match arch {
            Arch::Linear => Ok(Net::Linear(vector_param(params, "w", d)?)),
            Arch::Classifier { hidden } => {
                let k = data
                    .classes()
                    .ok_or_else(|| mismatch("classifier needs class labels"))?;
                let sizes = layer_sizes(hidden, d, k);
                let layers = sizes
                    .windows(2)
                    .enumerate()
                    .map(|(i, p)| {
                        Ok(Layer {
                            w: matrix_param(params, &weight_name(i), p[0], p[1])?,
                            b: vector_param(params, &bias_name(i), p[1])?,
                        })
                    })
                    .collect::<Result<_>>()?;
                Ok(Net::Classifier(layers))
            }
        }
    }

    /// Writes `flat` values back into tensors shaped and typed like `template`.
    fn to_params(&self, template: &ParamMap) -> ParamMap {
        let mut out = ParamMap::new();
        let mut put = |name: String, values: Vec<f64>| {
            let t = template[&name].with_f64_values(values).expect("same shape");
            out.insert(name, t);
        };
        match self {
            Net::Linear(w) => put("w".into(), w.to_vec()),
            Net::Classifier(layers) => {
                for (i, l) in layers.iter().enumerate() {
                    put(weight_name(i), l.w.iter().copied().collect());
                    put(bias_name(i), l.b.to_vec());
                }
            }
        }
        // keep the caller's ordering
        template
            .keys()
            .map(|k| (k.clone(), out[k].clone()))
            .collect()
    }

    fn sub_scaled(&mut self, grad: &Net, lr: f64) {
        match (self, grad) {
            (Net::Linear(w), Net::Linear(g)) => w.scaled_add(-lr, g),
            (Net::Classifier(ls), Net::Classifier(gs)) => {
                for (l, g) in ls.iter_mut().zip(gs) {
                    l.w.scaled_add(-lr, &g.w);
                    l.b.scaled_add(-lr, &g.b);
                }
            }
            _ => unreachable!("gradient has the model's structure"),
        }
    }

    fn is_finite(&self) -> bool {
        match self {
            Net::Linear(w) => w.iter().all(|v| v.is_finite()),
            Net::Classifier(ls) => ls
                .iter()
                .all(|l| l.w.iter().chain(l.b.iter()).all(|v| v.is_finite())),
        }
    }

    /// Classifier activations per layer; the last entry holds softmax probabilities.
    fn forward(layers: &[Layer], x: ArrayView2<f64>) -> Vec<Array2<f64>> {
        let mut acts = Vec::with_capacity(layers.len());
        let mut a = x.to_owned();
        for (i, l) in layers.iter().enumerate() {
            let mut z = a.dot(&l.w);
            z += &l.b;
            if i + 1 < layers.len() {
                z.mapv_inplace(f64::tanh);
            } else {
                for mut row in z.rows_mut() {
                    let m = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
                    row.mapv_inplace(|v| (v - m).exp());
                    let s = row.sum();
                    row /= s;
                }
            }
            acts.push(z.clone());
            a = z;
        }
        acts
    }

    fn predict(&self, x: ArrayView2<f64>) -> Array2<f64> {
        match self {
            Net::Linear(w) => x.dot(w).insert_axis(Axis(1)),
            Net::Classifier(layers) => Self::forward(layers, x).pop().expect("one layer"),
        }
    }

    fn loss_grad(&self, x: ArrayView2<f64>, labels: &Labels, rows: &[usize]) -> (f64, Net) {
        let n = x.nrows() as f64;
        match (self, labels) {
            (Net::Linear(w), Labels::Values(y)) => {
                let mut r = x.dot(w);
                for (ri, &i) in r.iter_mut().zip(rows) {
                    *ri -= y[i];
                }
                let loss = r.dot(&r) / n;
                let grad = x.t().dot(&r) * (2.0 / n);
                (loss, Net::Linear(grad))
            }
            (Net::Classifier(layers), Labels::Classes { ids, .. }) => {
                let acts = Self::forward(layers, x);
                let mut delta = acts.last().expect("one layer").clone();
                let mut loss = 0.0;
                for (mut row, &i) in delta.rows_mut().into_iter().zip(rows) {
                    let c = ids[i];
                    loss -= row[c].max(f64::MIN_POSITIVE).ln();
                    row[c] -= 1.0;
                }
                loss /= n;
                delta /= n;
                let mut grads = Vec::with_capacity(layers.len());
                for li in (0..layers.len()).rev() {
                    let input = if li == 0 { x } else { acts[li - 1].view() };
                    let gw = input.t().dot(&delta);
                    let gb = delta.sum_axis(Axis(0));
                    if li > 0 {
                        let mut back = delta.dot(&layers[li].w.t());
                        back.zip_mut_with(&acts[li - 1], |d, &a| *d *= 1.0 - a * a);
                        delta = back;
                    }
                    grads.push(Layer { w: gw, b: gb });
                }
                grads.reverse();
                (loss, Net::Classifier(grads))
            }
            _ => unreachable!("labels checked in from_params"),
        }
    }
}

fn all_rows(data: &LabeledDataset) -> Vec<usize> {
    (0..data.len()).collect()
}

/// Mean loss over `data` and its gradient, shaped like `params` (as `F64` tensors).
pub fn loss_and_grad(
    arch: &Arch,
    params: &ParamMap,
    data: &LabeledDataset,
) -> Result<(f64, ParamMap)> {
    let net = Net::from_params(arch, params, data)?;
    let (loss, grad) = net.loss_grad(data.features.view(), &data.labels, &all_rows(data));
    let template: ParamMap = params
        .iter()
        .map(|(k, t)| {
            let f = Tensor::from_f64(t.shape().to_vec(), vec![0.0; t.len()]).expect("shape");
            (k.clone(), f)
        })
        .collect();
    Ok((loss, grad.to_params(&template)))
}

/// Central finite differences of the mean loss with step `h`, one parameter at a time.
pub fn finite_difference_grad(
    arch: &Arch,
    params: &ParamMap,
    data: &LabeledDataset,
    h: f64,
) -> Result<ParamMap> {
    let loss_at = |p: &ParamMap| -> Result<f64> { Ok(loss_and_grad(arch, p, data)?.0) };
    let mut out = ParamMap::new();
    for (name, t) in params {
        let base = t.to_f64_vec();
        let mut grad = vec![0.0; base.len()];
        for (j, g) in grad.iter_mut().enumerate() {
            let probe = |delta: f64| -> Result<f64> {
                let mut v = base.clone();
                v[j] += delta;
                let mut p = params.clone();
                p[name] = Tensor::from_f64(t.shape().to_vec(), v).expect("shape");
                loss_at(&p)
            };
            *g = (probe(h)? - probe(-h)?) / (2.0 * h);
        }
        out.insert(
            name.clone(),
            Tensor::from_f64(t.shape().to_vec(), grad).expect("shape"),
        );
    }
    Ok(out)
}

/// Gradient descent from `params`. One epoch is a single step for full-batch training and a
/// pass over a ChaCha20 shuffle (seeded `seed + epoch`) for minibatches. The result has the
/// input's names, shapes and dtypes.
pub fn train(
    arch: &Arch,
    params: &ParamMap,
    data: &LabeledDataset,
    config: &TrainConfig,
) -> Result<ParamMap> {
    if !(config.lr.is_finite() && config.lr > 0.0) {
        return Err(DataError::InvalidArgument(format!("lr must be > 0, got {}", config.lr)));
    }
    let mut net = Net::from_params(arch, params, data)?;
    if config.epochs == 0 {
        return Ok(params.clone());
    }
    if data.is_empty() {
        return Err(DataError::InvalidArgument("cannot train on an empty dataset".into()));
    }
    let mut step = 0;
    let mut run = |net: &mut Net, rows: &[usize], x: ArrayView2<f64>| -> Result<()> {
        let (loss, grad) = net.loss_grad(x, &data.labels, rows);
        if !loss.is_finite() {
            return Err(DataError::Diverged { step, loss });
        }
        net.sub_scaled(&grad, config.lr);
        step += 1;
        Ok(())
    };
    match config.batch {
        Batch::Full => {
            let rows = all_rows(data);
            for _ in 0..config.epochs {
                run(&mut net, &rows, data.features.view())?;
            }
        }
        Batch::Size(size) => {
            if size == 0 {
                return Err(DataError::InvalidArgument("batch size must be >= 1".into()));
            }
            let mut order = all_rows(data);
            for epoch in 0..config.epochs {
                let mut rng = ChaCha20Rng::seed_from_u64(config.seed.wrapping_add(epoch as u64));
                order.shuffle(&mut rng);
                for rows in order.chunks(size) {
                    let x = data.features.select(Axis(0), rows);
                    run(&mut net, rows, x.view())?;
                }
            }
        }
    }
    if !net.is_finite() {
        return Err(DataError::Diverged {
            step,
            loss: f64::NAN,
        });
    }
    Ok(net.to_params(params))
}

/// `{"accuracy"}` for classifiers, `{"mse"}` for regression.
pub fn evaluate(
    arch: &Arch,
    params: &ParamMap,
    data: &LabeledDataset,
) -> Result<BTreeMap<String, f64>> {
    let net = Net::from_params(arch, params, data)?;
    let out = net.predict(data.features.view());
    let n = data.len().max(1) as f64;
    let mut metrics = BTreeMap::new();
    match &data.labels {
        Labels::Values(y) => {
            let mse = out
                .column(0)
                .iter()
                .zip(y)
                .map(|(p, t)| (p - t) * (p - t))
                .sum::<f64>()
                / n;
            metrics.insert("mse".to_owned(), mse);
        }
        Labels::Classes { ids, .. } => {
            let correct = out
                .rows()
                .into_iter()
                .zip(ids)
                .filter(|(row, &c)| argmax(row.iter().copied()) == c)
                .count();
            metrics.insert("accuracy".to_owned(), correct as f64 / n);
        }
    }
    Ok(metrics)
}

/// Index of the largest value; ties go to the lowest index.
fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_blobs, make_regression};
    use ndarray::array;

    fn scalar_problem() -> LabeledDataset {
        LabeledDataset::new(array![[1.0]], Labels::Values(vec![2.0])).unwrap()
    }

    #[test]
    fn one_linear_step_by_hand() {
        let p = init_params(&Arch::Linear, 1, 0, 0).unwrap();
        let out = train(&Arch::Linear, &p, &scalar_problem(), &TrainConfig::full_batch(0.1, 1)).unwrap();
        // w = 0 - 0.1 * 2 * (0 - 2) * 1
        assert!((out["w"].to_f64_vec()[0] - 0.4).abs() < 1e-15);
    }

    #[test]
    fn zero_epochs_is_identity() {
        let ds = make_blobs(30, 2, 3, 1.0, 1).unwrap();
        let arch = Arch::Classifier { hidden: vec![4] };
        let p = init_params(&arch, 2, 3, 7).unwrap();
        assert_eq!(train(&arch, &p, &ds, &TrainConfig::full_batch(0.5, 0)).unwrap(), p);
    }

    #[test]
    fn training_is_deterministic_and_keeps_layout() {
        let ds = make_blobs(60, 3, 3, 1.0, 2).unwrap();
        let arch = Arch::Classifier { hidden: vec![5, 4] };
        let mut p = init_params(&arch, 3, 3, 1).unwrap();
        p["fc0.bias"] = Tensor::from_f32(vec![5], vec![0.0; 5]).unwrap();
        for batch in [Batch::Full, Batch::Size(7)] {
            let cfg = TrainConfig { lr: 0.3, epochs: 5, batch, seed: 11 };
            let a = train(&arch, &p, &ds, &cfg).unwrap();
            assert_eq!(a, train(&arch, &p, &ds, &cfg).unwrap());
            assert_eq!(a.keys().collect::<Vec<_>>(), p.keys().collect::<Vec<_>>());
            for (k, t) in &a {
                assert!(t.same_layout(&p[k]), "{k}");
            }
        }
    }

    #[test]
    fn divergence_is_reported() {
        let (ds, _) = make_regression(20, 2, 0.0, 3).unwrap();
        let p = init_params(&Arch::Linear, 2, 0, 0).unwrap();
        let err = train(&Arch::Linear, &p, &ds, &TrainConfig::full_batch(1e6, 200)).unwrap_err();
        assert!(matches!(err, DataError::Diverged { .. }), "{err}");
    }

    #[test]
    fn classifier_learns_separable_blobs() {
        let ds = make_blobs(200, 2, 4, 0.3, 5).unwrap();
        let arch = Arch::Classifier { hidden: vec![] };
        let p = init_params(&arch, 2, 4, 0).unwrap();
        let out = train(&arch, &p, &ds, &TrainConfig::full_batch(0.5, 300)).unwrap();
        assert!(evaluate(&arch, &out, &ds).unwrap()["accuracy"] > 0.95);
    }

    #[test]
    fn evaluate_examples() {
        let (ds, w) = make_regression(40, 3, 0.0, 1).unwrap();
        let mut p = ParamMap::new();
        p.insert("w".into(), Tensor::vector(w));
        assert!(evaluate(&Arch::Linear, &p, &ds).unwrap()["mse"] < 1e-28);

        p["w"] = Tensor::vector(vec![0.0; 2]);
        assert!(matches!(evaluate(&Arch::Linear, &p, &ds), Err(DataError::ShapeMismatch(_))));

        // constant classifier (all-zero logits predict class 0) on balanced labels
        let blobs = make_blobs(400, 2, 4, 1.0, 1).unwrap();
        let arch = Arch::Classifier { hidden: vec![] };
        let mut zero = init_params(&arch, 2, 4, 0).unwrap();
        zero["fc0.weight"] = Tensor::from_f64(vec![2, 4], vec![0.0; 8]).unwrap();
        assert_eq!(evaluate(&arch, &zero, &blobs).unwrap()["accuracy"], 0.25);
    }

    #[test]
    fn wrong_label_kind_is_a_shape_mismatch() {
        let blobs = make_blobs(10, 1, 2, 1.0, 1).unwrap();
        let p = init_params(&Arch::Linear, 1, 0, 0).unwrap();
        assert!(matches!(train(&Arch::Linear, &p, &blobs, &TrainConfig::full_batch(0.1, 1)), Err(DataError::ShapeMismatch(_))));
    }
}
