#![allow(dead_code)]

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use fedsim_core::client::{
    run_client_loop, ClientConfig, ClientContext, LoopSummary, ReconnectPolicy, TrainOutput, Trainer,
    TrainerError, ValidateOutput,
};
use fedsim_core::model::{FLModel, ParamMap, Tensor};
use fedsim_core::server::{Communicator, ServerOptions};
use fedsim_core::sfm::driver_for;

static NEXT: AtomicU64 = AtomicU64::new(0);

pub fn unique_address(tag: &str) -> String {
    format!("{tag}-{}-{}", std::process::id(), NEXT.fetch_add(1, Ordering::Relaxed))
}

pub fn start_server(tag: &str) -> Arc<Communicator> {
    let driver = driver_for("inproc").unwrap();
    let options = ServerOptions {
        job_id: format!("{tag}-job"),
        ..ServerOptions::default()
    };
    Arc::new(Communicator::start(driver.as_ref(), &unique_address(tag), options).unwrap())
}

pub fn client_config(name: &str, address: &str) -> ClientConfig {
    let mut cfg = ClientConfig::new(name, "inproc", address);
    cfg.heartbeat_secs = None;
    cfg.reconnect = ReconnectPolicy::none();
    cfg
}

pub fn spawn_client<T: Trainer + 'static>(
    name: &str,
    address: &str,
    mut trainer: T,
) -> JoinHandle<Result<LoopSummary, String>> {
    let cfg = client_config(name, address);
    thread::spawn(move || {
        let mut ctx = ClientContext::init(cfg).map_err(|e| e.to_string())?;
        run_client_loop(&mut ctx, &mut trainer).map_err(|e| e.to_string())
    })
}

pub fn vector_model(key: &str, values: Vec<f64>) -> FLModel {
    let mut params = ParamMap::new();
    params.insert(key.into(), Tensor::vector(values));
    FLModel::new(params)
}

/// Applies `f` to every element and reports `samples` samples.
pub struct MapTrainer<F> {
    pub f: F,
    pub samples: u64,
    pub delay: Duration,
}

impl<F: Fn(f64) -> f64 + Send> Trainer for MapTrainer<F> {
    fn train(&mut self, params: &ParamMap, _round: u32) -> Result<TrainOutput, TrainerError> {
        thread::sleep(self.delay);
        let mut out = ParamMap::new();
        for (k, t) in params {
            let v = t.to_f64_vec().into_iter().map(&self.f).collect();
            out.insert(k.clone(), t.with_f64_values(v)?);
        }
        Ok(TrainOutput {
            params: out,
            num_samples: self.samples,
            metrics: BTreeMap::new(),
        })
    }

    fn validate(&mut self, _params: &ParamMap) -> Result<ValidateOutput, TrainerError> {
        Ok(ValidateOutput::default())
    }
}

pub fn map_trainer<F: Fn(f64) -> f64 + Send>(f: F, samples: u64) -> MapTrainer<F> {
    MapTrainer {
        f,
        samples,
        delay: Duration::ZERO,
    }
}

/// Fails every task.
pub struct FailingTrainer;

impl Trainer for FailingTrainer {
    fn train(&mut self, _: &ParamMap, _: u32) -> Result<TrainOutput, TrainerError> {
        Err("simulated crash".into())
    }

    fn validate(&mut self, _: &ParamMap) -> Result<ValidateOutput, TrainerError> {
        Err("simulated crash".into())
    }
}
