//! Python bindings: configs are passed as text, datasets and checkpoints as
//! file paths.

use std::path::PathBuf;

use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use fishnet::analysis::{analyze, to_dot, verify_direct_bp_numerical, WitnessCheck};
use fishnet::checkpoint::Checkpoint;
use fishnet::data::{generate_synthetic, Dataset, SyntheticSpec};
use fishnet::fishnet::{count_flops, count_params};
use fishnet::train::{evaluate, predict, TrainRecipe};
use fishnet::{Error, FishNetConfig, Model};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(e) => PyOSError::new_err(e.to_string()),
        Error::Config { .. } | Error::ConfigSyntax { .. } | Error::Format(_) => PyValueError::new_err(e.to_string()),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn model(config: &str) -> PyResult<Model<f32>> {
    let cfg = FishNetConfig::parse(config).map_err(py_err)?;
    fishnet::build::<f32>(&cfg, 2, 0).map_err(py_err)
}

/// Canonical text form of a config; raises ValueError if it is invalid.
#[pyfunction]
fn parse_config(config: &str) -> PyResult<String> {
    Ok(FishNetConfig::parse(config).map_err(py_err)?.to_text())
}

#[pyfunction]
fn num_params(config: &str) -> PyResult<u64> {
    Ok(count_params(&model(config)?.graph))
}

/// FLOPs (two per multiply-add) of one forward pass, optionally at another input
/// shape `(C, H, W)`.
#[pyfunction]
#[pyo3(signature = (config, input_shape=None))]
fn num_flops(config: &str, input_shape: Option<[usize; 3]>) -> PyResult<u64> {
    let mut cfg = FishNetConfig::parse(config).map_err(py_err)?;
    if let Some(s) = input_shape {
        cfg.input_shape = s;
    }
    let m = fishnet::build::<f32>(&cfg, 1, 0).map_err(py_err)?;
    Ok(count_flops(&m.graph))
}

/// Verdict for every stage feature: a list of dicts with `role`, `name`,
/// `verdict`, `witness_len` and, when `verify` is set, `check`.
#[pyfunction]
#[pyo3(signature = (config, verify=true, seed=0))]
fn bpcheck<'py>(py: Python<'py>, config: &str, verify: bool, seed: u64) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let m = model(config)?;
    let report = analyze(&m.graph, m.loss).map_err(py_err)?;
    let parts = [("tail", &m.stages.tail), ("body", &m.stages.body), ("head", &m.stages.head)];
    let mut rows = Vec::new();
    for (part, ids) in parts {
        for (s, &id) in ids.iter().enumerate() {
            let d = PyDict::new(py);
            d.set_item("role", format!("{part}{s}"))?;
            d.set_item("name", m.graph.node(id).name())?;
            d.set_item("verdict", report.verdict(id).as_str())?;
            d.set_item("witness_len", report.witness(id).map(|p| p.len() - 1))?;
            if verify && report.is_direct(id) {
                let check = match verify_direct_bp_numerical(&m.graph, &report, id, seed).map_err(py_err)? {
                    WitnessCheck::Agree { .. } => "agree",
                    WitnessCheck::Disagree { .. } => "disagree",
                    WitnessCheck::NotApplicable(_) => "n/a",
                };
                d.set_item("check", check)?;
            }
            rows.push(d);
        }
    }
    Ok(rows)
}

/// Isolated convolutions as `(name, kind)` pairs.
#[pyfunction]
fn iconvs(config: &str) -> PyResult<Vec<(String, String)>> {
    let m = model(config)?;
    let report = analyze(&m.graph, m.loss).map_err(py_err)?;
    Ok(report
        .iconvs
        .iter()
        .map(|c| (m.graph.node(c.node).name().to_string(), c.kind.as_str().to_string()))
        .collect())
}

#[pyfunction]
fn export_dot(config: &str) -> PyResult<String> {
    let m = model(config)?;
    let report = analyze(&m.graph, m.loss).map_err(py_err)?;
    Ok(to_dot(&m.graph, Some(&report)))
}

/// Write a synthetic dataset; `spec` as for `fishnet gen`. Returns the
/// number of examples.
#[pyfunction]
fn generate(spec: &str, path: PathBuf) -> PyResult<usize> {
    let spec: SyntheticSpec = spec.parse().map_err(py_err)?;
    let d = generate_synthetic(&spec);
    d.save(&path).map_err(py_err)?;
    Ok(d.len())
}

/// `(count, (C, H, W), num_classes, labels)` of a dataset file.
#[pyfunction]
fn dataset_info(path: PathBuf) -> PyResult<(usize, [usize; 3], usize, Vec<u32>)> {
    let d = Dataset::load(&path).map_err(py_err)?;
    Ok((d.len(), d.shape, d.num_classes, d.labels))
}

/// Train and save a checkpoint; returns `(epoch, lr, loss, acc)` per epoch.
#[pyfunction]
#[pyo3(signature = (config, data, output, epochs=20, lr=0.01, batch_size=32, seed=0, step_epochs=15, flip=false, crop_pad=0))]
#[allow(clippy::too_many_arguments)]
fn train(
    py: Python<'_>,
    config: &str,
    data: PathBuf,
    output: PathBuf,
    epochs: usize,
    lr: f64,
    batch_size: usize,
    seed: u64,
    step_epochs: usize,
    flip: bool,
    crop_pad: usize,
) -> PyResult<Vec<(usize, f64, f64, f64)>> {
    let cfg = FishNetConfig::parse(config).map_err(py_err)?;
    let d = Dataset::load(&data).map_err(py_err)?;
    let recipe = TrainRecipe {
        epochs,
        lr,
        batch_size,
        seed,
        step_epochs,
        flip,
        crop_pad,
        ..TrainRecipe::default()
    };
    let outcome = py
        .detach(|| fishnet::train::train(&cfg, &d, &recipe, |_| {}))
        .map_err(py_err)?;
    outcome.checkpoint(false).save(&output).map_err(py_err)?;
    Ok(outcome.metrics.iter().map(|m| (m.epoch, m.lr, m.loss, m.acc)).collect())
}

/// `(top-1 accuracy, mean loss)` of a checkpoint on a dataset.
#[pyfunction]
#[pyo3(signature = (checkpoint, data, batch_size=100))]
fn evaluate_checkpoint(checkpoint: PathBuf, data: PathBuf, batch_size: usize) -> PyResult<(f64, f64)> {
    let ck = Checkpoint::load(&checkpoint).map_err(py_err)?;
    let d = Dataset::load(&data).map_err(py_err)?;
    let mut m = ck.to_model(batch_size.max(1)).map_err(py_err)?;
    let e = evaluate(&mut m, &ck.normalization().map_err(py_err)?, &d, batch_size).map_err(py_err)?;
    Ok((e.acc, e.loss))
}

/// Logits for the selected examples, one list per example.
#[pyfunction]
fn logits(checkpoint: PathBuf, data: PathBuf, indices: Vec<usize>) -> PyResult<Vec<Vec<f32>>> {
    let ck = Checkpoint::load(&checkpoint).map_err(py_err)?;
    let d = Dataset::load(&data).map_err(py_err)?;
    if let Some(&bad) = indices.iter().find(|&&i| i >= d.len()) {
        return Err(PyValueError::new_err(format!("index {bad} out of range for {} examples", d.len())));
    }
    let mut m = ck.to_model(indices.len().max(1)).map_err(py_err)?;
    let t = predict(&mut m, &ck.normalization().map_err(py_err)?, &d, &indices).map_err(py_err)?;
    let k = t.shape()[1];
    Ok(t.data().chunks(k).map(|r| r.to_vec()).collect())
}

#[pymodule]
fn pyfishnet(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(parse_config, m)?)?;
    m.add_function(wrap_pyfunction!(num_params, m)?)?;
    m.add_function(wrap_pyfunction!(num_flops, m)?)?;
    m.add_function(wrap_pyfunction!(bpcheck, m)?)?;
    m.add_function(wrap_pyfunction!(iconvs, m)?)?;
    m.add_function(wrap_pyfunction!(export_dot, m)?)?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(dataset_info, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_checkpoint, m)?)?;
    m.add_function(wrap_pyfunction!(logits, m)?)?;
    Ok(())
}
