//! Python bindings: flat-Vec wrappers around the core try-on operations
//! plus the full CLI entry point.

use ndarray::{Array2, IxDyn};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use vton_core::config::TrainConfig;
use vton_core::data::{make_toy_dataset, ToyDatasetSpec};
use vton_core::error::Error;
use vton_core::eval::{fid, FeatureStats};
use vton_core::memory::{memory_read, KeyValueMaps, MemoryStore};
use vton_core::tensor::Arr;

fn err(e: Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_arr(data: Vec<f64>, shape: &[usize]) -> PyResult<Arr> {
    Arr::from_shape_vec(IxDyn(shape), data)
        .map_err(|e| PyValueError::new_err(format!("bad shape: {e}")))
}

fn to_mask(data: Vec<f64>, h: usize, w: usize) -> PyResult<Array2<f64>> {
    Array2::from_shape_vec((h, w), data)
        .map_err(|e| PyValueError::new_err(format!("bad mask shape: {e}")))
}

/// Generate the procedural toy dataset; returns the clip ids.
#[pyfunction]
fn make_toy_data(
    out: String,
    clips: usize,
    frames: usize,
    height: usize,
    width: usize,
    seed: u64,
) -> PyResult<Vec<String>> {
    let spec = ToyDatasetSpec { n_clips: clips, frames_per_clip: frames, height, width, seed };
    let manifest = make_toy_dataset(std::path::Path::new(&out), &spec).map_err(err)?;
    Ok(manifest.clips.into_iter().map(|c| c.id).collect())
}

///// Exact masked selection: content where mask is 1, base where it is 0.
/// Images are flat row-major RGB [3, height, width]; the result is the
/// [6, height, width] exclusive composite (masked content, unmasked base).
#[pyfunction]
fn region_compose(
    content: Vec<f64>,
    base: Vec<f64>,
    mask: Vec<f64>,
    channels: usize,
    height: usize,
    width: usize,
) -> PyResult<Vec<f64>> {
    let c = to_arr(content, &[channels, height, width])?;
    let b = to_arr(base, &[channels, height, width])?;
    let m = to_mask(mask, height, width)?;
    let out = vton_core::tryon::region_compose(&c, &b, &m).map_err(err)?;
    Ok(out.into_raw_vec_and_offset().0)
}

/// Space-time attention read. `key`/`value` describe the current frame
/// ([key_channels|value_channels, height, width], flat row-major);
/// memory holds one (key, value) pair per past frame. Returns the
/// [2*value_channels, height, width] concatenation of the current values
/// and the retrieved values.
#[pyfunction]
#[allow(clippy::too_many_arguments)]
fn memory_read_py(
    key: Vec<f64>,
    value: Vec<f64>,
    mem_keys: Vec<Vec<f64>>,
    mem_values: Vec<Vec<f64>>,
    key_channels: usize,
    value_channels: usize,
    height: usize,
    width: usize,
) -> PyResult<Vec<f64>> {
    if mem_keys.len() != mem_values.len() {
        return Err(PyValueError::new_err("mem_keys and mem_values lengths differ"));
    }
    let current = KeyValueMaps {
        key: to_arr(key, &[key_channels, height, width])?,
        value: to_arr(value, &[value_channels, height, width])?,
    };
    let mut store = MemoryStore::new();
    for (k, v) in mem_keys.into_iter().zip(mem_values) {
        store
            .write(&KeyValueMaps {
                key: to_arr(k, &[key_channels, height, width])?,
                value: to_arr(v, &[value_channels, height, width])?,
            })
            .map_err(err)?;
    }
    let out = memory_read(&current, &store).map_err(err)?;
    Ok(out.into_raw_vec_and_offset().0)
}

fn stats_from_rows(rows: &[Vec<f64>]) -> PyResult<FeatureStats> {
    if rows.len() < 2 {
        return Err(PyValueError::new_err("need at least 2 feature vectors"));
    }
    let d = rows[0].len();
    if rows.iter().any(|r| r.len() != d) {
        return Err(PyValueError::new_err("feature vectors have unequal lengths"));
    }
    let n = rows.len() as f64;
    let mu: Vec<f64> = (0..d).map(|i| rows.iter().map(|r| r[i]).sum::<f64>() / n).collect();
    let mut sigma = Array2::zeros((d, d));
    for r in rows {
        for i in 0..d {
            for j in 0..d {
                sigma[[i, j]] += (r[i] - mu[i]) * (r[j] - mu[j]);
            }
        }
    }
    sigma /= n - 1.0;
    Ok(FeatureStats { mu, sigma, n: rows.len() })
}

/// Fréchet distance between two sets of embedding vectors.
#[pyfunction]
fn fid_from_features(a: Vec<Vec<f64>>, b: Vec<Vec<f64>>) -> PyResult<f64> {
    fid(&stats_from_rows(&a)?, &stats_from_rows(&b)?).map_err(err)
}

/// Masked forward/backward flow consistency penalty; flows are flat
/// [2, height, width], the mask is [height, width].
#[pyfunction]
fn flow_consistency(
    flow_src: Vec<f64>,
    flow_dst: Vec<f64>,
    mask: Vec<f64>,
    height: usize,
    width: usize,
) -> PyResult<f64> {
    let fp = vton_core::losses::FlowPair {
        flow_src: to_arr(flow_src, &[2, height, width])?,
        flow_dst: to_arr(flow_dst, &[2, height, width])?,
        mask: to_arr(mask, &[height, width])?,
    };
    Ok(vton_core::losses::flow_consistency_value(&fp))
}

/// Frame-gap cap used by the curriculum sampler at a given epoch.
#[pyfunction]
fn current_max_skip(epoch: usize, skip_increment: usize, skip_epoch_period: usize) -> usize {
    let cfg = TrainConfig { skip_increment, skip_epoch_period, ..TrainConfig::default() };
    vton_core::train::current_max_skip(epoch, &cfg)
}

/// Run the full command-line interface; returns the exit code.
#[pyfunction]
fn run_cli(args: Vec<String>) -> i32 {
    let mut argv = vec!["vton".to_string()];
    argv.extend(args);
    vton_core::cli::run(argv)
}

#[pymodule]
fn _native(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(make_toy_data, m)?)?;
    m.add_function(wrap_pyfunction!(region_compose, m)?)?;
    m.add_function(wrap_pyfunction!(memory_read_py, m)?)?;
    m.add_function(wrap_pyfunction!(fid_from_features, m)?)?;
    m.add_function(wrap_pyfunction!(flow_consistency, m)?)?;
    m.add_function(wrap_pyfunction!(current_max_skip, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    Ok(())
}
