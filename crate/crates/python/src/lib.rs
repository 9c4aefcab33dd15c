//! Python bindings for the optiflow core crate.

use std::path::PathBuf;

use optiflow::env::{Action, NavEnv};
use optiflow::explain::{self, FeaturePartition, KernelShapOptions, ShapMode, ShapResult};
use optiflow::flow::{self, CameraModel, FlowImage, VelocityState};
use optiflow::net::AgentCheckpoint;
use optiflow::ppo::{self, RolloutBuffer, StepEnd, TrainConfig, Transition};
use optiflow::rollout::{self, Controller, EvalSummary};
use optiflow::world::{self, HitKind, TunnelSpec, Vec2};
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn ppo_err(e: ppo::PpoError) -> PyErr {
    match e {
        ppo::PpoError::Io { .. } => PyIOError::new_err(e.to_string()),
        ppo::PpoError::Config(_) => PyValueError::new_err(e.to_string()),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn kind_name(kind: HitKind) -> &'static str {
    match kind {
        HitKind::Wall => "wall",
        HitKind::Obstacle => "obstacle",
        HitKind::FarPlane => "far_plane",
    }
}

#[pyclass(name = "Tunnel", module = "optiflow_py", frozen, from_py_object)]
#[derive(Clone)]
struct PyTunnel(TunnelSpec);

#[pymethods]
impl PyTunnel {
    /// `obstacles` is a list of `(x, y, radius)`.
    #[new]
    #[pyo3(signature = (id, name, length, width, obstacles=Vec::new()))]
    fn new(id: u32, name: String, length: f64, width: f64, obstacles: Vec<(f64, f64, f64)>) -> PyResult<Self> {
        let obs = obstacles.into_iter().map(|(x, y, r)| world::Obstacle::new(x, y, r)).collect();
        TunnelSpec::new(id, name, length, width, obs).map(Self).map_err(value_err)
    }

    #[staticmethod]
    fn from_text(text: &str) -> PyResult<Self> {
        TunnelSpec::from_text(text, "<python>").map(Self).map_err(value_err)
    }

    fn to_text(&self) -> String {
        self.0.to_text()
    }

    #[getter]
    fn id(&self) -> u32 {
        self.0.id
    }

    #[getter]
    fn name(&self) -> String {
        self.0.name.clone()
    }

    #[getter]
    fn length(&self) -> f64 {
        self.0.length
    }

    #[getter]
    fn width(&self) -> f64 {
        self.0.width
    }

    #[getter]
    fn obstacles(&self) -> Vec<(f64, f64, f64)> {
        self.0.obstacles.iter().map(|o| (o.center.x, o.center.y, o.radius)).collect()
    }

    fn is_free(&self, x: f64, y: f64) -> bool {
        self.0.is_free(Vec2::new(x, y))
    }

    fn collides(&self, x: f64, y: f64) -> bool {
        world::check_collision(&self.0, Vec2::new(x, y), world::BODY_RADIUS)
    }

    fn free_centerline(&self, x: f64, y: f64) -> f64 {
        self.0.free_centerline(Vec2::new(x, y))
    }

    /// `(distance, kind, obstacle_index)` for a horizontal ray.
    fn raycast(&self, origin: (f64, f64), direction: (f64, f64)) -> PyResult<(f64, &'static str, Option<usize>)> {
        let hit = world::raycast(&self.0, Vec2::new(origin.0, origin.1), Vec2::new(direction.0, direction.1))
            .map_err(value_err)?;
        Ok((hit.distance, kind_name(hit.kind), hit.obstacle))
    }

    fn __repr__(&self) -> String {
        format!("Tunnel({}, {:?}, {} x {} m, {} obstacles)", self.0.id, self.0.name, self.0.length, self.0.width, self.0.obstacles.len())
    }
}

#[pyclass(name = "FlowImage", module = "optiflow_py", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyFlowImage(FlowImage);

#[pymethods]
impl PyFlowImage {
    #[new]
    fn new(width: usize, height: usize, magnitude: Vec<f64>, dir_x: Vec<f64>, dir_y: Vec<f64>) -> PyResult<Self> {
        let n = width * height;
        if magnitude.len() != n || dir_x.len() != n || dir_y.len() != n {
            return Err(PyValueError::new_err(format!("every channel needs {n} values")));
        }
        Ok(Self(FlowImage { width, height, magnitude, dir_x, dir_y }))
    }

    #[staticmethod]
    fn zeros(width: usize, height: usize) -> Self {
        Self(FlowImage::zeros(width, height))
    }

    #[getter]
    fn width(&self) -> usize {
        self.0.width
    }

    #[getter]
    fn height(&self) -> usize {
        self.0.height
    }

    #[getter]
    fn magnitude(&self) -> Vec<f64> {
        self.0.magnitude.clone()
    }

    #[getter]
    fn dir_x(&self) -> Vec<f64> {
        self.0.dir_x.clone()
    }

    #[getter]
    fn dir_y(&self) -> Vec<f64> {
        self.0.dir_y.clone()
    }

    /// Channel-major network input with magnitudes clipped at `mag_scale`.
    fn to_input(&self, mag_scale: f64) -> Vec<f64> {
        self.0.to_input(mag_scale)
    }
}

#[pyclass(name = "Env", module = "optiflow_py")]
struct PyEnv(NavEnv);

#[pymethods]
impl PyEnv {
    #[new]
    #[pyo3(signature = (width=flow::DEFAULT_WIDTH, height=flow::DEFAULT_HEIGHT, tunnels=None))]
    fn new(width: usize, height: usize, tunnels: Option<Vec<PyTunnel>>) -> PyResult<Self> {
        let camera = CameraModel::new(width, height, flow::DEFAULT_FOV_X);
        let lib = match tunnels {
            Some(t) => t.into_iter().map(|t| t.0).collect(),
            None => world::tunnel_library(),
        };
        NavEnv::new(lib, camera).map(Self).map_err(value_err)
    }

    #[pyo3(signature = (tunnel=None, seed=0))]
    fn reset(&mut self, tunnel: Option<u32>, seed: u64) -> PyResult<(PyFlowImage, (f64, f64))> {
        let (obs, state) = self.0.reset(tunnel, seed).map_err(value_err)?;
        Ok((PyFlowImage(obs), (state.position.x, state.position.y)))
    }

    /// Returns `(observation, reward, terminated, truncated, info)`.
    fn step<'py>(&mut self, py: Python<'py>, ax: f64, ay: f64) -> PyResult<(PyFlowImage, f64, bool, bool, Bound<'py, PyDict>)> {
        let r = self.0.step(Action::new(ax, ay)).map_err(value_err)?;
        let info = PyDict::new(py);
        info.set_item("position", (r.info.position.x, r.info.position.y))?;
        info.set_item("applied", (r.info.applied.ax, r.info.applied.ay))?;
        info.set_item("event", r.info.event.as_str())?;
        info.set_item("crashed", r.info.crashed)?;
        info.set_item("succeeded", r.info.succeeded)?;
        Ok((PyFlowImage(r.observation), r.reward, r.terminated, r.truncated, info))
    }

    #[getter]
    fn tunnel(&self) -> PyTunnel {
        PyTunnel(self.0.tunnel().clone())
    }

    /// Per-column ray hits of the last rendered frame.
    fn column_hits(&self) -> Vec<(f64, &'static str, Option<usize>)> {
        self.0.last_hits().iter().map(|h| (h.distance, kind_name(h.kind), h.obstacle)).collect()
    }
}

#[pyclass(name = "Agent", module = "optiflow_py", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyAgent(AgentCheckpoint);

#[pymethods]
impl PyAgent {
    /// Freshly initialized agent for `width x height` observations.
    #[staticmethod]
    #[pyo3(signature = (width=flow::DEFAULT_WIDTH, height=flow::DEFAULT_HEIGHT, obs_scale=1.0, seed=0))]
    fn init(width: usize, height: usize, obs_scale: f64, seed: u64) -> PyResult<Self> {
        let arch = optiflow::net::Arch::for_image(width, height);
        ppo::init_agent(arch, obs_scale, seed).map(Self).map_err(value_err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        ppo::load_checkpoint(&path).map(Self).map_err(ppo_err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        ppo::save_checkpoint(&path, &self.0).map_err(ppo_err)
    }

    #[staticmethod]
    fn from_bytes(data: &[u8]) -> PyResult<Self> {
        AgentCheckpoint::from_bytes(data).map(Self).map_err(value_err)
    }

    fn to_bytes(&self) -> Vec<u8> {
        self.0.to_bytes()
    }

    #[getter]
    fn obs_scale(&self) -> f64 {
        self.0.obs_scale
    }

    #[getter]
    fn log_std(&self) -> (f64, f64) {
        let [a, b] = self.0.policy.log_std;
        (a, b)
    }

    /// Mean action, or a sample from the policy when `seed` is given.
    #[pyo3(signature = (obs, seed=None))]
    fn act(&self, obs: &PyFlowImage, seed: Option<u64>) -> PyResult<(f64, f64)> {
        let dist = self.0.policy.forward(&self.input(obs)).map_err(value_err)?;
        let a = match seed {
            Some(s) => dist.sample(&mut ChaCha8Rng::seed_from_u64(s)).0,
            None => dist.mode(),
        };
        Ok((a.ax, a.ay))
    }

    fn value(&self, obs: &PyFlowImage) -> PyResult<f64> {
        self.0.value.forward(&self.input(obs)).map_err(value_err)
    }

    /// Roll out on `tunnel`; returns summary statistics.
    #[pyo3(signature = (tunnel=None, episodes=20, seed=0, deterministic=true))]
    fn evaluate<'py>(
        &self,
        py: Python<'py>,
        tunnel: Option<u32>,
        episodes: usize,
        seed: u64,
        deterministic: bool,
    ) -> PyResult<Bound<'py, PyDict>> {
        let a = &self.0.arch();
        let mut env = NavEnv::with_library(CameraModel::new(a.width, a.height, flow::DEFAULT_FOV_X));
        let controller = if deterministic { Controller::Deterministic(&self.0) } else { Controller::Stochastic(&self.0) };
        let logs = py
            .detach(|| rollout::evaluate(&mut env, controller, tunnel, episodes, seed))
            .map_err(value_err)?;
        summary_dict(py, &EvalSummary::from_logs(&logs))
    }
}

impl PyAgent {
    fn input(&self, obs: &PyFlowImage) -> Vec<f64> {
        ppo::agent_input(&self.0, &obs.0).into_iter().map(f64::from).collect()
    }
}

fn summary_dict<'py>(py: Python<'py>, s: &EvalSummary) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("episodes", s.episodes)?;
    d.set_item("successes", s.successes)?;
    d.set_item("crashes", s.crashes)?;
    d.set_item("timeouts", s.timeouts)?;
    d.set_item("success_rate", s.success_rate())?;
    d.set_item("mean_abs_offset", s.mean_abs_offset)?;
    Ok(d)
}

#[pyfunction]
fn tunnel_library() -> Vec<PyTunnel> {
    world::tunnel_library().into_iter().map(PyTunnel).collect()
}

/// Image-plane flow of one pixel for translation `v` and rotation `w`.
#[pyfunction]
#[pyo3(signature = (u, v, depth, fx, fy, lin, ang=(0.0, 0.0, 0.0)))]
fn pixel_flow(u: f64, v: f64, depth: f64, fx: f64, fy: f64, lin: (f64, f64, f64), ang: (f64, f64, f64)) -> (f64, f64) {
    let vel = VelocityState { v: [lin.0, lin.1, lin.2], w: [ang.0, ang.1, ang.2] };
    flow::pixel_flow(u, v, depth, fx, fy, &vel)
}

/// Observation seen from `(x, y)` in `tunnel` while moving at `velocity`.
#[pyfunction]
#[pyo3(signature = (tunnel, x, y, velocity, width=flow::DEFAULT_WIDTH, height=flow::DEFAULT_HEIGHT))]
fn observe(tunnel: &PyTunnel, x: f64, y: f64, velocity: (f64, f64), width: usize, height: usize) -> PyResult<PyFlowImage> {
    let cam = CameraModel::new(width, height, flow::DEFAULT_FOV_X);
    let (img, _) = flow::observe(&tunnel.0, Vec2::new(x, y), Vec2::new(velocity.0, velocity.1), &cam).map_err(value_err)?;
    Ok(PyFlowImage(img))
}

/// Advantages and returns. `ends[t]` is "continue", "terminated" or
/// "truncated"; `next_values[t]` is only read where the episode is cut.
#[pyfunction]
fn compute_gae(
    rewards: Vec<f64>,
    values: Vec<f64>,
    ends: Vec<String>,
    next_values: Vec<f64>,
    gamma: f64,
    lam: f64,
) -> PyResult<(Vec<f64>, Vec<f64>)> {
    let n = rewards.len();
    if values.len() != n || ends.len() != n || next_values.len() != n {
        return Err(PyValueError::new_err("all sequences must have the same length"));
    }
    let mut buf = RolloutBuffer::with_capacity(n);
    for t in 0..n {
        let end = match ends[t].as_str() {
            "continue" => StepEnd::Continue,
            "terminated" => StepEnd::Terminated,
            "truncated" => StepEnd::Truncated,
            other => return Err(PyValueError::new_err(format!("unknown step end {other:?}"))),
        };
        buf.push(Transition {
            input: Vec::new(),
            action: [0.0; 2],
            log_prob: 0.0,
            reward: rewards[t],
            value: values[t],
            end,
            next_value: next_values[t],
        });
    }
    ppo::compute_gae(&buf, gamma, lam).map_err(ppo_err)
}

#[pyfunction]
fn gaussian_smooth(grid: Vec<f64>, width: usize, height: usize, sigma: f64) -> PyResult<Vec<f64>> {
    if grid.len() != width * height {
        return Err(PyValueError::new_err("grid size does not match width x height"));
    }
    if !(sigma >= 0.0) {
        return Err(PyValueError::new_err("sigma must be non-negative"));
    }
    Ok(explain::gaussian_smooth(&grid, width, height, sigma))
}

/// Shapley values of a Python model over square image regions.
///
/// `model` takes a `FlowImage` and returns a list of floats. Returns
/// `(phi, base_value, full_value)` with `phi[region][output]`.
#[pyfunction]
#[pyo3(signature = (model, obs, baseline, region, n_samples=explain::DEFAULT_SAMPLES, mode="auto", seed=0))]
fn kernel_shap(
    py: Python<'_>,
    model: Py<PyAny>,
    obs: &PyFlowImage,
    baseline: &PyFlowImage,
    region: usize,
    n_samples: usize,
    mode: &str,
    seed: u64,
) -> PyResult<(Vec<Vec<f64>>, Vec<f64>, Vec<f64>)> {
    let mode = match mode {
        "auto" => ShapMode::Auto,
        "exhaustive" => ShapMode::Exhaustive,
        "sampled" => ShapMode::Sampled,
        other => return Err(PyValueError::new_err(format!("unknown mode {other:?}"))),
    };
    let partition = FeaturePartition::square(obs.0.width, obs.0.height, region).map_err(value_err)?;
    let opts = KernelShapOptions { n_samples, mode };
    // The first Python error is kept and reported after the run.
    let failure: std::sync::Mutex<Option<PyErr>> = std::sync::Mutex::new(None);
    let call = |img: &FlowImage| -> Vec<f64> {
        Python::attach(|py| {
            let out = model
                .call1(py, (PyFlowImage(img.clone()),))
                .and_then(|r| r.extract::<Vec<f64>>(py));
            out.unwrap_or_else(|e| {
                failure.lock().unwrap().get_or_insert(e);
                vec![f64::NAN]
            })
        })
    };
    let result: Result<ShapResult, _> = py.detach(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        explain::kernel_shap(&call, &obs.0, &baseline.0, &partition, &opts, &mut rng)
    });
    if let Some(e) = failure.into_inner().unwrap() {
        return Err(e);
    }
    let r = result.map_err(value_err)?;
    Ok((r.phi, r.base_value, r.full_value))
}

/// Train agents into `out_dir`. Keyword arguments are config keys, for
/// example `epochs=2, tunnel=0`. Returns the per-agent metrics rows.
#[pyfunction]
#[pyo3(signature = (out_dir, **config))]
fn train<'py>(py: Python<'py>, out_dir: PathBuf, config: Option<&Bound<'py, PyDict>>) -> PyResult<Vec<Vec<Bound<'py, PyDict>>>> {
    let mut cfg = TrainConfig::default();
    if let Some(kw) = config {
        for (k, v) in kw.iter() {
            let key: String = k.extract()?;
            cfg.set(&key, &v.str()?.to_string()).map_err(value_err)?;
        }
    }
    let lib = world::tunnel_library();
    let out = py.detach(|| ppo::train(&cfg, &lib, &out_dir, |_, _| {})).map_err(ppo_err)?;
    out.metrics
        .iter()
        .map(|rows| {
            rows.iter()
                .map(|m| {
                    let d = PyDict::new(py);
                    d.set_item("epoch", m.epoch)?;
                    d.set_item("steps", m.steps)?;
                    d.set_item("episodes", m.episodes)?;
                    d.set_item("mean_return", m.mean_return)?;
                    d.set_item("success_rate", m.success_rate)?;
                    d.set_item("crash_rate", m.crash_rate)?;
                    d.set_item("mean_len", m.mean_len)?;
                    d.set_item("policy_loss", m.update.policy_loss)?;
                    d.set_item("value_loss", m.update.value_loss)?;
                    Ok(d)
                })
                .collect()
        })
        .collect()
}

#[pymodule]
fn optiflow_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTunnel>()?;
    m.add_class::<PyFlowImage>()?;
    m.add_class::<PyEnv>()?;
    m.add_class::<PyAgent>()?;
    m.add_function(wrap_pyfunction!(tunnel_library, m)?)?;
    m.add_function(wrap_pyfunction!(pixel_flow, m)?)?;
    m.add_function(wrap_pyfunction!(observe, m)?)?;
    m.add_function(wrap_pyfunction!(compute_gae, m)?)?;
    m.add_function(wrap_pyfunction!(gaussian_smooth, m)?)?;
    m.add_function(wrap_pyfunction!(kernel_shap, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add("BODY_RADIUS", world::BODY_RADIUS)?;
    m.add("FAR_PLANE", world::FAR_PLANE)?;
    Ok(())
}
