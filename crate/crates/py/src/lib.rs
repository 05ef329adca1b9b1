//! Python bindings: environments, data collection, skill discovery,
//! skill assignment, downstream training and evaluation.

use std::path::PathBuf;

use masd::dataset::{collect as collect_episodes, load_dataset, save_dataset, segment, CollectorPolicy};
use masd::env::{task, Action, Env as CoreEnv, TaskConfig, OBS_DIM, STATE_DIM};
use masd::grouper::GroupingContext;
use masd::nn::Checkpoint;
use masd::rng::stream;
use masd::runtime::{
    evaluate, evaluate_expert as core_evaluate_expert, train_downstream, train_flat, wilson_interval as core_wilson, Assignment, DownstreamConfig,
    EvalResult, FlatAgent, Manner, PolicyAgent, RolloutMode, SkillAgent, DEFAULT_HIDDEN,
};
use masd::vq::{parse_sizes, Discovery, DiscoveryConfig, Method};
use masd::Error;
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Config(_) | Error::Validation(_) | Error::Parse { .. } | Error::MissingTensors(_) | Error::Version { .. } => {
            PyValueError::new_err(e.to_string())
        }
        Error::Io(io) => PyIOError::new_err(io.to_string()),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn task_config(id: &str, sparse: bool) -> PyResult<TaskConfig> {
    let cfg = task(id).map_err(py_err)?;
    Ok(if sparse { cfg.sparse() } else { cfg })
}

/// Grid-world combat task `gN` (N agents against N enemies) or `gNvM`.
#[pyclass(name = "Env", module = "masd_py")]
pub struct PyEnv {
    inner: CoreEnv,
}

#[pymethods]
impl PyEnv {
    #[new]
    #[pyo3(signature = (task_id, seed = 0, sparse = false))]
    fn new(task_id: &str, seed: u64, sparse: bool) -> PyResult<Self> {
        let (inner, _) = CoreEnv::new(task_config(task_id, sparse)?, seed).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn n_agents(&self) -> usize {
        self.inner.config.n_agents
    }

    #[getter]
    fn n_enemies(&self) -> usize {
        self.inner.config.n_enemies
    }

    #[getter]
    fn max_steps(&self) -> usize {
        self.inner.config.max_steps
    }

    #[getter]
    fn t(&self) -> usize {
        self.inner.state.t
    }

    #[getter]
    fn done(&self) -> bool {
        self.inner.done()
    }

    #[getter]
    fn won(&self) -> bool {
        self.inner.state.won()
    }

    fn observations(&self) -> Vec<Vec<f64>> {
        self.inner.state.observations(&self.inner.config)
    }

    fn state(&self) -> Vec<f64> {
        self.inner.state.state_vector(&self.inner.config)
    }

    /// Positions of living and dead agents as `(x, y, health)`.
    fn agents(&self) -> Vec<(i32, i32, u32)> {
        self.inner.state.agents.iter().map(|u| (u.x, u.y, u.health)).collect()
    }

    fn enemies(&self) -> Vec<(i32, i32, u32)> {
        self.inner.state.enemies.iter().map(|u| (u.x, u.y, u.health)).collect()
    }

    /// Advances one step with action indices (0 stay, 1-4 moves, 5 attack).
    /// Returns `(observations, reward, done)`.
    fn step(&mut self, actions: Vec<usize>) -> PyResult<(Vec<Vec<f64>>, f64, bool)> {
        let acts = actions
            .into_iter()
            .map(Action::from_index)
            .collect::<masd::Result<Vec<_>>>()
            .map_err(py_err)?;
        let out = self.inner.step(&acts).map_err(py_err)?;
        Ok((out.observations, out.reward, out.done))
    }

    /// Scripted expert actions for the current state.
    fn expert_actions(&self) -> Vec<usize> {
        masd::env::greedy_actions(&self.inner.config, &self.inner.state)
            .into_iter()
            .map(Action::index)
            .collect()
    }
}

/// Collects scripted-expert episodes and writes them to `path`.
/// Returns `(episodes, win_rate, mean_length)`.
#[pyfunction]
#[pyo3(signature = (task_id, episodes, path, policy = "expert", seed = 0))]
fn collect(py: Python<'_>, task_id: &str, episodes: usize, path: PathBuf, policy: &str, seed: u64) -> PyResult<(usize, f64, f64)> {
    let cfg = task_config(task_id, false)?;
    let policy: CollectorPolicy = policy.parse().map_err(py_err)?;
    py.detach(|| {
        let (eps, summary) = collect_episodes(&cfg, episodes, policy, seed)?;
        save_dataset(&eps, &path)?;
        Ok((summary.episodes, summary.win_rate(), summary.mean_length))
    })
    .map_err(py_err)
}

/// Trained skill components: encoder, decoder, codebooks and grouper.
#[pyclass(name = "Skills", module = "masd_py", from_py_object)]
#[derive(Clone)]
pub struct PySkills {
    inner: Discovery,
}

#[pymethods]
impl PySkills {
    /// Trains skills on dataset files. Returns `(skills, per-epoch losses)`.
    #[staticmethod]
    #[pyo3(signature = (data, method = "3d", epochs = 200, horizon = 5, dim = 8, codes = 8, sizes = "1,2,3,4,5", seed = 0))]
    #[allow(clippy::too_many_arguments)]
    fn discover(
        py: Python<'_>,
        data: Vec<PathBuf>,
        method: &str,
        epochs: usize,
        horizon: usize,
        dim: usize,
        codes: usize,
        sizes: &str,
        seed: u64,
    ) -> PyResult<(Self, Vec<f64>)> {
        let method: Method = method.parse().map_err(py_err)?;
        let cfg = DiscoveryConfig {
            method,
            epochs,
            horizon,
            d: dim,
            k: codes,
            sizes: parse_sizes(sizes).map_err(py_err)?,
            seed,
            ..DiscoveryConfig::default()
        };
        py.detach(|| {
            let mut episodes = Vec::new();
            for p in &data {
                let (header, eps) = load_dataset(p)?;
                if header.obs_dim != OBS_DIM {
                    return Err(Error::Validation(format!("{}: observation dimension {}", p.display(), header.obs_dim)));
                }
                episodes.extend(eps);
            }
            let batches = segment(&episodes, cfg.horizon, false)?;
            let mut inner = Discovery::new(cfg, OBS_DIM)?;
            let report = inner.train(&batches, |_| {})?;
            Ok((Self { inner }, report.epochs.iter().map(|e| e.loss).collect()))
        })
        .map_err(py_err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ck = Checkpoint::load(&path).map_err(py_err)?;
        Ok(Self {
            inner: Discovery::from_checkpoint(&ck).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.to_checkpoint().save(&path).map_err(py_err)
    }

    #[getter]
    fn method(&self) -> String {
        self.inner.model.config.method.to_string()
    }

    #[getter]
    fn horizon(&self) -> usize {
        self.inner.model.config.horizon
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.model.config.d
    }

    /// Serialized skill tensors; equal strings mean identical skills.
    fn fingerprint(&self) -> String {
        masd::runtime::skill_fingerprint(&self.inner)
    }

    /// Maps one embedding per agent to codes. `state` and `obs` feed the
    /// grouper for `3d` and `hier`; zeros are used when omitted.
    /// Returns `(partition, codes)` as strings.
    #[pyo3(signature = (z, manner = "rule", state = None, obs = None))]
    fn assign(&self, z: Vec<Vec<f64>>, manner: &str, state: Option<Vec<f64>>, obs: Option<Vec<Vec<f64>>>) -> PyResult<(String, Vec<String>)> {
        let manner: Manner = manner.parse().map_err(py_err)?;
        let ctx = GroupingContext {
            state: state.unwrap_or_else(|| vec![0.0; STATE_DIM]),
            obs: obs.unwrap_or_else(|| vec![vec![0.0; OBS_DIM]; z.len()]),
        };
        let agent = SkillAgent::new(self.inner.clone(), manner, 1, &Default::default(), &mut stream(0, "assign")).map_err(py_err)?;
        let a: Assignment = agent.assign(&z, &ctx).map_err(py_err)?;
        Ok((a.partition.to_string(), a.codes.iter().map(ToString::to_string).collect()))
    }
}

/// Evaluation summary with a 95% Wilson interval.
#[pyclass(name = "EvalResult", module = "masd_py", get_all)]
pub struct PyEvalResult {
    episodes: usize,
    wins: usize,
    win_rate: f64,
    ci_low: f64,
    ci_high: f64,
    mean_return: f64,
    mean_length: f64,
    trace: Vec<String>,
}

impl From<EvalResult> for PyEvalResult {
    fn from(r: EvalResult) -> Self {
        let (ci_low, ci_high) = r.win_interval();
        Self {
            episodes: r.episodes,
            wins: r.wins,
            win_rate: r.win_rate(),
            ci_low,
            ci_high,
            mean_return: r.mean_return,
            mean_length: r.mean_length,
            trace: r.trace.iter().map(|s| s.to_line()).collect(),
        }
    }
}

#[pymethods]
impl PyEvalResult {
    fn __repr__(&self) -> String {
        format!(
            "EvalResult(episodes={}, wins={}, win_rate={:.4}, ci=({:.4}, {:.4}))",
            self.episodes, self.wins, self.win_rate, self.ci_low, self.ci_high
        )
    }
}

/// A trained downstream policy (skill-based or flat).
#[pyclass(name = "Policy", module = "masd_py")]
pub struct PyPolicy {
    inner: PolicyAgent,
}

#[pymethods]
impl PyPolicy {
    /// Trains a policy on `task_id`. `assign` is a manner (`3d`, `hier`,
    /// `mixed`, `rule`) or `flat`, which needs no skills. Returns
    /// `(policy, metrics_csv)`.
    #[staticmethod]
    #[pyo3(signature = (task_id, assign, skills = None, steps = 300_000, sparse = false, seed = 0, eval_every = 10_000, eval_episodes = 32))]
    #[allow(clippy::too_many_arguments)]
    fn train(
        py: Python<'_>,
        task_id: &str,
        assign: &str,
        skills: Option<PySkills>,
        steps: usize,
        sparse: bool,
        seed: u64,
        eval_every: usize,
        eval_episodes: usize,
    ) -> PyResult<(Self, String)> {
        let cfg = task_config(task_id, sparse)?;
        let dc = DownstreamConfig {
            steps,
            seed,
            eval_every,
            eval_episodes,
            hidden: DEFAULT_HIDDEN,
            ..DownstreamConfig::default()
        };
        let manner = if assign == "flat" {
            None
        } else {
            Some(assign.parse::<Manner>().map_err(py_err)?)
        };
        let skills = match (manner, skills) {
            (Some(_), None) => return Err(PyValueError::new_err(format!("`{assign}` assignment needs skills"))),
            (_, s) => s.map(|s| s.inner),
        };
        py.detach(|| {
            let mut rng = stream(seed, "init");
            match (manner, skills) {
                (Some(m), Some(sk)) => {
                    let mut agent = SkillAgent::new(sk, m, dc.hidden, &dc.ppo, &mut rng)?;
                    let out = train_downstream(&cfg, &mut agent, &dc, |_| {})?;
                    Ok((PolicyAgent::Skills(Box::new(agent)), out.metrics_csv()))
                }
                _ => {
                    let mut agent = FlatAgent::new(dc.hidden, &dc.ppo, &mut rng);
                    let out = train_flat(&cfg, &mut agent, &dc, |_| {})?;
                    Ok((PolicyAgent::Flat(agent), out.metrics_csv()))
                }
            }
        })
        .map(|(inner, csv)| (Self { inner }, csv))
        .map_err(py_err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ck = Checkpoint::load(&path).map_err(py_err)?;
        Ok(Self {
            inner: PolicyAgent::from_checkpoint(&ck).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.to_checkpoint().save(&path).map_err(py_err)
    }

    #[getter]
    fn kind(&self) -> String {
        match &self.inner {
            PolicyAgent::Skills(a) => a.manner.to_string(),
            PolicyAgent::Flat(_) => "flat".into(),
        }
    }

    #[pyo3(signature = (task_id, episodes = 100, seed = 0, sparse = false, trace = false))]
    fn evaluate(&self, py: Python<'_>, task_id: &str, episodes: usize, seed: u64, sparse: bool, trace: bool) -> PyResult<PyEvalResult> {
        if episodes == 0 {
            return Err(PyValueError::new_err("episodes must be positive"));
        }
        let cfg = task_config(task_id, sparse)?;
        let mode = RolloutMode { trace, ..RolloutMode::EVAL };
        py.detach(|| evaluate(&cfg, &self.inner, episodes, seed, mode))
            .map(Into::into)
            .map_err(py_err)
    }
}

/// Scripted expert with `epsilon`-uniform action noise.
#[pyfunction]
#[pyo3(signature = (task_id, episodes = 100, epsilon = 0.0, seed = 0, sparse = false, trace = false))]
fn evaluate_expert(task_id: &str, episodes: usize, epsilon: f64, seed: u64, sparse: bool, trace: bool) -> PyResult<PyEvalResult> {
    if episodes == 0 {
        return Err(PyValueError::new_err("episodes must be positive"));
    }
    let cfg = task_config(task_id, sparse)?;
    core_evaluate_expert(&cfg, epsilon, episodes, seed, trace).map(Into::into).map_err(py_err)
}

/// 95% Wilson score interval for a binomial proportion.
#[pyfunction]
fn wilson_interval(successes: usize, trials: usize) -> (f64, f64) {
    core_wilson(successes, trials)
}

#[pymodule]
pub fn masd_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("OBS_DIM", OBS_DIM)?;
    m.add("STATE_DIM", STATE_DIM)?;
    m.add_class::<PyEnv>()?;
    m.add_class::<PySkills>()?;
    m.add_class::<PyPolicy>()?;
    m.add_class::<PyEvalResult>()?;
    m.add_function(wrap_pyfunction!(collect, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_expert, m)?)?;
    m.add_function(wrap_pyfunction!(wilson_interval, m)?)?;
    Ok(())
}
