use pyo3::ffi::c_str;
use pyo3::prelude::*;
use pyo3::types::PyDict;

#[test]
fn module_round_trip() {
    use masd_py::masd_py as module;
    pyo3::append_to_inittab!(module);
    let dir = tempfile::tempdir().unwrap();
    Python::attach(|py| {
        let locals = PyDict::new(py);
        locals.set_item("tmp", dir.path().to_str().unwrap()).unwrap();
        py.run(
            c_str!(
                r#"
import os
import masd_py as m

env = m.Env("g3", seed=4)
assert env.n_agents == 3 and len(env.observations()) == 3
assert len(env.observations()[0]) == m.OBS_DIM and len(env.state()) == m.STATE_DIM
total = 0.0
while not env.done:
    obs, r, done = env.step(env.expert_actions())
    total += r
assert env.won and total > 0

try:
    env.step([9, 9, 9])
    raise AssertionError("bad action accepted")
except ValueError:
    pass
try:
    m.Env("x7")
    raise AssertionError("bad task accepted")
except ValueError:
    pass

data = os.path.join(tmp, "g3.jsonl")
n, win, length = m.collect("g3", 8, data, seed=2)
assert n == 8 and win >= 0.9 and length > 0

skills, losses = m.Skills.discover([data], method="3d", epochs=2, sizes="1,2,3", seed=1)
assert skills.method == "3d" and len(losses) == 2
part, codes = skills.assign([[0.1] * skills.dim, [0.2] * skills.dim, [-3.0] * skills.dim], manner="rule")
assert part.startswith("{") and len(codes) == 3
path = os.path.join(tmp, "skills.ckpt")
skills.save(path)
assert m.Skills.load(path).fingerprint() == skills.fingerprint()
try:
    skills.assign([[0.0] * skills.dim], manner="hier")
    raise AssertionError("hier accepted a 3d checkpoint")
except ValueError as e:
    assert "Ehier" in str(e)

policy, csv = m.Policy.train("g3", "rule", skills=skills, steps=1000, eval_every=500, eval_episodes=2, seed=3)
assert csv.splitlines()[0].startswith("step,episodes,win_rate")
assert policy.kind == "rule"
ppath = os.path.join(tmp, "policy.ckpt")
policy.save(ppath)
a = m.Policy.load(ppath).evaluate("g3", episodes=2, seed=5, trace=True)
b = policy.evaluate("g3", episodes=2, seed=5, trace=True)
assert a.trace == b.trace and a.episodes == 2 and 0.0 <= a.win_rate <= 1.0

flat, _ = m.Policy.train("g3", "flat", steps=500, eval_episodes=1)
assert flat.kind == "flat"

e = m.evaluate_expert("g3", episodes=20, seed=1)
assert e.win_rate >= 0.95 and e.ci_low <= e.win_rate <= e.ci_high
lo, hi = m.wilson_interval(5, 10)
assert 0.0 < lo < 0.5 < hi < 1.0
"#
            ),
            None,
            Some(&locals),
        )
        .unwrap_or_else(|e| {
            e.display(py);
            panic!("python checks failed: {e}")
        });
    });
}
