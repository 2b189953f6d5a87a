"""Smoke test for the normdyn Python extension.

Build and run from the repository root:

    cargo build -p normdyn-py --release --features extension-module
    cp target/release/libnormdyn_py.so python/normdyn.so
    python3 python/smoke_test.py
"""

import math
import os
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import normdyn  # noqa: E402


def close(a, b, tol=1e-12):
    return abs(a - b) <= tol * max(1.0, abs(a), abs(b))


def test_tensor_and_contract():
    a = normdyn.Tensor([2, 3], [1, 2, 3, 4, 5, 6])
    b = normdyn.Tensor([3, 2], [1, 0, 0, 1, 1, 1])
    c = normdyn.contract("ia,aj->ij", [a, b])
    assert c.shape == [2, 2]
    assert c.data == [4.0, 5.0, 10.0, 11.0]
    back = normdyn.Tensor.from_dtf1(a.to_dtf1())
    assert back == a
    assert a.to_dtf1()[:4] == b"DTF1"


def test_model_and_scale_invariance():
    m = normdyn.Model.tucker2(6, 2, 3, 5, seed=1)
    before = m.reconstruct().data
    m.rescale([2.0, 0.5, 1.0])
    after = m.reconstruct().data
    assert all(close(x, y) for x, y in zip(before, after))
    m.balance()
    s = m.norms_sq()
    assert max(s) - min(s) <= 1e-9 * max(s)
    assert normdyn.norm_deviation(s) <= 1e-9 * sum(s) ** 2


def test_training_and_checks():
    m = normdyn.Model.tucker([5, 4, 3], [2, 2, 2], seed=2, scale=0.5)
    target, _, _ = normdyn.generate_synthetic(m, seed=3)
    obj = normdyn.Objective.masked_mse(target)
    opt = normdyn.Optimizer("sam", eta=1e-3, rho=1e-2, base="sgd")
    records = opt.run(m, obj, 20)
    assert len(records) == 20 and records[-1]["t"] == 19
    r = records[0]
    assert close(r["q"], normdyn.norm_deviation(r["core_norms_sq"]))
    assert close(r["cov"], normdyn.norm_grad_covariance(r["core_norms_sq"], r["grad_norms_sq"]))
    assert math.isfinite(obj.loss(m))

    report = normdyn.check("sam-q-dynamics", m, obj, eta=1e-6, rho=1e-3)
    assert report["passed"], report
    das = normdyn.Optimizer("das", eta=1e-3, alpha=1e-2)
    step = das.step(m, obj)
    assert len(step["lambdas"]) == 4


def test_suite_and_config():
    out = normdyn.run_suite(seeds=1)
    assert out["passed"] and out["failed_checks"] == 0
    config = """
kind = "tucker2-noise"
seed = 1
[model]
family = "tucker2"
mode_sizes = [6, 5]
ranks = [2, 2]
init_scale = 0.5
[objective]
noise_alphas = [0.0, 0.1]
[optimizer]
kind = "sam"
eta = 0.001
rho = 0.01
iterations = 10
"""
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "c.toml")
        with open(path, "w") as f:
            f.write(config)
        res = normdyn.run_config(path, out=os.path.join(tmp, "out"))
        assert "experiment = tucker2-noise" in res["report"]
        assert os.path.exists(os.path.join(tmp, "out", "alpha_0.1", "trajectory.csv"))


def test_errors_are_value_errors():
    try:
        normdyn.Tensor([2, 2], [1.0])
    except ValueError:
        pass
    else:
        raise AssertionError("expected ValueError")


if __name__ == "__main__":
    tests = [v for k, v in sorted(globals().items()) if k.startswith("test_")]
    for t in tests:
        t()
        print(f"ok  {t.__name__}")
    print(f"{len(tests)} smoke tests passed")
