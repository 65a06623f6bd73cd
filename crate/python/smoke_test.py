"""Smoke test for the pat_py extension.

Build and install the extension first, e.g.

    maturin build --release -m crates/py/Cargo.toml -o dist
    pip install dist/pat_py-*.whl

then run `python python/smoke_test.py` (or `pytest python/smoke_test.py`).
"""

import json
import math
import tempfile
from pathlib import Path

import pat_py

CONFIG = {
    "model": {"d_model": 16, "n_layers": 2, "n_heads": 2, "d_ff": 32, "vocab_size": 16, "max_seq_len": 24},
    "train": {"total_steps": 60, "batch_size": 4, "seq_len": 22, "lr_max": 0.005},
    "sparsify": {"target_prune_ratio": 0.25},
    "lora": {"r_lora": 4},
    "data": {"source": "copy(5,16)"},
}

TOKENS = [[1, 2, 3, 4, 5, 15, 1, 2], [9, 8, 7, 6, 5, 15, 9, 8]]


def max_abs_diff(a, b):
    return max(abs(x - y) for ra, rb in zip(a, b) for xa, xb in zip(ra, rb) for x, y in zip(xa, xb))


def test_schedule_functions():
    assert pat_py.temperature(0, 100) == 0.0
    assert math.isclose(pat_py.temperature(100, 100), 1000.0)
    assert pat_py.offset(0, 100) == 0.5
    assert pat_py.offset(60, 100) == 0.0
    assert pat_py.gate([0.3, -2.0, 0.0], 0, 100) == [1.0, 1.0, 1.0]
    assert pat_py.hio_param_count(4096, 200) == 1_638_600
    assert math.isclose(pat_py.cosine_lr(50, 100, 1e-3), 5e-4)


def test_rmsnorm_keeps_zero_channels():
    y = pat_py.rmsnorm([[3.0, 0.0, -4.0], [0.0, 0.0, 0.0]], [1.0, 2.0, 0.5])
    assert y[0][1] == 0.0 and y[1] == [0.0, 0.0, 0.0]
    rms = math.sqrt((9 + 16) / 3 + 1e-6)
    assert math.isclose(y[0][0], 3.0 / rms)


def test_train_prune_verify_round_trip():
    model = pat_py.Model(json.dumps(CONFIG))
    assert model.step == 0 and model.d_model == 16
    log = model.train()
    assert len(log) == 60 and model.step == 60
    assert log[-1]["loss_instruct"] < log[0]["loss_instruct"]

    logits = model.forward(TOKENS)
    assert len(logits) == 2 and len(logits[0]) == 8 and len(logits[0][0]) == 16

    pruned, report = model.prune()
    assert report["d"] == 16 and report["d_kept"] == 12 == pruned.d_kept
    assert report["max_residual"] <= 1e-4
    assert pruned.param_count == report["params_after"] < report["params_before"]
    assert pat_py.verify_equivalence(model, pruned) <= 1e-4

    with tempfile.TemporaryDirectory() as tmp:
        model.save(str(Path(tmp) / "model"))
        pruned.save(str(Path(tmp) / "pruned"))
        again = pat_py.Model.load(str(Path(tmp) / "model"))
        small = pat_py.PrunedModel.load(str(Path(tmp) / "pruned"))
        assert max_abs_diff(again.forward(TOKENS), logits) == 0.0
        assert small.kept == pruned.kept
        assert max_abs_diff(small.forward(TOKENS), pruned.forward(TOKENS)) == 0.0
        assert pat_py.run_cli(["verify", str(Path(tmp) / "model"), str(Path(tmp) / "pruned")]) == 0


def test_errors():
    try:
        pat_py.Model("{ not json")
    except ValueError:
        pass
    else:
        raise AssertionError("malformed config accepted")
    try:
        pat_py.Model.load("/nonexistent/checkpoint")
    except pat_py.PatError:
        pass
    else:
        raise AssertionError("missing checkpoint accepted")
    assert pat_py.run_cli(["no-such-command"]) == 2


if __name__ == "__main__":
    for name, fn in sorted(globals().items()):
        if name.startswith("test_") and callable(fn):
            fn()
            print(f"ok  {name}")
