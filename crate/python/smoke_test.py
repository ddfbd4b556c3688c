"""End-to-end smoke test for the Python bindings.

Run after `pip install -e python --no-build-isolation`:
    python3 python/smoke_test.py
"""

import json
import math
import random
import tempfile
from pathlib import Path

import vton_py


def test_memory_read_uniform_keys():
    # zero keys give uniform attention: retrieved = mean of memory values
    h, w, ck, cv = 2, 2, 1, 1
    key = [0.0] * (ck * h * w)
    value = [0.5] * (cv * h * w)
    mem_values = [[1.0, 2.0, 3.0, 4.0], [5.0, 6.0, 7.0, 8.0]]
    mem_keys = [[0.0] * 4, [0.0] * 4]
    out = vton_py.memory_read(key, value, mem_keys, mem_values, ck, cv, h, w)
    assert len(out) == 2 * cv * h * w
    assert all(abs(v - 0.5) < 1e-12 for v in out[:4]), "current values pass through"
    mean = sum(mem_values[0] + mem_values[1]) / 8.0
    assert all(abs(v - mean) < 1e-9 for v in out[4:]), f"retrieved != mean: {out[4:]}"


def test_region_compose_exclusive_halves():
    c, h, w = 3, 2, 2
    content = [float(i + 1) for i in range(c * h * w)]
    base = [float(i + 100) for i in range(c * h * w)]
    mask = [1.0, 0.0, 0.0, 1.0]
    out = vton_py.region_compose(content, base, mask, c, h, w)
    # [6,H,W]: channels 0-2 carry masked content, 3-5 the unmasked base
    for ch in range(c):
        plane = content[ch * 4:(ch + 1) * 4]
        assert out[ch * 4:(ch + 1) * 4] == [plane[0], 0.0, 0.0, plane[3]]
        plane = base[ch * 4:(ch + 1) * 4]
        assert out[(c + ch) * 4:(c + ch + 1) * 4] == [0.0, plane[1], plane[2], 0.0]


def test_fid_closed_forms():
    rng = random.Random(7)
    a = [[rng.gauss(0.0, 1.0)] for _ in range(64)]
    assert vton_py.fid_from_features(a, a) < 1e-9
    b = [[x[0] + 1.0] for x in a]
    # pure mean shift of 1 with identical covariance
    assert abs(vton_py.fid_from_features(a, b) - 1.0) < 1e-9


def test_flow_consistency():
    h, w = 2, 2
    fs = [1.0] * (h * w) + [0.0] * (h * w)
    ft = list(fs)
    mask = [1.0] * (h * w)
    # fs + ft = (2, 0) at all four pixels -> mean squared norm 4
    assert abs(vton_py.flow_consistency(fs, ft, mask, h, w) - 4.0) < 1e-12
    neg = [-v for v in fs]
    assert vton_py.flow_consistency(fs, neg, mask, h, w) == 0.0


def test_schedule():
    assert [vton_py.current_max_skip(e, 5, 20) for e in (0, 19, 20, 39, 40)] == [
        5, 5, 10, 10, 15,
    ]


def test_cli_pipeline():
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        data = tmp / "data"
        ids = vton_py.make_toy_data(str(data), 3, 6, 32, 24, 7)
        assert len(ids) == 3

        sets = []
        for kv in [
            "arch.height=32", "arch.width=24", "arch.base_channels=4",
            "train.stage1_iters=4", "train.batch_stage1=1",
            "train.stage2_iters=3", "train.batch_stage2=1",
            "train.frames_per_sample=3", "train.checkpoint_every=1000",
        ]:
            sets += ["--set", kv]

        s1 = tmp / "stage1"
        code = vton_py.run_cli(
            ["train-tryon", "--data", str(data), "--out", str(s1), "--seed", "3"] + sets
        )
        assert code == 0, "train-tryon failed"
        ckpt1 = s1 / "stage1.ckpt.json"
        assert ckpt1.is_file()

        s2 = tmp / "stage2"
        code = vton_py.run_cli(
            ["train-refine", "--data", str(data), "--ckpt", str(ckpt1),
             "--out", str(s2), "--seed", "3"] + sets
        )
        assert code == 0, "train-refine failed"
        ckpt2 = s2 / "stage2.ckpt.json"
        assert ckpt2.is_file()

        ev = tmp / "eval"
        code = vton_py.run_cli(
            ["evaluate", "--data", str(data), "--ckpt", str(ckpt2),
             "--out", str(ev), "--seed", "3"] + sets
        )
        assert code == 0, "evaluate failed"
        report = json.loads((ev / "report.json").read_text())
        assert math.isfinite(report["fid"]) and math.isfinite(report["cts"])

        assert vton_py.run_cli(["frobnicate"]) == 2


def main():
    tests = [v for k, v in sorted(globals().items()) if k.startswith("test_")]
    for t in tests:
        t()
        print(f"{t.__name__}: ok")
    print(f"{len(tests)} smoke tests passed")


if __name__ == "__main__":
    main()
