"""Smoke test for the xaiseg_py extension module.

Build and install first:  pip install --no-build-isolation -e crates/py
"""

import math
import os
import tempfile

import xaiseg_py as xs


def main():
    vol = xs.generate_phantom("complex", seed=3, height=32, width=32, depth=4, radius=(6.0, 9.0))
    assert len(vol["images"]) == 4 and len(vol["images"][0]) == 32
    wall, lumen = vol["wall"], vol["lumen"]
    for w, l in zip(wall, lumen):
        assert all(lv <= wv for wr, lr in zip(w, l) for wv, lv in zip(wr, lr))

    assert xs.iou_dice(wall[0], wall[0]) == (1.0, 1.0)
    assert xs.hd95(wall[1], wall[1]) == 0.0
    assert xs.chamfer(wall[0], wall[1]) >= 0.0
    assert xs.e_cons(wall) >= 0.0
    assert abs(xs.jsd([[1.0, 0.0]], [[0.0, 1.0]]) - math.log(2)) < 1e-5
    foi, fmi = xs.foi_fmi([[float(v) for v in r] for r in wall[0]], wall[0])
    assert abs(foi + fmi - 1.0) == 0.0 and foi > 0.99
    assert abs(xs.spearman([1, 2, 3], [10, 20, 30]) - 1.0) < 1e-12

    model = xs.Model(seed=1)
    out = model.infer(vol["images"][0], kappa=0.0)
    assert out["p_final"] == out["p_raw"]
    assert len(out["box"]) == 4 and 0 < model.param_count < 40000
    phi_sum = sum(map(sum, out["phi_focus"]))
    assert abs(phi_sum - 1.0) < 1e-5

    net = xs.PairNet(seed=2)
    assert 0.0 < net.score(wall[0], wall[1]) < 1.0
    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "m.segm")
        model.save(path)
        again = xs.Model.load(path)
        assert again.param_count == model.param_count
        assert xs.run_cli(["verify", "--suite", "metrics", "--n", "5"]) == 0
        assert xs.run_cli(["verify", "--suite", "nope"]) == 2
    try:
        xs.generate_phantom("weird")
    except ValueError:
        pass
    else:
        raise AssertionError("unknown tier accepted")
    print(f"xaiseg_py {xs.__version__} smoke test ok")


if __name__ == "__main__":
    main()
