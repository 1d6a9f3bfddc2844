"""Smoke test for the pyrotequiv extension module.

Build and install first:
    maturin build --release -m crates/python/Cargo.toml -o dist
    pip install dist/pyrotequiv-*.whl
"""

import numpy as np

import pyrotequiv as rq


def main():
    strict = rq.Config()
    approx = rq.Config("approx")
    ok, rows = rq.check_strictness(strict)
    assert ok and all(r["pass"] for r in rows)
    ok, rows = rq.check_strictness(approx)
    assert not ok
    assert next(r for r in rows if not r["pass"])["name"] == "stage1.down.down"

    small = strict.with_overrides(["input_size=32", "stem.channels=8", "stages.*.channels=16", "head.hidden_channels=16"])
    model = rq.Model(small, seed=0)
    x = np.random.default_rng(0).standard_normal((2, 1, 32, 32)).astype(np.float32)
    logits, angles = model.predict(x)
    assert logits.shape == (2, 4) and len(angles) == 2

    # Rotating the input leaves the class scores unchanged and turns the angle.
    logits_r, angles_r = model.predict(rq.rot90(x, 1))
    assert np.allclose(logits, logits_r, atol=1e-4)
    for a, b in zip(angles, angles_r):
        d = (b - a - np.pi / 2 + np.pi) % (2 * np.pi) - np.pi
        assert abs(d) < 1e-3, d

    worst = max(r["epsilon_normalized"] for r in model.equiv_error(x))
    assert worst <= 1e-5, worst
    feats = model.features(x)
    assert list(feats) == model.tap_names()

    pre, post = rq.sampling_mismatch(2)
    assert {p[1] % 2 for p in pre} == {1} and {p[1] % 2 for p in post} == {0}

    data = rq.gen_dataset(n_train=8, n_test=4, image_size=32)
    assert data["train_images"].shape == (8, 1, 32, 32)

    [(op, err, passed)] = rq.gradcheck("conv2d", 2)
    assert passed, (op, err)
    print(f"pyrotequiv {rq.__version__} smoke test passed ({model.param_count()} params)")


if __name__ == "__main__":
    main()
