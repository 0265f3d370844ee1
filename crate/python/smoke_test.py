"""Smoke test for the hello_py extension module.

Build first with `maturin develop -m crates/python/Cargo.toml` (or
`pip install --no-build-isolation -e crates/python`).
"""

import math

import hello_py


def main():
    pixels, shape, labels, names = hello_py.toy_dataset(classes=4, per_class=3, size=16, seed=7)
    assert shape == [12, 3, 16, 16], shape
    assert len(pixels) == math.prod(shape)
    assert all(0.0 <= p <= 1.0 for p in pixels)
    assert sorted(set(labels)) == [0, 1, 2, 3]
    assert len(names) == 4

    again = hello_py.toy_dataset(classes=4, per_class=3, size=16, seed=7)
    assert again[0] == pixels, "toy data must be deterministic"

    report = hello_py.storage_report(300, 1000, 1000, width=4)
    assert report["soft_label_bytes"] == 300 * 1000 * 1000 * 4
    assert abs(report["soft_label_mib"] - report["soft_label_bytes"] / 2**20) < 1e-9

    parts = hello_py.partition_classes(10, 5)
    assert [len(p) for p in parts] == [2] * 5
    assert sorted(c for p in parts for c in p) == list(range(10))

    cfg = hello_py.Config()
    cfg.seed = 3
    cfg.validate()
    round_trip = hello_py.Config.from_toml(cfg.to_toml())
    assert round_trip.hash() == cfg.hash()
    assert round_trip.seed == 3

    try:
        hello_py.Config.from_toml("[teachers]\nwindow = [5, 2]\n")
    except ValueError:
        pass
    else:
        raise AssertionError("inverted teacher window must be rejected")

    assert "projector" in hello_py.Pipeline.stages()
    print("hello_py smoke test ok")


if __name__ == "__main__":
    main()
