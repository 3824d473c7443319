"""Smoke test for the pyfishnet extension.

Build and install it first:

    cd crates/python && maturin build --release -o dist && pip install dist/*.whl

then run `python3 python/smoke_test.py` from the repository root.
"""

import math
import os
import sys
import tempfile

import pyfishnet

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def config(name):
    with open(os.path.join(ROOT, "configs", name)) as f:
        return f.read()


def main():
    tiny = config("fishnet-tiny.cfg")
    assert pyfishnet.num_params(tiny) == 106352
    assert pyfishnet.num_flops(tiny) == 10558464
    assert pyfishnet.num_flops(tiny, (3, 64, 64)) > 3 * 10558464
    assert "arch = fishnet" in pyfishnet.parse_config(tiny)

    try:
        pyfishnet.parse_config(tiny.replace("reduction_k = 1, 2, 2", "reduction_k = 1, 5, 2"))
    except ValueError as e:
        assert "stage 1" in str(e), e
    else:
        raise AssertionError("invalid config accepted")

    rows = pyfishnet.bpcheck(tiny)
    assert len(rows) == 9
    assert all(r["verdict"] == "direct" and r["check"] == "agree" for r in rows), rows

    control = config("resnet-control.cfg")
    verdicts = {r["role"]: r["verdict"] for r in pyfishnet.bpcheck(control, verify=False)}
    assert verdicts == {"tail0": "blocked", "tail1": "blocked", "tail2": "direct"}, verdicts
    assert pyfishnet.iconvs(control) == [
        ("tail.s1.transition", "transition"),
        ("tail.s2.transition", "transition"),
    ]
    down = [n for n, _ in pyfishnet.iconvs(config("fishnet-tiny-conv.cfg")) if ".down." in n]
    assert down and not [n for n, _ in pyfishnet.iconvs(tiny) if ".down." in n]
    assert pyfishnet.export_dot(control).startswith("digraph")

    with tempfile.TemporaryDirectory() as tmp:
        train = os.path.join(tmp, "train.ftds")
        test = os.path.join(tmp, "test.ftds")
        ckpt = os.path.join(tmp, "m.fish")
        assert pyfishnet.generate("per_class=6,seed=2", train) == 60
        assert os.path.getsize(train) == 18 + 60 * (3 * 32 * 32 * 4 + 4)
        pyfishnet.generate("per_class=3,seed=2,split=test", test)
        count, shape, classes, labels = pyfishnet.dataset_info(test)
        assert (count, shape, classes) == (30, [3, 32, 32], 10)
        assert sorted(set(labels)) == list(range(10))

        metrics = pyfishnet.train(tiny, train, ckpt, epochs=2, batch_size=12, seed=1)
        assert [m[0] for m in metrics] == [0, 1]
        assert all(math.isfinite(m[2]) for m in metrics)
        acc, loss = pyfishnet.evaluate_checkpoint(ckpt, test)
        assert 0.0 <= acc <= 1.0 and math.isfinite(loss)
        out = pyfishnet.logits(ckpt, test, [0, 5, 7])
        assert len(out) == 3 and all(len(r) == 10 for r in out)

        with open(ckpt, "rb") as f:
            first = f.read()
        pyfishnet.train(tiny, train, ckpt, epochs=2, batch_size=12, seed=1)
        with open(ckpt, "rb") as f:
            assert f.read() == first, "training is not deterministic"

        try:
            pyfishnet.dataset_info(ckpt)
        except ValueError:
            pass
        else:
            raise AssertionError("checkpoint accepted as a dataset")

    print("pyfishnet smoke test passed")
    return 0


if __name__ == "__main__":
    sys.exit(main())
