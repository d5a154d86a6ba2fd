"""End-to-end smoke test of the memefusion Python bindings.

Build first: pip install --no-build-isolation ./crates/python
"""

import json
import sys
import tempfile
from pathlib import Path

import memefusion as mf

REPO = Path(__file__).resolve().parent.parent


def main() -> int:
    assert mf.auroc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75
    assert mf.accuracy([0.2, 0.7], [0, 1]) == 1.0
    try:
        mf.auroc([0.5, 0.5], [1, 1])
    except mf.ConfigError:
        pass
    else:
        raise AssertionError("single-class AUROC should raise")

    cfg = mf.RunConfig.load(REPO / "configs" / "mock_synthetic.json", ["data.n=256"])
    assert cfg.with_overrides(["seed=1"]).hash() != cfg.hash()
    try:
        cfg.with_overrides(["train.nonsense=1"])
    except mf.ConfigError as err:
        assert "nonsense" in str(err)
    else:
        raise AssertionError("unknown key should raise")

    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        sizes = dict(mf.synth(tmp / "data", n=16, seed=0))
        assert sizes == {"train": 11, "dev_seen": 2, "test_unseen": 3}, sizes

        written = mf.train(cfg, tmp / "run")
        assert [p.name for p in written] == ["stage1", "final"], written
        model = mf.Model.load(written[-1])
        assert model.config_hash == cfg.hash()

        report = model.evaluate()
        print(report)
        assert report.n == 51 and 0.0 <= report.accuracy <= 1.0
        assert json.loads(report.to_json())["n"] == report.n

        image = next((tmp / "data" / "img").iterdir())
        for text in ["thunder riot smoke", ""]:
            score = model.predict(image, text)
            assert 0.0 <= score <= 1.0
            print(f"score={score:.4f} text={text!r}")

        bogus = tmp / "bogus.png"
        bogus.write_bytes(b"not an image")
        try:
            model.predict(bogus)
        except mf.DataError:
            pass
        else:
            raise AssertionError("bad image should raise")

    print("smoke test passed")
    return 0


if __name__ == "__main__":
    sys.exit(main())
