"""Smoke test for the pymmrec extension.

Build and install first:
    cd crates/py && maturin build --release -o dist && pip install dist/*.whl
then run:
    python python/smoke_test.py
"""

import math
import tempfile

import pymmrec


def check_primitives():
    w = pymmrec.attention_weights([1.0, 0.0], [[1.0, 0.0], [0.0, 1.0], None])
    assert w[2] == 0.0, w
    assert abs(sum(w) - 1.0) < 1e-12, w
    assert abs(w[0] - math.e / (math.e + 1.0)) < 1e-12, w

    assert pymmrec.precision_at_k([1, 2, 3, 4], [2, 4], 2) == 0.5
    assert pymmrec.recall_at_k([1, 2, 3, 4], [2, 4], 4) == 1.0
    assert pymmrec.ndcg_at_k([2, 1], [2], 2) == 1.0
    assert pymmrec.auc([0.9, 0.1, 0.5], [True, False, False]) == 1.0
    assert pymmrec.f1([0.9, 0.2], [True, True]) == 2 / 3
    try:
        pymmrec.auc([0.1, 0.2], [True, True])
    except ValueError:
        pass
    else:
        raise AssertionError("AUC with one class must raise")


def check_workflow():
    with tempfile.TemporaryDirectory() as out:
        cfg = pymmrec.Config(seed=5, out_dir=out, max_epochs=1, n_users=200, n_videos=400)
        summary = pymmrec.gen_data(cfg)
        assert summary["n_users"] == 200, summary
        history = pymmrec.train(cfg)
        assert len(history["epochs"]) == 1, history
        report = pymmrec.evaluate(cfg)
        assert 0.0 <= report["metrics"]["auc"] <= 1.0, report

        model = pymmrec.Model.load(str(cfg.model_path))
        assert model.variant == "FULL" and model.d == 16
        data = pymmrec.Dataset.from_config(cfg)
        user = data.user_ids()[0]
        recs = model.recommend(data, user, k=5)
        assert len(recs) == 5
        scores = [r["score"] for r in recs]
        assert scores == sorted(scores, reverse=True), scores
        for r in recs:
            assert abs(sum(r["weights"]) - 1.0) < 1e-12

        explanation = model.explain(data, user, k=3)
        assert [i["rank"] for i in explanation["items"]] == [1, 2, 3]

        try:
            model.recommend(data, 10**9, k=5)
        except KeyError:
            pass
        else:
            raise AssertionError("unknown user must raise KeyError")

        cfg.variant = "TEXT_ONLY"
        assert "TEXT_ONLY" in cfg.to_json()


if __name__ == "__main__":
    check_primitives()
    check_workflow()
    print("pymmrec smoke test passed:", ", ".join(pymmrec.VARIANTS))
