"""Quick end-to-end check of the pysurvdtr extension."""

import json
import math
import tempfile

import pysurvdtr as dtr


def main():
    code = dtr.SimplexCode(3)
    verts = code.vertices()
    assert len(verts) == 3
    for v in verts:
        assert math.isclose(sum(x * x for x in v), 1.0, rel_tol=1e-12)
    assert code.recommend(verts[1]) == 2

    train, truth = dtr.simulate(2, 200, 0.61, seed=11)
    test, _ = dtr.simulate(2, 300, 0.61, seed=12)
    assert len(train) == 200 and train.p == 25 and train.k == 3
    assert len(json.loads(truth)["subjects"]) == 200
    again, _ = dtr.simulate(2, 200, 0.61, seed=11)
    assert again.ids() == train.ids()

    with tempfile.TemporaryDirectory() as d:
        train.write_dir(d)
        assert len(dtr.Dataset.read_dir(d)) == 200

    config = json.dumps({"t_g": 1.4, "lambda": 1.0, "b": 2.0, "max_iter": 50, "starts": 1})
    policy, summary = dtr.fit(train, config)
    assert "objective" in json.loads(summary)
    restored = dtr.Policy.from_json(policy.to_json())
    assert restored.theta() == policy.theta()

    value = dtr.evaluate(policy, test, 1.4)
    assert 0.0 <= value <= 1.0
    assert value == dtr.evaluate(restored, test, 1.4)
    picks = policy.decide(test, 1)
    assert all(a in (1, 2, 3) for a in picks)

    grid = json.dumps({"b_values": [2.0], "lambda_values": [0.5, 1.0], "d": 2})
    b, lam, score = dtr.cross_validate(train, grid, config)
    assert b == 2.0 and lam in (0.5, 1.0) and 0.0 <= score <= 1.0

    try:
        dtr.simulate(9, 10, 0.5)
    except ValueError:
        pass
    else:
        raise AssertionError("unknown example accepted")

    print(f"pysurvdtr {dtr.__version__} ok: test value {value:.3f}, cv picked b={b} lambda={lam}")


if __name__ == "__main__":
    main()
