"""Smoke test for the pyaugoverlap extension module.

Build and install first, e.g. `maturin develop -m crates/py/Cargo.toml`.
"""
import json
import math

import pyaugoverlap as ao


def main():
    train, test = ao.Dataset.synthetic(train_per_class=200, test_per_class=50, seed=1)
    assert len(train) == 400 and train.num_classes == 2

    g = ao.Graph(train, 0.1)
    assert g.classwise_connected() == [True, True]
    assert g.label_violations()["inter_edges"] == 0
    assert ao.Graph(train, 0.0).num_components == len(train)

    radii = train.critical_radii()
    assert radii["r1"] <= radii["d_N"] <= radii["c_N"] <= radii["r2"]

    config = json.dumps({"r": 0.1, "epochs": 3, "activation": "tanh", "seed": 7})
    enc, trace = ao.Encoder.train(train, config)
    assert len(trace) == 3 and all(math.isfinite(t["loss"]) for t in trace)
    z_train = enc.embed(train.points)
    z_test = enc.embed(test.points)
    assert all(abs(sum(v * v for v in z) - 1.0) < 1e-9 for z in z_train)

    probe = ao.linear_probe(z_train, train.labels, z_test, test.labels)
    print(f"probe test accuracy {probe['test_acc']:.3f}")
    assert 0.0 <= probe["test_acc"] <= 1.0

    same = ao.Encoder.from_json(enc.to_json())
    assert same.embed(test.points[:3]) == z_test[:3]

    assert abs(ao.infonce([1.0, 0.0], [1.0, 0.0], [[1.0, 0.0]] * 8) - math.log(8)) < 1e-12
    assert ao.arc(0.5, 0.0) == 2.0
    cr, acr = ao.confusion_ratio([0, 1, 0, 1], [[1, 0], [0.99, 0.141], [0.96, 0.28], [0.92, 0.39]])
    assert cr == [1.0, 1.0, 1.0, 1.0] and acr == 1.0

    report = ao.bounds_report(enc, train, 0.1, m=64, seed=3)
    print(f"upper_holds={report['upper_holds']} lower_holds={report['lower_holds']}")

    ce = ao.uniform_counterexample(2000, 2, 8, seed=0)
    assert ce["probe_acc"] < 0.6
    print("ok")


if __name__ == "__main__":
    main()
