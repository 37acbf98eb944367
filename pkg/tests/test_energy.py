import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from see_classifiers import energy as E
from see_classifiers import forest as F
from see_classifiers import model as M
from see_classifiers.errors import ConfigurationError, UsageError
from see_classifiers.inference import InferenceTrace, infer_dataset


def tr(fraction, pred=0, label=0, exit_taken=1):
    return InferenceTrace(0, pred, exit_taken, 0.1, fraction, label)


class TestEnergyRatio:
    def test_examples(self):
        assert E.energy_ratio([tr(1.0)] * 5) == 1.0
        assert E.energy_ratio([tr(0.4), tr(1.0)]) == pytest.approx(0.7, abs=1e-15)
        assert E.energy_ratio([tr(0.4)] * 3) == pytest.approx(0.4, abs=1e-15)

    @given(st.lists(st.sampled_from([0.2, 0.3, 0.4, 0.7, 1.0]), min_size=1, max_size=50))
    def test_mean_of_sensed_fractions(self, fr):
        traces = [tr(f) for f in fr]
        assert E.energy_ratio(traces) == pytest.approx(math.fsum(fr) / len(fr), abs=1e-12)
        # channels switch off together, so relative channel power does not matter
        weighted = E.energy_ratio(traces, E.SensorPowerModel((3.0, 0.5, 0.0, 1.0)))
        assert weighted == pytest.approx(math.fsum(fr) / len(fr), abs=1e-12)

    def test_errors(self):
        with pytest.raises(UsageError):
            E.energy_ratio([])
        with pytest.raises(ConfigurationError):
            E.energy_ratio([tr(1.0)], E.SensorPowerModel((0.0, 0.0)))
        with pytest.raises(ConfigurationError):
            E.energy_ratio([tr(1.0)], E.SensorPowerModel((1.0, -1.0)))


class TestPerClass:
    def test_all_correct(self):
        traces = [tr(1.0, c, c) for c in range(3) for _ in range(4)]
        assert E.per_class_accuracy(traces, 3) == [1.0, 1.0, 1.0]

    def test_absent_and_partial(self):
        traces = [tr(1.0, 0, 0), tr(1.0, 0, 0), tr(1.0, 0, 0), tr(1.0, 2, 0), tr(1.0, 2, 2)]
        assert E.per_class_accuracy(traces, 3) == [0.75, None, 1.0]

    def test_requires_labels(self):
        with pytest.raises(UsageError):
            E.per_class_accuracy([tr(1.0, 0, None)], 2)


class TestMemory:
    def test_arithmetic(self):
        assert E.params_to_kb(1000) == 7.8125

    def test_cnn(self):
        spec = M.ArchitectureSpec.build(4, 128, 6, (2, 3), (0.4, 0.7))
        see = M.assemble(spec)
        base = M.assemble(M.without_early_exits(spec))
        mem = E.memory_overhead(see, base)
        assert mem["see_kb"] >= mem["baseline_kb"] == M.memory_kb(base)
        own = E.memory_overhead(see)
        assert own["baseline_kb"] == E.params_to_kb(M.parameter_breakdown(see)["baseline"])

    def test_cascade(self, synthetic_splits):
        train, _ = synthetic_splits
        c = F.build_cascade(train, [0.3, 1.0], [(3, 3), (4, 6)], baseline_nodes=400)
        mem = E.memory_overhead(c)
        assert mem["see_kb"] < mem["baseline_kb"] == 400 * 32 / 1024
        with pytest.raises(UsageError):
            E.memory_overhead(F.ForestCascade(c.stages))


def test_report(trained_cnn, synthetic_splits):
    _, test = synthetic_splits
    traces = infer_dataset(trained_cnn, test, 0.4)
    rep = E.build_report(traces, trained_cnn, test.class_names, baseline_accuracy=0.9)
    assert sum(rep.exit_usage) == len(test)
    assert rep.accuracy == np.mean([t.predicted_label == t.true_label for t in traces])
    assert rep.mean_energy_ratio == E.energy_ratio(traces)
    assert rep.exit_macs == M.exit_macs(trained_cnn)
    text = rep.table()
    assert "Sensor energy ratio" in text and "baseline" in text
    assert json.loads(rep.to_json())["exit_usage"] == rep.exit_usage
    assert E.build_report(traces, trained_cnn, test.class_names, baseline_accuracy=0.9) == rep
