import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from see_classifiers import forest as F
from see_classifiers.data import (
    Dataset,
    SyntheticSpec,
    format_csv,
    generate_synthetic,
    impute_hold_last,
    load_csv,
    parse_csv,
    save_csv,
    split,
)
from see_classifiers.errors import ConfigurationError, ParseError, UsageError

GOOD = """segment_id,t,ch_0,label
0,0,1.0,walk
0,1,2.0,walk
0,2,3.0,walk
0,3,4.0,walk
1,0,5.0,sit
1,1,6.0,sit
1,2,7.0,sit
1,3,8.0,sit
"""


def test_load_small_file(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text(GOOD, encoding="utf-8")
    ds = load_csv(p)
    assert (len(ds), ds.channels, ds.length) == (2, 1, 4)
    assert ds.class_names == ["sit", "walk"]
    np.testing.assert_array_equal(ds.X[1, 0], [5, 6, 7, 8])
    assert ds.y.tolist() == [1, 0]


def test_numeric_labels_sorted_numerically():
    text = "segment_id,t,ch_0,label\n0,0,1,10\n1,0,1,9\n2,0,1,2\n"
    assert parse_csv(text).class_names == ["2", "9", "10"]


BAD = [
    ("", 1),
    ("seg,t,ch_0,label\n0,0,1,a\n", 1),
    ("segment_id,t,ch_1,label\n0,0,1,a\n", 1),
    ("segment_id,t,ch_0,label\n", 2),
    ("segment_id,t,ch_0,label\n0,0,1,a\n0,1,a\n", 3),
    ("segment_id,t,ch_0,label\n0,0,x,a\n", 2),
    ("segment_id,t,ch_0,label\n0,0,nan,a\n", 2),
    ("segment_id,t,ch_0,label\n0,0,1,a\n0,1.5,1,a\n", 3),
    ("segment_id,t,ch_0,label\n0,0,1,a\n0,1,1,b\n", 3),
    ("segment_id,t,ch_0,label\n0,0,1,a\n0,2,1,a\n", 3),
    ("segment_id,t,ch_0,label\n0,1,1,a\n", 2),
    ("segment_id,t,ch_0,label\n1,0,1,a\n0,0,1,a\n", 3),
    ("segment_id,t,ch_0,label\n0,0,1,a\n0,1,1,a\n1,0,1,a\n2,0,1,a\n2,1,1,a\n", 4),
    ("segment_id,t,ch_0,label\n0,0,1,a\n1,0,1,a\n1,1,1,a\n", 4),
    ("segment_id,t,ch_0,label\n0,0,1,a\n0,1,1,a\n1,0,1,a\n", 4),
    ("segment_id,t,ch_0,label\n0,0,1,\n", 2),
    ("segment_id,t,ch_0,label\n0,0,1,a\n\n", 3),
]


@pytest.mark.parametrize("text,line", BAD)
def test_bad_files_report_line(text, line):
    with pytest.raises(ParseError) as err:
        parse_csv(text)
    assert err.value.line == line
    assert str(err.value).startswith(f"line {line}:")


def test_unknown_label_with_class_list():
    with pytest.raises(ParseError, match="unknown label 'walk'"):
        parse_csv(GOOD, class_names=["sit", "run"])


def _mutations():
    lines = GOOD.splitlines()
    return st.one_of(
        # drop a column from one data row
        st.integers(1, 8).map(lambda i: lines[:i] + [lines[i].rsplit(",", 2)[0] + "," + lines[i].rsplit(",", 1)[1]] + lines[i + 1:]),
        # non-numeric channel value
        st.integers(1, 8).map(lambda i: lines[:i] + [lines[i].replace(".0", "e", 1)] + lines[i + 1:]),
        # delete one sample (ragged or gapped segment)
        st.integers(1, 8).map(lambda i: lines[:i] + lines[i + 1:]),
        # swap two adjacent rows (unsorted)
        st.integers(1, 7).map(lambda i: lines[:i] + [lines[i + 1], lines[i]] + lines[i + 2:]),
        # change the label of one row inside a segment
        st.integers(1, 8).map(lambda i: lines[:i] + [lines[i].rsplit(",", 1)[0] + ",run"] + lines[i + 1:]),
        # infinite value
        st.integers(1, 8).map(lambda i: lines[:i] + [lines[i].replace(lines[i].split(",")[2], "inf", 1)] + lines[i + 1:]),
    )


@settings(max_examples=80, deadline=None)
@given(_mutations())
def test_corrupted_files_rejected(lines):
    text = "\n".join(lines) + "\n"
    with pytest.raises(ParseError) as err:
        parse_csv(text)
    assert 1 <= err.value.line <= len(lines) + 1


@settings(max_examples=30, deadline=None)
@given(n=st.integers(1, 5), c=st.integers(1, 3), length=st.integers(1, 6), seed=st.integers(0, 1000))
def test_csv_round_trip_bit_exact(tmp_path_factory, n, c, length, seed):
    r = np.random.default_rng(seed)
    X = r.normal(size=(n, c, length)) * 10.0 ** r.integers(-8, 8, size=(n, c, length))
    ds = Dataset(X, r.integers(0, 3, n), np.arange(n) * 3 + 1, ["x", "y", "z"])
    path = tmp_path_factory.mktemp("rt") / "d.csv"
    save_csv(ds, path)
    back = load_csv(path, class_names=ds.class_names)
    assert back.equals(ds)
    raw = path.read_bytes()
    assert b"\r" not in raw and raw.decode("utf-8") == format_csv(back)


class TestSplit:
    def test_proportions(self):
        ds = Dataset(np.zeros((100, 1, 4)), np.arange(100) % 4, np.arange(100), list("abcd"))
        tr, te = split(ds, 0.6, seed=1)
        assert (len(tr), len(te)) == (60, 40)
        for c in range(4):
            assert abs(tr.class_counts()[c] - 15) <= 1

    def test_deterministic_partition(self):
        ds = generate_synthetic(SyntheticSpec(n_per_class=17, seed=0))
        a, b = split(ds, 0.6, seed=5)
        a2, b2 = split(ds, 0.6, seed=5)
        assert a.equals(a2) and b.equals(b2)
        ids = np.concatenate([a.segment_ids, b.segment_ids])
        assert sorted(ids.tolist()) == ds.segment_ids.tolist()
        assert not set(a.segment_ids) & set(b.segment_ids)

    def test_singleton_class_goes_to_train(self):
        y = np.array([0] * 10 + [1])
        ds = Dataset(np.zeros((11, 1, 4)), y, np.arange(11), ["a", "b"])
        with pytest.warns(UserWarning, match="'b'"):
            tr, te = split(ds, 0.6)
        assert 10 in tr.segment_ids and 10 not in te.segment_ids

    def test_errors(self):
        ds = Dataset(np.zeros((4, 1, 4)), [0, 1, 0, 1], np.arange(4), ["a", "b"])
        with pytest.raises(UsageError):
            split(ds.subset([]))
        with pytest.raises(ConfigurationError):
            split(ds, 1.0)


class TestImpute:
    def test_examples(self):
        np.testing.assert_array_equal(impute_hold_last(np.array([[5.0, 7, 1, 2]]), 0.5), [[5, 7, 7, 7]])
        x = np.array([[1.0, 2, 3, 4], [9.0, 8, 7, 6]])
        np.testing.assert_array_equal(impute_hold_last(x, 1.0), x)
        np.testing.assert_array_equal(impute_hold_last(x, 0.75), [[1, 2, 3, 3], [9, 8, 7, 7]])

    def test_input_untouched(self):
        x = np.arange(8.0).reshape(2, 4)
        impute_hold_last(x, 0.5)
        assert x[0, 3] == 3

    def test_errors(self):
        with pytest.raises(UsageError):
            impute_hold_last(np.zeros((1, 4)), 0.2)
        with pytest.raises(UsageError):
            impute_hold_last(np.zeros((1, 4)), 1.5)

    @given(a=st.floats(0.05, 1.0), b=st.floats(0.05, 1.0), seed=st.integers(0, 100))
    def test_composition(self, a, b, seed):
        x = np.random.default_rng(seed).normal(size=(3, 40))
        lo, hi = min(a, b), max(a, b)
        if int(lo * 40 + 1e-9) < 1:
            return
        np.testing.assert_array_equal(impute_hold_last(impute_hold_last(x, hi), lo), impute_hold_last(x, lo))
        np.testing.assert_array_equal(impute_hold_last(x, 1.0), x)


class TestSynthetic:
    def test_deterministic(self):
        a = generate_synthetic(SyntheticSpec(n_per_class=5, seed=9))
        b = generate_synthetic(SyntheticSpec(n_per_class=5, seed=9))
        c = generate_synthetic(SyntheticSpec(n_per_class=5, seed=10))
        assert a.equals(b) and not a.equals(c)
        assert a.X.shape == (30, 4, 128) and a.class_counts().tolist() == [5] * 6

    def test_degenerate_specs(self):
        for spec in (SyntheticSpec(length=7), SyntheticSpec(easy_class_count=7), SyntheticSpec(num_classes=1)):
            with pytest.raises(ConfigurationError):
                generate_synthetic(spec)

    @pytest.mark.parametrize("seed", range(10))
    def test_easy_hard_margins(self, seed):
        # easy classes separable from 30% prefixes
        ds = generate_synthetic(SyntheticSpec(n_per_class=100, seed=seed))
        tr, te = split(ds, 0.6, seed)
        f = F.train_forest(F.featurize_prefix(tr.X, 0.3), tr.y, 10, 6, seed, 6)
        pred = F.predict_proba(f, F.featurize_prefix(te.X, 0.3)).argmax(axis=1)
        easy = te.y < 3
        assert np.mean(pred[easy] == te.y[easy]) >= 0.95
        # four hard classes look alike in the first 30%
        hard = generate_synthetic(SyntheticSpec(num_classes=6, easy_class_count=2, n_per_class=100, seed=seed))
        hard = hard.subset(np.flatnonzero(hard.y >= 2))
        tr, te = split(hard, 0.6, seed)
        f = F.train_forest(F.featurize_prefix(tr.X, 0.3), tr.y, 10, 6, seed, 6)
        pred = F.predict_proba(f, F.featurize_prefix(te.X, 0.3)).argmax(axis=1)
        assert np.mean(pred == te.y) <= 0.60
        # and apart on the full window
        f = F.train_forest(F.featurize_prefix(tr.X, 1.0), tr.y, 10, 6, seed, 6)
        assert np.mean(F.predict_proba(f, F.featurize_prefix(te.X, 1.0)).argmax(axis=1) == te.y) >= 0.95
