import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from langroute.detector import (ActivationTrace, activation_deltas, detect_layers, select_layers,
                                trace_activations, write_activation_csv, write_delta_csv)
from langroute.model import Batch, ModelConfig, TransformerModel


def tiny(n_layers=4):
    return TransformerModel(ModelConfig(vocab_size=15, n_layers=n_layers, d_model=8, d_ff=16, n_heads=2,
                                        max_seq_len=10, seed=1))


def data(n=3, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        ids = rng.integers(0, 15, (2, 6))
        valid = np.ones((2, 6), bool)
        valid[1, 4:] = False
        mask = valid.copy()
        mask[:, :2] = False
        out.append(Batch(ids, mask, valid, "aa-bb"))
    return out


def test_deltas_hand_example():
    tr = ActivationTrace(np.array([[1.0], [3.0], [2.0]]))
    assert activation_deltas(tr).tolist() == [2.0, 1.0]
    assert activation_deltas(ActivationTrace(np.ones((3, 2)))).tolist() == [0.0, 0.0]


def test_select_layers_examples():
    assert select_layers([2.0, 1.0], 1) == [1]
    assert select_layers([2.0, 1.0], 2) == [1, 2]
    assert select_layers([2.0, 1.0], 0) == []
    assert select_layers([1.0, 3.0, 3.0, 0.5], 1) == [2]  # tie goes to the lower boundary
    with pytest.raises(ValueError):
        select_layers([1.0], 2)


@settings(max_examples=50, deadline=None)
@given(vals=st.lists(st.integers(0, 3), min_size=1, max_size=9), k=st.integers(0, 9), seed=st.integers(0, 99))
def test_selection_contract(vals, k, seed):
    D = np.array(vals, dtype=float)
    k = min(k, D.size)
    sel = select_layers(D, k)
    assert len(sel) == k
    chosen = [b - 1 for b in sel]
    rest = [b for b in range(D.size) if b not in chosen]
    if chosen and rest:
        assert D[chosen].min() >= D[rest].max()
    # ties: among equal values the lower boundaries are picked first
    for b in chosen:
        assert all(D[r] < D[b] or r > b for r in rest)


def test_trace_shape_and_determinism():
    m = tiny()
    d = data()
    tr = trace_activations(m, d, passes=4)
    assert tr.means.shape == (4, 4)
    assert np.array_equal(tr.means[:, 0], tr.means[:, 3])  # pass 3 reuses batch 0
    assert np.array_equal(tr.means, trace_activations(m, d, passes=4).means)
    assert (activation_deltas(tr) >= 0).all()


def test_trace_ignores_padding():
    m = tiny()
    b = data(1)[0]
    tr = trace_activations(m, [b], passes=1)
    ids = b.ids.copy()
    ids[1, 4:] = 0
    tr2 = trace_activations(m, [Batch(ids, b.loss_mask, b.valid)], passes=1)
    assert np.allclose(tr.means, tr2.means, atol=1e-15)


def test_zero_ffn_weights_give_relu_of_bias_mean():
    m = tiny(3)
    for j in range(3):
        w1, b1, _, _ = m.ffn(j)
        w1.data[:] = 0.0
        b1.data[:] = np.linspace(-1, 1, 16) + j
    tr = trace_activations(m, data(), passes=2)
    for j in range(3):
        assert np.allclose(tr.means[j], np.maximum(np.linspace(-1, 1, 16) + j, 0).mean(), atol=1e-14)


def test_trace_errors():
    with pytest.raises(ValueError):
        trace_activations(tiny(), [], passes=1)
    with pytest.raises(ValueError):
        trace_activations(tiny(), data(), passes=0)


def test_detect_and_csv(tmp_path):
    rel, tr = detect_layers(tiny(), data(), k=2)
    assert len(rel.D) == 3 and len(rel.selected) == 2
    assert all(1 <= j <= 3 for j in rel.selected)
    write_activation_csv(tmp_path / "a.csv", {"aa-bb": tr})
    write_delta_csv(tmp_path / "d.csv", {"aa-bb": rel.D})
    rows = list(csv.reader(open(tmp_path / "a.csv")))
    assert rows[0] == ["pair", "layer", "mean_activation"] and len(rows) == 5
    lines = open(tmp_path / "d.csv").read().splitlines()
    assert lines[0].startswith("#") and lines[1] == "pair,boundary,D"
    assert len(lines) == 2 + 3
