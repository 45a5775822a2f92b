import numpy as np
import pytest

from langroute import pipeline as P
from langroute.awareness import AwarenessTable, partition
from langroute.corpus import build_synthetic_corpus
from langroute.model import ModelConfig, TransformerModel, forward
from langroute.numerics import GradientTape
from langroute.trainer import (MaskedAdamW, TrainConfig, TrainingError, UpdateMask, _schedule, build_update_mask,
                               finetune_pair, finetune_pairs, full_finetune, general_mask, train)

PAIRS = ["aa-bb", "aa-cc"]


@pytest.fixture(scope="module")
def setup():
    corpus = build_synthetic_corpus(3, PAIRS, 64, 8, seed=0)
    model = TransformerModel(ModelConfig(len(corpus.vocab), n_layers=3, d_model=16, d_ff=32, n_heads=2,
                                         max_seq_len=48, seed=0))
    data = {p: P.train_batches(corpus.train[p], corpus.vocab, 8, 0, 48) for p in PAIRS}
    rng = np.random.default_rng(0)
    table = AwarenessTable([1, 2], ["aa", "bb", "cc"], {1: rng.random((32, 3)), 2: rng.random((32, 3))},
                           pair_layers={"aa-bb": [1, 2], "aa-cc": [2]})
    return corpus, model, data, partition(table, 0.75)


def cfg(**kw):
    base = dict(learning_rate=1e-2, batch_size=8, grad_accum_steps=2, steps_per_pair=6, weight_decay=0.01)
    base.update(kw)
    return TrainConfig(**base)


def test_config_defaults_and_validation():
    c = TrainConfig()
    assert (c.learning_rate, c.batch_size, c.grad_accum_steps, c.epochs) == (5e-5, 8, 10, 1)
    assert (c.beta1, c.beta2, c.weight_decay, c.eps) == (0.9, 0.999, 0.01, 1e-8)
    with pytest.raises(ValueError):
        TrainConfig(grad_accum_steps=0)
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"lr": 1.0})


def test_round_robin_schedule_uses_accumulation_blocks():
    c = cfg(grad_accum_steps=10, steps_per_pair=25)
    assert _schedule(["a", "b"], c) == [("a", 10), ("b", 10), ("a", 10), ("b", 10), ("a", 5), ("b", 5)]
    assert _schedule(["a", "b"], cfg(schedule="sequential", steps_per_pair=3)) == [("a", 3), ("b", 3)]


def test_mask_counts(setup):
    _, model, _, part = setup
    d = model.config.d_model
    m = build_update_mask(model, part, ("aa", "cc"), [2])
    g = len(set(part.layers[2].general) | set(part.layers[2].pair_specific(("aa", "cc"))))
    assert m.count() == g * d + g + g * d
    with pytest.raises(ValueError):
        build_update_mask(model, part, ("aa", "cc"), [0])


def test_masks_of_two_pairs_differ_only_on_specific_neurons(setup):
    _, model, _, part = setup
    a = build_update_mask(model, part, ("aa", "bb"), [1]).dense(model)
    b = build_update_mask(model, part, ("aa", "cc"), [1]).dense(model)
    lp = part.layers[1]
    spec_ids = set(lp.specific["bb"]) | set(lp.specific["cc"])
    diff = np.nonzero(a["layers.1.ffn.b1"] != b["layers.1.ffn.b1"])[0]
    assert set(diff.tolist()) <= spec_ids
    rows = np.nonzero((a["layers.1.ffn.w1"] != b["layers.1.ffn.w1"]).any(axis=1))[0]
    assert set(rows.tolist()) <= spec_ids
    for name in a:
        if not name.startswith("layers.1.ffn."):
            assert not (a[name] ^ b[name]).any()


def _unmasked_identical(before, after, mask):
    dense = mask.dense(before)
    for name, t in before.params.items():
        keep = ~dense[name]
        if not np.array_equal(t.data[keep], after.params[name].data[keep]):
            return False
    return True


def test_freezing_is_bit_exact(setup):
    _, model, data, part = setup
    snap = model.copy()
    res = finetune_pair(model, "aa-bb", data["aa-bb"], part, cfg(steps_per_pair=20))
    mask = build_update_mask(model, part, ("aa", "bb"))
    assert _unmasked_identical(snap, res.model, mask)
    assert any(not np.array_equal(snap.params[n].data, res.model.params[n].data) for n in mask.coords)
    # input model untouched
    assert all(np.array_equal(snap.params[n].data, model.params[n].data) for n in model.params)


def test_multi_pair_freezing(setup):
    _, model, data, part = setup
    res = finetune_pairs(model, data, part, cfg())
    union = {}
    for tag in PAIRS:
        m = build_update_mask(model, part, tuple(tag.split("-")))
        for n, c in m.coords.items():
            union[n] = np.union1d(union.get(n, np.array([], int)), c)
    assert _unmasked_identical(model, res.model, UpdateMask(union))


def test_zero_steps_is_identity(setup):
    _, model, data, part = setup
    for res in (finetune_pair(model, "aa-bb", data["aa-bb"], part, cfg(steps_per_pair=0)),
                full_finetune(model, data, cfg(steps_per_pair=0))):
        assert all(np.array_equal(model.params[n].data, res.model.params[n].data) for n in model.params)


def test_determinism(setup):
    _, model, data, part = setup
    a = finetune_pairs(model, data, part, cfg())
    b = finetune_pairs(model, data, part, cfg())
    assert all(np.array_equal(a.model.params[n].data, b.model.params[n].data) for n in model.params)
    assert np.array_equal(a.log.losses(), b.log.losses())


def test_full_finetune_equals_all_true_mask(setup):
    _, model, data, _ = setup
    a = full_finetune(model, data, cfg())
    b = model.copy()
    train(b, data, cfg(), masks={p: UpdateMask.full(b) for p in PAIRS})
    assert all(np.array_equal(a.model.params[n].data, b.params[n].data) for n in model.params)


def test_optimizer_state_locality(setup):
    _, model, _, part = setup
    mask = build_update_mask(model, part, ("aa", "bb"))
    opt = MaskedAdamW(model.copy(), cfg())
    opt.set_mask(mask)
    assert opt.n_state() == mask.count() < model.n_params()
    assert set(opt.state) == set(mask.coords)


def test_general_moments_persist_across_pairs(setup):
    _, model, _, part = setup
    m = model.copy()
    opt = MaskedAdamW(m, cfg())
    a = build_update_mask(m, part, ("aa", "bb"), [1])
    b = build_update_mask(m, part, ("aa", "cc"), [1])
    keep = general_mask(m, part, [1])
    opt.set_mask(a)
    rng = np.random.default_rng(0)
    opt.step({n: rng.normal(size=t.shape) for n, t in m.params.items()})
    old = {n: (s[0].copy(), s[1].copy(), s[3].copy()) for n, s in opt.state.items()}
    opt.set_mask(b, persist=keep)
    for n, (idx, mom, _, t) in opt.state.items():
        g = set(keep.coords[n].tolist())
        o_idx, o_m, o_t = old[n]
        for k, c in enumerate(idx.tolist()):
            if c in g:
                j = int(np.searchsorted(o_idx, c))
                assert mom[k] == o_m[j] and t[k] == o_t[j] == 1
            else:
                assert mom[k] == 0 and t[k] == 0


def test_adamw_rule_against_hand_oracle():
    from langroute.numerics import Tensor

    class M:
        params = {"w": Tensor(np.array([[1.0, -2.0]])), "b": Tensor(np.array([0.5]))}

    c = TrainConfig(learning_rate=0.1, weight_decay=0.5)
    opt = MaskedAdamW(M, c)
    opt.set_mask(UpdateMask({"w": np.array([1]), "b": np.array([0])}))
    g = {"w": np.array([[3.0, 4.0]]), "b": np.array([-1.0])}
    opt.step(g)
    opt.step(g)
    # two identical gradients: mhat = g, vhat = g^2, so the Adam part moves by lr*g/(|g|+eps)
    w = -2.0
    for _ in range(2):
        w = w - 0.1 * 0.5 * w - 0.1 * 4.0 / (4.0 + 1e-8)
    assert M.params["w"].data[0, 0] == 1.0
    assert M.params["w"].data[0, 1] == pytest.approx(w, abs=1e-12)
    assert M.params["b"].data[0] == pytest.approx(0.5 + 2 * 0.1 * 1.0 / (1.0 + 1e-8), abs=1e-12)


def test_gradient_support_inside_mask(setup):
    _, model, data, part = setup
    from langroute.router import build_routing

    pair = ("aa", "bb")
    mask = build_update_mask(model, part, pair).dense(model)
    routing = build_routing(part, pair)
    b = data["aa-bb"][0]
    with GradientTape() as tape:
        logits, _ = forward(model, b, routing=routing)
        tape.backward(model.loss(logits, b))
    for j in routing:
        for leaf in ("w1", "b1"):
            name = f"layers.{j}.ffn.{leaf}"
            nz = tape.grad(model[name]) != 0
            assert not (nz & ~mask[name]).any()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_reports_step(setup):
    _, model, data, _ = setup
    with pytest.raises(TrainingError) as err:
        full_finetune(model, data, cfg(learning_rate=1e300, grad_accum_steps=1, weight_decay=0.0))
    assert err.value.step >= 1
    assert "step" in str(err.value)


def test_full_finetuning_decreases_loss(setup):
    corpus, model, data, _ = setup
    res = full_finetune(model, {"aa-bb": data["aa-bb"]},
                        cfg(learning_rate=3e-3, grad_accum_steps=1, steps_per_pair=200, weight_decay=0.0))
    L = res.log.losses()
    assert L[-50:].mean() < L[:50].mean()


def test_selective_smoke_train_below_60_percent():
    corpus = build_synthetic_corpus(2, ["aa-bb"], 1000, 10, seed=0)
    model = TransformerModel(ModelConfig(len(corpus.vocab), n_layers=4, d_model=64, d_ff=128, max_seq_len=48))
    data = P.train_batches(corpus.train["aa-bb"], corpus.vocab, 8, 0, 48)
    for b in data:
        b.pair = "aa-bb"
    layers = {"aa-bb": [1, 2, 3]}
    _, part = P.score_and_partition(model, corpus, ["aa", "bb"], layers, 0.9, limit=64)
    res = finetune_pair(model, "aa-bb", data, part,
                        TrainConfig(learning_rate=1e-3, grad_accum_steps=1, steps_per_pair=1000, weight_decay=0.0))
    L = res.log.losses()
    assert abs(L[0] - np.log(len(corpus.vocab))) < 0.15 * np.log(len(corpus.vocab))
    assert L[-50:].mean() < 0.6 * L[:5].mean()
