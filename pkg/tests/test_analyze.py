import math
import os

import numpy as np
import pytest

from hyperloop import analyze
from hyperloop import model as mdl
from hyperloop.config import ModelConfig

GOLDEN = os.path.join(os.path.dirname(__file__), "golden")

ARCHS = {
    "vanilla": dict(arch_kind="vanilla", middle_layers=2, loops=1, streams=1),
    "looped": dict(arch_kind="looped", streams=1),
    "hyperloop": dict(arch_kind="hyperloop", streams=2),
    "mhc": dict(arch_kind="mhc", middle_layers=2, loops=1, streams=2, hres_mode="sinkhorn"),
}


def tiny(**kw):
    base = dict(vocab_size=31, model_dim=16, head_count=2, begin_layers=1, middle_layers=2, loops=3, end_layers=1, seed=4)
    base.update(kw)
    return ModelConfig(**base)


def batches(seed=0, count=2, B=2, T=6, V=31):
    rng = np.random.default_rng(seed)
    return [(rng.integers(0, V, size=(B, T)), rng.integers(0, V, size=(B, T))) for _ in range(count)]


def perturb(model, seed=1, std=0.3):
    """Push every parameter away from init so HC maps and loop embeddings matter."""
    rng = np.random.default_rng(seed)
    for p in model.parameters():
        p.data = (p.data + std * rng.standard_normal(p.data.shape)).astype(p.data.dtype)
    return model


@pytest.mark.parametrize("arch", sorted(ARCHS))
def test_final_lens_ce_equals_eval_ce(arch):
    model = perturb(mdl.build(tiny(**ARCHS[arch]), dtype=np.float64))
    data = batches()
    rep = analyze.logit_lens(model, data)
    assert len(rep) == model.config.unrolled_depth + 1
    ce = np.mean([model.loss(x, y).item() for x, y in data])
    assert abs(rep.ce[-1] - ce) <= 1e-4


@pytest.mark.parametrize("arch", sorted(ARCHS))
def test_lens_metrics_in_range(arch):
    model = perturb(mdl.build(tiny(**ARCHS[arch])))
    rep = analyze.logit_lens(model, batches(1))
    V = model.config.vocab_size
    assert np.all(np.isfinite(rep.ce))
    assert np.all(rep.entropy >= -1e-9) and np.all(rep.entropy <= math.log(V) + 1e-9)
    assert np.all((0 <= rep.accuracy) & (rep.accuracy <= 1))


def test_untrained_lens_is_near_uniform():
    model = mdl.build(tiny(arch_kind="looped", vocab_size=257, streams=1))
    rep = analyze.logit_lens(model, batches(2, count=4, B=4, T=16, V=257))
    assert np.all(np.abs(rep.entropy - math.log(257)) < 0.05)
    assert np.all(rep.accuracy < 0.05)


def test_loop_boundaries():
    rep = analyze.logit_lens(mdl.build(tiny(arch_kind="hyperloop", streams=2)), batches())
    # b=1, m=2, L=3: boundaries after effective layers 3, 5, 7
    assert np.flatnonzero(rep.loop_boundary).tolist() == [3, 5, 7]
    vanilla = analyze.logit_lens(mdl.build(tiny(**ARCHS["vanilla"])), batches())
    assert not vanilla.loop_boundary.any()


@pytest.mark.parametrize("arch", sorted(ARCHS))
def test_similarity_symmetric_unit_diagonal(arch):
    model = perturb(mdl.build(tiny(**ARCHS[arch])))
    rep = analyze.cosine_map(model, batches(3))
    D = model.config.unrolled_depth + 1
    assert rep.matrix.shape == (D, D)
    np.testing.assert_array_equal(rep.matrix, rep.matrix.T)
    np.testing.assert_allclose(np.diag(rep.matrix), 1.0, atol=1e-6)
    assert np.all(np.abs(rep.matrix) <= 1.0)
    assert (rep.cross_loop is None) == (arch in ("vanilla", "mhc"))


def zero_layers(model):
    for name, p in model.named_parameters().items():
        if name.startswith(("begin.", "middle.", "end.")) and not name.endswith("norm"):
            p.data[...] = 0.0
    return model


def test_zero_weight_model_all_ones_similarity():
    rep = analyze.cosine_map(zero_layers(mdl.build(tiny(arch_kind="looped", streams=1))), batches(4))
    np.testing.assert_allclose(rep.matrix, 1.0, atol=1e-6)
    assert rep.cross_loop == pytest.approx(1.0, abs=1e-6)


def test_zero_norm_vectors_counted(caplog):
    model = mdl.build(tiny(arch_kind="vanilla", middle_layers=1, loops=1, streams=1))
    model.emb.tok.data[...] = 0.0
    zero_layers(model)
    rep = analyze.cosine_map(model, batches(5, count=1))
    assert rep.zero_norm == (model.config.unrolled_depth + 1) * 12
    np.testing.assert_allclose(np.diag(rep.matrix), 1.0)  # diagonal is 1 by definition
    assert "zero-norm" in caplog.text


def test_cross_loop_indices():
    cfg = tiny(arch_kind="looped", streams=1)
    D = cfg.unrolled_depth + 1
    matrix = np.zeros((D, D))
    # middle layer 0 sits at effective layers 2, 4, 6 and layer 1 at 3, 5, 7
    for a, b in [(2, 4), (2, 6), (4, 6), (3, 5), (3, 7), (5, 7)]:
        matrix[a, b] = matrix[b, a] = 0.6
    assert analyze.cross_loop_similarity(matrix, cfg) == pytest.approx(0.6)


def test_early_merge_reproduces_boundary():
    """A zero middle block under the identity mix leaves the merged outer state unchanged."""
    cfg = tiny(arch_kind="hyperloop", streams=2)
    model = mdl.build(cfg, dtype=np.float64)
    for name, p in model.named_parameters().items():
        if name.startswith("middle.") and not name.endswith("norm"):
            p.data[...] = 0.0
    _, tr = model.forward(batches()[0][0], trace=True, identity_hc=True)
    b = cfg.begin_layers
    for d in range(b + 1, b + cfg.middle_layers * cfg.loops + 1):
        np.testing.assert_array_equal(tr.outer[d], tr.outer[b])


def test_early_merge_matches_true_recurrence_at_boundaries():
    cfg = tiny(arch_kind="hyperloop", streams=2)
    model = perturb(mdl.build(cfg, dtype=np.float64))
    _, tr = model.forward(batches()[0][0], trace=True)
    from hyperloop import hyperconn as hc
    from hyperloop.tensor import Tensor

    for d, state in tr.streams[1:]:
        np.testing.assert_allclose(tr.outer[d], hc.merge(Tensor(state)).data, rtol=1e-12)


# -- plot data ---------------------------------------------------------------------------------
def test_emit_and_read_round_trip(tmp_path):
    model = perturb(mdl.build(tiny(arch_kind="hyperloop", loops=7, middle_layers=2, streams=2)))
    data = batches(6)
    lens = analyze.logit_lens(model, data)
    sim = analyze.cosine_map(model, data)
    assert len(lens) == 17
    paths = analyze.emit_plotdata(lens, tmp_path) + analyze.emit_plotdata(sim, tmp_path)
    for p in paths:
        assert os.path.exists(p)
    lines = (tmp_path / "lens_ce.csv").read_text().splitlines()
    assert lines[0] == "layer,value,loop_boundary" and len(lines) == 18
    back = analyze.read_lens(tmp_path)
    for metric in analyze.LENS_METRICS:
        np.testing.assert_array_equal(getattr(back, metric), getattr(lens, metric))
    np.testing.assert_array_equal(back.loop_boundary, lens.loop_boundary)
    sback = analyze.read_similarity(tmp_path)
    np.testing.assert_array_equal(sback.matrix, sim.matrix)
    assert sback.cross_loop == sim.cross_loop


def test_emit_matches_golden(tmp_path):
    rep = analyze.LensReport(
        ce=np.array([3.5, 2.25, 1.0]),
        entropy=np.array([3.0, 2.0, 0.5]),
        accuracy=np.array([0.0, 0.25, 0.75]),
        loop_boundary=np.array([False, True, False]),
    )
    analyze.emit_plotdata(rep, tmp_path)
    sim = analyze.SimilarityReport(np.array([[1.0, 0.5], [0.5, 1.0]]), 0.5, np.array([False, True]))
    analyze.emit_plotdata(sim, tmp_path)
    for name in ("lens_ce.csv", "lens_entropy.csv", "lens_accuracy.csv", "similarity.csv", "cross_loop.csv"):
        with open(os.path.join(GOLDEN, name), encoding="utf-8") as fh:
            assert (tmp_path / name).read_text() == fh.read(), name


def test_emit_unknown_report_type(tmp_path):
    with pytest.raises(TypeError):
        analyze.emit_plotdata(object(), tmp_path)


def test_emit_unwritable_path(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    rep = analyze.LensReport(np.zeros(1), np.zeros(1), np.zeros(1), np.zeros(1, dtype=bool))
    with pytest.raises(OSError):
        analyze.emit_plotdata(rep, blocker / "sub")
