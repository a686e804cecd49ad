import math

import numpy as np
import pytest
import torch

from connlearn.config import DTYPE, TrainConfig
from connlearn.losses import cross_entropy, graph_loss, nt_xent, total_finetune_loss, total_pretrain_loss
from connlearn.pipeline import build_pipeline, make_batch, prepare_subjects
from connlearn.storage.prior_cache import PriorCache


def t(x):
    return torch.as_tensor(x, dtype=DTYPE)


def test_nt_xent_single_subject_is_zero():
    rng = np.random.default_rng(0)
    loss = nt_xent(t(rng.normal(size=(1, 4))), t(rng.normal(size=(1, 4))), tau=0.5)
    assert float(loss) == 0.0


def test_nt_xent_orthogonal_construction():
    """B=2, tau=1, positives at similarity 1, everything else 0 -> log(1 + 2/e)"""
    emb = t([[1.0, 0.0], [0.0, 1.0]])
    loss = nt_xent(emb, emb.clone(), tau=1.0)
    assert float(loss) == pytest.approx(math.log(1 + 2 / math.e), abs=1e-9)
    assert float(loss) == pytest.approx(0.5514, abs=1e-4)


def test_nt_xent_scale_and_order_invariance():
    rng = np.random.default_rng(1)
    fc, ec = t(rng.normal(size=(5, 3))), t(rng.normal(size=(5, 3)))
    base = float(nt_xent(fc, ec, 0.5))
    assert float(nt_xent(10 * fc, 10 * ec, 0.5)) == pytest.approx(base, abs=1e-12)
    perm = torch.as_tensor([3, 0, 4, 1, 2])
    assert float(nt_xent(fc[perm], ec[perm], 0.5)) == pytest.approx(base, abs=1e-12)
    assert base >= 0.0


def test_nt_xent_variants():
    rng = np.random.default_rng(2)
    fc, ec = t(rng.normal(size=(4, 3))), t(rng.normal(size=(4, 3)))
    mirror = nt_xent(ec, fc, 0.5)
    sym = nt_xent(fc, ec, 0.5, symmetric=True)
    assert float(sym) == pytest.approx((float(nt_xent(fc, ec, 0.5)) + float(mirror)) / 2, abs=1e-12)
    # the literal formula depends on embedding scale
    assert float(nt_xent(fc, ec, 0.5, normalize=False)) != pytest.approx(
        float(nt_xent(3 * fc, 3 * ec, 0.5, normalize=False))
    )


def test_nt_xent_zero_embedding_is_finite():
    fc = t([[0.0, 0.0], [1.0, 0.0]])
    ec = t([[0.0, 1.0], [1.0, 0.0]])
    assert math.isfinite(float(nt_xent(fc, ec, 0.5)))


def test_graph_loss_hand_value():
    h = t([[0.0], [2.0]])
    a = t([[0.0, 0.5], [0.5, 0.0]])
    assert float(graph_loss(h, a, 0.01)) == pytest.approx(4.005, abs=1e-12)


def test_graph_loss_edge_cases():
    rng = np.random.default_rng(3)
    a = t(rng.uniform(size=(4, 4)))
    same = t(np.tile(rng.normal(size=3), (4, 1)))
    assert float(graph_loss(same, a, 0.01)) == pytest.approx(0.01 * float((a * a).sum()), abs=1e-12)
    assert float(graph_loss(same, a, 0.0)) == 0.0
    h = t(rng.normal(size=(4, 3)))
    assert float(graph_loss(h, torch.zeros(4, 4, dtype=DTYPE), 0.01)) == 0.0
    losses = [float(graph_loss(h, a, g)) for g in (0.0, 0.01, 0.1, 1.0)]
    assert losses == sorted(losses)


def test_cross_entropy_examples():
    assert float(cross_entropy(t([0.0, 0.0]), torch.tensor(1))) == pytest.approx(math.log(2), abs=1e-12)
    assert float(cross_entropy(t([1000.0, 0.0]), torch.tensor(0))) == pytest.approx(0.0, abs=1e-12)
    assert float(cross_entropy(t([1.0, -1.0]), torch.tensor(1))) == pytest.approx(2.1269, abs=1e-4)
    batch = cross_entropy(t([[0.0, 0.0], [1.0, -1.0]]), torch.tensor([0, 1]))
    assert float(batch) == pytest.approx((math.log(2) + 2.1269280110429727) / 2, abs=1e-12)


def _forward(dataset, config):
    subjects = prepare_subjects(dataset, config, PriorCache())
    pipeline = build_pipeline(config, dataset.n_timepoints)
    batch = make_batch(subjects)
    return pipeline, batch, pipeline(batch)


def test_pretrain_total_composition(small_dataset, tiny_config):
    config = tiny_config.model_copy(update={"alpha": 0.3, "beta": 0.2})
    _, _, forward = _forward(small_dataset, config)
    report = total_pretrain_loss(forward, config).report
    expected = report.contrastive + 0.3 * (report.graph_fc + report.graph_ec) + 0.2 * report.encoder_reg
    assert report.total == pytest.approx(expected, abs=1e-12)
    assert report.classification is None
    assert min(report.contrastive, report.graph_fc, report.graph_ec, report.encoder_reg) >= 0.0
    assert report.coefficients == {"alpha": 0.3, "beta": 0.2, "gamma": 0.01, "tau": 0.5}

    zeroed = tiny_config.model_copy(update={"alpha": 0.0, "beta": 0.0})
    terms = total_pretrain_loss(forward, zeroed)
    assert terms.report.total == pytest.approx(terms.report.contrastive, abs=1e-15)


def test_pretrain_total_single_subject_is_zero(small_dataset, tiny_config):
    config = tiny_config.model_copy(update={"alpha": 0.0, "beta": 0.0})
    _, _, forward = _forward(small_dataset.select([0]), config)
    assert float(total_pretrain_loss(forward, config).total) == 0.0


def test_finetune_total_composition(small_dataset, tiny_config):
    pipeline, batch, forward = _forward(small_dataset, tiny_config)
    terms = total_finetune_loss(forward, pipeline.logits(forward), batch.labels, tiny_config)
    report = terms.report
    assert report.total == pytest.approx(report.classification + tiny_config.beta * report.encoder_reg, abs=1e-12)
    assert report.contrastive == 0.0
