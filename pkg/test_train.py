"""
Tests for pretraining, fine-tuning and the ablation harness. The synthetic
benchmark and ablation runs take minutes and carry the `slow` marker.
"""
import numpy as np
import pytest

from connlearn.config import TrainConfig
from connlearn.errors import ConfigurationError, SchemaError, UsageError
from connlearn.pipeline import build_pipeline, make_batch, prepare_subjects
from connlearn.signals import DatasetManifest, synth_generate
from connlearn.storage.checkpoint import checkpoint_from_pipeline
from connlearn.storage.prior_cache import PriorCache
from connlearn.train import finetune, pretrain, run_ablation, subsample_fold, variant_config


def _descent_config(seed):
    return TrainConfig(
        iterations=1, heads=2, states=2, hidden=8, classifier_hidden=4,
        epochs=5, batch_size=8, te_bins=4, lr=5e-3, seed=seed,
    )


def test_pretrain_loss_descends():
    """epoch-5 total below epoch-1 for at least 4 of 5 seeds"""
    data = synth_generate(8, 6, 40, n_classes=1, seed=21)
    cache = PriorCache()
    wins = 0
    for seed in range(5):
        history = pretrain(data, _descent_config(seed), cache=cache, progress=False).history
        wins += int(history[-1].total < history[0].total)
    assert wins >= 4


def test_pretrain_log_is_deterministic(tmp_path, small_dataset, tiny_config):
    for name in ("a", "b"):
        pretrain(small_dataset, tiny_config, log_path=tmp_path / f"{name}.jsonl", progress=False)
    a, b = (tmp_path / "a.jsonl").read_bytes(), (tmp_path / "b.jsonl").read_bytes()
    assert a == b
    lines = a.decode().splitlines()
    assert len(lines) == tiny_config.epochs
    assert '"wall_time"' not in lines[0]


def test_pretrain_wall_time_opt_in(tmp_path, small_dataset, tiny_config):
    config = tiny_config.model_copy(update={"log_wall_time": True, "epochs": 1})
    pretrain(small_dataset, config, log_path=tmp_path / "log.jsonl", progress=False)
    assert '"wall_time"' in (tmp_path / "log.jsonl").read_text()


def test_pretrain_empty_dataset(tiny_config):
    empty = DatasetManifest(name="empty", subjects=(), n_regions=4, n_timepoints=20)
    with pytest.raises(ConfigurationError):
        pretrain(empty, tiny_config)


def test_pretrain_frozen_learner_keeps_initialization(small_dataset, tiny_config):
    config = tiny_config.model_copy(update={"learner_mode": "frozen"})
    outcome = pretrain(small_dataset, config, progress=False)
    fresh = build_pipeline(config, small_dataset.n_timepoints)
    for a, b in zip(fresh.learners.parameters(), outcome.pipeline.learners.parameters()):
        assert a.detach().numpy().tobytes() == b.detach().numpy().tobytes()


def test_finetune_keeps_learner_bytes(small_dataset, tiny_config):
    checkpoint = pretrain(small_dataset, tiny_config, progress=False).checkpoint()
    outcome = finetune(small_dataset, tiny_config, checkpoint, folds=2)
    for pipeline in outcome.pipelines:
        for name, tensor in pipeline.learners.state_dict().items():
            assert tensor.numpy().tobytes() == checkpoint.params[f"learners.{name}"].tobytes(), name
    results = outcome.results
    assert len(results.folds) == 2
    assert sorted(i for f in results.folds for i in f.test_ids) == sorted(s.subject_id for s in small_dataset.subjects)
    assert results.checkpoint_sha256 == checkpoint.sha256
    assert set(results.aggregate) >= {"acc", "auc"}
    assert not results.from_scratch


def test_finetune_from_scratch_trains_learner(small_dataset, tiny_config):
    outcome = finetune(small_dataset, tiny_config, None, folds=2)
    assert outcome.results.from_scratch
    assert outcome.results.checkpoint_sha256 is None
    assert any(p.requires_grad for p in outcome.pipelines[0].learners.parameters())


def test_finetune_guards(small_dataset, tiny_config):
    unlabeled = synth_generate(6, 6, 40, n_classes=1)
    with pytest.raises(SchemaError):
        finetune(unlabeled, tiny_config, None)
    with pytest.raises(ConfigurationError):
        finetune(small_dataset, tiny_config, None, folds=5)

    pipeline = pretrain(small_dataset, tiny_config, progress=False).pipeline
    with pytest.raises(UsageError):
        finetune(small_dataset, tiny_config, checkpoint_from_pipeline(pipeline, "finetuned"), folds=2)
    wider = tiny_config.model_copy(update={"hidden": 6})
    with pytest.raises(ConfigurationError, match="hidden"):
        finetune(small_dataset, wider, checkpoint_from_pipeline(pipeline, "pretrained"), folds=2)


def test_subsample_fold_is_stratified():
    labels = np.tile([0, 1], 10)
    train = np.arange(20)
    kept = subsample_fold(train, labels, 0.5, seed=0)
    assert len(kept) == 10
    assert np.bincount(labels[kept]).tolist() == [5, 5]
    assert subsample_fold(train, labels, 1.0, seed=0) is train


def test_finetune_ratio_shrinks_training_folds():
    data = synth_generate(12, 6, 40, seed=2)
    config = TrainConfig(
        iterations=1, heads=2, states=2, hidden=4, classifier_hidden=4,
        finetune_epochs=1, te_bins=3, folds=2, finetune_ratio=0.5,
    )
    results = finetune(data, config, None).results
    assert [f.train_size for f in results.folds] == [3, 3]


def test_variant_config():
    base = TrainConfig(alpha=0.2, states=3)
    assert variant_config(base, "no_graph_loss", 4).alpha == 0.0
    assert variant_config(base, "single_state", 4).states == 1
    assert variant_config(base, "fixed_learner", 4).learner_mode == "fixed"
    assert variant_config(base, "full", 4).seed == 4
    with pytest.raises(UsageError):
        variant_config(base, "nonsense", 0)


def _benchmark(noise):
    pre = synth_generate(200, 16, 200, n_classes=2, coupling_strength=0.6, noise_std=noise,
                         seed=100, template_seed=1, labeled=False, name="pretrain")
    target = synth_generate(60, 16, 200, n_classes=2, coupling_strength=0.6, noise_std=noise,
                            seed=200, template_seed=1, name="target")
    return pre, target


@pytest.mark.slow
def test_synthetic_benchmark_end_to_end():
    pre, target = _benchmark(1.0)
    config = TrainConfig(epochs=50, lr=1e-3)
    outcome = pretrain(pre, config, progress=False)
    checkpoint = outcome.checkpoint()
    tuned = finetune(target, config, checkpoint, folds=5)
    assert tuned.results.aggregate["acc"].mean >= 0.90
    assert tuned.results.aggregate["auc"].mean >= 0.92
    for pipeline in tuned.pipelines:
        for name, tensor in pipeline.learners.state_dict().items():
            assert tensor.numpy().tobytes() == checkpoint.params[f"learners.{name}"].tobytes()


@pytest.mark.slow
def test_ablation_direction():
    pre, target = _benchmark(1.5)
    report = run_ablation(
        pre, target, TrainConfig(epochs=50, lr=1e-3), seeds=range(5),
        variants=["full", "fixed_learner", "no_graph_loss"], progress=False,
    )
    acc = {v.variant: v.mean_acc for v in report.variants}
    assert acc["full"] >= acc["fixed_learner"]
    assert acc["full"] >= acc["no_graph_loss"]


@pytest.mark.slow
def test_graph_loss_sparsifies_connectivity():
    """alpha=10 lowers the mean Frobenius norm of A^L against alpha=0 over 5 seeds"""
    data = synth_generate(16, 8, 60, n_classes=2, labeled=False, seed=31)
    norms = {}
    for alpha in (0.0, 10.0):
        per_seed = []
        for seed in range(5):
            config = TrainConfig(
                iterations=2, heads=2, states=2, hidden=8, epochs=30, batch_size=16,
                te_bins=4, lr=5e-3, alpha=alpha, seed=seed,
            )
            pipeline = pretrain(data, config, progress=False).pipeline
            forward = pipeline(make_batch(prepare_subjects(data, config)))
            per_seed.append(float(sum(
                forward.final_graph(v).values.detach().pow(2).sum(dim=(-2, -1)).sqrt().mean() for v in ("fc", "ec")
            )))
        norms[alpha] = np.mean(per_seed)
    assert norms[10.0] < norms[0.0]
