import json
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from graphau_pain.data.manifest import DatasetManifest
from graphau_pain.errors import (
    ConfigError,
    EmptyDataset,
    IncompatibleCheckpoint,
    NonOneHotLabel,
    NumericFailure,
    ShapeMismatch,
)
from graphau_pain.model import REPRESENTATION_PREFIXES, GraphAUPain
from graphau_pain.training import (
    HEAD_PREFIXES,
    Checkpoint,
    TrainConfig,
    au_bce_loss,
    au_positive_weights,
    one_hot,
    pretrain_au,
    resolve_class_weights,
    train_pain,
    weighted_ce_loss,
)
from conftest import small_model_config

T = torch.float64


# ---------------------------------------------------------------- weighted cross-entropy

def test_ce_perfect_prediction_is_zero():
    logits = torch.tensor([[200.0, 0.0, 0.0]], dtype=T)
    assert float(weighted_ce_loss(logits, one_hot([0], 3, T), [1.0, 1.0, 1.0])) == 0.0


def test_ce_hand_value():
    loss = weighted_ce_loss(torch.zeros(1, 2, dtype=T), one_hot([0], 2, T), [1.0, 1.0])
    assert abs(float(loss) - 0.69315) < 1e-5
    assert abs(float(loss) - math.log(2)) < 1e-12


def test_ce_linear_in_weights():
    g = torch.Generator().manual_seed(0)
    logits = torch.randn(6, 3, generator=g, dtype=T)
    y = one_hot([0, 1, 2, 2, 1, 0], 3, T)
    w = torch.tensor([0.2, 0.7, 2.1], dtype=T)
    assert torch.allclose(weighted_ce_loss(logits, y, 2 * w), 2 * weighted_ce_loss(logits, y, w))


def test_ce_uniform_weights_equal_plain_cross_entropy():
    g = torch.Generator().manual_seed(1)
    logits = torch.randn(10, 3, generator=g, dtype=T)
    labels = torch.randint(0, 3, (10,), generator=g)
    ours = weighted_ce_loss(logits, one_hot(labels, 3, T), [1.0, 1.0, 1.0])
    assert torch.allclose(ours, torch.nn.functional.cross_entropy(logits, labels), atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=3, max_size=3), st.floats(-50, 50), st.integers(0, 2))
def test_ce_shift_invariant_and_finite(row, shift, label):
    logits = torch.tensor([row], dtype=T)
    y = one_hot([label], 3, T)
    w = [0.1, 0.5, 2.4]
    a, b = weighted_ce_loss(logits, y, w), weighted_ce_loss(logits + shift, y, w)
    assert math.isfinite(float(a)) and float(a) >= 0
    assert abs(float(a) - float(b)) < 1e-9


def test_ce_clamp_keeps_extreme_logits_finite():
    loss = weighted_ce_loss(torch.tensor([[-1e4, 1e4]], dtype=T), one_hot([0], 2, T), [1.0, 1.0])
    assert abs(float(loss) + math.log(1e-8)) < 1e-9


def test_ce_input_errors():
    with pytest.raises(ShapeMismatch):
        weighted_ce_loss(torch.zeros(2, 3), one_hot([0, 1], 3), [1.0, 1.0])
    with pytest.raises(ShapeMismatch):
        weighted_ce_loss(torch.zeros(2, 3), one_hot([0], 3), [1.0, 1.0, 1.0])
    with pytest.raises(NonOneHotLabel):
        weighted_ce_loss(torch.zeros(1, 3), torch.tensor([[1.0, 1.0, 0.0]]), [1.0, 1.0, 1.0])
    with pytest.raises(NonOneHotLabel):
        weighted_ce_loss(torch.zeros(1, 3), torch.tensor([[0.5, 0.5, 0.0]]), [1.0, 1.0, 1.0])


# ---------------------------------------------------------------- AU BCE

def test_bce_examples():
    bits = torch.tensor([[1.0, 0.0, 1.0]], dtype=T)
    assert float(au_bce_loss(bits.clone(), bits)) == 0.0
    single = au_bce_loss(torch.tensor([[0.5]], dtype=T), torch.tensor([[1.0]], dtype=T), [1.0])
    assert abs(float(single) - 0.69315) < 1e-5
    clamped = au_bce_loss(torch.zeros(1, 2, dtype=T), torch.ones(1, 2, dtype=T))
    assert math.isfinite(float(clamped)) and abs(float(clamped) + math.log(1e-8)) < 1e-9
    with pytest.raises(ShapeMismatch):
        au_bce_loss(torch.zeros(2, 3), torch.zeros(2, 2))


def test_bce_positive_weight_scales_positive_term_only():
    p = torch.tensor([[0.3, 0.8]], dtype=T)
    bits = torch.tensor([[1.0, 0.0]], dtype=T)
    base = au_bce_loss(p, bits, [1.0, 1.0])
    heavier = au_bce_loss(p, bits, [3.0, 5.0])
    assert torch.allclose(heavier - base, torch.tensor(-2.0 * math.log(0.3) / 2, dtype=T))


def test_positive_weights_from_rates(small_data):
    manifest, _ = small_data
    w = au_positive_weights(manifest)
    occ = np.array([r.occurrence_vector(manifest.modeled_aus) for r in manifest.records]).mean(0)
    ok = (occ > 0) & (occ < 1)
    assert np.allclose(w[ok], (1 - occ[ok]) / occ[ok]) and np.all(w[~ok] == 1)


# ---------------------------------------------------------------- configs

def test_paper_presets():
    sft, pain = TrainConfig.au_sft(), TrainConfig.pain()
    assert (sft.lr, sft.batch_size, sft.epochs) == (1e-5, 16, 17)
    assert (pain.lr, pain.batch_size, pain.epochs) == (1e-4, 64, 8)
    for c in (sft, pain):
        assert (c.beta1, c.beta2, c.weight_decay, c.eps) == (0.9, 0.999, 5e-4, 1e-8)


@pytest.mark.parametrize("bad", [dict(stage="x"), dict(scheme="5cat"), dict(lr=-1), dict(batch_size=0)])
def test_config_validation(bad):
    with pytest.raises(ConfigError):
        TrainConfig(**bad).validate()


def test_class_weight_resolution(small_data):
    manifest, _ = small_data
    assert np.array_equal(resolve_class_weights(TrainConfig(class_weights="uniform"), manifest), np.ones(3))
    assert np.allclose(resolve_class_weights(TrainConfig(class_weights=[1, 2, 3]), manifest), [1, 2, 3])
    with pytest.raises(ConfigError):
        resolve_class_weights(TrainConfig(class_weights=[1, 2]), manifest)


# ---------------------------------------------------------------- optimiser behaviour

def test_zero_learning_rate_changes_nothing(small_data):
    manifest, images = small_data
    model = GraphAUPain(small_model_config(), seed=0)
    before = {k: v.clone() for k, v in model.named_parameters()}
    train_pain(model, manifest, TrainConfig.pain(lr=0.0, epochs=1, batch_size=32), images=images)
    assert all(torch.equal(before[k], v) for k, v in model.named_parameters())


# ---------------------------------------------------------------- protocol

def _params(model, prefixes):
    return {k: v.detach().clone() for k, v in model.named_parameters() if k.startswith(prefixes)}


def test_pretrain_zero_epochs_is_identity(small_data):
    manifest, images = small_data
    model = GraphAUPain(small_model_config(), seed=0)
    before = _params(model, ("",))
    ckpt = pretrain_au(model, manifest, TrainConfig.au_sft(epochs=0), images=images)
    assert all(torch.equal(before[k], v) for k, v in _params(model, ("",)).items())
    assert all(np.array_equal(ckpt.params[k], before[k].numpy()) for k in before)


def test_pretrain_only_touches_representation(small_data, tmp_path):
    manifest, images = small_data
    model = GraphAUPain(small_model_config(), seed=0)
    head_before = _params(model, HEAD_PREFIXES)
    rep_before = _params(model, REPRESENTATION_PREFIXES)
    log = tmp_path / "log.jsonl"
    ckpt = pretrain_au(model, manifest, TrainConfig.au_sft(lr=1e-3, epochs=2), images=images, log_path=log)
    assert all(torch.equal(head_before[k], v) for k, v in _params(model, HEAD_PREFIXES).items())
    assert any(not torch.equal(rep_before[k], v) for k, v in _params(model, REPRESENTATION_PREFIXES).items())
    lines = [json.loads(s) for s in log.read_text().splitlines()]
    assert [e["epoch"] for e in lines] == [1, 2] and all("au_f1_mean" in e for e in lines)
    assert len(ckpt.metrics) == 2 and ckpt.history[-1]["stage"] == "au_sft"


def test_pretrain_is_deterministic(small_data):
    manifest, images = small_data
    runs = []
    for _ in range(2):
        model = GraphAUPain(small_model_config(), seed=4)
        runs.append(pretrain_au(model, manifest, TrainConfig.au_sft(lr=1e-3, epochs=1, seed=4), images=images))
    assert all(np.array_equal(runs[0].params[k], runs[1].params[k]) for k in runs[0].params)


def test_train_pain_zero_epochs_with_init(small_data):
    manifest, images = small_data
    donor = GraphAUPain(small_model_config(), seed=1)
    init = pretrain_au(donor, manifest, TrainConfig.au_sft(lr=1e-3, epochs=1), images=images)
    model = GraphAUPain(small_model_config(), seed=2)
    ckpt = train_pain(model, manifest, TrainConfig.pain(epochs=0, seed=7), init=init, images=images)
    for k in init.params:
        if k.startswith(REPRESENTATION_PREFIXES):
            assert np.array_equal(ckpt.params[k], init.params[k])
    fresh = GraphAUPain(small_model_config(), seed=0)
    fresh.reset_parameters(7, prefixes=HEAD_PREFIXES)
    for k, v in _params(fresh, HEAD_PREFIXES).items():
        assert np.array_equal(ckpt.params[k], v.numpy())
    assert [h["stage"] for h in ckpt.history] == ["au_sft", "pain"]


def test_two_stage_history_and_checkpoint_round_trip(small_data, tmp_path):
    manifest, images = small_data
    model = GraphAUPain(small_model_config(), seed=0)
    init = pretrain_au(model, manifest, TrainConfig.au_sft(lr=1e-3, epochs=1), images=images)
    log = tmp_path / "pain.jsonl"
    ckpt = train_pain(model, manifest, TrainConfig.pain(lr=1e-3, epochs=2, batch_size=32), init=init,
                      images=images, log_path=log)
    assert [h["stage"] for h in ckpt.history] == ["au_sft", "pain"]
    entries = [json.loads(s) for s in log.read_text().splitlines()]
    assert len(entries) == 2 and "val_macro_f1" in entries[0]
    ckpt.save(tmp_path / "c.npz")
    back = Checkpoint.load(tmp_path / "c.npz")
    assert back.history == ckpt.history and back.epoch == 2
    assert all(np.array_equal(back.params[k], ckpt.params[k]) for k in ckpt.params)


def test_train_pain_is_deterministic(small_data):
    manifest, images = small_data
    outs = []
    for _ in range(2):
        model = GraphAUPain(small_model_config(), seed=3)
        outs.append(train_pain(model, manifest, TrainConfig.pain(lr=1e-3, epochs=1, batch_size=32, seed=3),
                               images=images))
    assert all(np.array_equal(outs[0].params[k], outs[1].params[k]) for k in outs[0].params)


def test_training_errors(small_data):
    manifest, images = small_data
    empty = DatasetManifest([])
    model = GraphAUPain(small_model_config(), seed=0)
    with pytest.raises(EmptyDataset):
        pretrain_au(model, empty, TrainConfig.au_sft())
    with pytest.raises(EmptyDataset):
        train_pain(model, empty, TrainConfig.pain())
    with pytest.raises(IncompatibleCheckpoint):
        train_pain(GraphAUPain(small_model_config(d_pain=4), seed=0), manifest, TrainConfig.pain(), images=images)
    other = GraphAUPain(small_model_config(d_au=6), seed=0)
    init = pretrain_au(other, manifest, TrainConfig.au_sft(epochs=0), images=images)
    with pytest.raises(IncompatibleCheckpoint):
        train_pain(model, manifest, TrainConfig.pain(epochs=0), init=init, images=images)
    with pytest.raises(ConfigError):
        pretrain_au(GraphAUPain(small_model_config(ablation="backbone_only")), manifest, TrainConfig.au_sft(),
                    images=images)


def test_nan_loss_aborts(small_data):
    manifest, images = small_data
    model = GraphAUPain(small_model_config(), seed=0)
    with torch.no_grad():
        model.classifier.fc.bias.fill_(float("nan"))
    with pytest.raises(NumericFailure):
        train_pain(model, manifest, TrainConfig.pain(lr=1e-3, epochs=1, val_fraction=0), images=images)


def test_four_category_training(small_data):
    manifest, images = small_data
    model = GraphAUPain(small_model_config(d_pain=4), seed=0)
    ckpt = train_pain(model, manifest, TrainConfig.pain(lr=1e-3, epochs=1, scheme="4cat", class_weights="uniform"),
                      images=images)
    assert ckpt.model_config.d_pain == 4


@pytest.mark.parametrize("mode", ["no_graph_rep", "no_gnn", "backbone_only"])
def test_ablation_wirings_train(small_data, mode):
    manifest, images = small_data
    model = GraphAUPain(small_model_config(ablation=mode), seed=0)
    ckpt = train_pain(model, manifest, TrainConfig.pain(lr=1e-3, epochs=1), images=images)
    assert np.isfinite(ckpt.metrics[-1]["loss"])


def test_sft_reaches_high_au_f1_on_desk_synthetic():
    from graphau_pain.data import SynthConfig, synth_generate
    from graphau_pain.evaluation import evaluate_model
    from graphau_pain.model import ModelConfig

    manifest, images = synth_generate(SynthConfig(count=2000, seed=0))
    images = images.transpose(0, 3, 1, 2).copy()
    model = GraphAUPain(ModelConfig.desk(), seed=0)
    ckpt = pretrain_au(model, manifest, TrainConfig.au_sft(lr=1e-3, epochs=10, seed=0), images=images)
    _, au = evaluate_model(model, manifest, images=images)
    assert ckpt.metrics[-1]["au_f1_mean"] >= 90.0
    assert au["f1_mean"] >= 90.0
