import inspect

import numpy as np
import pytest

import experiments as ex
from aptlab.attack import AttackSpec
from aptlab.baselines import (CLOSED_SET, METHODS, LinearHead, NotApplicableError, OptimConfig,
                              VisualPrompt, avp_accuracy, check_applicable, load_head,
                              load_visual_prompt, paft_accuracy, paft_lr, save_head,
                              save_visual_prompt, train_avp, train_paft, train_standard_prompt)
from aptlab.prompt import default_prompt, init_context
from aptlab.training import TrainConfig, train
from gradchecks import head_grad, visual_prompt_grad
from oracles import small_model

SPEC = AttackSpec(eps=0.05, steps=3, alpha=0.02, random_start=False)


@pytest.fixture
def toy(rng):
    return small_model(), rng.uniform(0, 1, (12, 6)), rng.integers(0, 3, 12)


def test_avp_zero_lr_keeps_zero_prompt(toy):
    m, x, y = toy
    vp = train_avp(m, x, y, default_prompt(10, 3), SPEC, OptimConfig(epochs=3, lr=0.0))
    np.testing.assert_array_equal(vp.phi, 0.0)
    assert vp.n_params == 6


def test_avp_moves_prompt_and_keeps_model(toy):
    m, x, y = toy
    chk = m.checksum()
    vp = train_avp(m, x, y, default_prompt(10, 3), SPEC, OptimConfig(epochs=3, lr=0.5))
    assert np.any(vp.phi != 0.0)
    assert m.checksum() == chk


def test_visual_prompt_apply_clips():
    vp = VisualPrompt(np.array([0.5, -0.5]))
    np.testing.assert_array_equal(vp.apply([[0.8, 0.2]]), [[1.0, 0.0]])


def test_avp_attack_bounds(toy):
    m, x, y = toy
    vp = VisualPrompt(np.linspace(-0.1, 0.1, 6))
    rob = avp_accuracy(m, vp, x, y, default_prompt(10, 3), SPEC)
    clean = avp_accuracy(m, vp, x, y, default_prompt(10, 3))
    assert 0.0 <= rob <= clean <= 1.0


def test_zero_head_is_uniform(toy):
    m, x, y = toy
    head = LinearHead.zeros(3, m.embed_dim)
    np.testing.assert_array_equal(head.logits(m, x), 0.0)
    acc, pred = paft_accuracy(m, head, x, y, return_predictions=True)
    np.testing.assert_array_equal(pred, 0)
    assert acc == np.mean(y == 0)


def test_paft_ignores_prompts():
    params = set(inspect.signature(train_paft).parameters) | set(
        inspect.signature(paft_accuracy).parameters)
    assert not {"prompt", "tokens", "text_features"} & params


def test_paft_schedule():
    assert [paft_lr(0.1, e, 8) for e in range(8)] == pytest.approx(
        [0.1, 0.1, 0.01, 0.01, 0.001, 0.001, 0.001, 0.001])
    assert paft_lr(0.1, 0, 1) == 0.1


def test_paft_trains_and_keeps_model(toy):
    m, x, y = toy
    chk = m.checksum()
    head = train_paft(m, x, y, SPEC, OptimConfig(epochs=4, lr=0.5))
    assert head.weight.shape == (3, m.embed_dim)
    assert np.any(head.weight != 0.0)
    assert m.checksum() == chk


def test_gradients_match_fd():
    assert visual_prompt_grad(n=20) < 1e-4
    assert head_grad(n=20) < 1e-4


def test_checkpoints_round_trip(tmp_path, rng):
    vp = VisualPrompt(rng.normal(size=7))
    save_visual_prompt(vp, tmp_path / "v.aptv")
    np.testing.assert_array_equal(load_visual_prompt(tmp_path / "v.aptv").phi, vp.phi)
    head = LinearHead(rng.normal(size=(3, 4)), rng.normal(size=3))
    save_head(head, tmp_path / "h.aptl")
    back = load_head(tmp_path / "h.aptl")
    np.testing.assert_array_equal(back.weight, head.weight)
    np.testing.assert_array_equal(back.bias, head.bias)
    with pytest.raises(ValueError):
        load_head(tmp_path / "v.aptv")
    with pytest.raises(ValueError):
        load_visual_prompt(tmp_path / "h.aptl")


def test_not_applicable():
    assert CLOSED_SET == {"apt-csc", "paft"}
    for m in METHODS:
        if m in CLOSED_SET:
            with pytest.raises(NotApplicableError) as e:
                check_applicable(m, novel_classes=True)
            assert e.value.to_dict()["status"] == "N/A"
        else:
            check_applicable(m, novel_classes=True)
        check_applicable(m, novel_classes=False)
    with pytest.raises(ValueError):
        check_applicable("lora", False)


def test_standard_prompt_is_zero_budget_apt(toy):
    m, x, y = toy
    ctx = init_context("csc", 2, 3, m.embed_dim, 1, m.class_embeddings)
    cfg = TrainConfig.build("on-the-fly", eps=0.05, vocab_size=10, n_classes=3, m=2, epochs=3,
                            lr=0.3, seed=2)
    a, ha = train_standard_prompt(ctx, m, x, y, cfg)
    zero = TrainConfig.build("on-the-fly", eps=0.0, vocab_size=10, n_classes=3, m=2, epochs=3,
                             lr=0.3, seed=2)
    b, hb = train(ctx, m, x, y, zero)
    assert a.vectors.tobytes() == b.vectors.tobytes()
    assert ha == hb
    c, hist = train_standard_prompt(ctx, m, x, y, TrainConfig.build("constant", vocab_size=10,
                                                                    n_classes=3, m=2, epochs=0))
    np.testing.assert_array_equal(c.vectors, ctx.vectors)
    assert hist == []


# seed-averaged trends on the default task


@pytest.mark.slow
def test_avp_between_hand_prompt_and_apt():
    avp = ex.mean("avp")
    assert avp > ex.mean("hep")
    assert avp < max(ex.mean("apt-uc"), ex.mean("apt-csc"))


@pytest.mark.slow
def test_paft_weak_at_one_shot():
    assert ex.mean("paft", shots=1) < ex.mean("apt-uc", shots=1) - 0.05


@pytest.mark.slow
@pytest.mark.parametrize("mode", ["uc", "csc"])
def test_standard_prompt_less_robust(mode):
    assert ex.mean(f"std-{mode}") < ex.mean(f"apt-{mode}")


@pytest.mark.slow
@pytest.mark.parametrize("mode", ["uc", "csc"])
def test_standard_prompt_more_accurate(mode):
    std, apt = ex.mean(f"std-{mode}", "clean_acc"), ex.mean(f"apt-{mode}", "clean_acc")
    assert std > apt, f"clean-trained {std:.4f} vs adversarially trained {apt:.4f}"
