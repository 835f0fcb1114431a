import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from aptlab import kernels
from aptlab.attack import AttackSpec, attack, example_losses, pgd, robust_accuracy
from aptlab.model import DualEncoderModel, count_passes, encode_text
from oracles import pgd_grid_ratios, projection_trials, small_model


@pytest.fixture
def batch(rng):
    x = rng.uniform(0, 1, (16, 6))
    y = rng.integers(0, 3, 16)
    tokens = rng.normal(size=(3, 2, 4))
    return x, y, tokens


def test_presets():
    e = AttackSpec.evaluation()
    assert (e.eps, e.steps, e.alpha, e.random_start) == (4 / 255, 100, 1 / 255, True)
    t = AttackSpec.training()
    assert (t.steps, t.alpha, t.random_start) == (3, 2 * (4 / 255) / 3, False)
    p = AttackSpec.training(perturb_text=True)
    assert p.alpha_text == 0.01


@pytest.mark.parametrize("kw", [dict(eps=-0.1, steps=3, alpha=0.1), dict(eps=0.1, steps=0, alpha=0.1),
                                dict(eps=0.1, steps=3, alpha=0.0),
                                dict(eps=0.1, steps=3, alpha=0.1, perturb_text=True)])
def test_spec_validation(kw):
    with pytest.raises(ValueError):
        AttackSpec(**kw)


def test_zero_budget_is_identity(tiny, batch):
    x, y, tokens = batch
    spec = AttackSpec(eps=0.0, steps=5, alpha=0.1)
    adv = attack(tiny, x, y, tokens, spec)
    np.testing.assert_array_equal(adv.images, x)
    np.testing.assert_array_equal(adv.losses, example_losses(tiny, x, y, encode_text(tiny, tokens)))


def test_attack_raises_loss(tiny, batch):
    x, y, tokens = batch
    t = encode_text(tiny, tokens)
    adv = attack(tiny, x, y, tokens, AttackSpec(eps=0.1, steps=10, alpha=0.025))
    assert adv.loss > example_losses(tiny, x, y, t).mean()


def test_monotone_pressure(rng):
    m = small_model()
    ups = []
    for i in range(200):
        x = rng.uniform(0, 1, (1, 6))
        y = rng.integers(0, 3, 1)
        tokens = rng.normal(size=(3, 2, 4))
        before = example_losses(m, x, y, encode_text(m, tokens))[0]
        after = attack(m, x, y, tokens, AttackSpec(eps=0.05, steps=5, alpha=0.0125, random_start=False,
                                                   seed=i)).losses[0]
        ups.append(after >= before)
    assert np.mean(ups) >= 0.9


def test_deterministic(tiny, batch):
    x, y, tokens = batch
    spec = AttackSpec(eps=0.05, steps=4, alpha=0.02, perturb_text=True, alpha_text=0.01, seed=3)
    a = attack(tiny, x, y, tokens, spec)
    b = attack(tiny, x, y, tokens, spec)
    assert a.images.tobytes() == b.images.tobytes()
    assert a.losses.tobytes() == b.losses.tobytes()


def test_inputs_not_mutated(tiny, batch):
    x, y, tokens = batch
    xs, ts, chk = x.copy(), tokens.copy(), tiny.checksum()
    attack(tiny, x, y, tokens, AttackSpec(eps=0.05, steps=3, alpha=0.02, perturb_text=True,
                                          alpha_text=0.1))
    np.testing.assert_array_equal(x, xs)
    np.testing.assert_array_equal(tokens, ts)
    assert tiny.checksum() == chk


def test_text_perturbation_changes_adversary(tiny, batch):
    x, y, tokens = batch
    plain = attack(tiny, x, y, tokens, AttackSpec(eps=0.05, steps=5, alpha=0.02, seed=1))
    joint = attack(tiny, x, y, tokens, AttackSpec(eps=0.05, steps=5, alpha=0.02, seed=1,
                                                  perturb_text=True, alpha_text=5.0))
    assert not np.array_equal(plain.images, joint.images)


def test_pass_counts(tiny, batch):
    x, y, tokens = batch
    with count_passes() as c:
        attack(tiny, x, y, tokens, AttackSpec(eps=0.05, steps=4, alpha=0.02), compute_loss=False)
    assert c == {"text_fwd": 1, "image_fwd": 4, "image_bwd": 4}
    with count_passes() as c:
        attack(tiny, x, y, tokens, AttackSpec(eps=0.05, steps=4, alpha=0.02, perturb_text=True,
                                              alpha_text=0.01), compute_loss=False)
    assert c == {"text_fwd": 4, "text_bwd": 4, "image_fwd": 4, "image_bwd": 4}


def test_bad_prompt_stack(tiny, batch):
    x, y, tokens = batch
    with pytest.raises(ValueError):
        attack(tiny, x, y, tokens[:2], AttackSpec(eps=0.05, steps=1, alpha=0.02))
    with pytest.raises(ValueError):
        attack(tiny, x[:0], y[:0], tokens, AttackSpec(eps=0.05, steps=1, alpha=0.02))


def test_generic_pgd_matches_attack(tiny, batch):
    x, y, tokens = batch
    t = encode_text(tiny, tokens)
    spec = AttackSpec(eps=0.05, steps=6, alpha=0.02, seed=9)

    def grad(xa):
        return kernels.image_loss_grad(xa, tiny.w1, tiny.b1, tiny.w2, tiny.b2, t, 1 / tiny.tau, y)[1]

    a = attack(tiny, x, y, tokens, spec, text_features=t)
    b = pgd(x, spec, grad)
    assert a.images.tobytes() == b.images.tobytes()


def test_robust_accuracy_zero_budget_equals_clean(tiny, batch):
    from aptlab.model import predict

    x, y, tokens = batch
    clean = float(np.mean(predict(tiny, x, encode_text(tiny, tokens)) == y))
    assert robust_accuracy(tiny, x, y, tokens, tokens, AttackSpec(eps=0.0, steps=3, alpha=0.1)) == clean


def test_untrained_model_near_chance():
    m = DualEncoderModel.init(0)
    rng = np.random.default_rng(1)
    n, c = 2000, 8
    x = rng.uniform(0, 1, (n, 64))
    y = rng.integers(0, c, n)
    tokens = m.vocab[:c, None, :]
    acc = robust_accuracy(m, x, y, tokens, tokens, AttackSpec(eps=4 / 255, steps=5, alpha=1 / 255))
    sd = np.sqrt((1 / c) * (1 - 1 / c) / n)
    assert abs(acc - 1 / c) <= 3 * sd or acc < 1 / c


def test_pgd_beats_grid_search():
    r = pgd_grid_ratios(n_cases=60, seed=11)
    assert np.mean(r >= 0.95) >= 0.9


def test_projection_small_run():
    assert projection_trials(500, seed=3) == 0


@settings(max_examples=60, deadline=None)
@given(eps=st.floats(0.0, 0.5), alpha=st.floats(1e-4, 1.0), steps=st.integers(1, 4),
       seed=st.integers(0, 10_000), start=st.booleans())
def test_projection_property(eps, alpha, steps, seed, start):
    m = small_model()
    rng = np.random.default_rng(seed)
    x = np.clip(rng.uniform(-0.2, 1.2, (3, 6)), 0, 1)
    adv = attack(m, x, rng.integers(0, 3, 3), rng.normal(size=(3, 1, 4)),
                 AttackSpec(eps=eps, steps=steps, alpha=alpha, random_start=start, seed=seed),
                 compute_loss=False)
    assert np.all(np.abs(adv.images - x) <= eps)
    assert adv.images.min() >= 0.0 and adv.images.max() <= 1.0
