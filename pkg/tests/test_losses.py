import numpy as np
import pytest

from fdcheck import central_diff, rel_err
from madtd.losses import Batch, Objectives, split_grads
from madtd.nets import NetConfig, hlgauss_encode, init_agent

CFG = NetConfig(obs_dim=3, act_dim=1, hidden=8, latent=8, num_bins=11, vmax=10.0)
DRAWS = 20


def random_setup(seed, n=6, model_rows=0):
    rng = np.random.default_rng(seed)
    params = init_agent(CFG, rng)
    # non-zero critic heads so every path carries gradient
    for name in ("critic_1", "critic_2", "target_critic_1", "target_critic_2"):
        store = getattr(params, name)
        store["out.w"] = rng.normal(scale=0.5, size=store["out.w"].shape)
    batch = Batch(
        obs=rng.normal(size=(n, 3)),
        action=rng.uniform(-1, 1, size=(n, 1)),
        reward=rng.uniform(0, 1, size=n),
        next_obs=rng.normal(size=(n, 3)),
        terminal=rng.random(n) < 0.2,
    )
    if model_rows:
        batch.is_model[:model_rows] = True
        batch.next_latent = np.full((n, CFG.latent), np.nan)
        batch.next_latent[:model_rows] = rng.dirichlet(np.ones(8), size=model_rows)
        batch.next_obs[:model_rows] = np.nan
    return params, batch, Objectives(CFG, gamma=0.9)


def check_groups(params, grads, loss_fn, groups):
    for key, g in grads.items():
        group = key.partition(".")[0]
        if group not in groups:
            continue
        arr = getattr(params, group)[key.partition(".")[2]]
        num = central_diff(loss_fn, arr)
        assert rel_err(g, num, floor=1e-6) <= 1e-4, key


@pytest.mark.parametrize("seed", range(DRAWS))
def test_critic_loss_gradient(seed):
    params, batch, obj = random_setup(seed, model_rows=2)
    targets = obj.td_target(params, batch)
    loss, grads = obj.critic_loss(params, batch, targets, train_encoder=True)
    z0 = obj.nets.encode(params, batch.obs)

    def f():
        # oracle for the gated route: model rows see the encoder as a constant
        z = obj.nets.encode(params, batch.obs)
        z[batch.is_model] = z0[batch.is_model]
        return obj.critic_loss(params, batch, targets, train_encoder=False, z=z, grad=False)[0]

    assert f() == pytest.approx(loss, abs=1e-12)
    check_groups(params, grads, f, {"encoder", "critic_1", "critic_2"})


@pytest.mark.parametrize("seed", range(DRAWS))
@pytest.mark.parametrize("part", ["reward", "forward", "value"])
def test_model_loss_gradients(seed, part):
    params, batch, obj = random_setup(100 + seed)
    inputs = obj.model_inputs(params, batch)
    idx = Objectives.MODEL_PARTS.index(part)
    _, grads = obj.model_loss(params, batch, part=part, inputs=inputs)

    def f():
        parts, _ = obj.model_loss(params, batch, inputs=inputs)
        return [parts.total, parts.reward, parts.forward, parts.value][idx]

    check_groups(params, grads, f, {"encoder", "latent_model"})
    for name in ("critic_1", "critic_2"):
        assert all(np.all(v == 0) for k, v in grads.items() if k.startswith(name))


@pytest.mark.parametrize("seed", range(DRAWS))
def test_actor_loss_gradient(seed):
    params, batch, obj = random_setup(200 + seed)
    z = obj.nets.encode(params, batch.obs)
    _, grads = obj.actor_loss(params, z=z)
    check_groups(params, grads, lambda: obj.actor_loss(params, z=z)[0], {"actor"})
    assert np.all(grads["critic_1.out.w"] == 0)
    g_obs = obj.actor_loss(params, batch)[1]
    np.testing.assert_allclose(g_obs["actor.out.w"], grads["actor.out.w"], atol=1e-12)
    assert all(np.all(v == 0) for k, v in g_obs.items() if k.startswith("encoder"))


def test_td_target_oracle():
    params, batch, obj = random_setup(5, n=8)
    t = obj.td_target(params, batch)
    nets = obj.nets
    z2 = nets.encode(params, batch.next_obs)
    a2 = nets.actor(params, z2)
    boot = np.minimum(nets.q_value(params.target_critic_1, z2, a2), nets.q_value(params.target_critic_2, z2, a2))
    expected = batch.reward + 0.9 * np.where(batch.terminal, 0.0, boot)
    np.testing.assert_allclose(t.value, expected, atol=1e-12)
    np.testing.assert_allclose(t.probs, hlgauss_encode(expected, CFG.bins), atol=1e-12)


def test_encoder_ignores_model_rows():
    params, batch, obj = random_setup(7, n=8, model_rows=3)
    targets = obj.td_target(params, batch)
    _, g1 = obj.critic_loss(params, batch, targets)
    shifted = targets.probs.copy()
    shifted[:3] = np.roll(shifted[:3], 3, axis=1)
    targets.probs = shifted
    _, g2 = obj.critic_loss(params, batch, targets)
    for k in g1:
        if k.startswith("encoder"):
            np.testing.assert_allclose(g1[k], g2[k], atol=1e-13)
    assert any(not np.allclose(g1[k], g2[k]) for k in g1 if k.startswith("critic_1"))


def test_model_loss_rejects_model_rows():
    params, batch, obj = random_setup(8, model_rows=1)
    with pytest.raises(ValueError):
        obj.model_loss(params, batch)


def test_critic_ce_of_zero_init_is_entropy_floor():
    # uniform prediction against encode(0) at gamma 0, reward 0: loss = log(num_bins)
    rng = np.random.default_rng(0)
    params = init_agent(CFG, rng)
    obj = Objectives(CFG, gamma=0.0)
    batch = Batch(rng.normal(size=(5, 3)), rng.uniform(-1, 1, (5, 1)), np.zeros(5), rng.normal(size=(5, 3)), np.zeros(5))
    loss, _ = obj.critic_loss(params, batch, obj.td_target(params, batch), grad=False)
    assert loss == pytest.approx(np.log(CFG.num_bins), abs=1e-12)


def test_split_grads():
    out = split_grads({"critic_1.l0.w": 1, "actor.out.b": 2})
    assert out == {"critic_1": {"l0.w": 1}, "actor": {"out.b": 2}}


def test_batch_validation():
    with pytest.raises(ValueError):
        Batch(np.zeros((3, 2)), np.zeros((2, 1)), np.zeros(3), np.zeros((3, 2)), np.zeros(3))
