import numpy as np
import pytest

from modguide import checkpoint
from modguide.dit import DiT, ModelConfig
from modguide.errors import CheckpointError, ConfigError, DimensionError, FrozennessError
from modguide.guidance import GuidanceSchedule, GuidanceSpec
from modguide.nn import Tensor
from modguide.retrofit import (
    PooledAdapter, RetrofitModel, adapter_contribution, check_frozen, distill_step, load_adapter, retrofit_train,
    save_adapter,
)
from modguide.sampling import sample
from modguide.toyworld import UNCONDITIONAL, ToyPrompt, encode_batch, sample_dataset

BASE_CFG = ModelConfig(n_layers=2, d_model=16, heads=2, t_dim=16, use_pooled=False)
PROMPTS = [ToyPrompt.parse("count:2, color:red, detail:plain"), ToyPrompt.parse("count:5, color:cyan, detail:plain")]


def base_model():
    """A stand-in for a trained base: every weight at fan-in scale so text matters."""
    m = DiT(BASE_CFG)
    rng = np.random.default_rng(0)
    for _, p in m.named_parameters():
        fan_in = p.data.shape[0] if p.data.ndim > 1 else 1
        p.data = rng.normal(0, 0.5 / np.sqrt(fan_in), p.data.shape).astype(np.float32)
    m.trained_steps = 1
    return m


def batch(prompts, b=2, seed=0):
    rng = np.random.default_rng(seed)
    x0 = rng.uniform(-1, 1, size=(b, 3, 16, 16)).astype(np.float32)
    pooled, tokens, mask = encode_batch(prompts)
    return x0, rng.random(b), rng.normal(size=x0.shape).astype(np.float32), pooled, tokens, mask


def test_contribution_is_zero_at_zero_and_pure():
    a = PooledAdapter(32, 16)
    assert not adapter_contribution(a, np.zeros((3, 32))).data.any()
    e = np.random.default_rng(1).normal(size=(2, 32))
    g1, g2 = a(e).data, a(e).data
    assert g1.tobytes() == g2.tobytes()
    assert np.abs(g1).max() > 0


def test_contribution_stays_zero_after_bias_changes():
    a = PooledAdapter(32, 16)
    a.fc2.bias.data += 0.7
    a.fc1.bias.data -= 0.3
    assert not a(np.zeros((1, 32))).data.any()


def test_contribution_zero_rows_exact_at_any_batch_size():
    a = PooledAdapter(64, 64)
    rng = np.random.default_rng(2)
    for p in a.parameters().values():
        p.data = rng.normal(0, 1, p.data.shape).astype(np.float32)
    for b in (1, 3, 4, 16, 33, 64):
        e = rng.normal(size=(b, 64)).astype(np.float32)
        e[::2] = 0.0
        g = a(e).data
        assert not g[::2].any()
        if b > 1:
            assert g[1::2].all()


def test_contribution_dimension_error():
    with pytest.raises(DimensionError):
        adapter_contribution(PooledAdapter(32, 16), np.zeros((1, 31)))
    with pytest.raises(DimensionError):
        RetrofitModel(base_model(), PooledAdapter(32, 8))


def test_retrofitted_forward_bit_identical_at_zero_pooled():
    base = base_model()
    rm = RetrofitModel(base, PooledAdapter(32, 16, seed=3))
    zeros = np.zeros((2, 32), np.float32)
    assert rm.global_conditioning(zeros, 0.4).data.tobytes() == base.global_conditioning(zeros, 0.4).data.tobytes()
    a = sample(base, [UNCONDITIONAL] * 2, [1, 2], steps=3)
    b = sample(rm, [UNCONDITIONAL] * 2, [1, 2], steps=3)
    assert a.tobytes() == b.tobytes()


def test_distill_loss_zero_for_unconditional_prompt_and_zero_adapter():
    base = base_model()
    a = PooledAdapter(32, 16)
    for _, p in a.named_parameters():
        p.data[...] = 0
    loss = distill_step(base, a, *batch([UNCONDITIONAL] * 2))
    assert loss.item() == 0.0


def test_distill_loss_positive_for_informative_prompt():
    base = base_model()
    a = PooledAdapter(32, 16)
    for _, p in a.named_parameters():
        p.data[...] = 0
    assert distill_step(base, a, *batch(PROMPTS)).item() > 0


def test_gradients_reach_only_the_adapter():
    base = base_model()
    base.freeze()
    a = PooledAdapter(32, 16)
    distill_step(base, a, *batch(PROMPTS)).backward()
    check_frozen(base)
    assert all(p.grad is not None for p in a.parameters().values())


def test_frozenness_violation_detected():
    base = base_model()
    with pytest.raises(FrozennessError):
        check_frozen(base)  # parameters still trainable
    base.freeze()
    next(iter(base.parameters().values())).grad = np.zeros(1)
    with pytest.raises(FrozennessError):
        check_frozen(base)


def test_zero_iterations_changes_nothing():
    base = base_model()
    before = checkpoint.parameter_bytes(base)
    fresh = PooledAdapter(32, 16, seed=11)
    run = retrofit_train(base, sample_dataset(0, 8), iterations=0)
    assert run.iterations == 0 and run.losses == []
    assert checkpoint.parameter_bytes(run.adapter) == checkpoint.parameter_bytes(fresh)
    assert checkpoint.parameter_bytes(base) == before


def test_short_run_keeps_base_and_reduces_loss():
    base = base_model()
    before = checkpoint.parameter_bytes(base)
    run = retrofit_train(base, sample_dataset(0, 64), iterations=120, lr=3e-3, batch=8)
    assert checkpoint.parameter_bytes(base) == before
    assert len(run.losses) == 120
    assert run.moving_average(120, 20) < run.moving_average(20, 20)


def test_retrofit_argument_errors():
    with pytest.raises(ConfigError):
        retrofit_train(base_model(), sample_dataset(0, 1), iterations=-1)


def test_adapter_checkpoint_links_base(tmp_path):
    a = PooledAdapter(32, 16, seed=4)
    save_adapter(a, tmp_path / "a.ckpt", "abc")
    back = load_adapter(tmp_path / "a.ckpt", "abc")
    assert checkpoint.parameter_bytes(back) == checkpoint.parameter_bytes(a)
    with pytest.raises(CheckpointError):
        load_adapter(tmp_path / "a.ckpt", "def")


def test_guidance_through_retrofit_path():
    base = base_model()
    a = PooledAdapter(32, 16, seed=5)
    rm = RetrofitModel(base, a)
    prompts = PROMPTS
    ref = sample(rm, prompts, [1, 2], steps=3)
    zero = [GuidanceSpec(p, ToyPrompt.of(count=5), ToyPrompt.of(count=1), GuidanceSchedule.constant(0.0, 2))
            for p in prompts]
    live = [GuidanceSpec(p, ToyPrompt.of(count=5), ToyPrompt.of(count=1), GuidanceSchedule.constant(3.0, 2))
            for p in prompts]
    assert sample(rm, prompts, [1, 2], zero, steps=3).tobytes() == ref.tobytes()
    assert sample(rm, prompts, [1, 2], live, steps=3).tobytes() != ref.tobytes()
    # without the adapter the pooled-free base cannot be steered this way
    plain = sample(base, prompts, [1, 2], live, steps=3)
    assert plain.tobytes() == sample(base, prompts, [1, 2], steps=3).tobytes()


def test_temb_offset_is_added():
    base = base_model()
    off = Tensor(np.ones((1, 16), np.float32))
    assert not np.array_equal(base.global_conditioning(np.zeros((1, 32)), 0.5, off).data,
                              base.global_conditioning(np.zeros((1, 32)), 0.5).data)
