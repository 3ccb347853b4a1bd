import numpy as np
import pytest

from swapflow.model import ModelSpec, gen_model
from swapflow.planner import (
    CostParams,
    Plan,
    active_layer_bytes,
    predict_decode_time,
)
from swapflow.store import BandwidthModel


@pytest.fixture(scope="session")
def small_spec():
    return ModelSpec(n_layers=4, hidden_dim=32, ffn_dim=64, n_heads=4, vocab_size=64, seed=7)


@pytest.fixture(scope="session")
def small_model(small_spec):
    return gen_model(small_spec, 1.0)


@pytest.fixture(scope="session")
def deep_spec():
    return ModelSpec(n_layers=8, hidden_dim=64, ffn_dim=128, n_heads=4, vocab_size=96, seed=13)


@pytest.fixture(scope="session")
def deep_model(deep_spec):
    return gen_model(deep_spec, 1.0)


def toy_profile(latency=1e-6):
    """Small-key bandwidth table sized for toy channel counts."""
    return BandwidthModel(
        table=[(64, 2e8), (1024, 9e8), (4096, 3.6e9), (16384, 5.8e9)],
        bw_mem=8e9,
        req_latency_s=latency,
    )


def overlap_profile():
    """Large-chunk reads effectively free: preload always fits under compute."""
    return BandwidthModel(
        table=[(64, 2e8), (1024, 1e13)],
        bw_mem=8e9,
        req_latency_s=1e-8,
    )


def grid_plan(spec, sparsity, group_size, cache_bytes, m_kv=4096, profile=None):
    """Plan with an honest budget for exact-k masks at the given config."""
    profile = profile or toy_profile()
    active = active_layer_bytes(spec, sparsity)
    m_max = 2 * active * group_size + active + cache_bytes + m_kv
    params = CostParams(
        sp=sparsity,
        hr=0.6,
        si=0.8,
        bw_mem=profile.bw_mem,
        bw_small_flash=profile.throughput(64),
        bw_large_flash=profile.throughput(group_size * 128),
        s_m=float(spec.model_bytes()),
        s_l=float(spec.layer_bytes()),
        n_group=group_size,
        m_max=float(m_max),
        m_cache=float(cache_bytes),
        m_kv=float(m_kv),
    )
    return Plan(
        sparsity=sparsity,
        group_size=group_size,
        m_cache=cache_bytes,
        m_kv=m_kv,
        m_max=m_max,
        params=params,
        predicted=predict_decode_time(params),
        assumptions={},
    )


def oracle_tokens(model, prompt, emitted, step_masks):
    """Replay recorded masks through the offline masked forward and return
    the greedy tokens it would have emitted."""
    from swapflow.model import forward_sparse

    seq = list(prompt) + list(emitted)
    logits = forward_sparse(model, seq, step_masks)
    start = len(prompt) - 1
    return [int(np.argmax(logits[start + i])) for i in range(len(emitted))]
