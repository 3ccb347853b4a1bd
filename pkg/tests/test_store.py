import numpy as np
import pytest

from swapflow.errors import FormatError, InputError
from swapflow.model import ModelSpec, OpType, gen_model
from swapflow.store import (
    BandwidthModel,
    ReadStats,
    default_profile,
    open_store,
    pack,
    simulate_read_time,
    unpack,
)

from conftest import toy_profile


@pytest.fixture(scope="module")
def packed(tmp_path_factory, small_model):
    path = tmp_path_factory.mktemp("store") / "model.awsp"
    pack(small_model, 2, path)
    return path


def test_round_trip_bit_exact(tmp_path, small_model):
    for n in (1, 2, 3, 4):
        path = tmp_path / f"m{n}.awsp"
        pack(small_model, n, path)
        with open_store(path) as store:
            again = unpack(store)
        assert np.array_equal(again.embedding, small_model.embedding)
        for key, t in small_model.tensors.items():
            assert np.array_equal(again.tensors[key].data, t.data)


def test_round_trip_bit_exact_q4(tmp_path):
    spec = ModelSpec(n_layers=3, hidden_dim=32, ffn_dim=64, n_heads=2, vocab_size=32, dtype="q4b32", seed=6)
    model = gen_model(spec, 0.8)
    path = tmp_path / "q4.awsp"
    pack(model, 2, path)  # partial last group
    with open_store(path) as store:
        again = unpack(store)
    for key, t in model.tensors.items():
        assert np.array_equal(again.tensors[key].codes, t.codes)
        assert np.array_equal(again.tensors[key].scales, t.scales)


def test_group_size_bounds(tmp_path, small_model):
    with pytest.raises(InputError):
        pack(small_model, 0, tmp_path / "x.awsp")
    with pytest.raises(InputError):
        pack(small_model, 5, tmp_path / "x.awsp")


def test_single_channel_is_one_contiguous_run(packed, small_spec):
    with open_store(packed) as store:
        raw, stats = store.read_channels(0, OpType.Q, [5])
    cb = small_spec.channel_bytes(OpType.Q)
    assert stats.n_requests == 1
    assert stats.chunk_sizes == [2 * cb]
    assert len(raw[5]) == 2 * cb


def test_adjacent_channels_coalesce(packed, small_spec):
    cb = small_spec.channel_bytes(OpType.Q)
    with open_store(packed) as store:
        _, stats = store.read_channels(0, OpType.Q, [5, 6, 7])
        assert stats.n_requests == 1
        assert stats.total_bytes == 3 * 2 * cb
        _, stats = store.read_channels(0, OpType.Q, [5, 9])
        assert stats.n_requests == 2


def test_coalescing_returns_identical_bytes(packed):
    with open_store(packed) as store:
        merged, _ = store.read_channels(1, OpType.GATE, [3, 4, 5, 10])
        singles = {}
        for ch in (3, 4, 5, 10):
            one, st = store.read_channels(1, OpType.GATE, [ch])
            assert st.n_requests == 1
            singles.update(one)
    assert merged == singles


def test_real_and_sim_modes_identical_bytes(packed):
    with open_store(packed, mode="sim") as sim, open_store(packed, mode="real") as real:
        for op in (OpType.Q, OpType.DOWN):
            a, _ = sim.read_channels(0, op, [0, 3, 7])
            b, _ = real.read_channels(0, op, [0, 3, 7])
            assert a == b
            c, _ = sim.read_layer_channels(1, op, [2, 3])
            d, _ = real.read_layer_channels(1, op, [2, 3])
            assert c == d


def test_channel_runs_decode_to_model_columns(packed, small_model):
    with open_store(packed) as store:
        raw, _ = store.read_channels(1, OpType.UP, [4])
        run = store.decode_run(OpType.UP, raw[4], 2)
    assert np.array_equal(run[0], small_model.tensor(2, OpType.UP).data[:, 4])
    assert np.array_equal(run[1], small_model.tensor(3, OpType.UP).data[:, 4])


def test_layer_reads_only_adjacent_for_group_size_one(tmp_path, small_model, small_spec):
    path = tmp_path / "n1.awsp"
    pack(small_model, 1, path)
    cb = small_spec.channel_bytes(OpType.K)
    with open_store(path) as store:
        _, stats = store.read_layer_channels(2, OpType.K, [4, 5, 6])
    assert stats.n_requests == 1
    assert stats.total_bytes == 3 * cb


def test_layer_reads_not_adjacent_in_grouped_layout(packed, small_spec):
    with open_store(packed) as store:
        _, stats = store.read_layer_channels(0, OpType.K, [4, 5, 6])
    assert stats.n_requests == 3
    assert all(c == small_spec.channel_bytes(OpType.K) for c in stats.chunk_sizes)


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "junk.awsp"
    path.write_bytes(b"NOPE" + b"\0" * 32)
    with pytest.raises(FormatError):
        open_store(path)


def test_out_of_range_reads_rejected(packed):
    with open_store(packed) as store:
        with pytest.raises(InputError):
            store.read_channels(9, OpType.Q, [0])
        with pytest.raises(InputError):
            store.read_channels(0, OpType.Q, [32])
        with pytest.raises(InputError):
            store.read_layer_channels(99, OpType.Q, [0])


# -- bandwidth model ------------------------------------------------------------


def test_throughput_floor_rule():
    bw = BandwidthModel(table=[(4096, 200e6), (65536, 3.6e9)], bw_mem=8e9, req_latency_s=0.0)
    assert bw.throughput(4096) == 200e6
    assert bw.throughput(65535) == 200e6
    assert bw.throughput(65536) == 3.6e9
    assert bw.throughput(10**9) == 3.6e9
    assert bw.throughput(1) == 200e6  # below smallest key: clamp


def test_throughput_table_must_be_nondecreasing():
    with pytest.raises(InputError):
        BandwidthModel(table=[(4096, 3.6e9), (65536, 200e6)], bw_mem=8e9)


def test_simulate_read_time_hand_values():
    bw = BandwidthModel(table=[(4096, 200e6), (65536, 3.6e9)], bw_mem=8e9, req_latency_s=0.0)
    t = simulate_read_time(ReadStats([4096]), bw)
    assert t == pytest.approx(4096 / 200e6, rel=1e-12)  # 20.48 us
    assert simulate_read_time(ReadStats([]), bw) == 0.0


def test_one_large_request_beats_sixteen_small():
    bw = default_profile()
    one = simulate_read_time(ReadStats([65536]), bw)
    sixteen = simulate_read_time(ReadStats([4096] * 16), bw)
    assert one < sixteen


def test_profile_json_round_trip(tmp_path):
    bw = toy_profile()
    path = tmp_path / "profile.json"
    bw.to_json(path)
    again = BandwidthModel.from_json(path)
    assert again.table == bw.table
    assert again.bw_mem == bw.bw_mem
    assert again.req_latency_s == bw.req_latency_s


def test_reordered_layout_never_slower(tmp_path, small_model, small_spec):
    """Reading f active channels of one op across a 4-layer group: the
    cross-layer layout is never slower than four per-layer reads, for any
    active fraction."""
    grouped = tmp_path / "g4.awsp"
    perlayer = tmp_path / "g1.awsp"
    pack(small_model, 4, grouped)
    pack(small_model, 1, perlayer)
    bw = default_profile()
    rng = np.random.default_rng(123)
    _, cols = small_spec.op_shape(OpType.UP)
    with open_store(grouped) as sg, open_store(perlayer) as sl:
        for frac in (0.05, 0.1, 0.25, 0.5, 0.75, 1.0):
            k = max(1, int(round(frac * cols)))
            chans = sorted(rng.choice(cols, size=k, replace=False).tolist())
            _, stats_g = sg.read_channels(0, OpType.UP, chans)
            t_grouped = simulate_read_time(stats_g, bw)
            t_layers = 0.0
            for layer in range(4):
                _, st = sl.read_layer_channels(layer, OpType.UP, chans)
                t_layers += simulate_read_time(st, bw)
            assert t_grouped <= t_layers + 1e-15
