import itertools

import numpy as np
import pytest

from dpflows.errors import CapacityError, OrderingFault, UsageError
from dpflows.memmodel import MemSim, MemSpec, TrafficReport, merge_reports


def make_sim(capacity=1024, width=8):
    return MemSim(MemSpec(scratchpad_capacity_bytes=capacity, dtype_width_bytes=width))


def test_memspec_rejects_bad_width_and_capacity():
    with pytest.raises(UsageError):
        MemSpec(scratchpad_capacity_bytes=64, dtype_width_bytes=3)
    with pytest.raises(UsageError):
        MemSpec(scratchpad_capacity_bytes=0)


def test_kernel_launch_counting_and_nesting():
    sim = make_sim()
    sim.begin_kernel()
    assert sim.report().kernel_launches == 1
    with pytest.raises(UsageError):
        sim.begin_kernel()
    sim.end_kernel()
    with pytest.raises(UsageError):
        sim.end_kernel()
    with sim.kernel():
        pass
    assert sim.report().kernel_launches == 2


def test_load_byte_arithmetic():
    sim = MemSim(MemSpec(4096, dtype_width_bytes=4))
    src = sim.alloc_main(64)
    with sim.kernel():
        sim.load_to_scratch(src, elements=10)
        sim.load_to_scratch(src, elements=20)
    assert sim.report().bytes_loaded == 120

    sim8 = make_sim(capacity=4096, width=8)
    src8 = sim8.alloc_main(64)
    with sim8.kernel():
        sim8.load_to_scratch(src8, elements=48)
    assert sim8.report().bytes_loaded == 384


def test_loads_require_open_kernel():
    sim = make_sim()
    src = sim.alloc_main(8)
    with pytest.raises(UsageError):
        sim.load_to_scratch(src, elements=4)
    with pytest.raises(UsageError):
        sim.record_flops(2)
    with pytest.raises(UsageError):
        sim.barrier()


def test_capacity_error_reports_requested_and_available():
    sim = make_sim(capacity=64, width=8)
    src = sim.alloc_main(32)
    with sim.kernel():
        sim.load_to_scratch(src, elements=4)  # 32 of 64 bytes
        with pytest.raises(CapacityError) as err:
            sim.load_to_scratch(src, elements=8)  # needs 64 more
    assert err.value.requested_bytes == 64
    assert err.value.available_bytes == 32


def test_load_more_than_region_holds_is_usage_error():
    sim = make_sim()
    src = sim.alloc_main(4)
    with sim.kernel():
        with pytest.raises(UsageError):
            sim.load_to_scratch(src, elements=5)


def test_store_more_than_region_holds_is_usage_error():
    sim = make_sim()
    src = sim.alloc_main(16)
    dst = sim.alloc_main(4)
    with sim.kernel():
        tile = sim.load_to_scratch(src, elements=8)
        with pytest.raises(UsageError):
            sim.store_to_main(tile, dst)


def test_store_tags_split_per_sample_bytes():
    sim = make_sim()
    src = sim.alloc_main(16, values=np.arange(16.0))
    dst = sim.alloc_main(16)
    with sim.kernel():
        tile = sim.load_to_scratch(src, elements=8)
        sim.store_to_main(tile, dst, elements=8, tag="per_sample_grad")
        sim.store_to_main(tile, dst, elements=4)
    rep = sim.report()
    assert rep.bytes_stored == 96
    assert rep.per_sample_grad_bytes_stored == 64
    assert dst.data[:8].tolist() == list(range(8))


def test_scratch_does_not_survive_kernel():
    sim = make_sim()
    src = sim.alloc_main(8)
    dst = sim.alloc_main(8)
    with sim.kernel():
        tile = sim.load_to_scratch(src, elements=4)
    with sim.kernel():
        with pytest.raises(UsageError):
            sim.store_to_main(tile, dst)
    # freed bytes are reusable in the next kernel
    assert sim.report().peak_scratch_bytes == 32


def test_atomic_accumulate_values_and_order_independence():
    sim = make_sim()
    dst = sim.alloc_main(2)
    with sim.kernel():
        sim.atomic_accumulate(dst, np.array([45.0, 200.0]))
        sim.barrier()
        assert sim.read_main(dst).tolist() == [45.0, 200.0]
        sim.atomic_accumulate(dst, np.array([1.0, 1.0]))
        sim.barrier()
        assert sim.read_main(dst).tolist() == [46.0, 201.0]
    assert sim.report().bytes_stored == 32

    contributions = [3.0, 45.0, 200.0]
    finals = []
    for order in itertools.permutations(contributions):
        s = make_sim()
        d = s.alloc_main(1)
        with s.kernel():
            for v in order:
                s.atomic_accumulate(d, np.array([v]))
            s.barrier()
            finals.append(s.read_main(d)[0])
    assert max(finals) - min(finals) <= 1e-12


def test_read_before_barrier_is_ordering_fault():
    sim = make_sim()
    dst = sim.alloc_main(2)
    with sim.kernel():
        sim.atomic_accumulate(dst, np.array([1.0, 2.0]))
        with pytest.raises(OrderingFault):
            sim.load_to_scratch(dst, elements=2)


def test_read_after_barrier_is_permitted():
    sim = make_sim()
    dst = sim.alloc_main(2)
    with sim.kernel():
        sim.atomic_accumulate(dst, np.array([1.0, 2.0]))
        sim.barrier()
        tile = sim.load_to_scratch(dst, elements=2)
        assert tile.data.tolist() == [1.0, 2.0]


def test_barrier_with_no_pending_still_counts():
    sim = make_sim()
    with sim.kernel():
        sim.barrier()
        sim.barrier()
    assert sim.report().barriers == 2


def test_kernel_end_synchronizes_pending_accumulations():
    sim = make_sim()
    dst = sim.alloc_main(1)
    with sim.kernel():
        sim.atomic_accumulate(dst, np.array([5.0]))
    with sim.kernel():
        tile = sim.load_to_scratch(dst, elements=1)
        assert tile.data[0] == 5.0


def test_peak_scratch_tracks_high_water():
    sim = make_sim(capacity=1024, width=8)
    src = sim.alloc_main(128)
    with sim.kernel():
        a = sim.load_to_scratch(src, elements=16)  # 128 bytes
        b = sim.load_to_scratch(src, elements=32)  # 384 total
        sim.free_scratch(a)
        sim.free_scratch(b)
        sim.load_to_scratch(src, elements=8)
    assert sim.report().peak_scratch_bytes == 384


def test_redundant_flops_never_exceed_flops():
    sim = make_sim()
    with sim.kernel():
        sim.record_flops(10)
        sim.record_flops(6, redundant=True)
    rep = sim.report()
    assert rep.flops == 16
    assert rep.redundant_flops == 6
    assert rep.redundant_flops <= rep.flops


def test_report_serializes_exact_field_names_in_order():
    keys = list(TrafficReport().to_dict())
    assert keys == [
        "bytes_loaded", "bytes_stored", "flops", "redundant_flops",
        "barriers", "kernel_launches", "peak_scratch_bytes",
        "per_sample_grad_bytes_stored",
    ]


def test_merge_reports_sums_counters_and_maxes_peak():
    a = TrafficReport(bytes_loaded=10, bytes_stored=2, flops=5, barriers=1,
                      kernel_launches=1, peak_scratch_bytes=64)
    b = TrafficReport(bytes_loaded=4, bytes_stored=6, flops=3, redundant_flops=3,
                      kernel_launches=2, peak_scratch_bytes=32)
    m = merge_reports([a, b])
    assert m.bytes_loaded == 14 and m.bytes_stored == 8
    assert m.flops == 8 and m.redundant_flops == 3
    assert m.kernel_launches == 3 and m.barriers == 1
    assert m.peak_scratch_bytes == 64


def test_tile_loads_with_index_selection():
    sim = make_sim(capacity=4096)
    src = sim.alloc_main((2, 3, 4), values=np.arange(24.0).reshape(2, 3, 4))
    with sim.kernel():
        tile = sim.load_to_scratch(src, index=np.s_[0:1, 1:3, 0:2])
        assert tile.data.shape == (1, 2, 2)
        assert tile.data.ravel().tolist() == [4.0, 5.0, 8.0, 9.0]
    assert sim.report().bytes_loaded == 4 * 8
