"""Tests for the thread pool helpers."""

import threading
import time
from unittest.mock import MagicMock, patch

import pytest

from src.errors import UsageError
from src.workers import THREADS_ENV, get_system_info, ordered_map, resolve_threads


class TestResolveThreads:
    def test_explicit_count(self):
        assert resolve_threads({THREADS_ENV: "3"}) == 3

    def test_zero_means_every_cpu(self):
        with patch("src.workers.psutil.cpu_count", return_value=12):
            assert resolve_threads({THREADS_ENV: "0"}) == 12
            assert resolve_threads({}) == 12
            assert resolve_threads({THREADS_ENV: "  "}) == 12

    def test_unknown_cpu_count(self):
        with patch("src.workers.psutil.cpu_count", return_value=None):
            assert resolve_threads({}) == 1

    def test_reads_process_environment(self, monkeypatch):
        monkeypatch.setenv(THREADS_ENV, "2")
        assert resolve_threads() == 2

    @pytest.mark.parametrize("raw", ["two", "1.5", "-1"])
    def test_invalid(self, raw):
        with pytest.raises(UsageError, match=THREADS_ENV):
            resolve_threads({THREADS_ENV: raw})


class TestOrderedMap:
    """Results always come back in input order."""

    def test_order_kept_when_later_items_finish_first(self):
        def slow_for_small(x):
            time.sleep(0.002 * (10 - x))
            return x * x

        assert ordered_map(slow_for_small, range(10), threads=4) == [x * x for x in range(10)]

    def test_single_thread_runs_inline(self):
        seen = []
        ordered_map(lambda _: seen.append(threading.current_thread()), range(3), threads=1)
        assert set(seen) == {threading.current_thread()}

    def test_uses_worker_threads(self):
        names = ordered_map(lambda _: threading.current_thread().name, range(8), threads=4)
        assert all(name.startswith("ScaForge-Worker") for name in names)

    def test_empty(self):
        assert ordered_map(lambda x: x, [], threads=4) == []

    def test_exception_propagates(self):
        def boom(x):
            if x == 3:
                raise ValueError("bad item")
            return x

        with pytest.raises(ValueError, match="bad item"):
            ordered_map(boom, range(6), threads=3)


class TestSystemInfo:
    def test_keys_and_units(self, monkeypatch):
        monkeypatch.setenv(THREADS_ENV, "4")
        mem = MagicMock(total=16 * 1024 ** 3)
        proc = MagicMock()
        proc.memory_info.return_value = MagicMock(rss=256 * 1024 * 1024)
        with patch("src.workers.psutil.virtual_memory", return_value=mem), \
             patch("src.workers.psutil.Process", return_value=proc), \
             patch("src.workers.psutil.cpu_count", return_value=8):
            info = get_system_info()
        assert info == {"cpu_count": 8, "threads": 4, "total_ram_gb": 16.0, "rss_mb": 256.0}
