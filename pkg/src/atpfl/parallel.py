"""Order-preserving process-pool map.

Results always come back in input order, so anything reduced from them in
that order is independent of worker scheduling.
"""
import multiprocessing as mp
import os
from concurrent.futures import ProcessPoolExecutor


def default_jobs():
    return os.cpu_count() or 1


class OrderedPool:
    """Thin wrapper: serial when ``jobs <= 1``, process pool otherwise."""

    def __init__(self, jobs=1, initializer=None, initargs=()):
        self.jobs = max(1, int(jobs))
        self._initializer = initializer
        self._initargs = initargs
        self._ex = None
        if self.jobs > 1:
            self._ex = ProcessPoolExecutor(
                max_workers=self.jobs, mp_context=mp.get_context("fork"),
                initializer=initializer, initargs=initargs)
        elif initializer is not None:
            initializer(*initargs)

    def map(self, fn, items):
        items = list(items)
        if self._ex is None:
            return [fn(x) for x in items]
        return list(self._ex.map(fn, items))

    def close(self):
        if self._ex is not None:
            self._ex.shutdown()
            self._ex = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def ordered_map(fn, items, jobs=1):
    with OrderedPool(jobs) as pool:
        return pool.map(fn, items)
