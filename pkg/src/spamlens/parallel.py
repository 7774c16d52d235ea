"""
Ordered fan-out of independent evaluations.
"""
from typing import Callable, Iterable, List, Optional

from joblib import Parallel, delayed


def map_ordered(fn: Callable, items: Iterable, threads: Optional[int] = None) -> List:
    """Apply ``fn`` to every item, possibly concurrently, keeping input order.

    Runs on joblib's thread backend, so ``fn`` may be a closure; numpy
    releases the GIL inside the heavy kernels.

    Args:
        fn (callable): Function of one item.
        items (iterable): Inputs.
        threads (int, optional): Worker count. None uses every core, 1 runs
            inline.

    Returns:
        list: ``[fn(item) for item in items]``.
    """
    items = list(items)
    if threads == 1 or len(items) <= 1:
        return [fn(item) for item in items]
    n_jobs = -1 if threads is None else threads
    return Parallel(n_jobs=n_jobs, prefer="threads")(delayed(fn)(item) for item in items)
