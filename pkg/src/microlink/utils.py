import hashlib
import json
from collections.abc import Callable, Iterable
from multiprocessing import Pool, cpu_count
from typing import Any, TypeVar

T = TypeVar("T")
R = TypeVar("R")


def parallel_map(func: Callable[[T], R], items: Iterable[T], workers: int = 1) -> list[R]:
    """Map `func` over `items`, in a process pool when more than one worker is requested.

    Results are returned in input order either way.
    """
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [func(item) for item in items]
    with Pool(processes=min(workers, cpu_count(), len(items))) as pool:
        return pool.map(func, items)


def derive_seed(*parts: Any) -> int:
    """Return a 64-bit seed determined by the values and bytes of `parts` (numbers or numpy arrays)."""
    digest = hashlib.blake2b(digest_size=8)
    for part in parts:
        digest.update(part.tobytes() if hasattr(part, "tobytes") else repr(part).encode())
        digest.update(b"|")
    return int.from_bytes(digest.digest(), "little")


def fingerprint(payload: dict[str, Any]) -> str:
    """Return a short, stable hash of a JSON-serialisable mapping."""
    canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(canonical.encode()).hexdigest()[:12]
