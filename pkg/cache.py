"""
Computation Cache
In-process LRU cache for transform plans and kernel factorizations
"""

import fnmatch
import logging
import threading
from collections import OrderedDict
from functools import wraps
from typing import Any, Callable, Optional

from config import get_settings

logger = logging.getLogger(__name__)


class Cache:
    """Bounded least-recently-used cache keyed by strings"""

    def __init__(self, max_entries: Optional[int] = None):
        if max_entries is None:
            max_entries = get_settings().cache_entries
        self.max_entries = max_entries
        self.store: "OrderedDict[str, Any]" = OrderedDict()
        self.hits = 0
        self.misses = 0
        self._lock = threading.Lock()

    def get(self, key: str) -> Optional[Any]:
        """
        Get value from cache

        Args:
            key: Cache key

        Returns:
            Cached value or None if not present
        """
        with self._lock:
            if key not in self.store:
                self.misses += 1
                return None
            self.hits += 1
            self.store.move_to_end(key)
            return self.store[key]

    def set(self, key: str, value: Any) -> bool:
        """Store value, evicting the least recently used entry when full"""
        if self.max_entries <= 0:
            return False
        with self._lock:
            self.store[key] = value
            self.store.move_to_end(key)
            while len(self.store) > self.max_entries:
                evicted, _ = self.store.popitem(last=False)
                logger.debug(f"Cache evicted: {evicted}")
        return True

    def delete(self, key: str) -> bool:
        with self._lock:
            return self.store.pop(key, None) is not None

    def exists(self, key: str) -> bool:
        with self._lock:
            return key in self.store

    def clear(self, pattern: Optional[str] = None) -> int:
        """
        Clear cache

        Args:
            pattern: Optional glob pattern (e.g., 'nudft:*')

        Returns:
            Number of keys deleted
        """
        with self._lock:
            if pattern is None:
                count = len(self.store)
                self.store.clear()
                return count
            keys = [k for k in self.store if fnmatch.fnmatch(k, pattern)]
            for k in keys:
                del self.store[k]
            return len(keys)

    def stats(self) -> dict:
        with self._lock:
            return {"entries": len(self.store), "hits": self.hits, "misses": self.misses}


# Global cache instance
_cache = None


def get_cache() -> Cache:
    """Get or create global cache instance"""
    global _cache
    if _cache is None:
        _cache = Cache()
    return _cache


# ===================
# Decorators
# ===================

def memoize(key_prefix: str, key_fn: Callable[..., str]):
    """
    Decorator caching a pure function's result under key_prefix:key_fn(*args)

    Usage:
        @memoize("nudft", lambda disc, modes: f"{disc.key()}:{modes}")
        def build_plan(disc, modes):
            ...
    """
    def decorator(f: Callable) -> Callable:
        @wraps(f)
        def decorated_function(*args, **kwargs):
            cache_key = f"{key_prefix}:{key_fn(*args, **kwargs)}"
            return CachePatterns.get_or_set(cache_key, lambda: f(*args, **kwargs))

        return decorated_function
    return decorator


class CachePatterns:
    """Common caching patterns"""

    @staticmethod
    def get_or_set(key: str, factory: Callable[[], Any]) -> Any:
        """
        Get from cache or compute and set

        Args:
            key: Cache key
            factory: Function to compute value if not cached

        Returns:
            Cached or computed value
        """
        cache = get_cache()
        value = cache.get(key)
        if value is not None:
            logger.debug(f"Cache hit: {key[:64]}")
            return value
        value = factory()
        cache.set(key, value)
        return value
