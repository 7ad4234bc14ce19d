"""
Persistent pseudo-ground-truth references with pandas serialization.

Each entry is `<key>.csv` (initial noises and reference endpoints, written with 17
significant digits so they read back bit-identical) plus `<key>.json` with the key
fields and content hashes. The key is the SHA-256 of the canonical JSON of everything
that determines the reference.
"""

import fcntl
import hashlib
import json
import logging
import os
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd

from app.exceptions import CacheError
from app.experiment_config import canonical_json
from app.logger import SamplerLogger


@dataclass(frozen=True)
class ReferenceEntry:
    """Initial noises and reference endpoints of one cached reference."""

    key: str
    x_T: np.ndarray
    x_ref: np.ndarray
    fields: dict

    @property
    def x_T_sha256(self) -> str:
        return array_sha256(self.x_T)


def array_sha256(array: np.ndarray) -> str:
    """Hash of the float64 bytes of an array."""
    return hashlib.sha256(np.ascontiguousarray(array, dtype=np.float64).tobytes()).hexdigest()


def reference_key(fields: dict) -> str:
    return hashlib.sha256(canonical_json(fields).encode('utf-8')).hexdigest()


class ReferenceCache:
    """Keyed store of pseudo-ground-truth reference batches."""

    def __init__(self, cache_dir, encoding: str = 'utf-8'):
        self.cache_dir = Path(cache_dir)
        self.encoding = encoding

    def paths(self, key: str):
        return self.cache_dir / f"{key}.csv", self.cache_dir / f"{key}.json"

    def contains(self, key: str) -> bool:
        csv_path, meta_path = self.paths(key)
        return csv_path.exists() and meta_path.exists()

    def load(self, key: str) -> Optional[ReferenceEntry]:
        """Return the entry for key, None on a miss; corrupted entries raise CacheError."""
        if not self.contains(key):
            SamplerLogger.log(logging.INFO, f"Reference cache miss: {key[:12]}")
            return None
        csv_path, meta_path = self.paths(key)
        try:
            meta = json.loads(meta_path.read_text(encoding=self.encoding))
            content = csv_path.read_bytes()
        except (OSError, ValueError) as e:
            raise CacheError(f"Failed to read cache entry {csv_path}: {e}")
        if hashlib.sha256(content).hexdigest() != meta.get('content_sha256'):
            raise CacheError(f"Cache entry {csv_path} does not match its stored content hash")

        try:
            frame = pd.read_csv(csv_path, encoding=self.encoding, float_precision='round_trip')
        except Exception as e:
            raise CacheError(f"Failed to parse cache entry {csv_path}: {e}")
        dim = int(meta['dim'])
        x_T = frame[[f"xT_{i}" for i in range(dim)]].to_numpy(dtype=np.float64)
        x_ref = frame[[f"x0_{i}" for i in range(dim)]].to_numpy(dtype=np.float64)
        entry = ReferenceEntry(key=key, x_T=x_T, x_ref=x_ref, fields=meta['fields'])
        if entry.x_T_sha256 != meta.get('xT_sha256'):
            raise CacheError(f"Initial noises of {csv_path} do not match their stored hash")
        SamplerLogger.log(logging.INFO, f"Reference cache hit: {key[:12]}")
        return entry

    def store(self, key: str, fields: dict, x_T: np.ndarray, x_ref: np.ndarray) -> ReferenceEntry:
        """Write an entry under an exclusive lock; replaces any existing one atomically."""
        x_T = np.asarray(x_T, dtype=np.float64)
        x_ref = np.asarray(x_ref, dtype=np.float64)
        if x_T.shape != x_ref.shape or x_T.ndim != 2:
            raise CacheError(f"Reference arrays must share a (batch, dim) shape, got {x_T.shape}, {x_ref.shape}")
        dim = x_T.shape[1]
        columns = {f"xT_{i}": x_T[:, i] for i in range(dim)}
        columns.update({f"x0_{i}": x_ref[:, i] for i in range(dim)})
        content = pd.DataFrame(columns).to_csv(index=False, float_format='%.17g', lineterminator='\n')
        content = content.encode(self.encoding)
        meta = {
            'key': key,
            'fields': fields,
            'dim': dim,
            'batch': int(x_T.shape[0]),
            'content_sha256': hashlib.sha256(content).hexdigest(),
            'xT_sha256': array_sha256(x_T),
        }

        csv_path, meta_path = self.paths(key)
        try:
            self.cache_dir.mkdir(parents=True, exist_ok=True)
            with self._locked(key):
                _atomic_write(csv_path, content)
                _atomic_write(meta_path, json.dumps(meta, indent=2, sort_keys=True).encode(self.encoding))
        except OSError as e:
            raise CacheError(f"Failed to write cache entry {csv_path}: {e}")
        SamplerLogger.log(logging.INFO, f"Stored reference {key[:12]} ({x_T.shape[0]} x {dim})")
        return ReferenceEntry(key=key, x_T=x_T, x_ref=x_ref, fields=fields)

    def invalidate(self, key: str):
        for path in self.paths(key):
            if path.exists():
                path.unlink()

    @contextmanager
    def _locked(self, key: str):
        with open(self.cache_dir / f"{key}.lock", 'w') as lock:
            fcntl.flock(lock, fcntl.LOCK_EX)
            try:
                yield
            finally:
                fcntl.flock(lock, fcntl.LOCK_UN)


def _atomic_write(path: Path, content: bytes):
    tmp = path.with_name(f"{path.name}.tmp.{os.getpid()}")
    tmp.write_bytes(content)
    os.replace(tmp, path)
