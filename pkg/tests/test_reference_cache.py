"""
Tests for the persistent reference cache.
"""

import json

import numpy as np
import pytest

from app.exceptions import CacheError
from app.oracle import make_rng
from app.reference_cache import ReferenceCache, array_sha256, reference_key


@pytest.fixture
def cache(tmp_path):
    return ReferenceCache(tmp_path / 'cache')


@pytest.fixture
def arrays():
    rng = make_rng(11)
    x_T = rng.standard_normal((32, 2))
    # values without short decimal forms exercise the 17-digit round trip
    x_ref = np.sin(x_T) / 3.0 + 1e-300
    return x_T, x_ref


FIELDS = {'seed': 11, 'batch': 32, 'n_ref': 1000, 'family': 'ddim'}


class TestReferenceKey:
    """Tests for reference_key and array_sha256."""

    def test_deterministic(self):
        """The key ignores field order."""
        assert reference_key(FIELDS) == reference_key(dict(reversed(list(FIELDS.items()))))

    def test_sensitive_to_fields(self):
        """Any field change changes the key."""
        assert reference_key(FIELDS) != reference_key({**FIELDS, 'seed': 12})

    def test_array_hash(self, arrays):
        """Equal arrays hash equally."""
        x_T, _ = arrays
        assert array_sha256(x_T) == array_sha256(x_T.copy())
        changed = x_T.copy()
        changed[0, 0] = np.nextafter(changed[0, 0], np.inf)
        assert array_sha256(changed) != array_sha256(x_T)


class TestReferenceCache:
    """Tests for ReferenceCache."""

    def test_miss_returns_none(self, cache):
        """A missing entry loads as None."""
        assert cache.load(reference_key(FIELDS)) is None

    def test_store_then_load_is_bit_identical(self, cache, arrays):
        """Stored arrays load back bit for bit."""
        x_T, x_ref = arrays
        key = reference_key(FIELDS)
        cache.store(key, FIELDS, x_T, x_ref)
        entry = cache.load(key)
        assert entry is not None
        assert np.array_equal(entry.x_T, x_T)
        assert np.array_equal(entry.x_ref, x_ref)
        assert entry.fields == FIELDS
        assert entry.x_T_sha256 == array_sha256(x_T)

    def test_metadata_sidecar(self, cache, arrays):
        """The sidecar records the fields and content hashes."""
        key = reference_key(FIELDS)
        cache.store(key, FIELDS, *arrays)
        _, meta_path = cache.paths(key)
        meta = json.loads(meta_path.read_text(encoding='utf-8'))
        assert meta['key'] == key
        assert (meta['dim'], meta['batch']) == (2, 32)
        assert len(meta['content_sha256']) == 64

    def test_store_replaces_entry(self, cache, arrays):
        """Storing again replaces the entry."""
        x_T, x_ref = arrays
        key = reference_key(FIELDS)
        cache.store(key, FIELDS, x_T, x_ref)
        cache.store(key, FIELDS, x_T, x_ref * 2.0)
        assert np.array_equal(cache.load(key).x_ref, x_ref * 2.0)
        assert not list(cache.cache_dir.glob('*.tmp.*'))

    def test_corrupted_content(self, cache, arrays):
        """Edited content fails its hash check."""
        key = reference_key(FIELDS)
        cache.store(key, FIELDS, *arrays)
        csv_path, _ = cache.paths(key)
        text = csv_path.read_text(encoding='utf-8')
        csv_path.write_text(text.replace('1', '2', 1), encoding='utf-8')
        with pytest.raises(CacheError):
            cache.load(key)

    def test_corrupted_metadata(self, cache, arrays):
        """An unreadable sidecar raises CacheError."""
        key = reference_key(FIELDS)
        cache.store(key, FIELDS, *arrays)
        _, meta_path = cache.paths(key)
        meta_path.write_text('{not json', encoding='utf-8')
        with pytest.raises(CacheError):
            cache.load(key)

    def test_shape_mismatch(self, cache, arrays):
        """Unpaired arrays are refused."""
        x_T, _ = arrays
        with pytest.raises(CacheError):
            cache.store(reference_key(FIELDS), FIELDS, x_T, x_T[:4])

    def test_invalidate(self, cache, arrays):
        """Invalidated entries are gone."""
        key = reference_key(FIELDS)
        cache.store(key, FIELDS, *arrays)
        assert cache.contains(key)
        cache.invalidate(key)
        assert not cache.contains(key)
        assert cache.load(key) is None
        cache.invalidate(key)
