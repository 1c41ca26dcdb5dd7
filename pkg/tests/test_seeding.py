"""Seed-stream derivation and error-type tests."""

import numpy as np
import pytest

from sain.errors import (DivergenceError, IoError, ManifestDriftError,
                         ParseError, SainError, ShapeError)
from sain.seeding import derive_seed, stream_rng


class TestSeedStreams:
    def test_same_inputs_same_seed(self):
        assert derive_seed(0, "init") == derive_seed(0, "init")
        assert derive_seed(42, "shuffle", 3) == derive_seed(42, "shuffle", 3)

    def test_streams_are_independent(self):
        seeds = {derive_seed(0, s) for s in ("split", "init", "shuffle",
                                             "dropout", "sweep")}
        assert len(seeds) == 5

    def test_extra_entropy_changes_the_seed(self):
        assert derive_seed(0, "sweep", 1) != derive_seed(0, "sweep", 2)
        assert derive_seed(0, "sweep", 1) != derive_seed(0, "sweep")

    def test_base_seed_changes_the_seed(self):
        assert derive_seed(0, "init") != derive_seed(1, "init")

    def test_stream_rng_reproduces(self):
        a = stream_rng(7, "shuffle").permutation(20)
        b = stream_rng(7, "shuffle").permutation(20)
        np.testing.assert_array_equal(a, b)

    def test_unknown_stream_rejected(self):
        with pytest.raises(ValueError, match="unknown seed stream"):
            derive_seed(0, "mystery")


class TestErrors:
    def test_categories_and_exit_codes(self):
        cases = [(IoError, "io", 3), (ParseError, "parse", 4),
                 (ShapeError, "shape", 5), (DivergenceError, "divergence", 6),
                 (ManifestDriftError, "manifest-drift", 7)]
        for cls, category, code in cases:
            err = cls("boom")
            assert isinstance(err, SainError)
            assert err.category == category
            assert err.exit_code == code
            assert str(err) == "boom"

    def test_base_error_defaults(self):
        err = SainError("generic")
        assert err.category == "error" and err.exit_code == 1
