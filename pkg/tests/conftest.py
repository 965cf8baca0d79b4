import itertools

import numpy as np
import pytest

from qbound import _core_py
from qbound.norms import NormProfile, StageNorm

try:
    from qbound import _core
except ImportError:
    _core = None

KERNEL_BACKENDS = [("numpy", _core_py)] + (
    [("compiled", _core)] if _core is not None else []
)


@pytest.fixture(params=KERNEL_BACKENDS, ids=[n for n, _ in KERNEL_BACKENDS])
def kernel_impl(request):
    """Run a kernel-level test against every available backend."""
    return request.param[1]


def make_profile(rs, width=4, domain_d=1.0, has_bias=False, sparse=None,
                 widths=None):
    """NormProfile from raw per-stage norms, for formula-level tests."""
    rs = list(rs)
    if widths is None:
        widths = [width] * (len(rs) + 1)
    stages = tuple(
        StageNorm(
            r=float(r),
            width_in=widths[i],
            width_out=widths[i + 1],
            sparse_width=None if sparse is None else sparse[i],
            conv=None,
            kind="conv" if sparse is not None else "dense",
        )
        for i, r in enumerate(rs)
    )
    return NormProfile(stages=stages, domain_d=domain_d, has_bias=has_bias)


def sign_vectors(n):
    """All 2^n vectors with entries in {-1, +1}."""
    return [np.array(bits) for bits in itertools.product((-1.0, 1.0), repeat=n)]
