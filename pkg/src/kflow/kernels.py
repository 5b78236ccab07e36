"""Backend selection for the hot kernels.

The compiled module is used when it imports; set ``KFL_BACKEND=python``
to force the numpy fallback.
"""
import os

from . import _pykernels

python_backend = _pykernels

if os.environ.get("KFL_BACKEND", "").lower() in ("python", "py", "numpy"):
    _impl = _pykernels
else:
    try:
        from . import _ckernels as _impl
    except ImportError:
        _impl = _pykernels

BACKEND = "cython" if _impl is not _pykernels else "python"

try:
    from . import _ckernels as compiled_backend
except ImportError:
    compiled_backend = None

TV = _pykernels.TV
W1 = _pykernels.W1

chain_product = _impl.chain_product
poisson_products = _impl.poisson_products
tensor_moments = _impl.tensor_moments
select_rows = _impl.select_rows
compose_site_maps = _impl.compose_site_maps
