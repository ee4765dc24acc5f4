"""Backend selection for the seen/unseen sweep kernels.

The compiled extension is used when it was built; otherwise the numpy
fallback is used. Setting ``GFSL_KERNELS=python`` forces the fallback.
"""
import os

from . import _kernels_py

if os.environ.get("GFSL_KERNELS", "").lower() == "python":
    _impl = _kernels_py
else:
    try:
        from ._ext import _kernels as _impl
    except ImportError:
        _impl = _kernels_py

BACKEND = _impl.BACKEND
joint_correct_counts = _impl.joint_correct_counts
su_curve = _impl.su_curve
ausuc_area = _impl.ausuc_area
