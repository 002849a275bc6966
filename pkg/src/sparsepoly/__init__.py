"""Floating-point sound polyhedral verification of feed-forward, convolutional
and residual ReLU networks."""
import os as _os

# numba reads this once at import; allow up to 8 workers even on small hosts
_os.environ.setdefault("NUMBA_NUM_THREADS", str(max(_os.cpu_count() or 1, 8)))
_os.environ.setdefault("NUMBA_THREADING_LAYER", "omp")

from .interval import Interval, SoundnessMode  # noqa: E402
from .network import InputBox, Network, build_network, load_model, save_model  # noqa: E402
from .backsub import BacksubOptions  # noqa: E402
from .analyzer import analyze, relu_relaxation, verify_robustness  # noqa: E402

__all__ = ["Interval", "SoundnessMode", "InputBox", "Network", "build_network", "load_model",
           "save_model", "BacksubOptions", "analyze", "relu_relaxation", "verify_robustness"]
