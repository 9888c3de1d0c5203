"""Joint-task dense dilated convolution networks on a small numpy autodiff core."""

from .config import RunConfig, load_config
from .model import JointTaskDDCM, NetworkConfig, jt_ddcm_forward, summarize
from .tensor import Tensor, backward, no_grad

__version__ = "0.1.0"

__all__ = ["RunConfig", "load_config", "JointTaskDDCM", "NetworkConfig", "jt_ddcm_forward",
           "summarize", "Tensor", "backward", "no_grad"]
