"""Phone-level pronunciation scoring and evaluation toolkit.

Trains linear probes on precomputed frame-level speech representations,
aggregates frame logits into per-phone scores, and evaluates them with
detection-cost metrics (1-AUC, FPR + 2*FNR, MinCost/ActCost) under a
speaker-aware cross-validation and bootstrap protocol.
"""

__version__ = "0.1.0"

from mdprobe.errors import (
    ConfigError,
    DataError,
    MdprobeError,
    NumericError,
)
from mdprobe.phoneset import (
    Phone,
    PhoneInventory,
    SchemeMapping,
    load_default_inventory,
    load_inventory,
    load_scheme,
    normalize_phone,
)

__all__ = [
    "ConfigError",
    "DataError",
    "MdprobeError",
    "NumericError",
    "Phone",
    "PhoneInventory",
    "SchemeMapping",
    "load_default_inventory",
    "load_inventory",
    "load_scheme",
    "normalize_phone",
    "__version__",
]
