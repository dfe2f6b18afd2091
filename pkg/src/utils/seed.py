import os
import random

import numpy as np


def fix_seed(seed: int = 42) -> np.random.Generator:
    """Seed the global generators and return a fresh numpy Generator."""
    random.seed(seed)
    np.random.seed(seed)
    os.environ["PYTHONHASHSEED"] = str(seed)
    return np.random.default_rng(seed)
