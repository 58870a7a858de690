import logging

import torch

__version__ = '0.1.0'

# 64-bit floats everywhere
DTYPE = torch.float64

logging.getLogger(__name__).addHandler(logging.NullHandler())
