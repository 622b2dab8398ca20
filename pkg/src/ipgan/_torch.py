from __future__ import annotations

import contextlib

import numpy as np
import torch


def images_to_tensor(X, dtype=torch.float32):
    """NHWC numpy batch -> NCHW tensor."""
    return torch.from_numpy(np.ascontiguousarray(np.asarray(X).transpose(0, 3, 1, 2))).to(dtype)


def tensor_to_images(t):
    """NCHW tensor -> NHWC float32 numpy batch."""
    return t.detach().cpu().numpy().transpose(0, 2, 3, 1).astype(np.float32)


@contextlib.contextmanager
def seeded(seed):
    """Run a block under a fixed torch seed without disturbing the global RNG."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(seed))
        yield


def derive_seed(*keys):
    """Stable 63-bit integer from a tuple of non-negative ints."""
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(2, np.uint64)[0] >> np.uint64(1))


def epoch_generator(seed, epoch, stream=0):
    g = torch.Generator()
    g.manual_seed(derive_seed(seed, epoch, stream))
    return g
