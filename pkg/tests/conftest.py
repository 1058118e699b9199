import numpy as np
import pytest

from flowsr.seqcore import Prng


@pytest.fixture
def rng():
    return Prng(1234)


def rand_array(rng: Prng, shape, lo=-1.0, hi=1.0):
    return rng.uniform(lo, hi, shape)
