import csv
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest

DATA = Path(__file__).parent / "data"


def read_table(name: str) -> list[dict]:
    with open(DATA / name, newline="") as fh:
        return list(csv.DictReader(fh))


def frac(s: str) -> Fraction:
    return Fraction(s)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
