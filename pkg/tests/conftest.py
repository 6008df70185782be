"""
Shared fixtures for the SplitHE test suite.

Puts the BACKEND folders on sys.path the same way run.py does, switches
logging to the testing environment and provides seeded data.
"""

import os
import sys

ROOT_DIR = os.path.abspath(os.path.join(os.path.dirname(__file__), '..'))
for folder in ('core', 'models', 'routes', 'services', 'database'):
    sys.path.insert(0, os.path.join(ROOT_DIR, 'BACKEND', folder))

import numpy as np
import pytest

from config import HE_PRESETS, TestingConfig, TrainConfig
from dataset import synth_ecg, split_halves
from extensions import init_extensions
from network import ModelSpec

init_extensions(TestingConfig)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope='session')
def m1():
    return ModelSpec.m1()


@pytest.fixture(scope='session')
def synth_split():
    """(train, test) with 240 synthetic beats each."""
    full = synth_ecg(480, seed=3)
    return split_halves(full.samples, full.labels)


@pytest.fixture
def plain_config():
    return TrainConfig(mode='plain', eta=0.001, batch_size=4, epochs=1, seed=11)


@pytest.fixture
def encrypted_config():
    return TrainConfig(mode='encrypted', eta=0.001, batch_size=4, epochs=1, seed=11,
                       he=HE_PRESETS['p4096-40-20-20'])


@pytest.fixture(scope='session')
def keys_4096():
    from ckks import keygen
    return keygen(HE_PRESETS['p4096-40-20-20'], seed=5)


@pytest.fixture(scope='session')
def keys_8192():
    from ckks import keygen
    return keygen(HE_PRESETS['p8192-60-40-40-60'], seed=6)


@pytest.fixture(scope='session')
def keys_2048():
    from ckks import keygen
    return keygen(HE_PRESETS['p2048-18-18-18'], seed=7)
