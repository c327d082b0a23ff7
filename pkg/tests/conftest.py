import numpy as np
import pytest

from weatherseg.sequence import FrameSequence
from weatherseg.weather import BenchmarkProfile, generate_benchmark

TINY_PROFILE = BenchmarkProfile(n_train=3, n_val=2, seq_length=6, height=16, width=16, n_objects=2)


def make_sequence(values, h=2, w=2, c=1, num_classes=3, seed=0, sequence_id="s"):
    """Sequence whose frame i is filled with ``values[i]``; labels are random."""
    rng = np.random.default_rng(seed)
    frames = [np.full((h, w, c), v, dtype=np.float32) for v in values]
    labels = [rng.integers(0, num_classes, (h, w)) for _ in values]
    return FrameSequence(sequence_id, frames, labels)


@pytest.fixture(scope="session")
def tiny_benchmark(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny_bench")
    generate_benchmark(root, TINY_PROFILE)
    return root
