import numpy as np
import pytest
import torch

from cospeech.corpus import CorpusParams, make_synthetic_corpus


@pytest.fixture(scope="session", autouse=True)
def torch_threads():
    torch.set_num_threads(2)


@pytest.fixture(scope="session")
def tiny_params():
    return CorpusParams(
        num_clips=8,
        duration_s=2.0,
        event_rate=0.15,
        num_speakers=2,
        num_emotions=2,
        seed=11,
        beat_phase_jitter=1.0,
    )


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory, tiny_params):
    root = tmp_path_factory.mktemp("tiny_corpus")
    manifest = make_synthetic_corpus(tiny_params, root)
    return root, manifest
