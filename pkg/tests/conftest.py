"""Shared fixtures: a default synthetic corpus, generated once per session."""

import pytest

from sinmt import synthdata as sd


@pytest.fixture(scope="session")
def corpus_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    sd.generate_corpus(sd.CorpusConfig(), out)
    return out


@pytest.fixture(scope="session")
def corpus(corpus_dir):
    return sd.read_manifest(corpus_dir)
