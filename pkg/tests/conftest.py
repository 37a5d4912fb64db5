import pytest

from bioir.corpus import Document, compute_stats


@pytest.fixture
def small_docs():
    return [
        Document("d1", "Autophagy in neurons", "Autophagy clears damaged proteins. Neurons rely on it heavily."),
        Document("d2", "Receptor signaling", "The receptor binds its ligand. Signaling cascades follow quickly."),
        Document("d3", "Gene expression", "Expression varies by tissue. The receptor gene is silenced here."),
        Document("d4", "Protein folding", "Folding errors accumulate. Chaperones repair damaged proteins."),
    ]


@pytest.fixture
def small_stats(small_docs):
    return compute_stats(small_docs)
