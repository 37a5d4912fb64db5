"""Synthetic desk-scale corpus with known answers.

Every document gets a few planted entity tokens that occur nowhere else, woven
into two consecutive abstract sentences; the rest of the abstract is filler
from a shared vocabulary. Queries are reduced sentences naming exactly one
document's entities, so qrels are exact by construction. A question file and
an entity lexicon accompany the corpus so the template pipeline can run end
to end on the fixture.

Everything derives from one seed through Python's random module; identical
seeds give byte-identical files.
"""

from __future__ import annotations

import os
import random
from dataclasses import dataclass

from . import ConfigError
from .corpus import Document, save_corpus, write_jsonl
from .fusion_eval import write_qrels

DEFAULT_N_DOCS = 200
DEFAULT_VOCAB = 120

_SYLLABLES = [
    c + v for c in "bdfglmnprstvz" for v in ("a", "e", "i", "o", "u")
]

# Question shapes for the training-question file. SLOT takes an entity; the
# braces take fixed common words so extracted templates overlap corpus text.
_SHAPE_PATTERNS = [
    "Which {w} process is driven by SLOT?",
    "Is SLOT involved in the {w} pathway?",
    "What {w} level changes when SLOT is blocked?",
    "Does SLOT regulate {w} signaling?",
    "Where is SLOT detected in {w} tissue?",
]

_SHAPE_VERBS = ["driven", "involved", "blocked", "regulate", "detected"]


@dataclass
class FixturePaths:
    corpus: str
    queries: str
    qrels: str
    train_questions: str
    lexicon: str


def _make_vocab(rng: random.Random, size: int) -> list[str]:
    words: list[str] = []
    seen = set()
    while len(words) < size:
        word = "".join(rng.choice(_SYLLABLES) for _ in range(rng.randint(2, 3)))
        if word not in seen:
            seen.add(word)
            words.append(word)
    return words


def _sentence(rng: random.Random, vocab: list[str], n_words: int,
              plant: list[str] | None = None) -> str:
    words = [rng.choice(vocab) for _ in range(n_words)]
    if plant:
        # Entities go at interior positions so they never carry sentence case.
        positions = rng.sample(range(1, len(words) + 1), len(plant))
        for pos, ent in zip(sorted(positions, reverse=True), plant):
            words.insert(pos, ent)
    words[0] = words[0].capitalize()
    return " ".join(words) + "."


def make_synthetic_fixture(
    out_dir: str,
    seed: int = 1,
    n_docs: int = DEFAULT_N_DOCS,
    vocab_size: int = DEFAULT_VOCAB,
) -> FixturePaths:
    """Write corpus, queries, qrels, training questions, and lexicon files.

    n_docs documents produce n_docs // 2 queries, each referencing the planted
    entities of exactly one document.
    """
    if n_docs < 10:
        raise ConfigError(f"fixture needs at least 10 documents, got {n_docs}")
    if vocab_size < 30:
        raise ConfigError(f"fixture needs a vocabulary of at least 30 words, got {vocab_size}")
    os.makedirs(out_dir, exist_ok=True)
    rng = random.Random(seed)
    vocab = _make_vocab(rng, vocab_size)

    docs = []
    entities_by_doc: dict[str, list[str]] = {}
    answer_sentences: dict[str, str] = {}
    for i in range(n_docs):
        doc_id = f"d{i:04d}"
        entities = [f"ent{i:04d}{chr(97 + j)}" for j in range(rng.randint(2, 3))]
        entities_by_doc[doc_id] = entities
        n_sent = rng.randint(5, 7)
        answer_at = rng.randint(0, n_sent - 2)
        sentences = []
        for s in range(n_sent):
            if s == answer_at or s == answer_at + 1:
                sentences.append(_sentence(rng, vocab, rng.randint(6, 9), plant=entities))
            else:
                sentences.append(_sentence(rng, vocab, rng.randint(8, 12)))
        answer_sentences[doc_id] = sentences[answer_at]
        title = " ".join(rng.choice(vocab) for _ in range(rng.randint(3, 5))).capitalize()
        docs.append(Document(doc_id, title, " ".join(sentences)))

    query_docs = sorted(rng.sample(range(n_docs), n_docs // 2))
    queries = []
    qrels: dict[str, set[str]] = {}
    for qnum, doc_idx in enumerate(query_docs):
        doc_id = f"d{doc_idx:04d}"
        entities = entities_by_doc[doc_id]
        answer_tokens = answer_sentences[doc_id].rstrip(".").lower().split()
        commons = [t for t in answer_tokens if t not in entities]
        keep = set(entities) | set(rng.sample(commons, min(2, len(commons))))
        reduced = [t for t in answer_tokens if t in keep]
        query_id = f"q{qnum:04d}"
        queries.append({"query_id": query_id, "text": " ".join(reduced)})
        qrels[query_id] = {doc_id}

    shape_words = rng.sample(vocab, len(_SHAPE_PATTERNS))
    shapes = [p.format(w=w) for p, w in zip(_SHAPE_PATTERNS, shape_words)]
    questions = []
    for i in range(n_docs):
        doc_id = f"d{i:04d}"
        shape = rng.choice(shapes)
        entity = rng.choice(entities_by_doc[doc_id])
        questions.append(
            {"question_id": f"tq{i:04d}", "text": shape.replace("SLOT", entity)}
        )

    paths = FixturePaths(
        corpus=os.path.join(out_dir, "corpus.jsonl"),
        queries=os.path.join(out_dir, "queries.jsonl"),
        qrels=os.path.join(out_dir, "qrels.tsv"),
        train_questions=os.path.join(out_dir, "train_questions.jsonl"),
        lexicon=os.path.join(out_dir, "lexicon.tsv"),
    )
    save_corpus(paths.corpus, docs)
    write_jsonl(paths.queries, queries)
    write_qrels(paths.qrels, qrels)
    write_jsonl(paths.train_questions, questions)
    with open(paths.lexicon, "w", encoding="utf-8") as fh:
        for doc_id in sorted(entities_by_doc):
            for ent in entities_by_doc[doc_id]:
                fh.write(f"{ent}\tnoun\n")
        for verb in _SHAPE_VERBS:
            fh.write(f"{verb}\tverb\n")
    return paths
