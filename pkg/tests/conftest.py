"""Shared fixtures: tiny catalogs, hand-built dialogue batches, small models."""

from __future__ import annotations

import numpy as np
import pytest

from slotgen.config import RunConfig
from slotgen.corpus import CatalogItem, DialogueRecord, KBStore, Turn, generate_catalog, generate_kb
from slotgen.model import DialogueModel
from slotgen.text import build_vocab


@pytest.fixture(scope="session")
def tiny_catalog():
    return generate_catalog(40, seed=7)


@pytest.fixture(scope="session")
def tiny_kb():
    return generate_kb(seed=7)


def handbuilt_records() -> tuple[list[CatalogItem], KBStore, list[DialogueRecord]]:
    """Two short dialogues exercising images, KB references, and all tag kinds."""
    catalog = [
        CatalogItem(0, "bag", "red", "leather", "small", "zara", "499"),
        CatalogItem(1, "hat", "blue", "wool", "large", "nike", "299"),
    ]
    kb = KBStore(
        celebrities={"arjun": ["zara", "puma"], "meera": ["nike"]},
        queries={"party": {"color": "black", "item_type": "dress"}},
    )
    records = [
        DialogueRecord(
            "g0",
            [
                Turn("user", ["show", "red", "leather", "bag"], [],
                     ["O", "B-color", "B-material", "B-item_type"], None),
                Turn("system", ["here", "are", "red", "leather", "bag"], [0, 1], None, None),
                Turn("user", ["will", "arjun", "endorse", "this"], [],
                     ["O", "O", "O", "O"], "celebrity:arjun"),
                Turn("system", ["yes", "arjun", "endorses", "zara"], [], None, None),
            ],
        ),
        DialogueRecord(
            "g1",
            [
                Turn("user", ["show", "blue", "wool", "hat"], [],
                     ["O", "B-color", "B-material", "B-item_type"], None),
                Turn("system", ["here", "are", "blue", "wool", "hat"], [1], None, None),
                Turn("user", ["what", "is", "the", "1st", "price"], [],
                     ["O", "O", "O", "B-position", "O"], None),
                Turn("system", ["the", "1st", "costs", "299"], [], None, None),
            ],
        ),
    ]
    return catalog, kb, records


def build_tiny_model(
    records, catalog, kb, variant="mhred", d_h=16, nudge=True, **kwargs
) -> DialogueModel:
    """Small model over the records' vocabulary, optionally nudged off the
    zero-bias / ReLU-kink points so finite differences are well defined."""
    defaults = dict(d_e=8, d_img=8, dropout_sa=0.0, seed=3)
    defaults.update(kwargs)
    cfg = RunConfig(variant=variant, d_h=d_h, **defaults)
    vocab = build_vocab((t.tokens for r in records for t in r.turns), 1)
    model = DialogueModel(cfg, vocab, catalog, kb)
    if nudge:
        rng = np.random.default_rng(99)
        for p in model.params.values():
            p.data = p.data + rng.uniform(0.02, 0.12, size=p.data.shape) * rng.choice(
                [-1.0, 1.0], size=p.data.shape
            )
    return model
