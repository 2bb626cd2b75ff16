import numpy as np
import pytest

from ran_kit.caption_grammar import Internal, Leaf, StructureOp

ALL_OPS = list(StructureOp)


def make_random_tree(rng, depth, radicals, max_arity=3):
    """Independent recursive tree builder used as the round-trip oracle."""
    if depth == 0 or rng.random() < 0.3:
        return Leaf(str(rng.choice(radicals)))
    op = ALL_OPS[rng.integers(len(ALL_OPS))]
    arity = int(rng.integers(2, max_arity + 1))
    children = tuple(
        make_random_tree(rng, depth - 1, radicals, max_arity) for _ in range(arity)
    )
    return Internal(op, children)


@pytest.fixture
def rng():
    return np.random.default_rng(20260822)
