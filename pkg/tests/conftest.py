import pytest

from gdi import Database, EngineConfig, World


@pytest.fixture
def make_db():
    """Factory for small databases driven from the host thread."""
    def build(ranks=2, block_size=128, blocks_per_rank=512, index_capacity=2048, delay=0.0):
        world = World(ranks, delay=delay)
        config = EngineConfig(block_size=block_size, blocks_per_rank=blocks_per_rank,
                              index_capacity=index_capacity)
        return Database(world, config)
    return build


@pytest.fixture
def db(make_db):
    return make_db()
