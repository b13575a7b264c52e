import numpy as np
import pytest

from app.workers.episode_producer import EpisodeProducer


def _draw(rng: np.random.Generator) -> float:
    return float(rng.random())


def test_single_worker_is_deterministic():
    with EpisodeProducer(_draw, seed=5) as a, EpisodeProducer(_draw, seed=5) as b:
        assert [a.get() for _ in range(10)] == [b.get() for _ in range(10)]
        assert a.deterministic


def test_saved_state_continues_the_sequence():
    producer = EpisodeProducer(_draw, seed=1)
    [producer.get() for _ in range(3)]
    state = producer.rng_state()
    expected = [producer.get() for _ in range(4)]
    resumed = EpisodeProducer(_draw, seed=999, state=state)
    assert [resumed.get() for _ in range(4)] == expected


def test_multiple_workers_produce_batches():
    with EpisodeProducer(_draw, seed=2, workers=3, queue_size=4) as producer:
        values = [producer.get(timeout=5) for _ in range(20)]
        assert producer.rng_state() is None
        assert len(producer.threads) == 3
    assert all(0.0 <= v < 1.0 for v in values)
    assert len(set(values)) == 20
    assert not producer.threads


def test_worker_failure_is_raised_in_consumer():
    def broken(rng: np.random.Generator) -> float:
        raise RuntimeError("bad episode")

    with EpisodeProducer(broken, seed=0, workers=2) as producer:
        with pytest.raises(RuntimeError, match="bad episode"):
            producer.get(timeout=5)


def test_single_worker_failure_propagates_directly():
    def broken(rng: np.random.Generator) -> float:
        raise ValueError("no subjects")

    with pytest.raises(ValueError):
        EpisodeProducer(broken, seed=0).get()
