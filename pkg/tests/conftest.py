from __future__ import annotations

import random

import pytest
from hypothesis import HealthCheck, settings

from batchdex.fixedpoint import KEY_SHIFT, ONE, Price
from batchdex.model import Offer, OfferId
from batchdex.txengine import BlockState

# one line per acceptance criterion, printed at the end of the run
RESULTS: dict[int, tuple[bool, str]] = {}


def record(criterion: int, ok: bool, detail: str) -> bool:
    RESULTS[criterion] = (ok, detail)
    return ok


def pytest_terminal_summary(terminalreporter) -> None:
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(RESULTS):
        ok, detail = RESULTS[n]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")


settings.register_profile("batchdex", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("batchdex")


def key_price(value: float) -> int:
    """Raw price rounded down to key precision."""
    return max(1 << KEY_SHIFT, int(value * ONE) >> KEY_SHIFT << KEY_SHIFT)


def random_offers(
    rng: random.Random,
    n_assets: int,
    count: int,
    valuations: list[float] | None = None,
    spread: tuple[float, float] = (0.8, 1.25),
    pairs: list[tuple[int, int]] | None = None,
    max_endowment: int = 10**6,
) -> list[Offer]:
    vals = valuations or [rng.uniform(0.3, 3.0) for _ in range(n_assets)]
    out = []
    for i in range(count):
        a, b = rng.choice(pairs) if pairs else rng.sample(range(n_assets), 2)
        rate = vals[a] / vals[b] * rng.uniform(*spread)
        out.append(Offer(a, b, rng.randint(1, max_endowment), Price(key_price(rate)), OfferId(i // 50 + 1, i % 50 + 1)))
    return out


def funded_state(n_assets: int = 4, accounts: int = 20, balance: int = 10**9) -> BlockState:
    return BlockState.genesis(n_assets, {a: {k: balance for k in range(n_assets)} for a in range(accounts)})


@pytest.fixture
def rng() -> random.Random:
    return random.Random(1234)
