"""Per-link Bernoulli loss, the per-flow loss parameters derived from it,
and the generation-based loss estimator used by simulated nodes."""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass

WINDOW = 10


class LossError(ValueError):
    pass


@dataclass(frozen=True)
class LossMatrix:
    rates: dict  # (i, j) -> rho; a link missing here never delivers

    def __post_init__(self):
        for link, r in self.rates.items():
            if not 0.0 <= r <= 1.0:
                raise LossError(f"loss on {link[0]}->{link[1]} is {r}, outside [0, 1]")

    @classmethod
    def for_links(cls, links, overrides=None):
        rates = {l: 0.0 for l in links}
        for l, r in (overrides or {}).items():
            if l not in rates:
                raise LossError(f"loss given for {l[0]}->{l[1]}, which is not a link")
            rates[l] = float(r)
        return cls(rates)

    def rho(self, i, j):
        return self.rates.get((i, j), 1.0)

    def lossless(self):
        return all(r == 0.0 for r in self.rates.values())


def direct_loss(loss, h, s):
    """Loss seen by flow s on hyperarc h: the link to s's next hop."""
    if h.transmitter not in s.forwarders() or s.next_hop(h.transmitter) not in h.receivers:
        raise LossError(f"flow {s.id} does not cross hyperarc {h.id}")
    return loss.rho(h.transmitter, s.next_hop(h.transmitter))


def antidote_loss(loss, h, code, s, other):
    """Probability that s's next hop misses the packet of `other` it needs
    to strip from an XOR sent on (h, code)."""
    if s.id not in code or other.id not in code:
        raise LossError(f"flows {s.id}, {other.id} are not both in code {code}")
    if s.id == other.id:
        return 0.0
    nh = s.next_hop(h.transmitter)
    origin = other.prev_hop(h.transmitter)
    if origin == nh:
        return 0.0
    if origin is None:
        return 1.0
    return loss.rho(origin, nh)


def generation_sample(received, G):
    return 0.0 if received >= G else (G - received) / G


class LossEstimator:
    """Weighted mean of the last 10 per-generation samples; the n-th newest
    sample has weight 1/n."""

    def __init__(self, window=WINDOW):
        self.samples = deque(maxlen=window)

    def add(self, sample):
        self.samples.appendleft(min(1.0, max(0.0, sample)))
        return self.estimate()

    def estimate(self, default=0.0):
        if not self.samples:
            return default
        num = den = 0.0
        for n, v in enumerate(self.samples, 1):
            num += v / n
            den += 1.0 / n
        return num / den

    def __len__(self):
        return len(self.samples)


def record_generation(estimator, sent_total, received, G):
    if not 0 <= received <= sent_total:
        raise LossError("received must lie in [0, sent_total]")
    return estimator.add(generation_sample(received, G))


def draw(rng, rho):
    """True when the transmission is delivered. rng needs a .random() method."""
    if rho <= 0.0:
        return True
    if rho >= 1.0:
        return False
    return rng.random() >= rho
