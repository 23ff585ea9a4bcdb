"""Counter-addressed random streams.

Every uniform variate used during a run is a pure function of
``(seed, stream, t, lane)``: the Philox-4x64 bit generator is keyed by
``(seed, stream)`` and its 256-bit counter is positioned at ``t * width / 4``,
so iteration ``t`` always sees the same block of ``width`` doubles no matter
how iterations are chunked, which agents are evaluated first, or how seeds are
split across workers.

Stream ids pack a purpose tag in the high 32 bits so agent streams, the shared
sample stream of TD learning and initialisation streams never collide.
"""

from __future__ import annotations

import numpy as np

AGENT = 0
SHARED = 1
INIT = 2

#: doubles produced per Philox counter increment
_PER_COUNTER = 4


def stream_id(purpose: int, index: int = 0) -> int:
    if not 0 <= index < 2**32:
        raise ValueError(f"stream index out of range: {index}")
    return (purpose << 32) | index


def padded_width(width: int) -> int:
    return -(-width // _PER_COUNTER) * _PER_COUNTER


def generator(seed: int, stream: int, t: int = 0, width: int = _PER_COUNTER) -> np.random.Generator:
    """Generator positioned at iteration ``t`` of ``(seed, stream)``."""
    w = padded_width(width)
    key = np.array([seed, stream], dtype=np.uint64)
    counter = np.array([t * (w // _PER_COUNTER), 0, 0, 0], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key, counter=counter))


def block(seed: int, stream: int, t0: int, count: int, width: int) -> np.ndarray:
    """Uniforms for iterations ``t0 .. t0+count-1``, shape ``(count, width)``."""
    w = padded_width(width)
    out = generator(seed, stream, t0, w).random(count * w).reshape(count, w)
    return out[:, :width]


def uniform(seed: int, stream: int, t: int, width: int) -> np.ndarray:
    return block(seed, stream, t, 1, width)[0]


class StreamBank:
    """Per-iteration uniforms for a set of seeds and streams.

    ``draw(t)`` returns an array of shape ``(len(seeds), len(streams), width)``.
    Blocks of ``chunk`` iterations are generated at once; values are identical
    to ``uniform(seed, stream, t, width)``.
    """

    def __init__(self, seeds, streams, width: int, chunk: int = 512):
        self.seeds = [int(s) for s in seeds]
        self.streams = [int(s) for s in streams]
        self.width = width
        self.chunk = chunk
        self._t0 = None
        self._buf = None

    def _fill(self, t0: int) -> None:
        buf = np.empty((self.chunk, len(self.seeds), len(self.streams), self.width))
        for a, seed in enumerate(self.seeds):
            for b, stream in enumerate(self.streams):
                buf[:, a, b, :] = block(seed, stream, t0, self.chunk, self.width)
        self._t0 = t0
        self._buf = buf

    def draw(self, t: int) -> np.ndarray:
        if self._buf is None or not self._t0 <= t < self._t0 + self.chunk:
            self._fill(t - t % self.chunk)
        return self._buf[t - self._t0]
