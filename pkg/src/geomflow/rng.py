"""Deterministic noise substreams for Monte Carlo runs.

Every path owns a fixed block of the Philox counter space, keyed by the
master seed and a task label. The value drawn for (seed, task, path k,
step j) therefore never depends on chunking, thread count or the order in
which paths are processed, which is what makes reruns bit-reproducible.

Normals are produced by inverse-CDF transform of the raw counter output,
so the per-path word consumption is a fixed function of the request shape.
"""

from __future__ import annotations

import hashlib

import numpy as np
from scipy.special import ndtri

_TWO53 = float(2**53)


def _canon_id(value) -> int:
    """Map a task label (int or str) to a stable non-negative integer."""
    if isinstance(value, (int, np.integer)):
        return int(value) & (2**63 - 1)
    if isinstance(value, str):
        digest = hashlib.sha256(value.encode("utf8")).digest()
        return int.from_bytes(digest[:8], "little") & (2**63 - 1)
    raise TypeError(f"task id must be int or str, got {type(value)!r}")


class NoiseStream:
    """Per-path noise blocks keyed by (master_seed, *task_ids).

    Parameters
    ----------
    master_seed:
        Non-negative integer seed for the whole experiment.
    task_ids:
        Labels (ints or strings) separating independent uses of the same
        master seed, e.g. different estimators or nested inner loops.
    """

    def __init__(self, master_seed: int, *task_ids):
        self.master_seed = int(master_seed)
        self.task_ids = tuple(task_ids)
        entropy = (self.master_seed,) + tuple(_canon_id(t) for t in task_ids)
        seq = np.random.SeedSequence(entropy)
        k = seq.generate_state(2, dtype=np.uint64)
        self._key = int(k[0]) | (int(k[1]) << 64)

    def child(self, *task_ids) -> "NoiseStream":
        """Derive an independent stream for a sub-task."""
        return NoiseStream(self.master_seed, *(self.task_ids + task_ids))

    def block(
        self,
        path_lo: int,
        path_hi: int,
        n_steps: int,
        normals_per_step: int,
        uniforms_per_step: int = 0,
    ):
        """Draw the noise block for paths ``path_lo .. path_hi - 1``.

        Returns ``(normals, uniforms)`` with shapes
        ``(n, n_steps, normals_per_step)`` and ``(n, n_steps)`` (or ``None``
        when no uniforms were requested; only one uniform per step is
        supported). Row ``i`` depends only on the stream identity and the
        absolute path index ``path_lo + i``.
        """
        if path_hi <= path_lo:
            raise ValueError("empty path range")
        if uniforms_per_step not in (0, 1):
            raise ValueError("uniforms_per_step must be 0 or 1")
        n = path_hi - path_lo
        words = n_steps * (normals_per_step + uniforms_per_step)
        blocks_per_path = (words + 3) // 4  # 4 uint64 words per counter value
        bg = np.random.Philox(key=self._key, counter=path_lo * blocks_per_path)
        raw = bg.random_raw(n * blocks_per_path * 4)
        raw = raw.reshape(n, blocks_per_path * 4)[:, :words]
        u = (raw >> np.uint64(11)).astype(np.float64) / _TWO53 + 0.5 / _TWO53
        nw = n_steps * normals_per_step
        normals = ndtri(u[:, :nw]).reshape(n, n_steps, normals_per_step)
        uniforms = None
        if uniforms_per_step:
            uniforms = np.ascontiguousarray(u[:, nw:].reshape(n, n_steps))
        return np.ascontiguousarray(normals), uniforms

    def generator(self, *ids) -> np.random.Generator:
        """A stand-alone Generator for auxiliary draws (not path noise)."""
        entropy = (
            (self.master_seed,)
            + tuple(_canon_id(t) for t in self.task_ids)
            + tuple(_canon_id(t) for t in ids)
        )
        return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))
