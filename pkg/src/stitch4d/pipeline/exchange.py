"""File-exchange contract with an external view-completion model.

For each target view and frame the pipeline writes a record directory::

    exchange/<target_view>/<frame>/record.json
    exchange/<target_view>/<frame>/projected.png   # warped target image
    exchange/<target_view>/<frame>/mask.png        # pixels to synthesize
    exchange/<target_view>/<frame>/completed.png   # written by the completer
    exchange/<target_view>/<frame>/ff_depth.pfm    # completer's target depth

The record starts ``pending``; the pipeline marks it ``completed`` once both
outputs exist, or ``failed`` on timeout.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from ..errors import ExchangeTimeoutError, InvalidArgumentError
from ..frames import BitMask, DepthFrame, RgbFrame
from ..io import atomic_write_text, read_mask, read_pfm, read_rgb, write_mask, write_pfm, write_rgb

_TRANSITIONS = {"pending": {"completed", "failed"}, "completed": set(), "failed": set()}


@dataclass
class ExchangeRecord:
    target_view: str
    frame_idx: int
    projected: str
    mask: str
    completed: str
    ff_depth: str
    status: str = "pending"

    def transition(self, status: str) -> None:
        if status not in _TRANSITIONS.get(self.status, set()):
            raise InvalidArgumentError(f"illegal status change {self.status} -> {status}")
        self.status = status

    @property
    def directory(self) -> Path:
        return Path(self.projected).parent

    def save(self) -> None:
        atomic_write_text(self.directory / "record.json", json.dumps(asdict(self), indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "ExchangeRecord":
        with open(path) as f:
            return cls(**json.load(f))


def record_dir(exchange_root, target_view: str, frame_idx: int) -> Path:
    return Path(exchange_root) / target_view / f"{frame_idx:04d}"


def post_request(exchange_root, target_view: str, frame_idx: int, projected: RgbFrame, mask: BitMask) -> ExchangeRecord:
    d = record_dir(exchange_root, target_view, frame_idx)
    rec = ExchangeRecord(
        target_view, int(frame_idx), str(d / "projected.png"), str(d / "mask.png"),
        str(d / "completed.png"), str(d / "ff_depth.pfm"),
    )
    write_rgb(rec.projected, projected)
    write_mask(rec.mask, mask)
    rec.save()
    return rec


def await_completion(rec: ExchangeRecord, timeout: float, poll: float = 0.05) -> tuple[RgbFrame, DepthFrame]:
    deadline = time.monotonic() + timeout
    while True:
        if Path(rec.completed).exists() and Path(rec.ff_depth).exists():
            rgb, d = read_rgb(rec.completed), read_pfm(rec.ff_depth)
            rec.transition("completed")
            rec.save()
            return rgb, d
        if time.monotonic() >= deadline:
            rec.transition("failed")
            rec.save()
            raise ExchangeTimeoutError(
                f"no completed image for view {rec.target_view!r} frame {rec.frame_idx} after {timeout:g}s"
            )
        time.sleep(poll)


def oracle_complete(projected: RgbFrame, mask: BitMask, gt_target: RgbFrame) -> RgbFrame:
    """Test stand-in for the completion model: ground truth inside the mask."""
    dims = {(f.height, f.width) for f in (projected, mask, gt_target)}
    if len(dims) != 1:
        raise InvalidArgumentError("dimension mismatch")
    return RgbFrame(np.where(mask.bits[..., None], gt_target.data, projected.data))


def corrupt_depth(depth: DepthFrame, scale: float, shift: float, noise: float, seed: int) -> DepthFrame:
    """Feed-forward depth stand-in: ``(D - shift) / scale`` with relative Gaussian noise.

    The correction a refiner must recover is therefore ``s = scale``,
    ``b = shift``.
    """
    rng = np.random.default_rng(seed)
    d = depth.data.astype(np.float64)
    out = (d - shift) / scale
    if noise:
        out = out * (1.0 + noise * rng.standard_normal(d.shape))
    return DepthFrame(np.where(depth.valid, out, 0.0).astype(np.float32), depth.valid & (out > 0))


def oracle_respond(rec: ExchangeRecord, gt_rgb: RgbFrame, gt_depth: DepthFrame, scale, shift, noise, seed) -> None:
    """Answer a pending record the way an external completer would."""
    projected, mask = read_rgb(rec.projected), read_mask(rec.mask)
    write_pfm(rec.ff_depth, corrupt_depth(gt_depth, scale, shift, noise, seed))
    write_rgb(rec.completed, oracle_complete(projected, mask, gt_rgb))
