"""Manifest-backed paired dataset and batching helpers.

Records point at sharp/blurred PNG pairs relative to the manifest's
directory. Images are decoded once and cached; the whole corpus is tiny.
"""

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .blursynth import load_png
from .errors import InvalidParameterError


@dataclass
class SampleRecord:
    id: str
    split: str
    sharp_path: Path
    blurred_path: Path
    boxes: list
    blur: dict


def load_manifest(manifest_path):
    """Parse a JSONL manifest into records with paths resolved."""
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise FileNotFoundError(f"manifest not found: {manifest_path}")
    root = manifest_path.parent
    records = []
    with open(manifest_path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as exc:
                raise InvalidParameterError(f"{manifest_path}:{lineno}: bad manifest line: {exc}") from exc
            records.append(
                SampleRecord(
                    id=raw["id"],
                    split=raw["split"],
                    sharp_path=root / raw["sharp_path"],
                    blurred_path=root / raw["blurred_path"],
                    boxes=[tuple(b) for b in raw["boxes"]],
                    blur=raw["blur"],
                )
            )
    return records


class PairDataset:
    """Sharp/blurred pairs for one split, decoded lazily and cached."""

    def __init__(self, records, split):
        self.records = [r for r in records if r.split == split]
        if not self.records:
            raise InvalidParameterError(f"no records for split '{split}'")
        self.split = split
        self._cache = {}

    def __len__(self):
        return len(self.records)

    def __getitem__(self, i):
        if i not in self._cache:
            rec = self.records[i]
            sharp = torch.from_numpy(load_png(rec.sharp_path)).unsqueeze(0)
            blurred = torch.from_numpy(load_png(rec.blurred_path)).unsqueeze(0)
            self._cache[i] = (sharp, blurred, rec.boxes)
        return self._cache[i]

    def batches(self, batch_size, rng=None):
        """Yield (sharp, blurred, boxes_list, indices) batches.

        Order is shuffled when an rng is given, sequential otherwise.
        """
        order = np.arange(len(self))
        if rng is not None:
            rng.shuffle(order)
        for start in range(0, len(order), batch_size):
            idx = order[start : start + batch_size]
            sharp = torch.stack([self[i][0] for i in idx])
            blurred = torch.stack([self[i][1] for i in idx])
            boxes = [self[i][2] for i in idx]
            yield sharp, blurred, boxes, [int(i) for i in idx]
